//! Experiment drivers. Each writes its outputs under `config.out` and
//! returns a summary for the caller to print or inspect.

use std::path::{Path, PathBuf};

use plateau_core::gauss::{self, random_psd, Kernel, McEstimate};
use plateau_core::macroscopic::{self, integrate, MacroConfig};
use plateau_core::micro::{self, init_weights, run_micro_from};
use plateau_core::plateau::{detect_plateau, PlateauReport};
use plateau_core::rng::{self, Stream};
use plateau_core::{Activation, EigenSpectrum, Error, GaussianCov, OrderParameterState, SimConfig, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Micro horizon when `--t-end` is not given.
pub const DEFAULT_MICRO_T_END: f64 = 100.0;

/// `compare` picks its horizon where the macro `ε_g` has fallen this many
/// times below the plateau height.
pub const EXIT_DROP: f64 = 4.0;

/// Points of the common `α̃` grid used by `compare`.
pub const COMPARE_GRID: usize = 1001;

/// Largest tolerated `|closed form − Monte Carlo|` in standard errors.
pub const GAUSS_Z_LIMIT: f64 = 4.0;

/// `# `-prefixed header lines identifying the run.
pub fn provenance(command: &str, cfg: &ExperimentConfig) -> Vec<String> {
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    vec![
        format!("plateau-dyn {}", env!("CARGO_PKG_VERSION")),
        format!("command: {command}"),
        format!("config-sha256: {}", cfg.hash()),
        format!("seeds: {}", seeds.join(",")),
        format!("config: {}", cfg.to_json()),
    ]
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, contents).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, &text)
}

fn write_trajectory(path: &Path, traj: &Trajectory, header: &[String]) -> Result<()> {
    write_file(path, &traj.to_csv_string(header))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn sim_config(cfg: &ExperimentConfig, seed: u64, t_end: f64) -> SimConfig {
    SimConfig {
        n: cfg.n,
        k: cfg.k,
        m: cfg.m,
        eta: cfg.eta,
        soft_committee: cfg.soft_committee,
        seed,
        steps: (t_end * cfg.n as f64).ceil().max(1.0) as u64,
        record_every: cfg.record_every,
    }
}

fn macro_config(cfg: &ExperimentConfig, spectrum: &EigenSpectrum, t_end: f64) -> MacroConfig {
    let mut mc = MacroConfig::new(cfg.eta, spectrum.clone(), t_end);
    mc.freeze_second_layer = cfg.soft_committee;
    mc.record_every = cfg.macro_record_every;
    if let Some(dt) = cfg.dt {
        mc.dt = dt;
    }
    mc
}

/// Macro run from `state0` until `ε_g < stop_below` (or `t_max`).
fn converged_run(cfg: &ExperimentConfig, spectrum: &EigenSpectrum, state0: &OrderParameterState) -> Result<Trajectory> {
    if cfg.eta == 0.0 {
        return Err(CliError::Usage("eta = 0 never converges; pass --t-end".into()));
    }
    let mut mc = macro_config(cfg, spectrum, cfg.t_max);
    mc.stop_below = Some(cfg.stop_below);
    Ok(integrate(state0, &mc)?)
}

/// Plateau report, with a non-converging run reported as not found.
fn plateau_or_degenerate(traj: &Trajectory, cfg: &ExperimentConfig) -> Result<PlateauReport> {
    match detect_plateau(traj, &cfg.plateau_params()) {
        Ok(r) => Ok(r),
        Err(Error::DegenerateTerminal(speed)) => Ok(PlateauReport {
            found: false,
            start_alpha: 0.0,
            end_alpha: 0.0,
            length: 0.0,
            height: 0.0,
            terminal_speed: speed,
            params: cfg.plateau_params(),
            runs: Vec::new(),
        }),
        Err(e) => Err(e.into()),
    }
}

/// Horizon at which the macro curve from `state0` has left its plateau:
/// the first record after the plateau with `ε_g ≤ height / EXIT_DROP`,
/// rounded up to a multiple of 10.
pub fn auto_horizon(cfg: &ExperimentConfig, spectrum: &EigenSpectrum, state0: &OrderParameterState) -> Result<f64> {
    let traj = converged_run(cfg, spectrum, state0)?;
    let report = plateau_or_degenerate(&traj, cfg)?;
    let (after, level) = if report.found { (report.end_alpha, report.height) } else { (0.0, traj.points[0].eps_g) };
    let target = level / EXIT_DROP;
    let alpha = traj
        .points
        .iter()
        .find(|p| p.alpha >= after && p.eps_g <= target)
        .map(|p| p.alpha)
        .unwrap_or_else(|| traj.points.last().map(|p| p.alpha).unwrap_or(cfg.t_max));
    Ok((alpha / 10.0).ceil().max(1.0) * 10.0)
}

/// Mean and max of `|log₁₀ a − log₁₀ b|` on `points` uniform `α̃` values
/// covering the common range, with linear interpolation in `α̃`.
pub fn log10_deviation(a: &Trajectory, b: &Trajectory, points: usize) -> Option<(f64, f64)> {
    let lo = a.points.first()?.alpha.max(b.points.first()?.alpha);
    let hi = a.points.last()?.alpha.min(b.points.last()?.alpha);
    if hi < lo || points < 2 {
        return None;
    }
    let (mut sum, mut max) = (0.0, 0.0f64);
    for g in 0..points {
        let alpha = if g == points - 1 { hi } else { lo + (hi - lo) * g as f64 / (points - 1) as f64 };
        let d = (a.eps_at(alpha)?.log10() - b.eps_at(alpha)?.log10()).abs();
        sum += d;
        max = max.max(d);
    }
    Some((sum / points as f64, max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub micro_file: String,
    pub mean_abs_dlog10: f64,
    pub max_abs_dlog10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub t_end: f64,
    pub grid_points: usize,
    /// Seed of the shared initial weights.
    pub weight_seed: u64,
    /// Deviation of the first seed's micro curve from the macro curve.
    pub mean_abs_dlog10: f64,
    pub max_abs_dlog10: f64,
    pub seeds: Vec<SeedComparison>,
}

/// Micro runs (one per seed, sharing the first seed's initial weights)
/// against the macro run started from those weights' order parameters.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    let spectrum = cfg.parsed_spectrum()?;
    let weight_seed = cfg.seeds[0];
    let weights = init_weights(&sim_config(cfg, weight_seed, 1.0))?;
    let state0 = micro::macro_state_from_weights(&weights, &spectrum)?;
    let t_end = match cfg.t_end {
        Some(t) => t,
        None => auto_horizon(cfg, &spectrum, &state0)?,
    };
    let header = provenance("compare", cfg);

    let macro_traj = integrate(&state0, &macro_config(cfg, &spectrum, t_end))?;
    write_trajectory(&cfg.out.join("macro.csv"), &macro_traj, &header)?;

    let runs: Vec<Result<(u64, Trajectory)>> = pool(cfg.jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let (traj, _) = run_micro_from(weights.clone(), &sim_config(cfg, seed, t_end), &spectrum)?;
                Ok((seed, traj))
            })
            .collect()
    });
    let mut seeds = Vec::new();
    for (idx, run) in runs.into_iter().enumerate() {
        let (seed, traj) = run?;
        let name = if idx == 0 { "micro.csv".to_string() } else { format!("micro_seed{seed}.csv") };
        write_trajectory(&cfg.out.join(&name), &traj, &header)?;
        let (mean, max) = log10_deviation(&traj, &macro_traj, COMPARE_GRID)
            .ok_or_else(|| CliError::Numerical("micro and macro runs share no time range".into()))?;
        seeds.push(SeedComparison { seed, micro_file: name, mean_abs_dlog10: mean, max_abs_dlog10: max });
    }
    let report = CompareReport {
        t_end,
        grid_points: COMPARE_GRID,
        weight_seed,
        mean_abs_dlog10: seeds[0].mean_abs_dlog10,
        max_abs_dlog10: seeds[0].max_abs_dlog10,
        seeds,
    };
    write_json(&cfg.out.join("compare_report.json"), &report)?;
    Ok(report)
}

/// Independent micro runs, one per seed, each with its own weights.
pub fn cmd_micro(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let spectrum = cfg.parsed_spectrum()?;
    let t_end = cfg.t_end.unwrap_or(DEFAULT_MICRO_T_END);
    let header = provenance("micro", cfg);
    let runs: Vec<Result<PathBuf>> = pool(cfg.jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let sim = sim_config(cfg, seed, t_end);
                let traj = micro::run_micro(&sim, &spectrum)?;
                let path = cfg.out.join(format!("micro_seed{seed}.csv"));
                write_trajectory(&path, &traj, &header)?;
                Ok(path)
            })
            .collect()
    });
    runs.into_iter().collect()
}

/// Macro runs from sampled initial states (one per seed) or from a saved
/// state. Without `--t-end` each run continues until `ε_g < stop_below`.
/// The final state is written next to each curve for resuming.
pub fn cmd_macro(cfg: &ExperimentConfig, init_state: Option<&Path>) -> Result<Vec<PathBuf>> {
    let spectrum = cfg.parsed_spectrum()?;
    let header = provenance("macro", cfg);
    let run = |state0: &OrderParameterState| -> Result<Trajectory> {
        match cfg.t_end {
            Some(t) => Ok(integrate(state0, &macro_config(cfg, &spectrum, t))?),
            None => converged_run(cfg, &spectrum, state0),
        }
    };
    let save = |traj: &Trajectory, stem: &str| -> Result<PathBuf> {
        let path = cfg.out.join(format!("{stem}.csv"));
        write_trajectory(&path, traj, &header)?;
        if let Some(state) = &traj.final_state {
            write_file(&cfg.out.join(format!("{}.json", stem.replacen("macro", "state", 1))), &state.to_json())?;
        }
        Ok(path)
    };

    if let Some(path) = init_state {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let state = OrderParameterState::from_json(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        return Ok(vec![save(&run(&state)?, "macro")?]);
    }
    let runs: Vec<Result<PathBuf>> = pool(cfg.jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let state0 = macroscopic::random_initial_state(&spectrum, cfg.k, cfg.m, cfg.n_effective, seed)?;
                save(&run(&state0)?, &format!("macro_seed{seed}"))
            })
            .collect()
    });
    runs.into_iter().collect()
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauRow {
    pub seed: u64,
    pub mu1: f64,
    /// `Δλ` for the `μ₂` sweep.
    pub delta_lambda: Option<f64>,
    pub mu2: f64,
    pub report: PlateauReport,
    pub curve: String,
}

struct GridPoint {
    mu1: f64,
    delta_lambda: Option<f64>,
    spectrum: EigenSpectrum,
    stem: String,
}

fn run_sweep(cfg: &ExperimentConfig, command: &str, grid: Vec<GridPoint>) -> Result<Vec<PlateauRow>> {
    let header = provenance(command, cfg);
    let tasks: Vec<(u64, &GridPoint)> = cfg.seeds.iter().flat_map(|&s| grid.iter().map(move |g| (s, g))).collect();
    let rows: Vec<Result<PlateauRow>> = pool(cfg.jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(seed, point)| {
                let state0 = macroscopic::random_initial_state(&point.spectrum, cfg.k, cfg.m, cfg.n_effective, seed)?;
                let traj = converged_run(cfg, &point.spectrum, &state0)?;
                let report = plateau_or_degenerate(&traj, cfg)?;
                let curve = format!("curves/{}_seed{seed}.csv", point.stem);
                write_trajectory(&cfg.out.join(&curve), &traj, &header)?;
                if cfg.micro {
                    let horizon = cfg.t_end.unwrap_or_else(|| traj.points.last().map_or(1.0, |p| p.alpha));
                    let sim = sim_config(cfg, seed, horizon);
                    let micro_traj = micro::run_micro(&sim, &point.spectrum)?;
                    let path = cfg.out.join(format!("curves/{}_seed{seed}_micro.csv", point.stem));
                    write_trajectory(&path, &micro_traj, &header)?;
                }
                Ok(PlateauRow {
                    seed,
                    mu1: point.mu1,
                    delta_lambda: point.delta_lambda,
                    mu2: point.spectrum.moment(2),
                    report,
                    curve,
                })
            })
            .collect()
    });
    rows.into_iter().collect()
}

fn write_table(cfg: &ExperimentConfig, command: &str, rows: &[PlateauRow]) -> Result<()> {
    let mut text = String::new();
    for line in provenance(command, cfg) {
        text.push_str(&format!("# {line}\n"));
    }
    let mu2_sweep = rows.iter().any(|r| r.delta_lambda.is_some());
    text.push_str(if mu2_sweep { "delta_lambda,mu2,length,height,found" } else { "mu1,length,height,found" });
    text.push_str(",seed,start_alpha,end_alpha,terminal_speed\n");
    for r in rows {
        let p = &r.report;
        let lead = match r.delta_lambda {
            Some(dl) => format!("{dl},{}", r.mu2),
            None => r.mu1.to_string(),
        };
        text.push_str(&format!(
            "{lead},{},{},{},{},{},{},{}\n",
            p.length, p.height, p.found, r.seed, p.start_alpha, p.end_alpha, p.terminal_speed
        ));
    }
    write_file(&cfg.out.join("plateau_table.csv"), &text)
}

/// Plateau length and height against `μ₁` for `Σ = μ₁ I`.
pub fn cmd_sweep_mu1(cfg: &ExperimentConfig) -> Result<Vec<PlateauRow>> {
    let grid = cfg
        .mu1_grid
        .iter()
        .map(|&mu1| {
            Ok(GridPoint { mu1, delta_lambda: None, spectrum: EigenSpectrum::scalar(mu1)?, stem: format!("mu1_{mu1}") })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = run_sweep(cfg, "sweep-mu1", grid)?;
    write_table(cfg, "sweep-mu1", &rows)?;
    Ok(rows)
}

/// Plateau length and height against `μ₂` for two equally weighted
/// eigenvalues `μ₁ ± Δλ/2`.
pub fn cmd_sweep_mu2(cfg: &ExperimentConfig) -> Result<Vec<PlateauRow>> {
    let mu1 = cfg.mu1;
    let mut grid = Vec::new();
    for &dl in &cfg.delta_grid {
        if dl >= 2.0 * mu1 {
            return Err(CliError::Usage(format!("InvalidDelta: delta_lambda = {dl} >= 2 mu1 = {} gives a negative eigenvalue", 2.0 * mu1)));
        }
        grid.push(GridPoint {
            mu1,
            delta_lambda: Some(dl),
            spectrum: EigenSpectrum::split_pair(mu1, dl)?,
            stem: format!("dl_{dl}"),
        });
    }
    let rows = run_sweep(cfg, "sweep-mu2", grid)?;
    write_table(cfg, "sweep-mu2", &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueSummary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    /// Equal-width bins over `[min, max]`.
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub rows: usize,
    pub dim: usize,
    pub scale: f64,
    pub normalization: plateau_core::DataNormalization,
    /// `μ₁..μ₄`.
    pub moments: Vec<f64>,
    pub eigenvalues: EigenvalueSummary,
    /// Compressed spectrum in `--spectrum` syntax.
    pub spectrum: String,
    pub warning: Option<String>,
}

/// Parses a headerless numeric CSV. Blank lines and `#` lines are skipped.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<f64>, usize)> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_numeric_csv(&text).map_err(|msg| CliError::Usage(format!("{}: {msg}", path.display())))
}

pub fn parse_numeric_csv(text: &str) -> std::result::Result<(Vec<f64>, usize), String> {
    let mut values = Vec::new();
    let mut dim = None;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = values.len();
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format!("line {}, column {}: cannot parse `{}` as a number", idx + 1, col + 1, field.trim()))?;
            values.push(v);
        }
        let width = values.len() - before;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => return Err(format!("line {}: expected {d} columns, found {width}", idx + 1)),
            _ => {}
        }
    }
    dim.map(|d| (values, d)).ok_or_else(|| "no data rows".to_string())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(eigenvalues: &[f64]) -> EigenvalueSummary {
    const BINS: usize = 10;
    let (min, max) = (eigenvalues[0], eigenvalues[eigenvalues.len() - 1]);
    let width = (max - min) / BINS as f64;
    let edges: Vec<f64> = (0..=BINS).map(|b| min + width * b as f64).collect();
    let mut counts = vec![0; BINS];
    for &l in eigenvalues {
        let b = if width > 0.0 { (((l - min) / width) as usize).min(BINS - 1) } else { 0 };
        counts[b] += 1;
    }
    EigenvalueSummary {
        min,
        q25: quantile(eigenvalues, 0.25),
        median: quantile(eigenvalues, 0.5),
        q75: quantile(eigenvalues, 0.75),
        max,
        histogram_edges: edges,
        histogram_counts: counts,
    }
}

pub fn analyze_values(values: &mut [f64], dim: usize, cfg: &ExperimentConfig) -> Result<DatasetReport> {
    if cfg.scale != 1.0 {
        for v in values.iter_mut() {
            *v *= cfg.scale;
        }
    }
    let emp = plateau_core::spectrum::empirical_spectrum_from_data(values, dim, cfg.max_distinct, cfg.normalization)?;
    let moments: Vec<f64> = emp.moments.as_slice()[1..].to_vec();
    let warning = (emp.eigenvalues.last().copied().unwrap_or(0.0) <= 0.0)
        .then(|| "all eigenvalues are zero: the data carry no variance".to_string());
    Ok(DatasetReport {
        rows: emp.samples,
        dim,
        scale: cfg.scale,
        normalization: cfg.normalization,
        moments,
        eigenvalues: summarize(&emp.eigenvalues),
        spectrum: emp.spectrum.to_string(),
        warning,
    })
}

/// Moments and compressed spectrum of a dataset's second-moment matrix.
pub fn cmd_analyze_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<DatasetReport> {
    let (mut values, dim) = read_numeric_csv(path)?;
    let report = analyze_values(&mut values, dim, cfg)?;
    write_json(&cfg.out.join("dataset_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub kernel: Kernel,
    pub matrices: usize,
    pub samples: usize,
    pub max_z: f64,
    pub mean_z: f64,
    pub worst_matrix: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussReport {
    pub z_limit: f64,
    pub kernels: Vec<KernelCheck>,
    /// `I2` at the all-ones covariance; exactly 1/3.
    pub i2_all_ones: f64,
    pub passed: bool,
}

fn check_kernel<const N: usize>(
    cfg: &ExperimentConfig,
    kernel: Kernel,
    closed: fn(&GaussianCov<N>) -> plateau_core::Result<f64>,
) -> Result<KernelCheck> {
    let seed = cfg.seeds[0];
    let mut rng = rng::stream(seed.wrapping_add(kernel.order() as u64), Stream::InitState);
    let covs: Vec<GaussianCov<N>> = (0..cfg.gauss_matrices).map(|_| random_psd::<N, _>(&mut rng)).collect();
    let zs: Vec<Result<f64>> = pool(cfg.jobs)?.install(|| {
        covs.par_iter()
            .enumerate()
            .map(|(i, c)| {
                let mc_seed = seed.wrapping_mul(1_000_003).wrapping_add((kernel.order() * 1_000_000 + i) as u64);
                let est: McEstimate = gauss::mc_expectation(c, Activation::Erf, cfg.gauss_samples, mc_seed)?;
                Ok(est.z_score(closed(c)?))
            })
            .collect()
    });
    let zs = zs.into_iter().collect::<Result<Vec<f64>>>()?;
    let (worst_matrix, max_z) = zs.iter().copied().enumerate().fold((0, 0.0), |acc, (i, z)| if z > acc.1 { (i, z) } else { acc });
    Ok(KernelCheck {
        kernel,
        matrices: zs.len(),
        samples: cfg.gauss_samples,
        max_z,
        mean_z: zs.iter().sum::<f64>() / zs.len() as f64,
        worst_matrix,
        passed: max_z <= GAUSS_Z_LIMIT,
    })
}

/// Closed-form kernels against Monte Carlo on random covariances.
pub fn cmd_gauss_check(cfg: &ExperimentConfig) -> Result<GaussReport> {
    let kernels = vec![
        check_kernel::<2>(cfg, Kernel::I2, gauss::i2)?,
        check_kernel::<3>(cfg, Kernel::I3, gauss::i3)?,
        check_kernel::<4>(cfg, Kernel::I4, gauss::i4)?,
    ];
    let i2_all_ones = gauss::i2(&GaussianCov::new([[1.0, 1.0], [1.0, 1.0]])?)?;
    let passed = kernels.iter().all(|k| k.passed) && (i2_all_ones - 1.0 / 3.0).abs() <= 1e-12;
    let report = GaussReport { z_limit: GAUSS_Z_LIMIT, kernels, i2_all_ones, passed };
    write_json(&cfg.out.join("gauss_check.json"), &report)?;
    Ok(report)
}
