use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plateau_cli::commands;
use plateau_cli::{CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "plateau-dyn", version, about = "Online SGD in soft committee machines with structured inputs")]
struct Cli {
    /// TOML file with settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// SGD simulations, one per seed.
    Micro(Common),
    /// Order-parameter ODE runs, one per seed or from a saved state.
    Macro {
        /// JSON state written by an earlier `macro` run.
        #[arg(long)]
        init_state: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Micro and macro runs from the same initial weights.
    Compare(Common),
    /// Plateau length and height against the first spectral moment.
    SweepMu1(Common),
    /// Plateau length and height against the second spectral moment.
    SweepMu2(Common),
    /// Spectral moments of a headerless numeric CSV.
    AnalyzeDataset {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-form Gaussian expectations against Monte Carlo.
    GaussCheck(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let resolve = |c: Common| ExperimentConfig::resolve(cli.config.as_deref(), c.overrides);
    match cli.command {
        Command::Micro(c) => {
            for path in commands::cmd_micro(&resolve(c)?)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Macro { init_state, common } => {
            for path in commands::cmd_macro(&resolve(common)?, init_state.as_deref())? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Compare(c) => {
            let cfg = resolve(c)?;
            let r = commands::cmd_compare(&cfg)?;
            println!("t_end {}", r.t_end);
            for s in &r.seeds {
                println!("seed {}: mean |dlog10| {:.4}, max {:.4}", s.seed, s.mean_abs_dlog10, s.max_abs_dlog10);
            }
            eprintln!("wrote {}", cfg.out.join("compare_report.json").display());
        }
        Command::SweepMu1(c) => print_rows(&commands::cmd_sweep_mu1(&resolve(c)?)?),
        Command::SweepMu2(c) => print_rows(&commands::cmd_sweep_mu2(&resolve(c)?)?),
        Command::AnalyzeDataset { path, common } => {
            let r = commands::cmd_analyze_dataset(&resolve(common)?, &path)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            if let Some(w) = &r.warning {
                eprintln!("warning: {w}");
            }
        }
        Command::GaussCheck(c) => {
            let r = commands::cmd_gauss_check(&resolve(c)?)?;
            println!("{:<6} {:>8} {:>10} {:>10}", "kernel", "matrices", "max z", "mean z");
            for k in &r.kernels {
                println!("{:<6} {:>8} {:>10.3} {:>10.3}", format!("{:?}", k.kernel), k.matrices, k.max_z, k.mean_z);
            }
            println!("I2(all ones) = {}", r.i2_all_ones);
            if !r.passed {
                return Err(CliError::Numerical(format!("a kernel exceeded {} standard errors", r.z_limit)));
            }
        }
    }
    Ok(())
}

fn print_rows(rows: &[commands::PlateauRow]) {
    for r in rows {
        let key = match r.delta_lambda {
            Some(dl) => format!("delta_lambda {dl} (mu2 {:.4})", r.mu2),
            None => format!("mu1 {}", r.mu1),
        };
        if r.report.found {
            println!("seed {} {key}: length {:.1}, height {:.3e}", r.seed, r.report.length, r.report.height);
        } else {
            println!("seed {} {key}: no plateau", r.seed);
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
