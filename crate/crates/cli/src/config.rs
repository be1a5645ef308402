//! Experiment configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags.
//!
//! The file is flat `key = value` TOML using the long flag names, e.g.
//!
//! ```toml
//! spectrum = "0.4:0.5,1.2:0.3,1.6:0.2"
//! eta = 0.1
//! seeds = [1, 2]
//! mu1-grid = [0.5, 1.0, 2.0, 4.0]
//! ```

use std::path::{Path, PathBuf};

use clap::Args;
use plateau_core::{DataNormalization, EigenSpectrum, PlateauParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub spectrum: String,
    pub k: usize,
    pub m: usize,
    pub eta: f64,
    /// Input dimension of micro runs.
    pub n: usize,
    /// Dimension whose weight statistics seed random macro initial states.
    pub n_effective: f64,
    /// Horizon in `α̃`; each command picks its own default when unset.
    pub t_end: Option<f64>,
    /// Upper bound on the horizon of runs that stop on convergence.
    pub t_max: f64,
    pub dt: Option<f64>,
    /// Micro steps between records (default: about 2000 records per run).
    pub record_every: Option<u64>,
    /// Macro integration steps between records.
    pub macro_record_every: usize,
    pub seeds: Vec<u64>,
    pub soft_committee: bool,
    pub mu1_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    /// Fixed `μ₁` of the `μ₂` sweep.
    pub mu1: f64,
    pub window: usize,
    pub terminal_fraction: f64,
    pub min_points: usize,
    /// Macro runs that define a plateau stop once `ε_g` falls below this.
    pub stop_below: f64,
    /// Add micro runs to sweeps.
    pub micro: bool,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub out: PathBuf,
    pub gauss_matrices: usize,
    pub gauss_samples: usize,
    /// Dataset values are multiplied by this before analysis.
    pub scale: f64,
    pub normalization: DataNormalization,
    pub max_distinct: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            spectrum: "0.4:0.5,1.2:0.3,1.6:0.2".into(),
            k: 2,
            m: 2,
            eta: 0.1,
            n: 10_000,
            n_effective: 1e5,
            t_end: None,
            t_max: 1e6,
            dt: None,
            record_every: None,
            macro_record_every: 4,
            seeds: vec![1],
            soft_committee: true,
            mu1_grid: vec![0.5, 1.0, 2.0, 4.0],
            delta_grid: vec![0.0, 0.5, 1.0, 1.5],
            mu1: 1.0,
            window: 31,
            terminal_fraction: 0.1,
            min_points: 5,
            stop_below: 1e-8,
            micro: false,
            jobs: 0,
            out: PathBuf::from("out"),
            gauss_matrices: 100,
            gauss_samples: 1_000_000,
            scale: 1.0,
            normalization: DataNormalization::RawSecondMoment,
            max_distinct: 8,
        }
    }
}

fn parse_normalization(s: &str) -> std::result::Result<DataNormalization, String> {
    match s {
        "raw-second-moment" | "raw" => Ok(DataNormalization::RawSecondMoment),
        "centered" => Ok(DataNormalization::Centered),
        other => Err(format!("unknown normalization `{other}` (raw-second-moment | centered)")),
    }
}

/// Optional settings, read from a config file or from flags.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Overrides {
    /// Eigenvalue spectrum, `eigenvalue:fraction` pairs, comma separated.
    #[arg(long)]
    pub spectrum: Option<String>,
    /// Student hidden units.
    #[arg(long = "K", visible_alias = "k")]
    #[serde(alias = "K")]
    pub k: Option<usize>,
    /// Teacher hidden units.
    #[arg(long = "M", visible_alias = "m")]
    #[serde(alias = "M")]
    pub m: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Input dimension for micro runs.
    #[arg(long = "N", visible_alias = "n")]
    #[serde(alias = "N")]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_effective: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub record_every: Option<u64>,
    #[arg(long)]
    pub macro_record_every: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub soft_committee: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pub mu1_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub delta_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub mu1: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub terminal_fraction: Option<f64>,
    #[arg(long)]
    pub min_points: Option<usize>,
    #[arg(long)]
    pub stop_below: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub micro: Option<bool>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub gauss_matrices: Option<usize>,
    #[arg(long)]
    pub gauss_samples: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, value_parser = parse_normalization)]
    pub normalization: Option<DataNormalization>,
    #[arg(long)]
    pub max_distinct: Option<usize>,
}

impl Overrides {
    pub fn apply(self, c: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        set!(
            spectrum, k, m, eta, n, n_effective, t_max, macro_record_every, seeds, soft_committee, mu1_grid, delta_grid,
            mu1, window, terminal_fraction, min_points, stop_below, micro, jobs, out, gauss_matrices, gauss_samples,
            scale, normalization, max_distinct
        );
        if self.t_end.is_some() {
            c.t_end = self.t_end;
        }
        if self.dt.is_some() {
            c.dt = self.dt;
        }
        if self.record_every.is_some() {
            c.record_every = self.record_every;
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config file: {e}")))
    }
}

impl ExperimentConfig {
    /// Defaults, then the config file (if any), then flags.
    pub fn resolve(file: Option<&Path>, flags: Overrides) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            Overrides::from_toml(&text)?.apply(&mut c);
        }
        flags.apply(&mut c);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Usage(msg));
        if self.k == 0 || self.m == 0 {
            return bad("K and M must be positive".into());
        }
        if self.n < self.k.max(self.m) {
            return bad(format!("N = {} must be at least max(K, M)", self.n));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta = {} must be a non-negative number", self.eta));
        }
        if !(self.n_effective >= 1.0) {
            return bad(format!("n-effective = {} must be at least 1", self.n_effective));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        for (name, grid) in [("mu1-grid", &self.mu1_grid), ("delta-grid", &self.delta_grid)] {
            if grid.is_empty() {
                return bad(format!("{name} must not be empty"));
            }
            if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("{name} values must be finite and non-negative"));
            }
        }
        if self.mu1_grid.iter().any(|&v| v == 0.0) || !(self.mu1 > 0.0) {
            return bad("mu1 values must be positive".into());
        }
        for (name, v) in [("t-end", self.t_end), ("dt", self.dt)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} = {v} must be positive"));
                }
            }
        }
        if !(self.t_max > 0.0) || !(self.stop_below > 0.0) || !(self.scale.is_finite()) {
            return bad("t-max and stop-below must be positive, scale finite".into());
        }
        if self.record_every == Some(0) || self.macro_record_every == 0 {
            return bad("record intervals must be at least 1".into());
        }
        if self.window < 3 || self.window % 2 == 0 {
            return bad(format!("window = {} must be odd and at least 3", self.window));
        }
        if !(self.terminal_fraction > 0.0 && self.terminal_fraction <= 0.5) {
            return bad(format!("terminal-fraction = {} must be in (0, 0.5]", self.terminal_fraction));
        }
        if self.max_distinct == 0 || self.gauss_matrices == 0 {
            return bad("max-distinct and gauss-matrices must be positive".into());
        }
        self.parsed_spectrum()?;
        Ok(())
    }

    pub fn parsed_spectrum(&self) -> Result<EigenSpectrum> {
        self.spectrum.parse().map_err(|e: plateau_core::Error| CliError::Usage(format!("--spectrum: {e}")))
    }

    pub fn plateau_params(&self) -> PlateauParams {
        PlateauParams { window: self.window, terminal_fraction: self.terminal_fraction, min_points: self.min_points }
    }

    /// SHA-256 of the result-relevant settings (output path and thread
    /// count excluded), as lowercase hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.jobs = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_order() {
        let file = Overrides::from_toml("eta = 0.3\nK = 3\nseeds = [4, 5]\nmu1-grid = [1.0]\n").unwrap();
        let mut c = ExperimentConfig::default();
        file.apply(&mut c);
        assert_eq!((c.eta, c.k, c.seeds.clone()), (0.3, 3, vec![4, 5]));
        Overrides { eta: Some(0.2), ..Default::default() }.apply(&mut c);
        assert_eq!((c.eta, c.k), (0.2, 3));
        assert_eq!(c.mu1_grid, vec![1.0]);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Overrides::from_toml("etta = 0.1"), Err(CliError::Usage(_))));
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig { seeds: vec![], ..Default::default() };
        assert!(c.validate().is_err());
        c.seeds = vec![1];
        c.validate().unwrap();
        c.window = 30;
        assert!(c.validate().is_err());
        c.window = 31;
        c.mu1_grid = vec![1.0, -2.0];
        assert!(c.validate().is_err());
        c.mu1_grid = vec![1.0];
        c.spectrum = "1:0.5".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out: "elsewhere".into(), jobs: 3, ..Default::default() };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = ExperimentConfig { eta: 0.2, ..Default::default() };
        assert_ne!(a.hash(), c.hash());
    }
}
