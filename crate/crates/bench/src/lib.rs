//! Fixtures shared by the benchmarks.

use plateau_core::gauss::GaussianCov;
use plateau_core::macroscopic::{self, MacroConfig};
use plateau_core::{EigenSpectrum, OrderParameterState, SimConfig};

/// Three-level spectrum used for the reference learning curve.
pub fn reference_spectrum() -> EigenSpectrum {
    EigenSpectrum::new(&[(0.4, 0.5), (1.2, 0.3), (1.6, 0.2)]).expect("valid spectrum")
}

pub fn cov2() -> GaussianCov<2> {
    GaussianCov::new([[1.2, 0.4], [0.4, 0.9]]).expect("psd")
}

pub fn cov3() -> GaussianCov<3> {
    GaussianCov::new([[1.2, 0.4, 0.3], [0.4, 0.9, 0.2], [0.3, 0.2, 1.1]]).expect("psd")
}

pub fn cov4() -> GaussianCov<4> {
    GaussianCov::new([
        [1.2, 0.4, 0.3, 0.1],
        [0.4, 0.9, 0.2, 0.3],
        [0.3, 0.2, 1.1, 0.25],
        [0.1, 0.3, 0.25, 1.0],
    ])
    .expect("psd")
}

/// Sampled initial state for `K = M = 2` plus a matching ODE config.
pub fn macro_fixture(k: usize, m: usize) -> (OrderParameterState, MacroConfig) {
    let s = reference_spectrum();
    let state = macroscopic::random_initial_state(&s, k, m, 1e4, 1).expect("initial state");
    (state, MacroConfig::new(0.1, s, 10.0))
}

pub fn sim_config(n: usize) -> SimConfig {
    SimConfig { n, k: 2, m: 2, eta: 0.1, soft_committee: true, seed: 1, steps: 1, record_every: None }
}
