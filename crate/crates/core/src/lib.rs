//! Learning dynamics of two-layer student-teacher networks trained by online
//! SGD on Gaussian inputs with an arbitrary covariance spectrum.
//!
//! * [`micro`]: weight-level SGD simulation.
//! * [`macroscopic`]: the order-parameter ODE system and its integrator.
//! * [`gauss`]: closed-form Gaussian expectations of `erf` units plus a Monte
//!   Carlo oracle.
//! * [`spectrum`]: eigenvalue spectra, moments and the closure relation.
//! * [`plateau`]: plateau length and height from a loss curve.

pub mod activation;
pub mod error;
pub mod gauss;
pub mod linalg;
pub mod macroscopic;
pub mod micro;
pub mod ode;
pub mod plateau;
pub mod rng;
pub mod spectrum;
pub mod state;
pub mod trajectory;

pub use activation::Activation;
pub use error::{Error, Result};
pub use gauss::{GaussianCov, Kernel, McEstimate};
pub use linalg::Matrix;
pub use macroscopic::MacroConfig;
pub use micro::{NetworkWeights, SimConfig};
pub use plateau::{PlateauParams, PlateauReport};
pub use spectrum::{DataNormalization, EigenSpectrum, EmpiricalSpectrum, MomentVector};
pub use state::{OrderParameterState, Overlaps};
pub use trajectory::{Trajectory, TrajectoryPoint};
