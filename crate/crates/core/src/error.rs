use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("spectrum has no entries")]
    EmptySpectrum,
    #[error("eigenvalue fractions sum to {sum}, expected 1")]
    NonUnitFractions { sum: f64 },
    #[error("negative eigenvalue {0}")]
    NegativeEigenvalue(f64),
    #[error("fraction {0} is not in (0, 1]")]
    InvalidFraction(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("N = {n} too small: eigenvalue {eigenvalue} would get multiplicity 0")]
    TooSmallN { n: usize, eigenvalue: f64 },
    #[error("need at least 2 data rows, got {rows}")]
    DegenerateData { rows: usize },
    #[error("spectrum literal parse error: {0}")]
    SpectrumSyntax(String),

    #[error("covariance matrix is not symmetric (|C_ab - C_ba| = {0:e})")]
    NotSymmetric(f64),
    #[error("covariance matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NonPsd(f64),
    #[error("negative diagonal covariance entry {0}")]
    NegativeVariance(f64),
    #[error("arcsin argument {0} outside [-1, 1] beyond roundoff")]
    ArcsinDomain(f64),
    #[error("I3 denominator (1+C11)(1+C33) - C13^2 = {0:e} is not positive")]
    SingularDenominator(f64),
    #[error("z1 and z3 are collinear (C11 C33 - C13^2 = {0:e})")]
    CollinearZ1Z3(f64),
    #[error("Monte Carlo needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("state became non-finite at alpha = {alpha}")]
    NonFiniteState { alpha: f64 },
    #[error("order {order} is outside the liftable range 0..={max}")]
    OrderOutOfRange { order: usize, max: usize },

    #[error("trajectory too short for analysis: {0}")]
    TooShort(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("terminal convergence speed {0:e} is too small to define a plateau")]
    DegenerateTerminal(f64),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NonPsd(_)
                | Error::ArcsinDomain(_)
                | Error::SingularDenominator(_)
                | Error::CollinearZ1Z3(_)
                | Error::NonFiniteState { .. }
                | Error::DegenerateTerminal(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
