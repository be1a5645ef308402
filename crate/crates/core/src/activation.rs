use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

/// Hidden-unit nonlinearity.
///
/// Only [`Activation::Erf`] has closed-form expectation kernels; `Relu` is
/// available to the Monte Carlo oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `g(x) = erf(x / √2)`
    #[default]
    Erf,
    Relu,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl Activation {
    #[inline]
    pub fn g(self, x: f64) -> f64 {
        match self {
            Activation::Erf => libm::erf(x * FRAC_1_SQRT_2),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn g_prime(self, x: f64) -> f64 {
        match self {
            Activation::Erf => SQRT_2_OVER_PI * (-0.5 * x * x).exp(),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}
