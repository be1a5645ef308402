//! Gaussian expectation kernels of the erf activation.
//!
//! With `g(x) = erf(x/√2)` and `z ~ N(0, C)`:
//!
//! * `I2 = ⟨g(z₁) g(z₂)⟩`
//! * `I3 = ⟨g'(z₁) z₂ g(z₃)⟩`
//! * `I4 = ⟨g'(z₁) g'(z₂) g(z₃) g(z₄)⟩`
//!
//! all have closed forms. `I4` is the full four-point expression in terms of
//! all ten covariance entries; the three-index form where `z₁ = z₂` is the
//! special case obtained by setting `C₁₂ = C₁₁ = C₂₂`.
//!
//! `I3` is linear in `(C₁₂, C₂₃)` and never reads `C₂₂`: writing `z₂` as a
//! combination of `z₁`, `z₃` and an independent remainder shows the
//! remainder contributes nothing. [`i3_reduced`] evaluates it through that
//! decomposition and serves as an independent algebraic route.
//!
//! [`mc_expectation`] is a plain Monte Carlo estimator used as ground truth
//! in tests.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, symmetric_sqrt};
use crate::rng::{self, Stream};

const SYMMETRY_TOLERANCE: f64 = 1e-14;
const PSD_TOLERANCE: f64 = 1e-10;
/// Roundoff band tolerated on arcsin arguments before raising an error.
const ARCSIN_GUARD: f64 = 1e-12;
const COLLINEAR_TOLERANCE: f64 = 1e-12;
/// Lower bound on Monte Carlo sample counts.
pub const MIN_MC_SAMPLES: usize = 10_000;

/// Small symmetric PSD covariance feeding one of the kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianCov<const N: usize> {
    c: [[f64; N]; N],
}

impl<const N: usize> GaussianCov<N> {
    /// Validates symmetry, non-negative variances and positive
    /// semidefiniteness.
    pub fn new(c: [[f64; N]; N]) -> Result<Self> {
        let mut scale: f64 = 1.0;
        for row in &c {
            for &x in row {
                if !x.is_finite() {
                    return Err(Error::NonFinite("covariance"));
                }
                scale = scale.max(x.abs());
            }
        }
        let mut asym: f64 = 0.0;
        for (a, row) in c.iter().enumerate() {
            if row[a] < 0.0 {
                return Err(Error::NegativeVariance(row[a]));
            }
            for b in (a + 1)..N {
                asym = asym.max((row[b] - c[b][a]).abs());
            }
        }
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let m = DMatrix::from_fn(N, N, |a, b| c[a][b]);
        let min_eig = symmetric_eigenvalues(m)[0];
        if min_eig < -PSD_TOLERANCE * scale {
            return Err(Error::NonPsd(min_eig));
        }
        Ok(GaussianCov { c })
    }

    /// Skips validation. Used on matrices assembled from order parameters,
    /// which are PSD by construction.
    pub fn new_unchecked(c: [[f64; N]; N]) -> Self {
        GaussianCov { c }
    }

    /// Entry `C_ab` with 1-based indices, matching the usual notation.
    #[inline]
    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.c[a - 1][b - 1]
    }

    pub fn as_array(&self) -> &[[f64; N]; N] {
        &self.c
    }

    /// Returns the covariance of `(z_{π(1)}, ..., z_{π(N)})`.
    pub fn permuted(&self, perm: [usize; N]) -> Self {
        let mut c = [[0.0; N]; N];
        for a in 0..N {
            for b in 0..N {
                c[a][b] = self.c[perm[a]][perm[b]];
            }
        }
        GaussianCov { c }
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_fn(N, N, |a, b| self.c[a][b])
    }
}

fn checked_arcsin(x: f64) -> Result<f64> {
    if !x.is_finite() || x.abs() > 1.0 + ARCSIN_GUARD {
        return Err(Error::ArcsinDomain(x));
    }
    Ok(x.clamp(-1.0, 1.0).asin())
}

/// `⟨g(z₁) g(z₂)⟩ = (2/π) arcsin(C₁₂ / √((1+C₁₁)(1+C₂₂)))`.
pub fn i2(c: &GaussianCov<2>) -> Result<f64> {
    let arg = c.at(1, 2) / ((1.0 + c.at(1, 1)) * (1.0 + c.at(2, 2))).sqrt();
    Ok(2.0 / PI * checked_arcsin(arg)?)
}

/// `⟨g'(z₁) z₂ g(z₃)⟩`. Does not read `C₂₂`.
pub fn i3(c: &GaussianCov<3>) -> Result<f64> {
    i3_entries(c.at(1, 1), c.at(1, 2), c.at(1, 3), c.at(2, 3), c.at(3, 3))
}

/// `I3` from the five entries it depends on.
#[inline]
pub fn i3_entries(c11: f64, c12: f64, c13: f64, c23: f64, c33: f64) -> Result<f64> {
    let denom = (1.0 + c11) * (1.0 + c33) - c13 * c13;
    if !(denom > 0.0) {
        return Err(Error::SingularDenominator(denom));
    }
    Ok(2.0 / PI / denom.sqrt() * (c23 * (1.0 + c11) - c12 * c13) / (1.0 + c11))
}

/// `I3` through the decomposition `z₂ = a z₁ + b z₃ + z⊥`:
///
/// `I3 = [(C₁₂C₃₃ − C₁₃C₂₃) I3(z₁,z₁,z₃) + (C₁₁C₂₃ − C₁₂C₁₃) I3(z₁,z₃,z₃)] / (C₁₁C₃₃ − C₁₃²)`.
pub fn i3_reduced(c: &GaussianCov<3>) -> Result<f64> {
    let (c11, c12, c13, c23, c33) = (c.at(1, 1), c.at(1, 2), c.at(1, 3), c.at(2, 3), c.at(3, 3));
    let det = c11 * c33 - c13 * c13;
    if det <= COLLINEAR_TOLERANCE {
        return Err(Error::CollinearZ1Z3(det));
    }
    // z₂ := z₁ gives C₁₂ = C₁₁, C₂₃ = C₁₃; z₂ := z₃ gives C₁₂ = C₁₃, C₂₃ = C₃₃.
    let along_z1 = i3_entries(c11, c11, c13, c13, c33)?;
    let along_z3 = i3_entries(c11, c13, c13, c33, c33)?;
    Ok(((c12 * c33 - c13 * c23) * along_z1 + (c11 * c23 - c12 * c13) * along_z3) / det)
}

/// `⟨g'(z₁) g'(z₂) g(z₃) g(z₄)⟩` in closed form:
///
/// `I4 = 4/(π² √Λ₄) · arcsin(Λ₀ / √(Λ₁Λ₂))` with
/// `Λ₄ = (1+C₁₁)(1+C₂₂) − C₁₂²`,
/// `Λ₀ = Λ₄C₃₄ − C₂₃C₂₄(1+C₁₁) − C₁₃C₁₄(1+C₂₂) + C₁₂C₁₃C₂₄ + C₁₂C₁₄C₂₃`,
/// `Λ₁ = Λ₄(1+C₃₃) − C₂₃²(1+C₁₁) − C₁₃²(1+C₂₂) + 2C₁₂C₁₃C₂₃`,
/// and `Λ₂` as `Λ₁` with index 3 replaced by 4.
pub fn i4(c: &GaussianCov<4>) -> Result<f64> {
    let [[c11, c12, c13, c14], [_, c22, c23, c24], [_, _, c33, c34], [_, _, _, c44]] = c.c;
    let one11 = 1.0 + c11;
    let one22 = 1.0 + c22;
    let lambda4 = one11 * one22 - c12 * c12;
    let lambda0 = lambda4 * c34 - c23 * c24 * one11 - c13 * c14 * one22 + c12 * c13 * c24 + c12 * c14 * c23;
    let lambda1 = lambda4 * (1.0 + c33) - c23 * c23 * one11 - c13 * c13 * one22 + 2.0 * c12 * c13 * c23;
    let lambda2 = lambda4 * (1.0 + c44) - c24 * c24 * one11 - c14 * c14 * one22 + 2.0 * c12 * c14 * c24;
    if !(lambda4 > 0.0 && lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(Error::SingularDenominator(lambda4.min(lambda1).min(lambda2)));
    }
    let arg = lambda0 / (lambda1 * lambda2).sqrt();
    Ok(4.0 / (PI * PI) / lambda4.sqrt() * checked_arcsin(arg)?)
}

/// Which expectation a Monte Carlo run estimates; fixed by the matrix order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    I2,
    I3,
    I4,
}

impl Kernel {
    pub fn order(self) -> usize {
        match self {
            Kernel::I2 => 2,
            Kernel::I3 => 3,
            Kernel::I4 => 4,
        }
    }

    fn of_order(n: usize) -> Option<Kernel> {
        match n {
            2 => Some(Kernel::I2),
            3 => Some(Kernel::I3),
            4 => Some(Kernel::I4),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
}

impl McEstimate {
    /// `|value − estimate|` in units of the standard error.
    pub fn z_score(&self, value: f64) -> f64 {
        (value - self.estimate).abs() / self.standard_error.max(f64::MIN_POSITIVE)
    }
}

/// Plain Monte Carlo estimate of the order-`N` kernel over `z = S u`,
/// `u ~ N(0, I)`, `S` the symmetric square root of `C`.
///
/// The integrands are even under `z → −z`, so antithetic pairs would be
/// exact duplicates; samples are drawn independently instead.
pub fn mc_expectation<const N: usize>(
    c: &GaussianCov<N>,
    activation: Activation,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let kernel = Kernel::of_order(N)
        .ok_or_else(|| Error::InvalidConfig(format!("no expectation kernel of order {N}")))?;
    if samples < MIN_MC_SAMPLES {
        return Err(Error::TooFewSamples { min: MIN_MC_SAMPLES, got: samples });
    }
    let (root, min_eig) = symmetric_sqrt(&c.to_nalgebra());
    let scale = c.c.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
    if min_eig < -PSD_TOLERANCE * scale {
        return Err(Error::NonPsd(min_eig));
    }
    let mut s = [[0.0; N]; N];
    for (a, row) in s.iter_mut().enumerate() {
        for (b, x) in row.iter_mut().enumerate() {
            *x = root[(a, b)];
        }
    }

    let mut rng = rng::stream(seed, Stream::Oracle);
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    let mut u = [0.0; N];
    let mut z = [0.0; N];
    for k in 0..samples {
        for x in u.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        for a in 0..N {
            z[a] = (0..N).map(|b| s[a][b] * u[b]).sum();
        }
        let f = match kernel {
            Kernel::I2 => activation.g(z[0]) * activation.g(z[1]),
            Kernel::I3 => activation.g_prime(z[0]) * z[1] * activation.g(z[2]),
            Kernel::I4 => {
                activation.g_prime(z[0]) * activation.g_prime(z[1]) * activation.g(z[2]) * activation.g(z[3])
            }
        };
        // Welford
        let delta = f - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (f - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok(McEstimate { estimate: mean, standard_error: (var / samples as f64).sqrt() })
}

/// Random PSD covariance used by the oracle-agreement checks.
///
/// `C = S A Aᵀ S` where `A` is `N × (N+2)` with i.i.d. `N(0, 1/(N+2))`
/// entries and `S = diag(s)`, `s_a ~ U[0.3, 1.7]`. Diagonals land roughly in
/// `[0.1, 3]` and correlations cover the full range.
pub fn random_psd<const N: usize, R: Rng + ?Sized>(rng: &mut R) -> GaussianCov<N> {
    let k = N + 2;
    let norm = 1.0 / (k as f64).sqrt();
    let a: Vec<Vec<f64>> = (0..N)
        .map(|_| (0..k).map(|_| norm * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let s: Vec<f64> = (0..N).map(|_| rng.random_range(0.3..1.7)).collect();
    let mut c = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..=i {
            let dot: f64 = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
            c[i][j] = s[i] * s[j] * dot;
            c[j][i] = c[i][j];
        }
    }
    GaussianCov { c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cov2(c11: f64, c12: f64, c22: f64) -> GaussianCov<2> {
        GaussianCov::new([[c11, c12], [c12, c22]]).unwrap()
    }

    #[test]
    fn i2_examples() {
        assert_eq!(i2(&cov2(1.0, 0.0, 1.0)).unwrap(), 0.0);
        assert!((i2(&cov2(1.0, 1.0, 1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // (2/π) asin(1/4)
        assert!((i2(&cov2(1.0, 0.5, 1.0)).unwrap() - 0.160_861_246_510_332_5).abs() < 1e-12);
    }

    #[test]
    fn i3_examples() {
        let c = GaussianCov::new([[1.0, 0.0, 0.3], [0.0, 1.0, 0.0], [0.3, 0.0, 2.0]]).unwrap();
        assert_eq!(i3(&c).unwrap(), 0.0);
        let ones = GaussianCov::new([[1.0; 3]; 3]).unwrap();
        let expected = 1.0 / (PI * 3f64.sqrt());
        assert!((i3(&ones).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.183_776_298_473_930_6).abs() < 1e-15);
    }

    #[test]
    fn i3_reduced_agrees_on_all_ones_and_rejects_collinear() {
        let ones = GaussianCov::new([[1.0; 3]; 3]).unwrap();
        // z₁ = z₃ here, so the reduction is undefined
        assert!(matches!(i3_reduced(&ones), Err(Error::CollinearZ1Z3(_))));
        let c = GaussianCov::new([[1.0, 1.0, 0.5], [1.0, 1.0, 0.5], [0.5, 0.5, 1.0]]).unwrap();
        assert!((i3_reduced(&c).unwrap() - i3(&c).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn i4_independent_z3_vanishes() {
        let id = GaussianCov::new([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
            .unwrap();
        assert_eq!(i4(&id).unwrap(), 0.0);
        let c = GaussianCov::new([[1.0, 0.4, 0.0, 0.2], [0.4, 1.5, 0.0, 0.3], [0.0, 0.0, 0.8, 0.0], [0.2, 0.3, 0.0, 1.2]])
            .unwrap();
        assert!(i4(&c).unwrap().abs() < 1e-16);
    }

    #[test]
    fn i4_all_ones_closed_value() {
        // Λ₄ = 3, Λ₀ = 1, Λ₁ = Λ₂ = 4  ⇒  4/(π²√3) · asin(1/4)
        let ones = GaussianCov::new([[1.0; 4]; 4]).unwrap();
        let expected = 4.0 / (PI * PI * 3f64.sqrt()) * 0.25f64.asin();
        assert!((i4(&ones).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.059_124_968_903_142_8).abs() < 1e-12);
    }

    /// The three-index form (`z₁ = z₂`) as commonly printed, in terms of a
    /// 3×3 covariance of `(z₁, z₃, z₄)`.
    fn i4_coincident(c: [[f64; 3]; 3]) -> f64 {
        let a = 1.0 + 2.0 * c[0][0];
        let num = a * c[1][2] - 2.0 * c[0][1] * c[0][2];
        let den = (a * (1.0 + c[1][1]) - 2.0 * c[0][1] * c[0][1]).sqrt()
            * (a * (1.0 + c[2][2]) - 2.0 * c[0][2] * c[0][2]).sqrt();
        4.0 / (PI * PI) / a.sqrt() * (num / den).asin()
    }

    #[test]
    fn i4_reduces_to_coincident_form() {
        let mut rng = rng::stream(11, Stream::Oracle);
        for _ in 0..50 {
            let c3 = random_psd::<3, _>(&mut rng);
            let c = c3.as_array();
            let full = GaussianCov::new_unchecked([
                [c[0][0], c[0][0], c[0][1], c[0][2]],
                [c[0][0], c[0][0], c[0][1], c[0][2]],
                [c[0][1], c[0][1], c[1][1], c[1][2]],
                [c[0][2], c[0][2], c[1][2], c[2][2]],
            ]);
            assert!((i4(&full).unwrap() - i4_coincident(*c)).abs() < 1e-13);
        }
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(GaussianCov::new([[1.0, 2.0], [2.0, 1.0]]), Err(Error::NonPsd(_))));
        assert!(matches!(GaussianCov::new([[1.0, 0.1], [0.2, 1.0]]), Err(Error::NotSymmetric(_))));
        assert!(matches!(GaussianCov::new([[-1.0, 0.0], [0.0, 1.0]]), Err(Error::NegativeVariance(_))));
    }

    #[test]
    fn arcsin_guard_band() {
        // slightly outside [-1, 1] by roundoff is clamped, clearly outside errors
        let c = GaussianCov::new_unchecked([[0.0, 1.0 + 1e-13], [1.0 + 1e-13, 0.0]]);
        assert!((i2(&c).unwrap() - 1.0).abs() < 1e-12);
        let c = GaussianCov::new_unchecked([[0.0, 1.1], [1.1, 0.0]]);
        assert!(matches!(i2(&c), Err(Error::ArcsinDomain(_))));
    }

    #[test]
    fn mc_matches_known_values() {
        let ones = cov2(1.0, 1.0, 1.0);
        let est = mc_expectation(&ones, Activation::Erf, 1_000_000, 3).unwrap();
        assert!(est.z_score(1.0 / 3.0) < 4.0, "{est:?}");

        let c = GaussianCov::new([[1.0, 0.0, 0.3], [0.0, 1.0, 0.0], [0.3, 0.0, 2.0]]).unwrap();
        let est = mc_expectation(&c, Activation::Erf, 200_000, 5).unwrap();
        assert!(est.z_score(0.0) < 4.0);

        let ones4 = GaussianCov::new([[1.0; 4]; 4]).unwrap();
        let a = mc_expectation(&ones4, Activation::Erf, 100_000, 9).unwrap();
        let b = mc_expectation(&ones4, Activation::Erf, 100_000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.z_score(i4(&ones4).unwrap()) < 4.0);
    }

    #[test]
    fn mc_rejects_small_sample_counts() {
        assert!(matches!(
            mc_expectation(&cov2(1.0, 0.0, 1.0), Activation::Erf, 10, 0),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn relu_i2_matches_arc_cosine_kernel() {
        // ⟨relu(z₁)relu(z₂)⟩ for unit variances and correlation ρ:
        // (√(1-ρ²) + (π - acos ρ) ρ) / (2π)
        let rho: f64 = 0.5;
        let exact = ((1.0 - rho * rho).sqrt() + (PI - rho.acos()) * rho) / (2.0 * PI);
        let est = mc_expectation(&cov2(1.0, rho, 1.0), Activation::Relu, 400_000, 1).unwrap();
        assert!(est.z_score(exact) < 4.0, "{est:?} vs {exact}");
    }

    fn random_cov3() -> impl Strategy<Value = GaussianCov<3>> {
        any::<u64>().prop_map(|seed| random_psd::<3, _>(&mut rng::stream(seed, Stream::Oracle)))
    }

    proptest! {
        #[test]
        fn i3_reduced_equals_i3(c in random_cov3()) {
            let det = c.at(1, 1) * c.at(3, 3) - c.at(1, 3).powi(2);
            prop_assume!(det > 1e-6);
            prop_assert!((i3(&c).unwrap() - i3_reduced(&c).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn i2_symmetric_and_monotone(c11 in 0.0f64..3.0, c22 in 0.0f64..3.0, t in -0.99f64..0.99) {
            let bound = (c11 * c22).sqrt();
            let c12 = t * bound;
            let a = i2(&GaussianCov::new_unchecked([[c11, c12], [c12, c22]])).unwrap();
            let b = i2(&GaussianCov::new_unchecked([[c22, c12], [c12, c11]])).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            let bigger = i2(&GaussianCov::new_unchecked([[c11, c12 + 0.005 * bound], [c12 + 0.005 * bound, c22]])).unwrap();
            prop_assert!(bigger >= a);
        }

        #[test]
        fn i4_swap_symmetries(seed in any::<u64>()) {
            let c = random_psd::<4, _>(&mut rng::stream(seed, Stream::Oracle));
            let v = i4(&c).unwrap();
            prop_assert!((i4(&c.permuted([1, 0, 2, 3])).unwrap() - v).abs() < 1e-14);
            prop_assert!((i4(&c.permuted([0, 1, 3, 2])).unwrap() - v).abs() < 1e-14);
        }
    }
}
