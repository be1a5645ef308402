//! Input statistics carried purely by the eigenvalue distribution of the
//! input covariance.
//!
//! The learning dynamics see the covariance only through its eigenvalues, so
//! an [`EigenSpectrum`] (distinct eigenvalues with multiplicity fractions) is
//! the sole description of the input distribution used throughout the crate.
//!
//! A diagonal realization is enough for weight-level simulation: every
//! quantity of interest is a bilinear form `a^T Σ^e b` in the weights, and
//! those are invariant under a joint rotation of `Σ` and the isotropic
//! `N(0, I/N)` weight initialization. Rotating `Σ` to its eigenbasis therefore
//! changes nothing observable.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;

/// Tolerance on the fraction sum accepted by [`EigenSpectrum::new`].
pub const FRACTION_SUM_TOLERANCE: f64 = 1e-9;

/// Eigenvalues closer than this (relative to the largest) are merged.
pub const MERGE_RELATIVE_TOLERANCE: f64 = 1e-8;

/// Distinct eigenvalues `λ'_i` of the input covariance with multiplicity
/// fractions `r_i` (so `λ'_i` occurs `r_i N` times).
///
/// Canonical form: eigenvalues strictly increasing, fractions summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct EigenSpectrum {
    entries: Vec<(f64, f64)>,
}

impl EigenSpectrum {
    /// Canonicalizes `(eigenvalue, fraction)` pairs: sorts, merges duplicate
    /// and near-degenerate eigenvalues and renormalizes the fractions.
    pub fn new(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptySpectrum);
        }
        for &(lambda, r) in pairs {
            if !lambda.is_finite() || !r.is_finite() {
                return Err(Error::NonFinite("spectrum"));
            }
            if lambda < 0.0 {
                return Err(Error::NegativeEigenvalue(lambda));
            }
            if r <= 0.0 || r > 1.0 {
                return Err(Error::InvalidFraction(r));
            }
        }
        let sum: f64 = pairs.iter().map(|p| p.1).sum();
        if (sum - 1.0).abs() > FRACTION_SUM_TOLERANCE {
            return Err(Error::NonUnitFractions { sum });
        }

        let mut sorted = pairs.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let scale = sorted.last().map(|p| p.0).unwrap_or(0.0);
        let merge_tol = MERGE_RELATIVE_TOLERANCE * scale;

        let mut entries: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
        for (lambda, r) in sorted {
            match entries.last_mut() {
                Some(last) if (lambda - last.0).abs() <= merge_tol => {
                    // fraction-weighted position of the merged eigenvalue
                    let total = last.1 + r;
                    last.0 = (last.0 * last.1 + lambda * r) / total;
                    last.1 = total;
                }
                _ => entries.push((lambda, r)),
            }
        }
        for e in &mut entries {
            e.1 /= sum;
        }
        Ok(EigenSpectrum { entries })
    }

    /// `Σ = σ I`: one eigenvalue of full multiplicity.
    pub fn scalar(sigma: f64) -> Result<Self> {
        Self::new(&[(sigma, 1.0)])
    }

    /// Two eigenvalues `μ₁ ± Δλ/2`, each of multiplicity `N/2`.
    pub fn split_pair(mu1: f64, delta_lambda: f64) -> Result<Self> {
        if !(delta_lambda >= 0.0 && delta_lambda < 2.0 * mu1) {
            return Err(Error::InvalidConfig(format!(
                "delta_lambda = {delta_lambda} must lie in [0, 2 mu1 = {})",
                2.0 * mu1
            )));
        }
        Self::new(&[(mu1 - 0.5 * delta_lambda, 0.5), (mu1 + 0.5 * delta_lambda, 0.5)])
    }

    /// Number of distinct eigenvalues `d`.
    pub fn distinct(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.entries.last().map(|e| e.0).unwrap_or(0.0)
    }

    /// `μ_e = Σ_i r_i (λ'_i)^e`, with `μ_0 = 1` exactly.
    pub fn moment(&self, e: usize) -> f64 {
        if e == 0 {
            return 1.0;
        }
        self.entries.iter().map(|&(l, r)| r * l.powi(e as i32)).sum()
    }

    pub fn moments(&self, dmax: usize) -> MomentVector {
        MomentVector((0..=dmax).map(|e| self.moment(e)).collect())
    }

    /// Coefficients `c_0..c_{d-1}` of the monic polynomial `∏(x - λ'_i)`,
    /// leading `c_d = 1` omitted. Since that polynomial annihilates `Σ`,
    /// `Ω^(d) = -Σ_{e<d} c_e Ω^(e)` for every overlap `Ω`.
    pub fn reduction_coefficients(&self) -> Vec<f64> {
        // poly[k] is the coefficient of x^k
        let mut poly = vec![1.0];
        for lambda in self.eigenvalues() {
            let mut next = vec![0.0; poly.len() + 1];
            for (k, &c) in poly.iter().enumerate() {
                next[k + 1] += c;
                next[k] -= lambda * c;
            }
            poly = next;
        }
        poly.pop();
        poly
    }

    /// Coefficients `a_0..a_{d-1}` with `Σ^e = Σ_k a_k Σ^k` on this spectrum,
    /// i.e. the remainder of `x^e` modulo the annihilating polynomial.
    pub fn power_in_basis(&self, e: usize) -> Vec<f64> {
        let d = self.distinct();
        let c = self.reduction_coefficients();
        let mut a = vec![0.0; d];
        if e < d {
            a[e] = 1.0;
            return a;
        }
        a[d - 1] = 1.0; // x^(d-1)
        for _ in (d - 1)..e {
            let top = a[d - 1];
            for k in (1..d).rev() {
                a[k] = a[k - 1] - top * c[k];
            }
            a[0] = -top * c[0];
        }
        a
    }

    /// Diagonal of a concrete `N × N` covariance with this spectrum.
    ///
    /// Multiplicities are `r_i N` rounded by the largest-remainder method so
    /// they sum to exactly `N`; remainder ties go to the smaller eigenvalue.
    pub fn realize(&self, n: usize) -> Result<Vec<f64>> {
        let counts = self.multiplicities(n)?;
        let mut diag = Vec::with_capacity(n);
        for (&(lambda, _), &count) in self.entries.iter().zip(&counts) {
            diag.extend(std::iter::repeat_n(lambda, count));
        }
        Ok(diag)
    }

    pub fn multiplicities(&self, n: usize) -> Result<Vec<usize>> {
        let exact: Vec<f64> = self.entries.iter().map(|e| e.1 * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        // stable sort keeps ascending-eigenvalue order among equal remainders
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra)
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::TooSmallN { n, eigenvalue: self.entries[i].0 });
        }
        Ok(counts)
    }
}

impl TryFrom<Vec<(f64, f64)>> for EigenSpectrum {
    type Error = Error;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<EigenSpectrum> for Vec<(f64, f64)> {
    fn from(s: EigenSpectrum) -> Self {
        s.entries
    }
}

/// Parses the `eigenvalue:fraction[,eigenvalue:fraction...]` literal.
impl FromStr for EigenSpectrum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (l, r) = item
                .split_once(':')
                .ok_or_else(|| Error::SpectrumSyntax(format!("`{item}` is not eigenvalue:fraction")))?;
            let l: f64 = l
                .trim()
                .parse()
                .map_err(|_| Error::SpectrumSyntax(format!("bad eigenvalue `{l}`")))?;
            let r: f64 = r
                .trim()
                .parse()
                .map_err(|_| Error::SpectrumSyntax(format!("bad fraction `{r}`")))?;
            pairs.push((l, r));
        }
        Self::new(&pairs)
    }
}

impl fmt::Display for EigenSpectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (l, r)) in self.entries.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}:{r}")?;
        }
        Ok(())
    }
}

/// Eigenvalue moments `μ_0..μ_D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector(pub Vec<f64>);

impl MomentVector {
    pub fn get(&self, d: usize) -> Option<f64> {
        self.0.get(d).copied()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_eigenvalues(eigenvalues: &[f64], dmax: usize) -> Self {
        let n = eigenvalues.len().max(1) as f64;
        MomentVector(
            (0..=dmax)
                .map(|e| {
                    if e == 0 {
                        1.0
                    } else {
                        eigenvalues.iter().map(|l| l.powi(e as i32)).sum::<f64>() / n
                    }
                })
                .collect(),
        )
    }
}

/// How the second-moment matrix of a dataset is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataNormalization {
    /// `(1/n) Σ ξ ξ^T` with no centering. This is the quantity behind the
    /// commonly quoted IRIS (≈ 15.9) and MNIST (≈ 0.112) first moments.
    #[default]
    RawSecondMoment,
    /// Mean-centered covariance with the biased `1/n` normalizer.
    Centered,
}

/// Spectral summary of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSpectrum {
    /// All eigenvalues of the second-moment matrix, ascending, clipped at 0.
    pub eigenvalues: Vec<f64>,
    /// `μ_0..μ_4` computed from the full eigenvalue list.
    pub moments: MomentVector,
    /// Equal-count binned spectrum; preserves `μ_1` exactly.
    pub spectrum: EigenSpectrum,
    pub samples: usize,
}

/// Highest moment reported by [`empirical_spectrum_from_data`].
pub const REPORTED_MOMENTS: usize = 4;

/// Eigenvalues of the data second-moment matrix, their moments, and a
/// compressed spectrum with at most `max_distinct` entries.
///
/// `rows` is row-major with `dim` columns.
pub fn empirical_spectrum_from_data(
    rows: &[f64],
    dim: usize,
    max_distinct: usize,
    normalization: DataNormalization,
) -> Result<EmpiricalSpectrum> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values cannot be split into rows of {dim}",
            rows.len()
        )));
    }
    let n_rows = rows.len() / dim;
    if n_rows < 2 {
        return Err(Error::DegenerateData { rows: n_rows });
    }
    if rows.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("dataset"));
    }

    // Accumulate X^T X in row blocks to bound memory on large datasets.
    const BLOCK: usize = 2048;
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let mut mean = vec![0.0; dim];
    for chunk in rows.chunks(BLOCK * dim) {
        let b = chunk.len() / dim;
        let x = DMatrix::from_row_slice(b, dim, chunk);
        acc.gemm_tr(1.0, &x, &x, 1.0);
        for row in chunk.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    let inv_n = 1.0 / n_rows as f64;
    acc *= inv_n;
    if normalization == DataNormalization::Centered {
        for m in &mut mean {
            *m *= inv_n;
        }
        for i in 0..dim {
            for j in 0..dim {
                acc[(i, j)] -= mean[i] * mean[j];
            }
        }
    }

    let eigenvalues: Vec<f64> = symmetric_eigenvalues(acc).into_iter().map(|l| l.max(0.0)).collect();
    let moments = MomentVector::from_eigenvalues(&eigenvalues, REPORTED_MOMENTS);
    let spectrum = compress_eigenvalues(&eigenvalues, max_distinct)?;
    Ok(EmpiricalSpectrum { eigenvalues, moments, spectrum, samples: n_rows })
}

/// Bins sorted eigenvalues into at most `max_distinct` equal-count groups,
/// each represented by its mean. The first moment is preserved exactly.
pub fn compress_eigenvalues(sorted: &[f64], max_distinct: usize) -> Result<EigenSpectrum> {
    let n = sorted.len();
    if n == 0 {
        return Err(Error::EmptySpectrum);
    }
    let bins = max_distinct.clamp(1, n);
    let mut pairs = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b * n / bins;
        let hi = (b + 1) * n / bins;
        if hi > lo {
            let slice = &sorted[lo..hi];
            let mean = slice.iter().sum::<f64>() / slice.len() as f64;
            pairs.push((mean, slice.len() as f64 / n as f64));
        }
    }
    EigenSpectrum::new(&pairs)
}
