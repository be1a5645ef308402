//! Macroscopic state: overlaps between student and teacher weight vectors.
//!
//! For weight rows `J_i` (student), `B_n` (teacher) and second layers `w`, `v`:
//!
//! * `Q^(e)_ij = J_iᵀ Σ^e J_j`, `R^(e)_in = J_iᵀ Σ^e B_n`, `T^(e)_nm = B_nᵀ Σ^e B_m`
//! * `D = w wᵀ`, `E = w vᵀ`, `F = v vᵀ`
//!
//! Only orders `0..d-1` are stored, where `d` is the number of distinct
//! eigenvalues of `Σ`; higher orders follow from the annihilating polynomial.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{clip_to_psd, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParameterState {
    /// `Q^(e)`, `K × K`, for each stored order `e`.
    pub q: Vec<Matrix>,
    /// `R^(e)`, `K × M`.
    pub r: Vec<Matrix>,
    /// `T^(e)`, `M × M`; constant in time.
    pub t: Vec<Matrix>,
    pub d: Matrix,
    pub e: Matrix,
    /// Constant in time.
    pub f: Matrix,
}

/// Order-1 overlaps plus second-layer products: everything the generalization
/// error depends on. Recorded along trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlaps {
    pub q: Matrix,
    pub r: Matrix,
    pub t: Matrix,
    pub d: Matrix,
    pub e: Matrix,
    pub f: Matrix,
}

impl OrderParameterState {
    pub fn k(&self) -> usize {
        self.d.rows()
    }

    pub fn m(&self) -> usize {
        self.f.rows()
    }

    /// Number of stored orders.
    pub fn orders(&self) -> usize {
        self.q.len()
    }

    /// Checks shapes against `K`, `M` and the order count.
    pub fn validate(&self) -> Result<()> {
        let (k, m) = (self.k(), self.m());
        let l = self.orders();
        let bad = |what: &str| Err(Error::ShapeMismatch(what.to_string()));
        if l == 0 || self.r.len() != l || self.t.len() != l {
            return bad("Q, R, T must hold the same non-zero number of orders");
        }
        if self.q.iter().any(|x| x.shape() != (k, k)) || self.d.shape() != (k, k) {
            return bad("Q and D must be K x K");
        }
        if self.r.iter().any(|x| x.shape() != (k, m)) || self.e.shape() != (k, m) {
            return bad("R and E must be K x M");
        }
        if self.t.iter().any(|x| x.shape() != (m, m)) || self.f.shape() != (m, m) {
            return bad("T and F must be M x M");
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.r).chain(&self.t).all(Matrix::is_finite)
            && self.d.is_finite()
            && self.e.is_finite()
            && self.f.is_finite()
    }

    /// Length of the flattened dynamic part (`Q`, `R`, `D`, `E`).
    pub fn variable_len(&self) -> usize {
        let (k, m) = (self.k(), self.m());
        self.orders() * (k * k + k * m) + k * k + k * m
    }

    /// Flattens the dynamic variables in the order `Q^(0..), R^(0..), D, E`.
    pub fn pack_variables(&self, out: &mut Vec<f64>) {
        out.clear();
        for q in &self.q {
            out.extend_from_slice(q.as_slice());
        }
        for r in &self.r {
            out.extend_from_slice(r.as_slice());
        }
        out.extend_from_slice(self.d.as_slice());
        out.extend_from_slice(self.e.as_slice());
    }

    /// Inverse of [`pack_variables`](Self::pack_variables); constants untouched.
    pub fn unpack_variables(&mut self, flat: &[f64]) {
        let mut rest = flat;
        let mut take = |dst: &mut Matrix| {
            let n = dst.as_slice().len();
            dst.as_mut_slice().copy_from_slice(&rest[..n]);
            rest = &rest[n..];
        };
        for q in &mut self.q {
            take(q);
        }
        for r in &mut self.r {
            take(r);
        }
        take(&mut self.d);
        take(&mut self.e);
    }

    /// Same shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        OrderParameterState {
            q: self.q.iter().map(z).collect(),
            r: self.r.iter().map(z).collect(),
            t: self.t.iter().map(z).collect(),
            d: z(&self.d),
            e: z(&self.e),
            f: z(&self.f),
        }
    }

    pub fn symmetrize(&mut self) {
        for q in &mut self.q {
            q.symmetrize();
        }
        self.d.symmetrize();
    }

    /// Largest absolute entry over all blocks, constants included.
    pub fn max_abs(&self) -> f64 {
        self.q
            .iter()
            .chain(&self.r)
            .chain(&self.t)
            .chain([&self.d, &self.e, &self.f])
            .map(Matrix::max_abs)
            .fold(0.0, f64::max)
    }

    /// Stacked Gram block `[[Q^(e), R^(e)], [R^(e)ᵀ, T^(e)]]` of one order.
    pub fn gram_block(&self, order: usize) -> DMatrix<f64> {
        let (k, m) = (self.k(), self.m());
        let (q, r, t) = (&self.q[order], &self.r[order], &self.t[order]);
        DMatrix::from_fn(k + m, k + m, |a, b| match (a < k, b < k) {
            (true, true) => q[(a, b)],
            (true, false) => r[(a, b - k)],
            (false, true) => r[(b, a - k)],
            (false, false) => t[(a - k, b - k)],
        })
    }

    /// Clips every stored Gram block to the PSD cone. Returns the number of
    /// negative modes removed.
    pub fn project_gram_psd(&mut self) -> usize {
        let (k, m) = (self.k(), self.m());
        let mut clipped = 0;
        for order in 0..self.orders() {
            let (g, n) = clip_to_psd(&self.gram_block(order));
            clipped += n;
            if n == 0 {
                continue;
            }
            let g = Matrix::from_nalgebra(&g);
            self.q[order] = Matrix::from_fn(k, k, |a, b| g[(a, b)]);
            self.r[order] = Matrix::from_fn(k, m, |a, b| g[(a, k + b)]);
            self.t[order] = Matrix::from_fn(m, m, |a, b| g[(k + a, k + b)]);
            self.q[order].symmetrize();
            self.t[order].symmetrize();
        }
        clipped
    }

    /// Soft-committee second layers `D = E = F = 1`.
    pub fn unit_second_layer(k: usize, m: usize) -> (Matrix, Matrix, Matrix) {
        (Matrix::filled(k, k, 1.0), Matrix::filled(k, m, 1.0), Matrix::filled(m, m, 1.0))
    }

    /// Writes the state as JSON. Floats round-trip exactly.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}
