//! Weight-level online SGD for the student-teacher pair.
//!
//! Inputs are drawn from `N(0, diag(λ))` with the diagonal realized from an
//! [`EigenSpectrum`]. Every overlap is a bilinear form in the weights, so a
//! diagonal covariance loses no generality given isotropic initialization.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::macroscopic::generalization_error_overlaps;
use crate::rng::{self, Stream};
use crate::spectrum::EigenSpectrum;
use crate::state::{OrderParameterState, Overlaps};
use crate::trajectory::{Trajectory, TrajectoryPoint};

/// Upper bound on the number of recorded points when `record_every` is unset.
pub const DEFAULT_RECORDS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    /// Step size is `eta / n`.
    pub eta: f64,
    pub soft_committee: bool,
    pub seed: u64,
    pub steps: u64,
    pub record_every: Option<u64>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::InvalidConfig("K and M must be positive".into()));
        }
        if self.n < self.k.max(self.m) {
            return Err(Error::InvalidConfig(format!("N = {} must be at least max(K, M)", self.n)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta = {} must be non-negative", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if self.record_every == Some(0) {
            return Err(Error::InvalidConfig("record_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn record_interval(&self) -> u64 {
        self.record_every.unwrap_or_else(|| (self.steps / DEFAULT_RECORDS as u64).max(1))
    }
}

/// Student `(J, w)` and frozen teacher `(B, v)`. First layers are row-major,
/// one row of length `n` per hidden unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub j: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

impl NetworkWeights {
    pub fn student_row(&self, i: usize) -> &[f64] {
        &self.j[i * self.n..(i + 1) * self.n]
    }

    pub fn teacher_row(&self, n: usize) -> &[f64] {
        &self.b[n * self.n..(n + 1) * self.n]
    }

    /// A student that computes exactly the teacher's function.
    pub fn student_equal_to_teacher(&self) -> Result<Self> {
        if self.k != self.m {
            return Err(Error::ShapeMismatch(format!("K = {} differs from M = {}", self.k, self.m)));
        }
        Ok(NetworkWeights { j: self.b.clone(), w: self.v.clone(), ..self.clone() })
    }
}

/// First layers i.i.d. `N(0, 1/N)`; second layers 1 (soft committee) or
/// i.i.d. `N(0, 1)`. Student rows are drawn before teacher rows.
pub fn init_weights(config: &SimConfig) -> Result<NetworkWeights> {
    config.validate()?;
    let (n, k, m) = (config.n, config.k, config.m);
    let mut rng = rng::stream(config.seed, Stream::Weights);
    let sd = (1.0 / n as f64).sqrt();
    let mut draw = |len: usize, scale: f64| -> Vec<f64> {
        (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let j = draw(k * n, sd);
    let b = draw(m * n, sd);
    let (w, v) = if config.soft_committee { (vec![1.0; k], vec![1.0; m]) } else { (draw(k, 1.0), draw(m, 1.0)) };
    Ok(NetworkWeights { n, k, m, j, w, b, v })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub s: f64,
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn forward(weights: &NetworkWeights, xi: &[f64]) -> Forward {
    let g = Activation::Erf;
    let x: Vec<f64> = (0..weights.k).map(|i| dot(weights.student_row(i), xi)).collect();
    let y: Vec<f64> = (0..weights.m).map(|n| dot(weights.teacher_row(n), xi)).collect();
    let s = x.iter().zip(&weights.w).map(|(&xi, &wi)| wi * g.g(xi)).sum();
    let t = y.iter().zip(&weights.v).map(|(&yn, &vn)| vn * g.g(yn)).sum();
    Forward { s, t, x, y }
}

/// One online SGD step on `½(s − t)²` with step size `η/N`. Returns the
/// forward pass taken before the update.
pub fn sgd_step(weights: &mut NetworkWeights, xi: &[f64], config: &SimConfig) -> Forward {
    let g = Activation::Erf;
    let fw = forward(weights, xi);
    let scale = config.eta / weights.n as f64;
    let err = fw.t - fw.s;
    let n = weights.n;
    for i in 0..weights.k {
        let coef = scale * err * weights.w[i] * g.g_prime(fw.x[i]);
        if coef != 0.0 {
            for (jk, &xk) in weights.j[i * n..(i + 1) * n].iter_mut().zip(xi) {
                *jk += coef * xk;
            }
        }
    }
    if !config.soft_committee {
        for i in 0..weights.k {
            weights.w[i] += scale * g.g(fw.x[i]) * err;
        }
    }
    fw
}

/// Overlaps of orders `0..=emax` computed directly from the weights with the
/// diagonal covariance `diag`.
pub fn measure_with_diagonal(weights: &NetworkWeights, diag: &[f64], emax: usize) -> Result<OrderParameterState> {
    let (n, k, m) = (weights.n, weights.k, weights.m);
    if diag.len() != n {
        return Err(Error::ShapeMismatch(format!("covariance diagonal has length {}, N = {n}", diag.len())));
    }
    let rows: Vec<&[f64]> = (0..k).map(|i| weights.student_row(i)).chain((0..m).map(|p| weights.teacher_row(p))).collect();
    // Σ^e applied to every row, updated in place order by order
    let mut powered: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    let mut q = Vec::with_capacity(emax + 1);
    let mut r = Vec::with_capacity(emax + 1);
    let mut t = Vec::with_capacity(emax + 1);
    for _ in 0..=emax {
        let g = |a: usize, b: usize| dot(rows[a], &powered[b]);
        let mut qe = Matrix::from_fn(k, k, |i, j| if i <= j { g(i, j) } else { 0.0 });
        let mut te = Matrix::from_fn(m, m, |a, b| if a <= b { g(k + a, k + b) } else { 0.0 });
        for i in 0..k {
            for j in 0..i {
                qe[(i, j)] = qe[(j, i)];
            }
        }
        for a in 0..m {
            for b in 0..a {
                te[(a, b)] = te[(b, a)];
            }
        }
        r.push(Matrix::from_fn(k, m, |i, p| g(i, k + p)));
        q.push(qe);
        t.push(te);
        for row in &mut powered {
            for (x, &l) in row.iter_mut().zip(diag) {
                *x *= l;
            }
        }
    }
    let d = Matrix::from_fn(k, k, |i, j| weights.w[i] * weights.w[j]);
    let e = Matrix::from_fn(k, m, |i, p| weights.w[i] * weights.v[p]);
    let f = Matrix::from_fn(m, m, |a, b| weights.v[a] * weights.v[b]);
    Ok(OrderParameterState { q, r, t, d, e, f })
}

/// `Q^(e)`, `R^(e)`, `T^(e)` for `e = 0..=emax` with `Σ` realized from
/// `spectrum` at the weights' dimension.
pub fn measure_order_parameters(weights: &NetworkWeights, spectrum: &EigenSpectrum, emax: usize) -> Result<OrderParameterState> {
    measure_with_diagonal(weights, &spectrum.realize(weights.n)?, emax)
}

/// The macroscopic state matching `weights`: orders `0..d-1`.
pub fn macro_state_from_weights(weights: &NetworkWeights, spectrum: &EigenSpectrum) -> Result<OrderParameterState> {
    measure_order_parameters(weights, spectrum, spectrum.distinct() - 1)
}

fn order1_snapshot(weights: &NetworkWeights, diag: &[f64]) -> Result<Overlaps> {
    let mut s = measure_with_diagonal(weights, diag, 1)?;
    Ok(Overlaps { q: s.q.pop().unwrap(), r: s.r.pop().unwrap(), t: s.t.pop().unwrap(), d: s.d, e: s.e, f: s.f })
}

/// Draws `ξ` with independent coordinates of variance `diag[k]`.
pub fn sample_input<R: Rng + ?Sized>(rng: &mut R, sd: &[f64], out: &mut [f64]) {
    for (x, &s) in out.iter_mut().zip(sd) {
        let z: f64 = rng.sample(StandardNormal);
        *x = s * z;
    }
}

/// Runs SGD from freshly initialized weights.
pub fn run_micro(config: &SimConfig, spectrum: &EigenSpectrum) -> Result<Trajectory> {
    let weights = init_weights(config)?;
    run_micro_from(weights, config, spectrum).map(|(traj, _)| traj)
}

/// Runs SGD from `weights`, recording `α̃ = step / N` and `ε_g` from the
/// measured order-1 overlaps. Returns the trajectory and final weights.
pub fn run_micro_from(
    mut weights: NetworkWeights,
    config: &SimConfig,
    spectrum: &EigenSpectrum,
) -> Result<(Trajectory, NetworkWeights)> {
    config.validate()?;
    if (weights.n, weights.k, weights.m) != (config.n, config.k, config.m) {
        return Err(Error::ShapeMismatch("weights do not match the configuration".into()));
    }
    let diag = spectrum.realize(config.n)?;
    let sd: Vec<f64> = diag.iter().map(|l| l.sqrt()).collect();
    let every = config.record_interval();
    let mut rng = rng::input_stream(config.seed);
    let mut xi = vec![0.0; config.n];
    let mut points = Vec::with_capacity((config.steps / every) as usize + 2);
    let n = config.n as f64;

    let record = |weights: &NetworkWeights, step: u64, points: &mut Vec<TrajectoryPoint>| -> Result<()> {
        let snap = order1_snapshot(weights, &diag)?;
        let eps_g = generalization_error_overlaps(&snap)?;
        if !eps_g.is_finite() {
            return Err(Error::NonFiniteState { alpha: step as f64 / n });
        }
        points.push(TrajectoryPoint { alpha: step as f64 / n, eps_g, snapshot: Some(snap) });
        Ok(())
    };
    record(&weights, 0, &mut points)?;
    for step in 1..=config.steps {
        sample_input(&mut rng, &sd, &mut xi);
        sgd_step(&mut weights, &xi, config);
        if step % every == 0 || step == config.steps {
            record(&weights, step, &mut points)?;
        }
    }
    Ok((Trajectory { points, final_state: None }, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize, k: usize, m: usize, soft: bool) -> SimConfig {
        SimConfig { n, k, m, eta: 0.5, soft_committee: soft, seed: 11, steps: 100, record_every: Some(10) }
    }

    #[test]
    fn init_statistics() {
        let cfg = config(10_000, 1, 1, true);
        let w = init_weights(&cfg).unwrap();
        let n = w.j.len() as f64;
        let mean = w.j.iter().sum::<f64>() / n;
        let var = w.j.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let target = 1.0 / 10_000.0;
        // SE of the mean is sqrt(1/N / n); SE of the variance about sqrt(2/n)/N
        assert!(mean.abs() < 3.0 * (target / n).sqrt());
        assert!((var - target).abs() < 3.0 * (2.0 / n).sqrt() * target);
        assert_eq!(w.w, vec![1.0]);
        assert_eq!(w.v, vec![1.0]);
        assert_eq!(init_weights(&cfg).unwrap(), w);
    }

    #[test]
    fn forward_examples() {
        let cfg = config(3, 2, 2, true);
        let w = init_weights(&cfg).unwrap();
        let f = forward(&w, &[0.0; 3]);
        assert_eq!((f.s, f.t), (0.0, 0.0));
        let same = w.student_equal_to_teacher().unwrap();
        let f = forward(&same, &[0.3, -1.2, 2.0]);
        assert_eq!(f.s, f.t);

        let one = NetworkWeights { n: 1, k: 1, m: 1, j: vec![1.0], w: vec![1.0], b: vec![0.0], v: vec![1.0] };
        assert!((forward(&one, &[1.0]).s - 0.682_689_492_137_085_9).abs() < 1e-15);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-13);
    }

    #[test]
    fn zero_error_means_zero_update() {
        let cfg = config(5, 2, 2, false);
        let w0 = init_weights(&cfg).unwrap().student_equal_to_teacher().unwrap();
        let mut w = w0.clone();
        sgd_step(&mut w, &[0.1, 0.4, -0.3, 1.0, 2.0], &cfg);
        assert_eq!(w, w0);
    }

    #[test]
    fn update_is_linear_in_eta() {
        let mut cfg = config(6, 2, 3, false);
        let w0 = init_weights(&cfg).unwrap();
        let xi = [0.5, -1.0, 0.3, 0.8, -0.2, 1.1];
        let delta = |cfg: &SimConfig| {
            let mut w = w0.clone();
            sgd_step(&mut w, &xi, cfg);
            let dj: Vec<f64> = w.j.iter().zip(&w0.j).map(|(a, b)| a - b).collect();
            let dw: Vec<f64> = w.w.iter().zip(&w0.w).map(|(a, b)| a - b).collect();
            (dj, dw)
        };
        let (j1, w1) = delta(&cfg);
        cfg.eta *= 2.0;
        let (j2, w2) = delta(&cfg);
        // differences of stored weights carry rounding at the weights' scale
        for (a, b) in j1.iter().chain(&w1).zip(j2.iter().chain(&w2)) {
            assert!((2.0 * a - b).abs() <= 1e-14);
        }
        assert!(j1.iter().any(|x| x.abs() > 1e-4));
    }

    #[test]
    fn update_is_scaled_negative_gradient() {
        let cfg = SimConfig { n: 1, k: 1, m: 1, eta: 0.7, soft_committee: false, seed: 0, steps: 1, record_every: None };
        let w0 = NetworkWeights { n: 1, k: 1, m: 1, j: vec![0.8], w: vec![1.3], b: vec![-0.4], v: vec![0.9] };
        let xi = [1.1];
        let loss = |w: &NetworkWeights| {
            let f = forward(w, &xi);
            0.5 * (f.s - f.t).powi(2)
        };
        let h = 1e-6;
        let grad = |set: &dyn Fn(&mut NetworkWeights, f64)| {
            let mut p = w0.clone();
            let mut mn = w0.clone();
            set(&mut p, h);
            set(&mut mn, -h);
            (loss(&p) - loss(&mn)) / (2.0 * h)
        };
        let gj = grad(&|w, d| w.j[0] += d);
        let gw = grad(&|w, d| w.w[0] += d);
        let mut w = w0.clone();
        sgd_step(&mut w, &xi, &cfg);
        let step = cfg.eta / 1.0;
        assert!(((w.j[0] - w0.j[0]) + step * gj).abs() < 1e-6 * (step * gj).abs());
        assert!(((w.w[0] - w0.w[0]) + step * gw).abs() < 1e-6 * (step * gw).abs());
    }

    #[test]
    fn teacher_never_changes_and_runs_are_deterministic() {
        let cfg = config(50, 2, 2, false);
        let s = EigenSpectrum::new(&[(0.5, 0.5), (2.0, 0.5)]).unwrap();
        let w0 = init_weights(&cfg).unwrap();
        let (traj, w1) = run_micro_from(w0.clone(), &cfg, &s).unwrap();
        assert_eq!(w1.b, w0.b);
        assert_eq!(w1.v, w0.v);
        let t0 = &traj.points[0].snapshot.as_ref().unwrap();
        for p in &traj.points {
            let snap = p.snapshot.as_ref().unwrap();
            assert_eq!(snap.t, t0.t);
            assert_eq!(snap.f, t0.f);
        }
        assert_eq!(run_micro(&cfg, &s).unwrap(), traj);
        assert_eq!(traj.len(), 11);
        assert!((traj.points[10].alpha - 2.0).abs() < 1e-15);
    }

    #[test]
    fn eta_zero_and_matched_student() {
        let s = EigenSpectrum::scalar(1.0).unwrap();
        let mut cfg = config(40, 2, 2, true);
        cfg.eta = 0.0;
        let traj = run_micro(&cfg, &s).unwrap();
        assert!(traj.points.iter().all(|p| p.eps_g == traj.points[0].eps_g));

        cfg.eta = 1.0;
        let w = init_weights(&cfg).unwrap().student_equal_to_teacher().unwrap();
        let (traj, _) = run_micro_from(w, &cfg, &s).unwrap();
        assert!(traj.points.iter().all(|p| p.eps_g == 0.0));
    }

    #[test]
    fn orthonormal_rows_under_identity() {
        let mut j = vec![0.0; 8];
        j[0] = 1.0;
        j[5] = 1.0;
        let w = NetworkWeights { n: 4, k: 2, m: 1, j, w: vec![1.0; 2], b: vec![0.5; 4], v: vec![1.0] };
        let st = measure_order_parameters(&w, &EigenSpectrum::scalar(1.0).unwrap(), 3).unwrap();
        for q in &st.q {
            assert_eq!(*q, Matrix::identity(2));
        }
    }

    #[test]
    fn scalar_covariance_scales_overlaps() {
        let cfg = config(30, 2, 3, false);
        let w = init_weights(&cfg).unwrap();
        let st = measure_order_parameters(&w, &EigenSpectrum::scalar(2.5).unwrap(), 1).unwrap();
        assert!(st.q[1].max_abs_diff(&st.q[0].scaled(2.5)) < 1e-15);
        assert!(st.r[1].max_abs_diff(&st.r[0].scaled(2.5)) < 1e-15);
        assert!(st.t[1].max_abs_diff(&st.t[0].scaled(2.5)) < 1e-15);
    }

    #[test]
    fn second_order_from_characteristic_polynomial() {
        let cfg = config(101, 3, 2, true);
        let w = init_weights(&cfg).unwrap();
        let (l1, l2) = (0.4, 1.9);
        let st = measure_order_parameters(&w, &EigenSpectrum::new(&[(l1, 0.3), (l2, 0.7)]).unwrap(), 2).unwrap();
        let mut expected = st.q[1].scaled(l1 + l2);
        expected.add_scaled(&st.q[0], -l1 * l2);
        assert!(st.q[2].max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn bad_config_rejected() {
        let mut cfg = config(1, 2, 2, true);
        assert!(init_weights(&cfg).is_err());
        cfg.n = 10;
        cfg.steps = 0;
        assert!(init_weights(&cfg).is_err());
    }
}
