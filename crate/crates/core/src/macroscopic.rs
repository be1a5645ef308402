//! Order-parameter ODEs for online learning in normalized time `α̃ = steps / N`.
//!
//! Expectations over the input reduce to the `I2`/`I3`/`I4` kernels evaluated
//! on covariances of the local fields. With `x_i^(e) = ξᵀ Σ^e J_i` and
//! `y_n^(e) = ξᵀ Σ^e B_n`, the covariance of any two fields is an overlap of
//! order `e + f + 1`, e.g. `⟨x_i^(e) x_j^(f)⟩ = Q^(e+f+1)_ij`. The rate of
//! order-`e` variables therefore needs orders 1 and `e + 1` only (the
//! `I3` kernel ignores the variance of its middle argument), and order `d`
//! is eliminated with the annihilating polynomial of `Σ`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{i2, i3, i4, GaussianCov};
use crate::linalg::Matrix;
use crate::ode::Rk4;
use crate::rng::{self, Stream};
use crate::spectrum::EigenSpectrum;
use crate::state::{OrderParameterState, Overlaps};
use crate::trajectory::{Trajectory, TrajectoryPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub eta: f64,
    pub spectrum: EigenSpectrum,
    /// Soft-committee mode: `D`, `E` do not evolve.
    pub freeze_second_layer: bool,
    pub t_end: f64,
    pub dt: f64,
    /// Integration steps between recorded points.
    pub record_every: usize,
    /// Stop early once `ε_g` drops below this value.
    pub stop_below: Option<f64>,
}

impl MacroConfig {
    pub fn new(eta: f64, spectrum: EigenSpectrum, t_end: f64) -> Self {
        let dt = default_dt(eta, &spectrum);
        MacroConfig { eta, spectrum, freeze_second_layer: true, t_end, dt, record_every: 1, stop_below: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidConfig(format!("t_end = {} must be positive", self.t_end)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta = {} must be non-negative", self.eta)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// `0.05 / (η μ₁)`: a step well inside the stability region of RK4 for the
/// rates the system produces. Falls back to `0.05` when `η μ₁ = 0`.
pub fn default_dt(eta: f64, spectrum: &EigenSpectrum) -> f64 {
    let rate = eta * spectrum.moment(1);
    if rate > 0.0 {
        0.05 / rate
    } else {
        0.05
    }
}

/// A local field entering an expectation kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    /// Student field `x_i`.
    Student(usize),
    /// Teacher field `y_n`.
    Teacher(usize),
}

/// Overlaps of orders `0..=d`, with order `d` filled in by the closure
/// relation. Built once per right-hand-side evaluation.
#[derive(Debug, Clone)]
pub struct LiftedOverlaps {
    pub q: Vec<Matrix>,
    pub r: Vec<Matrix>,
    pub t: Vec<Matrix>,
}

impl LiftedOverlaps {
    pub fn new(state: &OrderParameterState, spectrum: &EigenSpectrum) -> Result<Self> {
        let d = spectrum.distinct();
        let mut lifted = LiftedOverlaps { q: Vec::with_capacity(d + 1), r: Vec::with_capacity(d + 1), t: Vec::with_capacity(d + 1) };
        for e in 0..=d {
            let (q, r, t) = lift_order(state, spectrum, e)?;
            lifted.q.push(q);
            lifted.r.push(r);
            lifted.t.push(t);
        }
        Ok(lifted)
    }

    /// `⟨a^(e₁) b^(e₂)⟩` where `order = e₁ + e₂ + 1`.
    #[inline]
    pub fn cov(&self, order: usize, a: Field, b: Field) -> f64 {
        match (a, b) {
            (Field::Student(i), Field::Student(j)) => self.q[order][(i, j)],
            (Field::Student(i), Field::Teacher(n)) | (Field::Teacher(n), Field::Student(i)) => self.r[order][(i, n)],
            (Field::Teacher(n), Field::Teacher(m)) => self.t[order][(n, m)],
        }
    }

    fn k(&self) -> usize {
        self.q[0].rows()
    }

    fn m(&self) -> usize {
        self.t[0].rows()
    }

    fn check(&self, f: Field) -> Result<()> {
        let ok = match f {
            Field::Student(i) => i < self.k(),
            Field::Teacher(n) => n < self.m(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange(format!("{f:?} with K = {}, M = {}", self.k(), self.m())))
        }
    }

    pub fn order1(&self, d: &Matrix, e: &Matrix, f: &Matrix) -> Overlaps {
        Overlaps { q: self.q[1].clone(), r: self.r[1].clone(), t: self.t[1].clone(), d: d.clone(), e: e.clone(), f: f.clone() }
    }
}

/// `(Q^(e), R^(e), T^(e))` for any `e ≤ 2d`, expressed through the stored
/// orders via `Σ^e = Σ_k a_k Σ^k` on the spectrum.
pub fn lift_order(state: &OrderParameterState, spectrum: &EigenSpectrum, e: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let d = spectrum.distinct();
    if e < state.orders() {
        return Ok((state.q[e].clone(), state.r[e].clone(), state.t[e].clone()));
    }
    if state.orders() < d {
        return Err(Error::ShapeMismatch(format!("state stores {} orders, spectrum needs {d}", state.orders())));
    }
    if e > 2 * d {
        return Err(Error::OrderOutOfRange { order: e, max: 2 * d });
    }
    let coeffs = spectrum.power_in_basis(e);
    let (k, m) = (state.k(), state.m());
    let mut q = Matrix::zeros(k, k);
    let mut r = Matrix::zeros(k, m);
    let mut t = Matrix::zeros(m, m);
    for (order, &a) in coeffs.iter().enumerate() {
        q.add_scaled(&state.q[order], a);
        r.add_scaled(&state.r[order], a);
        t.add_scaled(&state.t[order], a);
    }
    Ok((q, r, t))
}

/// Covariance of `(x_i, z₂^(e), z₃)` for `I3(x_i, z₂^(e), z₃)`.
///
/// Entries: `C₁₁ = ⟨x_i x_i⟩`, `C₁₂ = Ω^(e+1)(i, z₂)`, `C₁₃ = ⟨x_i z₃⟩`,
/// `C₂₃ = Ω^(e+1)(z₂, z₃)`, `C₃₃ = ⟨z₃ z₃⟩`, all others of order 1.
/// `C₂₂` does not affect `I3`; it is set to the smallest value keeping the
/// matrix PSD (`z₂` in the span of `z₁`, `z₃`).
pub fn assemble_i3_cov(lifted: &LiftedOverlaps, i: usize, z2: Field, z3: Field, e: usize) -> Result<GaussianCov<3>> {
    let xi = Field::Student(i);
    lifted.check(xi)?;
    lifted.check(z2)?;
    lifted.check(z3)?;
    if e + 1 >= lifted.q.len() {
        return Err(Error::OrderOutOfRange { order: e + 1, max: lifted.q.len() - 1 });
    }
    let c11 = lifted.cov(1, xi, xi);
    let c12 = lifted.cov(e + 1, xi, z2);
    let c13 = lifted.cov(1, xi, z3);
    let c23 = lifted.cov(e + 1, z2, z3);
    let c33 = lifted.cov(1, z3, z3);
    let c22 = span_variance(c11, c13, c33, c12, c23);
    Ok(GaussianCov::new_unchecked([[c11, c12, c13], [c12, c22, c23], [c13, c23, c33]]))
}

/// `cᵀ A⁺ c` for `A = [[c11, c13], [c13, c33]]`, `c = (c12, c23)`.
fn span_variance(c11: f64, c13: f64, c33: f64, c12: f64, c23: f64) -> f64 {
    let det = c11 * c33 - c13 * c13;
    if det > 1e-12 * (c11 * c33).max(1e-300) {
        (c33 * c12 * c12 - 2.0 * c13 * c12 * c23 + c11 * c23 * c23) / det
    } else if c11 > 0.0 {
        c12 * c12 / c11
    } else {
        0.0
    }
}

fn cov4(l: &LiftedOverlaps, z: [Field; 4]) -> GaussianCov<4> {
    let mut c = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in a..4 {
            c[a][b] = l.cov(1, z[a], z[b]);
            c[b][a] = c[a][b];
        }
    }
    GaussianCov::new_unchecked(c)
}

fn cov2(l: &LiftedOverlaps, a: Field, b: Field) -> GaussianCov<2> {
    let ab = l.cov(1, a, b);
    GaussianCov::new_unchecked([[l.cov(1, a, a), ab], [ab, l.cov(1, b, b)]])
}

/// `ε_g = ½[Σ F_pq I2(y_p,y_q) + Σ D_pq I2(x_p,x_q) − 2 Σ E_pq I2(x_p,y_q)]`
/// from order-1 overlaps.
pub fn generalization_error_overlaps(o: &Overlaps) -> Result<f64> {
    let (k, m) = (o.q.rows(), o.t.rows());
    let c = |a: f64, ab: f64, b: f64| GaussianCov::new_unchecked([[a, ab], [ab, b]]);
    let mut teacher = 0.0;
    for p in 0..m {
        for q in 0..m {
            teacher += o.f[(p, q)] * i2(&c(o.t[(p, p)], o.t[(p, q)], o.t[(q, q)]))?;
        }
    }
    let mut student = 0.0;
    for p in 0..k {
        for q in 0..k {
            student += o.d[(p, q)] * i2(&c(o.q[(p, p)], o.q[(p, q)], o.q[(q, q)]))?;
        }
    }
    let mut cross = 0.0;
    for p in 0..k {
        for q in 0..m {
            cross += o.e[(p, q)] * i2(&c(o.q[(p, p)], o.r[(p, q)], o.t[(q, q)]))?;
        }
    }
    Ok(0.5 * (teacher + student - 2.0 * cross))
}

pub fn order1_overlaps(state: &OrderParameterState, spectrum: &EigenSpectrum) -> Result<Overlaps> {
    let (q, r, t) = lift_order(state, spectrum, 1)?;
    Ok(Overlaps { q, r, t, d: state.d.clone(), e: state.e.clone(), f: state.f.clone() })
}

pub fn generalization_error(state: &OrderParameterState, spectrum: &EigenSpectrum) -> Result<f64> {
    generalization_error_overlaps(&order1_overlaps(state, spectrum)?)
}

/// Time derivative of every order parameter, split by power of `η`:
/// `rhs = η · linear + η² · quadratic`. Constants have zero rate.
#[derive(Debug, Clone)]
pub struct RateTerms {
    pub linear: OrderParameterState,
    pub quadratic: OrderParameterState,
}

impl RateTerms {
    pub fn combine(&self, eta: f64) -> OrderParameterState {
        let mut out = self.linear.zeros_like();
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.linear.pack_variables(&mut a);
        self.quadratic.pack_variables(&mut b);
        let flat: Vec<f64> = a.iter().zip(&b).map(|(x, y)| eta * x + eta * eta * y).collect();
        out.unpack_variables(&flat);
        out
    }
}

/// The `η`-independent parts of the right-hand side.
pub fn rate_terms(state: &OrderParameterState, spectrum: &EigenSpectrum, freeze_second_layer: bool) -> Result<RateTerms> {
    state.validate()?;
    let d = spectrum.distinct();
    if state.orders() != d {
        return Err(Error::ShapeMismatch(format!(
            "state stores {} orders but the spectrum has {d} distinct eigenvalues",
            state.orders()
        )));
    }
    let (k, m) = (state.k(), state.m());
    let lifted = LiftedOverlaps::new(state, spectrum)?;
    let (dd, ee) = (&state.d, &state.e);
    let mut linear = state.zeros_like();
    let mut quadratic = state.zeros_like();

    // η² part of dQ: identical for every order up to the factor μ_{e+1}.
    let mut noise = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let (xi, xj) = (Field::Student(i), Field::Student(j));
            let mut acc = 0.0;
            for p in 0..k {
                for q in 0..k {
                    acc += dd[(i, p)] * dd[(j, q)] * i4(&cov4(&lifted, [xi, xj, Field::Student(p), Field::Student(q)]))?;
                }
            }
            for p in 0..m {
                for q in 0..m {
                    acc += ee[(i, p)] * ee[(j, q)] * i4(&cov4(&lifted, [xi, xj, Field::Teacher(p), Field::Teacher(q)]))?;
                }
            }
            for p in 0..k {
                for q in 0..m {
                    acc -= dd[(i, p)] * ee[(j, q)] * i4(&cov4(&lifted, [xi, xj, Field::Student(p), Field::Teacher(q)]))?;
                }
            }
            for p in 0..m {
                for q in 0..k {
                    acc -= ee[(i, p)] * dd[(j, q)] * i4(&cov4(&lifted, [xi, xj, Field::Teacher(p), Field::Student(q)]))?;
                }
            }
            noise[(i, j)] = acc;
            noise[(j, i)] = acc;
        }
    }

    // h(i, z2, e) = Σ_p E_ip I3(x_i, z2^(e), y_p) − Σ_p D_ip I3(x_i, z2^(e), x_p)
    let drive = |i: usize, z2: Field, e: usize| -> Result<f64> {
        let mut acc = 0.0;
        for p in 0..m {
            acc += ee[(i, p)] * i3(&assemble_i3_cov(&lifted, i, z2, Field::Teacher(p), e)?)?;
        }
        for p in 0..k {
            acc -= dd[(i, p)] * i3(&assemble_i3_cov(&lifted, i, z2, Field::Student(p), e)?)?;
        }
        Ok(acc)
    };

    for e in 0..d {
        let mu = spectrum.moment(e + 1);
        for i in 0..k {
            for j in i..k {
                let v = drive(i, Field::Student(j), e)? + drive(j, Field::Student(i), e)?;
                linear.q[e][(i, j)] = v;
                linear.q[e][(j, i)] = v;
                quadratic.q[e][(i, j)] = mu * noise[(i, j)];
                quadratic.q[e][(j, i)] = mu * noise[(i, j)];
            }
            for n in 0..m {
                linear.r[e][(i, n)] = drive(i, Field::Teacher(n), e)?;
            }
        }
    }

    if !freeze_second_layer {
        let i2f = |a: Field, b: Field| i2(&cov2(&lifted, a, b));
        let ff = &state.f;
        for i in 0..k {
            for j in i..k {
                let mut acc = 0.0;
                for p in 0..m {
                    acc += ee[(i, p)] * i2f(Field::Student(j), Field::Teacher(p))?;
                    acc += ee[(j, p)] * i2f(Field::Student(i), Field::Teacher(p))?;
                }
                for p in 0..k {
                    acc -= dd[(i, p)] * i2f(Field::Student(j), Field::Student(p))?;
                    acc -= dd[(j, p)] * i2f(Field::Student(i), Field::Student(p))?;
                }
                linear.d[(i, j)] = acc;
                linear.d[(j, i)] = acc;
            }
            for n in 0..m {
                let mut acc = 0.0;
                for p in 0..m {
                    acc += ff[(p, n)] * i2f(Field::Student(i), Field::Teacher(p))?;
                }
                for p in 0..k {
                    acc -= ee[(p, n)] * i2f(Field::Student(i), Field::Student(p))?;
                }
                linear.e[(i, n)] = acc;
            }
        }
    }
    Ok(RateTerms { linear, quadratic })
}

/// `dΩ/dα̃` for every order parameter; constants have zero rate.
pub fn derivative(state: &OrderParameterState, config: &MacroConfig) -> Result<OrderParameterState> {
    Ok(rate_terms(state, &config.spectrum, config.freeze_second_layer)?.combine(config.eta))
}

/// Integrates from `α̃ = 0` to `t_end` with classical RK4.
///
/// The step is `t_end / ceil(t_end / dt)` so the run ends exactly at
/// `t_end`. Points are recorded at the start, every `record_every` steps and
/// at the end. `Q` and `D` are re-symmetrized after every step.
pub fn integrate(state0: &OrderParameterState, config: &MacroConfig) -> Result<Trajectory> {
    config.validate()?;
    state0.validate()?;
    let spectrum = &config.spectrum;
    let n_steps = ((config.t_end / config.dt) - 1e-9).ceil().max(1.0) as usize;
    let h = config.t_end / n_steps as f64;

    let mut state = state0.clone();
    let mut scratch = state0.clone();
    let mut y = Vec::with_capacity(state.variable_len());
    state.pack_variables(&mut y);
    let mut rk = Rk4::new(y.len());

    let mut points = Vec::with_capacity(n_steps / config.record_every + 2);
    let record = |state: &OrderParameterState, alpha: f64, points: &mut Vec<TrajectoryPoint>| -> Result<f64> {
        let overlaps = order1_overlaps(state, spectrum)?;
        let eps_g = generalization_error_overlaps(&overlaps)?;
        points.push(TrajectoryPoint { alpha, eps_g, snapshot: Some(overlaps) });
        Ok(eps_g)
    };
    record(&state, 0.0, &mut points)?;

    for step in 1..=n_steps {
        let alpha = step as f64 * h;
        rk.step(&mut y, h, |yin, dy| {
            scratch.unpack_variables(yin);
            let rate = derivative(&scratch, config)?;
            rate.pack_variables_into(dy);
            Ok::<(), Error>(())
        })
        .map_err(|e| match e {
            Error::ArcsinDomain(_) | Error::SingularDenominator(_) | Error::NonFinite(_) => Error::NonFiniteState { alpha },
            other => other,
        })?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { alpha });
        }
        state.unpack_variables(&y);
        state.symmetrize();
        state.pack_variables(&mut y);

        let at_record = step % config.record_every == 0 || step == n_steps;
        let stop_check = config.stop_below.is_some();
        if at_record || stop_check {
            let overlaps = order1_overlaps(&state, spectrum)?;
            let eps_g = generalization_error_overlaps(&overlaps)?;
            let stop = config.stop_below.is_some_and(|floor| eps_g < floor);
            if at_record || stop {
                points.push(TrajectoryPoint { alpha, eps_g, snapshot: Some(overlaps) });
            }
            if stop {
                break;
            }
        }
    }
    Ok(Trajectory { points, final_state: Some(state) })
}

impl OrderParameterState {
    fn pack_variables_into(&self, out: &mut [f64]) {
        let mut pos = 0;
        let mut put = |m: &Matrix| {
            let s = m.as_slice();
            out[pos..pos + s.len()].copy_from_slice(s);
            pos += s.len();
        };
        for q in &self.q {
            put(q);
        }
        for r in &self.r {
            put(r);
        }
        put(&self.d);
        put(&self.e);
    }
}

/// Result of [`integrate_self_converged`].
#[derive(Debug, Clone)]
pub struct ConvergedRun {
    pub trajectory: Trajectory,
    pub dt: f64,
    /// Relative change of the final `ε_g` between the last two step sizes.
    pub final_relative_change: f64,
}

/// Integrates with `config.dt`, halving the step until the final `ε_g`
/// changes by at most `rel_tol` (relative) between successive step sizes.
///
/// With `stop_below` set, the stopping time of the first run fixes a common
/// horizon for the comparison runs.
pub fn integrate_self_converged(
    state0: &OrderParameterState,
    config: &MacroConfig,
    rel_tol: f64,
    max_halvings: usize,
) -> Result<ConvergedRun> {
    let mut cfg = config.clone();
    if cfg.stop_below.is_some() {
        let probe = integrate(state0, &cfg)?;
        cfg.t_end = probe.points.last().map(|p| p.alpha).unwrap_or(cfg.t_end);
        cfg.stop_below = None;
    }
    let mut prev = integrate(state0, &cfg)?;
    let mut change = f64::INFINITY;
    for _ in 0..max_halvings {
        cfg.dt *= 0.5;
        cfg.record_every *= 2;
        let next = integrate(state0, &cfg)?;
        let a = prev.points.last().map(|p| p.eps_g).unwrap_or(0.0);
        let b = next.points.last().map(|p| p.eps_g).unwrap_or(0.0);
        change = (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
        prev = next;
        if change <= rel_tol {
            break;
        }
    }
    Ok(ConvergedRun { trajectory: prev, dt: cfg.dt, final_relative_change: change })
}

/// Samples an initial macroscopic state with the statistics induced by
/// `N(0, 1/N)` weights in dimension `N = n_effective`:
///
/// * diagonal `Q^(e)`, `T^(e)`: mean `μ_e`, variance `3 μ_{2e} / N`
/// * off-diagonal `Q^(e)`, `T^(e)` and all `R^(e)`: mean 0, variance `μ_{2e} / N`
///
/// Each entry is drawn independently, then every order's Gram block is
/// clipped to the PSD cone. Second layers are the soft-committee ones.
/// `n_effective = ∞` gives the symmetric point `(μ_e I, 0, μ_e I)`.
pub fn random_initial_state(
    spectrum: &EigenSpectrum,
    k: usize,
    m: usize,
    n_effective: f64,
    seed: u64,
) -> Result<OrderParameterState> {
    if !(n_effective >= 1.0) {
        return Err(Error::InvalidConfig(format!("n_effective = {n_effective} must be >= 1")));
    }
    if k == 0 || m == 0 {
        return Err(Error::InvalidConfig("K and M must be positive".into()));
    }
    let mut rng = rng::stream(seed, Stream::InitState);
    let d = spectrum.distinct();
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let mut q = Vec::with_capacity(d);
    let mut r = Vec::with_capacity(d);
    let mut t = Vec::with_capacity(d);
    for e in 0..d {
        let mean = spectrum.moment(e);
        let sd_diag = (3.0 * spectrum.moment(2 * e) / n_effective).sqrt();
        let sd_off = (spectrum.moment(2 * e) / n_effective).sqrt();
        let sym = |n: usize, normal: &mut dyn FnMut() -> f64| {
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                a[(i, i)] = mean + sd_diag * normal();
                for j in (i + 1)..n {
                    a[(i, j)] = sd_off * normal();
                    a[(j, i)] = a[(i, j)];
                }
            }
            a
        };
        let qe = sym(k, &mut normal);
        let te = sym(m, &mut normal);
        let re = Matrix::from_fn(k, m, |_, _| sd_off * normal());
        q.push(qe);
        r.push(re);
        t.push(te);
    }
    let (dd, ee, ff) = OrderParameterState::unit_second_layer(k, m);
    let mut state = OrderParameterState { q, r, t, d: dd, e: ee, f: ff };
    state.project_gram_psd();
    Ok(state)
}
