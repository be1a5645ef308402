//! Plateau length and height from a loss curve.
//!
//! A record is plateauing when the local slope of `ln ε_g` against `α̃` is
//! less than half the terminal slope in magnitude. The terminal slope is the
//! median over the last `terminal_fraction` of records, and local slopes are
//! least-squares fits over a centered window of `window` records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub const MIN_POINTS: usize = 16;

/// Slopes below this are treated as "not converging".
pub const DEGENERATE_SPEED: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauParams {
    /// Odd number of records per slope fit.
    pub window: usize,
    /// Fraction of final records defining the terminal speed, in `(0, 0.5]`.
    pub terminal_fraction: f64,
    /// Shortest run (in records) that counts as a plateau.
    pub min_points: usize,
}

impl Default for PlateauParams {
    fn default() -> Self {
        PlateauParams { window: 31, terminal_fraction: 0.1, min_points: 5 }
    }
}

/// One contiguous plateauing run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauRun {
    pub start_alpha: f64,
    pub end_alpha: f64,
    pub records: usize,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub found: bool,
    pub start_alpha: f64,
    pub end_alpha: f64,
    pub length: f64,
    pub height: f64,
    pub terminal_speed: f64,
    pub params: PlateauParams,
    /// Every qualifying run; the longest populates the fields above.
    pub runs: Vec<PlateauRun>,
}

impl PlateauReport {
    fn not_found(terminal_speed: f64, params: PlateauParams) -> Self {
        PlateauReport {
            found: false,
            start_alpha: 0.0,
            end_alpha: 0.0,
            length: 0.0,
            height: 0.0,
            terminal_speed,
            params,
            runs: Vec::new(),
        }
    }
}

fn check_trajectory(traj: &Trajectory) -> Result<()> {
    let pts = &traj.points;
    if pts.len() < MIN_POINTS {
        return Err(Error::TooShort(format!("{} points, need at least {MIN_POINTS}", pts.len())));
    }
    for (i, p) in pts.iter().enumerate() {
        if !(p.eps_g.is_finite() && p.eps_g > 0.0) {
            return Err(Error::InvalidTrajectory(format!("eps_g = {} at record {i}", p.eps_g)));
        }
        if !p.alpha.is_finite() || (i > 0 && p.alpha <= pts[i - 1].alpha) {
            return Err(Error::InvalidTrajectory(format!("alpha not strictly increasing at record {i}")));
        }
    }
    Ok(())
}

fn check_window(window: usize, points: usize) -> Result<()> {
    if window % 2 == 0 || window < 3 || window > points / 4 {
        return Err(Error::TooShort(format!("window {window} must be odd and in [3, {}]", points / 4)));
    }
    Ok(())
}

/// Centered least-squares slope of `ln ε_g` over `window` records, with
/// truncated windows at both ends.
pub fn log_loss_slope(traj: &Trajectory, window: usize) -> Result<Vec<(f64, f64)>> {
    check_trajectory(traj)?;
    check_window(window, traj.len())?;
    let xs = traj.alphas();
    let ys: Vec<f64> = traj.points.iter().map(|p| p.eps_g.ln()).collect();
    let n = xs.len();
    let half = window / 2;
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            (xs[i], ls_slope(&xs[lo..=hi], &ys[lo..=hi]))
        })
        .collect())
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    sxy / sxx
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn detect_plateau(traj: &Trajectory, params: &PlateauParams) -> Result<PlateauReport> {
    if !(params.terminal_fraction > 0.0 && params.terminal_fraction <= 0.5) {
        return Err(Error::InvalidConfig(format!("terminal_fraction = {} must be in (0, 0.5]", params.terminal_fraction)));
    }
    if params.min_points == 0 {
        return Err(Error::InvalidConfig("min_points must be at least 1".into()));
    }
    let slopes = log_loss_slope(traj, params.window)?;
    let n = slopes.len();
    let terminal_len = ((params.terminal_fraction * n as f64).ceil() as usize).clamp(1, n);
    let terminal_start = n - terminal_len;
    let mut tail: Vec<f64> = slopes[terminal_start..].iter().map(|s| s.1.abs()).collect();
    let terminal_speed = median(&mut tail);
    if !(terminal_speed >= DEGENERATE_SPEED) {
        return Err(Error::DegenerateTerminal(terminal_speed));
    }
    let threshold = 0.5 * terminal_speed;

    let mut runs = Vec::new();
    let mut i = params.window.min(terminal_start);
    while i < terminal_start {
        if slopes[i].1.abs() >= threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i < terminal_start && slopes[i].1.abs() < threshold {
            i += 1;
        }
        if i - start >= params.min_points {
            let mut eps: Vec<f64> = traj.points[start..i].iter().map(|p| p.eps_g).collect();
            runs.push(PlateauRun {
                start_alpha: traj.points[start].alpha,
                end_alpha: traj.points[i - 1].alpha,
                records: i - start,
                height: median(&mut eps),
            });
        }
    }

    let best = runs
        .iter()
        .copied()
        .reduce(|best, r| if r.end_alpha - r.start_alpha > best.end_alpha - best.start_alpha { r } else { best });
    Ok(match best {
        None => PlateauReport::not_found(terminal_speed, *params),
        Some(b) => PlateauReport {
            found: true,
            start_alpha: b.start_alpha,
            end_alpha: b.end_alpha,
            length: b.end_alpha - b.start_alpha,
            height: b.height,
            terminal_speed,
            params: *params,
            runs,
        },
    })
}
