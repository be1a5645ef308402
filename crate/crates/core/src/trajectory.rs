//! Time series of the generalization error and its CSV form.
//!
//! CSV columns: `alpha,eps_g` followed by the order-1 overlaps `Qij`
//! (upper triangle), `Rin`, then `Dij` (upper triangle) and `Ein`, all
//! row-major. Lines starting with `#` are comments (provenance headers).

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::state::{OrderParameterState, Overlaps};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Normalized time (steps / N).
    pub alpha: f64,
    pub eps_g: f64,
    pub snapshot: Option<Overlaps>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// State at the end of the run, for checkpoint/resume.
    pub final_state: Option<OrderParameterState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.alpha).collect()
    }

    pub fn eps(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.eps_g).collect()
    }

    /// Linear interpolation of `ε_g` at `alpha`; `None` outside the range.
    pub fn eps_at(&self, alpha: f64) -> Option<f64> {
        let pts = &self.points;
        let first = pts.first()?;
        let last = pts.last()?;
        if alpha < first.alpha || alpha > last.alpha {
            return None;
        }
        let idx = pts.partition_point(|p| p.alpha <= alpha);
        if idx == 0 {
            return Some(first.eps_g);
        }
        if idx == pts.len() {
            return Some(last.eps_g);
        }
        let (a, b) = (&pts[idx - 1], &pts[idx]);
        let w = (alpha - a.alpha) / (b.alpha - a.alpha);
        Some(a.eps_g + w * (b.eps_g - a.eps_g))
    }

    /// Writes the CSV, preceded by `comments` as `# ` lines.
    pub fn write_csv<W: Write>(&self, mut w: W, comments: &[String]) -> io::Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        let shape = self.points.iter().find_map(|p| p.snapshot.as_ref()).map(|s| (s.q.rows(), s.f.rows()));
        let mut header = vec!["alpha".to_string(), "eps_g".to_string()];
        if let Some((k, m)) = shape {
            header.extend(column_names(k, m));
        }
        writeln!(w, "{}", header.join(","))?;
        for p in &self.points {
            let mut fields = vec![format_f64(p.alpha), format_f64(p.eps_g)];
            if let (Some(s), Some(_)) = (&p.snapshot, shape) {
                fields.extend(snapshot_values(s).into_iter().map(format_f64));
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, comments: &[String]) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, comments).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// Reads `alpha` and `eps_g` columns back (snapshots are not restored).
    pub fn read_csv<R: BufRead>(r: R) -> io::Result<Trajectory> {
        let bad = |line: usize, msg: String| io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {msg}"));
        let mut points = Vec::new();
        let mut seen_header = false;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !seen_header {
                if !line.starts_with("alpha,eps_g") {
                    return Err(bad(i + 1, "missing `alpha,eps_g` header".into()));
                }
                seen_header = true;
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |name: &str| -> io::Result<f64> {
                fields
                    .next()
                    .ok_or_else(|| bad(i + 1, format!("missing {name}")))?
                    .trim()
                    .parse()
                    .map_err(|e| bad(i + 1, format!("{name}: {e}")))
            };
            let alpha = next("alpha")?;
            let eps_g = next("eps_g")?;
            points.push(TrajectoryPoint { alpha, eps_g, snapshot: None });
        }
        Ok(Trajectory { points, final_state: None })
    }
}

fn format_f64(x: f64) -> String {
    // shortest representation that round-trips
    format!("{x:e}")
}

fn upper(m: &Matrix) -> impl Iterator<Item = f64> + '_ {
    (0..m.rows()).flat_map(move |i| (i..m.cols()).map(move |j| m[(i, j)]))
}

fn snapshot_values(s: &Overlaps) -> Vec<f64> {
    upper(&s.q)
        .chain(s.r.as_slice().iter().copied())
        .chain(upper(&s.d))
        .chain(s.e.as_slice().iter().copied())
        .collect()
}

fn column_names(k: usize, m: usize) -> Vec<String> {
    let mut cols = Vec::new();
    let sym = |prefix: &str, n: usize, cols: &mut Vec<String>| {
        for i in 0..n {
            for j in i..n {
                cols.push(format!("{prefix}{i}{j}"));
            }
        }
    };
    let rect = |prefix: &str, cols: &mut Vec<String>| {
        for i in 0..k {
            for n in 0..m {
                cols.push(format!("{prefix}{i}{n}"));
            }
        }
    };
    sym("Q", k, &mut cols);
    rect("R", &mut cols);
    sym("D", k, &mut cols);
    rect("E", &mut cols);
    cols
}
