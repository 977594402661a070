//! Slack-penalised minimum-norm QP for dimension one or two.
//!
//! ```text
//! minimise   |u|^2 + K * eps
//! subject to a_i . u <= b_i + eps   for every row i
//!            eps >= 0,  lower <= u <= upper
//! ```
//!
//! Eliminating the slack gives `f(u) = max_p q_p(u)` with `q_0 = |u|^2` and
//! `q_i = |u|^2 + K (a_i . u - b_i)`: a maximum of quadratics that share the
//! Hessian `2I`. The minimiser lies in the relative interior of a face of the
//! arrangement formed by the tie hyperplanes `q_p = q_r` and the box faces,
//! and on that face `f` coincides with any tied piece. Enumerating every
//! face (up to `N` independent hyperplanes) and every piece and keeping the
//! best box-feasible candidate is therefore exact.

use crate::error::QpError;

/// One half-space `a . u <= b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineConstraint<const N: usize> {
    pub a: [f64; N],
    pub b: f64,
}

impl<const N: usize> AffineConstraint<N> {
    pub fn new(a: [f64; N], b: f64) -> Self {
        Self { a, b }
    }

    pub fn violation(&self, u: &[f64; N]) -> f64 {
        dot(&self.a, u) - self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShieldQp<const N: usize> {
    pub rows: Vec<AffineConstraint<N>>,
    pub lower: [f64; N],
    pub upper: [f64; N],
    pub slack_penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    SlackActive,
    InfeasibleClamped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSolution<const N: usize> {
    pub u: [f64; N],
    pub slack: f64,
    pub status: QpStatus,
}

const SLACK_ACTIVE_TOL: f64 = 1e-9;
const BOX_TOL: f64 = 1e-12;

fn dot<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<const N: usize> ShieldQp<N> {
    pub fn new(lower: [f64; N], upper: [f64; N], slack_penalty: f64) -> Self {
        Self {
            rows: Vec::new(),
            lower,
            upper,
            slack_penalty,
        }
    }

    pub fn with_row(mut self, a: [f64; N], b: f64) -> Self {
        self.rows.push(AffineConstraint::new(a, b));
        self
    }

    /// Smallest slack that makes `u` feasible.
    pub fn implied_slack(&self, u: &[f64; N]) -> f64 {
        self.rows
            .iter()
            .map(|r| r.violation(u))
            .fold(0.0, f64::max)
    }

    /// Objective with the slack eliminated.
    pub fn objective(&self, u: &[f64; N]) -> f64 {
        dot(u, u) + self.slack_penalty * self.implied_slack(u)
    }

    fn validate(&self) -> Result<(), QpError> {
        if N > 2 || N == 0 {
            return Err(QpError::Dimension(N));
        }
        if !(self.slack_penalty > 0.0) || !self.slack_penalty.is_finite() {
            return Err(QpError::SlackPenalty(self.slack_penalty));
        }
        let finite = self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
            && self
                .rows
                .iter()
                .all(|r| r.b.is_finite() && r.a.iter().all(|v| v.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(QpError::NonFinite)
        }
    }

    fn in_box(&self, u: &[f64; N]) -> bool {
        (0..N).all(|k| u[k] >= self.lower[k] - BOX_TOL && u[k] <= self.upper[k] + BOX_TOL)
    }

    fn clamp_to_box(&self, u: &mut [f64; N]) {
        for ((x, lo), hi) in u.iter_mut().zip(self.lower).zip(self.upper) {
            *x = x.clamp(lo, hi);
        }
    }

    fn finish(&self, u: [f64; N], status_if_clean: QpStatus) -> QpSolution<N> {
        let mut slack = self.implied_slack(&u);
        if slack < SLACK_ACTIVE_TOL * 1e-3 {
            slack = 0.0;
        }
        let status = if status_if_clean == QpStatus::InfeasibleClamped {
            QpStatus::InfeasibleClamped
        } else if slack > SLACK_ACTIVE_TOL {
            QpStatus::SlackActive
        } else {
            QpStatus::Optimal
        };
        QpSolution { u, slack, status }
    }

    /// Largest directional-derivative descent rate at `u` over box-feasible
    /// directions. Zero at a minimiser.
    pub fn stationarity_residual(&self, u: &[f64; N]) -> f64 {
        let dirs: Vec<[f64; N]> = match N {
            1 => vec![[1.0; N], [-1.0; N]],
            _ => (0..32)
                .map(|i| {
                    let t = i as f64 * std::f64::consts::TAU / 32.0;
                    let mut d = [0.0; N];
                    d[0] = t.cos();
                    d[1] = t.sin();
                    d
                })
                .collect(),
        };
        let f = self.implied_slack(u);
        let scale = 1.0 + dot(u, u).sqrt();
        let active: Vec<&AffineConstraint<N>> = self
            .rows
            .iter()
            .filter(|r| (r.violation(u) - f).abs() <= 1e-9 * scale)
            .collect();
        let mut worst: f64 = 0.0;
        for d in dirs {
            let feasible = (0..N).all(|k| {
                !(d[k] < 0.0 && u[k] <= self.lower[k] + BOX_TOL)
                    && !(d[k] > 0.0 && u[k] >= self.upper[k] - BOX_TOL)
            });
            if !feasible {
                continue;
            }
            let base = 2.0 * dot(u, &d);
            let mut slope = if f <= 1e-9 * scale { base } else { f64::NEG_INFINITY };
            for r in &active {
                slope = slope.max(base + self.slack_penalty * dot(&r.a, &d));
            }
            if f <= 1e-9 * scale {
                // Rows tied at zero violation only push the slope up.
                slope = slope.max(base);
            }
            worst = worst.max(-slope);
        }
        worst
    }
}

/// Linear pieces of the max-representation: `None` is the slack-free piece.
fn piece_gradient<const N: usize>(qp: &ShieldQp<N>, piece: Option<usize>) -> [f64; N] {
    match piece {
        None => [0.0; N],
        Some(i) => {
            let mut g = qp.rows[i].a;
            for v in &mut g {
                *v *= qp.slack_penalty;
            }
            g
        }
    }
}

/// Minimise `|u - w|^2` over `{u : m_j . u = c_j}`.
fn project_onto<const N: usize>(w: [f64; N], planes: &[([f64; N], f64)]) -> Option<[f64; N]> {
    match planes.len() {
        0 => Some(w),
        1 => {
            let (m, c) = planes[0];
            let nn = dot(&m, &m);
            if nn <= 1e-300 {
                return None;
            }
            let t = (dot(&m, &w) - c) / nn;
            let mut u = w;
            for k in 0..N {
                u[k] -= t * m[k];
            }
            Some(u)
        }
        2 if N == 2 => {
            let (m1, c1) = planes[0];
            let (m2, c2) = planes[1];
            let det = m1[0] * m2[1] - m1[1] * m2[0];
            let norm = (dot(&m1, &m1) * dot(&m2, &m2)).sqrt();
            if det.abs() <= 1e-12 * norm || norm == 0.0 {
                return None;
            }
            let mut u = [0.0; N];
            u[0] = (c1 * m2[1] - m1[1] * c2) / det;
            u[1] = (m1[0] * c2 - c1 * m2[0]) / det;
            Some(u)
        }
        _ => None,
    }
}

fn unit<const N: usize>(k: usize) -> [f64; N] {
    let mut e = [0.0; N];
    e[k] = 1.0;
    e
}

/// Exact solve by enumerating active sets.
pub fn solve_shield_qp<const N: usize>(qp: &ShieldQp<N>) -> Result<QpSolution<N>, QpError> {
    qp.validate()?;

    if (0..N).any(|k| qp.lower[k] > qp.upper[k]) {
        return Ok(clamped_corner(qp));
    }

    // Hyperplanes: rows at zero violation, pairwise ties and box faces.
    let m = qp.rows.len();
    let mut planes: Vec<([f64; N], f64)> = Vec::with_capacity(m * (m + 1) / 2 + 2 * N);
    for r in &qp.rows {
        planes.push((r.a, r.b));
    }
    for i in 0..m {
        for j in (i + 1)..m {
            let mut d = qp.rows[i].a;
            for (x, y) in d.iter_mut().zip(qp.rows[j].a) {
                *x -= y;
            }
            planes.push((d, qp.rows[i].b - qp.rows[j].b));
        }
    }
    for k in 0..N {
        planes.push((unit(k), qp.lower[k]));
        planes.push((unit(k), qp.upper[k]));
    }

    let mut faces: Vec<Vec<usize>> = vec![vec![]];
    for i in 0..planes.len() {
        faces.push(vec![i]);
        if N == 2 {
            for j in (i + 1)..planes.len() {
                faces.push(vec![i, j]);
            }
        }
    }

    let mut best: Option<([f64; N], f64)> = None;
    let pieces = std::iter::once(None).chain((0..m).map(Some));
    let pieces: Vec<Option<usize>> = pieces.collect();
    for face in &faces {
        let active: Vec<([f64; N], f64)> = face.iter().map(|&i| planes[i]).collect();
        // Vertices do not depend on the piece.
        let piece_set: &[Option<usize>] = if active.len() == N { &pieces[..1] } else { &pieces };
        for &piece in piece_set {
            let g = piece_gradient(qp, piece);
            let mut w = [0.0; N];
            for k in 0..N {
                w[k] = -0.5 * g[k];
            }
            let Some(mut u) = project_onto(w, &active) else {
                continue;
            };
            if !u.iter().all(|v| v.is_finite()) || !qp.in_box(&u) {
                continue;
            }
            qp.clamp_to_box(&mut u);
            let f = qp.objective(&u);
            let better = match best {
                None => true,
                Some((bu, bf)) => f < bf || (f == bf && dot(&u, &u) < dot(&bu, &bu)),
            };
            if better {
                best = Some((u, f));
            }
        }
    }

    // The box is non-empty, so at least its corner candidates exist.
    let (u, _) = best.expect("non-empty box always yields a candidate");
    Ok(qp.finish(u, QpStatus::Optimal))
}

/// Corner of an inverted box that minimises the worst row violation.
fn clamped_corner<const N: usize>(qp: &ShieldQp<N>) -> QpSolution<N> {
    let mut best: Option<([f64; N], f64)> = None;
    for mask in 0..(1usize << N) {
        let mut u = [0.0; N];
        for (k, x) in u.iter_mut().enumerate() {
            *x = if mask & (1 << k) == 0 {
                qp.lower[k]
            } else {
                qp.upper[k]
            };
        }
        let v = qp.implied_slack(&u);
        let better = match best {
            None => true,
            Some((bu, bv)) => v < bv || (v == bv && dot(&u, &u) < dot(&bu, &bu)),
        };
        if better {
            best = Some((u, v));
        }
    }
    let (u, _) = best.expect("at least one corner");
    qp.finish(u, QpStatus::InfeasibleClamped)
}

/// Brute-force grid search over the box. Test oracle for dimension <= 2.
pub fn grid_oracle<const N: usize>(
    qp: &ShieldQp<N>,
    resolution: f64,
) -> Result<QpSolution<N>, QpError> {
    if N > 2 || N == 0 {
        return Err(QpError::Dimension(N));
    }
    if !(resolution > 0.0) {
        return Err(QpError::Resolution(resolution));
    }
    qp.validate()?;
    if (0..N).any(|k| qp.lower[k] > qp.upper[k]) {
        return Ok(clamped_corner(qp));
    }

    let axis = |k: usize| -> Vec<f64> {
        let span = qp.upper[k] - qp.lower[k];
        let n = (span / resolution).floor() as usize;
        let mut pts: Vec<f64> = (0..=n)
            .map(|i| qp.lower[k] + i as f64 * resolution)
            .collect();
        if pts.last().is_none_or(|&p| p < qp.upper[k]) {
            pts.push(qp.upper[k]);
        }
        pts
    };

    let mut best: Option<([f64; N], f64)> = None;
    let mut consider = |u: [f64; N]| {
        let f = qp.objective(&u);
        if best.is_none_or(|(_, bf)| f < bf) {
            best = Some((u, f));
        }
    };
    let xs = axis(0);
    if N == 1 {
        for &x in &xs {
            let mut u = [0.0; N];
            u[0] = x;
            consider(u);
        }
    } else {
        let ys = axis(1);
        for &x in &xs {
            for &y in &ys {
                let mut u = [0.0; N];
                u[0] = x;
                u[1] = y;
                consider(u);
            }
        }
    }
    let (u, _) = best.expect("grid is never empty");
    Ok(qp.finish(u, QpStatus::Optimal))
}
