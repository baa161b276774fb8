//! Post-hoc checks on traces: closed-loop identity, operator error series,
//! the H-convolution bound and its numerical chain, stability metrics and
//! run comparison.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{assemble_global_operators, GlobalOperators};
use crate::error::{Error, Result};
use crate::sim::{RunStatus, TraceLog};

/// Absolute slack for the identity and recursion checks.
pub const IDENTITY_TOL: f64 = 1e-7;

/// Matrix ∞-norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn operators_at(trace: &TraceLog, t: usize) -> Result<GlobalOperators> {
    let s = &trace.scenario;
    let ops = assemble_global_operators(&s.topology, &s.delay, s.horizon(), t, |j, stamp| trace.columns_at(j, stamp))?;
    if ops.identity_defect() != 0.0 {
        return Err(Error::MissingData(format!("Φx[0] ≠ I at t={t}")));
    }
    Ok(ops)
}

fn require_columns(trace: &TraceLog) -> Result<()> {
    if trace.has_columns() {
        Ok(())
    } else {
        Err(Error::MissingData("trace carries no controller columns".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    /// `a[t][k−1] = ‖A_t Φx_{t−1}[k−1] + B_t Φu_{t−1}[k−1] − Φx_t[k]‖∞`; row 0 is zero.
    pub a: Vec<Vec<f64>>,
    /// `L̂(t) = Σ_{s≤t} Σ_k a_s[k]`.
    pub cumulative: Vec<f64>,
}

impl ErrorSeries {
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Last `t` with a nonzero error term.
    pub fn last_nonzero(&self) -> Option<usize> {
        self.a.iter().rposition(|row| row.iter().any(|&v| v != 0.0))
    }
}

/// Closed-loop operator errors `E_t[k] = A_t Φx_{t−1}[k−1] + B_t Φu_{t−1}[k−1] − Φx_t[k]`
/// for `k = 1..=H`, with `A_t`, `B_t` from the selections at `t`.
pub fn error_matrices(trace: &TraceLog, t: usize, prev: &GlobalOperators, cur: &GlobalOperators) -> Result<Vec<DMatrix<f64>>> {
    let g = trace.selected_dynamics(t)?;
    let h = trace.scenario.horizon();
    Ok((1..=h).map(|k| &g.a * &prev.phi_x[k - 1] + &g.b * &prev.phi_u[k - 1] - &cur.phi_x[k]).collect())
}

pub fn compute_error_series(trace: &TraceLog) -> Result<ErrorSeries> {
    require_columns(trace)?;
    let h = trace.scenario.horizon();
    let mut a = vec![vec![0.0; h]];
    let mut cumulative = vec![0.0];
    let mut prev = operators_at(trace, 0)?;
    for t in 1..trace.steps() {
        let cur = operators_at(trace, t)?;
        let row: Vec<f64> = error_matrices(trace, t, &prev, &cur)?.iter().map(inf_norm).collect();
        cumulative.push(cumulative[t - 1] + row.iter().sum::<f64>());
        a.push(row);
        prev = cur;
    }
    Ok(ErrorSeries { a, cumulative })
}

/// `t ↦ e^{−t/H}·e^L·s0 + W(e^L + e − 1)/(e − 1)`.
pub fn convolution_bound(s0: f64, w: f64, h: usize, l: f64) -> impl Fn(usize) -> f64 {
    let e = std::f64::consts::E;
    let el = l.exp();
    let steady = w * (el + e - 1.0) / (e - 1.0);
    move |t| (-(t as f64) / h as f64).exp() * el * s0 + steady
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    /// `max_t ‖x(t) − Σ_{k<H} Φx_t[k] ŵ(t−k)‖∞`.
    pub x_residual: f64,
    pub u_residual: f64,
    /// `max_t ‖ŵ(t) − Σ_{k=1}^H E_t[k] ŵ(t−k)‖∞`, a consistent disturbance.
    pub recursion_max: f64,
    pub w_assumed: f64,
    pub worst_x_t: usize,
    pub worst_recursion_t: usize,
    pub passed: bool,
}

fn what_at(trace: &TraceLog, t: usize, k: usize) -> Option<&DVector<f64>> {
    (k <= t).then(|| &trace.what[t - k])
}

pub fn verify_closed_loop_identity(trace: &TraceLog) -> Result<ClosedLoopReport> {
    require_columns(trace)?;
    let h = trace.scenario.horizon();
    let mut rep = ClosedLoopReport {
        x_residual: 0.0,
        u_residual: 0.0,
        recursion_max: 0.0,
        w_assumed: trace.scenario.w_assumed(),
        worst_x_t: 0,
        worst_recursion_t: 0,
        passed: false,
    };
    let mut prev: Option<GlobalOperators> = None;
    for t in 0..trace.steps() {
        let ops = operators_at(trace, t)?;
        let mut xr = trace.x[t].clone();
        let mut ur = trace.u[t].clone();
        for k in 0..h {
            if let Some(w) = what_at(trace, t, k) {
                xr -= &ops.phi_x[k] * w;
                ur -= &ops.phi_u[k] * w;
            }
        }
        if xr.amax() > rep.x_residual {
            rep.x_residual = xr.amax();
            rep.worst_x_t = t;
        }
        rep.u_residual = rep.u_residual.max(ur.amax());
        if let Some(p) = &prev {
            let mut r = trace.what[t].clone();
            for (k, e) in error_matrices(trace, t, p, &ops)?.iter().enumerate() {
                if let Some(w) = what_at(trace, t, k + 1) {
                    r -= e * w;
                }
            }
            if r.amax() > rep.recursion_max {
                rep.recursion_max = r.amax();
                rep.worst_recursion_t = t;
            }
        }
        prev = Some(ops);
    }
    rep.passed = rep.x_residual <= IDENTITY_TOL
        && rep.u_residual <= IDENTITY_TOL
        && rep.recursion_max <= rep.w_assumed + IDENTITY_TOL;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub l_hat: f64,
    pub s0: f64,
    /// `max_t ‖ŵ(t)‖∞ / bound(t)`.
    pub max_ratio: f64,
    pub violations: Vec<usize>,
    pub passed: bool,
}

/// Measured `‖ŵ(t)‖∞` against the H-convolution bound driven by the measured
/// `L̂` and `‖x(0)‖∞`, with `W_assumed` padded by the identity tolerance.
pub fn chain_check(trace: &TraceLog, series: &ErrorSeries) -> ChainReport {
    let s = &trace.scenario;
    let s0 = trace.x[0].amax();
    let l_hat = series.total();
    let bound = convolution_bound(s0, s.w_assumed() + IDENTITY_TOL, s.horizon(), l_hat);
    let mut max_ratio = 0.0f64;
    let mut violations = Vec::new();
    for (t, w) in trace.what.iter().enumerate() {
        let b = bound(t);
        let m = w.amax();
        max_ratio = max_ratio.max(m / b);
        if m > b {
            violations.push(t);
        }
    }
    ChainReport { l_hat, s0, max_ratio, passed: violations.is_empty(), violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub sup_x: f64,
    pub sup_u: f64,
    pub peak_t: usize,
    pub final_norm: f64,
    /// Least-squares slope of `log ‖x(t)‖∞` after the disturbance stopped.
    pub lambda: Option<f64>,
    /// First post-stop time with `‖x‖∞ < 1e−9`.
    pub settled_at: Option<usize>,
    pub diverged_at: Option<usize>,
    /// `λ < −c/H` (or the state settled inside the fit window).
    pub decay_ok: Option<bool>,
}

pub const SETTLED: f64 = 1e-9;

pub fn stability_report(trace: &TraceLog, t_stop: Option<usize>, c: f64) -> StabilityReport {
    let norms: Vec<f64> = trace.x.iter().map(|v| v.amax()).collect();
    let (peak_t, sup_x) = norms
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |best, (t, &v)| if v > best.1 || !v.is_finite() { (t, v) } else { best });
    let diverged_at = match trace.status {
        RunStatus::Diverged { t } => Some(t),
        RunStatus::Completed => None,
    };
    let h = trace.scenario.horizon();
    let (mut lambda, mut settled_at, mut decay_ok) = (None, None, None);
    if let (Some(stop), None) = (t_stop, diverged_at) {
        let start = stop + h;
        let end = (start..norms.len()).find(|&t| norms[t] < SETTLED);
        settled_at = end;
        let pts: Vec<(f64, f64)> = (start..end.unwrap_or(norms.len())).map(|t| (t as f64, norms[t].ln())).collect();
        if pts.len() >= 2 {
            let m = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            lambda = Some(sxy / sxx);
        }
        decay_ok = match (lambda, settled_at) {
            (Some(l), _) => Some(l < -c / h as f64),
            (None, Some(_)) => Some(true),
            (None, None) => None,
        };
    }
    StabilityReport {
        sup_x,
        sup_u: trace.sup_u(),
        peak_t,
        final_norm: norms.last().copied().unwrap_or(0.0),
        lambda,
        settled_at,
        diverged_at,
        decay_ok,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b / a`; `1` when both are equal.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn get(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn compare_runs(a: &TraceLog, b: &TraceLog) -> Result<Comparison> {
    let (sa, sb) = (&a.scenario.topology, &b.scenario.topology);
    if sa.n_x() != sb.n_x() || sa.n_u() != sb.n_u() {
        return Err(Error::DimensionMismatch { what: "compared traces", expected: sa.n_x(), got: sb.n_x() });
    }
    let l_hat = |t: &TraceLog| -> Result<f64> {
        if t.has_columns() {
            Ok(compute_error_series(t)?.total())
        } else {
            Ok(0.0)
        }
    };
    let row = |metric: &str, x: f64, y: f64| ComparisonRow {
        metric: metric.into(),
        a: x,
        b: y,
        ratio: if x == y { 1.0 } else { y / x },
    };
    let steps = |t: &TraceLog| t.steps() as f64;
    let final_norm = |t: &TraceLog| t.x.last().map(|v| v.amax()).unwrap_or(0.0);
    Ok(Comparison {
        rows: vec![
            row("sup_x", a.sup_x(), b.sup_x()),
            row("sup_u", a.sup_u(), b.sup_u()),
            row("final_x", final_norm(a), final_norm(b)),
            row("l_hat", l_hat(a)?, l_hat(b)?),
            row("movement", a.path_lengths().iter().fold(0.0, |s, v| s + v), b.path_lengths().iter().fold(0.0, |s, v| s + v)),
            row("steps", steps(a), steps(b)),
        ],
    })
}
