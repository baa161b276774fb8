//! Identification baseline: exponentially growing random excitation until the
//! least-squares estimate of `[A B]` is certified to margin `ε`, then a
//! centralized certainty-equivalence SLS controller on the estimate.
//!
//! A simplified stand-in for black-box identification-based stabilization, not
//! a reimplementation of any particular method.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::Scenario;
use super::trace::{RunStatus, TraceLog};
use super::{diverged, disturbance_for};
use crate::dynamics::step_truth;
use crate::error::{Error, Result};
use crate::seed;
use crate::sls::{synthesize_column, LocalModel, SparsityMask};

/// Regressors with `σ_min ≤ RANK_TOL·σ_max` are treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `‖Z⁺‖₂·W·√rows`, a bound on the estimate's sensitivity to disturbances.
    pub margin: f64,
}

/// Least squares on rows `[x(s)ᵀ u(s)ᵀ] ↦ x(s+1)ᵀ`; `None` while rank deficient.
pub fn least_squares(z: &[DVector<f64>], y: &[DVector<f64>], n_x: usize, w: f64) -> Option<Estimate> {
    let m = z.len();
    let p = z.first()?.len();
    if m < p {
        return None;
    }
    let zm = DMatrix::from_fn(m, p, |r, c| z[r][c]);
    let ym = DMatrix::from_fn(m, n_x, |r, c| y[r][c]);
    let svd = zm.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > RANK_TOL * smax) {
        return None;
    }
    let theta = svd.solve(&ym, 0.0).ok()?;
    let a = theta.rows(0, n_x).transpose();
    let b = theta.rows(n_x, p - n_x).transpose();
    Some(Estimate { a, b, margin: w * (m as f64).sqrt() / smin })
}

/// Centralized version of the delayed-rollout controller, restarted at the switch time.
struct CertaintyEquivalent {
    phi_x: Vec<DMatrix<f64>>,
    phi_u: Vec<DMatrix<f64>>,
    whats: VecDeque<DVector<f64>>,
}

impl CertaintyEquivalent {
    fn new(est: &Estimate, s: &Scenario) -> Result<Self> {
        let h = s.horizon();
        let model = LocalModel::from_global(est.a.clone(), est.b.clone());
        let (n_x, n_u) = (s.topology.n_x(), s.topology.n_u());
        let mut phi_x = vec![DMatrix::zeros(n_x, n_x); h + 1];
        let mut phi_u = vec![DMatrix::zeros(n_u, n_x); h];
        for p in 0..n_x {
            let mask = SparsityMask::dense(&s.topology, s.topology.state_owner(p), h);
            let col = synthesize_column(&model, p, &mask, &s.weights)?;
            for k in 0..=h {
                phi_x[k].set_column(p, &col.phi_x[k]);
            }
            for k in 0..h {
                phi_u[k].set_column(p, &col.phi_u[k]);
            }
        }
        Ok(Self { phi_x, phi_u, whats: VecDeque::new() })
    }

    fn step(&mut self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let h = self.phi_u.len();
        let mut what = x.clone();
        for (k, past) in self.whats.iter().enumerate().take(h.saturating_sub(1)) {
            what -= &self.phi_x[k + 1] * past;
        }
        self.whats.push_front(what.clone());
        self.whats.truncate(h);
        let mut u = DVector::zeros(self.phi_u[0].nrows());
        for (k, past) in self.whats.iter().enumerate() {
            u += &self.phi_u[k] * past;
        }
        (u, what)
    }
}

pub fn run_sysid(scenario: Arc<Scenario>) -> Result<TraceLog> {
    let s = &*scenario;
    let (n_x, n_u) = (s.topology.n_x(), s.topology.n_u());
    let cfg = s.sysid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(s.file.seed, seed::branch::SYSID));
    let mut dist = disturbance_for(s);
    let mut trace = TraceLog::empty(scenario.clone());
    let (mut z, mut y): (Vec<DVector<f64>>, Vec<DVector<f64>>) = (Vec::new(), Vec::new());
    let mut ctrl: Option<CertaintyEquivalent> = None;
    let mut x = s.x0.clone();
    for t in 0..=s.t_final() {
        if ctrl.is_none() && t > 0 {
            if let Some(est) = least_squares(&z, &y, n_x, s.w_assumed()).filter(|e| e.margin <= cfg.epsilon) {
                log::info!("identification baseline switches at t={t} (margin {:.3e})", est.margin);
                ctrl = Some(CertaintyEquivalent::new(&est, s)?);
                trace.switch_time = Some(t);
            } else if t >= cfg.max_steps {
                return Err(Error::IdentificationFailed { steps: t });
            }
        }
        let (u, what) = match ctrl.as_mut() {
            Some(c) => c.step(&x),
            None => {
                let mag = cfg.initial * cfg.growth.powi(t as i32);
                let u = DVector::from_fn(n_u, |_, _| if rng.gen_bool(0.5) { mag } else { -mag });
                (u, DVector::zeros(n_x))
            }
        };
        trace.x.push(x.clone());
        trace.u.push(u.clone());
        trace.what.push(what);
        if t == s.t_final() {
            break;
        }
        let w = dist.sample(t, &x);
        let next = step_truth(&s.truth, &x, &u, &w)?;
        if ctrl.is_none() {
            z.push(DVector::from_iterator(n_x + n_u, x.iter().chain(u.iter()).copied()));
            y.push(next.clone());
        }
        x = next;
        trace.w.push(w);
        if diverged(&x) {
            trace.x.push(x);
            trace.status = RunStatus::Diverged { t: t + 1 };
            break;
        }
    }
    Ok(trace)
}
