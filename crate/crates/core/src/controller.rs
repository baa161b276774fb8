//! Distributed SLS controller runtime: per-subsystem disturbance estimation
//! and control from delayed columns, and assembly of the implied global
//! closed-loop operators.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sls::ClosedLoopColumn;
use crate::topology::{DelayTable, NetworkTopology};

/// The columns of one subsystem (one per owned state index, in index order).
pub type ColumnSet = Arc<Vec<Arc<ClosedLoopColumn>>>;

#[derive(Debug, Clone)]
struct Source {
    delay: usize,
    whats: VecDeque<(usize, DVector<f64>)>,
    columns: Option<(usize, ColumnSet)>,
    prior: ColumnSet,
}

/// Information subsystem `i` holds about every `j ∈ d_in(i)` (itself included).
#[derive(Debug, Clone)]
pub struct ControllerState {
    owner: usize,
    horizon: usize,
    rows: std::ops::Range<usize>,
    inputs: std::ops::Range<usize>,
    sources: BTreeMap<usize, Source>,
}

impl ControllerState {
    /// `priors[j]` is the column set used for stamps before `0`.
    pub fn new(
        topology: &NetworkTopology,
        delay: &DelayTable,
        d_in: impl IntoIterator<Item = usize>,
        owner: usize,
        horizon: usize,
        priors: &[ColumnSet],
    ) -> Result<Self> {
        let mut sources = BTreeMap::new();
        for j in d_in.into_iter().chain(std::iter::once(owner)) {
            let d = delay
                .delay(j, owner)
                .ok_or_else(|| Error::InvalidTopology(format!("{j} listed as incoming neighbor of {owner} but unreachable")))?;
            sources.insert(
                j,
                Source {
                    delay: d,
                    whats: VecDeque::with_capacity(horizon + 1),
                    columns: None,
                    prior: priors[j].clone(),
                },
            );
        }
        Ok(Self {
            owner,
            horizon,
            rows: topology.state_range(owner),
            inputs: topology.input_range(owner),
            sources,
        })
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.sources.keys().copied()
    }

    fn source_mut(&mut self, j: usize) -> Result<&mut Source> {
        let owner = self.owner;
        self.sources
            .get_mut(&j)
            .ok_or_else(|| Error::MissingData(format!("subsystem {owner} holds no channel from {j}")))
    }

    /// Stores `ŵ^j(stamp)`; the buffer keeps the last `H` stamps.
    pub fn receive_what(&mut self, j: usize, stamp: usize, what: DVector<f64>) -> Result<()> {
        let h = self.horizon;
        let src = self.source_mut(j)?;
        if let Some(&(last, _)) = src.whats.back() {
            if stamp <= last {
                return Err(Error::MissingData(format!("out-of-order estimate from {j}: {stamp} after {last}")));
            }
        }
        src.whats.push_back((stamp, what));
        while src.whats.len() > h {
            src.whats.pop_front();
        }
        Ok(())
    }

    pub fn receive_columns(&mut self, j: usize, stamp: usize, columns: ColumnSet) -> Result<()> {
        self.source_mut(j)?.columns = Some((stamp, columns));
        Ok(())
    }

    fn columns_at(&self, j: usize, t: usize) -> Result<&ColumnSet> {
        let src = &self.sources[&j];
        if t < src.delay {
            return Ok(&src.prior);
        }
        let want = t - src.delay;
        match &src.columns {
            Some((s, c)) if *s == want => Ok(c),
            Some((s, _)) if *s > want => Err(Error::CausalityViolation {
                reader: self.owner,
                source_id: j,
                stamp: *s,
                now: t,
            }),
            _ => Err(Error::MissingData(format!(
                "subsystem {} lacks the column of {j} stamped {want} at t={t}",
                self.owner
            ))),
        }
    }

    /// `ŵ^j(t−k)`, zero before time 0.
    fn what_at(&self, j: usize, t: usize, k: usize) -> Result<Option<&DVector<f64>>> {
        if k > t {
            return Ok(None);
        }
        let s = t - k;
        let src = &self.sources[&j];
        if k < src.delay {
            return Err(Error::CausalityViolation {
                reader: self.owner,
                source_id: j,
                stamp: s,
                now: t,
            });
        }
        src.whats
            .iter()
            .find(|(st, _)| *st == s)
            .map(|(_, v)| Some(v))
            .ok_or_else(|| Error::MissingData(format!("subsystem {} lacks the estimate of {j} stamped {s}", self.owner)))
    }

    /// `ŵ^i(t) = x^i(t) − Σ_j Σ_{k≥1} φ^{j,x}_{t−d(j→i)}[k](i) ŵ^j(t−k)`; the
    /// result is appended to the own buffer.
    pub fn estimate_disturbance(&mut self, t: usize, x_i: &[f64]) -> Result<DVector<f64>> {
        if x_i.len() != self.rows.len() {
            return Err(Error::DimensionMismatch { what: "local state", expected: self.rows.len(), got: x_i.len() });
        }
        let mut what = DVector::from_column_slice(x_i);
        for (&j, src) in &self.sources {
            let cols = self.columns_at(j, t)?;
            for k in src.delay.max(1)..self.horizon {
                let Some(wj) = self.what_at(j, t, k)? else { continue };
                for (q, col) in cols.iter().enumerate() {
                    let c = wj[q];
                    if c != 0.0 {
                        for (r, row) in self.rows.clone().enumerate() {
                            what[r] -= col.phi_x[k][row] * c;
                        }
                    }
                }
            }
        }
        self.receive_what(self.owner, t, what.clone())?;
        Ok(what)
    }

    /// `u^i(t) = Σ_j Σ_{k≥0} φ^{j,u}_{t−d(j→i)}[k](i) ŵ^j(t−k)`; requires `ŵ^i(t)`.
    pub fn compute_control(&self, t: usize) -> Result<DVector<f64>> {
        let mut u = DVector::zeros(self.inputs.len());
        for (&j, src) in &self.sources {
            let cols = self.columns_at(j, t)?;
            for k in src.delay..self.horizon {
                let Some(wj) = self.what_at(j, t, k)? else { continue };
                for (q, col) in cols.iter().enumerate() {
                    let c = wj[q];
                    if c != 0.0 {
                        for (r, idx) in self.inputs.clone().enumerate() {
                            u[r] += col.phi_u[k][idx] * c;
                        }
                    }
                }
            }
        }
        Ok(u)
    }
}

/// `Φx_t[0..=H]`, `Φu_t[0..H]` as implemented at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOperators {
    pub phi_x: Vec<DMatrix<f64>>,
    pub phi_u: Vec<DMatrix<f64>>,
}

impl GlobalOperators {
    /// `‖Φx_t[0] − I‖_max`.
    pub fn identity_defect(&self) -> f64 {
        let n = self.phi_x[0].nrows();
        (&self.phi_x[0] - DMatrix::<f64>::identity(n, n)).amax()
    }
}

/// Entry `(i, j)` of step `k` is `φ^{j}_{t−d(j→i)}[k](i)`. `lookup(j, s)` returns
/// the column set of `j` stamped `s` (negative stamps mean the prior).
pub fn assemble_global_operators<F>(
    topology: &NetworkTopology,
    delay: &DelayTable,
    horizon: usize,
    t: usize,
    lookup: F,
) -> Result<GlobalOperators>
where
    F: Fn(usize, isize) -> Option<ColumnSet>,
{
    let n_x = topology.n_x();
    let n_u = topology.n_u();
    let mut phi_x = vec![DMatrix::zeros(n_x, n_x); horizon + 1];
    let mut phi_u = vec![DMatrix::zeros(n_u, n_x); horizon];
    for j in 0..topology.len() {
        for i in 0..topology.len() {
            let Some(d) = delay.delay(j, i) else { continue };
            let stamp = t as isize - d as isize;
            let cols = lookup(j, stamp)
                .ok_or_else(|| Error::MissingData(format!("no column of {j} stamped {stamp}")))?;
            for col in cols.iter() {
                let p = col.index;
                for k in 0..=horizon {
                    for r in topology.state_range(i) {
                        phi_x[k][(r, p)] = col.phi_x[k][r];
                    }
                }
                for k in 0..horizon {
                    for r in topology.input_range(i) {
                        phi_u[k][(r, p)] = col.phi_u[k][r];
                    }
                }
            }
        }
    }
    Ok(GlobalOperators { phi_x, phi_u })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sls::tests::{scalar, single};
    use crate::sls::{synthesize_column, SparsityMask, Weights};
    use crate::topology::{compute_delay_table, SubsystemSpec};

    fn column_set(cols: Vec<ClosedLoopColumn>) -> ColumnSet {
        Arc::new(cols.into_iter().map(Arc::new).collect())
    }

    fn zero_column(n: usize, m: usize, h: usize, p: usize, owner: usize) -> ClosedLoopColumn {
        let mut x0 = DVector::zeros(n);
        x0[p] = 1.0;
        let mut phi_x = vec![DVector::zeros(n); h + 1];
        phi_x[0] = x0;
        ClosedLoopColumn {
            owner,
            index: p,
            horizon: h,
            phi_x,
            phi_u: vec![DVector::zeros(m); h],
            objective: 1.0,
            residual: 0.0,
            kkt_residual: 0.0,
            model_stamp: 0,
            synthesized_at: 0,
        }
    }

    /// Scalar closed loop with a known model, driven by `w`.
    fn scalar_rollout(a: f64, b: f64, h: usize, x0: f64, w: &[f64], steps: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = single(1, 1);
        let d = compute_delay_table(&t);
        let col = column_set(vec![synthesize_column(&scalar(a, b), 0, &SparsityMask::dense(&t, 0, h), &Weights::identity(1, 1)).unwrap()]);
        let mut st = ControllerState::new(&t, &d, [], 0, h, &[col.clone()]).unwrap();
        let (mut xs, mut us, mut ws) = (vec![x0], vec![], vec![]);
        for k in 0..=steps {
            st.receive_columns(0, k, col.clone()).unwrap();
            let what = st.estimate_disturbance(k, &[xs[k]]).unwrap();
            let u = st.compute_control(k).unwrap();
            ws.push(what[0]);
            us.push(u[0]);
            let wk = w.get(k).copied().unwrap_or(0.0);
            xs.push(a * xs[k] + b * u[0] + wk);
        }
        (xs, us, ws)
    }

    #[test]
    fn first_estimate_is_state() {
        let (xs, _, ws) = scalar_rollout(1.0, 1.0, 2, 0.7, &[], 0);
        assert_eq!(ws[0], xs[0]);
    }

    #[test]
    fn known_model_estimates_true_disturbance() {
        let w = [0.3, -0.2, 0.5, 0.1, -0.4, 0.0, 0.25];
        let (_, _, ws) = scalar_rollout(1.3, 0.8, 3, 0.0, &w, 7);
        for t in 1..=7 {
            assert!((ws[t] - w[t - 1]).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn deadbeat_control() {
        let (a, b) = (0.9, 2.0);
        let (xs, us, ws) = scalar_rollout(a, b, 1, 1.0, &[0.5, -0.3], 4);
        for t in 0..4 {
            assert!((us[t] + a / b * ws[t]).abs() < 1e-12);
        }
        assert!(xs[3].abs() < 1e-12);
    }

    #[test]
    fn impulse_returns_to_zero_at_three() {
        // x(0) = 0, w(0) = 1: state follows the column shifted by one step
        let (xs, _, _) = scalar_rollout(1.0, 1.0, 2, 0.0, &[1.0], 5);
        assert!((xs[1] - 1.0).abs() < 1e-12);
        assert!((xs[2] - 1.0 / 3.0).abs() < 1e-9);
        assert!(xs[3].abs() < 1e-8);
        assert!(xs[4].abs() < 1e-8);
    }

    #[test]
    fn zero_columns_pass_state_through() {
        let t = single(1, 1);
        let d = compute_delay_table(&t);
        let col = column_set(vec![zero_column(1, 1, 3, 0, 0)]);
        let mut st = ControllerState::new(&t, &d, [], 0, 3, &[col.clone()]).unwrap();
        for k in 0..5 {
            st.receive_columns(0, k, col.clone()).unwrap();
            let w = st.estimate_disturbance(k, &[k as f64]).unwrap();
            assert_eq!(w[0], k as f64);
            assert_eq!(st.compute_control(k).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn reading_ahead_of_delay_is_rejected() {
        let subs = (0..2).map(|id| SubsystemSpec { id, state_dim: 1, input_dim: 1 }).collect();
        let t = NetworkTopology::new(subs, &[], &[(0, 1)]).unwrap();
        let d = compute_delay_table(&t);
        let priors = vec![column_set(vec![zero_column(2, 2, 2, 0, 0)]), column_set(vec![zero_column(2, 2, 2, 1, 1)])];
        let mut st = ControllerState::new(&t, &d, [0], 1, 2, &priors).unwrap();
        // a column of 0 stamped at the current time would be one step early
        st.receive_columns(0, 3, priors[0].clone()).unwrap();
        st.receive_columns(1, 3, priors[1].clone()).unwrap();
        assert!(matches!(st.estimate_disturbance(3, &[0.0]), Err(Error::CausalityViolation { reader: 1, source_id: 0, .. })));
        // warm-up uses the prior
        let mut st = ControllerState::new(&t, &d, [0], 1, 2, &priors).unwrap();
        st.receive_columns(1, 0, priors[1].clone()).unwrap();
        st.estimate_disturbance(0, &[1.0]).unwrap();
    }

    #[test]
    fn operators_follow_delays() {
        // chain 0 → 1 → 2 (comm), distinct columns per stamp
        let subs = (0..3).map(|id| SubsystemSpec { id, state_dim: 1, input_dim: 1 }).collect();
        let t = NetworkTopology::new(subs, &[], &[(0, 1), (1, 2)]).unwrap();
        let d = compute_delay_table(&t);
        let h = 2;
        let tagged = |j: usize, s: isize| {
            let mut c = zero_column(3, 3, h, j, j);
            for r in 0..3 {
                c.phi_x[1][r] = 100.0 * j as f64 + s as f64 + 0.1 * r as f64;
                c.phi_u[0][r] = -(100.0 * j as f64 + s as f64);
            }
            column_set(vec![c])
        };
        let ops = assemble_global_operators(&t, &d, h, 5, |j, s| Some(tagged(j, s))).unwrap();
        assert_eq!(ops.identity_defect(), 0.0);
        // entry (2, 0): d(0→2) = 2 → stamp 3
        assert!((ops.phi_x[1][(2, 0)] - (3.0 + 0.2)).abs() < 1e-12);
        // entry (1, 0): stamp 4; entry (0, 0): stamp 5
        assert!((ops.phi_x[1][(1, 0)] - (4.0 + 0.1)).abs() < 1e-12);
        assert!((ops.phi_x[1][(0, 0)] - 5.0).abs() < 1e-12);
        // unreachable 2 → 0 stays zero
        assert_eq!(ops.phi_x[1][(0, 2)], 0.0);
        assert_eq!(ops.phi_u[0][(2, 1)], -(100.0 + 4.0));
    }
}
