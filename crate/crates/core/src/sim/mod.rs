//! Episode orchestration: two-phase ticks over per-subsystem actors connected
//! by the delay-exact message bus.
//!
//! Tick `t`: deliver payloads due at `t`; every actor observes `x^i(t)`,
//! updates its consistent set with the transition from `t−1`, selects `θ^i_t`,
//! assembles its local model from delayed `θ^ℓ`, synthesizes its columns and
//! evaluates the controller; then all actors publish and the truth advances.

pub mod bus;
pub mod disturbance;
pub mod generate;
pub mod scenario;
pub mod sysid;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::consist::{ConsistentSet, Observation};
use crate::controller::{ColumnSet, ControllerState};
use crate::dynamics::{local_regressor, step_truth, NeighborSnapshot};
use crate::error::{Error, Result};
use crate::seed;
use crate::sls::{build_sparsity_masks, synthesize_subsystem, LocalModel, SparsityMask};

pub use bus::{MessageBus, Payload};
pub use disturbance::DisturbanceGenerator;
pub use scenario::{Algorithm, DisturbancePolicy, Scenario, ScenarioFile, SynthesisCadence, SysIdConfig};
pub use trace::{RunStatus, TraceLog};

/// States beyond this magnitude (or non-finite) end the episode as diverged.
pub const DIVERGENCE: f64 = 1e12;

/// Fresh Steiner draws tried after an infeasible synthesis.
pub const MAX_RESELECT: u32 = 5;

pub fn run_episode(scenario: Arc<Scenario>) -> Result<TraceLog> {
    match scenario.algorithm() {
        Algorithm::ConsistSls => run_consist_sls(scenario),
        Algorithm::SysidBaseline => sysid::run_sysid(scenario),
        Algorithm::ZeroControl => run_zero_control(scenario),
    }
}

pub(crate) fn diverged(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE)
}

fn run_zero_control(scenario: Arc<Scenario>) -> Result<TraceLog> {
    let s = &scenario;
    let mut dist = disturbance_for(s);
    let mut trace = TraceLog::empty(scenario.clone());
    let mut x = s.x0.clone();
    let u = DVector::zeros(s.topology.n_u());
    for t in 0..=s.t_final() {
        trace.x.push(x.clone());
        trace.u.push(u.clone());
        // with no controller columns, the estimate reduces to the state
        trace.what.push(x.clone());
        if t == s.t_final() {
            break;
        }
        let w = dist.sample(t, &x);
        x = step_truth(&s.truth, &x, &u, &w)?;
        trace.w.push(w);
        if diverged(&x) {
            trace.x.push(x);
            trace.status = RunStatus::Diverged { t: t + 1 };
            break;
        }
    }
    Ok(trace)
}

pub(crate) fn disturbance_for(s: &Scenario) -> DisturbanceGenerator {
    DisturbanceGenerator::new(s.file.disturbance.clone(), s.w_true(), s.file.t_stop, &s.truth.a, seed::disturbance(s.file.seed))
}

struct Actor {
    id: usize,
    cs: ConsistentSet,
    ctrl: ControllerState,
    mask: SparsityMask,
    neighbors: BTreeSet<usize>,
    model_members: BTreeSet<usize>,
    thetas: BTreeMap<usize, (usize, Arc<Vec<f64>>)>,
    snapshots: BTreeMap<usize, (usize, Vec<f64>, Vec<f64>)>,
    own_prev: Option<(Vec<f64>, Vec<f64>)>,
    last: Option<(u64, ColumnSet)>,
}

struct StepOutput {
    theta: Arc<Vec<f64>>,
    columns: ColumnSet,
    what: DVector<f64>,
    u: DVector<f64>,
}

struct Shared<'a> {
    scenario: &'a Scenario,
    prior_theta: &'a [Arc<Vec<f64>>],
}

impl Actor {
    fn receive(&mut self, p: &Payload) -> Result<()> {
        let j = p.source;
        if self.neighbors.contains(&j) {
            self.snapshots.insert(j, (p.stamp, p.x.clone(), p.u.clone()));
        }
        if self.model_members.contains(&j) {
            self.thetas.insert(j, (p.stamp, p.theta.clone()));
        }
        if self.ctrl.sources().any(|s| s == j) {
            self.ctrl.receive_what(j, p.stamp, p.what.clone())?;
            self.ctrl.receive_columns(j, p.stamp, p.columns.clone())?;
        }
        Ok(())
    }

    fn observation(&self, s: &Scenario, t: usize, x_i: &[f64]) -> Result<Observation> {
        let mut snap = NeighborSnapshot::new();
        for &j in &self.neighbors {
            if j == self.id {
                let (x, u) = self.own_prev.clone().ok_or_else(|| Error::MissingData(format!("own history of {} at t={t}", self.id)))?;
                snap.insert(j, (x, u));
                continue;
            }
            match self.snapshots.get(&j) {
                Some((stamp, x, u)) if *stamp + 1 == t => {
                    snap.insert(j, (x.clone(), u.clone()));
                }
                Some((stamp, ..)) if *stamp + 1 > t => {
                    return Err(Error::CausalityViolation { reader: self.id, source_id: j, stamp: *stamp, now: t })
                }
                _ => return Err(Error::MissingData(format!("state of {j} stamped {} at subsystem {}", t - 1, self.id))),
            }
        }
        Ok(Observation { t, x: x_i.to_vec(), z: local_regressor(&s.topology, self.id, &snap)? })
    }

    /// `θ^ℓ_{t−d(ℓ→i)}` for every `ℓ ∈ M(i)`, the prior before it can arrive.
    fn model(&self, sh: &Shared, t: usize, own: &Arc<Vec<f64>>) -> Result<LocalModel> {
        let mut thetas = BTreeMap::new();
        for &l in &self.model_members {
            let theta = if l == self.id {
                own.as_ref().clone()
            } else {
                match sh.scenario.delay.delay(l, self.id) {
                    Some(d) if d <= t => match self.thetas.get(&l) {
                        Some((stamp, th)) if *stamp == t - d => th.as_ref().clone(),
                        Some((stamp, _)) if *stamp > t - d => {
                            return Err(Error::CausalityViolation { reader: self.id, source_id: l, stamp: *stamp, now: t })
                        }
                        _ => return Err(Error::MissingData(format!("parameter of {l} stamped {} at subsystem {}", t - d, self.id))),
                    },
                    _ => sh.prior_theta[l].as_ref().clone(),
                }
            };
            thetas.insert(l, theta);
        }
        LocalModel::assemble(&sh.scenario.topology, &thetas)
    }

    fn step(&mut self, sh: &Shared, t: usize, x_i: &[f64]) -> Result<StepOutput> {
        let s = sh.scenario;
        if t > 0 {
            let obs = self.observation(s, t, x_i)?;
            self.cs.update(&obs, s.w_assumed())?;
        }
        let mut attempt = 0;
        let (theta, columns) = loop {
            let theta = Arc::new(self.cs.select(t, attempt)?);
            let model = self.model(sh, t, &theta)?;
            if s.file.synthesis_cadence == SynthesisCadence::OnChange {
                if let Some((stamp, cols)) = &self.last {
                    if *stamp == model.stamp {
                        break (theta, cols.clone());
                    }
                }
            }
            match synthesize_subsystem(&s.topology, &model, &self.mask, &s.weights) {
                Ok(cols) => {
                    let cols: ColumnSet = Arc::new(
                        cols.into_iter()
                            .map(|mut c| {
                                c.synthesized_at = t;
                                Arc::new(c)
                            })
                            .collect(),
                    );
                    self.last = Some((model.stamp, cols.clone()));
                    break (theta, cols);
                }
                Err(Error::SynthesisInfeasible { .. }) if attempt < MAX_RESELECT => {
                    attempt += 1;
                    log::debug!("subsystem {} reselects at t={t} (attempt {attempt})", self.id);
                }
                Err(e) => return Err(e),
            }
        };
        self.ctrl.receive_columns(self.id, t, columns.clone())?;
        let what = self.ctrl.estimate_disturbance(t, x_i)?;
        let u = self.ctrl.compute_control(t)?;
        Ok(StepOutput { theta, columns, what, u })
    }
}

/// Prior parameters (Steiner points of `P_0`) and the columns every subsystem
/// synthesizes from them; both are common knowledge before `t = 0`.
fn priors(s: &Scenario, masks: &[SparsityMask]) -> Result<(Vec<Arc<Vec<f64>>>, Vec<ColumnSet>)> {
    let n = s.topology.len();
    let theta: Vec<Arc<Vec<f64>>> = (0..n)
        .map(|i| {
            let mut cs = ConsistentSet::new(i, s.p0[i].clone(), seed::subsystem(s.file.seed, i), s.file.steiner_samples);
            cs.select(0, 0).map(Arc::new)
        })
        .collect::<Result<_>>()?;
    let columns = (0..n)
        .map(|i| {
            let local: BTreeMap<usize, Vec<f64>> = s.sets.m[i].iter().map(|&l| (l, theta[l].as_ref().clone())).collect();
            let model = LocalModel::assemble(&s.topology, &local)?;
            let cols = synthesize_subsystem(&s.topology, &model, &masks[i], &s.weights)?;
            Ok(Arc::new(cols.into_iter().map(Arc::new).collect()))
        })
        .collect::<Result<_>>()?;
    Ok((theta, columns))
}

fn run_consist_sls(scenario: Arc<Scenario>) -> Result<TraceLog> {
    let s = &*scenario;
    let n = s.topology.len();
    let h = s.horizon();
    let masks: Vec<SparsityMask> =
        (0..n).map(|i| build_sparsity_masks(&s.topology, &s.delay, s.file.dbar, i, h)).collect::<Result<_>>()?;
    let (prior_theta, prior_columns) = priors(s, &masks)?;

    let mut actors: Vec<Actor> = (0..n)
        .map(|i| {
            Ok(Actor {
                id: i,
                cs: ConsistentSet::new(i, s.p0[i].clone(), seed::subsystem(s.file.seed, i), s.file.steiner_samples),
                ctrl: ControllerState::new(&s.topology, &s.delay, s.sets.d_in[i].iter().copied(), i, h, &prior_columns)?,
                mask: masks[i].clone(),
                neighbors: s.topology.dyn_neighbors(i).clone(),
                model_members: s.sets.m[i].clone(),
                thetas: BTreeMap::new(),
                snapshots: BTreeMap::new(),
                own_prev: None,
                last: None,
            })
        })
        .collect::<Result<_>>()?;

    // j's payloads go to whoever regresses on it, models it, or runs its columns
    let mut recipients = vec![BTreeSet::new(); n];
    for i in 0..n {
        for &j in s.topology.dyn_neighbors(i).iter().chain(&s.sets.m[i]).chain(&s.sets.d_in[i]) {
            recipients[j].insert(i);
        }
    }
    let mut bus = MessageBus::new(s.delay.clone(), recipients);
    let mut dist = disturbance_for(s);
    let shared = Shared { scenario: s, prior_theta: &prior_theta };

    let mut trace = TraceLog::empty(scenario.clone());
    trace.prior_theta = prior_theta.clone();
    trace.prior_columns = prior_columns.clone();
    let mut x = s.x0.clone();
    for t in 0..=s.t_final() {
        for (i, p) in bus.deliver(t)? {
            actors[i].receive(&p)?;
        }
        let xs = x.as_slice();
        let outs: Vec<Result<StepOutput>> = actors
            .par_iter_mut()
            .map(|a| {
                let r = s.topology.state_range(a.id);
                a.step(&shared, t, &xs[r])
            })
            .collect();
        let outs: Vec<StepOutput> = outs.into_iter().collect::<Result<_>>()?;

        let mut u = DVector::zeros(s.topology.n_u());
        let mut what = DVector::zeros(s.topology.n_x());
        for (i, o) in outs.iter().enumerate() {
            u.rows_mut(s.topology.input_range(i).start, o.u.len()).copy_from(&o.u);
            what.rows_mut(s.topology.state_range(i).start, o.what.len()).copy_from(&o.what);
        }
        for (i, o) in outs.iter().enumerate() {
            let (xr, ur) = (s.topology.state_range(i), s.topology.input_range(i));
            let (xi, ui) = (x.as_slice()[xr].to_vec(), u.as_slice()[ur].to_vec());
            actors[i].own_prev = Some((xi.clone(), ui.clone()));
            bus.post(Arc::new(Payload {
                source: i,
                stamp: t,
                x: xi,
                u: ui,
                what: o.what.clone(),
                theta: o.theta.clone(),
                columns: o.columns.clone(),
            }));
        }
        trace.x.push(x.clone());
        trace.u.push(u.clone());
        trace.what.push(what);
        trace.theta.push(outs.iter().map(|o| o.theta.clone()).collect());
        trace.columns.push(outs.iter().map(|o| o.columns.clone()).collect());
        if t == s.t_final() {
            break;
        }
        let w = dist.sample(t, &x);
        x = step_truth(&s.truth, &x, &u, &w)?;
        trace.w.push(w);
        if diverged(&x) {
            trace.x.push(x);
            trace.status = RunStatus::Diverged { t: t + 1 };
            break;
        }
    }
    trace.movement = actors.iter().map(|a| a.cs.movement_increments().to_vec()).collect();
    trace.initial_diameter = actors.iter().map(|a| a.cs.initial_diameter()).collect();
    Ok(trace)
}
