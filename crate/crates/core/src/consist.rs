//! Consistent-set maintenance and Steiner-point parameter selection, plus the
//! union-of-sets wrapper for non-convex prior sets.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{steiner_point, AddOutcome, DirectionSet, Halfspace, Polytope};
use crate::seed;

/// Rows with a regressor norm below this carry no information about `θ`.
const ZERO_ROW: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateOutcome {
    /// Halfspaces that removed part of the set.
    pub cuts: usize,
    /// Halfspaces implied by the current set (not stored).
    pub redundant: usize,
    /// Rows with an all-zero regressor.
    pub uninformative: usize,
}

/// One locally observed transition: `x^i(t)` and the regressor built from `t−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: usize,
    pub x: Vec<f64>,
    pub z: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ConsistentSet {
    owner: usize,
    polytope: Polytope,
    initial_diameter: f64,
    directions: Arc<DirectionSet>,
    samples: Option<usize>,
    seed: u64,
    history: Vec<(usize, Vec<f64>)>,
    increments: Vec<f64>,
    movement: f64,
    dirty: bool,
    prune_every: usize,
}

impl ConsistentSet {
    /// `samples = None` uses `64·d` Steiner directions.
    pub fn new(owner: usize, p0: Polytope, seed: u64, samples: Option<usize>) -> Self {
        let directions = Arc::new(DirectionSet::for_polytope(&p0, samples, seed));
        Self {
            owner,
            initial_diameter: p0.box_diameter(),
            polytope: p0,
            directions,
            samples,
            seed,
            history: Vec::new(),
            increments: Vec::new(),
            movement: 0.0,
            dirty: true,
            prune_every: 100,
        }
    }

    pub fn with_prune_every(mut self, every: usize) -> Self {
        self.prune_every = every;
        self
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn polytope(&self) -> &Polytope {
        &self.polytope
    }

    pub fn initial_diameter(&self) -> f64 {
        self.initial_diameter
    }

    /// Selected parameters with their timesteps.
    pub fn history(&self) -> &[(usize, Vec<f64>)] {
        &self.history
    }

    pub fn current(&self) -> Option<&[f64]> {
        self.history.last().map(|(_, v)| v.as_slice())
    }

    /// Per-selection movement `‖θ_t − θ_{t−1}‖₂` (first entry 0).
    pub fn movement_increments(&self) -> &[f64] {
        &self.increments
    }

    /// Running `Σ ‖θ_{t+1} − θ_t‖₂`.
    pub fn path_length(&self) -> f64 {
        self.movement
    }

    /// Adds `±(Z_r θ − x_r) ≤ W` for every row `r`.
    pub fn update(&mut self, obs: &Observation, w: f64) -> Result<UpdateOutcome> {
        let inconsistent = Error::Inconsistency {
            owner: self.owner,
            t: obs.t,
        };
        if obs.z.ncols() != self.polytope.dim() || obs.z.nrows() != obs.x.len() {
            return Err(Error::DimensionMismatch {
                what: "regressor",
                expected: self.polytope.dim(),
                got: obs.z.ncols(),
            });
        }
        let mut out = UpdateOutcome::default();
        for r in 0..obs.z.nrows() {
            let row: Vec<f64> = obs.z.row(r).iter().copied().collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= ZERO_ROW {
                if obs.x[r].abs() > w + crate::geometry::FEAS_TOL {
                    return Err(inconsistent);
                }
                out.uninformative += 1;
                continue;
            }
            let upper = Halfspace::new(row.clone(), obs.x[r] + w)?;
            let lower = Halfspace::new(row.iter().map(|v| -v).collect(), w - obs.x[r])?;
            for h in [upper, lower] {
                match self.polytope.add_halfspace(h, obs.t) {
                    Ok(AddOutcome::Cut) => {
                        out.cuts += 1;
                        self.dirty = true;
                    }
                    Ok(AddOutcome::Redundant) => out.redundant += 1,
                    Err(Error::EmptyPolytope) => return Err(inconsistent),
                    Err(e) => return Err(e),
                }
            }
        }
        if self.prune_every > 0 && obs.t > 0 && obs.t % self.prune_every == 0 {
            let removed = self.polytope.prune_redundant()?;
            log::trace!("subsystem {} pruned {removed} halfspaces at t={}", self.owner, obs.t);
        }
        Ok(out)
    }

    /// Selects `θ_t` by the Steiner point. Attempt 0 reuses the previous
    /// selection when the set is unchanged; later attempts draw fresh directions
    /// and replace the selection already recorded for `t`.
    pub fn select(&mut self, t: usize, attempt: u32) -> Result<Vec<f64>> {
        let theta = if attempt == 0 && !self.dirty && self.current().is_some() {
            self.current().unwrap().to_vec()
        } else if attempt == 0 {
            steiner_point(&self.polytope, &self.directions)?.point
        } else {
            let dirs = DirectionSet::for_polytope(&self.polytope, self.samples, seed::reselect(self.seed, t, attempt));
            steiner_point(&self.polytope, &dirs)?.point
        };
        self.dirty = false;
        if matches!(self.history.last(), Some((tl, _)) if *tl == t) {
            self.history.pop();
            self.movement -= self.increments.pop().unwrap_or(0.0);
        }
        let inc = self
            .current()
            .map(|prev| prev.iter().zip(&theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .unwrap_or(0.0);
        self.movement += inc;
        self.increments.push(inc);
        self.history.push((t, theta.clone()));
        Ok(theta)
    }
}

/// Runs the consistent-set chase on one convex piece of a union at a time.
#[derive(Debug, Clone)]
pub struct SetSelectState {
    owner: usize,
    candidates: Vec<Polytope>,
    discarded: Vec<bool>,
    active: usize,
    restarts: usize,
    cs: ConsistentSet,
    observations: Vec<Observation>,
    w: f64,
    seed: u64,
    samples: Option<usize>,
}

impl SetSelectState {
    pub fn new(owner: usize, candidates: Vec<Polytope>, w: f64, seed: u64, samples: Option<usize>) -> Result<Self> {
        let first = candidates
            .first()
            .cloned()
            .ok_or_else(|| Error::Scenario("set selection needs at least one candidate set".into()))?;
        let n = candidates.len();
        Ok(Self {
            owner,
            cs: ConsistentSet::new(owner, first, seed::mix(seed, 0), samples),
            candidates,
            discarded: vec![false; n],
            active: 0,
            restarts: 0,
            observations: Vec::new(),
            w,
            seed,
            samples,
        })
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }

    pub fn consistent_set(&self) -> &ConsistentSet {
        &self.cs
    }

    /// Applies `obs` to the active set; on emptiness, activates the next
    /// remaining candidate and replays every past observation into it.
    pub fn update(&mut self, obs: Observation) -> Result<Vec<f64>> {
        let t = obs.t;
        self.observations.push(obs);
        let last = self.observations.last().unwrap();
        match self.cs.update(last, self.w) {
            Ok(_) => {}
            Err(Error::Inconsistency { .. }) => self.restart()?,
            Err(e) => return Err(e),
        }
        self.cs.select(t, 0)
    }

    fn restart(&mut self) -> Result<()> {
        self.discarded[self.active] = true;
        loop {
            let Some(next) = (0..self.candidates.len()).find(|&k| !self.discarded[k]) else {
                return Err(Error::GlobalInconsistency);
            };
            self.restarts += 1;
            let mut cs = ConsistentSet::new(
                self.owner,
                self.candidates[next].clone(),
                seed::mix(self.seed, next as u64),
                self.samples,
            );
            let mut ok = true;
            for obs in &self.observations {
                match cs.update(obs, self.w) {
                    Ok(_) => {}
                    Err(Error::Inconsistency { .. }) => {
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if ok {
                self.active = next;
                self.cs = cs;
                return Ok(());
            }
            self.discarded[next] = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{assemble_from_thetas, local_regressor, param_len, snapshot_from_global, step_truth};
    use crate::topology::{NetworkTopology, SubsystemSpec};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(t: usize, x: &[f64], z: &[f64]) -> Observation {
        Observation {
            t,
            x: x.to_vec(),
            z: DMatrix::from_row_slice(x.len(), z.len() / x.len(), z),
        }
    }

    #[test]
    fn scalar_interval() {
        let p0 = Polytope::from_box(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let mut cs = ConsistentSet::new(0, p0, 1, None);
        let out = cs.update(&obs(1, &[1.0], &[1.0, 0.0]), 0.1).unwrap();
        assert_eq!(out.cuts, 2);
        let p = cs.polytope();
        assert!((p.support_point(&[1.0, 0.0]).unwrap().value - 1.1).abs() < 1e-12);
        assert!((p.support_point(&[-1.0, 0.0]).unwrap().value + 0.9).abs() < 1e-12);
        assert!((p.support_point(&[0.0, 1.0]).unwrap().value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_information_step() {
        let p0 = Polytope::from_box(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let mut cs = ConsistentSet::new(0, p0.clone(), 1, None);
        let out = cs.update(&obs(1, &[0.05], &[0.0, 0.0]), 0.1).unwrap();
        assert_eq!(out.uninformative, 1);
        assert_eq!(cs.polytope(), &p0);
        let err = cs.update(&obs(2, &[0.5], &[0.0, 0.0]), 0.1).unwrap_err();
        assert!(matches!(err, Error::Inconsistency { owner: 0, t: 2 }));
    }

    #[test]
    fn box_center_selected() {
        let p0 = Polytope::from_box(vec![-1.0, 0.0, 1.0], vec![1.0, 4.0, 1.5]).unwrap();
        let mut cs = ConsistentSet::new(0, p0, 3, None);
        let th = cs.select(0, 0).unwrap();
        for (a, b) in th.iter().zip([0.0, 2.0, 1.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        // unchanged set → identical selection, zero movement
        assert_eq!(cs.select(1, 0).unwrap(), th);
        assert_eq!(cs.path_length(), 0.0);
    }

    #[test]
    fn collapse_to_point() {
        let p0 = Polytope::from_box(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let mut cs = ConsistentSet::new(0, p0, 3, None);
        // W = 0 with two independent regressors pins θ = (0.5, 1.5)
        cs.update(&obs(1, &[0.5], &[1.0, 0.0]), 0.0).unwrap();
        cs.update(&obs(2, &[2.0], &[1.0, 1.0]), 0.0).unwrap();
        let th = cs.select(2, 0).unwrap();
        assert!((th[0] - 0.5).abs() < 1e-8 && (th[1] - 1.5).abs() < 1e-8, "{th:?}");
    }

    #[test]
    fn single_shrink_movement_equals_distance() {
        let p0 = Polytope::from_box(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let mut cs = ConsistentSet::new(0, p0, 3, None);
        let a = cs.select(0, 0).unwrap();
        cs.update(&obs(1, &[0.5], &[1.0, 0.0]), 0.5).unwrap();
        let b = cs.select(1, 0).unwrap();
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((cs.path_length() - d).abs() < 1e-15);
        assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reselection_replaces_entry() {
        let p0 = Polytope::from_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mut cs = ConsistentSet::new(0, p0, 3, Some(8));
        cs.update(&obs(1, &[0.2], &[1.0, 1.0]), 0.05).unwrap();
        cs.select(1, 0).unwrap();
        cs.select(1, 1).unwrap();
        assert_eq!(cs.history().len(), 1);
        assert_eq!(cs.movement_increments().len(), 1);
        assert!(cs.polytope().contains(cs.current().unwrap(), 1e-9));
    }

    /// Simulated trajectory: the truth stays consistent and every selection is feasible.
    #[test]
    fn truth_stays_in_consistent_set() {
        let subs = (0..3)
            .map(|id| SubsystemSpec { id, state_dim: if id == 1 { 2 } else { 1 }, input_dim: 1 })
            .collect();
        let t = NetworkTopology::new(subs, &[(0, 1), (1, 2), (2, 0)], &[(0, 1), (1, 2), (2, 0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let thetas: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..param_len(&t, i)).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .collect();
        let g = assemble_from_thetas(&t, &thetas).unwrap();
        let w = 0.1;
        let mut sets: Vec<ConsistentSet> = (0..3)
            .map(|i| {
                let lo = thetas[i].iter().map(|v| v - 0.5).collect();
                let hi = thetas[i].iter().map(|v| v + 0.5).collect();
                ConsistentSet::new(i, Polytope::from_box(lo, hi).unwrap(), i as u64, None)
            })
            .collect();
        let mut x = DVector::from_fn(t.n_x(), |_, _| rng.gen_range(-1.0..1.0));
        for step in 1..=50 {
            let u = DVector::from_fn(t.n_u(), |_, _| rng.gen_range(-1.0..1.0));
            let wv = DVector::from_fn(t.n_x(), |_, _| rng.gen_range(-w..w));
            let next = step_truth(&g, &x, &u, &wv).unwrap();
            for (i, cs) in sets.iter_mut().enumerate() {
                let z = local_regressor(&t, i, &snapshot_from_global(&t, i, &x, &u)).unwrap();
                let xi = next.as_slice()[t.state_range(i)].to_vec();
                let before = cs.polytope().halfspaces().to_vec();
                cs.update(&Observation { t: step, x: xi, z }, w).unwrap();
                assert!(cs.polytope().contains(&thetas[i], 1e-9));
                // nestedness: list at t extends list at t−1 (no prune before step 100)
                assert_eq!(&cs.polytope().halfspaces()[..before.len()], &before[..]);
                let th = cs.select(step, 0).unwrap();
                assert!(cs.polytope().contains(&th, 1e-9));
            }
            x = next;
        }
    }

    #[test]
    fn setselect_single_candidate_matches_plain() {
        let p0 = Polytope::from_box(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let mut plain = ConsistentSet::new(0, p0.clone(), seed::mix(7, 0), None);
        let mut ss = SetSelectState::new(0, vec![p0], 0.1, 7, None).unwrap();
        let o = obs(1, &[1.0], &[1.0, 0.5]);
        plain.update(&o, 0.1).unwrap();
        assert_eq!(plain.select(1, 0).unwrap(), ss.update(o).unwrap());
        assert_eq!(ss.restarts(), 0);
    }

    #[test]
    fn setselect_restarts_once_when_truth_in_second() {
        // scalar a with b fixed: candidate boxes a ∈ [0, 1] and a ∈ [2, 3]; truth a = 2.5
        let c1 = Polytope::from_box(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let c2 = Polytope::from_box(vec![2.0, 1.0], vec![3.0, 1.0]).unwrap();
        let mut ss = SetSelectState::new(0, vec![c1, c2], 0.1, 1, None).unwrap();
        let mut x = 1.0;
        for t in 1..=5 {
            // x(t) = 2.5 x(t−1) + u(t−1), u = 0, w = 0.05
            let nx = 2.5 * x + 0.05;
            let th = ss.update(obs(t, &[nx], &[x, 0.0])).unwrap();
            assert!(ss.consistent_set().polytope().contains(&th, 1e-9));
            x = nx.min(10.0);
        }
        assert_eq!(ss.restarts(), 1);
        assert_eq!(ss.active(), 1);
    }

    #[test]
    fn setselect_zero_restarts_when_truth_in_first() {
        let c1 = Polytope::from_box(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let c2 = Polytope::from_box(vec![2.0, 1.0], vec![3.0, 1.0]).unwrap();
        let mut ss = SetSelectState::new(0, vec![c1, c2], 0.1, 1, None).unwrap();
        for t in 1..=5 {
            ss.update(obs(t, &[0.5], &[1.0, 0.0])).unwrap();
        }
        assert_eq!(ss.restarts(), 0);
    }

    #[test]
    fn setselect_all_empty_is_global_inconsistency() {
        let c1 = Polytope::from_box(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let mut ss = SetSelectState::new(0, vec![c1], 0.1, 1, None).unwrap();
        assert!(matches!(ss.update(obs(1, &[5.0], &[1.0, 0.0])), Err(Error::GlobalInconsistency)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            /// Adversarial cuts through the current selection; movement stays
            /// within the nested-chasing budget.
            #[test]
            fn path_length_budget(seed in any::<u64>(), d in 2usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p0 = Polytope::from_box(vec![0.0; d], vec![1.0; d]).unwrap();
                let diam = p0.box_diameter();
                let target: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..0.8)).collect();
                let mut cs = ConsistentSet::new(0, p0, seed, None);
                let mut cur = cs.select(0, 0).unwrap();
                for t in 1..=60 {
                    let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let at: f64 = a.iter().zip(&target).map(|(x, y)| x * y).sum();
                    let ac: f64 = a.iter().zip(&cur).map(|(x, y)| x * y).sum();
                    let b = (ac - 1e-3).max(at + 1e-6);
                    let z = DMatrix::from_row_slice(1, d, &a);
                    // |Zθ − x| ≤ W with x − W = −∞-ish: encode a·θ ≤ b via a wide band
                    let o = Observation { t, x: vec![b - 10.0], z };
                    cs.update(&o, 10.0).unwrap();
                    cur = cs.select(t, 0).unwrap();
                    prop_assert!(cs.polytope().contains(&target, 1e-9));
                }
                prop_assert!(cs.path_length() <= 1.1 * d as f64 / 2.0 * diam);
            }
        }
    }
}
