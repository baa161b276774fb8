//! Scenario file schema and the validated scenario.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{assemble_from_thetas, param_len, GlobalDynamics};
use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::sls::Weights;
use crate::topology::{
    compute_delay_table, compute_neighbor_sets, validate_assumption_comm, DelayTable, NeighborSets, NetworkTopology,
    SubsystemSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub subsystems: Vec<SubsystemSpec>,
    #[serde(default)]
    pub dyn_edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub comm_edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxFile {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisturbancePolicy {
    /// iid uniform in `[−W, W]` per component.
    Uniform,
    /// `W·sign(vᵀx)·sign(v)`; `v` defaults to the dominant left eigenvector of `A*`.
    SignAdversary {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        direction: Option<Vec<f64>>,
    },
    /// Uniform before `T_stop`, zero afterwards.
    ImpulseThenZero,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    ConsistSls,
    SysidBaseline,
    ZeroControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthesisCadence {
    #[default]
    EveryStep,
    /// Re-synthesize only when the assembled local model changed.
    OnChange,
}

/// Exponential-excitation identification followed by certainty equivalence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SysIdConfig {
    /// Required margin `‖Z⁺‖₂·W·√rows ≤ ε` on the least-squares estimate.
    pub epsilon: f64,
    /// Excitation magnitude multiplier per step.
    pub growth: f64,
    pub initial: f64,
    pub max_steps: usize,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, growth: 2.0, initial: 1.0, max_steps: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub topology: TopologyFile,
    pub truth: Vec<Vec<f64>>,
    pub param_box: Vec<BoxFile>,
    #[serde(rename = "W_true")]
    pub w_true: f64,
    #[serde(rename = "W_assumed")]
    pub w_assumed: f64,
    pub dbar: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "T")]
    pub t_final: usize,
    #[serde(rename = "T_stop", default, skip_serializing_if = "Option::is_none")]
    pub t_stop: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub disturbance: DisturbancePolicy,
    pub seed: u64,
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Weights>,
    #[serde(default)]
    pub synthesis_cadence: SynthesisCadence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steiner_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sysid: Option<SysIdConfig>,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("scenario: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A scenario whose invariants have been checked, with derived structures.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub topology: NetworkTopology,
    pub delay: DelayTable,
    pub sets: NeighborSets,
    pub truth: GlobalDynamics,
    pub p0: Vec<Polytope>,
    pub x0: DVector<f64>,
    pub weights: Weights,
    pub sysid: SysIdConfig,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file = ScenarioFile::from_json(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self> {
        let bad = |msg: String| Error::Scenario(msg);
        let topology = NetworkTopology::new(file.topology.subsystems.clone(), &file.topology.dyn_edges, &file.topology.comm_edges)?;
        let missing = validate_assumption_comm(&topology);
        if !missing.is_empty() {
            return Err(bad(format!("dynamics coupling without a communication edge (to, from): {missing:?}")));
        }
        let n = topology.len();
        if file.dbar == 0 {
            return Err(bad("dbar must be at least 1".into()));
        }
        if file.horizon == 0 {
            return Err(bad("H must be at least 1".into()));
        }
        if !(file.w_true >= 0.0 && file.w_true.is_finite()) {
            return Err(bad(format!("W_true must be finite and ≥ 0, got {}", file.w_true)));
        }
        if !(file.w_assumed >= file.w_true && file.w_assumed.is_finite()) {
            return Err(bad(format!("W_assumed = {} must be finite and ≥ W_true = {}", file.w_assumed, file.w_true)));
        }
        if file.truth.len() != n || file.param_box.len() != n {
            return Err(bad(format!(
                "expected {n} parameter vectors and boxes, got {} and {}",
                file.truth.len(),
                file.param_box.len()
            )));
        }
        let mut p0 = Vec::with_capacity(n);
        for i in 0..n {
            let len = param_len(&topology, i);
            let (theta, b) = (&file.truth[i], &file.param_box[i]);
            for (what, got) in [("truth", theta.len()), ("param_box.lo", b.lo.len()), ("param_box.hi", b.hi.len())] {
                if got != len {
                    return Err(bad(format!("{what} of subsystem {i} has {got} entries, expected {len}")));
                }
            }
            for k in 0..len {
                if !(b.lo[k] <= b.hi[k]) {
                    return Err(bad(format!("param_box of subsystem {i}: entry {k} has lo > hi")));
                }
                if !(b.lo[k] - 1e-12 <= theta[k] && theta[k] <= b.hi[k] + 1e-12) {
                    return Err(bad(format!(
                        "true parameter of subsystem {i} lies outside its box at entry {k}: {} ∉ [{}, {}]",
                        theta[k], b.lo[k], b.hi[k]
                    )));
                }
            }
            p0.push(Polytope::from_box(b.lo.clone(), b.hi.clone())?);
        }
        let truth = assemble_from_thetas(&topology, &file.truth)?;
        let x0 = match &file.x0 {
            Some(v) if v.len() != topology.n_x() => {
                return Err(bad(format!("x0 has {} entries, expected {}", v.len(), topology.n_x())))
            }
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(topology.n_x()),
        };
        match &file.disturbance {
            DisturbancePolicy::ImpulseThenZero if file.t_stop.is_none() => {
                return Err(bad("impulse-then-zero disturbances need T_stop".into()))
            }
            DisturbancePolicy::SignAdversary { direction: Some(v) } if v.len() != topology.n_x() => {
                return Err(bad(format!("adversary direction has {} entries, expected {}", v.len(), topology.n_x())))
            }
            _ => {}
        }
        let weights = file.weights.clone().unwrap_or_else(|| Weights::identity(topology.n_x(), topology.n_u()));
        weights.validate(topology.n_x(), topology.n_u())?;
        let sysid = file.sysid.unwrap_or_default();
        if !(sysid.epsilon > 0.0 && sysid.growth >= 1.0 && sysid.initial > 0.0) {
            return Err(bad("sysid needs epsilon > 0, growth ≥ 1 and initial > 0".into()));
        }
        let delay = compute_delay_table(&topology);
        let sets = compute_neighbor_sets(&topology, &delay, file.dbar)?;
        Ok(Self { file, topology, delay, sets, truth, p0, x0, weights, sysid })
    }

    pub fn horizon(&self) -> usize {
        self.file.horizon
    }

    pub fn t_final(&self) -> usize {
        self.file.t_final
    }

    pub fn w_true(&self) -> f64 {
        self.file.w_true
    }

    pub fn w_assumed(&self) -> f64 {
        self.file.w_assumed
    }

    pub fn algorithm(&self) -> Algorithm {
        self.file.algorithm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::generate::double_integrator;

    #[test]
    fn json_round_trip() {
        let f = double_integrator(Algorithm::ConsistSls, 3);
        let back = ScenarioFile::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(f, back);
        Scenario::from_file(back).unwrap();
    }

    #[test]
    fn rejects_truth_outside_box() {
        let mut f = double_integrator(Algorithm::ConsistSls, 3);
        f.truth[0][0] = 10.0;
        assert!(matches!(Scenario::from_file(f), Err(Error::Scenario(m)) if m.contains("outside")));
    }

    #[test]
    fn rejects_small_assumed_bound() {
        let mut f = double_integrator(Algorithm::ConsistSls, 3);
        f.w_assumed = 0.5 * f.w_true;
        assert!(Scenario::from_file(f).is_err());
    }

    #[test]
    fn rejects_unknown_field_with_location() {
        let f = double_integrator(Algorithm::ConsistSls, 3);
        let mut v: serde_json::Value = serde_json::from_str(&f.to_json().unwrap()).unwrap();
        v["bogus"] = serde_json::json!(1);
        let err = ScenarioFile::from_json(&serde_json::to_string_pretty(&v).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn missing_comm_edge_rejected() {
        let mut f = double_integrator(Algorithm::ConsistSls, 3);
        f.topology.subsystems.push(SubsystemSpec { id: 1, state_dim: 1, input_dim: 1 });
        f.topology.dyn_edges.push((0, 1));
        assert!(Scenario::from_file(f).is_err());
    }
}
