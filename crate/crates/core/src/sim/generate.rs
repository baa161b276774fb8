//! Scenario families used by tests, the acceptance suite and examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{Algorithm, BoxFile, DisturbancePolicy, ScenarioFile, SynthesisCadence, TopologyFile};
use crate::topology::SubsystemSpec;

/// Random heterogeneous network: a bidirectional chain backbone plus sparse
/// random couplings, communication over the 2-hop closure of the coupling
/// graph, full local actuation and unknown `A`, `B^{ii}` entries.
#[derive(Debug, Clone)]
pub struct RandomSpec {
    pub n: usize,
    pub dbar: usize,
    pub horizon: usize,
    pub t_final: usize,
    pub w: f64,
    pub extra_edge_prob: f64,
    pub steiner_samples: Option<usize>,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self { n: 3, dbar: 1, horizon: 3, t_final: 50, w: 0.1, extra_edge_prob: 0.1, steiner_samples: None }
    }
}

/// Entry layout of `θ^i` for block-structured truth/box construction.
enum Entry {
    A { self_block: bool, diag: bool },
    B { self_block: bool, diag: bool },
}

fn entries(subs: &[SubsystemSpec], neighbors: &[usize], i: usize) -> Vec<Entry> {
    let ni = subs[i].state_dim;
    let mut out = Vec::new();
    for &j in neighbors {
        for r in 0..ni {
            for c in 0..subs[j].state_dim {
                out.push(Entry::A { self_block: i == j, diag: r == c });
            }
        }
    }
    for &j in neighbors {
        for r in 0..ni {
            for c in 0..subs[j].input_dim {
                out.push(Entry::B { self_block: i == j, diag: r == c });
            }
        }
    }
    out
}

fn neighbors_of(n: usize, dyn_edges: &[(usize, usize)], i: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).filter(|&j| j == i || dyn_edges.contains(&(j, i))).collect();
    v.sort_unstable();
    v
}

pub fn random_network(spec: &RandomSpec, seed: u64) -> ScenarioFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n;
    let subs: Vec<SubsystemSpec> = (0..n)
        .map(|id| {
            let d = rng.gen_range(1..=2);
            SubsystemSpec { id, state_dim: d, input_dim: d }
        })
        .collect();
    let mut dyn_edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && ((i as isize - j as isize).abs() == 1 || rng.gen_bool(spec.extra_edge_prob)) {
                dyn_edges.push((j, i));
            }
        }
    }
    // j → ℓ whenever j drives ℓ within two coupling hops
    let mut comm_edges = Vec::new();
    for j in 0..n {
        for l in 0..n {
            if j == l {
                continue;
            }
            let direct = dyn_edges.contains(&(j, l));
            let two = (0..n).any(|m| dyn_edges.contains(&(j, m)) && dyn_edges.contains(&(m, l)));
            if direct || two {
                comm_edges.push((j, l));
            }
        }
    }
    let mut truth = Vec::with_capacity(n);
    let mut param_box = Vec::with_capacity(n);
    for i in 0..n {
        let nb = neighbors_of(n, &dyn_edges, i);
        let (mut th, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
        for e in entries(&subs, &nb, i) {
            let (t, l, h) = match e {
                Entry::A { self_block: true, diag: true } => {
                    let t = rng.gen_range(0.5..1.1);
                    (t, t - rng.gen_range(0.05..0.2), t + rng.gen_range(0.05..0.2))
                }
                Entry::A { .. } => {
                    let t = rng.gen_range(-0.2..0.2);
                    (t, t - rng.gen_range(0.05..0.2), t + rng.gen_range(0.05..0.2))
                }
                Entry::B { self_block: true, diag: true } => (rng.gen_range(0.8..1.2), 0.8, 1.2),
                Entry::B { self_block: true, diag: false } => (rng.gen_range(-0.1..0.1), -0.1, 0.1),
                Entry::B { self_block: false, .. } => (0.0, 0.0, 0.0),
            };
            th.push(t);
            lo.push(l);
            hi.push(h);
        }
        truth.push(th);
        param_box.push(BoxFile { lo, hi });
    }
    let n_x: usize = subs.iter().map(|s| s.state_dim).sum();
    let x0 = (0..n_x).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ScenarioFile {
        topology: TopologyFile { subsystems: subs, dyn_edges, comm_edges },
        truth,
        param_box,
        w_true: spec.w,
        w_assumed: spec.w,
        dbar: spec.dbar,
        horizon: spec.horizon,
        t_final: spec.t_final,
        t_stop: None,
        x0: Some(x0),
        disturbance: DisturbancePolicy::Uniform,
        seed,
        algorithm: Algorithm::ConsistSls,
        weights: None,
        synthesis_cadence: SynthesisCadence::EveryStep,
        steiner_samples: spec.steiner_samples,
        sysid: None,
    }
}

/// Scalar subsystems on a line, coupled and communicating with their
/// immediate neighbors only.
#[derive(Debug, Clone)]
pub struct ChainSpec {
    pub n: usize,
    pub a_self: f64,
    pub coupling: f64,
    pub b: f64,
    /// Euclidean diameter of every `P_0^i`; the truth sits 30% of the way
    /// along each free coordinate.
    pub diameter: f64,
    pub w: f64,
    pub t_stop: usize,
    pub t_final: usize,
    pub dbar: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        Self {
            n: 5,
            a_self: 1.2,
            coupling: 0.2,
            b: 1.0,
            diameter: 1.0,
            w: 0.1,
            t_stop: 50,
            t_final: 500,
            dbar: 4,
            horizon: 6,
            seed: 1,
        }
    }
}

pub fn chain_scenario(spec: &ChainSpec) -> ScenarioFile {
    let n = spec.n;
    let subs: Vec<SubsystemSpec> = (0..n).map(|id| SubsystemSpec { id, state_dim: 1, input_dim: 1 }).collect();
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((i - 1, i));
        edges.push((i, i - 1));
    }
    let mut truth = Vec::new();
    let mut param_box = Vec::new();
    for i in 0..n {
        let nb = neighbors_of(n, &edges, i);
        let ents = entries(&subs, &nb, i);
        let free = ents.iter().filter(|e| !matches!(e, Entry::B { self_block: false, .. })).count();
        let width = spec.diameter / (free as f64).sqrt();
        let (mut th, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
        for e in ents {
            let (t, fixed) = match e {
                Entry::A { self_block: true, .. } => (spec.a_self, false),
                Entry::A { .. } => (spec.coupling, false),
                Entry::B { self_block: true, .. } => (spec.b, false),
                Entry::B { .. } => (0.0, true),
            };
            th.push(t);
            if fixed {
                lo.push(t);
                hi.push(t);
            } else {
                lo.push(t - 0.3 * width);
                hi.push(t + 0.7 * width);
            }
        }
        truth.push(th);
        param_box.push(BoxFile { lo, hi });
    }
    ScenarioFile {
        topology: TopologyFile { subsystems: subs, dyn_edges: edges.clone(), comm_edges: edges },
        truth,
        param_box,
        w_true: spec.w,
        w_assumed: spec.w,
        dbar: spec.dbar,
        horizon: spec.horizon,
        t_final: spec.t_final,
        t_stop: Some(spec.t_stop),
        x0: None,
        disturbance: DisturbancePolicy::ImpulseThenZero,
        seed: spec.seed,
        algorithm: Algorithm::ConsistSls,
        weights: None,
        synthesis_cadence: SynthesisCadence::EveryStep,
        steiner_samples: None,
        sysid: None,
    }
}

/// `x(t+1) = [1 1; 0 1] x + [0; 1] u + w`, `‖w‖∞ ≤ 1` until `t = 20`, with an
/// unknown-but-bounded model for the consistency-based controller.
pub fn double_integrator(algorithm: Algorithm, seed: u64) -> ScenarioFile {
    let truth = vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    let lo: Vec<f64> = truth.iter().map(|t| t - 0.05).collect();
    let hi: Vec<f64> = truth.iter().map(|t| t + 0.15).collect();
    ScenarioFile {
        topology: TopologyFile {
            subsystems: vec![SubsystemSpec { id: 0, state_dim: 2, input_dim: 1 }],
            dyn_edges: vec![],
            comm_edges: vec![],
        },
        truth: vec![truth],
        param_box: vec![BoxFile { lo, hi }],
        w_true: 1.0,
        w_assumed: 1.0,
        dbar: 1,
        horizon: 4,
        t_final: 60,
        t_stop: Some(20),
        x0: None,
        disturbance: DisturbancePolicy::ImpulseThenZero,
        seed,
        algorithm,
        weights: None,
        synthesis_cadence: SynthesisCadence::EveryStep,
        steiner_samples: None,
        sysid: None,
    }
}
