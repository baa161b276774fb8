//! Dynamical coupling and communication structure of the network.
//!
//! Subsystems are indexed `0..N`. Edges are directed `(from, to)`: a dynamics
//! edge `(j, i)` means the state or input of `j` drives `x^i`, i.e. `j ∈ N(i)`;
//! a communication edge `(j, i)` means `j` can send to `i` in one step, i.e.
//! `C(i, j) = 1`. Self-loops are implicit in both graphs.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsystemSpec {
    pub id: usize,
    pub state_dim: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    subsystems: Vec<SubsystemSpec>,
    dyn_neighbors: Vec<BTreeSet<usize>>,
    comm_out: Vec<BTreeSet<usize>>,
    comm_in: Vec<BTreeSet<usize>>,
    state_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
}

impl NetworkTopology {
    /// Builds a topology. `dyn_edges` and `comm_edges` are `(from, to)` pairs;
    /// self-loops are added for every subsystem.
    pub fn new(
        subsystems: Vec<SubsystemSpec>,
        dyn_edges: &[(usize, usize)],
        comm_edges: &[(usize, usize)],
    ) -> Result<Self> {
        let n = subsystems.len();
        if n == 0 {
            return Err(Error::InvalidTopology("no subsystems".into()));
        }
        for (k, s) in subsystems.iter().enumerate() {
            if s.id != k {
                return Err(Error::InvalidTopology(format!(
                    "subsystem ids must be contiguous from 0; position {k} has id {}",
                    s.id
                )));
            }
            if s.state_dim == 0 {
                return Err(Error::InvalidTopology(format!(
                    "subsystem {k} has zero state dimension"
                )));
            }
        }
        let check = |e: &(usize, usize), kind: &str| -> Result<()> {
            if e.0 >= n || e.1 >= n {
                return Err(Error::InvalidTopology(format!(
                    "{kind} edge ({}, {}) references a subsystem outside 0..{n}",
                    e.0, e.1
                )));
            }
            Ok(())
        };

        let mut dyn_neighbors: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for e in dyn_edges {
            check(e, "dynamics")?;
            dyn_neighbors[e.1].insert(e.0);
        }
        let mut comm_out: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        let mut comm_in: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for e in comm_edges {
            check(e, "communication")?;
            comm_out[e.0].insert(e.1);
            comm_in[e.1].insert(e.0);
        }

        let mut state_offsets = Vec::with_capacity(n + 1);
        let mut input_offsets = Vec::with_capacity(n + 1);
        let (mut so, mut io) = (0, 0);
        for s in &subsystems {
            state_offsets.push(so);
            input_offsets.push(io);
            so += s.state_dim;
            io += s.input_dim;
        }
        state_offsets.push(so);
        input_offsets.push(io);

        Ok(Self {
            subsystems,
            dyn_neighbors,
            comm_out,
            comm_in,
            state_offsets,
            input_offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn subsystems(&self) -> &[SubsystemSpec] {
        &self.subsystems
    }

    pub fn state_dim(&self, i: usize) -> usize {
        self.subsystems[i].state_dim
    }

    pub fn input_dim(&self, i: usize) -> usize {
        self.subsystems[i].input_dim
    }

    /// Global state dimension `n_x`.
    pub fn n_x(&self) -> usize {
        self.state_offsets[self.len()]
    }

    /// Global input dimension `n_u`.
    pub fn n_u(&self) -> usize {
        self.input_offsets[self.len()]
    }

    /// `N(i)`, always containing `i`.
    pub fn dyn_neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.dyn_neighbors[i]
    }

    /// Subsystems that `j` sends to directly (including itself).
    pub fn comm_out(&self, j: usize) -> &BTreeSet<usize> {
        &self.comm_out[j]
    }

    /// Subsystems that send directly to `i` (including itself).
    pub fn comm_in(&self, i: usize) -> &BTreeSet<usize> {
        &self.comm_in[i]
    }

    /// Global positions of the state entries of subsystem `i`.
    pub fn state_range(&self, i: usize) -> std::ops::Range<usize> {
        self.state_offsets[i]..self.state_offsets[i + 1]
    }

    /// Global positions of the input entries of subsystem `i`.
    pub fn input_range(&self, i: usize) -> std::ops::Range<usize> {
        self.input_offsets[i]..self.input_offsets[i + 1]
    }

    /// Subsystem owning global state position `p`.
    pub fn state_owner(&self, p: usize) -> usize {
        debug_assert!(p < self.n_x());
        self.state_offsets.partition_point(|&o| o <= p) - 1
    }

    /// Subsystem owning global input position `p`.
    pub fn input_owner(&self, p: usize) -> usize {
        debug_assert!(p < self.n_u());
        // partition over offsets of non-empty ranges only
        (0..self.len())
            .find(|&i| self.input_range(i).contains(&p))
            .expect("input position out of range")
    }

    /// All `(from, to)` dynamics edges excluding self-loops.
    pub fn dyn_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, set) in self.dyn_neighbors.iter().enumerate() {
            for &j in set {
                if j != i {
                    out.push((j, i));
                }
            }
        }
        out
    }

    /// All `(from, to)` communication edges excluding self-loops.
    pub fn comm_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (j, set) in self.comm_out.iter().enumerate() {
            for &i in set {
                if i != j {
                    out.push((j, i));
                }
            }
        }
        out
    }
}

/// Binary `N×N` support matrix; entry `(i, j)` set means `i` hears from `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl SupportMatrix {
    pub fn identity(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        Self { n, bits }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.n + j] = true;
    }

    /// Row indices `i` with entry `(i, j)` set.
    pub fn column_support(&self, j: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.get(i, j)).collect()
    }

    /// Max column count (induced 1-norm of the 0/1 matrix).
    pub fn norm_1(&self) -> usize {
        (0..self.n).map(|j| (0..self.n).filter(|&i| self.get(i, j)).count()).max().unwrap_or(0)
    }

    /// Max row count (induced ∞-norm of the 0/1 matrix).
    pub fn norm_inf(&self) -> usize {
        (0..self.n).map(|i| (0..self.n).filter(|&j| self.get(i, j)).count()).max().unwrap_or(0)
    }
}

/// Support of `C^k`: entry `(i, j)` is set iff `j` reaches `i` in at most `k`
/// communication hops. Computed with depth-limited BFS frontiers.
pub fn comm_matrix_power(topology: &NetworkTopology, k: usize) -> SupportMatrix {
    let n = topology.len();
    let mut m = SupportMatrix::identity(n);
    for j in 0..n {
        let mut seen = vec![false; n];
        seen[j] = true;
        let mut frontier = vec![j];
        for _ in 0..k {
            let mut next = Vec::new();
            for &v in &frontier {
                for &w in topology.comm_out(v) {
                    if !seen[w] {
                        seen[w] = true;
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        for (i, &s) in seen.iter().enumerate() {
            if s {
                m.set(i, j);
            }
        }
    }
    m
}

/// Communication delays `d(j→i)`; `None` marks unreachable pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayTable {
    n: usize,
    /// Row-major by source: `d[j * n + i] = d(j→i)`.
    d: Vec<Option<usize>>,
}

impl DelayTable {
    pub fn size(&self) -> usize {
        self.n
    }

    /// `d(from→to)`.
    pub fn delay(&self, from: usize, to: usize) -> Option<usize> {
        self.d[from * self.n + to]
    }

    /// Largest finite delay in the table.
    pub fn max_finite(&self) -> usize {
        self.d.iter().flatten().copied().max().unwrap_or(0)
    }
}

pub fn compute_delay_table(topology: &NetworkTopology) -> DelayTable {
    let n = topology.len();
    let mut d = vec![None; n * n];
    for src in 0..n {
        let mut queue = VecDeque::from([src]);
        d[src * n + src] = Some(0);
        while let Some(v) = queue.pop_front() {
            let dv = d[src * n + v].unwrap();
            for &w in topology.comm_out(v) {
                if d[src * n + w].is_none() {
                    d[src * n + w] = Some(dv + 1);
                    queue.push_back(w);
                }
            }
        }
    }
    DelayTable { n, d }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub dbar: usize,
    pub d_in: Vec<BTreeSet<usize>>,
    pub d_out: Vec<BTreeSet<usize>>,
    pub m: Vec<BTreeSet<usize>>,
    /// Largest total state dimension over any `d̄`-neighborhood.
    pub nbar: usize,
}

impl NeighborSets {
    /// Union of `d_in(i)`, `d_out(i)` and `M(i)`.
    pub fn all(&self, i: usize) -> BTreeSet<usize> {
        let mut s = self.d_in[i].clone();
        s.extend(self.d_out[i].iter().copied());
        s.extend(self.m[i].iter().copied());
        s
    }
}

pub fn compute_neighbor_sets(
    topology: &NetworkTopology,
    delay: &DelayTable,
    dbar: usize,
) -> Result<NeighborSets> {
    if dbar == 0 {
        return Err(Error::InvalidTopology("locality radius d̄ must be at least 1".into()));
    }
    let n = topology.len();
    let within = |from: usize, to: usize| matches!(delay.delay(from, to), Some(d) if d <= dbar);
    let d_in: Vec<BTreeSet<usize>> = (0..n).map(|i| (0..n).filter(|&j| within(j, i)).collect()).collect();
    let d_out: Vec<BTreeSet<usize>> = (0..n).map(|i| (0..n).filter(|&j| within(i, j)).collect()).collect();
    let m: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&l| topology.dyn_neighbors(l).iter().any(|j| d_out[i].contains(j)))
                .collect()
        })
        .collect();

    let dim_sum = |s: &BTreeSet<usize>| s.iter().map(|&j| topology.state_dim(j)).sum::<usize>();
    let nbar = (0..n)
        .map(|i| dim_sum(&d_in[i]).max(dim_sum(&d_out[i])).max(dim_sum(&m[i])))
        .max()
        .unwrap_or(0);

    Ok(NeighborSets {
        dbar,
        d_in,
        d_out,
        m,
        nbar,
    })
}

/// Pairs `(i, j)` with `j ∈ N(i)` but no communication edge `j → i`.
pub fn validate_assumption_comm(topology: &NetworkTopology) -> Vec<(usize, usize)> {
    let mut violations = Vec::new();
    for i in 0..topology.len() {
        for &j in topology.dyn_neighbors(i) {
            if !topology.comm_in(i).contains(&j) {
                violations.push((i, j));
            }
        }
    }
    violations
}
