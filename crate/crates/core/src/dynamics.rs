//! Parameterized model family `A(Θ)`, `B(Θ)` and the true-system step.
//!
//! Layout of `θ^i`: the `A^{ij}` blocks for `j ∈ N(i)` in ascending `j`, then
//! the `B^{ij}` blocks in the same order; every block row-major.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::NetworkTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalParams {
    pub owner: usize,
    pub entries: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBound(pub f64);

impl DisturbanceBound {
    pub fn new(w: f64) -> Result<Self> {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Scenario(format!("disturbance bound must be finite and ≥ 0, got {w}")));
        }
        Ok(Self(w))
    }
}

/// Location of one entry of `θ^i` inside the global `(A, B)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    A { row: usize, col: usize },
    B { row: usize, col: usize },
}

/// `|θ^i| = Σ_{j∈N(i)} n_i (n_j + m_j)`.
pub fn param_len(topology: &NetworkTopology, i: usize) -> usize {
    let ni = topology.state_dim(i);
    topology
        .dyn_neighbors(i)
        .iter()
        .map(|&j| ni * (topology.state_dim(j) + topology.input_dim(j)))
        .sum()
}

/// Global `(A, B)` slot of every entry of `θ^i`, in canonical order.
pub fn param_slots(topology: &NetworkTopology, i: usize) -> Vec<ParamSlot> {
    let rows = topology.state_range(i);
    let mut slots = Vec::with_capacity(param_len(topology, i));
    for &j in topology.dyn_neighbors(i) {
        let cols = topology.state_range(j);
        for r in rows.clone() {
            for c in cols.clone() {
                slots.push(ParamSlot::A { row: r, col: c });
            }
        }
    }
    for &j in topology.dyn_neighbors(i) {
        let cols = topology.input_range(j);
        for r in rows.clone() {
            for c in cols.clone() {
                slots.push(ParamSlot::B { row: r, col: c });
            }
        }
    }
    slots
}

/// Writes block row `i` of `(a, b)` from `θ^i`, leaving other rows untouched.
pub fn write_block_row(
    topology: &NetworkTopology,
    i: usize,
    theta: &[f64],
    a: &mut DMatrix<f64>,
    b: &mut DMatrix<f64>,
) -> Result<()> {
    let expected = param_len(topology, i);
    if theta.len() != expected {
        return Err(Error::ParameterShape {
            owner: i,
            expected,
            got: theta.len(),
        });
    }
    for (slot, &v) in param_slots(topology, i).iter().zip(theta) {
        match *slot {
            ParamSlot::A { row, col } => a[(row, col)] = v,
            ParamSlot::B { row, col } => b[(row, col)] = v,
        }
    }
    Ok(())
}

/// Reads `θ^i` back out of block row `i`.
pub fn read_block_row(topology: &NetworkTopology, i: usize, dynamics: &GlobalDynamics) -> Vec<f64> {
    param_slots(topology, i)
        .into_iter()
        .map(|slot| match slot {
            ParamSlot::A { row, col } => dynamics.a[(row, col)],
            ParamSlot::B { row, col } => dynamics.b[(row, col)],
        })
        .collect()
}

pub fn assemble_global(topology: &NetworkTopology, params: &[LocalParams]) -> Result<GlobalDynamics> {
    if params.len() != topology.len() {
        return Err(Error::DimensionMismatch {
            what: "local parameter count",
            expected: topology.len(),
            got: params.len(),
        });
    }
    let mut a = DMatrix::zeros(topology.n_x(), topology.n_x());
    let mut b = DMatrix::zeros(topology.n_x(), topology.n_u());
    for p in params {
        if p.owner >= topology.len() {
            return Err(Error::InvalidTopology(format!("parameter owner {} out of range", p.owner)));
        }
        write_block_row(topology, p.owner, &p.entries, &mut a, &mut b)?;
    }
    Ok(GlobalDynamics { a, b })
}

/// Like [`assemble_global`] but from bare parameter vectors indexed by owner.
pub fn assemble_from_thetas(topology: &NetworkTopology, thetas: &[Vec<f64>]) -> Result<GlobalDynamics> {
    let params: Vec<LocalParams> = thetas
        .iter()
        .enumerate()
        .map(|(owner, e)| LocalParams {
            owner,
            entries: e.clone(),
        })
        .collect();
    assemble_global(topology, &params)
}

/// `A x + B u + w`.
pub fn step_truth(
    dynamics: &GlobalDynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let nx = dynamics.a.nrows();
    let nu = dynamics.b.ncols();
    if x.len() != nx {
        return Err(Error::DimensionMismatch { what: "state", expected: nx, got: x.len() });
    }
    if u.len() != nu {
        return Err(Error::DimensionMismatch { what: "input", expected: nu, got: u.len() });
    }
    if w.len() != nx {
        return Err(Error::DimensionMismatch { what: "disturbance", expected: nx, got: w.len() });
    }
    Ok(&dynamics.a * x + &dynamics.b * u + w)
}

/// Previous-step states and inputs of the members of `N(i)`, keyed by subsystem.
pub type NeighborSnapshot = BTreeMap<usize, (Vec<f64>, Vec<f64>)>;

/// Extracts the `N(i)` snapshot from global vectors.
pub fn snapshot_from_global(
    topology: &NetworkTopology,
    i: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> NeighborSnapshot {
    topology
        .dyn_neighbors(i)
        .iter()
        .map(|&j| {
            let xs = x.as_slice()[topology.state_range(j)].to_vec();
            let us = u.as_slice()[topology.input_range(j)].to_vec();
            (j, (xs, us))
        })
        .collect()
}

/// Regressor `Z^i` with `x^i(t) = Z^i θ^i + w^i(t−1)`.
pub fn local_regressor(topology: &NetworkTopology, i: usize, prev: &NeighborSnapshot) -> Result<DMatrix<f64>> {
    let ni = topology.state_dim(i);
    let mut z = DMatrix::zeros(ni, param_len(topology, i));
    let mut col = 0;
    let lookup = |j: usize| {
        prev.get(&j)
            .ok_or_else(|| Error::MissingData(format!("state/input of subsystem {j} needed by regressor of {i}")))
    };
    for &j in topology.dyn_neighbors(i) {
        let (xj, _) = lookup(j)?;
        if xj.len() != topology.state_dim(j) {
            return Err(Error::DimensionMismatch {
                what: "neighbor state",
                expected: topology.state_dim(j),
                got: xj.len(),
            });
        }
        for r in 0..ni {
            for (c, &v) in xj.iter().enumerate() {
                z[(r, col + r * xj.len() + c)] = v;
            }
        }
        col += ni * xj.len();
    }
    for &j in topology.dyn_neighbors(i) {
        let (_, uj) = lookup(j)?;
        if uj.len() != topology.input_dim(j) {
            return Err(Error::DimensionMismatch {
                what: "neighbor input",
                expected: topology.input_dim(j),
                got: uj.len(),
            });
        }
        for r in 0..ni {
            for (c, &v) in uj.iter().enumerate() {
                z[(r, col + r * uj.len() + c)] = v;
            }
        }
        col += ni * uj.len();
    }
    Ok(z)
}

/// Frobenius norms `(‖A‖_F, ‖B‖_F)`.
pub fn frobenius_norms(dynamics: &GlobalDynamics) -> (f64, f64) {
    (dynamics.a.norm(), dynamics.b.norm())
}
