//! Append-only record of one episode.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::controller::ColumnSet;
use crate::dynamics::{assemble_from_thetas, GlobalDynamics};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    /// `x(t)` left the divergence threshold.
    Diverged { t: usize },
}

#[derive(Debug, Clone)]
pub struct TraceLog {
    pub scenario: Arc<Scenario>,
    /// `x(0..)`; one longer than `u` only when the run diverged.
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub what: Vec<DVector<f64>>,
    /// `θ^i_t`, indexed `[t][i]`; empty for runs without parameter selection.
    pub theta: Vec<Vec<Arc<Vec<f64>>>>,
    /// Columns in force at `t`, indexed `[t][i]`.
    pub columns: Vec<Vec<ColumnSet>>,
    pub prior_theta: Vec<Arc<Vec<f64>>>,
    pub prior_columns: Vec<ColumnSet>,
    /// Per subsystem, `‖θ^i_t − θ^i_{t−1}‖₂` for every step.
    pub movement: Vec<Vec<f64>>,
    pub initial_diameter: Vec<f64>,
    pub status: RunStatus,
    /// Phase switch of the identification baseline.
    pub switch_time: Option<usize>,
}

impl TraceLog {
    pub fn empty(scenario: Arc<Scenario>) -> Self {
        Self {
            scenario,
            x: Vec::new(),
            u: Vec::new(),
            w: Vec::new(),
            what: Vec::new(),
            theta: Vec::new(),
            columns: Vec::new(),
            prior_theta: Vec::new(),
            prior_columns: Vec::new(),
            movement: Vec::new(),
            initial_diameter: Vec::new(),
            status: RunStatus::Completed,
            switch_time: None,
        }
    }

    /// Ticks at which the controller acted.
    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn has_columns(&self) -> bool {
        !self.columns.is_empty()
    }

    /// Column set of `j` stamped `stamp`; the prior for negative stamps.
    pub fn columns_at(&self, j: usize, stamp: isize) -> Option<ColumnSet> {
        if stamp < 0 {
            return self.prior_columns.get(j).cloned();
        }
        self.columns.get(stamp as usize).and_then(|c| c.get(j)).cloned()
    }

    /// `(A(Θ_t), B(Θ_t))` from the selections at `t`.
    pub fn selected_dynamics(&self, t: usize) -> Result<GlobalDynamics> {
        let thetas: Vec<Vec<f64>> = self.theta[t].iter().map(|v| v.as_ref().clone()).collect();
        assemble_from_thetas(&self.scenario.topology, &thetas)
    }

    pub fn sup_x(&self) -> f64 {
        self.x.iter().map(|v| v.amax()).fold(0.0, f64::max)
    }

    pub fn sup_u(&self) -> f64 {
        self.u.iter().map(|v| v.amax()).fold(0.0, f64::max)
    }

    pub fn path_lengths(&self) -> Vec<f64> {
        self.movement.iter().map(|m| m.iter().fold(0.0, |s, v| s + v)).collect()
    }
}
