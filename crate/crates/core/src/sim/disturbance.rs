//! Disturbance generators, all bounded by `W_true` in the ∞-norm.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::DisturbancePolicy;

#[derive(Debug, Clone)]
pub struct DisturbanceGenerator {
    policy: DisturbancePolicy,
    w: f64,
    t_stop: Option<usize>,
    direction: Option<DVector<f64>>,
    rng: ChaCha8Rng,
}

impl DisturbanceGenerator {
    pub fn new(policy: DisturbancePolicy, w: f64, t_stop: Option<usize>, a_true: &DMatrix<f64>, seed: u64) -> Self {
        let direction = match &policy {
            DisturbancePolicy::SignAdversary { direction: Some(v) } => Some(DVector::from_column_slice(v)),
            DisturbancePolicy::SignAdversary { direction: None } => Some(dominant_left_direction(a_true)),
            _ => None,
        };
        Self { policy, w, t_stop, direction, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn direction(&self) -> Option<&DVector<f64>> {
        self.direction.as_ref()
    }

    /// `w(t)` given the current state.
    pub fn sample(&mut self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        match &self.policy {
            DisturbancePolicy::Zero => DVector::zeros(n),
            DisturbancePolicy::ImpulseThenZero if self.t_stop.is_some_and(|s| t >= s) => DVector::zeros(n),
            DisturbancePolicy::Uniform | DisturbancePolicy::ImpulseThenZero => {
                if self.w == 0.0 {
                    return DVector::zeros(n);
                }
                let w = self.w;
                DVector::from_fn(n, |_, _| self.rng.gen_range(-w..=w))
            }
            DisturbancePolicy::SignAdversary { .. } => {
                let v = self.direction.as_ref().expect("adversary direction");
                let s = sign(v.dot(x));
                v.map(|vk| self.w * s * sign(vk))
            }
        }
    }
}

/// `+1` for zero, so the adversary always saturates the bound.
fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Power iteration on `Aᵀ`: the projection `vᵀx` tracks the dominant mode.
pub fn dominant_left_direction(a: &DMatrix<f64>) -> DVector<f64> {
    let n = a.nrows();
    let at = a.transpose();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..500 {
        let next = &at * &v;
        let norm = next.norm();
        if norm < 1e-300 {
            break;
        }
        v = next / norm;
    }
    v
}
