//! Monte Carlo Steiner point `St(K) = d · E_v[v · h_K(v)]`.
//!
//! Directions are the ± columns of random orthogonal frames restricted to the
//! free (positive-width) box coordinates, so `d` is the free dimension.
//! Antithetic frames make the estimate exact for centrally symmetric bodies and
//! for points, and keep the estimator monotone under nesting: the total
//! movement over any nested sequence is at most `(d/2)·diam` before projection.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{Polytope, FEAS_TOL};
use crate::error::{Error, Result};

/// Number of contiguous segments evaluated independently (fixed, so results do
/// not depend on the thread count).
const SEGMENTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    dim: usize,
    free: Vec<usize>,
    /// Ambient-dimension unit vectors, zero on fixed coordinates, in tour order.
    dirs: Vec<Vec<f64>>,
}

impl DirectionSet {
    /// About `samples` directions (rounded up to whole antithetic frames).
    pub fn new(dim: usize, free: Vec<usize>, samples: usize, seed: u64) -> Self {
        let f = free.len();
        if f == 0 || samples == 0 {
            return Self { dim, free, dirs: Vec::new() };
        }
        let frames = samples.div_ceil(2 * f).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw: Vec<Vec<f64>> = Vec::with_capacity(2 * f * frames);
        for _ in 0..frames {
            let g = DMatrix::<f64>::from_fn(f, f, |_, _| StandardNormal.sample(&mut rng));
            let q = g.qr().q();
            for c in 0..f {
                for sign in [1.0, -1.0] {
                    let mut v = vec![0.0; dim];
                    for (r, &k) in free.iter().enumerate() {
                        v[k] = sign * q[(r, c)];
                    }
                    raw.push(v);
                }
            }
        }
        let dirs = greedy_tour(raw);
        Self { dim, free, dirs }
    }

    /// The default set for a polytope: `64·d` samples over its free coordinates.
    pub fn for_polytope(p: &Polytope, samples: Option<usize>, seed: u64) -> Self {
        let free = p.free_coords();
        let m = samples.unwrap_or(64 * free.len());
        Self::new(p.dim(), free, m, seed)
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn free_dim(&self) -> usize {
        self.free.len()
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.dirs
    }
}

/// Reorders directions so consecutive ones are close, which keeps warm-started
/// support queries short.
fn greedy_tour(mut pool: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(pool.len());
    if pool.is_empty() {
        return out;
    }
    let mut cur = pool.swap_remove(0);
    while !pool.is_empty() {
        let (idx, _) = pool
            .iter()
            .enumerate()
            .map(|(k, v)| (k, v.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |best, (k, s)| if s > best.1 { (k, s) } else { best });
        let next = pool.swap_remove(idx);
        out.push(std::mem::replace(&mut cur, next));
    }
    out.push(cur);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteinerEstimate {
    /// Selected point, always a member of the polytope.
    pub point: Vec<f64>,
    /// Raw Monte Carlo estimate before any projection.
    pub raw: Vec<f64>,
    pub projected: bool,
}

pub fn steiner_point(p: &Polytope, dirs: &DirectionSet) -> Result<SteinerEstimate> {
    if dirs.dim != p.dim() {
        return Err(Error::DimensionMismatch {
            what: "steiner directions",
            expected: p.dim(),
            got: dirs.dim,
        });
    }
    let d = p.dim();
    let mut raw = vec![0.0; d];
    if !dirs.is_empty() {
        let seg = dirs.dirs.len().div_ceil(SEGMENTS);
        let partials: Vec<Result<Vec<f64>>> = dirs
            .dirs
            .par_chunks(seg)
            .map(|chunk| {
                let mut w = p.walker();
                let mut acc = vec![0.0; d];
                for v in chunk {
                    let h = w.support(v)?;
                    for k in 0..d {
                        acc[k] += v[k] * h;
                    }
                }
                Ok(acc)
            })
            .collect();
        let scale = dirs.free.len() as f64 / dirs.dirs.len() as f64;
        for part in partials {
            let part = part?;
            for k in 0..d {
                raw[k] += part[k];
            }
        }
        for v in raw.iter_mut() {
            *v *= scale;
        }
    }
    // fixed coordinates carry no direction mass; pin them to their box value
    let fixed: Vec<bool> = (0..d).map(|k| !dirs.free.contains(&k)).collect();
    for k in 0..d {
        if fixed[k] {
            raw[k] = p.lo()[k];
        }
    }
    if p.contains(&raw, FEAS_TOL * 1e-3) {
        return Ok(SteinerEstimate {
            point: raw.clone(),
            raw,
            projected: false,
        });
    }
    let proj = p.project_onto(&raw)?;
    Ok(SteinerEstimate {
        point: proj.point,
        raw,
        projected: true,
    })
}

/// Convenience wrapper drawing a fresh direction set.
pub fn steiner_point_seeded(p: &Polytope, samples: usize, seed: u64) -> Result<SteinerEstimate> {
    steiner_point(p, &DirectionSet::for_polytope(p, Some(samples), seed))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_polytope, unit_box};
    use super::super::Halfspace;
    use super::*;

    #[test]
    fn box_center_exact() {
        let p = Polytope::from_box(vec![-1.0, 0.0, 2.0], vec![3.0, 1.0, 2.5]).unwrap();
        let s = steiner_point_seeded(&p, 192, 7).unwrap();
        let c = [1.0, 0.5, 2.25];
        for k in 0..3 {
            assert!((s.point[k] - c[k]).abs() < 1e-12, "{:?}", s.point);
        }
    }

    #[test]
    fn singleton_exact() {
        let p = Polytope::from_box(vec![0.3, -1.2], vec![0.3, -1.2]).unwrap();
        let s = steiner_point_seeded(&p, 64, 1).unwrap();
        assert_eq!(s.point, vec![0.3, -1.2]);
    }

    /// Steiner point of the simplex by dense quadrature of `2·E[v h(v)]`
    /// over the circle, using the closed-form support function.
    fn simplex_quadrature(n: usize) -> [f64; 2] {
        let mut acc = [0.0; 2];
        for k in 0..n {
            let a = (k as f64 + 0.5) / n as f64 * std::f64::consts::TAU;
            let v = [a.cos(), a.sin()];
            let h = 0.0f64.max(v[0]).max(v[1]);
            acc[0] += v[0] * h;
            acc[1] += v[1] * h;
        }
        [2.0 * acc[0] / n as f64, 2.0 * acc[1] / n as f64]
    }

    #[test]
    fn simplex_matches_quadrature() {
        let oracle = simplex_quadrature(1_000_000);
        assert!((oracle[0] - oracle[1]).abs() < 1e-9);
        let p = Polytope::new(
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![Halfspace::new(vec![1.0, 1.0], 1.0).unwrap()],
        )
        .unwrap();
        let samples = 20_000;
        let s = steiner_point_seeded(&p, samples, 3).unwrap();
        let tol = 3.0 * 2f64.sqrt() / (samples as f64).sqrt();
        assert!((s.point[0] - oracle[0]).abs() < tol && (s.point[1] - oracle[1]).abs() < tol, "{:?} vs {:?}", s.point, oracle);
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(2);
        let p = random_polytope(4, 10, &mut rng);
        let a = steiner_point_seeded(&p, 256, 9).unwrap();
        let b = steiner_point_seeded(&p, 256, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_lies_in_polytope() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(4);
        for d in 2..6 {
            let p = random_polytope(d, 5 * d, &mut rng);
            let s = steiner_point_seeded(&p, 64 * d, d as u64).unwrap();
            assert!(p.contains(&s.point, 1e-9));
        }
        let s = steiner_point_seeded(&unit_box(3), 16, 0).unwrap();
        assert!(unit_box(3).contains(&s.point, 0.0));
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(8);
        let p = random_polytope(3, 8, &mut rng);
        let c = [0.7, -2.0, 5.0];
        let shifted = Polytope::new(
            p.lo().iter().zip(&c).map(|(a, b)| a + b).collect(),
            p.hi().iter().zip(&c).map(|(a, b)| a + b).collect(),
            p.halfspaces()
                .iter()
                .map(|h| Halfspace::new(h.normal.clone(), h.offset + h.normal.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()).unwrap())
                .collect(),
        )
        .unwrap();
        let a = steiner_point_seeded(&p, 192, 5).unwrap();
        let b = steiner_point_seeded(&shifted, 192, 5).unwrap();
        for k in 0..3 {
            assert!((a.raw[k] + c[k] - b.raw[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn directions_are_unit_and_antithetic() {
        let ds = DirectionSet::new(5, vec![0, 2, 4], 30, 1);
        assert_eq!(ds.len(), 30);
        let mut sum = [0.0; 5];
        for v in ds.directions() {
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert_eq!(v[1], 0.0);
            for k in 0..5 {
                sum[k] += v[k];
            }
        }
        assert!(sum.iter().all(|s| s.abs() < 1e-12));
    }
}
