//! Local closed-loop column synthesis as an equality-constrained least-squares
//! problem, plus controllability grammians, sensitivity constants and an
//! FIR feasibility probe.
//!
//! Column `p` (a global state index owned by subsystem `i`) solves
//!
//! ```text
//! min  Σ_k φx[k]ᵀ Q φx[k] + φu[k]ᵀ R φu[k]
//! s.t. φx[k+1] = A φx[k] + B φu[k],  φx[0] = e_p,  φx[H] = 0,
//!      supp φx[k], φu[k] ⊆ {ℓ : d(i→ℓ) ≤ min(k, d̄)}
//! ```
//!
//! Masked-out entries are never created as variables. With diagonal weights
//! `D` the substitution `y = D^{1/2} z` turns the problem into a min-norm
//! solve, done with an SVD of the scaled constraint matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::write_block_row;
use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::topology::{DelayTable, NeighborSets, NetworkTopology};

/// Relative singular-value cutoff for the constraint rank.
const RANK_TOL: f64 = 1e-10;
/// Relative equality residual above which a column is declared infeasible.
const FEAS_RESIDUAL: f64 = 1e-8;

/// Golden ratio, from the pseudo-inverse perturbation bound.
const GOLDEN: f64 = 1.618_033_988_749_895;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    pub owner: usize,
    pub horizon: usize,
    /// Allowed subsystems per step `k = 0..=H`.
    pub subsystems: Vec<BTreeSet<usize>>,
    /// Allowed global state indices per step.
    pub states: Vec<Vec<usize>>,
    /// Allowed global input indices per step.
    pub inputs: Vec<Vec<usize>>,
}

impl SparsityMask {
    /// No locality constraint: every index allowed at every `k ≥ 1`.
    pub fn dense(topology: &NetworkTopology, owner: usize, horizon: usize) -> Self {
        let all: BTreeSet<usize> = (0..topology.len()).collect();
        let own: BTreeSet<usize> = [owner].into();
        let subsystems = (0..=horizon).map(|k| if k == 0 { own.clone() } else { all.clone() }).collect();
        Self::expand(topology, owner, horizon, subsystems)
    }

    fn expand(topology: &NetworkTopology, owner: usize, horizon: usize, subsystems: Vec<BTreeSet<usize>>) -> Self {
        let states = subsystems
            .iter()
            .map(|s| s.iter().flat_map(|&l| topology.state_range(l)).collect())
            .collect();
        let inputs = subsystems
            .iter()
            .map(|s| s.iter().flat_map(|&l| topology.input_range(l)).collect())
            .collect();
        Self {
            owner,
            horizon,
            subsystems,
            states,
            inputs,
        }
    }

    pub fn allows_state(&self, k: usize, idx: usize) -> bool {
        self.states[k].binary_search(&idx).is_ok()
    }

    pub fn allows_input(&self, k: usize, idx: usize) -> bool {
        self.inputs[k].binary_search(&idx).is_ok()
    }
}

/// Step-`k` mask: subsystems `ℓ` with `d(i→ℓ) ≤ min(k, d̄)`.
pub fn build_sparsity_masks(
    topology: &NetworkTopology,
    delay: &DelayTable,
    dbar: usize,
    owner: usize,
    horizon: usize,
) -> Result<SparsityMask> {
    if horizon == 0 {
        return Err(Error::Scenario("FIR horizon must be at least 1".into()));
    }
    let subsystems = (0..=horizon)
        .map(|k| {
            let r = k.min(dbar);
            (0..topology.len())
                .filter(|&l| matches!(delay.delay(owner, l), Some(d) if d <= r))
                .collect()
        })
        .collect();
    Ok(SparsityMask::expand(topology, owner, horizon, subsystems))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// Diagonal of `Q` (state weight), length `n_x`.
    pub q: Vec<f64>,
    /// Diagonal of `R` (input weight), length `n_u`.
    pub r: Vec<f64>,
}

impl Weights {
    pub fn identity(n_x: usize, n_u: usize) -> Self {
        Self {
            q: vec![1.0; n_x],
            r: vec![1.0; n_u],
        }
    }

    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        if self.q.len() != n_x {
            return Err(Error::DimensionMismatch { what: "state weight", expected: n_x, got: self.q.len() });
        }
        if self.r.len() != n_u {
            return Err(Error::DimensionMismatch { what: "input weight", expected: n_u, got: self.r.len() });
        }
        if self.q.iter().chain(&self.r).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Scenario("weights must be positive and finite".into()));
        }
        Ok(())
    }

    /// `κ_CD` with `C = Q^{1/2}`, `D = R^{1/2}`.
    pub fn kappa(&self) -> f64 {
        let it = self.q.iter().chain(&self.r).map(|v| v.sqrt());
        let (lo, hi) = it.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi / lo
    }
}

/// Global-size model estimate; rows outside the assembling subsystem's
/// `M(i)` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub stamp: u64,
}

impl LocalModel {
    pub fn from_global(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in a.iter().chain(b.iter()) {
            v.to_bits().hash(&mut h);
        }
        Self { a, b, stamp: h.finish() }
    }

    /// Places the block rows `θ^ℓ` of every `ℓ` in `thetas`.
    pub fn assemble(topology: &NetworkTopology, thetas: &BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let mut a = DMatrix::zeros(topology.n_x(), topology.n_x());
        let mut b = DMatrix::zeros(topology.n_x(), topology.n_u());
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (&l, theta) in thetas {
            write_block_row(topology, l, theta, &mut a, &mut b)?;
            l.hash(&mut h);
            for v in theta {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(Self { a, b, stamp: h.finish() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopColumn {
    pub owner: usize,
    /// Global state index `p` whose unit injection this column answers.
    pub index: usize,
    pub horizon: usize,
    /// `φx[0..=H]`, global state dimension.
    pub phi_x: Vec<DVector<f64>>,
    /// `φu[0..H]`, global input dimension.
    pub phi_u: Vec<DVector<f64>>,
    pub objective: f64,
    /// Max absolute equality residual of the solve.
    pub residual: f64,
    /// Distance of the scaled solution from the constraint row space.
    pub kkt_residual: f64,
    pub model_stamp: u64,
    pub synthesized_at: usize,
}

impl ClosedLoopColumn {
    /// `‖[φx[k]; φu[k]]‖₂` for `k = 0..=H` (`φu[H] = 0`).
    pub fn step_norms(&self) -> Vec<f64> {
        (0..=self.horizon)
            .map(|k| {
                let sx = self.phi_x[k].norm_squared();
                let su = if k < self.horizon { self.phi_u[k].norm_squared() } else { 0.0 };
                (sx + su).sqrt()
            })
            .collect()
    }

    /// Stacked `[φx[1..H]; φu[0..H]]`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut v = Vec::new();
        for x in &self.phi_x[1..] {
            v.extend(x.iter());
        }
        for u in &self.phi_u {
            v.extend(u.iter());
        }
        DVector::from_vec(v)
    }
}

#[derive(Clone, Copy)]
enum Var {
    X(usize, usize),
    U(usize, usize),
}

/// Synthesizes the column for global state index `p`.
pub fn synthesize_column(
    model: &LocalModel,
    p: usize,
    mask: &SparsityMask,
    weights: &Weights,
) -> Result<ClosedLoopColumn> {
    let (a, b) = (&model.a, &model.b);
    let n_x = a.nrows();
    let n_u = b.ncols();
    let h = mask.horizon;
    if !mask.allows_state(0, p) {
        return Err(Error::DimensionMismatch { what: "column index outside its own mask", expected: mask.owner, got: p });
    }
    if weights.q.len() != n_x || weights.r.len() != n_u {
        weights.validate(n_x, n_u)?;
    }

    let mut vars = Vec::new();
    let mut x_col: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); h + 1];
    let mut u_col: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); h];
    for (k, xk) in x_col.iter_mut().enumerate().take(h).skip(1) {
        for &s in &mask.states[k] {
            xk.insert(s, vars.len());
            vars.push(Var::X(k, s));
        }
    }
    for (k, uk) in u_col.iter_mut().enumerate() {
        for &s in &mask.inputs[k] {
            uk.insert(s, vars.len());
            vars.push(Var::U(k, s));
        }
    }
    let nv = vars.len();

    // rows (k, r): φx[k+1](r) − A(r,:)φx[k] − B(r,:)φu[k] = [k = 0]·A(r,p)
    let mut e_rows: Vec<Vec<f64>> = Vec::new();
    let mut f: Vec<f64> = Vec::new();
    let mut row_ids: Vec<usize> = Vec::new();
    let mut dropped_nonzero = Vec::new();
    for k in 0..h {
        for r in 0..n_x {
            let mut row = vec![0.0; nv];
            if let Some(&c) = x_col[k + 1].get(&r) {
                row[c] += 1.0;
            }
            if k >= 1 {
                for (&s, &c) in &x_col[k] {
                    row[c] -= a[(r, s)];
                }
            }
            for (&s, &c) in &u_col[k] {
                row[c] -= b[(r, s)];
            }
            let rhs = if k == 0 { a[(r, p)] } else { 0.0 };
            if row.iter().all(|&v| v == 0.0) {
                if rhs != 0.0 {
                    dropped_nonzero.push((k * n_x + r, rhs));
                }
                continue;
            }
            e_rows.push(row);
            f.push(rhs);
            row_ids.push(k * n_x + r);
        }
    }

    let dweights: Vec<f64> = vars
        .iter()
        .map(|v| match *v {
            Var::X(_, s) => weights.q[s],
            Var::U(_, s) => weights.r[s],
        })
        .collect();
    let f_norm = f.iter().chain(dropped_nonzero.iter().map(|(_, v)| v)).fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = FEAS_RESIDUAL * f_norm.max(1.0);

    let m = e_rows.len();
    let (z, kkt_residual) = if m == 0 || nv == 0 {
        (vec![0.0; nv], 0.0)
    } else {
        let scaled = DMatrix::from_fn(m, nv, |i, j| e_rows[i][j] / dweights[j].sqrt());
        let svd = scaled.svd(true, true);
        let u = svd.u.as_ref().unwrap();
        let vt = svd.v_t.as_ref().unwrap();
        let smax = svd.singular_values.iter().fold(0.0f64, |acc, v| acc.max(*v));
        let fvec = DVector::from_vec(f.clone());
        let mut y = DVector::zeros(nv);
        let mut kept = Vec::new();
        for (idx, &s) in svd.singular_values.iter().enumerate() {
            if s > RANK_TOL * smax && s > 0.0 {
                let coef = u.column(idx).dot(&fvec) / s;
                y += vt.row(idx).transpose() * coef;
                kept.push(idx);
            }
        }
        // certificate: y must lie in the row space of the scaled constraints
        let mut proj = DVector::zeros(nv);
        for &idx in &kept {
            let v = vt.row(idx).transpose();
            proj += &v * v.dot(&y);
        }
        let kkt = (&y - proj).amax();
        let z: Vec<f64> = y.iter().zip(&dweights).map(|(v, d)| v / d.sqrt()).collect();
        (z, kkt)
    };

    let mut bad = Vec::new();
    let mut residual = 0.0f64;
    for (ri, row) in e_rows.iter().enumerate() {
        let lhs: f64 = row.iter().zip(&z).map(|(c, v)| c * v).sum();
        let res = (lhs - f[ri]).abs();
        residual = residual.max(res);
        if res > tol {
            bad.push(row_ids[ri]);
        }
    }
    for &(id, v) in &dropped_nonzero {
        residual = residual.max(v.abs());
        if v.abs() > tol {
            bad.push(id);
        }
    }
    if !bad.is_empty() {
        bad.sort_unstable();
        return Err(Error::SynthesisInfeasible { column: p, residual, rows: bad });
    }

    let mut phi_x = vec![DVector::zeros(n_x); h + 1];
    let mut phi_u = vec![DVector::zeros(n_u); h];
    phi_x[0][p] = 1.0;
    for (v, val) in vars.iter().zip(&z) {
        match *v {
            Var::X(k, s) => phi_x[k][s] = *val,
            Var::U(k, s) => phi_u[k][s] = *val,
        }
    }
    let objective = weights.q[p] + z.iter().zip(&dweights).map(|(v, d)| d * v * v).sum::<f64>();
    Ok(ClosedLoopColumn {
        owner: mask.owner,
        index: p,
        horizon: h,
        phi_x,
        phi_u,
        objective,
        residual,
        kkt_residual,
        model_stamp: model.stamp,
        synthesized_at: 0,
    })
}

/// All columns of subsystem `i` (one per owned state index), in index order.
pub fn synthesize_subsystem(
    topology: &NetworkTopology,
    model: &LocalModel,
    mask: &SparsityMask,
    weights: &Weights,
) -> Result<Vec<ClosedLoopColumn>> {
    topology
        .state_range(mask.owner)
        .into_par_iter()
        .map(|p| synthesize_column(model, p, mask, weights))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnReport {
    pub recursion_residual: f64,
    pub boundary_residual: f64,
    pub mask_violation: f64,
    pub max_residual: f64,
    pub passed: bool,
}

/// Recomputes recursion, boundary and support residuals of `col` under `(A, B)`.
pub fn verify_column(col: &ClosedLoopColumn, a: &DMatrix<f64>, b: &DMatrix<f64>, mask: Option<&SparsityMask>) -> ColumnReport {
    let h = col.horizon;
    let mut rec = 0.0f64;
    for k in 0..h {
        let r = &col.phi_x[k + 1] - a * &col.phi_x[k] - b * &col.phi_u[k];
        rec = rec.max(r.amax());
    }
    let mut e = DVector::zeros(col.phi_x[0].len());
    e[col.index] = 1.0;
    let boundary = (&col.phi_x[0] - e).amax().max(col.phi_x[h].amax());
    let mut viol = 0.0f64;
    if let Some(m) = mask {
        for k in 0..=h {
            for (s, v) in col.phi_x[k].iter().enumerate() {
                if !m.allows_state(k, s) {
                    viol = viol.max(v.abs());
                }
            }
            if k < h {
                for (s, v) in col.phi_u[k].iter().enumerate() {
                    if !m.allows_input(k, s) {
                        viol = viol.max(v.abs());
                    }
                }
            }
        }
    }
    let max_residual = rec.max(boundary).max(viol);
    ColumnReport {
        recursion_residual: rec,
        boundary_residual: boundary,
        mask_violation: viol,
        max_residual,
        passed: rec <= 1e-8 && boundary <= 1e-8 && viol <= 1e-12,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammianReport {
    pub w_u: DMatrix<f64>,
    pub w_w: DMatrix<f64>,
    /// `max_{0≤k≤H} ‖A^k‖₂`.
    pub alpha_h: f64,
    pub sigma_u_min: f64,
    pub sigma_u_max: f64,
    pub sigma_w_min: f64,
    pub sigma_w_max: f64,
}

/// `W_t = A W_{t−1} Aᵀ + BBᵀ` from `W_0 = 0`, for inputs and for disturbances (`B = I`).
pub fn controllability_grammians(a: &DMatrix<f64>, b: &DMatrix<f64>, h: usize) -> Result<GrammianReport> {
    if h == 0 {
        return Err(Error::Scenario("grammian horizon must be at least 1".into()));
    }
    let n = a.nrows();
    let bbt = b * b.transpose();
    let mut w_u = DMatrix::zeros(n, n);
    let mut w_w = DMatrix::zeros(n, n);
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..h {
        w_u = a * &w_u * a.transpose() + &bbt;
        w_w = a * &w_w * a.transpose() + &eye;
    }
    let mut alpha = 1.0f64;
    let mut pk = eye.clone();
    for _ in 0..h {
        pk = &pk * a;
        alpha = alpha.max(spectral_norm(&pk));
    }
    let (umin, umax) = eig_range(&w_u);
    let (wmin, wmax) = eig_range(&w_w);
    Ok(GrammianReport {
        w_u,
        w_w,
        alpha_h: alpha,
        sigma_u_min: umin,
        sigma_u_max: umax,
        sigma_w_min: wmin,
        sigma_w_max: wmax,
    })
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().fold(0.0f64, |a, v| a.max(*v))
}

fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym).eigenvalues;
    let lo = e.iter().fold(f64::INFINITY, |a, v| a.min(*v)).max(0.0);
    let hi = e.iter().fold(0.0f64, |a, v| a.max(*v));
    (lo, hi)
}

/// Grammian and gain bounds over a family of systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyBounds {
    pub sigma_u_min: f64,
    pub sigma_u_max: f64,
    pub sigma_w_max: f64,
    pub alpha_h: f64,
    /// `max ‖B‖₂`.
    pub beta: f64,
}

impl FamilyBounds {
    /// Envelope of the reports of the listed systems.
    pub fn envelope(systems: &[(&GrammianReport, f64)]) -> Self {
        let mut out = Self {
            sigma_u_min: f64::INFINITY,
            sigma_u_max: 0.0,
            sigma_w_max: 0.0,
            alpha_h: 0.0,
            beta: 0.0,
        };
        for (g, beta) in systems {
            out.sigma_u_min = out.sigma_u_min.min(g.sigma_u_min);
            out.sigma_u_max = out.sigma_u_max.max(g.sigma_u_max);
            out.sigma_w_max = out.sigma_w_max.max(g.sigma_w_max);
            out.alpha_h = out.alpha_h.max(g.alpha_h);
            out.beta = out.beta.max(*beta);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConstants {
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub kappa_cd: f64,
    pub gamma1_prime: f64,
    pub gamma2_prime: f64,
}

/// Lipschitz constants of the optimal column w.r.t. `(A, B)`, assembled from
/// the family-wide bounds on `‖G_u‖, ‖G_w‖, ‖P‖, ‖P⁺‖, ‖F⁺‖, ‖g‖`.
pub fn sensitivity_constants(bounds: &FamilyBounds, weights: &Weights, h: usize) -> Result<SensitivityConstants> {
    if !(bounds.sigma_u_min > 0.0) {
        return Err(Error::NotControllable);
    }
    let hf = h as f64;
    let g_u = (hf * bounds.sigma_u_max).sqrt();
    let g_w = (hf * bounds.sigma_w_max).sqrt();
    let p = bounds.sigma_u_max.sqrt();
    let p_plus = bounds.sigma_u_min.powf(-0.5);
    let c_norm = weights.q.iter().fold(0.0f64, |a, v| a.max(v.sqrt()));
    let d_norm = weights.r.iter().fold(0.0f64, |a, v| a.max(v.sqrt()));
    let d_min = weights.r.iter().fold(f64::INFINITY, |a, v| a.min(v.sqrt()));
    let f_plus = 1.0 / d_min;
    let alpha = bounds.alpha_h;
    let g = (c_norm * g_u + d_norm) * p_plus * alpha;

    let gamma1 = alpha * alpha * hf * (1.0 + g_u) * p_plus;
    let gamma2 = alpha * p_plus * (1.0 + GOLDEN * p_plus + GOLDEN * p_plus * g_u)
        + g * 2.0 * f_plus
        + GOLDEN * g * 2.0 * f_plus * p_plus * p_plus * 2.0 * p * (1.0 + g_u);
    let kappa = weights.kappa();
    Ok(SensitivityConstants {
        gamma_a: kappa * gamma1 + kappa * gamma2 * bounds.beta * g_w * g_w,
        gamma_b: kappa * gamma2 * g_w,
        kappa_cd: kappa,
        gamma1_prime: gamma1,
        gamma2_prime: gamma2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFailure {
    pub trial: usize,
    pub subsystem: usize,
    pub column: usize,
    pub residual: f64,
    pub thetas: Vec<Vec<f64>>,
}

/// `‖φ[k]‖₂ ≤ C ρ^k` over all probed columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub c: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub trials: usize,
    pub passes: usize,
    pub pass_rate: f64,
    pub failures: Vec<ProbeFailure>,
    /// Failure with the largest equality residual.
    pub worst: Option<ProbeFailure>,
    pub decay: Option<DecayFit>,
}

/// Draws a parameter from `p`: a random box corner on even trials ≥ 2, a
/// uniform interior point otherwise, rejected against the halfspaces.
fn sample_from(p: &Polytope, trial: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = (p.lo(), p.hi());
    for _ in 0..1000 {
        let x: Vec<f64> = (0..p.dim())
            .map(|k| match trial {
                0 => lo[k],
                1 => hi[k],
                t if t % 2 == 0 => {
                    if rng.gen_bool(0.5) {
                        lo[k]
                    } else {
                        hi[k]
                    }
                }
                _ => lo[k] + (hi[k] - lo[k]) * rng.gen::<f64>(),
            })
            .collect();
        if p.contains(&x, 1e-12) {
            return x;
        }
    }
    p.vertex_point().to_vec()
}

/// Tries local synthesis for every column on sampled parameters from `P_0`.
pub fn fir_feasibility_probe(
    topology: &NetworkTopology,
    delay: &DelayTable,
    sets: &NeighborSets,
    p0: &[Polytope],
    horizon: usize,
    weights: &Weights,
    trials: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if trials == 0 {
        return Err(Error::Scenario("probe needs at least one trial".into()));
    }
    let masks: Vec<SparsityMask> = (0..topology.len())
        .map(|i| build_sparsity_masks(topology, delay, sets.dbar, i, horizon))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut passes = 0;
    let mut norms: Vec<Vec<f64>> = Vec::new();
    for trial in 0..trials {
        let thetas: Vec<Vec<f64>> = p0.iter().map(|p| sample_from(p, trial, &mut rng)).collect();
        let mut ok = true;
        for i in 0..topology.len() {
            let local: BTreeMap<usize, Vec<f64>> = sets.m[i].iter().map(|&l| (l, thetas[l].clone())).collect();
            let model = LocalModel::assemble(topology, &local)?;
            for p in topology.state_range(i) {
                match synthesize_column(&model, p, &masks[i], weights) {
                    Ok(col) => norms.push(col.step_norms()),
                    Err(Error::SynthesisInfeasible { residual, .. }) => {
                        ok = false;
                        failures.push(ProbeFailure {
                            trial,
                            subsystem: i,
                            column: p,
                            residual,
                            thetas: thetas.clone(),
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if ok {
            passes += 1;
        }
    }
    let worst = failures
        .iter()
        .max_by(|a, b| a.residual.partial_cmp(&b.residual).unwrap_or(std::cmp::Ordering::Equal))
        .cloned();
    Ok(ProbeReport {
        trials,
        passes,
        pass_rate: passes as f64 / trials as f64,
        failures,
        worst,
        decay: fit_decay(&norms),
    })
}

/// Least-squares slope of `log ‖φ[k]‖` against `k`, clipped to `ρ ∈ [0.05, 0.95]`;
/// `C` is then the smallest constant making the bound hold on every sample.
pub fn fit_decay(norms: &[Vec<f64>]) -> Option<DecayFit> {
    let pts: Vec<(f64, f64)> = norms
        .iter()
        .flat_map(|n| n.iter().enumerate().filter(|(_, v)| **v > 1e-14).map(|(k, v)| (k as f64, v.ln())))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let rho = slope.exp().clamp(0.05, 0.95);
    let c = norms
        .iter()
        .flat_map(|n| n.iter().enumerate().map(|(k, v)| v / rho.powi(k as i32)))
        .fold(0.0f64, f64::max);
    Some(DecayFit { c, rho })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::topology::{compute_delay_table, compute_neighbor_sets, SubsystemSpec};

    pub(crate) fn scalar(a: f64, b: f64) -> LocalModel {
        LocalModel::from_global(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b))
    }

    pub(crate) fn single(n: usize, m: usize) -> NetworkTopology {
        NetworkTopology::new(vec![SubsystemSpec { id: 0, state_dim: n, input_dim: m }], &[], &[]).unwrap()
    }

    fn chain(n: usize) -> NetworkTopology {
        let subs = (0..n).map(|id| SubsystemSpec { id, state_dim: 1, input_dim: 1 }).collect();
        let e: Vec<(usize, usize)> = (0..n - 1).flat_map(|k| [(k, k + 1), (k + 1, k)]).collect();
        NetworkTopology::new(subs, &e, &e).unwrap()
    }

    /// Dense reduced problem: states eliminated, terminal constraint kept,
    /// solved through the KKT system with an LU factorization.
    pub(crate) fn reduced_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, p: usize, h: usize, w: &Weights) -> (f64, DVector<f64>) {
        let n = a.nrows();
        let m = b.ncols();
        let nu = h * m;
        // φx[k] = A^k e_p + Σ_{s<k} A^{k−1−s} B φu[s] = c_k + T_k u
        let mut pows = vec![DMatrix::<f64>::identity(n, n)];
        for k in 1..=h {
            pows.push(&pows[k - 1] * a);
        }
        let mut e = DVector::zeros(n);
        e[p] = 1.0;
        let qd = DMatrix::from_diagonal(&DVector::from_vec(w.q.clone()));
        let mut hess = DMatrix::<f64>::zeros(nu, nu);
        let mut grad = DVector::<f64>::zeros(nu);
        let mut cst = 0.0;
        let tmap = |k: usize| {
            let mut t = DMatrix::<f64>::zeros(n, nu);
            for s in 0..k {
                let blk = &pows[k - 1 - s] * b;
                t.view_mut((0, s * m), (n, m)).copy_from(&blk);
            }
            t
        };
        for k in 0..h {
            let t = tmap(k);
            let c = &pows[k] * &e;
            hess += t.transpose() * &qd * &t;
            grad += t.transpose() * &qd * &c;
            cst += (c.transpose() * &qd * &c)[(0, 0)];
        }
        for s in 0..h {
            for j in 0..m {
                hess[(s * m + j, s * m + j)] += w.r[j];
            }
        }
        let tf = tmap(h);
        let cf = &pows[h] * &e;
        let kdim = nu + n;
        let mut kkt = DMatrix::<f64>::zeros(kdim, kdim);
        kkt.view_mut((0, 0), (nu, nu)).copy_from(&hess);
        kkt.view_mut((0, nu), (nu, n)).copy_from(&tf.transpose());
        kkt.view_mut((nu, 0), (n, nu)).copy_from(&tf);
        let mut rhs = DVector::<f64>::zeros(kdim);
        rhs.rows_mut(0, nu).copy_from(&(-&grad));
        rhs.rows_mut(nu, n).copy_from(&(-cf));
        let sol = kkt.lu().solve(&rhs).expect("oracle KKT singular");
        let u = sol.rows(0, nu).into_owned();
        let obj = (u.transpose() * &hess * &u)[(0, 0)] + 2.0 * grad.dot(&u) + cst;
        (obj, u)
    }

    #[test]
    fn scalar_hand_case() {
        let t = single(1, 1);
        let mask = SparsityMask::dense(&t, 0, 2);
        let col = synthesize_column(&scalar(1.0, 1.0), 0, &mask, &Weights::identity(1, 1)).unwrap();
        assert!((col.phi_u[0][0] + 2.0 / 3.0).abs() < 1e-9);
        assert!((col.phi_u[1][0] + 1.0 / 3.0).abs() < 1e-9);
        assert!((col.phi_x[1][0] - 1.0 / 3.0).abs() < 1e-9);
        assert!(col.phi_x[2][0].abs() < 1e-12);
        // 1 + x1² + u0² + u1²
        assert!((col.objective - (1.0 + 1.0 / 9.0 + 4.0 / 9.0 + 1.0 / 9.0)).abs() < 1e-12);
        // grid search over u0 with u1 = −(1 + u0) eliminated
        let best = (0..=200_000)
            .map(|k| -2.0 + 4.0 * k as f64 / 200_000.0)
            .map(|u0| 1.0 + (1.0 + u0).powi(2) + u0 * u0 + (1.0 + u0).powi(2))
            .fold(f64::INFINITY, f64::min);
        assert!((col.objective - best).abs() < 1e-8);
    }

    #[test]
    fn single_step_is_forced() {
        let t = single(1, 1);
        let col = synthesize_column(&scalar(0.5, 1.0), 0, &SparsityMask::dense(&t, 0, 1), &Weights::identity(1, 1)).unwrap();
        assert!((col.phi_u[0][0] + 0.5).abs() < 1e-12);
        assert_eq!(col.phi_x[1][0], 0.0);
    }

    #[test]
    fn uncontrollable_is_infeasible() {
        let t = single(1, 1);
        for h in 1..4 {
            let err = synthesize_column(&scalar(0.7, 0.0), 0, &SparsityMask::dense(&t, 0, h), &Weights::identity(1, 1)).unwrap_err();
            assert!(matches!(err, Error::SynthesisInfeasible { column: 0, .. }), "{err:?}");
        }
    }

    #[test]
    fn matches_reduced_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..50 {
            let n: usize = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=n);
            let h = rng.gen_range(n.div_ceil(m) + 1..=5);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let w = Weights {
                q: (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
                r: (0..m).map(|_| rng.gen_range(0.5..2.0)).collect(),
            };
            let t = single(n, m);
            let p = rng.gen_range(0..n);
            let model = LocalModel::from_global(a.clone(), b.clone());
            let col = synthesize_column(&model, p, &SparsityMask::dense(&t, 0, h), &w).unwrap();
            let (obj, u) = reduced_oracle(&a, &b, p, h, &w);
            assert!((col.objective - obj).abs() <= 1e-8 * obj.abs().max(1.0), "trial {trial}: {} vs {obj}", col.objective);
            for s in 0..h {
                for j in 0..m {
                    assert!((col.phi_u[s][j] - u[s * m + j]).abs() < 1e-6);
                }
            }
            assert!(verify_column(&col, &a, &b, None).passed);
        }
    }

    #[test]
    fn objective_non_increasing_in_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.5..1.5));
            let b = DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0));
            let model = LocalModel::from_global(a, b);
            let t = single(2, 1);
            let mut prev = f64::INFINITY;
            for h in 2..7 {
                let col = synthesize_column(&model, 0, &SparsityMask::dense(&t, 0, h), &Weights::identity(2, 1)).unwrap();
                assert!(col.objective <= prev * (1.0 + 1e-9));
                prev = col.objective;
            }
        }
    }

    #[test]
    fn masks_k0_and_saturation() {
        let t = chain(5);
        let d = compute_delay_table(&t);
        let m = build_sparsity_masks(&t, &d, 1, 2, 3).unwrap();
        assert_eq!(m.subsystems[0], [2].into());
        for k in 1..=3 {
            assert_eq!(m.subsystems[k], [1, 2, 3].into());
        }
        let full = build_sparsity_masks(&t, &d, 10, 0, 6).unwrap();
        assert_eq!(full.subsystems[4], (0..5).collect());
        assert_eq!(full.subsystems[2], [0, 1, 2].into());
        // vector expansion
        let subs = vec![
            SubsystemSpec { id: 0, state_dim: 2, input_dim: 1 },
            SubsystemSpec { id: 1, state_dim: 1, input_dim: 0 },
        ];
        let tv = NetworkTopology::new(subs, &[(0, 1)], &[(0, 1)]).unwrap();
        let mv = build_sparsity_masks(&tv, &compute_delay_table(&tv), 1, 0, 2).unwrap();
        assert_eq!(mv.states[0], vec![0, 1]);
        assert_eq!(mv.states[1], vec![0, 1, 2]);
        assert_eq!(mv.inputs[1], vec![0]);
    }

    #[test]
    fn masked_synthesis_respects_support() {
        let t = chain(5);
        let d = compute_delay_table(&t);
        let sets = compute_neighbor_sets(&t, &d, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let thetas: BTreeMap<usize, Vec<f64>> = sets.m[2]
            .iter()
            .map(|&l| {
                let len = crate::dynamics::param_len(&t, l);
                let mut th: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.2..0.2)).collect();
                // self input gain near one so local deadbeat is reachable
                let nb = t.dyn_neighbors(l).len();
                let pos = t.dyn_neighbors(l).iter().position(|&j| j == l).unwrap();
                th[nb + pos] = 1.0;
                (l, th)
            })
            .collect();
        let model = LocalModel::assemble(&t, &thetas).unwrap();
        let mask = build_sparsity_masks(&t, &d, 1, 2, 3).unwrap();
        let col = synthesize_column(&model, 2, &mask, &Weights::identity(5, 5)).unwrap();
        let rep = verify_column(&col, &model.a, &model.b, Some(&mask));
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.mask_violation, 0.0);
    }

    #[test]
    fn verify_flags_perturbation_and_accepts_deadbeat() {
        let t = single(1, 1);
        let model = scalar(0.0, 1.0);
        let dead = ClosedLoopColumn {
            owner: 0,
            index: 0,
            horizon: 1,
            phi_x: vec![DVector::from_element(1, 1.0), DVector::zeros(1)],
            phi_u: vec![DVector::zeros(1)],
            objective: 1.0,
            residual: 0.0,
            kkt_residual: 0.0,
            model_stamp: 0,
            synthesized_at: 0,
        };
        assert!(verify_column(&dead, &model.a, &model.b, None).passed);
        let mut col = synthesize_column(&scalar(1.0, 1.0), 0, &SparsityMask::dense(&t, 0, 3), &Weights::identity(1, 1)).unwrap();
        col.phi_u[1][0] += 1e-3;
        let rep = verify_column(&col, &DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 1.0), None);
        assert!(!rep.passed);
        assert!((rep.recursion_residual - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn grammian_cases() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let g = controllability_grammians(&DMatrix::zeros(2, 2), &i2, 4).unwrap();
        assert!((g.w_u.clone() - &i2).amax() < 1e-15);
        let g = controllability_grammians(&i2, &i2, 3).unwrap();
        assert!((g.w_u.clone() - &i2 * 3.0).amax() < 1e-15);
        assert_eq!(g.alpha_h, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.4..0.4));
        let b = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let g = controllability_grammians(&a, &b, 5).unwrap();
        let mut direct = DMatrix::zeros(3, 3);
        let mut ak = DMatrix::<f64>::identity(3, 3);
        for _ in 0..5 {
            direct += &ak * &b * b.transpose() * ak.transpose();
            ak = &ak * &a;
        }
        assert!((g.w_u - direct).amax() < 1e-12);
    }

    #[test]
    fn kappa_properties() {
        let w = Weights::identity(3, 2);
        assert_eq!(w.kappa(), 1.0);
        let w = Weights { q: vec![1.0, 4.0], r: vec![9.0] };
        let scaled = Weights { q: w.q.iter().map(|v| v * 7.0).collect(), r: w.r.iter().map(|v| v * 7.0).collect() };
        assert!((w.kappa() - 3.0).abs() < 1e-15);
        assert!((w.kappa() - scaled.kappa()).abs() < 1e-12);
        let bounds = FamilyBounds { sigma_u_min: 0.0, sigma_u_max: 1.0, sigma_w_max: 1.0, alpha_h: 1.0, beta: 1.0 };
        assert!(matches!(sensitivity_constants(&bounds, &w, 3), Err(Error::NotControllable)));
    }

    #[test]
    fn sensitivity_bound_on_nearby_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 4;
        let t = single(2, 1);
        let w = Weights::identity(2, 1);
        for _ in 0..10 {
            let a1 = DMatrix::from_row_slice(2, 2, &[rng.gen_range(0.8..1.2), 1.0, 0.0, rng.gen_range(0.8..1.2)]);
            let b1 = DMatrix::from_row_slice(2, 1, &[rng.gen_range(-0.2..0.2), rng.gen_range(0.8..1.2)]);
            let a2 = &a1 + DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.05..0.05));
            let b2 = &b1 + DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-0.05..0.05));
            let g1 = controllability_grammians(&a1, &b1, h).unwrap();
            let g2 = controllability_grammians(&a2, &b2, h).unwrap();
            let env = FamilyBounds::envelope(&[(&g1, spectral_norm(&b1)), (&g2, spectral_norm(&b2))]);
            let k = sensitivity_constants(&env, &w, h).unwrap();
            let mask = SparsityMask::dense(&t, 0, h);
            for p in 0..2 {
                let c1 = synthesize_column(&LocalModel::from_global(a1.clone(), b1.clone()), p, &mask, &w).unwrap();
                let c2 = synthesize_column(&LocalModel::from_global(a2.clone(), b2.clone()), p, &mask, &w).unwrap();
                let lhs = (c1.stacked() - c2.stacked()).norm();
                let rhs = k.gamma_a * (&a1 - &a2).norm() + k.gamma_b * (&b1 - &b2).norm();
                assert!(lhs <= rhs, "{lhs} > {rhs}");
            }
        }
    }

    fn scalar_family(lo: [f64; 2], hi: [f64; 2]) -> (NetworkTopology, DelayTable, NeighborSets, Vec<Polytope>) {
        let t = single(1, 1);
        let d = compute_delay_table(&t);
        let s = compute_neighbor_sets(&t, &d, 1).unwrap();
        (t, d, s, vec![Polytope::from_box(lo.to_vec(), hi.to_vec()).unwrap()])
    }

    #[test]
    fn probe_controllable_family_passes() {
        let (t, d, s, p0) = scalar_family([0.5, 0.5], [1.5, 1.5]);
        let r = fir_feasibility_probe(&t, &d, &s, &p0, 2, &Weights::identity(1, 1), 40, 1).unwrap();
        assert_eq!(r.pass_rate, 1.0);
        let fit = r.decay.unwrap();
        assert!(fit.rho < 1.0 && fit.c > 0.0);
    }

    #[test]
    fn probe_reports_zero_gain_corner() {
        let (t, d, s, p0) = scalar_family([0.5, 0.0], [1.5, 1.0]);
        let r = fir_feasibility_probe(&t, &d, &s, &p0, 2, &Weights::identity(1, 1), 10, 1).unwrap();
        assert!(r.pass_rate < 1.0);
        assert!(r.failures.iter().any(|f| f.trial == 0 && f.thetas[0][1] == 0.0));
    }

    #[test]
    fn probe_detects_short_horizon() {
        // double integrator family: needs two steps
        let t = single(2, 1);
        let d = compute_delay_table(&t);
        let s = compute_neighbor_sets(&t, &d, 1).unwrap();
        let lo = vec![0.9, 0.9, -0.1, 0.9, 0.0, 0.9];
        let hi = vec![1.1, 1.1, 0.1, 1.1, 0.0, 1.1];
        let p0 = vec![Polytope::from_box(lo, hi).unwrap()];
        let short = fir_feasibility_probe(&t, &d, &s, &p0, 1, &Weights::identity(2, 1), 10, 2).unwrap();
        assert_eq!(short.passes, 0);
        let ok = fir_feasibility_probe(&t, &d, &s, &p0, 2, &Weights::identity(2, 1), 10, 2).unwrap();
        assert_eq!(ok.pass_rate, 1.0);
    }

    #[test]
    fn decay_bound_holds_on_samples() {
        let norms = vec![vec![1.0, 0.5, 0.2, 0.0], vec![1.0, 0.9, 0.1, 0.0]];
        let fit = fit_decay(&norms).unwrap();
        for n in &norms {
            for (k, v) in n.iter().enumerate() {
                assert!(*v <= fit.c * fit.rho.powi(k as i32) * (1.0 + 1e-12));
            }
        }
    }
}
