//! Polytopes in halfspace form: support queries, membership, projection,
//! redundancy pruning and Steiner point estimation.
//!
//! A polytope is an axis box `lo ≤ θ ≤ hi` intersected with unit-normal
//! halfspaces. Rows are indexed uniformly: row `2k` is `θ_k ≤ hi_k`, row
//! `2k+1` is `−θ_k ≤ −lo_k`, and rows `2d + h` are the stored halfspaces.
//! Support queries walk between vertices (an active-set form of the primal
//! simplex with Bland's rule) starting from a cached feasible vertex; the
//! dense tableau simplex in [`simplex`] serves cold starts and fallbacks.

pub mod simplex;
pub mod steiner;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use steiner::{steiner_point, DirectionSet, SteinerEstimate};

/// Feasibility tolerance shared by membership and emptiness decisions.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Halfspace {
    /// `a·θ ≤ b`, rescaled to a unit normal.
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let n = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() || !offset.is_finite() {
            return Err(Error::Parse("halfspace needs a finite nonzero normal".into()));
        }
        Ok(Self {
            normal: normal.iter().map(|v| v / n).collect(),
            offset: offset / n,
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Vertex {
    x: Vec<f64>,
    basis: Vec<usize>,
    /// Inverse of the basis matrix (row `i` = row `basis[i]`), when known.
    inv: Option<DMatrix<f64>>,
    /// Rank-one updates applied since `inv` was last factorized.
    age: usize,
}

impl Vertex {
    fn new(x: Vec<f64>, basis: Vec<usize>) -> Self {
        Self { x, basis, inv: None, age: 0 }
    }
}

/// Basis inverses are refactorized after this many rank-one updates.
const REFACTOR_EVERY: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub point: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub point: Vec<f64>,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    /// The halfspace removed part of the set and was stored.
    Cut,
    /// The halfspace already contained the set; nothing stored.
    Redundant,
}

#[derive(Debug)]
enum WalkFailure {
    Singular,
    IterationLimit,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    halfspaces: Vec<Halfspace>,
    marks: Vec<usize>,
    vertex: Vertex,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Polytope {
    /// The box `lo ≤ θ ≤ hi`.
    pub fn from_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                what: "box bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(Error::UnboundedPolytope);
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::EmptyPolytope);
        }
        let dim = lo.len();
        let vertex = Vertex::new(lo.clone(), (0..dim).map(|k| 2 * k + 1).collect());
        Ok(Self {
            dim,
            lo,
            hi,
            halfspaces: Vec::new(),
            marks: Vec::new(),
            vertex,
        })
    }

    /// Box intersected with the given halfspaces (all stored, none pruned).
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, halfspaces: Vec<Halfspace>) -> Result<Self> {
        let mut p = Self::from_box(lo, hi)?;
        for h in &halfspaces {
            if h.normal.len() != p.dim {
                return Err(Error::DimensionMismatch {
                    what: "halfspace normal",
                    expected: p.dim,
                    got: h.normal.len(),
                });
            }
        }
        p.marks = vec![0; halfspaces.len()];
        p.halfspaces = halfspaces;
        if !p.halfspaces.is_empty() {
            let x = p.cold_feasible_point()?;
            p.vertex = p.purify(x, None).map_err(|_| Error::EmptyPolytope)?;
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    /// Insertion timestep of each stored halfspace.
    pub fn generation_marks(&self) -> &[usize] {
        &self.marks
    }

    /// Euclidean diameter of the bounding box.
    pub fn box_diameter(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt()
    }

    /// Coordinates whose box interval has positive width.
    pub fn free_coords(&self) -> Vec<usize> {
        (0..self.dim).filter(|&k| self.hi[k] > self.lo[k]).collect()
    }

    /// A feasible vertex of the set.
    pub fn vertex_point(&self) -> &[f64] {
        &self.vertex.x
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        assert_eq!(x.len(), self.dim, "dimension mismatch in contains");
        (0..self.dim).all(|k| x[k] <= self.hi[k] + tol && x[k] >= self.lo[k] - tol)
            && self.halfspaces.iter().all(|h| h.eval(x) <= tol)
    }

    /// Largest constraint violation at `x` (≤ 0 when strictly inside).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v = f64::NEG_INFINITY;
        for k in 0..self.dim {
            v = v.max(x[k] - self.hi[k]).max(self.lo[k] - x[k]);
        }
        for h in &self.halfspaces {
            v = v.max(h.eval(x));
        }
        v
    }

    fn n_rows(&self) -> usize {
        2 * self.dim + self.halfspaces.len()
    }

    fn row_dot(&self, r: usize, v: &[f64]) -> f64 {
        if r < 2 * self.dim {
            let k = r / 2;
            if r % 2 == 0 {
                v[k]
            } else {
                -v[k]
            }
        } else {
            dot(&self.halfspaces[r - 2 * self.dim].normal, v)
        }
    }

    fn row_offset(&self, r: usize) -> f64 {
        if r < 2 * self.dim {
            let k = r / 2;
            if r % 2 == 0 {
                self.hi[k]
            } else {
                -self.lo[k]
            }
        } else {
            self.halfspaces[r - 2 * self.dim].offset
        }
    }

    fn row_entry(&self, r: usize, k: usize) -> f64 {
        if r < 2 * self.dim {
            if r / 2 != k {
                0.0
            } else if r % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        } else {
            self.halfspaces[r - 2 * self.dim].normal[k]
        }
    }

    fn row_dense(&self, r: usize) -> Vec<f64> {
        (0..self.dim).map(|k| self.row_entry(r, k)).collect()
    }

    fn basis_matrix(&self, basis: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, k| self.row_entry(basis[i], k))
    }

    /// Maximizes `c·θ` by walking vertices from `vtx`; `vtx` ends at the optimum.
    /// The basis inverse is carried along and updated by rank-one pivots.
    fn walk(&self, c: &[f64], vtx: &mut Vertex, skip_row: Option<usize>) -> std::result::Result<(), WalkFailure> {
        let d = self.dim;
        if d == 0 {
            return Ok(());
        }
        let nrows = self.n_rows();
        let cap = 50 * (nrows + d) + 100;
        let mut in_basis = vec![false; nrows];
        for &r in &vtx.basis {
            in_basis[r] = true;
        }
        let cscale = 1.0 + norm(c);
        let cv = DVector::from_column_slice(c);
        let mut fresh = false;
        for _ in 0..cap {
            if vtx.inv.is_none() || vtx.age >= REFACTOR_EVERY {
                vtx.inv = Some(self.basis_matrix(&vtx.basis).try_inverse().ok_or(WalkFailure::Singular)?);
                vtx.age = 0;
                fresh = true;
            }
            let inv = vtx.inv.as_ref().unwrap();
            let hb = DVector::from_iterator(d, vtx.basis.iter().map(|&r| self.row_offset(r)));
            let x = inv * hb;
            vtx.x.copy_from_slice(x.as_slice());
            // multipliers: Mᵀ λ = c
            let lam = inv.tr_mul(&cv);
            let mut leave: Option<usize> = None;
            for i in 0..d {
                if lam[i] < -1e-11 * cscale && leave.map_or(true, |l| vtx.basis[i] < vtx.basis[l]) {
                    leave = Some(i);
                }
            }
            let Some(li) = leave else {
                return Ok(());
            };
            let delta: Vec<f64> = (0..d).map(|k| -inv[(k, li)]).collect();
            let dn = norm(&delta);
            let mut best: Option<(usize, f64, f64)> = None;
            for r in 0..nrows {
                if in_basis[r] || Some(r) == skip_row {
                    continue;
                }
                let gd = self.row_dot(r, &delta);
                if gd <= 1e-9 * dn {
                    continue;
                }
                let slack = (self.row_offset(r) - self.row_dot(r, &vtx.x)).max(0.0);
                let step = slack / gd;
                best = match best {
                    Some((_, bs, _)) if step >= bs - 1e-12 * (1.0 + bs) => best,
                    _ => Some((r, step, gd)),
                };
            }
            let Some((enter, _, gd)) = best else {
                return Err(WalkFailure::Unbounded);
            };
            if gd < 1e-7 * dn && !fresh {
                // weak pivot on a stale inverse: refactorize and retry
                vtx.inv = None;
                continue;
            }
            // replace row `li` of the basis matrix by row `enter`
            let inv = vtx.inv.as_mut().unwrap();
            let col: Vec<f64> = (0..d).map(|k| inv[(k, li)]).collect();
            let alpha = -gd;
            for j in 0..d {
                if j == li {
                    continue;
                }
                let dotj = if enter < 2 * d {
                    let k = enter / 2;
                    if enter % 2 == 0 {
                        inv[(k, j)]
                    } else {
                        -inv[(k, j)]
                    }
                } else {
                    let a = &self.halfspaces[enter - 2 * d].normal;
                    (0..d).map(|k| a[k] * inv[(k, j)]).sum::<f64>()
                };
                let coef = dotj / alpha;
                if coef != 0.0 {
                    for k in 0..d {
                        inv[(k, j)] -= coef * col[k];
                    }
                }
            }
            for k in 0..d {
                inv[(k, li)] = col[k] / alpha;
            }
            vtx.age += 1;
            fresh = false;
            in_basis[vtx.basis[li]] = false;
            in_basis[enter] = true;
            vtx.basis[li] = enter;
        }
        Err(WalkFailure::IterationLimit)
    }

    /// Turns a feasible point into a vertex by moving along null-space directions.
    fn purify(&self, mut x: Vec<f64>, skip_row: Option<usize>) -> std::result::Result<Vertex, WalkFailure> {
        let d = self.dim;
        let nrows = self.n_rows();
        let mut active: Vec<usize> = Vec::with_capacity(d);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
        let try_add = |r: usize, active: &mut Vec<usize>, q: &mut Vec<Vec<f64>>| -> bool {
            let mut g = self.row_dense(r);
            for _ in 0..2 {
                for qq in q.iter() {
                    let p = dot(&g, qq);
                    for (gk, qk) in g.iter_mut().zip(qq) {
                        *gk -= p * qk;
                    }
                }
            }
            let n = norm(&g);
            if n > 1e-7 {
                q.push(g.iter().map(|v| v / n).collect());
                active.push(r);
                true
            } else {
                false
            }
        };
        for r in 0..nrows {
            if active.len() == d {
                break;
            }
            if Some(r) == skip_row {
                continue;
            }
            if (self.row_offset(r) - self.row_dot(r, &x)).abs() <= FEAS_TOL {
                try_add(r, &mut active, &mut q);
            }
        }
        let mut guard = 0;
        while active.len() < d {
            guard += 1;
            if guard > 4 * d + 4 {
                return Err(WalkFailure::IterationLimit);
            }
            let mut best_p = vec![0.0; d];
            let mut best_n = -1.0;
            for k in 0..d {
                let mut p = vec![0.0; d];
                p[k] = 1.0;
                for qq in &q {
                    let s = qq[k];
                    for (pk, qk) in p.iter_mut().zip(qq) {
                        *pk -= s * qk;
                    }
                }
                let n = norm(&p);
                if n > best_n {
                    best_n = n;
                    best_p = p;
                }
            }
            let p: Vec<f64> = best_p.iter().map(|v| v / best_n).collect();
            let mut best: Option<(usize, f64, f64)> = None;
            for sign in [1.0, -1.0] {
                for r in 0..nrows {
                    if active.contains(&r) || Some(r) == skip_row {
                        continue;
                    }
                    let gd = sign * self.row_dot(r, &p);
                    if gd <= 1e-9 {
                        continue;
                    }
                    let slack = (self.row_offset(r) - self.row_dot(r, &x)).max(0.0);
                    let step = slack / gd;
                    if best.map_or(true, |(_, s, _)| step < s) {
                        best = Some((r, step, sign));
                    }
                }
            }
            let Some((r, step, sign)) = best else {
                return Err(WalkFailure::Unbounded);
            };
            for (xk, pk) in x.iter_mut().zip(&p) {
                *xk += sign * step * pk;
            }
            if !try_add(r, &mut active, &mut q) {
                return Err(WalkFailure::Singular);
            }
        }
        let m = self.basis_matrix(&active);
        let inv = m.try_inverse().ok_or(WalkFailure::Singular)?;
        let hb = DVector::from_iterator(d, active.iter().map(|&r| self.row_offset(r)));
        let xv = &inv * hb;
        Ok(Vertex {
            x: xv.as_slice().to_vec(),
            basis: active,
            inv: Some(inv),
            age: 0,
        })
    }

    /// Feasible point from the tableau simplex (phase one only).
    fn cold_feasible_point(&self) -> Result<Vec<f64>> {
        self.cold_support(&vec![0.0; self.dim]).map(|s| s.point)
    }

    /// Support query through the dense tableau simplex, independent of the walker.
    pub fn cold_support(&self, c: &[f64]) -> Result<Support> {
        let d = self.dim;
        let mut rows = Vec::with_capacity(d + self.halfspaces.len());
        let mut b = Vec::with_capacity(d + self.halfspaces.len());
        for k in 0..d {
            let mut row = vec![0.0; d];
            row[k] = 1.0;
            rows.push(row);
            b.push(self.hi[k] - self.lo[k]);
        }
        for h in &self.halfspaces {
            rows.push(h.normal.clone());
            b.push(h.offset - dot(&h.normal, &self.lo));
        }
        match simplex::solve(c, &rows, &b) {
            simplex::LpOutcome::Optimal { y, .. } => {
                let point: Vec<f64> = y.iter().zip(&self.lo).map(|(a, l)| a + l).collect();
                let value = dot(c, &point);
                Ok(Support { point, value })
            }
            simplex::LpOutcome::Infeasible => Err(Error::EmptyPolytope),
            simplex::LpOutcome::Unbounded => Err(Error::UnboundedPolytope),
        }
    }

    fn walk_or_fallback(&self, c: &[f64], vtx: &mut Vertex, skip_row: Option<usize>) -> Result<()> {
        match self.walk(c, vtx, skip_row) {
            Ok(()) => Ok(()),
            Err(WalkFailure::Unbounded) => Err(Error::UnboundedPolytope),
            Err(failure) => {
                log::debug!("vertex walk failed ({failure:?}); falling back to tableau simplex");
                let fallback = match skip_row {
                    None => self.clone(),
                    Some(r) => {
                        let mut p = self.clone();
                        p.halfspaces.remove(r - 2 * self.dim);
                        p.marks.remove(r - 2 * self.dim);
                        p
                    }
                };
                let s = fallback.cold_support(c)?;
                let v = fallback.purify(s.point.clone(), None).map_err(|_| Error::EmptyPolytope)?;
                // rows of `fallback` past the skipped one are shifted by one
                let basis = v
                    .basis
                    .iter()
                    .map(|&r| match skip_row {
                        Some(sr) if r >= sr => r + 1,
                        _ => r,
                    })
                    .collect();
                *vtx = Vertex::new(v.x, basis);
                Ok(())
            }
        }
    }

    /// `argmax_{q∈P} v·q` and its value.
    pub fn support_point(&self, v: &[f64]) -> Result<Support> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "support direction",
                expected: self.dim,
                got: v.len(),
            });
        }
        let mut vtx = self.vertex.clone();
        self.walk_or_fallback(v, &mut vtx, None)?;
        let value = dot(v, &vtx.x);
        Ok(Support { point: vtx.x, value })
    }

    /// A support oracle that keeps its own warm start across queries.
    pub fn walker(&self) -> SupportWalker<'_> {
        SupportWalker {
            poly: self,
            vtx: self.vertex.clone(),
        }
    }

    /// Intersects with `h`. Halfspaces that do not cut the set are not stored.
    pub fn add_halfspace(&mut self, h: Halfspace, mark: usize) -> Result<AddOutcome> {
        if h.normal.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "halfspace normal",
                expected: self.dim,
                got: h.normal.len(),
            });
        }
        let mut vtx = self.vertex.clone();
        self.walk_or_fallback(&h.normal, &mut vtx, None)?;
        let hmax = dot(&h.normal, &vtx.x);
        if hmax <= h.offset + 1e-12 * (1.0 + h.offset.abs()) {
            return Ok(AddOutcome::Redundant);
        }
        let neg: Vec<f64> = h.normal.iter().map(|v| -v).collect();
        self.walk_or_fallback(&neg, &mut vtx, None)?;
        let hmin = dot(&h.normal, &vtx.x);
        if hmin > h.offset + FEAS_TOL {
            return Err(Error::EmptyPolytope);
        }
        self.halfspaces.push(h);
        self.marks.push(mark);
        self.vertex = vtx;
        Ok(AddOutcome::Cut)
    }

    /// Drops stored halfspaces implied by the others; returns how many were removed.
    pub fn prune_redundant(&mut self) -> Result<usize> {
        let mut removed = 0;
        let mut h = 0;
        while h < self.halfspaces.len() {
            let r = 2 * self.dim + h;
            let mut vtx = if self.vertex.basis.contains(&r) {
                match self.purify(self.vertex.x.clone(), Some(r)) {
                    Ok(v) => v,
                    Err(_) => {
                        h += 1;
                        continue;
                    }
                }
            } else {
                self.vertex.clone()
            };
            let normal = self.halfspaces[h].normal.clone();
            self.walk_or_fallback(&normal, &mut vtx, Some(r))?;
            let hmax = dot(&normal, &vtx.x);
            if hmax <= self.halfspaces[h].offset + 1e-12 * (1.0 + self.halfspaces[h].offset.abs()) {
                self.halfspaces.remove(h);
                self.marks.remove(h);
                removed += 1;
                // re-index the basis of the walker's vertex past the removed row
                vtx.basis.iter_mut().for_each(|b| {
                    if *b > r {
                        *b -= 1
                    }
                });
                self.vertex = vtx;
            } else {
                h += 1;
            }
        }
        Ok(removed)
    }

    /// Euclidean projection of `y` onto the set, by a primal active-set method.
    pub fn project_onto(&self, y: &[f64]) -> Result<Projection> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "projection point",
                expected: self.dim,
                got: y.len(),
            });
        }
        let d = self.dim;
        if self.contains(y, 0.0) {
            return Ok(Projection {
                point: y.to_vec(),
                kkt_residual: 0.0,
            });
        }
        let nrows = self.n_rows();
        let mut x = self.vertex.x.clone();
        let mut work: Vec<usize> = Vec::new();
        let scale = 1.0 + norm(y);
        let cap = 20 * (nrows + d) + 100;
        for _ in 0..cap {
            let (z, mu) = self.eq_projection(y, &work)?;
            let p: Vec<f64> = z.iter().zip(&x).map(|(a, b)| a - b).collect();
            if norm(&p) <= 1e-13 * scale {
                let worst = mu.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1));
                match worst {
                    Some((idx, &m)) if m < -1e-12 * scale => {
                        work.remove(idx);
                        continue;
                    }
                    _ => {
                        let kkt = self.kkt_residual(y, &x, &work, &mu);
                        return Ok(Projection { point: x, kkt_residual: kkt });
                    }
                }
            }
            let mut alpha = 1.0;
            let mut block = None;
            for r in 0..nrows {
                if work.contains(&r) {
                    continue;
                }
                let gp = self.row_dot(r, &p);
                if gp <= 1e-14 * norm(&p) {
                    continue;
                }
                let slack = (self.row_offset(r) - self.row_dot(r, &x)).max(0.0);
                let s = slack / gp;
                if s < alpha {
                    alpha = s;
                    block = Some(r);
                }
            }
            for (xk, pk) in x.iter_mut().zip(&p) {
                *xk += alpha * pk;
            }
            if let Some(r) = block {
                work.push(r);
            }
        }
        Err(Error::EmptyPolytope)
    }

    /// Minimizer of `‖z − y‖` on the affine set of the working rows, with multipliers.
    fn eq_projection(&self, y: &[f64], work: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        if work.is_empty() {
            return Ok((y.to_vec(), Vec::new()));
        }
        let w = work.len();
        let g = DMatrix::from_fn(w, self.dim, |i, k| self.row_entry(work[i], k));
        let s = &g * g.transpose();
        let rhs = &g * DVector::from_column_slice(y) - DVector::from_iterator(w, work.iter().map(|&r| self.row_offset(r)));
        let mu = s
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Parse("degenerate working set in projection".into()))?;
        let z = DVector::from_column_slice(y) - g.transpose() * &mu;
        Ok((z.as_slice().to_vec(), mu.as_slice().to_vec()))
    }

    fn kkt_residual(&self, y: &[f64], x: &[f64], work: &[usize], mu: &[f64]) -> f64 {
        let mut stat: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        for (&r, &m) in work.iter().zip(mu) {
            for (k, s) in stat.iter_mut().enumerate() {
                *s += m * self.row_entry(r, k);
            }
        }
        let dual = mu.iter().fold(0.0f64, |acc, &m| acc.max(-m));
        norm(&stat).max(self.max_violation(x).max(0.0)).max(dual)
    }
}

/// Chained support queries sharing one warm-started vertex.
pub struct SupportWalker<'a> {
    poly: &'a Polytope,
    vtx: Vertex,
}

impl SupportWalker<'_> {
    pub fn support(&mut self, v: &[f64]) -> Result<f64> {
        self.poly.walk_or_fallback(v, &mut self.vtx, None)?;
        Ok(dot(v, &self.vtx.x))
    }

    pub fn point(&self) -> &[f64] {
        &self.vtx.x
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn unit_box(d: usize) -> Polytope {
        Polytope::from_box(vec![0.0; d], vec![1.0; d]).unwrap()
    }

    /// Random polytope: a box cut by `m` halfspaces that keep `center` feasible.
    pub(crate) fn random_polytope(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Polytope {
        let mut p = Polytope::from_box(vec![-1.0; d], vec![1.0; d]).unwrap();
        let center: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
        for t in 0..m {
            let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = Halfspace::new(a.clone(), dot(&a, &center) + rng.gen_range(0.05..0.8)).unwrap();
            p.add_halfspace(h, t).unwrap();
        }
        p
    }

    /// Vertices of a 2-D polytope by intersecting all row pairs.
    fn vertices_2d(p: &Polytope) -> Vec<Vec<f64>> {
        let n = p.n_rows();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let m = p.basis_matrix(&[a, b]);
                if m.determinant().abs() < 1e-12 {
                    continue;
                }
                let x = m.try_inverse().unwrap() * DVector::from_vec(vec![p.row_offset(a), p.row_offset(b)]);
                let x = x.as_slice().to_vec();
                if p.contains(&x, 1e-9) {
                    out.push(x);
                }
            }
        }
        out
    }

    #[test]
    fn box_support_values() {
        let p = unit_box(2);
        let s = p.support_point(&[1.0, 0.0]).unwrap();
        assert_eq!(s.value, 1.0);
        assert_eq!(s.point[0], 1.0);
        assert!((0.0..=1.0).contains(&s.point[1]));
        let q = Polytope::from_box(vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let r = 0.5f64.sqrt();
        assert!((q.support_point(&[r, r]).unwrap().value - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn support_matches_vertex_enumeration_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = random_polytope(2, 6, &mut rng);
            let verts = vertices_2d(&p);
            for _ in 0..10 {
                let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = [ang.cos(), ang.sin()];
                let best = verts.iter().map(|x| dot(&v, x)).fold(f64::NEG_INFINITY, f64::max);
                let s = p.support_point(&v).unwrap();
                assert!((s.value - best).abs() < 1e-9, "{} vs {}", s.value, best);
                assert!(p.contains(&s.point, 1e-9));
            }
        }
    }

    #[test]
    fn walker_agrees_with_tableau() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in [3, 5, 8] {
            let p = random_polytope(d, 4 * d, &mut rng);
            let mut w = p.walker();
            for _ in 0..20 {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let hot = w.support(&v).unwrap();
                let cold = p.cold_support(&v).unwrap().value;
                assert!((hot - cold).abs() < 1e-8 * (1.0 + cold.abs()));
            }
        }
    }

    #[test]
    fn contains_cases() {
        let p = unit_box(2);
        assert!(p.contains(&[0.5, 0.5], 1e-9));
        assert!(!p.contains(&[1.1, 0.5], 1e-9));
        assert!(p.contains(&[1.0 + 1e-7, 0.5], 1e-6));
    }

    #[test]
    fn emptiness_is_detected() {
        let mut p = unit_box(2);
        let h = Halfspace::new(vec![1.0, 1.0], -0.5).unwrap();
        assert!(matches!(p.add_halfspace(h, 0), Err(Error::EmptyPolytope)));
        assert!(matches!(Polytope::from_box(vec![0.0], vec![f64::INFINITY]), Err(Error::UnboundedPolytope)));
        let cut = Halfspace::new(vec![1.0, 1.0], -0.5).unwrap();
        assert!(matches!(Polytope::new(vec![0.0; 2], vec![1.0; 2], vec![cut]), Err(Error::EmptyPolytope)));
    }

    #[test]
    fn redundant_halfspace_not_stored() {
        let mut p = unit_box(2);
        let h = Halfspace::new(vec![1.0, 0.0], 2.0).unwrap();
        assert_eq!(p.add_halfspace(h, 0).unwrap(), AddOutcome::Redundant);
        assert!(p.halfspaces().is_empty());
        let h = Halfspace::new(vec![1.0, 1.0], 1.0).unwrap();
        assert_eq!(p.add_halfspace(h, 1).unwrap(), AddOutcome::Cut);
        assert_eq!(p.generation_marks(), &[1]);
    }

    #[test]
    fn projection_cases() {
        let p = unit_box(2);
        assert_eq!(p.project_onto(&[0.3, 0.4]).unwrap().point, vec![0.3, 0.4]);
        let pr = p.project_onto(&[2.0, 0.5]).unwrap();
        assert!((pr.point[0] - 1.0).abs() < 1e-12 && (pr.point[1] - 0.5).abs() < 1e-12);
        assert!(pr.kkt_residual <= 1e-7);
    }

    /// Brute force over active sets of size ≤ 2 (2-D only).
    fn brute_projection(p: &Polytope, y: &[f64]) -> Vec<f64> {
        let n = p.n_rows();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut consider = |z: Vec<f64>| {
            if p.contains(&z, 1e-9) {
                let d = (z[0] - y[0]).powi(2) + (z[1] - y[1]).powi(2);
                if best.as_ref().map_or(true, |b| d < b.0) {
                    best = Some((d, z));
                }
            }
        };
        consider(y.to_vec());
        for r in 0..n {
            let g = p.row_dense(r);
            let s = dot(&g, y) - p.row_offset(r);
            consider(vec![y[0] - s * g[0], y[1] - s * g[1]]);
        }
        for x in vertices_2d(p) {
            consider(x);
        }
        best.unwrap().1
    }

    #[test]
    fn projection_matches_brute_force_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let p = random_polytope(2, 5, &mut rng);
            let y = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let pr = p.project_onto(&y).unwrap();
            let oracle = brute_projection(&p, &y);
            assert!((pr.point[0] - oracle[0]).abs() < 1e-7 && (pr.point[1] - oracle[1]).abs() < 1e-7);
            assert!(pr.kkt_residual <= 1e-7);
        }
    }

    #[test]
    fn degenerate_box_coordinate() {
        let p = Polytope::from_box(vec![0.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(p.free_coords(), vec![0]);
        assert_eq!(p.support_point(&[0.0, 1.0]).unwrap().value, 2.0);
    }

    #[test]
    fn pruning_keeps_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let mut p = random_polytope(2, 12, &mut rng);
            let before = p.clone();
            p.prune_redundant().unwrap();
            for a in 0..=40 {
                for b in 0..=40 {
                    let x = [-1.0 + a as f64 * 0.05, -1.0 + b as f64 * 0.05];
                    assert_eq!(before.contains(&x, 1e-12), p.contains(&x, 1e-12));
                }
            }
            assert!(p.contains(p.vertex_point(), 1e-9));
        }
    }

    /// Hit-and-run samples from the interior.
    pub(crate) fn hit_and_run(p: &Polytope, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let d = p.dim();
        let mut x = p.vertex_point().to_vec();
        // start from the average of a few support points to be interior-ish
        let mut acc = vec![0.0; d];
        for k in 0..d {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            let a = p.support_point(&e).unwrap().point;
            e[k] = -1.0;
            let b = p.support_point(&e).unwrap().point;
            for j in 0..d {
                acc[j] += (a[j] + b[j]) / (2 * d) as f64;
            }
        }
        if p.contains(&acc, 0.0) {
            x = acc;
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
            for r in 0..p.n_rows() {
                let gd = p.row_dot(r, &dir);
                let slack = p.row_offset(r) - p.row_dot(r, &x);
                if gd > 1e-15 {
                    tmax = tmax.min(slack / gd);
                } else if gd < -1e-15 {
                    tmin = tmin.max(slack / gd);
                }
            }
            let t = rng.gen_range(tmin.min(0.0)..=tmax.max(0.0));
            for j in 0..d {
                x[j] += t * dir[j];
            }
            out.push(x.clone());
        }
        out
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn support_dominates_feasible_samples(seed in any::<u64>(), d in 2usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = random_polytope(d, 3 * d, &mut rng);
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let h = p.support_point(&v).unwrap().value;
                for q in hit_and_run(&p, 1000, &mut rng) {
                    prop_assert!(dot(&v, &q) <= h + 1e-9);
                }
            }
        }
    }
}
