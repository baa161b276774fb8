//! Dense two-phase tableau simplex with Bland's rule.
//!
//! Solves `max cᵀy  s.t.  A y ≤ b, y ≥ 0` with `b` of any sign. Used for cold
//! starts (finding a first feasible point) and as an independent cross-check
//! of the warm-started vertex walker.

const EPS: f64 = 1e-10;
const MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { y: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    ncols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, col: usize, obj: &mut [f64], obj_val: &mut f64) {
        let p = self.rows[r][col];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        self.rhs[r] /= p;
        let prow = self.rows[r].clone();
        let prhs = self.rhs[r];
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[col];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&prow) {
                    *v -= f * pv;
                }
                self.rhs[i] -= f * prhs;
            }
        }
        let f = obj[col];
        if f != 0.0 {
            for (v, pv) in obj.iter_mut().zip(&prow) {
                *v -= f * pv;
            }
            *obj_val += f * prhs;
        }
        self.basis[r] = col;
    }

    /// Reduced costs and objective value for `cost` under the current basis.
    fn price(&self, cost: &[f64]) -> (Vec<f64>, f64) {
        let mut red = cost.to_vec();
        let mut val = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (r, v) in red.iter_mut().zip(row) {
                    *r -= cb * v;
                }
                val += cb * self.rhs[i];
            }
        }
        (red, val)
    }

    /// Bland-rule primal simplex over columns `< allowed`. Returns false when unbounded.
    fn run(&mut self, obj: &mut [f64], obj_val: &mut f64, allowed: usize) -> Option<bool> {
        for _ in 0..MAX_ITERS {
            let Some(col) = (0..allowed).find(|&j| obj[j] > EPS) else {
                return Some(true);
            };
            let mut best: Option<(usize, f64)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                let a = row[col];
                if a > EPS {
                    let ratio = self.rhs[i].max(0.0) / a;
                    best = match best {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - 1e-14 || (ratio <= br + 1e-14 && self.basis[i] < self.basis[bi]) {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = best else {
                return Some(false);
            };
            self.pivot(r, col, obj, obj_val);
        }
        None
    }
}

/// `max cᵀy` subject to `a[i]·y ≤ b[i]` and `y ≥ 0`.
pub fn solve(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> LpOutcome {
    let n = c.len();
    let m = a.len();
    assert_eq!(b.len(), m, "row count mismatch");
    let n_art = b.iter().filter(|&&v| v < 0.0).count();
    let ncols = n + m + n_art;
    let mut rows = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut next_art = n + m;
    for i in 0..m {
        assert_eq!(a[i].len(), n, "column count mismatch");
        let mut row = vec![0.0; ncols];
        if b[i] >= 0.0 {
            row[..n].copy_from_slice(&a[i]);
            row[n + i] = 1.0;
            basis.push(n + i);
            rhs.push(b[i]);
        } else {
            for (dst, src) in row[..n].iter_mut().zip(&a[i]) {
                *dst = -src;
            }
            row[n + i] = -1.0;
            row[next_art] = 1.0;
            basis.push(next_art);
            next_art += 1;
            rhs.push(-b[i]);
        }
        rows.push(row);
    }
    let mut t = Tableau { rows, rhs, basis, ncols };

    if n_art > 0 {
        let mut cost1 = vec![0.0; ncols];
        for v in cost1[n + m..].iter_mut() {
            *v = -1.0;
        }
        let (mut obj, mut val) = t.price(&cost1);
        match t.run(&mut obj, &mut val, ncols) {
            Some(_) => {}
            None => return LpOutcome::Infeasible,
        }
        let scale = 1.0 + b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if val < -1e-9 * scale {
            return LpOutcome::Infeasible;
        }
        // drive zero-level artificials out of the basis
        for r in 0..m {
            if t.basis[r] >= n + m {
                if let Some(col) = (0..n + m).find(|&j| t.rows[r][j].abs() > 1e-9) {
                    let mut dummy = vec![0.0; ncols];
                    let mut dv = 0.0;
                    t.pivot(r, col, &mut dummy, &mut dv);
                }
            }
        }
    }

    let mut cost2 = vec![0.0; ncols];
    cost2[..n].copy_from_slice(c);
    let (mut obj, mut val) = t.price(&cost2);
    match t.run(&mut obj, &mut val, n + m) {
        Some(true) => {}
        Some(false) => return LpOutcome::Unbounded,
        None => return LpOutcome::Infeasible,
    }
    let mut y = vec![0.0; n];
    for (r, &bv) in t.basis.iter().enumerate() {
        if bv < n {
            y[bv] = t.rhs[r].max(0.0);
        }
    }
    let value = c.iter().zip(&y).map(|(a, b)| a * b).sum();
    debug_assert!(t.ncols == ncols);
    LpOutcome::Optimal { y, value }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_max() {
        // max 3x + 5y; x ≤ 4; 2y ≤ 12; 3x + 2y ≤ 18 → (2, 6), 36
        let out = solve(
            &[3.0, 5.0],
            &[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]],
            &[4.0, 12.0, 18.0],
        );
        match out {
            LpOutcome::Optimal { y, value } => {
                assert!((value - 36.0).abs() < 1e-9);
                assert!((y[0] - 2.0).abs() < 1e-9 && (y[1] - 6.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn needs_phase_one() {
        // max -x - y s.t. x + y ≥ 2 (→ -x - y ≤ -2), x ≤ 3
        let out = solve(&[-1.0, -1.0], &[vec![-1.0, -1.0], vec![1.0, 0.0]], &[-2.0, 3.0]);
        match out {
            LpOutcome::Optimal { value, .. } => assert!((value + 2.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        assert_eq!(solve(&[1.0], &[vec![1.0], vec![-1.0]], &[1.0, -2.0]), LpOutcome::Infeasible);
        assert_eq!(solve(&[1.0, 0.0], &[vec![0.0, 1.0]], &[1.0]), LpOutcome::Unbounded);
    }

    #[test]
    fn degenerate_vertex_does_not_cycle() {
        // classic Beale-style degenerate instance
        let a = vec![
            vec![0.25, -60.0, -0.04, 9.0],
            vec![0.5, -90.0, -0.02, 3.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let out = solve(&[0.75, -150.0, 0.02, -6.0], &a, &[0.0, 0.0, 1.0]);
        match out {
            LpOutcome::Optimal { value, .. } => assert!((value - 0.05).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }
}
