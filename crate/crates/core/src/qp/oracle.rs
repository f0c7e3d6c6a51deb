//! Exhaustive reference solver for small, strictly convex QPs.
//!
//! Every assignment of rows to {inactive, at lower bound, at upper bound}
//! is tried; the equality-constrained KKT system of each assignment is
//! solved densely and accepted when it is primal feasible with correctly
//! signed multipliers. Strict convexity makes that point the unique
//! minimizer. Cost grows as 3^m, so keep m small.

use nalgebra::{DMatrix, DVector};

use super::QpProblem;
use crate::error::{Error, Result};

/// Largest row count the enumeration accepts.
pub const MAX_ROWS: usize = 12;

const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    /// Multipliers in the solver's sign convention: `Px + q + A'y = 0`,
    /// negative at a lower bound, positive at an upper bound.
    pub y: Vec<f64>,
    pub objective: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum RowState {
    Free,
    Lower,
    Upper,
}

/// Solve `prob` by active-set enumeration. Returns `Ok(None)` when no
/// assignment is feasible.
pub fn solve_by_enumeration(prob: &QpProblem) -> Result<Option<OracleSolution>> {
    prob.validate()?;
    let m = prob.num_rows();
    if m > MAX_ROWS {
        return Err(Error::InvalidProblem(format!("enumeration oracle takes at most {MAX_ROWS} rows, got {m}")));
    }
    let p = dense(&prob.p);
    let a = dense(&prob.a);
    let options: Vec<Vec<RowState>> = (0..m)
        .map(|i| {
            let (l, u) = (prob.l[i], prob.u[i]);
            if l == u {
                vec![RowState::Lower]
            } else {
                let mut v = vec![RowState::Free];
                if l.is_finite() {
                    v.push(RowState::Lower);
                }
                if u.is_finite() {
                    v.push(RowState::Upper);
                }
                v
            }
        })
        .collect();

    let mut choice = vec![0usize; m];
    loop {
        let states: Vec<RowState> = (0..m).map(|i| options[i][choice[i]]).collect();
        if let Some(sol) = try_assignment(prob, &p, &a, &states) {
            return Ok(Some(sol));
        }
        // Odometer increment over the per-row options.
        let mut i = 0;
        loop {
            if i == m {
                return Ok(None);
            }
            choice[i] += 1;
            if choice[i] < options[i].len() {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

fn try_assignment(prob: &QpProblem, p: &DMatrix<f64>, a: &DMatrix<f64>, states: &[RowState]) -> Option<OracleSolution> {
    let n = p.nrows();
    let m = states.len();
    let active: Vec<usize> = (0..m).filter(|&i| states[i] != RowState::Free).collect();
    let k = active.len();
    // More active rows than variables cannot be linearly independent, and
    // strict convexity makes the optimum reachable with independent rows.
    if k > n {
        return None;
    }
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    let mut rhs = DVector::zeros(n + k);
    for j in 0..n {
        rhs[j] = -prob.q[j];
    }
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = a[(i, j)];
            kkt[(j, n + r)] = a[(i, j)];
        }
        rhs[n + r] = if states[i] == RowState::Upper { prob.u[i] } else { prob.l[i] };
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x: Vec<f64> = sol.rows(0, n).iter().copied().collect();
    let mut y = vec![0.0; m];
    for (r, &i) in active.iter().enumerate() {
        y[i] = sol[n + r];
    }
    let xv = DVector::from_column_slice(&x);
    let yv = DVector::from_column_slice(&y);
    // A near-singular system can return a solution that misses its equations.
    let stationarity = p * &xv + DVector::from_column_slice(&prob.q) + a.transpose() * &yv;
    if stationarity.amax() > FEAS_TOL * (1.0 + yv.amax() + xv.amax()) {
        return None;
    }
    let ax = a * &xv;
    for i in 0..m {
        let scale = 1.0 + prob.l[i].abs().min(prob.u[i].abs()).min(1e6);
        if ax[i] < prob.l[i] - FEAS_TOL * scale || ax[i] > prob.u[i] + FEAS_TOL * scale {
            return None;
        }
        let sign_ok = match states[i] {
            RowState::Free => true,
            RowState::Lower if prob.l[i] == prob.u[i] => true,
            RowState::Lower => y[i] <= FEAS_TOL,
            RowState::Upper => y[i] >= -FEAS_TOL,
        };
        if !sign_ok {
            return None;
        }
    }
    let objective = prob.objective(&x);
    Some(OracleSolution { x, y, objective })
}

fn dense(m: &super::CscMatrix) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows, m.ncols);
    for j in 0..m.ncols {
        for (i, v) in m.col(j) {
            d[(i, j)] += v;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::super::CscMatrix;
    use super::*;

    #[test]
    fn scalar_lower_bound() {
        // min x^2 s.t. x >= 1: x = 1, y = -2.
        let prob = QpProblem::new(
            CscMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]).unwrap(),
            vec![0.0],
            CscMatrix::identity(1),
            vec![1.0],
            vec![f64::INFINITY],
        )
        .unwrap();
        let sol = solve_by_enumeration(&prob).unwrap().unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!((sol.y[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_minimum_inside_box() {
        // min (x-0.3)^2 + (y+0.2)^2 with |x|,|y| <= 1.
        let prob = QpProblem::new(
            CscMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 2.0)]).unwrap(),
            vec![-0.6, 0.4],
            CscMatrix::identity(2),
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let sol = solve_by_enumeration(&prob).unwrap().unwrap();
        assert!((sol.x[0] - 0.3).abs() < 1e-12 && (sol.x[1] + 0.2).abs() < 1e-12);
        assert_eq!(sol.y, vec![0.0, 0.0]);
    }

    #[test]
    fn infeasible_rows_yield_none() {
        let prob = QpProblem::new(
            CscMatrix::identity(1),
            vec![0.0],
            CscMatrix::from_triplets(2, 1, &[(0, 0, 1.0), (1, 0, 1.0)]).unwrap(),
            vec![1.0, f64::NEG_INFINITY],
            vec![f64::INFINITY, 0.0],
        )
        .unwrap();
        assert_eq!(solve_by_enumeration(&prob).unwrap(), None);
    }

    #[test]
    fn too_many_rows_rejected() {
        let m = MAX_ROWS + 1;
        let t: Vec<_> = (0..m).map(|i| (i, 0, 1.0)).collect();
        let prob = QpProblem::new(
            CscMatrix::identity(1),
            vec![0.0],
            CscMatrix::from_triplets(m, 1, &t).unwrap(),
            vec![-1.0; m],
            vec![1.0; m],
        )
        .unwrap();
        assert!(solve_by_enumeration(&prob).is_err());
    }
}
