//! Euclidean projection onto a polyhedron: the safety-filter QP
//!
//! ```text
//! minimize ‖u - u_ref‖²   subject to   nᵢ·u + bᵢ ≥ 0
//! ```
//!
//! The Hessian is the identity, so the solver is a dual active-set method
//! (Goldfarb-Idnani) specialised to that case. It starts at the unconstrained
//! minimizer `u_ref` and adds violated constraints one at a time, so an empty
//! feasible set shows up as an unbounded dual step rather than as a failed
//! phase-one search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::AgentId;

/// Constraint residual below which a constraint counts as satisfied.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Violation that makes the solver pull a constraint into the active set.
const VIOLATION_TOL: f64 = 1e-10;
const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("constraints have no common solution")]
    Infeasible,
    #[error("still infeasible after inflating offsets by {inflation}")]
    StillInfeasible { inflation: f64 },
    #[error("constraint {index} has dimension {got}, reference has {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite problem data")]
    NonFinite,
    #[error("relaxation step must be positive and finite, got {0}")]
    InvalidRelaxation(f64),
    #[error("active-set iteration limit reached")]
    NoConvergence,
}

/// Half-space `normal · u + offset ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineConstraint {
    pub normal: DVector<f64>,
    pub offset: f64,
    pub agent_id: Option<AgentId>,
}

impl AffineConstraint {
    pub fn new(normal: DVector<f64>, offset: f64) -> Self {
        Self {
            normal,
            offset,
            agent_id: None,
        }
    }

    pub fn from_slice(normal: &[f64], offset: f64) -> Self {
        Self::new(DVector::from_column_slice(normal), offset)
    }

    pub fn with_agent(mut self, agent_id: AgentId) -> Self {
        self.agent_id = Some(agent_id);
        self
    }

    pub fn residual(&self, u: &DVector<f64>) -> f64 {
        self.normal.dot(u) + self.offset
    }

    pub fn is_satisfied(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.residual(u) >= -tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub reference: DVector<f64>,
    pub constraints: Vec<AffineConstraint>,
}

impl QpProblem {
    pub fn new(reference: DVector<f64>, constraints: Vec<AffineConstraint>) -> Self {
        Self {
            reference,
            constraints,
        }
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        (u - &self.reference).norm_squared()
    }

    /// Copy of the problem with every offset increased by `amount`.
    pub fn inflated(&self, amount: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.constraints {
            c.offset += amount;
        }
        out
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.reference.len();
        if self.reference.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        for (index, c) in self.constraints.iter().enumerate() {
            if c.normal.len() != n {
                return Err(QpError::DimensionMismatch {
                    index,
                    expected: n,
                    got: c.normal.len(),
                });
            }
            if !c.offset.is_finite() || c.normal.iter().any(|v| !v.is_finite()) {
                return Err(QpError::NonFinite);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub decision: DVector<f64>,
    /// Indices of constraints with `|residual| ≤ FEASIBILITY_TOL`.
    pub active_set: Vec<usize>,
    /// Offset inflation applied to reach feasibility, if any.
    pub relaxation_used: Option<f64>,
    pub objective: f64,
}

impl QpSolution {
    fn at(problem: &QpProblem, decision: DVector<f64>) -> Self {
        let active_set = problem
            .constraints
            .iter()
            .enumerate()
            .filter(|(_, c)| c.residual(&decision).abs() <= FEASIBILITY_TOL)
            .map(|(i, _)| i)
            .collect();
        Self {
            objective: problem.objective(&decision),
            decision,
            active_set,
            relaxation_used: None,
        }
    }
}

pub fn solve(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let x = dual_active_set(problem)?;
    Ok(QpSolution::at(problem, x))
}

/// Solves `problem`, and if it is infeasible retries with all offsets raised
/// by `k · lambda_step` for `k = 1..=max_steps`. Returns the solution and the
/// inflation that was needed (zero when the original problem is feasible).
pub fn solve_with_relaxation(
    problem: &QpProblem,
    lambda_step: f64,
    max_steps: usize,
) -> Result<(QpSolution, f64), QpError> {
    if !(lambda_step > 0.0 && lambda_step.is_finite()) {
        return Err(QpError::InvalidRelaxation(lambda_step));
    }
    match solve(problem) {
        Ok(sol) => return Ok((sol, 0.0)),
        Err(QpError::Infeasible) => {}
        Err(e) => return Err(e),
    }
    for k in 1..=max_steps {
        let inflation = k as f64 * lambda_step;
        match solve(&problem.inflated(inflation)) {
            Ok(mut sol) => {
                sol.relaxation_used = Some(inflation);
                return Ok((sol, inflation));
            }
            Err(QpError::Infeasible) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(QpError::StillInfeasible {
        inflation: max_steps as f64 * lambda_step,
    })
}

fn dual_active_set(problem: &QpProblem) -> Result<DVector<f64>, QpError> {
    let cons = &problem.constraints;
    let mut x = problem.reference.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let max_iter = 50 * (cons.len() + 1) * (x.len() + 1);
    let mut iter = 0;

    loop {
        // Most violated inactive constraint.
        let candidate = cons
            .iter()
            .enumerate()
            .filter(|(i, _)| !active.contains(i))
            .map(|(i, c)| (i, c.residual(&x)))
            .filter(|&(_, s)| s < -VIOLATION_TOL)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((p, _)) = candidate else {
            return Ok(x);
        };
        let np = &cons[p].normal;
        let mut mult_p = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::NoConvergence);
            }
            let (z, r) = step_directions(cons, &active, np);
            let np_norm = np.norm();

            // Largest dual step before an active multiplier hits zero.
            let mut partial: Option<(usize, f64)> = None;
            let r_scale = r.amax();
            for (slot, &rj) in r.iter().enumerate() {
                if rj > DEGENERATE_TOL * r_scale {
                    let t = mult[slot] / rj;
                    if partial.is_none_or(|(_, best)| t < best) {
                        partial = Some((slot, t));
                    }
                }
            }

            let zn = z.dot(np);
            let full = if z.norm() > 1e-9 * np_norm && zn > 0.0 {
                Some(-cons[p].residual(&x) / zn)
            } else {
                None
            };

            let (t, drop) = match (full, partial) {
                (None, None) => return Err(QpError::Infeasible),
                (None, Some((slot, t1))) => (t1, Some(slot)),
                (Some(t2), None) => (t2, None),
                (Some(t2), Some((slot, t1))) => {
                    if t1 < t2 {
                        (t1, Some(slot))
                    } else {
                        (t2, None)
                    }
                }
            };

            if full.is_some() {
                x += &z * t;
            }
            for (m, rj) in mult.iter_mut().zip(r.iter()) {
                *m -= t * rj;
            }
            mult_p += t;

            match drop {
                None => {
                    active.push(p);
                    mult.push(mult_p);
                    break;
                }
                Some(slot) => {
                    active.remove(slot);
                    mult.remove(slot);
                    if cons[p].residual(&x) >= -VIOLATION_TOL {
                        // A partial step can already have closed the gap.
                        active.push(p);
                        mult.push(mult_p);
                        break;
                    }
                }
            }
        }
    }
}

/// Primal direction `z` (component of `n_p` orthogonal to the active normals)
/// and dual direction `r` (coordinates of `n_p` in the active normals).
fn step_directions(
    cons: &[AffineConstraint],
    active: &[usize],
    np: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    if active.is_empty() {
        return (np.clone(), DVector::zeros(0));
    }
    let n = DMatrix::from_columns(
        &active
            .iter()
            .map(|&i| cons[i].normal.clone())
            .collect::<Vec<_>>(),
    );
    let gram = n.transpose() * &n;
    let rhs = n.transpose() * np;
    let r = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(active.len()));
    let z = np - &n * &r;
    (z, r)
}

/// Brute-force reference solver: tries every set of at most `dim` linearly
/// independent constraints as the active set and keeps the feasible KKT
/// point. Exponential in the constraint count; meant for cross-checking
/// [`solve`] on small problems.
pub fn solve_by_enumeration(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let dim = problem.reference.len();
    let m = problem.constraints.len();
    let mut best: Option<DVector<f64>> = None;

    for size in 0..=dim.min(m) {
        for subset in combinations(m, size) {
            let Some((u, mu)) = project_onto_equalities(problem, &subset) else {
                continue;
            };
            if mu.iter().any(|&v| v < -1e-9) {
                continue;
            }
            if problem.constraints.iter().all(|c| c.residual(&u) >= -1e-9) {
                let better = best
                    .as_ref()
                    .is_none_or(|b| problem.objective(&u) < problem.objective(b));
                if better {
                    best = Some(u);
                }
            }
        }
    }
    best.map(|u| QpSolution::at(problem, u))
        .ok_or(QpError::Infeasible)
}

/// Projects the reference onto `{u : n_j·u + b_j = 0, j ∈ subset}` and returns
/// the point with its multipliers, or `None` if the normals are dependent.
fn project_onto_equalities(
    problem: &QpProblem,
    subset: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let r = &problem.reference;
    if subset.is_empty() {
        return Some((r.clone(), DVector::zeros(0)));
    }
    let n = DMatrix::from_columns(
        &subset
            .iter()
            .map(|&i| problem.constraints[i].normal.clone())
            .collect::<Vec<_>>(),
    );
    let gram = n.transpose() * &n;
    if gram.determinant().abs() <= 1e-14 * gram.norm().powi(subset.len() as i32).max(1e-300) {
        return None;
    }
    let b = DVector::from_iterator(
        subset.len(),
        subset.iter().map(|&i| problem.constraints[i].offset),
    );
    let rhs = -(n.transpose() * r + b);
    let mu = gram.lu().solve(&rhs)?;
    Some((r + &n * &mu, mu))
}

/// KKT stationarity residual at `solution`: the distance from `u - u_ref` to
/// the cone generated by the normals of the active constraints.
pub fn kkt_residual(problem: &QpProblem, solution: &QpSolution) -> f64 {
    let g = &solution.decision - &problem.reference;
    let active = &solution.active_set;
    if active.is_empty() {
        return g.norm();
    }
    let dim = g.len();
    let mut best = g.norm();
    for size in 1..=dim.min(active.len()) {
        for picks in combinations(active.len(), size) {
            let cols: Vec<_> = picks
                .iter()
                .map(|&k| problem.constraints[active[k]].normal.clone())
                .collect();
            let n = DMatrix::from_columns(&cols);
            let gram = n.transpose() * &n;
            let Some(mu) = gram.lu().solve(&(n.transpose() * &g)) else {
                continue;
            };
            if mu.iter().all(|&v| v >= -1e-9) {
                best = best.min((&n * mu.map(|v| v.max(0.0)) - &g).norm());
            }
        }
    }
    best
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}
