//! A dense-block semidefinite-program solver in standard primal form.
//!
//! Problems are stated in the maximization convention:
//!
//! ```text
//!   maximize   sum_b <C_b, X_b> + c_f' f
//!   subject to sum_b <A_ib, X_b> + g_i' f = b_i   (i = 1..m)
//!              X_b  positive semidefinite,  f free
//! ```
//!
//! The solver runs a primal-dual interior-point method with Nesterov-Todd
//! scaling and a Mehrotra predictor-corrector on the homogeneous self-dual
//! embedding, so genuinely infeasible problems terminate with an
//! improving-ray certificate instead of an iteration limit. Equality presolve
//! removes dependent rows (rank-revealing orthogonalization, pivot threshold
//! 1e-10) and eliminates free-variable directions that no constraint pins
//! down.
//!
//! `solve` is a pure function of its inputs: identical input bytes produce
//! identical iterates. A single solve is internally single-threaded;
//! independent solves may run concurrently.

mod ipm;
mod presolve;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ipm::IpmTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("block {block} has dimension {dim}, exceeding the configured limit {limit}")]
    Capacity { block: usize, dim: usize, limit: usize },
    #[error("non-finite value in problem data ({context})")]
    Data { context: String },
    #[error("malformed problem: {0}")]
    Shape(String),
}

/// Sparse symmetric coefficient matrix for one PSD block; entries are stored
/// on the upper triangle (r <= c) and stand for the value at both (r,c) and
/// (c,r).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SymCoeffs {
    entries: Vec<(usize, usize, f64)>,
}

impl SymCoeffs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut raw: Vec<(usize, usize, f64)> = entries
            .into_iter()
            .map(|(r, c, v)| if r <= c { (r, c, v) } else { (c, r, v) })
            .collect();
        raw.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(raw.len());
        for (r, c, v) in raw {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|&(_, _, v)| v != 0.0);
        SymCoeffs { entries: merged }
    }

    pub fn identity(dim: usize) -> Self {
        SymCoeffs { entries: (0..dim).map(|i| (i, i, 1.0)).collect() }
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|&(_, c, _)| c).max()
    }

    /// Frobenius inner product with a symmetric matrix.
    pub fn inner(&self, x: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(r, c, v)| if r == c { v * x[(r, r)] } else { v * (x[(r, c)] + x[(c, r)]) })
            .sum()
    }

    /// Adds `scale` times this symmetric matrix into a dense accumulator.
    pub fn add_into(&self, acc: &mut DMatrix<f64>, scale: f64) {
        for &(r, c, v) in &self.entries {
            acc[(r, c)] += scale * v;
            if r != c {
                acc[(c, r)] += scale * v;
            }
        }
    }

    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(dim, dim);
        self.add_into(&mut m, 1.0);
        m
    }

    /// Squared Frobenius norm of the symmetric matrix.
    pub fn frob_sq(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(r, c, v)| if r == c { v * v } else { 2.0 * v * v })
            .sum()
    }
}

/// One equality constraint: `sum_b <A_ib, X_b> + g_i' f = rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqRow {
    /// Coefficient matrices keyed by block index (absent blocks contribute 0).
    pub blocks: Vec<(usize, SymCoeffs)>,
    /// Sparse coefficients on the free scalar variables.
    pub free: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl EqRow {
    pub fn new() -> Self {
        EqRow { blocks: Vec::new(), free: Vec::new(), rhs: 0.0 }
    }
}

impl Default for EqRow {
    fn default() -> Self {
        Self::new()
    }
}

/// Linear objective, maximized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Objective {
    pub blocks: Vec<(usize, SymCoeffs)>,
    pub free: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub block_dims: Vec<usize>,
    pub free_vars: usize,
    pub rows: Vec<EqRow>,
    pub objective: Objective,
}

impl SdpProblem {
    pub fn new(block_dims: Vec<usize>, free_vars: usize) -> Self {
        SdpProblem { block_dims, free_vars, rows: Vec::new(), objective: Objective::default() }
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    fn check_coeffs(&self, blocks: &[(usize, SymCoeffs)], free: &[(usize, f64)], what: &str) -> Result<(), SdpError> {
        for (b, coeffs) in blocks {
            let dim = *self
                .block_dims
                .get(*b)
                .ok_or_else(|| SdpError::Shape(format!("{what}: block index {b} out of range")))?;
            if let Some(maxi) = coeffs.max_index() {
                if maxi >= dim {
                    return Err(SdpError::Shape(format!(
                        "{what}: entry index {maxi} exceeds block {b} dimension {dim}"
                    )));
                }
            }
            if coeffs.entries.iter().any(|&(_, _, v)| !v.is_finite()) {
                return Err(SdpError::Data { context: what.to_string() });
            }
        }
        for &(k, v) in free {
            if k >= self.free_vars {
                return Err(SdpError::Shape(format!("{what}: free index {k} out of range")));
            }
            if !v.is_finite() {
                return Err(SdpError::Data { context: what.to_string() });
            }
        }
        Ok(())
    }

    pub fn validate(&self, settings: &SdpSettings) -> Result<(), SdpError> {
        for (b, &dim) in self.block_dims.iter().enumerate() {
            if dim == 0 {
                return Err(SdpError::Shape(format!("block {b} has dimension 0")));
            }
            if dim > settings.block_dim_limit {
                return Err(SdpError::Capacity { block: b, dim, limit: settings.block_dim_limit });
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(SdpError::Data { context: format!("rhs of row {i}") });
            }
            self.check_coeffs(&row.blocks, &row.free, &format!("row {i}"))?;
        }
        self.check_coeffs(&self.objective.blocks, &self.objective.free, "objective")?;
        Ok(())
    }

    /// Plain-text dump for cross-checking against external solvers.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "sdp-dump v1").unwrap();
        write!(out, "blocks").unwrap();
        for d in &self.block_dims {
            write!(out, " {d}").unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "free {}", self.free_vars).unwrap();
        writeln!(out, "objective maximize").unwrap();
        for (b, coeffs) in &self.objective.blocks {
            for &(r, c, v) in coeffs.entries() {
                writeln!(out, "  block {b} {r} {c} {v:.17e}").unwrap();
            }
        }
        for &(k, v) in &self.objective.free {
            writeln!(out, "  free {k} {v:.17e}").unwrap();
        }
        writeln!(out, "rows {}", self.rows.len()).unwrap();
        for (i, row) in self.rows.iter().enumerate() {
            writeln!(out, "row {i} rhs {:.17e}", row.rhs).unwrap();
            for (b, coeffs) in &row.blocks {
                for &(r, c, v) in coeffs.entries() {
                    writeln!(out, "  block {b} {r} {c} {v:.17e}").unwrap();
                }
            }
            for &(k, v) in &row.free {
                writeln!(out, "  free {k} {v:.17e}").unwrap();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpSettings {
    /// Residual tolerance for Optimal and for certificate acceptance.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest admissible PSD block dimension.
    pub block_dim_limit: usize,
}

impl Default for SdpSettings {
    fn default() -> Self {
        SdpSettings { tol: 1e-8, max_iter: 200, block_dim_limit: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub block_values: Vec<DMatrix<f64>>,
    pub free_values: Vec<f64>,
    /// Lagrange multipliers per equality row. For `Infeasible` this carries
    /// the improving-ray certificate: `A*(y)` negative semidefinite on every
    /// block, `G' y = 0`, `b' y = 1`.
    pub dual_values: Vec<f64>,
    pub residuals: Residuals,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
}

impl SdpSolution {
    pub(crate) fn empty(problem: &SdpProblem, status: SdpStatus) -> Self {
        SdpSolution {
            status,
            block_values: problem.block_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
            free_values: vec![0.0; problem.free_vars],
            dual_values: vec![0.0; problem.rows.len()],
            residuals: Residuals::default(),
            primal_objective: 0.0,
            dual_objective: 0.0,
            iterations: 0,
        }
    }
}

/// Recomputes feasibility residuals and the duality gap of a solution from
/// scratch.
///
/// * primal: `||A(X) + G f - b||_2 / (1 + ||b||_2)`
/// * dual: cone violation of the implied slack `S_b = A*_b(y) - C_b` (norm of
///   its negative eigenvalues) plus `||G' y - c_f||_2`, over `1 + ||C||_F`
/// * gap: `|obj_p - obj_d| / (1 + |obj_p| + |obj_d|)`
pub fn residuals(problem: &SdpProblem, solution: &SdpSolution) -> Result<Residuals, SdpError> {
    if solution.block_values.len() != problem.block_dims.len() {
        return Err(SdpError::Shape("block count mismatch".into()));
    }
    for (b, x) in solution.block_values.iter().enumerate() {
        let d = problem.block_dims[b];
        if x.shape() != (d, d) {
            return Err(SdpError::Shape(format!("block {b} value has wrong shape")));
        }
    }
    if solution.free_values.len() != problem.free_vars {
        return Err(SdpError::Shape("free variable count mismatch".into()));
    }
    if solution.dual_values.len() != problem.rows.len() {
        return Err(SdpError::Shape("dual value count mismatch".into()));
    }

    let m = problem.rows.len();
    let mut primal_viol = 0.0f64;
    let mut norm_b = 0.0f64;
    for row in &problem.rows {
        let mut lhs = 0.0;
        for (b, coeffs) in &row.blocks {
            lhs += coeffs.inner(&solution.block_values[*b]);
        }
        for &(k, v) in &row.free {
            lhs += v * solution.free_values[k];
        }
        primal_viol += (lhs - row.rhs).powi(2);
        norm_b += row.rhs * row.rhs;
    }
    let primal = primal_viol.sqrt() / (1.0 + norm_b.sqrt());

    // Implied dual slacks S_b = A*(y) - C_b.
    let mut slacks: Vec<DMatrix<f64>> =
        problem.block_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
    let mut gt_y = vec![0.0f64; problem.free_vars];
    for (i, row) in problem.rows.iter().enumerate() {
        let yi = solution.dual_values[i];
        if yi == 0.0 {
            continue;
        }
        for (b, coeffs) in &row.blocks {
            coeffs.add_into(&mut slacks[*b], yi);
        }
        for &(k, v) in &row.free {
            gt_y[k] += v * yi;
        }
    }
    let mut c_norm_sq = 0.0f64;
    for (b, coeffs) in &problem.objective.blocks {
        coeffs.add_into(&mut slacks[*b], -1.0);
        c_norm_sq += coeffs.frob_sq();
    }
    let mut free_viol_sq = 0.0f64;
    let mut c_free = vec![0.0f64; problem.free_vars];
    for &(k, v) in &problem.objective.free {
        c_free[k] += v;
        c_norm_sq += v * v;
    }
    for k in 0..problem.free_vars {
        free_viol_sq += (gt_y[k] - c_free[k]).powi(2);
    }
    let mut cone_viol_sq = 0.0f64;
    for s in &slacks {
        if s.nrows() == 0 {
            continue;
        }
        let sym = (s + s.transpose()) * 0.5;
        let eig = sym.symmetric_eigenvalues();
        cone_viol_sq += eig.iter().map(|&l| l.min(0.0).powi(2)).sum::<f64>();
    }
    let dual = (cone_viol_sq + free_viol_sq).sqrt() / (1.0 + c_norm_sq.sqrt());

    let mut obj_p = 0.0;
    for (b, coeffs) in &problem.objective.blocks {
        obj_p += coeffs.inner(&solution.block_values[*b]);
    }
    for &(k, v) in &problem.objective.free {
        obj_p += v * solution.free_values[k];
    }
    let obj_d: f64 = (0..m).map(|i| problem.rows[i].rhs * solution.dual_values[i]).sum();
    let gap = (obj_p - obj_d).abs() / (1.0 + obj_p.abs() + obj_d.abs());

    Ok(Residuals { primal, dual, gap })
}

/// Solves the problem. Returns `Err` only on malformed input; infeasibility,
/// unboundedness, and iteration limits are reported through the status.
pub fn solve(problem: &SdpProblem, settings: &SdpSettings) -> Result<SdpSolution, SdpError> {
    solve_traced(problem, settings).map(|(s, _)| s)
}

/// Like [`solve`], returning per-iteration trace data alongside.
pub fn solve_traced(
    problem: &SdpProblem,
    settings: &SdpSettings,
) -> Result<(SdpSolution, IpmTrace), SdpError> {
    problem.validate(settings)?;

    let pre = match presolve::presolve(problem)? {
        presolve::PresolveOutcome::Infeasible { farkas } => {
            let mut sol = SdpSolution::empty(problem, SdpStatus::Infeasible);
            sol.dual_values = farkas;
            sol.residuals = residuals(problem, &sol)?;
            return Ok((sol, IpmTrace::default()));
        }
        presolve::PresolveOutcome::Reduced(p) => p,
    };

    let (mut sol, trace) = if pre.reduced.block_dims.is_empty() {
        (solve_free_only(&pre.reduced)?, IpmTrace::default())
    } else {
        let out = ipm::run(&pre.reduced, settings);
        (out.0, out.1)
    };

    // Unpinned free directions with nonzero objective make any feasible
    // problem unbounded.
    if let Some(ray) = &pre.unbounded_ray {
        if matches!(sol.status, SdpStatus::Optimal) {
            let mut out = SdpSolution::empty(problem, SdpStatus::Unbounded);
            out.free_values = ray.clone();
            out.iterations = sol.iterations;
            out.residuals = residuals(problem, &out)?;
            return Ok((out, trace));
        }
    }

    // Map the reduced solution back to the original variable layout.
    let mut full = SdpSolution::empty(problem, sol.status);
    full.iterations = sol.iterations;
    full.block_values = std::mem::take(&mut sol.block_values);
    for (k, &orig) in pre.kept_free.iter().enumerate() {
        full.free_values[orig] = sol.free_values[k];
    }
    for (k, &orig) in pre.kept_rows.iter().enumerate() {
        full.dual_values[orig] = sol.dual_values[k];
    }
    full.primal_objective = sol.primal_objective;
    full.dual_objective = sol.dual_objective;
    full.residuals = residuals(problem, &full)?;

    // An Optimal status must be backed by residuals at tolerance on the
    // original data; downgrade honestly if the mapped-back point lost it.
    if matches!(full.status, SdpStatus::Optimal) {
        let r = full.residuals;
        if !(r.primal <= 10.0 * settings.tol && r.dual <= 10.0 * settings.tol && r.gap <= 10.0 * settings.tol) {
            full.status = SdpStatus::NumericalFailure;
        }
    }
    Ok((full, trace))
}

/// Direct linear-algebra path for problems with no PSD blocks. After
/// presolve the free columns and rows are independent, so the equality
/// system is square and invertible.
fn solve_free_only(problem: &SdpProblem) -> Result<SdpSolution, SdpError> {
    let m = problem.rows.len();
    let f = problem.free_vars;
    let mut sol = SdpSolution::empty(problem, SdpStatus::Optimal);
    if m == 0 && f == 0 {
        return Ok(sol);
    }
    debug_assert_eq!(m, f, "presolve leaves a square free system");
    let mut g = DMatrix::zeros(m, f);
    let mut b = DVector::zeros(m);
    for (i, row) in problem.rows.iter().enumerate() {
        for &(k, v) in &row.free {
            g[(i, k)] += v;
        }
        b[i] = row.rhs;
    }
    let lu = g.clone().lu();
    let x = lu
        .solve(&b)
        .ok_or_else(|| SdpError::Shape("free-only system is singular after presolve".into()))?;
    let mut c = DVector::zeros(f);
    for &(k, v) in &problem.objective.free {
        c[k] += v;
    }
    let y = g
        .transpose()
        .lu()
        .solve(&c)
        .ok_or_else(|| SdpError::Shape("free-only dual system is singular".into()))?;
    sol.free_values = x.iter().copied().collect();
    sol.dual_values = y.iter().copied().collect();
    sol.primal_objective = c.dot(&x);
    sol.dual_objective = b.dot(&y);
    Ok(sol)
}

#[cfg(test)]
mod tests;
