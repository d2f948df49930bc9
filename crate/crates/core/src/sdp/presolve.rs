//! Equality presolve: dependent-row removal with consistency checking, and
//! elimination of free-variable directions that no constraint pins down.

use nalgebra::{DMatrix, DVector};

use super::{EqRow, SdpError, SdpProblem};

/// Relative pivot threshold of the rank-revealing row orthogonalization.
const PIVOT_TOL: f64 = 1e-10;
/// Right-hand-side consistency tolerance for dropped dependent rows.
const CONSISTENCY_TOL: f64 = 1e-8;

pub enum PresolveOutcome {
    Reduced(Presolved),
    /// The equality system alone is contradictory; `farkas` is a combination
    /// with `A*(y) = 0`, `G'y = 0`, `b'y > 0` over the original rows.
    Infeasible { farkas: Vec<f64> },
}

pub struct Presolved {
    pub reduced: SdpProblem,
    /// Original index of each kept row.
    pub kept_rows: Vec<usize>,
    /// Original free-variable index of each reduced free variable.
    pub kept_free: Vec<usize>,
    /// Improving feasible direction (original free coordinates) found during
    /// column reduction; the problem is unbounded if it is feasible at all.
    pub unbounded_ray: Option<Vec<f64>>,
}

/// Offsets mapping (block, r<=c) pairs and free indices into one scalar
/// coordinate space; off-diagonal entries carry the svec factor sqrt(2) so
/// euclidean norms match Frobenius norms.
struct CoordMap {
    block_offsets: Vec<usize>,
    free_offset: usize,
    total: usize,
}

impl CoordMap {
    fn new(problem: &SdpProblem) -> Self {
        let mut block_offsets = Vec::with_capacity(problem.block_dims.len());
        let mut acc = 0usize;
        for &d in &problem.block_dims {
            block_offsets.push(acc);
            acc += d * (d + 1) / 2;
        }
        CoordMap { block_offsets, free_offset: acc, total: acc + problem.free_vars }
    }

    fn tri_index(dim: usize, r: usize, c: usize) -> usize {
        // Upper-triangle row-major index of (r, c) with r <= c.
        r * dim - r * (r + 1) / 2 + c
    }

    fn scatter(&self, problem: &SdpProblem, row: &EqRow) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (b, coeffs) in &row.blocks {
            let dim = problem.block_dims[*b];
            let base = self.block_offsets[*b];
            for &(r, c, v) in coeffs.entries() {
                let scale = if r == c { 1.0 } else { std::f64::consts::SQRT_2 };
                out.push((base + Self::tri_index(dim, r, c), scale * v));
            }
        }
        for &(k, v) in &row.free {
            out.push((self.free_offset + k, v));
        }
        out
    }
}

pub fn presolve(problem: &SdpProblem) -> Result<PresolveOutcome, SdpError> {
    let m = problem.rows.len();
    let coords = CoordMap::new(problem);

    // Sparse coordinate form of every row.
    let scattered: Vec<Vec<(usize, f64)>> =
        problem.rows.iter().map(|row| coords.scatter(problem, row)).collect();

    // Rows holding a coordinate that no other row touches are independent of
    // everything; any linear dependence is confined to the remaining rows.
    let mut touch_count = vec![0u32; coords.total];
    for entries in &scattered {
        for &(idx, v) in entries {
            if v.abs() > 1e-12 {
                touch_count[idx] += 1;
            }
        }
    }
    let certified: Vec<bool> = scattered
        .iter()
        .map(|entries| entries.iter().any(|&(idx, v)| v.abs() > 1e-12 && touch_count[idx] == 1))
        .collect();

    // Modified Gram-Schmidt over the uncertified rows, tracking each basis
    // vector's expansion in original rows so dropped rows can be checked for
    // right-hand-side consistency (and turned into a Farkas certificate when
    // inconsistent).
    let mut keep = vec![true; m];
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut expansions: Vec<Vec<(usize, f64)>> = Vec::new();
    for i in 0..m {
        if certified[i] {
            continue;
        }
        let mut v = DVector::zeros(coords.total);
        for &(idx, val) in &scattered[i] {
            v[idx] += val;
        }
        let nrm0 = v.norm();
        if nrm0 <= 1e-300 {
            // Zero row: consistent iff rhs is (numerically) zero.
            if problem.rows[i].rhs.abs() > CONSISTENCY_TOL {
                let mut farkas = vec![0.0; m];
                farkas[i] = 1.0 / problem.rows[i].rhs;
                return Ok(PresolveOutcome::Infeasible { farkas });
            }
            keep[i] = false;
            continue;
        }
        // Two orthogonalization passes for stability.
        let mut alphas = vec![0.0f64; basis.len()];
        for _ in 0..2 {
            for (j, q) in basis.iter().enumerate() {
                let a = v.dot(q);
                alphas[j] += a;
                v.axpy(-a, q, 1.0);
            }
        }
        let nrm = v.norm();
        if nrm > PIVOT_TOL * nrm0 {
            let mut exp: std::collections::BTreeMap<usize, f64> = Default::default();
            exp.insert(i, 1.0 / nrm);
            for (j, &a) in alphas.iter().enumerate() {
                for &(l, w) in &expansions[j] {
                    *exp.entry(l).or_insert(0.0) -= a / nrm * w;
                }
            }
            expansions.push(exp.into_iter().collect());
            basis.push(v / nrm);
        } else {
            // Dependent: row_i ~= sum_l beta_l row_l over kept rows.
            let mut beta: std::collections::BTreeMap<usize, f64> = Default::default();
            for (j, &a) in alphas.iter().enumerate() {
                for &(l, w) in &expansions[j] {
                    *beta.entry(l).or_insert(0.0) += a * w;
                }
            }
            let b_pred: f64 = beta.iter().map(|(&l, &w)| w * problem.rows[l].rhs).sum();
            let scale: f64 =
                1.0 + problem.rows[i].rhs.abs() + beta.iter().map(|(&l, &w)| (w * problem.rows[l].rhs).abs()).sum::<f64>();
            let resid = problem.rows[i].rhs - b_pred;
            if resid.abs() > CONSISTENCY_TOL * scale {
                let mut farkas = vec![0.0; m];
                farkas[i] = 1.0;
                for (&l, &w) in &beta {
                    farkas[l] -= w;
                }
                let norm = resid; // b'y = resid; normalize to +1
                for y in &mut farkas {
                    *y /= norm;
                }
                return Ok(PresolveOutcome::Infeasible { farkas });
            }
            keep[i] = false;
        }
    }

    let kept_rows: Vec<usize> = (0..m).filter(|&i| keep[i]).collect();

    // Free-column reduction on the kept rows: column-pivoted QR of G finds
    // the directions actually pinned by constraints.
    let f0 = problem.free_vars;
    let mk = kept_rows.len();
    let (kept_free, unbounded_ray) = if f0 == 0 {
        (Vec::new(), None)
    } else {
        let mut g = DMatrix::<f64>::zeros(mk, f0);
        for (ri, &i) in kept_rows.iter().enumerate() {
            for &(k, v) in &problem.rows[i].free {
                g[(ri, k)] += v;
            }
        }
        reduce_free_columns(&g, problem, f0)?
    };

    // Assemble the reduced problem.
    let free_pos: std::collections::HashMap<usize, usize> =
        kept_free.iter().enumerate().map(|(new, &orig)| (orig, new)).collect();
    let mut reduced = SdpProblem::new(problem.block_dims.clone(), kept_free.len());
    for &i in &kept_rows {
        let row = &problem.rows[i];
        let free: Vec<(usize, f64)> = row
            .free
            .iter()
            .filter_map(|&(k, v)| free_pos.get(&k).map(|&nk| (nk, v)))
            .collect();
        reduced.rows.push(EqRow { blocks: row.blocks.clone(), free, rhs: row.rhs });
    }
    reduced.objective.blocks = problem.objective.blocks.clone();
    reduced.objective.free = problem
        .objective
        .free
        .iter()
        .filter_map(|&(k, v)| free_pos.get(&k).map(|&nk| (nk, v)))
        .collect();

    Ok(PresolveOutcome::Reduced(Presolved { reduced, kept_rows, kept_free, unbounded_ray }))
}

/// Returns the pinned (kept) free columns and, when an unpinned direction
/// carries nonzero objective, a feasible improving ray in original free
/// coordinates.
fn reduce_free_columns(
    g: &DMatrix<f64>,
    problem: &SdpProblem,
    f0: usize,
) -> Result<(Vec<usize>, Option<Vec<f64>>), SdpError> {
    let mk = g.nrows();
    if mk == 0 {
        // Nothing pins any free variable.
        let mut c = vec![0.0f64; f0];
        for &(k, v) in &problem.objective.free {
            c[k] += v;
        }
        if let Some(k) = c.iter().position(|&v| v.abs() > 1e-12) {
            let mut ray = vec![0.0; f0];
            ray[k] = c[k].signum();
            return Ok((Vec::new(), Some(ray)));
        }
        return Ok((Vec::new(), None));
    }

    let qr = g.clone().col_piv_qr();
    // Recover the column permutation by permuting an index row.
    let mut idx = DMatrix::<f64>::zeros(1, f0);
    for k in 0..f0 {
        idx[(0, k)] = k as f64;
    }
    qr.p().permute_columns(&mut idx);
    let perm: Vec<usize> = (0..f0).map(|k| idx[(0, k)] as usize).collect();

    let r_mat = qr.r();
    let diag_max = (0..r_mat.nrows().min(r_mat.ncols()))
        .map(|k| r_mat[(k, k)].abs())
        .fold(0.0f64, f64::max);
    let thresh = PIVOT_TOL * diag_max.max(1e-300);
    let rank = (0..r_mat.nrows().min(r_mat.ncols()))
        .take_while(|&k| r_mat[(k, k)].abs() > thresh)
        .count();

    let kept_free: Vec<usize> = perm[..rank].to_vec();
    if rank == f0 {
        return Ok((kept_free, None));
    }

    // Dropped columns are combinations of kept ones: G2 = G1 * W with
    // W = R11^{-1} R12. A dropped direction with nonzero reduced objective
    // is an improving ray.
    let r11 = r_mat.view((0, 0), (rank, rank)).into_owned();
    let r12 = r_mat.view((0, rank), (rank, f0 - rank)).into_owned();
    let mut c = vec![0.0f64; f0];
    for &(k, v) in &problem.objective.free {
        c[k] += v;
    }
    let c1 = DVector::from_iterator(rank, perm[..rank].iter().map(|&k| c[k]));
    for (j, &orig_col) in perm[rank..].iter().enumerate() {
        let w = solve_upper(&r11, &r12.column(j).into_owned());
        let cbar = c[orig_col] - w.dot(&c1);
        if cbar.abs() > 1e-9 * (1.0 + c.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            let s = cbar.signum();
            let mut ray = vec![0.0; f0];
            ray[orig_col] = s;
            for (l, &orig_kept) in perm[..rank].iter().enumerate() {
                ray[orig_kept] = -s * w[l];
            }
            return Ok((kept_free, Some(ray)));
        }
    }
    Ok((kept_free, None))
}

fn solve_upper(r: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = r.nrows();
    let mut x = DVector::zeros(n);
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= r[(i, j)] * x[j];
        }
        x[i] = acc / r[(i, i)];
    }
    x
}
