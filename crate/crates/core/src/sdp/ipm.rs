//! Homogeneous self-dual interior-point core: Nesterov-Todd scaling with a
//! Mehrotra predictor-corrector, dense block factorizations, and certificate
//! extraction for infeasible or unbounded problems.
//!
//! Internally the problem is minimized (`C := -C_max`); signs are mapped back
//! when the solution is assembled.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{SdpProblem, SdpSettings, SdpSolution, SdpStatus, SymCoeffs};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IpmTrace {
    pub iterations: Vec<IterStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterStat {
    pub mu: f64,
    pub step: f64,
    pub sigma: f64,
    pub rel_primal: f64,
    pub rel_dual: f64,
    pub rel_gap: f64,
}

struct Data<'a> {
    dims: Vec<usize>,
    rows: &'a [super::EqRow],
    /// Rows touching each block, by row index.
    rows_on_block: Vec<Vec<usize>>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    /// Dense objective blocks, minimization sign.
    c_blocks: Vec<DMatrix<f64>>,
    c_free: DVector<f64>,
    norm_b: f64,
    norm_c: f64,
    /// Largest row norm (Frobenius over blocks plus free part).
    norm_rows: f64,
    m: usize,
    nf: usize,
    nu: f64,
}

struct State {
    x: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    y: DVector<f64>,
    f: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Scaling {
    /// R factor per block: `R' S R = R^-1 X R^-T = diag(lambda)`.
    r: Vec<DMatrix<f64>>,
    r_inv: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
    lambda: Vec<DVector<f64>>,
    chol_x: Vec<Cholesky<f64, nalgebra::Dyn>>,
    chol_s: Vec<Cholesky<f64, nalgebra::Dyn>>,
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    ds: Vec<DMatrix<f64>>,
    dy: DVector<f64>,
    df: DVector<f64>,
    dtau: f64,
    dkappa: f64,
}

pub fn run(problem: &SdpProblem, settings: &SdpSettings) -> (SdpSolution, IpmTrace) {
    let data = prepare(problem);
    let mut st = State {
        x: data.dims.iter().map(|&d| DMatrix::identity(d, d)).collect(),
        s: data.dims.iter().map(|&d| DMatrix::identity(d, d)).collect(),
        y: DVector::zeros(data.m),
        f: DVector::zeros(data.nf),
        tau: 1.0,
        kappa: 1.0,
    };
    let mut trace = IpmTrace::default();
    let mut status = SdpStatus::MaxIterations;
    let mut iterations = 0usize;
    let mut tiny_steps = 0usize;

    for iter in 0..settings.max_iter {
        iterations = iter;

        // Homogeneous residuals.
        let ax = apply_a(&data, &st.x, &st.f);
        let aty = apply_at(&data, &st.y);
        let r_p = &data.b * st.tau - &ax;
        let r_d: Vec<DMatrix<f64>> = (0..data.dims.len())
            .map(|b| &data.c_blocks[b] * st.tau - &aty[b] - &st.s[b])
            .collect();
        let r_f = &data.c_free * st.tau - apply_gt(&data, &st.y);
        let obj_p_h = inner_blocks(&data.c_blocks, &st.x) + data.c_free.dot(&st.f);
        let by = data.b.dot(&st.y);
        let r_g = obj_p_h + st.kappa - by;

        // De-homogenized convergence metrics.
        let rel_p = r_p.norm() / st.tau / (1.0 + data.norm_b);
        let rel_d = {
            let blocks: f64 = r_d.iter().map(|m| m.norm_squared()).sum();
            (blocks + r_f.norm_squared()).sqrt() / st.tau / (1.0 + data.norm_c)
        };
        let obj_p = obj_p_h / st.tau;
        let obj_d = by / st.tau;
        let rel_gap = (obj_p - obj_d).abs() / (1.0 + obj_p.abs() + obj_d.abs());

        let mu = (dot_blocks(&st.x, &st.s) + st.tau * st.kappa) / data.nu;
        trace.iterations.push(IterStat {
            mu,
            step: 0.0,
            sigma: 0.0,
            rel_primal: rel_p,
            rel_dual: rel_d,
            rel_gap,
        });

        if rel_p <= settings.tol && rel_d <= settings.tol && rel_gap <= settings.tol {
            status = SdpStatus::Optimal;
            break;
        }
        // Certificates only make sense in the ray regime of the embedding
        // (tau collapsing against kappa); a feasible problem close to
        // optimality can otherwise masquerade as a ray.
        if st.tau < 0.1 * st.kappa {
            if let Some(st_inf) = certificate_status(&data, &st, &aty, settings.tol) {
                status = st_inf;
                break;
            }
        }

        // Nesterov-Todd scaling, Schur complement, factorization.
        let scaling = match nt_scaling(&st) {
            Some(s) => s,
            None => {
                status = SdpStatus::NumericalFailure;
                break;
            }
        };
        let (schur, chol_m) = match build_schur(&data, &scaling) {
            Some(x) => x,
            None => {
                status = SdpStatus::NumericalFailure;
                break;
            }
        };

        // Iteration-constant pieces of the reduced system.
        let wcw: Vec<DMatrix<f64>> = (0..data.dims.len())
            .map(|b| &scaling.w[b] * &data.c_blocks[b] * &scaling.w[b])
            .collect();
        let a_wcw = apply_a_blocks(&data, &wcw);
        let u = &a_wcw + &data.b;
        let c_wcw = inner_blocks(&data.c_blocks, &wcw);
        let v_vec = &data.b - &a_wcw;
        let y_u = solve_refined(&chol_m, &schur, &u);
        let y1: Vec<DVector<f64>> = (0..data.nf)
            .map(|k| solve_refined(&chol_m, &schur, &data.g.column(k).into_owned()))
            .collect();
        let h_chol = if data.nf > 0 {
            let mut h = DMatrix::zeros(data.nf, data.nf);
            for i in 0..data.nf {
                for j in 0..data.nf {
                    h[(i, j)] = data.g.column(i).dot(&y1[j]);
                }
            }
            h = (&h + &h.transpose()) * 0.5;
            match chol_with_bump(&h) {
                Some(c) => Some(c),
                None => {
                    status = SdpStatus::NumericalFailure;
                    break;
                }
            }
        } else {
            None
        };
        let b_f = h_chol.as_ref().map(|h| {
            let gy: DVector<f64> =
                DVector::from_iterator(data.nf, (0..data.nf).map(|k| data.g.column(k).dot(&y_u)));
            h.solve(&(gy - &data.c_free))
        });

        let ctx = SolveCtx {
            data: &data,
            scaling: &scaling,
            chol_m: &chol_m,
            schur: &schur,
            c_wcw,
            v_vec: &v_vec,
            y_u: &y_u,
            y1: &y1,
            h_chol: h_chol.as_ref(),
            b_f: b_f.as_ref(),
            r_p: &r_p,
            r_d: &r_d,
            r_f: &r_f,
            r_g,
            tau: st.tau,
            kappa: st.kappa,
        };

        // Predictor: plain Newton toward the boundary.
        let e_aff: Vec<DMatrix<f64>> = scaling
            .lambda
            .iter()
            .map(|l| DMatrix::from_diagonal(&l.map(|v| -v)))
            .collect();
        let aff = match solve_direction(&ctx, &e_aff, -st.tau * st.kappa) {
            Some(d) => d,
            None => {
                status = SdpStatus::NumericalFailure;
                break;
            }
        };
        let alpha_aff = step_length(&st, &scaling, &aff, 1.0);
        let mu_aff = mu_after(&st, &aff, alpha_aff, data.nu);
        let sigma = (mu_aff / mu).powi(3).clamp(1e-12, 0.999_999);

        // Corrector with the Mehrotra second-order term.
        let e_corr: Vec<DMatrix<f64>> = (0..data.dims.len())
            .map(|b| {
                let rinv = &scaling.r_inv[b];
                let r = &scaling.r[b];
                let dxt = rinv * &aff.dx[b] * rinv.transpose();
                let dst = r.transpose() * &aff.ds[b] * r;
                let gamma = (&dxt * &dst + &dst * &dxt) * 0.5;
                let l = &scaling.lambda[b];
                let n = l.len();
                DMatrix::from_fn(n, n, |i, j| {
                    let num = if i == j { sigma * mu - l[i] * l[j] } else { 0.0 } - gamma[(i, j)];
                    2.0 * num / (l[i] + l[j])
                })
            })
            .collect();
        let e_tau = sigma * mu - st.tau * st.kappa - aff.dtau * aff.dkappa;
        let dir = match solve_direction(&ctx, &e_corr, e_tau) {
            Some(d) => d,
            None => {
                status = SdpStatus::NumericalFailure;
                break;
            }
        };
        let alpha = 0.99 * step_length(&st, &scaling, &dir, 1.0 / 0.99);

        for b in 0..data.dims.len() {
            st.x[b] += &dir.dx[b] * alpha;
            st.s[b] += &dir.ds[b] * alpha;
            symmetrize(&mut st.x[b]);
            symmetrize(&mut st.s[b]);
        }
        st.y += &dir.dy * alpha;
        st.f += &dir.df * alpha;
        st.tau += alpha * dir.dtau;
        st.kappa += alpha * dir.dkappa;

        if let Some(last) = trace.iterations.last_mut() {
            last.step = alpha;
            last.sigma = sigma;
        }

        if !st.tau.is_finite() || !st.kappa.is_finite() || st.tau <= 0.0 || st.kappa < 0.0 {
            status = SdpStatus::NumericalFailure;
            break;
        }
        if alpha < 1e-7 {
            tiny_steps += 1;
            if tiny_steps >= 5 {
                status = SdpStatus::NumericalFailure;
                break;
            }
        } else {
            tiny_steps = 0;
        }
    }

    // Last-resort certificate scan with a looser acceptance when the loop
    // exhausted itself while tau collapsed.
    if matches!(status, SdpStatus::MaxIterations | SdpStatus::NumericalFailure)
        && st.tau < 0.1 * st.kappa
        && st.tau < 1e-6
    {
        let aty = apply_at(&data, &st.y);
        if let Some(stat) = certificate_status(&data, &st, &aty, 1e-6) {
            status = stat;
        }
    }

    (assemble(problem, &data, &st, status, iterations), trace)
}

fn prepare(problem: &SdpProblem) -> Data<'_> {
    let dims = problem.block_dims.clone();
    let m = problem.rows.len();
    let nf = problem.free_vars;
    let mut rows_on_block = vec![Vec::new(); dims.len()];
    for (i, row) in problem.rows.iter().enumerate() {
        for (b, coeffs) in &row.blocks {
            if !coeffs.is_empty() {
                rows_on_block[*b].push(i);
            }
        }
    }
    let b = DVector::from_iterator(m, problem.rows.iter().map(|r| r.rhs));
    let mut g = DMatrix::zeros(m, nf);
    for (i, row) in problem.rows.iter().enumerate() {
        for &(k, v) in &row.free {
            g[(i, k)] += v;
        }
    }
    // Minimization sign.
    let mut c_blocks: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
    for (bi, coeffs) in &problem.objective.blocks {
        coeffs.add_into(&mut c_blocks[*bi], -1.0);
    }
    let mut c_free = DVector::zeros(nf);
    for &(k, v) in &problem.objective.free {
        c_free[k] -= v;
    }
    let norm_b = b.norm();
    let c_sq: f64 = c_blocks.iter().map(|c| c.norm_squared()).sum::<f64>() + c_free.norm_squared();
    let norm_c = c_sq.sqrt();
    let norm_rows = problem
        .rows
        .iter()
        .map(|row| {
            let blocks: f64 = row.blocks.iter().map(|(_, c)| c.frob_sq()).sum();
            let free: f64 = row.free.iter().map(|&(_, v)| v * v).sum();
            (blocks + free).sqrt()
        })
        .fold(0.0, f64::max)
        .max(1e-300);
    let nu = dims.iter().sum::<usize>() as f64 + 1.0;
    Data { dims, rows: &problem.rows, rows_on_block, b, g, c_blocks, c_free, norm_b, norm_c, norm_rows, m, nf, nu }
}

fn apply_a(data: &Data, x: &[DMatrix<f64>], f: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        data.m,
        data.rows.iter().map(|row| {
            let mut acc = 0.0;
            for (b, coeffs) in &row.blocks {
                acc += coeffs.inner(&x[*b]);
            }
            for &(k, v) in &row.free {
                acc += v * f[k];
            }
            acc
        }),
    )
}

fn apply_a_blocks(data: &Data, x: &[DMatrix<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        data.m,
        data.rows.iter().map(|row| {
            row.blocks.iter().map(|(b, coeffs)| coeffs.inner(&x[*b])).sum::<f64>()
        }),
    )
}

fn apply_at(data: &Data, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let mut out: Vec<DMatrix<f64>> = data.dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
    for (i, row) in data.rows.iter().enumerate() {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        for (b, coeffs) in &row.blocks {
            coeffs.add_into(&mut out[*b], yi);
        }
    }
    out
}

fn apply_gt(data: &Data, y: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(data.nf, (0..data.nf).map(|k| data.g.column(k).dot(y)))
}

fn inner_blocks(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn dot_blocks(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    inner_blocks(a, b)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky with escalating diagonal regularization.
fn chol_with_bump(m: &DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let scale = m.diagonal().amax().max(1e-300);
    let n = m.nrows();
    let mut bump = 1e-14;
    while bump <= 1e-6 {
        let reg = m + DMatrix::identity(n, n) * (bump * scale);
        if let Some(c) = Cholesky::new(reg) {
            return Some(c);
        }
        bump *= 100.0;
    }
    None
}

fn nt_scaling(st: &State) -> Option<Scaling> {
    let nb = st.x.len();
    let mut r = Vec::with_capacity(nb);
    let mut r_inv = Vec::with_capacity(nb);
    let mut w = Vec::with_capacity(nb);
    let mut lambda = Vec::with_capacity(nb);
    let mut chol_x = Vec::with_capacity(nb);
    let mut chol_s = Vec::with_capacity(nb);
    for b in 0..nb {
        let n = st.x[b].nrows();
        let cx = chol_with_bump(&st.x[b])?;
        let cs = chol_with_bump(&st.s[b])?;
        let l = cx.l();
        let ls = cs.l();
        // SVD of Ls' L: R = L V Sigma^{-1/2} gives R'SR = R^-1 X R^-T = Sigma.
        let svd = (ls.transpose() * &l).svd(false, true);
        let vt = svd.v_t.as_ref()?;
        let sing = svd.singular_values.map(|v| v.max(1e-150));
        let inv_sqrt = DMatrix::from_diagonal(&sing.map(|v| 1.0 / v.sqrt()));
        let sqrt_d = DMatrix::from_diagonal(&sing.map(|v| v.sqrt()));
        let v_m = vt.transpose();
        let r_b = &l * &v_m * &inv_sqrt;
        // R^-1 = Sigma^{1/2} V' L^-1.
        let n_id = DMatrix::identity(n, n);
        let l_inv = l.solve_lower_triangular(&n_id)?;
        let rinv_b = &sqrt_d * v_m.transpose() * &l_inv;
        let w_b = &r_b * r_b.transpose();
        r.push(r_b);
        r_inv.push(rinv_b);
        w.push(w_b);
        lambda.push(DVector::from_iterator(n, sing.iter().copied()));
        chol_x.push(cx);
        chol_s.push(cs);
    }
    Some(Scaling { r, r_inv, w, lambda, chol_x, chol_s })
}

/// Schur complement `M_ij = sum_b <A_ib, W_b A_jb W_b>`, assembled blockwise
/// with sparse coefficient lists.
fn build_schur(
    data: &Data,
    scaling: &Scaling,
) -> Option<(DMatrix<f64>, Cholesky<f64, nalgebra::Dyn>)> {
    let m = data.m;
    let mut schur = DMatrix::zeros(m, m);
    for b in 0..data.dims.len() {
        let rows = &data.rows_on_block[b];
        if rows.is_empty() {
            continue;
        }
        let wb = &scaling.w[b];
        let n = data.dims[b];
        let mut t = DMatrix::zeros(n, n);
        for &j in rows {
            t.fill(0.0);
            let coeffs_j = row_block_coeffs(data, j, b);
            for &(r, c, v) in coeffs_j.entries() {
                // v * (w_r w_c' + w_c w_r'), halved on the diagonal entry case.
                let wr = wb.column(r);
                let wc = wb.column(c);
                if r == c {
                    for p in 0..n {
                        let wrp = wr[p] * v;
                        for q in 0..n {
                            t[(p, q)] += wrp * wc[q];
                        }
                    }
                } else {
                    for p in 0..n {
                        let wrp = wr[p] * v;
                        let wcp = wc[p] * v;
                        for q in 0..n {
                            t[(p, q)] += wrp * wc[q] + wcp * wr[q];
                        }
                    }
                }
            }
            for &i in rows {
                if i > j {
                    continue;
                }
                let mij = row_block_coeffs(data, i, b).inner(&t);
                schur[(i, j)] += mij;
                if i != j {
                    schur[(j, i)] += mij;
                }
            }
        }
    }
    let chol = chol_with_bump(&schur)?;
    Some((schur, chol))
}

fn row_block_coeffs<'a>(data: &'a Data, row: usize, block: usize) -> &'a SymCoeffs {
    data.rows[row]
        .blocks
        .iter()
        .find(|(b, _)| *b == block)
        .map(|(_, c)| c)
        .expect("row listed on block")
}

fn solve_refined(
    chol: &Cholesky<f64, nalgebra::Dyn>,
    m: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> DVector<f64> {
    let mut x = chol.solve(rhs);
    let r = rhs - m * &x;
    x += chol.solve(&r);
    x
}

struct SolveCtx<'a> {
    data: &'a Data<'a>,
    scaling: &'a Scaling,
    chol_m: &'a Cholesky<f64, nalgebra::Dyn>,
    schur: &'a DMatrix<f64>,
    c_wcw: f64,
    v_vec: &'a DVector<f64>,
    y_u: &'a DVector<f64>,
    y1: &'a [DVector<f64>],
    h_chol: Option<&'a Cholesky<f64, nalgebra::Dyn>>,
    b_f: Option<&'a DVector<f64>>,
    r_p: &'a DVector<f64>,
    r_d: &'a [DMatrix<f64>],
    r_f: &'a DVector<f64>,
    r_g: f64,
    tau: f64,
    kappa: f64,
}

/// Solves one Newton system of the embedding for a given complementarity
/// target (`e` per block in scaled space, `e_tau` for the tau/kappa pair),
/// with full-system iterative refinement against the exact linearization.
/// Refinement matters late in the run, when the scaling sandwich `W(.)W`
/// carries a condition number of order 1/mu and a single pass loses several
/// digits of the primal row.
fn solve_direction(ctx: &SolveCtx, e: &[DMatrix<f64>], e_tau: f64) -> Option<Direction> {
    let mut dir = solve_direction_raw(ctx, ctx.r_p, ctx.r_d, ctx.r_f, ctx.r_g, e, e_tau)?;
    for _ in 0..2 {
        let (rho_p, rho_d, rho_f, rho_g, rho_e, rho_tau) =
            newton_residual(ctx, &dir, e, e_tau);
        let err = rho_p.norm()
            + rho_d.iter().map(|m| m.norm()).sum::<f64>()
            + rho_f.norm()
            + rho_g.abs()
            + rho_e.iter().map(|m| m.norm()).sum::<f64>()
            + rho_tau.abs();
        let scale = 1.0
            + ctx.r_p.norm()
            + ctx.r_d.iter().map(|m| m.norm()).sum::<f64>()
            + e.iter().map(|m| m.norm()).sum::<f64>();
        if err <= 1e-13 * scale {
            break;
        }
        let corr = solve_direction_raw(ctx, &rho_p, &rho_d, &rho_f, rho_g, &rho_e, rho_tau)?;
        for b in 0..dir.dx.len() {
            dir.dx[b] += &corr.dx[b];
            dir.ds[b] += &corr.ds[b];
        }
        dir.dy += &corr.dy;
        dir.df += &corr.df;
        dir.dtau += corr.dtau;
        dir.dkappa += corr.dkappa;
    }
    Some(dir)
}

/// Residuals of the exact Newton equations at a candidate direction.
fn newton_residual(
    ctx: &SolveCtx,
    dir: &Direction,
    e: &[DMatrix<f64>],
    e_tau: f64,
) -> (DVector<f64>, Vec<DMatrix<f64>>, DVector<f64>, f64, Vec<DMatrix<f64>>, f64) {
    let data = ctx.data;
    let nb = data.dims.len();
    let a_dx = apply_a(data, &dir.dx, &dir.df);
    let aty_dy = apply_at(data, &dir.dy);
    let rho_p = ctx.r_p - (a_dx - &data.b * dir.dtau);
    let mut rho_d = Vec::with_capacity(nb);
    let mut rho_e = Vec::with_capacity(nb);
    for b in 0..nb {
        rho_d.push(&ctx.r_d[b] - (&aty_dy[b] + &dir.ds[b] - &data.c_blocks[b] * dir.dtau));
        let rinv = &ctx.scaling.r_inv[b];
        let r = &ctx.scaling.r[b];
        let dxt = rinv * &dir.dx[b] * rinv.transpose();
        let dst = r.transpose() * &dir.ds[b] * r;
        rho_e.push(&e[b] - (dxt + dst));
    }
    let rho_f = ctx.r_f - (apply_gt(data, &dir.dy) - &data.c_free * dir.dtau);
    let rho_g = ctx.r_g
        - (data.b.dot(&dir.dy)
            - inner_blocks(&data.c_blocks, &dir.dx)
            - data.c_free.dot(&dir.df)
            - dir.dkappa);
    let rho_tau = e_tau - (ctx.kappa * dir.dtau + ctx.tau * dir.dkappa);
    (rho_p, rho_d, rho_f, rho_g, rho_e, rho_tau)
}

#[allow(clippy::too_many_arguments)]
fn solve_direction_raw(
    ctx: &SolveCtx,
    r_p: &DVector<f64>,
    r_d: &[DMatrix<f64>],
    r_f: &DVector<f64>,
    r_g: f64,
    e: &[DMatrix<f64>],
    e_tau: f64,
) -> Option<Direction> {
    let data = ctx.data;
    let nb = data.dims.len();

    // P_b = W (F - R_D) W with F = R^-T E R^-1.
    let mut p_blocks = Vec::with_capacity(nb);
    for b in 0..nb {
        let rinv = &ctx.scaling.r_inv[b];
        let f_b = rinv.transpose() * &e[b] * rinv;
        let inner = &f_b - &r_d[b];
        p_blocks.push(&ctx.scaling.w[b] * inner * &ctx.scaling.w[b]);
    }
    let r1 = r_p - apply_a_blocks(data, &p_blocks);
    let r2 = r_g + e_tau / ctx.tau + inner_blocks(&data.c_blocks, &p_blocks);

    let y_r = solve_refined(ctx.chol_m, ctx.schur, &r1);

    let (a_f, a_y) = if let (Some(h), Some(_)) = (ctx.h_chol, ctx.b_f) {
        let gy_r: DVector<f64> =
            DVector::from_iterator(data.nf, (0..data.nf).map(|k| data.g.column(k).dot(&y_r)));
        let a_f = h.solve(&(gy_r - r_f));
        let mut a_y = y_r.clone();
        for k in 0..data.nf {
            a_y.axpy(-a_f[k], &ctx.y1[k], 1.0);
        }
        (a_f, a_y)
    } else {
        (DVector::zeros(0), y_r.clone())
    };
    let b_y = if let Some(b_f) = ctx.b_f {
        let mut b_y = ctx.y_u.clone();
        for k in 0..data.nf {
            b_y.axpy(-b_f[k], &ctx.y1[k], 1.0);
        }
        b_y
    } else {
        ctx.y_u.clone()
    };

    let cf_bf = ctx.b_f.map(|b_f| data.c_free.dot(b_f)).unwrap_or(0.0);
    let cf_af = if data.nf > 0 { data.c_free.dot(&a_f) } else { 0.0 };
    let denom = ctx.v_vec.dot(&b_y) - cf_bf + ctx.c_wcw + ctx.kappa / ctx.tau;
    if !denom.is_finite() || denom.abs() < 1e-300 {
        return None;
    }
    let dtau = (r2 - ctx.v_vec.dot(&a_y) + cf_af) / denom;
    let dy = &a_y + &b_y * dtau;
    let df = if data.nf > 0 {
        &a_f + ctx.b_f.unwrap() * dtau
    } else {
        DVector::zeros(0)
    };

    let aty_d = apply_at(data, &dy);
    let mut dx = Vec::with_capacity(nb);
    let mut ds = Vec::with_capacity(nb);
    for b in 0..nb {
        let rinv = &ctx.scaling.r_inv[b];
        let f_b = rinv.transpose() * &e[b] * rinv;
        // dX = W (A*(dy) - C dtau + F - R_D) W; dS from the dual row exactly.
        let inner = &aty_d[b] - &data.c_blocks[b] * dtau + &f_b - &r_d[b];
        let mut dx_b = &ctx.scaling.w[b] * inner * &ctx.scaling.w[b];
        let mut ds_b = &r_d[b] - &aty_d[b] + &data.c_blocks[b] * dtau;
        symmetrize(&mut dx_b);
        symmetrize(&mut ds_b);
        dx.push(dx_b);
        ds.push(ds_b);
    }
    let dkappa = (e_tau - ctx.kappa * dtau) / ctx.tau;
    if !dtau.is_finite() || !dkappa.is_finite() {
        return None;
    }
    Some(Direction { dx, ds, dy, df, dtau, dkappa })
}

/// Largest step keeping every cone variable in the (closed) cone, capped.
fn step_length(st: &State, scaling: &Scaling, dir: &Direction, cap: f64) -> f64 {
    let mut alpha: f64 = cap;
    for b in 0..st.x.len() {
        alpha = alpha.min(block_step(&scaling.chol_x[b], &dir.dx[b]));
        alpha = alpha.min(block_step(&scaling.chol_s[b], &dir.ds[b]));
    }
    if dir.dtau < 0.0 {
        alpha = alpha.min(-st.tau / dir.dtau);
    }
    if dir.dkappa < 0.0 {
        alpha = alpha.min(-st.kappa / dir.dkappa);
    }
    alpha.max(0.0)
}

fn block_step(chol: &Cholesky<f64, nalgebra::Dyn>, delta: &DMatrix<f64>) -> f64 {
    let l = chol.l();
    let a = match l.solve_lower_triangular(delta) {
        Some(a) => a,
        None => return 0.0,
    };
    let g = match l.solve_lower_triangular(&a.transpose()) {
        Some(g) => g,
        None => return 0.0,
    };
    let mut gs = g;
    symmetrize(&mut gs);
    let eig = gs.symmetric_eigenvalues();
    let lmin = eig.min();
    if lmin >= -1e-13 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn mu_after(st: &State, dir: &Direction, alpha: f64, nu: f64) -> f64 {
    let mut acc = 0.0;
    for b in 0..st.x.len() {
        let xn = &st.x[b] + &dir.dx[b] * alpha;
        let sn = &st.s[b] + &dir.ds[b] * alpha;
        acc += xn.dot(&sn);
    }
    acc += (st.tau + alpha * dir.dtau) * (st.kappa + alpha * dir.dkappa);
    (acc / nu).max(0.0)
}

/// Detects primal-infeasibility and unboundedness certificates on the
/// homogeneous iterate.
fn certificate_status(
    data: &Data,
    st: &State,
    aty: &[DMatrix<f64>],
    tol: f64,
) -> Option<SdpStatus> {
    // Primal infeasible: A*(y) + S ~ 0, G'y ~ 0, b'y > 0.
    let by = data.b.dot(&st.y);
    if by > 1e-12 {
        let res_blocks: f64 = (0..data.dims.len())
            .map(|b| (&aty[b] + &st.s[b]).norm_squared())
            .sum();
        let res = (res_blocks + apply_gt(data, &st.y).norm_squared()).sqrt() / by;
        let ynorm = st.y.norm() / by;
        if res <= tol * (1.0 + data.norm_rows * ynorm) {
            return Some(SdpStatus::Infeasible);
        }
    }
    // Dual infeasible (primal unbounded for the max form): A(x) + G f ~ 0,
    // x in cone, objective direction improving.
    let obj = inner_blocks(&data.c_blocks, &st.x) + data.c_free.dot(&st.f);
    if obj < -1e-12 {
        let w = -obj;
        let res = apply_a(data, &st.x, &st.f).norm() / w;
        let xnorm =
            (st.x.iter().map(|m| m.norm_squared()).sum::<f64>() + st.f.norm_squared()).sqrt() / w;
        if res <= tol * (1.0 + data.norm_rows * xnorm) {
            return Some(SdpStatus::Unbounded);
        }
    }
    None
}

fn assemble(
    problem: &SdpProblem,
    data: &Data,
    st: &State,
    status: SdpStatus,
    iterations: usize,
) -> SdpSolution {
    let mut sol = SdpSolution::empty(problem, status);
    sol.iterations = iterations + 1;
    match status {
        SdpStatus::Infeasible => {
            let by = data.b.dot(&st.y).max(1e-300);
            sol.dual_values = st.y.iter().map(|v| v / by).collect();
        }
        SdpStatus::Unbounded => {
            let obj = -(inner_blocks(&data.c_blocks, &st.x) + data.c_free.dot(&st.f));
            let w = obj.max(1e-300);
            sol.block_values = st.x.iter().map(|m| m / w).collect();
            sol.free_values = st.f.iter().map(|v| v / w).collect();
        }
        _ => {
            let tau = st.tau.max(1e-300);
            sol.block_values = st.x.iter().map(|m| m / tau).collect();
            sol.free_values = st.f.iter().map(|v| v / tau).collect();
            // Max-form multipliers flip the sign of the internal min-form y.
            sol.dual_values = st.y.iter().map(|v| -v / tau).collect();
            // Objectives in the user's (max) convention.
            let fh = DVector::from_vec(sol.free_values.clone());
            sol.primal_objective =
                -(inner_blocks(&data.c_blocks, &sol.block_values) + data.c_free.dot(&fh));
            sol.dual_objective = -data.b.dot(&st.y) / tau;
        }
    }
    sol
}
