use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;

fn settings() -> SdpSettings {
    SdpSettings::default()
}

/// max t subject to M - t I >= 0, encoded with one PSD block and one free
/// variable.
fn lambda_min_problem(m: &DMatrix<f64>) -> SdpProblem {
    let n = m.nrows();
    let mut p = SdpProblem::new(vec![n], 1);
    for r in 0..n {
        for c in r..n {
            let coeff = if r == c { 1.0 } else { 0.5 };
            let mut row = EqRow::new();
            row.blocks = vec![(0, SymCoeffs::from_entries([(r, c, coeff)]))];
            if r == c {
                row.free = vec![(0, 1.0)];
            }
            row.rhs = m[(r, c)];
            p.rows.push(row);
        }
    }
    p.objective.free = vec![(0, 1.0)];
    p
}

/// Smallest root of the characteristic polynomial, found by bisection on a
/// Faddeev-LeVerrier expansion; independent of any eigensolver.
fn char_poly_lambda_min(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    // Faddeev-LeVerrier: coefficients of det(lambda I - M).
    let mut coeffs = vec![1.0f64]; // leading
    let mut mk = m.clone();
    let mut c = -mk.trace();
    coeffs.push(c);
    let mut prev = mk.clone();
    for k in 2..=n {
        mk = m * (&prev + DMatrix::identity(n, n) * c);
        c = -mk.trace() / k as f64;
        coeffs.push(c);
        prev = mk.clone();
    }
    let eval = |l: f64| -> f64 {
        coeffs.iter().fold(0.0, |acc, &co| acc * l + co)
    };
    // Gershgorin lower bound, then bisect to the smallest sign change.
    let lo0 = (0..n)
        .map(|i| m[(i, i)] - (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let hi0 = (0..n)
        .map(|i| m[(i, i)] + (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;
    // Scan for the leftmost root bracket.
    let steps = 20000;
    let mut lo = lo0;
    let mut hi = hi0;
    let mut found = false;
    let mut prev_val = eval(lo0);
    for k in 1..=steps {
        let t = lo0 + (hi0 - lo0) * k as f64 / steps as f64;
        let v = eval(t);
        if prev_val == 0.0 || prev_val.signum() != v.signum() {
            lo = lo0 + (hi0 - lo0) * (k - 1) as f64 / steps as f64;
            hi = t;
            found = true;
            break;
        }
        prev_val = v;
    }
    assert!(found, "characteristic polynomial root bracket not found");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(lo).signum() == eval(mid).signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn scalar_bound() {
    // max t s.t. [1] - t[1] >= 0.
    let mut p = SdpProblem::new(vec![1], 1);
    let mut row = EqRow::new();
    row.blocks = vec![(0, SymCoeffs::from_entries([(0, 0, 1.0)]))];
    row.free = vec![(0, 1.0)];
    row.rhs = 1.0;
    p.rows.push(row);
    p.objective.free = vec![(0, 1.0)];
    let sol = solve(&p, &settings()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    assert!((sol.free_values[0] - 1.0).abs() < 1e-7, "t = {}", sol.free_values[0]);
}

#[test]
fn lambda_min_matches_characteristic_polynomial_oracle() {
    let m2 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let m3 = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
    for m in [m2, m3] {
        let oracle = char_poly_lambda_min(&m);
        let sol = solve(&lambda_min_problem(&m), &settings()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!(
            (sol.free_values[0] - oracle).abs() < 1e-7,
            "solver {} vs oracle {}",
            sol.free_values[0],
            oracle
        );
        // KKT residuals at tolerance on every Optimal return.
        assert!(sol.residuals.primal <= 1e-8);
        assert!(sol.residuals.dual <= 1e-8);
        assert!(sol.residuals.gap <= 1e-8);
        // Weak duality (max form): primal <= dual + slack.
        let scale = 1.0 + sol.primal_objective.abs() + sol.dual_objective.abs();
        assert!(sol.primal_objective <= sol.dual_objective + 1e-8 * scale);
    }
    // Hand value for the 2x2 case: roots of l^2 - 4l + 3 are 1 and 3.
    let m2 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    assert!((char_poly_lambda_min(&m2) - 1.0).abs() < 1e-9);
}

#[test]
fn negative_identity_is_infeasible_with_certificate() {
    // X = -I entrywise over a 2x2 block.
    let mut p = SdpProblem::new(vec![2], 0);
    for (r, c, rhs) in [(0, 0, -1.0), (0, 1, 0.0), (1, 1, -1.0)] {
        let coeff = if r == c { 1.0 } else { 0.5 };
        let mut row = EqRow::new();
        row.blocks = vec![(0, SymCoeffs::from_entries([(r, c, coeff)]))];
        row.rhs = rhs;
        p.rows.push(row);
    }
    let sol = solve(&p, &settings()).unwrap();
    assert_eq!(sol.status, SdpStatus::Infeasible);
    // Certificate: A*(y) <= 0, b'y = 1.
    let by: f64 = p.rows.iter().zip(&sol.dual_values).map(|(r, y)| r.rhs * y).sum();
    assert!((by - 1.0).abs() < 1e-6, "b'y = {by}");
    let mut aty = DMatrix::zeros(2, 2);
    for (row, &y) in p.rows.iter().zip(&sol.dual_values) {
        for (b, coeffs) in &row.blocks {
            assert_eq!(*b, 0);
            coeffs.add_into(&mut aty, y);
        }
    }
    let max_eig = aty.symmetric_eigenvalues().max();
    assert!(max_eig <= 1e-6, "certificate not in the dual cone: {max_eig}");
}

#[test]
fn residuals_recompute_and_perturbation() {
    let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let p = lambda_min_problem(&m);
    let sol = solve(&p, &settings()).unwrap();
    let rec = residuals(&p, &sol).unwrap();
    assert!((rec.primal - sol.residuals.primal).abs() <= 1e-10);
    assert!((rec.dual - sol.residuals.dual).abs() <= 1e-10);
    assert!((rec.gap - sol.residuals.gap).abs() <= 1e-10);

    // Hand-inserted exact feasible point: X = M - I (PSD), t = 1.
    let mut exact = sol.clone();
    exact.block_values[0] = &m - DMatrix::identity(2, 2);
    exact.free_values[0] = 1.0;
    let r0 = residuals(&p, &exact).unwrap();
    assert!(r0.primal <= 1e-15);

    // Perturbing one block entry by 1e-3 moves the primal residual by at
    // least 1e-4.
    let mut pert = exact.clone();
    pert.block_values[0][(0, 0)] += 1e-3;
    let r1 = residuals(&p, &pert).unwrap();
    assert!(r1.primal >= 1e-4, "primal residual {}", r1.primal);
}

#[test]
fn determinism_across_runs() {
    let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
    let p = lambda_min_problem(&m);
    let a = solve(&p, &settings()).unwrap();
    let b = solve(&p, &settings()).unwrap();
    assert_eq!(a.status, b.status);
    assert!((a.primal_objective - b.primal_objective).abs() <= 1e-9);
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn unbounded_objective_detected() {
    // max X_00 over X >= 0 with no constraints.
    let mut p = SdpProblem::new(vec![1], 0);
    p.objective.blocks = vec![(0, SymCoeffs::from_entries([(0, 0, 1.0)]))];
    let sol = solve(&p, &settings()).unwrap();
    assert_eq!(sol.status, SdpStatus::Unbounded);
}

#[test]
fn unpinned_free_direction_with_objective_is_unbounded() {
    // One free variable, no constraints touching it.
    let mut p = SdpProblem::new(vec![1], 1);
    let mut row = EqRow::new();
    row.blocks = vec![(0, SymCoeffs::from_entries([(0, 0, 1.0)]))];
    row.rhs = 1.0;
    p.rows.push(row);
    p.objective.free = vec![(0, 1.0)];
    let sol = solve(&p, &settings()).unwrap();
    assert_eq!(sol.status, SdpStatus::Unbounded);
}

#[test]
fn duplicate_rows_are_dropped_consistently() {
    let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let mut p = lambda_min_problem(&m);
    let dup = p.rows[0].clone();
    p.rows.push(dup);
    let sol = solve(&p, &settings()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    assert!((sol.free_values[0] - 1.0).abs() < 1e-7);
    assert_eq!(sol.dual_values.len(), p.rows.len());
    assert_eq!(*sol.dual_values.last().unwrap(), 0.0);
}

#[test]
fn inconsistent_duplicate_rows_are_infeasible() {
    let mut p = SdpProblem::new(vec![1], 0);
    for rhs in [1.0, 2.0] {
        let mut row = EqRow::new();
        row.blocks = vec![(0, SymCoeffs::from_entries([(0, 0, 1.0)]))];
        row.rhs = rhs;
        p.rows.push(row);
    }
    let sol = solve(&p, &settings()).unwrap();
    assert_eq!(sol.status, SdpStatus::Infeasible);
    let by: f64 = p.rows.iter().zip(&sol.dual_values).map(|(r, y)| r.rhs * y).sum();
    assert!(by > 0.5);
}

#[test]
fn free_only_problem_solves_directly() {
    let mut p = SdpProblem::new(vec![], 2);
    let mut r1 = EqRow::new();
    r1.free = vec![(0, 1.0), (1, 1.0)];
    r1.rhs = 3.0;
    let mut r2 = EqRow::new();
    r2.free = vec![(0, 1.0), (1, -1.0)];
    r2.rhs = 1.0;
    p.rows = vec![r1, r2];
    p.objective.free = vec![(0, 1.0), (1, 1.0)];
    let sol = solve(&p, &settings()).unwrap();
    assert_eq!(sol.status, SdpStatus::Optimal);
    assert!((sol.free_values[0] - 2.0).abs() < 1e-10);
    assert!((sol.free_values[1] - 1.0).abs() < 1e-10);
}

#[test]
fn nan_input_rejected() {
    let mut p = SdpProblem::new(vec![1], 0);
    let mut row = EqRow::new();
    row.blocks = vec![(0, SymCoeffs::from_entries([(0, 0, f64::NAN)]))];
    row.rhs = 1.0;
    p.rows.push(row);
    assert!(matches!(solve(&p, &settings()), Err(SdpError::Data { .. })));
}

#[test]
fn block_dimension_limit_enforced() {
    let p = SdpProblem::new(vec![300], 0);
    assert!(matches!(solve(&p, &settings()), Err(SdpError::Capacity { .. })));
}

// ---------------------------------------------------------------------------
// Solver agreement with an independent alternating-projection feasibility
// oracle on randomized problems.
// ---------------------------------------------------------------------------

struct DenseConstraints {
    mats: Vec<DMatrix<f64>>,
    b: DVector<f64>,
    gram_inv: DMatrix<f64>,
}

impl DenseConstraints {
    fn new(p: &SdpProblem) -> Self {
        let n = p.block_dims[0];
        let mats: Vec<DMatrix<f64>> = p
            .rows
            .iter()
            .map(|row| {
                let mut m = DMatrix::zeros(n, n);
                for (b, coeffs) in &row.blocks {
                    assert_eq!(*b, 0);
                    coeffs.add_into(&mut m, 1.0);
                }
                m
            })
            .collect();
        let b = DVector::from_iterator(p.rows.len(), p.rows.iter().map(|r| r.rhs));
        let mrows = mats.len();
        let mut gram = DMatrix::zeros(mrows, mrows);
        for i in 0..mrows {
            for j in 0..mrows {
                gram[(i, j)] = mats[i].dot(&mats[j]);
            }
        }
        let gram_inv = gram.try_inverse().expect("constraints independent");
        DenseConstraints { mats, b, gram_inv }
    }

    fn project_affine(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let resid = DVector::from_iterator(
            self.mats.len(),
            self.mats.iter().zip(self.b.iter()).map(|(a, &bi)| a.dot(x) - bi),
        );
        let w = &self.gram_inv * resid;
        let mut out = x.clone();
        for (a, &wi) in self.mats.iter().zip(w.iter()) {
            out -= a * wi;
        }
        out
    }
}

fn project_psd(x: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (x + x.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Alternating-projection feasibility oracle: converging residual means
/// feasible, a stalled positive gap means infeasible.
fn projection_oracle_feasible(p: &SdpProblem) -> bool {
    let n = p.block_dims[0];
    let cons = DenseConstraints::new(p);
    let mut x = DMatrix::identity(n, n);
    let mut gap = f64::INFINITY;
    for _ in 0..3000 {
        let on_affine = cons.project_affine(&x);
        let on_psd = project_psd(&on_affine);
        gap = (&on_psd - &on_affine).norm();
        x = on_psd;
        if gap < 1e-9 {
            return true;
        }
    }
    gap < 1e-6
}

fn random_sym(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&raw + raw.transpose()) * 0.5
}

fn sym_coeffs_from_dense(m: &DMatrix<f64>) -> SymCoeffs {
    let n = m.nrows();
    let mut entries = Vec::new();
    for r in 0..n {
        for c in r..n {
            entries.push((r, c, m[(r, c)]));
        }
    }
    SymCoeffs::from_entries(entries)
}

#[test]
fn agrees_with_projection_oracle_on_random_problems() {
    let mut rng = StdRng::seed_from_u64(0x5d9_f00d);
    let mut checked = 0;
    for case in 0..50 {
        let n = rng.random_range(2..=6usize);
        let m = rng.random_range(1..=(n * (n + 1) / 2).min(8));
        let feasible = case % 2 == 0;

        let mut mats: Vec<DMatrix<f64>> = (0..m).map(|_| random_sym(&mut rng, n)).collect();
        let mut b = DVector::zeros(m);
        if feasible {
            // b = A(X0) for an interior X0.
            let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let x0 = &r * r.transpose() + DMatrix::identity(n, n) * 0.5;
            for i in 0..m {
                b[i] = mats[i].dot(&x0);
            }
        } else {
            // Engineer a Farkas certificate y0 with margin: sum y0_i A_i <= -I.
            let y0 = DVector::from_fn(m, |_, _| rng.random_range(0.5..1.5f64));
            let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
            let target = -(&r * r.transpose()) - DMatrix::identity(n, n);
            let mut z = DMatrix::zeros(n, n);
            for i in 1..m {
                z += &mats[i] * y0[i];
            }
            mats[0] = (target - z) / y0[0];
            for i in 0..m {
                b[i] = rng.random_range(-1.0..1.0);
            }
            // Force b'y0 = 1.
            let partial: f64 = (1..m).map(|i| b[i] * y0[i]).sum();
            b[0] = (1.0 - partial) / y0[0];
        }

        let mut p = SdpProblem::new(vec![n], 0);
        for i in 0..m {
            let mut row = EqRow::new();
            row.blocks = vec![(0, sym_coeffs_from_dense(&mats[i]))];
            row.rhs = b[i];
            p.rows.push(row);
        }

        // Skip rare draws where the constraints end up numerically dependent
        // (the oracle's Gram inverse would be meaningless).
        let gram_ok = {
            let mut gram = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    gram[(i, j)] = mats[i].dot(&mats[j]);
                }
            }
            gram.symmetric_eigenvalues().min() > 1e-8
        };
        if !gram_ok {
            continue;
        }

        let oracle_feasible = projection_oracle_feasible(&p);
        let sol = solve(&p, &settings()).unwrap();
        let solver_feasible = match sol.status {
            SdpStatus::Optimal => true,
            SdpStatus::Infeasible => false,
            other => panic!("case {case}: unexpected status {other:?}"),
        };
        assert_eq!(
            solver_feasible, oracle_feasible,
            "case {case}: solver and projection oracle disagree (constructed feasible = {feasible})"
        );
        assert_eq!(solver_feasible, feasible, "case {case}: constructed verdict mismatch");
        checked += 1;
    }
    assert!(checked >= 45, "only {checked} cases checked");
}

#[test]
fn dump_format_is_stable() {
    let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let p = lambda_min_problem(&m);
    let d1 = p.dump();
    let d2 = p.dump();
    assert_eq!(d1, d2);
    assert!(d1.starts_with("sdp-dump v1\nblocks 2\nfree 1\n"));
    assert!(d1.contains("rows 3"));
}
