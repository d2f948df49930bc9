//! Sum-of-squares compilation: turns "this decision polynomial is SOS" and
//! "this decision polynomial is identically zero" statements into semidefinite
//! constraints, and extracts solver-independent Gram certificates back out.
//!
//! Decision polynomials are strictly affine in the scalar decision variables;
//! multiplying two decision-bearing polynomials is rejected at build time, so
//! bilinear products cannot be formed by accident.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::poly::{monomials_up_to, Monomial, Parity, Polynomial, CANON_EPS};
use crate::sdp::{self, EqRow, Objective, SdpProblem, SdpSettings, SdpSolution, SdpStatus, SymCoeffs};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("monomial {0} is not covered by pairwise products of the basis")]
    BasisCoverage(String),
    #[error("product of two decision-bearing polynomials is bilinear")]
    Bilinear,
    #[error("certificate rejected: reconstruction residual {residual} exceeds tolerance {tolerance}")]
    CertificateRejected { residual: f64, tolerance: f64 },
    #[error("certificate rejected: Gram matrix eigenvalue {lambda_min} below -1e-8")]
    NotPsd { lambda_min: f64 },
    #[error("solution does not carry block {0}")]
    BadBlock(usize),
    #[error(transparent)]
    Poly(#[from] crate::poly::PolyError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
}

/// All monomials with total degree at most `half_degree` and the requested
/// parity, in graded-lex order. This is the default Gram basis generator.
pub fn monomial_basis(variable_count: usize, half_degree: u32, parity: Parity) -> Vec<Monomial> {
    monomials_up_to(variable_count, half_degree, parity)
}

/// A linear-affine expression in scalar decision variables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinExpr {
    pub constant: f64,
    /// Sorted by variable id, merged, no near-zero coefficients.
    pub terms: Vec<(usize, f64)>,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        LinExpr { constant: c, terms: Vec::new() }
    }

    pub fn var(id: usize) -> Self {
        LinExpr { constant: 0.0, terms: vec![(id, 1.0)] }
    }

    pub fn scaled_var(id: usize, w: f64) -> Self {
        LinExpr { constant: 0.0, terms: vec![(id, w)] }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_assign(&mut self, other: &LinExpr, scale: f64) {
        self.constant += scale * other.constant;
        for &(id, w) in &other.terms {
            match self.terms.binary_search_by_key(&id, |t| t.0) {
                Ok(pos) => self.terms[pos].1 += scale * w,
                Err(pos) => self.terms.insert(pos, (id, scale * w)),
            }
        }
        self.trim();
    }

    fn trim(&mut self) {
        self.terms.retain(|&(_, w)| w.abs() >= CANON_EPS);
        if self.constant.abs() < CANON_EPS {
            self.constant = 0.0;
        }
    }

    pub fn scale(&self, s: f64) -> LinExpr {
        let mut out = LinExpr {
            constant: self.constant * s,
            terms: self.terms.iter().map(|&(id, w)| (id, w * s)).collect(),
        };
        out.trim();
        out
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(id, w)| w * values[id]).sum::<f64>()
    }
}

/// A polynomial whose coefficients are affine expressions in scalar decision
/// variables. A decision-free instance is an ordinary polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionPoly {
    vars: usize,
    terms: BTreeMap<Monomial, LinExpr>,
}

impl DecisionPoly {
    pub fn zero(vars: usize) -> Self {
        DecisionPoly { vars, terms: BTreeMap::new() }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut terms = BTreeMap::new();
        for (m, c) in p.terms() {
            terms.insert(m.clone(), LinExpr::constant(c));
        }
        DecisionPoly { vars: p.vars(), terms }
    }

    /// One fresh decision coefficient per template monomial.
    pub fn template(vars: usize, monomials: &[Monomial], ids: &[usize]) -> Self {
        assert_eq!(monomials.len(), ids.len());
        let mut terms = BTreeMap::new();
        for (m, &id) in monomials.iter().zip(ids) {
            assert_eq!(m.vars(), vars);
            terms.insert(m.clone(), LinExpr::var(id));
        }
        DecisionPoly { vars, terms }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_decision_free(&self) -> bool {
        self.terms.values().all(LinExpr::is_constant)
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn support(&self) -> Vec<Monomial> {
        self.terms.keys().cloned().collect()
    }

    pub fn coefficient(&self, m: &Monomial) -> LinExpr {
        self.terms.get(m).cloned().unwrap_or_default()
    }

    fn insert(&mut self, m: Monomial, expr: LinExpr) {
        if expr.is_zero() {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(expr);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                e.get_mut().add_assign(&expr, 1.0);
                if e.get().is_zero() {
                    e.remove();
                }
            }
        }
    }

    pub fn add(&self, other: &DecisionPoly) -> DecisionPoly {
        assert_eq!(self.vars, other.vars);
        let mut out = self.clone();
        for (m, expr) in &other.terms {
            out.insert(m.clone(), expr.clone());
        }
        out
    }

    pub fn sub(&self, other: &DecisionPoly) -> DecisionPoly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> DecisionPoly {
        let mut out = DecisionPoly::zero(self.vars);
        for (m, expr) in &self.terms {
            out.insert(m.clone(), expr.scale(s));
        }
        out
    }

    pub fn add_poly_times_expr(&mut self, p: &Polynomial, expr: &LinExpr) {
        assert_eq!(self.vars, p.vars());
        for (m, c) in p.terms() {
            self.insert(m.clone(), expr.scale(c));
        }
    }

    pub fn mul_poly(&self, p: &Polynomial) -> DecisionPoly {
        assert_eq!(self.vars, p.vars());
        let mut out = DecisionPoly::zero(self.vars);
        for (m1, expr) in &self.terms {
            for (m2, c) in p.terms() {
                out.insert(m1.mul(m2), expr.scale(c));
            }
        }
        out
    }

    /// Product; at most one side may carry decision variables.
    pub fn mul(&self, other: &DecisionPoly) -> Result<DecisionPoly, SosError> {
        if self.is_decision_free() {
            Ok(other.mul_poly(&self.to_poly().expect("decision-free")))
        } else if other.is_decision_free() {
            Ok(self.mul_poly(&other.to_poly().expect("decision-free")))
        } else {
            Err(SosError::Bilinear)
        }
    }

    pub fn to_poly(&self) -> Option<Polynomial> {
        if !self.is_decision_free() {
            return None;
        }
        Some(Polynomial::from_terms(
            self.vars,
            self.terms.iter().map(|(m, e)| (m.clone(), e.constant)),
        ))
    }

    pub fn gradient(&self) -> Vec<DecisionPoly> {
        (0..self.vars)
            .map(|i| {
                let mut out = DecisionPoly::zero(self.vars);
                for (m, expr) in &self.terms {
                    let e = m.exponents()[i];
                    if e == 0 {
                        continue;
                    }
                    let mut exps = m.exponents().to_vec();
                    exps[i] = e - 1;
                    out.insert(Monomial::new(exps), expr.scale(e as f64));
                }
                out
            })
            .collect()
    }

    /// Composition with numeric polynomials, one per variable; affinity in
    /// the decision variables is preserved.
    pub fn substitute(&self, map: &[Polynomial]) -> Result<DecisionPoly, SosError> {
        let new_vars = map.first().map(Polynomial::vars).unwrap_or(0);
        let mut out = DecisionPoly::zero(new_vars);
        for (m, expr) in &self.terms {
            let mono_poly = Polynomial::from_monomial(m.clone(), 1.0);
            let expanded = mono_poly.substitute(map)?;
            out.add_poly_times_expr(&expanded, expr);
        }
        Ok(out)
    }

    pub fn instantiate(&self, values: &[f64]) -> Polynomial {
        Polynomial::from_terms(
            self.vars,
            self.terms.iter().map(|(m, e)| (m.clone(), e.eval(values))),
        )
    }
}

/// A monomial basis plus PSD Gram matrix proving an SOS membership.
#[derive(Debug, Clone)]
pub struct GramCertificate {
    pub basis: Vec<Monomial>,
    pub gram: DMatrix<f64>,
    pub target: Polynomial,
    pub residual: f64,
    pub lambda_min: f64,
}

impl GramCertificate {
    /// Symbolic reconstruction residual: the largest coefficient of
    /// `target - basis' * gram * basis`, computed with exact polynomial
    /// algebra (independent of the solver).
    pub fn reconstruction_residual(
        basis: &[Monomial],
        gram: &DMatrix<f64>,
        target: &Polynomial,
    ) -> Result<f64, SosError> {
        let n = basis.len();
        let vars = target.vars();
        let mut terms: Vec<(Monomial, f64)> = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                let w = if i == j { gram[(i, j)] } else { gram[(i, j)] + gram[(j, i)] };
                terms.push((basis[i].mul(&basis[j]), w));
            }
        }
        let rebuilt = Polynomial::from_terms(vars, terms);
        target.coefficient_distance(&rebuilt).map_err(SosError::from)
    }

    /// Builds and checks a certificate; rejects when the reconstruction
    /// residual exceeds `1e-6 * (1 + max |target coefficient|)` or the Gram
    /// matrix has an eigenvalue below `-1e-8`.
    pub fn checked(
        basis: Vec<Monomial>,
        gram: DMatrix<f64>,
        target: Polynomial,
    ) -> Result<GramCertificate, SosError> {
        let residual = Self::reconstruction_residual(&basis, &gram, &target)?;
        let tolerance = 1e-6 * (1.0 + target.max_abs_coefficient());
        if residual > tolerance {
            return Err(SosError::CertificateRejected { residual, tolerance });
        }
        let lambda_min = if gram.nrows() == 0 {
            0.0
        } else {
            let sym = (&gram + gram.transpose()) * 0.5;
            sym.symmetric_eigenvalues().min()
        };
        if lambda_min < -1e-8 {
            return Err(SosError::NotPsd { lambda_min });
        }
        Ok(GramCertificate { basis, gram, target, residual, lambda_min })
    }
}

impl Serialize for GramCertificate {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let mut st = ser.serialize_struct("GramCertificate", 5)?;
        let basis: Vec<Vec<u32>> = self.basis.iter().map(|m| m.exponents().to_vec()).collect();
        let gram: Vec<Vec<f64>> = (0..self.gram.nrows())
            .map(|i| (0..self.gram.ncols()).map(|j| self.gram[(i, j)]).collect())
            .collect();
        st.serialize_field("basis", &basis)?;
        st.serialize_field("gram", &gram)?;
        st.serialize_field("target", &self.target)?;
        st.serialize_field("residual", &self.residual)?;
        st.serialize_field("lambda_min", &self.lambda_min)?;
        st.end()
    }
}

/// Identifier of a Gram block inside a [`SosProgram`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GramBlockId(pub usize);

enum BlockKind {
    Gram { basis: Vec<Monomial>, target: DecisionPoly },
    Plain,
}

/// Accumulates SOS memberships, zero constraints, and auxiliary PSD blocks
/// into one standard-form semidefinite program. Decision variable ids map
/// one-to-one onto the program's free variables.
pub struct SosProgram {
    decision_count: usize,
    blocks: Vec<(usize, BlockKind)>,
    rows: Vec<EqRow>,
    objective_free: Vec<(usize, f64)>,
}

impl Default for SosProgram {
    fn default() -> Self {
        Self::new()
    }
}

impl SosProgram {
    pub fn new() -> Self {
        SosProgram {
            decision_count: 0,
            blocks: Vec::new(),
            rows: Vec::new(),
            objective_free: Vec::new(),
        }
    }

    pub fn fresh_decision(&mut self) -> usize {
        let id = self.decision_count;
        self.decision_count += 1;
        id
    }

    pub fn fresh_decisions(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.fresh_decision()).collect()
    }

    pub fn decision_count(&self) -> usize {
        self.decision_count
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Compiles `dp in SOS` over the given Gram basis: one PSD block plus one
    /// coefficient-matching equality per pairwise-product monomial. Fails if
    /// some monomial of `dp` is outside the span of pairwise products.
    pub fn add_sos(&mut self, dp: &DecisionPoly, basis: &[Monomial]) -> Result<GramBlockId, SosError> {
        let basis: Vec<Monomial> = if basis.is_empty() {
            vec![Monomial::one(dp.vars())]
        } else {
            basis.to_vec()
        };
        let mut products: BTreeMap<Monomial, Vec<(usize, usize)>> = BTreeMap::new();
        for i in 0..basis.len() {
            for j in i..basis.len() {
                products.entry(basis[i].mul(&basis[j])).or_default().push((i, j));
            }
        }
        for m in dp.support() {
            if !products.contains_key(&m) {
                return Err(SosError::BasisCoverage(m.to_string()));
            }
        }
        let block_index = self.blocks.len();
        for (monomial, pairs) in &products {
            let coeffs = SymCoeffs::from_entries(pairs.iter().map(|&(i, j)| (i, j, 1.0)));
            let expr = dp.coefficient(monomial);
            let mut row = EqRow::new();
            row.blocks = vec![(block_index, coeffs)];
            row.free = expr.terms.iter().map(|&(id, w)| (id, -w)).collect();
            row.rhs = expr.constant;
            self.rows.push(row);
        }
        self.blocks.push((basis.len(), BlockKind::Gram { basis, target: dp.clone() }));
        Ok(GramBlockId(block_index))
    }

    /// Compiles `dp = 0`: one linear equality per monomial.
    pub fn add_zero(&mut self, dp: &DecisionPoly) {
        for m in dp.support() {
            let expr = dp.coefficient(&m);
            let mut row = EqRow::new();
            row.free = expr.terms.iter().map(|&(id, w)| (id, w)).collect();
            row.rhs = -expr.constant;
            self.rows.push(row);
        }
    }

    /// Adds a bare PSD block of the given dimension (no target polynomial).
    pub fn add_psd_block(&mut self, dim: usize) -> GramBlockId {
        let id = GramBlockId(self.blocks.len());
        self.blocks.push((dim, BlockKind::Plain));
        id
    }

    /// Pins `block[(i, j)] = expr` entrywise (upper triangle expected).
    pub fn link_block_entry(&mut self, block: GramBlockId, i: usize, j: usize, expr: &LinExpr) {
        let coeff = if i == j { 1.0 } else { 0.5 };
        let mut row = EqRow::new();
        row.blocks = vec![(block.0, SymCoeffs::from_entries([(i, j, coeff)]))];
        row.free = expr.terms.iter().map(|&(id, w)| (id, -w)).collect();
        row.rhs = expr.constant;
        self.rows.push(row);
    }

    /// Caps the trace of a block: `trace + slack = cap` with a fresh 1x1
    /// slack block.
    pub fn add_trace_cap(&mut self, block: GramBlockId, cap: f64) {
        let dim = self.blocks[block.0].0;
        let slack = self.add_psd_block(1);
        let mut row = EqRow::new();
        row.blocks = vec![
            (block.0, SymCoeffs::from_entries((0..dim).map(|i| (i, i, 1.0)))),
            (slack.0, SymCoeffs::from_entries([(0, 0, 1.0)])),
        ];
        row.rhs = cap;
        self.rows.push(row);
    }

    /// Maximizes the given decision variable.
    pub fn maximize(&mut self, id: usize) {
        self.objective_free = vec![(id, 1.0)];
    }

    pub fn build(&self) -> SdpProblem {
        let mut p = SdpProblem::new(
            self.blocks.iter().map(|(d, _)| *d).collect(),
            self.decision_count,
        );
        p.rows = self.rows.clone();
        p.objective = Objective { blocks: Vec::new(), free: self.objective_free.clone() };
        p
    }

    pub fn solve(&self, settings: &SdpSettings) -> Result<SdpSolution, SosError> {
        Ok(sdp::solve(&self.build(), settings)?)
    }

    /// Extracts the Gram certificate of a compiled SOS membership from a
    /// solved program. The target polynomial is the membership's decision
    /// polynomial instantiated at the solved decision values; verification is
    /// a solver-independent symbolic reconstruction.
    pub fn extract_certificate(
        &self,
        block: GramBlockId,
        solution: &SdpSolution,
    ) -> Result<GramCertificate, SosError> {
        let (dim, kind) = self.blocks.get(block.0).ok_or(SosError::BadBlock(block.0))?;
        let (basis, target) = match kind {
            BlockKind::Gram { basis, target } => (basis, target),
            BlockKind::Plain => return Err(SosError::BadBlock(block.0)),
        };
        let gram_raw = solution.block_values.get(block.0).ok_or(SosError::BadBlock(block.0))?;
        if gram_raw.nrows() != *dim {
            return Err(SosError::BadBlock(block.0));
        }
        let gram = (gram_raw + gram_raw.transpose()) * 0.5;
        let numeric_target = target.instantiate(&solution.free_values);
        GramCertificate::checked(basis.clone(), gram, numeric_target)
    }
}

/// Newton-polytope pruning: drops basis monomials whose doubled exponent lies
/// outside the convex hull of the support exponents. Membership is decided by
/// a small feasibility LP (solved through the conic engine with 1x1 blocks);
/// anything other than a clean infeasibility verdict keeps the monomial.
pub fn prune_basis_newton(basis: &[Monomial], support: &[Monomial]) -> Vec<Monomial> {
    if support.is_empty() {
        return Vec::new();
    }
    let n = support[0].vars();
    let pts: Vec<&[u32]> = support.iter().map(|m| m.exponents()).collect();
    let mut lo = vec![u32::MAX; n];
    let mut hi = vec![0u32; n];
    let mut deg_lo = u32::MAX;
    let mut deg_hi = 0u32;
    for p in &pts {
        let d: u32 = p.iter().sum();
        deg_lo = deg_lo.min(d);
        deg_hi = deg_hi.max(d);
        for (k, &e) in p.iter().enumerate() {
            lo[k] = lo[k].min(e);
            hi[k] = hi[k].max(e);
        }
    }
    let settings = SdpSettings::default();
    basis
        .iter()
        .filter(|b| {
            let doubled: Vec<u32> = b.exponents().iter().map(|&e| 2 * e).collect();
            let d: u32 = doubled.iter().sum();
            if d < deg_lo || d > deg_hi {
                return false;
            }
            for k in 0..n {
                if doubled[k] < lo[k] || doubled[k] > hi[k] {
                    return false;
                }
            }
            hull_membership(&pts, &doubled, &settings)
        })
        .cloned()
        .collect()
}

/// Feasibility LP: does `point` lie in the convex hull of `pts`?
fn hull_membership(pts: &[&[u32]], point: &[u32], settings: &SdpSettings) -> bool {
    let n = point.len();
    let k = pts.len();
    if pts.iter().any(|p| p.iter().zip(point).all(|(&a, &b)| a == b)) {
        return true;
    }
    let mut p = SdpProblem::new(vec![1; k], 0);
    for d in 0..n {
        let mut row = EqRow::new();
        row.blocks = (0..k)
            .filter(|&i| pts[i][d] != 0)
            .map(|i| (i, SymCoeffs::from_entries([(0, 0, pts[i][d] as f64)])))
            .collect();
        row.rhs = point[d] as f64;
        p.rows.push(row);
    }
    let mut row = EqRow::new();
    row.blocks = (0..k).map(|i| (i, SymCoeffs::from_entries([(0, 0, 1.0)]))).collect();
    row.rhs = 1.0;
    p.rows.push(row);
    match sdp::solve(&p, settings) {
        Ok(sol) => !matches!(sol.status, SdpStatus::Infeasible),
        Err(_) => true,
    }
}

/// Default compilation path: Gram basis of degree at most ceil(deg/2) with a
/// Newton-polytope pruning pass. Falls back to the unpruned basis if pruning
/// breaks product coverage of the target support.
pub fn add_sos_default_basis(
    prog: &mut SosProgram,
    dp: &DecisionPoly,
) -> Result<(GramBlockId, Vec<Monomial>), SosError> {
    let half = dp.degree().div_ceil(2);
    let full = monomial_basis(dp.vars(), half, Parity::Any);
    let support = dp.support();
    let pruned = prune_basis_newton(&full, &support);
    match prog.add_sos(dp, &pruned) {
        Ok(id) => {
            let used = if pruned.is_empty() { vec![Monomial::one(dp.vars())] } else { pruned };
            Ok((id, used))
        }
        Err(SosError::BasisCoverage(_)) => {
            let id = prog.add_sos(dp, &full)?;
            Ok((id, full))
        }
        Err(e) => Err(e),
    }
}

/// Subtracts the strictness margin `eps * sum_i x_i^(2k)` from a target
/// before compiling, for callers that need strict positivity.
pub fn with_strictness_margin(dp: &DecisionPoly, eps: f64, k: u32) -> DecisionPoly {
    let vars = dp.vars();
    let mut terms = Vec::with_capacity(vars);
    for i in 0..vars {
        let mut exps = vec![0u32; vars];
        exps[i] = 2 * k;
        terms.push((Monomial::new(exps), eps));
    }
    dp.sub(&DecisionPoly::from_poly(&Polynomial::from_terms(vars, terms)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn x(vars: usize, i: usize) -> Polynomial {
        Polynomial::variable(vars, i)
    }

    fn sample_min(p: &Polynomial, samples: usize, seed: u64) -> f64 {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut min = f64::INFINITY;
        for _ in 0..samples {
            let pt: Vec<f64> = (0..p.vars()).map(|_| rng.random_range(-1.0..1.0)).collect();
            min = min.min(p.evaluate(&pt).unwrap());
        }
        min
    }

    #[test]
    fn basis_counts() {
        assert_eq!(monomial_basis(2, 2, Parity::Any).len(), 6);
        assert_eq!(monomial_basis(6, 3, Parity::Any).len(), 84);
        assert_eq!(monomial_basis(1, 3, Parity::Odd).len(), 2);
    }

    #[test]
    fn perfect_square_certifies() {
        // x^2 over {1, x}.
        let p = x(1, 0).mul(&x(1, 0)).unwrap();
        let dp = DecisionPoly::from_poly(&p);
        let mut prog = SosProgram::new();
        let basis = monomial_basis(1, 1, Parity::Any);
        let id = prog.add_sos(&dp, &basis).unwrap();
        let sol = prog.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let cert = prog.extract_certificate(id, &sol).unwrap();
        assert!(cert.residual <= 1e-6 * (1.0 + cert.target.max_abs_coefficient()));
        assert!(cert.lambda_min >= -1e-8);
        // Gram is forced to [[0,0],[0,1]] by coefficient matching.
        assert!((cert.gram[(1, 1)] - 1.0).abs() < 1e-6);
        assert!(cert.gram[(0, 0)].abs() < 1e-6);
    }

    #[test]
    fn rank_one_square_gram() {
        // (x1+x2)^2 over {x1, x2} forces Gram [[1,1],[1,1]].
        let s = x(2, 0).add(&x(2, 1)).unwrap();
        let p = s.mul(&s).unwrap();
        let dp = DecisionPoly::from_poly(&p);
        let mut prog = SosProgram::new();
        let basis = vec![Monomial::var(2, 0), Monomial::var(2, 1)];
        let id = prog.add_sos(&dp, &basis).unwrap();
        let sol = prog.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let cert = prog.extract_certificate(id, &sol).unwrap();
        for (i, j, v) in [(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)] {
            assert!((cert.gram[(i, j)] - v).abs() < 1e-6);
        }
    }

    #[test]
    fn motzkin_polynomial_is_not_sos() {
        // x^4 y^2 + x^2 y^4 - 3 x^2 y^2 + 1: nonnegative but not SOS.
        let m = |a: u32, b: u32, c: f64| Polynomial::from_monomial(Monomial::new(vec![a, b]), c);
        let motzkin = m(4, 2, 1.0)
            .add(&m(2, 4, 1.0))
            .unwrap()
            .add(&m(2, 2, -3.0))
            .unwrap()
            .add(&m(0, 0, 1.0))
            .unwrap();
        // Nonnegativity oracle: grid sample stays nonnegative.
        let mut grid_min = f64::INFINITY;
        for i in -20..=20 {
            for j in -20..=20 {
                let v = motzkin.evaluate(&[i as f64 / 10.0, j as f64 / 10.0]).unwrap();
                grid_min = grid_min.min(v);
            }
        }
        assert!(grid_min >= -1e-12, "Motzkin grid minimum {grid_min}");

        let dp = DecisionPoly::from_poly(&motzkin);
        let mut prog = SosProgram::new();
        prog.add_sos(&dp, &monomial_basis(2, 3, Parity::Any)).unwrap();
        let sol = prog.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
        // The improving-ray certificate is attached.
        let problem = prog.build();
        let by: f64 = problem.rows.iter().zip(&sol.dual_values).map(|(r, y)| r.rhs * y).sum();
        assert!((by - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uncovered_monomial_is_reported() {
        let p = Polynomial::from_monomial(Monomial::new(vec![6]), 1.0);
        let dp = DecisionPoly::from_poly(&p);
        let mut prog = SosProgram::new();
        let err = prog.add_sos(&dp, &monomial_basis(1, 2, Parity::Any)).unwrap_err();
        match err {
            SosError::BasisCoverage(name) => assert_eq!(name, "x1^6"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn compile_zero_examples() {
        // (c1 - c2) * x forces c1 = c2.
        let mut prog = SosProgram::new();
        let c1 = prog.fresh_decision();
        let c2 = prog.fresh_decision();
        let mut dp = DecisionPoly::zero(1);
        let mut expr = LinExpr::var(c1);
        expr.add_assign(&LinExpr::var(c2), -1.0);
        dp.add_poly_times_expr(&x(1, 0), &expr);
        prog.add_zero(&dp);
        assert_eq!(prog.num_rows(), 1);

        // Identically zero emits nothing.
        let mut prog2 = SosProgram::new();
        prog2.add_zero(&DecisionPoly::zero(2));
        assert_eq!(prog2.num_rows(), 0);
    }

    #[test]
    fn round_trip_random_sums_of_squares() {
        let mut rng = StdRng::seed_from_u64(0xba5e);
        for case in 0..30 {
            let n = rng.random_range(1..=3usize);
            let k = rng.random_range(1..=3usize);
            let half_deg = rng.random_range(1..=3u32);
            let mut target = Polynomial::zero(n);
            for _ in 0..k {
                let basis = monomial_basis(n, half_deg, Parity::Any);
                let mut q = Polynomial::zero(n);
                for m in &basis {
                    if rng.random_bool(0.5) {
                        let c: f64 = rng.random_range(-1.0..1.0);
                        q = q.add(&Polynomial::from_monomial(m.clone(), c)).unwrap();
                    }
                }
                target = target.add(&q.mul(&q).unwrap()).unwrap();
            }
            if target.is_zero() {
                continue;
            }
            let dp = DecisionPoly::from_poly(&target);
            let mut prog = SosProgram::new();
            let (id, _) = add_sos_default_basis(&mut prog, &dp).unwrap();
            let sol = prog.solve(&SdpSettings::default()).unwrap();
            assert_eq!(sol.status, SdpStatus::Optimal, "case {case} not certified");
            let cert = prog.extract_certificate(id, &sol).unwrap();
            // Soundness: a validated certificate implies sampled
            // nonnegativity.
            let scale = cert.target.max_abs_coefficient();
            let min = sample_min(&cert.target, 10_000, 0x50_0d + case as u64);
            assert!(min >= -1e-5 * (1.0 + scale), "case {case}: sampled min {min}");
        }
    }

    #[test]
    fn basis_monotonicity() {
        // Enlarging the basis never flips feasible to infeasible.
        let s = x(2, 0).add(&x(2, 1)).unwrap();
        let p = s.mul(&s).unwrap();
        let dp = DecisionPoly::from_poly(&p);
        for half in 1..=3u32 {
            let mut prog = SosProgram::new();
            prog.add_sos(&dp, &monomial_basis(2, half, Parity::Any)).unwrap();
            let sol = prog.solve(&SdpSettings::default()).unwrap();
            assert_eq!(sol.status, SdpStatus::Optimal, "half-degree {half}");
        }
    }

    #[test]
    fn newton_pruning_keeps_what_matters() {
        // Target x1^2 x2^2: only x1*x2 survives out of the degree-2 basis.
        let p = Polynomial::from_monomial(Monomial::new(vec![2, 2]), 1.0);
        let full = monomial_basis(2, 2, Parity::Any);
        let support: Vec<Monomial> = p.terms().map(|(m, _)| m.clone()).collect();
        let pruned = prune_basis_newton(&full, &support);
        assert_eq!(pruned, vec![Monomial::new(vec![1, 1])]);

        // And the pruned compile still certifies.
        let dp = DecisionPoly::from_poly(&p);
        let mut prog = SosProgram::new();
        let id = prog.add_sos(&dp, &pruned).unwrap();
        let sol = prog.solve(&SdpSettings::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        prog.extract_certificate(id, &sol).unwrap();
    }

    #[test]
    fn decision_substitution_preserves_affinity() {
        // Template a*x^2 substituted with x -> u - v stays affine in a.
        let mut prog = SosProgram::new();
        let a = prog.fresh_decision();
        let dp = DecisionPoly::template(1, &[Monomial::new(vec![2])], &[a]);
        let map = [x(2, 0).sub(&x(2, 1)).unwrap()];
        let sub = dp.substitute(&map).unwrap();
        assert!(!sub.is_decision_free());
        let inst = sub.instantiate(&[3.0]);
        // 3(u-v)^2 = 3u^2 - 6uv + 3v^2.
        assert!((inst.coefficient(&Monomial::new(vec![1, 1])) + 6.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_products_rejected() {
        let mut prog = SosProgram::new();
        let a = prog.fresh_decision();
        let b = prog.fresh_decision();
        let pa = DecisionPoly::template(1, &[Monomial::var(1, 0)], &[a]);
        let pb = DecisionPoly::template(1, &[Monomial::var(1, 0)], &[b]);
        assert!(matches!(pa.mul(&pb), Err(SosError::Bilinear)));
        assert!(pa.mul(&DecisionPoly::from_poly(&x(1, 0))).is_ok());
    }
}
