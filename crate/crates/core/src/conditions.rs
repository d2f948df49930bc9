//! The certificate conditions behind consensus verification and synthesis:
//! a PSD lower bound on the coupling quadratic form, a dissipation-style
//! decrease inequality over relative states, and the gradient symmetry
//! identity for second-order protocols. Verification fixes the polynomials
//! and searches a positive definite coupling matrix; synthesis additionally
//! frees the Lyapunov (or coupling) coefficients, one group at a time.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::poly::{Monomial, Parity, PolyError, PolyVector, Polynomial};
use crate::sdp::{Residuals, SdpSettings, SdpSolution, SdpStatus};
use crate::sos::{
    add_sos_default_basis, monomial_basis, with_strictness_margin, DecisionPoly, GramBlockId,
    GramCertificate, LinExpr, SosError, SosProgram,
};

#[derive(Debug, Error)]
pub enum CondError {
    #[error("q-hat entry {index} must be a single monomial of degree >= 1")]
    BadQhatEntry { index: usize },
    #[error("q-hat must contain every coordinate monomial (x{missing} is absent)")]
    MissingCoordinate { missing: usize },
    #[error("exponent 2m must be even and >= 2, got {got}")]
    BadExponent { got: u32 },
    #[error("coupling degree mismatch: deg(h1) = {got}, expected deg(V) - 1 = {expected}")]
    DegreeMismatch { expected: u32, got: u32 },
    #[error("h1 must be odd: h1(-a) = -h1(a) coefficientwise")]
    H1NotOdd,
    #[error("the coupling must have {expected} entries, got {got}")]
    CouplingArity { expected: usize, got: usize },
    #[error("second-order Lyapunov degree must be even, got {got}")]
    OddLyapunovDegree { got: u32 },
    #[error("fixed psi matrix must be {expected}x{expected} symmetric")]
    BadPsi { expected: usize },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sos(#[from] SosError),
}

/// The coupling quadratic form: a vector of monomials and the even exponent
/// of the coordinate lower bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QForm {
    vars: usize,
    qhat: Vec<Monomial>,
    exponent_2m: u32,
}

impl QForm {
    /// Validates the entries: each must be a monomial of degree >= 1 and all
    /// coordinate monomials must appear (so the form vanishes only at the
    /// origin). `exponent_2m` defaults to twice the largest entry degree.
    pub fn new(vars: usize, qhat: Vec<Monomial>, exponent_2m: Option<u32>) -> Result<Self, CondError> {
        for (index, m) in qhat.iter().enumerate() {
            if m.vars() != vars || m.degree() == 0 {
                return Err(CondError::BadQhatEntry { index });
            }
        }
        for i in 0..vars {
            let coord = Monomial::var(vars, i);
            if !qhat.contains(&coord) {
                return Err(CondError::MissingCoordinate { missing: i + 1 });
            }
        }
        let max_deg = qhat.iter().map(Monomial::degree).max().unwrap_or(1);
        let exponent_2m = exponent_2m.unwrap_or(2 * max_deg);
        if exponent_2m < 2 || exponent_2m % 2 != 0 {
            return Err(CondError::BadExponent { got: exponent_2m });
        }
        Ok(QForm { vars, qhat, exponent_2m })
    }

    pub fn from_exponents(
        vars: usize,
        exps: &[Vec<u32>],
        exponent_2m: Option<u32>,
    ) -> Result<Self, CondError> {
        let qhat = exps.iter().map(|e| Monomial::new(e.clone())).collect();
        QForm::new(vars, qhat, exponent_2m)
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn len(&self) -> usize {
        self.qhat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qhat.is_empty()
    }

    pub fn qhat(&self) -> &[Monomial] {
        &self.qhat
    }

    pub fn exponent_2m(&self) -> u32 {
        self.exponent_2m
    }
}

/// The coupling matrix as it enters a condition: either scalar decision
/// variables (upper triangle, row-major) or a fixed numeric matrix.
pub enum PsiMatrix {
    Decision { ids: Vec<usize>, dim: usize },
    Fixed(DMatrix<f64>),
}

impl PsiMatrix {
    fn dim(&self) -> usize {
        match self {
            PsiMatrix::Decision { dim, .. } => *dim,
            PsiMatrix::Fixed(m) => m.nrows(),
        }
    }

    fn entry(&self, i: usize, j: usize) -> LinExpr {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        match self {
            PsiMatrix::Decision { ids, dim } => {
                let idx = i * *dim - i * (i + 1) / 2 + j;
                LinExpr::var(ids[idx])
            }
            PsiMatrix::Fixed(m) => LinExpr::constant(m[(i, j)]),
        }
    }
}

/// Upper-triangle entry count of an s x s symmetric matrix.
pub fn sym_len(s: usize) -> usize {
    s * (s + 1) / 2
}

/// The PSD lower-bound condition: `qhat(a)' Psi qhat(a) - sum_i a_i^{2m}` as
/// a polynomial in the agent state, affine in the Psi entries.
pub fn build_psd_lower_bound(qf: &QForm, psi: &PsiMatrix) -> DecisionPoly {
    let n = qf.vars();
    let s = qf.len();
    debug_assert_eq!(psi.dim(), s);
    let mut out = DecisionPoly::zero(n);
    for k in 0..s {
        for l in k..s {
            let pair = Polynomial::from_monomial(qf.qhat()[k].mul(&qf.qhat()[l]), 1.0);
            let weight = if k == l { 1.0 } else { 2.0 };
            out.add_poly_times_expr(&pair.scale(weight), &psi.entry(k, l));
        }
    }
    let mut bound = Vec::with_capacity(n);
    for i in 0..n {
        let mut exps = vec![0u32; n];
        exps[i] = qf.exponent_2m();
        bound.push((Monomial::new(exps), 1.0));
    }
    out.sub(&DecisionPoly::from_poly(&Polynomial::from_terms(n, bound)))
}

/// Variable layout of the relative-state conditions: the 3n-variable space
/// is split as (alpha, beta, gamma).
fn relative_maps(n: usize) -> (Vec<Polynomial>, Vec<Polynomial>, Vec<Polynomial>, Vec<Polynomial>) {
    let t = 3 * n;
    let var = |i: usize| Polynomial::variable(t, i);
    let alpha_minus_gamma: Vec<Polynomial> =
        (0..n).map(|i| var(i).sub(&var(2 * n + i)).unwrap()).collect();
    let beta_minus_gamma: Vec<Polynomial> =
        (0..n).map(|i| var(n + i).sub(&var(2 * n + i)).unwrap()).collect();
    let alpha: Vec<Polynomial> = (0..n).map(var).collect();
    let beta: Vec<Polynomial> = (0..n).map(|i| var(n + i)).collect();
    (alpha_minus_gamma, beta_minus_gamma, alpha, beta)
}

/// The decrease condition over (alpha, beta, gamma):
///
/// ```text
/// [grad V(a-g) - grad V(b-g)]' [h(a) - h(b)]
///     - [qhat(a-g) - qhat(b-g)]' Psi [qhat(a-g) - qhat(b-g)]
/// ```
///
/// This is the first-order condition with `h` the coupling, and the
/// second-order condition with `h` the velocity coupling. At most one of
/// `v`, `coupling` may carry decision variables.
pub fn build_decrease(
    v: &DecisionPoly,
    coupling: &[DecisionPoly],
    qf: &QForm,
    psi: &PsiMatrix,
) -> Result<DecisionPoly, CondError> {
    let n = qf.vars();
    if v.vars() != n {
        return Err(CondError::Poly(PolyError::VarMismatch { expected: n, got: v.vars() }));
    }
    if coupling.len() != n {
        return Err(CondError::CouplingArity { expected: n, got: coupling.len() });
    }
    let (map_ag, map_bg, map_a, map_b) = relative_maps(n);

    let grad = v.gradient();
    let mut product = DecisionPoly::zero(3 * n);
    for i in 0..n {
        let f_grad = grad[i].substitute(&map_ag)?.sub(&grad[i].substitute(&map_bg)?);
        let f_h = coupling[i].substitute(&map_a)?.sub(&coupling[i].substitute(&map_b)?);
        product = product.add(&f_grad.mul(&f_h)?);
    }

    let s = qf.len();
    let delta_q: Vec<Polynomial> = qf
        .qhat()
        .iter()
        .map(|m| {
            let p = Polynomial::from_monomial(m.clone(), 1.0);
            Ok::<_, CondError>(p.substitute(&map_ag)?.sub(&p.substitute(&map_bg)?)?)
        })
        .collect::<Result<_, _>>()?;
    let mut h_form = DecisionPoly::zero(3 * n);
    for k in 0..s {
        for l in k..s {
            let pair = delta_q[k].mul(&delta_q[l])?;
            let weight = if k == l { 1.0 } else { 2.0 };
            h_form.add_poly_times_expr(&pair.scale(weight), &psi.entry(k, l));
        }
    }
    Ok(product.sub(&h_form))
}

/// The gradient symmetry polynomial over (alpha, beta):
/// `grad V(alpha) . h1(beta) - grad V(beta) . h1(alpha)`. Identically zero
/// when `h1 = grad V`.
pub fn build_symmetry_polynomial(v: &Polynomial, h1: &PolyVector) -> Result<Polynomial, CondError> {
    let n = v.vars();
    if h1.len() != n {
        return Err(CondError::CouplingArity { expected: n, got: h1.len() });
    }
    let expected = v.degree().saturating_sub(1);
    let got = h1.iter().map(Polynomial::degree).max().unwrap_or(0);
    if got != expected {
        return Err(CondError::DegreeMismatch { expected, got });
    }
    let t = 2 * n;
    let map_a: Vec<Polynomial> = (0..n).map(|i| Polynomial::variable(t, i)).collect();
    let map_b: Vec<Polynomial> = (0..n).map(|i| Polynomial::variable(t, n + i)).collect();
    let grad = v.gradient();
    let ga = grad.substitute(&map_a)?;
    let gb = grad.substitute(&map_b)?;
    let ha = h1.substitute(&map_a)?;
    let hb = h1.substitute(&map_b)?;
    Ok(ga.dot(&hb)?.sub(&gb.dot(&ha)?)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveStats {
    pub status: SdpStatus,
    pub iterations: usize,
    pub residuals: Residuals,
    pub rows: usize,
    pub block_dims: Vec<usize>,
    pub objective: Option<f64>,
}

fn stats_of(prog: &SosProgram, sol: &SdpSolution) -> SolveStats {
    let problem = prog.build();
    SolveStats {
        status: sol.status,
        iterations: sol.iterations,
        residuals: sol.residuals,
        rows: problem.rows.len(),
        block_dims: problem.block_dims,
        objective: matches!(sol.status, SdpStatus::Optimal).then_some(sol.primal_objective),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FirstOrderCertificate {
    pub v: Polynomial,
    pub h: PolyVector,
    pub psi: Vec<Vec<f64>>,
    pub lambda_min_psi: f64,
    pub cert_v_pd: GramCertificate,
    pub cert_lower_bound: GramCertificate,
    pub cert_decrease: GramCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct SecondOrderCertificate {
    pub v: Polynomial,
    pub h1: PolyVector,
    pub h2: PolyVector,
    pub psi: Vec<Vec<f64>>,
    pub lambda_min_psi: f64,
    pub cert_v_pd: GramCertificate,
    pub cert_lower_bound: GramCertificate,
    pub cert_decrease: GramCertificate,
    /// Largest coefficient of the gradient symmetry polynomial.
    pub a42_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub enum FailureReason {
    Solver { status: SdpStatus },
    PsiNotPositiveDefinite { lambda_min: f64 },
    SymmetryResidual { residual: f64, tolerance: f64 },
    Certificate { message: String },
}

#[derive(Debug, Clone, Serialize)]
pub enum Outcome {
    FirstOrder(Box<FirstOrderCertificate>),
    SecondOrder(Box<SecondOrderCertificate>),
    Failed(FailureReason),
}

impl Outcome {
    pub fn is_certified(&self) -> bool {
        !matches!(self, Outcome::Failed(_))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub outcome: Outcome,
    pub stats: SolveStats,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    /// Per-coefficient tolerance on the gradient symmetry identity.
    pub a42_tol: f64,
    /// Strictness margin for the positive definiteness of V.
    pub eps_pd: f64,
    /// Verify against this fixed coupling matrix instead of searching one.
    pub fixed_psi: Option<DMatrix<f64>>,
    pub sdp: SdpSettings,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { a42_tol: 1e-8, eps_pd: 1e-6, fixed_psi: None, sdp: SdpSettings::default() }
    }
}

pub enum VerifyInput {
    FirstOrder { v: Polynomial, h: PolyVector },
    SecondOrder { v: Polynomial, h1: PolyVector, h2: PolyVector },
}

/// The assembled condition program plus the handles needed to pull
/// certificates back out.
struct Assembled {
    prog: SosProgram,
    psi: PsiDescriptor,
    id_lower: GramBlockId,
    id_decrease: GramBlockId,
    id_v_pd: GramBlockId,
    v_dp: DecisionPoly,
    coupling_dp: Vec<DecisionPoly>,
}

enum PsiDescriptor {
    Decision { ids: Vec<usize>, dim: usize },
    Fixed(DMatrix<f64>),
}

struct Caps {
    psi_trace: f64,
    gram_trace: f64,
}

fn assemble(
    v_dp: &DecisionPoly,
    coupling_dp: &[DecisionPoly],
    qf: &QForm,
    fixed_psi: Option<&DMatrix<f64>>,
    eps_pd: f64,
    caps: Option<&Caps>,
) -> Result<Assembled, CondError> {
    let s = qf.len();
    let mut prog = SosProgram::new();

    // The caller allocated template decision ids starting from zero; mirror
    // that layout in this program before allocating anything else.
    let mut max_id = 0usize;
    let mut track = |dp: &DecisionPoly| {
        for m in dp.support() {
            for &(id, _) in &dp.coefficient(&m).terms {
                max_id = max_id.max(id + 1);
            }
        }
    };
    track(v_dp);
    for c in coupling_dp {
        track(c);
    }
    while prog.decision_count() < max_id {
        prog.fresh_decision();
    }

    let (psi, psi_ref) = match fixed_psi {
        Some(m) => {
            if m.nrows() != s || m.ncols() != s {
                return Err(CondError::BadPsi { expected: s });
            }
            (PsiDescriptor::Fixed(m.clone()), PsiMatrix::Fixed(m.clone()))
        }
        None => {
            let ids = prog.fresh_decisions(sym_len(s));
            (
                PsiDescriptor::Decision { ids: ids.clone(), dim: s },
                PsiMatrix::Decision { ids, dim: s },
            )
        }
    };

    let dp_lower = build_psd_lower_bound(qf, &psi_ref);
    let (id_lower, _) = add_sos_default_basis(&mut prog, &dp_lower)?;

    let dp_dec = build_decrease(v_dp, coupling_dp, qf, &psi_ref)?;
    let (id_decrease, _) = add_sos_default_basis(&mut prog, &dp_dec)?;

    // V - V(0) - eps * |x|^2 is SOS.
    let mut v0 = v_dp.clone();
    let one = Monomial::one(qf.vars());
    let c0 = v0.coefficient(&one);
    if !c0.is_zero() {
        let mut drop = DecisionPoly::zero(qf.vars());
        drop.add_poly_times_expr(&Polynomial::constant(qf.vars(), 1.0), &c0);
        v0 = v0.sub(&drop);
    }
    let dp_v_pd = with_strictness_margin(&v0, eps_pd, 1);
    let (id_v_pd, _) = add_sos_default_basis(&mut prog, &dp_v_pd)?;

    // Tie-break objective: maximize the spectral floor of Psi through
    // Psi - t I >= 0. Trace caps bound the joint scaling ray of (V, Psi)
    // when both carry decision variables.
    if let PsiDescriptor::Decision { ids, dim } = &psi {
        let t = prog.fresh_decision();
        let z = prog.add_psd_block(*dim);
        for i in 0..*dim {
            for j in i..*dim {
                let idx = i * *dim - i * (i + 1) / 2 + j;
                let mut expr = LinExpr::var(ids[idx]);
                if i == j {
                    expr.add_assign(&LinExpr::var(t), -1.0);
                }
                prog.link_block_entry(z, i, j, &expr);
            }
        }
        prog.maximize(t);
        if let Some(caps) = caps {
            prog.add_trace_cap(z, caps.psi_trace);
            for id in [id_lower, id_decrease, id_v_pd] {
                prog.add_trace_cap(id, caps.gram_trace);
            }
        }
    }

    Ok(Assembled {
        prog,
        psi,
        id_lower,
        id_decrease,
        id_v_pd,
        v_dp: v_dp.clone(),
        coupling_dp: coupling_dp.to_vec(),
    })
}

struct Extracted {
    v: Polynomial,
    coupling: PolyVector,
    psi: DMatrix<f64>,
    lambda_min_psi: f64,
    cert_v_pd: GramCertificate,
    cert_lower: GramCertificate,
    cert_decrease: GramCertificate,
}

fn extract(asm: &Assembled, sol: &SdpSolution) -> Result<Extracted, CondError> {
    let values = &sol.free_values;
    let v = asm.v_dp.instantiate(values);
    let coupling =
        PolyVector::new(asm.coupling_dp.iter().map(|c| c.instantiate(values)).collect())?;
    let psi = match &asm.psi {
        PsiDescriptor::Fixed(m) => m.clone(),
        PsiDescriptor::Decision { ids, dim } => {
            let mut m = DMatrix::zeros(*dim, *dim);
            for i in 0..*dim {
                for j in i..*dim {
                    let idx = i * *dim - i * (i + 1) / 2 + j;
                    m[(i, j)] = values[ids[idx]];
                    m[(j, i)] = values[ids[idx]];
                }
            }
            m
        }
    };
    let lambda_min_psi = psi.clone().symmetric_eigenvalues().min();
    let cert_v_pd = asm.prog.extract_certificate(asm.id_v_pd, sol)?;
    let cert_lower = asm.prog.extract_certificate(asm.id_lower, sol)?;
    let cert_decrease = asm.prog.extract_certificate(asm.id_decrease, sol)?;
    Ok(Extracted { v, coupling, psi, lambda_min_psi, cert_v_pd, cert_lower, cert_decrease })
}

fn psi_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Verifies fixed polynomials against the consensus conditions: assembles
/// the PSD lower bound plus decrease condition (and, second order, the
/// gradient symmetry identity), solves one SDP over the coupling matrix, and
/// returns validated Gram certificates or the failure mode.
pub fn verify(input: &VerifyInput, qf: &QForm, config: &VerifyConfig) -> Result<VerifyReport, CondError> {
    let (v, coupling, pair, a42_residual) = match input {
        VerifyInput::FirstOrder { v, h } => {
            if h.len() != qf.vars() {
                return Err(CondError::CouplingArity { expected: qf.vars(), got: h.len() });
            }
            (v, h, None, 0.0)
        }
        VerifyInput::SecondOrder { v, h1, h2 } => {
            if !h1.is_odd_function() {
                return Err(CondError::H1NotOdd);
            }
            let sym = build_symmetry_polynomial(v, h1)?;
            let residual = sym.max_abs_coefficient();
            if residual > config.a42_tol {
                return Ok(VerifyReport {
                    outcome: Outcome::Failed(FailureReason::SymmetryResidual {
                        residual,
                        tolerance: config.a42_tol,
                    }),
                    stats: SolveStats {
                        status: SdpStatus::NumericalFailure,
                        iterations: 0,
                        residuals: Residuals::default(),
                        rows: 0,
                        block_dims: vec![],
                        objective: None,
                    },
                });
            }
            (v, h2, Some((h1.clone(), h2.clone())), residual)
        }
    };

    let v_dp = DecisionPoly::from_poly(v);
    let coupling_dp: Vec<DecisionPoly> = coupling.iter().map(DecisionPoly::from_poly).collect();
    let asm = assemble(&v_dp, &coupling_dp, qf, config.fixed_psi.as_ref(), config.eps_pd, None)?;
    let sol = asm.prog.solve(&config.sdp)?;
    let stats = stats_of(&asm.prog, &sol);
    if !matches!(sol.status, SdpStatus::Optimal) {
        return Ok(VerifyReport {
            outcome: Outcome::Failed(FailureReason::Solver { status: sol.status }),
            stats,
        });
    }
    let ex = match extract(&asm, &sol) {
        Ok(ex) => ex,
        Err(CondError::Sos(e @ (SosError::CertificateRejected { .. } | SosError::NotPsd { .. }))) => {
            return Ok(VerifyReport {
                outcome: Outcome::Failed(FailureReason::Certificate { message: e.to_string() }),
                stats,
            });
        }
        Err(e) => return Err(e),
    };
    if ex.lambda_min_psi <= 0.0 {
        return Ok(VerifyReport {
            outcome: Outcome::Failed(FailureReason::PsiNotPositiveDefinite {
                lambda_min: ex.lambda_min_psi,
            }),
            stats,
        });
    }
    let outcome = match pair {
        Some((h1, h2)) => Outcome::SecondOrder(Box::new(SecondOrderCertificate {
            v: ex.v,
            h1,
            h2,
            psi: psi_rows(&ex.psi),
            lambda_min_psi: ex.lambda_min_psi,
            cert_v_pd: ex.cert_v_pd,
            cert_lower_bound: ex.cert_lower,
            cert_decrease: ex.cert_decrease,
            a42_residual,
        })),
        None => Outcome::FirstOrder(Box::new(FirstOrderCertificate {
            v: ex.v,
            h: ex.coupling,
            psi: psi_rows(&ex.psi),
            lambda_min_psi: ex.lambda_min_psi,
            cert_v_pd: ex.cert_v_pd,
            cert_lower_bound: ex.cert_lower,
            cert_decrease: ex.cert_decrease,
        })),
    };
    Ok(VerifyReport { outcome, stats })
}

/// Plain-text dump of the semidefinite program a verification run solves,
/// for cross-checking against external solvers.
pub fn dump_verify_problem(
    input: &VerifyInput,
    qf: &QForm,
    config: &VerifyConfig,
) -> Result<String, CondError> {
    let (v, coupling) = match input {
        VerifyInput::FirstOrder { v, h } => (v, h),
        VerifyInput::SecondOrder { v, h2, .. } => (v, h2),
    };
    let v_dp = DecisionPoly::from_poly(v);
    let coupling_dp: Vec<DecisionPoly> = coupling.iter().map(DecisionPoly::from_poly).collect();
    let asm = assemble(&v_dp, &coupling_dp, qf, config.fixed_psi.as_ref(), config.eps_pd, None)?;
    Ok(asm.prog.build().dump())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SynthMode {
    /// One SDP: the coupling is fixed, V and Psi are synthesized.
    FixedCoupling,
    /// Rounds of (fix coupling, solve V+Psi) then (fix V, solve
    /// coupling+Psi), stopping on validity, stagnation, or the round limit.
    Alternate { max_rounds: usize },
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub order: u8,
    pub deg_v: u32,
    /// Template degree of the synthesized coupling in alternate rounds.
    pub coupling_degree: u32,
    /// Fixed coupling (first order: h, second order: h2). Defaults to the
    /// identity map on each coordinate.
    pub coupling: Option<PolyVector>,
    pub mode: SynthMode,
    pub eps_pd: f64,
    /// Trace cap on Psi; bounds the joint scaling ray of (V, Psi).
    pub psi_trace_cap: f64,
    /// Trace cap on each Gram block in synthesis.
    pub gram_trace_cap: f64,
    pub sdp: SdpSettings,
}

impl SynthConfig {
    pub fn new(order: u8, deg_v: u32) -> Self {
        SynthConfig {
            order,
            deg_v,
            coupling_degree: 3,
            coupling: None,
            mode: SynthMode::FixedCoupling,
            eps_pd: 1e-6,
            psi_trace_cap: 100.0,
            gram_trace_cap: 1e4,
            sdp: SdpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundStats {
    pub round: usize,
    pub phase: &'static str,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisResult {
    pub outcome: Outcome,
    pub rounds: Vec<RoundStats>,
}

pub fn identity_coupling(n: usize) -> PolyVector {
    PolyVector::new((0..n).map(|i| Polynomial::variable(n, i)).collect()).expect("same arity")
}

/// Lyapunov template monomials: all degrees 1..=deg for first order, even
/// degrees for second order (so h1 = grad V is odd); never a constant term.
fn v_template_monomials(n: usize, deg_v: u32, order: u8) -> Vec<Monomial> {
    let parity = if order == 2 { Parity::Even } else { Parity::Any };
    monomial_basis(n, deg_v, parity)
        .into_iter()
        .filter(|m| m.degree() >= 1)
        .collect()
}

fn coupling_template_monomials(n: usize, deg: u32) -> Vec<Monomial> {
    monomial_basis(n, deg, Parity::Any)
        .into_iter()
        .filter(|m| m.degree() >= 1)
        .collect()
}

/// Synthesizes a Lyapunov function (and optionally the coupling) for the
/// given order. Fixed-coupling mode solves a single SDP over the V
/// coefficients and Psi; alternate mode interleaves coupling refinement,
/// keeping the best validated bundle.
pub fn synthesize(qf: &QForm, config: &SynthConfig) -> Result<SynthesisResult, CondError> {
    let n = qf.vars();
    if config.order == 2 && config.deg_v % 2 != 0 {
        return Err(CondError::OddLyapunovDegree { got: config.deg_v });
    }
    let mut coupling = config.coupling.clone().unwrap_or_else(|| identity_coupling(n));
    if coupling.len() != n {
        return Err(CondError::CouplingArity { expected: n, got: coupling.len() });
    }

    let mut rounds = Vec::new();
    let max_rounds = match config.mode {
        SynthMode::FixedCoupling => 1,
        SynthMode::Alternate { max_rounds } => max_rounds.max(1),
    };
    let mut best: Option<Outcome> = None;
    let mut best_lambda = f64::NEG_INFINITY;
    let mut first_failure: Option<FailureReason> = None;

    for round in 1..=max_rounds {
        // Phase a: coupling fixed, V and Psi free.
        let phase_a = solve_phase_v(qf, config, &coupling)?;
        rounds.push(RoundStats { round, phase: "coupling-fixed", stats: phase_a.stats });
        let v = match phase_a.result {
            PhaseResult::Certified { outcome, v, lambda } => {
                if lambda > best_lambda {
                    best_lambda = lambda;
                    best = Some(outcome);
                }
                v
            }
            PhaseResult::Failed(reason) => {
                first_failure.get_or_insert(reason);
                break;
            }
        };
        if matches!(config.mode, SynthMode::FixedCoupling) {
            break;
        }

        // Phase b: V fixed, coupling and Psi free.
        let phase_b = solve_phase_coupling(qf, config, &v)?;
        rounds.push(RoundStats { round, phase: "v-fixed", stats: phase_b.stats });
        match phase_b.result {
            PhaseResult::Certified { outcome, lambda, .. } => {
                let improved = lambda > best_lambda * 1.01 + 1e-12;
                if lambda > best_lambda {
                    best_lambda = lambda;
                    if let Some(c) = outcome_coupling(&outcome) {
                        coupling = c;
                    }
                    best = Some(outcome);
                }
                if !improved {
                    break;
                }
            }
            PhaseResult::Failed(reason) => {
                first_failure.get_or_insert(reason);
                break;
            }
        }
    }

    match best {
        Some(outcome) => Ok(SynthesisResult { outcome, rounds }),
        None => Ok(SynthesisResult {
            outcome: Outcome::Failed(first_failure.unwrap_or(FailureReason::Solver {
                status: SdpStatus::NumericalFailure,
            })),
            rounds,
        }),
    }
}

fn outcome_coupling(outcome: &Outcome) -> Option<PolyVector> {
    match outcome {
        Outcome::FirstOrder(c) => Some(c.h.clone()),
        Outcome::SecondOrder(c) => Some(c.h2.clone()),
        Outcome::Failed(_) => None,
    }
}

enum PhaseResult {
    Certified { outcome: Outcome, v: Polynomial, lambda: f64 },
    Failed(FailureReason),
}

struct PhaseOutput {
    result: PhaseResult,
    stats: SolveStats,
}

fn solve_phase_v(
    qf: &QForm,
    config: &SynthConfig,
    coupling: &PolyVector,
) -> Result<PhaseOutput, CondError> {
    let n = qf.vars();
    let template = v_template_monomials(n, config.deg_v, config.order);
    let ids: Vec<usize> = (0..template.len()).collect();
    let v_dp = DecisionPoly::template(n, &template, &ids);
    let coupling_dp: Vec<DecisionPoly> = coupling.iter().map(DecisionPoly::from_poly).collect();
    run_phase(qf, config, &v_dp, &coupling_dp)
}

fn solve_phase_coupling(
    qf: &QForm,
    config: &SynthConfig,
    v: &Polynomial,
) -> Result<PhaseOutput, CondError> {
    let n = qf.vars();
    let template = coupling_template_monomials(n, config.coupling_degree);
    let mut next = 0usize;
    let coupling_dp: Vec<DecisionPoly> = (0..n)
        .map(|_| {
            let ids: Vec<usize> = (next..next + template.len()).collect();
            next += template.len();
            DecisionPoly::template(n, &template, &ids)
        })
        .collect();
    let v_dp = DecisionPoly::from_poly(v);
    run_phase(qf, config, &v_dp, &coupling_dp)
}

fn run_phase(
    qf: &QForm,
    config: &SynthConfig,
    v_dp: &DecisionPoly,
    coupling_dp: &[DecisionPoly],
) -> Result<PhaseOutput, CondError> {
    let caps = Caps { psi_trace: config.psi_trace_cap, gram_trace: config.gram_trace_cap };
    let asm = assemble(v_dp, coupling_dp, qf, None, config.eps_pd, Some(&caps))?;
    let sol = asm.prog.solve(&config.sdp)?;
    let stats = stats_of(&asm.prog, &sol);
    if !matches!(sol.status, SdpStatus::Optimal) {
        return Ok(PhaseOutput {
            result: PhaseResult::Failed(FailureReason::Solver { status: sol.status }),
            stats,
        });
    }
    let ex = match extract(&asm, &sol) {
        Ok(ex) => ex,
        Err(CondError::Sos(e @ (SosError::CertificateRejected { .. } | SosError::NotPsd { .. }))) => {
            return Ok(PhaseOutput {
                result: PhaseResult::Failed(FailureReason::Certificate { message: e.to_string() }),
                stats,
            });
        }
        Err(e) => return Err(e),
    };
    if ex.lambda_min_psi <= 0.0 {
        return Ok(PhaseOutput {
            result: PhaseResult::Failed(FailureReason::PsiNotPositiveDefinite {
                lambda_min: ex.lambda_min_psi,
            }),
            stats,
        });
    }
    let outcome = if config.order == 2 {
        let h1 = ex.v.gradient();
        debug_assert!(h1.is_odd_function());
        let a42 = build_symmetry_polynomial(&ex.v, &h1)?.max_abs_coefficient();
        Outcome::SecondOrder(Box::new(SecondOrderCertificate {
            v: ex.v.clone(),
            h1,
            h2: ex.coupling.clone(),
            psi: psi_rows(&ex.psi),
            lambda_min_psi: ex.lambda_min_psi,
            cert_v_pd: ex.cert_v_pd,
            cert_lower_bound: ex.cert_lower,
            cert_decrease: ex.cert_decrease,
            a42_residual: a42,
        }))
    } else {
        Outcome::FirstOrder(Box::new(FirstOrderCertificate {
            v: ex.v.clone(),
            h: ex.coupling.clone(),
            psi: psi_rows(&ex.psi),
            lambda_min_psi: ex.lambda_min_psi,
            cert_v_pd: ex.cert_v_pd,
            cert_lower_bound: ex.cert_lower,
            cert_decrease: ex.cert_decrease,
        }))
    };
    Ok(PhaseOutput {
        result: PhaseResult::Certified { outcome, v: ex.v, lambda: ex.lambda_min_psi },
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_qform() -> QForm {
        QForm::new(1, vec![Monomial::var(1, 0)], None).unwrap()
    }

    fn z_squared() -> Polynomial {
        Polynomial::from_monomial(Monomial::new(vec![2]), 1.0)
    }

    #[test]
    fn qform_validation() {
        let err = QForm::new(2, vec![Monomial::var(2, 0)], None).unwrap_err();
        assert!(matches!(err, CondError::MissingCoordinate { missing: 2 }));
        let err = QForm::new(1, vec![Monomial::one(1)], None).unwrap_err();
        assert!(matches!(err, CondError::BadQhatEntry { .. }));
        // Default exponent is twice the max entry degree.
        let qf = QForm::new(
            2,
            vec![
                Monomial::var(2, 0),
                Monomial::var(2, 1),
                Monomial::new(vec![1, 1]),
                Monomial::new(vec![2, 0]),
                Monomial::new(vec![0, 2]),
            ],
            None,
        )
        .unwrap();
        assert_eq!(qf.exponent_2m(), 4);
    }

    #[test]
    fn scalar_lower_bound_condition() {
        // n = 1, qhat = [a], 2m = 2: psi * a^2 - a^2.
        let qf = scalar_qform();
        let psi = PsiMatrix::Decision { ids: vec![0], dim: 1 };
        let dp = build_psd_lower_bound(&qf, &psi);
        let expr = dp.coefficient(&Monomial::new(vec![2]));
        assert_eq!(expr.terms, vec![(0, 1.0)]);
        assert_eq!(expr.constant, -1.0);
        // With psi = 2 the instantiated polynomial is a^2.
        let inst = dp.instantiate(&[2.0]);
        assert!((inst.coefficient(&Monomial::new(vec![2])) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn paper_shaped_lower_bound_has_15_unknowns_and_degree_4() {
        let qf = QForm::new(
            2,
            vec![
                Monomial::var(2, 0),
                Monomial::var(2, 1),
                Monomial::new(vec![1, 1]),
                Monomial::new(vec![2, 0]),
                Monomial::new(vec![0, 2]),
            ],
            Some(4),
        )
        .unwrap();
        assert_eq!(sym_len(5), 15);
        let ids: Vec<usize> = (0..15).collect();
        let dp = build_psd_lower_bound(&qf, &PsiMatrix::Decision { ids, dim: 5 });
        assert_eq!(dp.degree(), 4);
    }

    #[test]
    fn scalar_decrease_matches_hand_algebra() {
        // V = z^2, h = z: condition is (2 - psi)(a - b)^2, independent of g.
        let qf = scalar_qform();
        let v = DecisionPoly::from_poly(&z_squared());
        let h = vec![DecisionPoly::from_poly(&Polynomial::variable(1, 0))];
        let dp =
            build_decrease(&v, &h, &qf, &PsiMatrix::Decision { ids: vec![0], dim: 1 }).unwrap();
        // Instantiate at psi = 2: identically zero.
        assert!(dp.instantiate(&[2.0]).is_zero());
        // At psi = 0: 2(a-b)^2 over (a, b, g).
        let at0 = dp.instantiate(&[0.0]);
        assert!((at0.coefficient(&Monomial::new(vec![2, 0, 0])) - 2.0).abs() < 1e-12);
        assert!((at0.coefficient(&Monomial::new(vec![1, 1, 0])) + 4.0).abs() < 1e-12);
        assert!((at0.coefficient(&Monomial::new(vec![0, 2, 0])) - 2.0).abs() < 1e-12);
        assert!(at0.terms().all(|(m, _)| m.exponents()[2] == 0));
    }

    #[test]
    fn decrease_vanishes_at_alpha_equals_beta() {
        let qf = scalar_qform();
        let v = DecisionPoly::from_poly(&z_squared());
        let h = vec![DecisionPoly::from_poly(&Polynomial::variable(1, 0))];
        let dp =
            build_decrease(&v, &h, &qf, &PsiMatrix::Fixed(DMatrix::from_element(1, 1, 1.5)))
                .unwrap();
        let poly = dp.to_poly().unwrap();
        // Substitute beta := alpha.
        let map: Vec<Polynomial> = vec![
            Polynomial::variable(3, 0),
            Polynomial::variable(3, 0),
            Polynomial::variable(3, 2),
        ];
        assert!(poly.substitute(&map).unwrap().is_zero());
    }

    #[test]
    fn bilinear_v_and_coupling_rejected() {
        let qf = scalar_qform();
        let v = DecisionPoly::template(1, &[Monomial::new(vec![2])], &[0]);
        let h = vec![DecisionPoly::template(1, &[Monomial::var(1, 0)], &[1])];
        let err = build_decrease(&v, &h, &qf, &PsiMatrix::Decision { ids: vec![2], dim: 1 })
            .unwrap_err();
        assert!(matches!(err, CondError::Sos(SosError::Bilinear)));
    }

    #[test]
    fn gamma_invariance_for_coordinate_qhat_and_linear_h() {
        // Expansion at gamma = 0 equals expansion at random gamma for a
        // coordinate-only qhat and linear coupling.
        let qf = QForm::new(2, vec![Monomial::var(2, 0), Monomial::var(2, 1)], None).unwrap();
        let v = DecisionPoly::from_poly(&Polynomial::from_terms(
            2,
            vec![(Monomial::new(vec![2, 0]), 1.0), (Monomial::new(vec![0, 2]), 0.7)],
        ));
        let h: Vec<DecisionPoly> =
            identity_coupling(2).iter().map(DecisionPoly::from_poly).collect();
        let psi = PsiMatrix::Fixed(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.9]));
        let dp = build_decrease(&v, &h, &qf, &psi).unwrap().to_poly().unwrap();
        for seed in 0..5 {
            let g = [0.3 * seed as f64 - 0.7, 0.11 * seed as f64];
            for pt in [[0.4, -1.2], [1.0, 0.25], [-0.6, 0.9]] {
                let a = [pt[0], pt[1]];
                let b = [-0.2 * pt[0], 0.5 + pt[1]];
                let with_g = dp.evaluate(&[a[0], a[1], b[0], b[1], g[0], g[1]]).unwrap();
                let no_g = dp.evaluate(&[a[0], a[1], b[0], b[1], 0.0, 0.0]).unwrap();
                assert!((with_g - no_g).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn symmetry_polynomial_examples() {
        // h1 = grad V: identically zero.
        let v = z_squared();
        let h1 = v.gradient();
        assert!(build_symmetry_polynomial(&v, &h1).unwrap().is_zero());

        // Degree precondition: deg(h1) must be deg(V) - 1.
        let h_bad =
            PolyVector::new(vec![Polynomial::from_monomial(Monomial::new(vec![3]), 1.0)]).unwrap();
        assert!(matches!(
            build_symmetry_polynomial(&v, &h_bad),
            Err(CondError::DegreeMismatch { expected: 1, got: 3 })
        ));

        // V = x^4 + x^2 with h1 = [x^3] leaves 2ab^3 - 2a^3b.
        let v4 = Polynomial::from_monomial(Monomial::new(vec![4]), 1.0);
        let h3 =
            PolyVector::new(vec![Polynomial::from_monomial(Monomial::new(vec![3]), 1.0)]).unwrap();
        assert!(build_symmetry_polynomial(&v4, &h3).unwrap().is_zero());
        let v42 = v4.add(&z_squared()).unwrap();
        let sym = build_symmetry_polynomial(&v42, &h3).unwrap();
        assert!((sym.coefficient(&Monomial::new(vec![1, 3])) - 2.0).abs() < 1e-12);
        assert!((sym.coefficient(&Monomial::new(vec![3, 1])) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_window_boundaries() {
        // V = z^2, h = z, qhat = [a]: feasible exactly for psi in [1, 2].
        let qf = scalar_qform();
        let input = VerifyInput::FirstOrder { v: z_squared(), h: identity_coupling(1) };
        for (psi, feasible) in [(1.0, true), (1.5, true), (2.0, true), (0.9, false), (2.1, false)] {
            let config = VerifyConfig {
                fixed_psi: Some(DMatrix::from_element(1, 1, psi)),
                ..VerifyConfig::default()
            };
            let report = verify(&input, &qf, &config).unwrap();
            assert_eq!(
                report.outcome.is_certified(),
                feasible,
                "psi = {psi}: {:?}",
                report.stats.status
            );
            if !feasible {
                assert!(matches!(
                    report.outcome,
                    Outcome::Failed(FailureReason::Solver { status: SdpStatus::Infeasible })
                ));
            }
        }
    }

    #[test]
    fn scalar_verify_with_free_psi() {
        let qf = scalar_qform();
        let input = VerifyInput::FirstOrder { v: z_squared(), h: identity_coupling(1) };
        let report = verify(&input, &qf, &VerifyConfig::default()).unwrap();
        match &report.outcome {
            Outcome::FirstOrder(cert) => {
                // max lambda_min over psi in [1, 2] is attained at psi = 2.
                assert!((cert.psi[0][0] - 2.0).abs() < 1e-5, "psi = {}", cert.psi[0][0]);
                assert!(cert.lambda_min_psi > 1.99);
            }
            other => panic!("expected certificate, got {other:?}"),
        }
    }

    #[test]
    fn anti_dissipative_coupling_is_infeasible() {
        // h = -z flips the sign of the decrease term.
        let qf = scalar_qform();
        let h = PolyVector::new(vec![Polynomial::variable(1, 0).scale(-1.0)]).unwrap();
        let input = VerifyInput::FirstOrder { v: z_squared(), h };
        let report = verify(&input, &qf, &VerifyConfig::default()).unwrap();
        assert!(matches!(
            report.outcome,
            Outcome::Failed(FailureReason::Solver { status: SdpStatus::Infeasible })
        ));
    }

    #[test]
    fn zero_velocity_coupling_is_infeasible() {
        // h2 = 0 leaves -H against the PSD lower bound.
        let qf = scalar_qform();
        let v = z_squared();
        let h1 = v.gradient();
        let h2 = PolyVector::new(vec![Polynomial::zero(1)]).unwrap();
        let input = VerifyInput::SecondOrder { v, h1, h2 };
        let report = verify(&input, &qf, &VerifyConfig::default()).unwrap();
        assert!(matches!(
            report.outcome,
            Outcome::Failed(FailureReason::Solver { status: SdpStatus::Infeasible })
        ));
    }

    #[test]
    fn scalar_first_order_synthesis_recovers_quadratic() {
        // h(z) = z fixed, deg V = 2: V proportional to z^2 (no linear term).
        let qf = scalar_qform();
        let config = SynthConfig::new(1, 2);
        let result = synthesize(&qf, &config).unwrap();
        match &result.outcome {
            Outcome::FirstOrder(cert) => {
                let quad = cert.v.coefficient(&Monomial::new(vec![2]));
                let lin = cert.v.coefficient(&Monomial::new(vec![1]));
                assert!(quad > 1e-6, "quadratic coefficient {quad}");
                assert!(lin.abs() < 1e-6 * (1.0 + quad), "linear coefficient {lin}");
            }
            other => panic!("expected first-order certificate, got {other:?}"),
        }
        assert_eq!(result.rounds.len(), 1);
    }

    #[test]
    fn template_parity() {
        let t2 = v_template_monomials(2, 4, 2);
        assert!(t2.iter().all(|m| m.degree() % 2 == 0 && m.degree() >= 2));
        assert_eq!(t2.len(), 8);
        let t1 = v_template_monomials(1, 2, 1);
        assert_eq!(t1.len(), 2);
    }
}
