//! Exact multivariate polynomial algebra over a fixed, indexed variable set.
//!
//! Polynomials are stored in canonical form: a map from exponent tuples to
//! nonzero `f64` coefficients, ordered graded-lexicographically (total degree
//! first, earlier variables ranked higher within a degree). Terms whose
//! coefficient falls below [`CANON_EPS`] after arithmetic are dropped.
//!
//! Values are immutable after construction and every operation is a pure
//! function, so they can be shared freely across threads.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Coefficients with absolute value below this are dropped when a polynomial
/// is canonicalized after arithmetic.
pub const CANON_EPS: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolyError {
    #[error("variable count mismatch: expected {expected}, got {got}")]
    VarMismatch { expected: usize, got: usize },
    #[error("substitution map has {got} entries, polynomial has {expected} variables")]
    BadSubstitutionMap { expected: usize, got: usize },
    #[error("evaluation point has {got} coordinates, polynomial has {expected} variables")]
    BadPoint { expected: usize, got: usize },
}

/// A power product of the variables, identified by its exponent tuple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial {
    exps: Vec<u32>,
}

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Monomial { exps }
    }

    /// The constant monomial `1` over `vars` variables.
    pub fn one(vars: usize) -> Self {
        Monomial { exps: vec![0; vars] }
    }

    /// The monomial `x_i` over `vars` variables.
    pub fn var(vars: usize, i: usize) -> Self {
        assert!(i < vars, "variable index {i} out of range for {vars} variables");
        let mut exps = vec![0; vars];
        exps[i] = 1;
        Monomial { exps }
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exps
    }

    pub fn vars(&self) -> usize {
        self.exps.len()
    }

    pub fn degree(&self) -> u32 {
        self.exps.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.exps.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.vars(), other.vars());
        Monomial {
            exps: self
                .exps
                .iter()
                .zip(&other.exps)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.exps
            .iter()
            .zip(point)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Graded-lex order: lower total degree first; within a degree, monomials
/// with larger leading exponents come first (so `x1^2 < x1*x2 < x2^2` here,
/// giving the listing 1, x1, x2, x1^2, x1*x2, x2^2 when sorted ascending).
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.exps.cmp(&self.exps))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_one() {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.exps.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// A real polynomial in canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    vars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(vars: usize) -> Self {
        Polynomial { vars, terms: BTreeMap::new() }
    }

    pub fn constant(vars: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(vars);
        if c.abs() >= CANON_EPS {
            p.terms.insert(Monomial::one(vars), c);
        }
        p
    }

    /// The polynomial `x_i`.
    pub fn variable(vars: usize, i: usize) -> Self {
        Polynomial::from_monomial(Monomial::var(vars, i), 1.0)
    }

    pub fn from_monomial(m: Monomial, c: f64) -> Self {
        let vars = m.vars();
        let mut p = Polynomial::zero(vars);
        if c.abs() >= CANON_EPS {
            p.terms.insert(m, c);
        }
        p
    }

    pub fn from_terms(vars: usize, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut p = Polynomial::zero(vars);
        for (m, c) in terms {
            assert_eq!(m.vars(), vars, "monomial arity mismatch");
            *p.terms.entry(m).or_insert(0.0) += c;
        }
        p.canonicalize();
        p
    }

    fn canonicalize(&mut self) {
        self.terms.retain(|_, c| c.abs() >= CANON_EPS);
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; zero for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Terms in ascending graded-lex order.
    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn constant_term(&self) -> f64 {
        self.coefficient(&Monomial::one(self.vars))
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |acc, c| acc.max(c.abs()))
    }

    fn check_same_vars(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.vars != other.vars {
            return Err(PolyError::VarMismatch { expected: self.vars, got: other.vars });
        }
        Ok(())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_same_vars(other)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        out.canonicalize();
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_same_vars(other)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) -= c;
        }
        out.canonicalize();
        Ok(out)
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_same_vars(other)?;
        let mut out = Polynomial::zero(self.vars);
        for (ma, &ca) in &self.terms {
            for (mb, &cb) in &other.terms {
                *out.terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        out.canonicalize();
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= s;
        }
        out.canonicalize();
        out
    }

    pub fn neg(&self) -> Polynomial {
        self.scale(-1.0)
    }

    /// Exact gradient; entry `i` is the partial derivative with respect to
    /// `x_i`.
    pub fn gradient(&self) -> PolyVector {
        let entries = (0..self.vars).map(|i| self.partial(i)).collect();
        PolyVector { entries }
    }

    pub fn partial(&self, i: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.vars);
        for (m, &c) in &self.terms {
            let e = m.exponents()[i];
            if e == 0 {
                continue;
            }
            let mut exps = m.exponents().to_vec();
            exps[i] = e - 1;
            *out.terms.entry(Monomial::new(exps)).or_insert(0.0) += c * e as f64;
        }
        out.canonicalize();
        out
    }

    /// Composition with one polynomial per original variable, all over a
    /// common new variable set. Affine maps preserve total degree; general
    /// polynomial maps are accepted too.
    pub fn substitute(&self, map: &[Polynomial]) -> Result<Polynomial, PolyError> {
        if map.len() != self.vars {
            return Err(PolyError::BadSubstitutionMap { expected: self.vars, got: map.len() });
        }
        let new_vars = match map.first() {
            Some(p) => p.vars(),
            None => return Ok(Polynomial::constant(0, self.constant_term())),
        };
        for p in map {
            if p.vars() != new_vars {
                return Err(PolyError::VarMismatch { expected: new_vars, got: p.vars() });
            }
        }
        // Cache powers of each image polynomial up to the needed exponent.
        let max_exp: Vec<u32> = (0..self.vars)
            .map(|i| self.terms.keys().map(|m| m.exponents()[i]).max().unwrap_or(0))
            .collect();
        let mut powers: Vec<Vec<Polynomial>> = Vec::with_capacity(self.vars);
        for (i, img) in map.iter().enumerate() {
            let mut pw = vec![Polynomial::constant(new_vars, 1.0)];
            for k in 1..=max_exp[i] as usize {
                let next = pw[k - 1].mul(img)?;
                pw.push(next);
            }
            powers.push(pw);
        }
        let mut out = Polynomial::zero(new_vars);
        for (m, &c) in &self.terms {
            let mut term = Polynomial::constant(new_vars, c);
            for (i, &e) in m.exponents().iter().enumerate() {
                if e > 0 {
                    term = term.mul(&powers[i][e as usize])?;
                }
            }
            out = out.add(&term)?;
        }
        Ok(out)
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.vars {
            return Err(PolyError::BadPoint { expected: self.vars, got: point.len() });
        }
        Ok(self.terms.iter().map(|(m, &c)| c * m.eval(point)).sum())
    }

    /// True when every stored term has odd total degree, i.e. p(-x) = -p(x)
    /// as an exact coefficient identity.
    pub fn is_odd_function(&self) -> bool {
        self.terms.keys().all(|m| m.degree() % 2 == 1)
    }

    /// True when every stored term has even total degree.
    pub fn is_even_function(&self) -> bool {
        self.terms.keys().all(|m| m.degree() % 2 == 0)
    }

    /// Largest absolute coefficient difference against `other`.
    pub fn coefficient_distance(&self, other: &Polynomial) -> Result<f64, PolyError> {
        Ok(self.sub(other)?.max_abs_coefficient())
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            if first {
                if m.is_one() {
                    write!(f, "{c}")?;
                } else {
                    write!(f, "{c}*{m}")?;
                }
                first = false;
            } else if *c < 0.0 {
                if m.is_one() {
                    write!(f, " - {}", -c)?;
                } else {
                    write!(f, " - {}*{m}", -c)?;
                }
            } else if m.is_one() {
                write!(f, " + {c}")?;
            } else {
                write!(f, " + {c}*{m}")?;
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TermRepr {
    exp: Vec<u32>,
    coef: f64,
}

#[derive(Serialize, Deserialize)]
struct PolyRepr {
    vars: usize,
    terms: Vec<TermRepr>,
}

impl Serialize for Polynomial {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let repr = PolyRepr {
            vars: self.vars,
            terms: self
                .terms
                .iter()
                .map(|(m, &c)| TermRepr { exp: m.exponents().to_vec(), coef: c })
                .collect(),
        };
        repr.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Polynomial {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let repr = PolyRepr::deserialize(de)?;
        for t in &repr.terms {
            if t.exp.len() != repr.vars {
                return Err(D::Error::custom(format!(
                    "term exponent tuple has {} entries, expected {}",
                    t.exp.len(),
                    repr.vars
                )));
            }
        }
        Ok(Polynomial::from_terms(
            repr.vars,
            repr.terms.into_iter().map(|t| (Monomial::new(t.exp), t.coef)),
        ))
    }
}

/// An ordered list of polynomials over a shared variable set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolyVector {
    entries: Vec<Polynomial>,
}

impl PolyVector {
    pub fn new(entries: Vec<Polynomial>) -> Result<Self, PolyError> {
        if let Some(first) = entries.first() {
            let vars = first.vars();
            for p in &entries {
                if p.vars() != vars {
                    return Err(PolyError::VarMismatch { expected: vars, got: p.vars() });
                }
            }
        }
        Ok(PolyVector { entries })
    }

    pub fn zero(vars: usize, len: usize) -> Self {
        PolyVector { entries: vec![Polynomial::zero(vars); len] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vars(&self) -> usize {
        self.entries.first().map(Polynomial::vars).unwrap_or(0)
    }

    pub fn entry(&self, i: usize) -> &Polynomial {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Polynomial> {
        self.entries.iter()
    }

    pub fn dot(&self, other: &PolyVector) -> Result<Polynomial, PolyError> {
        if self.len() != other.len() {
            return Err(PolyError::VarMismatch { expected: self.len(), got: other.len() });
        }
        let vars = self.vars();
        let mut acc = Polynomial::zero(vars);
        for (a, b) in self.entries.iter().zip(&other.entries) {
            acc = acc.add(&a.mul(b)?)?;
        }
        Ok(acc)
    }

    pub fn add(&self, other: &PolyVector) -> Result<PolyVector, PolyError> {
        if self.len() != other.len() {
            return Err(PolyError::VarMismatch { expected: self.len(), got: other.len() });
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_, _>>()?;
        Ok(PolyVector { entries })
    }

    pub fn sub(&self, other: &PolyVector) -> Result<PolyVector, PolyError> {
        if self.len() != other.len() {
            return Err(PolyError::VarMismatch { expected: self.len(), got: other.len() });
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<_, _>>()?;
        Ok(PolyVector { entries })
    }

    pub fn scale(&self, s: f64) -> PolyVector {
        PolyVector { entries: self.entries.iter().map(|p| p.scale(s)).collect() }
    }

    pub fn substitute(&self, map: &[Polynomial]) -> Result<PolyVector, PolyError> {
        let entries = self
            .entries
            .iter()
            .map(|p| p.substitute(map))
            .collect::<Result<_, _>>()?;
        Ok(PolyVector { entries })
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<Vec<f64>, PolyError> {
        self.entries.iter().map(|p| p.evaluate(point)).collect()
    }

    pub fn is_odd_function(&self) -> bool {
        self.entries.iter().all(Polynomial::is_odd_function)
    }
}

/// All monomials over `vars` variables with total degree at most `max_degree`
/// and the requested parity, in ascending graded-lex order.
pub fn monomials_up_to(vars: usize, max_degree: u32, parity: Parity) -> Vec<Monomial> {
    let mut out = Vec::new();
    let mut exps = vec![0u32; vars];
    enumerate_rec(vars, max_degree, 0, &mut exps, &mut out);
    out.retain(|m| match parity {
        Parity::Any => true,
        Parity::Even => m.degree() % 2 == 0,
        Parity::Odd => m.degree() % 2 == 1,
    });
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Any,
    Even,
    Odd,
}

fn enumerate_rec(vars: usize, budget: u32, i: usize, exps: &mut Vec<u32>, out: &mut Vec<Monomial>) {
    if i == vars {
        out.push(Monomial::new(exps.clone()));
        return;
    }
    for e in 0..=budget {
        exps[i] = e;
        enumerate_rec(vars, budget - e, i + 1, exps, out);
    }
    exps[i] = 0;
}
