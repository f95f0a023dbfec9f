//! Polynomial expressions over derivative jets.
//!
//! A [`DiffExpr`] is a sum of monomials in the jet variables `u`, `u_x`,
//! `u_xx`, ... (and `v`, `w`, ... for systems). Expressions are kept in a
//! canonical form: monomials sorted by their power map, like power maps
//! merged, zero coefficients dropped. With [`Rational`] coefficients every
//! operation here is exact.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Coefficient, Rational, Real};

/// Names used for the dependent fields of a system, in field-index order.
pub const FIELD_NAMES: [&str; 6] = ["u", "v", "w", "p", "q", "r"];

/// Default cap on derivative orders handled by the parser and by jet
/// layouts built from expressions.
pub const DEFAULT_MAX_ORDER: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolicError {
    #[error("jet has {got} entries but expression needs index {needed}")]
    JetTooShort { needed: usize, got: usize },
    #[error("expression uses field {field} but the jet layout has {fields} field(s)")]
    FieldOutOfRange { field: usize, fields: usize },
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },
}

/// A jet variable: the `order`-th spatial derivative of field `field`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Var {
    pub field: u8,
    pub order: u8,
}

impl Var {
    pub const fn new(field: u8, order: u8) -> Self {
        Self { field, order }
    }

    /// `u_{nx}` of the single-field case.
    pub const fn u(order: u8) -> Self {
        Self { field: 0, order }
    }

    pub fn differentiated(self) -> Self {
        Self { field: self.field, order: self.order + 1 }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = FIELD_NAMES.get(self.field as usize).copied().unwrap_or("?");
        match self.order {
            0 => write!(f, "{name}"),
            1..=3 => write!(f, "{name}_{}", "x".repeat(self.order as usize)),
            n => write!(f, "{name}_{n}x"),
        }
    }
}

/// Power map of a monomial: variables with strictly positive exponents,
/// sorted by variable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Powers(Vec<(Var, u32)>);

impl Powers {
    pub fn one() -> Self {
        Self(Vec::new())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Var, u32)>) -> Self {
        let mut v: Vec<(Var, u32)> = Vec::new();
        for (var, e) in pairs {
            if e == 0 {
                continue;
            }
            match v.iter_mut().find(|(w, _)| *w == var) {
                Some(slot) => slot.1 += e,
                None => v.push((var, e)),
            }
        }
        v.sort_by_key(|(var, _)| *var);
        Self(v)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Var, u32)> {
        self.0.iter()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn exponent(&self, var: Var) -> u32 {
        self.0.iter().find(|(v, _)| *v == var).map_or(0, |(_, e)| *e)
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|(_, e)| e).sum()
    }

    /// Number of spatial derivatives carried by the monomial: `Σ order·exponent`.
    /// Under `x = a x'` the monomial picks up a factor `a` to this power.
    pub fn derivative_count(&self) -> u32 {
        self.0.iter().map(|(v, e)| v.order as u32 * e).sum()
    }

    pub fn max_order(&self) -> usize {
        self.0.iter().map(|(v, _)| v.order as usize).max().unwrap_or(0)
    }

    pub fn max_field(&self) -> Option<usize> {
        self.0.iter().map(|(v, _)| v.field as usize).max()
    }

    fn with_delta(&self, var: Var, delta: i32) -> Self {
        let mut pairs: Vec<(Var, u32)> = self.0.clone();
        match pairs.iter_mut().find(|(v, _)| *v == var) {
            Some(slot) => slot.1 = (slot.1 as i32 + delta) as u32,
            None => {
                debug_assert!(delta > 0);
                pairs.push((var, delta as u32));
            }
        }
        Powers::from_pairs(pairs)
    }

    fn product(&self, other: &Powers) -> Self {
        Powers::from_pairs(self.0.iter().chain(other.0.iter()).copied())
    }
}

impl PartialOrd for Powers {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Powers {
    // graded: total degree first, then variables, so printed sums read from
    // low to high degree
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree().cmp(&other.degree()).then_with(|| self.0.cmp(&other.0))
    }
}

impl fmt::Display for Powers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        for (i, (v, e)) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "*")?;
            }
            if *e == 1 {
                write!(f, "{v}")?;
            } else {
                write!(f, "{v}^{e}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Monomial<C> {
    pub coeff: C,
    pub powers: Powers,
}

impl<C: Coefficient> Monomial<C> {
    pub fn new(coeff: C, powers: Powers) -> Self {
        Self { coeff, powers }
    }
}

/// Canonical polynomial in jet variables.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffExpr<C> {
    terms: Vec<Monomial<C>>,
}

impl<C: Coefficient> Default for DiffExpr<C> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<C: Coefficient> DiffExpr<C> {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn constant(c: C) -> Self {
        Self::from_terms([Monomial::new(c, Powers::one())])
    }

    pub fn var(v: Var) -> Self {
        Self::from_terms([Monomial::new(C::one(), Powers::from_pairs([(v, 1)]))])
    }

    pub fn monomial(coeff: C, powers: Powers) -> Self {
        Self::from_terms([Monomial::new(coeff, powers)])
    }

    /// Builds a canonical expression from arbitrary (possibly repeated or
    /// zero) monomials.
    pub fn from_terms(terms: impl IntoIterator<Item = Monomial<C>>) -> Self {
        let mut raw: Vec<Monomial<C>> = terms.into_iter().collect();
        raw.sort_by(|a, b| a.powers.cmp(&b.powers));
        let mut out: Vec<Monomial<C>> = Vec::with_capacity(raw.len());
        for m in raw {
            match out.last_mut() {
                Some(last) if last.powers == m.powers => {
                    last.coeff = last.coeff.clone() + m.coeff;
                }
                _ => out.push(m),
            }
        }
        out.retain(|m| !m.coeff.is_zero());
        Self { terms: out }
    }

    /// Re-establishes canonical form. Idempotent.
    pub fn canonicalize(&self) -> Self {
        Self::from_terms(self.terms.iter().cloned())
    }

    pub fn terms(&self) -> &[Monomial<C>] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest derivative order appearing in any term; 0 for constants.
    pub fn max_order(&self) -> usize {
        self.terms.iter().map(|m| m.powers.max_order()).max().unwrap_or(0)
    }

    /// Number of fields referenced (`max field index + 1`), at least 1.
    pub fn num_fields(&self) -> usize {
        self.terms.iter().filter_map(|m| m.powers.max_field()).max().map_or(1, |f| f + 1)
    }

    pub fn coefficient_of(&self, powers: &Powers) -> C {
        self.terms
            .iter()
            .find(|m| &m.powers == powers)
            .map_or_else(C::zero, |m| m.coeff.clone())
    }

    pub fn scale(&self, c: &C) -> Self {
        Self::from_terms(self.terms.iter().map(|m| Monomial::new(m.coeff.clone() * c.clone(), m.powers.clone())))
    }

    pub fn pow(&self, e: u32) -> Self {
        let mut acc = Self::constant(C::one());
        for _ in 0..e {
            acc = &acc * self;
        }
        acc
    }

    /// `∂expr/∂var`, treating every jet variable as independent.
    pub fn partial(&self, var: Var) -> Self {
        Self::from_terms(self.terms.iter().filter_map(|m| {
            let e = m.powers.exponent(var);
            (e > 0).then(|| {
                let c = m.coeff.clone() * C::from_u32(e).expect("exponent fits coefficient type");
                Monomial::new(c, m.powers.with_delta(var, -1))
            })
        }))
    }

    /// Total derivative `d/dx`: every factor `u_{nx}` contributes
    /// `∂/∂u_{nx} · u_{(n+1)x}`.
    pub fn total_x_derivative(&self) -> Self {
        let mut out = Vec::new();
        for m in &self.terms {
            for &(var, e) in m.powers.iter() {
                let c = m.coeff.clone() * C::from_u32(e).expect("exponent fits coefficient type");
                let p = m.powers.with_delta(var, -1).with_delta(var.differentiated(), 1);
                out.push(Monomial::new(c, p));
            }
        }
        Self::from_terms(out)
    }

    pub fn nth_total_derivative(&self, n: usize) -> Self {
        let mut e = self.clone();
        for _ in 0..n {
            e = e.total_x_derivative();
        }
        e
    }

    /// Applies `f` to every coefficient (e.g. rational to float).
    pub fn map_coeffs<D: Coefficient>(&self, f: impl Fn(&C) -> D) -> DiffExpr<D> {
        DiffExpr::from_terms(self.terms.iter().map(|m| Monomial::new(f(&m.coeff), m.powers.clone())))
    }

    /// Evaluates a single-field expression at `jet = (u, u_x, u_xx, ...)`.
    pub fn evaluate<T: Real>(&self, jet: &[T]) -> Result<T, SymbolicError> {
        self.evaluate_in(JetLayout::new(1, jet.len()), jet)
    }

    /// Evaluates against a multi-field jet laid out per `layout`.
    pub fn evaluate_in<T: Real>(&self, layout: JetLayout, jet: &[T]) -> Result<T, SymbolicError> {
        let compiled = self.compile::<T>(layout)?;
        if jet.len() < layout.len() {
            return Err(SymbolicError::JetTooShort { needed: layout.len() - 1, got: jet.len() });
        }
        Ok(compiled.eval(jet))
    }

    /// Lowers the expression to index/exponent lists for repeated evaluation.
    pub fn compile<T: Real>(&self, layout: JetLayout) -> Result<CompiledExpr<T>, SymbolicError> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for m in &self.terms {
            let mut factors = Vec::with_capacity(m.powers.0.len());
            for &(var, e) in m.powers.iter() {
                factors.push((layout.index(var)?, e as i32));
            }
            let c = m.coeff.to_f64().expect("coefficient converts to f64");
            terms.push((T::lit(c), factors));
        }
        Ok(CompiledExpr { terms })
    }
}

impl DiffExpr<Rational> {
    pub fn int(n: i64) -> Self {
        Self::constant(Rational::from_integer(n))
    }

    pub fn to_f64(&self) -> DiffExpr<f64> {
        self.map_coeffs(|c| *c.numer() as f64 / *c.denom() as f64)
    }
}

impl<C: Coefficient> fmt::Display for DiffExpr<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, m) in self.terms.iter().enumerate() {
            let negative = m.coeff < C::zero();
            let mag = if negative { -m.coeff.clone() } else { m.coeff.clone() };
            match (i, negative) {
                (0, true) => write!(f, "-")?,
                (0, false) => {}
                (_, true) => write!(f, " - ")?,
                (_, false) => write!(f, " + ")?,
            }
            if m.powers.is_one() {
                write!(f, "{mag}")?;
            } else if mag.is_one() {
                write!(f, "{}", m.powers)?;
            } else {
                write!(f, "{mag}*{}", m.powers)?;
            }
        }
        Ok(())
    }
}

impl<C: Coefficient> Add for &DiffExpr<C> {
    type Output = DiffExpr<C>;
    fn add(self, rhs: Self) -> DiffExpr<C> {
        DiffExpr::from_terms(self.terms.iter().chain(rhs.terms.iter()).cloned())
    }
}

impl<C: Coefficient> Sub for &DiffExpr<C> {
    type Output = DiffExpr<C>;
    fn sub(self, rhs: Self) -> DiffExpr<C> {
        self + &(-rhs)
    }
}

impl<C: Coefficient> Neg for &DiffExpr<C> {
    type Output = DiffExpr<C>;
    fn neg(self) -> DiffExpr<C> {
        DiffExpr::from_terms(self.terms.iter().map(|m| Monomial::new(-m.coeff.clone(), m.powers.clone())))
    }
}

impl<C: Coefficient> Mul for &DiffExpr<C> {
    type Output = DiffExpr<C>;
    fn mul(self, rhs: Self) -> DiffExpr<C> {
        let mut out = Vec::with_capacity(self.terms.len() * rhs.terms.len());
        for a in &self.terms {
            for b in &rhs.terms {
                out.push(Monomial::new(a.coeff.clone() * b.coeff.clone(), a.powers.product(&b.powers)));
            }
        }
        DiffExpr::from_terms(out)
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl<C: Coefficient> $tr for DiffExpr<C> {
            type Output = DiffExpr<C>;
            fn $m(self, rhs: Self) -> DiffExpr<C> {
                (&self).$m(&rhs)
            }
        }
    };
}
forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl<C: Coefficient> Neg for DiffExpr<C> {
    type Output = DiffExpr<C>;
    fn neg(self) -> DiffExpr<C> {
        -&self
    }
}

/// Position of jet variables in a flat slice: `field * width + order`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JetLayout {
    pub fields: usize,
    pub width: usize,
}

impl JetLayout {
    pub fn new(fields: usize, width: usize) -> Self {
        Self { fields, width }
    }

    /// Layout holding derivatives `0..=max_order` of each field.
    pub fn with_max_order(fields: usize, max_order: usize) -> Self {
        Self { fields, width: max_order + 1 }
    }

    pub fn len(&self) -> usize {
        self.fields * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_order(&self) -> usize {
        self.width.saturating_sub(1)
    }

    pub fn index(&self, var: Var) -> Result<usize, SymbolicError> {
        let field = var.field as usize;
        if field >= self.fields {
            return Err(SymbolicError::FieldOutOfRange { field, fields: self.fields });
        }
        let order = var.order as usize;
        if order >= self.width {
            return Err(SymbolicError::JetTooShort { needed: field * self.width + order, got: self.len() });
        }
        Ok(field * self.width + order)
    }
}

/// Expression lowered to `(coefficient, [(jet index, exponent)])` lists.
#[derive(Clone, Debug)]
pub struct CompiledExpr<T> {
    terms: Vec<(T, Vec<(usize, i32)>)>,
}

impl<T: Real> CompiledExpr<T> {
    pub fn eval(&self, jet: &[T]) -> T {
        let mut acc = T::zero();
        for (c, factors) in &self.terms {
            let mut prod = *c;
            for &(idx, e) in factors {
                prod = prod * jet[idx].powi(e);
            }
            acc = acc + prod;
        }
        acc
    }
}

// ---------------------------------------------------------------- parsing

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(Rational),
    Var(Var),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn parse_err(position: usize, message: impl Into<String>) -> SymbolicError {
    SymbolicError::Parse { position, message: message.into() }
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, SymbolicError> {
    let bytes = src.as_bytes();
    let mut i = 0;
    let mut out = Vec::new();
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '+' => {
                out.push((start, Tok::Plus));
                i += 1;
            }
            '-' => {
                out.push((start, Tok::Minus));
                i += 1;
            }
            '*' => {
                out.push((start, Tok::Star));
                i += 1;
            }
            '/' => {
                out.push((start, Tok::Slash));
                i += 1;
            }
            '^' => {
                out.push((start, Tok::Caret));
                i += 1;
            }
            '(' => {
                out.push((start, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((start, Tok::RParen));
                i += 1;
            }
            '0'..='9' | '.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                out.push((start, Tok::Num(parse_decimal(&src[start..i], start)?)));
            }
            c if c.is_ascii_alphabetic() => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Var(parse_var(&src[start..i], start)?)));
            }
            other => return Err(parse_err(start, format!("unexpected character '{other}'"))),
        }
    }
    Ok(out)
}

fn parse_decimal(s: &str, pos: usize) -> Result<Rational, SymbolicError> {
    let mut parts = s.split('.');
    let int_part = parts.next().unwrap_or("");
    let frac_part = parts.next();
    if parts.next().is_some() {
        return Err(parse_err(pos, format!("malformed number '{s}'")));
    }
    let int_val: i64 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().map_err(|_| parse_err(pos, format!("malformed number '{s}'")))?
    };
    match frac_part {
        None => Ok(Rational::from_integer(int_val)),
        Some(frac) if frac.is_empty() && int_part.is_empty() => Err(parse_err(pos, "lone '.'")),
        Some(frac) => {
            if frac.len() > 15 {
                return Err(parse_err(pos, "too many decimal digits"));
            }
            let den = 10_i64.pow(frac.len() as u32);
            let num: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| parse_err(pos, "malformed fraction"))? };
            Ok(Rational::from_integer(int_val) + Rational::new(num, den))
        }
    }
}

/// Parses `u`, `u_x`, `u_xxx`, `u_4x`, `v_xx`, ...
fn parse_var(s: &str, pos: usize) -> Result<Var, SymbolicError> {
    let (name, suffix) = match s.split_once('_') {
        Some((n, rest)) => (n, Some(rest)),
        None => (s, None),
    };
    let field = FIELD_NAMES
        .iter()
        .position(|f| *f == name)
        .ok_or_else(|| parse_err(pos, format!("unknown variable '{s}'")))?;
    let order = match suffix {
        None => 0,
        Some(x) if !x.is_empty() && x.bytes().all(|b| b == b'x') => x.len(),
        Some(x) if x.len() >= 2 && x.ends_with('x') && x[..x.len() - 1].bytes().all(|b| b.is_ascii_digit()) => {
            x[..x.len() - 1].parse::<usize>().map_err(|_| parse_err(pos, format!("bad derivative suffix in '{s}'")))?
        }
        Some(_) => return Err(parse_err(pos, format!("bad derivative suffix in '{s}'"))),
    };
    if order > DEFAULT_MAX_ORDER {
        return Err(parse_err(pos, format!("derivative order {order} exceeds supported maximum {DEFAULT_MAX_ORDER}")));
    }
    Ok(Var::new(field as u8, order as u8))
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

type Expr = DiffExpr<Rational>;

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr, SymbolicError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    acc = &acc + &self.term()?;
                }
                Some(Tok::Minus) => {
                    self.bump();
                    acc = &acc - &self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, SymbolicError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    acc = &acc * &self.unary()?;
                }
                Some(Tok::Slash) => {
                    let at = self.here();
                    self.bump();
                    let rhs = self.unary()?;
                    let divisor = match rhs.terms() {
                        [m] if m.powers.is_one() => m.coeff,
                        _ => return Err(parse_err(at, "can only divide by a nonzero constant")),
                    };
                    if divisor.is_zero() {
                        return Err(parse_err(at, "division by zero"));
                    }
                    acc = acc.scale(&divisor.recip());
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, SymbolicError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.bump();
                Ok(-self.unary()?)
            }
            Some(Tok::Plus) => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, SymbolicError> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            let at = self.here();
            match self.bump() {
                Some(Tok::Num(n)) if n.is_integer() && *n.numer() >= 0 && *n.numer() <= 64 => {
                    Ok(base.pow(*n.numer() as u32))
                }
                _ => Err(parse_err(at, "exponent must be a non-negative integer literal")),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, SymbolicError> {
        let at = self.here();
        match self.bump() {
            Some(Tok::Num(n)) => Ok(Expr::constant(n)),
            Some(Tok::Var(v)) => Ok(Expr::var(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                let close = self.here();
                match self.bump() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(parse_err(close, "expected ')'")),
                }
            }
            Some(t) => Err(parse_err(at, format!("unexpected token {t:?}"))),
            None => Err(parse_err(at, "unexpected end of input")),
        }
    }
}

/// Parses the text form, e.g. `u_x^2*u - 1/2*u_xx^2` or `(u_x + u_xxx)^3`.
pub fn parse(src: &str) -> Result<DiffExpr<Rational>, SymbolicError> {
    let toks = tokenize(src)?;
    if toks.is_empty() {
        return Err(parse_err(0, "empty expression"));
    }
    let mut p = Parser { toks, pos: 0, end: src.len() };
    let e = p.expr()?;
    if p.pos < p.toks.len() {
        return Err(parse_err(p.here(), "trailing input"));
    }
    Ok(e)
}

impl FromStr for DiffExpr<Rational> {
    type Err = SymbolicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}
