//! Symbolic integer expressions and index ranges.
//!
//! Container shapes, memlet subsets and flow capacities are expressions over
//! named integer symbols with the operator set `{+, -, *, floor-div, mod,
//! min, max}`. Evaluation under a total binding is deterministic; division or
//! modulo by zero is an evaluation error, never undefined behavior.

mod parser;
mod range;

pub use parser::parse_expr;
pub use range::{Assumptions, Disjointness, RangeDim, SubsetRange};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound symbol `{0}`")]
    UnboundSymbol(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("negative extent: end < begin after binding")]
    NegativeExtent,
    #[error("invalid step: step < 1 after binding")]
    InvalidStep,
    #[error("rank mismatch: {0} vs {1}")]
    RankMismatch(usize, usize),
}

/// Binary operators of the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    /// Floor division: truncates toward negative infinity.
    FloorDiv,
    /// Floored modulo: result has the sign of the divisor.
    Mod,
    Min,
    Max,
}

/// Symbolic integer expression.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SymExpr {
    Const(i64),
    Sym(String),
    Bin(BinOp, Box<SymExpr>, Box<SymExpr>),
}

pub fn floor_div(a: i64, b: i64) -> Result<i64, EvalError> {
    if b == 0 {
        return Err(EvalError::DivisionByZero);
    }
    let q = a.wrapping_div(b);
    let r = a.wrapping_rem(b);
    if r != 0 && ((r < 0) != (b < 0)) {
        Ok(q - 1)
    } else {
        Ok(q)
    }
}

pub fn floor_mod(a: i64, b: i64) -> Result<i64, EvalError> {
    if b == 0 {
        return Err(EvalError::DivisionByZero);
    }
    let r = a.wrapping_rem(b);
    if r != 0 && ((r < 0) != (b < 0)) {
        Ok(r + b)
    } else {
        Ok(r)
    }
}

impl SymExpr {
    pub fn sym(name: impl Into<String>) -> Self {
        SymExpr::Sym(name.into())
    }

    pub fn bin(op: BinOp, lhs: SymExpr, rhs: SymExpr) -> Self {
        SymExpr::Bin(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn add(self, rhs: impl Into<SymExpr>) -> Self {
        SymExpr::bin(BinOp::Add, self, rhs.into())
    }

    pub fn sub(self, rhs: impl Into<SymExpr>) -> Self {
        SymExpr::bin(BinOp::Sub, self, rhs.into())
    }

    pub fn mul(self, rhs: impl Into<SymExpr>) -> Self {
        SymExpr::bin(BinOp::Mul, self, rhs.into())
    }

    pub fn min(self, rhs: impl Into<SymExpr>) -> Self {
        SymExpr::bin(BinOp::Min, self, rhs.into())
    }

    pub fn max(self, rhs: impl Into<SymExpr>) -> Self {
        SymExpr::bin(BinOp::Max, self, rhs.into())
    }

    /// Evaluate under a total symbol binding.
    pub fn eval(&self, binding: &BTreeMap<String, i64>) -> Result<i64, EvalError> {
        match self {
            SymExpr::Const(c) => Ok(*c),
            SymExpr::Sym(name) => binding
                .get(name)
                .copied()
                .ok_or_else(|| EvalError::UnboundSymbol(name.clone())),
            SymExpr::Bin(op, lhs, rhs) => {
                let a = lhs.eval(binding)?;
                let b = rhs.eval(binding)?;
                Ok(match op {
                    BinOp::Add => a.wrapping_add(b),
                    BinOp::Sub => a.wrapping_sub(b),
                    BinOp::Mul => a.wrapping_mul(b),
                    BinOp::FloorDiv => floor_div(a, b)?,
                    BinOp::Mod => floor_mod(a, b)?,
                    BinOp::Min => a.min(b),
                    BinOp::Max => a.max(b),
                })
            }
        }
    }

    /// Collect the free symbols of the expression.
    pub fn free_symbols(&self, out: &mut BTreeSet<String>) {
        match self {
            SymExpr::Const(_) => {}
            SymExpr::Sym(name) => {
                out.insert(name.clone());
            }
            SymExpr::Bin(_, lhs, rhs) => {
                lhs.free_symbols(out);
                rhs.free_symbols(out);
            }
        }
    }

    pub fn symbols(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.free_symbols(&mut out);
        out
    }

    /// True if any subexpression can raise an evaluation error (a division or
    /// modulo whose divisor is not a nonzero constant). Simplification must
    /// not drop such subexpressions.
    fn can_error(&self) -> bool {
        match self {
            SymExpr::Const(_) | SymExpr::Sym(_) => false,
            SymExpr::Bin(op, lhs, rhs) => {
                let divisor_risk = matches!(op, BinOp::FloorDiv | BinOp::Mod)
                    && !matches!(**rhs, SymExpr::Const(c) if c != 0);
                divisor_risk || lhs.can_error() || rhs.can_error()
            }
        }
    }

    /// Substitute a symbol by an expression.
    pub fn substitute(&self, name: &str, value: &SymExpr) -> SymExpr {
        match self {
            SymExpr::Const(_) => self.clone(),
            SymExpr::Sym(n) => {
                if n == name {
                    value.clone()
                } else {
                    self.clone()
                }
            }
            SymExpr::Bin(op, lhs, rhs) => SymExpr::bin(
                *op,
                lhs.substitute(name, value),
                rhs.substitute(name, value),
            ),
        }
    }

    /// Canonical simplification. Guarantees `eval(simplify(e), b) = eval(e, b)`
    /// for every binding `b`, including the error cases: subexpressions that
    /// may raise are never discarded.
    pub fn simplify(&self) -> SymExpr {
        match self {
            SymExpr::Const(_) | SymExpr::Sym(_) => self.clone(),
            SymExpr::Bin(op, _, _) => match op {
                BinOp::Add | BinOp::Sub => {
                    let mut terms = LinearTerms::default();
                    self.collect_linear(1, &mut terms);
                    terms.rebuild()
                }
                BinOp::Mul => {
                    let lhs = self.lhs().simplify();
                    let rhs = self.rhs().simplify();
                    match (&lhs, &rhs) {
                        (SymExpr::Const(a), SymExpr::Const(b)) => {
                            SymExpr::Const(a.wrapping_mul(*b))
                        }
                        (SymExpr::Const(1), _) => rhs,
                        (_, SymExpr::Const(1)) => lhs,
                        (SymExpr::Const(0), e) | (e, SymExpr::Const(0)) if !e.can_error() => {
                            SymExpr::Const(0)
                        }
                        // Order commutative operands canonically.
                        _ if rhs < lhs => SymExpr::bin(BinOp::Mul, rhs, lhs),
                        _ => SymExpr::bin(BinOp::Mul, lhs, rhs),
                    }
                }
                BinOp::FloorDiv | BinOp::Mod => {
                    let lhs = self.lhs().simplify();
                    let rhs = self.rhs().simplify();
                    if let (SymExpr::Const(a), SymExpr::Const(b)) = (&lhs, &rhs) {
                        if *b != 0 {
                            let v = if *op == BinOp::FloorDiv {
                                floor_div(*a, *b)
                            } else {
                                floor_mod(*a, *b)
                            };
                            if let Ok(v) = v {
                                return SymExpr::Const(v);
                            }
                        }
                    }
                    if *op == BinOp::FloorDiv {
                        if let SymExpr::Const(1) = rhs {
                            return lhs;
                        }
                    }
                    SymExpr::bin(*op, lhs, rhs)
                }
                BinOp::Min | BinOp::Max => {
                    let lhs = self.lhs().simplify();
                    let rhs = self.rhs().simplify();
                    if lhs == rhs {
                        return lhs;
                    }
                    match (&lhs, &rhs) {
                        (SymExpr::Const(a), SymExpr::Const(b)) => SymExpr::Const(if *op
                            == BinOp::Min
                        {
                            *(a.min(b))
                        } else {
                            *(a.max(b))
                        }),
                        _ if rhs < lhs => SymExpr::bin(*op, rhs, lhs),
                        _ => SymExpr::bin(*op, lhs, rhs),
                    }
                }
            },
        }
    }

    fn lhs(&self) -> &SymExpr {
        match self {
            SymExpr::Bin(_, lhs, _) => lhs,
            _ => unreachable!(),
        }
    }

    fn rhs(&self) -> &SymExpr {
        match self {
            SymExpr::Bin(_, _, rhs) => rhs,
            _ => unreachable!(),
        }
    }

    /// Collect `coeff * self` into a linear-combination normal form. Non-linear
    /// subtrees are simplified and treated as opaque atoms.
    fn collect_linear(&self, coeff: i64, out: &mut LinearTerms) {
        match self {
            SymExpr::Const(c) => out.constant = out.constant.wrapping_add(coeff.wrapping_mul(*c)),
            SymExpr::Sym(_) => out.add_term(self.clone(), coeff),
            SymExpr::Bin(BinOp::Add, lhs, rhs) => {
                lhs.collect_linear(coeff, out);
                rhs.collect_linear(coeff, out);
            }
            SymExpr::Bin(BinOp::Sub, lhs, rhs) => {
                lhs.collect_linear(coeff, out);
                rhs.collect_linear(coeff.wrapping_neg(), out);
            }
            SymExpr::Bin(BinOp::Mul, lhs, rhs) => match (&**lhs, &**rhs) {
                (SymExpr::Const(c), e) | (e, SymExpr::Const(c)) => {
                    e.collect_linear(coeff.wrapping_mul(*c), out)
                }
                _ => out.add_term(self.simplify(), coeff),
            },
            _ => out.add_term(self.simplify(), coeff),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            SymExpr::Const(c) if *c < 0 => 0,
            SymExpr::Const(_) | SymExpr::Sym(_) => 3,
            SymExpr::Bin(BinOp::Min | BinOp::Max, _, _) => 3,
            SymExpr::Bin(BinOp::Mul | BinOp::FloorDiv | BinOp::Mod, _, _) => 2,
            SymExpr::Bin(BinOp::Add | BinOp::Sub, _, _) => 1,
        }
    }
}

/// Sum of `constant + Σ coeff_i * atom_i` with atoms kept in canonical order.
#[derive(Default)]
struct LinearTerms {
    constant: i64,
    terms: BTreeMap<SymExpr, i64>,
}

impl LinearTerms {
    fn add_term(&mut self, atom: SymExpr, coeff: i64) {
        let entry = self.terms.entry(atom).or_insert(0);
        *entry = entry.wrapping_add(coeff);
    }

    fn rebuild(mut self) -> SymExpr {
        // Error-capable atoms must survive even with coefficient zero.
        let mut zeroed: Vec<SymExpr> = Vec::new();
        self.terms.retain(|atom, coeff| {
            if *coeff == 0 {
                if atom.can_error() {
                    zeroed.push(atom.clone());
                }
                false
            } else {
                true
            }
        });
        fn push(acc: &mut Option<SymExpr>, term: SymExpr, negative: bool) {
            *acc = Some(match acc.take() {
                None if !negative => term,
                None => SymExpr::bin(BinOp::Sub, SymExpr::Const(0), term),
                Some(prev) => {
                    let op = if negative { BinOp::Sub } else { BinOp::Add };
                    SymExpr::bin(op, prev, term)
                }
            });
        }
        let mut acc: Option<SymExpr> = None;
        for (atom, coeff) in &self.terms {
            let magnitude = coeff.unsigned_abs();
            let term = if magnitude == 1 {
                atom.clone()
            } else {
                SymExpr::bin(
                    BinOp::Mul,
                    SymExpr::Const(magnitude as i64),
                    atom.clone(),
                )
            };
            push(&mut acc, term, *coeff < 0);
        }
        // `0 * atom` for atoms that may raise: multiply keeps the error.
        for atom in zeroed {
            push(&mut acc, SymExpr::bin(BinOp::Mul, SymExpr::Const(0), atom), false);
        }
        if self.constant != 0 || acc.is_none() {
            match &mut acc {
                None => acc = Some(SymExpr::Const(self.constant)),
                Some(_) => push(
                    &mut acc,
                    SymExpr::Const(self.constant.abs()),
                    self.constant < 0,
                ),
            }
        }
        acc.unwrap()
    }
}

impl From<i64> for SymExpr {
    fn from(v: i64) -> Self {
        SymExpr::Const(v)
    }
}

impl From<&str> for SymExpr {
    fn from(name: &str) -> Self {
        SymExpr::Sym(name.to_string())
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let paren = |f: &mut fmt::Formatter<'_>, e: &SymExpr, min_prec: u8| {
            if e.precedence() < min_prec {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            SymExpr::Const(c) => write!(f, "{c}"),
            SymExpr::Sym(name) => write!(f, "{name}"),
            SymExpr::Bin(BinOp::Min, lhs, rhs) => write!(f, "min({lhs}, {rhs})"),
            SymExpr::Bin(BinOp::Max, lhs, rhs) => write!(f, "max({lhs}, {rhs})"),
            SymExpr::Bin(op, lhs, rhs) => {
                let (sym, prec) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::FloorDiv => ("/", 2),
                    BinOp::Mod => ("%", 2),
                    _ => unreachable!(),
                };
                paren(f, lhs, prec)?;
                write!(f, " {sym} ")?;
                // Subtraction and division are left-associative: the right
                // operand needs parens at equal precedence.
                paren(f, rhs, prec + 1)
            }
        }
    }
}

impl FromStr for SymExpr {
    type Err = parser::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expr(s)
    }
}

impl Serialize for SymExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SymExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, i64)]) -> BTreeMap<String, i64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn eval_products_and_min() {
        // N*N with N=32
        let e = SymExpr::sym("N").mul(SymExpr::sym("N"));
        assert_eq!(e.eval(&bind(&[("N", 32)])), Ok(1024));
        // N with N=1024
        assert_eq!(SymExpr::sym("N").eval(&bind(&[("N", 1024)])), Ok(1024));
        // min(i+32, N) with i=96, N=100: direct arithmetic oracle
        let e = SymExpr::sym("i").add(32).min(SymExpr::sym("N"));
        let b = bind(&[("i", 96), ("N", 100)]);
        assert_eq!(e.eval(&b), Ok((96i64 + 32).min(100)));
        assert_eq!(e.eval(&b), Ok(100));
    }

    #[test]
    fn eval_errors() {
        let e = SymExpr::sym("N").add(1);
        assert_eq!(
            e.eval(&BTreeMap::new()),
            Err(EvalError::UnboundSymbol("N".into()))
        );
        let e = SymExpr::Const(4).sub(0).bin_div(SymExpr::Const(0));
        assert_eq!(e.eval(&BTreeMap::new()), Err(EvalError::DivisionByZero));
    }

    #[test]
    fn floor_semantics() {
        assert_eq!(floor_div(7, 2), Ok(3));
        assert_eq!(floor_div(-7, 2), Ok(-4));
        assert_eq!(floor_div(7, -2), Ok(-4));
        assert_eq!(floor_mod(-7, 2), Ok(1));
        assert_eq!(floor_mod(7, -2), Ok(-1));
    }

    #[test]
    fn simplify_cancels_affine_terms() {
        // (i + 1) - (i + 1) => 0
        let i = SymExpr::sym("i");
        let e = i.clone().add(1).sub(i.add(1));
        assert_eq!(e.simplify(), SymExpr::Const(0));
        // 2*x + 3*x => 5*x
        let x = SymExpr::sym("x");
        let e = SymExpr::Const(2)
            .mul(x.clone())
            .add(SymExpr::Const(3).mul(x.clone()));
        assert_eq!(e.simplify(), SymExpr::Const(5).mul(x));
    }

    #[test]
    fn simplify_keeps_error_terms() {
        // 0 * (x / 0) must not fold to 0.
        let div = SymExpr::sym("x").bin_div(SymExpr::Const(0));
        let e = SymExpr::Const(0).mul(div.clone());
        assert_eq!(
            e.simplify().eval(&bind(&[("x", 3)])),
            Err(EvalError::DivisionByZero)
        );
        // (x/0) - (x/0) keeps the error too.
        let e = div.clone().sub(div);
        assert_eq!(
            e.simplify().eval(&bind(&[("x", 3)])),
            Err(EvalError::DivisionByZero)
        );
    }

    #[test]
    fn display_parses_back() {
        let exprs = [
            SymExpr::sym("N").mul(SymExpr::sym("N")),
            SymExpr::sym("i").add(32).min(SymExpr::sym("N")),
            SymExpr::Const(3).sub(SymExpr::sym("a").sub(SymExpr::sym("b"))),
            SymExpr::sym("a").bin_div(SymExpr::Const(2)).bin_mod(7),
        ];
        for e in exprs {
            let text = e.to_string();
            let back: SymExpr = text.parse().unwrap();
            assert_eq!(back, e, "round trip of `{text}`");
        }
    }

    impl SymExpr {
        fn bin_div(self, rhs: impl Into<SymExpr>) -> SymExpr {
            SymExpr::bin(BinOp::FloorDiv, self, rhs.into())
        }
        fn bin_mod(self, rhs: impl Into<SymExpr>) -> SymExpr {
            SymExpr::bin(BinOp::Mod, self, rhs.into())
        }
    }
}
