//! Scalar expression language for tasklet code and interstate guards.
//!
//! Tasklet code is one single-assignment expression per outlet over inlets,
//! constants, iteration variables and symbols. Guards are boolean expressions
//! over symbols and rank-0 integer/boolean containers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SBinOp {
    Add,
    Sub,
    Mul,
    /// Floor division on integers, IEEE division on floats.
    Div,
    /// Floored modulo on integers, `%` remainder on floats.
    Mod,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn text(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

/// Scalar expression evaluated per tasklet execution.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarExpr {
    IntConst(i64),
    FloatConst(f64),
    BoolConst(bool),
    /// Inlet, iteration variable or symbol; resolved at execution time.
    Name(String),
    Neg(Box<ScalarExpr>),
    Bin(SBinOp, Box<ScalarExpr>, Box<ScalarExpr>),
    Cmp(CmpOp, Box<ScalarExpr>, Box<ScalarExpr>),
    /// `select(cond, a, b)`: lazily evaluates only the taken branch.
    Select(Box<ScalarExpr>, Box<ScalarExpr>, Box<ScalarExpr>),
}

impl ScalarExpr {
    pub fn free_names(&self, out: &mut BTreeSet<String>) {
        match self {
            ScalarExpr::IntConst(_) | ScalarExpr::FloatConst(_) | ScalarExpr::BoolConst(_) => {}
            ScalarExpr::Name(n) => {
                out.insert(n.clone());
            }
            ScalarExpr::Neg(e) => e.free_names(out),
            ScalarExpr::Bin(_, a, b) | ScalarExpr::Cmp(_, a, b) => {
                a.free_names(out);
                b.free_names(out);
            }
            ScalarExpr::Select(c, a, b) => {
                c.free_names(out);
                a.free_names(out);
                b.free_names(out);
            }
        }
    }

    /// Number of `select` nodes, in evaluation-independent pre-order. Used to
    /// give each select a stable ordinal for branch coverage.
    pub fn count_selects(&self) -> u32 {
        match self {
            ScalarExpr::IntConst(_)
            | ScalarExpr::FloatConst(_)
            | ScalarExpr::BoolConst(_)
            | ScalarExpr::Name(_) => 0,
            ScalarExpr::Neg(e) => e.count_selects(),
            ScalarExpr::Bin(_, a, b) | ScalarExpr::Cmp(_, a, b) => {
                a.count_selects() + b.count_selects()
            }
            ScalarExpr::Select(c, a, b) => {
                1 + c.count_selects() + a.count_selects() + b.count_selects()
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            ScalarExpr::IntConst(c) if *c < 0 => 0,
            ScalarExpr::FloatConst(c) if *c < 0.0 => 0,
            ScalarExpr::Neg(_) => 0,
            ScalarExpr::Cmp(..) => 1,
            ScalarExpr::Bin(SBinOp::Add | SBinOp::Sub, ..) => 2,
            ScalarExpr::Bin(SBinOp::Mul | SBinOp::Div | SBinOp::Mod, ..) => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for ScalarExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let paren = |f: &mut fmt::Formatter<'_>, e: &ScalarExpr, min_prec: u8| {
            if e.precedence() < min_prec {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            ScalarExpr::IntConst(c) => write!(f, "{c}"),
            // Debug formatting keeps the decimal point and round-trips the
            // exact bit pattern.
            ScalarExpr::FloatConst(c) => write!(f, "{c:?}"),
            ScalarExpr::BoolConst(b) => write!(f, "{b}"),
            ScalarExpr::Name(n) => write!(f, "{n}"),
            ScalarExpr::Neg(e) => {
                write!(f, "-")?;
                paren(f, e, 4)
            }
            ScalarExpr::Bin(SBinOp::Min, a, b) => write!(f, "min({a}, {b})"),
            ScalarExpr::Bin(SBinOp::Max, a, b) => write!(f, "max({a}, {b})"),
            ScalarExpr::Bin(op, a, b) => {
                let (sym, prec) = match op {
                    SBinOp::Add => ("+", 2),
                    SBinOp::Sub => ("-", 2),
                    SBinOp::Mul => ("*", 3),
                    SBinOp::Div => ("/", 3),
                    SBinOp::Mod => ("%", 3),
                    _ => unreachable!(),
                };
                paren(f, a, prec)?;
                write!(f, " {sym} ")?;
                paren(f, b, prec + 1)
            }
            ScalarExpr::Cmp(op, a, b) => {
                paren(f, a, 2)?;
                write!(f, " {} ", op.text())?;
                paren(f, b, 2)
            }
            ScalarExpr::Select(c, a, b) => write!(f, "select({c}, {a}, {b})"),
        }
    }
}

impl FromStr for ScalarExpr {
    type Err = CodeParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_scalar_expr(s)
    }
}

impl Serialize for ScalarExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ScalarExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Tasklet code: an expression per outlet. Every referenced name must be an
/// inlet, an enclosing iteration variable or a symbol.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskletCode {
    pub assignments: BTreeMap<String, ScalarExpr>,
}

impl TaskletCode {
    pub fn single(outlet: impl Into<String>, expr: ScalarExpr) -> Self {
        let mut assignments = BTreeMap::new();
        assignments.insert(outlet.into(), expr);
        TaskletCode { assignments }
    }

    pub fn parse(pairs: &[(&str, &str)]) -> Result<Self, CodeParseError> {
        let mut assignments = BTreeMap::new();
        for (outlet, text) in pairs {
            assignments.insert(outlet.to_string(), parse_scalar_expr(text)?);
        }
        Ok(TaskletCode { assignments })
    }
}

/// Boolean expression for interstate guards.
#[derive(Debug, Clone, PartialEq)]
pub enum BoolExpr {
    True,
    Cmp(CmpOp, crate::symexpr::SymExpr, crate::symexpr::SymExpr),
    And(Box<BoolExpr>, Box<BoolExpr>),
    Or(Box<BoolExpr>, Box<BoolExpr>),
    Not(Box<BoolExpr>),
}

impl BoolExpr {
    pub fn cmp(
        op: CmpOp,
        lhs: impl Into<crate::symexpr::SymExpr>,
        rhs: impl Into<crate::symexpr::SymExpr>,
    ) -> Self {
        BoolExpr::Cmp(op, lhs.into(), rhs.into())
    }

    pub fn free_names(&self, out: &mut BTreeSet<String>) {
        match self {
            BoolExpr::True => {}
            BoolExpr::Cmp(_, a, b) => {
                a.free_symbols(out);
                b.free_symbols(out);
            }
            BoolExpr::And(a, b) | BoolExpr::Or(a, b) => {
                a.free_names(out);
                b.free_names(out);
            }
            BoolExpr::Not(e) => e.free_names(out),
        }
    }

    pub fn eval(
        &self,
        binding: &BTreeMap<String, i64>,
    ) -> Result<bool, crate::symexpr::EvalError> {
        Ok(match self {
            BoolExpr::True => true,
            BoolExpr::Cmp(op, a, b) => {
                let x = a.eval(binding)?;
                let y = b.eval(binding)?;
                match op {
                    CmpOp::Lt => x < y,
                    CmpOp::Le => x <= y,
                    CmpOp::Gt => x > y,
                    CmpOp::Ge => x >= y,
                    CmpOp::Eq => x == y,
                    CmpOp::Ne => x != y,
                }
            }
            BoolExpr::And(a, b) => a.eval(binding)? && b.eval(binding)?,
            BoolExpr::Or(a, b) => a.eval(binding)? || b.eval(binding)?,
            BoolExpr::Not(e) => !e.eval(binding)?,
        })
    }
}

impl fmt::Display for BoolExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoolExpr::True => write!(f, "true"),
            BoolExpr::Cmp(op, a, b) => write!(f, "{a} {} {b}", op.text()),
            BoolExpr::And(a, b) => write!(f, "({a}) && ({b})"),
            BoolExpr::Or(a, b) => write!(f, "({a}) || ({b})"),
            BoolExpr::Not(e) => write!(f, "!({e})"),
        }
    }
}

impl FromStr for BoolExpr {
    type Err = CodeParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_bool_expr(s)
    }
}

impl Serialize for BoolExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BoolExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("code parse error at byte {pos}: {message}")]
pub struct CodeParseError {
    pub pos: usize,
    pub message: String,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, message: impl Into<String>) -> CodeParseError {
        CodeParseError {
            pos: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat_str(&mut self, s: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(s.as_bytes()) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, byte: u8) -> Result<(), CodeParseError> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{}`", byte as char)))
        }
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .to_string()
    }
}

pub fn parse_scalar_expr(src: &str) -> Result<ScalarExpr, CodeParseError> {
    let mut lx = Lexer {
        src: src.as_bytes(),
        pos: 0,
    };
    let e = scalar_cmp(&mut lx)?;
    lx.skip_ws();
    if lx.pos != lx.src.len() {
        return Err(lx.err("trailing input"));
    }
    Ok(e)
}

fn scalar_cmp(lx: &mut Lexer) -> Result<ScalarExpr, CodeParseError> {
    let lhs = scalar_sum(lx)?;
    let op = if lx.eat_str("<=") {
        CmpOp::Le
    } else if lx.eat_str(">=") {
        CmpOp::Ge
    } else if lx.eat_str("==") {
        CmpOp::Eq
    } else if lx.eat_str("!=") {
        CmpOp::Ne
    } else if lx.eat_str("<") {
        CmpOp::Lt
    } else if lx.eat_str(">") {
        CmpOp::Gt
    } else {
        return Ok(lhs);
    };
    let rhs = scalar_sum(lx)?;
    Ok(ScalarExpr::Cmp(op, Box::new(lhs), Box::new(rhs)))
}

fn scalar_sum(lx: &mut Lexer) -> Result<ScalarExpr, CodeParseError> {
    let mut acc = scalar_term(lx)?;
    loop {
        if lx.eat_str("+") {
            acc = ScalarExpr::Bin(SBinOp::Add, Box::new(acc), Box::new(scalar_term(lx)?));
        } else if lx.peek() == Some(b'-') {
            lx.pos += 1;
            acc = ScalarExpr::Bin(SBinOp::Sub, Box::new(acc), Box::new(scalar_term(lx)?));
        } else {
            return Ok(acc);
        }
    }
}

fn scalar_term(lx: &mut Lexer) -> Result<ScalarExpr, CodeParseError> {
    let mut acc = scalar_unary(lx)?;
    loop {
        if lx.eat_str("*") {
            acc = ScalarExpr::Bin(SBinOp::Mul, Box::new(acc), Box::new(scalar_unary(lx)?));
        } else if lx.eat_str("/") {
            acc = ScalarExpr::Bin(SBinOp::Div, Box::new(acc), Box::new(scalar_unary(lx)?));
        } else if lx.eat_str("%") {
            acc = ScalarExpr::Bin(SBinOp::Mod, Box::new(acc), Box::new(scalar_unary(lx)?));
        } else {
            return Ok(acc);
        }
    }
}

fn scalar_unary(lx: &mut Lexer) -> Result<ScalarExpr, CodeParseError> {
    if lx.peek() == Some(b'-') {
        lx.pos += 1;
        let inner = scalar_unary(lx)?;
        return Ok(match inner {
            ScalarExpr::IntConst(c) => ScalarExpr::IntConst(-c),
            ScalarExpr::FloatConst(c) => ScalarExpr::FloatConst(-c),
            other => ScalarExpr::Neg(Box::new(other)),
        });
    }
    scalar_atom(lx)
}

fn scalar_atom(lx: &mut Lexer) -> Result<ScalarExpr, CodeParseError> {
    match lx.peek() {
        Some(b'(') => {
            lx.pos += 1;
            let inner = scalar_cmp(lx)?;
            lx.expect(b')')?;
            Ok(inner)
        }
        Some(c) if c.is_ascii_digit() => scalar_number(lx),
        Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
            let ident = lx.ident();
            match ident.as_str() {
                "select" => {
                    lx.expect(b'(')?;
                    let cond = scalar_cmp(lx)?;
                    lx.expect(b',')?;
                    let a = scalar_cmp(lx)?;
                    lx.expect(b',')?;
                    let b = scalar_cmp(lx)?;
                    lx.expect(b')')?;
                    Ok(ScalarExpr::Select(Box::new(cond), Box::new(a), Box::new(b)))
                }
                "min" | "max" => {
                    let op = if ident == "min" { SBinOp::Min } else { SBinOp::Max };
                    lx.expect(b'(')?;
                    let a = scalar_cmp(lx)?;
                    lx.expect(b',')?;
                    let b = scalar_cmp(lx)?;
                    lx.expect(b')')?;
                    Ok(ScalarExpr::Bin(op, Box::new(a), Box::new(b)))
                }
                "true" => Ok(ScalarExpr::BoolConst(true)),
                "false" => Ok(ScalarExpr::BoolConst(false)),
                _ => Ok(ScalarExpr::Name(ident)),
            }
        }
        _ => Err(lx.err("expected expression")),
    }
}

fn scalar_number(lx: &mut Lexer) -> Result<ScalarExpr, CodeParseError> {
    let start = lx.pos;
    let mut is_float = false;
    while lx.pos < lx.src.len() {
        let c = lx.src[lx.pos];
        if c.is_ascii_digit() {
            lx.pos += 1;
        } else if c == b'.' && !is_float {
            is_float = true;
            lx.pos += 1;
        } else if (c == b'e' || c == b'E')
            && lx.pos > start
            && lx
                .src
                .get(lx.pos + 1)
                .is_some_and(|n| n.is_ascii_digit() || *n == b'-' || *n == b'+')
        {
            is_float = true;
            lx.pos += 2;
        } else {
            break;
        }
    }
    let text = std::str::from_utf8(&lx.src[start..lx.pos]).unwrap();
    if is_float {
        text.parse::<f64>()
            .map(ScalarExpr::FloatConst)
            .map_err(|_| lx.err("bad float literal"))
    } else {
        text.parse::<i64>()
            .map(ScalarExpr::IntConst)
            .map_err(|_| lx.err("integer literal out of range"))
    }
}

pub fn parse_bool_expr(src: &str) -> Result<BoolExpr, CodeParseError> {
    let mut lx = Lexer {
        src: src.as_bytes(),
        pos: 0,
    };
    let e = bool_or(&mut lx)?;
    lx.skip_ws();
    if lx.pos != lx.src.len() {
        return Err(lx.err("trailing input"));
    }
    Ok(e)
}

fn bool_or(lx: &mut Lexer) -> Result<BoolExpr, CodeParseError> {
    let mut acc = bool_and(lx)?;
    while lx.eat_str("||") {
        acc = BoolExpr::Or(Box::new(acc), Box::new(bool_and(lx)?));
    }
    Ok(acc)
}

fn bool_and(lx: &mut Lexer) -> Result<BoolExpr, CodeParseError> {
    let mut acc = bool_atom(lx)?;
    while lx.eat_str("&&") {
        acc = BoolExpr::And(Box::new(acc), Box::new(bool_atom(lx)?));
    }
    Ok(acc)
}

fn bool_atom(lx: &mut Lexer) -> Result<BoolExpr, CodeParseError> {
    if lx.eat_str("!") {
        return Ok(BoolExpr::Not(Box::new(bool_atom(lx)?)));
    }
    // `(` may open either a nested boolean expression or a parenthesized
    // arithmetic operand; try boolean first.
    if lx.peek() == Some(b'(') {
        let save = lx.pos;
        lx.pos += 1;
        if let Ok(inner) = bool_or(lx) {
            if lx.peek() == Some(b')') {
                lx.pos += 1;
                return Ok(inner);
            }
        }
        lx.pos = save;
    }
    let save = lx.pos;
    if lx.peek().is_some_and(|c| c.is_ascii_alphabetic()) {
        let ident = lx.ident();
        if ident == "true" {
            return Ok(BoolExpr::True);
        }
        if ident == "false" {
            return Ok(BoolExpr::Not(Box::new(BoolExpr::True)));
        }
        lx.pos = save;
    }
    bool_cmp(lx)
}

fn bool_cmp(lx: &mut Lexer) -> Result<BoolExpr, CodeParseError> {
    let lhs = sym_operand(lx)?;
    let op = if lx.eat_str("<=") {
        CmpOp::Le
    } else if lx.eat_str(">=") {
        CmpOp::Ge
    } else if lx.eat_str("==") {
        CmpOp::Eq
    } else if lx.eat_str("!=") {
        CmpOp::Ne
    } else if lx.eat_str("<") {
        CmpOp::Lt
    } else if lx.eat_str(">") {
        CmpOp::Gt
    } else {
        return Err(lx.err("expected comparison operator"));
    };
    let rhs = sym_operand(lx)?;
    Ok(BoolExpr::Cmp(op, lhs, rhs))
}

/// Parses a symbolic integer operand by scanning ahead to the comparison or
/// boolean operator and delegating to the expression parser.
fn sym_operand(lx: &mut Lexer) -> Result<crate::symexpr::SymExpr, CodeParseError> {
    lx.skip_ws();
    let start = lx.pos;
    let mut depth = 0usize;
    while lx.pos < lx.src.len() {
        let c = lx.src[lx.pos];
        match c {
            b'(' => depth += 1,
            b')' => {
                if depth == 0 {
                    break;
                }
                depth -= 1;
            }
            b'<' | b'>' | b'=' | b'!' | b'&' | b'|' if depth == 0 => break,
            _ => {}
        }
        lx.pos += 1;
    }
    let text = std::str::from_utf8(&lx.src[start..lx.pos]).unwrap();
    crate::symexpr::parse_expr(text.trim()).map_err(|e| CodeParseError {
        pos: start + e.pos,
        message: e.message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trips() {
        for text in [
            "a * b",
            "a + b * 2 - 1",
            "select(x > 100, bad, good)",
            "select(a >= b, 1.5, -0.25)",
            "-(a + b) / 4",
            "min(a, b) + max(a, 2)",
            "a % 3",
        ] {
            let e = parse_scalar_expr(text).unwrap();
            let shown = e.to_string();
            let back = parse_scalar_expr(&shown).unwrap();
            assert_eq!(back, e, "`{text}` -> `{shown}`");
        }
    }

    #[test]
    fn float_literals_keep_point() {
        let e = parse_scalar_expr("2.0").unwrap();
        assert_eq!(e, ScalarExpr::FloatConst(2.0));
        assert_eq!(e.to_string(), "2.0");
        let e = parse_scalar_expr("1e-3").unwrap();
        assert_eq!(e, ScalarExpr::FloatConst(1e-3));
    }

    #[test]
    fn bool_round_trips() {
        for text in ["true", "i < N", "(i < N) && (j >= 0)", "!(i == 4)", "i + 1 < N * 2"] {
            let e = parse_bool_expr(text).unwrap();
            let shown = e.to_string();
            let back = parse_bool_expr(&shown).unwrap();
            assert_eq!(back, e, "`{text}` -> `{shown}`");
        }
    }

    #[test]
    fn bool_eval() {
        let b: BoolExpr = "i < N".parse().unwrap();
        let mut env = BTreeMap::new();
        env.insert("i".to_string(), 3i64);
        env.insert("N".to_string(), 4i64);
        assert_eq!(b.eval(&env), Ok(true));
        env.insert("i".to_string(), 4);
        assert_eq!(b.eval(&env), Ok(false));
    }

    #[test]
    fn select_ordinals() {
        let e = parse_scalar_expr("select(x > 0, select(y > 0, 1, 2), 3)").unwrap();
        assert_eq!(e.count_selects(), 2);
    }
}
