//! Text syntax for symbolic expressions.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/' | '%') unary)*
//! unary   := '-' unary | atom
//! atom    := INT | IDENT | func '(' expr ',' expr ')' | '(' expr ')'
//! func    := 'min' | 'max'
//! ```
//!
//! `/` is floor division and `%` floored modulo.

use super::{BinOp, SymExpr};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {pos}: {message}")]
pub struct ParseError {
    pub pos: usize,
    pub message: String,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

pub fn parse_expr(src: &str) -> Result<SymExpr, ParseError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let expr = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("trailing input"));
    }
    Ok(expr)
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
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

    fn eat(&mut self, byte: u8) -> bool {
        if self.peek() == Some(byte) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, byte: u8) -> Result<(), ParseError> {
        if self.eat(byte) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{}`", byte as char)))
        }
    }

    fn expr(&mut self) -> Result<SymExpr, ParseError> {
        let mut acc = self.term()?;
        loop {
            if self.eat(b'+') {
                acc = SymExpr::bin(BinOp::Add, acc, self.term()?);
            } else if self.eat(b'-') {
                acc = SymExpr::bin(BinOp::Sub, acc, self.term()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<SymExpr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat(b'*') {
                acc = SymExpr::bin(BinOp::Mul, acc, self.unary()?);
            } else if self.eat(b'/') {
                acc = SymExpr::bin(BinOp::FloorDiv, acc, self.unary()?);
            } else if self.eat(b'%') {
                acc = SymExpr::bin(BinOp::Mod, acc, self.unary()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn unary(&mut self) -> Result<SymExpr, ParseError> {
        if self.eat(b'-') {
            let inner = self.unary()?;
            return Ok(match inner {
                SymExpr::Const(c) => SymExpr::Const(-c),
                other => SymExpr::bin(BinOp::Sub, SymExpr::Const(0), other),
            });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<SymExpr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let ident = self.ident();
                match ident.as_str() {
                    "min" | "max" => {
                        let op = if ident == "min" { BinOp::Min } else { BinOp::Max };
                        self.expect(b'(')?;
                        let a = self.expr()?;
                        self.expect(b',')?;
                        let b = self.expr()?;
                        self.expect(b')')?;
                        Ok(SymExpr::bin(op, a, b))
                    }
                    _ => Ok(SymExpr::Sym(ident)),
                }
            }
            _ => Err(self.err("expected expression")),
        }
    }

    fn number(&mut self) -> Result<SymExpr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<i64>()
            .map(SymExpr::Const)
            .map_err(|_| self.err("integer literal out of range"))
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_shapes_and_bounds() {
        assert_eq!(
            parse_expr("N*N").unwrap(),
            SymExpr::sym("N").mul(SymExpr::sym("N"))
        );
        assert_eq!(
            parse_expr("min(i+32,N)").unwrap(),
            SymExpr::sym("i").add(32).min(SymExpr::sym("N"))
        );
        assert_eq!(parse_expr(" ( 1 + 2 ) * 3 ").unwrap().simplify(), 9.into());
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_expr("").is_err());
        assert!(parse_expr("1 +").is_err());
        assert!(parse_expr("min(1)").is_err());
        assert!(parse_expr("a b").is_err());
    }
}
