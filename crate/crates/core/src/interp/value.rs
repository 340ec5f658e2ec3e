//! Runtime values, typed buffers and scalar expression evaluation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ir::{CmpOp, DType, SBinOp, ScalarExpr};
use crate::symexpr::{floor_div, floor_mod};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Value {
    F64(f64),
    F32(f32),
    I64(i64),
    I32(i32),
    Bool(bool),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::F64(v) => write!(f, "{v:?}"),
            Value::F32(v) => write!(f, "{v:?}"),
            Value::I64(v) => write!(f, "{v}"),
            Value::I32(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
        }
    }
}

/// Flat typed storage for one container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Buffer {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
    I32(Vec<i32>),
    Bool(Vec<bool>),
}

impl Buffer {
    pub fn zeros(dtype: DType, len: usize) -> Buffer {
        match dtype {
            DType::F64 => Buffer::F64(vec![0.0; len]),
            DType::F32 => Buffer::F32(vec![0.0; len]),
            DType::I64 => Buffer::I64(vec![0; len]),
            DType::I32 => Buffer::I32(vec![0; len]),
            DType::Bool => Buffer::Bool(vec![false; len]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F64(v) => v.len(),
            Buffer::F32(v) => v.len(),
            Buffer::I64(v) => v.len(),
            Buffer::I32(v) => v.len(),
            Buffer::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F64(_) => DType::F64,
            Buffer::F32(_) => DType::F32,
            Buffer::I64(_) => DType::I64,
            Buffer::I32(_) => DType::I32,
            Buffer::Bool(_) => DType::Bool,
        }
    }

    pub fn get(&self, idx: usize) -> Value {
        match self {
            Buffer::F64(v) => Value::F64(v[idx]),
            Buffer::F32(v) => Value::F32(v[idx]),
            Buffer::I64(v) => Value::I64(v[idx]),
            Buffer::I32(v) => Value::I32(v[idx]),
            Buffer::Bool(v) => Value::Bool(v[idx]),
        }
    }

    /// Store a value, casting to the buffer's dtype. Bool storage only
    /// accepts booleans (and vice versa for numeric storage).
    pub fn set(&mut self, idx: usize, value: Value) -> Result<(), EvalFault> {
        match self {
            Buffer::F64(v) => v[idx] = value.as_f64().ok_or(EvalFault::TypeError)?,
            Buffer::F32(v) => v[idx] = value.as_f64().ok_or(EvalFault::TypeError)? as f32,
            Buffer::I64(v) => v[idx] = value.as_i64().ok_or(EvalFault::TypeError)?,
            Buffer::I32(v) => v[idx] = value.as_i64().ok_or(EvalFault::TypeError)? as i32,
            Buffer::Bool(v) => match value {
                Value::Bool(b) => v[idx] = b,
                _ => return Err(EvalFault::TypeError),
            },
        }
        Ok(())
    }

    /// Bitwise equality at one element.
    pub fn bit_eq(&self, other: &Buffer, idx: usize) -> bool {
        match (self, other) {
            (Buffer::F64(a), Buffer::F64(b)) => a[idx].to_bits() == b[idx].to_bits(),
            (Buffer::F32(a), Buffer::F32(b)) => a[idx].to_bits() == b[idx].to_bits(),
            (Buffer::I64(a), Buffer::I64(b)) => a[idx] == b[idx],
            (Buffer::I32(a), Buffer::I32(b)) => a[idx] == b[idx],
            (Buffer::Bool(a), Buffer::Bool(b)) => a[idx] == b[idx],
            _ => false,
        }
    }
}

impl Value {
    pub fn as_f64(self) -> Option<f64> {
        match self {
            Value::F64(v) => Some(v),
            Value::F32(v) => Some(v as f64),
            Value::I64(v) => Some(v as f64),
            Value::I32(v) => Some(v as f64),
            Value::Bool(_) => None,
        }
    }

    pub fn as_i64(self) -> Option<i64> {
        match self {
            Value::F64(v) => Some(v as i64),
            Value::F32(v) => Some(v as i64),
            Value::I64(v) => Some(v),
            Value::I32(v) => Some(v as i64),
            Value::Bool(_) => None,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Value::F64(_) | Value::F32(_))
    }
}

/// Faults a tasklet evaluation can raise; mapped to execution faults with the
/// offending node attached by the interpreter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFault {
    DivisionByZero,
    TypeError,
    UnknownName,
}

/// Observer for select-branch outcomes during expression evaluation.
pub trait BranchSink {
    fn branch(&mut self, ordinal: u32, taken: bool);
}

pub struct NoBranches;

impl BranchSink for NoBranches {
    fn branch(&mut self, _ordinal: u32, _taken: bool) {}
}

fn numeric_pair(a: Value, b: Value) -> Result<(Value, Value), EvalFault> {
    if matches!(a, Value::Bool(_)) || matches!(b, Value::Bool(_)) {
        return Err(EvalFault::TypeError);
    }
    // Promote to the wider operand type: f64 > f32 > integers.
    if matches!(a, Value::F64(_)) || matches!(b, Value::F64(_)) {
        Ok((
            Value::F64(a.as_f64().unwrap()),
            Value::F64(b.as_f64().unwrap()),
        ))
    } else if a.is_float() || b.is_float() {
        Ok((
            Value::F32(a.as_f64().unwrap() as f32),
            Value::F32(b.as_f64().unwrap() as f32),
        ))
    } else {
        Ok((
            Value::I64(a.as_i64().unwrap()),
            Value::I64(b.as_i64().unwrap()),
        ))
    }
}

fn apply_bin(op: SBinOp, a: Value, b: Value) -> Result<Value, EvalFault> {
    let (a, b) = numeric_pair(a, b)?;
    Ok(match (a, b) {
        (Value::F64(x), Value::F64(y)) => Value::F64(match op {
            SBinOp::Add => x + y,
            SBinOp::Sub => x - y,
            SBinOp::Mul => x * y,
            SBinOp::Div => x / y,
            SBinOp::Mod => x % y,
            SBinOp::Min => x.min(y),
            SBinOp::Max => x.max(y),
        }),
        (Value::F32(x), Value::F32(y)) => Value::F32(match op {
            SBinOp::Add => x + y,
            SBinOp::Sub => x - y,
            SBinOp::Mul => x * y,
            SBinOp::Div => x / y,
            SBinOp::Mod => x % y,
            SBinOp::Min => x.min(y),
            SBinOp::Max => x.max(y),
        }),
        (Value::I64(x), Value::I64(y)) => Value::I64(match op {
            SBinOp::Add => x.wrapping_add(y),
            SBinOp::Sub => x.wrapping_sub(y),
            SBinOp::Mul => x.wrapping_mul(y),
            SBinOp::Div => floor_div(x, y).map_err(|_| EvalFault::DivisionByZero)?,
            SBinOp::Mod => floor_mod(x, y).map_err(|_| EvalFault::DivisionByZero)?,
            SBinOp::Min => x.min(y),
            SBinOp::Max => x.max(y),
        }),
        _ => unreachable!("numeric_pair returns matched types"),
    })
}

fn apply_cmp(op: CmpOp, a: Value, b: Value) -> Result<Value, EvalFault> {
    if let (Value::Bool(x), Value::Bool(y)) = (a, b) {
        return match op {
            CmpOp::Eq => Ok(Value::Bool(x == y)),
            CmpOp::Ne => Ok(Value::Bool(x != y)),
            _ => Err(EvalFault::TypeError),
        };
    }
    let (a, b) = numeric_pair(a, b)?;
    let ord = match (a, b) {
        (Value::F64(x), Value::F64(y)) => x.partial_cmp(&y),
        (Value::F32(x), Value::F32(y)) => x.partial_cmp(&y),
        (Value::I64(x), Value::I64(y)) => Some(x.cmp(&y)),
        _ => unreachable!(),
    };
    // IEEE semantics: comparisons with NaN are false, except `!=`.
    Ok(Value::Bool(match (op, ord) {
        (CmpOp::Ne, None) => true,
        (_, None) => false,
        (CmpOp::Lt, Some(o)) => o.is_lt(),
        (CmpOp::Le, Some(o)) => o.is_le(),
        (CmpOp::Gt, Some(o)) => o.is_gt(),
        (CmpOp::Ge, Some(o)) => o.is_ge(),
        (CmpOp::Eq, Some(o)) => o.is_eq(),
        (CmpOp::Ne, Some(o)) => o.is_ne(),
    }))
}

/// Evaluate a scalar expression under a name environment. Select branches are
/// lazy: only the taken side is evaluated, and each select reports its
/// pre-order ordinal plus the condition outcome to `branches`.
pub fn eval_scalar<F>(
    expr: &ScalarExpr,
    lookup: &F,
    branches: &mut dyn BranchSink,
    ordinal: &mut u32,
) -> Result<Value, EvalFault>
where
    F: Fn(&str) -> Option<Value>,
{
    match expr {
        ScalarExpr::IntConst(c) => Ok(Value::I64(*c)),
        ScalarExpr::FloatConst(c) => Ok(Value::F64(*c)),
        ScalarExpr::BoolConst(b) => Ok(Value::Bool(*b)),
        ScalarExpr::Name(n) => lookup(n).ok_or(EvalFault::UnknownName),
        ScalarExpr::Neg(e) => {
            let v = eval_scalar(e, lookup, branches, ordinal)?;
            match v {
                Value::F64(x) => Ok(Value::F64(-x)),
                Value::F32(x) => Ok(Value::F32(-x)),
                Value::I64(x) => Ok(Value::I64(x.wrapping_neg())),
                Value::I32(x) => Ok(Value::I32(x.wrapping_neg())),
                Value::Bool(_) => Err(EvalFault::TypeError),
            }
        }
        ScalarExpr::Bin(op, a, b) => {
            let x = eval_scalar(a, lookup, branches, ordinal)?;
            let y = eval_scalar(b, lookup, branches, ordinal)?;
            apply_bin(*op, x, y)
        }
        ScalarExpr::Cmp(op, a, b) => {
            let x = eval_scalar(a, lookup, branches, ordinal)?;
            let y = eval_scalar(b, lookup, branches, ordinal)?;
            apply_cmp(*op, x, y)
        }
        ScalarExpr::Select(cond, then_e, else_e) => {
            let my_ordinal = *ordinal;
            *ordinal += 1;
            let c = eval_scalar(cond, lookup, branches, ordinal)?;
            let taken = match c {
                Value::Bool(b) => b,
                _ => return Err(EvalFault::TypeError),
            };
            branches.branch(my_ordinal, taken);
            // Skip the untaken branch but keep ordinals stable.
            if taken {
                let result = eval_scalar(then_e, lookup, branches, ordinal);
                *ordinal += else_e.count_selects();
                result
            } else {
                *ordinal += then_e.count_selects();
                eval_scalar(else_e, lookup, branches, ordinal)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_scalar_expr;

    struct Collect(Vec<(u32, bool)>);
    impl BranchSink for Collect {
        fn branch(&mut self, ordinal: u32, taken: bool) {
            self.0.push((ordinal, taken));
        }
    }

    fn eval(text: &str, env: &[(&str, Value)]) -> Result<Value, EvalFault> {
        let expr = parse_scalar_expr(text).unwrap();
        let lookup = |n: &str| env.iter().find(|(k, _)| *k == n).map(|(_, v)| *v);
        eval_scalar(&expr, &lookup, &mut NoBranches, &mut 0)
    }

    #[test]
    fn arithmetic_and_promotion() {
        assert_eq!(eval("2 + 3", &[]), Ok(Value::I64(5)));
        assert_eq!(eval("2 + 3.5", &[]), Ok(Value::F64(5.5)));
        assert_eq!(eval("7 / 2", &[]), Ok(Value::I64(3)));
        assert_eq!(eval("-7 / 2", &[]), Ok(Value::I64(-4)));
        assert_eq!(eval("7.0 / 2", &[]), Ok(Value::F64(3.5)));
        assert_eq!(eval("1 / 0", &[]), Err(EvalFault::DivisionByZero));
        assert!(matches!(eval("1.0 / 0.0", &[]), Ok(Value::F64(v)) if v.is_infinite()));
        assert_eq!(eval("x * 2", &[("x", Value::I32(4))]), Ok(Value::I64(8)));
        assert_eq!(eval("y", &[]), Err(EvalFault::UnknownName));
        assert_eq!(eval("true + 1", &[]), Err(EvalFault::TypeError));
    }

    #[test]
    fn select_is_lazy_and_ordinals_are_stable() {
        let expr = parse_scalar_expr("select(x > 0, select(x > 10, 1, 2), 1 / 0)").unwrap();
        let lookup = |n: &str| (n == "x").then_some(Value::I64(5));
        let mut sink = Collect(Vec::new());
        let v = eval_scalar(&expr, &lookup, &mut sink, &mut 0).unwrap();
        assert_eq!(v, Value::I64(2));
        assert_eq!(sink.0, vec![(0, true), (1, false)]);
        // Negative path skips the inner select but its ordinal stays reserved.
        let lookup = |n: &str| (n == "x").then_some(Value::I64(-3));
        let mut sink = Collect(Vec::new());
        let v = eval_scalar(&expr, &lookup, &mut sink, &mut 0);
        assert_eq!(v, Err(EvalFault::DivisionByZero));
        assert_eq!(sink.0, vec![(0, false)]);
    }
}
