//! Index ranges over container dimensions and a conservative disjointness
//! test built from interval arithmetic on symbolic expressions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BinOp, EvalError, SymExpr};

/// Per-dimension half-open range `begin : end : step` (`end` exclusive).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RangeDim {
    pub begin: SymExpr,
    pub end: SymExpr,
    pub step: SymExpr,
}

impl RangeDim {
    pub fn new(begin: impl Into<SymExpr>, end: impl Into<SymExpr>, step: impl Into<SymExpr>) -> Self {
        RangeDim {
            begin: begin.into(),
            end: end.into(),
            step: step.into(),
        }
    }

    /// Number of addressed indices: `ceil((end - begin) / step)`.
    pub fn count(&self, binding: &BTreeMap<String, i64>) -> Result<u64, EvalError> {
        let begin = self.begin.eval(binding)?;
        let end = self.end.eval(binding)?;
        let step = self.step.eval(binding)?;
        if step < 1 {
            return Err(EvalError::InvalidStep);
        }
        if end < begin {
            return Err(EvalError::NegativeExtent);
        }
        let span = (end - begin) as u64;
        Ok(span.div_ceil(step as u64))
    }

    /// Symbolic element count of this dimension.
    pub fn count_sym(&self) -> SymExpr {
        let span = self.end.clone().sub(self.begin.clone());
        SymExpr::bin(
            BinOp::FloorDiv,
            span.add(self.step.clone()).sub(1),
            self.step.clone(),
        )
        .simplify()
    }
}

/// Subset of a container: one `RangeDim` per dimension. Rank 0 addresses a
/// scalar (exactly one element).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsetRange {
    pub dims: Vec<RangeDim>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disjointness {
    Disjoint,
    MayOverlap,
}

impl SubsetRange {
    pub fn new(dims: Vec<RangeDim>) -> Self {
        SubsetRange { dims }
    }

    /// The scalar subset (rank 0).
    pub fn scalar() -> Self {
        SubsetRange { dims: Vec::new() }
    }

    /// Covers `[0 : extent : 1]` for every dimension of `shape`.
    pub fn full(shape: &[SymExpr]) -> Self {
        SubsetRange {
            dims: shape
                .iter()
                .map(|e| RangeDim::new(0, e.clone(), 1))
                .collect(),
        }
    }

    /// Single element at the given index per dimension.
    pub fn point(indices: &[SymExpr]) -> Self {
        SubsetRange {
            dims: indices
                .iter()
                .map(|e| RangeDim::new(e.clone(), e.clone().add(1), 1))
                .collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Number of elements addressed under the binding.
    pub fn volume(&self, binding: &BTreeMap<String, i64>) -> Result<u64, EvalError> {
        let mut total: u64 = 1;
        for dim in &self.dims {
            total = total.saturating_mul(dim.count(binding)?);
        }
        Ok(total)
    }

    /// Symbolic element count (product of per-dimension counts).
    pub fn volume_sym(&self) -> SymExpr {
        let mut acc = SymExpr::Const(1);
        for dim in &self.dims {
            acc = acc.mul(dim.count_sym());
        }
        acc.simplify()
    }

    pub fn free_symbols(&self) -> std::collections::BTreeSet<String> {
        let mut out = std::collections::BTreeSet::new();
        for dim in &self.dims {
            dim.begin.free_symbols(&mut out);
            dim.end.free_symbols(&mut out);
            dim.step.free_symbols(&mut out);
        }
        out
    }

    pub fn substitute(&self, name: &str, value: &SymExpr) -> SubsetRange {
        SubsetRange {
            dims: self
                .dims
                .iter()
                .map(|d| RangeDim {
                    begin: d.begin.substitute(name, value),
                    end: d.end.substitute(name, value),
                    step: d.step.substitute(name, value),
                })
                .collect(),
        }
    }

    /// Conservative disjointness: `Disjoint` only when the dense hulls are
    /// provably separated in at least one dimension under the assumptions.
    pub fn disjoint(
        &self,
        other: &SubsetRange,
        assumptions: &Assumptions,
    ) -> Result<Disjointness, EvalError> {
        if self.rank() != other.rank() {
            return Err(EvalError::RankMismatch(self.rank(), other.rank()));
        }
        for (a, b) in self.dims.iter().zip(&other.dims) {
            if assumptions.prove_le(&a.end, &b.begin) || assumptions.prove_le(&b.end, &a.begin) {
                return Ok(Disjointness::Disjoint);
            }
        }
        Ok(Disjointness::MayOverlap)
    }
}

impl fmt::Display for SubsetRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}:{}:{}", d.begin, d.end, d.step)?;
        }
        write!(f, "]")
    }
}

/// Extended integer for interval arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ext {
    NegInf,
    Fin(i64),
    PosInf,
}

impl Ext {
    fn add(self, other: Ext) -> Ext {
        use Ext::*;
        match (self, other) {
            (Fin(a), Fin(b)) => a.checked_add(b).map_or_else(
                || if a > 0 { PosInf } else { NegInf },
                Fin,
            ),
            (PosInf, NegInf) | (NegInf, PosInf) => unreachable!("indeterminate sum"),
            (PosInf, _) | (_, PosInf) => PosInf,
            (NegInf, _) | (_, NegInf) => NegInf,
        }
    }

    fn neg(self) -> Ext {
        match self {
            Ext::NegInf => Ext::PosInf,
            Ext::PosInf => Ext::NegInf,
            Ext::Fin(v) => Ext::Fin(v.saturating_neg()),
        }
    }

    fn mul(self, other: Ext) -> Ext {
        use Ext::*;
        match (self, other) {
            (Fin(0), _) | (_, Fin(0)) => Fin(0),
            (Fin(a), Fin(b)) => a.checked_mul(b).map_or_else(
                || {
                    if (a > 0) == (b > 0) {
                        PosInf
                    } else {
                        NegInf
                    }
                },
                Fin,
            ),
            (PosInf, b) | (b, PosInf) => {
                if b > Fin(0) {
                    PosInf
                } else {
                    NegInf
                }
            }
            (NegInf, b) | (b, NegInf) => {
                if b > Fin(0) {
                    NegInf
                } else {
                    PosInf
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Interval {
    lo: Ext,
    hi: Ext,
}

impl Interval {
    const FULL: Interval = Interval {
        lo: Ext::NegInf,
        hi: Ext::PosInf,
    };

    fn point(v: i64) -> Interval {
        Interval {
            lo: Ext::Fin(v),
            hi: Ext::Fin(v),
        }
    }
}

/// Symbol value assumptions used by the conservative overlap tests. Unless
/// stated otherwise, every symbol is assumed to lie in `[1, +inf)` — a data
/// container can never have a non-positive size.
#[derive(Debug, Clone, Default)]
pub struct Assumptions {
    intervals: BTreeMap<String, (Option<i64>, Option<i64>)>,
}

impl Assumptions {
    pub fn new() -> Self {
        Self::default()
    }

    /// Constrain a symbol to `[lo, hi]` (inclusive, `None` = unbounded).
    pub fn assume(mut self, name: impl Into<String>, lo: Option<i64>, hi: Option<i64>) -> Self {
        self.intervals.insert(name.into(), (lo, hi));
        self
    }

    fn symbol_interval(&self, name: &str) -> Interval {
        match self.intervals.get(name) {
            Some((lo, hi)) => Interval {
                lo: lo.map_or(Ext::NegInf, Ext::Fin),
                hi: hi.map_or(Ext::PosInf, Ext::Fin),
            },
            None => Interval {
                lo: Ext::Fin(1),
                hi: Ext::PosInf,
            },
        }
    }

    fn bounds(&self, e: &SymExpr) -> Interval {
        match e {
            SymExpr::Const(c) => Interval::point(*c),
            SymExpr::Sym(name) => self.symbol_interval(name),
            SymExpr::Bin(op, lhs, rhs) => {
                let a = self.bounds(lhs);
                let b = self.bounds(rhs);
                match op {
                    BinOp::Add => Interval {
                        lo: a.lo.add(b.lo),
                        hi: a.hi.add(b.hi),
                    },
                    BinOp::Sub => Interval {
                        lo: a.lo.add(b.hi.neg()),
                        hi: a.hi.add(b.lo.neg()),
                    },
                    BinOp::Mul => {
                        let candidates = [
                            a.lo.mul(b.lo),
                            a.lo.mul(b.hi),
                            a.hi.mul(b.lo),
                            a.hi.mul(b.hi),
                        ];
                        Interval {
                            lo: *candidates.iter().min().unwrap(),
                            hi: *candidates.iter().max().unwrap(),
                        }
                    }
                    BinOp::FloorDiv => {
                        // Only the fully finite, strictly positive divisor
                        // case is bounded; everything else degrades safely.
                        match (a.lo, a.hi, b.lo, b.hi) {
                            (Ext::Fin(al), Ext::Fin(ah), Ext::Fin(bl), Ext::Fin(bh)) if bl >= 1 => {
                                let corners = [
                                    super::floor_div(al, bl).unwrap(),
                                    super::floor_div(al, bh).unwrap(),
                                    super::floor_div(ah, bl).unwrap(),
                                    super::floor_div(ah, bh).unwrap(),
                                ];
                                Interval {
                                    lo: Ext::Fin(*corners.iter().min().unwrap()),
                                    hi: Ext::Fin(*corners.iter().max().unwrap()),
                                }
                            }
                            (al, _, Ext::Fin(bl), _) if bl >= 1 && al >= Ext::Fin(0) => Interval {
                                lo: Ext::Fin(0),
                                hi: Ext::PosInf,
                            },
                            _ => Interval::FULL,
                        }
                    }
                    BinOp::Mod => match (b.lo, b.hi) {
                        (Ext::Fin(bl), Ext::Fin(bh)) if bl >= 1 => Interval {
                            lo: Ext::Fin(0),
                            hi: Ext::Fin(bh - 1),
                        },
                        (Ext::Fin(bl), _) if bl >= 1 => Interval {
                            lo: Ext::Fin(0),
                            hi: Ext::PosInf,
                        },
                        _ => Interval::FULL,
                    },
                    BinOp::Min => Interval {
                        lo: a.lo.min(b.lo),
                        hi: a.hi.min(b.hi),
                    },
                    BinOp::Max => Interval {
                        lo: a.lo.max(b.lo),
                        hi: a.hi.max(b.hi),
                    },
                }
            }
        }
    }

    /// True when `a <= b` holds for every admissible symbol valuation.
    /// The affine parts of `b - a` cancel through simplification first, so
    /// constant-offset comparisons over shared symbols are decided exactly.
    pub fn prove_le(&self, a: &SymExpr, b: &SymExpr) -> bool {
        let diff = b.clone().sub(a.clone()).simplify();
        self.bounds(&diff).lo >= Ext::Fin(0)
    }

    /// True when `a >= bound` holds for every admissible valuation.
    pub fn prove_ge_const(&self, a: &SymExpr, bound: i64) -> bool {
        self.bounds(&a.clone().simplify()).lo >= Ext::Fin(bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn bind(pairs: &[(&str, i64)]) -> BTreeMap<String, i64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn dim1(b: impl Into<SymExpr>, e: impl Into<SymExpr>, s: impl Into<SymExpr>) -> SubsetRange {
        SubsetRange::new(vec![RangeDim::new(b, e, s)])
    }

    #[test]
    fn volumes() {
        // 1-D [0:10:1] addresses the first 10 elements.
        assert_eq!(dim1(0, 10, 1).volume(&bind(&[])), Ok(10));
        // 2-D [0:N:1] x [0:N:1] with N=4 covers the full container.
        let n = SymExpr::sym("N");
        let full = SubsetRange::new(vec![
            RangeDim::new(0, n.clone(), 1),
            RangeDim::new(0, n, 1),
        ]);
        assert_eq!(full.volume(&bind(&[("N", 4)])), Ok(16));
        // 1-D [0:9:2] addresses {0,2,4,6,8}: enumeration oracle.
        let enumerated = (0..9).step_by(2).count() as u64;
        assert_eq!(dim1(0, 9, 2).volume(&bind(&[])), Ok(enumerated));
        assert_eq!(enumerated, 5);
    }

    #[test]
    fn volume_errors() {
        let r = dim1(SymExpr::sym("a"), 4, 1);
        assert_eq!(
            r.volume(&bind(&[])),
            Err(EvalError::UnboundSymbol("a".into()))
        );
        assert_eq!(
            dim1(5, 4, 1).volume(&bind(&[])),
            Err(EvalError::NegativeExtent)
        );
        assert_eq!(
            dim1(0, 4, 0).volume(&bind(&[])),
            Err(EvalError::InvalidStep)
        );
    }

    #[test]
    fn disjointness_basics() {
        let assume = Assumptions::new();
        // Touching half-open intervals.
        assert_eq!(
            dim1(0, 10, 1).disjoint(&dim1(10, 20, 1), &assume),
            Ok(Disjointness::Disjoint)
        );
        // Shared index 0.
        let n = SymExpr::sym("N");
        assert_eq!(
            dim1(0, n, 1).disjoint(&dim1(0, 1, 1), &assume),
            Ok(Disjointness::MayOverlap)
        );
        // Constant-offset test on a shared symbol.
        let i = SymExpr::sym("i");
        let a = dim1(i.clone(), i.clone().add(1), 1);
        let b = dim1(i.clone().add(1), i.clone().add(2), 1);
        assert_eq!(a.disjoint(&b, &assume), Ok(Disjointness::Disjoint));
        // Validate by sampling i in 0..=100.
        for iv in 0..=100i64 {
            let binding = bind(&[("i", iv)]);
            let av = a.dims[0].begin.eval(&binding).unwrap();
            let bv = b.dims[0].begin.eval(&binding).unwrap();
            assert_ne!(av, bv);
        }
        // Symmetry and self-overlap.
        assert_eq!(b.disjoint(&a, &assume), Ok(Disjointness::Disjoint));
        assert_eq!(a.disjoint(&a, &assume), Ok(Disjointness::MayOverlap));
        // Rank mismatch.
        assert_eq!(
            a.disjoint(&SubsetRange::scalar(), &assume),
            Err(EvalError::RankMismatch(1, 0))
        );
    }

    /// Sampling soundness: Disjoint implies the enumerated index sets never
    /// intersect, over randomized affine range pairs and bindings.
    #[test]
    fn disjointness_sampling_soundness() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let symbols = ["i", "j"];
        let mut checked_disjoint = 0u32;
        for _ in 0..1000 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let base: SymExpr = if rng.gen_bool(0.6) {
                    let s = symbols[rng.gen_range(0..symbols.len())];
                    let scale = rng.gen_range(1..=2);
                    SymExpr::Const(scale).mul(SymExpr::sym(s))
                } else {
                    SymExpr::Const(rng.gen_range(0..6))
                };
                let off = rng.gen_range(0..8i64);
                let len = rng.gen_range(1..5i64);
                let begin = base.clone().add(off);
                let end = begin.clone().add(len);
                dim1(begin, end, rng.gen_range(1..3i64))
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let verdict = a.disjoint(&b, &Assumptions::new()).unwrap();
            // Symmetry holds regardless of the verdict.
            assert_eq!(verdict, b.disjoint(&a, &Assumptions::new()).unwrap());
            if verdict == Disjointness::Disjoint {
                checked_disjoint += 1;
                for _ in 0..8 {
                    let binding = bind(&[
                        ("i", rng.gen_range(1..50)),
                        ("j", rng.gen_range(1..50)),
                    ]);
                    let enumerate = |r: &SubsetRange| -> Vec<i64> {
                        let d = &r.dims[0];
                        let (b0, e0, s0) = (
                            d.begin.eval(&binding).unwrap(),
                            d.end.eval(&binding).unwrap(),
                            d.step.eval(&binding).unwrap(),
                        );
                        (b0..e0).step_by(s0 as usize).collect()
                    };
                    let ia = enumerate(&a);
                    let ib = enumerate(&b);
                    assert!(
                        ia.iter().all(|x| !ib.contains(x)),
                        "disjoint verdict but overlap: {a} vs {b}"
                    );
                }
            }
        }
        assert!(checked_disjoint > 50, "sampling produced too few disjoint pairs");
    }

    #[test]
    fn prove_le_uses_assumptions() {
        let n = SymExpr::sym("N");
        // Default assumption N >= 1.
        assert!(Assumptions::new().prove_le(&SymExpr::Const(1), &n));
        assert!(!Assumptions::new().prove_le(&SymExpr::Const(2), &n));
        let wide = Assumptions::new().assume("N", Some(32), Some(64));
        assert!(wide.prove_le(&SymExpr::Const(2), &n));
    }
}
