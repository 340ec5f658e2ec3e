//! Gray-box constraint derivation: static analysis of the cutout and its
//! originating program bounds the sampled input space, cutting uninteresting
//! faults before any trial runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutout::Cutout;
use crate::ir::Program;
use crate::symexpr::SymExpr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Bounded because the symbol subscripts a container dimension.
    IndexUse,
    /// Bounded by an enclosing loop of the original program.
    LoopBound,
    /// Determines a container size: never smaller than 1.
    SizeSymbol,
    UserProvided,
    /// No analysis applied; default sampling interval.
    Unconstrained,
}

/// Half-open interval `[lo, hi)` for one symbol, optionally restricted to
/// multiples of a stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolConstraint {
    pub lo: SymExpr,
    pub hi: SymExpr,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub multiple_of: Option<i64>,
    pub provenance: Provenance,
}

impl SymbolConstraint {
    /// The first real analysis replaces the default interval; later ones
    /// intersect with it.
    fn intersect(&mut self, lo: SymExpr, hi: SymExpr, provenance: Provenance) {
        if self.provenance == Provenance::Unconstrained {
            self.lo = lo.simplify();
            self.hi = hi.simplify();
            self.provenance = provenance;
        } else {
            self.lo = self.lo.clone().max(lo).simplify();
            self.hi = self.hi.clone().min(hi).simplify();
        }
    }
}

/// Sampling constraints for a cutout's input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub symbols: BTreeMap<String, SymbolConstraint>,
    /// Uniform range for float container elements.
    pub float_range: (f64, f64),
    /// Uniform range for integer container elements.
    pub int_range: (i64, i64),
    /// Allow NaN and infinities among injected special values.
    pub allow_nan_inf: bool,
    pub size_max: i64,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            symbols: BTreeMap::new(),
            float_range: (-1.0, 1.0),
            int_range: (-64, 64),
            allow_nan_inf: false,
            size_max: 64,
        }
    }
}

/// User-supplied constraints, intersected with the derived ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserConstraints {
    #[serde(default)]
    pub symbols: BTreeMap<String, UserSymbolConstraint>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub float_range: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub int_range: Option<(i64, i64)>,
    #[serde(default)]
    pub allow_nan_inf: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserSymbolConstraint {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub multiple_of: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConstraintError {
    #[error("empty interval for symbol `{0}`: {1}")]
    EmptyInterval(String, String),
}

/// Derive sampling constraints for the cutout `c` of `program`.
///
/// Size symbols sample in `[1, size_max]`; symbols used as subscripts are
/// bounded to `[0, dim extent)` per accessed dimension; loop iteration
/// variables of enclosing loops keep their loop bounds; user constraints
/// intersect everything.
pub fn derive_constraints(
    program: &Program,
    cutout: &Cutout,
    size_max: i64,
    user: Option<&UserConstraints>,
) -> Result<ConstraintSet, ConstraintError> {
    let mut cs = ConstraintSet {
        size_max,
        ..Default::default()
    };
    // Every sampled symbol starts unconstrained over [1, size_max + 1).
    for name in &cutout.input_symbols {
        cs.symbols.insert(
            name.clone(),
            SymbolConstraint {
                lo: SymExpr::Const(1),
                hi: SymExpr::Const(size_max + 1),
                multiple_of: None,
                provenance: Provenance::Unconstrained,
            },
        );
    }

    // (c) Size symbols: anything in a cutout container shape.
    for desc in cutout.program.containers.values() {
        for e in &desc.shape {
            for sym in e.symbols() {
                if let Some(c) = cs.symbols.get_mut(&sym) {
                    c.intersect(
                        SymExpr::Const(1),
                        SymExpr::Const(size_max + 1),
                        Provenance::SizeSymbol,
                    );
                    c.provenance = Provenance::SizeSymbol;
                }
            }
        }
    }

    // (a) Subscript use inside the cutout: bound to the accessed dimension.
    for state in &cutout.program.states {
        for edge in &state.edges {
            let Some(memlet) = &edge.memlet else { continue };
            let Some(desc) = cutout.program.containers.get(&memlet.container) else {
                continue;
            };
            for (dim, range) in memlet.subset.dims.iter().enumerate() {
                let extent = desc.shape[dim].clone();
                let (sym, offset) = match &range.begin {
                    SymExpr::Sym(s) => (s.clone(), 0i64),
                    SymExpr::Bin(crate::symexpr::BinOp::Add, a, b) => match (&**a, &**b) {
                        (SymExpr::Sym(s), SymExpr::Const(c)) => (s.clone(), *c),
                        (SymExpr::Const(c), SymExpr::Sym(s)) => (s.clone(), *c),
                        _ => continue,
                    },
                    SymExpr::Bin(crate::symexpr::BinOp::Sub, a, b) => match (&**a, &**b) {
                        (SymExpr::Sym(s), SymExpr::Const(c)) => (s.clone(), -*c),
                        _ => continue,
                    },
                    _ => continue,
                };
                if let Some(c) = cs.symbols.get_mut(&sym) {
                    // begin = sym + offset must stay within [0, extent).
                    c.intersect(
                        SymExpr::Const(-offset),
                        extent.sub(offset),
                        Provenance::IndexUse,
                    );
                }
            }
        }
    }

    // (b) Loop context in the original program: iteration variables of
    // enclosing loops keep their bounds.
    for state in &program.states {
        if let Some(shape) = crate::xform::loop_shape(program, state.id) {
            if let Some(c) = cs.symbols.get_mut(&shape.var) {
                let trip = shape.trip_count();
                if trip >= 1 {
                    let last = shape.init + (trip - 1) * shape.step;
                    let lo = shape.init.min(last);
                    let hi = shape.init.max(last) + 1;
                    c.intersect(
                        SymExpr::Const(lo),
                        SymExpr::Const(hi),
                        Provenance::LoopBound,
                    );
                    c.provenance = Provenance::LoopBound;
                }
            }
        }
    }

    // (d) User constraints intersect all of the above.
    if let Some(user) = user {
        if let Some(fr) = user.float_range {
            cs.float_range = fr;
        }
        if let Some(ir) = user.int_range {
            cs.int_range = ir;
        }
        cs.allow_nan_inf = user.allow_nan_inf;
        for (name, u) in &user.symbols {
            let Some(c) = cs.symbols.get_mut(name) else { continue };
            if let Some(min) = u.min {
                c.intersect(SymExpr::Const(min), c.hi.clone(), Provenance::UserProvided);
            }
            if let Some(max) = u.max {
                c.intersect(c.lo.clone(), SymExpr::Const(max + 1), Provenance::UserProvided);
            }
            if u.min.is_some() || u.max.is_some() || u.multiple_of.is_some() {
                c.provenance = Provenance::UserProvided;
            }
            if let Some(m) = u.multiple_of {
                c.multiple_of = Some(m.max(1));
            }
        }
    }

    // Contradictions that are already visible statically are reported, not
    // guessed around.
    for (name, c) in &cs.symbols {
        if let (SymExpr::Const(lo), SymExpr::Const(hi)) =
            (&c.lo.clone().simplify(), &c.hi.clone().simplify())
        {
            if hi <= lo {
                return Err(ConstraintError::EmptyInterval(
                    name.clone(),
                    format!("[{lo}, {hi})"),
                ));
            }
            if let Some(m) = c.multiple_of {
                let k_lo = lo.div_euclid(m) + i64::from(lo.rem_euclid(m) != 0);
                let k_hi = (hi - 1).div_euclid(m);
                if k_hi < k_lo {
                    return Err(ConstraintError::EmptyInterval(
                        name.clone(),
                        format!("no multiple of {m} in [{lo}, {hi})"),
                    ));
                }
            }
        }
    }
    Ok(cs)
}
