//! Core library for verifying program optimizations on a parametric dataflow
//! IR: cutout extraction, minimum input-flow cuts and differential fuzzing.

pub mod cfdata;
pub mod cutout;
pub mod fixtures;
pub mod interp;
pub mod gen;
pub mod fuzz;
pub mod ir;
pub mod mincut;
pub mod symexpr;
pub mod xform;

pub use symexpr::{Assumptions, Disjointness, SubsetRange, SymExpr};
