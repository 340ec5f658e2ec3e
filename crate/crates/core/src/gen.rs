//! Seeded random program generation for property and soundness testing.
//!
//! Programs are assembled from small valid templates (elementwise maps,
//! scalar tasklet chains, wcr reductions, constant-trip loops) over integer
//! containers, so whole-program comparisons are exact at zero tolerance and
//! every generated program validates cleanly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::interp::{Buffer, ExecutionInput};
use crate::ir::{DType, Program, StateId, TaskletCode};
use crate::symexpr::{RangeDim, SubsetRange, SymExpr};

/// Deterministically generate a small valid program from a seed.
pub fn random_program(seed: u64) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Program::new();
    // One shared extent: constant, or a bounded symbol.
    let symbolic = rng.gen_bool(0.4);
    let extent: SymExpr = if symbolic {
        p.add_symbol_constrained("K", Some(1), Some(4)).unwrap();
        SymExpr::sym("K")
    } else {
        SymExpr::Const(rng.gen_range(2..=4))
    };

    // Container pool: arrays first, scalars after.
    let arrays = ["a", "b", "c", "d"];
    let n_arrays = rng.gen_range(3..=4usize);
    for (i, name) in arrays.iter().take(n_arrays).enumerate() {
        let transient = i >= 2 && rng.gen_bool(0.5);
        p.add_container(*name, DType::I64, vec![extent.clone()], transient)
            .unwrap();
    }
    p.add_scalar("tmp_s", DType::I64, true).unwrap();
    p.add_scalar("out_s", DType::I64, false).unwrap();

    let n_states = rng.gen_range(1..=3usize);
    let mut states: Vec<StateId> = Vec::new();
    let mut wrote_tmp_s = false;
    for k in 0..n_states {
        let state = p.add_state(format!("st{k}"));
        states.push(state);
        let available: Vec<&str> = arrays[..n_arrays].to_vec();
        let src = available[rng.gen_range(0..available.len())];
        let mut dst = available[rng.gen_range(0..available.len())];
        if dst == src {
            dst = available[(available.iter().position(|c| *c == src).unwrap() + 1) % available.len()];
        }
        match rng.gen_range(0..4) {
            // Elementwise unary map.
            0 => {
                let m = rng.gen_range(1..=3);
                let a = rng.gen_range(-2..=2);
                emit_map(&mut p, state, src, dst, &extent, &format!("x * {m} + {a}"));
            }
            // Elementwise binary map.
            1 => {
                let other = available[rng.gen_range(0..available.len())];
                emit_map2(&mut p, state, src, other, dst, &extent, "x + y * 2");
            }
            // Scalar producer/consumer chain: a tasklet fusion site.
            2 => {
                emit_scalar_chain(&mut p, state, src, &mut rng);
                wrote_tmp_s = true;
            }
            // wcr sum reduction into the scalar output.
            _ => {
                emit_reduction(&mut p, state, src, &extent);
            }
        }
        // Occasionally let a later state read the transient scalar, making
        // it a live intermediate.
        if wrote_tmp_s && k + 1 == n_states && rng.gen_bool(0.5) {
            let consumer = p.add_state("consume_tmp");
            states.push(consumer);
            let acc_in = p.add_access(consumer, "tmp_s").unwrap();
            let acc_out = p.add_access(consumer, "out_s").unwrap();
            let t = p
                .add_tasklet(
                    consumer,
                    None,
                    &["x"],
                    &["o"],
                    TaskletCode::parse(&[("o", "x * 5")]).unwrap(),
                )
                .unwrap();
            p.add_memlet(consumer, acc_in, None, t, Some("x"), "tmp_s", SubsetRange::scalar())
                .unwrap();
            p.add_memlet(consumer, t, Some("o"), acc_out, None, "out_s", SubsetRange::scalar())
                .unwrap();
        }
    }

    // Chain the states; optionally run one of them inside a constant-trip
    // loop indexing the arrays directly.
    let loop_state = rng.gen_bool(0.4) && !symbolic;
    let mut iter = states.iter().peekable();
    let mut prev: Option<StateId> = None;
    while let Some(state) = iter.next() {
        if let Some(prev) = prev {
            p.add_interstate(
                prev,
                *state,
                crate::ir::BoolExpr::True,
                Vec::<(String, SymExpr)>::new(),
            )
            .unwrap();
        }
        prev = Some(*state);
        let _ = &iter;
    }
    if loop_state {
        let extent_c = match extent {
            SymExpr::Const(c) => c,
            _ => unreachable!(),
        };
        let body = p.add_state("loop_body");
        let src = arrays[0];
        let dst = arrays[1];
        let acc_in = p.add_access(body, src).unwrap();
        let acc_out = p.add_access(body, dst).unwrap();
        let t = p
            .add_tasklet(
                body,
                None,
                &["x"],
                &["o"],
                TaskletCode::parse(&[("o", "x * 2 + i")]).unwrap(),
            )
            .unwrap();
        let idx = SubsetRange::point(&[SymExpr::sym("i")]);
        p.add_memlet(body, acc_in, None, t, Some("x"), src, idx.clone())
            .unwrap();
        p.add_memlet(body, t, Some("o"), acc_out, None, dst, idx).unwrap();
        if rng.gen_bool(0.5) {
            p.add_loop(prev.unwrap(), body, None, "i", 0, extent_c, 1).unwrap();
        } else {
            // Count down with an exclusive end below the last index.
            p.add_loop(prev.unwrap(), body, None, "i", extent_c - 1, -1, -1)
                .unwrap();
        }
    }
    debug_assert!(
        p.is_valid(),
        "generator produced invalid program (seed {seed}): {:?}",
        crate::ir::validate(&p)
    );
    p
}

fn emit_map(p: &mut Program, state: StateId, src: &str, dst: &str, extent: &SymExpr, code: &str) {
    let acc_in = p.add_access(state, src).unwrap();
    let acc_out = p.add_access(state, dst).unwrap();
    let (entry, exit) = p
        .add_map(state, None, vec![("j", RangeDim::new(0, extent.clone(), 1))])
        .unwrap();
    let t = p
        .add_tasklet(state, Some(entry), &["x"], &["o"], TaskletCode::parse(&[("o", code)]).unwrap())
        .unwrap();
    let full = SubsetRange::full(std::slice::from_ref(extent));
    let j = SubsetRange::point(&[SymExpr::sym("j")]);
    p.add_memlet(state, acc_in, None, entry, None, src, full.clone()).unwrap();
    p.add_memlet(state, entry, None, t, Some("x"), src, j.clone()).unwrap();
    p.add_memlet(state, t, Some("o"), exit, None, dst, j).unwrap();
    p.add_memlet(state, exit, None, acc_out, None, dst, full).unwrap();
}

fn emit_map2(
    p: &mut Program,
    state: StateId,
    src1: &str,
    src2: &str,
    dst: &str,
    extent: &SymExpr,
    code: &str,
) {
    let acc_a = p.add_access(state, src1).unwrap();
    let acc_b = if src2 == src1 {
        acc_a
    } else {
        p.add_access(state, src2).unwrap()
    };
    let acc_out = p.add_access(state, dst).unwrap();
    let (entry, exit) = p
        .add_map(state, None, vec![("j", RangeDim::new(0, extent.clone(), 1))])
        .unwrap();
    let t = p
        .add_tasklet(
            state,
            Some(entry),
            &["x", "y"],
            &["o"],
            TaskletCode::parse(&[("o", code)]).unwrap(),
        )
        .unwrap();
    let full = SubsetRange::full(std::slice::from_ref(extent));
    let j = SubsetRange::point(&[SymExpr::sym("j")]);
    p.add_memlet(state, acc_a, None, entry, None, src1, full.clone()).unwrap();
    if acc_b != acc_a {
        p.add_memlet(state, acc_b, None, entry, None, src2, full.clone()).unwrap();
    }
    p.add_memlet(state, entry, None, t, Some("x"), src1, j.clone()).unwrap();
    p.add_memlet(state, entry, None, t, Some("y"), src2, j.clone()).unwrap();
    p.add_memlet(state, t, Some("o"), exit, None, dst, j).unwrap();
    p.add_memlet(state, exit, None, acc_out, None, dst, full).unwrap();
}

fn emit_scalar_chain(p: &mut Program, state: StateId, src: &str, rng: &mut ChaCha8Rng) {
    let acc_src = p.add_access(state, src).unwrap();
    let acc_tmp = p.add_access(state, "tmp_s").unwrap();
    let acc_out = p.add_access(state, "out_s").unwrap();
    let m = rng.gen_range(2..=3);
    let t1 = p
        .add_tasklet(
            state,
            None,
            &["x"],
            &["o"],
            TaskletCode::parse(&[("o", &format!("x * {m}"))]).unwrap(),
        )
        .unwrap();
    let t2 = p
        .add_tasklet(state, None, &["x"], &["o"], TaskletCode::parse(&[("o", "x + 7")]).unwrap())
        .unwrap();
    p.add_memlet(
        state,
        acc_src,
        None,
        t1,
        Some("x"),
        src,
        SubsetRange::point(&[0.into()]),
    )
    .unwrap();
    p.add_memlet(state, t1, Some("o"), acc_tmp, None, "tmp_s", SubsetRange::scalar())
        .unwrap();
    p.add_memlet(state, acc_tmp, None, t2, Some("x"), "tmp_s", SubsetRange::scalar())
        .unwrap();
    p.add_memlet(state, t2, Some("o"), acc_out, None, "out_s", SubsetRange::scalar())
        .unwrap();
}

fn emit_reduction(p: &mut Program, state: StateId, src: &str, extent: &SymExpr) {
    let acc_in = p.add_access(state, src).unwrap();
    let acc_out = p.add_access(state, "out_s").unwrap();
    let (entry, exit) = p
        .add_map(state, None, vec![("j", RangeDim::new(0, extent.clone(), 1))])
        .unwrap();
    let t = p
        .add_tasklet(state, Some(entry), &["x"], &["o"], TaskletCode::parse(&[("o", "x")]).unwrap())
        .unwrap();
    let full = SubsetRange::full(std::slice::from_ref(extent));
    p.add_memlet(state, acc_in, None, entry, None, src, full).unwrap();
    p.add_memlet(
        state,
        entry,
        None,
        t,
        Some("x"),
        src,
        SubsetRange::point(&[SymExpr::sym("j")]),
    )
    .unwrap();
    let wcr = crate::ir::Memlet::new("out_s", SubsetRange::scalar()).with_wcr(crate::ir::Wcr::Sum);
    p.add_edge(state, t, Some("o"), exit, None, Some(wcr.clone())).unwrap();
    p.add_edge(state, exit, None, acc_out, None, Some(wcr)).unwrap();
}

/// Random whole-program input: symbols within declared bounds, integer
/// buffers in a small range.
pub fn random_input(program: &Program, seed: u64) -> ExecutionInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut symbols = std::collections::BTreeMap::new();
    for (name, decl) in &program.symbols {
        let lo = decl.min.unwrap_or(1);
        let hi = decl.max.unwrap_or(4);
        symbols.insert(name.clone(), rng.gen_range(lo..=hi.max(lo)));
    }
    let mut input = ExecutionInput::zeros(program, symbols).expect("generated shapes evaluate");
    for (name, buffer) in input.buffers.iter_mut() {
        let len = buffer.len();
        *buffer = Buffer::I64((0..len).map(|_| rng.gen_range(-8..=8)).collect());
        let _ = name;
    }
    input
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::run;

    #[test]
    fn generated_programs_validate_and_run() {
        for seed in 0..200 {
            let p = random_program(seed);
            let diags = crate::ir::validate(&p);
            assert!(diags.is_empty(), "seed {seed}: {diags:?}");
            let input = random_input(&p, seed ^ 0xabcd);
            let outcome = run(&p, &input, 100_000).unwrap();
            assert!(
                outcome.status.is_completed(),
                "seed {seed}: {:?}",
                outcome.status
            );
        }
    }

    #[test]
    fn same_seed_reproduces_program_bytes() {
        for seed in 0..20 {
            let a = crate::ir::serialize(&random_program(seed)).unwrap();
            let b = crate::ir::serialize(&random_program(seed)).unwrap();
            assert_eq!(a, b);
        }
    }
}
