//! Programs shipped with the toolkit: verification targets for the built-in
//! transformations and inputs for the test suites.

use crate::ir::{DType, NodeId, Program, StateId, TaskletCode};
use crate::symexpr::{RangeDim, SubsetRange, SymExpr};

fn n() -> SymExpr {
    SymExpr::sym("N")
}

/// Matrix chain multiplication `R = ((A * B) * C) * D` over four `N x N`
/// matrices, computed as three map-nest matmuls with a copy between the first
/// two: `tmp1 = A*B`, `U <- tmp1`, `V = U*C`, `R = V*D`.
pub struct MatrixChain {
    pub program: Program,
    pub state: StateId,
    /// Map entries of the three matmuls, in chain order.
    pub mm_entries: [NodeId; 3],
    /// Map entry of the second matmul (`V = U*C`), the Fig.-style cutout site.
    pub mm2_entry: NodeId,
}

/// Adds one `out[i,j] += a[i,k] * b[k,j]` map nest; returns the map entry.
fn add_matmul(
    p: &mut Program,
    state: StateId,
    acc_a: NodeId,
    a: &str,
    acc_b: NodeId,
    b: &str,
    acc_out: NodeId,
    out: &str,
) -> NodeId {
    let dom = || RangeDim::new(0, n(), 1);
    let (entry, exit) = p
        .add_map(state, None, vec![("i", dom()), ("j", dom()), ("k", dom())])
        .unwrap();
    let t = p
        .add_tasklet(
            state,
            Some(entry),
            &["a", "b"],
            &["o"],
            TaskletCode::parse(&[("o", "a * b")]).unwrap(),
        )
        .unwrap();
    let full = SubsetRange::full(&[n(), n()]);
    p.add_memlet(state, acc_a, None, entry, None, a, full.clone())
        .unwrap();
    p.add_memlet(state, acc_b, None, entry, None, b, full.clone())
        .unwrap();
    let i = SymExpr::sym("i");
    let j = SymExpr::sym("j");
    let k = SymExpr::sym("k");
    p.add_memlet(
        state,
        entry,
        None,
        t,
        Some("a"),
        a,
        SubsetRange::point(&[i.clone(), k.clone()]),
    )
    .unwrap();
    p.add_memlet(
        state,
        entry,
        None,
        t,
        Some("b"),
        b,
        SubsetRange::point(&[k, j.clone()]),
    )
    .unwrap();
    let wcr = crate::ir::Wcr::Sum;
    p.add_edge(
        state,
        t,
        Some("o"),
        exit,
        None,
        Some(crate::ir::Memlet::new(out, SubsetRange::point(&[i, j])).with_wcr(wcr)),
    )
    .unwrap();
    p.add_edge(
        state,
        exit,
        None,
        acc_out,
        None,
        Some(crate::ir::Memlet::new(out, full).with_wcr(wcr)),
    )
    .unwrap();
    entry
}

pub fn matrix_chain() -> MatrixChain {
    let mut p = Program::new();
    p.add_symbol("N").unwrap();
    for name in ["A", "B", "C", "D"] {
        p.add_container(name, DType::F64, vec![n(), n()], false)
            .unwrap();
    }
    for name in ["tmp1", "U", "V"] {
        p.add_container(name, DType::F64, vec![n(), n()], true)
            .unwrap();
    }
    p.add_container("R", DType::F64, vec![n(), n()], false)
        .unwrap();
    let state = p.add_state("chain");
    let acc_a = p.add_access(state, "A").unwrap();
    let acc_b = p.add_access(state, "B").unwrap();
    let acc_tmp1 = p.add_access(state, "tmp1").unwrap();
    let acc_u = p.add_access(state, "U").unwrap();
    let acc_c = p.add_access(state, "C").unwrap();
    let acc_v = p.add_access(state, "V").unwrap();
    let acc_d = p.add_access(state, "D").unwrap();
    let acc_r = p.add_access(state, "R").unwrap();
    let mm1 = add_matmul(&mut p, state, acc_a, "A", acc_b, "B", acc_tmp1, "tmp1");
    // Plain container copy, not a map: keeps exactly three tiling sites.
    p.add_memlet(
        state,
        acc_tmp1,
        None,
        acc_u,
        None,
        "tmp1",
        SubsetRange::full(&[n(), n()]),
    )
    .unwrap();
    let mm2 = add_matmul(&mut p, state, acc_u, "U", acc_c, "C", acc_v, "V");
    let mm3 = add_matmul(&mut p, state, acc_v, "V", acc_d, "D", acc_r, "R");
    MatrixChain {
        program: p,
        state,
        mm_entries: [mm1, mm2, mm3],
        mm2_entry: mm2,
    }
}

/// Scalar chain `y = f(x); z, z2 = g(y); tmp = z * 2; w = h(tmp, y)`. The
/// second (dead) output of `g` keeps `z` from matching tasklet fusion, so the
/// multiply into `tmp` is the only fusion site. All containers have equal
/// volume (scalars), so minimizing the `{y, z}` input configuration of the
/// multiply/h cutout to `{x}` exactly halves it.
pub struct ScalarChain {
    pub program: Program,
    pub state: StateId,
    pub tasklet_mul: NodeId,
    pub tasklet_h: NodeId,
    pub access_tmp: NodeId,
}

pub fn scalar_chain() -> ScalarChain {
    let mut p = Program::new();
    p.add_scalar("x", DType::F64, false).unwrap();
    for name in ["y", "z", "z2", "tmp"] {
        p.add_scalar(name, DType::F64, true).unwrap();
    }
    p.add_scalar("w", DType::F64, false).unwrap();
    let state = p.add_state("chain");
    let acc_x = p.add_access(state, "x").unwrap();
    let acc_y = p.add_access(state, "y").unwrap();
    let acc_z = p.add_access(state, "z").unwrap();
    let acc_z2 = p.add_access(state, "z2").unwrap();
    let acc_tmp = p.add_access(state, "tmp").unwrap();
    let acc_w = p.add_access(state, "w").unwrap();
    let scalar = SubsetRange::scalar;
    let tf = p
        .add_tasklet(state, None, &["a"], &["o"], TaskletCode::parse(&[("o", "a + 1.0")]).unwrap())
        .unwrap();
    let tg = p
        .add_tasklet(
            state,
            None,
            &["a"],
            &["o", "o2"],
            TaskletCode::parse(&[("o", "a * 3.0"), ("o2", "a - 1.0")]).unwrap(),
        )
        .unwrap();
    let tmul = p
        .add_tasklet(state, None, &["a"], &["o"], TaskletCode::parse(&[("o", "a * 2.0")]).unwrap())
        .unwrap();
    let th = p
        .add_tasklet(
            state,
            None,
            &["a", "b"],
            &["o"],
            TaskletCode::parse(&[("o", "a + b")]).unwrap(),
        )
        .unwrap();
    p.add_memlet(state, acc_x, None, tf, Some("a"), "x", scalar()).unwrap();
    p.add_memlet(state, tf, Some("o"), acc_y, None, "y", scalar()).unwrap();
    p.add_memlet(state, acc_y, None, tg, Some("a"), "y", scalar()).unwrap();
    p.add_memlet(state, tg, Some("o"), acc_z, None, "z", scalar()).unwrap();
    p.add_memlet(state, tg, Some("o2"), acc_z2, None, "z2", scalar()).unwrap();
    p.add_memlet(state, acc_z, None, tmul, Some("a"), "z", scalar()).unwrap();
    p.add_memlet(state, tmul, Some("o"), acc_tmp, None, "tmp", scalar()).unwrap();
    p.add_memlet(state, acc_tmp, None, th, Some("a"), "tmp", scalar()).unwrap();
    p.add_memlet(state, acc_y, None, th, Some("b"), "y", scalar()).unwrap();
    p.add_memlet(state, th, Some("o"), acc_w, None, "w", scalar()).unwrap();
    ScalarChain {
        program: p,
        state,
        tasklet_mul: tmul,
        tasklet_h: th,
        access_tmp: acc_tmp,
    }
}

/// A map touching only the first 10 elements of `my_arr` (sized `N`):
/// `out[j] = my_arr[j] * 2` for `j in [0, 10)`.
pub struct FirstTen {
    pub program: Program,
    pub state: StateId,
    pub map_entry: NodeId,
}

pub fn first_ten() -> FirstTen {
    let mut p = Program::new();
    p.add_symbol_constrained("N", Some(10), None).unwrap();
    p.add_container("my_arr", DType::F64, vec![n()], false).unwrap();
    p.add_container("out", DType::F64, vec![SymExpr::Const(10)], false)
        .unwrap();
    let state = p.add_state("head");
    let acc_in = p.add_access(state, "my_arr").unwrap();
    let acc_out = p.add_access(state, "out").unwrap();
    let (entry, exit) = p
        .add_map(state, None, vec![("j", RangeDim::new(0, 10, 1))])
        .unwrap();
    let t = p
        .add_tasklet(
            state,
            Some(entry),
            &["a"],
            &["o"],
            TaskletCode::parse(&[("o", "a * 2.0")]).unwrap(),
        )
        .unwrap();
    let j = SymExpr::sym("j");
    p.add_memlet(
        state,
        acc_in,
        None,
        entry,
        None,
        "my_arr",
        SubsetRange::new(vec![RangeDim::new(0, 10, 1)]),
    )
    .unwrap();
    p.add_memlet(state, entry, None, t, Some("a"), "my_arr", SubsetRange::point(&[j.clone()]))
        .unwrap();
    p.add_memlet(state, t, Some("o"), exit, None, "out", SubsetRange::point(&[j]))
        .unwrap();
    p.add_memlet(
        state,
        exit,
        None,
        acc_out,
        None,
        "out",
        SubsetRange::new(vec![RangeDim::new(0, 10, 1)]),
    )
    .unwrap();
    FirstTen {
        program: p,
        state,
        map_entry: entry,
    }
}

/// State-machine loop counting down `i = 4, 3, 2, 1` (exclusive end 0, step
/// -1), writing `out[i-1] = src[i-1] * 2 + i` each iteration, then summing
/// `out` into a result scalar downstream.
pub struct CountdownLoop {
    pub program: Program,
    pub guard_state: StateId,
    pub body_state: StateId,
}

pub fn countdown_loop() -> CountdownLoop {
    let mut p = Program::new();
    p.add_container("src", DType::I64, vec![SymExpr::Const(4)], false)
        .unwrap();
    p.add_container("out", DType::I64, vec![SymExpr::Const(4)], false)
        .unwrap();
    p.add_scalar("total", DType::I64, false).unwrap();
    let pre = p.add_state("pre");
    let body = p.add_state("body");
    let post = p.add_state("post");
    let acc_src = p.add_access(body, "src").unwrap();
    let acc_out = p.add_access(body, "out").unwrap();
    let t = p
        .add_tasklet(
            body,
            None,
            &["s"],
            &["o"],
            TaskletCode::parse(&[("o", "s * 2 + i")]).unwrap(),
        )
        .unwrap();
    let i = SymExpr::sym("i");
    let idx = SubsetRange::point(&[i.clone().sub(1)]);
    p.add_memlet(body, acc_src, None, t, Some("s"), "src", idx.clone())
        .unwrap();
    p.add_memlet(body, t, Some("o"), acc_out, None, "out", idx).unwrap();
    // Downstream read of `out`: reduce into `total`.
    let acc_out2 = p.add_access(post, "out").unwrap();
    let acc_total = p.add_access(post, "total").unwrap();
    let (entry, exit) = p
        .add_map(post, None, vec![("q", RangeDim::new(0, 4, 1))])
        .unwrap();
    let tr = p
        .add_tasklet(
            post,
            Some(entry),
            &["a"],
            &["o"],
            TaskletCode::parse(&[("o", "a")]).unwrap(),
        )
        .unwrap();
    let q = SymExpr::sym("q");
    p.add_memlet(post, acc_out2, None, entry, None, "out", SubsetRange::full(&[4.into()]))
        .unwrap();
    p.add_memlet(post, entry, None, tr, Some("a"), "out", SubsetRange::point(&[q]))
        .unwrap();
    p.add_edge(
        post,
        tr,
        Some("o"),
        exit,
        None,
        Some(crate::ir::Memlet::new("total", SubsetRange::scalar()).with_wcr(crate::ir::Wcr::Sum)),
    )
    .unwrap();
    p.add_edge(
        post,
        exit,
        None,
        acc_total,
        None,
        Some(crate::ir::Memlet::new("total", SubsetRange::scalar()).with_wcr(crate::ir::Wcr::Sum)),
    )
    .unwrap();
    let handle = p.add_loop(pre, body, Some(post), "i", 4, 0, -1).unwrap();
    CountdownLoop {
        program: p,
        guard_state: handle.guard_state,
        body_state: body,
    }
}

/// Two-state fusion fixture: `tmp = x * 2; w = tmp + 1` with `tmp` read again
/// in a later state (`live` = true) or with the later state reading `w`
/// instead (`tmp` is then a dead intermediate).
pub struct FusionFixture {
    pub program: Program,
    pub compute_state: StateId,
    pub tasklet_mul: NodeId,
    pub access_tmp: NodeId,
    pub tasklet_add: NodeId,
}

pub fn fusion_chain(live_intermediate: bool) -> FusionFixture {
    let mut p = Program::new();
    p.add_scalar("x", DType::F64, false).unwrap();
    p.add_scalar("tmp", DType::F64, true).unwrap();
    p.add_scalar("w", DType::F64, false).unwrap();
    p.add_scalar("r", DType::F64, false).unwrap();
    let s0 = p.add_state("compute");
    let s1 = p.add_state("consume");
    p.add_interstate(s0, s1, crate::ir::BoolExpr::True, Vec::<(String, SymExpr)>::new())
        .unwrap();
    let scalar = SubsetRange::scalar;
    let acc_x = p.add_access(s0, "x").unwrap();
    let acc_tmp = p.add_access(s0, "tmp").unwrap();
    let acc_w = p.add_access(s0, "w").unwrap();
    let t1 = p
        .add_tasklet(s0, None, &["a"], &["o"], TaskletCode::parse(&[("o", "a * 2.0")]).unwrap())
        .unwrap();
    let t2 = p
        .add_tasklet(s0, None, &["a"], &["o"], TaskletCode::parse(&[("o", "a + 1.0")]).unwrap())
        .unwrap();
    p.add_memlet(s0, acc_x, None, t1, Some("a"), "x", scalar()).unwrap();
    p.add_memlet(s0, t1, Some("o"), acc_tmp, None, "tmp", scalar()).unwrap();
    p.add_memlet(s0, acc_tmp, None, t2, Some("a"), "tmp", scalar()).unwrap();
    p.add_memlet(s0, t2, Some("o"), acc_w, None, "w", scalar()).unwrap();
    // Later state: consume either the intermediate or the proper output.
    let source = if live_intermediate { "tmp" } else { "w" };
    let acc_src = p.add_access(s1, source).unwrap();
    let acc_r = p.add_access(s1, "r").unwrap();
    let t3 = p
        .add_tasklet(s1, None, &["a"], &["o"], TaskletCode::parse(&[("o", "a * 5.0")]).unwrap())
        .unwrap();
    p.add_memlet(s1, acc_src, None, t3, Some("a"), source, scalar()).unwrap();
    p.add_memlet(s1, t3, Some("o"), acc_r, None, "r", scalar()).unwrap();
    FusionFixture {
        program: p,
        compute_state: s0,
        tasklet_mul: t1,
        access_tmp: acc_tmp,
        tasklet_add: t2,
    }
}

/// Branch-gated pair for the coverage experiment: the returned programs agree
/// except on the doubly-guarded path `xs[0] > 0.9 && xs[1] > 0.9`.
pub fn branch_gate(bad_value: f64) -> Program {
    let mut p = Program::new();
    p.add_container("xs", DType::F64, vec![2.into()], false).unwrap();
    p.add_scalar("out", DType::F64, false).unwrap();
    let s = p.add_state("gate");
    let acc_xs = p.add_access(s, "xs").unwrap();
    let acc_out = p.add_access(s, "out").unwrap();
    let code = format!("select(a > 0.9, select(b > 0.9, {bad_value:?}, 1.0), 1.0)");
    let t = p
        .add_tasklet(
            s,
            None,
            &["a", "b"],
            &["o"],
            TaskletCode::parse(&[("o", &code)]).unwrap(),
        )
        .unwrap();
    p.add_memlet(s, acc_xs, None, t, Some("a"), "xs", SubsetRange::point(&[0.into()]))
        .unwrap();
    p.add_memlet(s, acc_xs, None, t, Some("b"), "xs", SubsetRange::point(&[1.into()]))
        .unwrap();
    p.add_memlet(s, t, Some("o"), acc_out, None, "out", SubsetRange::scalar())
        .unwrap();
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate;

    #[test]
    fn all_fixtures_validate_clean() {
        for (name, program) in [
            ("matrix_chain", matrix_chain().program),
            ("scalar_chain", scalar_chain().program),
            ("first_ten", first_ten().program),
            ("countdown_loop", countdown_loop().program),
            ("fusion_live", fusion_chain(true).program),
            ("fusion_dead", fusion_chain(false).program),
            ("branch_gate", branch_gate(111.0)),
        ] {
            let diags = validate(&program);
            assert!(diags.is_empty(), "{name}: {diags:?}");
        }
    }

    #[test]
    fn matrix_chain_shape() {
        let fix = matrix_chain();
        let state = fix.program.state(fix.state).unwrap();
        let accesses = state
            .nodes
            .iter()
            .filter(|n| n.container().is_some())
            .count();
        assert_eq!(accesses, 8);
        assert_eq!(fix.program.containers.len(), 8);
    }
}
