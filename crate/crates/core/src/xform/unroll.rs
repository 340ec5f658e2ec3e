//! Loop unrolling for canonical constant-trip state-machine loops: the guard
//! state and its edges are replaced by a chain of body instances with the
//! iteration symbol assigned per instance.

use std::collections::BTreeMap;

use crate::ir::{BoolExpr, CmpOp, InterstateEdge, NodeId, Program, StateGraph, StateId};
use crate::symexpr::SymExpr;

use super::{BugFlag, ChangeSet, Site, TransformationInstance, XformError, XformKind};

/// Canonical counted loop recognized around a guard state.
pub struct LoopShape {
    pub guard: StateId,
    pub body: StateId,
    pub pred: StateId,
    pub exit_dst: Option<StateId>,
    pub var: String,
    pub init: i64,
    pub end: i64,
    pub step: i64,
    pub init_edge: crate::ir::EdgeId,
    pub enter_edge: crate::ir::EdgeId,
    pub back_edge: crate::ir::EdgeId,
    pub exit_edge: Option<crate::ir::EdgeId>,
}

impl LoopShape {
    pub fn trip_count(&self) -> i64 {
        if self.step > 0 {
            if self.end <= self.init {
                0
            } else {
                (self.end - self.init + self.step - 1) / self.step
            }
        } else if self.init <= self.end {
            0
        } else {
            let span = self.init - self.end;
            let mag = -self.step;
            (span + mag - 1) / mag
        }
    }
}

/// Recognize the canonical counted loop around a guard state:
/// an init edge assigning `var := c`, an enter edge guarded by `var < c`
/// (or `var > c` for negative steps), a back edge assigning
/// `var := var + step`, and at most one exit edge.
pub fn recognize(program: &Program, guard: StateId) -> Option<LoopShape> {
    let ins: Vec<&InterstateEdge> = program
        .interstate_edges
        .iter()
        .filter(|e| e.dst == guard)
        .collect();
    let outs: Vec<&InterstateEdge> = program
        .interstate_edges
        .iter()
        .filter(|e| e.src == guard)
        .collect();
    if ins.len() != 2 || outs.is_empty() || outs.len() > 2 {
        return None;
    }
    // The guard state itself carries no dataflow.
    if !program.state(guard)?.nodes.is_empty() {
        return None;
    }
    // Enter edge: guard compares var against a constant.
    let (enter, exit): (&InterstateEdge, Option<&InterstateEdge>) = {
        let mut enter = None;
        let mut exit = None;
        for e in &outs {
            match &e.guard {
                BoolExpr::Cmp(CmpOp::Lt | CmpOp::Gt, SymExpr::Sym(_), SymExpr::Const(_))
                    if enter.is_none() =>
                {
                    enter = Some(*e)
                }
                _ => exit = Some(*e),
            }
        }
        (enter?, exit)
    };
    let BoolExpr::Cmp(cmp, SymExpr::Sym(var), SymExpr::Const(end)) = &enter.guard else {
        return None;
    };
    let body = enter.dst;
    if body == guard {
        return None;
    }
    // Back edge: from the body, assigning var := var + step.
    let back = ins
        .iter()
        .find(|e| e.src == body && e.assignments.len() == 1 && e.assignments[0].0 == *var)?;
    let step = match back.assignments[0]
        .1
        .clone()
        .sub(SymExpr::sym(var.clone()))
        .simplify()
    {
        SymExpr::Const(c) => c,
        _ => return None,
    };
    if (step > 0) != (*cmp == CmpOp::Lt) || step == 0 {
        return None;
    }
    // Init edge: the other incoming edge, assigning var := const.
    let init_edge = ins.iter().find(|e| e.id != back.id)?;
    let init = match init_edge.assignments.as_slice() {
        [(name, SymExpr::Const(c))] if name == var => *c,
        _ => return None,
    };
    // The body must loop straight back to the guard.
    let body_outs: Vec<&InterstateEdge> = program
        .interstate_edges
        .iter()
        .filter(|e| e.src == body)
        .collect();
    if body_outs.len() != 1 || body_outs[0].id != back.id {
        return None;
    }
    let body_ins = program
        .interstate_edges
        .iter()
        .filter(|e| e.dst == body)
        .count();
    if body_ins != 1 {
        return None;
    }
    Some(LoopShape {
        guard,
        body,
        pred: init_edge.src,
        exit_dst: exit.map(|e| e.dst),
        var: var.clone(),
        init,
        end: *end,
        step,
        init_edge: init_edge.id,
        enter_edge: enter.id,
        back_edge: back.id,
        exit_edge: exit.map(|e| e.id),
    })
}

pub fn match_sites(program: &Program) -> Vec<TransformationInstance> {
    let mut out = Vec::new();
    for state in &program.states {
        if let Some(shape) = recognize(program, state.id) {
            if shape.trip_count() >= 1 {
                out.push(TransformationInstance {
                    kind: XformKind::LoopUnroll,
                    site: Site {
                        nodes: Vec::new(),
                        states: vec![shape.guard, shape.body],
                    },
                    params: Default::default(),
                    bug: None,
                });
            }
        }
    }
    out
}

pub fn apply(
    instance: &TransformationInstance,
    program: &Program,
) -> Result<(Program, ChangeSet), XformError> {
    let [guard, body] = instance.site.states[..] else {
        return Err(XformError::UnknownElement(
            "unroll site needs guard and body states".into(),
        ));
    };
    for sid in [guard, body] {
        if program.state(sid).is_none() {
            return Err(XformError::UnknownElement(format!("state {sid} not in program")));
        }
    }
    let shape = recognize(program, guard)
        .ok_or_else(|| XformError::SiteStale(format!("{guard} is no longer a loop guard")))?;
    if shape.body != body {
        return Err(XformError::SiteStale(format!(
            "loop body moved from {body} to {}",
            shape.body
        )));
    }
    let trip = shape.trip_count();
    let instances = match instance.bug {
        // Buggy trip handling: negative-step loops get ceil(trip/2) bodies.
        Some(BugFlag::UnrollIgnoresNegativeStep) if shape.step < 0 => (trip + 1) / 2,
        _ => trip,
    };

    let mut p = program.clone();
    let mut change = ChangeSet::default();
    change.touched_states.insert(shape.pred);
    change.touched_states.insert(shape.guard);
    change.touched_states.insert(shape.body);
    if let Some(exit) = shape.exit_dst {
        change.touched_states.insert(exit);
    }
    // The body is replicated: report all its nodes as modified.
    for node in &p.state(shape.body).unwrap().nodes {
        change.modified.insert(node.id);
    }

    // Remove the loop edges and the guard state.
    let drop_edges = [
        Some(shape.init_edge),
        Some(shape.enter_edge),
        Some(shape.back_edge),
        shape.exit_edge,
    ];
    p.interstate_edges
        .retain(|e| !drop_edges.contains(&Some(e.id)));
    p.states.retain(|s| s.id != shape.guard);

    // Body instances: the original body serves iteration 0, clones follow.
    let mut chain: Vec<StateId> = vec![shape.body];
    for k in 1..instances {
        let clone_id = clone_state(&mut p, shape.body, k, &mut change);
        chain.push(clone_id);
    }
    // pred --[var := v_0]--> body_0 --[var := v_1]--> body_1 ... ; the final
    // edge re-establishes the loop's post-value of var.
    let mut prev = shape.pred;
    for (k, state) in chain.iter().enumerate() {
        let value = shape.init + (k as i64) * shape.step;
        p.add_interstate(
            prev,
            *state,
            BoolExpr::True,
            vec![(shape.var.clone(), SymExpr::Const(value))],
        )
        .map_err(|e| XformError::UnknownElement(e.to_string()))?;
        prev = *state;
    }
    if let Some(exit_dst) = shape.exit_dst {
        let final_value = shape.init + trip * shape.step;
        p.add_interstate(
            prev,
            exit_dst,
            BoolExpr::True,
            vec![(shape.var.clone(), SymExpr::Const(final_value))],
        )
        .map_err(|e| XformError::UnknownElement(e.to_string()))?;
    }
    p.sort_elements();
    Ok((p, change))
}

/// Deep-copy a state's dataflow with fresh node/edge ids.
fn clone_state(p: &mut Program, src: StateId, ordinal: i64, change: &mut ChangeSet) -> StateId {
    let template: StateGraph = p.state(src).unwrap().clone();
    let new_id = p.fresh_state_id();
    let mut node_map: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(template.nodes.len());
    for node in &template.nodes {
        let id = p.fresh_node_id();
        node_map.insert(node.id, id);
        change.added.insert(id);
        nodes.push(crate::ir::Node {
            id,
            scope: node.scope,
            kind: node.kind.clone(),
        });
    }
    for node in &mut nodes {
        if let Some(scope) = node.scope {
            node.scope = Some(node_map[&scope]);
        }
        if let crate::ir::NodeKind::MapExit { entry } = &mut node.kind {
            *entry = node_map[entry];
        }
    }
    let mut edges = Vec::with_capacity(template.edges.len());
    for edge in &template.edges {
        edges.push(crate::ir::Edge {
            id: p.fresh_edge_id(),
            src: node_map[&edge.src],
            src_conn: edge.src_conn.clone(),
            dst: node_map[&edge.dst],
            dst_conn: edge.dst_conn.clone(),
            memlet: edge.memlet.clone(),
        });
    }
    let name = format!("{}_unroll{}", template.name, ordinal);
    p.states.push(StateGraph {
        id: new_id,
        name,
        nodes,
        edges,
    });
    change.touched_states.insert(new_id);
    new_id
}
