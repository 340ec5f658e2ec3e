//! Tasklet fusion: inlines a producing tasklet's expression into its single
//! consumer, eliminating the write to the intermediate container when that
//! write is provably unobservable.

use std::collections::BTreeSet;

use crate::ir::{Node, NodeId, NodeKind, Program, ScalarExpr, StateId};

use super::{BugFlag, ChangeSet, Site, TransformationInstance, XformError, XformKind};

struct Pattern {
    state: StateId,
    producer: NodeId,
    access: NodeId,
    consumer: NodeId,
}

fn find_pattern(program: &Program, access: NodeId) -> Option<Pattern> {
    let state_id = program.state_of_node(access)?;
    let state = program.state(state_id)?;
    let node = state.node(access)?;
    node.container()?;
    let ins: Vec<_> = state.in_edges(access).collect();
    let outs: Vec<_> = state.out_edges(access).collect();
    if ins.len() != 1 || outs.len() != 1 {
        return None;
    }
    let (in_edge, out_edge) = (ins[0], outs[0]);
    if in_edge.memlet.as_ref()?.wcr.is_some() {
        return None;
    }
    // Single-element traffic only.
    for memlet in [in_edge.memlet.as_ref()?, out_edge.memlet.as_ref()?] {
        for dim in &memlet.subset.dims {
            if dim.count_sym() != crate::symexpr::SymExpr::Const(1) {
                return None;
            }
        }
    }
    let producer = state.node(in_edge.src)?;
    let consumer = state.node(out_edge.dst)?;
    let same_scope = producer.scope == node.scope && consumer.scope == node.scope;
    if !same_scope {
        return None;
    }
    match (&producer.kind, &consumer.kind) {
        (NodeKind::Tasklet { outlets, .. }, NodeKind::Tasklet { .. }) if outlets.len() == 1 => {}
        _ => return None,
    }
    // The producer writes nothing else.
    if state.out_edges(producer.id).count() != 1 {
        return None;
    }
    Some(Pattern {
        state: state_id,
        producer: producer.id,
        access,
        consumer: consumer.id,
    })
}

pub fn match_sites(program: &Program) -> Vec<TransformationInstance> {
    let mut out = Vec::new();
    for state in &program.states {
        for node in &state.nodes {
            if let Some(pattern) = find_pattern(program, node.id) {
                out.push(TransformationInstance {
                    kind: XformKind::TaskletFusion,
                    site: Site {
                        nodes: vec![pattern.producer, pattern.access, pattern.consumer],
                        states: vec![pattern.state],
                    },
                    params: Default::default(),
                    bug: None,
                });
            }
        }
    }
    out
}

/// References to a container anywhere in the program, excluding the given
/// access node.
fn other_references(program: &Program, container: &str, except: NodeId) -> usize {
    let mut count = 0;
    for state in &program.states {
        for node in &state.nodes {
            if node.id != except && node.container() == Some(container) {
                count += 1;
            }
        }
        for edge in &state.edges {
            if let Some(m) = &edge.memlet {
                if m.container == container && edge.src != except && edge.dst != except {
                    count += 1;
                }
            }
        }
    }
    count
}

pub fn apply(
    instance: &TransformationInstance,
    program: &Program,
) -> Result<(Program, ChangeSet), XformError> {
    let [producer_id, access_id, consumer_id] = instance.site.nodes[..] else {
        return Err(XformError::UnknownElement(
            "fusion site needs producer, access and consumer".into(),
        ));
    };
    for id in [producer_id, access_id, consumer_id] {
        if program.node(id).is_none() {
            return Err(XformError::UnknownElement(format!("node {id} not in program")));
        }
    }
    let pattern = find_pattern(program, access_id)
        .filter(|p| p.producer == producer_id && p.consumer == consumer_id)
        .ok_or_else(|| {
            XformError::SiteStale(format!("{access_id} no longer matches the fusion pattern"))
        })?;

    let mut p = program.clone();
    let mut change = ChangeSet::default();
    change.touched_states.insert(pattern.state);
    change.modified.insert(consumer_id);

    let state = p.state(pattern.state).unwrap();
    let container = state
        .node(access_id)
        .unwrap()
        .container()
        .unwrap()
        .to_string();
    let in_edge = state.in_edges(access_id).next().unwrap().clone();
    let out_edge = state.out_edges(access_id).next().unwrap().clone();
    let consumed_inlet = out_edge
        .dst_conn
        .clone()
        .ok_or_else(|| XformError::SiteStale("consumer edge has no inlet".into()))?;

    let producer_expr = match &state.node(producer_id).unwrap().kind {
        NodeKind::Tasklet { outlets, code, .. } => code
            .assignments
            .get(&outlets[0])
            .cloned()
            .ok_or_else(|| XformError::SiteStale("producer outlet has no code".into()))?,
        _ => unreachable!(),
    };
    let producer_in_edges: Vec<_> = state
        .in_edges(producer_id)
        .cloned()
        .collect::<Vec<_>>();

    // The write to the intermediate may only disappear when nothing else can
    // observe it: the container is transient and referenced nowhere else.
    // The drops-live-write bug skips this check entirely.
    let transient = p
        .containers
        .get(&container)
        .map(|d| d.transient)
        .unwrap_or(false);
    let droppable = match instance.bug {
        Some(BugFlag::FusionDropsLiveWrite) => true,
        _ => transient && other_references(&p, &container, access_id) == 0,
    };

    // Rename producer inlets to avoid clashes with the consumer's.
    let consumer_inlets: BTreeSet<String> = match &p.state(pattern.state).unwrap().node(consumer_id).unwrap().kind
    {
        NodeKind::Tasklet { inlets, .. } => inlets.iter().cloned().collect(),
        _ => unreachable!(),
    };
    let mut used: BTreeSet<String> = consumer_inlets.clone();
    let mut expr = producer_expr;
    let mut routed: Vec<(String, crate::ir::Edge)> = Vec::new();
    for edge in &producer_in_edges {
        let Some(conn) = edge.dst_conn.clone() else { continue };
        let mut renamed = conn.clone();
        while used.contains(&renamed) {
            renamed = format!("f_{renamed}");
        }
        used.insert(renamed.clone());
        expr = substitute_name(&expr, &conn, &ScalarExpr::Name(renamed.clone()));
        routed.push((renamed, edge.clone()));
        change.modified.insert(edge.src);
    }

    {
        let state = p.state_mut(pattern.state).unwrap();
        // Inline into the consumer.
        if let NodeKind::Tasklet { inlets, code, .. } =
            &mut state.node_mut(consumer_id).unwrap().kind
        {
            inlets.retain(|i| i != &consumed_inlet);
            for (renamed, _) in &routed {
                inlets.push(renamed.clone());
            }
            for assigned in code.assignments.values_mut() {
                *assigned = substitute_name(assigned, &consumed_inlet, &expr);
            }
        }
        // Route producer inputs to the consumer.
        state.edges.retain(|e| e.id != out_edge.id);
        change.modified.insert(access_id);
    }
    for (renamed, edge) in &routed {
        let id = p.fresh_edge_id();
        p.state_mut(pattern.state).unwrap().edges.push(crate::ir::Edge {
            id,
            src: edge.src,
            src_conn: edge.src_conn.clone(),
            dst: consumer_id,
            dst_conn: Some(renamed.clone()),
            memlet: edge.memlet.clone(),
        });
    }

    if droppable {
        let state = p.state_mut(pattern.state).unwrap();
        state
            .edges
            .retain(|e| e.id != in_edge.id && !producer_in_edges.iter().any(|pe| pe.id == e.id));
        state
            .nodes
            .retain(|n: &Node| n.id != producer_id && n.id != access_id);
        change.modified.remove(&access_id);
        change.removed.insert(producer_id);
        change.removed.insert(access_id);
        // Transient containers with no remaining references disappear from
        // the table; externally visible ones must survive.
        if transient && other_references(&p, &container, NodeId(u32::MAX)) == 0 {
            p.containers.remove(&container);
        }
    } else {
        // The preserved write is still part of the pattern's footprint.
        change.modified.insert(producer_id);
    }
    p.sort_elements();
    Ok((p, change))
}

fn substitute_name(expr: &ScalarExpr, name: &str, replacement: &ScalarExpr) -> ScalarExpr {
    match expr {
        ScalarExpr::Name(n) if n == name => replacement.clone(),
        ScalarExpr::IntConst(_)
        | ScalarExpr::FloatConst(_)
        | ScalarExpr::BoolConst(_)
        | ScalarExpr::Name(_) => expr.clone(),
        ScalarExpr::Neg(e) => ScalarExpr::Neg(Box::new(substitute_name(e, name, replacement))),
        ScalarExpr::Bin(op, a, b) => ScalarExpr::Bin(
            *op,
            Box::new(substitute_name(a, name, replacement)),
            Box::new(substitute_name(b, name, replacement)),
        ),
        ScalarExpr::Cmp(op, a, b) => ScalarExpr::Cmp(
            *op,
            Box::new(substitute_name(a, name, replacement)),
            Box::new(substitute_name(b, name, replacement)),
        ),
        ScalarExpr::Select(c, a, b) => ScalarExpr::Select(
            Box::new(substitute_name(c, name, replacement)),
            Box::new(substitute_name(a, name, replacement)),
            Box::new(substitute_name(b, name, replacement)),
        ),
    }
}
