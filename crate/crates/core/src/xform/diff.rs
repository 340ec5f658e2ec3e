//! Black-box structural diff between two programs built from a common
//! ancestor (shared stable ids).

use std::collections::BTreeMap;

use crate::ir::{Edge, EdgeId, Node, NodeId, Program, StateId};

use super::ChangeSet;

/// Compute the change set purely structurally: nodes present in exactly one
/// program, nodes with unequal attributes, and the endpoints of edges present
/// or changed in exactly one program. Interstate edge changes touch their
/// endpoint states.
pub fn diff(a: &Program, b: &Program) -> ChangeSet {
    let mut change = ChangeSet::default();

    let nodes_a = collect_nodes(a);
    let nodes_b = collect_nodes(b);
    for (id, (state_a, node_a)) in &nodes_a {
        match nodes_b.get(id) {
            None => {
                change.removed.insert(*id);
                change.touched_states.insert(*state_a);
            }
            Some((state_b, node_b)) => {
                let same = node_a.kind == node_b.kind
                    && node_a.scope == node_b.scope
                    && state_a == state_b;
                if !same {
                    change.modified.insert(*id);
                    change.touched_states.insert(*state_a);
                    change.touched_states.insert(*state_b);
                }
            }
        }
    }
    for (id, (state_b, _)) in &nodes_b {
        if !nodes_a.contains_key(id) {
            change.added.insert(*id);
            change.touched_states.insert(*state_b);
        }
    }

    let edges_a = collect_edges(a);
    let edges_b = collect_edges(b);
    let mark_endpoints = |edge: &Edge, nodes: &BTreeMap<NodeId, (StateId, Node)>, change: &mut ChangeSet| {
        for endpoint in [edge.src, edge.dst] {
            // Endpoints already counted as added/removed stay there.
            if !change.added.contains(&endpoint) && !change.removed.contains(&endpoint) {
                change.modified.insert(endpoint);
            }
            if let Some((state, _)) = nodes.get(&endpoint) {
                change.touched_states.insert(*state);
            }
        }
    };
    for (id, (_, edge_a)) in &edges_a {
        match edges_b.get(id) {
            None => mark_endpoints(edge_a, &nodes_a, &mut change),
            Some((_, edge_b)) => {
                if edge_a != edge_b {
                    mark_endpoints(edge_a, &nodes_a, &mut change);
                    mark_endpoints(edge_b, &nodes_b, &mut change);
                }
            }
        }
    }
    for (id, (_, edge_b)) in &edges_b {
        if !edges_a.contains_key(id) {
            mark_endpoints(edge_b, &nodes_b, &mut change);
        }
    }

    // Interstate edges: endpoint states of anything changed.
    let inter_a: BTreeMap<EdgeId, &crate::ir::InterstateEdge> =
        a.interstate_edges.iter().map(|e| (e.id, e)).collect();
    let inter_b: BTreeMap<EdgeId, &crate::ir::InterstateEdge> =
        b.interstate_edges.iter().map(|e| (e.id, e)).collect();
    for (id, edge_a) in &inter_a {
        match inter_b.get(id) {
            None => {
                change.touched_states.insert(edge_a.src);
                change.touched_states.insert(edge_a.dst);
            }
            Some(edge_b) => {
                if edge_a != edge_b {
                    for e in [edge_a, edge_b] {
                        change.touched_states.insert(e.src);
                        change.touched_states.insert(e.dst);
                    }
                }
            }
        }
    }
    for (id, edge_b) in &inter_b {
        if !inter_a.contains_key(id) {
            change.touched_states.insert(edge_b.src);
            change.touched_states.insert(edge_b.dst);
        }
    }

    // States present in exactly one side.
    let states_a: Vec<StateId> = a.states.iter().map(|s| s.id).collect();
    let states_b: Vec<StateId> = b.states.iter().map(|s| s.id).collect();
    for id in &states_a {
        if !states_b.contains(id) {
            change.touched_states.insert(*id);
        }
    }
    for id in &states_b {
        if !states_a.contains(id) {
            change.touched_states.insert(*id);
        }
    }

    change
}

fn collect_nodes(p: &Program) -> BTreeMap<NodeId, (StateId, Node)> {
    let mut out = BTreeMap::new();
    for state in &p.states {
        for node in &state.nodes {
            out.insert(node.id, (state.id, node.clone()));
        }
    }
    out
}

fn collect_edges(p: &Program) -> BTreeMap<EdgeId, (StateId, Edge)> {
    let mut out = BTreeMap::new();
    for state in &p.states {
        for edge in &state.edges {
            out.insert(edge.id, (state.id, edge.clone()));
        }
    }
    out
}
