//! Map tiling: splits every iteration dimension of a map into tiles of a
//! fixed size, adding an outer tile map around the original one.

use std::collections::BTreeSet;

use crate::ir::{Edge, MapParam, NodeKind, Program};
use crate::symexpr::{RangeDim, SymExpr};

use super::{BugFlag, ChangeSet, Site, TransformationInstance, XformError, XformKind};

pub fn match_sites(program: &Program) -> Vec<TransformationInstance> {
    let mut out = Vec::new();
    for state in &program.states {
        for node in &state.nodes {
            if let NodeKind::MapEntry { .. } = node.kind {
                let Some(exit) = state.exit_of(node.id) else { continue };
                out.push(TransformationInstance {
                    kind: XformKind::MapTiling,
                    site: Site {
                        nodes: vec![node.id, exit],
                        states: vec![state.id],
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
    let tile = instance.tile_size();
    if tile < 1 {
        return Err(XformError::InvalidParameter(format!(
            "tile_size must be >= 1, got {tile}"
        )));
    }
    let [entry_id, exit_id] = instance.site.nodes[..] else {
        return Err(XformError::UnknownElement("tiling site needs entry and exit".into()));
    };
    let mut p = program.clone();
    let state_id = p
        .state_of_node(entry_id)
        .ok_or_else(|| XformError::UnknownElement(format!("node {entry_id} not in program")))?;
    {
        let state = p.state(state_id).unwrap();
        let ok = matches!(
            state.node(entry_id).map(|n| &n.kind),
            Some(NodeKind::MapEntry { .. })
        ) && matches!(
            state.node(exit_id).map(|n| &n.kind),
            Some(NodeKind::MapExit { entry }) if *entry == entry_id
        );
        if !ok {
            return Err(XformError::SiteStale(format!(
                "{entry_id}/{exit_id} is no longer a map entry/exit pair"
            )));
        }
    }

    let params = match &p.state(state_id).unwrap().node(entry_id).unwrap().kind {
        NodeKind::MapEntry { params } => params.clone(),
        _ => unreachable!(),
    };

    // Fresh tile variable names, clash-free program-wide.
    let mut taken: BTreeSet<String> = p.symbols.keys().cloned().collect();
    taken.extend(p.containers.keys().cloned());
    for state in &p.states {
        for node in &state.nodes {
            if let NodeKind::MapEntry { params } = &node.kind {
                taken.extend(params.iter().map(|q| q.var.clone()));
            }
        }
    }
    let mut tile_params = Vec::new();
    let mut inner_params = Vec::new();
    for param in &params {
        let mut tile_var = format!("{}_t", param.var);
        while taken.contains(&tile_var) {
            tile_var.push('_');
        }
        taken.insert(tile_var.clone());
        let stride = param.range.step.clone().mul(tile);
        tile_params.push(MapParam {
            var: tile_var.clone(),
            range: RangeDim {
                begin: param.range.begin.clone(),
                end: param.range.end.clone(),
                step: stride.clone().simplify(),
            },
        });
        let tile_end = SymExpr::sym(&tile_var).add(stride);
        let inner_end = match instance.bug {
            // `<=` comparison instead of `<`: one extra iteration per tile.
            Some(BugFlag::TilingOffByOne) => {
                tile_end.min(param.range.end.clone()).add(1).simplify()
            }
            // Missing bound guard: the last tile overruns non-multiples.
            Some(BugFlag::TilingNoBoundGuard) => tile_end.simplify(),
            _ => tile_end.min(param.range.end.clone()).simplify(),
        };
        inner_params.push(MapParam {
            var: param.var.clone(),
            range: RangeDim {
                begin: SymExpr::sym(&tile_var),
                end: inner_end,
                step: param.range.step.clone(),
            },
        });
    }

    let tile_entry = p.fresh_node_id();
    let tile_exit = p.fresh_node_id();
    let mut change = ChangeSet::default();
    change.added.insert(tile_entry);
    change.added.insert(tile_exit);
    change.modified.insert(entry_id);
    change.modified.insert(exit_id);
    change.touched_states.insert(state_id);

    let mut new_edges: Vec<Edge> = Vec::new();
    {
        let outer_scope = p.state(state_id).unwrap().node(entry_id).unwrap().scope;
        let state = p.state_mut(state_id).unwrap();
        // Rewire inputs through the tile entry, duplicating the memlets.
        let in_edge_ids: Vec<_> = state.in_edges(entry_id).map(|e| e.id).collect();
        for eid in in_edge_ids {
            let edge = state.edges.iter_mut().find(|e| e.id == eid).unwrap();
            change.modified.insert(edge.src);
            edge.dst = tile_entry;
            new_edges.push(Edge {
                id: crate::ir::EdgeId(0), // fixed up below
                src: tile_entry,
                src_conn: None,
                dst: entry_id,
                dst_conn: None,
                memlet: edge.memlet.clone(),
            });
        }
        let out_edge_ids: Vec<_> = state.out_edges(exit_id).map(|e| e.id).collect();
        for eid in out_edge_ids {
            let edge = state.edges.iter_mut().find(|e| e.id == eid).unwrap();
            change.modified.insert(edge.dst);
            edge.src = tile_exit;
            new_edges.push(Edge {
                id: crate::ir::EdgeId(0),
                src: exit_id,
                src_conn: None,
                dst: tile_exit,
                dst_conn: None,
                memlet: edge.memlet.clone(),
            });
        }
        state.nodes.push(crate::ir::Node {
            id: tile_entry,
            scope: outer_scope,
            kind: NodeKind::MapEntry {
                params: tile_params,
            },
        });
        state.nodes.push(crate::ir::Node {
            id: tile_exit,
            scope: outer_scope,
            kind: NodeKind::MapExit { entry: tile_entry },
        });
        // The original map now nests inside the tile map.
        state.node_mut(entry_id).unwrap().scope = Some(tile_entry);
        state.node_mut(exit_id).unwrap().scope = Some(tile_entry);
        if let NodeKind::MapEntry { params } = &mut state.node_mut(entry_id).unwrap().kind {
            *params = inner_params;
        }
    }
    for mut edge in new_edges {
        edge.id = p.fresh_edge_id();
        p.state_mut(state_id).unwrap().edges.push(edge);
    }
    p.sort_elements();
    Ok((p, change))
}
