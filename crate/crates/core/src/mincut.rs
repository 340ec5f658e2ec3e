//! Minimum input-flow cut: reformulates shrinking a cutout's input
//! configuration as a minimum s-t cut over the dataflow graph, with edge
//! capacities given by moved data volumes.
//!
//! Preparation follows the recipe: a dummy source `S` feeds every source
//! node and every externally visible data node (capacity = container size),
//! incoming edges of the cutout's input-configuration data nodes redirect to
//! a dummy sink `T` (capacity = moved volume), cutout-leaving edges whose
//! destination can loop back become free `S -> T` edges, the cutout itself is
//! removed, and all remaining data-node outputs get infinite capacity so cuts
//! happen before data nodes, never across a dependency.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::cutout::{extract_from_nodes, Cutout, CutoutError};
use crate::ir::{NodeId, Program, StateId};
use crate::symexpr::EvalError;

/// Sentinel for unbounded capacity; never saturated because every source
/// edge is finite.
pub const INF_CAPACITY: u64 = u64::MAX / 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowNode {
    Source,
    Sink,
    /// A dataflow node of the original program.
    Orig(NodeId),
}

#[derive(Debug, Clone)]
pub struct FlowEdge {
    pub src: usize,
    pub dst: usize,
    pub capacity: u64,
    /// Original dataflow edge this capacity came from, when any.
    pub origin: Option<crate::ir::EdgeId>,
}

/// Capacity-annotated graph with dummy source and sink.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<FlowEdge>,
    pub source: usize,
    pub sink: usize,
}

#[derive(Debug, Error)]
pub enum MinCutError {
    #[error("capacity not concretizable: {0}")]
    UnboundSymbol(#[from] EvalError),
    #[error(transparent)]
    Cutout(#[from] CutoutError),
}

/// Result of solving the minimum input-flow cut.
#[derive(Debug, Clone)]
pub struct CutResult {
    /// Maximum S-T flow = minimum cut value.
    pub flow: u64,
    /// Original nodes on the source side of the cut.
    pub source_side: BTreeSet<NodeId>,
    /// Original nodes on the sink side.
    pub sink_side: BTreeSet<NodeId>,
    /// Nodes the cutout gets extended by (sink side, able to reach T).
    pub extension: BTreeSet<NodeId>,
    /// Input configuration of the extended cutout (cutout coordinates).
    pub new_input_configuration: Vec<(String, crate::symexpr::SubsetRange)>,
    /// The extended cutout; equals a re-extraction of the original when the
    /// extension does not strictly reduce input volume.
    pub extended: Cutout,
    /// True when the extension won and replaced the original cutout.
    pub extended_won: bool,
    pub old_input_volume: u64,
    pub new_input_volume: u64,
}

/// Prepare the flow network for a cutout of `program` under a concrete
/// symbol binding.
pub fn prepare(
    program: &Program,
    cutout: &Cutout,
    binding: &BTreeMap<String, i64>,
) -> Result<FlowNetwork, MinCutError> {
    let cut_nodes: BTreeSet<NodeId> = cutout.origin_nodes.values().copied().collect();

    // Base graph over top-level units: map nests condense into their
    // outermost entry, so every remaining memlet is iteration-variable-free
    // and its moved volume concretizes under the binding. Cross-state carry
    // edges link writes to later reads of the same container.
    let mut unit_of: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    for state in &program.states {
        for node in &state.nodes {
            let mut cur = node.id;
            loop {
                let n = state.node(cur).unwrap();
                let parent = match n.kind {
                    crate::ir::NodeKind::MapExit { entry } => {
                        state.node(entry).and_then(|e| e.scope).or(Some(entry))
                    }
                    _ => n.scope,
                };
                match parent {
                    Some(p) if p != cur => cur = p,
                    _ => break,
                }
            }
            unit_of.insert(node.id, cur);
        }
    }
    let mut index: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut nodes: Vec<FlowNode> = vec![FlowNode::Source, FlowNode::Sink];
    let source = 0usize;
    let sink = 1usize;
    for state in &program.states {
        for node in &state.nodes {
            if unit_of[&node.id] == node.id {
                index.insert(node.id, nodes.len());
                nodes.push(FlowNode::Orig(node.id));
            }
        }
    }
    let mut edges: Vec<FlowEdge> = Vec::new();
    for state in &program.states {
        for edge in &state.edges {
            let (u, v) = (unit_of[&edge.src], unit_of[&edge.dst]);
            if u == v {
                continue;
            }
            let capacity = match &edge.memlet {
                Some(m) => m.subset.volume(binding)?,
                None => 0,
            };
            edges.push(FlowEdge {
                src: index[&u],
                dst: index[&v],
                capacity,
                origin: Some(edge.id),
            });
        }
    }
    add_carry_edges(program, &index, &mut edges, binding)?;
    // Loop-back reachability is decided on the unmodified program graph
    // (minus the cutout nodes), before any S/T surgery rewires it.
    let base_edges = edges.clone();

    let container_size = |name: &str| -> Result<u64, MinCutError> {
        let desc = &program.containers[name];
        let mut total: u64 = 1;
        for e in &desc.shape {
            let v = e.eval(binding)?;
            total = total.saturating_mul(v.max(0) as u64);
        }
        Ok(total)
    };

    // Dummy source: zero-in-degree nodes. Data nodes cost their container
    // size; computation sources are free to recompute.
    let has_in: BTreeSet<usize> = edges.iter().map(|e| e.dst).collect();
    for (nid, idx) in &index {
        if has_in.contains(idx) {
            continue;
        }
        let (_, node) = program.node(*nid).unwrap();
        let capacity = match node.container() {
            Some(c) => container_size(c)?,
            None => 0,
        };
        edges.push(FlowEdge {
            src: source,
            dst: *idx,
            capacity,
            origin: None,
        });
    }

    // Externally visible data nodes: sampled directly from S at container
    // size; their other inputs become uncuttable.
    for state in &program.states {
        for node in &state.nodes {
            let Some(container) = node.container() else { continue };
            if program.containers[container].transient {
                continue;
            }
            let idx = index[&node.id];
            let size = container_size(container)?;
            let mut found = false;
            for e in edges.iter_mut() {
                if e.dst == idx && e.src == source {
                    e.capacity = size;
                    found = true;
                } else if e.dst == idx {
                    e.capacity = INF_CAPACITY;
                }
            }
            if !found {
                edges.push(FlowEdge {
                    src: source,
                    dst: idx,
                    capacity: size,
                    origin: None,
                });
            }
        }
    }

    // Incoming edges of the cutout's input-configuration data nodes drain
    // into the sink at their moved volume.
    let input_names: BTreeSet<&str> = cutout
        .input_configuration
        .iter()
        .map(|(n, _)| n.as_str())
        .collect();
    let input_data_nodes: BTreeSet<usize> = cut_nodes
        .iter()
        .filter_map(|nid| {
            let (_, node) = program.node(*nid)?;
            let c = node.container()?;
            // Only access nodes that are themselves top-level units.
            (input_names.contains(c) && unit_of[nid] == *nid).then(|| index[nid])
        })
        .collect();
    for e in edges.iter_mut() {
        if input_data_nodes.contains(&e.dst) {
            e.dst = sink;
        }
    }

    // Edges leaving the cutout: loop-backs become free S->T edges, everything
    // else re-sources at T. Loop-back reachability is tested in the program
    // graph minus the cutout nodes.
    let cut_indices: BTreeSet<usize> = cut_nodes.iter().map(|n| index[&unit_of[n]]).collect();
    let reaches_cut = reachability_to_set(&nodes, &base_edges, &cut_indices);
    for e in edges.iter_mut() {
        if e.src == source || e.dst == sink {
            continue;
        }
        if cut_indices.contains(&e.src) && !cut_indices.contains(&e.dst) {
            if reaches_cut[e.dst] {
                e.src = source;
                e.dst = sink;
                e.capacity = 0;
            } else {
                e.src = sink;
            }
        }
    }

    // Remove the cutout and its remaining incident edges.
    edges.retain(|e| !cut_indices.contains(&e.src) && !cut_indices.contains(&e.dst));

    // Cuts happen before data nodes: remaining data-node outputs become
    // infinite. Edges already drained into T keep their volume (they are the
    // sampled input itself).
    for e in edges.iter_mut() {
        if e.dst == sink || e.src == source || e.src == sink {
            continue;
        }
        if let FlowNode::Orig(nid) = nodes[e.src] {
            let is_data = program
                .node(nid)
                .map(|(_, n)| n.container().is_some())
                .unwrap_or(false);
            if is_data {
                e.capacity = INF_CAPACITY;
            }
        }
    }

    Ok(FlowNetwork {
        nodes,
        edges,
        source,
        sink,
    })
}

/// Cross-state data carries: a written access node feeds every later read
/// access node of the same container. Capacity is the container size, turned
/// infinite by the data-node rule anyway.
fn add_carry_edges(
    program: &Program,
    index: &BTreeMap<NodeId, usize>,
    edges: &mut Vec<FlowEdge>,
    binding: &BTreeMap<String, i64>,
) -> Result<(), MinCutError> {
    // Interstate reachability closure over states.
    let state_ids: Vec<StateId> = program.states.iter().map(|s| s.id).collect();
    let mut reach: BTreeMap<StateId, BTreeSet<StateId>> = BTreeMap::new();
    for sid in &state_ids {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([*sid]);
        while let Some(s) = queue.pop_front() {
            for (_, e) in program.interstate_out(s) {
                if seen.insert(e.dst) {
                    queue.push_back(e.dst);
                }
            }
        }
        reach.insert(*sid, seen);
    }
    let mut writes: Vec<(StateId, NodeId, String)> = Vec::new();
    let mut reads: Vec<(StateId, NodeId, String)> = Vec::new();
    for state in &program.states {
        for node in &state.nodes {
            let Some(container) = node.container() else { continue };
            if state.in_edges(node.id).next().is_some() {
                writes.push((state.id, node.id, container.to_string()));
            }
            if state.out_edges(node.id).next().is_some() {
                reads.push((state.id, node.id, container.to_string()));
            }
        }
    }
    for (ws, wn, wc) in &writes {
        for (rs, rn, rc) in &reads {
            if wc != rc || wn == rn {
                continue;
            }
            if reach[ws].contains(rs) {
                let desc = &program.containers[wc];
                let mut size: u64 = 1;
                for e in &desc.shape {
                    size = size.saturating_mul(e.eval(binding)?.max(0) as u64);
                }
                edges.push(FlowEdge {
                    src: index[wn],
                    dst: index[rn],
                    capacity: size,
                    origin: None,
                });
            }
        }
    }
    Ok(())
}

/// Which nodes can reach the given set (paths may not pass through it).
fn reachability_to_set(nodes: &[FlowNode], edges: &[FlowEdge], set: &BTreeSet<usize>) -> Vec<bool> {
    let mut out = vec![false; nodes.len()];
    // Reverse BFS from the set.
    let mut queue: VecDeque<usize> = set.iter().copied().collect();
    let mut seen: BTreeSet<usize> = set.clone();
    while let Some(idx) = queue.pop_front() {
        for e in edges {
            if e.dst == idx && !seen.contains(&e.src) {
                // The path may not run through the set itself.
                if !set.contains(&e.src) {
                    out[e.src] = true;
                    seen.insert(e.src);
                    queue.push_back(e.src);
                }
            }
        }
    }
    out
}

/// Exact maximum flow via shortest augmenting paths (Edmonds-Karp), plus the
/// source side of the induced minimum cut (residual reachability from `s`).
pub fn edmonds_karp(
    node_count: usize,
    edges: &[(usize, usize, u64)],
    s: usize,
    t: usize,
) -> (u64, Vec<bool>) {
    // Adjacency with paired residual edges.
    let mut heads: Vec<Vec<usize>> = vec![Vec::new(); node_count];
    let mut to: Vec<usize> = Vec::with_capacity(edges.len() * 2);
    let mut cap: Vec<u64> = Vec::with_capacity(edges.len() * 2);
    for (u, v, c) in edges {
        heads[*u].push(to.len());
        to.push(*v);
        cap.push(*c);
        heads[*v].push(to.len());
        to.push(*u);
        cap.push(0);
    }
    let mut flow = 0u64;
    loop {
        // BFS for the shortest augmenting path.
        let mut parent_edge: Vec<Option<usize>> = vec![None; node_count];
        let mut visited = vec![false; node_count];
        visited[s] = true;
        let mut queue = VecDeque::from([s]);
        'bfs: while let Some(u) = queue.pop_front() {
            for &e in &heads[u] {
                let v = to[e];
                if !visited[v] && cap[e] > 0 {
                    visited[v] = true;
                    parent_edge[v] = Some(e);
                    if v == t {
                        break 'bfs;
                    }
                    queue.push_back(v);
                }
            }
        }
        if !visited[t] {
            // Min-cut partition: residual reachability from s.
            return (flow, visited);
        }
        // Bottleneck along the path.
        let mut bottleneck = u64::MAX;
        let mut v = t;
        while v != s {
            let e = parent_edge[v].unwrap();
            bottleneck = bottleneck.min(cap[e]);
            v = to[e ^ 1];
        }
        let mut v = t;
        while v != s {
            let e = parent_edge[v].unwrap();
            cap[e] -= bottleneck;
            cap[e ^ 1] += bottleneck;
            v = to[e ^ 1];
        }
        flow += bottleneck;
    }
}

/// Maximum flow over a prepared network; partition in original node ids.
pub fn max_flow(net: &FlowNetwork) -> (u64, BTreeSet<NodeId>, BTreeSet<NodeId>) {
    let edges: Vec<(usize, usize, u64)> = net
        .edges
        .iter()
        .map(|e| (e.src, e.dst, e.capacity))
        .collect();
    let (flow, s_side) = edmonds_karp(net.nodes.len(), &edges, net.source, net.sink);
    let mut source_side = BTreeSet::new();
    let mut sink_side = BTreeSet::new();
    for (idx, node) in net.nodes.iter().enumerate() {
        if let FlowNode::Orig(nid) = node {
            if s_side[idx] {
                source_side.insert(*nid);
            } else {
                sink_side.insert(*nid);
            }
        }
    }
    (flow, source_side, sink_side)
}

/// Solve the full minimum input-flow cut for a cutout: prepare, cut, extend
/// and decide.
pub fn solve(
    program: &Program,
    cutout: &Cutout,
    binding: &BTreeMap<String, i64>,
) -> Result<CutResult, MinCutError> {
    let net = prepare(program, cutout, binding)?;
    let (flow, source_side, sink_side) = max_flow(&net);

    // Extension: sink-side nodes that can reach T in the prepared network.
    let sink_reach = {
        let mut set = BTreeSet::new();
        set.insert(net.sink);
        reachability_to_set(&net.nodes, &net.edges, &set)
    };
    let extension: BTreeSet<NodeId> = net
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(idx, n)| match n {
            FlowNode::Orig(nid) if sink_side.contains(nid) && sink_reach[idx] => Some(*nid),
            _ => None,
        })
        .collect();

    let mut seed: BTreeSet<NodeId> = cutout.origin_nodes.values().copied().collect();
    seed.extend(extension.iter().copied());
    let seed_states: BTreeSet<StateId> = cutout.origin_states.values().copied().collect();
    let extended = extract_from_nodes(program, &seed, &seed_states)?;

    let old_input_volume = cutout
        .input_volume(binding)
        .map_err(MinCutError::UnboundSymbol)?;
    let new_input_volume = extended
        .input_volume(binding)
        .map_err(MinCutError::UnboundSymbol)?;
    let extended_won = new_input_volume < old_input_volume && !extension.is_empty();
    let chosen = if extended_won {
        extended.clone()
    } else {
        // Not strictly reduced: the original cutout is used.
        cutout.clone()
    };
    Ok(CutResult {
        flow,
        source_side,
        sink_side,
        extension,
        new_input_configuration: extended.input_configuration.clone(),
        extended: chosen,
        extended_won,
        old_input_volume,
        new_input_volume,
    })
}

/// Extend the cutout along the minimum input-flow cut; returns the original
/// cutout when the extension does not strictly shrink the input volume.
pub fn minimize_inputs(
    program: &Program,
    cutout: &Cutout,
    binding: &BTreeMap<String, i64>,
) -> Result<Cutout, MinCutError> {
    Ok(solve(program, cutout, binding)?.extended)
}

/// Concretization binding: every free symbol of the program set to `value`.
pub fn default_binding(program: &Program, value: i64) -> BTreeMap<String, i64> {
    program
        .symbols
        .keys()
        .map(|k| (k.clone(), value))
        .collect()
}

/// DOT dump of a prepared network with capacities.
pub fn network_dot(net: &FlowNetwork) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "digraph flow {{");
    for (idx, node) in net.nodes.iter().enumerate() {
        let label = match node {
            FlowNode::Source => "S".to_string(),
            FlowNode::Sink => "T".to_string(),
            FlowNode::Orig(nid) => nid.to_string(),
        };
        let _ = writeln!(out, "  {idx} [label=\"{label}\"];");
    }
    for e in &net.edges {
        let cap = if e.capacity >= INF_CAPACITY {
            "inf".to_string()
        } else {
            e.capacity.to_string()
        };
        let _ = writeln!(out, "  {} -> {} [label=\"{cap}\"];", e.src, e.dst);
    }
    let _ = writeln!(out, "}}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutout::extract;
    use crate::fixtures;
    use crate::xform::{apply, match_kind, XformKind};

    #[test]
    fn single_edge_flow() {
        let (flow, s_side) = edmonds_karp(2, &[(0, 1, 5)], 0, 1);
        assert_eq!(flow, 5);
        assert!(s_side[0] && !s_side[1]);
    }

    #[test]
    fn diamond_flow_matches_enumeration() {
        // S=0, a=1, b=2, T=3.
        let edges = [(0, 1, 3), (0, 2, 2), (1, 3, 2), (2, 3, 3), (1, 2, 1)];
        let (flow, _) = edmonds_karp(4, &edges, 0, 3);
        // Frozen from the enumeration oracle: two units via a, two via b,
        // one more along a -> b.
        assert_eq!(flow, brute_force_min_cut(4, &edges, 0, 3));
        assert_eq!(flow, 5);
    }

    /// Brute-force minimum cut: enumerate every S/T partition.
    fn brute_force_min_cut(n: usize, edges: &[(usize, usize, u64)], s: usize, t: usize) -> u64 {
        let mut best = u64::MAX;
        for mask in 0u32..(1 << n) {
            if mask & (1 << s) == 0 || mask & (1 << t) != 0 {
                continue;
            }
            let mut cut = 0u64;
            for (u, v, c) in edges {
                if mask & (1 << u) != 0 && mask & (1 << v) == 0 {
                    cut = cut.saturating_add(*c);
                }
            }
            best = best.min(cut);
        }
        best
    }

    #[test]
    fn random_dags_match_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let n = rng.gen_range(2..=10usize);
            let mut edges: Vec<(usize, usize, u64)> = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.gen_bool(0.45) {
                        edges.push((u, v, rng.gen_range(0..=20)));
                    }
                }
            }
            let (flow, s_side) = edmonds_karp(n, &edges, 0, n - 1);
            let expect = brute_force_min_cut(n, &edges, 0, n - 1);
            assert_eq!(flow, expect, "n={n} edges={edges:?}");
            // The returned partition is itself a cut of that exact value.
            let cut_value: u64 = edges
                .iter()
                .filter(|(u, v, _)| s_side[*u] && !s_side[*v])
                .map(|(_, _, c)| *c)
                .sum();
            assert_eq!(cut_value, flow);
        }
    }

    fn scalar_chain_cutout() -> (crate::ir::Program, Cutout) {
        let fix = fixtures::scalar_chain();
        let site = match_kind(XformKind::TaskletFusion, &fix.program)[0].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        (fix.program, cutout)
    }

    #[test]
    fn chain_network_has_free_loopback_edge() {
        let (program, cutout) = scalar_chain_cutout();
        let net = prepare(&program, &cutout, &BTreeMap::new()).unwrap();
        // y -> g leaves the cutout and g reaches back in via z: S->T at 0.
        assert!(net
            .edges
            .iter()
            .any(|e| e.src == net.source && e.dst == net.sink && e.capacity == 0));
    }

    #[test]
    fn chain_input_space_halves() {
        let (program, cutout) = scalar_chain_cutout();
        let binding = BTreeMap::new();
        assert_eq!(cutout.input_volume(&binding).unwrap(), 2);
        let result = solve(&program, &cutout, &binding).unwrap();
        assert_eq!(result.flow, 1);
        assert!(result.extended_won);
        assert_eq!(result.old_input_volume, 2);
        assert_eq!(result.new_input_volume, 1);
        let inputs: Vec<&str> = result
            .extended
            .input_configuration
            .iter()
            .map(|(n, _)| n.as_str())
            .collect();
        assert_eq!(inputs, vec!["x"]);
        // The side consumer of z is recomputation-irrelevant and must not be
        // pulled into the extension.
        let extended_tasklets = result
            .extended
            .program
            .states
            .iter()
            .flat_map(|s| s.nodes.iter())
            .filter(|n| matches!(n.kind, crate::ir::NodeKind::Tasklet { .. }))
            .count();
        assert_eq!(extended_tasklets, 4); // f, g, mul, h
    }

    #[test]
    fn minimize_inputs_is_idempotent() {
        let (program, cutout) = scalar_chain_cutout();
        let binding = BTreeMap::new();
        let once = minimize_inputs(&program, &cutout, &binding).unwrap();
        let twice = minimize_inputs(&program, &once, &binding).unwrap();
        assert_eq!(once.program, twice.program);
        assert_eq!(once.input_configuration, twice.input_configuration);
    }

    #[test]
    fn matrix_chain_tie_keeps_original() {
        // Extending the second-matmul cutout across the copy swaps input U
        // for tmp1 at identical volume: the original cutout is used.
        let fix = fixtures::matrix_chain();
        let site = match_kind(XformKind::MapTiling, &fix.program)[1].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        let binding = default_binding(&fix.program, 8);
        let result = solve(&fix.program, &cutout, &binding).unwrap();
        // Inputs: U + C + V at 64 each.
        assert_eq!(result.old_input_volume, 3 * 64);
        assert_eq!(result.new_input_volume, 3 * 64);
        assert!(!result.extended_won);
        assert_eq!(
            result.extended.input_configuration,
            cutout.input_configuration
        );
        // The proposed extension was exactly the copy source.
        let tmp1_access = fix
            .program
            .state(fix.state)
            .unwrap()
            .nodes
            .iter()
            .find(|n| n.container() == Some("tmp1"))
            .unwrap()
            .id;
        assert_eq!(result.extension, BTreeSet::from([tmp1_access]));
    }

    #[test]
    fn cutout_fed_by_program_inputs_is_unchanged() {
        // The first matmul reads only external inputs; no extension helps.
        let fix = fixtures::matrix_chain();
        let site = match_kind(XformKind::MapTiling, &fix.program)[0].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        let binding = default_binding(&fix.program, 8);
        let result = solve(&fix.program, &cutout, &binding).unwrap();
        assert!(!result.extended_won);
        assert_eq!(
            result.extended.input_configuration,
            cutout.input_configuration
        );
    }
}
