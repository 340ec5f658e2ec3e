//! Cutout extraction: lifting the subgraph a transformation touches into a
//! standalone program together with its input configuration and system state.
//!
//! The input configuration is everything that may hold data before the cutout
//! runs and can influence its behavior; the system state is everything the
//! cutout writes that can influence the rest of the program or persistent
//! storage. Two rules matter beyond the obvious ones:
//!
//! * wcr writes count as reads as well (the combiner reads prior contents),
//!   which is what puts accumulation targets into the input configuration;
//! * input-configuration analysis runs after system-state containers have
//!   been marked non-transient in the cutout, since those cross its boundary.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Edge, Node, NodeId, NodeKind, Program, StateId};
use crate::symexpr::{Assumptions, Disjointness, SubsetRange, SymExpr};
use crate::xform::ChangeSet;

/// A standalone sub-program with explicit inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cutout {
    pub program: Program,
    /// Cutout node id to original node id.
    pub origin_nodes: BTreeMap<NodeId, NodeId>,
    /// Cutout state id to original state id.
    pub origin_states: BTreeMap<StateId, StateId>,
    /// Containers (with subsets, in cutout coordinates) that may hold data
    /// before the cutout runs and influence it.
    pub input_configuration: Vec<(String, SubsetRange)>,
    /// Containers (with subsets, in cutout coordinates) whose writes can
    /// influence the rest of the program.
    pub system_state: Vec<(String, SubsetRange)>,
    /// Free symbols the cutout takes as input (not assigned inside it).
    pub input_symbols: BTreeSet<String>,
    /// Per-dimension origin of containers that were shrunk to the interval
    /// hull of their accesses, in original coordinates.
    pub shrink_offsets: BTreeMap<String, Vec<SymExpr>>,
    pub warnings: Vec<String>,
}

impl Cutout {
    /// Total input volume under a concrete binding: the sum of input
    /// container subset volumes.
    pub fn input_volume(&self, binding: &BTreeMap<String, i64>) -> Result<u64, crate::symexpr::EvalError> {
        let mut total = 0u64;
        for (_, subset) in &self.input_configuration {
            total = total.saturating_add(subset.volume(binding)?);
        }
        Ok(total)
    }

    /// Map a cutout node id back to the original program.
    pub fn origin_of(&self, node: NodeId) -> Option<NodeId> {
        self.origin_nodes.get(&node).copied()
    }

    /// Map an original node id into the cutout, if present.
    pub fn node_from_origin(&self, original: NodeId) -> Option<NodeId> {
        self.origin_nodes
            .iter()
            .find(|(_, o)| **o == original)
            .map(|(c, _)| *c)
    }

    pub fn state_from_origin(&self, original: StateId) -> Option<StateId> {
        self.origin_states
            .iter()
            .find(|(_, o)| **o == original)
            .map(|(c, _)| *c)
    }

    /// Translate a transformation instance matched on the original program
    /// into cutout coordinates. Fails when the site is not fully contained:
    /// the trap that exposes under-reported change sets.
    pub fn translate_instance(
        &self,
        instance: &crate::xform::TransformationInstance,
    ) -> Result<crate::xform::TransformationInstance, CutoutError> {
        let mut translated = instance.clone();
        translated.site.nodes = instance
            .site
            .nodes
            .iter()
            .map(|n| {
                self.node_from_origin(*n).ok_or_else(|| {
                    CutoutError::UnknownElement(format!("site node {n} is not part of the cutout"))
                })
            })
            .collect::<Result<_, _>>()?;
        translated.site.states = instance
            .site
            .states
            .iter()
            .map(|s| {
                self.state_from_origin(*s).ok_or_else(|| {
                    CutoutError::UnknownElement(format!("site state {s} is not part of the cutout"))
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(translated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CutoutError {
    #[error("unknown element: {0}")]
    UnknownElement(String),
    #[error("empty change set")]
    EmptyChangeSet,
}

/// Extract the cutout around a change set.
pub fn extract(program: &Program, change: &ChangeSet) -> Result<Cutout, CutoutError> {
    let nodes = change.extraction_nodes();
    if nodes.is_empty() && change.touched_states.is_empty() {
        return Err(CutoutError::EmptyChangeSet);
    }
    for id in &nodes {
        if program.node(*id).is_none() {
            return Err(CutoutError::UnknownElement(format!(
                "change set references missing node {id}"
            )));
        }
    }
    // Touched states may include states that only exist after the
    // transformation (clones); only the pre-existing ones seed the region.
    let states: BTreeSet<StateId> = change
        .touched_states
        .iter()
        .filter(|s| program.state(**s).is_some())
        .copied()
        .collect();
    if nodes.is_empty() && states.is_empty() {
        return Err(CutoutError::EmptyChangeSet);
    }
    extract_from_nodes(program, &nodes, &states)
}

/// Extraction from an explicit node set (used by extraction proper and by
/// min-cut extension).
pub(crate) fn extract_from_nodes(
    program: &Program,
    seed_nodes: &BTreeSet<NodeId>,
    seed_states: &BTreeSet<StateId>,
) -> Result<Cutout, CutoutError> {
    let closure = closure_nodes(program, seed_nodes);
    let analysis = analyze(program, &closure, seed_states)?;
    build_cutout(program, closure, analysis)
}

/// Scope and data-dependency closure: whole map scopes of any member, plus
/// the access nodes adjacent to every member computation node.
fn closure_nodes(program: &Program, seed: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
    let mut closure: BTreeSet<NodeId> = seed.clone();
    loop {
        let mut grew = false;
        for state in &program.states {
            let members: Vec<&Node> = state
                .nodes
                .iter()
                .filter(|n| closure.contains(&n.id))
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut add: BTreeSet<NodeId> = BTreeSet::new();
            for node in &members {
                // Enclosing scopes, entries and exits.
                let mut cur = node.scope;
                if let NodeKind::MapExit { entry } = node.kind {
                    add.insert(entry);
                }
                while let Some(scope) = cur {
                    add.insert(scope);
                    if let Some(exit) = state.exit_of(scope) {
                        add.insert(exit);
                    }
                    cur = state.node(scope).and_then(|n| n.scope);
                }
                // Whole body of any scope whose entry is included.
                if matches!(node.kind, NodeKind::MapEntry { .. }) {
                    add.extend(state.scope_members(node.id));
                    if let Some(exit) = state.exit_of(node.id) {
                        add.insert(exit);
                    }
                }
                // Direct data dependencies of computation nodes.
                if node.is_computation() {
                    for edge in state.edges.iter() {
                        if edge.src == node.id {
                            if let Some(dst) = state.node(edge.dst) {
                                if dst.container().is_some() {
                                    add.insert(dst.id);
                                }
                            }
                        }
                        if edge.dst == node.id {
                            if let Some(src) = state.node(edge.src) {
                                if src.container().is_some() {
                                    add.insert(src.id);
                                }
                            }
                        }
                    }
                }
            }
            for id in add {
                grew |= closure.insert(id);
            }
        }
        if !grew {
            return closure;
        }
    }
}

struct Analysis {
    region: Vec<StateId>,
    entry: StateId,
    /// p-coordinate hulls of reads/writes per container inside the cutout.
    read_hulls: BTreeMap<String, SubsetRange>,
    write_hulls: BTreeMap<String, SubsetRange>,
    system_state: Vec<(String, SubsetRange)>,
    input_configuration: Vec<(String, SubsetRange)>,
    warnings: Vec<String>,
}

/// An edge is internal to the cutout when both endpoints are in the closure.
fn is_internal(closure: &BTreeSet<NodeId>, edge: &Edge) -> bool {
    closure.contains(&edge.src) && closure.contains(&edge.dst)
}

/// Reads of the cutout in p coordinates: memlets leaving closure access
/// nodes on internal edges, plus wcr write targets.
fn cutout_reads(program: &Program, closure: &BTreeSet<NodeId>) -> Vec<(String, SubsetRange)> {
    let mut out = Vec::new();
    for state in &program.states {
        for edge in &state.edges {
            if !is_internal(closure, edge) {
                continue;
            }
            let Some(memlet) = &edge.memlet else { continue };
            let src_access = state.node(edge.src).and_then(|n| n.container());
            if let Some(container) = src_access {
                out.push((container.to_string(), memlet.subset.clone()));
            }
            if memlet.wcr.is_some() {
                if let Some(container) = state.node(edge.dst).and_then(|n| n.container()) {
                    out.push((container.to_string(), memlet.subset.clone()));
                }
            }
        }
    }
    out
}

/// Writes of the cutout in p coordinates: memlets entering closure access
/// nodes on internal edges. Copy edges write the destination container.
fn cutout_writes(program: &Program, closure: &BTreeSet<NodeId>) -> Vec<(String, SubsetRange)> {
    let mut out = Vec::new();
    for state in &program.states {
        for edge in &state.edges {
            if !is_internal(closure, edge) {
                continue;
            }
            let Some(memlet) = &edge.memlet else { continue };
            if let Some(container) = state.node(edge.dst).and_then(|n| n.container()) {
                out.push((container.to_string(), memlet.subset.clone()));
            }
        }
    }
    out
}

fn hull_of(
    subsets: &[&SubsetRange],
    assumptions: &Assumptions,
) -> Option<SubsetRange> {
    let first = subsets.first()?;
    let rank = first.rank();
    if subsets.iter().any(|s| s.rank() != rank) {
        return None;
    }
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        let mut lo = first.dims[d].begin.clone();
        let mut hi = first.dims[d].end.clone();
        for s in &subsets[1..] {
            let b = &s.dims[d].begin;
            let e = &s.dims[d].end;
            lo = if assumptions.prove_le(b, &lo) {
                b.clone()
            } else if assumptions.prove_le(&lo, b) {
                lo
            } else {
                return None;
            };
            hi = if assumptions.prove_le(&hi, e) {
                e.clone()
            } else if assumptions.prove_le(e, &hi) {
                hi
            } else {
                return None;
            };
        }
        dims.push(crate::symexpr::RangeDim {
            begin: lo.simplify(),
            end: hi.simplify(),
            step: SymExpr::Const(1),
        });
    }
    Some(SubsetRange::new(dims))
}

/// Group subsets per container and compute per-container hulls; containers
/// with an unresolvable hull fall back to their full range.
fn container_hulls(
    program: &Program,
    accesses: &[(String, SubsetRange)],
    assumptions: &Assumptions,
) -> BTreeMap<String, SubsetRange> {
    let mut grouped: BTreeMap<String, Vec<&SubsetRange>> = BTreeMap::new();
    for (name, subset) in accesses {
        grouped.entry(name.clone()).or_default().push(subset);
    }
    grouped
        .into_iter()
        .map(|(name, subsets)| {
            let hull = hull_of(&subsets, assumptions).unwrap_or_else(|| {
                SubsetRange::full(&program.containers[&name].shape)
            });
            (name, hull)
        })
        .collect()
}

fn analyze(
    program: &Program,
    closure: &BTreeSet<NodeId>,
    seed_states: &BTreeSet<StateId>,
) -> Result<Analysis, CutoutError> {
    let assumptions = program.assumptions();
    let mut warnings = Vec::new();

    let mut touched: BTreeSet<StateId> = seed_states.clone();
    for id in closure {
        if let Some(sid) = program.state_of_node(*id) {
            touched.insert(sid);
        }
    }
    if touched.is_empty() {
        return Err(CutoutError::EmptyChangeSet);
    }
    let (entry, region) = state_region(program, &touched);

    let reads = cutout_reads(program, closure);
    let writes = cutout_writes(program, closure);
    let read_hulls = container_hulls(program, &reads, &assumptions);
    let write_hulls = container_hulls(program, &writes, &assumptions);

    // --- System state ---
    let mut system: BTreeMap<String, SubsetRange> = BTreeMap::new();
    // External data analysis: non-transient writes always persist.
    for (name, hull) in &write_hulls {
        if !program.containers[name].transient {
            system.insert(name.clone(), hull.clone());
        }
    }
    // Program-flow analysis: BFS downstream over dataflow and interstate
    // edges; reads outside the cutout overlapping a cutout write add the
    // container.
    for (container, subset) in downstream_reads(program, closure) {
        if system.contains_key(&container) {
            continue;
        }
        if let Some(write_hull) = write_hulls.get(&container) {
            let overlap = write_hull
                .disjoint(&subset, &assumptions)
                .unwrap_or(Disjointness::MayOverlap);
            if overlap == Disjointness::MayOverlap {
                system.insert(container.clone(), write_hull.clone());
            }
        }
    }

    // --- Input configuration ---
    // Boundary-crossing containers count as externally visible from here on.
    let non_transient_in_c = |name: &str| -> bool {
        !program.containers[name].transient || system.contains_key(name)
    };
    let mut inputs: BTreeMap<String, SubsetRange> = BTreeMap::new();
    for (name, hull) in &read_hulls {
        if non_transient_in_c(name) {
            inputs.insert(name.clone(), hull.clone());
        }
    }
    for (container, subset) in upstream_writes(program, closure) {
        if inputs.contains_key(&container) {
            continue;
        }
        if let Some(read_hull) = read_hulls.get(&container) {
            let overlap = read_hull
                .disjoint(&subset, &assumptions)
                .unwrap_or(Disjointness::MayOverlap);
            if overlap == Disjointness::MayOverlap {
                inputs.insert(container.clone(), read_hull.clone());
            }
        }
    }

    // Opaque nodes: warn and force their containers into both sets.
    for state in &program.states {
        for node in &state.nodes {
            if !closure.contains(&node.id) {
                continue;
            }
            if let NodeKind::Opaque {
                label,
                may_have_side_effects,
            } = &node.kind
            {
                if *may_have_side_effects {
                    warnings.push(format!(
                        "opaque node {} (`{label}`) may have side effects; its containers are \
                         forced into the input configuration and system state",
                        node.id
                    ));
                    for edge in state.edges.iter() {
                        if edge.src != node.id && edge.dst != node.id {
                            continue;
                        }
                        if let Some(m) = &edge.memlet {
                            let full =
                                SubsetRange::full(&program.containers[&m.container].shape);
                            inputs.entry(m.container.clone()).or_insert(full.clone());
                            system.entry(m.container.clone()).or_insert(full);
                        }
                    }
                }
            }
        }
    }

    if system.is_empty() {
        warnings.push(
            "empty system state: no write of this cutout can influence the program".to_string(),
        );
    }

    Ok(Analysis {
        region,
        entry,
        read_hulls,
        write_hulls,
        system_state: system.into_iter().collect(),
        input_configuration: inputs.into_iter().collect(),
        warnings,
    })
}

/// Reads reachable strictly after the cutout: dataflow successors within the
/// cutout's states, then everything in states reachable via interstate edges.
fn downstream_reads(program: &Program, closure: &BTreeSet<NodeId>) -> Vec<(String, SubsetRange)> {
    let mut out = Vec::new();
    let mut visited_nodes: BTreeSet<NodeId> = closure.clone();
    let mut full_states: BTreeSet<StateId> = BTreeSet::new();
    let mut state_frontier: VecDeque<StateId> = VecDeque::new();
    // Forward dataflow closure within the starting states.
    let start_states: BTreeSet<StateId> = closure
        .iter()
        .filter_map(|id| program.state_of_node(*id))
        .collect();
    for sid in &start_states {
        let state = program.state(*sid).unwrap();
        let mut queue: VecDeque<NodeId> = state
            .nodes
            .iter()
            .filter(|n| visited_nodes.contains(&n.id))
            .map(|n| n.id)
            .collect();
        while let Some(id) = queue.pop_front() {
            for edge in state.out_edges(id) {
                if visited_nodes.insert(edge.dst) {
                    queue.push_back(edge.dst);
                }
            }
        }
        state_frontier.push_back(*sid);
    }
    // Interstate reachability: a reached state is readable in full.
    let mut seen_interstate: BTreeSet<StateId> = start_states.clone();
    while let Some(sid) = state_frontier.pop_front() {
        for (_, edge) in program.interstate_out(sid) {
            if seen_interstate.insert(edge.dst) {
                full_states.insert(edge.dst);
                state_frontier.push_back(edge.dst);
            } else if !start_states.contains(&edge.dst) {
                full_states.insert(edge.dst);
            }
        }
    }
    // A loop back into a starting state makes that whole state readable too.
    for sid in &seen_interstate {
        if start_states.contains(sid) {
            let reenterable = program.interstate_edges.iter().any(|e| e.dst == *sid);
            if reenterable {
                full_states.insert(*sid);
            }
        }
    }
    for state in &program.states {
        let whole = full_states.contains(&state.id);
        for edge in &state.edges {
            if is_internal(closure, edge) {
                continue;
            }
            let Some(memlet) = &edge.memlet else { continue };
            let src_is_access = state
                .node(edge.src)
                .map(|n| n.container().is_some())
                .unwrap_or(false);
            if !src_is_access {
                continue;
            }
            let read_reached = whole || visited_nodes.contains(&edge.src);
            if read_reached {
                out.push((memlet.container.clone(), memlet.subset.clone()));
            }
            // wcr writes re-read their target.
            if memlet.wcr.is_some() {
                let dst_reached = whole || visited_nodes.contains(&edge.dst);
                if dst_reached {
                    if let Some(c) = state.node(edge.dst).and_then(|n| n.container()) {
                        out.push((c.to_string(), memlet.subset.clone()));
                    }
                }
            }
        }
    }
    out
}

/// Writes that can reach the cutout: reverse dataflow within the starting
/// states, then everything in states that reach them via interstate edges.
fn upstream_writes(program: &Program, closure: &BTreeSet<NodeId>) -> Vec<(String, SubsetRange)> {
    let mut out = Vec::new();
    let mut visited_nodes: BTreeSet<NodeId> = closure.clone();
    let start_states: BTreeSet<StateId> = closure
        .iter()
        .filter_map(|id| program.state_of_node(*id))
        .collect();
    for sid in &start_states {
        let state = program.state(*sid).unwrap();
        let mut queue: VecDeque<NodeId> = state
            .nodes
            .iter()
            .filter(|n| visited_nodes.contains(&n.id))
            .map(|n| n.id)
            .collect();
        while let Some(id) = queue.pop_front() {
            for edge in state.in_edges(id) {
                if visited_nodes.insert(edge.src) {
                    queue.push_back(edge.src);
                }
            }
        }
    }
    let mut full_states: BTreeSet<StateId> = BTreeSet::new();
    let mut seen: BTreeSet<StateId> = start_states.clone();
    let mut frontier: VecDeque<StateId> = start_states.iter().copied().collect();
    while let Some(sid) = frontier.pop_front() {
        for edge in program.interstate_edges.iter().filter(|e| e.dst == sid) {
            if seen.insert(edge.src) {
                full_states.insert(edge.src);
                frontier.push_back(edge.src);
            } else if !start_states.contains(&edge.src) {
                full_states.insert(edge.src);
            }
        }
    }
    for sid in &seen {
        if start_states.contains(sid) {
            let reenterable = program.interstate_edges.iter().any(|e| e.src == *sid);
            if reenterable {
                full_states.insert(*sid);
            }
        }
    }
    for state in &program.states {
        let whole = full_states.contains(&state.id);
        for edge in &state.edges {
            if is_internal(closure, edge) {
                continue;
            }
            let Some(memlet) = &edge.memlet else { continue };
            let Some(container) = state.node(edge.dst).and_then(|n| n.container()) else {
                continue;
            };
            let write_reaches = whole || visited_nodes.contains(&edge.dst);
            if write_reaches {
                out.push((container.to_string(), memlet.subset.clone()));
            }
        }
    }
    out
}

/// Minimal single-entry region of the state machine covering `touched`:
/// the nearest common dominator plus every state it dominates that is
/// postdominated by the touched set's common postdominator.
fn state_region(program: &Program, touched: &BTreeSet<StateId>) -> (StateId, Vec<StateId>) {
    let ids: Vec<StateId> = program.states.iter().map(|s| s.id).collect();
    let successors = |s: StateId| -> Vec<StateId> {
        program.interstate_out(s).map(|(_, e)| e.dst).collect()
    };
    let predecessors = |s: StateId| -> Vec<StateId> {
        program
            .interstate_edges
            .iter()
            .filter(|e| e.dst == s)
            .map(|e| e.src)
            .collect()
    };
    let dom = dominators(&ids, program.start_state, &successors);
    // Nearest common dominator: the deepest state dominating every touched
    // state.
    let mut common: BTreeSet<StateId> = dom
        .get(touched.iter().next().unwrap())
        .cloned()
        .unwrap_or_default();
    for t in touched {
        if let Some(d) = dom.get(t) {
            common = common.intersection(d).copied().collect();
        }
    }
    let entry = *common
        .iter()
        .max_by_key(|s| dom.get(s).map(|d| d.len()).unwrap_or(0))
        .unwrap_or(&program.start_state);

    // Postdominators with a virtual end joined to every terminal state.
    let virtual_end = StateId(u32::MAX);
    let mut rids = ids.clone();
    rids.push(virtual_end);
    let rsucc = |s: StateId| -> Vec<StateId> {
        if s == virtual_end {
            ids.iter()
                .filter(|id| successors(**id).is_empty())
                .copied()
                .collect()
        } else {
            predecessors(s)
        }
    };
    let pdom = dominators(&rids, virtual_end, &rsucc);
    let mut pcommon: BTreeSet<StateId> = pdom
        .get(touched.iter().next().unwrap())
        .cloned()
        .unwrap_or_default();
    for t in touched {
        if let Some(d) = pdom.get(t) {
            pcommon = pcommon.intersection(d).copied().collect();
        }
    }
    pcommon.remove(&virtual_end);
    let exit = pcommon
        .iter()
        .max_by_key(|s| pdom.get(s).map(|d| d.len()).unwrap_or(0))
        .copied();

    let region: Vec<StateId> = ids
        .iter()
        .filter(|s| {
            let dominated = dom.get(s).map(|d| d.contains(&entry)).unwrap_or(false);
            let postdominated = match exit {
                Some(x) => pdom.get(s).map(|d| d.contains(&x)).unwrap_or(false),
                None => true,
            };
            dominated && postdominated
        })
        .copied()
        .collect();
    (entry, region)
}

fn dominators(
    ids: &[StateId],
    root: StateId,
    successors: &dyn Fn(StateId) -> Vec<StateId>,
) -> BTreeMap<StateId, BTreeSet<StateId>> {
    let all: BTreeSet<StateId> = ids.iter().copied().collect();
    let mut dom: BTreeMap<StateId, BTreeSet<StateId>> = ids
        .iter()
        .map(|id| {
            if *id == root {
                (*id, BTreeSet::from([*id]))
            } else {
                (*id, all.clone())
            }
        })
        .collect();
    let mut preds: BTreeMap<StateId, Vec<StateId>> = ids.iter().map(|id| (*id, Vec::new())).collect();
    for id in ids {
        for succ in successors(*id) {
            preds.entry(succ).or_default().push(*id);
        }
    }
    loop {
        let mut changed = false;
        for id in ids {
            if *id == root {
                continue;
            }
            let mut next: Option<BTreeSet<StateId>> = None;
            for p in preds.get(id).into_iter().flatten() {
                let pd = &dom[p];
                next = Some(match next {
                    None => pd.clone(),
                    Some(acc) => acc.intersection(pd).copied().collect(),
                });
            }
            let mut next = next.unwrap_or_default();
            next.insert(*id);
            if next != dom[id] {
                dom.insert(*id, next);
                changed = true;
            }
        }
        if !changed {
            return dom;
        }
    }
}

fn build_cutout(
    program: &Program,
    closure: BTreeSet<NodeId>,
    analysis: Analysis,
) -> Result<Cutout, CutoutError> {
    let assumptions = program.assumptions();
    let mut warnings = analysis.warnings;

    // Containers referenced by the cutout.
    let mut containers: BTreeSet<String> = BTreeSet::new();
    for state in &program.states {
        for node in &state.nodes {
            if closure.contains(&node.id) {
                if let Some(c) = node.container() {
                    containers.insert(c.to_string());
                }
            }
        }
        for edge in &state.edges {
            if is_internal(&closure, edge) {
                if let Some(m) = &edge.memlet {
                    containers.insert(m.container.clone());
                }
            }
        }
    }

    // Symbols assigned inside the region change during cutout execution and
    // block shrinking; everything else is fixed at entry.
    let region_set: BTreeSet<StateId> = analysis.region.iter().copied().collect();
    let mut mutable_symbols: BTreeSet<String> = BTreeSet::new();
    for edge in &program.interstate_edges {
        if region_set.contains(&edge.src) && region_set.contains(&edge.dst) {
            for (target, _) in &edge.assignments {
                mutable_symbols.insert(target.clone());
            }
        }
    }

    // Sub-region minimization: shrink each container to the hull of its
    // accesses when that hull is resolvable and offset-stable.
    let mut shrink_offsets: BTreeMap<String, Vec<SymExpr>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<SymExpr>> = BTreeMap::new();
    for name in &containers {
        let desc = &program.containers[name];
        let mut accesses: Vec<&SubsetRange> = Vec::new();
        accesses.extend(analysis.read_hulls.get(name));
        accesses.extend(analysis.write_hulls.get(name));
        let full = SubsetRange::full(&desc.shape);
        let hull = hull_of(&accesses, &assumptions).unwrap_or_else(|| full.clone());
        let mut offsets = Vec::with_capacity(desc.rank());
        let mut new_shape = Vec::with_capacity(desc.rank());
        let mut usable = true;
        let mut differs = false;
        for (dim, range) in hull.dims.iter().enumerate() {
            let lo = range.begin.clone().simplify();
            let extent = range.end.clone().sub(range.begin.clone()).simplify();
            let stable = lo.symbols().is_disjoint(&mutable_symbols)
                && extent.symbols().is_disjoint(&mutable_symbols);
            let positive = assumptions.prove_ge_const(&extent, 1);
            let in_bounds = assumptions.prove_ge_const(&lo, 0)
                && assumptions.prove_le(&range.end, &desc.shape[dim]);
            if !(stable && positive && in_bounds) {
                usable = false;
                break;
            }
            if lo != SymExpr::Const(0) || extent != desc.shape[dim].clone().simplify() {
                differs = true;
            }
            offsets.push(lo);
            new_shape.push(extent);
        }
        if usable && differs {
            shrink_offsets.insert(name.clone(), offsets);
            shapes.insert(name.clone(), new_shape);
        } else {
            shapes.insert(name.clone(), desc.shape.clone());
        }
    }

    let rebase = |name: &str, subset: &SubsetRange| -> SubsetRange {
        match shrink_offsets.get(name) {
            None => subset.clone(),
            Some(offsets) => SubsetRange::new(
                subset
                    .dims
                    .iter()
                    .zip(offsets)
                    .map(|(d, off)| crate::symexpr::RangeDim {
                        begin: d.begin.clone().sub(off.clone()).simplify(),
                        end: d.end.clone().sub(off.clone()).simplify(),
                        step: d.step.clone(),
                    })
                    .collect(),
            ),
        }
    };

    // Boundary-crossing containers become externally visible.
    let in_inputs: BTreeSet<&String> = analysis
        .input_configuration
        .iter()
        .map(|(n, _)| n)
        .collect();
    let in_system: BTreeSet<&String> = analysis.system_state.iter().map(|(n, _)| n).collect();

    let mut cut = Program::new();
    for name in &containers {
        let desc = &program.containers[name];
        let transient =
            desc.transient && !in_inputs.contains(name) && !in_system.contains(name);
        cut.containers.insert(
            name.clone(),
            crate::ir::DataDescriptor {
                name: name.clone(),
                dtype: desc.dtype,
                shape: shapes[name].clone(),
                transient,
            },
        );
    }

    // States and nodes, freshly numbered, in region order starting at entry.
    let mut region_order = analysis.region.clone();
    region_order.sort();
    region_order.retain(|s| *s != analysis.entry);
    region_order.insert(0, analysis.entry);

    let mut origin_nodes: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut origin_states: BTreeMap<StateId, StateId> = BTreeMap::new();
    let mut node_map: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut state_map: BTreeMap<StateId, StateId> = BTreeMap::new();
    for sid in &region_order {
        let state = program.state(*sid).unwrap();
        let new_sid = cut.add_state(state.name.clone());
        state_map.insert(*sid, new_sid);
        origin_states.insert(new_sid, *sid);
        for node in &state.nodes {
            if !closure.contains(&node.id) {
                continue;
            }
            let new_id = cut.fresh_node_id();
            node_map.insert(node.id, new_id);
            origin_nodes.insert(new_id, node.id);
            cut.state_mut(new_sid).unwrap().nodes.push(Node {
                id: new_id,
                scope: node.scope, // remapped below
                kind: node.kind.clone(),
            });
        }
        for edge in &state.edges {
            if !is_internal(&closure, edge) {
                continue;
            }
            let new_eid = cut.fresh_edge_id();
            let memlet = edge.memlet.as_ref().map(|m| crate::ir::Memlet {
                container: m.container.clone(),
                subset: rebase(&m.container, &m.subset),
                wcr: m.wcr,
            });
            cut.state_mut(new_sid).unwrap().edges.push(Edge {
                id: new_eid,
                src: edge.src,
                src_conn: edge.src_conn.clone(),
                dst: edge.dst,
                dst_conn: edge.dst_conn.clone(),
                memlet,
            });
        }
    }
    // Remap node references now that the full map exists.
    for state in &mut cut.states {
        for node in &mut state.nodes {
            if let Some(scope) = node.scope {
                node.scope = Some(node_map[&scope]);
            }
            if let NodeKind::MapExit { entry } = &mut node.kind {
                *entry = node_map[entry];
            }
        }
        for edge in &mut state.edges {
            edge.src = node_map[&edge.src];
            edge.dst = node_map[&edge.dst];
        }
    }
    cut.set_start(state_map[&analysis.entry]);
    for edge in &program.interstate_edges {
        if let (Some(src), Some(dst)) = (state_map.get(&edge.src), state_map.get(&edge.dst)) {
            cut.add_interstate(*src, *dst, edge.guard.clone(), edge.assignments.clone())
                .map_err(|e| CutoutError::UnknownElement(e.to_string()))?;
        }
    }

    // Symbol table: everything referenced in the cutout body.
    let mut used = cut.used_symbols();
    // Guard scalars that are containers are handled below, not symbols.
    used.retain(|name| !program.containers.contains_key(name));
    for name in &used {
        if let Some(decl) = program.symbols.get(name) {
            cut.symbols.insert(name.clone(), decl.clone());
        } else {
            cut.symbols
                .insert(name.clone(), crate::ir::SymbolDecl::default());
        }
    }
    // Scalar containers referenced by copied guards must exist in the cutout
    // and count as inputs.
    let mut extra_inputs: Vec<(String, SubsetRange)> = Vec::new();
    let mut guard_names: BTreeSet<String> = BTreeSet::new();
    for edge in &cut.interstate_edges {
        edge.guard.free_names(&mut guard_names);
        for (_, expr) in &edge.assignments {
            expr.free_symbols(&mut guard_names);
        }
    }
    for name in guard_names {
        if let Some(desc) = program.containers.get(&name) {
            if !cut.containers.contains_key(&name) {
                cut.containers.insert(
                    name.clone(),
                    crate::ir::DataDescriptor {
                        name: name.clone(),
                        dtype: desc.dtype,
                        shape: desc.shape.clone(),
                        transient: false,
                    },
                );
                extra_inputs.push((name.clone(), SubsetRange::full(&desc.shape)));
            } else if let Some(d) = cut.containers.get_mut(&name) {
                if d.transient {
                    d.transient = false;
                    extra_inputs.push((name.clone(), SubsetRange::full(&d.shape.clone())));
                }
            }
        }
    }

    // Rebase analysis results into cutout coordinates.
    let mut input_configuration: Vec<(String, SubsetRange)> = analysis
        .input_configuration
        .iter()
        .map(|(n, s)| (n.clone(), rebase(n, s)))
        .collect();
    input_configuration.extend(extra_inputs);
    input_configuration.sort_by(|a, b| a.0.cmp(&b.0));
    input_configuration.dedup_by(|a, b| a.0 == b.0);
    let system_state: Vec<(String, SubsetRange)> = analysis
        .system_state
        .iter()
        .map(|(n, s)| (n.clone(), rebase(n, s)))
        .collect();

    // Free symbols not assigned inside the cutout are inputs.
    let mut assigned: BTreeSet<String> = BTreeSet::new();
    for edge in &cut.interstate_edges {
        for (target, _) in &edge.assignments {
            assigned.insert(target.clone());
        }
    }
    let input_symbols: BTreeSet<String> = cut
        .symbols
        .keys()
        .filter(|s| !assigned.contains(*s))
        .cloned()
        .collect();

    if !cut.is_valid() {
        let diags = crate::ir::validate(&cut);
        warnings.push(format!("extracted cutout failed validation: {diags:?}"));
    }

    Ok(Cutout {
        program: cut,
        origin_nodes,
        origin_states,
        input_configuration,
        system_state,
        input_symbols,
        shrink_offsets,
        warnings,
    })
}

fn reextract(program: &Program, cutout: &Cutout) -> Result<Cutout, CutoutError> {
    let closure: BTreeSet<NodeId> = cutout.origin_nodes.values().copied().collect();
    let states: BTreeSet<StateId> = cutout.origin_states.values().copied().collect();
    extract_from_nodes(program, &closure, &states)
}

/// Recompute the system state of an extracted cutout against its original
/// program (cutout coordinates).
pub fn compute_system_state(
    program: &Program,
    cutout: &Cutout,
) -> Result<Vec<(String, SubsetRange)>, CutoutError> {
    Ok(reextract(program, cutout)?.system_state)
}

/// Recompute the input configuration of an extracted cutout against its
/// original program (cutout coordinates).
pub fn compute_input_config(
    program: &Program,
    cutout: &Cutout,
) -> Result<Vec<(String, SubsetRange)>, CutoutError> {
    Ok(reextract(program, cutout)?.input_configuration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::interp::{run, Buffer, ExecutionInput, Status};
    use crate::ir::{DType, TaskletCode};
    use crate::symexpr::RangeDim;
    use crate::xform::{apply, match_kind, XformKind};

    fn names(list: &[(String, SubsetRange)]) -> Vec<&str> {
        list.iter().map(|(n, _)| n.as_str()).collect()
    }

    #[test]
    fn matrix_chain_cutout_is_second_matmul() {
        let fix = fixtures::matrix_chain();
        let site = match_kind(XformKind::MapTiling, &fix.program)[1].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        assert!(cutout.program.is_valid());
        // Second multiplication only: containers U, C, V plus symbol N.
        let mut got: Vec<&str> = cutout.program.containers.keys().map(|s| s.as_str()).collect();
        got.sort();
        assert_eq!(got, vec!["C", "U", "V"]);
        assert!(cutout.input_symbols.contains("N"));
        // Input configuration {C, U, V}: the wcr accumulation reads V.
        assert_eq!(names(&cutout.input_configuration), vec!["C", "U", "V"]);
        // System state {V}: only V feeds the third multiplication.
        assert_eq!(names(&cutout.system_state), vec!["V"]);
        // Self-consistency of the stored lists.
        assert_eq!(
            cutout.input_configuration,
            compute_input_config(&fix.program, &cutout).unwrap()
        );
        assert_eq!(
            cutout.system_state,
            compute_system_state(&fix.program, &cutout).unwrap()
        );
    }

    #[test]
    fn matrix_chain_cutout_runs_standalone() {
        let fix = fixtures::matrix_chain();
        let site = match_kind(XformKind::MapTiling, &fix.program)[1].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        let n = 3usize;
        let mut symbols = std::collections::BTreeMap::new();
        symbols.insert("N".to_string(), n as i64);
        let mut input = ExecutionInput::zeros(&cutout.program, symbols).unwrap();
        let u: Vec<f64> = (0..n * n).map(|i| (i as f64) - 4.0).collect();
        let c: Vec<f64> = (0..n * n).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        input.buffers.insert("U".into(), Buffer::F64(u.clone()));
        input.buffers.insert("C".into(), Buffer::F64(c.clone()));
        let outcome = run(&cutout.program, &input, 1_000_000).unwrap();
        assert_eq!(outcome.status, Status::Completed);
        let mut expect = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    expect[i * n + j] += u[i * n + k] * c[k * n + j];
                }
            }
        }
        assert_eq!(outcome.outputs["V"], Buffer::F64(expect));
    }

    #[test]
    fn scalar_chain_initial_inputs_are_y_and_z() {
        let fix = fixtures::scalar_chain();
        let site = match_kind(XformKind::TaskletFusion, &fix.program)[0].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        assert!(names(&cutout.input_configuration).contains(&"y"));
        assert!(names(&cutout.input_configuration).contains(&"z"));
        assert!(!names(&cutout.input_configuration).contains(&"x"));
        // tmp is written before it is read inside the cutout but still
        // crosses no boundary here; w is the system state.
        assert_eq!(names(&cutout.system_state), vec!["w"]);
        assert_eq!(cutout.input_volume(&Default::default()).unwrap(), 2);
    }

    #[test]
    fn sub_region_minimization_takes_first_ten() {
        let fix = fixtures::first_ten();
        let site = match_kind(XformKind::MapTiling, &fix.program)[0].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        let arr = &cutout.program.containers["my_arr"];
        assert_eq!(arr.shape, vec![SymExpr::Const(10)]);
        // N is gone entirely: the cutout no longer depends on it.
        assert!(!cutout.program.symbols.contains_key("N"));
        assert_eq!(cutout.shrink_offsets["my_arr"], vec![SymExpr::Const(0)]);
    }

    #[test]
    fn scope_closure_includes_both_map_levels() {
        // Tile the first-ten map, then extract around the innermost tasklet
        // only: both map levels must come along.
        let fix = fixtures::first_ten();
        let site = match_kind(XformKind::MapTiling, &fix.program)[0]
            .clone()
            .with_param("tile_size", 4);
        let (tiled, _) = apply(&site, &fix.program).unwrap();
        let tasklet = tiled
            .states
            .iter()
            .flat_map(|s| s.nodes.iter())
            .find(|n| matches!(n.kind, crate::ir::NodeKind::Tasklet { .. }))
            .unwrap();
        let mut change = ChangeSet::default();
        change.modified.insert(tasklet.id);
        let cutout = extract(&tiled, &change).unwrap();
        let map_entries = cutout
            .program
            .states
            .iter()
            .flat_map(|s| s.nodes.iter())
            .filter(|n| matches!(n.kind, crate::ir::NodeKind::MapEntry { .. }))
            .count();
        assert_eq!(map_entries, 2);
        assert!(cutout.program.is_valid());
    }

    #[test]
    fn disjoint_downstream_read_is_excluded() {
        // state0 writes arr[0:10]; state1 reads arr[10:20]. The write can
        // never be observed, so the system state is empty (with a warning).
        let mut p = Program::new();
        p.add_container("src", DType::F64, vec![10.into()], false).unwrap();
        p.add_container("arr", DType::F64, vec![20.into()], true).unwrap();
        p.add_container("out", DType::F64, vec![10.into()], false).unwrap();
        let s0 = p.add_state("first");
        let s1 = p.add_state("second");
        p.add_interstate(s1, s1, crate::ir::BoolExpr::True, Vec::<(String, SymExpr)>::new())
            .ok();
        p.interstate_edges.clear();
        p.add_interstate(s0, s1, crate::ir::BoolExpr::True, Vec::<(String, SymExpr)>::new())
            .unwrap();
        let j = SymExpr::sym("j");
        for (state, in_name, in_idx, out_name, out_idx) in [
            (s0, "src", j.clone(), "arr", j.clone()),
            (s1, "arr", j.clone().add(10), "out", j.clone()),
        ] {
            let acc_in = p.add_access(state, in_name).unwrap();
            let acc_out = p.add_access(state, out_name).unwrap();
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
            let full_in = if in_name == "arr" {
                SubsetRange::new(vec![RangeDim::new(10, 20, 1)])
            } else {
                SubsetRange::new(vec![RangeDim::new(0, 10, 1)])
            };
            p.add_memlet(state, acc_in, None, entry, None, in_name, full_in).unwrap();
            p.add_memlet(state, entry, None, t, Some("a"), in_name, SubsetRange::point(&[in_idx]))
                .unwrap();
            p.add_memlet(state, t, Some("o"), exit, None, out_name, SubsetRange::point(&[out_idx]))
                .unwrap();
            let full_out = if out_name == "arr" {
                SubsetRange::new(vec![RangeDim::new(0, 10, 1)])
            } else {
                SubsetRange::new(vec![RangeDim::new(0, 10, 1)])
            };
            p.add_memlet(state, exit, None, acc_out, None, out_name, full_out).unwrap();
        }
        assert!(p.is_valid(), "{:?}", crate::ir::validate(&p));
        // Extract around the first map.
        let entry0 = p.states[0]
            .nodes
            .iter()
            .find(|n| matches!(n.kind, crate::ir::NodeKind::MapEntry { .. }))
            .unwrap()
            .id;
        let mut change = ChangeSet::default();
        change.modified.insert(entry0);
        let cutout = extract(&p, &change).unwrap();
        assert!(names(&cutout.system_state).is_empty());
        assert!(cutout.warnings.iter().any(|w| w.contains("empty system state")));
        // And a monotonicity check: moving the downstream read to an
        // overlapping range pulls arr into the system state.
        let mut p2 = p.clone();
        for state in &mut p2.states {
            for edge in &mut state.edges {
                if let Some(m) = &mut edge.memlet {
                    if m.container == "arr" && state.id == s1 {
                        m.subset = m.subset.substitute("j", &j.clone().sub(10));
                        // now reads arr[j-10+10] = arr[j] in [0:10)
                    }
                }
            }
        }
        // Fix the outer read range too.
        for state in &mut p2.states {
            if state.id != s1 {
                continue;
            }
            for edge in &mut state.edges {
                if let Some(m) = &mut edge.memlet {
                    if m.container == "arr" {
                        let dims = &m.subset.dims;
                        if dims[0].begin != SymExpr::Const(0) && dims[0].begin.symbols().is_empty()
                        {
                            m.subset = SubsetRange::new(vec![RangeDim::new(0, 10, 1)]);
                        }
                    }
                }
            }
        }
        let cutout2 = extract(&p2, &change).unwrap();
        assert_eq!(names(&cutout2.system_state), vec!["arr"]);
    }

    #[test]
    fn fusion_live_intermediate_enters_system_state() {
        let fix = fixtures::fusion_chain(true);
        for bug in [None, Some(crate::xform::BugFlag::FusionDropsLiveWrite)] {
            let site = match_kind(XformKind::TaskletFusion, &fix.program)[0]
                .clone()
                .with_bug(bug);
            let (_, change) = apply(&site, &fix.program).unwrap();
            let cutout = extract(&fix.program, &change).unwrap();
            assert!(names(&cutout.system_state).contains(&"tmp"), "bug={bug:?}");
            assert!(names(&cutout.system_state).contains(&"w"));
            // In the cutout, tmp crosses the boundary and is non-transient.
            assert!(!cutout.program.containers["tmp"].transient);
        }
        // Dead variant: tmp stays internal.
        let fix = fixtures::fusion_chain(false);
        let site = match_kind(XformKind::TaskletFusion, &fix.program)[0].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        assert!(!names(&cutout.system_state).contains(&"tmp"));
        assert!(cutout.program.containers["tmp"].transient);
    }

    #[test]
    fn unknown_elements_are_rejected() {
        let fix = fixtures::matrix_chain();
        let mut change = ChangeSet::default();
        assert_eq!(extract(&fix.program, &change), Err(CutoutError::EmptyChangeSet));
        change.modified.insert(NodeId(9999));
        assert!(matches!(
            extract(&fix.program, &change),
            Err(CutoutError::UnknownElement(_))
        ));
    }

    #[test]
    fn under_reported_change_set_is_trapped() {
        // Report only the loop body while the transformation also rewires
        // the guard state: applying to the cutout must fail.
        let fix = fixtures::countdown_loop();
        let site = match_kind(XformKind::LoopUnroll, &fix.program)[0].clone();
        let mut under = ChangeSet::default();
        for node in &fix.program.state(fix.body_state).unwrap().nodes {
            under.modified.insert(node.id);
        }
        under.touched_states.insert(fix.body_state);
        let cutout = extract(&fix.program, &under).unwrap();
        assert!(matches!(
            cutout.translate_instance(&site),
            Err(CutoutError::UnknownElement(_))
        ));
    }

    #[test]
    fn opaque_nodes_force_containers_and_warn() {
        let mut p = Program::new();
        p.add_scalar("io", DType::F64, true).unwrap();
        let s = p.add_state("s");
        let acc = p.add_access(s, "io").unwrap();
        let node = p.add_opaque(s, None, "external_call", true).unwrap();
        p.add_memlet(s, acc, None, node, None, "io", SubsetRange::scalar()).unwrap();
        let mut change = ChangeSet::default();
        change.modified.insert(node);
        let cutout = extract(&p, &change).unwrap();
        assert!(cutout.warnings.iter().any(|w| w.contains("opaque")));
        assert_eq!(names(&cutout.input_configuration), vec!["io"]);
        assert_eq!(names(&cutout.system_state), vec!["io"]);
    }

    #[test]
    fn loop_region_extracts_runnable_loop() {
        let fix = fixtures::countdown_loop();
        let site = match_kind(XformKind::LoopUnroll, &fix.program)[0].clone();
        let (_, change) = apply(&site, &fix.program).unwrap();
        let cutout = extract(&fix.program, &change).unwrap();
        assert!(cutout.program.is_valid(), "{:?}", crate::ir::validate(&cutout.program));
        assert!(names(&cutout.system_state).contains(&"out"));
        assert!(names(&cutout.input_configuration).contains(&"src"));
        let mut input = ExecutionInput::zeros(&cutout.program, Default::default()).unwrap();
        input
            .buffers
            .insert("src".into(), Buffer::I64(vec![1, 2, 3, 4]));
        let outcome = run(&cutout.program, &input, 1_000_000).unwrap();
        assert_eq!(outcome.status, Status::Completed);
        assert_eq!(outcome.outputs["out"], Buffer::I64(vec![3, 6, 9, 12]));
    }
}
