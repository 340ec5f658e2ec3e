//! Deterministic reference interpreter.
//!
//! Executes a program under concrete symbol bindings and input data, trapping
//! faults as values and recording control-flow coverage. Identical inputs
//! yield bitwise-identical outcomes: map scopes iterate their domain in
//! lexicographic order and float accumulation order is fixed by the
//! topological execution order.

mod value;

pub use value::{eval_scalar, BranchSink, Buffer, EvalFault, NoBranches, Value};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{EdgeId, Node, NodeId, NodeKind, Program, StateGraph, StateId};
use crate::symexpr::{EvalError, SubsetRange};

/// Concrete input: a total symbol binding plus data for every non-transient
/// container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionInput {
    pub symbols: BTreeMap<String, i64>,
    pub buffers: BTreeMap<String, Buffer>,
}

impl ExecutionInput {
    pub fn new() -> Self {
        ExecutionInput {
            symbols: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Zero-filled data for every non-transient container of `program`,
    /// shapes evaluated under `symbols`.
    pub fn zeros(program: &Program, symbols: BTreeMap<String, i64>) -> Result<Self, InputError> {
        let mut buffers = BTreeMap::new();
        for (name, desc) in &program.containers {
            if desc.transient {
                continue;
            }
            let len = evaluated_len(program, name, &symbols)?;
            buffers.insert(name.clone(), Buffer::zeros(desc.dtype, len));
        }
        Ok(ExecutionInput { symbols, buffers })
    }
}

impl Default for ExecutionInput {
    fn default() -> Self {
        Self::new()
    }
}

fn evaluated_len(
    program: &Program,
    container: &str,
    symbols: &BTreeMap<String, i64>,
) -> Result<usize, InputError> {
    let desc = program
        .containers
        .get(container)
        .ok_or_else(|| InputError::InputShapeMismatch(format!("unknown container `{container}`")))?;
    let mut len = 1usize;
    for e in &desc.shape {
        let extent = e.eval(symbols).map_err(|err| {
            InputError::InputShapeMismatch(format!("shape of `{container}`: {err}"))
        })?;
        if extent < 0 {
            return Err(InputError::InputShapeMismatch(format!(
                "shape extent of `{container}` is negative ({extent})"
            )));
        }
        len = len.saturating_mul(extent as usize);
    }
    Ok(len)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InputError {
    #[error("input shape mismatch: {0}")]
    InputShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    OutOfBounds,
    UnboundSymbol,
    DivisionByZero,
    WriteConflict,
    TypeError,
    InvalidSubset,
    UnknownName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultSite {
    Node(NodeId),
    InterstateEdge(EdgeId),
    State(StateId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    Fault { kind: FaultKind, site: FaultSite },
    Timeout,
}

impl Status {
    pub fn is_completed(&self) -> bool {
        matches!(self, Status::Completed)
    }
}

/// Control-flow coverage: executed interstate edges plus per-tasklet select
/// branch outcomes `(node, select ordinal, taken)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub interstate_edges: BTreeSet<EdgeId>,
    pub branches: BTreeSet<(NodeId, u32, bool)>,
}

impl CoverageRecord {
    /// Stable signature for corpus bookkeeping.
    pub fn signature(&self) -> u64 {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut h = DefaultHasher::new();
        for e in &self.interstate_edges {
            e.0.hash(&mut h);
        }
        0xffu8.hash(&mut h);
        for (n, ord, taken) in &self.branches {
            (n.0, ord, taken).hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: Status,
    /// Final contents of all non-transient containers (possibly partial data
    /// when the execution faulted).
    pub outputs: BTreeMap<String, Buffer>,
    pub coverage: CoverageRecord,
    pub steps: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    pub step_budget: u64,
    /// Iterate map domains in reverse lexicographic order; used to validate
    /// order-independence of integer wcr reductions.
    pub reverse_maps: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            step_budget: 1_000_000,
            reverse_maps: false,
        }
    }
}

/// Execute a program. Convenience wrapper over [`run_observed`].
pub fn run(
    program: &Program,
    input: &ExecutionInput,
    step_budget: u64,
) -> Result<ExecutionOutcome, InputError> {
    run_observed(
        program,
        input,
        ExecOptions {
            step_budget,
            ..Default::default()
        },
        |_, _, _| {},
    )
}

/// Execute a program, calling `observer(state, symbols, storage)` every time
/// execution enters a state (before its dataflow runs). The observer is how
/// cutout entry snapshots are captured.
pub fn run_observed(
    program: &Program,
    input: &ExecutionInput,
    options: ExecOptions,
    mut observer: impl FnMut(StateId, &BTreeMap<String, i64>, &BTreeMap<String, Buffer>),
) -> Result<ExecutionOutcome, InputError> {
    // Pre-flight: data for every non-transient container with exact length.
    let mut storage: BTreeMap<String, Buffer> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<i64>> = BTreeMap::new();
    for (name, desc) in &program.containers {
        let mut dims = Vec::with_capacity(desc.shape.len());
        for e in &desc.shape {
            let extent = e.eval(&input.symbols).map_err(|err| {
                InputError::InputShapeMismatch(format!("shape of `{name}`: {err}"))
            })?;
            if extent < 0 {
                return Err(InputError::InputShapeMismatch(format!(
                    "shape extent of `{name}` is negative"
                )));
            }
            dims.push(extent);
        }
        let len = dims.iter().product::<i64>().max(0) as usize;
        if desc.transient {
            storage.insert(name.clone(), Buffer::zeros(desc.dtype, len));
        } else {
            let buf = input.buffers.get(name).ok_or_else(|| {
                InputError::InputShapeMismatch(format!("missing data for `{name}`"))
            })?;
            if buf.dtype() != desc.dtype {
                return Err(InputError::InputShapeMismatch(format!(
                    "`{name}` expects {:?} data",
                    desc.dtype
                )));
            }
            if buf.len() != len {
                return Err(InputError::InputShapeMismatch(format!(
                    "`{name}` expects {len} elements, got {}",
                    buf.len()
                )));
            }
            storage.insert(name.clone(), buf.clone());
        }
        shapes.insert(name.clone(), dims);
    }

    let mut exec = Exec {
        program,
        options,
        storage,
        shapes,
        symbols: input.symbols.clone(),
        iter_vars: Vec::new(),
        coverage: CoverageRecord::default(),
        steps: 0,
        warnings: Vec::new(),
    };

    let status = exec.run_state_machine(&mut observer);

    let outputs = exec
        .storage
        .into_iter()
        .filter(|(name, _)| {
            program
                .containers
                .get(name)
                .map(|d| !d.transient)
                .unwrap_or(false)
        })
        .collect();
    Ok(ExecutionOutcome {
        status,
        outputs,
        coverage: exec.coverage,
        steps: exec.steps,
        warnings: exec.warnings,
    })
}

/// Signals that abort execution of the state machine.
enum Abort {
    Fault(FaultKind, FaultSite),
    Timeout,
}

struct Exec<'p> {
    program: &'p Program,
    options: ExecOptions,
    storage: BTreeMap<String, Buffer>,
    shapes: BTreeMap<String, Vec<i64>>,
    symbols: BTreeMap<String, i64>,
    /// Stack of live map iteration variable bindings.
    iter_vars: Vec<(String, i64)>,
    coverage: CoverageRecord,
    steps: u64,
    warnings: Vec<String>,
}

impl<'p> Exec<'p> {
    fn run_state_machine(
        &mut self,
        observer: &mut impl FnMut(StateId, &BTreeMap<String, i64>, &BTreeMap<String, Buffer>),
    ) -> Status {
        let mut current = self.program.start_state;
        loop {
            if self.charge(1).is_err() {
                return Status::Timeout;
            }
            observer(current, &self.symbols, &self.storage);
            let state = match self.program.state(current) {
                Some(s) => s,
                None => {
                    return Status::Fault {
                        kind: FaultKind::UnknownName,
                        site: FaultSite::State(current),
                    }
                }
            };
            if let Err(abort) = self.run_state(state) {
                return match abort {
                    Abort::Fault(kind, site) => Status::Fault { kind, site },
                    Abort::Timeout => Status::Timeout,
                };
            }
            // Guards evaluate over symbols plus rank-0 integer/bool scalars;
            // on several true guards the lowest-indexed edge wins.
            let env = self.interstate_env();
            let mut taken: Option<&crate::ir::InterstateEdge> = None;
            let mut extra_true = Vec::new();
            for (_, edge) in self.program.interstate_out(current) {
                match edge.guard.eval(&env) {
                    Ok(true) => {
                        if taken.is_none() {
                            taken = Some(edge);
                        } else {
                            extra_true.push(edge.id);
                        }
                    }
                    Ok(false) => {}
                    Err(e) => {
                        return Status::Fault {
                            kind: eval_error_kind(&e),
                            site: FaultSite::InterstateEdge(edge.id),
                        }
                    }
                }
            }
            let Some(edge) = taken else {
                return Status::Completed;
            };
            if !extra_true.is_empty() {
                self.warnings.push(format!(
                    "nondeterminism: guards of {:?} also true leaving {current}; taking {}",
                    extra_true, edge.id
                ));
            }
            self.coverage.interstate_edges.insert(edge.id);
            for (target, expr) in &edge.assignments {
                match expr.eval(&env) {
                    Ok(v) => {
                        self.symbols.insert(target.clone(), v);
                    }
                    Err(e) => {
                        return Status::Fault {
                            kind: eval_error_kind(&e),
                            site: FaultSite::InterstateEdge(edge.id),
                        }
                    }
                }
            }
            current = edge.dst;
        }
    }

    fn interstate_env(&self) -> BTreeMap<String, i64> {
        let mut env = self.symbols.clone();
        for (name, desc) in &self.program.containers {
            if desc.rank() == 0 && !desc.dtype.is_float() {
                if let Some(buf) = self.storage.get(name) {
                    let v = match buf.get(0) {
                        Value::I64(v) => v,
                        Value::I32(v) => v as i64,
                        Value::Bool(b) => b as i64,
                        _ => continue,
                    };
                    env.insert(name.clone(), v);
                }
            }
        }
        env
    }

    fn charge(&mut self, steps: u64) -> Result<(), Abort> {
        self.steps += steps;
        if self.steps > self.options.step_budget {
            Err(Abort::Timeout)
        } else {
            Ok(())
        }
    }

    fn run_state(&mut self, state: &StateGraph) -> Result<(), Abort> {
        let order = self.unit_order(state, None)?;
        for unit in order {
            self.run_unit(state, unit, &mut None)?;
        }
        Ok(())
    }

    /// Topological order of the units directly inside `scope` (a unit is a
    /// node plus, for map entries, its whole scope). Deterministic: ties
    /// break on node id.
    fn unit_order(&self, state: &StateGraph, scope: Option<NodeId>) -> Result<Vec<NodeId>, Abort> {
        // Representative at this level for any node: walk scope chain up
        // until the parent scope is `scope`.
        let repr = |mut id: NodeId| -> Option<NodeId> {
            loop {
                let node = state.node(id)?;
                let node_scope = match node.kind {
                    NodeKind::MapExit { entry } => {
                        state.node(entry).and_then(|n| n.scope)
                    }
                    _ => node.scope,
                };
                if node_scope == scope {
                    // Exits merge into their entry's unit.
                    if let NodeKind::MapExit { entry } = node.kind {
                        return Some(entry);
                    }
                    return Some(id);
                }
                id = node_scope?;
            }
        };
        // Map exits are not separate units; they merge into their entry.
        let members: Vec<NodeId> = state
            .nodes
            .iter()
            .filter(|n| n.scope == scope && !matches!(n.kind, NodeKind::MapExit { .. }))
            .map(|n| n.id)
            .collect();
        let mut indegree: BTreeMap<NodeId, usize> = members.iter().map(|id| (*id, 0)).collect();
        let mut successors: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for edge in &state.edges {
            let (Some(a), Some(b)) = (repr(edge.src), repr(edge.dst)) else {
                continue;
            };
            if a == b {
                continue;
            }
            if indegree.contains_key(&a) && indegree.contains_key(&b) {
                *indegree.get_mut(&b).unwrap() += 1;
                successors.entry(a).or_default().push(b);
            }
        }
        let mut ready: BTreeSet<NodeId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| *id)
            .collect();
        let mut order = Vec::with_capacity(members.len());
        while let Some(next) = ready.iter().next().copied() {
            ready.remove(&next);
            order.push(next);
            for succ in successors.get(&next).cloned().unwrap_or_default() {
                let d = indegree.get_mut(&succ).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(succ);
                }
            }
        }
        if order.len() != members.len() {
            return Err(Abort::Fault(
                FaultKind::InvalidSubset,
                FaultSite::State(state.id),
            ));
        }
        Ok(order)
    }

    fn run_unit(
        &mut self,
        state: &StateGraph,
        id: NodeId,
        conflicts: &mut Option<BTreeSet<(String, u64)>>,
    ) -> Result<(), Abort> {
        let node = state
            .node(id)
            .ok_or(Abort::Fault(FaultKind::UnknownName, FaultSite::Node(id)))?;
        match &node.kind {
            NodeKind::Access { .. } => self.run_copies(state, node, conflicts),
            NodeKind::Tasklet { .. } => self.run_tasklet(state, node, conflicts),
            NodeKind::MapEntry { .. } => self.run_map(state, node, conflicts),
            NodeKind::MapExit { .. } => Ok(()),
            // Opaque nodes execute as no-ops; side effects are out of reach
            // of the analysis and flagged at validation/extraction time.
            NodeKind::Opaque { .. } => Ok(()),
        }
    }

    /// Access-to-access edges copy `src[subset]` into `dst[subset]`, element
    /// by element in lexicographic subset order.
    fn run_copies(
        &mut self,
        state: &StateGraph,
        node: &Node,
        conflicts: &mut Option<BTreeSet<(String, u64)>>,
    ) -> Result<(), Abort> {
        // Executed when visiting the *destination* access node so that every
        // producing write has already happened.
        for edge in state.in_edges(node.id) {
            let Some(src) = state.node(edge.src) else { continue };
            let (Some(src_container), Some(dst_container)) = (src.container(), node.container())
            else {
                continue;
            };
            let Some(memlet) = &edge.memlet else { continue };
            let site = FaultSite::Node(node.id);
            let indices = self.enumerate_subset(&memlet.subset, site)?;
            self.charge(1)?;
            for idx in indices {
                let src_flat = self.flat_index(src_container, &idx, site)?;
                let dst_flat = self.flat_index(dst_container, &idx, site)?;
                let v = self.storage[src_container].get(src_flat as usize);
                let dst = self.storage.get_mut(dst_container).unwrap();
                dst.set(dst_flat as usize, v)
                    .map_err(|f| Abort::Fault(fault_kind(f), site))?;
                if let Some(set) = conflicts {
                    if !set.insert((dst_container.to_string(), dst_flat)) {
                        return Err(Abort::Fault(FaultKind::WriteConflict, site));
                    }
                }
            }
        }
        Ok(())
    }

    fn run_tasklet(
        &mut self,
        state: &StateGraph,
        node: &Node,
        conflicts: &mut Option<BTreeSet<(String, u64)>>,
    ) -> Result<(), Abort> {
        let NodeKind::Tasklet {
            inlets: _,
            outlets: _,
            code,
        } = &node.kind
        else {
            unreachable!()
        };
        self.charge(1)?;
        let site = FaultSite::Node(node.id);
        // Gather inlet values.
        let mut values: BTreeMap<String, Value> = BTreeMap::new();
        for edge in state.in_edges(node.id) {
            let Some(conn) = &edge.dst_conn else { continue };
            let Some(memlet) = &edge.memlet else { continue };
            let flat = self.single_element(&memlet.subset, &memlet.container, site)?;
            values.insert(conn.clone(), self.storage[&memlet.container].get(flat as usize));
        }
        // Evaluate one expression per outlet (deterministic map order), then
        // perform the writes. Select ordinals continue across outlets so each
        // select in the tasklet has a unique stable id.
        let mut results: BTreeMap<&str, Value> = BTreeMap::new();
        let mut branches: Vec<(u32, bool)> = Vec::new();
        let mut select_base = 0u32;
        for (outlet, expr) in &code.assignments {
            struct Sink<'a>(&'a mut Vec<(u32, bool)>, u32);
            impl BranchSink for Sink<'_> {
                fn branch(&mut self, ordinal: u32, taken: bool) {
                    self.0.push((self.1 + ordinal, taken));
                }
            }
            let mut sink = Sink(&mut branches, select_base);
            let lookup = |name: &str| -> Option<Value> {
                if let Some(v) = values.get(name) {
                    return Some(*v);
                }
                for (var, val) in self.iter_vars.iter().rev() {
                    if var == name {
                        return Some(Value::I64(*val));
                    }
                }
                self.symbols.get(name).map(|v| Value::I64(*v))
            };
            let mut ordinal = 0u32;
            let v = eval_scalar(expr, &lookup, &mut sink, &mut ordinal)
                .map_err(|f| Abort::Fault(fault_kind(f), site))?;
            select_base += expr.count_selects();
            results.insert(outlet, v);
        }
        for (ordinal, taken) in branches {
            self.coverage.branches.insert((node.id, ordinal, taken));
        }
        for edge in state.out_edges(node.id) {
            let Some(conn) = &edge.src_conn else { continue };
            let Some(memlet) = &edge.memlet else { continue };
            let Some(v) = results.get(conn.as_str()).copied() else {
                return Err(Abort::Fault(FaultKind::UnknownName, site));
            };
            let flat = self.single_element(&memlet.subset, &memlet.container, site)?;
            let container = memlet.container.clone();
            let stored = if let Some(wcr) = memlet.wcr {
                let old = self.storage[&container].get(flat as usize);
                combine(wcr, old, v).map_err(|f| Abort::Fault(fault_kind(f), site))?
            } else {
                if let Some(set) = conflicts {
                    if !set.insert((container.clone(), flat)) {
                        return Err(Abort::Fault(FaultKind::WriteConflict, site));
                    }
                }
                v
            };
            self.storage
                .get_mut(&container)
                .unwrap()
                .set(flat as usize, stored)
                .map_err(|f| Abort::Fault(fault_kind(f), site))?;
        }
        Ok(())
    }

    fn run_map(
        &mut self,
        state: &StateGraph,
        node: &Node,
        conflicts: &mut Option<BTreeSet<(String, u64)>>,
    ) -> Result<(), Abort> {
        let NodeKind::MapEntry { params } = &node.kind else {
            unreachable!()
        };
        let site = FaultSite::Node(node.id);
        let body = self.unit_order(state, Some(node.id))?;
        // The outermost map of a state tracks write conflicts across its
        // whole iteration sweep.
        let mut own_tracker;
        let tracker: &mut Option<BTreeSet<(String, u64)>> = if conflicts.is_some() {
            conflicts
        } else {
            own_tracker = Some(BTreeSet::new());
            &mut own_tracker
        };
        self.iterate_domain(state, node, params, 0, &body, tracker, site)
    }

    #[allow(clippy::too_many_arguments)]
    fn iterate_domain(
        &mut self,
        state: &StateGraph,
        node: &Node,
        params: &[crate::ir::MapParam],
        dim: usize,
        body: &[NodeId],
        conflicts: &mut Option<BTreeSet<(String, u64)>>,
        site: FaultSite,
    ) -> Result<(), Abort> {
        if dim == params.len() {
            self.charge(1)?;
            for unit in body {
                self.run_unit(state, *unit, conflicts)?;
            }
            return Ok(());
        }
        let param = &params[dim];
        let env = self.local_env();
        let begin = param
            .range
            .begin
            .eval(&env)
            .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
        let end = param
            .range
            .end
            .eval(&env)
            .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
        let step = param
            .range
            .step
            .eval(&env)
            .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
        if step < 1 {
            return Err(Abort::Fault(FaultKind::InvalidSubset, site));
        }
        let mut points: Vec<i64> = (begin..end.max(begin)).step_by(step as usize).collect();
        if self.options.reverse_maps {
            points.reverse();
        }
        for value in points {
            self.iter_vars.push((param.var.clone(), value));
            let result = self.iterate_domain(state, node, params, dim + 1, body, conflicts, site);
            self.iter_vars.pop();
            result?;
        }
        Ok(())
    }

    /// Symbols plus live iteration variables.
    fn local_env(&self) -> BTreeMap<String, i64> {
        let mut env = self.symbols.clone();
        for (var, val) in &self.iter_vars {
            env.insert(var.clone(), *val);
        }
        env
    }

    /// Evaluate a subset that must address exactly one element; returns the
    /// flat index with bounds checking.
    fn single_element(
        &self,
        subset: &SubsetRange,
        container: &str,
        site: FaultSite,
    ) -> Result<u64, Abort> {
        let env = self.local_env();
        let shape = self
            .shapes
            .get(container)
            .ok_or(Abort::Fault(FaultKind::UnknownName, site))?;
        if subset.rank() != shape.len() {
            return Err(Abort::Fault(FaultKind::InvalidSubset, site));
        }
        let mut flat: u64 = 0;
        for (dim, range) in subset.dims.iter().enumerate() {
            let begin = range
                .begin
                .eval(&env)
                .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
            let end = range
                .end
                .eval(&env)
                .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
            let step = range
                .step
                .eval(&env)
                .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
            if step < 1 || end - begin > step || end <= begin {
                return Err(Abort::Fault(FaultKind::InvalidSubset, site));
            }
            if begin < 0 || begin >= shape[dim] {
                return Err(Abort::Fault(FaultKind::OutOfBounds, site));
            }
            flat = flat * shape[dim] as u64 + begin as u64;
        }
        Ok(flat)
    }

    /// Enumerate all element coordinates of a subset (used by copy edges).
    fn enumerate_subset(
        &self,
        subset: &SubsetRange,
        site: FaultSite,
    ) -> Result<Vec<Vec<i64>>, Abort> {
        let env = self.local_env();
        let mut per_dim: Vec<Vec<i64>> = Vec::with_capacity(subset.rank());
        for range in &subset.dims {
            let begin = range
                .begin
                .eval(&env)
                .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
            let end = range
                .end
                .eval(&env)
                .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
            let step = range
                .step
                .eval(&env)
                .map_err(|e| Abort::Fault(eval_error_kind(&e), site))?;
            if step < 1 {
                return Err(Abort::Fault(FaultKind::InvalidSubset, site));
            }
            per_dim.push((begin..end.max(begin)).step_by(step as usize).collect());
        }
        let mut out = vec![Vec::new()];
        for dim in per_dim {
            let mut next = Vec::with_capacity(out.len() * dim.len().max(1));
            for prefix in &out {
                for v in &dim {
                    let mut p = prefix.clone();
                    p.push(*v);
                    next.push(p);
                }
            }
            out = next;
        }
        Ok(out)
    }

    fn flat_index(&self, container: &str, coords: &[i64], site: FaultSite) -> Result<u64, Abort> {
        let shape = self
            .shapes
            .get(container)
            .ok_or(Abort::Fault(FaultKind::UnknownName, site))?;
        if coords.len() != shape.len() {
            return Err(Abort::Fault(FaultKind::InvalidSubset, site));
        }
        let mut flat: u64 = 0;
        for (dim, c) in coords.iter().enumerate() {
            if *c < 0 || *c >= shape[dim] {
                return Err(Abort::Fault(FaultKind::OutOfBounds, site));
            }
            flat = flat * shape[dim] as u64 + *c as u64;
        }
        Ok(flat)
    }
}

fn combine(wcr: crate::ir::Wcr, old: Value, new: Value) -> Result<Value, EvalFault> {
    let op = match wcr {
        crate::ir::Wcr::Sum => crate::ir::SBinOp::Add,
        crate::ir::Wcr::Min => crate::ir::SBinOp::Min,
        crate::ir::Wcr::Max => crate::ir::SBinOp::Max,
    };
    value::eval_scalar(
        &crate::ir::ScalarExpr::Bin(
            op,
            Box::new(crate::ir::ScalarExpr::Name("__old".into())),
            Box::new(crate::ir::ScalarExpr::Name("__new".into())),
        ),
        &|n| match n {
            "__old" => Some(old),
            "__new" => Some(new),
            _ => None,
        },
        &mut NoBranches,
        &mut 0,
    )
}

fn fault_kind(f: EvalFault) -> FaultKind {
    match f {
        EvalFault::DivisionByZero => FaultKind::DivisionByZero,
        EvalFault::TypeError => FaultKind::TypeError,
        EvalFault::UnknownName => FaultKind::UnknownName,
    }
}

fn eval_error_kind(e: &EvalError) -> FaultKind {
    match e {
        EvalError::UnboundSymbol(_) => FaultKind::UnboundSymbol,
        EvalError::DivisionByZero => FaultKind::DivisionByZero,
        _ => FaultKind::InvalidSubset,
    }
}

/// Outcome of comparing two executions over the listed containers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Equal,
    Differs {
        container: String,
        index: u64,
        a: String,
        b: String,
    },
    StatusMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("unknown container `{0}`")]
    UnknownContainer(String),
}

/// Compare two outcomes over `containers` at tolerance `t_delta`.
///
/// Exactly one side faulted or hung: `StatusMismatch`. Floats differ when
/// `|x - y| > t_delta * (1 + max(|x|, |y|))` or exactly one is NaN;
/// `t_delta = 0` means bitwise comparison. Integers and booleans always
/// compare bitwise.
pub fn compare_states(
    a: &ExecutionOutcome,
    b: &ExecutionOutcome,
    containers: &[String],
    t_delta: f64,
) -> Result<Comparison, CompareError> {
    let a_ok = a.status.is_completed();
    let b_ok = b.status.is_completed();
    if a_ok != b_ok {
        return Ok(Comparison::StatusMismatch);
    }
    if !a_ok {
        // Both failed; no state to compare.
        return Ok(Comparison::Equal);
    }
    for name in containers {
        let buf_a = a
            .outputs
            .get(name)
            .ok_or_else(|| CompareError::UnknownContainer(name.clone()))?;
        let buf_b = b
            .outputs
            .get(name)
            .ok_or_else(|| CompareError::UnknownContainer(name.clone()))?;
        if buf_a.len() != buf_b.len() || buf_a.dtype() != buf_b.dtype() {
            return Err(CompareError::UnknownContainer(name.clone()));
        }
        for idx in 0..buf_a.len() {
            let equal = match (buf_a.get(idx), buf_b.get(idx)) {
                (Value::F64(x), Value::F64(y)) => float_eq(x, y, t_delta),
                (Value::F32(x), Value::F32(y)) => {
                    if t_delta == 0.0 {
                        x.to_bits() == y.to_bits()
                    } else {
                        float_eq(x as f64, y as f64, t_delta)
                    }
                }
                _ => buf_a.bit_eq(buf_b, idx),
            };
            if !equal {
                return Ok(Comparison::Differs {
                    container: name.clone(),
                    index: idx as u64,
                    a: buf_a.get(idx).to_string(),
                    b: buf_b.get(idx).to_string(),
                });
            }
        }
    }
    Ok(Comparison::Equal)
}

fn float_eq(x: f64, y: f64, t_delta: f64) -> bool {
    if t_delta == 0.0 {
        return x.to_bits() == y.to_bits();
    }
    if x.is_nan() != y.is_nan() {
        return false;
    }
    if x.is_nan() {
        return true;
    }
    (x - y).abs() <= t_delta * (1.0 + x.abs().max(y.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
            .collect()
    }

    fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out[i * n + j] += a[i * n + k] * b[k * n + j];
                }
            }
        }
        out
    }

    fn chain_input(n: usize, mats: [&[f64]; 4]) -> ExecutionInput {
        let program = fixtures::matrix_chain().program;
        let mut symbols = BTreeMap::new();
        symbols.insert("N".to_string(), n as i64);
        let mut input = ExecutionInput::zeros(&program, symbols).unwrap();
        for (name, data) in ["A", "B", "C", "D"].iter().zip(mats) {
            input
                .buffers
                .insert(name.to_string(), Buffer::F64(data.to_vec()));
        }
        input
    }

    #[test]
    fn identity_chain_yields_identity() {
        let fix = fixtures::matrix_chain();
        let id = identity(2);
        let input = chain_input(2, [&id, &id, &id, &id]);
        let outcome = run(&fix.program, &input, 1_000_000).unwrap();
        assert_eq!(outcome.status, Status::Completed);
        assert_eq!(outcome.outputs["R"], Buffer::F64(identity(2)));
    }

    #[test]
    fn chain_matches_dense_oracle() {
        // Random small-integer matrices keep f64 arithmetic exact, so the
        // interpreter must reproduce the dense oracle bit for bit.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 3usize;
        let mut mk = || -> Vec<f64> {
            (0..n * n).map(|_| rng.gen_range(-4..=4) as f64).collect()
        };
        let (a, b, c, d) = (mk(), mk(), mk(), mk());
        let fix = fixtures::matrix_chain();
        let input = chain_input(n, [&a, &b, &c, &d]);
        let outcome = run(&fix.program, &input, 1_000_000).unwrap();
        assert_eq!(outcome.status, Status::Completed);
        let expect = matmul(&matmul(&matmul(&a, &b, n), &c, n), &d, n);
        assert_eq!(outcome.outputs["R"], Buffer::F64(expect));
    }

    #[test]
    fn determinism_repeated_runs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 3usize;
        let mut mk = || -> Vec<f64> { (0..n * n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect() };
        let (a, b, c, d) = (mk(), mk(), mk(), mk());
        let fix = fixtures::matrix_chain();
        let input = chain_input(n, [&a, &b, &c, &d]);
        let first = run(&fix.program, &input, 1_000_000).unwrap();
        for _ in 0..99 {
            let again = run(&fix.program, &input, 1_000_000).unwrap();
            assert_eq!(again, first);
        }
    }

    #[test]
    fn out_of_bounds_faults_with_node() {
        // Shrink my_arr below the map's accessed range.
        let fix = fixtures::first_ten();
        let mut symbols = BTreeMap::new();
        symbols.insert("N".to_string(), 4i64);
        let input = ExecutionInput::zeros(&fix.program, symbols).unwrap();
        let outcome = run(&fix.program, &input, 1_000_000).unwrap();
        match outcome.status {
            Status::Fault {
                kind: FaultKind::OutOfBounds,
                site: FaultSite::Node(_),
            } => {}
            other => panic!("expected out-of-bounds fault, got {other:?}"),
        }
    }

    #[test]
    fn step_budget_times_out() {
        let fix = fixtures::matrix_chain();
        let input = chain_input(4, [&identity(4), &identity(4), &identity(4), &identity(4)]);
        let outcome = run(&fix.program, &input, 10).unwrap();
        assert_eq!(outcome.status, Status::Timeout);
    }

    #[test]
    fn loop_fixture_runs_and_covers_edges() {
        let fix = fixtures::countdown_loop();
        let mut input = ExecutionInput::zeros(&fix.program, BTreeMap::new()).unwrap();
        input
            .buffers
            .insert("src".into(), Buffer::I64(vec![10, 20, 30, 40]));
        let outcome = run(&fix.program, &input, 1_000_000).unwrap();
        assert_eq!(outcome.status, Status::Completed);
        // out[i-1] = src[i-1] * 2 + i for i = 4..1
        assert_eq!(
            outcome.outputs["out"],
            Buffer::I64(vec![10 * 2 + 1, 20 * 2 + 2, 30 * 2 + 3, 40 * 2 + 4])
        );
        assert_eq!(outcome.outputs["total"], Buffer::I64(vec![21 + 42 + 63 + 84]));
        // All four interstate edges executed.
        assert_eq!(outcome.coverage.interstate_edges.len(), 4);
    }

    #[test]
    fn integer_wcr_is_map_order_independent() {
        let fix = fixtures::countdown_loop();
        let mut input = ExecutionInput::zeros(&fix.program, BTreeMap::new()).unwrap();
        input
            .buffers
            .insert("src".into(), Buffer::I64(vec![3, -7, 11, 5]));
        let forward = run(&fix.program, &input, 1_000_000).unwrap();
        let reversed = run_observed(
            &fix.program,
            &input,
            ExecOptions {
                step_budget: 1_000_000,
                reverse_maps: true,
            },
            |_, _, _| {},
        )
        .unwrap();
        assert_eq!(forward.outputs, reversed.outputs);
    }

    #[test]
    fn write_conflict_without_wcr_faults() {
        use crate::ir::{DType, Program, TaskletCode};
        use crate::symexpr::{RangeDim, SubsetRange};
        let mut p = Program::new();
        p.add_container("out", DType::I64, vec![4.into()], false).unwrap();
        let s = p.add_state("s");
        let acc = p.add_access(s, "out").unwrap();
        let (entry, exit) = p
            .add_map(s, None, vec![("i", RangeDim::new(0, 4, 1))])
            .unwrap();
        let t = p
            .add_tasklet(s, Some(entry), &[], &["o"], TaskletCode::parse(&[("o", "i")]).unwrap())
            .unwrap();
        p.add_dep(s, entry, t).unwrap();
        // Every iteration writes index 0: a conflict without wcr.
        p.add_memlet(s, t, Some("o"), exit, None, "out", SubsetRange::point(&[0.into()]))
            .unwrap();
        p.add_memlet(
            s,
            exit,
            None,
            acc,
            None,
            "out",
            SubsetRange::new(vec![RangeDim::new(0, 1, 1)]),
        )
        .unwrap();
        let input = ExecutionInput::zeros(&p, BTreeMap::new()).unwrap();
        let outcome = run(&p, &input, 1_000_000).unwrap();
        assert!(
            matches!(
                outcome.status,
                Status::Fault {
                    kind: FaultKind::WriteConflict,
                    ..
                }
            ),
            "{:?}",
            outcome.status
        );
    }

    #[test]
    fn compare_states_semantics() {
        let fix = fixtures::scalar_chain();
        let mut input = ExecutionInput::zeros(&fix.program, BTreeMap::new()).unwrap();
        input.buffers.insert("x".into(), Buffer::F64(vec![0.5]));
        let a = run(&fix.program, &input, 1_000_000).unwrap();
        let b = run(&fix.program, &input, 1_000_000).unwrap();
        let containers = vec!["w".to_string()];
        assert_eq!(
            compare_states(&a, &b, &containers, 1e-5),
            Ok(Comparison::Equal)
        );
        // Perturb within and beyond the tolerance.
        let mut c = b.clone();
        let Buffer::F64(v) = c.outputs.get_mut("w").unwrap() else {
            unreachable!()
        };
        let w0 = v[0];
        v[0] = w0 + 1e-7;
        assert_eq!(
            compare_states(&a, &c, &containers, 1e-5),
            Ok(Comparison::Equal)
        );
        let Buffer::F64(v) = c.outputs.get_mut("w").unwrap() else {
            unreachable!()
        };
        v[0] = w0 + 1e-3 * (1.0 + w0.abs());
        assert!(matches!(
            compare_states(&a, &c, &containers, 1e-5),
            Ok(Comparison::Differs { .. })
        ));
        // Bitwise mode catches the tiniest change.
        let Buffer::F64(v) = c.outputs.get_mut("w").unwrap() else {
            unreachable!()
        };
        v[0] = f64::from_bits(w0.to_bits() ^ 1);
        assert!(matches!(
            compare_states(&a, &c, &containers, 0.0),
            Ok(Comparison::Differs { .. })
        ));
        // Status mismatch when exactly one side faulted.
        let mut faulted = b.clone();
        faulted.status = Status::Fault {
            kind: FaultKind::OutOfBounds,
            site: FaultSite::Node(NodeId(0)),
        };
        assert_eq!(
            compare_states(&a, &faulted, &containers, 1e-5),
            Ok(Comparison::StatusMismatch)
        );
        assert_eq!(
            compare_states(&faulted, &faulted, &containers, 1e-5),
            Ok(Comparison::Equal)
        );
        assert_eq!(
            compare_states(&a, &b, &["ghost".to_string()], 1e-5),
            Err(CompareError::UnknownContainer("ghost".into()))
        );
    }

    #[test]
    fn missing_input_is_shape_mismatch() {
        let fix = fixtures::scalar_chain();
        let input = ExecutionInput::new();
        assert!(matches!(
            run(&fix.program, &input, 1000),
            Err(InputError::InputShapeMismatch(_))
        ));
    }
}
