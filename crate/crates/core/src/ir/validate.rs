//! Structural validation of programs. Diagnostics are values, not errors;
//! a program is valid when no error-severity diagnostic remains.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Edge, EdgeId, Node, NodeId, NodeKind, Program, StateGraph, StateId};
use crate::symexpr::{Assumptions, SymExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    RankMismatch,
    UnbalancedScope,
    UnknownContainer,
    UnknownName,
    UnknownElement,
    DuplicateId,
    Cycle,
    UnreachableState,
    BadStartState,
    NameCollision,
    BadConnector,
    InvalidSubset,
    TypeMismatch,
    OverlapWithoutWcr,
    OpaqueSideEffects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementRef {
    Node(StateId, NodeId),
    Edge(StateId, EdgeId),
    InterstateEdge(EdgeId),
    State(StateId),
    Container(String),
    Symbol(String),
    Program,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub element: ElementRef,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {:?} at {:?}: {}",
            match self.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            },
            self.kind,
            self.element,
            self.message
        )
    }
}

impl Program {
    /// True when `validate` reports no error-severity diagnostics.
    pub fn is_valid(&self) -> bool {
        validate(self)
            .iter()
            .all(|d| d.severity != Severity::Error)
    }
}

struct Ctx<'p> {
    program: &'p Program,
    out: Vec<Diagnostic>,
}

impl Ctx<'_> {
    fn error(&mut self, kind: DiagnosticKind, element: ElementRef, message: impl Into<String>) {
        self.out.push(Diagnostic {
            severity: Severity::Error,
            kind,
            element,
            message: message.into(),
        });
    }

    fn warn(&mut self, kind: DiagnosticKind, element: ElementRef, message: impl Into<String>) {
        self.out.push(Diagnostic {
            severity: Severity::Warning,
            kind,
            element,
            message: message.into(),
        });
    }
}

/// Check every structural invariant; the returned list is empty iff the
/// program is well-formed with no warnings.
pub fn validate(program: &Program) -> Vec<Diagnostic> {
    let mut ctx = Ctx {
        program,
        out: Vec::new(),
    };
    check_tables(&mut ctx);
    check_state_machine(&mut ctx);
    let mut seen_nodes: BTreeMap<NodeId, StateId> = BTreeMap::new();
    let mut seen_edges: BTreeSet<EdgeId> = BTreeSet::new();
    for state in &program.states {
        for node in &state.nodes {
            if let Some(prev) = seen_nodes.insert(node.id, state.id) {
                ctx.error(
                    DiagnosticKind::DuplicateId,
                    ElementRef::Node(state.id, node.id),
                    format!("node id also used in state {prev}"),
                );
            }
        }
        for edge in &state.edges {
            if !seen_edges.insert(edge.id) {
                ctx.error(
                    DiagnosticKind::DuplicateId,
                    ElementRef::Edge(state.id, edge.id),
                    "edge id used more than once",
                );
            }
        }
        check_state(&mut ctx, state);
    }
    for edge in &program.interstate_edges {
        if !seen_edges.insert(edge.id) {
            ctx.error(
                DiagnosticKind::DuplicateId,
                ElementRef::InterstateEdge(edge.id),
                "edge id used more than once",
            );
        }
    }
    check_interstate(&mut ctx);
    ctx.out
}

fn check_tables(ctx: &mut Ctx) {
    let program = ctx.program;
    for (name, desc) in &program.containers {
        if name != &desc.name {
            ctx.error(
                DiagnosticKind::NameCollision,
                ElementRef::Container(name.clone()),
                format!("container table key `{name}` != descriptor name `{}`", desc.name),
            );
        }
        if program.symbols.contains_key(name) {
            ctx.error(
                DiagnosticKind::NameCollision,
                ElementRef::Container(name.clone()),
                "name used both as symbol and container",
            );
        }
        for e in &desc.shape {
            for sym in e.symbols() {
                if !program.symbols.contains_key(&sym) {
                    ctx.error(
                        DiagnosticKind::UnknownName,
                        ElementRef::Container(name.clone()),
                        format!("shape references undeclared symbol `{sym}`"),
                    );
                }
            }
        }
        // Shape extents must be provably positive under the declared
        // assumptions (sizes are never <= 0).
        let assumptions = program.assumptions();
        for e in &desc.shape {
            if assumptions.prove_le(e, &SymExpr::Const(0)) {
                ctx.error(
                    DiagnosticKind::InvalidSubset,
                    ElementRef::Container(name.clone()),
                    format!("shape extent `{e}` is never positive"),
                );
            }
        }
    }
}

fn check_state_machine(ctx: &mut Ctx) {
    let program = ctx.program;
    if program.state(program.start_state).is_none() {
        ctx.error(
            DiagnosticKind::BadStartState,
            ElementRef::Program,
            format!("start state {} does not exist", program.start_state),
        );
        return;
    }
    let mut reached: BTreeSet<StateId> = BTreeSet::new();
    let mut queue = VecDeque::from([program.start_state]);
    while let Some(s) = queue.pop_front() {
        if !reached.insert(s) {
            continue;
        }
        for (_, e) in program.interstate_out(s) {
            queue.push_back(e.dst);
        }
    }
    for state in &program.states {
        if !reached.contains(&state.id) {
            ctx.error(
                DiagnosticKind::UnreachableState,
                ElementRef::State(state.id),
                "state not reachable from the start state",
            );
        }
    }
}

fn check_interstate(ctx: &mut Ctx) {
    let program = ctx.program;
    // Names usable in guards/assignments: symbols and rank-0 non-float
    // containers (the scalar environment).
    let scalar_ok = |name: &str| -> bool {
        program.symbols.contains_key(name)
            || program
                .containers
                .get(name)
                .map(|d| d.rank() == 0 && !d.dtype.is_float())
                .unwrap_or(false)
    };
    for edge in &program.interstate_edges {
        for endpoint in [edge.src, edge.dst] {
            if program.state(endpoint).is_none() {
                ctx.error(
                    DiagnosticKind::UnknownElement,
                    ElementRef::InterstateEdge(edge.id),
                    format!("references missing state {endpoint}"),
                );
            }
        }
        let mut names = BTreeSet::new();
        edge.guard.free_names(&mut names);
        for (target, expr) in &edge.assignments {
            if !program.symbols.contains_key(target) {
                ctx.error(
                    DiagnosticKind::UnknownName,
                    ElementRef::InterstateEdge(edge.id),
                    format!("assignment target `{target}` is not a declared symbol"),
                );
            }
            expr.free_symbols(&mut names);
        }
        for name in names {
            if !scalar_ok(&name) {
                ctx.error(
                    DiagnosticKind::UnknownName,
                    ElementRef::InterstateEdge(edge.id),
                    format!("`{name}` is neither a symbol nor a scalar integer container"),
                );
            }
        }
    }
}

fn check_state(ctx: &mut Ctx, state: &StateGraph) {
    check_scopes(ctx, state);
    check_acyclic(ctx, state);
    for node in &state.nodes {
        check_node(ctx, state, node);
    }
    for edge in &state.edges {
        check_edge(ctx, state, edge);
    }
    check_write_overlap_heuristic(ctx, state);
}

fn scope_chain(state: &StateGraph, node: &Node) -> Option<Vec<NodeId>> {
    let mut chain = Vec::new();
    let mut cur = node.scope;
    while let Some(s) = cur {
        if chain.contains(&s) || chain.len() > state.nodes.len() {
            return None;
        }
        chain.push(s);
        cur = state.node(s).and_then(|p| p.scope);
    }
    Some(chain)
}

/// Iteration variables visible at a node (its enclosing scopes').
fn visible_vars(state: &StateGraph, node: &Node) -> BTreeSet<String> {
    let mut vars = BTreeSet::new();
    if let Some(chain) = scope_chain(state, node) {
        for scope in chain {
            if let Some(Node {
                kind: NodeKind::MapEntry { params },
                ..
            }) = state.node(scope)
            {
                for p in params {
                    vars.insert(p.var.clone());
                }
            }
        }
    }
    vars
}

fn check_scopes(ctx: &mut Ctx, state: &StateGraph) {
    for node in &state.nodes {
        if let Some(scope) = node.scope {
            match state.node(scope) {
                Some(parent) if matches!(parent.kind, NodeKind::MapEntry { .. }) => {}
                _ => ctx.error(
                    DiagnosticKind::UnbalancedScope,
                    ElementRef::Node(state.id, node.id),
                    format!("scope {scope} is not a MapEntry in this state"),
                ),
            }
            if scope_chain(state, node).is_none() {
                ctx.error(
                    DiagnosticKind::UnbalancedScope,
                    ElementRef::Node(state.id, node.id),
                    "cyclic scope nesting",
                );
            }
        }
        match &node.kind {
            NodeKind::MapEntry { params } => {
                let exits: Vec<_> = state
                    .nodes
                    .iter()
                    .filter(|n| matches!(n.kind, NodeKind::MapExit { entry } if entry == node.id))
                    .collect();
                if exits.len() != 1 {
                    ctx.error(
                        DiagnosticKind::UnbalancedScope,
                        ElementRef::Node(state.id, node.id),
                        format!("MapEntry has {} paired MapExit nodes", exits.len()),
                    );
                } else if exits[0].scope != node.scope {
                    ctx.error(
                        DiagnosticKind::UnbalancedScope,
                        ElementRef::Node(state.id, exits[0].id),
                        "MapExit scope differs from its MapEntry's scope",
                    );
                }
                if params.is_empty() {
                    ctx.error(
                        DiagnosticKind::UnbalancedScope,
                        ElementRef::Node(state.id, node.id),
                        "map has no iteration variables",
                    );
                }
                for p in params {
                    if ctx.program.symbols.contains_key(&p.var)
                        || ctx.program.containers.contains_key(&p.var)
                    {
                        ctx.error(
                            DiagnosticKind::NameCollision,
                            ElementRef::Node(state.id, node.id),
                            format!("iteration variable `{}` collides with a declared name", p.var),
                        );
                    }
                }
            }
            NodeKind::MapExit { entry } => {
                if !matches!(
                    state.node(*entry).map(|n| &n.kind),
                    Some(NodeKind::MapEntry { .. })
                ) {
                    ctx.error(
                        DiagnosticKind::UnbalancedScope,
                        ElementRef::Node(state.id, node.id),
                        "MapExit without matching MapEntry",
                    );
                }
            }
            _ => {}
        }
    }
}

fn check_acyclic(ctx: &mut Ctx, state: &StateGraph) {
    let mut indegree: BTreeMap<NodeId, usize> = state.nodes.iter().map(|n| (n.id, 0)).collect();
    for edge in &state.edges {
        if let Some(d) = indegree.get_mut(&edge.dst) {
            *d += 1;
        }
    }
    let mut queue: VecDeque<NodeId> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut visited = 0usize;
    while let Some(n) = queue.pop_front() {
        visited += 1;
        for e in state.out_edges(n) {
            if let Some(d) = indegree.get_mut(&e.dst) {
                *d -= 1;
                if *d == 0 {
                    queue.push_back(e.dst);
                }
            }
        }
    }
    if visited != state.nodes.len() {
        ctx.error(
            DiagnosticKind::Cycle,
            ElementRef::State(state.id),
            "state dataflow graph contains a cycle",
        );
    }
}

fn check_node(ctx: &mut Ctx, state: &StateGraph, node: &Node) {
    match &node.kind {
        NodeKind::Access { container } => {
            if ctx.program.containers.get(container).is_none() {
                ctx.error(
                    DiagnosticKind::UnknownContainer,
                    ElementRef::Node(state.id, node.id),
                    format!("unknown container `{container}`"),
                );
            }
        }
        NodeKind::Tasklet {
            inlets,
            outlets,
            code,
        } => {
            let visible = visible_vars(state, node);
            for outlet in outlets {
                if !code.assignments.contains_key(outlet) {
                    ctx.error(
                        DiagnosticKind::BadConnector,
                        ElementRef::Node(state.id, node.id),
                        format!("outlet `{outlet}` has no assignment"),
                    );
                }
            }
            for (target, expr) in &code.assignments {
                if !outlets.contains(target) {
                    ctx.error(
                        DiagnosticKind::BadConnector,
                        ElementRef::Node(state.id, node.id),
                        format!("assignment target `{target}` is not an outlet"),
                    );
                }
                let mut names = BTreeSet::new();
                expr.free_names(&mut names);
                for name in names {
                    let known = inlets.contains(&name)
                        || visible.contains(&name)
                        || ctx.program.symbols.contains_key(&name);
                    if !known {
                        ctx.error(
                            DiagnosticKind::UnknownName,
                            ElementRef::Node(state.id, node.id),
                            format!("`{name}` is not an inlet, iteration variable or symbol"),
                        );
                    }
                }
            }
            // Every inlet must be fed by exactly one incoming edge.
            for inlet in inlets {
                let feeds = state
                    .in_edges(node.id)
                    .filter(|e| e.dst_conn.as_deref() == Some(inlet))
                    .count();
                if feeds != 1 {
                    ctx.error(
                        DiagnosticKind::BadConnector,
                        ElementRef::Node(state.id, node.id),
                        format!("inlet `{inlet}` fed by {feeds} edges"),
                    );
                }
            }
        }
        NodeKind::MapEntry { params } => {
            let visible = visible_vars(state, node);
            for p in params {
                for e in [&p.range.begin, &p.range.end, &p.range.step] {
                    for sym in e.symbols() {
                        let known = ctx.program.symbols.contains_key(&sym)
                            || visible.contains(&sym)
                            || params.iter().any(|q| q.var == sym && q.var != p.var);
                        if !known {
                            ctx.error(
                                DiagnosticKind::UnknownName,
                                ElementRef::Node(state.id, node.id),
                                format!("map range references unknown name `{sym}`"),
                            );
                        }
                    }
                }
            }
        }
        NodeKind::MapExit { .. } => {}
        NodeKind::Opaque {
            may_have_side_effects,
            ..
        } => {
            if *may_have_side_effects {
                ctx.warn(
                    DiagnosticKind::OpaqueSideEffects,
                    ElementRef::Node(state.id, node.id),
                    "opaque node may have side effects the analysis cannot capture",
                );
            }
        }
    }
}

fn check_edge(ctx: &mut Ctx, state: &StateGraph, edge: &Edge) {
    let (Some(src), Some(dst)) = (state.node(edge.src), state.node(edge.dst)) else {
        ctx.error(
            DiagnosticKind::UnknownElement,
            ElementRef::Edge(state.id, edge.id),
            "edge endpoint missing from state",
        );
        return;
    };
    // Scope compatibility: an entry opens its scope for outgoing edges, an
    // exit closes it for incoming ones.
    let src_scope = match src.kind {
        NodeKind::MapEntry { .. } => Some(src.id),
        NodeKind::MapExit { entry } => state.node(entry).and_then(|n| n.scope),
        _ => src.scope,
    };
    let dst_scope = match dst.kind {
        NodeKind::MapEntry { .. } => dst.scope,
        NodeKind::MapExit { entry } => Some(entry),
        _ => dst.scope,
    };
    if src_scope != dst_scope {
        ctx.error(
            DiagnosticKind::UnbalancedScope,
            ElementRef::Edge(state.id, edge.id),
            format!(
                "edge crosses scopes illegally ({} -> {})",
                edge.src, edge.dst
            ),
        );
    }
    let Some(memlet) = &edge.memlet else {
        return;
    };
    let Some(desc) = ctx.program.containers.get(&memlet.container) else {
        ctx.error(
            DiagnosticKind::UnknownContainer,
            ElementRef::Edge(state.id, edge.id),
            format!("memlet references unknown container `{}`", memlet.container),
        );
        return;
    };
    if memlet.subset.rank() != desc.rank() {
        ctx.error(
            DiagnosticKind::RankMismatch,
            ElementRef::Edge(state.id, edge.id),
            format!(
                "memlet subset rank {} but container `{}` has rank {}",
                memlet.subset.rank(),
                desc.name,
                desc.rank()
            ),
        );
    }
    // Data may not flow directly between two computation nodes.
    if src.is_computation() && dst.is_computation() {
        let src_scopeish = matches!(src.kind, NodeKind::MapEntry { .. } | NodeKind::MapExit { .. });
        let dst_scopeish = matches!(dst.kind, NodeKind::MapEntry { .. } | NodeKind::MapExit { .. });
        if !src_scopeish && !dst_scopeish {
            ctx.error(
                DiagnosticKind::BadConnector,
                ElementRef::Edge(state.id, edge.id),
                "memlet directly connects two computation nodes",
            );
        }
    }
    // Copy edges: same dtype and rank on both sides, memlet names the source.
    if let (Some(src_c), Some(dst_c)) = (src.container(), dst.container()) {
        if memlet.container != src_c {
            ctx.error(
                DiagnosticKind::UnknownContainer,
                ElementRef::Edge(state.id, edge.id),
                "copy edge memlet must name the source container",
            );
        }
        let src_desc = ctx.program.containers.get(src_c);
        let dst_desc = ctx.program.containers.get(dst_c);
        if let (Some(a), Some(b)) = (src_desc, dst_desc) {
            if a.dtype != b.dtype {
                ctx.error(
                    DiagnosticKind::TypeMismatch,
                    ElementRef::Edge(state.id, edge.id),
                    format!("copy between dtypes {:?} and {:?}", a.dtype, b.dtype),
                );
            }
            if a.rank() != b.rank() {
                ctx.error(
                    DiagnosticKind::RankMismatch,
                    ElementRef::Edge(state.id, edge.id),
                    "copy between containers of different rank",
                );
            }
        }
    }
    // Subset expressions may reference symbols and visible iteration
    // variables (of the innermost endpoint).
    let mut visible = visible_vars(state, src);
    visible.extend(visible_vars(state, dst));
    if let NodeKind::MapEntry { params } = &src.kind {
        visible.extend(params.iter().map(|p| p.var.clone()));
    }
    if let NodeKind::MapExit { entry } = &dst.kind {
        if let Some(Node {
            kind: NodeKind::MapEntry { params },
            ..
        }) = state.node(*entry)
        {
            visible.extend(params.iter().map(|p| p.var.clone()));
        }
    }
    for sym in memlet.subset.free_symbols() {
        if !ctx.program.symbols.contains_key(&sym) && !visible.contains(&sym) {
            ctx.error(
                DiagnosticKind::UnknownName,
                ElementRef::Edge(state.id, edge.id),
                format!("subset references unknown name `{sym}`"),
            );
        }
    }
    // Provably empty subsets move no data.
    let assumptions = ctx.program.assumptions();
    for dim in &memlet.subset.dims {
        if assumptions.prove_le(&dim.end, &dim.begin) {
            ctx.error(
                DiagnosticKind::InvalidSubset,
                ElementRef::Edge(state.id, edge.id),
                format!("subset dimension {}:{} is provably empty", dim.begin, dim.end),
            );
        }
    }
}

/// A write inside a map without wcr should depend on every iteration variable
/// of its enclosing maps (directly or through the bounds of another variable
/// it depends on); otherwise iterations may write the same location.
fn check_write_overlap_heuristic(ctx: &mut Ctx, state: &StateGraph) {
    for edge in &state.edges {
        let Some(memlet) = &edge.memlet else { continue };
        if memlet.wcr.is_some() {
            continue;
        }
        let Some(dst) = state.node(edge.dst) else { continue };
        let is_write = dst.container().is_some() || matches!(dst.kind, NodeKind::MapExit { .. });
        let Some(src) = state.node(edge.src) else { continue };
        if !is_write || src.container().is_some() {
            continue;
        }
        let enclosing = visible_vars(state, src);
        if enclosing.is_empty() {
            continue;
        }
        // Transitive dependency closure through map parameter bounds.
        let mut depends = memlet.subset.free_symbols();
        loop {
            let mut grew = false;
            for node in &state.nodes {
                if let NodeKind::MapEntry { params } = &node.kind {
                    for p in params {
                        if depends.contains(&p.var) {
                            for e in [&p.range.begin, &p.range.end, &p.range.step] {
                                for s in e.symbols() {
                                    grew |= depends.insert(s);
                                }
                            }
                        }
                    }
                }
            }
            if !grew {
                break;
            }
        }
        for var in &enclosing {
            if !depends.contains(var) {
                ctx.warn(
                    DiagnosticKind::OverlapWithoutWcr,
                    ElementRef::Edge(state.id, edge.id),
                    format!(
                        "write to `{}` ignores iteration variable `{var}` and has no wcr",
                        memlet.container
                    ),
                );
            }
        }
    }
}

impl Program {
    /// Assumptions from the symbol table: declared bounds, default `[1, inf)`.
    pub fn assumptions(&self) -> Assumptions {
        let mut a = Assumptions::new();
        for (name, decl) in &self.symbols {
            a = a.assume(name.clone(), decl.min.or(Some(1)), decl.max);
        }
        a
    }
}
