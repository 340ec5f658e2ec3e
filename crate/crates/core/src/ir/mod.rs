//! Parametric dataflow program representation.
//!
//! A [`Program`] is a state machine of acyclic dataflow multigraphs. Graph
//! nodes are data containers (access nodes) and computations (tasklets, map
//! scopes, opaque placeholders); edges carry [`Memlet`]s annotated with the
//! exact data subset they move. Container sizes are symbolic expressions, so
//! the relationship between size parameters and data stays intact.

mod build;
mod code;
mod dot;
mod json;
mod validate;

pub use build::{BuildError, LoopHandle};
pub use code::{parse_bool_expr, parse_scalar_expr, BoolExpr, CmpOp, SBinOp, ScalarExpr, TaskletCode};
pub use dot::program_dot;
pub use json::{deserialize, serialize, DeserializeError, SerializeError, FORMAT_VERSION};
pub use validate::{validate, Diagnostic, DiagnosticKind, ElementRef, Severity};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::symexpr::{RangeDim, SubsetRange, SymExpr};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $prefix:literal) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// Identifier of a dataflow node, unique program-wide and stable across
    /// transformation application.
    NodeId,
    "n"
);
id_type!(
    /// Identifier of a state in the program's state machine.
    StateId,
    "s"
);
id_type!(
    /// Identifier of a dataflow or interstate edge, unique program-wide.
    EdgeId,
    "e"
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    I64,
    I32,
    Bool,
}

impl DType {
    pub fn is_float(self) -> bool {
        matches!(self, DType::F64 | DType::F32)
    }

    pub fn is_int(self) -> bool {
        matches!(self, DType::I64 | DType::I32)
    }
}

/// A data container: named, typed, symbolically shaped storage.
///
/// `transient` containers are managed by the program and invisible outside of
/// it; non-transient containers are externally visible (inputs, outputs,
/// persistent data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDescriptor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<SymExpr>,
    pub transient: bool,
}

impl DataDescriptor {
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Symbolic total element count.
    pub fn size_sym(&self) -> SymExpr {
        let mut acc = SymExpr::Const(1);
        for e in &self.shape {
            acc = acc.mul(e.clone());
        }
        acc.simplify()
    }
}

/// Optional user-declared bounds for a symbol.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolDecl {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max: Option<i64>,
}

/// Write-conflict-resolution combiner for overlapping writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wcr {
    Sum,
    Min,
    Max,
}

/// Data movement annotation: which container and which exact subset an edge
/// reads or writes. A `wcr` combiner makes the write a deterministic
/// read-modify-write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memlet {
    pub container: String,
    pub subset: SubsetRange,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wcr: Option<Wcr>,
}

impl Memlet {
    pub fn new(container: impl Into<String>, subset: SubsetRange) -> Self {
        Memlet {
            container: container.into(),
            subset,
            wcr: None,
        }
    }

    pub fn with_wcr(mut self, wcr: Wcr) -> Self {
        self.wcr = Some(wcr);
        self
    }
}

/// One iteration dimension of a map scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapParam {
    pub var: String,
    pub range: RangeDim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Reference point for reads/writes of a container within a state.
    Access { container: String },
    /// Scalar computation: one single-assignment expression per outlet.
    Tasklet {
        inlets: Vec<String>,
        outlets: Vec<String>,
        code: TaskletCode,
    },
    /// Parallel scope over an iteration domain; its node id is the scope id.
    MapEntry { params: Vec<MapParam> },
    /// Closes the scope opened by `entry`.
    MapExit { entry: NodeId },
    /// Placeholder for a callback or library call the IR cannot analyze.
    Opaque {
        label: String,
        may_have_side_effects: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    /// Enclosing map scope (`None` at state top level).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scope: Option<NodeId>,
    pub kind: NodeKind,
}

impl Node {
    pub fn is_computation(&self) -> bool {
        matches!(
            self.kind,
            NodeKind::Tasklet { .. }
                | NodeKind::MapEntry { .. }
                | NodeKind::MapExit { .. }
                | NodeKind::Opaque { .. }
        )
    }

    pub fn container(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::Access { container } => Some(container),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub src: NodeId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub src_conn: Option<String>,
    pub dst: NodeId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dst_conn: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub memlet: Option<Memlet>,
}

/// A single state: an acyclic dataflow multigraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGraph {
    pub id: StateId,
    pub name: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl StateGraph {
    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn edge(&self, id: EdgeId) -> Option<&Edge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn in_edges(&self, node: NodeId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.dst == node)
    }

    pub fn out_edges(&self, node: NodeId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.src == node)
    }

    /// Nodes whose scope chain contains `scope`.
    pub fn scope_members(&self, scope: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| {
                let mut cur = n.scope;
                while let Some(s) = cur {
                    if s == scope {
                        return true;
                    }
                    cur = self.node(s).and_then(|p| p.scope);
                }
                false
            })
            .map(|n| n.id)
            .collect()
    }

    /// The MapExit paired with the given MapEntry, if any.
    pub fn exit_of(&self, entry: NodeId) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| matches!(n.kind, NodeKind::MapExit { entry: e } if e == entry))
            .map(|n| n.id)
    }
}

/// A guarded transition between states, optionally assigning symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterstateEdge {
    pub id: EdgeId,
    pub src: StateId,
    pub dst: StateId,
    pub guard: BoolExpr,
    pub assignments: Vec<(String, SymExpr)>,
}

/// A complete program: symbol table, container table and the state machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub symbols: std::collections::BTreeMap<String, SymbolDecl>,
    pub containers: std::collections::BTreeMap<String, DataDescriptor>,
    /// Sorted by state id.
    pub states: Vec<StateGraph>,
    /// Order is transition priority: when several guards hold, the
    /// lowest-indexed edge wins.
    pub interstate_edges: Vec<InterstateEdge>,
    pub start_state: StateId,
    pub(crate) next_node_id: u32,
    pub(crate) next_edge_id: u32,
    pub(crate) next_state_id: u32,
}

impl Program {
    pub fn state(&self, id: StateId) -> Option<&StateGraph> {
        self.states.iter().find(|s| s.id == id)
    }

    pub fn state_mut(&mut self, id: StateId) -> Option<&mut StateGraph> {
        self.states.iter_mut().find(|s| s.id == id)
    }

    /// State containing the given node.
    pub fn state_of_node(&self, node: NodeId) -> Option<StateId> {
        self.states
            .iter()
            .find(|s| s.node(node).is_some())
            .map(|s| s.id)
    }

    pub fn node(&self, id: NodeId) -> Option<(&StateGraph, &Node)> {
        self.states
            .iter()
            .find_map(|s| s.node(id).map(|n| (s, n)))
    }

    pub fn descriptor(&self, name: &str) -> Option<&DataDescriptor> {
        self.containers.get(name)
    }

    pub fn interstate_out(&self, state: StateId) -> impl Iterator<Item = (usize, &InterstateEdge)> {
        self.interstate_edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.src == state)
    }

    /// All container names a state reads, with the subsets read. Reads are
    /// memlets on edges leaving an access node, plus wcr write targets (the
    /// combiner reads the previous contents).
    pub fn state_reads(&self, state: &StateGraph) -> Vec<(String, SubsetRange)> {
        let mut out = Vec::new();
        for edge in &state.edges {
            let Some(memlet) = &edge.memlet else { continue };
            let src_is_access = state
                .node(edge.src)
                .map(|n| n.container().is_some())
                .unwrap_or(false);
            if src_is_access {
                out.push((memlet.container.clone(), memlet.subset.clone()));
            }
            if memlet.wcr.is_some() && self.edge_writes_to_access(state, edge) {
                out.push((memlet.container.clone(), memlet.subset.clone()));
            }
        }
        out
    }

    /// All container names a state writes, with the subsets written. Writes
    /// are memlets on edges entering an access node (directly or as a copy).
    pub fn state_writes(&self, state: &StateGraph) -> Vec<(String, SubsetRange)> {
        let mut out = Vec::new();
        for edge in &state.edges {
            let Some(memlet) = &edge.memlet else { continue };
            if let Some(dst) = state.node(edge.dst) {
                if let Some(container) = dst.container() {
                    // Copy edges (access to access) write the destination
                    // container at the memlet subset.
                    out.push((container.to_string(), memlet.subset.clone()));
                }
            }
        }
        out
    }

    fn edge_writes_to_access(&self, state: &StateGraph, edge: &Edge) -> bool {
        state
            .node(edge.dst)
            .map(|n| n.container().is_some())
            .unwrap_or(false)
    }

    /// Symbols referenced anywhere in the program body (shapes, subsets,
    /// guards, assignments, tasklet code), excluding map iteration variables.
    pub fn used_symbols(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut iter_vars = BTreeSet::new();
        for state in &self.states {
            for node in &state.nodes {
                match &node.kind {
                    NodeKind::MapEntry { params } => {
                        for p in params {
                            iter_vars.insert(p.var.clone());
                            p.range.begin.free_symbols(&mut out);
                            p.range.end.free_symbols(&mut out);
                            p.range.step.free_symbols(&mut out);
                        }
                    }
                    NodeKind::Tasklet { inlets, code, .. } => {
                        let mut names = BTreeSet::new();
                        for expr in code.assignments.values() {
                            expr.free_names(&mut names);
                        }
                        for inlet in inlets {
                            names.remove(inlet);
                        }
                        out.extend(names);
                    }
                    _ => {}
                }
            }
            for edge in &state.edges {
                if let Some(m) = &edge.memlet {
                    out.extend(m.subset.free_symbols());
                }
            }
        }
        for desc in self.containers.values() {
            for e in &desc.shape {
                e.free_symbols(&mut out);
            }
        }
        for edge in &self.interstate_edges {
            edge.guard.free_names(&mut out);
            for (target, expr) in &edge.assignments {
                out.insert(target.clone());
                expr.free_symbols(&mut out);
            }
        }
        // Iteration variables and container names are not symbols.
        for v in iter_vars {
            out.remove(&v);
        }
        let container_names: Vec<_> = self.containers.keys().cloned().collect();
        for c in container_names {
            out.remove(&c);
        }
        // Tasklet inlet names resolve locally, drop anything that is not in
        // the symbol table and not free anywhere else. Names that remain and
        // are undeclared get flagged by validation instead.
        out
    }
}
