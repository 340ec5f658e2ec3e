//! Program construction. Every builder hands out fresh, stable identifiers;
//! identifiers are never reused, even after elements are removed.

use thiserror::Error;

use super::{
    BoolExpr, CmpOp, DType, DataDescriptor, Edge, EdgeId, InterstateEdge, MapParam, Memlet, Node,
    NodeId, NodeKind, Program, StateGraph, StateId, SymbolDecl, TaskletCode,
};
use crate::symexpr::{RangeDim, SubsetRange, SymExpr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("unknown container `{0}`")]
    UnknownContainer(String),
    #[error("unknown state {0}")]
    UnknownState(StateId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// States and edges created by [`Program::add_loop`].
#[derive(Debug, Clone, Copy)]
pub struct LoopHandle {
    pub guard_state: StateId,
    pub init_edge: EdgeId,
    pub enter_edge: EdgeId,
    pub back_edge: EdgeId,
    pub exit_edge: Option<EdgeId>,
}

impl Default for Program {
    fn default() -> Self {
        Self::new()
    }
}

impl Program {
    pub fn new() -> Self {
        Program {
            symbols: Default::default(),
            containers: Default::default(),
            states: Vec::new(),
            interstate_edges: Vec::new(),
            start_state: StateId(0),
            next_node_id: 0,
            next_edge_id: 0,
            next_state_id: 0,
        }
    }

    pub fn fresh_node_id(&mut self) -> NodeId {
        let id = NodeId(self.next_node_id);
        self.next_node_id += 1;
        id
    }

    pub fn fresh_edge_id(&mut self) -> EdgeId {
        let id = EdgeId(self.next_edge_id);
        self.next_edge_id += 1;
        id
    }

    pub fn fresh_state_id(&mut self) -> StateId {
        let id = StateId(self.next_state_id);
        self.next_state_id += 1;
        id
    }

    pub fn add_symbol(&mut self, name: impl Into<String>) -> Result<(), BuildError> {
        self.add_symbol_constrained(name, None, None)
    }

    pub fn add_symbol_constrained(
        &mut self,
        name: impl Into<String>,
        min: Option<i64>,
        max: Option<i64>,
    ) -> Result<(), BuildError> {
        let name = name.into();
        if self.symbols.contains_key(&name) || self.containers.contains_key(&name) {
            return Err(BuildError::DuplicateName(name));
        }
        self.symbols.insert(name, SymbolDecl { min, max });
        Ok(())
    }

    pub fn add_container(
        &mut self,
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<SymExpr>,
        transient: bool,
    ) -> Result<(), BuildError> {
        let name = name.into();
        if self.symbols.contains_key(&name) || self.containers.contains_key(&name) {
            return Err(BuildError::DuplicateName(name));
        }
        self.containers.insert(
            name.clone(),
            DataDescriptor {
                name,
                dtype,
                shape,
                transient,
            },
        );
        Ok(())
    }

    /// Rank-0 container holding a single element.
    pub fn add_scalar(
        &mut self,
        name: impl Into<String>,
        dtype: DType,
        transient: bool,
    ) -> Result<(), BuildError> {
        self.add_container(name, dtype, Vec::new(), transient)
    }

    /// Adds a state; the first state added becomes the start state.
    pub fn add_state(&mut self, name: impl Into<String>) -> StateId {
        let id = self.fresh_state_id();
        self.states.push(StateGraph {
            id,
            name: name.into(),
            nodes: Vec::new(),
            edges: Vec::new(),
        });
        if self.states.len() == 1 {
            self.start_state = id;
        }
        id
    }

    pub fn set_start(&mut self, state: StateId) {
        self.start_state = state;
    }

    fn push_node(
        &mut self,
        state: StateId,
        scope: Option<NodeId>,
        kind: NodeKind,
    ) -> Result<NodeId, BuildError> {
        let id = self.fresh_node_id();
        let st = self
            .state_mut(state)
            .ok_or(BuildError::UnknownState(state))?;
        st.nodes.push(Node { id, scope, kind });
        Ok(id)
    }

    pub fn add_access(
        &mut self,
        state: StateId,
        container: impl Into<String>,
    ) -> Result<NodeId, BuildError> {
        self.add_access_in(state, None, container)
    }

    pub fn add_access_in(
        &mut self,
        state: StateId,
        scope: Option<NodeId>,
        container: impl Into<String>,
    ) -> Result<NodeId, BuildError> {
        let container = container.into();
        if !self.containers.contains_key(&container) {
            return Err(BuildError::UnknownContainer(container));
        }
        self.push_node(state, scope, NodeKind::Access { container })
    }

    pub fn add_tasklet(
        &mut self,
        state: StateId,
        scope: Option<NodeId>,
        inlets: &[&str],
        outlets: &[&str],
        code: TaskletCode,
    ) -> Result<NodeId, BuildError> {
        self.push_node(
            state,
            scope,
            NodeKind::Tasklet {
                inlets: inlets.iter().map(|s| s.to_string()).collect(),
                outlets: outlets.iter().map(|s| s.to_string()).collect(),
                code,
            },
        )
    }

    pub fn add_opaque(
        &mut self,
        state: StateId,
        scope: Option<NodeId>,
        label: impl Into<String>,
        may_have_side_effects: bool,
    ) -> Result<NodeId, BuildError> {
        self.push_node(
            state,
            scope,
            NodeKind::Opaque {
                label: label.into(),
                may_have_side_effects,
            },
        )
    }

    /// Adds a paired MapEntry/MapExit; returns `(entry, exit)`. Nodes in the
    /// map body use `entry` as their scope.
    pub fn add_map(
        &mut self,
        state: StateId,
        scope: Option<NodeId>,
        params: Vec<(impl Into<String>, RangeDim)>,
    ) -> Result<(NodeId, NodeId), BuildError> {
        let params = params
            .into_iter()
            .map(|(var, range)| MapParam {
                var: var.into(),
                range,
            })
            .collect();
        let entry = self.push_node(state, scope, NodeKind::MapEntry { params })?;
        let exit = self.push_node(state, scope, NodeKind::MapExit { entry })?;
        Ok((entry, exit))
    }

    pub fn add_edge(
        &mut self,
        state: StateId,
        src: NodeId,
        src_conn: Option<&str>,
        dst: NodeId,
        dst_conn: Option<&str>,
        memlet: Option<Memlet>,
    ) -> Result<EdgeId, BuildError> {
        if let Some(m) = &memlet {
            if !self.containers.contains_key(&m.container) {
                return Err(BuildError::UnknownContainer(m.container.clone()));
            }
        }
        let id = self.fresh_edge_id();
        let st = self
            .state_mut(state)
            .ok_or(BuildError::UnknownState(state))?;
        if st.node(src).is_none() {
            return Err(BuildError::UnknownNode(src));
        }
        if st.node(dst).is_none() {
            return Err(BuildError::UnknownNode(dst));
        }
        st.edges.push(Edge {
            id,
            src,
            src_conn: src_conn.map(str::to_string),
            dst,
            dst_conn: dst_conn.map(str::to_string),
            memlet,
        });
        Ok(id)
    }

    pub fn add_memlet(
        &mut self,
        state: StateId,
        src: NodeId,
        src_conn: Option<&str>,
        dst: NodeId,
        dst_conn: Option<&str>,
        container: impl Into<String>,
        subset: SubsetRange,
    ) -> Result<EdgeId, BuildError> {
        self.add_edge(
            state,
            src,
            src_conn,
            dst,
            dst_conn,
            Some(Memlet::new(container.into(), subset)),
        )
    }

    /// Dependency edge carrying no data.
    pub fn add_dep(
        &mut self,
        state: StateId,
        src: NodeId,
        dst: NodeId,
    ) -> Result<EdgeId, BuildError> {
        self.add_edge(state, src, None, dst, None, None)
    }

    pub fn add_interstate(
        &mut self,
        src: StateId,
        dst: StateId,
        guard: BoolExpr,
        assignments: Vec<(impl Into<String>, SymExpr)>,
    ) -> Result<EdgeId, BuildError> {
        for s in [src, dst] {
            if self.state(s).is_none() {
                return Err(BuildError::UnknownState(s));
            }
        }
        let id = self.fresh_edge_id();
        self.interstate_edges.push(InterstateEdge {
            id,
            src,
            dst,
            guard,
            assignments: assignments
                .into_iter()
                .map(|(k, v)| (k.into(), v))
                .collect(),
        });
        Ok(id)
    }

    /// Builds a counted state-machine loop around `body`:
    ///
    /// ```text
    /// pred --[var := begin]--> guard --[cond]--> body --[var := var + step]--> guard
    /// ```
    ///
    /// `cond` is `var < end` for positive steps and `var > end` for negative
    /// steps (`end` exclusive in both directions). When `after` is given, a
    /// fourth edge `guard --[!cond]--> after` is added; otherwise execution
    /// halts at the guard once the condition fails.
    #[allow(clippy::too_many_arguments)]
    pub fn add_loop(
        &mut self,
        pred: StateId,
        body: StateId,
        after: Option<StateId>,
        var: &str,
        begin: impl Into<SymExpr>,
        end: impl Into<SymExpr>,
        step: i64,
    ) -> Result<LoopHandle, BuildError> {
        if !self.symbols.contains_key(var) {
            self.add_symbol(var)?;
        }
        let begin = begin.into();
        let end = end.into();
        let guard_state = self.add_state(format!("loop_{var}"));
        let (enter_cond, exit_cond) = if step >= 0 {
            (
                BoolExpr::cmp(CmpOp::Lt, var, end.clone()),
                BoolExpr::cmp(CmpOp::Ge, var, end),
            )
        } else {
            (
                BoolExpr::cmp(CmpOp::Gt, var, end.clone()),
                BoolExpr::cmp(CmpOp::Le, var, end),
            )
        };
        let init_edge = self.add_interstate(pred, guard_state, BoolExpr::True, vec![(var, begin)])?;
        let enter_edge = self.add_interstate(
            guard_state,
            body,
            enter_cond,
            Vec::<(String, SymExpr)>::new(),
        )?;
        let back_edge = self.add_interstate(
            body,
            guard_state,
            BoolExpr::True,
            vec![(var, SymExpr::sym(var).add(step))],
        )?;
        let exit_edge = match after {
            Some(after) => Some(self.add_interstate(
                guard_state,
                after,
                exit_cond,
                Vec::<(String, SymExpr)>::new(),
            )?),
            None => None,
        };
        Ok(LoopHandle {
            guard_state,
            init_edge,
            enter_edge,
            back_edge,
            exit_edge,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate;

    #[test]
    fn counted_loop_has_three_edges_without_continuation() {
        let mut p = Program::new();
        p.add_symbol("N").unwrap();
        p.add_container("a", DType::I64, vec![SymExpr::sym("N")], false)
            .unwrap();
        let pre = p.add_state("pre");
        let body = p.add_state("body");
        let acc = p.add_access(body, "a").unwrap();
        let t = p
            .add_tasklet(
                body,
                None,
                &["x"],
                &["y"],
                TaskletCode::parse(&[("y", "x + 1")]).unwrap(),
            )
            .unwrap();
        let acc2 = p.add_access(body, "a").unwrap();
        p.add_memlet(
            body,
            acc,
            None,
            t,
            Some("x"),
            "a",
            SubsetRange::point(&[SymExpr::sym("i")]),
        )
        .unwrap();
        p.add_memlet(
            body,
            t,
            Some("y"),
            acc2,
            None,
            "a",
            SubsetRange::point(&[SymExpr::sym("i")]),
        )
        .unwrap();
        let handle = p.add_loop(pre, body, None, "i", 0, SymExpr::sym("N"), 1).unwrap();
        assert_eq!(p.interstate_edges.len(), 3);
        assert!(handle.exit_edge.is_none());
        let enter = p
            .interstate_edges
            .iter()
            .find(|e| e.id == handle.enter_edge)
            .unwrap();
        assert_eq!(enter.guard.to_string(), "i < N");
        let back = p
            .interstate_edges
            .iter()
            .find(|e| e.id == handle.back_edge)
            .unwrap();
        assert_eq!(back.assignments[0].0, "i");
        assert_eq!(back.assignments[0].1.to_string(), "i + 1");
        let diags = validate(&p);
        assert!(diags.is_empty(), "{diags:?}");
    }

    #[test]
    fn unknown_container_is_rejected() {
        let mut p = Program::new();
        let s = p.add_state("s");
        assert_eq!(
            p.add_access(s, "ghost"),
            Err(BuildError::UnknownContainer("ghost".into()))
        );
        let t = p
            .add_tasklet(s, None, &[], &["o"], TaskletCode::parse(&[("o", "1")]).unwrap())
            .unwrap();
        assert_eq!(
            p.add_memlet(s, t, Some("o"), t, None, "ghost", SubsetRange::scalar()),
            Err(BuildError::UnknownContainer("ghost".into()))
        );
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = Program::new();
        p.add_symbol("N").unwrap();
        assert_eq!(p.add_symbol("N"), Err(BuildError::DuplicateName("N".into())));
        assert_eq!(
            p.add_container("N", DType::F64, vec![], false),
            Err(BuildError::DuplicateName("N".into()))
        );
    }
}
