//! Graphviz export for debugging.

use std::fmt::Write;

use super::{NodeKind, Program};

/// Render the program as a DOT digraph, one cluster per state.
pub fn program_dot(program: &Program) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph program {{");
    let _ = writeln!(out, "  compound=true;");
    for state in &program.states {
        let _ = writeln!(out, "  subgraph cluster_{} {{", state.id.0);
        let _ = writeln!(out, "    label=\"{} ({})\";", state.name, state.id);
        for node in &state.nodes {
            let (label, shape) = match &node.kind {
                NodeKind::Access { container } => (container.clone(), "ellipse"),
                NodeKind::Tasklet { code, .. } => {
                    let body = code
                        .assignments
                        .iter()
                        .map(|(k, v)| format!("{k} = {v}"))
                        .collect::<Vec<_>>()
                        .join("; ");
                    (body, "box")
                }
                NodeKind::MapEntry { params } => {
                    let vars = params
                        .iter()
                        .map(|p| {
                            format!("{}={}:{}:{}", p.var, p.range.begin, p.range.end, p.range.step)
                        })
                        .collect::<Vec<_>>()
                        .join(", ");
                    (format!("map[{vars}]"), "trapezium")
                }
                NodeKind::MapExit { .. } => ("map end".to_string(), "invtrapezium"),
                NodeKind::Opaque { label, .. } => (format!("opaque: {label}"), "octagon"),
            };
            let _ = writeln!(
                out,
                "    {} [label=\"{}: {}\", shape={}];",
                node.id.0,
                node.id,
                label.replace('"', "'"),
                shape
            );
        }
        for edge in &state.edges {
            let label = match &edge.memlet {
                Some(m) => {
                    let wcr = match m.wcr {
                        Some(w) => format!(" (wcr {w:?})"),
                        None => String::new(),
                    };
                    format!("{}{}{}", m.container, m.subset, wcr)
                }
                None => String::new(),
            };
            let _ = writeln!(
                out,
                "    {} -> {} [label=\"{}\"];",
                edge.src.0,
                edge.dst.0,
                label.replace('"', "'")
            );
        }
        let _ = writeln!(out, "  }}");
    }
    // Interstate edges connect state anchors (first node or invisible point).
    for state in &program.states {
        if state.nodes.is_empty() {
            let _ = writeln!(
                out,
                "  empty_{} [label=\"{}\", shape=point];",
                state.id.0, state.id
            );
        }
    }
    for edge in &program.interstate_edges {
        let anchor = |sid| {
            program
                .state(sid)
                .and_then(|s| s.nodes.first())
                .map(|n| n.id.0.to_string())
                .unwrap_or_else(|| format!("empty_{}", {
                    let super::StateId(raw) = sid;
                    raw
                }))
        };
        let assigns = edge
            .assignments
            .iter()
            .map(|(k, v)| format!("{k}:={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(
            out,
            "  {} -> {} [style=dashed, ltail=cluster_{}, lhead=cluster_{}, label=\"{} {}\"];",
            anchor(edge.src),
            anchor(edge.dst),
            edge.src.0,
            edge.dst.0,
            edge.guard,
            assigns
        );
    }
    let _ = writeln!(out, "}}");
    out
}
