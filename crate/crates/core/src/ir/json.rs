//! Canonical `.cfprog.json` serialization.
//!
//! The byte encoding is a pure function of the structural value: maps are
//! ordered, vectors are sorted by id, struct fields serialize in declaration
//! order and expressions print canonically. Equal programs therefore produce
//! identical bytes, and the round trip is the identity, node ids included.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{validate, Program, Severity};

pub const FORMAT_NAME: &str = "cfprog";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SerializeError {
    #[error("program fails validation: {0}")]
    InvalidProgram(String),
    #[error("encoding failed: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum DeserializeError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    program: Program,
}

/// Serialize a valid program to canonical bytes.
pub fn serialize(program: &Program) -> Result<Vec<u8>, SerializeError> {
    let errors: Vec<String> = validate(program)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(SerializeError::InvalidProgram(errors.join("; ")));
    }
    let mut program = program.clone();
    program.sort_elements();
    let doc = Document {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        program,
    };
    let mut bytes = serde_json::to_vec_pretty(&doc)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn deserialize(bytes: &[u8]) -> Result<Program, DeserializeError> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| DeserializeError::MalformedDocument(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| DeserializeError::MalformedDocument("missing version field".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(DeserializeError::UnknownVersion(version as u32));
    }
    match value.get("format").and_then(|v| v.as_str()) {
        Some(FORMAT_NAME) => {}
        other => {
            return Err(DeserializeError::MalformedDocument(format!(
                "unexpected format field {other:?}"
            )))
        }
    }
    let doc: Document = serde_json::from_value(value)
        .map_err(|e| DeserializeError::MalformedDocument(e.to_string()))?;
    let mut program = doc.program;
    program.sort_elements();
    program.refresh_counters();
    let errors: Vec<String> = validate(&program)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(DeserializeError::MalformedDocument(format!(
            "validation failed: {}",
            errors.join("; ")
        )));
    }
    Ok(program)
}

impl Program {
    /// Keep states, nodes and edges ordered by id (interstate edge order is
    /// priority and stays untouched).
    pub(crate) fn sort_elements(&mut self) {
        self.states.sort_by_key(|s| s.id);
        for state in &mut self.states {
            state.nodes.sort_by_key(|n| n.id);
            state.edges.sort_by_key(|e| e.id);
        }
    }

    /// Make the fresh-id counters exceed every id in use. Loading a document
    /// can only make counters grow; ids of removed elements stay burned.
    pub(crate) fn refresh_counters(&mut self) {
        let mut max_node = self.next_node_id;
        let mut max_edge = self.next_edge_id;
        let mut max_state = self.next_state_id;
        for state in &self.states {
            max_state = max_state.max(state.id.0 + 1);
            for n in &state.nodes {
                max_node = max_node.max(n.id.0 + 1);
            }
            for e in &state.edges {
                max_edge = max_edge.max(e.id.0 + 1);
            }
        }
        for e in &self.interstate_edges {
            max_edge = max_edge.max(e.id.0 + 1);
        }
        self.next_node_id = max_node;
        self.next_edge_id = max_edge;
        self.next_state_id = max_state;
    }
}
