//! Self-contained failing test cases: a bundle directory holds both cutout
//! programs, the failing input and a versioned report, and replaying it
//! reproduces the verdict bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfdata;
use crate::interp::{compare_states, run, Buffer, Comparison, ExecutionInput, ExecutionOutcome};
use crate::ir::Program;

use super::Verdict;

pub const REPORT_SCHEMA: &str = "cutflow-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ReproducerBundle {
    pub original: Program,
    pub transformed: Program,
    pub input: ExecutionInput,
    pub outcome_original: ExecutionOutcome,
    pub outcome_transformed: ExecutionOutcome,
    pub verdict: Verdict,
    /// System-state containers compared during the failing trial.
    pub compared: Vec<String>,
    pub t_delta: f64,
    pub seed: u64,
    pub trial: u32,
    pub instance_address: String,
    pub tool_version: String,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("io error on {0}: {1}")]
    Io(String, std::io::Error),
    #[error("corrupt bundle: {0}")]
    Corrupt(String),
}

/// Exact, hex-encoded little-endian image of a buffer; survives NaN payloads
/// that JSON numbers cannot carry.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BufferImage {
    dtype: crate::ir::DType,
    len: usize,
    data_hex: String,
}

fn buffer_image(buffer: &Buffer) -> BufferImage {
    let mut bytes = Vec::new();
    match buffer {
        Buffer::F64(v) => v.iter().for_each(|x| bytes.extend(x.to_le_bytes())),
        Buffer::F32(v) => v.iter().for_each(|x| bytes.extend(x.to_le_bytes())),
        Buffer::I64(v) => v.iter().for_each(|x| bytes.extend(x.to_le_bytes())),
        Buffer::I32(v) => v.iter().for_each(|x| bytes.extend(x.to_le_bytes())),
        Buffer::Bool(v) => v.iter().for_each(|x| bytes.push(*x as u8)),
    }
    let data_hex = bytes.iter().map(|b| format!("{b:02x}")).collect();
    BufferImage {
        dtype: buffer.dtype(),
        len: buffer.len(),
        data_hex,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OutcomeImage {
    status: crate::interp::Status,
    steps: u64,
    outputs: BTreeMap<String, BufferImage>,
}

fn outcome_image(outcome: &ExecutionOutcome) -> OutcomeImage {
    OutcomeImage {
        status: outcome.status,
        steps: outcome.steps,
        outputs: outcome
            .outputs
            .iter()
            .map(|(k, v)| (k.clone(), buffer_image(v)))
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Report {
    schema: String,
    version: u32,
    tool_version: String,
    instance: String,
    seed: u64,
    trial: u32,
    t_delta: f64,
    compared: Vec<String>,
    verdict: Verdict,
    outcome_original: OutcomeImage,
    outcome_transformed: OutcomeImage,
}

/// Write the bundle directory: `original.cfprog.json`,
/// `transformed.cfprog.json`, `input.cfdata`, `report.json`.
pub fn write_bundle(bundle: &ReproducerBundle, dir: &Path) -> Result<(), BundleError> {
    let io = |name: &str, e: std::io::Error| BundleError::Io(name.to_string(), e);
    std::fs::create_dir_all(dir).map_err(|e| io("bundle dir", e))?;
    let original = crate::ir::serialize(&bundle.original)
        .map_err(|e| BundleError::Corrupt(format!("original: {e}")))?;
    std::fs::write(dir.join("original.cfprog.json"), original)
        .map_err(|e| io("original.cfprog.json", e))?;
    let transformed = crate::ir::serialize(&bundle.transformed)
        .map_err(|e| BundleError::Corrupt(format!("transformed: {e}")))?;
    std::fs::write(dir.join("transformed.cfprog.json"), transformed)
        .map_err(|e| io("transformed.cfprog.json", e))?;
    let data = cfdata::write_cfdata(&bundle.original, &bundle.input)
        .map_err(|e| BundleError::Corrupt(format!("input: {e}")))?;
    std::fs::write(dir.join("input.cfdata"), data).map_err(|e| io("input.cfdata", e))?;
    let report = Report {
        schema: REPORT_SCHEMA.to_string(),
        version: REPORT_VERSION,
        tool_version: bundle.tool_version.clone(),
        instance: bundle.instance_address.clone(),
        seed: bundle.seed,
        trial: bundle.trial,
        t_delta: bundle.t_delta,
        compared: bundle.compared.clone(),
        verdict: bundle.verdict.clone(),
        outcome_original: outcome_image(&bundle.outcome_original),
        outcome_transformed: outcome_image(&bundle.outcome_transformed),
    };
    let mut text = serde_json::to_vec_pretty(&report)
        .map_err(|e| BundleError::Corrupt(format!("report: {e}")))?;
    text.push(b'\n');
    std::fs::write(dir.join("report.json"), text).map_err(|e| io("report.json", e))?;
    Ok(())
}

/// The parts of a bundle needed to replay it.
#[derive(Debug)]
pub struct LoadedBundle {
    pub original: Program,
    pub transformed: Program,
    pub input: ExecutionInput,
    pub compared: Vec<String>,
    pub t_delta: f64,
    pub report_json: serde_json::Value,
}

pub fn read_bundle(dir: &Path) -> Result<LoadedBundle, BundleError> {
    let read = |name: &str| -> Result<Vec<u8>, BundleError> {
        std::fs::read(dir.join(name)).map_err(|e| BundleError::Io(name.to_string(), e))
    };
    let original = crate::ir::deserialize(&read("original.cfprog.json")?)
        .map_err(|e| BundleError::Corrupt(format!("original: {e}")))?;
    let transformed = crate::ir::deserialize(&read("transformed.cfprog.json")?)
        .map_err(|e| BundleError::Corrupt(format!("transformed: {e}")))?;
    let input = cfdata::read_cfdata(&read("input.cfdata")?)
        .map_err(|e| BundleError::Corrupt(format!("input: {e}")))?;
    let report_json: serde_json::Value = serde_json::from_slice(&read("report.json")?)
        .map_err(|e| BundleError::Corrupt(format!("report: {e}")))?;
    if report_json.get("schema").and_then(|v| v.as_str()) != Some(REPORT_SCHEMA) {
        return Err(BundleError::Corrupt("unknown report schema".into()));
    }
    let compared = report_json
        .get("compared")
        .and_then(|v| v.as_array())
        .map(|a| {
            a.iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect()
        })
        .unwrap_or_default();
    let t_delta = report_json
        .get("t_delta")
        .and_then(|v| v.as_f64())
        .unwrap_or(1e-5);
    Ok(LoadedBundle {
        original,
        transformed,
        input,
        compared,
        t_delta,
        report_json,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    /// True when the divergence reproduces.
    pub diverged: bool,
    pub comparison: Comparison,
    pub status_original: crate::interp::Status,
    pub status_transformed: crate::interp::Status,
}

/// Re-execute both cutouts on the stored input and compare.
pub fn replay(bundle: &LoadedBundle, step_budget: u64) -> Result<ReplayOutcome, BundleError> {
    let out_c = run(&bundle.original, &bundle.input, step_budget)
        .map_err(|e| BundleError::Corrupt(format!("original run: {e}")))?;
    let out_t = run(&bundle.transformed, &bundle.input, step_budget)
        .map_err(|e| BundleError::Corrupt(format!("transformed run: {e}")))?;
    let comparison = compare_states(&out_c, &out_t, &bundle.compared, bundle.t_delta)
        .map_err(|e| BundleError::Corrupt(format!("comparison: {e}")))?;
    Ok(ReplayOutcome {
        diverged: comparison != Comparison::Equal,
        comparison,
        status_original: out_c.status,
        status_transformed: out_t.status,
    })
}
