//! Differential gray-box fuzzing of original/transformed cutout pairs.
//!
//! Each trial samples one input, runs it through both versions and compares
//! the system state. A transformed-only crash or hang, or any state
//! difference beyond the tolerance, makes the transformation invalid; trials
//! where both versions fail are uninteresting and consume no verdict.

mod bundle;
mod constraints;
mod sample;

pub use bundle::{read_bundle, replay, write_bundle, ReplayOutcome, ReproducerBundle};
pub use constraints::{
    derive_constraints, ConstraintError, ConstraintSet, Provenance, SymbolConstraint,
    UserConstraints, UserSymbolConstraint,
};
pub use sample::{mutate, sample, satisfies, SampleError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutout::{Cutout, CutoutError};
use crate::interp::{compare_states, run, Comparison, ExecutionInput, ExecutionOutcome};
use crate::ir::Program;
use crate::xform::{apply, TransformationInstance, XformError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Uniform,
    CoverageGuided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    /// Conclusive trials required for a Valid verdict.
    pub trials: u32,
    /// Comparison tolerance; 0 means bitwise.
    pub t_delta: f64,
    pub seed: u64,
    /// Transformed runs get `max(base_budget, multiplier * baseline steps)`.
    pub step_budget_multiplier: u64,
    pub base_step_budget: u64,
    pub mode: Mode,
    pub size_max: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub user_constraints: Option<UserConstraints>,
    /// Worker threads for uniform-mode trials.
    pub workers: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            trials: 100,
            t_delta: 1e-5,
            seed: 1,
            step_budget_multiplier: 64,
            base_step_budget: 1_000_000,
            mode: Mode::Uniform,
            size_max: 64,
            user_constraints: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidCause {
    StateDiffers,
    CrashOnlyTransformed,
    HangOnlyTransformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// The configured number of conclusive trials passed.
    Valid,
    Invalid {
        trial: u32,
        cause: InvalidCause,
        /// The original crashed while the transformed version completed; the
        /// "transformation fixes a crash" direction, flagged distinctly.
        crash_only_original: bool,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        divergence: Option<Divergence>,
    },
    /// Every trial was uninteresting (or the conclusive budget was not met).
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub container: String,
    pub index: u64,
    pub original: String,
    pub transformed: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerdictStats {
    pub trials_run: u32,
    pub conclusive: u32,
    pub uninteresting: u32,
    /// Distinct coverage signatures observed on the original version.
    pub coverage_signatures: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub stats: VerdictStats,
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self.outcome, Outcome::Valid)
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self.outcome, Outcome::Invalid { .. })
    }
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("transformation inapplicable to cutout: {0}")]
    TransformationInapplicable(String),
    #[error("transformed cutout is invalid code: {0}")]
    TransformedInvalid(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("execution setup failed: {0}")]
    Input(#[from] crate::interp::InputError),
}

impl From<CutoutError> for FuzzError {
    fn from(e: CutoutError) -> Self {
        FuzzError::TransformationInapplicable(e.to_string())
    }
}

impl From<XformError> for FuzzError {
    fn from(e: XformError) -> Self {
        FuzzError::TransformationInapplicable(e.to_string())
    }
}

/// One failing trial with everything needed to reproduce it.
#[derive(Debug, Clone)]
pub struct FailingTrial {
    pub trial: u32,
    pub input: ExecutionInput,
    pub outcome_original: ExecutionOutcome,
    pub outcome_transformed: ExecutionOutcome,
}

/// A differential pair prepared for the trial loop.
pub struct DifferentialSpec<'a> {
    pub original: &'a Program,
    pub transformed: &'a Program,
    /// Containers sampled as inputs (the input configuration).
    pub sampled: Vec<String>,
    /// Containers compared after execution (the system state).
    pub compared: Vec<String>,
}

impl<'a> DifferentialSpec<'a> {
    pub fn for_cutout(cutout: &'a Cutout, transformed: &'a Program) -> Self {
        DifferentialSpec {
            original: &cutout.program,
            transformed,
            sampled: cutout
                .input_configuration
                .iter()
                .map(|(n, _)| n.clone())
                .collect(),
            compared: cutout.system_state.iter().map(|(n, _)| n.clone()).collect(),
        }
    }
}

/// Verify a transformation against a cutout: apply it to the cutout (the
/// trap for under-reported change sets), then run differential trials.
pub fn verify(
    program: &Program,
    cutout: &Cutout,
    instance: &TransformationInstance,
    cfg: &TrialConfig,
) -> Result<(Verdict, Option<ReproducerBundle>), FuzzError> {
    let translated = cutout.translate_instance(instance)?;
    let (transformed, _) = apply(&translated, &cutout.program)?;
    let diagnostics: Vec<String> = crate::ir::validate(&transformed)
        .into_iter()
        .filter(|d| d.severity == crate::ir::Severity::Error)
        .map(|d| d.to_string())
        .collect();
    if !diagnostics.is_empty() {
        return Err(FuzzError::TransformedInvalid(diagnostics.join("; ")));
    }
    let constraints = derive_constraints(
        program,
        cutout,
        cfg.size_max,
        cfg.user_constraints.as_ref(),
    )?;
    let spec = DifferentialSpec::for_cutout(cutout, &transformed);
    let (verdict, failing) = match cfg.mode {
        Mode::Uniform => differential_loop(&spec, &constraints, cfg)?,
        Mode::CoverageGuided => coverage_guided_loop(&spec, &constraints, cfg)?,
    };
    let bundle = failing.map(|f| ReproducerBundle {
        original: cutout.program.clone(),
        transformed: transformed.clone(),
        input: f.input,
        outcome_original: f.outcome_original,
        outcome_transformed: f.outcome_transformed,
        verdict: verdict.clone(),
        compared: spec.compared.clone(),
        t_delta: cfg.t_delta,
        seed: cfg.seed,
        trial: f.trial,
        instance_address: instance.address(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    });
    Ok((verdict, bundle))
}

struct TrialResult {
    conclusive: bool,
    uninteresting: bool,
    invalid: Option<(InvalidCause, bool, Option<Divergence>)>,
    signature: Option<u64>,
    outcome_original: ExecutionOutcome,
    outcome_transformed: ExecutionOutcome,
    input: ExecutionInput,
}

fn run_trial(
    spec: &DifferentialSpec,
    cfg: &TrialConfig,
    input: ExecutionInput,
) -> Result<TrialResult, FuzzError> {
    let out_c = run(spec.original, &input, cfg.base_step_budget)?;
    let budget_t = cfg
        .base_step_budget
        .max(cfg.step_budget_multiplier.saturating_mul(out_c.steps));
    let out_t = run(spec.transformed, &input, budget_t)?;
    let c_ok = out_c.status.is_completed();
    let t_ok = out_t.status.is_completed();
    let mut result = TrialResult {
        conclusive: false,
        uninteresting: false,
        invalid: None,
        signature: c_ok.then(|| out_c.coverage.signature()),
        outcome_original: out_c,
        outcome_transformed: out_t,
        input,
    };
    match (c_ok, t_ok) {
        (true, false) => {
            let cause = match result.outcome_transformed.status {
                crate::interp::Status::Timeout => InvalidCause::HangOnlyTransformed,
                _ => InvalidCause::CrashOnlyTransformed,
            };
            result.invalid = Some((cause, false, None));
        }
        (false, true) => {
            // The transformation "fixed" a crash: still a semantic change.
            result.invalid = Some((InvalidCause::StateDiffers, true, None));
        }
        (false, false) => result.uninteresting = true,
        (true, true) => {
            match compare_states(
                &result.outcome_original,
                &result.outcome_transformed,
                &spec.compared,
                cfg.t_delta,
            ) {
                Ok(Comparison::Equal) => result.conclusive = true,
                Ok(Comparison::Differs {
                    container,
                    index,
                    a,
                    b,
                }) => {
                    result.invalid = Some((
                        InvalidCause::StateDiffers,
                        false,
                        Some(Divergence {
                            container,
                            index,
                            original: a,
                            transformed: b,
                        }),
                    ));
                }
                Ok(Comparison::StatusMismatch) => unreachable!("both completed"),
                Err(e) => {
                    return Err(FuzzError::TransformationInapplicable(format!(
                        "comparison failed: {e}"
                    )))
                }
            }
        }
    }
    Ok(result)
}

fn aggregate(
    cfg: &TrialConfig,
    results: impl Iterator<Item = (u32, Result<TrialResult, FuzzError>)>,
    stats: &mut VerdictStats,
    signatures: &mut std::collections::BTreeSet<u64>,
) -> Result<Option<(Verdict, Option<FailingTrial>)>, FuzzError> {
    for (trial, result) in results {
        let result = result?;
        stats.trials_run += 1;
        if let Some(sig) = result.signature {
            signatures.insert(sig);
        }
        stats.coverage_signatures = signatures.len() as u32;
        if result.uninteresting {
            stats.uninteresting += 1;
            continue;
        }
        if let Some((cause, crash_only_original, divergence)) = result.invalid {
            let verdict = Verdict {
                outcome: Outcome::Invalid {
                    trial,
                    cause,
                    crash_only_original,
                    divergence,
                },
                stats: stats.clone(),
            };
            let failing = FailingTrial {
                trial,
                input: result.input,
                outcome_original: result.outcome_original,
                outcome_transformed: result.outcome_transformed,
            };
            return Ok(Some((verdict, Some(failing))));
        }
        stats.conclusive += 1;
        if stats.conclusive >= cfg.trials {
            return Ok(Some((
                Verdict {
                    outcome: Outcome::Valid,
                    stats: stats.clone(),
                },
                None,
            )));
        }
    }
    Ok(None)
}

/// Uniform differential fuzzing until `cfg.trials` conclusive trials pass,
/// an invalid trial appears, or the trial budget (10x) is exhausted.
pub fn differential_loop(
    spec: &DifferentialSpec,
    constraints: &ConstraintSet,
    cfg: &TrialConfig,
) -> Result<(Verdict, Option<FailingTrial>), FuzzError> {
    let mut stats = VerdictStats::default();
    let mut signatures = std::collections::BTreeSet::new();
    let cap = cfg.trials.saturating_mul(10).max(10);
    let workers = cfg.workers.max(1);
    let mut next_trial = 0u32;
    while next_trial < cap {
        let wave: Vec<u32> = (next_trial..cap.min(next_trial + (workers as u32) * 4)).collect();
        next_trial = wave.last().copied().unwrap_or(cap) + 1;
        let results: Vec<(u32, Result<TrialResult, FuzzError>)> = if workers == 1 {
            wave.iter()
                .map(|t| {
                    let input = sample(constraints, spec.original, &spec.sampled, cfg.seed, *t);
                    (*t, input.map_err(FuzzError::from).and_then(|i| run_trial(spec, cfg, i)))
                })
                .collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|t| {
                        let t = *t;
                        scope.spawn(move || {
                            let input =
                                sample(constraints, spec.original, &spec.sampled, cfg.seed, t);
                            (
                                t,
                                input
                                    .map_err(FuzzError::from)
                                    .and_then(|i| run_trial(spec, cfg, i)),
                            )
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            })
        };
        if let Some(done) = aggregate(cfg, results.into_iter(), &mut stats, &mut signatures)? {
            return Ok(done);
        }
    }
    Ok((
        Verdict {
            outcome: Outcome::Inconclusive,
            stats,
        },
        None,
    ))
}

/// Coverage-guided differential fuzzing: inputs that discover new coverage
/// signatures on the original version enter a corpus; trials either sample
/// fresh or mutate a corpus entry. Verdict semantics match
/// [`differential_loop`].
pub fn coverage_guided_loop(
    spec: &DifferentialSpec,
    constraints: &ConstraintSet,
    cfg: &TrialConfig,
) -> Result<(Verdict, Option<FailingTrial>), FuzzError> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut stats = VerdictStats::default();
    let mut signatures = std::collections::BTreeSet::new();
    let mut corpus: Vec<ExecutionInput> = Vec::new();
    let cap = cfg.trials.saturating_mul(10).max(10);
    for trial in 0..cap {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x8000_0000u64 | trial as u64);
        let input = if corpus.is_empty() || rng.gen_bool(0.5) {
            sample(constraints, spec.original, &spec.sampled, cfg.seed, trial)?
        } else {
            let base = &corpus[rng.gen_range(0..corpus.len())];
            mutate(base, constraints, spec.original, &spec.sampled, &mut rng)?
        };
        let result = run_trial(spec, cfg, input.clone())?;
        if let Some(sig) = result.signature {
            if signatures.insert(sig) {
                corpus.push(input);
            }
        }
        stats.trials_run += 1;
        stats.coverage_signatures = signatures.len() as u32;
        if result.uninteresting {
            stats.uninteresting += 1;
            continue;
        }
        if let Some((cause, crash_only_original, divergence)) = result.invalid {
            let verdict = Verdict {
                outcome: Outcome::Invalid {
                    trial,
                    cause,
                    crash_only_original,
                    divergence,
                },
                stats: stats.clone(),
            };
            let failing = FailingTrial {
                trial,
                input: result.input,
                outcome_original: result.outcome_original,
                outcome_transformed: result.outcome_transformed,
            };
            return Ok((verdict, Some(failing)));
        }
        stats.conclusive += 1;
        if stats.conclusive >= cfg.trials {
            return Ok((
                Verdict {
                    outcome: Outcome::Valid,
                    stats,
                },
                None,
            ));
        }
    }
    Ok((
        Verdict {
            outcome: Outcome::Inconclusive,
            stats,
        },
        None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutout::extract;
    use crate::fixtures;
    use crate::ir::{DType, TaskletCode};
    use crate::symexpr::{SubsetRange, SymExpr};
    use crate::xform::{apply as xapply, match_kind, BugFlag, XformKind};
    use std::collections::BTreeMap;

    /// match -> apply -> extract for one fixture instance.
    fn pipeline(
        program: &Program,
        kind: XformKind,
        site_index: usize,
        bug: Option<BugFlag>,
        tile: i64,
    ) -> (Cutout, TransformationInstance) {
        let instance = match_kind(kind, program)[site_index]
            .clone()
            .with_bug(bug)
            .with_param("tile_size", tile);
        let (_, change) = xapply(&instance, program).unwrap();
        let cutout = extract(program, &change).unwrap();
        (cutout, instance)
    }

    #[test]
    fn derives_subscript_and_size_bounds() {
        let mut p = Program::new();
        p.add_symbol("N").unwrap();
        p.add_symbol("M").unwrap();
        p.add_symbol("i").unwrap();
        p.add_symbol("j").unwrap();
        p.add_container("A", DType::F64, vec![SymExpr::sym("N"), SymExpr::sym("M")], false)
            .unwrap();
        p.add_scalar("out", DType::F64, false).unwrap();
        let s = p.add_state("s");
        let acc = p.add_access(s, "A").unwrap();
        let acc_out = p.add_access(s, "out").unwrap();
        let t = p
            .add_tasklet(s, None, &["a"], &["o"], TaskletCode::parse(&[("o", "a")]).unwrap())
            .unwrap();
        p.add_memlet(
            s,
            acc,
            None,
            t,
            Some("a"),
            "A",
            SubsetRange::point(&[SymExpr::sym("i"), SymExpr::sym("j")]),
        )
        .unwrap();
        p.add_memlet(s, t, Some("o"), acc_out, None, "out", SubsetRange::scalar())
            .unwrap();
        let mut change = crate::xform::ChangeSet::default();
        change.modified.insert(t);
        let cutout = extract(&p, &change).unwrap();
        let cs = derive_constraints(&p, &cutout, 64, None).unwrap();
        // A[i, j] on an N x M container: i in [0, N), j in [0, M).
        assert_eq!(cs.symbols["i"].lo, SymExpr::Const(0));
        assert_eq!(cs.symbols["i"].hi, SymExpr::sym("N"));
        assert_eq!(cs.symbols["i"].provenance, Provenance::IndexUse);
        assert_eq!(cs.symbols["j"].hi, SymExpr::sym("M"));
        // Shape symbols sample in [1, size_max].
        assert_eq!(cs.symbols["N"].lo, SymExpr::Const(1));
        assert_eq!(cs.symbols["N"].hi, SymExpr::Const(65));
        assert_eq!(cs.symbols["N"].provenance, Provenance::SizeSymbol);
        // User constraint intersects.
        let mut user = UserConstraints::default();
        user.symbols.insert(
            "N".into(),
            UserSymbolConstraint {
                min: Some(32),
                max: Some(32),
                multiple_of: None,
            },
        );
        let cs = derive_constraints(&p, &cutout, 64, Some(&user)).unwrap();
        assert_eq!(cs.symbols["N"].lo, SymExpr::Const(32));
        assert_eq!(cs.symbols["N"].hi, SymExpr::Const(33));
        // Contradictory constraints are reported.
        user.symbols.get_mut("N").unwrap().min = Some(100);
        user.symbols.get_mut("N").unwrap().max = Some(99);
        assert!(matches!(
            derive_constraints(&p, &cutout, 64, Some(&user)),
            Err(ConstraintError::EmptyInterval(_, _))
        ));
    }

    #[test]
    fn loop_bound_constrains_iteration_symbol() {
        let fix = fixtures::countdown_loop();
        // Extract only the body: `i` stays free and inherits loop bounds.
        let mut change = crate::xform::ChangeSet::default();
        for node in &fix.program.state(fix.body_state).unwrap().nodes {
            change.modified.insert(node.id);
        }
        let cutout = extract(&fix.program, &change).unwrap();
        assert!(cutout.input_symbols.contains("i"));
        let cs = derive_constraints(&fix.program, &cutout, 64, None).unwrap();
        assert_eq!(cs.symbols["i"].provenance, Provenance::LoopBound);
        // i runs 4, 3, 2, 1.
        assert_eq!(cs.symbols["i"].lo, SymExpr::Const(1));
        assert_eq!(cs.symbols["i"].hi, SymExpr::Const(5));
    }

    #[test]
    fn sampling_is_deterministic_and_in_bounds() {
        let fix = fixtures::matrix_chain();
        let (cutout, _) = pipeline(&fix.program, XformKind::MapTiling, 1, None, 4);
        let cs = derive_constraints(&fix.program, &cutout, 8, None).unwrap();
        let sampled: Vec<String> = cutout
            .input_configuration
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        for trial in 0..50u32 {
            let input = sample(&cs, &cutout.program, &sampled, 3, trial).unwrap();
            let n = input.symbols["N"];
            assert!((1..=8).contains(&n));
            assert_eq!(input.buffers["C"].len(), (n * n) as usize);
            assert_eq!(input.buffers["U"].len(), (n * n) as usize);
            assert!(satisfies(&input, &cs, &sampled));
            // Same (seed, trial) reproduces the exact input.
            let again = sample(&cs, &cutout.program, &sampled, 3, trial).unwrap();
            assert_eq!(input, again);
        }
        // Singleton intervals produce the unique configuration.
        let mut user = UserConstraints::default();
        user.symbols.insert(
            "N".into(),
            UserSymbolConstraint {
                min: Some(4),
                max: Some(4),
                multiple_of: None,
            },
        );
        let cs = derive_constraints(&fix.program, &cutout, 8, Some(&user)).unwrap();
        for trial in 0..5 {
            let input = sample(&cs, &cutout.program, &sampled, 9, trial).unwrap();
            assert_eq!(input.symbols["N"], 4);
        }
    }

    #[test]
    fn identity_pair_is_valid_for_any_t() {
        let fix = fixtures::matrix_chain();
        let (cutout, _) = pipeline(&fix.program, XformKind::MapTiling, 1, None, 4);
        let cs = derive_constraints(&fix.program, &cutout, 6, None).unwrap();
        let spec = DifferentialSpec::for_cutout(&cutout, &cutout.program);
        let cfg = TrialConfig {
            trials: 25,
            seed: 5,
            size_max: 6,
            ..Default::default()
        };
        let (verdict, bundle) = differential_loop(&spec, &cs, &cfg).unwrap();
        assert!(verdict.is_valid(), "{verdict:?}");
        assert_eq!(verdict.stats.conclusive, 25);
        assert!(bundle.is_none());
    }

    #[test]
    fn off_by_one_tiling_is_invalid_fast() {
        let fix = fixtures::matrix_chain();
        let (cutout, instance) = pipeline(
            &fix.program,
            XformKind::MapTiling,
            1,
            Some(BugFlag::TilingOffByOne),
            4,
        );
        let cfg = TrialConfig {
            trials: 10,
            seed: 1,
            size_max: 8,
            ..Default::default()
        };
        let (verdict, bundle) = verify(&fix.program, &cutout, &instance, &cfg).unwrap();
        match verdict.outcome {
            Outcome::Invalid { trial, cause, .. } => {
                assert!(trial < 10);
                assert!(matches!(
                    cause,
                    InvalidCause::CrashOnlyTransformed | InvalidCause::StateDiffers
                ));
            }
            other => panic!("expected invalid, got {other:?}"),
        }
        assert!(bundle.is_some());
    }

    #[test]
    fn bound_guard_bug_is_input_dependent() {
        let fix = fixtures::matrix_chain();
        let (cutout, instance) = pipeline(
            &fix.program,
            XformKind::MapTiling,
            1,
            Some(BugFlag::TilingNoBoundGuard),
            4,
        );
        // Default constraints: invalid within a few conclusive trials.
        let cfg = TrialConfig {
            trials: 20,
            seed: 2,
            size_max: 16,
            ..Default::default()
        };
        let (verdict, _) = verify(&fix.program, &cutout, &instance, &cfg).unwrap();
        assert!(verdict.is_invalid(), "{verdict:?}");
        // Forcing N to multiples of the tile size hides the bug.
        let mut user = UserConstraints::default();
        user.symbols.insert(
            "N".into(),
            UserSymbolConstraint {
                min: None,
                max: None,
                multiple_of: Some(4),
            },
        );
        let cfg = TrialConfig {
            trials: 50,
            seed: 2,
            size_max: 16,
            user_constraints: Some(user),
            ..Default::default()
        };
        let (verdict, _) = verify(&fix.program, &cutout, &instance, &cfg).unwrap();
        assert!(verdict.is_valid(), "{verdict:?}");
    }

    #[test]
    fn crash_fixing_transformation_is_flagged() {
        // Original faults (out-of-bounds from a symbol subscript), the
        // "transformed" version completes: StateDiffers-class invalid with
        // the distinct flag set.
        let mut p = Program::new();
        p.add_symbol("k").unwrap();
        p.add_container("a", DType::I64, vec![4.into()], false).unwrap();
        p.add_scalar("out", DType::I64, false).unwrap();
        let s = p.add_state("s");
        let acc = p.add_access(s, "a").unwrap();
        let acc_out = p.add_access(s, "out").unwrap();
        let t = p
            .add_tasklet(s, None, &["x"], &["o"], TaskletCode::parse(&[("o", "x")]).unwrap())
            .unwrap();
        p.add_memlet(
            s,
            acc,
            None,
            t,
            Some("x"),
            "a",
            SubsetRange::point(&[SymExpr::sym("k").add(100)]),
        )
        .unwrap();
        p.add_memlet(s, t, Some("o"), acc_out, None, "out", SubsetRange::scalar())
            .unwrap();
        let mut fixed = p.clone();
        for state in &mut fixed.states {
            for edge in &mut state.edges {
                if let Some(m) = &mut edge.memlet {
                    if m.container == "a" {
                        m.subset = SubsetRange::point(&[SymExpr::Const(0)]);
                    }
                }
            }
        }
        let spec = DifferentialSpec {
            original: &p,
            transformed: &fixed,
            sampled: vec!["a".into()],
            compared: vec!["out".into()],
        };
        let mut cs = ConstraintSet::default();
        cs.symbols.insert(
            "k".into(),
            SymbolConstraint {
                lo: SymExpr::Const(1),
                hi: SymExpr::Const(4),
                multiple_of: None,
                provenance: Provenance::Unconstrained,
            },
        );
        let cfg = TrialConfig {
            trials: 5,
            seed: 7,
            ..Default::default()
        };
        let (verdict, _) = differential_loop(&spec, &cs, &cfg).unwrap();
        match verdict.outcome {
            Outcome::Invalid {
                cause: InvalidCause::StateDiffers,
                crash_only_original: true,
                ..
            } => {}
            other => panic!("expected crash-fix flag, got {other:?}"),
        }
    }

    #[test]
    fn both_fault_trials_are_uninteresting() {
        // Both versions fault on every input: inconclusive, never a verdict.
        let mut p = Program::new();
        p.add_container("a", DType::I64, vec![2.into()], false).unwrap();
        p.add_scalar("out", DType::I64, false).unwrap();
        let s = p.add_state("s");
        let acc = p.add_access(s, "a").unwrap();
        let acc_out = p.add_access(s, "out").unwrap();
        let t = p
            .add_tasklet(s, None, &["x"], &["o"], TaskletCode::parse(&[("o", "x")]).unwrap())
            .unwrap();
        p.add_memlet(s, acc, None, t, Some("x"), "a", SubsetRange::point(&[7.into()]))
            .unwrap();
        p.add_memlet(s, t, Some("o"), acc_out, None, "out", SubsetRange::scalar())
            .unwrap();
        let spec = DifferentialSpec {
            original: &p,
            transformed: &p,
            sampled: vec!["a".into()],
            compared: vec!["out".into()],
        };
        let cfg = TrialConfig {
            trials: 5,
            seed: 3,
            ..Default::default()
        };
        let (verdict, _) = differential_loop(&spec, &ConstraintSet::default(), &cfg).unwrap();
        assert!(matches!(verdict.outcome, Outcome::Inconclusive));
        assert_eq!(verdict.stats.uninteresting, verdict.stats.trials_run);
    }

    #[test]
    fn branchless_coverage_matches_uniform() {
        let fix = fixtures::scalar_chain();
        let (cutout, instance) = pipeline(&fix.program, XformKind::TaskletFusion, 0, None, 4);
        for mode in [Mode::Uniform, Mode::CoverageGuided] {
            let cfg = TrialConfig {
                trials: 30,
                seed: 11,
                mode,
                ..Default::default()
            };
            let (verdict, _) = verify(&fix.program, &cutout, &instance, &cfg).unwrap();
            assert!(verdict.is_valid(), "{mode:?}: {verdict:?}");
            // A straight-line cutout has exactly one coverage signature.
            assert_eq!(verdict.stats.coverage_signatures, 1, "{mode:?}");
        }
    }

    #[test]
    fn mutations_never_violate_constraints() {
        use rand::SeedableRng;
        let fix = fixtures::matrix_chain();
        let (cutout, _) = pipeline(&fix.program, XformKind::MapTiling, 1, None, 4);
        let cs = derive_constraints(&fix.program, &cutout, 8, None).unwrap();
        let sampled: Vec<String> = cutout
            .input_configuration
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let mut current = sample(&cs, &cutout.program, &sampled, 13, 0).unwrap();
        for step in 0..10_000 {
            current = mutate(&current, &cs, &cutout.program, &sampled, &mut rng).unwrap();
            assert!(satisfies(&current, &cs, &sampled), "step {step}");
        }
    }

    #[test]
    fn bundles_replay_bit_for_bit() {
        let fix = fixtures::matrix_chain();
        let (cutout, instance) = pipeline(
            &fix.program,
            XformKind::MapTiling,
            1,
            Some(BugFlag::TilingOffByOne),
            4,
        );
        let cfg = TrialConfig {
            trials: 10,
            seed: 4,
            size_max: 6,
            ..Default::default()
        };
        let (_, bundle) = verify(&fix.program, &cutout, &instance, &cfg).unwrap();
        let bundle = bundle.expect("invalid verdict produces a bundle");
        let dir = std::env::temp_dir().join(format!("cutflow-bundle-{}", std::process::id()));
        write_bundle(&bundle, &dir).unwrap();
        let loaded = read_bundle(&dir).unwrap();
        let replay1 = replay(&loaded, 10_000_000).unwrap();
        assert!(replay1.diverged);
        for _ in 0..2 {
            let again = replay(&read_bundle(&dir).unwrap(), 10_000_000).unwrap();
            assert_eq!(again, replay1);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn under_reported_sites_error_in_verify() {
        let fix = fixtures::countdown_loop();
        let instance = match_kind(XformKind::LoopUnroll, &fix.program)[0].clone();
        let mut under = crate::xform::ChangeSet::default();
        for node in &fix.program.state(fix.body_state).unwrap().nodes {
            under.modified.insert(node.id);
        }
        let cutout = extract(&fix.program, &under).unwrap();
        assert!(matches!(
            verify(&fix.program, &cutout, &instance, &TrialConfig::default()),
            Err(FuzzError::TransformationInapplicable(_))
        ));
    }
}
