//! Activation patching of the post-block residual stream: a clean run steered
//! by the correct template's FV donates its states to a corrupted run
//! steered by another template's FV.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::{match_answer, render_zero_shot, ExamplePair, TaskSpec, TemplateId};
use crate::error::{Error, Result};
use crate::model::{ForwardRequest, InterventionPlan, ModelHandle, PatchSpec, PositionMode, TapPositions, TokenId};
use crate::table::{fmt_f64, write_csv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub task: String,
    pub clean: TemplateId,
    pub corrupted: TemplateId,
    pub layer: usize,
    #[serde(default)]
    pub positions: PositionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub config: PatchConfig,
    /// Accuracy of the patched run.
    pub recovery: f64,
    pub clean_acc: f64,
    pub corrupted_acc: f64,
    /// `(patched - corrupted) / (clean - corrupted)`; undefined when the
    /// clean and corrupted accuracies coincide.
    pub normalized: Option<f64>,
    pub n_queries: usize,
    pub skipped: bool,
}

impl PatchResult {
    pub fn skipped(task: &str, clean: TemplateId, corrupted: TemplateId, layer: usize) -> Self {
        Self {
            config: PatchConfig {
                task: task.into(),
                clean,
                corrupted,
                layer,
                positions: PositionMode::AllPositions,
            },
            recovery: 0.0,
            clean_acc: 0.0,
            corrupted_acc: 0.0,
            normalized: None,
            n_queries: 0,
            skipped: true,
        }
    }
}

/// Post-block states of one decode step, keyed by layer.
type StepStates = BTreeMap<usize, Vec<Vec<f32>>>;

/// Greedy run that records states at `capture` layers (all positions) and
/// optionally replays `replay[step]` at `patch_layer`.
struct Trace {
    tokens: Vec<TokenId>,
    /// `states[step][layer]` holds every position at that layer.
    states: Vec<StepStates>,
    first_logits: Vec<f32>,
}

struct RunSpec<'a> {
    plan: &'a InterventionPlan,
    capture: &'a BTreeSet<usize>,
    patch_layer: Option<usize>,
    replay: Option<&'a [StepStates]>,
    positions: PositionMode,
}

fn traced_generate(model: &ModelHandle, prompt: &[TokenId], max_new: usize, spec: &RunSpec<'_>) -> Result<Trace> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let mut states = Vec::new();
    let mut first_logits = Vec::new();
    for step in 0..max_new {
        if seq.len() > model.arch.max_context {
            return Err(Error::Truncation {
                partial: model.decode(&out),
            });
        }
        let patch = match (spec.patch_layer, spec.replay) {
            (Some(l), Some(replay)) => replay.get(step).and_then(|s| s.get(&l)).map(|st| PatchSpec {
                layer: l,
                states: st.clone(),
                positions: spec.positions,
            }),
            _ => None,
        };
        let rec = model.forward(&ForwardRequest {
            tokens: &seq,
            tap_layers: spec.capture.clone(),
            tap_positions: TapPositions::All,
            plan: Some(spec.plan),
            patch: patch.as_ref(),
        })?;
        if step == 0 {
            first_logits = rec.final_logits.clone();
        }
        states.push(spec.capture.iter().map(|&l| (l, rec.layer_states(l))).collect());
        let next = model.next_token(&rec.final_logits);
        if model.tokenizer.specials().contains(&next) {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(Trace {
        tokens: out,
        states,
        first_logits,
    })
}

/// Per-query traces shared across patch layers.
struct Baseline {
    prompts: Vec<Vec<TokenId>>,
    clean: Vec<Trace>,
    clean_correct: usize,
    corrupted_correct: usize,
}

fn correct(model: &ModelHandle, task: &TaskSpec, q: &ExamplePair, tokens: &[TokenId]) -> bool {
    match_answer(task, &String::from_utf8_lossy(&model.decode(tokens)), q)
}

fn baseline(
    model: &ModelHandle,
    task: &TaskSpec,
    clean: TemplateId,
    clean_plan: &InterventionPlan,
    corrupted_plan: &InterventionPlan,
    queries: &[ExamplePair],
) -> Result<Baseline> {
    let all_layers: BTreeSet<usize> = (0..model.arch.n_layers).collect();
    let none = BTreeSet::new();
    let tpl = task.template(clean);
    let prompts: Vec<Vec<TokenId>> = queries
        .iter()
        .map(|q| model.encode(render_zero_shot(tpl, &q.input).as_bytes()))
        .collect();
    let runs: Vec<(Trace, Trace)> = prompts
        .par_iter()
        .map(|p| {
            let c = traced_generate(
                model,
                p,
                task.max_new_tokens,
                &RunSpec {
                    plan: clean_plan,
                    capture: &all_layers,
                    patch_layer: None,
                    replay: None,
                    positions: PositionMode::AllPositions,
                },
            )?;
            let w = traced_generate(
                model,
                p,
                task.max_new_tokens,
                &RunSpec {
                    plan: corrupted_plan,
                    capture: &none,
                    patch_layer: None,
                    replay: None,
                    positions: PositionMode::AllPositions,
                },
            )?;
            Ok((c, w))
        })
        .collect::<Result<_>>()?;
    let clean_correct = runs.iter().zip(queries).filter(|((c, _), q)| correct(model, task, q, &c.tokens)).count();
    let corrupted_correct = runs.iter().zip(queries).filter(|((_, w), q)| correct(model, task, q, &w.tokens)).count();
    Ok(Baseline {
        prompts,
        clean: runs.into_iter().map(|(c, _)| c).collect(),
        clean_correct,
        corrupted_correct,
    })
}

fn patched_run(
    model: &ModelHandle,
    task: &TaskSpec,
    base: &Baseline,
    corrupted_plan: &InterventionPlan,
    layer: usize,
    positions: PositionMode,
) -> Result<Vec<Trace>> {
    let none = BTreeSet::new();
    base.prompts
        .par_iter()
        .zip(&base.clean)
        .map(|(p, c)| {
            traced_generate(
                model,
                p,
                task.max_new_tokens,
                &RunSpec {
                    plan: corrupted_plan,
                    capture: &none,
                    patch_layer: Some(layer),
                    replay: Some(&c.states),
                    positions,
                },
            )
        })
        .collect()
}

fn result_from(
    model: &ModelHandle,
    task: &TaskSpec,
    cfg: PatchConfig,
    base: &Baseline,
    patched: &[Trace],
    queries: &[ExamplePair],
) -> PatchResult {
    let n = queries.len().max(1) as f64;
    let hits = patched.iter().zip(queries).filter(|(t, q)| correct(model, task, q, &t.tokens)).count();
    let (recovery, clean_acc, corrupted_acc) = (hits as f64 / n, base.clean_correct as f64 / n, base.corrupted_correct as f64 / n);
    PatchResult {
        config: cfg,
        recovery,
        clean_acc,
        corrupted_acc,
        normalized: (clean_acc != corrupted_acc).then(|| (recovery - corrupted_acc) / (clean_acc - corrupted_acc)),
        n_queries: queries.len(),
        skipped: false,
    }
}

fn check_pair(clean: TemplateId, corrupted: TemplateId) -> Result<()> {
    if clean == corrupted {
        return Err(Error::Parameter(format!("clean and corrupted templates are both {clean}")));
    }
    Ok(())
}

fn check_layer(model: &ModelHandle, layer: usize) -> Result<()> {
    if layer >= model.arch.n_layers {
        return Err(Error::Range {
            what: "patch layer",
            index: layer,
            limit: model.arch.n_layers,
        });
    }
    Ok(())
}

/// Patches `config.layer` for every query. Ungated tasks are skipped.
#[allow(clippy::too_many_arguments)]
pub fn run_patch(
    model: &ModelHandle,
    task: &TaskSpec,
    config: &PatchConfig,
    clean_plan: &InterventionPlan,
    corrupted_plan: &InterventionPlan,
    queries: &[ExamplePair],
    gated: bool,
) -> Result<PatchResult> {
    check_pair(config.clean, config.corrupted)?;
    check_layer(model, config.layer)?;
    if !gated {
        return Ok(PatchResult::skipped(&task.name, config.clean, config.corrupted, config.layer));
    }
    let base = baseline(model, task, config.clean, clean_plan, corrupted_plan, queries)?;
    let patched = patched_run(model, task, &base, corrupted_plan, config.layer, config.positions)?;
    Ok(result_from(model, task, config.clone(), &base, &patched, queries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSweep {
    pub results: Vec<PatchResult>,
    /// Layer with the highest recovery (lowest on ties); `None` when skipped.
    pub best_layer: Option<usize>,
    pub max_recovery: f64,
}

/// `run_patch` at every layer, sharing the clean and corrupted runs.
#[allow(clippy::too_many_arguments)]
pub fn layer_sweep_patch(
    model: &ModelHandle,
    task: &TaskSpec,
    clean: TemplateId,
    corrupted: TemplateId,
    clean_plan: &InterventionPlan,
    corrupted_plan: &InterventionPlan,
    queries: &[ExamplePair],
    positions: PositionMode,
    gated: bool,
) -> Result<PatchSweep> {
    check_pair(clean, corrupted)?;
    sweep_layers(model, task, clean, corrupted, clean_plan, corrupted_plan, queries, positions, gated)
}

/// Degenerate harness that patches a run into itself: `template` and `plan`
/// serve as both clean and corrupted side. Recovery must equal clean
/// accuracy at every layer.
pub fn self_patch_sweep(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    plan: &InterventionPlan,
    queries: &[ExamplePair],
    positions: PositionMode,
) -> Result<PatchSweep> {
    sweep_layers(model, task, template, template, plan, plan, queries, positions, true)
}

#[allow(clippy::too_many_arguments)]
fn sweep_layers(
    model: &ModelHandle,
    task: &TaskSpec,
    clean: TemplateId,
    corrupted: TemplateId,
    clean_plan: &InterventionPlan,
    corrupted_plan: &InterventionPlan,
    queries: &[ExamplePair],
    positions: PositionMode,
    gated: bool,
) -> Result<PatchSweep> {
    let layers = 0..model.arch.n_layers;
    if !gated {
        return Ok(PatchSweep {
            results: layers.map(|l| PatchResult::skipped(&task.name, clean, corrupted, l)).collect(),
            best_layer: None,
            max_recovery: 0.0,
        });
    }
    let base = baseline(model, task, clean, clean_plan, corrupted_plan, queries)?;
    let mut results = Vec::with_capacity(model.arch.n_layers);
    for layer in layers {
        let patched = patched_run(model, task, &base, corrupted_plan, layer, positions)?;
        let cfg = PatchConfig {
            task: task.name.clone(),
            clean,
            corrupted,
            layer,
            positions,
        };
        results.push(result_from(model, task, cfg, &base, &patched, queries));
    }
    let best = results
        .iter()
        .reduce(|b, r| if r.recovery > b.recovery { r } else { b })
        .expect("at least one layer");
    Ok(PatchSweep {
        best_layer: Some(best.config.layer),
        max_recovery: best.recovery,
        results,
    })
}

/// First-step logits of a clean run and of a corrupted run patched at
/// `layer`, for checking final-layer dominance.
pub fn first_step_logits(
    model: &ModelHandle,
    prompt: &[TokenId],
    clean_plan: &InterventionPlan,
    corrupted_plan: &InterventionPlan,
    layer: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    check_layer(model, layer)?;
    let capture: BTreeSet<usize> = [layer].into_iter().collect();
    let clean = traced_generate(
        model,
        prompt,
        1,
        &RunSpec {
            plan: clean_plan,
            capture: &capture,
            patch_layer: None,
            replay: None,
            positions: PositionMode::AllPositions,
        },
    )?;
    let none = BTreeSet::new();
    let patched = traced_generate(
        model,
        prompt,
        1,
        &RunSpec {
            plan: corrupted_plan,
            capture: &none,
            patch_layer: Some(layer),
            replay: Some(&clean.states),
            positions: PositionMode::AllPositions,
        },
    )?;
    Ok((clean.first_logits, patched.first_logits))
}

pub const PATCH_HEADER: [&str; 9] = [
    "task",
    "clean",
    "corrupted",
    "layer",
    "recovery",
    "clean_acc",
    "corrupted_acc",
    "skipped",
    "normalized",
];

pub fn patch_rows(results: &[PatchResult]) -> Vec<Vec<String>> {
    results
        .iter()
        .map(|r| {
            let num = |x: f64| if r.skipped { String::new() } else { fmt_f64(x) };
            vec![
                r.config.task.clone(),
                r.config.clean.to_string(),
                r.config.corrupted.to_string(),
                r.config.layer.to_string(),
                num(r.recovery),
                num(r.clean_acc),
                num(r.corrupted_acc),
                r.skipped.to_string(),
                r.normalized.map(fmt_f64).unwrap_or_default(),
            ]
        })
        .collect()
}

pub fn write_patch_csv(path: &Path, results: &[PatchResult]) -> Result<()> {
    write_csv(path, &PATCH_HEADER, &patch_rows(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{Category, EvalMode, TemplateSpec, TemplateStyle};
    use crate::fixture::{random_model, FixtureSpec};

    fn toy_task() -> TaskSpec {
        TaskSpec {
            name: "toy".into(),
            category: Category::Lexical,
            eval_mode: EvalMode::SubstringCi,
            max_new_tokens: 3,
            expected_iid_range: (0.0, 1.0),
            templates: TemplateId::all()
                .map(|id| TemplateSpec {
                    id,
                    style: TemplateStyle::for_id(id),
                    pattern: format!("q{}: {{X}} ->", id.number()),
                })
                .collect(),
            examples: (0..12).map(|i| ExamplePair::new(&format!("w{i}"), "e")).collect(),
        }
    }

    fn plan(model: &ModelHandle, layer: usize, scale: f32) -> InterventionPlan {
        let v = (0..model.arch.d_model).map(|i| ((i as f32) * 0.37).sin() * scale).collect();
        InterventionPlan::new(layer, v, 2.0)
    }

    fn t(n: u8) -> TemplateId {
        TemplateId::new(n).unwrap()
    }

    #[test]
    fn self_patch_recovers_clean_accuracy() {
        let model = random_model(&FixtureSpec::default()).unwrap();
        let task = toy_task();
        let p = plan(&model, 0, 1.0);
        // Identical plans under two template ids: the corrupted run is the clean run.
        let sweep = layer_sweep_patch(&model, &task, t(1), t(2), &p, &p, &task.examples, PositionMode::AllPositions, true).unwrap();
        for r in &sweep.results {
            assert_eq!(r.recovery, r.clean_acc);
            assert_eq!(r.clean_acc, r.corrupted_acc);
            assert!(r.normalized.is_none());
        }
    }

    #[test]
    fn last_layer_patch_copies_clean_logits() {
        let model = random_model(&FixtureSpec::default()).unwrap();
        let prompt = model.encode(b"q1: w3 ->");
        let last = model.arch.n_layers - 1;
        let (clean, patched) =
            first_step_logits(&model, &prompt, &plan(&model, 0, 1.0), &plan(&model, 1, -3.0), last).unwrap();
        assert_eq!(clean, patched);
    }

    #[test]
    fn ungated_is_skipped_and_blank() {
        let model = random_model(&FixtureSpec::default()).unwrap();
        let task = toy_task();
        let p = plan(&model, 0, 1.0);
        let cfg = PatchConfig {
            task: "toy".into(),
            clean: t(1),
            corrupted: t(2),
            layer: 1,
            positions: PositionMode::AllPositions,
        };
        let r = run_patch(&model, &task, &cfg, &p, &p, &task.examples, false).unwrap();
        assert!(r.skipped);
        let rows = patch_rows(&[r]);
        assert_eq!(rows[0][4], "");
        assert_eq!(rows[0][7], "true");
    }

    #[test]
    fn same_template_pair_is_rejected() {
        let model = random_model(&FixtureSpec::default()).unwrap();
        let task = toy_task();
        let p = plan(&model, 0, 1.0);
        let r = layer_sweep_patch(&model, &task, t(3), t(3), &p, &p, &task.examples, PositionMode::AllPositions, true);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn out_of_range_layer() {
        let model = random_model(&FixtureSpec::default()).unwrap();
        let task = toy_task();
        let p = plan(&model, 0, 1.0);
        let cfg = PatchConfig {
            task: "toy".into(),
            clean: t(1),
            corrupted: t(2),
            layer: 9,
            positions: PositionMode::AllPositions,
        };
        assert!(matches!(
            run_patch(&model, &task, &cfg, &p, &p, &task.examples, true),
            Err(Error::Range { .. })
        ));
    }
}
