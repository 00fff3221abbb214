//! Per-stage computation. Each stage reads its inputs from the artifact
//! directory and writes its own artifacts there.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{reports, RunLedger, RunManifest, Stage};
use crate::battery::{load_battery, load_lexicon, ExamplePair, SentimentLexicon, TaskSpec, TaskSplit, TemplateId};
use crate::error::{Error, Result};
use crate::fv::{
    baselines, extract_fvs, iid_gate, sweep, BaselineRecord, EvalOutcome, ExtractConfig, FunctionVector, FvStore,
};
use crate::lens::{fv_vocab_projection, post_steering, readability_profile, LensCondition, LensDelta, LensProfile, VocabProjection};
use crate::model::{load_checkpoint, InterventionPlan, ModelHandle};
use crate::patching::{layer_sweep_patch, PatchSweep};
use crate::seed::SeedMix;
use crate::stats::{bonferroni, PermutationResult, RegressionReport, WelchReport};
use crate::transfer::{
    cosine_correlations, dissociation_permutation, dissociation_scan, norm_correlations, ood_matrix, regression,
    style_compare, utv_pca, CorrelationReport, DissociationRecord, DissociationSummary, TransferPair, UtvReport,
};

pub const ARTIFACT_DIR: &str = "artifacts";
pub const REPORT_DIR: &str = "reports";

pub(super) const BASELINE_FILE: &str = "baselines.json";
pub(super) const STORE_FILE: &str = "fv_store.xfvs";
pub(super) const SWEEP_FILE: &str = "sweeps.json";
pub(super) const GATE_FILE: &str = "gate.json";
pub(super) const TRANSFER_FILE: &str = "transfer.json";
pub(super) const LENS_FILE: &str = "lens.json";
pub(super) const PROJECT_FILE: &str = "projection.json";
pub(super) const PATCH_FILE: &str = "patching.json";
pub(super) const STATS_FILE: &str = "stats.json";

/// A result that may be missing for a recorded, non-fatal reason
/// (degenerate input, too little data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Noted<T> {
    pub value: Option<T>,
    pub note: Option<String>,
}

impl<T> Noted<T> {
    fn from_result(r: Result<T>) -> Result<Self> {
        match r {
            Ok(v) => Ok(Self {
                value: Some(v),
                note: None,
            }),
            Err(e @ (Error::Degenerate(_) | Error::InsufficientData(_) | Error::Parameter(_))) => Ok(Self {
                value: None,
                note: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub task: String,
    pub template: TemplateId,
    pub best: EvalOutcome,
    pub table: Vec<EvalOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub task: String,
    pub mean_iid: f64,
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensArtifact {
    pub zero_shot: Vec<LensProfile>,
    pub post_steering: Vec<LensProfile>,
    pub deltas: Vec<LensDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub task: String,
    pub result: Noted<PermutationResult>,
    /// Bonferroni-corrected 0.05 over the per-task family.
    pub alpha_corrected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsArtifact {
    pub regression: Noted<RegressionReport>,
    pub style: Noted<WelchReport>,
    pub cosine: Vec<CorrelationReport>,
    pub norms: Vec<CorrelationReport>,
    pub dissociation: Vec<DissociationRecord>,
    pub dissociation_summary: Vec<DissociationSummary>,
    pub permutation: Vec<PermutationRecord>,
    pub utv: Vec<UtvReport>,
}

pub(super) fn write_artifact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    crate::table::write_json(path, &serde_json::json!({ "data": value }))
}

pub(super) fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw: serde_json::Value = serde_json::from_str(&text)?;
    let data = raw
        .get_mut("data")
        .map(serde_json::Value::take)
        .ok_or_else(|| Error::Format(format!("{} is not an artifact file", path.display())))?;
    Ok(serde_json::from_value(data)?)
}

pub(super) struct Context {
    pub manifest: RunManifest,
    pub model: ModelHandle,
    pub tasks: Vec<TaskSpec>,
    pub lexicon: SentimentLexicon,
}

impl Context {
    pub fn load(manifest: &RunManifest) -> Result<Self> {
        let model = load_checkpoint(&manifest.model)?;
        let mut tasks = load_battery(&manifest.battery)?;
        if let Some(only) = &manifest.tasks {
            for name in only {
                if !tasks.iter().any(|t| &t.name == name) {
                    return Err(Error::Parameter(format!("task `{name}` is not in the battery")));
                }
            }
            tasks.retain(|t| only.contains(&t.name));
        }
        let lex_path = manifest.lexicon_path();
        let lexicon = if lex_path.exists() {
            load_lexicon(&lex_path)?
        } else {
            SentimentLexicon {
                positive: Vec::new(),
                negative: Vec::new(),
            }
        };
        Ok(Self {
            manifest: manifest.clone(),
            model,
            tasks,
            lexicon,
        })
    }

    pub fn artifact(&self, file: &str) -> PathBuf {
        self.manifest.artifact_dir().join(file)
    }

    pub fn queries<'a>(&self, task: &'a TaskSpec) -> &'a [ExamplePair] {
        TaskSplit::of(task).eval_queries(self.manifest.n_queries)
    }

    fn layers(&self) -> Vec<usize> {
        self.manifest.grid.layers_for(self.model.arch.n_layers)
    }

    fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Dependency(format!("artifact mentions unknown task `{name}`")))
    }
}

pub(super) fn execute(stage: Stage, ctx: &Context, ledger: &mut RunLedger) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::Baseline => baseline_stage(ctx),
        Stage::Extract => extract_stage(ctx),
        Stage::Steer => steer_stage(ctx, ledger),
        Stage::Gate => gate_stage(ctx),
        Stage::Transfer => transfer_stage(ctx),
        Stage::Lens => lens_stage(ctx),
        Stage::Project => project_stage(ctx),
        Stage::Patch => patch_stage(ctx),
        Stage::Stats => stats_stage(ctx),
        Stage::Report => reports::emit(ctx),
    }
}

fn baseline_stage(ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = &ctx.manifest;
    let mut out: Vec<BaselineRecord> = Vec::new();
    for task in &ctx.tasks {
        for tpl in task.template_ids() {
            out.push(baselines(&ctx.model, task, tpl, ctx.queries(task), m.few_shot_k, m.seed)?);
        }
    }
    let path = ctx.artifact(BASELINE_FILE);
    write_artifact(&path, &out)?;
    Ok(vec![path])
}

fn extract_stage(ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = &ctx.manifest;
    let cfg = ExtractConfig {
        n_prompts: m.n_prompts,
        n_demos: m.n_demos,
        seed: m.seed,
    };
    let layers = ctx.layers();
    let mut store = FvStore::new(ctx.model.arch.d_model);
    for task in &ctx.tasks {
        for tpl in task.template_ids() {
            for fv in extract_fvs(&ctx.model, task, tpl, &layers, &cfg)? {
                store.insert(fv)?;
            }
        }
    }
    let path = ctx.artifact(STORE_FILE);
    store.write(&path)?;
    Ok(vec![path])
}

fn load_store(ctx: &Context) -> Result<FvStore> {
    FvStore::read(&ctx.artifact(STORE_FILE))
}

fn fvs_for(store: &FvStore, task: &str, tpl: TemplateId, layers: &[usize]) -> Result<BTreeMap<usize, FunctionVector>> {
    layers
        .iter()
        .map(|&l| store.get(task, tpl, l).map(|fv| (l, fv.clone())))
        .collect()
}

fn steer_stage(ctx: &Context, ledger: &mut RunLedger) -> Result<Vec<PathBuf>> {
    let store = load_store(ctx)?;
    let grid = &ctx.manifest.grid;
    let layers = ctx.layers();
    let mut records = Vec::new();
    let (mut coarse, mut total) = (0u64, 0u64);
    for task in &ctx.tasks {
        for tpl in task.template_ids() {
            let fvs = fvs_for(&store, &task.name, tpl, &layers)?;
            let res = sweep(&ctx.model, task, tpl, &fvs, grid, ctx.queries(task))?;
            coarse += res
                .table
                .iter()
                .filter(|o| grid.alphas.contains(&o.alpha))
                .count() as u64;
            total += res.table.len() as u64;
            records.push(SweepRecord {
                task: task.name.clone(),
                template: tpl,
                best: res.best,
                table: res.table,
            });
        }
    }
    ledger.coarse_configs = coarse;
    ledger.evaluated_configs = total;
    let path = ctx.artifact(SWEEP_FILE);
    write_artifact(&path, &records)?;
    Ok(vec![path])
}

fn load_sweeps(ctx: &Context) -> Result<Vec<SweepRecord>> {
    read_artifact(&ctx.artifact(SWEEP_FILE))
}

/// Best IID outcome per (task, template).
fn best_map(sweeps: &[SweepRecord]) -> BTreeMap<(String, TemplateId), EvalOutcome> {
    sweeps
        .iter()
        .map(|s| ((s.task.clone(), s.template), s.best.clone()))
        .collect()
}

fn gate_stage(ctx: &Context) -> Result<Vec<PathBuf>> {
    let sweeps = load_sweeps(ctx)?;
    let mut gates = Vec::new();
    for task in &ctx.tasks {
        let accs: Vec<f64> = sweeps
            .iter()
            .filter(|s| s.task == task.name)
            .map(|s| s.best.accuracy())
            .collect();
        let g = iid_gate(&accs, ctx.manifest.thresholds.tau)?;
        gates.push(GateRecord {
            task: task.name.clone(),
            mean_iid: g.mean_iid,
            gated: g.gated,
        });
    }
    let path = ctx.artifact(GATE_FILE);
    write_artifact(&path, &gates)?;
    Ok(vec![path])
}

fn transfer_stage(ctx: &Context) -> Result<Vec<PathBuf>> {
    let store = load_store(ctx)?;
    let best = best_map(&load_sweeps(ctx)?);
    let mut pairs: Vec<TransferPair> = Vec::new();
    for task in &ctx.tasks {
        let per_tpl: BTreeMap<TemplateId, EvalOutcome> = best
            .iter()
            .filter(|((t, _), _)| *t == task.name)
            .map(|((_, tpl), o)| (*tpl, o.clone()))
            .collect();
        let queries = ctx.queries(task).to_vec();
        let queries_for = |_: TemplateId| queries.clone();
        pairs.extend(ood_matrix(
            &ctx.model,
            task,
            &store,
            &per_tpl,
            &ctx.manifest.grid,
            ctx.manifest.ood_choice,
            &queries_for,
        )?);
    }
    let path = ctx.artifact(TRANSFER_FILE);
    write_artifact(&path, &pairs)?;
    Ok(vec![path])
}

fn best_plan(ctx: &Context, store: &FvStore, best: &EvalOutcome) -> Result<(FunctionVector, InterventionPlan)> {
    let fv = store.get(&best.task, best.source, best.layer)?.clone();
    let plan = InterventionPlan {
        layer: best.layer,
        vector: fv.vector.clone(),
        alpha: best.alpha,
        positions: ctx.manifest.grid.positions,
    };
    Ok((fv, plan))
}

fn lens_stage(ctx: &Context) -> Result<Vec<PathBuf>> {
    let store = load_store(ctx)?;
    let best = best_map(&load_sweeps(ctx)?);
    let all_layers: BTreeSet<usize> = (0..ctx.model.arch.n_layers).collect();
    let mut art = LensArtifact {
        zero_shot: Vec::new(),
        post_steering: Vec::new(),
        deltas: Vec::new(),
    };
    for task in &ctx.tasks {
        let queries = ctx.queries(task);
        for tpl in task.template_ids() {
            let zero = readability_profile(
                &ctx.model,
                task,
                tpl,
                queries,
                &ctx.lexicon,
                &all_layers,
                None,
                LensCondition::ZeroShot,
            )?;
            let b = best
                .get(&(task.name.clone(), tpl))
                .ok_or_else(|| Error::Dependency(format!("no IID sweep for {}/{tpl}", task.name)))?;
            let (fv, plan) = best_plan(ctx, &store, b)?;
            let (steered, delta) =
                post_steering(&ctx.model, &fv, task, tpl, queries, &ctx.lexicon, &all_layers, &plan, &zero)?;
            art.zero_shot.push(zero);
            art.post_steering.push(steered);
            art.deltas.push(delta);
        }
    }
    let path = ctx.artifact(LENS_FILE);
    write_artifact(&path, &art)?;
    Ok(vec![path])
}

fn project_stage(ctx: &Context) -> Result<Vec<PathBuf>> {
    let store = load_store(ctx)?;
    let sweeps = load_sweeps(ctx)?;
    let mut out: Vec<VocabProjection> = Vec::new();
    for s in &sweeps {
        let task = ctx.task(&s.task)?;
        let fv = store.get(&s.task, s.template, s.best.layer)?;
        out.push(fv_vocab_projection(&ctx.model, fv, task)?);
    }
    let path = ctx.artifact(PROJECT_FILE);
    write_artifact(&path, &out)?;
    Ok(vec![path])
}

fn patch_stage(ctx: &Context) -> Result<Vec<PathBuf>> {
    let store = load_store(ctx)?;
    let best = best_map(&load_sweeps(ctx)?);
    let gates: Vec<GateRecord> = read_artifact(&ctx.artifact(GATE_FILE))?;
    let mut out: Vec<PatchSweep> = Vec::new();
    for task in &ctx.tasks {
        let gated = gates.iter().any(|g| g.task == task.name && g.gated);
        for (clean, corrupted) in crate::transfer::enumerate_pairs(task)? {
            let get = |tpl: TemplateId| {
                best.get(&(task.name.clone(), tpl))
                    .ok_or_else(|| Error::Dependency(format!("no IID sweep for {}/{tpl}", task.name)))
            };
            let (_, clean_plan) = best_plan(ctx, &store, get(clean)?)?;
            let (_, corrupted_plan) = best_plan(ctx, &store, get(corrupted)?)?;
            out.push(layer_sweep_patch(
                &ctx.model,
                task,
                clean,
                corrupted,
                &clean_plan,
                &corrupted_plan,
                ctx.queries(task),
                ctx.manifest.patch_positions,
                gated,
            )?);
        }
    }
    let path = ctx.artifact(PATCH_FILE);
    write_artifact(&path, &out)?;
    Ok(vec![path])
}

fn stats_stage(ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = &ctx.manifest;
    let store = load_store(ctx)?;
    let pairs: Vec<TransferPair> = read_artifact(&ctx.artifact(TRANSFER_FILE))?;
    let (dissociation, dissociation_summary) = dissociation_scan(&pairs, m.thresholds.tau);

    let mut by_task: BTreeMap<&str, Vec<TransferPair>> = BTreeMap::new();
    for p in &pairs {
        by_task.entry(&p.task).or_default().push(p.clone());
    }
    let alpha_corrected = bonferroni(0.05, by_task.len());
    let mut permutation = Vec::new();
    for (task, ps) in &by_task {
        let seed = SeedMix::new(m.seed).with_str("permutation").with_str(task).value();
        permutation.push(PermutationRecord {
            task: task.to_string(),
            result: Noted::from_result(dissociation_permutation(ps, m.n_shuffles, seed))?,
            alpha_corrected,
        });
    }

    let mut utv = Vec::new();
    for task in &ctx.tasks {
        for l in ctx.layers() {
            utv.push(utv_pca(&store, task, l)?);
        }
    }

    let art = StatsArtifact {
        regression: Noted::from_result(regression(&pairs))?,
        style: Noted::from_result(style_compare(&pairs))?,
        cosine: cosine_correlations(&pairs)?,
        norms: norm_correlations(&pairs)?,
        dissociation,
        dissociation_summary,
        permutation,
        utv,
    };
    let path = ctx.artifact(STATS_FILE);
    write_artifact(&path, &art)?;
    Ok(vec![path])
}

pub(super) fn load_all(ctx: &Context) -> Result<reports::Inputs> {
    Ok(reports::Inputs {
        baselines: read_artifact(&ctx.artifact(BASELINE_FILE))?,
        sweeps: load_sweeps(ctx)?,
        gates: read_artifact(&ctx.artifact(GATE_FILE))?,
        pairs: read_artifact(&ctx.artifact(TRANSFER_FILE))?,
        lens: read_artifact(&ctx.artifact(LENS_FILE))?,
        projections: read_artifact(&ctx.artifact(PROJECT_FILE))?,
        patching: read_artifact(&ctx.artifact(PATCH_FILE))?,
        stats: read_artifact(&ctx.artifact(STATS_FILE))?,
    })
}
