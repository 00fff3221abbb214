//! Stage sequencing, run manifests and the content-addressed run ledger.

mod reports;
mod stages;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fv::SweepGrid;
use crate::model::PositionMode;
use crate::transfer::OodChoice;

pub use reports::{quadrant_cells, ReportWriter, REPORT_FILES};
pub use stages::{
    GateRecord, LensArtifact, Noted, PermutationRecord, StatsArtifact, SweepRecord, ARTIFACT_DIR, REPORT_DIR,
};

/// Bumped whenever stage outputs change meaning; part of every cache key.
pub const CODE_VERSION: &str = concat!("fvlab-", env!("CARGO_PKG_VERSION"));
pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Extract,
    Steer,
    Gate,
    Transfer,
    Lens,
    Project,
    Patch,
    Stats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Baseline,
        Stage::Extract,
        Stage::Steer,
        Stage::Gate,
        Stage::Transfer,
        Stage::Lens,
        Stage::Project,
        Stage::Patch,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Extract => "extract",
            Stage::Steer => "steer",
            Stage::Gate => "gate",
            Stage::Transfer => "transfer",
            Stage::Lens => "lens",
            Stage::Project => "project",
            Stage::Patch => "patch",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }

    /// Direct upstream stages whose artifacts this stage reads.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Baseline | Stage::Extract => &[],
            Stage::Steer => &[Stage::Extract],
            Stage::Gate => &[Stage::Steer],
            Stage::Transfer => &[Stage::Extract, Stage::Steer],
            Stage::Lens => &[Stage::Extract, Stage::Steer],
            Stage::Project => &[Stage::Extract, Stage::Steer],
            Stage::Patch => &[Stage::Extract, Stage::Steer, Stage::Gate],
            Stage::Stats => &[Stage::Extract, Stage::Steer, Stage::Gate, Stage::Transfer],
            Stage::Report => &[
                Stage::Baseline,
                Stage::Extract,
                Stage::Steer,
                Stage::Gate,
                Stage::Transfer,
                Stage::Lens,
                Stage::Project,
                Stage::Patch,
                Stage::Stats,
            ],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau: f64,
    pub tau_r: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tau: 0.10, tau_r: 0.10 }
    }
}

fn default_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}
fn default_run_id() -> String {
    "run".into()
}
fn default_n_prompts() -> usize {
    20
}
fn default_n_demos() -> usize {
    15
}
fn default_n_queries() -> usize {
    50
}
fn default_few_shot_k() -> usize {
    5
}
fn default_n_shuffles() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: PathBuf,
    pub battery: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: SweepGrid,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    /// Worker pool size; 0 lets the pool pick.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    /// Restrict the battery to these tasks.
    #[serde(default)]
    pub tasks: Option<Vec<String>>,
    #[serde(default = "default_n_prompts")]
    pub n_prompts: usize,
    #[serde(default = "default_n_demos")]
    pub n_demos: usize,
    #[serde(default = "default_n_queries")]
    pub n_queries: usize,
    #[serde(default = "default_few_shot_k")]
    pub few_shot_k: usize,
    #[serde(default = "default_n_shuffles")]
    pub n_shuffles: usize,
    #[serde(default)]
    pub ood_choice: OodChoice,
    #[serde(default)]
    pub patch_positions: PositionMode,
    /// Defaults to `sentiment_lexicon.json` inside the battery directory.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(model: impl Into<PathBuf>, battery: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            model: model.into(),
            battery: battery.into(),
            out: out.into(),
            seed: 0,
            grid: SweepGrid::default(),
            thresholds: Thresholds::default(),
            stages: default_stages(),
            threads: 0,
            run_id: default_run_id(),
            tasks: None,
            n_prompts: default_n_prompts(),
            n_demos: default_n_demos(),
            n_queries: default_n_queries(),
            few_shot_k: default_few_shot_k(),
            n_shuffles: default_n_shuffles(),
            ood_choice: OodChoice::default(),
            patch_positions: PositionMode::default(),
            lexicon: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(obj) = raw.as_object_mut() {
            obj.remove("schema");
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::table::write_json(path, &serde_json::to_value(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.thresholds;
        if !(t.tau > 0.0 && t.tau_r > 0.0 && t.tau.is_finite() && t.tau_r.is_finite()) {
            return Err(Error::Parameter(format!(
                "thresholds must be positive, got tau={} tau_r={}",
                t.tau, t.tau_r
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Parameter("empty stage list".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(
                "stages must be listed once each, in pipeline order".into(),
            ));
        }
        if self.n_queries == 0 || self.n_prompts == 0 {
            return Err(Error::Parameter("n_queries and n_prompts must be positive".into()));
        }
        self.grid.validate()
    }

    pub fn lexicon_path(&self) -> PathBuf {
        self.lexicon
            .clone()
            .unwrap_or_else(|| self.battery.join("sentiment_lexicon.json"))
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.out.join(ARTIFACT_DIR)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join(REPORT_DIR)
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.out.join(LEDGER_FILE)
    }

    /// Fields that change computed results. Output paths, thread count and
    /// the stage list are excluded.
    fn compute_fingerprint(&self) -> Result<String> {
        let v = serde_json::json!({
            "seed": self.seed,
            "grid": self.grid,
            "thresholds": self.thresholds,
            "run_id": self.run_id,
            "tasks": self.tasks,
            "n_prompts": self.n_prompts,
            "n_demos": self.n_demos,
            "n_queries": self.n_queries,
            "few_shot_k": self.few_shot_k,
            "n_shuffles": self.n_shuffles,
            "ood_choice": self.ood_choice,
            "patch_positions": self.patch_positions,
        });
        Ok(serde_json::to_string(&v)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash over every regular file in `dir`, by sorted file name.
fn dir_sha256(dir: &Path) -> Result<String> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        let bytes = std::fs::read(dir.join(&n)).map_err(|e| Error::io(dir.join(&n), e))?;
        h.update(n.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Failed,
    /// Not run because an upstream stage failed.
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputArtifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub input_hash: String,
    pub outputs: Vec<OutputArtifact>,
    pub wall_clock_ms: u64,
    /// False when the record was carried over from a cache hit.
    pub recomputed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub code_version: String,
    pub run_id: String,
    /// model, tokenizer, battery and manifest fingerprints.
    pub input_hashes: BTreeMap<String, String>,
    pub cache_key: String,
    pub stages: BTreeMap<Stage, StageRecord>,
    /// tasks x templates x layers x coarse alphas of the IID sweep.
    pub coarse_configs: u64,
    /// Every IID configuration evaluated, refinement included.
    pub evaluated_configs: u64,
}

impl RunLedger {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(obj) = raw.as_object_mut() {
            obj.remove("schema");
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::table::write_json(path, &serde_json::to_value(self)?)
    }

    pub fn recomputed(&self) -> Vec<Stage> {
        self.stages
            .iter()
            .filter(|(_, r)| r.recomputed)
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(&stage).is_some_and(|r| r.status == StageStatus::Done)
    }

    fn output_path(&self, stage: Stage, file: &str) -> Option<&Path> {
        self.stages
            .get(&stage)?
            .outputs
            .iter()
            .map(|o| o.path.as_path())
            .find(|p| p.file_name().is_some_and(|n| n == file))
    }

    fn outputs_intact(record: &StageRecord) -> bool {
        record
            .outputs
            .iter()
            .all(|o| file_sha256(&o.path).is_ok_and(|h| h == o.sha256))
    }
}

fn input_hashes(m: &RunManifest) -> Result<BTreeMap<String, String>> {
    let mut h = BTreeMap::new();
    h.insert("model".into(), file_sha256(&m.model)?);
    h.insert(
        "tokenizer".into(),
        file_sha256(&m.model.with_file_name("tokenizer.json"))?,
    );
    h.insert("battery".into(), dir_sha256(&m.battery)?);
    let lex = m.lexicon_path();
    if lex.exists() {
        h.insert("lexicon".into(), file_sha256(&lex)?);
    }
    h.insert("manifest".into(), sha256_hex(m.compute_fingerprint()?.as_bytes()));
    h.insert("code".into(), sha256_hex(CODE_VERSION.as_bytes()));
    Ok(h)
}

fn cache_key(hashes: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in hashes {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn stage_input_hash(key: &str, stage: Stage, ledger: &RunLedger) -> String {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    h.update(stage.name().as_bytes());
    for d in stage.deps() {
        if let Some(r) = ledger.stages.get(d) {
            for o in &r.outputs {
                h.update(o.sha256.as_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Every stage reachable upstream of `stages`.
fn closure(stages: &[Stage]) -> BTreeSet<Stage> {
    let mut out = BTreeSet::new();
    let mut todo: Vec<Stage> = stages.to_vec();
    while let Some(s) = todo.pop() {
        if out.insert(s) {
            todo.extend_from_slice(s.deps());
        }
    }
    out
}

/// Runs the manifest's stages in order. Stages whose inputs are unchanged
/// since the previous run in the same output directory are not recomputed.
pub fn run(manifest: &RunManifest) -> Result<RunLedger> {
    manifest.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.threads)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(manifest))
}

fn run_inner(manifest: &RunManifest) -> Result<RunLedger> {
    let hashes = input_hashes(manifest)?;
    let key = cache_key(&hashes);
    let previous = RunLedger::load(&manifest.ledger_path()).ok();

    // Upstream stages must either run now or have intact artifacts from an
    // earlier run with the same cache key.
    let requested: BTreeSet<Stage> = manifest.stages.iter().copied().collect();
    for s in closure(&manifest.stages) {
        if requested.contains(&s) {
            continue;
        }
        let ok = previous.as_ref().is_some_and(|p| {
            p.cache_key == key
                && p.stages
                    .get(&s)
                    .is_some_and(|r| r.status == StageStatus::Done && RunLedger::outputs_intact(r))
        });
        if !ok {
            let needed_by = manifest
                .stages
                .iter()
                .find(|r| closure(&[**r]).contains(&s))
                .map_or("?", |r| r.name());
            return Err(Error::Dependency(format!(
                "stage `{needed_by}` needs `{s}` artifacts; run `{s}` first or add it to the stage list"
            )));
        }
    }

    let mut ledger = RunLedger {
        code_version: CODE_VERSION.into(),
        run_id: manifest.run_id.clone(),
        input_hashes: hashes,
        cache_key: key.clone(),
        stages: BTreeMap::new(),
        coarse_configs: 0,
        evaluated_configs: 0,
    };
    if let Some(p) = previous.as_ref().filter(|p| p.cache_key == key) {
        for (s, r) in &p.stages {
            if r.status == StageStatus::Done && !requested.contains(s) {
                let mut r = r.clone();
                r.recomputed = false;
                ledger.stages.insert(*s, r);
            }
        }
        ledger.coarse_configs = p.coarse_configs;
        ledger.evaluated_configs = p.evaluated_configs;
    }

    std::fs::create_dir_all(manifest.artifact_dir()).map_err(|e| Error::io(manifest.artifact_dir(), e))?;
    std::fs::create_dir_all(manifest.report_dir()).map_err(|e| Error::io(manifest.report_dir(), e))?;

    let mut ctx: Option<stages::Context> = None;
    let mut first_failure: Option<Error> = None;
    for &stage in &manifest.stages {
        if stage.deps().iter().any(|d| !ledger.is_complete(*d)) {
            ledger.stages.insert(
                stage,
                StageRecord {
                    status: StageStatus::Blocked,
                    input_hash: String::new(),
                    outputs: Vec::new(),
                    wall_clock_ms: 0,
                    recomputed: false,
                    error: Some("upstream stage did not complete".into()),
                },
            );
            continue;
        }
        let input_hash = stage_input_hash(&key, stage, &ledger);
        if let Some(prev) = previous.as_ref().and_then(|p| p.stages.get(&stage)) {
            if prev.status == StageStatus::Done && prev.input_hash == input_hash && RunLedger::outputs_intact(prev) {
                let mut r = prev.clone();
                r.recomputed = false;
                ledger.stages.insert(stage, r);
                continue;
            }
        }
        if ctx.is_none() {
            ctx = Some(stages::Context::load(manifest)?);
        }
        let started = Instant::now();
        let result = stages::execute(stage, ctx.as_ref().expect("context loaded"), &mut ledger);
        let wall_clock_ms = started.elapsed().as_millis() as u64;
        let record = match result {
            Ok(paths) => StageRecord {
                status: StageStatus::Done,
                input_hash,
                outputs: paths
                    .into_iter()
                    .map(|p| file_sha256(&p).map(|sha256| OutputArtifact { path: p, sha256 }))
                    .collect::<Result<_>>()?,
                wall_clock_ms,
                recomputed: true,
                error: None,
            },
            Err(e) => {
                let rec = StageRecord {
                    status: StageStatus::Failed,
                    input_hash,
                    outputs: Vec::new(),
                    wall_clock_ms,
                    recomputed: true,
                    error: Some(e.to_string()),
                };
                if first_failure.is_none() {
                    first_failure = Some(Error::Stage {
                        stage: stage.name().into(),
                        source: Box::new(e),
                    });
                }
                rec
            }
        };
        ledger.stages.insert(stage, record);
    }
    ledger.save(&manifest.ledger_path())?;
    match first_failure {
        Some(e) => Err(e),
        None => Ok(ledger),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub per_task: Vec<TaskDelta>,
    pub mean_delta: f64,
}

/// Per-task mean IID differences `b - a` over identical task sets.
pub fn iid_deltas(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<DeltaReport> {
    if a.is_empty() || a.keys().ne(b.keys()) {
        return Err(Error::Comparison(format!(
            "runs cover different tasks: {:?} vs {:?}",
            a.keys().collect::<Vec<_>>(),
            b.keys().collect::<Vec<_>>()
        )));
    }
    let per_task: Vec<TaskDelta> = a
        .iter()
        .zip(b.values())
        .map(|((task, &x), &y)| TaskDelta {
            task: task.clone(),
            a: x,
            b: y,
            delta: y - x,
        })
        .collect();
    let mean_delta = per_task.iter().map(|d| d.delta).sum::<f64>() / per_task.len() as f64;
    Ok(DeltaReport { per_task, mean_delta })
}

/// Mean IID accuracy per task from a completed ledger's gate artifact.
pub fn ledger_iid_means(ledger: &RunLedger) -> Result<BTreeMap<String, f64>> {
    let path = ledger
        .output_path(Stage::Gate, stages::GATE_FILE)
        .ok_or_else(|| Error::Comparison(format!("run `{}` has no IID gate table", ledger.run_id)))?;
    let gates: Vec<GateRecord> = stages::read_artifact(path)?;
    Ok(gates.into_iter().map(|g| (g.task, g.mean_iid)).collect())
}

/// Mean IID delta of run `b` over run `a` (for example instruction-tuned
/// minus base).
pub fn compare_runs(a: &RunLedger, b: &RunLedger) -> Result<DeltaReport> {
    if a.input_hashes.get("battery") != b.input_hashes.get("battery") {
        return Err(Error::Comparison("runs use different batteries".into()));
    }
    iid_deltas(&ledger_iid_means(a)?, &ledger_iid_means(b)?)
}
