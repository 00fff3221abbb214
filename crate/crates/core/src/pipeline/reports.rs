//! Report emission. All report files go through one [`ReportWriter`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;

use super::stages::{self, Context, GateRecord, LensArtifact, StatsArtifact, SweepRecord};
use super::Thresholds;
use crate::error::{Error, Result};
use crate::fv::{outcome_rows, BaselineRecord, FvStore, OUTCOME_HEADER};
use crate::lens::{lens_rows, quadrant_classify, LensProfile, QuadrantCell, VocabProjection, LENS_HEADER};
use crate::patching::{patch_rows, PatchSweep, PATCH_HEADER};
use crate::table::{csv_string, fmt_f64, json_string};
use crate::transfer::{CorrelationReport, TransferPair};

/// The nine table files every completed run emits.
pub const REPORT_FILES: [&str; 9] = [
    "iid_table.csv",
    "transfer_table.csv",
    "quadrant.csv",
    "regression.json",
    "style.json",
    "dissociation.csv",
    "patching.csv",
    "utv.csv",
    "norms.csv",
];

/// Serializes every report write into one directory and remembers what it
/// wrote, in order.
pub struct ReportWriter {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl ReportWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, text: String) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.put(name, csv_string(header, rows)?)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.put(name, json_string(&serde_json::to_value(value)?)?)
    }

    /// One compact JSON object per line, each carrying `schema: 1`.
    pub fn jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        let mut text = String::new();
        for it in items {
            let mut v = serde_json::to_value(it)?;
            if let Some(obj) = v.as_object_mut() {
                obj.insert("schema".into(), 1.into());
            }
            text.push_str(&serde_json::to_string(&v)?);
            text.push('\n');
        }
        self.put(name, text)
    }

    pub fn finish(self) -> Vec<PathBuf> {
        self.written
    }
}

pub(super) struct Inputs {
    pub baselines: Vec<BaselineRecord>,
    pub sweeps: Vec<SweepRecord>,
    pub gates: Vec<GateRecord>,
    pub pairs: Vec<TransferPair>,
    pub lens: LensArtifact,
    pub projections: Vec<VocabProjection>,
    pub patching: Vec<PatchSweep>,
    pub stats: StatsArtifact,
}

/// Readability per task is the best layer of the template-averaged zero-shot
/// top-10 accuracy; steerability is the gate's mean IID accuracy.
pub fn quadrant_cells(
    gates: &[GateRecord],
    zero_shot: &[LensProfile],
    run: &str,
    thresholds: Thresholds,
) -> Vec<QuadrantCell> {
    gates
        .iter()
        .map(|g| {
            let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for p in zero_shot.iter().filter(|p| p.task == g.task) {
                for (l, t) in &p.per_layer {
                    let e = sums.entry(*l).or_default();
                    e.0 += t.top10;
                    e.1 += 1;
                }
            }
            let best_top10 = sums.values().map(|(s, n)| s / *n as f64).fold(0.0, f64::max);
            quadrant_classify(&g.task, run, g.mean_iid, best_top10, thresholds.tau, thresholds.tau_r)
        })
        .collect()
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn correlation_rows(reports: &[CorrelationReport], alpha_corrected: f64) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|c| {
            let (r, p, n) = match &c.result {
                Some(x) => (fmt_f64(x.r), fmt_f64(x.p), x.n.to_string()),
                None => (String::new(), String::new(), String::new()),
            };
            vec![
                c.scope.clone(),
                r,
                p,
                n,
                fmt_f64(alpha_corrected),
                c.note.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

const CORRELATION_HEADER: [&str; 6] = ["scope", "r", "p", "n", "alpha_corrected", "note"];

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub(super) fn emit(ctx: &Context) -> Result<Vec<PathBuf>> {
    let inp = stages::load_all(ctx)?;
    let store = FvStore::read(&ctx.artifact(stages::STORE_FILE))?;
    let m = &ctx.manifest;
    let mut w = ReportWriter::new(m.report_dir())?;

    // IID table: baselines next to the best steering outcome.
    let base: BTreeMap<(String, String), &BaselineRecord> = inp
        .baselines
        .iter()
        .map(|b| ((b.task.clone(), b.template.to_string()), b))
        .collect();
    let mut rows = Vec::new();
    for s in &inp.sweeps {
        let b = base.get(&(s.task.clone(), s.template.to_string()));
        rows.push(vec![
            s.task.clone(),
            s.template.to_string(),
            b.map(|b| fmt_f64(b.zero_shot_acc)).unwrap_or_default(),
            b.map(|b| fmt_f64(b.few_shot_acc)).unwrap_or_default(),
            s.best.layer.to_string(),
            s.best.alpha.to_string(),
            fmt_f64(s.best.accuracy()),
            s.best.n_queries.to_string(),
        ]);
    }
    w.csv(
        "iid_table.csv",
        &["task", "template", "zero_shot", "few_shot", "best_layer", "best_alpha", "iid_accuracy", "n_queries"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = inp
        .pairs
        .iter()
        .map(|p| {
            vec![
                p.task.clone(),
                p.source.to_string(),
                p.target.to_string(),
                p.layer.to_string(),
                p.alpha.to_string(),
                fmt_f64(p.cosine),
                fmt_f64(p.ood_accuracy),
                fmt_f64(p.source_iid),
                fmt_f64(p.source_norm),
                p.n_queries.to_string(),
            ]
        })
        .collect();
    w.csv(
        "transfer_table.csv",
        &["task", "source", "target", "layer", "alpha", "cosine", "ood_accuracy", "source_iid", "source_norm", "n_queries"],
        &rows,
    )?;

    let cells = quadrant_cells(&inp.gates, &inp.lens.zero_shot, &m.run_id, m.thresholds);
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.task.clone(),
                c.run.clone(),
                fmt_f64(c.best_iid),
                fmt_f64(c.best_top10),
                c.steerable.to_string(),
                c.readable.to_string(),
                label(&c.quadrant),
            ]
        })
        .collect();
    w.csv(
        "quadrant.csv",
        &["task", "run", "mean_iid", "best_top10", "steerable", "readable", "quadrant"],
        &rows,
    )?;

    w.json("regression.json", &inp.stats.regression)?;
    w.json(
        "style.json",
        &json!({ "group_a": "within_style", "group_b": "across_style", "welch": inp.stats.style }),
    )?;

    let rows: Vec<Vec<String>> = inp
        .stats
        .dissociation
        .iter()
        .map(|d| {
            vec![
                d.task.clone(),
                d.source.to_string(),
                d.target.to_string(),
                fmt_f64(d.cosine),
                fmt_f64(d.ood_accuracy),
                d.is_dissociation.to_string(),
                d.iid_viable.to_string(),
            ]
        })
        .collect();
    w.csv(
        "dissociation.csv",
        &["task", "source", "target", "cosine", "ood_accuracy", "is_dissociation", "iid_viable"],
        &rows,
    )?;
    w.jsonl("dissociation.jsonl", &inp.stats.dissociation)?;

    let patch_results: Vec<_> = inp.patching.iter().flat_map(|s| s.results.iter().cloned()).collect();
    w.csv("patching.csv", &PATCH_HEADER, &patch_rows(&patch_results))?;

    let rows: Vec<Vec<String>> = inp
        .stats
        .utv
        .iter()
        .map(|u| {
            vec![
                u.task.clone(),
                u.layer.to_string(),
                fmt_f64(u.pca.pc1_fraction),
                u.pca.degenerate.to_string(),
            ]
        })
        .collect();
    w.csv("utv.csv", &["task", "layer", "pc1_fraction", "degenerate"], &rows)?;

    let alpha_corrected = inp.stats.permutation.first().map_or(0.05, |p| p.alpha_corrected);
    w.csv("norms.csv", &CORRELATION_HEADER, &correlation_rows(&inp.stats.norms, alpha_corrected))?;

    // Supporting tables.
    w.csv(
        "correlations.csv",
        &CORRELATION_HEADER,
        &correlation_rows(&inp.stats.cosine, alpha_corrected),
    )?;
    let sweep_rows: Vec<_> = inp.sweeps.iter().flat_map(|s| outcome_rows(&s.table)).collect();
    w.csv("iid_sweep.csv", &OUTCOME_HEADER, &sweep_rows)?;
    let mut profiles = inp.lens.zero_shot.clone();
    profiles.extend(inp.lens.post_steering.iter().cloned());
    w.csv("lens_profiles.csv", &LENS_HEADER, &lens_rows(&profiles))?;
    let rows: Vec<Vec<String>> = inp
        .lens
        .deltas
        .iter()
        .flat_map(|d| {
            d.per_layer.iter().map(move |(l, x)| {
                vec![
                    d.task.clone(),
                    d.template.to_string(),
                    l.to_string(),
                    fmt_f64(*x),
                    fmt_f64(d.max_delta),
                ]
            })
        })
        .collect();
    w.csv("lens_delta.csv", &["task", "template", "layer", "delta_top10", "max_delta"], &rows)?;
    w.json("fv_projection.json", &json!({ "projections": inp.projections }))?;
    let rows: Vec<Vec<String>> = store
        .iter()
        .map(|fv| {
            vec![
                fv.task.clone(),
                fv.template.to_string(),
                fv.layer.to_string(),
                fmt_f64(fv.l2_norm as f64),
            ]
        })
        .collect();
    w.csv("fv_norms.csv", &["task", "template", "layer", "l2_norm"], &rows)?;

    w.json("summary.json", &summary(&inp, &cells))?;
    Ok(w.finish())
}

fn summary(inp: &Inputs, cells: &[QuadrantCell]) -> serde_json::Value {
    let mut tasks = serde_json::Map::new();
    for g in &inp.gates {
        let ood = mean(inp.pairs.iter().filter(|p| p.task == g.task).map(|p| p.ood_accuracy));
        let patch: Vec<_> = inp.patching.iter().filter(|s| s.results.iter().any(|r| r.config.task == g.task)).collect();
        let max_recovery = patch.iter().filter(|s| s.best_layer.is_some()).map(|s| s.max_recovery).fold(None, |a: Option<f64>, x| Some(a.map_or(x, |a| a.max(x))));
        tasks.insert(
            g.task.clone(),
            json!({
                "mean_iid": g.mean_iid,
                "gated": g.gated,
                "mean_ood": ood,
                "iid_ood_gap": g.mean_iid - ood,
                "patch_max_recovery": max_recovery,
                "patch_configs": patch.iter().map(|s| s.results.len()).sum::<usize>(),
                "patch_skipped": patch.iter().flat_map(|s| &s.results).filter(|r| r.skipped).count(),
            }),
        );
    }
    let mut quadrants: BTreeMap<String, usize> = ["both", "readable_only", "steerable_only", "neither"]
        .into_iter()
        .map(|q| (q.to_string(), 0))
        .collect();
    for c in cells {
        *quadrants.entry(label(&c.quadrant)).or_default() += 1;
    }
    json!({
        "tasks": tasks,
        "quadrants": quadrants,
        "dissociation": inp.stats.dissociation_summary,
        "permutation": inp.stats.permutation,
        "cosine_correlations": inp.stats.cosine,
        "mean_iid": mean(inp.gates.iter().map(|g| g.mean_iid)),
        "mean_ood": mean(inp.pairs.iter().map(|p| p.ood_accuracy)),
    })
}
