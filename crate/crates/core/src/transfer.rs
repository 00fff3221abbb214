//! Cross-template transfer: OOD evaluation of every directed template pair
//! and the geometry statistics built on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::battery::{directed_pairs, ExamplePair, TaskSpec, TemplateId, TemplateStyle};
use crate::error::{Error, Result};
use crate::fv::{cosine, select_best, steer_eval, EvalOutcome, FvStore, SweepGrid};
use crate::model::ModelHandle;
use crate::stats::{self, Correlation, PcaReport, PermutationResult, WelchReport};

pub const DISSOCIATION_COSINE: f64 = 0.80;
pub const DISSOCIATION_ACCURACY: f64 = 0.40;

pub fn enumerate_pairs(task: &TaskSpec) -> Result<Vec<(TemplateId, TemplateId)>> {
    directed_pairs(task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub task: String,
    pub source: TemplateId,
    pub target: TemplateId,
    pub layer: usize,
    pub alpha: f32,
    pub cosine: f64,
    pub ood_accuracy: f64,
    pub source_iid: f64,
    /// FV norm of the source at `layer`.
    pub source_norm: f64,
    pub n_queries: usize,
}

/// Whose best (layer, alpha) an OOD pair is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodChoice {
    #[default]
    SourceBest,
    /// Re-sweep the grid for each pair and keep its own best.
    PairBest,
}

/// Evaluates each source FV on every other template's queries.
/// `best_iid` holds each template's best IID outcome.
#[allow(clippy::too_many_arguments)]
pub fn ood_matrix(
    model: &ModelHandle,
    task: &TaskSpec,
    store: &FvStore,
    best_iid: &BTreeMap<TemplateId, EvalOutcome>,
    grid: &SweepGrid,
    choice: OodChoice,
    queries_for: &dyn Fn(TemplateId) -> Vec<ExamplePair>,
) -> Result<Vec<TransferPair>> {
    let mut out = Vec::with_capacity(56);
    for (src, tgt) in enumerate_pairs(task)? {
        let best = best_iid
            .get(&src)
            .ok_or_else(|| Error::Store(format!("no IID sweep for {}/{src}", task.name)))?;
        let queries = queries_for(tgt);
        let outcome = match choice {
            OodChoice::SourceBest => {
                let fv = store.get(&task.name, src, best.layer)?;
                steer_eval(model, fv, task, tgt, best.layer, best.alpha, grid.positions, &queries)?
            }
            OodChoice::PairBest => {
                let mut table = Vec::new();
                for l in grid.layers_for(model.arch.n_layers) {
                    let fv = store.get(&task.name, src, l)?;
                    for &a in &grid.alphas {
                        table.push(steer_eval(model, fv, task, tgt, l, a, grid.positions, &queries)?);
                    }
                }
                select_best(&table).cloned().ok_or_else(|| Error::Parameter("empty grid".into()))?
            }
        };
        let fs = store.get(&task.name, src, outcome.layer)?;
        let ft = store.get(&task.name, tgt, outcome.layer)?;
        out.push(TransferPair {
            task: task.name.clone(),
            source: src,
            target: tgt,
            layer: outcome.layer,
            alpha: outcome.alpha,
            cosine: cosine(&fs.vector, &ft.vector),
            ood_accuracy: outcome.accuracy(),
            source_iid: best.accuracy(),
            source_norm: fs.l2_norm as f64,
            n_queries: outcome.n_queries,
        });
    }
    Ok(out)
}

pub fn is_dissociation(cosine: f64, accuracy: f64) -> bool {
    cosine > DISSOCIATION_COSINE && accuracy < DISSOCIATION_ACCURACY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissociationRecord {
    pub task: String,
    pub source: TemplateId,
    pub target: TemplateId,
    pub cosine: f64,
    pub ood_accuracy: f64,
    pub is_dissociation: bool,
    pub iid_viable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissociationSummary {
    pub scope: String,
    pub n_pairs: usize,
    pub n_dissociations: usize,
    pub n_viable_dissociations: usize,
    pub rate: f64,
}

/// Flags every pair; `iid_viable` marks sources whose IID accuracy passes `tau`.
pub fn dissociation_scan(pairs: &[TransferPair], tau: f64) -> (Vec<DissociationRecord>, Vec<DissociationSummary>) {
    let records: Vec<DissociationRecord> = pairs
        .iter()
        .map(|p| DissociationRecord {
            task: p.task.clone(),
            source: p.source,
            target: p.target,
            cosine: p.cosine,
            ood_accuracy: p.ood_accuracy,
            is_dissociation: is_dissociation(p.cosine, p.ood_accuracy),
            iid_viable: p.source_iid > tau,
        })
        .collect();
    let summarize = |scope: &str, rs: &[&DissociationRecord]| {
        let n = rs.iter().filter(|r| r.is_dissociation).count();
        DissociationSummary {
            scope: scope.to_string(),
            n_pairs: rs.len(),
            n_dissociations: n,
            n_viable_dissociations: rs.iter().filter(|r| r.is_dissociation && r.iid_viable).count(),
            rate: if rs.is_empty() { 0.0 } else { n as f64 / rs.len() as f64 },
        }
    };
    let mut by_task: BTreeMap<&str, Vec<&DissociationRecord>> = BTreeMap::new();
    for r in &records {
        by_task.entry(&r.task).or_default().push(r);
    }
    let mut summary = vec![summarize("pooled", &records.iter().collect::<Vec<_>>())];
    for (t, rs) in &by_task {
        summary.push(summarize(t, rs));
    }
    (records, summary)
}

/// Dissociation rate as a permutation statistic.
pub fn dissociation_rate(cos: &[f64], acc: &[f64]) -> f64 {
    if cos.is_empty() {
        return 0.0;
    }
    cos.iter().zip(acc).filter(|(c, a)| is_dissociation(**c, **a)).count() as f64 / cos.len() as f64
}

/// Shuffles accuracy against cosine within each task.
pub fn dissociation_permutation(pairs: &[TransferPair], n_shuffles: usize, seed: u64) -> Result<PermutationResult> {
    let mut task_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for p in pairs {
        let next = task_ids.len();
        task_ids.entry(&p.task).or_insert(next);
    }
    let cos: Vec<f64> = pairs.iter().map(|p| p.cosine).collect();
    let acc: Vec<f64> = pairs.iter().map(|p| p.ood_accuracy).collect();
    let groups: Vec<usize> = pairs.iter().map(|p| task_ids[p.task.as_str()]).collect();
    stats::permutation_test(&cos, &acc, &groups, n_shuffles, seed, dissociation_rate)
}

/// Within-style vs across-style OOD accuracy (Welch).
pub fn style_compare(pairs: &[TransferPair]) -> Result<WelchReport> {
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for p in pairs {
        if TemplateStyle::for_id(p.source) == TemplateStyle::for_id(p.target) {
            within.push(p.ood_accuracy);
        } else {
            across.push(p.ood_accuracy);
        }
    }
    stats::welch(&within, &across)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// "pooled" or a task name.
    pub scope: String,
    pub result: Option<Correlation>,
    /// Why `result` is missing, or a caveat on its p-value.
    pub note: Option<String>,
}

/// Pairs sharing a source template share its FV, so the pooled t-test
/// p-value is optimistic.
pub const POOLED_P_NOTE: &str = "parametric p; no correction for pairs sharing a source template";

fn correlation_report(scope: &str, xs: &[f64], ys: &[f64]) -> Result<CorrelationReport> {
    match stats::pearson(xs, ys) {
        Ok(c) => Ok(CorrelationReport {
            scope: scope.into(),
            result: Some(c),
            note: None,
        }),
        Err(Error::Degenerate(msg)) => Ok(CorrelationReport {
            scope: scope.into(),
            result: None,
            note: Some(msg),
        }),
        Err(e) => Err(e),
    }
}

fn pooled_and_per_task(pairs: &[TransferPair], x: impl Fn(&TransferPair) -> f64) -> Result<Vec<CorrelationReport>> {
    let xs: Vec<f64> = pairs.iter().map(&x).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.ood_accuracy).collect();
    let mut pooled = correlation_report("pooled", &xs, &ys)?;
    if pooled.result.is_some() {
        pooled.note = Some(POOLED_P_NOTE.into());
    }
    let mut out = vec![pooled];
    let mut by_task: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in pairs {
        let e = by_task.entry(&p.task).or_default();
        e.0.push(x(p));
        e.1.push(p.ood_accuracy);
    }
    for (t, (xs, ys)) in by_task {
        out.push(correlation_report(t, &xs, &ys)?);
    }
    Ok(out)
}

/// Cosine vs OOD accuracy, pooled and per task.
pub fn cosine_correlations(pairs: &[TransferPair]) -> Result<Vec<CorrelationReport>> {
    pooled_and_per_task(pairs, |p| p.cosine)
}

/// Pooled source FV norm vs OOD accuracy. Equal norms are a degenerate-input error.
pub fn norm_correlation(pairs: &[TransferPair]) -> Result<Correlation> {
    let xs: Vec<f64> = pairs.iter().map(|p| p.source_norm).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.ood_accuracy).collect();
    stats::pearson(&xs, &ys)
}

/// Source FV norm vs OOD accuracy, pooled and per task; degenerate scopes are noted.
pub fn norm_correlations(pairs: &[TransferPair]) -> Result<Vec<CorrelationReport>> {
    pooled_and_per_task(pairs, |p| p.source_norm)
}

pub fn regression(pairs: &[TransferPair]) -> Result<stats::RegressionReport> {
    let rows: Vec<stats::RegressionRow> = pairs
        .iter()
        .map(|p| stats::RegressionRow {
            task: &p.task,
            cosine: p.cosine,
            accuracy: p.ood_accuracy,
        })
        .collect();
    stats::hierarchical_regression(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtvReport {
    pub task: String,
    pub layer: usize,
    pub pca: PcaReport,
}

/// PC1 share of the task's template FVs at `layer`.
pub fn utv_pca(store: &FvStore, task: &TaskSpec, layer: usize) -> Result<UtvReport> {
    let vs: Vec<Vec<f32>> = task
        .template_ids()
        .into_iter()
        .map(|t| store.get(&task.name, t, layer).map(|fv| fv.vector.clone()))
        .collect::<Result<_>>()?;
    Ok(UtvReport {
        task: task.name.clone(),
        layer,
        pca: stats::pc1_fraction(&vs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(task: &str, s: u8, t: u8, cos: f64, acc: f64) -> TransferPair {
        TransferPair {
            task: task.into(),
            source: TemplateId::new(s).unwrap(),
            target: TemplateId::new(t).unwrap(),
            layer: 0,
            alpha: 1.0,
            cosine: cos,
            ood_accuracy: acc,
            source_iid: 0.5,
            source_norm: 1.0,
            n_queries: 10,
        }
    }

    #[test]
    fn dissociation_boundaries() {
        assert!(!is_dissociation(0.80, 0.39));
        assert!(is_dissociation(0.95, 0.10));
        assert!(!is_dissociation(0.95, 0.40));
    }

    #[test]
    fn scan_counts_and_rate() {
        let pairs = vec![pair("a", 1, 2, 0.9, 0.1), pair("a", 2, 1, 0.5, 0.1), pair("b", 1, 2, 0.85, 0.3), pair("b", 2, 1, 0.9, 0.9)];
        let (records, summary) = dissociation_scan(&pairs, 0.10);
        assert_eq!(records.iter().filter(|r| r.is_dissociation).count(), 2);
        assert_eq!(summary[0].rate, 0.5);
        assert_eq!(summary.len(), 3);
    }

    #[test]
    fn style_groups() {
        // T1->T2 is within-style, T1->T3 is across.
        let pairs = vec![pair("a", 1, 2, 0.0, 0.4), pair("a", 2, 1, 0.0, 0.6), pair("a", 1, 3, 0.0, 0.2), pair("a", 3, 1, 0.0, 0.4)];
        let w = style_compare(&pairs).unwrap();
        assert!((w.mean_a - 0.5).abs() < 1e-12);
        assert!((w.mean_b - 0.3).abs() < 1e-12);
    }

    #[test]
    fn degenerate_correlation_is_recorded() {
        let pairs = vec![pair("a", 1, 2, 0.5, 0.1), pair("a", 2, 1, 0.5, 0.2), pair("a", 1, 3, 0.5, 0.3)];
        let rs = cosine_correlations(&pairs).unwrap();
        assert!(rs[0].result.is_none());
        assert!(rs[0].note.is_some());
    }

    #[test]
    fn equal_norms_are_degenerate() {
        let pairs = vec![pair("a", 1, 2, 0.5, 0.1), pair("a", 2, 1, 0.6, 0.2), pair("a", 1, 3, 0.7, 0.3)];
        assert!(matches!(norm_correlation(&pairs), Err(Error::Degenerate(_))));
    }

    #[test]
    fn norms_equal_to_accuracy_correlate_perfectly() {
        let mut pairs = vec![pair("a", 1, 2, 0.5, 0.1), pair("a", 2, 1, 0.6, 0.2), pair("a", 1, 3, 0.7, 0.7)];
        for p in &mut pairs {
            p.source_norm = p.ood_accuracy;
        }
        assert_eq!(norm_correlation(&pairs).unwrap().r, 1.0);
    }
}
