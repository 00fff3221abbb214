//! Function-vector extraction, steering sweeps, the IID gate and baselines.

mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use store::{FvStore, STORE_MAGIC};

use crate::battery::{
    build_contrast_prompts, build_few_shot_prompt, match_answer, render_zero_shot, ExamplePair,
    TaskSpec, TaskSplit, TemplateId,
};
use crate::error::{Error, Result};
use crate::model::{ModelHandle, InterventionPlan, PositionMode};
use crate::seed::SeedMix;
use crate::table::{fmt_f64, write_csv};

/// Mean-difference direction for one (task, template, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionVector {
    pub task: String,
    pub template: TemplateId,
    pub layer: usize,
    pub vector: Vec<f32>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub l2_norm: f32,
    pub seed: u64,
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32
}

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn mean_f64(rows: &[Vec<f32>], d: usize) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no activations to average".into()));
    }
    let mut acc = vec![0.0f64; d];
    for r in rows {
        if r.len() != d {
            return Err(Error::Parameter(format!("activation length {} != {d}", r.len())));
        }
        for (a, &x) in acc.iter_mut().zip(r) {
            *a += x as f64;
        }
    }
    let n = rows.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

impl FunctionVector {
    pub fn new(task: &str, template: TemplateId, layer: usize, vector: Vec<f32>, n_pos: usize, n_neg: usize, seed: u64) -> Self {
        let l2_norm = l2_norm(&vector);
        Self {
            task: task.to_string(),
            template,
            layer,
            vector,
            n_pos,
            n_neg,
            l2_norm,
            seed,
        }
    }

    /// `mean(pos) - mean(neg)`, accumulated in f64.
    pub fn from_activations(
        task: &str,
        template: TemplateId,
        layer: usize,
        pos: &[Vec<f32>],
        neg: &[Vec<f32>],
        seed: u64,
    ) -> Result<Self> {
        let d = pos.first().map(Vec::len).unwrap_or(0);
        let mp = mean_f64(pos, d)?;
        let mn = mean_f64(neg, d)?;
        let vector = mp.iter().zip(&mn).map(|(a, b)| (a - b) as f32).collect();
        Ok(Self::new(task, template, layer, vector, pos.len(), neg.len(), seed))
    }

    pub fn id(&self) -> String {
        format!("{}/{}/L{}", self.task, self.template, self.layer)
    }

    pub fn zeroed(&self) -> Self {
        Self::new(&self.task, self.template, self.layer, vec![0.0; self.vector.len()], self.n_pos, self.n_neg, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub n_prompts: usize,
    pub n_demos: usize,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            n_prompts: 20,
            n_demos: 15,
            seed: 0,
        }
    }
}

/// Seeded subset of the demo pool used as extraction queries.
pub fn extraction_queries<'a>(task: &'a TaskSpec, template: TemplateId, cfg: &ExtractConfig) -> Result<Vec<&'a ExamplePair>> {
    let pool = TaskSplit::of(task).demo_pool;
    if pool.len() < cfg.n_prompts {
        return Err(Error::InsufficientData(format!(
            "task {} has {} demo-pool examples, {} extraction prompts requested",
            task.name,
            pool.len(),
            cfg.n_prompts
        )));
    }
    let mut rng = SeedMix::new(cfg.seed)
        .with_str("extract")
        .with_str(&task.name)
        .with_str(&template.to_string())
        .rng();
    let mut picked: Vec<&ExamplePair> = pool.iter().collect();
    picked.shuffle(&mut rng);
    picked.truncate(cfg.n_prompts);
    Ok(picked)
}

/// One FV per requested layer from a single pass over the contrast prompts.
pub fn extract_fvs(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    layers: &[usize],
    cfg: &ExtractConfig,
) -> Result<Vec<FunctionVector>> {
    if cfg.n_prompts == 0 {
        return Err(Error::Parameter("n_prompts must be at least 1".into()));
    }
    let tap_layers: BTreeSet<usize> = layers.iter().copied().collect();
    let tpl = task.template(template);
    let queries = extraction_queries(task, template, cfg)?;
    let final_states = |text: &str| -> Result<BTreeMap<usize, Vec<f32>>> {
        let tokens = model.encode(text.as_bytes());
        let rec = model.forward_with_taps(&tokens, &tap_layers, None)?;
        let last = tokens.len() - 1;
        Ok(tap_layers
            .iter()
            .map(|&l| (l, rec.tap(l, last).map(<[f32]>::to_vec).unwrap_or_default()))
            .collect())
    };
    type LayerRows = BTreeMap<usize, Vec<f32>>;
    let runs: Vec<(LayerRows, LayerRows)> = queries
        .par_iter()
        .map(|q| {
            let (pos, neg) = build_contrast_prompts(task, tpl, q, cfg.n_demos, cfg.seed)?;
            Ok((final_states(&pos.rendered)?, final_states(&neg.rendered)?))
        })
        .collect::<Result<_>>()?;
    layers
        .iter()
        .map(|&l| {
            let pos: Vec<Vec<f32>> = runs.iter().map(|r| r.0[&l].clone()).collect();
            let neg: Vec<Vec<f32>> = runs.iter().map(|r| r.1[&l].clone()).collect();
            FunctionVector::from_activations(&task.name, template, l, &pos, &neg, cfg.seed)
        })
        .collect()
}

pub fn extract_fv(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    layer: usize,
    cfg: &ExtractConfig,
) -> Result<FunctionVector> {
    Ok(extract_fvs(model, task, template, &[layer], cfg)?.remove(0))
}

/// Accuracy record for one steering configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub task: String,
    pub source: TemplateId,
    pub target: TemplateId,
    pub layer: usize,
    pub alpha: f32,
    pub n_correct: usize,
    pub n_queries: usize,
}

impl EvalOutcome {
    pub fn accuracy(&self) -> f64 {
        if self.n_queries == 0 {
            0.0
        } else {
            self.n_correct as f64 / self.n_queries as f64
        }
    }
}

/// Greedy continuations of the zero-shot prompts for `queries`.
pub fn generate_for_queries(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    queries: &[ExamplePair],
    plan: Option<&InterventionPlan>,
) -> Result<Vec<Vec<u8>>> {
    let tpl = task.template(template);
    queries
        .par_iter()
        .map(|q| model.generate_greedy(render_zero_shot(tpl, &q.input).as_bytes(), task.max_new_tokens, plan))
        .collect()
}

fn count_correct(task: &TaskSpec, queries: &[ExamplePair], outputs: &[Vec<u8>]) -> usize {
    queries
        .iter()
        .zip(outputs)
        .filter(|(q, out)| match_answer(task, &String::from_utf8_lossy(out), q))
        .count()
}

#[allow(clippy::too_many_arguments)]
pub fn steer_eval(
    model: &ModelHandle,
    fv: &FunctionVector,
    task: &TaskSpec,
    target: TemplateId,
    layer: usize,
    alpha: f32,
    positions: PositionMode,
    queries: &[ExamplePair],
) -> Result<EvalOutcome> {
    let plan = InterventionPlan {
        layer,
        vector: fv.vector.clone(),
        alpha,
        positions,
    };
    plan.validate(&model.arch)?;
    let outputs = generate_for_queries(model, task, target, queries, Some(&plan))?;
    Ok(EvalOutcome {
        task: task.name.clone(),
        source: fv.template,
        target,
        layer,
        alpha,
        n_correct: count_correct(task, queries, &outputs),
        n_queries: queries.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f32>,
    pub refinement_step: f32,
    pub refinement_radius: usize,
    /// `None` means every layer.
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub positions: PositionMode,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0],
            refinement_step: 0.25,
            refinement_radius: 2,
            layers: None,
            positions: PositionMode::AllPositions,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas[0] <= 0.0 || self.alphas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("alphas must be positive and strictly increasing".into()));
        }
        if self.refinement_step <= 0.0 || self.refinement_step.is_nan() {
            return Err(Error::Parameter("refinement_step must be positive".into()));
        }
        if matches!(&self.layers, Some(l) if l.is_empty()) {
            return Err(Error::Parameter("empty layer list".into()));
        }
        Ok(())
    }

    pub fn layers_for(&self, n_layers: usize) -> Vec<usize> {
        match &self.layers {
            Some(l) => l.clone(),
            None => (0..n_layers).collect(),
        }
    }

    /// Refinement alphas around `best`, excluding those already evaluated.
    pub fn refinement_alphas(&self, best: f32, evaluated: &[f32]) -> Vec<f32> {
        let mut out = Vec::new();
        for k in (1..=self.refinement_radius).rev() {
            out.push(best - k as f32 * self.refinement_step);
        }
        for k in 1..=self.refinement_radius {
            out.push(best + k as f32 * self.refinement_step);
        }
        out.retain(|&a| a > 0.0 && !evaluated.iter().any(|&e| (e - a).abs() < 1e-6));
        out
    }
}

/// Best by accuracy; ties go to the lowest layer, then the lowest alpha.
pub fn select_best(outcomes: &[EvalOutcome]) -> Option<&EvalOutcome> {
    outcomes.iter().reduce(|best, o| {
        let better = o.n_correct * best.n_queries > best.n_correct * o.n_queries
            || (o.n_correct * best.n_queries == best.n_correct * o.n_queries
                && (o.layer, o.alpha) < (best.layer, best.alpha));
        if better {
            o
        } else {
            best
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: EvalOutcome,
    pub table: Vec<EvalOutcome>,
}

/// Coarse grid over layers x alphas, then refinement at the best layer.
/// `fvs` maps layer to the template's FV at that layer.
pub fn sweep(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    fvs: &BTreeMap<usize, FunctionVector>,
    grid: &SweepGrid,
    queries: &[ExamplePair],
) -> Result<SweepResult> {
    grid.validate()?;
    let layers = grid.layers_for(model.arch.n_layers);
    let fv_at = |l: usize| {
        fvs.get(&l)
            .ok_or_else(|| Error::Store(format!("no FV for {}/{template} at layer {l}", task.name)))
    };
    let mut table = Vec::with_capacity(layers.len() * grid.alphas.len() + 2 * grid.refinement_radius);
    for &l in &layers {
        let fv = fv_at(l)?;
        for &a in &grid.alphas {
            table.push(steer_eval(model, fv, task, template, l, a, grid.positions, queries)?);
        }
    }
    let coarse = select_best(&table).cloned().ok_or_else(|| Error::Parameter("empty sweep".into()))?;
    let fv = fv_at(coarse.layer)?;
    for a in grid.refinement_alphas(coarse.alpha, &grid.alphas) {
        table.push(steer_eval(model, fv, task, template, coarse.layer, a, grid.positions, queries)?);
    }
    let best = select_best(&table).cloned().expect("table is nonempty");
    Ok(SweepResult { best, table })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub gated: bool,
    pub mean_iid: f64,
}

/// Passes when the mean of per-template best IID accuracies exceeds `tau`.
pub fn iid_gate(best_iid: &[f64], tau: f64) -> Result<GateResult> {
    if best_iid.is_empty() {
        return Err(Error::Parameter("gate needs at least one template".into()));
    }
    let mean_iid = best_iid.iter().sum::<f64>() / best_iid.len() as f64;
    Ok(GateResult {
        gated: mean_iid > tau,
        mean_iid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub task: String,
    pub template: TemplateId,
    pub zero_shot_acc: f64,
    pub few_shot_acc: f64,
    pub few_shot_k: usize,
}

pub fn baselines(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    queries: &[ExamplePair],
    few_shot_k: usize,
    seed: u64,
) -> Result<BaselineRecord> {
    let n = queries.len().max(1) as f64;
    let zero = generate_for_queries(model, task, template, queries, None)?;
    let tpl = task.template(template);
    let few: Vec<Vec<u8>> = queries
        .par_iter()
        .map(|q| {
            let b = build_few_shot_prompt(task, tpl, q, few_shot_k, seed)?;
            model.generate_greedy(b.rendered.as_bytes(), task.max_new_tokens, None)
        })
        .collect::<Result<_>>()?;
    Ok(BaselineRecord {
        task: task.name.clone(),
        template,
        zero_shot_acc: count_correct(task, queries, &zero) as f64 / n,
        few_shot_acc: count_correct(task, queries, &few) as f64 / n,
        few_shot_k,
    })
}

pub const OUTCOME_HEADER: [&str; 7] = ["task", "source", "target", "layer", "alpha", "accuracy", "n_queries"];

pub fn outcome_rows(outcomes: &[EvalOutcome]) -> Vec<Vec<String>> {
    outcomes
        .iter()
        .map(|o| {
            vec![
                o.task.clone(),
                o.source.to_string(),
                o.target.to_string(),
                o.layer.to_string(),
                o.alpha.to_string(),
                fmt_f64(o.accuracy()),
                o.n_queries.to_string(),
            ]
        })
        .collect()
}

pub fn write_outcomes(path: &Path, outcomes: &[EvalOutcome]) -> Result<()> {
    write_csv(path, &OUTCOME_HEADER, &outcome_rows(outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1() -> TemplateId {
        TemplateId::new(1).unwrap()
    }

    #[test]
    fn identical_sets_give_zero_vector() {
        let acts = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        let fv = FunctionVector::from_activations("t", t1(), 0, &acts, &acts, 0).unwrap();
        assert_eq!(fv.vector, vec![0.0, 0.0]);
        assert_eq!(fv.l2_norm, 0.0);
    }

    #[test]
    fn hand_built_mean_difference() {
        let pos = vec![vec![1.0, 0.0, 2.0], vec![3.0, 1.0, 2.0], vec![2.0, 2.0, 2.0]];
        let neg = vec![vec![0.0, 0.0, 1.0], vec![0.0, 3.0, 1.0], vec![3.0, 0.0, 1.0]];
        let fv = FunctionVector::from_activations("t", t1(), 0, &pos, &neg, 0).unwrap();
        // Column means: pos (2, 1, 2), neg (1, 1, 1).
        assert_eq!(fv.vector, vec![1.0, 0.0, 1.0]);
        assert!((fv.l2_norm - 2f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn refinement_skips_evaluated_alphas() {
        let g = SweepGrid::default();
        assert_eq!(g.alphas.len(), 8);
        assert_eq!(g.refinement_alphas(1.5, &g.alphas), vec![1.25, 1.75]);
        assert_eq!(g.refinement_alphas(0.5, &g.alphas), vec![0.25, 0.75]);
        assert_eq!(g.refinement_alphas(5.0, &g.alphas), vec![4.5, 4.75, 5.25, 5.5]);
    }

    #[test]
    fn tie_break_lowest_layer_then_alpha() {
        let mk = |layer, alpha| EvalOutcome {
            task: "t".into(),
            source: t1(),
            target: t1(),
            layer,
            alpha,
            n_correct: 3,
            n_queries: 10,
        };
        let table = vec![mk(2, 0.5), mk(1, 3.0), mk(1, 1.0), mk(3, 0.25)];
        let best = select_best(&table).unwrap();
        assert_eq!((best.layer, best.alpha), (1, 1.0));
    }

    #[test]
    fn gate_is_strict() {
        assert!(!iid_gate(&[0.10], 0.10).unwrap().gated);
        assert!(!iid_gate(&[0.028], 0.10).unwrap().gated);
        assert!(iid_gate(&[0.738], 0.10).unwrap().gated);
        assert!(iid_gate(&[], 0.10).is_err());
    }

    #[test]
    fn empty_layer_list_rejected() {
        let g = SweepGrid {
            layers: Some(vec![]),
            ..Default::default()
        };
        assert!(matches!(g.validate(), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn union_mean_is_weighted_mean(
            a in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 4), 1..6),
            b in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 4), 1..6),
            na in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 4), 1..6),
            nb in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 4), 1..6),
        ) {
            // Paired prompt sets: positives and negatives have equal counts.
            let k = a.len().min(na.len());
            let m = b.len().min(nb.len());
            let (a, na, b, nb) = (&a[..k], &na[..k], &b[..m], &nb[..m]);
            let fa = FunctionVector::from_activations("t", t1(), 0, a, na, 0).unwrap();
            let fb = FunctionVector::from_activations("t", t1(), 0, b, nb, 0).unwrap();
            let pos: Vec<_> = a.iter().chain(b).cloned().collect();
            let neg: Vec<_> = na.iter().chain(nb).cloned().collect();
            let fu = FunctionVector::from_activations("t", t1(), 0, &pos, &neg, 0).unwrap();
            for i in 0..4 {
                let w = (k as f64 * fa.vector[i] as f64 + m as f64 * fb.vector[i] as f64) / (k + m) as f64;
                prop_assert!((fu.vector[i] as f64 - w).abs() < 1e-5);
            }
        }

        #[test]
        fn gate_monotone_under_strong_additions(
            accs in prop::collection::vec(0.0f64..1.0, 1..8),
            bump in 0.0f64..1.0,
        ) {
            let g = iid_gate(&accs, 0.10).unwrap();
            let extra = (g.mean_iid + bump * (1.0 - g.mean_iid)).min(1.0);
            prop_assume!(extra > g.mean_iid);
            let mut more = accs.clone();
            more.push(extra);
            let g2 = iid_gate(&more, 0.10).unwrap();
            prop_assert!(!g.gated || g2.gated);
        }

        #[test]
        fn l2_norm_cached(v in prop::collection::vec(-100.0f32..100.0, 1..32)) {
            let fv = FunctionVector::new("t", t1(), 0, v.clone(), 1, 1, 0);
            let direct = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((fv.l2_norm as f64 - direct).abs() <= 1e-6 * direct.max(1e-30));
        }
    }
}
