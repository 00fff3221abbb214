//! Logit lens, FV vocabulary projection, sentiment-polarity readability and
//! the steerability/readability quadrants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::{render_zero_shot, ExamplePair, SentimentLexicon, TaskSpec, TemplateId};
use crate::error::{Error, Result};
use crate::fv::FunctionVector;
use crate::model::{ops, InterventionPlan, ModelHandle, TokenId};
use crate::table::{fmt_f64, write_csv};

pub const PROJECTION_TOP: usize = 50;

/// First token of `" " + answer`, for the gold output and each alternative.
pub fn answer_first_tokens(model: &ModelHandle, ex: &ExamplePair) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = ex
        .answers()
        .filter_map(|a| model.encode(format!(" {a}").as_bytes()).first().copied())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensCondition {
    ZeroShot,
    PostSteering { fv: String, alpha: f32 },
}

impl fmt::Display for LensCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LensCondition::ZeroShot => f.write_str("zero_shot"),
            LensCondition::PostSteering { fv, alpha } => write!(f, "post_steering:{fv}:{alpha}"),
        }
    }
}

/// Top-k readout for first-token tasks; polarity agreement for rewriting
/// tasks, where all three columns carry the same fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensMetric {
    TopK,
    Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensProfile {
    pub task: String,
    pub template: TemplateId,
    pub condition: LensCondition,
    pub metric: LensMetric,
    pub per_layer: BTreeMap<usize, TopK>,
}

impl LensProfile {
    /// Maximum top-10 over all tapped layers.
    pub fn best_top10(&self) -> f64 {
        self.per_layer.values().map(|t| t.top10).fold(0.0, f64::max)
    }
}

fn final_states(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    queries: &[ExamplePair],
    layers: &BTreeSet<usize>,
    plan: Option<&InterventionPlan>,
) -> Result<Vec<BTreeMap<usize, Vec<f32>>>> {
    let tpl = task.template(template);
    queries
        .par_iter()
        .map(|q| {
            let tokens = model.encode(render_zero_shot(tpl, &q.input).as_bytes());
            let rec = model.forward_with_taps(&tokens, layers, plan)?;
            let last = tokens.len() - 1;
            Ok(layers
                .iter()
                .map(|&l| (l, rec.tap(l, last).map(<[f32]>::to_vec).unwrap_or_default()))
                .collect())
        })
        .collect()
}

/// Top-k counts of one logit vector against the gold first tokens.
pub fn topk_hits(logits: &[f32], gold: &[TokenId]) -> [bool; 3] {
    let best = gold
        .iter()
        .map(|&g| ops::rank_of(logits, g as usize))
        .min()
        .unwrap_or(usize::MAX);
    [best < 1, best < 5, best < 10]
}

/// Final-position lens readout of zero-shot prompts at every layer in
/// `layers`, optionally under a steering plan.
pub fn logit_lens(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    queries: &[ExamplePair],
    layers: &BTreeSet<usize>,
    plan: Option<&InterventionPlan>,
    condition: LensCondition,
) -> Result<LensProfile> {
    let states = final_states(model, task, template, queries, layers, plan)?;
    let golds: Vec<Vec<TokenId>> = queries.iter().map(|q| answer_first_tokens(model, q)).collect();
    let n = queries.len().max(1) as f64;
    let mut per_layer = BTreeMap::new();
    for &l in layers {
        let mut hits = [0usize; 3];
        for (s, gold) in states.iter().zip(&golds) {
            let h = topk_hits(&model.lens_logits(&s[&l]), gold);
            for (c, hit) in hits.iter_mut().zip(h) {
                *c += hit as usize;
            }
        }
        per_layer.insert(
            l,
            TopK {
                top1: hits[0] as f64 / n,
                top5: hits[1] as f64 / n,
                top10: hits[2] as f64 / n,
            },
        );
    }
    Ok(LensProfile {
        task: task.name.clone(),
        template,
        condition,
        metric: LensMetric::TopK,
        per_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    fn flip(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

fn word_polarity(text: &str, lex: &SentimentLexicon) -> Option<Polarity> {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let count = |list: &[String]| words.iter().filter(|w| list.iter().any(|l| l.eq_ignore_ascii_case(w))).count();
    let (p, n) = (count(&lex.positive), count(&lex.negative));
    match p.cmp(&n) {
        std::cmp::Ordering::Greater => Some(Polarity::Positive),
        std::cmp::Ordering::Less => Some(Polarity::Negative),
        std::cmp::Ordering::Equal => None,
    }
}

/// Polarity a correct rewrite should carry: the output's lexicon polarity,
/// else the flipped input polarity, else negative.
pub fn expected_polarity(ex: &ExamplePair, lex: &SentimentLexicon) -> Polarity {
    word_polarity(&ex.output, lex)
        .or_else(|| word_polarity(&ex.input, lex).map(Polarity::flip))
        .unwrap_or(Polarity::Negative)
}

/// Unit vector from the mean positive to the mean negative word embedding.
pub fn sentiment_direction(model: &ModelHandle, lex: &SentimentLexicon) -> Result<Vec<f32>> {
    if lex.positive.is_empty() || lex.negative.is_empty() {
        return Err(Error::Parameter("sentiment lexicon needs both positive and negative words".into()));
    }
    let d = model.arch.d_model;
    let mean_embed = |words: &[String]| -> Vec<f64> {
        let mut acc = vec![0.0f64; d];
        for w in words {
            if let Some(&id) = model.encode(format!(" {w}").as_bytes()).first() {
                for (a, &x) in acc.iter_mut().zip(model.embedding_row(id)) {
                    *a += x as f64;
                }
            }
        }
        acc.iter().map(|a| a / words.len() as f64).collect()
    };
    let (pos, neg) = (mean_embed(&lex.positive), mean_embed(&lex.negative));
    let diff: Vec<f64> = neg.iter().zip(&pos).map(|(n, p)| n - p).collect();
    let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate("positive and negative mean embeddings coincide".into()));
    }
    Ok(diff.iter().map(|x| (x / norm) as f32).collect())
}

/// Positive cosine with the direction reads as negative polarity. A cosine
/// of exactly zero is never correct.
pub fn polarity_correct(normed: &[f32], direction: &[f32], expected: Polarity) -> bool {
    let c = crate::fv::cosine(normed, direction);
    match expected {
        Polarity::Negative => c > 0.0,
        Polarity::Positive => c < 0.0,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sentiment_polarity_readability(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    queries: &[ExamplePair],
    lex: &SentimentLexicon,
    layers: &BTreeSet<usize>,
    plan: Option<&InterventionPlan>,
    condition: LensCondition,
) -> Result<LensProfile> {
    let dir = sentiment_direction(model, lex)?;
    let states = final_states(model, task, template, queries, layers, plan)?;
    let expected: Vec<Polarity> = queries.iter().map(|q| expected_polarity(q, lex)).collect();
    let n = queries.len().max(1) as f64;
    let mut per_layer = BTreeMap::new();
    for &l in layers {
        let correct = states
            .iter()
            .zip(&expected)
            .filter(|(s, &e)| polarity_correct(&model.final_norm(&s[&l]), &dir, e))
            .count();
        let acc = correct as f64 / n;
        per_layer.insert(
            l,
            TopK {
                top1: acc,
                top5: acc,
                top10: acc,
            },
        );
    }
    Ok(LensProfile {
        task: task.name.clone(),
        template,
        condition,
        metric: LensMetric::Polarity,
        per_layer,
    })
}

/// Readability profile appropriate to the task.
#[allow(clippy::too_many_arguments)]
pub fn readability_profile(
    model: &ModelHandle,
    task: &TaskSpec,
    template: TemplateId,
    queries: &[ExamplePair],
    lex: &SentimentLexicon,
    layers: &BTreeSet<usize>,
    plan: Option<&InterventionPlan>,
    condition: LensCondition,
) -> Result<LensProfile> {
    if task.uses_polarity_readability() {
        sentiment_polarity_readability(model, task, template, queries, lex, layers, plan, condition)
    } else {
        logit_lens(model, task, template, queries, layers, plan, condition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabProjection {
    pub fv: String,
    pub top_tokens: Vec<(String, f32)>,
    pub correct_fraction: f64,
}

fn token_text(model: &ModelHandle, id: TokenId) -> String {
    String::from_utf8_lossy(&model.tokenizer.token_bytes(id)).into_owned()
}

/// Projects the FV through the final norm and unembedding. A token counts
/// as correct when its trimmed, lowercased text equals some answer of the
/// task or the first token of one.
pub fn fv_vocab_projection(model: &ModelHandle, fv: &FunctionVector, task: &TaskSpec) -> Result<VocabProjection> {
    if fv.vector.len() != model.arch.d_model {
        return Err(Error::Parameter(format!(
            "FV length {} != d_model {}",
            fv.vector.len(),
            model.arch.d_model
        )));
    }
    let scores = model.lens_logits(&fv.vector);
    let top = ops::top_k(&scores, PROJECTION_TOP.min(scores.len()));
    let mut targets: BTreeSet<String> = BTreeSet::new();
    for ex in &task.examples {
        for a in ex.answers() {
            targets.insert(a.trim().to_lowercase());
        }
        for id in answer_first_tokens(model, ex) {
            targets.insert(token_text(model, id).trim().to_lowercase());
        }
    }
    targets.remove("");
    let top_tokens: Vec<(String, f32)> = top.iter().map(|&i| (token_text(model, i as TokenId), scores[i])).collect();
    let hits = top_tokens
        .iter()
        .filter(|(t, _)| targets.contains(&t.trim().to_lowercase()))
        .count();
    Ok(VocabProjection {
        fv: fv.id(),
        correct_fraction: if top_tokens.is_empty() { 0.0 } else { hits as f64 / top_tokens.len() as f64 },
        top_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    Both,
    ReadableOnly,
    SteerableOnly,
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantCell {
    pub task: String,
    pub run: String,
    pub readable: bool,
    pub steerable: bool,
    pub quadrant: Quadrant,
    pub best_iid: f64,
    pub best_top10: f64,
}

pub fn quadrant_classify(task: &str, run: &str, best_iid: f64, best_top10: f64, tau: f64, tau_r: f64) -> QuadrantCell {
    let readable = best_top10 > tau_r;
    let steerable = best_iid > tau;
    let quadrant = match (readable, steerable) {
        (true, true) => Quadrant::Both,
        (true, false) => Quadrant::ReadableOnly,
        (false, true) => Quadrant::SteerableOnly,
        (false, false) => Quadrant::Neither,
    };
    QuadrantCell {
        task: task.to_string(),
        run: run.to_string(),
        readable,
        steerable,
        quadrant,
        best_iid,
        best_top10,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensDelta {
    pub task: String,
    pub template: TemplateId,
    pub per_layer: BTreeMap<usize, f64>,
    pub max_delta: f64,
    pub max_layer: usize,
}

/// Post-steering minus zero-shot top-10, per layer.
pub fn post_steering_delta(zero_shot: &LensProfile, steered: &LensProfile) -> Result<LensDelta> {
    if zero_shot.per_layer.keys().ne(steered.per_layer.keys()) {
        return Err(Error::Parameter("lens profiles cover different layers".into()));
    }
    let per_layer: BTreeMap<usize, f64> = steered
        .per_layer
        .iter()
        .map(|(l, s)| (*l, s.top10 - zero_shot.per_layer[l].top10))
        .collect();
    let (max_layer, max_delta) = per_layer
        .iter()
        .fold((0, f64::NEG_INFINITY), |(bl, bd), (&l, &d)| if d > bd { (l, d) } else { (bl, bd) });
    Ok(LensDelta {
        task: steered.task.clone(),
        template: steered.template,
        per_layer,
        max_delta: if max_delta.is_finite() { max_delta } else { 0.0 },
        max_layer,
    })
}

/// Steered lens profile and its delta against `zero_shot`.
#[allow(clippy::too_many_arguments)]
pub fn post_steering(
    model: &ModelHandle,
    fv: &FunctionVector,
    task: &TaskSpec,
    template: TemplateId,
    queries: &[ExamplePair],
    lex: &SentimentLexicon,
    layers: &BTreeSet<usize>,
    plan: &InterventionPlan,
    zero_shot: &LensProfile,
) -> Result<(LensProfile, LensDelta)> {
    let cond = LensCondition::PostSteering {
        fv: fv.id(),
        alpha: plan.alpha,
    };
    let steered = readability_profile(model, task, template, queries, lex, layers, Some(plan), cond)?;
    let delta = post_steering_delta(zero_shot, &steered)?;
    Ok((steered, delta))
}

pub const LENS_HEADER: [&str; 7] = ["task", "template", "condition", "layer", "top1", "top5", "top10"];

pub fn lens_rows(profiles: &[LensProfile]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for p in profiles {
        for (l, t) in &p.per_layer {
            rows.push(vec![
                p.task.clone(),
                p.template.to_string(),
                p.condition.to_string(),
                l.to_string(),
                fmt_f64(t.top1),
                fmt_f64(t.top5),
                fmt_f64(t.top10),
            ]);
        }
    }
    rows
}

pub fn write_lens_csv(path: &Path, profiles: &[LensProfile]) -> Result<()> {
    write_csv(path, &LENS_HEADER, &lens_rows(profiles))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrants() {
        assert_eq!(quadrant_classify("cc", "r", 0.880, 0.056, 0.10, 0.10).quadrant, Quadrant::SteerableOnly);
        assert_eq!(quadrant_classify("t", "r", 0.05, 0.05, 0.10, 0.10).quadrant, Quadrant::Neither);
        assert_eq!(quadrant_classify("t", "r", 0.50, 0.50, 0.10, 0.10).quadrant, Quadrant::Both);
        assert_eq!(quadrant_classify("t", "r", 0.10, 0.10, 0.10, 0.10).quadrant, Quadrant::Neither);
        assert_eq!(quadrant_classify("t", "r", 0.0, 0.2, 0.10, 0.10).quadrant, Quadrant::ReadableOnly);
    }

    #[test]
    fn zero_cosine_is_incorrect() {
        assert!(!polarity_correct(&[0.0, 1.0], &[1.0, 0.0], Polarity::Negative));
        assert!(!polarity_correct(&[0.0, 1.0], &[1.0, 0.0], Polarity::Positive));
    }

    #[test]
    fn hand_placed_states_on_either_side() {
        let dir = [1.0f32, 0.0];
        let cases = [
            ([0.5f32, 0.2], Polarity::Negative, true),
            ([-0.3, 0.9], Polarity::Positive, true),
            ([0.7, -0.1], Polarity::Positive, false),
            ([-2.0, 0.0], Polarity::Negative, false),
        ];
        let correct = cases.iter().filter(|(h, e, _)| polarity_correct(h, &dir, *e)).count();
        assert_eq!(correct, 2);
        for (h, e, want) in cases {
            assert_eq!(polarity_correct(&h, &dir, e), want);
        }
    }

    #[test]
    fn expected_polarity_rules() {
        let lex = SentimentLexicon {
            positive: vec!["good".into()],
            negative: vec!["bad".into()],
        };
        assert_eq!(expected_polarity(&ExamplePair::new("a good day", "a bad day"), &lex), Polarity::Negative);
        assert_eq!(expected_polarity(&ExamplePair::new("a bad day", "a fine day"), &lex), Polarity::Positive);
        assert_eq!(expected_polarity(&ExamplePair::new("x", "y"), &lex), Polarity::Negative);
    }

    #[test]
    fn topk_nesting() {
        let logits: Vec<f32> = (0..20).map(|i| (i as f32 * 0.7).sin()).collect();
        for g in 0..20u32 {
            let [a, b, c] = topk_hits(&logits, &[g]);
            assert!(a as u8 <= b as u8 && b as u8 <= c as u8);
        }
    }

    #[test]
    fn delta_of_identical_profiles_is_zero() {
        let p = LensProfile {
            task: "t".into(),
            template: TemplateId::new(1).unwrap(),
            condition: LensCondition::ZeroShot,
            metric: LensMetric::TopK,
            per_layer: [(0, TopK { top1: 0.1, top5: 0.2, top10: 0.3 })].into_iter().collect(),
        };
        let d = post_steering_delta(&p, &p).unwrap();
        assert_eq!(d.max_delta, 0.0);
    }
}
