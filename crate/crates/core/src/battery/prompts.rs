//! In-context prompt assembly.
//!
//! A demo renders as `template(input) + " " + output + "\n"`; the query is the
//! rendered template with the answer slot left empty.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ExamplePair, TaskSpec, TemplateSpec, PLACEHOLDER};
use crate::error::{Error, Result};
use crate::seed::SeedMix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub demos: Vec<(String, String)>,
    pub query_input: String,
    pub rendered: String,
}

pub fn render_template(pattern: &str, x: &str) -> String {
    pattern.replacen(PLACEHOLDER, x, 1)
}

pub fn render_zero_shot(template: &TemplateSpec, input: &str) -> String {
    render_template(&template.pattern, input)
}

fn render_bundle(template: &TemplateSpec, demos: Vec<(String, String)>, query: &str) -> PromptBundle {
    let mut rendered = String::new();
    for (input, output) in &demos {
        rendered.push_str(&render_template(&template.pattern, input));
        rendered.push(' ');
        rendered.push_str(output);
        rendered.push('\n');
    }
    rendered.push_str(&render_template(&template.pattern, query));
    PromptBundle {
        demos,
        query_input: query.to_string(),
        rendered,
    }
}

/// Demo/query partition of a task's examples: demos come from the first
/// `ceil(n/2)` examples, evaluation queries from the rest.
#[derive(Debug, Clone, Copy)]
pub struct TaskSplit<'a> {
    pub demo_pool: &'a [ExamplePair],
    pub query_pool: &'a [ExamplePair],
}

impl<'a> TaskSplit<'a> {
    pub fn of(task: &'a TaskSpec) -> Self {
        let cut = task.examples.len().div_ceil(2);
        Self {
            demo_pool: &task.examples[..cut],
            query_pool: &task.examples[cut..],
        }
    }

    /// First `limit` held-out queries.
    pub fn eval_queries(&self, limit: usize) -> &'a [ExamplePair] {
        &self.query_pool[..self.query_pool.len().min(limit)]
    }
}

fn sample_demos<'a>(
    pool: &'a [ExamplePair],
    query: &ExamplePair,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a ExamplePair>> {
    let mut candidates: Vec<&ExamplePair> = pool.iter().filter(|e| e.input != query.input).collect();
    if candidates.len() < k {
        return Err(Error::InsufficientData(format!(
            "need {k} demos besides the query, demo pool has {}",
            candidates.len()
        )));
    }
    candidates.shuffle(rng);
    candidates.truncate(k);
    Ok(candidates)
}

/// Permutation `p` of `0..outputs.len()` with `outputs[p[i]] != outputs[i]`
/// for every `i`, compared as strings.
pub(crate) fn string_derangement(outputs: &[&str], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = outputs.len();
    if n < 2 {
        return Err(Error::Parameter(format!("derangement impossible for {n} demos")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    for i in 0..n {
        if outputs[perm[i]] != outputs[i] {
            continue;
        }
        let offset = rng.gen_range(0..n);
        let j = (0..n).map(|s| (s + offset) % n).find(|&j| {
            j != i && outputs[perm[j]] != outputs[i] && outputs[perm[i]] != outputs[j]
        });
        match j {
            Some(j) => perm.swap(i, j),
            None => {
                return Err(Error::Parameter(
                    "derangement impossible: one output dominates the demo set".into(),
                ))
            }
        }
    }
    Ok(perm)
}

/// Positive (true outputs) and negative (deranged outputs) prompts sharing
/// the same demo inputs and query.
pub fn build_contrast_prompts(
    task: &TaskSpec,
    template: &TemplateSpec,
    query: &ExamplePair,
    n_demos: usize,
    seed: u64,
) -> Result<(PromptBundle, PromptBundle)> {
    if n_demos < 2 {
        return Err(Error::Parameter(format!(
            "n_demos = {n_demos}: a derangement needs at least 2 demos"
        )));
    }
    let mut rng = SeedMix::new(seed)
        .with_str(&task.name)
        .with_str(&template.id.to_string())
        .with_str(&query.input)
        .rng();
    let demos = sample_demos(TaskSplit::of(task).demo_pool, query, n_demos, &mut rng)?;
    let outputs: Vec<&str> = demos.iter().map(|e| e.output.as_str()).collect();
    let perm = string_derangement(&outputs, &mut rng)?;
    let positive = render_bundle(
        template,
        demos.iter().map(|e| (e.input.clone(), e.output.clone())).collect(),
        &query.input,
    );
    let negative = render_bundle(
        template,
        demos
            .iter()
            .enumerate()
            .map(|(i, e)| (e.input.clone(), outputs[perm[i]].to_string()))
            .collect(),
        &query.input,
    );
    Ok((positive, negative))
}

/// `k` correct demos before the query; `k = 0` is the zero-shot prompt.
pub fn build_few_shot_prompt(
    task: &TaskSpec,
    template: &TemplateSpec,
    query: &ExamplePair,
    k: usize,
    seed: u64,
) -> Result<PromptBundle> {
    if k == 0 {
        return Ok(render_bundle(template, Vec::new(), &query.input));
    }
    let mut rng = SeedMix::new(seed)
        .with_str("few_shot")
        .with_str(&task.name)
        .with_str(&template.id.to_string())
        .with_str(&query.input)
        .rng();
    let demos = sample_demos(TaskSplit::of(task).demo_pool, query, k, &mut rng)?;
    Ok(render_bundle(
        template,
        demos.iter().map(|e| (e.input.clone(), e.output.clone())).collect(),
        &query.input,
    ))
}
