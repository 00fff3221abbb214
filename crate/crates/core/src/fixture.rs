//! Synthetic models for tests, demos and the smoke pipeline.
//!
//! The tokenizer is trained on the bundled battery text, so prompts encode
//! to realistic lengths. Weights are seeded uniform noise.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::battery::{bundled_file, render_template, write_bundled_battery, ExamplePair, TemplateSpec, BUNDLED_TASKS};
use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, BpeTable, Checkpoint, ModelHandle};
use crate::pipeline::RunManifest;
use crate::seed::SeedMix;

pub const END_OF_TEXT: &str = "<|endoftext|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gpt2,
    Llama,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub variant: Variant,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub n_merges: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Gpt2,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            max_context: 1024,
            n_merges: 400,
            seed: 0,
        }
    }
}

/// Rendered demo lines for every bundled task and template.
pub fn battery_corpus() -> Vec<u8> {
    let mut out = String::new();
    let registry: serde_json::Value =
        serde_json::from_str(bundled_file("templates.json").unwrap_or("{}")).unwrap_or_default();
    for task in BUNDLED_TASKS {
        let templates: Vec<TemplateSpec> = registry
            .get(task)
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default();
        let body = bundled_file(&format!("{task}.jsonl")).unwrap_or("");
        let examples: Vec<ExamplePair> = body
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect();
        for t in &templates {
            for e in &examples {
                out.push_str(&render_template(&t.pattern, &e.input));
                out.push(' ');
                out.push_str(&e.output);
                out.push('\n');
            }
        }
    }
    out.into_bytes()
}

pub fn fixture_tokenizer(n_merges: usize) -> Result<BpeTable> {
    BpeTable::train(&battery_corpus(), n_merges, &[END_OF_TEXT])
}

fn arch_for(spec: &FixtureSpec, vocab: usize) -> ArchDescriptor {
    match spec.variant {
        Variant::Gpt2 => ArchDescriptor::gpt2_style(spec.n_layers, spec.d_model, spec.n_heads, vocab, spec.max_context),
        Variant::Llama => ArchDescriptor::llama_style(spec.n_layers, spec.d_model, spec.n_heads, vocab, spec.max_context),
    }
}

/// Random-weight checkpoint sized to `tokenizer`.
pub fn random_checkpoint(spec: &FixtureSpec, tokenizer: &BpeTable) -> Checkpoint {
    let arch = arch_for(spec, tokenizer.id_bound());
    let mut ckpt = Checkpoint::zeros(arch);
    for t in &mut ckpt.tensors {
        let mut rng = SeedMix::new(spec.seed).with_str(&t.name).rng();
        let fan_in = if t.dims.len() == 2 { t.dims[0] } else { 1 };
        let scale = if t.name.starts_with("embed") || t.name.starts_with("pos_embed") {
            1.0
        } else if t.name.ends_with(".bias") {
            0.1
        } else if t.name.contains("ln") || t.name.starts_with("final_norm") {
            // Gains stay near 1.
            t.data.iter_mut().for_each(|x| *x = 1.0 + rng.gen_range(-0.1..0.1));
            continue;
        } else {
            (3.0 / fan_in as f32).sqrt()
        };
        t.data.iter_mut().for_each(|x| *x = rng.gen_range(-scale..scale));
    }
    ckpt
}

pub fn random_model(spec: &FixtureSpec) -> Result<ModelHandle> {
    let tok = fixture_tokenizer(spec.n_merges)?;
    let ckpt = random_checkpoint(spec, &tok);
    ModelHandle::new(ckpt, tok)
}

/// Writes `model.xfvc` and `tokenizer.json` into `dir`; returns the model path.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tok = fixture_tokenizer(spec.n_merges)?;
    let ckpt = random_checkpoint(spec, &tok);
    let model_path = dir.join("model.xfvc");
    ckpt.write(&model_path)?;
    tok.save(&dir.join("tokenizer.json"))?;
    Ok(model_path)
}

/// Tasks of the two-task micro-battery.
pub const MICRO_TASKS: [&str; 2] = ["antonym", "sentiment_flip"];

/// Fixture model, micro-battery and a small-budget manifest under `dir`.
/// The manifest is written to `dir/manifest.json` with outputs in `dir/run`.
pub fn write_micro_run(dir: &Path, spec: &FixtureSpec) -> Result<RunManifest> {
    let model = write_fixture(&dir.join("model"), spec)?;
    let battery = dir.join("battery");
    write_bundled_battery(&battery, Some(&MICRO_TASKS))?;
    let mut m = RunManifest::new(model, battery, dir.join("run"));
    m.run_id = "fixture".into();
    m.seed = spec.seed;
    m.n_prompts = 4;
    m.n_demos = 3;
    m.n_queries = 4;
    m.few_shot_k = 2;
    m.n_shuffles = 99;
    m.threads = 1;
    m.save(&dir.join("manifest.json"))?;
    Ok(m)
}

/// Checkpoint whose blocks are exact identities: attention and MLP weights
/// are zero, so the residual stream is the (position-free) embedding at
/// every layer. Tests set `embed.weight` and `unembed.*` directly.
pub fn identity_checkpoint(n_layers: usize, d_model: usize, tokenizer: &BpeTable) -> Checkpoint {
    let arch = ArchDescriptor::llama_style(n_layers, d_model, 1, tokenizer.id_bound(), 1024);
    Checkpoint::zeros(arch)
}
