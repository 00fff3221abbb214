#![allow(dead_code)]

use fvlab::battery::{Category, EvalMode, ExamplePair, TaskSpec, TemplateId, TemplateSpec, TemplateStyle};
use fvlab::fixture::{fixture_tokenizer, identity_checkpoint};
use fvlab::model::{BpeTable, Checkpoint, ModelHandle, TokenId};

pub fn byte_tokenizer() -> BpeTable {
    fixture_tokenizer(0).unwrap()
}

pub fn token(tok: &BpeTable, s: &str) -> TokenId {
    let ids = tok.encode(s.as_bytes());
    assert_eq!(ids.len(), 1, "{s:?} is not a single token");
    ids[0]
}

/// Identity blocks with a one-hot unembedding: residual dimension `i`
/// votes for `voters[i]`. Embeddings start at zero.
pub fn one_hot_checkpoint(n_layers: usize, d_model: usize, tok: &BpeTable, voters: &[TokenId]) -> Checkpoint {
    let mut ckpt = identity_checkpoint(n_layers, d_model, tok);
    let vocab = ckpt.arch.vocab_size;
    let w = ckpt.get_mut("unembed.weight").unwrap();
    for (i, &id) in voters.iter().enumerate() {
        w.data[i * vocab + id as usize] = 1.0;
    }
    ckpt
}

pub fn one_hot_model(n_layers: usize, d_model: usize, voters: &[&str]) -> ModelHandle {
    let tok = byte_tokenizer();
    let ids: Vec<TokenId> = voters.iter().map(|v| token(&tok, v)).collect();
    let ckpt = one_hot_checkpoint(n_layers, d_model, &tok, &ids);
    ModelHandle::new(ckpt, tok).unwrap()
}

pub fn unit(d: usize, i: usize, scale: f32) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[i] = scale;
    v
}

/// Eight unique templates `q<n> {X} =` over the given examples.
pub fn toy_task(name: &str, examples: Vec<ExamplePair>, max_new_tokens: usize, eval_mode: EvalMode) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        category: Category::Lexical,
        eval_mode,
        max_new_tokens,
        expected_iid_range: (0.0, 1.0),
        templates: TemplateId::all()
            .map(|id| TemplateSpec {
                id,
                style: TemplateStyle::for_id(id),
                pattern: format!("{name}{} {{X}} =", id.number()),
            })
            .collect(),
        examples,
    }
}

pub fn t(n: u8) -> TemplateId {
    TemplateId::new(n).unwrap()
}
