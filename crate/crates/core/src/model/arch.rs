use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layernorm,
    Rmsnorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosKind {
    Learned,
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    GeluMlp,
    Swiglu,
}

fn default_norm_eps() -> f32 {
    1e-5
}

fn default_rope_base() -> f32 {
    10_000.0
}

/// Shape and flavour of a decoder-only transformer.
///
/// Only two variants are runnable: GPT-2 style
/// (`layernorm`, `learned`, `gelu_mlp`) and Llama style
/// (`rmsnorm`, `rotary`, `swiglu`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub pos_kind: PosKind,
    pub mlp_kind: MlpKind,
    pub max_context: usize,
    /// Hidden width of the MLP; defaults to `4 * d_model`.
    #[serde(default)]
    pub d_mlp: Option<usize>,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    /// Rotary base frequency, only read for `pos_kind = rotary`.
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
}

impl ArchDescriptor {
    pub fn gpt2_style(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        max_context: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            vocab_size,
            norm_kind: NormKind::Layernorm,
            pos_kind: PosKind::Learned,
            mlp_kind: MlpKind::GeluMlp,
            max_context,
            d_mlp: None,
            norm_eps: 1e-5,
            rope_base: default_rope_base(),
        }
    }

    pub fn llama_style(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        max_context: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            vocab_size,
            norm_kind: NormKind::Rmsnorm,
            pos_kind: PosKind::Rotary,
            mlp_kind: MlpKind::Swiglu,
            max_context,
            d_mlp: None,
            norm_eps: 1e-6,
            rope_base: default_rope_base(),
        }
    }

    pub fn d_mlp(&self) -> usize {
        self.d_mlp.unwrap_or(4 * self.d_model)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Structural invariants; says nothing about whether the variant runs.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("max_context", self.max_context),
            ("d_mlp", self.d_mlp()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Integrity(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Integrity(format!(
                "vocab_size {} < 2",
                self.vocab_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Integrity(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pos_kind == PosKind::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(Error::Integrity(format!(
                "rotary embeddings need an even head dimension, got {}",
                self.head_dim()
            )));
        }
        // Also rejects NaN.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.norm_eps > 0.0) {
            return Err(Error::Integrity("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Rejects every combination other than the two supported variants.
    pub fn check_supported(&self) -> Result<()> {
        use MlpKind::*;
        use NormKind::*;
        use PosKind::*;
        match (self.norm_kind, self.pos_kind, self.mlp_kind) {
            (Layernorm, Learned, GeluMlp) | (Rmsnorm, Rotary, Swiglu) => Ok(()),
            (n, p, m) => Err(Error::Capability(format!(
                "unsupported architecture variant ({n:?}, {p:?}, {m:?})"
            ))),
        }
    }

    /// Tensor names and shapes a checkpoint for this architecture must carry,
    /// in canonical order. Matrices are stored `[in, out]` so that `y = x W`.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.d_mlp();
        let biased = self.norm_kind == NormKind::Layernorm;
        let mut out = vec![("embed.weight".to_string(), vec![self.vocab_size, d])];
        if self.pos_kind == PosKind::Learned {
            out.push(("pos_embed.weight".into(), vec![self.max_context, d]));
        }
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.weight"), vec![d]));
            if biased {
                out.push((format!("{prefix}.bias"), vec![d]));
            }
        };
        for i in 0..self.n_layers {
            let b = format!("blocks.{i}");
            norm(&mut out, &format!("{b}.ln1"));
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{b}.attn.{proj}.weight"), vec![d, d]));
                if biased {
                    out.push((format!("{b}.attn.{proj}.bias"), vec![d]));
                }
            }
            norm(&mut out, &format!("{b}.ln2"));
            match self.mlp_kind {
                MlpKind::GeluMlp => {
                    out.push((format!("{b}.mlp.fc_in.weight"), vec![d, f]));
                    out.push((format!("{b}.mlp.fc_in.bias"), vec![f]));
                    out.push((format!("{b}.mlp.fc_out.weight"), vec![f, d]));
                    out.push((format!("{b}.mlp.fc_out.bias"), vec![d]));
                }
                MlpKind::Swiglu => {
                    out.push((format!("{b}.mlp.gate.weight"), vec![d, f]));
                    out.push((format!("{b}.mlp.up.weight"), vec![d, f]));
                    out.push((format!("{b}.mlp.down.weight"), vec![f, d]));
                }
            }
        }
        norm(&mut out, "final_norm");
        out.push(("unembed.weight".into(), vec![d, self.vocab_size]));
        out.push(("unembed.bias".into(), vec![self.vocab_size]));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama_8b_shape_is_valid() {
        let arch = ArchDescriptor::llama_style(32, 4096, 32, 128_256, 8192);
        arch.validate().unwrap();
        arch.check_supported().unwrap();
        assert_eq!(arch.head_dim(), 128);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let arch = ArchDescriptor::gpt2_style(2, 10, 3, 16, 32);
        assert!(matches!(arch.validate(), Err(Error::Integrity(_))));
    }

    #[test]
    fn mixed_variant_is_a_capability_error() {
        let mut arch = ArchDescriptor::gpt2_style(2, 8, 2, 16, 32);
        arch.pos_kind = PosKind::Rotary;
        assert!(matches!(arch.check_supported(), Err(Error::Capability(_))));
    }

    #[test]
    fn tiny_vocab_rejected() {
        let arch = ArchDescriptor::gpt2_style(1, 8, 2, 1, 32);
        assert!(arch.validate().is_err());
    }
}
