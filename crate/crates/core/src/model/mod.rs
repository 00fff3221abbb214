//! Decoder-only transformer inference with residual-stream taps, additive
//! interventions and activation patching.

pub mod arch;
pub mod checkpoint;
pub mod ops;
pub mod tokenizer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use arch::{ArchDescriptor, MlpKind, NormKind, PosKind};
pub use checkpoint::{Checkpoint, CheckpointManifest, NamedTensor, TensorEntry, CHECKPOINT_MAGIC};
pub use tokenizer::{BpeTable, TokenId};

use crate::error::{Error, Result};

/// Where an additive intervention or a patch lands within the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    #[default]
    AllPositions,
    FinalPositionOnly,
}

/// `h_l <- h_l + alpha * vector` at the output of block `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionPlan {
    pub layer: usize,
    pub vector: Vec<f32>,
    pub alpha: f32,
    pub positions: PositionMode,
}

impl InterventionPlan {
    pub fn new(layer: usize, vector: Vec<f32>, alpha: f32) -> Self {
        Self {
            layer,
            vector,
            alpha,
            positions: PositionMode::AllPositions,
        }
    }

    pub fn validate(&self, arch: &ArchDescriptor) -> Result<()> {
        if self.layer >= arch.n_layers {
            return Err(Error::Range {
                what: "intervention layer",
                index: self.layer,
                limit: arch.n_layers,
            });
        }
        if self.vector.len() != arch.d_model {
            return Err(Error::Parameter(format!(
                "intervention vector has length {}, d_model is {}",
                self.vector.len(),
                arch.d_model
            )));
        }
        Ok(())
    }
}

/// Overwrite the post-block residual at `layer` with recorded states.
/// `states[p]` replaces position `p`; positions beyond `states` are untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub layer: usize,
    pub states: Vec<Vec<f32>>,
    pub positions: PositionMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TapPositions {
    #[default]
    Final,
    All,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, Default)]
pub struct ForwardRequest<'a> {
    pub tokens: &'a [TokenId],
    pub tap_layers: BTreeSet<usize>,
    pub tap_positions: TapPositions,
    pub plan: Option<&'a InterventionPlan>,
    pub patch: Option<&'a PatchSpec>,
}

/// Post-block residual taps plus the next-token logits at the final position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub taps: BTreeMap<(usize, usize), Vec<f32>>,
    pub final_logits: Vec<f32>,
}

impl ActivationRecord {
    pub fn tap(&self, layer: usize, position: usize) -> Option<&[f32]> {
        self.taps.get(&(layer, position)).map(Vec::as_slice)
    }

    /// All positions tapped at `layer`, ordered by position.
    pub fn layer_states(&self, layer: usize) -> Vec<Vec<f32>> {
        self.taps
            .range((layer, 0)..(layer, usize::MAX))
            .map(|(_, v)| v.clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Vec<f32>,
    b: Option<Vec<f32>>,
    n_in: usize,
    n_out: usize,
}

impl Linear {
    fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
        ops::matmul(x, rows, &self.w, self.n_in, self.n_out, self.b.as_deref())
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: Vec<f32>,
    bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
enum Mlp {
    Gelu { fc_in: Linear, fc_out: Linear },
    SwiGlu { gate: Linear, up: Linear, down: Linear },
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Weights {
    embed: Vec<f32>,
    pos_embed: Option<Vec<f32>>,
    blocks: Vec<Block>,
    final_norm: Norm,
    unembed: Linear,
}

impl Weights {
    fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_shapes()?;
        let arch = ckpt.arch.clone();
        let mut map: HashMap<String, NamedTensor> =
            ckpt.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut take = |name: &str| -> Result<Vec<f32>> {
            map.remove(name)
                .map(|t| t.data)
                .ok_or_else(|| Error::Integrity(format!("missing tensor {name}")))
        };
        let biased = arch.norm_kind == NormKind::Layernorm;
        let d = arch.d_model;
        let f = arch.d_mlp();
        let norm = |take: &mut dyn FnMut(&str) -> Result<Vec<f32>>, p: &str| -> Result<Norm> {
            Ok(Norm {
                gain: take(&format!("{p}.weight"))?,
                bias: if biased { Some(take(&format!("{p}.bias"))?) } else { None },
            })
        };
        let linear = |take: &mut dyn FnMut(&str) -> Result<Vec<f32>>,
                      p: &str,
                      n_in: usize,
                      n_out: usize,
                      has_bias: bool|
         -> Result<Linear> {
            Ok(Linear {
                w: take(&format!("{p}.weight"))?,
                b: if has_bias { Some(take(&format!("{p}.bias"))?) } else { None },
                n_in,
                n_out,
            })
        };
        let embed = take("embed.weight")?;
        let pos_embed = match arch.pos_kind {
            PosKind::Learned => Some(take("pos_embed.weight")?),
            PosKind::Rotary => None,
        };
        let mut blocks = Vec::with_capacity(arch.n_layers);
        for i in 0..arch.n_layers {
            let b = format!("blocks.{i}");
            let ln1 = norm(&mut take, &format!("{b}.ln1"))?;
            let q = linear(&mut take, &format!("{b}.attn.q"), d, d, biased)?;
            let k = linear(&mut take, &format!("{b}.attn.k"), d, d, biased)?;
            let v = linear(&mut take, &format!("{b}.attn.v"), d, d, biased)?;
            let o = linear(&mut take, &format!("{b}.attn.o"), d, d, biased)?;
            let ln2 = norm(&mut take, &format!("{b}.ln2"))?;
            let mlp = match arch.mlp_kind {
                MlpKind::GeluMlp => Mlp::Gelu {
                    fc_in: linear(&mut take, &format!("{b}.mlp.fc_in"), d, f, true)?,
                    fc_out: linear(&mut take, &format!("{b}.mlp.fc_out"), f, d, true)?,
                },
                MlpKind::Swiglu => Mlp::SwiGlu {
                    gate: linear(&mut take, &format!("{b}.mlp.gate"), d, f, false)?,
                    up: linear(&mut take, &format!("{b}.mlp.up"), d, f, false)?,
                    down: linear(&mut take, &format!("{b}.mlp.down"), f, d, false)?,
                },
            };
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                mlp,
            });
        }
        let final_norm = norm(&mut take, "final_norm")?;
        let unembed = linear(&mut take, "unembed", d, arch.vocab_size, true)?;
        Ok(Self {
            embed,
            pos_embed,
            blocks,
            final_norm,
            unembed,
        })
    }
}

/// Loaded weights, tokenizer and architecture. Immutable and `Sync`; every
/// forward pass allocates its own scratch.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub arch: ArchDescriptor,
    weights: Weights,
    pub tokenizer: BpeTable,
}

/// Loads `path` and the `tokenizer.json` next to it.
pub fn load_checkpoint(path: &Path) -> Result<ModelHandle> {
    let ckpt = Checkpoint::read(path)?;
    let tok_path = path.with_file_name("tokenizer.json");
    let tokenizer = BpeTable::load(&tok_path)?;
    ModelHandle::new(ckpt, tokenizer)
}

impl ModelHandle {
    pub fn new(ckpt: Checkpoint, tokenizer: BpeTable) -> Result<Self> {
        ckpt.arch.validate()?;
        ckpt.arch.check_supported()?;
        if tokenizer.id_bound() > ckpt.arch.vocab_size {
            return Err(Error::Integrity(format!(
                "tokenizer uses ids up to {} but vocab_size is {}",
                tokenizer.id_bound() - 1,
                ckpt.arch.vocab_size
            )));
        }
        let arch = ckpt.arch.clone();
        Ok(Self {
            arch,
            weights: Weights::from_checkpoint(ckpt)?,
            tokenizer,
        })
    }

    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        self.tokenizer.encode(text)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        self.tokenizer.decode(ids)
    }

    pub fn embedding_row(&self, id: TokenId) -> &[f32] {
        let d = self.arch.d_model;
        &self.weights.embed[id as usize * d..(id as usize + 1) * d]
    }

    /// The model's own final normalization.
    pub fn final_norm(&self, h: &[f32]) -> Vec<f32> {
        self.apply_norm(&self.weights.final_norm, h)
    }

    /// `x · W_U + b_U`.
    pub fn unembed(&self, normed: &[f32]) -> Vec<f32> {
        self.weights.unembed.apply(normed, 1)
    }

    /// Final norm then unembedding; the head used for the real logits.
    pub fn lens_logits(&self, h: &[f32]) -> Vec<f32> {
        self.unembed(&self.final_norm(h))
    }

    fn apply_norm(&self, n: &Norm, x: &[f32]) -> Vec<f32> {
        match self.arch.norm_kind {
            NormKind::Layernorm => ops::layer_norm(x, &n.gain, n.bias.as_deref(), self.arch.norm_eps),
            NormKind::Rmsnorm => ops::rms_norm(x, &n.gain, self.arch.norm_eps),
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Parameter("empty token sequence".into()));
        }
        if tokens.len() > self.arch.max_context {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.arch.max_context,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
            return Err(Error::Range {
                what: "token id",
                index: bad as usize,
                limit: self.arch.vocab_size,
            });
        }
        Ok(())
    }

    /// Taps the final position at `tap_layers`, optionally steering.
    pub fn forward_with_taps(
        &self,
        tokens: &[TokenId],
        tap_layers: &BTreeSet<usize>,
        plan: Option<&InterventionPlan>,
    ) -> Result<ActivationRecord> {
        self.forward(&ForwardRequest {
            tokens,
            tap_layers: tap_layers.clone(),
            tap_positions: TapPositions::Final,
            plan,
            patch: None,
        })
    }

    /// One shared path for plain, steered and patched runs. At a block output
    /// the order is: intervention, then patch, then tap.
    pub fn forward(&self, req: &ForwardRequest<'_>) -> Result<ActivationRecord> {
        self.check_tokens(req.tokens)?;
        let arch = &self.arch;
        if let Some(&bad) = req.tap_layers.iter().find(|&&l| l >= arch.n_layers) {
            return Err(Error::Range {
                what: "tap layer",
                index: bad,
                limit: arch.n_layers,
            });
        }
        if let Some(plan) = req.plan {
            plan.validate(arch)?;
        }
        if let Some(patch) = req.patch {
            if patch.layer >= arch.n_layers {
                return Err(Error::Range {
                    what: "patch layer",
                    index: patch.layer,
                    limit: arch.n_layers,
                });
            }
        }
        let seq = req.tokens.len();
        let d = arch.d_model;
        let tap_positions: Vec<usize> = match &req.tap_positions {
            TapPositions::Final => vec![seq - 1],
            TapPositions::All => (0..seq).collect(),
            TapPositions::Explicit(p) => {
                if let Some(&bad) = p.iter().find(|&&p| p >= seq) {
                    return Err(Error::Range {
                        what: "tap position",
                        index: bad,
                        limit: seq,
                    });
                }
                p.clone()
            }
        };

        let mut h = vec![0.0f32; seq * d];
        for (p, &tok) in req.tokens.iter().enumerate() {
            let row = &mut h[p * d..(p + 1) * d];
            row.copy_from_slice(self.embedding_row(tok));
            if let Some(pos) = &self.weights.pos_embed {
                for (x, e) in row.iter_mut().zip(&pos[p * d..(p + 1) * d]) {
                    *x += e;
                }
            }
        }

        let mut taps = BTreeMap::new();
        for (layer, block) in self.weights.blocks.iter().enumerate() {
            self.block_forward(block, &mut h, seq);
            if let Some(plan) = req.plan.filter(|p| p.layer == layer) {
                let start = match plan.positions {
                    PositionMode::AllPositions => 0,
                    PositionMode::FinalPositionOnly => seq - 1,
                };
                for p in start..seq {
                    for (x, v) in h[p * d..(p + 1) * d].iter_mut().zip(&plan.vector) {
                        *x += plan.alpha * v;
                    }
                }
            }
            if let Some(patch) = req.patch.filter(|p| p.layer == layer) {
                let start = match patch.positions {
                    PositionMode::AllPositions => 0,
                    PositionMode::FinalPositionOnly => seq - 1,
                };
                for p in start..seq.min(patch.states.len()) {
                    let state = &patch.states[p];
                    if state.len() != d {
                        return Err(Error::Parameter(format!(
                            "patch state has length {}, d_model is {d}",
                            state.len()
                        )));
                    }
                    h[p * d..(p + 1) * d].copy_from_slice(state);
                }
            }
            if req.tap_layers.contains(&layer) {
                for &p in &tap_positions {
                    taps.insert((layer, p), h[p * d..(p + 1) * d].to_vec());
                }
            }
        }
        let final_logits = self.lens_logits(&h[(seq - 1) * d..seq * d]);
        Ok(ActivationRecord { taps, final_logits })
    }

    fn block_forward(&self, block: &Block, h: &mut [f32], seq: usize) {
        let arch = &self.arch;
        let d = arch.d_model;
        let n_heads = arch.n_heads;
        let hd = arch.head_dim();

        let mut normed = Vec::with_capacity(seq * d);
        for p in 0..seq {
            normed.extend(self.apply_norm(&block.ln1, &h[p * d..(p + 1) * d]));
        }
        let mut q = block.q.apply(&normed, seq);
        let mut k = block.k.apply(&normed, seq);
        let v = block.v.apply(&normed, seq);
        if arch.pos_kind == PosKind::Rotary {
            for p in 0..seq {
                for hh in 0..n_heads {
                    let s = p * d + hh * hd;
                    ops::apply_rope(&mut q[s..s + hd], p, arch.rope_base);
                    ops::apply_rope(&mut k[s..s + hd], p, arch.rope_base);
                }
            }
        }
        let scale = 1.0 / (hd as f32).sqrt();
        let mut attn = vec![0.0f32; seq * d];
        let mut scores = vec![0.0f32; seq];
        for hh in 0..n_heads {
            for i in 0..seq {
                let qi = &q[i * d + hh * hd..i * d + (hh + 1) * hd];
                for j in 0..=i {
                    let kj = &k[j * d + hh * hd..j * d + (hh + 1) * hd];
                    scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                ops::softmax_in_place(&mut scores[..=i]);
                let out = &mut attn[i * d + hh * hd..i * d + (hh + 1) * hd];
                for j in 0..=i {
                    let w = scores[j];
                    let vj = &v[j * d + hh * hd..j * d + (hh + 1) * hd];
                    for (o, x) in out.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        let attn_out = block.o.apply(&attn, seq);
        for (x, a) in h.iter_mut().zip(&attn_out) {
            *x += a;
        }

        let mut normed = Vec::with_capacity(seq * d);
        for p in 0..seq {
            normed.extend(self.apply_norm(&block.ln2, &h[p * d..(p + 1) * d]));
        }
        let mlp_out = match &block.mlp {
            Mlp::Gelu { fc_in, fc_out } => {
                let mut hidden = fc_in.apply(&normed, seq);
                hidden.iter_mut().for_each(|x| *x = ops::gelu(*x));
                fc_out.apply(&hidden, seq)
            }
            Mlp::SwiGlu { gate, up, down } => {
                let g = gate.apply(&normed, seq);
                let u = up.apply(&normed, seq);
                let hidden: Vec<f32> = g.iter().zip(&u).map(|(g, u)| ops::silu(*g) * u).collect();
                down.apply(&hidden, seq)
            }
        };
        for (x, m) in h.iter_mut().zip(&mlp_out) {
            *x += m;
        }
    }

    /// Greedy next token; ties resolve to the lowest id.
    pub fn next_token(&self, logits: &[f32]) -> TokenId {
        ops::argmax(logits) as TokenId
    }

    /// Greedy decoding from token ids. Stops early on a special token (not
    /// emitted). The plan is re-applied on every step.
    pub fn generate_tokens(
        &self,
        prompt: &[TokenId],
        max_new_tokens: usize,
        plan: Option<&InterventionPlan>,
    ) -> Result<Vec<TokenId>> {
        if max_new_tokens == 0 {
            return Err(Error::Parameter("max_new_tokens must be at least 1".into()));
        }
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new_tokens);
        for _ in 0..max_new_tokens {
            if seq.len() > self.arch.max_context {
                return Err(Error::Truncation {
                    partial: self.decode(&out),
                });
            }
            let rec = self.forward(&ForwardRequest {
                tokens: &seq,
                plan,
                ..Default::default()
            })?;
            let next = self.next_token(&rec.final_logits);
            if self.tokenizer.specials().contains(&next) {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Greedy continuation of `prompt`, excluding the prompt itself.
    pub fn generate_greedy(
        &self,
        prompt: &[u8],
        max_new_tokens: usize,
        plan: Option<&InterventionPlan>,
    ) -> Result<Vec<u8>> {
        let ids = self.encode(prompt);
        Ok(self.decode(&self.generate_tokens(&ids, max_new_tokens, plan)?))
    }
}
