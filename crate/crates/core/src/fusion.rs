//! Q-Former: learned latent queries and the instruction attend to each other
//! and to the super-point features, producing a fixed-length visual summary.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nncore::layers::{Embedding, FeedForward, LayerNorm, MultiHeadAttention, Positions};
use crate::nncore::{AttnOpts, NnError, ParamId, ParamStore, Result, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub latent_queries: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { dim: 64, layers: 2, heads: 4, latent_queries: 32, ffn_mult: 2, max_len: 128 }
    }
}

/// Row role inside an instruction sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Text,
    PriorSlot,
    /// Batch padding: neither attends nor is attended to by real rows.
    Pad,
}

/// Instruction rows `T x D` with their roles.
#[derive(Clone, Debug)]
pub struct EmbeddingSequence {
    pub rows: Var,
    pub roles: Vec<Role>,
}

impl EmbeddingSequence {
    pub fn slot_positions(&self) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| **r == Role::PriorSlot).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FuseHooks {
    /// Force uniform attention weights in every attention block.
    pub uniform_attention: bool,
}

#[derive(Clone, Debug)]
struct QLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub latents: ParamId,
    pub tokens: Embedding,
    pub positions: Positions,
    layers: Vec<QLayer>,
    ln_out: LayerNorm,
}

/// Output of [`Fusion::fuse`]: refined latent queries and instruction rows.
#[derive(Clone, Debug)]
pub struct Fused {
    pub queries: Var,
    pub text: Var,
    /// Self-attention nodes, one per layer; read with `Tape::attention_weights`.
    pub self_attention: Vec<Var>,
}

/// Output of [`Fusion::fuse_refine`]; `priors` holds the slot rows of `text`
/// in slot order and is `None` when the instruction has no slots.
#[derive(Clone, Copy, Debug)]
pub struct Refined {
    pub queries: Var,
    pub priors: Option<Var>,
    pub text: Var,
}

impl Fusion {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: FusionConfig, vocab: usize, rng: &mut R) -> Self {
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("fusion.layer{i}");
                QLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, cfg.heads, rng),
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d),
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross"), d, cfg.heads, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * cfg.ffn_mult, rng),
                }
            })
            .collect();
        Self {
            latents: store.add_normal("fusion.latents", cfg.latent_queries, d, 1.0, rng),
            tokens: Embedding::new(store, "fusion.tokens", vocab, d, rng),
            positions: Positions::new(store, "fusion.positions", cfg.max_len, d, rng),
            layers,
            ln_out: LayerNorm::new(store, "fusion.ln_out", d),
            cfg,
        }
    }

    /// Embeds instruction ids; occurrences of `slot_id` take the rows of
    /// `slots` (already projected to `D`) and are tagged as prior slots.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        slot_id: usize,
        slots: Option<Var>,
    ) -> Result<EmbeddingSequence> {
        let e = self.tokens.forward_with_slots(tape, store, ids, slot_id, slots)?;
        let rows = self.positions.add(tape, store, e)?;
        let roles = ids
            .iter()
            .map(|&i| if i == slot_id && slots.is_some() { Role::PriorSlot } else { Role::Text })
            .collect();
        Ok(EmbeddingSequence { rows, roles })
    }

    /// Runs the Q-Former over `[latents; w]` with `fp` as cross-attention memory.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, w: &EmbeddingSequence, fp: Var, hooks: FuseHooks) -> Result<Fused> {
        let (x, self_attention) = self.run(tape, store, w, fp, hooks)?;
        let l = self.cfg.latent_queries;
        let t = w.roles.len();
        Ok(Fused { queries: tape.slice_rows(x, 0, l)?, text: tape.slice_rows(x, l, l + t)?, self_attention })
    }

    /// [`fuse`](Self::fuse) that also reads the refined prior rows back from
    /// their slot positions.
    pub fn fuse_refine(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        w: &EmbeddingSequence,
        fp: Var,
        hooks: FuseHooks,
    ) -> Result<Refined> {
        let Fused { queries, text, .. } = self.fuse(tape, store, w, fp, hooks)?;
        let slots = w.slot_positions();
        let priors = if slots.is_empty() { None } else { Some(tape.embedding_lookup(text, &slots)?) };
        Ok(Refined { queries, priors, text })
    }

    fn run(&self, tape: &mut Tape, store: &ParamStore, w: &EmbeddingSequence, fp: Var, hooks: FuseHooks) -> Result<(Var, Vec<Var>)> {
        let d = self.cfg.dim;
        let (t, wd) = tape.shape(w.rows);
        let fd = tape.shape(fp).1;
        if wd != d || fd != d || t != w.roles.len() {
            return Err(NnError::Shape {
                op: "fuse",
                detail: format!("model dim {d}, instruction {t}x{wd} with {} roles, features width {fd}", w.roles.len()),
            });
        }
        let q = tape.param(store, self.latents)?;
        let mut x = tape.concat_rows(&[q, w.rows])?;
        let l = self.cfg.latent_queries;
        let n = l + t;
        let has_pad = w.roles.contains(&Role::Pad);
        let self_opts = AttnOpts {
            allowed: has_pad.then(|| {
                let real: Vec<bool> = (0..n).map(|j| j < l || w.roles[j - l] != Role::Pad).collect();
                Rc::from((0..n * n).map(|ij| real[ij % n]).collect::<Vec<bool>>())
            }),
            uniform: hooks.uniform_attention,
        };
        let cross_opts = AttnOpts { allowed: None, uniform: hooks.uniform_attention };
        let mut nodes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.ln_self.forward(tape, store, x)?;
            let (a, node) = layer.self_attn.forward_with_weights(tape, store, h, h, &self_opts)?;
            nodes.push(node);
            x = tape.add(x, a)?;
            let h = layer.ln_cross.forward(tape, store, x)?;
            let a = layer.cross_attn.forward(tape, store, h, fp, &cross_opts)?;
            x = tape.add(x, a)?;
            let h = layer.ln_ffn.forward(tape, store, x)?;
            let f = layer.ffn.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        Ok((self.ln_out.forward(tape, store, x)?, nodes))
    }
}
