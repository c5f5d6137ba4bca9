//! Mask decoder: `[SEG]` states attend to super-point features through a few
//! cross-attention layers, then score every super-point by a dot product.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nncore::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nncore::{sigmoid, AttnOpts, NnError, ParamStore, Result, Tape, Tensor, Var};
use crate::scenekit::SuperPointMap;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskHeadConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for MaskHeadConfig {
    fn default() -> Self {
        Self { dim: 64, layers: 2, heads: 4, ffn_mult: 2 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DecodeHooks {
    /// Skip projections and refinement: `logits = h fp^T`.
    pub bypass: bool,
}

#[derive(Clone, Debug)]
struct RefineLayer {
    ln_q: LayerNorm,
    cross: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    pub cfg: MaskHeadConfig,
    q_in: Linear,
    layers: Vec<RefineLayer>,
    ln_out: LayerNorm,
    q_out: Linear,
    f_proj: Linear,
}

/// Per-super-point mask logits `K x P`, evaluated outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub logits: Tensor,
    pub threshold: f64,
}

impl SegMask {
    pub fn new(logits: Tensor) -> Self {
        Self { logits, threshold: DEFAULT_THRESHOLD }
    }

    pub fn empty(p: usize) -> Self {
        Self::new(Tensor::matrix(0, p, Vec::new()).expect("empty matrix"))
    }

    pub fn count(&self) -> usize {
        self.logits.rows()
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.logits.to_rows().into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect()
    }

    /// Super-point indices with `prob >= threshold`, one list per mask.
    pub fn binary(&self) -> Vec<Vec<usize>> {
        self.probs()
            .into_iter()
            .map(|r| r.iter().enumerate().filter(|(_, &p)| p >= self.threshold).map(|(i, _)| i).collect())
            .collect()
    }
}

impl MaskHead {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: MaskHeadConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("maskhead.layer{i}");
                RefineLayer {
                    ln_q: LayerNorm::new(store, &format!("{p}.ln_q"), d),
                    cross: MultiHeadAttention::new(store, &format!("{p}.cross"), d, cfg.heads, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * cfg.ffn_mult, rng),
                }
            })
            .collect();
        Self {
            q_in: Linear::new(store, "maskhead.q_in", d, d, true, rng),
            layers,
            ln_out: LayerNorm::new(store, "maskhead.ln_out", d),
            q_out: Linear::new(store, "maskhead.q_out", d, d, false, rng),
            f_proj: Linear::new(store, "maskhead.f_proj", d, d, false, rng),
            cfg,
        }
    }

    /// Mask logits `K x P`; `None` when there are no `[SEG]` states.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, h: Var, fp: Var, hooks: DecodeHooks) -> Result<Option<Var>> {
        let (k, hd) = tape.shape(h);
        let fd = tape.shape(fp).1;
        if hd != self.cfg.dim || fd != self.cfg.dim {
            return Err(NnError::Shape {
                op: "mask_decode",
                detail: format!("seg states width {hd}, features width {fd}, model dim {}", self.cfg.dim),
            });
        }
        if k == 0 {
            return Ok(None);
        }
        if hooks.bypass {
            return Ok(Some(tape.matmul(h, fp, true)?));
        }
        let mut q = self.q_in.forward(tape, store, h)?;
        let opts = AttnOpts::default();
        for layer in &self.layers {
            let x = layer.ln_q.forward(tape, store, q)?;
            let a = layer.cross.forward(tape, store, x, fp, &opts)?;
            q = tape.add(q, a)?;
            let x = layer.ln_ffn.forward(tape, store, q)?;
            let f = layer.ffn.forward(tape, store, x)?;
            q = tape.add(q, f)?;
        }
        let q = self.ln_out.forward(tape, store, q)?;
        let q = self.q_out.forward(tape, store, q)?;
        let f = self.f_proj.forward(tape, store, fp)?;
        let logits = tape.matmul(q, f, true)?;
        Ok(Some(tape.scale(logits, 1.0 / (self.cfg.dim as f64).sqrt())?))
    }

    /// Tape-free decode of constant inputs.
    pub fn decode_values(&self, store: &ParamStore, h: &Tensor, fp: &Tensor, hooks: DecodeHooks) -> Result<SegMask> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone())?;
        let fv = tape.constant(fp.clone())?;
        Ok(match self.decode(&mut tape, store, hv, fv, hooks)? {
            Some(l) => SegMask::new(tape.value(l).clone()),
            None => SegMask::empty(fp.rows()),
        })
    }
}

/// Broadcasts binarised super-point masks to points: one sorted point-index
/// list per mask.
pub fn to_point_mask(mask: &SegMask, map: &SuperPointMap) -> Vec<Vec<usize>> {
    mask.binary().into_iter().map(|on| superpoints_to_points(&on, map)).collect()
}

/// Points whose super-point is listed in `on`.
pub fn superpoints_to_points(on: &[usize], map: &SuperPointMap) -> Vec<usize> {
    let mut flag = vec![false; map.count];
    for &s in on {
        if s < map.count {
            flag[s] = true;
        }
    }
    map.assignment.iter().enumerate().filter(|(_, &s)| flag[s]).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_on_mask_covers_every_point() {
        let map = SuperPointMap { assignment: vec![0, 1, 1, 2], count: 3 };
        let m = SegMask::new(Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap());
        assert_eq!(to_point_mask(&m, &map), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn single_superpoint_selects_its_members() {
        let map = SuperPointMap { assignment: vec![0, 1, 1, 2], count: 3 };
        let m = SegMask::new(Tensor::from_rows(&[vec![-5.0, 5.0, -5.0]]).unwrap());
        assert_eq!(to_point_mask(&m, &map), vec![vec![1, 2]]);
    }

    #[test]
    fn threshold_is_inclusive_at_half() {
        let m = SegMask::new(Tensor::from_rows(&[vec![0.0, -1e-9]]).unwrap());
        assert_eq!(m.binary(), vec![vec![0]]);
    }
}
