//! Composite loss, relevant-object augmentation, the optimisation loop and the
//! checkpoint format.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langmodel::Vocabulary;
use crate::nncore::{AdamW, CosineSchedule, NnError, ParamStore, Tape, Tensor, Var};
use crate::r2s::{ModelConfig, PipelineMode, R2sModel, StageInput};
use crate::scenekit::{index_scenes, ReasonSample, Scene, SceneRecord};

/// DICE smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_txt: f64,
    pub w_bce: f64,
    pub w_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_txt: 0.5, w_bce: 1.0, w_dice: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_txt: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub total: f64,
}

pub fn total_loss(l_txt: f64, l_bce: f64, l_dice: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown { l_txt, l_bce, l_dice, total: cfg.lambda_txt * l_txt + cfg.w_bce * l_bce + cfg.w_dice * l_dice }
}

/// Mean binary cross-entropy and mean soft DICE of probability masks against
/// binary ground truth, aligned row by row.
pub fn seg_losses(probs: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<(f64, f64)> {
    if probs.len() != gt.len() {
        return Err(Error::Data(format!("{} predicted masks vs {} ground-truth masks", probs.len(), gt.len())));
    }
    if probs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut bce, mut n, mut dice) = (0.0, 0usize, 0.0);
    for (p, g) in probs.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Data(format!("mask lengths {} vs {}", p.len(), g.len())));
        }
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (&pi, &gi) in p.iter().zip(g) {
            let pc = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            bce -= gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln();
            inter += pi * gi;
            sp += pi;
            sg += gi;
        }
        n += p.len();
        dice += 1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH);
    }
    Ok((bce / n as f64, dice / probs.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_omit: f64,
    pub p_add: f64,
    pub k_add_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_omit: 0.3, p_add: 0.3, k_add_max: 2 }
    }
}

impl AugmentConfig {
    pub const OFF: AugmentConfig = AugmentConfig { p_omit: 0.0, p_add: 0.0, k_add_max: 0 };
}

/// Randomly drops ground-truth related objects and appends distractors drawn
/// from the other objects of the scene. Survivors keep their order and come
/// first.
pub fn augment_priors<R: Rng>(gt_relevant: &[u32], scene: &Scene, cfg: &AugmentConfig, rng: &mut R) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(gt_relevant.len() + cfg.k_add_max);
    for &id in gt_relevant {
        if !rng.gen_bool(1.0 - cfg.p_omit) || out.contains(&id) {
            continue;
        }
        out.push(id);
    }
    if cfg.k_add_max > 0 && rng.gen_bool(cfg.p_add) {
        let mut pool: Vec<u32> =
            scene.objects.iter().map(|o| o.instance_id).filter(|id| !gt_relevant.contains(id)).collect();
        pool.shuffle(rng);
        let k = rng.gen_range(1..=cfg.k_add_max).min(pool.len());
        out.extend_from_slice(&pool[..k]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: PipelineMode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub freeze_lm: bool,
    pub freeze_backbone: bool,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::FullR2s,
            steps: 2000,
            batch_size: 4,
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 0,
            freeze_lm: false,
            freeze_backbone: false,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 <= lr_min <= lr_max and lr_max > 0");
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.p_omit) || !(0.0..=1.0).contains(&a.p_add) {
            return bad("augmentation probabilities must lie in [0, 1]");
        }
        if !(self.loss.lambda_txt >= 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("lambda_txt, weight_decay and grad_clip must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub l_txt: f64,
    pub l_bce: f64,
    pub l_dice: f64,
    pub total: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,lr,l_txt,l_bce,l_dice,total\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{},{},{},{}\n", r.step, r.lr, r.l_txt, r.l_bce, r.l_dice, r.total));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loss vars of one sample on `tape`, plus the breakdown (summed over stages).
pub fn sample_loss(
    model: &R2sModel,
    st: &ParamStore,
    tape: &mut Tape,
    rec: &SceneRecord,
    stages: &[StageInput],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let fp = model.scene_features(st, tape, rec)?;
    let mut total: Option<Var> = None;
    let mut sums = LossBreakdown::default();
    for input in stages {
        let vars = model.stage_forward(st, tape, fp, input)?;
        let ce = tape.cross_entropy(vars.logits, &input.targets)?;
        let mut stage = tape.scale(ce, cfg.lambda_txt)?;
        sums.l_txt += tape.value(ce).item();
        if let Some(m) = vars.mask_logits {
            let gt: Vec<f64> = input.seg_targets.concat();
            let bce = tape.bce_with_logits(m, &gt)?;
            let dice = tape.dice_loss(m, &gt, DICE_SMOOTH)?;
            sums.l_bce += tape.value(bce).item();
            sums.l_dice += tape.value(dice).item();
            let b = tape.scale(bce, cfg.w_bce)?;
            let d = tape.scale(dice, cfg.w_dice)?;
            stage = tape.add(stage, b)?;
            stage = tape.add(stage, d)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, stage)?,
            None => stage,
        });
    }
    let total = total.ok_or_else(|| Error::Data("sample produced no training stage".into()))?;
    sums.total = tape.value(total).item();
    Ok((total, sums))
}

/// Per-sample random stream keyed by `(seed, sample, epoch)`.
pub fn sample_rng(seed: u64, sample: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sample as u64) << 24) ^ epoch as u64);
    rng
}

fn clip_grads(store: &mut ParamStore, max_norm: f64) {
    let norm = store.iter().filter(|(_, p)| p.requires_grad).flat_map(|(_, p)| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
}

/// Trains `model` in place and returns the per-step trace. Parameters are
/// rounded to checkpoint precision at the end, so the returned model and a
/// checkpoint of it evaluate identically.
pub fn train(
    model: &mut R2sModel,
    scenes: &[SceneRecord],
    samples: &[ReasonSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let index = index_scenes(scenes);
    let recs: Vec<&SceneRecord> = samples
        .iter()
        .map(|s| index.get(s.scene_id.as_str()).copied().ok_or_else(|| Error::Data(format!("unknown scene {}", s.scene_id))))
        .collect::<Result<_>>()?;
    model.store.set_trainable("lm.", !cfg.freeze_lm);
    model.store.set_trainable("backbone.", !cfg.freeze_backbone);
    let schedule = CosineSchedule { lr_max: cfg.lr_max, lr_min: cfg.lr_min, total_steps: cfg.steps };
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let (mut cursor, mut epoch) = (0usize, 0usize);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        model.store.zero_grad();
        let mut acc = LossBreakdown::default();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                if !order.is_empty() {
                    epoch += 1;
                }
                order = (0..samples.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let mut rng = sample_rng(cfg.seed, i, epoch);
            let priors = augment_priors(&samples[i].relevant_ids(), &recs[i].scene, &cfg.augment, &mut rng);
            let stages = model.stage_inputs(recs[i], &samples[i], cfg.mode, &priors)?;
            let mut tape = Tape::new();
            let (loss, parts) = match sample_loss(model, &model.store, &mut tape, recs[i], &stages, &cfg.loss) {
                Err(Error::Nn(NnError::NonFinite { .. })) => return Err(Error::Divergence { step }),
                r => r?,
            };
            if !parts.total.is_finite() {
                return Err(Error::Divergence { step });
            }
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape);
            acc.l_txt += parts.l_txt;
            acc.l_bce += parts.l_bce;
            acc.l_dice += parts.l_dice;
            acc.total += parts.total;
        }
        let b = cfg.batch_size as f64;
        model.store.scale_grads(1.0 / b);
        if model.store.iter().any(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::Divergence { step });
        }
        clip_grads(&mut model.store, cfg.grad_clip);
        let lr = schedule.lr(step);
        opt.step(&mut model.store, lr);
        let row = TraceRow {
            step,
            lr,
            l_txt: acc.l_txt / b,
            l_bce: acc.l_bce / b,
            l_dice: acc.l_dice / b,
            total: acc.total / b,
        };
        on_step(&row);
        trace.push(row);
    }
    model.store.round_to_f32();
    Ok(trace)
}

// ---- checkpoint ------------------------------------------------------------

const MAGIC: &[u8; 8] = b"R2SGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    vocab: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Header, JSON metadata (model config, vocabulary, tensor table), then every
/// parameter as little-endian f32 in table order.
pub fn checkpoint_bytes(model: &R2sModel) -> Vec<u8> {
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        vocab: model.vocab.to_json(),
        tensors: model
            .store
            .iter()
            .map(|(n, p)| TensorEntry { name: n.to_string(), rows: p.value.rows(), cols: p.value.cols() })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, p) in model.store.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<R2sModel> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta_end = 20usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..meta_end]).map_err(|e| bad(e.to_string()))?;
    let vocab = Vocabulary::from_json(&meta.vocab).map_err(bad)?;
    let mut model = R2sModel::new(meta.model, vocab, 0)?;
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    if names.len() != meta.tensors.len() {
        return Err(bad(format!("{} tensors stored, model has {}", meta.tensors.len(), names.len())));
    }
    let mut off = meta_end;
    for (entry, name) in meta.tensors.iter().zip(&names) {
        let id = model.store.id(name).expect("own parameter");
        let p = model.store.get_mut(id);
        if &entry.name != name || entry.rows != p.value.rows() || entry.cols != p.value.cols() {
            return Err(bad(format!(
                "tensor {} {}x{} does not match {} {}x{}",
                entry.name,
                entry.rows,
                entry.cols,
                name,
                p.value.rows(),
                p.value.cols()
            )));
        }
        let n = entry.rows * entry.cols;
        let end = off + 4 * n;
        if end > bytes.len() {
            return Err(bad(format!("payload of {} truncated", entry.name)));
        }
        let data: Vec<f64> = bytes[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        p.value = Tensor::matrix(entry.rows, entry.cols, data)?;
        off = end;
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &R2sModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<R2sModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint_bytes(&bytes)
}
