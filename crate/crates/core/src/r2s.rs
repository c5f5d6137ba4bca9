//! Two-stage relevant reasoning segmentation.
//!
//! Step 1 asks the model to segment the objects related to a question; their
//! masks pool the scene features into prior vectors. Step 2 re-asks the
//! question with those vectors spliced into the instruction, refines them in
//! the Q-Former, and decodes the final answer mask.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{FuseHooks, Fusion, FusionConfig};
use crate::langmodel::{self, extract_seg_states, GenerationResult, LanguageModel, LmConfig, Vocabulary, OBJ, SEG};
use crate::maskhead::{DecodeHooks, MaskHead, MaskHeadConfig, SegMask};
use crate::nncore::layers::Linear;
use crate::nncore::{ParamStore, Tape, Tensor, Var};
use crate::scenekit::{gt_superpoint_masks, ReasonSample, Scene, SceneRecord};

// Reference profile of the full-scale system; recorded, not instantiated.
pub const FULL_SCALE_QFORMER_LAYERS: usize = 6;
pub const FULL_SCALE_QFORMER_DIM: usize = 768;
pub const FULL_SCALE_MASK_LAYERS: usize = 6;
pub const FULL_SCALE_MASK_DIM: usize = 256;
pub const FULL_SCALE_VOCAB: usize = 30_522;
pub const FULL_SCALE_POSITIONS: usize = 512;

/// Sum of pooling weights below which a mask counts as empty.
pub const POOL_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Baseline,
    WoPr,
    TextBased,
    FullR2s,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 4] = [Self::Baseline, Self::WoPr, Self::TextBased, Self::FullR2s];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::WoPr => "wo_pr",
            Self::TextBased => "text_based",
            Self::FullR2s => "full_r2s",
        }
    }

    /// Modes that run a separate Step 1 pass.
    pub fn two_stage(self) -> bool {
        matches!(self, Self::TextBased | Self::FullR2s)
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected one of baseline, wo_pr, text_based, full_r2s"))
    }
}

// ---- templates -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Plain,
    Step1,
    Step2,
    /// Single pass that names the related objects and the answer together.
    Combined,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub stage: Stage,
    pub pattern: String,
}

pub const QUESTION: &str = "[QUESTION]";
pub const PRIORS: &str = "[PRIORS]";

impl InstructionTemplate {
    pub fn plain() -> Self {
        Self::new(Stage::Plain, "Look at the 3D scene and answer with a segmentation mask: [QUESTION].")
    }

    pub fn step1() -> Self {
        Self::new(
            Stage::Step1,
            "In this 3D scene, [QUESTION]. First mark every object that could matter for this question.",
        )
    }

    pub fn step2() -> Self {
        Self::new(
            Stage::Step2,
            "In this 3D scene, the question is [QUESTION]. Objects found so far: [PRIORS]. \
             Use them to answer, and give the segmentation mask.",
        )
    }

    pub fn combined() -> Self {
        Self::new(
            Stage::Combined,
            "In this 3D scene, [QUESTION]. Mark every object that could matter, then answer with a segmentation mask.",
        )
    }

    pub fn new(stage: Stage, pattern: &str) -> Self {
        Self { stage, pattern: pattern.to_string() }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Plain => Self::plain(),
            Stage::Step1 => Self::step1(),
            Stage::Step2 => Self::step2(),
            Stage::Combined => Self::combined(),
        }
    }

    fn check(&self) -> Result<()> {
        let mut rest = self.pattern.as_str();
        while let Some(start) = rest.find('[') {
            let end = rest[start..]
                .find(']')
                .map(|e| start + e + 1)
                .ok_or_else(|| Error::Config(format!("unterminated placeholder in {:?}", self.pattern)))?;
            let ph = &rest[start..end];
            if ph != QUESTION && ph != PRIORS {
                return Err(Error::Config(format!("unknown placeholder {ph} in template")));
            }
            rest = &rest[end..];
        }
        let priors = self.pattern.matches(PRIORS).count();
        let want = usize::from(self.stage == Stage::Step2);
        if priors != want || self.pattern.matches(QUESTION).count() != 1 {
            return Err(Error::Config(format!(
                "{:?} template needs one {QUESTION} and {want} {PRIORS} block(s)",
                self.stage
            )));
        }
        Ok(())
    }
}

/// Alternative phrasings for augmentation. Each carries the same
/// placeholders as the canonical template of its stage.
pub fn template_pack() -> Vec<InstructionTemplate> {
    vec![
        InstructionTemplate::new(Stage::Plain, "Answer from the scene and return the matching mask: [QUESTION]."),
        InstructionTemplate::new(
            Stage::Step1,
            "Here is a 3D room. [QUESTION]. Which objects relate to this question? Mark them.",
        ),
        InstructionTemplate::new(
            Stage::Step2,
            "Here is a 3D room and the question [QUESTION]. Candidate objects: [PRIORS]. \
             Answer it and return the mask.",
        ),
    ]
}

/// What fills the prior block of a Step-2 instruction.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorBlock {
    None,
    Slots(usize),
    Words(Vec<String>),
}

/// Strips trailing sentence punctuation from a question.
pub fn clean_question(q: &str) -> &str {
    q.trim().trim_end_matches(['?', '.', '!', ' '])
}

/// Renders a template to word tokens.
pub fn render_instruction(t: &InstructionTemplate, question: &str, priors: &PriorBlock) -> Result<Vec<String>> {
    t.check()?;
    let has_priors = !matches!(priors, PriorBlock::None | PriorBlock::Slots(0));
    if t.stage != Stage::Step2 && has_priors {
        return Err(Error::Config(format!("{:?} instructions take no priors", t.stage)));
    }
    let block = match priors {
        PriorBlock::None | PriorBlock::Slots(0) => "none".to_string(),
        PriorBlock::Slots(n) => vec!["<OBJ>"; *n].join(" , "),
        PriorBlock::Words(w) if w.is_empty() => "none".to_string(),
        PriorBlock::Words(w) => w.join(" , "),
    };
    let text = t.pattern.replace(QUESTION, clean_question(question)).replace(PRIORS, &block);
    Ok(langmodel::tokenize(&text))
}

fn seg_list(words: &[String]) -> String {
    if words.is_empty() {
        return "none".into();
    }
    words.iter().map(|w| format!("{w} [SEG]")).collect::<Vec<_>>().join(" , ")
}

/// Step-1 target: the related objects, one `[SEG]` each.
pub fn step1_response(categories: &[String]) -> String {
    format!("the related objects are {} .", seg_list(categories))
}

/// Final target: the answer phrase followed by one `[SEG]` per target.
pub fn final_response(answer: &str, targets: usize) -> String {
    let segs = vec!["[SEG]"; targets.max(1)].join(" , ");
    format!("{} {segs} .", clean_question(answer))
}

pub fn combined_response(categories: &[String], answer: &str, targets: usize) -> String {
    let segs = vec!["[SEG]"; targets.max(1)].join(" , ");
    format!(
        "the related objects are {} ; the answer is {} {segs} .",
        seg_list(categories),
        clean_question(answer)
    )
}

/// Answer phrase of a final or combined response.
pub fn extract_answer(tokens: &[String]) -> String {
    let start = tokens
        .windows(2)
        .rposition(|w| w[0] == "answer" && w[1] == "is")
        .map(|i| i + 2)
        .unwrap_or(0);
    tokens[start..]
        .iter()
        .filter(|t| t.as_str() != "[SEG]" && t.as_str() != "," && t.as_str() != ".")
        .cloned()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Word before each `[SEG]`, i.e. the category named for that mask.
pub fn seg_categories(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_str() == "[SEG]")
        .map(|(i, _)| if i > 0 { tokens[i - 1].clone() } else { "object".into() })
        .collect()
}

/// Index among `[SEG]` tokens from which the answer masks start in a
/// combined response (those after the word "answer").
pub fn answer_seg_start(tokens: &[String]) -> usize {
    match tokens.iter().rposition(|t| t == "answer") {
        Some(a) => tokens[..a].iter().filter(|t| t.as_str() == "[SEG]").count(),
        None => 0,
    }
}

/// Every text the model can be asked to read or write for `samples`.
pub fn vocabulary_texts(samples: &[ReasonSample], scenes: &[&Scene]) -> Vec<String> {
    let mut texts: Vec<String> = [Stage::Plain, Stage::Step1, Stage::Step2, Stage::Combined]
        .into_iter()
        .map(|s| InstructionTemplate::for_stage(s).pattern)
        .chain(template_pack().into_iter().map(|t| t.pattern))
        .map(|p| p.replace(QUESTION, " ").replace(PRIORS, " none "))
        .collect();
    texts.push(combined_response(&[], "", 1));
    texts.push(step1_response(&[]));
    texts.push("object".into());
    for s in samples {
        texts.push(s.question.clone());
        texts.push(s.answer.clone());
    }
    for sc in scenes {
        for o in &sc.objects {
            texts.push(o.category.clone());
            texts.extend(o.attributes.iter().cloned());
        }
    }
    texts
}

pub fn build_vocabulary(samples: &[ReasonSample], scenes: &[&Scene]) -> Vocabulary {
    let texts = vocabulary_texts(samples, scenes);
    Vocabulary::build(texts.iter().map(String::as_str))
}

// ---- mask pooling ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PriorFeatures {
    /// `n x D` pooled rows.
    pub rows: Tensor,
    /// Rows whose mask was empty and fell back to the global mean.
    pub fallback: Vec<bool>,
}

/// Normalised pooling weights per mask; empty masks get uniform weights.
pub fn pool_weights(probs: &[Vec<f64>], p: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut fallback = Vec::with_capacity(probs.len());
    let weights = probs
        .iter()
        .map(|m| {
            let s: f64 = m.iter().sum();
            let empty = s < POOL_EPS;
            fallback.push(empty);
            if empty {
                vec![1.0 / p as f64; p]
            } else {
                m.iter().map(|v| v / s).collect()
            }
        })
        .collect();
    (weights, fallback)
}

/// Mask-weighted average of feature rows: row `i` is
/// `sum_p probs[i][p] fp[p] / sum_p probs[i][p]`.
pub fn mask_pool(fp: &Tensor, probs: &[Vec<f64>]) -> Result<PriorFeatures> {
    let (p, d) = (fp.rows(), fp.cols());
    if let Some(m) = probs.iter().find(|m| m.len() != p) {
        return Err(Error::Data(format!("mask of length {} over {p} super-points", m.len())));
    }
    let (weights, fallback) = pool_weights(probs, p);
    let mut rows = vec![0.0; probs.len() * d];
    for (i, w) in weights.iter().enumerate() {
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                for (o, &f) in rows[i * d..(i + 1) * d].iter_mut().zip(fp.row(j)) {
                    *o += wj * f;
                }
            }
        }
    }
    Ok(PriorFeatures { rows: Tensor::matrix(probs.len(), d, rows)?, fallback })
}

/// Differentiable pooling with constant weights: `W fp`.
pub fn mask_pool_var(tape: &mut Tape, fp: Var, probs: &[Vec<f64>]) -> Result<Var> {
    let p = tape.shape(fp).0;
    let (weights, _) = pool_weights(probs, p);
    let w = tape.constant(Tensor::from_rows(&weights)?)?;
    Ok(tape.matmul(w, fp, false)?)
}

// ---- model -----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub coord_scale: f64,
    pub fusion_layers: usize,
    pub latent_queries: usize,
    pub fusion_max_len: usize,
    pub lm_layers: usize,
    pub lm_max_len: usize,
    pub mask_layers: usize,
    /// Step-1 priors beyond this count are dropped from the end.
    pub max_priors: usize,
    pub max_new_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            ffn_mult: 2,
            coord_scale: 3.0,
            fusion_layers: 2,
            latent_queries: 32,
            fusion_max_len: 128,
            lm_layers: 2,
            lm_max_len: 256,
            mask_layers: 2,
            max_priors: 8,
            max_new_tokens: 40,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.latent_queries == 0 || self.ffn_mult == 0 || self.fusion_max_len == 0 || self.lm_max_len == 0 {
            return Err(Error::Config("latent_queries, ffn_mult and max lengths must be positive".into()));
        }
        if !(self.coord_scale > 0.0) {
            return Err(Error::Config("coord_scale must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable parts plus the vocabulary they were sized for.
#[derive(Clone, Debug)]
pub struct R2sModel {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub lm: LanguageModel,
    pub maskhead: MaskHead,
    vis_proj: Linear,
    prior_to_q: Linear,
    prior_to_lm: Linear,
}

/// One teacher-forced pass: instruction, optional prior pooling weights, and
/// the response with the ground-truth mask of each `[SEG]` in order.
#[derive(Clone, Debug, PartialEq)]
pub struct StageInput {
    pub stage: Stage,
    pub instruction: Vec<usize>,
    /// Pooling weights `n x P` for the `<OBJ>` slots (full mode only).
    pub prior_masks: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub seg_targets: Vec<Vec<f64>>,
}

/// Vars of one teacher-forced pass, for loss construction.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub logits: Var,
    pub mask_logits: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub generation: GenerationResult,
    pub tokens: Vec<String>,
    pub masks: SegMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub mode: PipelineMode,
    pub answer: String,
    pub step1: Option<StepOutput>,
    pub final_step: StepOutput,
    /// Masks scored against the target (answer `[SEG]`s only).
    pub final_masks: SegMask,
    pub n_priors: usize,
    pub prior_fallback: Vec<bool>,
}

/// Where Step-2 priors come from at inference.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorSource {
    Predicted,
    /// Ground-truth instance ids pooled from their ground-truth masks.
    Oracle(Vec<u32>),
}

impl R2sModel {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let v = vocab.len();
        let backbone = Backbone::new(&mut store, BackboneConfig { dim: d, coord_scale: cfg.coord_scale }, &mut rng);
        let fusion = Fusion::new(
            &mut store,
            FusionConfig {
                dim: d,
                layers: cfg.fusion_layers,
                heads: cfg.heads,
                latent_queries: cfg.latent_queries,
                ffn_mult: cfg.ffn_mult,
                max_len: cfg.fusion_max_len,
            },
            v,
            &mut rng,
        );
        let lm = LanguageModel::new(
            &mut store,
            LmConfig { dim: d, layers: cfg.lm_layers, heads: cfg.heads, ffn_mult: cfg.ffn_mult, max_len: cfg.lm_max_len },
            v,
            &mut rng,
        );
        let maskhead = MaskHead::new(
            &mut store,
            MaskHeadConfig { dim: d, layers: cfg.mask_layers, heads: cfg.heads, ffn_mult: cfg.ffn_mult },
            &mut rng,
        );
        let vis_proj = Linear::new(&mut store, "bridge.vis_proj", d, d, true, &mut rng);
        let prior_to_q = Linear::new(&mut store, "bridge.prior_to_q", d, d, true, &mut rng);
        let prior_to_lm = Linear::new(&mut store, "bridge.prior_to_lm", d, d, true, &mut rng);
        Ok(Self { cfg, vocab, store, backbone, fusion, lm, maskhead, vis_proj, prior_to_q, prior_to_lm })
    }

    pub fn encode_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    /// Super-point features `P x D` of a scene.
    pub fn scene_features(&self, st: &ParamStore, tape: &mut Tape, rec: &SceneRecord) -> Result<Var> {
        let sp = self.backbone.superpoint_features(tape, st, &rec.cloud, &rec.superpoints)?;
        Ok(sp.features)
    }

    /// LM prefix `[visual rows; instruction rows]`. With `priors` (pooled rows
    /// `n x D`), the `<OBJ>` slots carry them through the Q-Former and on to
    /// the LM in refined form.
    pub fn prefix(
        &self,
        st: &ParamStore,
        tape: &mut Tape,
        ids: &[usize],
        priors: Option<Var>,
        fp: Var,
        hooks: FuseHooks,
    ) -> Result<Var> {
        let (queries, lm_slots) = match priors {
            Some(f_r) => {
                let q_slots = self.prior_to_q.forward(tape, st, f_r)?;
                let w = self.fusion.embed(tape, st, ids, OBJ, Some(q_slots))?;
                let r = self.fusion.fuse_refine(tape, st, &w, fp, hooks)?;
                let lm_slots = match r.priors {
                    Some(p) => Some(self.prior_to_lm.forward(tape, st, p)?),
                    None => None,
                };
                (r.queries, lm_slots)
            }
            None => {
                let w = self.fusion.embed(tape, st, ids, OBJ, None)?;
                (self.fusion.fuse(tape, st, &w, fp, hooks)?.queries, None)
            }
        };
        let vis = self.vis_proj.forward(tape, st, queries)?;
        let text = self.lm.embed_instruction(tape, st, ids, lm_slots)?;
        Ok(tape.concat_rows(&[vis, text])?)
    }

    /// Teacher-forced pass of one stage on `tape`, reading weights from `st`
    /// (normally `self.store`).
    pub fn stage_forward(&self, st: &ParamStore, tape: &mut Tape, fp: Var, input: &StageInput) -> Result<StageVars> {
        let priors = if input.prior_masks.is_empty() {
            None
        } else {
            Some(mask_pool_var(tape, fp, &input.prior_masks)?)
        };
        let prefix = self.prefix(st, tape, &input.instruction, priors, fp, FuseHooks::default())?;
        let tf = self.lm.forward_teacher_forced(tape, st, prefix, &input.targets)?;
        let segs: Vec<usize> = input.targets.iter().enumerate().filter(|(_, &t)| t == SEG).map(|(i, _)| i).collect();
        if segs.len() != input.seg_targets.len() {
            return Err(Error::Data(format!(
                "{} [SEG] tokens in the target but {} ground-truth masks",
                segs.len(),
                input.seg_targets.len()
            )));
        }
        let mask_logits = if segs.is_empty() {
            None
        } else {
            let h = tape.embedding_lookup(tf.hidden, &segs)?;
            self.maskhead.decode(tape, st, h, fp, DecodeHooks::default())?
        };
        Ok(StageVars { logits: tf.logits, mask_logits })
    }

    /// Teacher-forced stages for one sample under `mode`. `prior_ids` are the
    /// (possibly augmented) related objects fed to Step 2.
    pub fn stage_inputs(
        &self,
        rec: &SceneRecord,
        sample: &ReasonSample,
        mode: PipelineMode,
        prior_ids: &[u32],
    ) -> Result<Vec<StageInput>> {
        let scene = &rec.scene;
        let relevant = sample.relevant_ids();
        let cats = |ids: &[u32]| -> Vec<String> {
            ids.iter().filter_map(|&i| scene.object(i)).map(|o| o.category.clone()).collect()
        };
        let masks = |ids: &[u32]| gt_superpoint_masks(&rec.sp_labels, ids);
        let k = sample.target_instance_ids.len();
        let q = sample.question.as_str();
        let make = |stage: Stage, instr: Vec<String>, prior_masks, response: String, seg_targets| StageInput {
            stage,
            instruction: self.encode_ids(&instr),
            prior_masks,
            targets: self.target_ids(&response),
            seg_targets,
        };
        let step1 = || -> Result<StageInput> {
            let instr = render_instruction(&InstructionTemplate::step1(), q, &PriorBlock::None)?;
            Ok(make(Stage::Step1, instr, vec![], step1_response(&cats(&relevant)), masks(&relevant)))
        };
        let final_masks = masks(&sample.target_instance_ids);
        let priors: Vec<u32> = prior_ids.iter().copied().take(self.cfg.max_priors).collect();
        Ok(match mode {
            PipelineMode::Baseline => {
                let instr = render_instruction(&InstructionTemplate::plain(), q, &PriorBlock::None)?;
                vec![make(Stage::Plain, instr, vec![], final_response(&sample.answer, k), final_masks)]
            }
            PipelineMode::WoPr => {
                let instr = render_instruction(&InstructionTemplate::combined(), q, &PriorBlock::None)?;
                let mut seg = masks(&relevant);
                seg.extend(final_masks);
                vec![make(Stage::Combined, instr, vec![], combined_response(&cats(&relevant), &sample.answer, k), seg)]
            }
            PipelineMode::TextBased => {
                let instr = render_instruction(&InstructionTemplate::step2(), q, &PriorBlock::Words(cats(&priors)))?;
                vec![step1()?, make(Stage::Step2, instr, vec![], final_response(&sample.answer, k), final_masks)]
            }
            PipelineMode::FullR2s => {
                let instr = render_instruction(&InstructionTemplate::step2(), q, &PriorBlock::Slots(priors.len()))?;
                vec![step1()?, make(Stage::Step2, instr, masks(&priors), final_response(&sample.answer, k), final_masks)]
            }
        })
    }

    /// Response token ids followed by EOS.
    pub fn target_ids(&self, response: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(response);
        ids.push(langmodel::EOS);
        ids
    }

    fn run_step(&self, fp: &Tensor, ids: &[usize], priors: Option<&Tensor>) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let fpv = tape.constant(fp.clone())?;
        let pv = match priors {
            Some(p) if p.rows() > 0 => Some(tape.constant(p.clone())?),
            _ => None,
        };
        let prefix = self.prefix(&self.store, &mut tape, ids, pv, fpv, FuseHooks::default())?;
        let generation = self.lm.generate(&self.store, tape.value(prefix), self.cfg.max_new_tokens)?;
        let h = extract_seg_states(&generation);
        let masks = self.maskhead.decode_values(&self.store, &h, fp, DecodeHooks::default())?;
        let tokens = generation.token_ids.iter().map(|&t| self.vocab.token(t).to_string()).collect();
        Ok(StepOutput { generation, tokens, masks })
    }

    /// Super-point features as plain values.
    pub fn scene_feature_values(&self, rec: &SceneRecord) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fp = self.scene_features(&self.store, &mut tape, rec)?;
        Ok(tape.value(fp).clone())
    }

    /// Runs the pipeline for one question.
    pub fn infer(&self, rec: &SceneRecord, question: &str, mode: PipelineMode, source: &PriorSource) -> Result<Inference> {
        let fp = self.scene_feature_values(rec)?;
        self.infer_with_features(rec, &fp, question, mode, source)
    }

    pub fn infer_with_features(
        &self,
        rec: &SceneRecord,
        fp: &Tensor,
        question: &str,
        mode: PipelineMode,
        source: &PriorSource,
    ) -> Result<Inference> {
        let single = |stage: Stage| -> Result<StepOutput> {
            let instr = render_instruction(&InstructionTemplate::for_stage(stage), question, &PriorBlock::None)?;
            self.run_step(fp, &self.encode_ids(&instr), None)
        };
        match mode {
            PipelineMode::Baseline => {
                let out = single(Stage::Plain)?;
                Ok(Inference {
                    mode,
                    answer: extract_answer(&out.tokens),
                    final_masks: out.masks.clone(),
                    final_step: out,
                    step1: None,
                    n_priors: 0,
                    prior_fallback: vec![],
                })
            }
            PipelineMode::WoPr => {
                let out = single(Stage::Combined)?;
                let start = answer_seg_start(&out.tokens).min(out.masks.count());
                let rows: Vec<Vec<f64>> = out.masks.logits.to_rows().split_off(start);
                let final_masks = SegMask::new(Tensor::matrix(rows.len(), fp.rows(), rows.concat())?);
                Ok(Inference {
                    mode,
                    answer: extract_answer(&out.tokens),
                    n_priors: start,
                    final_masks,
                    final_step: out,
                    step1: None,
                    prior_fallback: vec![],
                })
            }
            PipelineMode::TextBased | PipelineMode::FullR2s => {
                let (step1, prior_probs, words) = match source {
                    PriorSource::Predicted => {
                        let s1 = single(Stage::Step1)?;
                        let mut probs = s1.masks.probs();
                        let mut words = seg_categories(&s1.tokens);
                        probs.truncate(self.cfg.max_priors);
                        words.truncate(self.cfg.max_priors);
                        (Some(s1), probs, words)
                    }
                    PriorSource::Oracle(ids) => {
                        let ids: Vec<u32> = ids.iter().copied().take(self.cfg.max_priors).collect();
                        let words = ids.iter().filter_map(|&i| rec.scene.object(i)).map(|o| o.category.clone()).collect();
                        (None, gt_superpoint_masks(&rec.sp_labels, &ids), words)
                    }
                };
                let (block, priors, fallback) = if mode == PipelineMode::FullR2s {
                    let pooled = mask_pool(fp, &prior_probs)?;
                    (PriorBlock::Slots(prior_probs.len()), Some(pooled.rows), pooled.fallback)
                } else {
                    (PriorBlock::Words(words), None, vec![])
                };
                let n_priors = prior_probs.len();
                let instr = render_instruction(&InstructionTemplate::step2(), question, &block)?;
                let out = self.run_step(fp, &self.encode_ids(&instr), priors.as_ref())?;
                Ok(Inference {
                    mode,
                    answer: extract_answer(&out.tokens),
                    final_masks: out.masks.clone(),
                    final_step: out,
                    step1,
                    n_priors,
                    prior_fallback: fallback,
                })
            }
        }
    }
}

/// One line of inference output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceRecord {
    pub sample_id: String,
    pub scene_id: String,
    pub question: String,
    pub mode: PipelineMode,
    pub answer: String,
    /// Super-point index lists of the Step-1 masks.
    pub step1_masks: Vec<Vec<usize>>,
    pub final_masks: Vec<Vec<usize>>,
    pub n_priors: usize,
}

impl InferenceRecord {
    pub fn from_inference(sample_id: &str, scene_id: &str, question: &str, inf: &Inference) -> Self {
        Self {
            sample_id: sample_id.into(),
            scene_id: scene_id.into(),
            question: question.into(),
            mode: inf.mode,
            answer: inf.answer.clone(),
            step1_masks: inf.step1.as_ref().map(|s| s.masks.binary()).unwrap_or_default(),
            final_masks: inf.final_masks.binary(),
            n_priors: inf.n_priors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(t: &[String]) -> String {
        t.join(" ")
    }

    #[test]
    fn step1_wording() {
        let t = render_instruction(&InstructionTemplate::step1(), "where is the chair", &PriorBlock::None).unwrap();
        assert_eq!(
            words(&t),
            "in this 3d scene , where is the chair . first mark every object that could matter for this question ."
        );
    }

    #[test]
    fn step2_slot_counts() {
        let t = render_instruction(&InstructionTemplate::step2(), "q?", &PriorBlock::Slots(3)).unwrap();
        assert_eq!(t.iter().filter(|w| *w == "<OBJ>").count(), 3);
        let t = render_instruction(&InstructionTemplate::step2(), "q?", &PriorBlock::Slots(0)).unwrap();
        assert!(t.windows(2).any(|w| w[0] == ":" && w[1] == "none"));
        assert!(!t.contains(&"<OBJ>".to_string()));
    }

    #[test]
    fn priors_rejected_outside_step2() {
        assert!(render_instruction(&InstructionTemplate::step1(), "q", &PriorBlock::Slots(1)).is_err());
    }

    #[test]
    fn unknown_placeholder_rejected() {
        let t = InstructionTemplate::new(Stage::Plain, "[QUESTION] [ANSWER]");
        assert!(matches!(render_instruction(&t, "q", &PriorBlock::None), Err(Error::Config(_))));
    }

    #[test]
    fn response_parsing() {
        let r = langmodel::tokenize(&combined_response(&["door".into(), "chair".into()], "the red chair", 1));
        assert_eq!(answer_seg_start(&r), 2);
        assert_eq!(extract_answer(&r), "the red chair");
        let s = langmodel::tokenize(&step1_response(&["door".into(), "chair".into()]));
        assert_eq!(seg_categories(&s), ["door", "chair"]);
        assert_eq!(extract_answer(&langmodel::tokenize(&final_response("the bed", 1))), "the bed");
    }

    #[test]
    fn soft_mask_pool_hand_value() {
        let fp = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = mask_pool(&fp, &[vec![0.2, 0.8]]).unwrap();
        assert!((out.rows.get(0, 0) - 0.2).abs() < 1e-15);
        assert!((out.rows.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_falls_back_to_mean() {
        let fp = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap();
        let out = mask_pool(&fp, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(out.rows.row(0), &[2.0, 1.0]);
        assert_eq!(out.fallback, vec![true]);
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in PipelineMode::ALL {
            assert_eq!(m.as_str().parse::<PipelineMode>().unwrap(), m);
        }
        assert!("nope".parse::<PipelineMode>().is_err());
    }
}
