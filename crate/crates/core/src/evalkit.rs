//! Mask metrics (gIoU, Acc@k) and answer-text metrics (BLEU-4, ROUGE-L).

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::maskhead::to_point_mask;
use crate::nncore::Tensor;
use crate::r2s::{Inference, InferenceRecord, PipelineMode, PriorSource, R2sModel};
use crate::scenekit::{index_scenes, ReasonSample, SceneRecord};
use crate::{Error, Result};

/// Predicted and ground-truth point sets for one sample, plus answer texts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    /// One point-id list per predicted mask; scored as their union.
    pub pred_points: Vec<Vec<usize>>,
    pub gt_points: Vec<Vec<usize>>,
    pub pred_text: String,
    pub gt_texts: Vec<String>,
}

impl EvalRecord {
    /// IoU of the union of predictions against the union of ground truths.
    /// Two empty sets score 1.
    pub fn iou(&self) -> f64 {
        let p: BTreeSet<usize> = self.pred_points.iter().flatten().copied().collect();
        let g: BTreeSet<usize> = self.gt_points.iter().flatten().copied().collect();
        iou(&p, &g)
    }
}

pub fn iou(p: &BTreeSet<usize>, g: &BTreeSet<usize>) -> f64 {
    let inter = p.intersection(g).count();
    let union = p.len() + g.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairwise summation, so the result does not depend on how a long record
/// list is chunked.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

fn sorted_ious(records: &[EvalRecord]) -> Vec<f64> {
    let mut v: Vec<f64> = records.iter().map(EvalRecord::iou).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Mean per-sample IoU; 0 for no records.
pub fn giou(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    pairwise_sum(&sorted_ious(records)) / records.len() as f64
}

/// Fraction of records whose IoU is strictly above each threshold.
pub fn acc_at(records: &[EvalRecord], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let ious: Vec<f64> = records.iter().map(EvalRecord::iou).collect();
    thresholds
        .iter()
        .map(|&t| {
            let hit = ious.iter().filter(|&&u| u > t).count();
            (t, if ious.is_empty() { 0.0 } else { hit as f64 / ious.len() as f64 })
        })
        .collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Smoothing added to zero n-gram matches.
pub const BLEU_EPS: f64 = 1e-9;

/// Sentence BLEU-4 with clipped precisions, `eps` smoothing of zero matches
/// and the brevity penalty against the closest reference length. No shared
/// unigram at all scores exactly 0.
pub fn bleu4(pred: &str, refs: &[String]) -> f64 {
    let hyp = words(pred);
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = refs.iter().map(|r| words(r)).collect();
    let mut log_p = 0.0;
    for n in 1..=4 {
        let h = ngram_counts(&hyp, n);
        let total: usize = h.values().sum();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        if n == 1 && matched == 0 {
            return 0.0;
        }
        let p = if total == 0 {
            BLEU_EPS
        } else if matched == 0 {
            BLEU_EPS / total as f64
        } else {
            matched as f64 / total as f64
        };
        log_p += p.ln() / 4.0;
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - c as i64).abs(), l))
        .unwrap_or(0);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure with `beta = 1.2`, taking the best precision and the
/// best recall over the references.
pub fn rouge_l(pred: &str, refs: &[String]) -> f64 {
    let hyp = words(pred);
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in refs {
        let r = words(r);
        if r.is_empty() {
            continue;
        }
        let l = lcs(&hyp, &r) as f64;
        p_max = p_max.max(l / hyp.len() as f64);
        r_max = r_max.max(l / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub giou: f64,
    pub acc25: f64,
    pub acc50: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub n: usize,
}

pub fn compute_metrics(records: &[EvalRecord]) -> Metrics {
    let acc = acc_at(records, &[0.25, 0.5]);
    let n = records.len();
    let mean = |f: &dyn Fn(&EvalRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            pairwise_sum(&records.iter().map(f).collect::<Vec<_>>()) / n as f64
        }
    };
    Metrics {
        giou: giou(records),
        acc25: acc[0].1,
        acc50: acc[1].1,
        bleu4: mean(&|r| bleu4(&r.pred_text, &r.gt_texts)),
        rouge_l: mean(&|r| rouge_l(&r.pred_text, &r.gt_texts)),
        n,
    }
}

/// Samples carry no id of their own; they are named by their line index.
pub fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

/// Scores one inference: final masks lifted to points against the
/// per-instance target point sets.
pub fn eval_record(id: &str, rec: &SceneRecord, sample: &ReasonSample, inf: &Inference) -> EvalRecord {
    EvalRecord {
        sample_id: id.to_string(),
        pred_points: to_point_mask(&inf.final_masks, &rec.superpoints),
        gt_points: sample.target_instance_ids.iter().map(|&i| rec.cloud.points_of(&[i])).collect(),
        pred_text: inf.answer.clone(),
        gt_texts: vec![sample.answer.clone()],
    }
}

/// Runs `mode` over `(line index, sample)` pairs, computing scene features
/// once per scene. With `oracle_priors`, Step 2 receives the ground-truth
/// related objects.
pub fn evaluate(
    model: &R2sModel,
    scenes: &[SceneRecord],
    samples: &[(usize, &ReasonSample)],
    mode: PipelineMode,
    oracle_priors: bool,
) -> Result<(Vec<EvalRecord>, Vec<InferenceRecord>)> {
    let index = index_scenes(scenes);
    let mut cache: HashMap<&str, Tensor> = HashMap::new();
    let mut evals = Vec::with_capacity(samples.len());
    let mut infs = Vec::with_capacity(samples.len());
    for &(i, s) in samples {
        let id = sample_id(i);
        let rec = *index
            .get(s.scene_id.as_str())
            .ok_or_else(|| Error::Data(format!("sample {id} names unknown scene {}", s.scene_id)))?;
        let key = rec.scene.scene_id.as_str();
        if !cache.contains_key(key) {
            cache.insert(key, model.scene_feature_values(rec)?);
        }
        let source = if oracle_priors { PriorSource::Oracle(s.relevant_ids()) } else { PriorSource::Predicted };
        let inf = model.infer_with_features(rec, &cache[key], &s.question, mode, &source)?;
        evals.push(eval_record(&id, rec, s, &inf));
        infs.push(InferenceRecord::from_inference(&id, &s.scene_id, &s.question, &inf));
    }
    Ok((evals, infs))
}
