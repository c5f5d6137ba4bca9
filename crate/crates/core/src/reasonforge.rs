//! Template-driven reasoning samples over synthetic scenes, the rule-based
//! filter chain that vets them, and corpus statistics.
//!
//! Reasoning steps follow a small grammar the filters parse back:
//!
//! * `find the <anchor> .` names the reference object,
//! * `list every <category|object used for ...> .` names the candidates,
//! * the last step names the target.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scenekit::{centroid_distance, ReasonSample, ReasonStep, Scene, SceneObject};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Near,
    SuperlativeSize,
    SuperlativeDistance,
    Functional,
    Attribute,
}

impl RelationKind {
    pub const ALL: [RelationKind; 5] =
        [Self::Near, Self::SuperlativeSize, Self::SuperlativeDistance, Self::Functional, Self::Attribute];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub kind: RelationKind,
    /// Distance bound for `near`, in metres.
    pub tau_near: f64,
    /// Relative gap a superlative winner must keep over the runner-up.
    pub min_margin: f64,
}

impl RelationSpec {
    pub fn new(kind: RelationKind) -> Self {
        Self { kind, tau_near: 2.0, min_margin: 0.1 }
    }

    pub fn all() -> Vec<RelationSpec> {
        RelationKind::ALL.into_iter().map(Self::new).collect()
    }
}

/// Verb phrase for each function group.
pub fn function_phrase(function: &str) -> Option<&'static str> {
    Some(match function {
        "sitting" => "sit down",
        "sleeping" => "take a nap",
        "eating" => "have a meal",
        "working" => "do some work",
        "storing" => "store my things",
        "lighting" => "get more light",
        "entering" => "leave the room",
        "watching" => "watch the news",
        "decorating" => "look at something green",
        _ => return None,
    })
}

/// Function group of a category under the default palette.
pub fn category_function(category: &str) -> Option<&'static str> {
    Some(match category {
        "chair" | "sofa" => "sitting",
        "bed" => "sleeping",
        "table" => "eating",
        "desk" => "working",
        "cabinet" | "bookshelf" => "storing",
        "lamp" => "lighting",
        "door" => "entering",
        "television" => "watching",
        "plant" => "decorating",
        _ => return None,
    })
}

fn answer_phrase(o: &SceneObject) -> String {
    match o.color() {
        Some(c) => format!("the {c} {}", o.category),
        None => format!("the {}", o.category),
    }
}

fn by_x(scene: &Scene, ids: &mut [u32]) {
    ids.sort_by(|a, b| {
        let xa = scene.object(*a).map_or(0.0, |o| o.centroid[0]);
        let xb = scene.object(*b).map_or(0.0, |o| o.centroid[0]);
        xa.partial_cmp(&xb).unwrap().then(a.cmp(b))
    });
}

fn step(text: String, ids: Vec<u32>) -> ReasonStep {
    ReasonStep { text, relevant_instance_ids: ids }
}

fn sample(scene: &Scene, question: String, steps: Vec<ReasonStep>, target: &SceneObject) -> ReasonSample {
    ReasonSample {
        scene_id: scene.scene_id.clone(),
        question,
        reasoning_steps: steps,
        answer: answer_phrase(target),
        target_instance_ids: vec![target.instance_id],
    }
}

/// Objects of `category`, or `None` unless exactly one exists.
fn unique<'a>(scene: &'a Scene, category: &str) -> Option<&'a SceneObject> {
    let mut it = scene.objects.iter().filter(|o| o.category == category);
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

/// Index of the strict winner of `score` (largest) if it beats the runner-up
/// by the relative `margin`.
fn strict_best(scores: &[f64], margin: f64) -> Option<usize> {
    if scores.len() < 2 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let (best, second) = (scores[idx[0]], scores[idx[1]]);
    (best > second && best - second >= margin * best.abs().max(1e-12)).then_some(idx[0])
}

/// Every sample the scene supports for one spec, in a fixed order.
pub fn candidates_for(scene: &Scene, spec: &RelationSpec) -> Vec<ReasonSample> {
    let mut out = Vec::new();
    let mut categories: Vec<&str> = scene.objects.iter().map(|o| o.category.as_str()).collect();
    categories.sort_unstable();
    categories.dedup();
    let of_cat = |c: &str| -> Vec<&SceneObject> { scene.objects.iter().filter(|o| o.category == c).collect() };
    let mut functions: Vec<&str> = scene.objects.iter().filter_map(|o| category_function(&o.category)).collect();
    functions.sort_unstable();
    functions.dedup();
    let of_fn = |f: &str| -> Vec<&SceneObject> {
        scene.objects.iter().filter(|o| category_function(&o.category) == Some(f)).collect()
    };
    let ids = |objs: &[&SceneObject]| -> Vec<u32> {
        let mut v: Vec<u32> = objs.iter().map(|o| o.instance_id).collect();
        by_x(scene, &mut v);
        v
    };
    match spec.kind {
        RelationKind::Near => {
            for &f in &functions {
                let cands = of_fn(f);
                for &a in &categories {
                    let Some(anchor) = unique(scene, a) else { continue };
                    if category_function(a) == Some(f) {
                        continue;
                    }
                    let near: Vec<&&SceneObject> =
                        cands.iter().filter(|o| centroid_distance(o, anchor) <= spec.tau_near).collect();
                    // one candidate inside the radius, at least one clearly outside
                    let far = cands.iter().filter(|o| centroid_distance(o, anchor) > spec.tau_near * 1.25).count();
                    if near.len() != 1 || far == 0 || far + 1 != cands.len() {
                        continue;
                    }
                    let t = *near[0];
                    let phrase = function_phrase(f).unwrap();
                    out.push(sample(
                        scene,
                        format!("i want to {phrase} near the {a} , which object should i use ?"),
                        vec![
                            step(format!("find the {a} ."), vec![anchor.instance_id]),
                            step(format!("list every object used for {f} ."), ids(&cands)),
                            step(format!("only the {} is near the {a} .", t.category), vec![t.instance_id]),
                        ],
                        t,
                    ));
                }
            }
        }
        RelationKind::SuperlativeDistance => {
            for &c in &categories {
                let cands = of_cat(c);
                if cands.len() < 2 {
                    continue;
                }
                for &a in &categories {
                    let Some(anchor) = unique(scene, a) else { continue };
                    if a == c {
                        continue;
                    }
                    let neg: Vec<f64> = cands.iter().map(|o| -centroid_distance(o, anchor)).collect();
                    let Some(w) = strict_best(&neg, spec.min_margin) else { continue };
                    let t = cands[w];
                    out.push(sample(
                        scene,
                        format!("which {c} is the closest to the {a} ?"),
                        vec![
                            step(format!("find the {a} ."), vec![anchor.instance_id]),
                            step(format!("list every {c} ."), ids(&cands)),
                            step(format!("the {c} nearest to the {a} is the target ."), vec![t.instance_id]),
                        ],
                        t,
                    ));
                }
            }
        }
        RelationKind::SuperlativeSize => {
            for &c in &categories {
                let cands = of_cat(c);
                if cands.len() < 2 {
                    continue;
                }
                let vols: Vec<f64> = cands.iter().map(|o| o.volume()).collect();
                let Some(w) = strict_best(&vols, spec.min_margin) else { continue };
                let t = cands[w];
                out.push(sample(
                    scene,
                    format!("which {c} is the largest in the room ?"),
                    vec![
                        step(format!("list every {c} ."), ids(&cands)),
                        step(format!("the largest {c} is the target ."), vec![t.instance_id]),
                    ],
                    t,
                ));
            }
        }
        RelationKind::Functional => {
            for &f in &functions {
                let cands = of_fn(f);
                if cands.len() != 1 {
                    continue;
                }
                let t = cands[0];
                let phrase = function_phrase(f).unwrap();
                out.push(sample(
                    scene,
                    format!("i want to {phrase} , which object should i use ?"),
                    vec![step(format!("the {} is the only object used for {f} .", t.category), vec![t.instance_id])],
                    t,
                ));
            }
        }
        RelationKind::Attribute => {
            for &c in &categories {
                let cands = of_cat(c);
                if cands.len() < 2 {
                    continue;
                }
                for color in cands.iter().filter_map(|o| o.color()) {
                    let hits: Vec<&&SceneObject> = cands.iter().filter(|o| o.color() == Some(color)).collect();
                    if hits.len() != 1 {
                        continue;
                    }
                    let t = *hits[0];
                    out.push(sample(
                        scene,
                        format!("which {c} in the room is {color} ?"),
                        vec![
                            step(format!("list every {c} ."), ids(&cands)),
                            step(format!("the {color} one is the target ."), vec![t.instance_id]),
                        ],
                        t,
                    ));
                }
            }
        }
    }
    out
}

/// Samples for one scene: every supported instance of every spec, shuffled,
/// with at most `per_scene` kept (0 keeps all). Distinct questions only.
pub fn synthesize<R: Rng>(scene: &Scene, specs: &[RelationSpec], per_scene: usize, rng: &mut R) -> Vec<ReasonSample> {
    let mut all: Vec<ReasonSample> = specs.iter().flat_map(|s| candidates_for(scene, s)).collect();
    let mut seen = std::collections::HashSet::new();
    all.retain(|s| seen.insert(s.question.clone()));
    all.shuffle(rng);
    if per_scene > 0 {
        all.truncate(per_scene);
    }
    all
}

// ---- filter chain ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    AmbiguousPhrase,
    NearDistance,
    Superlative,
    Structure,
    NonexistentObject,
    RelevantCap,
    Redundancy,
    Conflict,
}

impl FilterRule {
    pub const ORDER: [FilterRule; 8] = [
        Self::AmbiguousPhrase,
        Self::NearDistance,
        Self::Superlative,
        Self::Structure,
        Self::NonexistentObject,
        Self::RelevantCap,
        Self::Redundancy,
        Self::Conflict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AmbiguousPhrase => "ambiguous_phrase",
            Self::NearDistance => "near_distance",
            Self::Superlative => "superlative",
            Self::Structure => "structure",
            Self::NonexistentObject => "nonexistent_object",
            Self::RelevantCap => "relevant_cap",
            Self::Redundancy => "redundancy",
            Self::Conflict => "conflict",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ORDER.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub ambiguous_phrases: Vec<String>,
    pub tau_near: f64,
    pub max_relevant: usize,
    /// Relative margin a superlative target must hold over the runner-up.
    pub superlative_margin: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            ambiguous_phrases: vec!["in the right of".into(), "in the left of".into()],
            tau_near: 2.0,
            max_relevant: 8,
            superlative_margin: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept: usize,
    pub dropped_by_rule: BTreeMap<String, usize>,
}

impl FilterReport {
    pub fn conserved(&self) -> bool {
        self.kept + self.dropped_by_rule.values().sum::<usize>() == self.input_count
    }
}

/// Parsed reasoning roles of a sample.
struct Roles {
    anchor: Vec<u32>,
    candidates: Vec<u32>,
    target_step: Vec<u32>,
}

fn roles(s: &ReasonSample) -> Roles {
    let find = |prefix: &str| {
        s.reasoning_steps
            .iter()
            .find(|st| st.text.starts_with(prefix))
            .map(|st| st.relevant_instance_ids.clone())
            .unwrap_or_default()
    };
    Roles {
        anchor: find("find the "),
        candidates: find("list every "),
        target_step: s.reasoning_steps.last().map(|st| st.relevant_instance_ids.clone()).unwrap_or_default(),
    }
}

fn all_present(scene: &Scene, ids: &[u32]) -> bool {
    ids.iter().all(|&i| scene.has(i))
}

fn is_superlative_distance(q: &str) -> bool {
    q.contains("closest") || q.contains("nearest") || q.contains("farthest")
}

fn is_superlative_size(q: &str) -> bool {
    q.contains("largest") || q.contains("smallest")
}

/// The first rule `s` violates, if any.
pub fn classify(s: &ReasonSample, scene: Option<&Scene>, cfg: &FilterConfig) -> Option<FilterRule> {
    let q = s.question.to_lowercase();
    if cfg.ambiguous_phrases.iter().any(|p| q.contains(&p.to_lowercase())) {
        return Some(FilterRule::AmbiguousPhrase);
    }
    let r = roles(s);
    let resolved = |ids: &[u32]| -> Option<Vec<&SceneObject>> {
        let sc = scene?;
        (!ids.is_empty()).then_some(())?;
        ids.iter().map(|&i| sc.object(i)).collect()
    };
    let targets = resolved(&s.target_instance_ids);
    if q.contains(" near the ") && !is_superlative_distance(&q) {
        if let (Some(a), Some(t)) = (resolved(&r.anchor), targets.as_ref()) {
            if t.iter().any(|t| a.iter().any(|a| centroid_distance(t, a) > cfg.tau_near)) {
                return Some(FilterRule::NearDistance);
            }
        }
    }
    if is_superlative_distance(&q) || is_superlative_size(&q) {
        if let (Some(c), Some(t)) = (resolved(&r.candidates), targets.as_ref()) {
            let scores: Option<Vec<f64>> = if is_superlative_size(&q) {
                let sign = if q.contains("smallest") { -1.0 } else { 1.0 };
                Some(c.iter().map(|o| sign * o.volume()).collect())
            } else {
                resolved(&r.anchor).and_then(|a| a.first().copied()).map(|a| {
                    let sign = if q.contains("farthest") { 1.0 } else { -1.0 };
                    c.iter().map(|o| sign * centroid_distance(o, a)).collect()
                })
            };
            if let Some(scores) = scores {
                let ok = t.len() == 1
                    && strict_best(&scores, cfg.superlative_margin).map(|w| c[w].instance_id) == Some(t[0].instance_id);
                if !ok {
                    return Some(FilterRule::Superlative);
                }
            }
        }
    }
    let structure_ok = !s.question.trim().is_empty()
        && s.question.trim_end().ends_with('?')
        && !s.answer.trim().is_empty()
        && !s.reasoning_steps.is_empty()
        && s.reasoning_steps.iter().all(|st| !st.text.trim().is_empty() && !st.relevant_instance_ids.is_empty())
        && !s.target_instance_ids.is_empty()
        && s.target_instance_ids.iter().all(|t| r.target_step.contains(t));
    if !structure_ok {
        return Some(FilterRule::Structure);
    }
    let Some(sc) = scene.filter(|sc| sc.scene_id == s.scene_id) else {
        return Some(FilterRule::NonexistentObject);
    };
    if !all_present(sc, &s.target_instance_ids) || !all_present(sc, &s.relevant_ids()) {
        return Some(FilterRule::NonexistentObject);
    }
    let mut involved = s.relevant_ids();
    for t in &s.target_instance_ids {
        if !involved.contains(t) {
            involved.push(*t);
        }
    }
    if involved.len() > cfg.max_relevant {
        return Some(FilterRule::RelevantCap);
    }
    for (i, a) in s.reasoning_steps.iter().enumerate() {
        let mut x = a.relevant_instance_ids.clone();
        x.sort_unstable();
        for b in &s.reasoning_steps[i + 1..] {
            let mut y = b.relevant_instance_ids.clone();
            y.sort_unstable();
            if x == y {
                return Some(FilterRule::Redundancy);
            }
        }
        let mut dedup = x.clone();
        dedup.dedup();
        if dedup.len() != x.len() {
            return Some(FilterRule::Redundancy);
        }
    }
    let answer = s.answer.to_lowercase();
    let conflict = s.target_instance_ids.iter().any(|t| {
        let o = sc.object(*t).expect("checked above");
        r.anchor.contains(t) || !answer.split_whitespace().any(|w| w == o.category)
    });
    if conflict {
        return Some(FilterRule::Conflict);
    }
    None
}

/// Applies the rules in order; the first violated rule takes the drop.
pub fn filter_chain(
    samples: &[ReasonSample],
    scenes: &HashMap<&str, &Scene>,
    cfg: &FilterConfig,
) -> (Vec<ReasonSample>, FilterReport) {
    let mut dropped: BTreeMap<String, usize> = FilterRule::ORDER.iter().map(|r| (r.as_str().to_string(), 0)).collect();
    let mut kept = Vec::new();
    for s in samples {
        match classify(s, scenes.get(s.scene_id.as_str()).copied(), cfg) {
            Some(rule) => *dropped.get_mut(rule.as_str()).unwrap() += 1,
            None => kept.push(s.clone()),
        }
    }
    let report = FilterReport { input_count: samples.len(), kept: kept.len(), dropped_by_rule: dropped };
    (kept, report)
}

// ---- statistics and splits -------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub avg_words: f64,
    pub avg_objects: f64,
    /// Set when the input was empty and the averages are placeholders.
    pub empty: bool,
}

/// Reference row for the real benchmark: train/val sizes, average question
/// words and average objects per sample. Documentation only.
pub const REFERENCE_STATS: (usize, usize, f64, f64) = (25_185, 3_966, 19.6, 5.4);

pub fn dataset_stats(samples: &[ReasonSample]) -> DatasetStats {
    if samples.is_empty() {
        log::warn!("dataset_stats on an empty corpus");
        return DatasetStats { count: 0, avg_words: 0.0, avg_objects: 0.0, empty: true };
    }
    let n = samples.len() as f64;
    let words: usize = samples.iter().map(|s| s.question.split_whitespace().count()).sum();
    let objects: usize = samples
        .iter()
        .map(|s| {
            let mut ids = s.relevant_ids();
            ids.extend(&s.target_instance_ids);
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        })
        .sum();
    DatasetStats { count: samples.len(), avg_words: words as f64 / n, avg_objects: objects as f64 / n, empty: false }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Scene-disjoint split with `round(val_fraction * n)` validation scenes (at
/// least one when there are two or more scenes).
pub fn split_scenes<R: Rng>(scene_ids: &[String], val_fraction: f64, rng: &mut R) -> Split {
    let mut ids = scene_ids.to_vec();
    ids.shuffle(rng);
    let n = ids.len();
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = ids.split_off(n - n_val);
    let mut train = ids;
    let mut val = val;
    train.sort();
    val.sort();
    Split { train, val }
}
