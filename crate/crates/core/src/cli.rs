//! Run configuration, corpus directories and the `gen`, `train`, `eval`,
//! `infer` and `ablate` commands behind the `r2seg` binary.
//!
//! Every command writes its artifacts under `--out` together with the
//! effective configuration (`config.toml`) and a `manifest.json` listing
//! SHA-256 hashes of inputs and outputs. Manifests carry no timestamps or
//! absolute paths, so reruns with the same configuration and seed reproduce
//! them byte for byte.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evalkit::{compute_metrics, evaluate, EvalRecord, Metrics};
use crate::langmodel::Vocabulary;
use crate::maskhead::superpoints_to_points;
use crate::r2s::{InferenceRecord, ModelConfig, PipelineMode, PriorSource, R2sModel};
use crate::reasonforge::{
    dataset_stats, filter_chain, split_scenes, synthesize, DatasetStats, FilterConfig, FilterReport, RelationKind,
    RelationSpec, Split,
};
use crate::scenekit::{
    generate_scene, read_samples, read_scenes, write_samples, write_scenes, ReasonSample, Scene, SceneRecord, SceneSpec,
    DEFAULT_CELL,
};
use crate::trainer::{load_checkpoint, save_checkpoint, train, write_trace_csv, AugmentConfig, LossConfig, TraceRow, TrainConfig};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const REPORT_FILE: &str = "filter_report.json";
pub const STATS_FILE: &str = "stats.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "trace.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

// ---- configuration ---------------------------------------------------------

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    /// Samples synthesised per scene before filtering.
    pub per_scene: usize,
    pub points: usize,
    /// Super-point voxel size in metres.
    pub cell: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub val_fraction: f64,
    pub relations: Vec<RelationKind>,
    pub tau_near: f64,
    pub min_margin: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = SceneSpec::default();
        let rel = RelationSpec::new(RelationKind::Near);
        Self {
            scenes: 200,
            per_scene: 4,
            points: 2048,
            cell: DEFAULT_CELL,
            min_objects: spec.min_objects,
            max_objects: spec.max_objects,
            val_fraction: 0.15,
            relations: RelationKind::ALL.to_vec(),
            tau_near: rel.tau_near,
            min_margin: rel.min_margin,
        }
    }
}

/// Optimisation settings; seed and mode live at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub freeze_lm: bool,
    pub freeze_backbone: bool,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            freeze_lm: t.freeze_lm,
            freeze_backbone: t.freeze_backbone,
            loss: t.loss,
            augment: t.augment,
        }
    }
}

/// Everything a command needs, loaded from an optional TOML file and then
/// overridden by flags and `--set key=value` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: PipelineMode,
    pub data: DataConfig,
    pub filter: FilterConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: PipelineMode::FullR2s,
            data: DataConfig::default(),
            filter: FilterConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
        }
    }
}

fn config_err(what: impl std::fmt::Display) -> Error {
    Error::Config(what.to_string())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `key=value` overrides with dotted keys such as
    /// `train.loss.lambda_txt=1.0`. Values are read as TOML literals and
    /// fall back to plain strings. Unknown keys are rejected.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut root = toml::Value::try_from(&*self).expect("config serialises");
        for set in sets {
            let (key, raw) = set.split_once('=').ok_or_else(|| config_err(format!("override {set:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (depth, part) in parts.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| config_err(format!("{key}: not a section")))?;
                let slot = table.get_mut(*part).ok_or_else(|| config_err(format!("unknown config key {key:?}")))?;
                if depth + 1 == parts.len() {
                    *slot = value.clone();
                    break;
                }
                node = slot;
            }
        }
        *self = root.try_into().map_err(|e: toml::de::Error| config_err(format!("override: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.scenes == 0 || d.per_scene == 0 || d.points == 0 {
            return Err(config_err("data.scenes, data.per_scene and data.points must be positive"));
        }
        if !(d.cell > 0.0) || !(0.0..1.0).contains(&d.val_fraction) {
            return Err(config_err("data.cell must be positive and data.val_fraction in [0, 1)"));
        }
        if d.relations.is_empty() {
            return Err(config_err("data.relations is empty"));
        }
        self.model.validate()?;
        self.train_config().validate()
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            points: self.data.points,
            min_objects: self.data.min_objects,
            max_objects: self.data.max_objects,
            ..SceneSpec::default()
        }
    }

    pub fn relation_specs(&self) -> Vec<RelationSpec> {
        self.data
            .relations
            .iter()
            .map(|&kind| RelationSpec { kind, tau_near: self.data.tau_near, min_margin: self.data.min_margin })
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: self.mode,
            steps: t.steps,
            batch_size: t.batch_size,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            seed: self.seed,
            freeze_lm: t.freeze_lm,
            freeze_backbone: t.freeze_backbone,
            loss: t.loss,
            augment: t.augment,
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Per-purpose seed derived from the run seed.
fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

// ---- corpus ----------------------------------------------------------------

/// Which samples of a corpus a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    All,
}

/// A generated dataset: scenes, filtered samples, scene split and vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub scenes: Vec<SceneRecord>,
    pub samples: Vec<ReasonSample>,
    pub split: Split,
    pub vocab: Vocabulary,
    pub report: FilterReport,
}

/// Generates scenes, synthesises and filters samples, splits by scene and
/// builds the vocabulary, all from `cfg.seed`.
pub fn generate_corpus(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate()?;
    let spec = cfg.scene_spec();
    let relations = cfg.relation_specs();
    let mut scenes = Vec::with_capacity(cfg.data.scenes);
    let mut raw = Vec::new();
    for i in 0..cfg.data.scenes as u64 {
        let (scene, cloud) = generate_scene(&format!("scene_{i:05}"), derive_seed(cfg.seed, "scene", i), &spec)?;
        let rec = SceneRecord::new(scene, cloud, cfg.data.cell);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "samples", i));
        raw.extend(synthesize(&rec.scene, &relations, cfg.data.per_scene, &mut rng));
        scenes.push(rec);
    }
    let index: HashMap<&str, &Scene> = scenes.iter().map(|r| (r.scene.scene_id.as_str(), &r.scene)).collect();
    let (samples, report) = filter_chain(&raw, &index, &cfg.filter);
    let ids: Vec<String> = scenes.iter().map(|r| r.scene.scene_id.clone()).collect();
    let split = split_scenes(&ids, cfg.data.val_fraction, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split", 0)));
    let scene_refs: Vec<&Scene> = scenes.iter().map(|r| &r.scene).collect();
    let vocab = crate::r2s::build_vocabulary(&samples, &scene_refs);
    Ok(Corpus { scenes, samples, split, vocab, report })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serialises") + "\n"
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Parse { file: path.display().to_string(), line: e.line(), msg: e.to_string() })
}

impl Corpus {
    /// Samples of `part` with their line index in `samples.jsonl`.
    pub fn part(&self, part: Part) -> Vec<(usize, &ReasonSample)> {
        let keep: Option<HashSet<&str>> = match part {
            Part::Train => Some(self.split.train.iter().map(String::as_str).collect()),
            Part::Val => Some(self.split.val.iter().map(String::as_str).collect()),
            Part::All => None,
        };
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| keep.as_ref().map_or(true, |k| k.contains(s.scene_id.as_str())))
            .collect()
    }

    pub fn stats(&self) -> DatasetStats {
        dataset_stats(&self.samples)
    }

    /// Writes the corpus files and returns their names.
    pub fn write(&self, dir: &Path) -> Result<Vec<&'static str>> {
        write_scenes(&dir.join(SCENES_FILE), &self.scenes)?;
        write_samples(&dir.join(SAMPLES_FILE), &self.samples)?;
        write_text(&dir.join(SPLIT_FILE), &to_json(&self.split))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        write_text(&dir.join(REPORT_FILE), &to_json(&self.report))?;
        write_text(&dir.join(STATS_FILE), &to_json(&self.stats()))?;
        Ok(vec![SCENES_FILE, SAMPLES_FILE, SPLIT_FILE, VOCAB_FILE, REPORT_FILE, STATS_FILE])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let scenes = read_scenes(&dir.join(SCENES_FILE))?;
        let samples = read_samples(&dir.join(SAMPLES_FILE))?;
        let split: Split = read_json(&dir.join(SPLIT_FILE))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let report: FilterReport = read_json(&dir.join(REPORT_FILE))?;
        let known: HashSet<&str> = scenes.iter().map(|s| s.scene.scene_id.as_str()).collect();
        for (i, s) in samples.iter().enumerate() {
            if !known.contains(s.scene_id.as_str()) {
                return Err(Error::Data(format!("{SAMPLES_FILE} line {}: unknown scene {}", i + 1, s.scene_id)));
            }
        }
        if let Some(id) = split.train.iter().chain(&split.val).find(|id| !known.contains(id.as_str())) {
            return Err(Error::Data(format!("{SPLIT_FILE} names unknown scene {id}")));
        }
        Ok(Self { scenes, samples, split, vocab, report })
    }

    /// Input hashes of a loaded corpus directory.
    fn hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
        [SCENES_FILE, SAMPLES_FILE, SPLIT_FILE, VOCAB_FILE]
            .into_iter()
            .map(|f| Ok((format!("data/{f}"), file_sha256(&dir.join(f))?)))
            .collect()
    }
}

// ---- training and evaluation ------------------------------------------------

/// Builds a model from `cfg.model` and the corpus vocabulary and trains it on
/// the training split.
pub fn train_model(corpus: &Corpus, cfg: &RunConfig, on_step: impl FnMut(&TraceRow)) -> Result<(R2sModel, Vec<TraceRow>)> {
    cfg.validate()?;
    let mut model = R2sModel::new(cfg.model.clone(), corpus.vocab.clone(), cfg.seed)?;
    let samples: Vec<ReasonSample> = corpus.part(Part::Train).into_iter().map(|(_, s)| s.clone()).collect();
    let trace = train(&mut model, &corpus.scenes, &samples, &cfg.train_config(), on_step)?;
    Ok((model, trace))
}

/// Evaluates `model` on one part of the corpus.
pub fn evaluate_part(
    model: &R2sModel,
    corpus: &Corpus,
    part: Part,
    mode: PipelineMode,
    oracle_priors: bool,
) -> Result<(Metrics, Vec<EvalRecord>, Vec<InferenceRecord>)> {
    let (evals, infs) = evaluate(model, &corpus.scenes, &corpus.part(part), mode, oracle_priors)?;
    Ok((compute_metrics(&evals), evals, infs))
}

// ---- manifests ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub format_version: u32,
    pub seed: u64,
    /// Effective configuration as TOML.
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config: &str,
    inputs: BTreeMap<String, String>,
    outputs: &[String],
) -> Result<Manifest> {
    let outputs = outputs
        .iter()
        .map(|f| Ok((f.clone(), file_sha256(&dir.join(f))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        format_version: crate::scenekit::FORMAT_VERSION,
        seed,
        config: config.to_string(),
        inputs,
        outputs,
    };
    write_text(&dir.join(MANIFEST_FILE), &to_json(&m))?;
    Ok(m)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---- command line ----------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "r2seg", version, about = "Two-stage reasoning segmentation on synthetic 3D scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources shared by the commands that build a [`RunConfig`].
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    /// File, then `extra` flag overrides, then `--seed`, then `--set`.
    pub fn resolve(&self, extra: &[String]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(extra)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.apply_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes and filtered reasoning samples.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scenes: Option<usize>,
        /// TOML file replacing the `[filter]` section.
        #[arg(long)]
        filters: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split of a corpus.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<PipelineMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint; writes one metrics file per mode.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full_r2s")]
        mode: Vec<PipelineMode>,
        #[arg(long, value_enum, default_value = "val")]
        part: Part,
        /// Feed ground-truth related objects to Step 2.
        #[arg(long)]
        oracle_priors: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question about one scene of a corpus.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        question: String,
        #[arg(long, default_value = "full_r2s")]
        mode: PipelineMode,
    },
    /// Train and evaluate once per value of one configuration axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// `latent_queries=16,32,48`, `lambda_txt=0.1,0.5,1.0` or `mode=wo_pr,full_r2s`.
        #[arg(long)]
        sweep: String,
        /// Seeds per setting; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit status for an error: 2 configuration, 3 data or files,
/// 4 numeric divergence, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Data(_) | Error::Scene(_) | Error::Checkpoint(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Nn(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { cfg, scenes, filters, out } => {
            let mut extra = Vec::new();
            if let Some(k) = scenes {
                extra.push(format!("data.scenes={k}"));
            }
            let mut run = cfg.resolve(&extra)?;
            if let Some(f) = filters {
                run.filter = toml::from_str(&read_text(&f)?).map_err(|e| config_err(format!("{}: {e}", f.display())))?;
                run.apply_overrides(&cfg.set)?;
            }
            let report = cmd_gen(&run, &out)?;
            println!("{}", to_json(&report).trim_end());
            Ok(())
        }
        Command::Train { cfg, data, mode, out } => {
            let extra: Vec<String> = mode.map(|m| format!("mode=\"{}\"", m.as_str())).into_iter().collect();
            let run = cfg.resolve(&extra)?;
            let trace = cmd_train(&run, &data, &out)?;
            if let Some(last) = trace.last() {
                println!("trained {} steps, final loss {:.5}", trace.len(), last.total);
            }
            Ok(())
        }
        Command::Eval { ckpt, data, mode, part, oracle_priors, out } => {
            for (m, metrics) in cmd_eval(&ckpt, &data, &mode, part, oracle_priors, &out)? {
                println!("{}: {}", m.as_str(), serde_json::to_string(&metrics).expect("metrics serialise"));
            }
            Ok(())
        }
        Command::Infer { ckpt, data, scene, question, mode } => {
            let answer = cmd_infer(&ckpt, &data, &scene, &question, mode)?;
            println!("{}", serde_json::to_string(&answer).expect("answer serialises"));
            Ok(())
        }
        Command::Ablate { cfg, data, sweep, seeds, out } => {
            let run = cfg.resolve(&[])?;
            let rows = cmd_ablate(&run, &data, &sweep, &seeds, &out)?;
            print!("{}", ablation_table(&rows));
            Ok(())
        }
    }
}

/// `gen`: writes the corpus, its effective config and a manifest.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<FilterReport> {
    let corpus = generate_corpus(cfg)?;
    ensure_dir(out)?;
    let mut files: Vec<String> = corpus.write(out)?.into_iter().map(String::from).collect();
    let config = cfg.to_toml();
    write_text(&out.join(CONFIG_FILE), &config)?;
    files.push(CONFIG_FILE.into());
    write_manifest(out, "gen", cfg.seed, &config, BTreeMap::new(), &files)?;
    log::info!("{} scenes, {} samples kept of {}", corpus.scenes.len(), corpus.report.kept, corpus.report.input_count);
    Ok(corpus.report)
}

/// `train`: writes `model.ckpt`, `trace.csv`, config and manifest.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<TraceRow>> {
    let corpus = Corpus::load(data)?;
    let every = (cfg.train.steps / 20).max(1);
    let (model, trace) = train_model(&corpus, cfg, |r| {
        if r.step % every == 0 {
            log::info!("step {} lr {:.2e} loss {:.4}", r.step, r.lr, r.total);
        }
    })?;
    ensure_dir(out)?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    write_trace_csv(&out.join(TRACE_FILE), &trace)?;
    let config = cfg.to_toml();
    write_text(&out.join(CONFIG_FILE), &config)?;
    let files = [CHECKPOINT_FILE, TRACE_FILE, CONFIG_FILE].map(String::from);
    write_manifest(out, "train", cfg.seed, &config, Corpus::hashes(data)?, &files)?;
    Ok(trace)
}

pub fn metrics_file(mode: PipelineMode) -> String {
    format!("metrics_{}.json", mode.as_str())
}

pub fn inference_file(mode: PipelineMode) -> String {
    format!("inferences_{}.jsonl", mode.as_str())
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    modes: Vec<&'a str>,
    part: Part,
    oracle_priors: bool,
}

/// `eval`: one metrics JSON and one inference JSONL per mode.
pub fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    modes: &[PipelineMode],
    part: Part,
    oracle_priors: bool,
    out: &Path,
) -> Result<Vec<(PipelineMode, Metrics)>> {
    if modes.is_empty() {
        return Err(config_err("no evaluation mode given"));
    }
    let model = load_checkpoint(ckpt)?;
    let corpus = Corpus::load(data)?;
    ensure_dir(out)?;
    let mut files = Vec::new();
    let mut results = Vec::new();
    for &mode in modes {
        let (metrics, _, infs) = evaluate_part(&model, &corpus, part, mode, oracle_priors)?;
        let mf = metrics_file(mode);
        write_text(&out.join(&mf), &to_json(&metrics))?;
        let inf_f = inference_file(mode);
        let lines: String = infs.iter().map(|r| serde_json::to_string(r).expect("record serialises") + "\n").collect();
        write_text(&out.join(&inf_f), &lines)?;
        files.extend([mf, inf_f]);
        results.push((mode, metrics));
    }
    let settings = EvalSettings { modes: modes.iter().map(|m| m.as_str()).collect(), part, oracle_priors };
    let config = toml::to_string_pretty(&settings).expect("settings serialise");
    let mut inputs = Corpus::hashes(data)?;
    inputs.insert("checkpoint".into(), file_sha256(ckpt)?);
    write_manifest(out, "eval", 0, &config, inputs, &files)?;
    Ok(results)
}

/// Result of `infer`, printed as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferAnswer {
    pub scene_id: String,
    pub question: String,
    pub mode: PipelineMode,
    pub answer: String,
    pub response: String,
    /// Point ids of each final mask.
    pub mask_points: Vec<Vec<usize>>,
}

pub fn cmd_infer(ckpt: &Path, data: &Path, scene_id: &str, question: &str, mode: PipelineMode) -> Result<InferAnswer> {
    let model = load_checkpoint(ckpt)?;
    let scenes = read_scenes(&data.join(SCENES_FILE))?;
    let rec = scenes
        .iter()
        .find(|r| r.scene.scene_id == scene_id)
        .ok_or_else(|| Error::Data(format!("scene {scene_id} not found in {}", data.display())))?;
    let inf = model.infer(rec, question, mode, &PriorSource::Predicted)?;
    Ok(InferAnswer {
        scene_id: scene_id.to_string(),
        question: question.to_string(),
        mode,
        answer: inf.answer.clone(),
        response: inf.final_step.tokens.join(" "),
        mask_points: inf.final_masks.binary().iter().map(|on| superpoints_to_points(on, &rec.superpoints)).collect(),
    })
}

/// A sweep axis and the configuration key it drives.
pub fn sweep_key(axis: &str) -> Result<&'static str> {
    match axis {
        "latent_queries" => Ok("model.latent_queries"),
        "lambda_txt" => Ok("train.loss.lambda_txt"),
        "mode" => Ok("mode"),
        _ => Err(config_err(format!("unknown sweep axis {axis:?}; expected latent_queries, lambda_txt or mode"))),
    }
}

/// Parses `axis=v1,v2,...` into override strings, one per setting.
pub fn parse_sweep(sweep: &str) -> Result<(String, Vec<(String, String)>)> {
    let (axis, values) = sweep.split_once('=').ok_or_else(|| config_err(format!("sweep {sweep:?} is not axis=values")))?;
    let key = sweep_key(axis.trim())?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(config_err("sweep has no values"));
    }
    let sets = values
        .into_iter()
        .map(|v| {
            let lit = if key == "mode" { format!("\"{v}\"") } else { v.to_string() };
            (v.to_string(), format!("{key}={lit}"))
        })
        .collect();
    Ok((axis.trim().to_string(), sets))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub mode: PipelineMode,
    pub metrics: Metrics,
}

/// `ablate`: one train and eval (validation split) per setting and seed.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, sweep: &str, seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>> {
    let (axis, settings) = parse_sweep(sweep)?;
    let corpus = Corpus::load(data)?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let mut rows = Vec::new();
    for (value, set) in &settings {
        for &seed in &seeds {
            let mut run = cfg.clone();
            run.apply_overrides(std::slice::from_ref(set))?;
            run.seed = seed;
            run.validate()?;
            log::info!("ablate {axis}={value} seed {seed}");
            let (model, _) = train_model(&corpus, &run, |_| {})?;
            let (metrics, _, _) = evaluate_part(&model, &corpus, Part::Val, run.mode, false)?;
            rows.push(AblationRow { axis: axis.clone(), value: value.clone(), seed, mode: run.mode, metrics });
        }
    }
    ensure_dir(out)?;
    let mut csv = String::from("axis,value,seed,mode,giou,acc25,acc50,bleu4,rougeL,n\n");
    for r in &rows {
        let m = &r.metrics;
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.axis,
            r.value,
            r.seed,
            r.mode.as_str(),
            m.giou,
            m.acc25,
            m.acc50,
            m.bleu4,
            m.rouge_l,
            m.n
        );
    }
    write_text(&out.join(ABLATION_FILE), &csv)?;
    let config = cfg.to_toml();
    write_text(&out.join(CONFIG_FILE), &config)?;
    let files = [ABLATION_FILE, CONFIG_FILE].map(String::from);
    write_manifest(out, &format!("ablate {sweep}"), cfg.seed, &config, Corpus::hashes(data)?, &files)?;
    Ok(rows)
}

/// Seed-averaged metrics per setting, in sweep order.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.value.as_str()) {
            order.push(&r.value);
        }
    }
    let mut out = String::new();
    let axis = rows.first().map_or("setting", |r| r.axis.as_str());
    let _ = writeln!(out, "{axis:>16} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7}", "seeds", "gIoU", "Acc25", "Acc50", "BLEU4", "RougeL");
    for v in order {
        let sel: Vec<&Metrics> = rows.iter().filter(|r| r.value == v).map(|r| &r.metrics).collect();
        let n = sel.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| sel.iter().map(|m| f(m)).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{v:>16} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            sel.len(),
            avg(|m| m.giou),
            avg(|m| m.acc25),
            avg(|m| m.acc50),
            avg(|m| m.bleu4),
            avg(|m| m.rouge_l)
        );
    }
    out
}
