//! Word-level vocabulary and a small prefix language model.
//!
//! The prefix (visual rows followed by the instruction) is fully visible; the
//! response is decoded causally. The hidden row that predicts a `[SEG]` token
//! is that token's state for the mask head.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result as CrateResult};
use crate::nncore::layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, Positions};
use crate::nncore::{AttnOpts, NnError, ParamStore, Result, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEG: usize = 3;
pub const OBJ: usize = 4;
pub const UNK: usize = 5;

const SPECIALS: [(&str, &str); 6] = [
    ("pad", "<pad>"),
    ("bos", "<bos>"),
    ("eos", "<eos>"),
    ("seg", "[SEG]"),
    ("obj", "<OBJ>"),
    ("unk", "<unk>"),
];

const PUNCT: &[char] = &[',', '.', '?', ';', ':', '!'];

/// Lowercases and splits on whitespace, detaching sentence punctuation.
/// `[SEG]` and `<OBJ>` survive in any case.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = String::new();
        for ch in raw.chars() {
            if PUNCT.contains(&ch) {
                if !word.is_empty() {
                    out.push(normalize(&word));
                    word.clear();
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(normalize(&word));
        }
    }
    out
}

fn normalize(word: &str) -> String {
    match word.to_ascii_lowercase().as_str() {
        "[seg]" => "[SEG]".into(),
        "<obj>" => "<OBJ>".into(),
        w => w.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    format_version: u32,
    specials: BTreeMap<String, usize>,
    tokens: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every distinct word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let special: BTreeSet<&str> = SPECIALS.iter().map(|s| s.1).collect();
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(tokenize)
            .filter(|w| !special.contains(w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.1.to_string()).chain(words).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens; padding, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            format_version: 1,
            specials: SPECIALS.iter().enumerate().map(|(i, s)| (s.0.to_string(), i)).collect(),
            tokens: self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serialises")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.format_version != 1 {
            return Err(format!("unsupported format_version {}", file.format_version));
        }
        for (i, (key, tok)) in SPECIALS.iter().enumerate() {
            if file.specials.get(*key) != Some(&i) || file.tokens.get(*tok) != Some(&i) {
                return Err(format!("special {key} must be {tok} with id {i}"));
            }
        }
        let mut tokens = vec![String::new(); file.tokens.len()];
        for (t, i) in file.tokens {
            match tokens.get_mut(i) {
                Some(slot) if slot.is_empty() => *slot = t,
                _ => return Err(format!("token ids are not dense: {t} -> {i}")),
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> CrateResult<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> CrateResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|msg| Error::Parse { file: path.display().to_string(), line: 1, msg })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { dim: 64, layers: 2, heads: 4, ffn_mult: 2, max_len: 256 }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub tokens: Embedding,
    positions: Positions,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    head: Linear,
}

/// Teacher-forced pass: row `t` of both matrices predicts `targets[t]`.
#[derive(Clone, Copy, Debug)]
pub struct TeacherForced {
    pub logits: Var,
    pub hidden: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// Emitted tokens, EOS excluded.
    pub token_ids: Vec<usize>,
    /// Pre-logit state that produced each emitted token.
    pub hidden: Tensor,
    pub seg_positions: Vec<usize>,
    /// Set when `max_len` ran out before EOS.
    pub truncated: bool,
}

/// `[SEG]` states in emission order (`K x D`, possibly `K = 0`).
pub fn extract_seg_states(result: &GenerationResult) -> Tensor {
    let d = result.hidden.cols();
    let data = result.seg_positions.iter().flat_map(|&p| result.hidden.row(p).to_vec()).collect();
    Tensor::matrix(result.seg_positions.len(), d, data).expect("rows of one matrix")
}

/// Prefix-LM visibility: row `i` sees every prefix row and response rows `<= i`.
pub fn prefix_mask(prefix_len: usize, total: usize) -> Rc<[bool]> {
    (0..total * total)
        .map(|ij| {
            let (i, j) = (ij / total, ij % total);
            j < prefix_len || j <= i
        })
        .collect()
}

impl LanguageModel {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: LmConfig, vocab: usize, rng: &mut R) -> Self {
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("lm.layer{i}");
                DecoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * cfg.ffn_mult, rng),
                }
            })
            .collect();
        Self {
            tokens: Embedding::new(store, "lm.tokens", vocab, d, rng),
            positions: Positions::new(store, "lm.positions", cfg.max_len, d, rng),
            layers,
            ln_out: LayerNorm::new(store, "lm.ln_out", d),
            head: Linear::new(store, "lm.head", d, vocab, true, rng),
            cfg,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.vocab
    }

    /// Instruction embeddings; `<OBJ>` positions take the rows of `slots`.
    pub fn embed_instruction(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], slots: Option<Var>) -> Result<Var> {
        self.tokens.forward_with_slots(tape, store, ids, OBJ, slots)
    }

    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: Var,
        targets: &[usize],
    ) -> Result<TeacherForced> {
        if targets.is_empty() {
            return Err(NnError::Shape { op: "lm", detail: "empty target sequence".into() });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(NnError::Index { op: "lm", index: bad, bound: self.vocab_size() });
        }
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        let hidden = self.hidden_states(tape, store, prefix, &inputs)?;
        let logits = self.head.forward(tape, store, hidden)?;
        Ok(TeacherForced { logits, hidden })
    }

    /// Final-norm states of the response rows, one per input token.
    fn hidden_states(&self, tape: &mut Tape, store: &ParamStore, prefix: Var, inputs: &[usize]) -> Result<Var> {
        let (p, d) = tape.shape(prefix);
        if d != self.cfg.dim {
            return Err(NnError::Shape { op: "lm", detail: format!("prefix width {d} vs model dim {}", self.cfg.dim) });
        }
        let e = self.tokens.forward(tape, store, inputs)?;
        let x = tape.concat_rows(&[prefix, e])?;
        let mut x = self.positions.add(tape, store, x)?;
        let n = p + inputs.len();
        let opts = AttnOpts { allowed: Some(prefix_mask(p, n)), uniform: false };
        for layer in &self.layers {
            let h = layer.ln_attn.forward(tape, store, x)?;
            let a = layer.attn.forward(tape, store, h, h, &opts)?;
            x = tape.add(x, a)?;
            let h = layer.ln_ffn.forward(tape, store, x)?;
            let f = layer.ffn.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        let x = tape.slice_rows(x, p, n)?;
        self.ln_out.forward(tape, store, x)
    }

    /// Greedy decoding with full recomputation per step.
    pub fn generate(&self, store: &ParamStore, prefix: &Tensor, max_len: usize) -> Result<GenerationResult> {
        let d = self.cfg.dim;
        let budget = max_len.min(self.cfg.max_len.saturating_sub(prefix.rows() + 1));
        let mut inputs = vec![BOS];
        let mut token_ids = Vec::new();
        let mut hidden = Vec::new();
        let mut truncated = true;
        for _ in 0..budget {
            let mut tape = Tape::new();
            let pre = tape.constant(prefix.clone())?;
            let h = self.hidden_states(&mut tape, store, pre, &inputs)?;
            let t = inputs.len() - 1;
            let last = tape.slice_rows(h, t, t + 1)?;
            let logits = self.head.forward(&mut tape, store, last)?;
            let row = tape.value(logits).data();
            let next = argmax(row);
            if next == EOS {
                truncated = false;
                break;
            }
            token_ids.push(next);
            hidden.extend_from_slice(tape.value(last).data());
            inputs.push(next);
        }
        let seg_positions = token_ids.iter().enumerate().filter(|(_, &t)| t == SEG).map(|(i, _)| i).collect();
        Ok(GenerationResult {
            hidden: Tensor::matrix(token_ids.len(), d, hidden)?,
            token_ids,
            seg_positions,
            truncated,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
