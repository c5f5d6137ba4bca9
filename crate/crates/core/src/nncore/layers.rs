//! Parameterised building blocks shared by the encoder, Q-Former, language
//! model and mask head.

use rand::Rng;

use super::{AttnOpts, ParamId, ParamStore, Result, Tape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), in_dim, out_dim, std, rng);
        let b = bias.then(|| store.add_const(format!("{name}.b"), 1, out_dim, 0.0));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let y = tape.matmul(x, w, false)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), 1, dim, 1.0),
            beta: store.add_const(format!("{name}.beta"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.layernorm(x, g, b)
    }
}

/// Multi-head attention with separate query, key, value and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, memory: Var, opts: &AttnOpts) -> Result<Var> {
        let (q, _) = self.forward_with_weights(tape, store, query, memory, opts)?;
        Ok(q)
    }

    /// Like [`forward`](Self::forward) but also returns the attention node, whose
    /// weights can be read back with [`Tape::attention_weights`].
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        memory: Var,
        opts: &AttnOpts,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, memory)?;
        let v = self.v.forward(tape, store, memory)?;
        let a = tape.attention(q, k, v, self.heads, opts)?;
        Ok((self.o.forward(tape, store, a)?, a))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Token embedding table `V x D`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add_normal(format!("{name}.table"), vocab, dim, 1.0 / (dim as f64).sqrt(), rng);
        Self { table, vocab, dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table)?;
        tape.embedding_lookup(t, ids)
    }

    /// Embeds `ids`, replacing the `k`-th occurrence of `slot_id` by row `k` of
    /// `slots`. Without `slots` every token is looked up in the table.
    pub fn forward_with_slots(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        slot_id: usize,
        slots: Option<Var>,
    ) -> Result<Var> {
        let Some(slots) = slots else {
            return self.forward(tape, store, ids);
        };
        let n_slots = ids.iter().filter(|&&i| i == slot_id).count();
        let (rows, cols) = tape.shape(slots);
        if rows != n_slots || cols != self.dim {
            return Err(super::NnError::Shape {
                op: "embedding_slots",
                detail: format!("{n_slots} slot tokens of dim {} vs {rows}x{cols} slot rows", self.dim),
            });
        }
        if n_slots == 0 {
            return self.forward(tape, store, ids);
        }
        let plain: Vec<usize> = ids.iter().copied().filter(|&i| i != slot_id).collect();
        let mut parts = Vec::new();
        if !plain.is_empty() {
            parts.push(self.forward(tape, store, &plain)?);
        }
        parts.push(slots);
        let pool = tape.concat_rows(&parts)?;
        // Route every position to its row in [plain tokens; slot rows].
        let (mut next_plain, mut next_slot) = (0, plain.len());
        let order: Vec<usize> = ids
            .iter()
            .map(|&i| {
                let r = if i == slot_id { &mut next_slot } else { &mut next_plain };
                *r += 1;
                *r - 1
            })
            .collect();
        tape.embedding_lookup(pool, &order)
    }
}

/// Learned absolute position table `max_len x D`.
#[derive(Clone, Debug)]
pub struct Positions {
    pub table: ParamId,
    pub max_len: usize,
}

impl Positions {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, max_len: usize, dim: usize, rng: &mut R) -> Self {
        Self { table: store.add_normal(format!("{name}.table"), max_len, dim, 0.02, rng), max_len }
    }

    /// `x + positions[0..rows(x)]`.
    pub fn add(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.shape(x).0;
        if n > self.max_len {
            return Err(super::NnError::Index { op: "positions", index: n, bound: self.max_len });
        }
        let t = tape.param(store, self.table)?;
        let idx: Vec<usize> = (0..n).collect();
        let p = tape.embedding_lookup(t, &idx)?;
        tape.add(x, p)
    }
}
