use std::collections::HashMap;
use std::rc::Rc;

use super::gemm::{gemm, View};
use super::params::{ParamId, ParamStore};
use super::{NnError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product for [`Tape::custom`]: maps the output gradient to
/// one gradient buffer per input.
pub type CustomVjp = Rc<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize, broadcast: bool },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    Softmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Gather { table: usize, ids: Rc<[usize]> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64>, uniform: bool },
    CrossEntropy { logits: usize, targets: Rc<[usize]>, probs: Vec<f64> },
    Mean { a: usize },
    Sum { a: usize },
    SegmentMean { a: usize, assign: Rc<[usize]>, counts: Vec<f64> },
    SegmentMax { a: usize, argmax: Vec<usize> },
    BceLogits { a: usize, target: Rc<[f64]> },
    Dice { a: usize, target: Rc<[f64]>, smooth: f64 },
    Custom { inputs: Vec<usize>, vjp: CustomVjp },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one.
    grad: Option<Vec<f64>>,
}

/// Options for [`Tape::attention`].
#[derive(Clone, Default)]
pub struct AttnOpts {
    /// Row-major `Tq x Tk` table; `false` entries receive zero weight.
    pub allowed: Option<Rc<[bool]>>,
    /// Replace softmax weights with a uniform distribution over allowed keys.
    pub uniform: bool,
}

/// Linear record of executed ops, replayed in reverse by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Accumulated gradient of a leaf, if it requires one and backward ran.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        let v = self.push("leaf", value, Op::Leaf, requires_grad)?;
        self.nodes[v.0].grad = grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad)?;
        self.params.insert(id, v);
        self.param_order.push((id, v));
        Ok(v)
    }

    /// Parameter bindings in first-use order.
    pub fn param_bindings(&self) -> &[(ParamId, Var)] {
        &self.param_order
    }

    // ---- forward ops -------------------------------------------------------

    /// `a @ b`, or `a @ b^T` when `trans_b` is set.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("lhs {m}x{k} vs rhs {br}x{bc} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = View::rowmajor(self.value(a).data(), k);
            let bd = self.value(b).data();
            let bv = if trans_b {
                View::transposed(bd, bc)
            } else {
                View::rowmajor(bd, bc)
            };
            gemm(m, k, n, av, bv, 0.0, &mut out, n);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul { a: a.0, b: b.0, trans_b }, rg)
    }

    /// Elementwise sum; `b` may be a `1 x C` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let broadcast = if (ar, ac) == (br, bc) {
            false
        } else if br == 1 && bc == ac {
            true
        } else {
            return Err(shape_err("add", format!("{ar}x{ac} vs {br}x{bc}")));
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let out: Vec<f64> = if broadcast {
            ad.iter().enumerate().map(|(i, x)| x + bd[i % ac]).collect()
        } else {
            ad.iter().zip(bd).map(|(x, y)| x + y).collect()
        };
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("add", Tensor::matrix(ar, ac, out)?, Op::Add { a: a.0, b: b.0, broadcast }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err("mul", format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("mul", Tensor::matrix(sa.0, sa.1, out)?, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let rg = self.rg(a.0);
        self.push("scale", Tensor::matrix(r, c, out)?, Op::Scale { a: a.0, s }, rg)
    }

    /// Row-wise softmax, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a.0);
        self.push("softmax", Tensor::matrix(r, c, out)?, Op::Softmax { a: a.0 }, rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (each `1 x C`).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err("layernorm", format!("affine params must be 1x{c}")));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        self.push(
            "layernorm",
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let rg = self.rg(a.0);
        self.push("gelu", Tensor::matrix(r, c, out)?, Op::Gelu { a: a.0 }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a.0);
        self.push("sigmoid", Tensor::matrix(r, c, out)?, Op::Sigmoid { a: a.0 }, rg)
    }

    /// Row gather: output row `i` is `table[ids[i]]`. Serves both as the
    /// token-embedding lookup and as a generic row-index gather.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NnError::Index { op: "embedding_lookup", index: bad, bound: v });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table.0);
        self.push(
            "embedding_lookup",
            Tensor::matrix(ids.len(), c, out)?,
            Op::Gather { table: table.0, ids: ids.into() },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let c = self.shape(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(shape_err("concat_rows", format!("column count {pc} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(
            "concat_rows",
            Tensor::matrix(rows, c, out)?,
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
            rg,
        )
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(shape_err("slice_rows", format!("range {start}..{end} of {r} rows")));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.rg(a.0);
        self.push("slice_rows", Tensor::matrix(end - start, c, out)?, Op::SliceRows { a: a.0, start }, rg)
    }

    /// Multi-head scaled dot-product attention over pre-projected `q` (`Tq x D`),
    /// `k` and `v` (`Tk x D`). Heads split the model dimension evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, opts: &AttnOpts) -> Result<Var> {
        let (tq, d) = self.shape(q);
        let (tk, dk) = self.shape(k);
        let (tv, dv) = self.shape(v);
        if dk != d || dv != d || tv != tk {
            return Err(shape_err(
                "scaled_dot_attention",
                format!("q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("scaled_dot_attention", format!("{heads} heads do not divide dim {d}")));
        }
        if let Some(m) = &opts.allowed {
            if m.len() != tq * tk {
                return Err(shape_err("scaled_dot_attention", format!("mask len {} != {tq}x{tk}", m.len())));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            for h in 0..heads {
                let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
                if !opts.uniform {
                    gemm(
                        tq,
                        dh,
                        tk,
                        View { data: &qd[h * dh..], rs: d, cs: 1 },
                        View { data: &kd[h * dh..], rs: 1, cs: d },
                        0.0,
                        p,
                        tk,
                    );
                }
                for i in 0..tq {
                    let row = &mut p[i * tk..(i + 1) * tk];
                    let allowed = opts.allowed.as_ref().map(|m| &m[i * tk..(i + 1) * tk]);
                    masked_softmax(row, scale, allowed, opts.uniform);
                }
                gemm(
                    tq,
                    tk,
                    dh,
                    View::rowmajor(p, tk),
                    View { data: &vd[h * dh..], rs: d, cs: 1 },
                    0.0,
                    &mut out[h * dh..],
                    d,
                );
            }
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        self.push(
            "scaled_dot_attention",
            Tensor::matrix(tq, d, out)?,
            Op::Attention { q: q.0, k: k.0, v: v.0, heads, probs, uniform: opts.uniform },
            rg,
        )
    }

    /// Attention weights recorded by an attention node, laid out `heads x Tq x Tk`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean token cross-entropy of `logits` (`T x V`) against `targets` (len `T`),
    /// fused with log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, vocab) = self.shape(logits);
        if targets.len() != t {
            return Err(shape_err("cross_entropy", format!("{t} logit rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= vocab) {
            return Err(NnError::Index { op: "cross_entropy", index: bad, bound: vocab });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = if t == 0 { 0.0 } else { loss / t as f64 };
        let rg = self.rg(logits.0);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.into(), probs },
            rg,
        )
    }

    /// Mean over all entries (zero for an empty input).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.numel();
        let m = if n == 0 { 0.0 } else { t.data().iter().sum::<f64>() / n as f64 };
        let rg = self.rg(a.0);
        self.push("mean", Tensor::scalar(m), Op::Mean { a: a.0 }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(a.0);
        self.push("sum", Tensor::scalar(s), Op::Sum { a: a.0 }, rg)
    }

    /// Per-segment mean of rows: `assign[i]` is the segment of row `i`.
    pub fn segment_mean(&mut self, a: Var, assign: &[usize], segments: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        check_assign("segment_mean", r, assign, segments)?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; segments * c];
        let mut counts = vec![0.0; segments];
        for (i, &s) in assign.iter().enumerate() {
            counts[s] += 1.0;
            for j in 0..c {
                out[s * c + j] += ad[i * c + j];
            }
        }
        for s in 0..segments {
            if counts[s] > 0.0 {
                for j in 0..c {
                    out[s * c + j] /= counts[s];
                }
            }
        }
        let rg = self.rg(a.0);
        self.push(
            "segment_mean",
            Tensor::matrix(segments, c, out)?,
            Op::SegmentMean { a: a.0, assign: assign.into(), counts },
            rg,
        )
    }

    /// Per-segment, per-column max of rows. Empty segments yield zeros.
    pub fn segment_max(&mut self, a: Var, assign: &[usize], segments: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        check_assign("segment_max", r, assign, segments)?;
        let ad = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; segments * c];
        let mut argmax = vec![usize::MAX; segments * c];
        for (i, &s) in assign.iter().enumerate() {
            for j in 0..c {
                let x = ad[i * c + j];
                if x > out[s * c + j] {
                    out[s * c + j] = x;
                    argmax[s * c + j] = i;
                }
            }
        }
        for (o, &am) in out.iter_mut().zip(&argmax) {
            if am == usize::MAX {
                *o = 0.0;
            }
        }
        let rg = self.rg(a.0);
        self.push("segment_max", Tensor::matrix(segments, c, out)?, Op::SegmentMax { a: a.0, argmax }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`, computed
    /// in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != target.len() {
            return Err(shape_err("bce_with_logits", format!("{} logits vs {} targets", t.numel(), target.len())));
        }
        let n = target.len();
        let s: f64 = t
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = if n == 0 { 0.0 } else { s / n as f64 };
        let rg = self.rg(logits.0);
        self.push("bce_with_logits", Tensor::scalar(loss), Op::BceLogits { a: logits.0, target: target.into() }, rg)
    }

    /// Soft DICE loss `1 - (2 sum(p g) + s) / (sum p + sum g + s)` per row of
    /// `sigmoid(logits)`, averaged over rows.
    pub fn dice_loss(&mut self, logits: Var, target: &[f64], smooth: f64) -> Result<Var> {
        let (k, p) = self.shape(logits);
        if k * p != target.len() {
            return Err(shape_err("dice_loss", format!("{k}x{p} logits vs {} targets", target.len())));
        }
        let ld = self.value(logits).data();
        let mut total = 0.0;
        for r in 0..k {
            let (i, s) = dice_terms(&ld[r * p..(r + 1) * p], &target[r * p..(r + 1) * p]);
            total += 1.0 - (2.0 * i + smooth) / (s + smooth);
        }
        let loss = if k == 0 { 0.0 } else { total / k as f64 };
        let rg = self.rg(logits.0);
        self.push(
            "dice_loss",
            Tensor::scalar(loss),
            Op::Dice { a: logits.0, target: target.into(), smooth },
            rg,
        )
    }

    /// Records an op with a caller-supplied vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: CustomVjp) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.rg(v.0));
        self.push("custom", value, Op::Custom { inputs: inputs.iter().map(|v| v.0).collect(), vjp }, rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(NnError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |j: usize| nodes[j].requires_grad;
        let len = |j: usize| nodes[j].value.numel();
        let val = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let n = nodes[i].value.cols();
                let bc = nodes[*b].value.cols();
                if rg(*a) {
                    let ga = slot(grads, *a, len(*a));
                    // dA = dC @ B^T  (or dC @ B when B was used transposed)
                    let bv = if *trans_b {
                        View::rowmajor(val(*b), bc)
                    } else {
                        View::transposed(val(*b), bc)
                    };
                    gemm(m, n, k, View::rowmajor(g, n), bv, 1.0, ga, k);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, len(*b));
                    if *trans_b {
                        // dB (n x k) = dC^T @ A
                        gemm(n, m, k, View::transposed(g, n), View::rowmajor(val(*a), k), 1.0, gb, k);
                    } else {
                        // dB (k x n) = A^T @ dC
                        gemm(k, m, n, View::transposed(val(*a), k), View::rowmajor(g, n), 1.0, gb, n);
                    }
                }
            }
            Op::Add { a, b, broadcast } => {
                if rg(*a) {
                    add_into(slot(grads, *a, len(*a)), g);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, len(*b));
                    if *broadcast {
                        let c = gb.len();
                        for (idx, x) in g.iter().enumerate() {
                            gb[idx % c] += x;
                        }
                    } else {
                        add_into(gb, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, *a, len(*a));
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let gb = slot(grads, *b, len(*b));
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                }
            }
            Op::Scale { a, s } => {
                let ga = slot(grads, *a, len(*a));
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * s;
                }
            }
            Op::Softmax { a } => {
                let y = nodes[i].value.data();
                let c = nodes[i].value.cols();
                let ga = slot(grads, *a, len(*a));
                for r in 0..nodes[i].value.rows() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        ga[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = nodes[i].value.cols();
                let r = nodes[i].value.rows();
                if rg(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    for row in 0..r {
                        for j in 0..c {
                            gg[j] += g[row * c + j] * xhat[row * c + j];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = slot(grads, *beta, c);
                    for row in 0..r {
                        for j in 0..c {
                            gb[j] += g[row * c + j];
                        }
                    }
                }
                if rg(*x) {
                    let gam = val(*gamma).to_vec();
                    let gx = slot(grads, *x, r * c);
                    let cf = c as f64;
                    for row in 0..r {
                        let xh = &xhat[row * c..(row + 1) * c];
                        let dxh: Vec<f64> = (0..c).map(|j| g[row * c + j] * gam[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[row * c + j] += inv_std[row] / cf * (cf * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let av = val(*a);
                let ga = slot(grads, *a, len(*a));
                for ((x, gi), &v) in ga.iter_mut().zip(g).zip(av) {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    *x += gi * d;
                }
            }
            Op::Sigmoid { a } => {
                let y = nodes[i].value.data();
                let ga = slot(grads, *a, len(*a));
                for ((x, gi), s) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * s * (1.0 - s);
                }
            }
            Op::Gather { table, ids } => {
                let c = nodes[*table].value.cols();
                let gt = slot(grads, *table, len(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += g[r * c + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    if rg(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let c = nodes[i].value.cols();
                let ga = slot(grads, *a, len(*a));
                add_into(&mut ga[start * c..start * c + g.len()], g);
            }
            Op::Attention { q, k, v, heads, probs, uniform } => {
                let (tq, d) = (nodes[*q].value.rows(), nodes[*q].value.cols());
                let tk = nodes[*k].value.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut dp = vec![0.0; tq * tk];
                for h in 0..*heads {
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    let go = View { data: &g[h * dh..], rs: d, cs: 1 };
                    // dV_h = P^T dO_h
                    gemm(tk, tq, dh, View::transposed(p, tk), go, 1.0, &mut dv[h * dh..], d);
                    if *uniform {
                        continue;
                    }
                    // dP = dO_h V_h^T
                    gemm(tq, dh, tk, go, View { data: &vd[h * dh..], rs: 1, cs: d }, 0.0, &mut dp, tk);
                    for r in 0..tq {
                        let pr = &p[r * tk..(r + 1) * tk];
                        let dr = &mut dp[r * tk..(r + 1) * tk];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..tk {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    // dQ_h = dS K_h ; dK_h = dS^T Q_h
                    gemm(tq, tk, dh, View::rowmajor(&dp, tk), View { data: &kd[h * dh..], rs: d, cs: 1 }, 1.0, &mut dq[h * dh..], d);
                    gemm(tk, tq, dh, View::transposed(&dp, tk), View { data: &qd[h * dh..], rs: d, cs: 1 }, 1.0, &mut dk[h * dh..], d);
                }
                for (j, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if rg(j) {
                        add_into(slot(grads, j, len(j)), &buf);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = nodes[*logits].value.cols();
                let t = targets.len();
                let s = g[0] / t.max(1) as f64;
                let gl = slot(grads, *logits, len(*logits));
                for (r, &y) in targets.iter().enumerate() {
                    for j in 0..vocab {
                        let ind = if j == y { 1.0 } else { 0.0 };
                        gl[r * vocab + j] += s * (probs[r * vocab + j] - ind);
                    }
                }
            }
            Op::Mean { a } => {
                let n = len(*a);
                let s = g[0] / n.max(1) as f64;
                slot(grads, *a, n).iter_mut().for_each(|x| *x += s);
            }
            Op::Sum { a } => {
                let n = len(*a);
                slot(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::SegmentMean { a, assign, counts } => {
                let c = nodes[*a].value.cols();
                let ga = slot(grads, *a, len(*a));
                for (r, &s) in assign.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += g[s * c + j] / counts[s];
                    }
                }
            }
            Op::SegmentMax { a, argmax } => {
                let c = nodes[*a].value.cols();
                let ga = slot(grads, *a, len(*a));
                for (idx, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        ga[src * c + idx % c] += g[idx];
                    }
                }
            }
            Op::BceLogits { a, target } => {
                let av = val(*a);
                let n = target.len().max(1) as f64;
                let ga = slot(grads, *a, target.len());
                for ((x, &l), &y) in ga.iter_mut().zip(av).zip(target.iter()) {
                    *x += g[0] * (sigmoid(l) - y) / n;
                }
            }
            Op::Dice { a, target, smooth } => {
                let (k, p) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let av = val(*a);
                let ga = slot(grads, *a, k * p);
                for r in 0..k {
                    let lr = &av[r * p..(r + 1) * p];
                    let tr = &target[r * p..(r + 1) * p];
                    let (inter, s) = dice_terms(lr, tr);
                    let den = s + smooth;
                    let num = 2.0 * inter + smooth;
                    for j in 0..p {
                        let pj = sigmoid(lr[j]);
                        // d/dp of -(num/den)
                        let dp = -(2.0 * tr[j] * den - num) / (den * den);
                        ga[r * p + j] += g[0] / k as f64 * dp * pj * (1.0 - pj);
                    }
                }
            }
            Op::Custom { inputs, vjp } => {
                let parts = vjp(g);
                for (&j, part) in inputs.iter().zip(parts) {
                    if rg(j) {
                        add_into(slot(grads, j, len(j)), &part);
                    }
                }
            }
        }
        if matches!(self.nodes[i].op, Op::Leaf) {
            if let Some(acc) = self.nodes[i].grad.as_mut() {
                add_into(acc, g);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], j: usize, n: usize) -> &'a mut [f64] {
    grads[j].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_assign(op: &'static str, rows: usize, assign: &[usize], segments: usize) -> Result<()> {
    if assign.len() != rows {
        return Err(shape_err(op, format!("{} assignments for {rows} rows", assign.len())));
    }
    if let Some(&bad) = assign.iter().find(|&&s| s >= segments) {
        return Err(NnError::Index { op, index: bad, bound: segments });
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dice_terms(logits: &[f64], target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut s = 0.0;
    for (&l, &t) in logits.iter().zip(target) {
        let p = sigmoid(l);
        inter += p * t;
        s += p + t;
    }
    (inter, s)
}

/// Stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

fn masked_softmax(row: &mut [f64], scale: f64, allowed: Option<&[bool]>, uniform: bool) {
    let ok = |j: usize| allowed.map_or(true, |m| m[j]);
    if uniform {
        let n = (0..row.len()).filter(|&j| ok(j)).count().max(1) as f64;
        for (j, x) in row.iter_mut().enumerate() {
            *x = if ok(j) { 1.0 / n } else { 0.0 };
        }
        return;
    }
    let mut m = f64::NEG_INFINITY;
    for (j, x) in row.iter_mut().enumerate() {
        *x *= scale;
        if ok(j) && *x > m {
            m = *x;
        }
    }
    let mut z = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if ok(j) {
            *x = (*x - m).exp();
            z += *x;
        } else {
            *x = 0.0;
        }
    }
    if z > 0.0 {
        row.iter_mut().for_each(|x| *x /= z);
    }
}
