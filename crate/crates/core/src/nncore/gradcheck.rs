use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Result, Tape, Tensor, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub rel_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4 }
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `d f(x) / d x` for a scalar-valued tape function `f`.
pub fn gradcheck<F>(f: F, x: &Tensor, rel_tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_with(f, x, GradcheckConfig { rel_tol, ..Default::default() })
}

pub fn gradcheck_with<F>(f: F, x: &Tensor, cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).expect("leaf requires grad").to_vec();

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone(), false)?;
        let l = f(&mut tape, v)?;
        Ok(tape.value(l).item())
    };
    let mut report = GradcheckReport { max_rel_err: 0.0, checked: 0, worst_index: 0, pass: true };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - cfg.step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * cfg.step);
        record(&mut report, i, rel_err(analytic[i], numeric));
    }
    report.pass = report.max_rel_err <= cfg.rel_tol;
    Ok(report)
}

fn record(report: &mut GradcheckReport, i: usize, e: f64) {
    report.checked += 1;
    if e > report.max_rel_err || e.is_nan() {
        report.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
        report.worst_index = i;
    }
}

/// Gradient check over every entry of a parameter store (or a random sample
/// of at most `max_per_param` entries per parameter). `loss` runs a full
/// forward pass on a fresh tape and returns the scalar loss var.
pub fn gradcheck_params<F>(
    store: &mut ParamStore,
    loss: F,
    cfg: GradcheckConfig,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    tape.backward(l)?;
    store.accumulate_grads(&tape);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport { max_rel_err: 0.0, checked: 0, worst_index: 0, pass: true };
    let ids: Vec<_> = store.ids().collect();
    let mut flat_offset = 0;
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.get(id).value.numel();
        if !store.get(id).requires_grad {
            flat_offset += n;
            continue;
        }
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(cap) = max_per_param {
            if n > cap {
                entries.shuffle(&mut rng);
                entries.truncate(cap);
                entries.sort_unstable();
            }
        }
        for j in entries {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + cfg.step;
            let fp = eval_store(store, &loss)?;
            store.get_mut(id).value.data_mut()[j] = orig - cfg.step;
            let fm = eval_store(store, &loss)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            record(&mut report, flat_offset + j, rel_err(analytic[pi][j], numeric));
        }
        flat_offset += n;
    }
    report.pass = report.max_rel_err <= cfg.rel_tol;
    Ok(report)
}

fn eval_store<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    Ok(tape.value(l).item())
}
