//! Builds a small two-layer network on the tape, backpropagates a
//! cross-entropy loss and compares every gradient with central differences.

use r2seg::nncore::layers::{LayerNorm, Linear};
use r2seg::nncore::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 6, 16, true, &mut rng);
    let norm = LayerNorm::new(&mut store, "norm", 16);
    let l2 = Linear::new(&mut store, "l2", 16, 4, true, &mut rng);

    let x = Tensor::matrix(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let targets = [0, 3, 1, 1, 2];
    let loss = |st: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let input = tape.constant(x.clone())?;
        let h = l1.forward(tape, st, input)?;
        let h = norm.forward(tape, st, h)?;
        let h = tape.gelu(h)?;
        let logits = l2.forward(tape, st, h)?;
        tape.cross_entropy(logits, &targets)
    };

    let mut tape = Tape::new();
    let l = loss(&store, &mut tape)?;
    println!("loss {:.6} over {} parameters", tape.value(l).item(), store.num_scalars());

    let report = gradcheck_params(&mut store, loss, GradcheckConfig::default(), None, 0)?;
    println!(
        "checked {} entries, max relative error {:.2e} -> {}",
        report.checked,
        report.max_rel_err,
        if report.pass { "ok" } else { "MISMATCH" }
    );
    Ok(())
}
