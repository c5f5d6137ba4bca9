use std::rc::Rc;

use proptest::prelude::*;
use r2seg::nncore::{gradcheck, AttnOpts, NnError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so that
/// no gradient vanishes by symmetry.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> r2seg::nncore::Result<Var> {
    let (r, c) = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_t(&mut rng, r, c, 1.0))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

fn check<F>(name: &str, x: &Tensor, f: F)
where
    F: Fn(&mut Tape, Var) -> r2seg::nncore::Result<Var>,
{
    let rep = gradcheck(f, x, TOL).unwrap();
    assert!(rep.pass, "{name}: max rel err {} at {}", rep.max_rel_err, rep.worst_index);
}

#[test]
fn gradcheck_matmul_both_sides() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let a = rand_t(&mut rng, 3, 4, 1.0);
        let b = rand_t(&mut rng, 4, 5, 1.0);
        let bt = rand_t(&mut rng, 5, 4, 1.0);
        check("matmul lhs", &a, |t, x| {
            let bv = t.constant(b.clone())?;
            let y = t.matmul(x, bv, false)?;
            weighted_sum(t, y, s)
        });
        check("matmul rhs", &b, |t, x| {
            let av = t.constant(a.clone())?;
            let y = t.matmul(av, x, false)?;
            weighted_sum(t, y, s)
        });
        check("matmul rhs^T", &bt, |t, x| {
            let av = t.constant(a.clone())?;
            let y = t.matmul(av, x, true)?;
            weighted_sum(t, y, s)
        });
        check("matmul lhs (rhs^T)", &a, |t, x| {
            let bv = t.constant(bt.clone())?;
            let y = t.matmul(x, bv, true)?;
            weighted_sum(t, y, s)
        });
    }
}

#[test]
fn gradcheck_elementwise_ops() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let a = rand_t(&mut rng, 3, 4, 2.0);
        let b = rand_t(&mut rng, 3, 4, 2.0);
        let row = rand_t(&mut rng, 1, 4, 2.0);
        check("add", &a, |t, x| {
            let bv = t.constant(b.clone())?;
            let y = t.add(x, bv)?;
            weighted_sum(t, y, s)
        });
        check("add broadcast row", &row, |t, x| {
            let av = t.constant(a.clone())?;
            let y = t.add(av, x)?;
            weighted_sum(t, y, s)
        });
        check("mul", &a, |t, x| {
            let bv = t.constant(b.clone())?;
            let y = t.mul(x, bv)?;
            weighted_sum(t, y, s)
        });
        check("scale", &a, |t, x| {
            let y = t.scale(x, -1.7)?;
            weighted_sum(t, y, s)
        });
        check("gelu", &a, |t, x| {
            let y = t.gelu(x)?;
            weighted_sum(t, y, s)
        });
        check("sigmoid", &a, |t, x| {
            let y = t.sigmoid(x)?;
            weighted_sum(t, y, s)
        });
        check("mean", &a, |t, x| {
            let y = t.mul(x, x)?;
            t.mean(y)
        });
        check("sum", &a, |t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        });
    }
}

#[test]
fn gradcheck_softmax_then_weighted_sum() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + s);
        let a = rand_t(&mut rng, 4, 6, 3.0);
        check("softmax", &a, |t, x| {
            let y = t.softmax(x)?;
            weighted_sum(t, y, s)
        });
    }
}

#[test]
fn gradcheck_layernorm_all_inputs() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + s);
        let x = rand_t(&mut rng, 3, 5, 2.0);
        let g = rand_t(&mut rng, 1, 5, 1.5);
        let b = rand_t(&mut rng, 1, 5, 1.0);
        check("layernorm x", &x, |t, v| {
            let (gv, bv) = (t.constant(g.clone())?, t.constant(b.clone())?);
            let y = t.layernorm(v, gv, bv)?;
            weighted_sum(t, y, s)
        });
        check("layernorm gamma", &g, |t, v| {
            let (xv, bv) = (t.constant(x.clone())?, t.constant(b.clone())?);
            let y = t.layernorm(xv, v, bv)?;
            weighted_sum(t, y, s)
        });
        check("layernorm beta", &b, |t, v| {
            let (xv, gv) = (t.constant(x.clone())?, t.constant(g.clone())?);
            let y = t.layernorm(xv, gv, v)?;
            weighted_sum(t, y, s)
        });
    }
}

#[test]
fn gradcheck_row_ops() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + s);
        let table = rand_t(&mut rng, 6, 3, 1.0);
        let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..6)).collect();
        check("embedding_lookup", &table, |t, x| {
            let y = t.embedding_lookup(x, &ids)?;
            weighted_sum(t, y, s)
        });
        let other = rand_t(&mut rng, 2, 3, 1.0);
        check("concat_rows", &table, |t, x| {
            let o = t.constant(other.clone())?;
            let y = t.concat_rows(&[o, x, o])?;
            weighted_sum(t, y, s)
        });
        check("slice_rows", &table, |t, x| {
            let y = t.slice_rows(x, 1, 4)?;
            weighted_sum(t, y, s)
        });
        let assign: Vec<usize> = (0..6).map(|i| i % 3).collect();
        check("segment_mean", &table, |t, x| {
            let y = t.segment_mean(x, &assign, 3)?;
            weighted_sum(t, y, s)
        });
        check("segment_max", &table, |t, x| {
            let y = t.segment_max(x, &assign, 3)?;
            weighted_sum(t, y, s)
        });
    }
}

#[test]
fn gradcheck_attention_q_k_v_masked_and_unmasked() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
        let q = rand_t(&mut rng, 3, 4, 1.0);
        let k = rand_t(&mut rng, 5, 4, 1.0);
        let v = rand_t(&mut rng, 5, 4, 1.0);
        let mask: Rc<[bool]> = (0..15).map(|i| i % 5 <= i / 5 + 1).collect::<Vec<_>>().into();
        for opts in [AttnOpts::default(), AttnOpts { allowed: Some(mask.clone()), uniform: false }] {
            check("attention q", &q, |t, x| {
                let (kv, vv) = (t.constant(k.clone())?, t.constant(v.clone())?);
                let y = t.attention(x, kv, vv, 2, &opts)?;
                weighted_sum(t, y, s)
            });
            check("attention k", &k, |t, x| {
                let (qv, vv) = (t.constant(q.clone())?, t.constant(v.clone())?);
                let y = t.attention(qv, x, vv, 2, &opts)?;
                weighted_sum(t, y, s)
            });
            check("attention v", &v, |t, x| {
                let (qv, kv) = (t.constant(q.clone())?, t.constant(k.clone())?);
                let y = t.attention(qv, kv, x, 2, &opts)?;
                weighted_sum(t, y, s)
            });
        }
    }
}

#[test]
fn gradcheck_losses() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + s);
        let logits = rand_t(&mut rng, 4, 7, 3.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
        check("cross_entropy", &logits, |t, x| t.cross_entropy(x, &targets));
        let m = rand_t(&mut rng, 3, 5, 3.0);
        let gt: Vec<f64> = (0..15).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        check("bce_with_logits", &m, |t, x| t.bce_with_logits(x, &gt));
        check("dice_loss", &m, |t, x| t.dice_loss(x, &gt, 1.0));
    }
}

#[test]
fn two_layer_mlp_cross_entropy_matches_finite_differences() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + s);
        let input = rand_t(&mut rng, 5, 4, 1.0);
        let w1 = rand_t(&mut rng, 4, 8, 0.7);
        let w2 = rand_t(&mut rng, 8, 3, 0.7);
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let net = |t: &mut Tape, a: Var, b: Var| -> r2seg::nncore::Result<Var> {
            let x = t.constant(input.clone())?;
            let h = t.matmul(x, a, false)?;
            let h = t.gelu(h)?;
            let o = t.matmul(h, b, false)?;
            t.cross_entropy(o, &targets)
        };
        check("mlp w1", &w1, |t, x| {
            let b = t.constant(w2.clone())?;
            net(t, x, b)
        });
        check("mlp w2", &w2, |t, x| {
            let a = t.constant(w1.clone())?;
            net(t, a, x)
        });
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn single_key_attention_returns_value_row() {
    let mut t = Tape::new();
    let q = t.constant(Tensor::matrix(2, 4, vec![0.3, -1.0, 2.0, 0.1, 5.0, 4.0, -3.0, 2.0]).unwrap()).unwrap();
    let k = t.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let v = t.constant(Tensor::matrix(1, 4, vec![0.25, -7.5, 3.0, 11.0]).unwrap()).unwrap();
    let y = t.attention(q, k, v, 2, &AttnOpts::default()).unwrap();
    assert_eq!(t.value(y).row(0), &[0.25, -7.5, 3.0, 11.0]);
    assert_eq!(t.value(y).row(1), &[0.25, -7.5, 3.0, 11.0]);
}

#[test]
fn matmul_matches_hand_computed_integers() {
    // brute-force triple loop for [[1,2,3],[4,5,6]] x [[7,8],[9,10],[11,12]]
    let a = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
    let b = [[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]];
    let mut want = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for l in 0..3 {
                want[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    assert_eq!(want, [[58.0, 64.0], [139.0, 154.0]]);
    let mut t = Tape::new();
    let av = t.constant(Tensor::matrix(2, 3, a.concat()).unwrap()).unwrap();
    let bv = t.constant(Tensor::matrix(3, 2, b.concat()).unwrap()).unwrap();
    let c = t.matmul(av, bv, false).unwrap();
    assert_eq!(t.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn linear_and_sigmoid_scalar_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.5), true).unwrap();
    let y = t.scale(x, 3.0).unwrap();
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0), true).unwrap();
    let y = t.sigmoid(x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.25]);
}

#[test]
fn backward_twice_doubles_leaf_grads() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap(), true).unwrap();
    let y = t.mul(x, x).unwrap();
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    let once = t.grad(x).unwrap().to_vec();
    t.backward(l).unwrap();
    let twice = t.grad(x).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), true).unwrap();
    assert_eq!(t.backward(x), Err(NnError::NotScalar(vec![1, 2])));
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(2, 3)).unwrap();
    let b = t.constant(Tensor::zeros(2, 3)).unwrap();
    match t.matmul(a, b, false) {
        Err(NnError::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("2x3"));
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    assert!(matches!(
        t.constant(Tensor::scalar(f64::NAN)),
        Err(NnError::NonFinite { .. })
    ));
    let x = t.constant(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(t.mul(x, x), Err(NnError::NonFinite { op: "mul" })));
}

#[test]
fn gradcheck_identity_is_exact_enough() {
    let x = Tensor::matrix(1, 3, vec![0.1, 0.2, -0.3]).unwrap();
    let rep = gradcheck(|t, v| t.sum(v), &x, 1e-4).unwrap();
    assert!(rep.pass);
    assert!(rep.max_rel_err < 1e-9);
}

#[test]
fn gradcheck_flags_a_wrong_backward_rule() {
    // x^2 with a backward that forgets the factor 2
    let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
    let rep = gradcheck(
        |t, v| {
            let val = t.value(v).clone();
            let sq: Vec<f64> = val.data().iter().map(|a| a * a).collect();
            let out = Tensor::matrix(1, 3, sq).unwrap();
            let xs = val.data().to_vec();
            let y = t.custom(&[v], out, Rc::new(move |g: &[f64]| vec![g.iter().zip(&xs).map(|(g, x)| g * x).collect()]))?;
            t.sum(y)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(!rep.pass);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let q = t.constant(rand_t(&mut rng, 6, 8, 1.0)).unwrap();
        let k = t.constant(rand_t(&mut rng, 9, 8, 1.0)).unwrap();
        let y = t.attention(q, k, k, 4, &AttnOpts::default()).unwrap();
        let y = t.softmax(y).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn layernorm_normalises_rows_before_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut t = Tape::new();
        let x = t.constant(rand_t(&mut rng, 4, 16, 5.0)).unwrap();
        let g = t.constant(Tensor::matrix(1, 16, vec![1.0; 16]).unwrap()).unwrap();
        let b = t.constant(Tensor::zeros(1, 16)).unwrap();
        let y = t.layernorm(x, g, b).unwrap();
        for row in t.value(y).to_rows() {
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 4, vals).unwrap()).unwrap();
        let y = t.softmax(x).unwrap();
        for row in t.value(y).to_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_attention_ignores_padding_keys(vals in proptest::collection::vec(-3.0f64..3.0, 40), pad in 1usize..4) {
        // 2 queries, 6 keys, the last `pad` keys are padding
        let mut t = Tape::new();
        let q = t.constant(Tensor::matrix(2, 4, vals[..8].to_vec()).unwrap()).unwrap();
        let k = t.constant(Tensor::matrix(6, 4, vals[8..32].to_vec()).unwrap()).unwrap();
        let allowed: Rc<[bool]> = (0..12).map(|i| i % 6 < 6 - pad).collect::<Vec<_>>().into();
        let y = t.attention(q, k, k, 2, &AttnOpts { allowed: Some(allowed), uniform: false }).unwrap();
        let w = t.attention_weights(y).unwrap();
        for row in w.chunks(6) {
            let live: f64 = row[..6 - pad].iter().sum();
            prop_assert!((live - 1.0).abs() < 1e-6);
            prop_assert!(row[6 - pad..].iter().all(|&p| p == 0.0));
        }
    }
}
