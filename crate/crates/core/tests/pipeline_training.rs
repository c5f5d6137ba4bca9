use std::collections::BTreeSet;

use proptest::prelude::*;
use r2seg::evalkit::iou;
use r2seg::langmodel::{OBJ, SEG};
use r2seg::nncore::{CosineSchedule, Tensor};
use r2seg::r2s::*;
use r2seg::scenekit::*;
use r2seg::trainer::*;
use r2seg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---- mask pooling ----------------------------------------------------------------

#[test]
fn one_hot_mask_selects_the_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fp = rand_matrix(&mut rng, 6, 4);
    for j in 0..6 {
        let mut m = vec![0.0; 6];
        m[j] = 1.0;
        let pooled = mask_pool(&fp, &[m]).unwrap();
        assert_eq!(pooled.rows.row(0), fp.row(j));
        assert_eq!(pooled.fallback, vec![false]);
    }
}

#[test]
fn uniform_mask_gives_the_mean() {
    let fp = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 3.0]]).unwrap();
    let pooled = mask_pool(&fp, &[vec![0.4; 3]]).unwrap();
    for (a, b) in pooled.rows.row(0).iter().zip([3.0, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    // an all-zero mask falls back to the same mean
    let empty = mask_pool(&fp, &[vec![0.0; 3]]).unwrap();
    assert_eq!(empty.fallback, vec![true]);
    assert_eq!(empty.rows.row(0), pooled.rows.row(0));
}

#[test]
fn mask_length_mismatch_is_an_error() {
    assert!(mask_pool(&Tensor::zeros(3, 2), &[vec![1.0; 4]]).is_err());
}

proptest! {
    #[test]
    fn pooled_rows_stay_in_the_convex_hull(seed in 0u64..100_000, p in 1usize..12, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fp = rand_matrix(&mut rng, p, 5);
        let probs: Vec<Vec<f64>> = (0..k).map(|_| (0..p).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let pooled = mask_pool(&fp, &probs).unwrap();
        for i in 0..k {
            for c in 0..5 {
                let col: Vec<f64> = (0..p).map(|r| fp.get(r, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = pooled.rows.get(i, c);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

// ---- a small world -------------------------------------------------------------

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        dim: 32,
        heads: 2,
        latent_queries: 8,
        fusion_max_len: 64,
        lm_max_len: 128,
        max_new_tokens: 24,
        ..Default::default()
    }
}

/// A scene with exactly one chair and one desk among a few other objects.
fn chair_desk_scene() -> (SceneRecord, u32, u32) {
    let spec = SceneSpec { points: 768, min_objects: 3, max_objects: 4, ..Default::default() };
    for seed in 0..500 {
        let (scene, cloud) = generate_scene("fx", seed, &spec).unwrap();
        let of = |c: &str| scene.objects.iter().filter(|o| o.category == c).map(|o| o.instance_id).collect::<Vec<_>>();
        if let ([chair], [desk]) = (of("chair").as_slice(), of("desk").as_slice()) {
            let (c, d) = (*chair, *desk);
            return (SceneRecord::new(scene, cloud, DEFAULT_CELL), c, d);
        }
    }
    panic!("no seed gives one chair and one desk");
}

fn chair_desk_sample(chair: u32, desk: u32) -> ReasonSample {
    ReasonSample {
        scene_id: "fx".into(),
        question: "Where can I sit while working at the desk?".into(),
        reasoning_steps: vec![
            ReasonStep { text: "There is a desk in the room.".into(), relevant_instance_ids: vec![desk] },
            ReasonStep { text: "The chair next to it is for sitting.".into(), relevant_instance_ids: vec![chair] },
        ],
        answer: "the chair".into(),
        target_instance_ids: vec![chair],
    }
}

fn tiny_model(rec: &SceneRecord, samples: &[ReasonSample], seed: u64) -> R2sModel {
    R2sModel::new(tiny_cfg(), build_vocabulary(samples, &[&rec.scene]), seed).unwrap()
}

fn tiny_train(mode: PipelineMode, steps: usize) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        batch_size: 1,
        lr_max: 3e-3,
        lr_min: 3e-5,
        weight_decay: 0.0,
        augment: AugmentConfig::OFF,
        ..Default::default()
    }
}

#[test]
fn stage_layouts_follow_the_mode() {
    let (rec, chair, desk) = chair_desk_scene();
    let s = chair_desk_sample(chair, desk);
    let model = tiny_model(&rec, std::slice::from_ref(&s), 0);
    let relevant = s.relevant_ids();
    let count = |v: &[usize], id: usize| v.iter().filter(|&&t| t == id).count();

    let base = model.stage_inputs(&rec, &s, PipelineMode::Baseline, &relevant).unwrap();
    assert_eq!(base.len(), 1);
    assert_eq!(count(&base[0].instruction, OBJ), 0);
    assert_eq!(count(&base[0].targets, SEG), 1);

    let full = model.stage_inputs(&rec, &s, PipelineMode::FullR2s, &relevant).unwrap();
    assert_eq!(full.len(), 2);
    assert_eq!(count(&full[0].targets, SEG), 2, "step 1 segments every related object");
    assert_eq!(full[0].seg_targets, gt_superpoint_masks(&rec.sp_labels, &relevant));
    assert_eq!(count(&full[1].instruction, OBJ), 2);
    assert_eq!(full[1].prior_masks.len(), 2);

    let text = model.stage_inputs(&rec, &s, PipelineMode::TextBased, &relevant).unwrap();
    assert_eq!(count(&text[1].instruction, OBJ), 0);
    assert!(text[1].prior_masks.is_empty());
    for w in ["desk", "chair"] {
        assert!(text[1].instruction.contains(&model.vocab.id(w)), "missing category word {w}");
    }

    let wo = model.stage_inputs(&rec, &s, PipelineMode::WoPr, &relevant).unwrap();
    assert_eq!(wo.len(), 1);
    assert_eq!(count(&wo[0].targets, SEG), 3);

    // no priors at all still renders a well-formed step 2
    let none = model.stage_inputs(&rec, &s, PipelineMode::FullR2s, &[]).unwrap();
    assert_eq!(count(&none[1].instruction, OBJ), 0);
    assert!(none[1].prior_masks.is_empty());
}

#[test]
fn every_mode_runs_and_is_deterministic() {
    let (rec, chair, desk) = chair_desk_scene();
    let s = chair_desk_sample(chair, desk);
    let model = tiny_model(&rec, std::slice::from_ref(&s), 1);
    for mode in PipelineMode::ALL {
        let a = model.infer(&rec, &s.question, mode, &PriorSource::Predicted).unwrap();
        let b = model.infer(&rec, &s.question, mode, &PriorSource::Predicted).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.step1.is_some(), mode.two_stage());
        assert_eq!(a.final_masks.logits.cols(), rec.superpoints.count);
    }
    // empty oracle prior set: step 2 proceeds with an empty prior block
    let inf = model.infer(&rec, &s.question, PipelineMode::FullR2s, &PriorSource::Oracle(vec![])).unwrap();
    assert_eq!(inf.n_priors, 0);
    assert!(inf.final_masks.logits.is_finite());
}

fn sp_iou(on: &[usize], gt_row: &[f64]) -> f64 {
    let p: BTreeSet<usize> = on.iter().copied().collect();
    let g: BTreeSet<usize> = gt_row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
    iou(&p, &g)
}

#[test]
fn overfit_step_one_finds_the_chair_and_the_desk() {
    let (rec, chair, desk) = chair_desk_scene();
    let s = chair_desk_sample(chair, desk);
    let samples = vec![s.clone()];
    let mut model = tiny_model(&rec, &samples, 2);
    let trace = train(&mut model, std::slice::from_ref(&rec), &samples, &tiny_train(PipelineMode::FullR2s, 300), |_| {}).unwrap();
    let last = trace.last().unwrap().total;
    assert!(last < trace[0].total / 10.0, "loss {} -> {last}", trace[0].total);

    let inf = model.infer(&rec, &s.question, PipelineMode::FullR2s, &PriorSource::Predicted).unwrap();
    let step1 = inf.step1.unwrap();
    assert!(step1.generation.seg_positions.len() >= 2, "step 1 said {:?}", step1.tokens);
    let masks = step1.masks.binary();
    for id in [desk, chair] {
        let gt = &gt_superpoint_masks(&rec.sp_labels, &[id])[0];
        let best = masks.iter().map(|m| sp_iou(m, gt)).fold(0.0, f64::max);
        assert!(best >= 0.5, "object {id}: best IoU {best}");
    }
    assert_eq!(inf.answer, "the chair");
}

// ---- losses ---------------------------------------------------------------------

#[test]
fn seg_losses_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let probs: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(0.01..0.99)).collect()).collect();
        let gt: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect()).collect();
        let (bce, dice) = seg_losses(&probs, &gt).unwrap();
        let mut b = 0.0;
        let mut d = 0.0;
        for k in 0..3 {
            let mut num = 1.0;
            let mut den = 1.0;
            for p in 0..5 {
                let (x, y) = (probs[k][p], gt[k][p]);
                b += if y == 1.0 { -x.ln() } else { -(1.0 - x).ln() };
                num += 2.0 * x * y;
                den += x + y;
            }
            d += 1.0 - num / den;
        }
        assert!((bce - b / 15.0).abs() < 1e-12);
        assert!((dice - d / 3.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn loss_breakdown_is_linear(t in 0.0f64..20.0, b in 0.0f64..5.0, d in 0.0f64..1.0, lambda in 0.0f64..3.0) {
        let cfg = LossConfig { lambda_txt: lambda, ..Default::default() };
        let r = total_loss(t, b, d, &cfg);
        prop_assert_eq!(r.total, lambda * t + b + d);
        let seg_only = total_loss(t, b, d, &LossConfig { lambda_txt: 0.0, ..Default::default() });
        prop_assert_eq!(seg_only.total, b + d);
    }
}

#[test]
fn default_loss_and_schedule_settings() {
    let l = LossConfig::default();
    assert_eq!((l.lambda_txt, l.w_bce, l.w_dice), (0.5, 1.0, 1.0));
    assert_eq!(total_loss(1.0, 2.0, 3.0, &l).total, 5.5);
    let t = TrainConfig::default();
    assert_eq!((t.lr_max, t.lr_min, t.weight_decay), (1e-4, 1e-6, 0.1));
    let s = CosineSchedule { lr_max: t.lr_max, lr_min: t.lr_min, total_steps: 500 };
    assert_eq!(s.lr(0), 1e-4);
    assert!((s.lr(499) - 1e-6).abs() < 1e-18);
}

// ---- augmentation -----------------------------------------------------------------

fn ten_object_scene() -> Scene {
    Scene {
        scene_id: "aug".into(),
        room: [6.0, 5.0, 3.0],
        objects: (0..10)
            .map(|i| SceneObject {
                instance_id: i,
                category: "chair".into(),
                centroid: [i as f64 * 0.5, 1.0, 0.45],
                extents: [0.4, 0.4, 0.9],
                attributes: vec!["red".into()],
            })
            .collect(),
    }
}

#[test]
fn omission_rate_matches_its_probability() {
    let scene = ten_object_scene();
    let gt = [0, 1, 2, 3, 4];
    let cfg = AugmentConfig { p_omit: 0.3, p_add: 0.0, k_add_max: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let trials = 10_000;
    let total: usize = (0..trials).map(|_| augment_priors(&gt, &scene, &cfg, &mut rng).len()).sum();
    let mean = total as f64 / trials as f64;
    assert!((mean - 3.5).abs() < 0.1, "mean survivors {mean}");
}

#[test]
fn augmentation_extremes() {
    let scene = ten_object_scene();
    let gt = [3, 1, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        assert_eq!(augment_priors(&gt, &scene, &AugmentConfig::OFF, &mut rng), gt);
        let all_gone = AugmentConfig { p_omit: 1.0, p_add: 0.0, k_add_max: 2 };
        assert!(augment_priors(&gt, &scene, &all_gone, &mut rng).is_empty());
    }
}

proptest! {
    #[test]
    fn augmentation_never_duplicates(seed in 0u64..100_000, p_omit in 0.0f64..1.0, p_add in 0.0f64..1.0, k in 0usize..5) {
        let scene = ten_object_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gt: Vec<u32> = Vec::new();
        for _ in 0..rng.gen_range(1..6) {
            let id = rng.gen_range(0..10);
            if !gt.contains(&id) {
                gt.push(id);
            }
        }
        let out = augment_priors(&gt, &scene, &AugmentConfig { p_omit, p_add, k_add_max: k }, &mut rng);
        let uniq: BTreeSet<u32> = out.iter().copied().collect();
        prop_assert_eq!(uniq.len(), out.len());
        // survivors keep their order and precede distractors
        let survivors: Vec<u32> = out.iter().copied().take_while(|id| gt.contains(id)).collect();
        prop_assert!(out[survivors.len()..].iter().all(|id| !gt.contains(id)));
        prop_assert!(out.len() - survivors.len() <= k);
        let mut last = 0;
        for id in &survivors {
            let pos = gt.iter().position(|g| g == id).unwrap();
            prop_assert!(pos >= last);
            last = pos;
        }
    }
}

// ---- training loop and checkpoints -------------------------------------------------

#[test]
fn training_is_deterministic_and_checkpoints_are_exact() {
    let (rec, chair, desk) = chair_desk_scene();
    let samples = vec![chair_desk_sample(chair, desk)];
    let cfg = TrainConfig { augment: AugmentConfig::default(), batch_size: 2, ..tiny_train(PipelineMode::FullR2s, 6) };
    let run = || {
        let mut m = tiny_model(&rec, &samples, 4);
        let trace = train(&mut m, std::slice::from_ref(&rec), &samples, &cfg, |_| {}).unwrap();
        (m, trace)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(ta, tb);
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&a, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for ((na, pa), (nb, pb)) in a.store.iter().zip(back.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(pa.value.data(), pb.value.data(), "{na}");
    }
    assert_eq!(back.vocab, a.vocab);
    let q = &samples[0].question;
    for mode in PipelineMode::ALL {
        assert_eq!(
            a.infer(&rec, q, mode, &PriorSource::Predicted).unwrap(),
            back.infer(&rec, q, mode, &PriorSource::Predicted).unwrap()
        );
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (rec, chair, desk) = chair_desk_scene();
    let model = tiny_model(&rec, &[chair_desk_sample(chair, desk)], 0);
    let bytes = checkpoint_bytes(&model);
    assert!(matches!(model_from_checkpoint_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(matches!(model_from_checkpoint_bytes(b"not a model at all"), Err(Error::Checkpoint(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(model_from_checkpoint_bytes(&extra), Err(Error::Checkpoint(_))));
}

#[test]
fn exploding_updates_stop_with_a_divergence_error() {
    let (rec, chair, desk) = chair_desk_scene();
    let samples = vec![chair_desk_sample(chair, desk)];
    let mut model = tiny_model(&rec, &samples, 0);
    let cfg = TrainConfig { lr_max: 1e300, lr_min: 1e300, grad_clip: 0.0, ..tiny_train(PipelineMode::Baseline, 20) };
    let err = train(&mut model, std::slice::from_ref(&rec), &samples, &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
}

#[test]
fn empty_training_set_is_an_error() {
    let (rec, chair, desk) = chair_desk_scene();
    let mut model = tiny_model(&rec, &[chair_desk_sample(chair, desk)], 0);
    assert!(train(&mut model, &[rec], &[], &tiny_train(PipelineMode::Baseline, 1), |_| {}).is_err());
}
