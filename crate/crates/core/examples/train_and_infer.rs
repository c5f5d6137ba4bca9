//! Trains a small model on a generated corpus, saves and reloads the
//! checkpoint, then answers a validation question in every pipeline mode.

use r2seg::cli::{evaluate_part, generate_corpus, train_model, Part, RunConfig};
use r2seg::r2s::{PipelineMode, PriorSource};
use r2seg::trainer::{load_checkpoint, save_checkpoint};

fn main() -> r2seg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = RunConfig::default();
    cfg.data.scenes = 30;
    cfg.data.points = 768;
    cfg.model.dim = 32;
    cfg.train.steps = 200;
    cfg.train.lr_max = 1e-3;
    cfg.train.lr_min = 1e-5;

    let corpus = generate_corpus(&cfg)?;
    println!("{} samples over {} scenes", corpus.samples.len(), corpus.scenes.len());
    let (model, trace) = train_model(&corpus, &cfg, |r| {
        if r.step % 50 == 0 {
            println!("step {:>4}  loss {:.4}  (txt {:.3}, bce {:.3}, dice {:.3})", r.step, r.total, r.l_txt, r.l_bce, r.l_dice);
        }
    })?;
    println!("final loss {:.4}", trace.last().map_or(f64::NAN, |r| r.total));

    let path = std::env::temp_dir().join("r2seg_example.ckpt");
    save_checkpoint(&model, &path)?;
    let model = load_checkpoint(&path)?;

    let (_, sample) = corpus.part(Part::Val)[0];
    let rec = corpus.scenes.iter().find(|r| r.scene.scene_id == sample.scene_id).unwrap();
    println!("\nQ: {}\nexpected: {}", sample.question, sample.answer);
    for mode in PipelineMode::ALL {
        let inf = model.infer(rec, &sample.question, mode, &PriorSource::Predicted)?;
        println!("  {mode:<10} -> {:<24} ({} priors)", inf.answer, inf.n_priors);
    }
    let (m, _, _) = evaluate_part(&model, &corpus, Part::Val, PipelineMode::FullR2s, false)?;
    println!("\nvalidation gIoU {:.3}, Acc@0.25 {:.3}, Acc@0.5 {:.3}", m.giou, m.acc25, m.acc50);
    Ok(())
}
