//! Shows the instruction and target token sequences each pipeline mode
//! trains on for one generated question.

use r2seg::r2s::*;
use r2seg::reasonforge::{synthesize, RelationSpec};
use r2seg::scenekit::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> r2seg::Result<()> {
    let spec = SceneSpec { points: 512, ..Default::default() };
    let (scene, cloud) = generate_scene("demo", 11, &spec)?;
    let rec = SceneRecord::new(scene, cloud, DEFAULT_CELL);
    let sample = synthesize(&rec.scene, &RelationSpec::all(), 0, &mut ChaCha8Rng::seed_from_u64(0))
        .into_iter()
        .max_by_key(|s| s.relevant_ids().len())
        .expect("scene supports at least one question");
    let model = R2sModel::new(ModelConfig::default(), build_vocabulary(std::slice::from_ref(&sample), &[&rec.scene]), 0)?;

    println!("question: {}\n", sample.question);
    for mode in PipelineMode::ALL {
        println!("== {mode}");
        for st in model.stage_inputs(&rec, &sample, mode, &sample.relevant_ids())? {
            println!("  [{:?}] {}", st.stage, model.vocab.decode(&st.instruction));
            println!("  -> {}   ({} masks)", model.vocab.decode(&st.targets), st.seg_targets.len());
        }
    }
    println!("\nalternative phrasings:");
    for t in template_pack() {
        println!("  {:?}: {}", t.stage, t.pattern);
    }
    Ok(())
}
