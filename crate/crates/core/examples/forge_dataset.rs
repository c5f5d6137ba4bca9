//! Synthesises reasoning questions over generated rooms, runs the filter
//! chain and prints corpus statistics and a scene-level split.

use std::collections::HashMap;

use r2seg::reasonforge::*;
use r2seg::scenekit::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> r2seg::Result<()> {
    let spec = SceneSpec { points: 512, ..Default::default() };
    let mut scenes = Vec::new();
    let mut raw = Vec::new();
    for i in 0..40u64 {
        let (scene, _) = generate_scene(&format!("scene_{i:05}"), i, &spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        raw.extend(synthesize(&scene, &RelationSpec::all(), 4, &mut rng));
        scenes.push(scene);
    }
    // a couple of deliberately broken samples so the report has drops
    let mut broken = raw[0].clone();
    broken.question = "which chair is in the left of the door ?".into();
    raw.push(broken);
    let mut broken = raw[1].clone();
    broken.target_instance_ids = vec![404];
    raw.push(broken);

    let index: HashMap<&str, &Scene> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let (kept, report) = filter_chain(&raw, &index, &FilterConfig::default());
    println!("{} synthesised, {} kept", report.input_count, report.kept);
    for (rule, n) in report.dropped_by_rule.iter().filter(|(_, &n)| n > 0) {
        println!("  dropped by {rule}: {n}");
    }

    for s in kept.iter().take(3) {
        println!("\nQ: {}", s.question);
        for st in &s.reasoning_steps {
            println!("   - {} {:?}", st.text, st.relevant_instance_ids);
        }
        println!("A: {} {:?}", s.answer, s.target_instance_ids);
    }

    let st = dataset_stats(&kept);
    println!("\n{} samples, {:.1} question words, {:.1} objects per sample", st.count, st.avg_words, st.avg_objects);
    let ids: Vec<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();
    let split = split_scenes(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(0));
    println!("split: {} train scenes, {} val scenes", split.train.len(), split.val.len());
    Ok(())
}
