//! Generates one synthetic room, clusters it into super-points and writes it
//! as a JSONL scene record.
//!
//! cargo run --example generate_scene -- [seed] [out.jsonl]

use r2seg::scenekit::*;

fn main() -> r2seg::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let out = args.next().unwrap_or_else(|| "scene.jsonl".into());

    let spec = SceneSpec { points: 2048, ..Default::default() };
    let (scene, cloud) = generate_scene("demo", seed, &spec)?;
    let rec = SceneRecord::new(scene, cloud, DEFAULT_CELL);

    println!("room {:?}, {} points, {} super-points", rec.scene.room, rec.cloud.len(), rec.superpoints.count);
    for o in &rec.scene.objects {
        let own = rec.cloud.points_of(&[o.instance_id]).len();
        let best = best_superpoint_iou(&rec.cloud, &rec.superpoints, o.instance_id);
        println!(
            "  #{} {:<10} {:<7} at ({:.2}, {:.2})  {own:>4} pts  best super-point IoU {best:.3}",
            o.instance_id,
            o.category,
            o.color().unwrap_or("-"),
            o.centroid[0],
            o.centroid[1]
        );
    }
    write_scenes(std::path::Path::new(&out), &[rec])?;
    println!("wrote {out}");
    Ok(())
}
