//! Encodes a room into per-super-point features and pools them under a few
//! object masks, the way step-one masks become step-two priors.

use r2seg::backbone::{Backbone, BackboneConfig};
use r2seg::nncore::{ParamStore, Tape};
use r2seg::r2s::mask_pool;
use r2seg::scenekit::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> r2seg::Result<()> {
    let spec = SceneSpec { points: 1024, ..Default::default() };
    let (scene, cloud) = generate_scene("demo", 3, &spec)?;
    let rec = SceneRecord::new(scene, cloud, DEFAULT_CELL);

    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, BackboneConfig { dim: 32, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let sp = backbone.superpoint_features(&mut tape, &store, &rec.cloud, &rec.superpoints)?;
    let fp = tape.value(sp.features).clone();
    println!("{} points -> {} super-point features of width {}", rec.cloud.len(), fp.rows(), fp.cols());

    let ids: Vec<u32> = rec.scene.objects.iter().map(|o| o.instance_id).collect();
    let mut masks = gt_superpoint_masks(&rec.sp_labels, &ids);
    masks.push(vec![0.0; fp.rows()]);
    let pooled = mask_pool(&fp, &masks)?;
    for (i, row) in pooled.rows.to_rows().iter().enumerate() {
        let name = rec.scene.objects.get(i).map_or("(empty mask)", |o| o.category.as_str());
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  {name:<12} |f_r| = {norm:.3}  fallback {}", pooled.fallback[i]);
    }
    Ok(())
}
