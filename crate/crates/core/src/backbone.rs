//! Point encoder and super-point pooling.
//!
//! Each point is embedded by a shared MLP, mixed with mean and max statistics
//! of its super-point, passed through one more pointwise layer and normalised.
//! Every stage is permutation-equivariant over points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nncore::layers::{LayerNorm, Linear};
use crate::nncore::{ParamStore, Result, Tape, Tensor, Var};
use crate::scenekit::{PointCloud, SuperPointMap};

pub const INPUT_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    /// Coordinates are centred on the cloud's bounding box and divided by this.
    pub coord_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { dim: 64, coord_scale: 3.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    embed: Linear,
    mix_point: Linear,
    mix_mean: Linear,
    mix_max: Linear,
    out: Linear,
    norm: LayerNorm,
}

/// Super-point features `P x D` together with the partition they pool over.
#[derive(Clone, Copy, Debug)]
pub struct SuperPointFeatures<'a> {
    pub features: Var,
    pub map: &'a SuperPointMap,
}

/// Network inputs: centred, scaled coordinates and centred colours.
pub fn point_inputs(cloud: &PointCloud, coord_scale: f64) -> Tensor {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.positions {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i] as f64);
            hi[i] = hi[i].max(p[i] as f64);
        }
    }
    let center = [0, 1, 2].map(|i| (lo[i] + hi[i]) / 2.0);
    let mut data = Vec::with_capacity(cloud.len() * INPUT_DIM);
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for i in 0..3 {
            data.push((p[i] as f64 - center[i]) / coord_scale);
        }
        for v in c {
            data.push(*v as f64 - 0.5);
        }
    }
    Tensor::matrix(cloud.len(), INPUT_DIM, data).expect("consistent point cloud")
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        Self {
            embed: Linear::new(store, "backbone.embed", INPUT_DIM, d, true, rng),
            mix_point: Linear::new(store, "backbone.mix_point", d, d, true, rng),
            mix_mean: Linear::new(store, "backbone.mix_mean", d, d, false, rng),
            mix_max: Linear::new(store, "backbone.mix_max", d, d, false, rng),
            out: Linear::new(store, "backbone.out", d, d, true, rng),
            norm: LayerNorm::new(store, "backbone.norm", d),
            cfg,
        }
    }

    /// Dense per-point features `N x D`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, cloud: &PointCloud, map: &SuperPointMap) -> Result<Var> {
        let x = tape.constant(point_inputs(cloud, self.cfg.coord_scale))?;
        self.encode_inputs(tape, store, x, map)
    }

    /// [`encode`](Self::encode) from an explicit input matrix `N x 6`.
    pub fn encode_inputs(&self, tape: &mut Tape, store: &ParamStore, x: Var, map: &SuperPointMap) -> Result<Var> {
        let h1 = self.embed.forward(tape, store, x)?;
        let h1 = tape.gelu(h1)?;
        let mean = tape.segment_mean(h1, &map.assignment, map.count)?;
        let max = tape.segment_max(h1, &map.assignment, map.count)?;
        // Project per super-point, then broadcast back to the member points.
        let a = self.mix_mean.forward(tape, store, mean)?;
        let b = self.mix_max.forward(tape, store, max)?;
        let stats = tape.add(a, b)?;
        let stats = tape.embedding_lookup(stats, &map.assignment)?;
        let h2 = self.mix_point.forward(tape, store, h1)?;
        let h2 = tape.add(h2, stats)?;
        let h2 = tape.gelu(h2)?;
        let h3 = self.out.forward(tape, store, h2)?;
        let h3 = tape.gelu(h3)?;
        self.norm.forward(tape, store, h3)
    }

    /// Encode and pool in one call.
    pub fn superpoint_features<'a>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cloud: &PointCloud,
        map: &'a SuperPointMap,
    ) -> Result<SuperPointFeatures<'a>> {
        let dense = self.encode(tape, store, cloud, map)?;
        pool_superpoints(tape, dense, map)
    }
}

/// Row `p` of the result is the mean of the dense rows assigned to `p`.
pub fn pool_superpoints<'a>(tape: &mut Tape, dense: Var, map: &'a SuperPointMap) -> Result<SuperPointFeatures<'a>> {
    let features = tape.segment_mean(dense, &map.assignment, map.count)?;
    Ok(SuperPointFeatures { features, map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pools_two_members_to_their_mean() {
        let mut tape = Tape::new();
        let dense = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap()).unwrap();
        let map = SuperPointMap { assignment: vec![0, 0], count: 1 };
        let sp = pool_superpoints(&mut tape, dense, &map).unwrap();
        assert_eq!(tape.value(sp.features).data(), &[2.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_the_norm_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, BackboneConfig { dim: 8, coord_scale: 1.0 }, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let p = store.get_mut(id);
            let v = if name.ends_with(".beta") { 0.25 } else { 0.0 };
            p.value.data_mut().iter_mut().for_each(|x| *x = v);
        }
        let cloud = PointCloud {
            positions: vec![[0.0, 0.0, 0.0], [1.0, 2.0, 0.5], [3.0, 1.0, 1.0]],
            colors: vec![[0.1, 0.2, 0.3]; 3],
            instance_of: vec![-1; 3],
        };
        let map = SuperPointMap { assignment: vec![0, 1, 1], count: 2 };
        let mut tape = Tape::new();
        let out = bb.encode(&mut tape, &store, &cloud, &map).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.25));
    }
}
