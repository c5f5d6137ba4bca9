//! Synthetic indoor scenes, voxel-grid super-points, and the `scene.jsonl` /
//! `samples.jsonl` file formats.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
/// Desk-scale super-point voxel edge in metres.
pub const DEFAULT_CELL: f64 = 0.25;
/// Voxel size of the full-scale sparse-convolution encoder; recorded, unused.
pub const FULL_SCALE_VOXEL: f64 = 0.02;
pub const DEFAULT_POINTS: usize = 4096;
/// Full-scale per-scene point sample.
pub const FULL_SCALE_POINTS: usize = 300_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance_id: u32,
    pub category: String,
    pub centroid: [f64; 3],
    pub extents: [f64; 3],
    pub attributes: Vec<String>,
}

impl SceneObject {
    pub fn volume(&self) -> f64 {
        self.extents[0] * self.extents[1] * self.extents[2]
    }

    pub fn color(&self) -> Option<&str> {
        self.attributes.iter().map(String::as_str).find(|a| color_rgb(a).is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub room: [f64; 3],
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.instance_id == id)
    }

    pub fn has(&self, id: u32) -> bool {
        self.object(id).is_some()
    }
}

/// Euclidean distance between object centroids.
pub fn centroid_distance(a: &SceneObject, b: &SceneObject) -> f64 {
    (0..3).map(|i| (a.centroid[i] - b.centroid[i]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    /// Instance id per point, `-1` for background.
    pub instance_of: Vec<i32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        let n = self.positions.len();
        if n == 0 || self.colors.len() != n || self.instance_of.len() != n {
            return Err(Error::Data(format!(
                "point cloud of {} positions, {} colors, {} labels",
                n,
                self.colors.len(),
                self.instance_of.len()
            )));
        }
        for &l in &self.instance_of {
            if l < -1 || (l >= 0 && !scene.has(l as u32)) {
                return Err(Error::Data(format!("point label {l} names no object in {}", scene.scene_id)));
            }
        }
        Ok(())
    }

    /// Indices of the points belonging to any of `ids`.
    pub fn points_of(&self, ids: &[u32]) -> Vec<usize> {
        self.instance_of
            .iter()
            .enumerate()
            .filter(|(_, &l)| l >= 0 && ids.contains(&(l as u32)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Dense super-point id per point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperPointMap {
    pub assignment: Vec<usize>,
    pub count: usize,
}

impl SuperPointMap {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.count];
        for (i, &s) in self.assignment.iter().enumerate() {
            m[s].push(i);
        }
        m
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut c = vec![0; self.count];
        for &s in &self.assignment {
            c[s] += 1;
        }
        c
    }
}

/// Voxel-grid clustering: points whose `floor(position / cell)` agree share a
/// super-point. Ids follow the lexicographic order of voxel keys, so the
/// labelling depends only on the set of positions.
pub fn build_superpoints(cloud: &PointCloud, cell: f64) -> SuperPointMap {
    assert!(cell > 0.0, "cell must be positive");
    let keys: Vec<[i64; 3]> = cloud
        .positions
        .iter()
        .map(|p| {
            [
                (p[0] as f64 / cell).floor() as i64,
                (p[1] as f64 / cell).floor() as i64,
                (p[2] as f64 / cell).floor() as i64,
            ]
        })
        .collect();
    let mut ids: BTreeMap<[i64; 3], usize> = keys.iter().map(|&k| (k, 0)).collect();
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    SuperPointMap {
        assignment: keys.iter().map(|k| ids[k]).collect(),
        count: ids.len(),
    }
}

/// Majority instance label per super-point (`-1` when background wins).
/// Ties go to the smaller label.
pub fn superpoint_labels(cloud: &PointCloud, map: &SuperPointMap) -> Vec<i32> {
    let mut counts: Vec<BTreeMap<i32, usize>> = vec![BTreeMap::new(); map.count];
    for (i, &s) in map.assignment.iter().enumerate() {
        *counts[s].entry(cloud.instance_of[i]).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|c| {
            let best = c.values().copied().max().unwrap_or(0);
            c.into_iter().find(|&(_, n)| n == best).map(|(l, _)| l).unwrap_or(-1)
        })
        .collect()
}

/// Ground-truth super-point masks (0/1 rows of length `P`) for each id.
pub fn gt_superpoint_masks(labels: &[i32], ids: &[u32]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| labels.iter().map(|&l| if l == id as i32 { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Best point-level IoU any union of super-points can reach for one instance.
/// Taking super-points in decreasing purity order and scanning prefixes is
/// optimal for a union of disjoint blocks.
pub fn best_superpoint_iou(cloud: &PointCloud, map: &SuperPointMap, instance: u32) -> f64 {
    let mut hit = vec![0usize; map.count];
    let sizes = map.sizes();
    let mut gt = 0usize;
    for (i, &s) in map.assignment.iter().enumerate() {
        if cloud.instance_of[i] == instance as i32 {
            hit[s] += 1;
            gt += 1;
        }
    }
    if gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..map.count).filter(|&s| hit[s] > 0).collect();
    order.sort_by(|&a, &b| {
        let pa = hit[a] as f64 / sizes[a] as f64;
        let pb = hit[b] as f64 / sizes[b] as f64;
        pb.partial_cmp(&pa).unwrap().then(a.cmp(&b))
    });
    let (mut inter, mut pred, mut best) = (0usize, 0usize, 0.0f64);
    for s in order {
        inter += hit[s];
        pred += sizes[s];
        best = best.max(inter as f64 / (pred + gt - inter) as f64);
    }
    best
}

// ---- generation ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    /// Nominal width, depth, height in metres.
    pub size: [f64; 3],
    pub colors: Vec<String>,
    /// Function word group, e.g. "sitting".
    pub function: String,
    /// Relative sampling weight.
    pub weight: f64,
}

fn cat(name: &str, size: [f64; 3], colors: &[&str], function: &str, weight: f64) -> CategorySpec {
    CategorySpec {
        name: name.into(),
        size,
        colors: colors.iter().map(|c| c.to_string()).collect(),
        function: function.into(),
        weight,
    }
}

pub fn default_palette() -> Vec<CategorySpec> {
    vec![
        cat("chair", [0.5, 0.5, 0.9], &["brown", "black", "red"], "sitting", 3.0),
        cat("sofa", [1.8, 0.9, 0.8], &["gray", "blue", "green"], "sitting", 1.0),
        cat("bed", [2.0, 1.5, 0.55], &["white", "blue"], "sleeping", 0.7),
        cat("table", [1.2, 0.8, 0.75], &["brown", "white"], "eating", 1.2),
        cat("desk", [1.2, 0.6, 0.75], &["brown", "black", "white"], "working", 1.2),
        cat("cabinet", [0.8, 0.5, 1.1], &["white", "brown", "gray"], "storing", 1.0),
        cat("bookshelf", [1.0, 0.35, 1.8], &["brown", "black"], "storing", 1.0),
        cat("lamp", [0.35, 0.35, 1.5], &["yellow", "white"], "lighting", 1.0),
        cat("door", [0.9, 0.12, 2.0], &["brown", "white"], "entering", 1.0),
        cat("television", [1.0, 0.25, 0.6], &["black"], "watching", 0.8),
        cat("plant", [0.4, 0.4, 0.8], &["green"], "decorating", 1.0),
    ]
}

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "brown" => [0.45, 0.30, 0.15],
        "black" => [0.10, 0.10, 0.10],
        "red" => [0.80, 0.15, 0.15],
        "gray" => [0.50, 0.50, 0.50],
        "blue" => [0.15, 0.30, 0.80],
        "green" => [0.20, 0.65, 0.25],
        "white" => [0.92, 0.92, 0.92],
        "yellow" => [0.90, 0.80, 0.20],
        _ => return None,
    })
}

const FLOOR_RGB: [f64; 3] = [0.70, 0.65, 0.55];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub room: [f64; 3],
    pub min_objects: usize,
    pub max_objects: usize,
    pub points: usize,
    /// Share of points sampled on the floor.
    pub floor_fraction: f64,
    /// Minimum footprint gap between objects and floor clearance around them.
    /// Keeping it above the super-point cell keeps super-points pure.
    pub clearance: f64,
    pub size_jitter: f64,
    pub color_jitter: f64,
    pub palette: Vec<CategorySpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: [6.0, 5.0, 3.0],
            min_objects: 5,
            max_objects: 9,
            points: DEFAULT_POINTS,
            floor_fraction: 0.15,
            clearance: 0.3,
            size_jitter: 0.15,
            color_jitter: 0.05,
            palette: default_palette(),
        }
    }
}

const PLACEMENT_RETRIES: usize = 200;
const LAYOUT_RESTARTS: usize = 50;

/// Generates one scene deterministically from `(seed, spec)`.
pub fn generate_scene(scene_id: &str, seed: u64, spec: &SceneSpec) -> Result<(Scene, PointCloud)> {
    if spec.min_objects < 2 || spec.max_objects < spec.min_objects {
        return Err(Error::Scene(format!(
            "object count range [{}, {}] must satisfy 2 <= min <= max",
            spec.min_objects, spec.max_objects
        )));
    }
    if spec.palette.is_empty() || spec.points == 0 {
        return Err(Error::Scene("empty palette or zero point budget".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let total_w: f64 = spec.palette.iter().map(|c| c.weight).sum();
    let mut drawn: Vec<(&CategorySpec, [f64; 3], &String)> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen::<f64>() * total_w;
        let c = spec
            .palette
            .iter()
            .find(|c| {
                pick -= c.weight;
                pick < 0.0
            })
            .unwrap_or(spec.palette.last().unwrap());
        let mut ext = c.size.map(|s| s * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter)));
        if rng.gen_bool(0.5) {
            ext.swap(0, 1);
        }
        drawn.push((c, ext, &c.colors[rng.gen_range(0..c.colors.len())]));
    }
    // A crowded draw sheds its last objects, down to `min_objects`.
    let centers = loop {
        match place_footprints(&mut rng, spec, &drawn.iter().map(|d| d.1).collect::<Vec<_>>()) {
            Ok(c) => break c,
            Err(e) if drawn.len() <= spec.min_objects => return Err(e),
            Err(_) => {
                log::debug!("scene {scene_id}: dropping one object to fit the room");
                drawn.pop();
            }
        }
    };
    let n = drawn.len();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut rgb: Vec<[f64; 3]> = Vec::with_capacity(n);
    for (i, ((c, ext, color), [cx, cy])) in drawn.into_iter().zip(centers).enumerate() {
        objects.push(SceneObject {
            instance_id: i as u32,
            category: c.name.clone(),
            centroid: [cx, cy, ext[2] / 2.0],
            extents: ext,
            attributes: vec![color.clone()],
        });
        rgb.push(color_rgb(color).unwrap_or([0.5; 3]));
    }

    // Point budget: floor share first, the rest by object surface area.
    let n_floor = ((spec.points as f64) * spec.floor_fraction).round() as usize;
    let n_obj = spec.points.saturating_sub(n_floor);
    let areas: Vec<f64> = objects.iter().map(|o| surface_area(&o.extents)).collect();
    let counts = largest_remainder(&areas, n_obj);

    let mut cloud = PointCloud { positions: Vec::new(), colors: Vec::new(), instance_of: Vec::new() };
    for (k, o) in objects.iter().enumerate() {
        for _ in 0..counts[k] {
            let p = sample_surface(&mut rng, o);
            cloud.positions.push(p.map(|v| v as f32));
            cloud.colors.push(jitter(&mut rng, rgb[k], spec.color_jitter));
            cloud.instance_of.push(o.instance_id as i32);
        }
    }
    let mut placed_floor = 0;
    let mut attempts = 0;
    while placed_floor < n_floor && attempts < n_floor * 200 + 1000 {
        attempts += 1;
        let x = rng.gen_range(0.0..spec.room[0]);
        let y = rng.gen_range(0.0..spec.room[1]);
        let near = objects.iter().any(|o| {
            (x - o.centroid[0]).abs() < o.extents[0] / 2.0 + spec.clearance
                && (y - o.centroid[1]).abs() < o.extents[1] / 2.0 + spec.clearance
        });
        if near {
            continue;
        }
        cloud.positions.push([x as f32, y as f32, 0.0]);
        cloud.colors.push(jitter(&mut rng, FLOOR_RGB, spec.color_jitter));
        cloud.instance_of.push(-1);
        placed_floor += 1;
    }
    if cloud.is_empty() {
        return Err(Error::Scene("no points generated".into()));
    }
    let scene = Scene { scene_id: scene_id.to_string(), room: spec.room, objects };
    Ok((scene, cloud))
}

/// Rejection-samples footprint centres, largest footprint first, restarting
/// the whole layout when one object finds no room.
fn place_footprints<R: Rng>(rng: &mut R, spec: &SceneSpec, ext: &[[f64; 3]]) -> Result<Vec<[f64; 2]>> {
    let mut order: Vec<usize> = (0..ext.len()).collect();
    order.sort_by(|&a, &b| (ext[b][0] * ext[b][1]).partial_cmp(&(ext[a][0] * ext[a][1])).unwrap().then(a.cmp(&b)));
    for e in ext {
        if e[0] + 2.0 * spec.clearance >= spec.room[0] || e[1] + 2.0 * spec.clearance >= spec.room[1] {
            return Err(Error::Scene(format!("object footprint {:.2}x{:.2} does not fit the room", e[0], e[1])));
        }
    }
    'layout: for _ in 0..LAYOUT_RESTARTS {
        let mut centers: Vec<Option<[f64; 2]>> = vec![None; ext.len()];
        for &i in &order {
            let hx = ext[i][0] / 2.0 + spec.clearance;
            let hy = ext[i][1] / 2.0 + spec.clearance;
            let mut found = None;
            for _ in 0..PLACEMENT_RETRIES {
                let cx = rng.gen_range(hx..spec.room[0] - hx);
                let cy = rng.gen_range(hy..spec.room[1] - hy);
                let clear = centers.iter().enumerate().all(|(j, c)| match c {
                    None => true,
                    Some([ox, oy]) => {
                        (cx - ox).abs() >= (ext[i][0] + ext[j][0]) / 2.0 + spec.clearance
                            || (cy - oy).abs() >= (ext[i][1] + ext[j][1]) / 2.0 + spec.clearance
                    }
                });
                if clear {
                    found = Some([cx, cy]);
                    break;
                }
            }
            match found {
                Some(c) => centers[i] = Some(c),
                None => continue 'layout,
            }
        }
        return Ok(centers.into_iter().map(|c| c.unwrap()).collect());
    }
    Err(Error::Scene(format!(
        "could not place {} objects without overlap after {LAYOUT_RESTARTS} layouts",
        ext.len()
    )))
}

fn surface_area(e: &[f64; 3]) -> f64 {
    // top plus four sides; the bottom rests on the floor
    e[0] * e[1] + 2.0 * e[2] * (e[0] + e[1])
}

fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn sample_surface<R: Rng>(rng: &mut R, o: &SceneObject) -> [f64; 3] {
    let [w, d, h] = o.extents;
    let [cx, cy, _] = o.centroid;
    let faces = [w * d, w * h, w * h, d * h, d * h];
    let total: f64 = faces.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut face = 4;
    for (i, a) in faces.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.gen_range(-0.5..0.5);
    let v = rng.gen_range(-0.5..0.5);
    let zv = rng.gen_range(0.0..1.0) * h;
    match face {
        0 => [cx + u * w, cy + v * d, h],
        1 => [cx + u * w, cy - d / 2.0, zv],
        2 => [cx + u * w, cy + d / 2.0, zv],
        3 => [cx - w / 2.0, cy + u * d, zv],
        _ => [cx + w / 2.0, cy + u * d, zv],
    }
}

fn jitter<R: Rng>(rng: &mut R, c: [f64; 3], amount: f64) -> [f32; 3] {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0) as f32)
}

// ---- records and files -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonStep {
    pub text: String,
    pub relevant_instance_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonSample {
    pub scene_id: String,
    pub question: String,
    pub reasoning_steps: Vec<ReasonStep>,
    pub answer: String,
    pub target_instance_ids: Vec<u32>,
}

impl ReasonSample {
    /// Relevant ids across all steps in first-mention order, without duplicates.
    pub fn relevant_ids(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for s in &self.reasoning_steps {
            for &id in &s.relevant_instance_ids {
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        }
        out
    }

    /// Checks the record against its scene: non-empty targets and every
    /// referenced id present.
    pub fn validate(&self, scene: &Scene) -> Result<()> {
        if self.target_instance_ids.is_empty() {
            return Err(Error::Data("sample without target".into()));
        }
        for id in self.target_instance_ids.iter().chain(self.relevant_ids().iter()) {
            if !scene.has(*id) {
                return Err(Error::Data(format!("id {id} not in scene {}", scene.scene_id)));
            }
        }
        Ok(())
    }
}

/// A scene together with its points and super-point partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene: Scene,
    pub cloud: PointCloud,
    pub cell: f64,
    pub superpoints: SuperPointMap,
    pub sp_labels: Vec<i32>,
}

impl SceneRecord {
    pub fn new(scene: Scene, cloud: PointCloud, cell: f64) -> Self {
        let superpoints = build_superpoints(&cloud, cell);
        let sp_labels = superpoint_labels(&cloud, &superpoints);
        Self { scene, cloud, cell, superpoints, sp_labels }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    format_version: u32,
    scene_id: String,
    room: [f64; 3],
    superpoint_cell: f64,
    objects: Vec<SceneObject>,
    num_points: usize,
    positions: String,
    colors: String,
    instance_of: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    format_version: u32,
    #[serde(flatten)]
    sample: ReasonSample,
}

fn encode_f32(v: &[[f32; 3]]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 12);
    for p in v {
        for x in p {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    B64.encode(bytes)
}

fn decode_f32(s: &str, n: usize) -> std::result::Result<Vec<[f32; 3]>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("base64: {e}"))?;
    if bytes.len() != n * 12 {
        return Err(format!("expected {} bytes of f32 triples, got {}", n * 12, bytes.len()));
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]);
            [f(0), f(4), f(8)]
        })
        .collect())
}

fn encode_i32(v: &[i32]) -> String {
    B64.encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
}

fn decode_i32(s: &str, n: usize) -> std::result::Result<Vec<i32>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("base64: {e}"))?;
    if bytes.len() != n * 4 {
        return Err(format!("expected {} bytes of i32, got {}", n * 4, bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn scene_to_line(rec: &SceneRecord) -> String {
    let line = SceneLine {
        format_version: FORMAT_VERSION,
        scene_id: rec.scene.scene_id.clone(),
        room: rec.scene.room,
        superpoint_cell: rec.cell,
        objects: rec.scene.objects.clone(),
        num_points: rec.cloud.len(),
        positions: encode_f32(&rec.cloud.positions),
        colors: encode_f32(&rec.cloud.colors),
        instance_of: encode_i32(&rec.cloud.instance_of),
    };
    serde_json::to_string(&line).expect("scene serialises")
}

pub fn scene_from_line(s: &str) -> std::result::Result<SceneRecord, String> {
    let l: SceneLine = serde_json::from_str(s).map_err(|e| e.to_string())?;
    if l.format_version != FORMAT_VERSION {
        return Err(format!("unsupported format_version {}", l.format_version));
    }
    if !(l.superpoint_cell > 0.0) {
        return Err("superpoint_cell must be positive".into());
    }
    let cloud = PointCloud {
        positions: decode_f32(&l.positions, l.num_points)?,
        colors: decode_f32(&l.colors, l.num_points)?,
        instance_of: decode_i32(&l.instance_of, l.num_points)?,
    };
    let scene = Scene { scene_id: l.scene_id, room: l.room, objects: l.objects };
    cloud.validate(&scene).map_err(|e| e.to_string())?;
    Ok(SceneRecord::new(scene, cloud, l.superpoint_cell))
}

pub fn sample_to_line(s: &ReasonSample) -> String {
    serde_json::to_string(&SampleLine { format_version: FORMAT_VERSION, sample: s.clone() }).expect("sample serialises")
}

pub fn sample_from_line(s: &str) -> std::result::Result<ReasonSample, String> {
    let l: SampleLine = serde_json::from_str(s).map_err(|e| e.to_string())?;
    if l.format_version != FORMAT_VERSION {
        return Err(format!("unsupported format_version {}", l.format_version));
    }
    Ok(l.sample)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T>(path: &Path, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|msg| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg,
        })?);
    }
    Ok(out)
}

pub fn write_scenes(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    write_lines(path, scenes.iter().map(scene_to_line))
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    read_lines(path, scene_from_line)
}

pub fn write_samples(path: &Path, samples: &[ReasonSample]) -> Result<()> {
    write_lines(path, samples.iter().map(sample_to_line))
}

pub fn read_samples(path: &Path) -> Result<Vec<ReasonSample>> {
    read_lines(path, sample_from_line)
}

/// Scene lookup by id.
pub fn index_scenes(scenes: &[SceneRecord]) -> HashMap<&str, &SceneRecord> {
    scenes.iter().map(|s| (s.scene.scene_id.as_str(), s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_at(points: &[[f32; 3]]) -> PointCloud {
        PointCloud {
            positions: points.to_vec(),
            colors: vec![[0.0; 3]; points.len()],
            instance_of: vec![-1; points.len()],
        }
    }

    #[test]
    fn one_cell_gives_one_superpoint() {
        let c = cloud_at(&[[0.01, 0.02, 0.03], [0.2, 0.1, 0.0], [0.24, 0.24, 0.24]]);
        assert_eq!(build_superpoints(&c, 0.25).count, 1);
    }

    #[test]
    fn far_points_split() {
        let c = cloud_at(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let m = build_superpoints(&c, 0.1);
        assert_eq!(m.count, 2);
        assert_ne!(m.assignment[0], m.assignment[1]);
    }

    #[test]
    fn exact_count_range() {
        let spec = SceneSpec { min_objects: 5, max_objects: 5, ..Default::default() };
        let (scene, cloud) = generate_scene("s", 3, &spec).unwrap();
        assert_eq!(scene.objects.len(), 5);
        assert_eq!(cloud.len(), spec.points);
    }

    #[test]
    fn rejects_single_object_range() {
        let spec = SceneSpec { min_objects: 1, max_objects: 3, ..Default::default() };
        assert!(matches!(generate_scene("s", 0, &spec), Err(Error::Scene(_))));
    }

    #[test]
    fn crowded_room_fails_placement() {
        let spec = SceneSpec { room: [2.5, 2.5, 3.0], min_objects: 9, max_objects: 9, ..Default::default() };
        assert!(matches!(generate_scene("s", 0, &spec), Err(Error::Scene(_))));
    }

    #[test]
    fn sample_validation_catches_unknown_ids() {
        let (scene, _) = generate_scene("s", 1, &SceneSpec::default()).unwrap();
        let mut s = ReasonSample {
            scene_id: "s".into(),
            question: "q ?".into(),
            reasoning_steps: vec![ReasonStep { text: "t".into(), relevant_instance_ids: vec![0] }],
            answer: "a".into(),
            target_instance_ids: vec![1],
        };
        assert!(s.validate(&scene).is_ok());
        s.target_instance_ids = vec![999];
        assert!(s.validate(&scene).is_err());
        s.target_instance_ids.clear();
        assert!(s.validate(&scene).is_err());
    }
}
