use std::collections::HashMap;

use proptest::prelude::*;
use r2seg::scenekit::*;
use r2seg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(seed: u64, spec: &SceneSpec) -> SceneRecord {
    let (scene, cloud) = generate_scene(&format!("scene_{seed}"), seed, spec).unwrap();
    SceneRecord::new(scene, cloud, DEFAULT_CELL)
}

fn small_spec() -> SceneSpec {
    SceneSpec { points: 1024, ..Default::default() }
}

#[test]
fn same_seed_gives_byte_identical_lines() {
    let spec = small_spec();
    let a = scene_to_line(&record(7, &spec));
    let b = scene_to_line(&record(7, &spec));
    assert_eq!(a, b);
    assert_ne!(a, scene_to_line(&record(8, &spec)));
}

#[test]
fn fixed_count_range_is_honoured() {
    let spec = SceneSpec { min_objects: 5, max_objects: 5, ..small_spec() };
    for seed in 0..10 {
        assert_eq!(record(seed, &spec).scene.objects.len(), 5);
    }
}

#[test]
fn labels_partition_the_points() {
    for seed in 0..10 {
        let r = record(seed, &small_spec());
        let mut per: HashMap<i32, usize> = HashMap::new();
        for &l in &r.cloud.instance_of {
            *per.entry(l).or_default() += 1;
        }
        let objects: usize = r.scene.objects.iter().map(|o| r.cloud.points_of(&[o.instance_id]).len()).sum();
        let background = per.get(&-1).copied().unwrap_or(0);
        assert_eq!(objects + background, r.cloud.len());
        for k in per.keys() {
            assert!(*k == -1 || r.scene.has(*k as u32));
        }
    }
}

#[test]
fn objects_are_axis_aligned_and_non_overlapping() {
    let spec = small_spec();
    for seed in 0..10 {
        let r = record(seed, &spec);
        let o = &r.scene.objects;
        for (i, a) in o.iter().enumerate() {
            assert!(a.extents.iter().all(|&e| e > 0.0));
            for b in &o[i + 1..] {
                let sep_x = (a.centroid[0] - b.centroid[0]).abs() >= (a.extents[0] + b.extents[0]) / 2.0;
                let sep_y = (a.centroid[1] - b.centroid[1]).abs() >= (a.extents[1] + b.extents[1]) / 2.0;
                assert!(sep_x || sep_y, "objects {} and {} overlap", a.instance_id, b.instance_id);
            }
        }
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud {
        positions: (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-2.0f32..3.0))).collect(),
        colors: vec![[0.5; 3]; n],
        instance_of: vec![-1; n],
    }
}

#[test]
fn superpoints_match_floor_division_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let cloud = random_cloud(&mut rng, 300);
        let cell = [0.1, 0.25, 0.7, 1.3][case % 4];
        let map = build_superpoints(&cloud, cell);
        let key = |p: &[f32; 3]| p.map(|v| (v as f64 / cell).floor() as i64);
        let mut groups: HashMap<[i64; 3], usize> = HashMap::new();
        for (i, p) in cloud.positions.iter().enumerate() {
            let g = *groups.entry(key(p)).or_insert(map.assignment[i]);
            assert_eq!(g, map.assignment[i], "point {i} split from its voxel");
        }
        // distinct voxels never share an id, and ids are dense
        assert_eq!(groups.len(), map.count);
        let mut ids: Vec<usize> = groups.values().copied().collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..map.count).collect::<Vec<_>>());
        assert!(map.sizes().iter().all(|&s| s >= 1));
    }
}

proptest! {
    #[test]
    fn superpoint_partition_ignores_point_order(seed in 0u64..1000, n in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = PointCloud {
            positions: perm.iter().map(|&i| cloud.positions[i]).collect(),
            colors: perm.iter().map(|&i| cloud.colors[i]).collect(),
            instance_of: perm.iter().map(|&i| cloud.instance_of[i]).collect(),
        };
        let a = build_superpoints(&cloud, 0.5);
        let b = build_superpoints(&shuffled, 0.5);
        prop_assert_eq!(a.count, b.count);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(a.assignment[i], b.assignment[j]);
        }
    }
}

#[test]
fn superpoints_are_pure_enough_at_default_cell() {
    let spec = SceneSpec::default();
    let mut worst = 1.0f64;
    for seed in 0..20 {
        let r = record(seed, &spec);
        for o in &r.scene.objects {
            worst = worst.min(best_superpoint_iou(&r.cloud, &r.superpoints, o.instance_id));
            // the majority-label mask covers every point the instance owns
            let mask = gt_superpoint_masks(&r.sp_labels, &[o.instance_id]);
            let own = r.cloud.points_of(&[o.instance_id]);
            let covered = own.iter().filter(|&&p| mask[0][r.superpoints.assignment[p]] == 1.0).count();
            assert!(covered as f64 >= 0.95 * own.len() as f64);
        }
    }
    assert!(worst >= 0.95, "worst achievable IoU {worst}");
}

#[test]
fn scene_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.jsonl");
    let spec = SceneSpec { min_objects: 3, max_objects: 3, ..small_spec() };
    let recs: Vec<SceneRecord> = (0..3).map(|s| record(s, &spec)).collect();
    write_scenes(&path, &recs).unwrap();
    let back = read_scenes(&path).unwrap();
    assert_eq!(back, recs);
}

fn random_sample(rng: &mut ChaCha8Rng) -> ReasonSample {
    let word = |rng: &mut ChaCha8Rng| -> String {
        let w = ["the", "chair", "near", "door", "lamp", "ünïcode", "\"quoted\"", "tab\there", "?"];
        w[rng.gen_range(0..w.len())].to_string()
    };
    let sentence = |rng: &mut ChaCha8Rng| (0..rng.gen_range(0..8)).map(|_| word(rng)).collect::<Vec<_>>().join(" ");
    ReasonSample {
        scene_id: format!("scene_{:05}", rng.gen_range(0..100)),
        question: sentence(rng),
        reasoning_steps: (0..rng.gen_range(0..4))
            .map(|_| ReasonStep {
                text: sentence(rng),
                relevant_instance_ids: (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..20)).collect(),
            })
            .collect(),
        answer: sentence(rng),
        target_instance_ids: (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..20)).collect(),
    }
}

#[test]
fn thousand_random_samples_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<ReasonSample> = (0..1000).map(|_| random_sample(&mut rng)).collect();
    write_samples(&path, &samples).unwrap();
    assert_eq!(read_samples(&path).unwrap(), samples);

    write_samples(&path, &[]).unwrap();
    assert!(read_samples(&path).unwrap().is_empty());
}

#[test]
fn malformed_lines_report_their_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let good = sample_to_line(&random_sample(&mut rng));
    std::fs::write(&path, format!("{good}\n{good}\n{{\"format_version\": 1, \"scene_id\": 3}}\n")).unwrap();
    match read_samples(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }

    let bumped = good.replace("\"format_version\":1", "\"format_version\":99");
    std::fs::write(&path, format!("{bumped}\n")).unwrap();
    assert!(matches!(read_samples(&path), Err(Error::Parse { line: 1, .. })));

    let spath = dir.path().join("scenes.jsonl");
    let mut line = scene_to_line(&record(1, &small_spec()));
    line = line.replace("\"num_points\":1024", "\"num_points\":1000");
    std::fs::write(&spath, format!("{line}\n")).unwrap();
    assert!(matches!(read_scenes(&spath), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_samples(std::path::Path::new("/nonexistent/samples.jsonl")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

#[test]
fn crowded_rooms_shed_objects_down_to_the_minimum() {
    let spec = SceneSpec { room: [3.0, 3.0, 3.0], min_objects: 2, max_objects: 9, ..small_spec() };
    for seed in 0..10 {
        let (scene, _) = generate_scene("tight", seed, &spec).unwrap();
        assert!((2..=9).contains(&scene.objects.len()));
    }
    let impossible = SceneSpec { min_objects: 9, ..spec };
    assert!(matches!(generate_scene("tight", 0, &impossible), Err(Error::Scene(_))));
}
