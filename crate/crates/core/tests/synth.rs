use std::path::Path;

use semloc::io;
use semloc::pipeline::{batch_localize, PipelineConfig};
use semloc::synth::{evaluate, generate_scene, parse_thresholds, SceneConfig};

fn small(seed: u64) -> SceneConfig {
    SceneConfig {
        n_points: 200,
        n_db_images: 5,
        n_queries: 4,
        width: 320,
        height: 240,
        focal: 250.0,
        seed,
        ..SceneConfig::default()
    }
}

#[test]
fn written_scene_localizes_from_files() {
    let dir = tempfile::tempdir().unwrap();
    generate_scene(small(1), dir.path()).unwrap();
    let map = io::build_map(dir.path()).unwrap();
    let queries = io::load_query(dir.path(), &map.families).unwrap();
    let results = batch_localize(&queries, &map, &PipelineConfig::default(), 2);
    let gt = io::load_ground_truth(&dir.path().join("gt.txt")).unwrap();
    let rep = evaluate(&results, &gt, &parse_thresholds("0.001,0.01").unwrap()).unwrap();
    assert_eq!(rep.recall, vec![1.0]);
    assert_eq!(rep.n_ok, 4);
}

#[test]
fn outlier_flags_on_disk_match_rate() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_scene(SceneConfig { outlier_match_rate: 0.5, ..small(2) }, dir.path()).unwrap();
    for i in 0..g.config().n_queries {
        let path = dir.path().join(format!("truth/q_{i:04}.flags.txt"));
        let flags = io::parse_flags(&path, &std::fs::read_to_string(&path).unwrap()).unwrap();
        let matchable = flags.iter().filter(|f| f.true_point.is_some()).count();
        assert_eq!(flags.iter().filter(|f| f.is_outlier).count(), matchable / 2);
        assert_eq!(flags.len(), g.query(i).assets.keypoints.len());
    }
}

#[test]
fn depth_is_scaled_truth() {
    let g = semloc::synth::SceneGenerator::new(small(3)).unwrap();
    let q = g.query(0);
    let depth = q.assets.depth.as_ref().unwrap();
    for (kp, id) in q.assets.keypoints.iter().zip(&q.scene_points) {
        let z = q.pose.transform(&g.point(*id)).z;
        let d = depth.sample(&kp.pixel).unwrap().unwrap();
        assert!((d - q.depth_scale * z).abs() <= 1e-9 * d);
    }
    assert!((0.2..=5.0).contains(&q.depth_scale));
}

#[test]
fn warped_depth_keeps_order() {
    let g = semloc::synth::SceneGenerator::new(SceneConfig { depth_warp: true, ..small(4) }).unwrap();
    let q = g.query(1);
    let depth = q.assets.depth.as_ref().unwrap();
    let mut pairs: Vec<(f64, f64)> = q
        .assets
        .keypoints
        .iter()
        .zip(&q.scene_points)
        .map(|(kp, id)| (q.pose.transform(&g.point(*id)).z, depth.sample(&kp.pixel).unwrap().unwrap()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
}

#[test]
fn config_file_round() {
    let c =
        SceneConfig::parse(Path::new("scene.cfg"), "n_points = 100\nseed = 5\noutlier_match_rate = 0.25\n").unwrap();
    assert_eq!((c.n_points, c.seed, c.outlier_match_rate), (100, 5, 0.25));
    assert!(SceneConfig::parse(Path::new("scene.cfg"), "families = a\n").is_err());
}
