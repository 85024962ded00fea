use semloc::geometry::pose_delta;
use semloc::pipeline::{localize, PipelineConfig, QueryAssets, Stages, Status};
use semloc::synth::{SceneConfig, SceneGenerator};

fn scene(cfg: SceneConfig) -> SceneGenerator {
    SceneGenerator::new(SceneConfig { n_queries: 6, ..cfg }).unwrap()
}

#[test]
fn every_stage_combination_localizes_clean_queries() {
    let g = scene(SceneConfig { seed: 31, ..SceneConfig::default() });
    let map = g.build_map();
    let q = g.query(2);
    for bits in 0u32..128 {
        let b = |i: u32| bits & (1 << i) != 0;
        let stages = Stages {
            scc: b(0),
            dcv: b(1),
            weighted: b(2),
            bias_sampling: b(3),
            clustering: b(4),
            rerank: b(5),
            candidate_rejection: b(6),
        };
        let r = localize(&q.assets, &map, &PipelineConfig { stages, ..PipelineConfig::default() });
        assert_eq!(r.status, Status::Ok, "stages {stages:?}");
        let (t, deg) = pose_delta(&r.pose.unwrap(), &q.pose);
        assert!(t < 1e-6 && deg < 1e-5, "stages {stages:?}: {t} {deg}");
    }
}

#[test]
fn scc_drops_cross_label_outliers() {
    let g =
        scene(SceneConfig { outlier_match_rate: 0.4, cross_label_outliers: true, seed: 32, ..SceneConfig::default() });
    let map = g.build_map();
    let q = g.query(0);
    let with = localize(&q.assets, &map, &PipelineConfig::default());
    let without = localize(
        &q.assets,
        &map,
        &PipelineConfig { stages: Stages { scc: false, ..Stages::all() }, ..PipelineConfig::default() },
    );
    assert_eq!(with.status, Status::Ok);
    let d = &with.diagnostics;
    assert!(d.matches_post_scc < d.matches_pre_scc);
    assert_eq!(without.diagnostics.matches_post_scc, without.diagnostics.matches_pre_scc);
    let (t, deg) = pose_delta(&with.pose.unwrap(), &q.pose);
    assert!(t < 1e-6 && deg < 1e-5);
}

#[test]
fn dcv_runs_only_with_depth() {
    let g = scene(SceneConfig { outlier_match_rate: 0.2, pixel_noise_sigma: 0.5, seed: 33, ..SceneConfig::default() });
    let map = g.build_map();
    let q = g.query(1);
    let r = localize(&q.assets, &map, &PipelineConfig::default());
    assert_eq!(r.status, Status::Ok);
    assert!(r.diagnostics.matches_pre_dcv > 0);
    assert!(r.diagnostics.matches_post_dcv <= r.diagnostics.matches_pre_dcv);

    let no_depth = QueryAssets { depth: None, ..q.assets.clone() };
    let r = localize(&no_depth, &map, &PipelineConfig::default());
    assert_eq!(r.status, Status::Ok);
    assert_eq!(r.diagnostics.matches_post_dcv, r.diagnostics.matches_pre_dcv);
    assert_eq!(r.diagnostics.dcv_flagged, 0);
}

#[test]
fn query_without_keypoints_fails_cleanly() {
    let g = scene(SceneConfig { seed: 34, ..SceneConfig::default() });
    let map = g.build_map();
    let mut q = g.query(0).assets;
    q.keypoints.clear();
    q.descriptors.clear();
    let r = localize(&q, &map, &PipelineConfig::default());
    assert_ne!(r.status, Status::Ok);
    assert!(r.pose.is_none());
    assert_eq!(r.inlier_count, 0);
}

#[test]
fn unlabelled_query_uses_keypoint_labels() {
    let g = scene(SceneConfig { seed: 35, ..SceneConfig::default() });
    let map = g.build_map();
    let q = g.query(3);
    let mut assets = q.assets.clone();
    let lm = assets.labels.take().unwrap();
    for kp in assets.keypoints.iter_mut() {
        kp.label = lm.label_at(&kp.pixel).unwrap();
    }
    let a = localize(&q.assets, &map, &PipelineConfig::default());
    let b = localize(&assets, &map, &PipelineConfig::default());
    assert_eq!(a, b);
}

#[test]
fn seed_changes_only_random_choices() {
    let g = scene(SceneConfig { outlier_match_rate: 0.5, pixel_noise_sigma: 1.0, seed: 36, ..SceneConfig::default() });
    let map = g.build_map();
    let q = g.query(4);
    let a = localize(&q.assets, &map, &PipelineConfig { seed: 1, ..PipelineConfig::default() });
    let b = localize(&q.assets, &map, &PipelineConfig { seed: 1, ..PipelineConfig::default() });
    let c = localize(&q.assets, &map, &PipelineConfig { seed: 2, ..PipelineConfig::default() });
    assert_eq!(a, b);
    for r in [&a, &c] {
        let (t, deg) = pose_delta(r.pose.as_ref().unwrap(), &q.pose);
        assert!(t < 0.25 && deg < 2.0);
    }
}
