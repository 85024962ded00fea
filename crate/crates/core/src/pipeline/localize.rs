use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::{Diagnostics, LocalizationResult, Map, PipelineConfig, PointId, QueryAssets, Status};
use crate::depth::{dcv_filter, match_depth_costs};
use crate::estimation::{consensus, refine_pnp, PnpEstimator, RansacConfig, ScoringMode, WeightedSample};
use crate::features::{enhance_descriptor, match_descriptors, Descriptor, Family, Match, MergeKey};
use crate::geometry::{reprojection_error, Intrinsics, Pixel, Pose, WorldPoint};
use crate::retrieval::{
    accept_candidate, cluster_poses, geometric_verify, rerank, retrieve, ImageId, RetrievalCandidate,
};
use crate::semantic::{count_label_consistent, scc_filter, CandidateScore, ClassId};

/// A query keypoint paired with a map point.
#[derive(Debug, Clone, PartialEq)]
pub struct Match2D3D {
    pub query_idx: usize,
    pub pixel: Pixel<f64>,
    pub point: PointId,
    pub position: WorldPoint<f64>,
    pub distance: f64,
    pub family: Family,
    /// Database image the match came through.
    pub candidate: ImageId,
    /// The candidate's normalized weight.
    pub mu: f64,
    pub label_consistent: bool,
}

impl MergeKey<f64> for Match2D3D {
    fn query_pixel(&self) -> Pixel<f64> {
        self.pixel
    }

    fn target_id(&self) -> u64 {
        self.point
    }

    fn distance(&self) -> f64 {
        self.distance
    }
}

struct CandidateWork {
    candidate: RetrievalCandidate<f64>,
    /// 2D-2D matches in image-wide keypoint indices, with their family.
    matches: Vec<(Match<f64>, Family)>,
    lifted: Vec<Match2D3D>,
    pose: Option<(Pose<f64>, usize)>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Localizes one query. Never fails outright; problems show up in the
/// returned status.
pub fn localize(query: &QueryAssets, map: &Map, cfg: &PipelineConfig) -> LocalizationResult {
    let mut diag = Diagnostics::default();
    let fail = |status, diag| LocalizationResult::failed(&query.name, status, diag);
    let stages = cfg.stages;

    if map.images.is_empty() || map.points.is_empty() || query.keypoints.is_empty() {
        return fail(Status::RetrievalFailed, diag);
    }
    let db: Vec<(ImageId, &[f64])> = map.images.iter().map(|i| (i.id, i.global.as_slice())).collect();
    let Ok(retrieved) = retrieve(&query.global, &db, cfg.retrieval_k) else {
        return fail(Status::RetrievalFailed, diag);
    };
    diag.retrieved = retrieved.len();

    let families: Vec<Family> = if cfg.families.is_empty() { map.families.clone() } else { cfg.families.clone() };
    let query_labels = query_labels(query);
    let dynamic: BTreeSet<ClassId> =
        cfg.scw.dynamic_classes.union(&map.class_table.dynamic_classes()).copied().collect();
    let verify = stages.rerank || stages.candidate_rejection;

    let mut work: Vec<CandidateWork> = retrieved
        .into_par_iter()
        .map(|mut candidate| {
            let img = map.image(candidate.image_id).expect("retrieved ids exist");
            let matches = match_candidate(query, img, &families, cfg);
            let train_labels: Vec<ClassId> = (0..img.keypoints.len())
                .map(|k| map.point_of(img.id, k).map_or(img.keypoints[k].label, |p| p.label))
                .collect();
            candidate.match_count = matches.len();
            if verify {
                let pairs: Vec<_> = matches
                    .iter()
                    .map(|(m, _)| (query.keypoints[m.query_idx].pixel, img.keypoints[m.train_idx].pixel))
                    .collect();
                let hcfg = RansacConfig { seed: mix(cfg.seed, 2 * candidate.image_id as u64), ..cfg.homography };
                let (h, s_c) = geometric_verify(&pairs, &hcfg);
                let counted: Vec<Match<f64>> = match (cfg.sf_inliers_only, h) {
                    (true, Some(h)) => matches
                        .iter()
                        .zip(&pairs)
                        .filter(|(_, (a, b))| crate::estimation::transfer_error(&h, a, b) < hcfg.threshold)
                        .map(|((m, _), _)| *m)
                        .collect(),
                    (true, None) => Vec::new(),
                    (false, _) => matches.iter().map(|(m, _)| *m).collect(),
                };
                let s_f = count_label_consistent(&counted, &query_labels, &train_labels).unwrap_or(0);
                candidate.homography = h;
                candidate.score = CandidateScore::new(s_c, s_f, &cfg.scw);
            }
            CandidateWork { candidate, matches, lifted: Vec::new(), pose: None }
        })
        .collect();

    if stages.candidate_rejection {
        let size = (query.width as f64, query.height as f64);
        work.retain(|w| accept_candidate(&w.candidate, size, cfg.r_min));
    }
    diag.verified = work.len();
    if work.is_empty() {
        return fail(Status::RetrievalFailed, diag);
    }

    if stages.rerank {
        let ranked = rerank(work.iter().map(|w| w.candidate.clone()).collect(), &cfg.scw, cfg.keep, cfg.mu_min);
        let mut by_id: BTreeMap<ImageId, CandidateWork> = work.into_iter().map(|w| (w.candidate.image_id, w)).collect();
        work = ranked
            .into_iter()
            .map(|c| {
                let mut w = by_id.remove(&c.image_id).expect("reranked ids come from the input");
                w.candidate = c;
                w
            })
            .collect();
    } else {
        work.truncate(cfg.keep);
    }
    diag.reranked = work.len();
    diag.candidates = work.iter().map(|w| w.candidate.image_id).collect();
    diag.scw = work.iter().map(|w| w.candidate.score.s_r).collect();
    diag.mu = work.iter().map(|w| w.candidate.mu).collect();

    let k = query.intrinsics;
    let per_candidate: Vec<(usize, usize, Vec<Match2D3D>, Option<(Pose<f64>, usize)>)> = work
        .par_iter()
        .map(|w| {
            let img = map.image(w.candidate.image_id).expect("candidate ids exist");
            let train_labels: Vec<ClassId> = (0..img.keypoints.len())
                .map(|k| map.point_of(img.id, k).map_or(img.keypoints[k].label, |p| p.label))
                .collect();
            let pre = w.matches.len();
            let kept: Vec<(Match<f64>, Family)> = if stages.scc {
                let plain: Vec<Match<f64>> = w.matches.iter().map(|(m, _)| *m).collect();
                let survivors = scc_filter(&plain, &query_labels, &train_labels, &dynamic).unwrap_or_default();
                let keep: BTreeSet<(usize, usize)> = survivors.iter().map(|m| (m.query_idx, m.train_idx)).collect();
                w.matches.iter().filter(|(m, _)| keep.contains(&(m.query_idx, m.train_idx))).cloned().collect()
            } else {
                w.matches.clone()
            };
            let post = kept.len();
            let lifted: Vec<Match2D3D> = kept
                .iter()
                .filter_map(|(m, family)| {
                    let point = map.point_of(img.id, m.train_idx)?;
                    Some(Match2D3D {
                        query_idx: m.query_idx,
                        pixel: query.keypoints[m.query_idx].pixel,
                        point: point.id,
                        position: point.position,
                        distance: m.distance,
                        family: family.clone(),
                        candidate: img.id,
                        mu: w.candidate.mu,
                        label_consistent: query_labels[m.query_idx] == train_labels[m.train_idx],
                    })
                })
                .collect();
            let pose = if stages.clustering && lifted.len() >= 4 {
                let pnp = RansacConfig { seed: mix(cfg.seed, 2 * img.id as u64 + 1), ..cfg.pnp };
                standard_pnp(&lifted, &k, &pnp, cfg.refine_iterations).map(|(p, inl)| (p, inl.len()))
            } else {
                None
            };
            (pre, post, lifted, pose)
        })
        .collect();
    for (w, (pre, post, lifted, pose)) in work.iter_mut().zip(per_candidate) {
        diag.matches_pre_scc += pre;
        diag.matches_post_scc += post;
        diag.lifted += lifted.len();
        w.lifted = lifted;
        w.pose = pose;
        w.candidate.pose_estimate = pose.map(|p| p.0);
    }

    let mut selected: Vec<usize> = (0..work.len()).collect();
    if stages.clustering {
        let estimates: Vec<(ImageId, Pose<f64>)> =
            work.iter().filter_map(|w| w.pose.map(|(p, _)| (w.candidate.image_id, p))).collect();
        if let Ok(Some(cluster)) = cluster_poses(&estimates, cfg.cluster_trans_eps, cfg.cluster_rot_eps) {
            selected.retain(|&i| cluster.member_ids.contains(&work[i].candidate.image_id));
        }
    }
    diag.cluster_size = selected.len();

    let mut per_family: BTreeMap<Family, Vec<Match2D3D>> = BTreeMap::new();
    for &i in &selected {
        for m in &work[i].lifted {
            per_family.entry(m.family.clone()).or_default().push(m.clone());
        }
    }
    let mut merged = crate::features::merge_families(&per_family, cfg.dedupe_radius);
    diag.matches_pre_dcv = merged.len();
    diag.matches_post_dcv = merged.len();
    if merged.len() < 4 {
        return fail(Status::ConsensusFailed, diag);
    }

    if stages.dcv {
        if let Some(depth) = &query.depth {
            let prior = selected
                .iter()
                .filter_map(|&i| work[i].pose)
                .enumerate()
                .max_by(|a, b| a.1 .1.cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                .map(|(_, (p, _))| p)
                .or_else(|| {
                    standard_pnp(
                        &merged,
                        &k,
                        &RansacConfig { seed: mix(cfg.seed, u64::MAX - 1), ..cfg.pnp },
                        cfg.refine_iterations,
                    )
                    .map(|r| r.0)
                });
            if let Some(prior) = prior {
                let pairs: Vec<_> = merged.iter().map(|m| (m.pixel, m.position)).collect();
                if let Ok(costs) = match_depth_costs(&pairs, &prior, &k, depth, cfg.ordinal_indexing) {
                    let params = crate::depth::DcvParams { inlier_threshold: cfg.pnp.threshold, ..cfg.dcv };
                    if let Ok(out) = dcv_filter(&pairs, &costs, &params, &prior, &k) {
                        diag.dcv_flagged = out.flagged;
                        diag.dcv_reverted = out.reverted;
                        if !out.reverted && out.removed > 0 {
                            let keep: BTreeSet<usize> = out.kept.into_iter().collect();
                            merged = merged
                                .into_iter()
                                .enumerate()
                                .filter(|(i, _)| keep.contains(i))
                                .map(|(_, m)| m)
                                .collect();
                        }
                    }
                }
            }
        }
        diag.matches_post_dcv = merged.len();
    }

    let pairs: Vec<(Pixel<f64>, WorldPoint<f64>)> = merged.iter().map(|m| (m.pixel, m.position)).collect();
    let max_distance = merged.iter().fold(0.0f64, |a, m| a.max(m.distance));
    let samples: Vec<WeightedSample<f64>> = merged
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mu = if stages.weighted { m.mu } else { 1.0 };
            let sampling_weight = if stages.bias_sampling {
                let label = if m.label_consistent { 1.0 } else { cfg.bias_label_penalty };
                let closeness = if max_distance > 0.0 { 1.0 - m.distance / max_distance } else { 1.0 };
                m.mu * label * closeness
            } else {
                1.0
            };
            WeightedSample { index: i, sampling_weight, mu }
        })
        .collect();
    let mode = if stages.weighted { ScoringMode::Weighted } else { ScoringMode::Standard };
    let est = PnpEstimator { matches: &pairs, intrinsics: k };
    let final_cfg = RansacConfig { seed: mix(cfg.seed, u64::MAX), ..cfg.pnp };
    let Ok(hyp) = consensus(&est, &samples, &final_cfg, mode) else {
        return fail(Status::ConsensusFailed, diag);
    };
    let inlier_pairs: Vec<_> = hyp.inlier_indices.iter().map(|&i| pairs[i]).collect();
    let pose = match refine_pnp(&inlier_pairs, &k, &hyp.model, cfg.refine_iterations) {
        Ok(r) if !r.singular => r.pose,
        _ => hyp.model,
    };
    let inlier_count =
        pairs.iter().filter(|(px, pw)| reprojection_error(px, pw, &pose, &k) < cfg.pnp.threshold).count();
    if inlier_count < cfg.pnp.min_inliers.max(4) {
        return fail(Status::ConsensusFailed, diag);
    }
    LocalizationResult {
        name: query.name.clone(),
        status: Status::Ok,
        pose: Some(pose),
        inlier_count,
        diagnostics: diag,
    }
}

/// Localizes every query on a pool of `workers` threads. Results keep the
/// input order and do not depend on `workers`.
pub fn batch_localize(
    queries: &[QueryAssets],
    map: &Map,
    cfg: &PipelineConfig,
    workers: usize,
) -> Vec<LocalizationResult> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    pool.install(|| queries.par_iter().map(|q| localize(q, map, cfg)).collect())
}

/// Label of every query keypoint: from the label map when present,
/// otherwise the keypoint's own label.
fn query_labels(query: &QueryAssets) -> Vec<ClassId> {
    query
        .keypoints
        .iter()
        .map(|kp| match &query.labels {
            Some(lm) => lm.label_at(&kp.pixel).unwrap_or(kp.label),
            None => kp.label,
        })
        .collect()
}

/// Nearest-neighbour matches between the query and one database image, per
/// family, in image-wide keypoint indices.
fn match_candidate(
    query: &QueryAssets,
    img: &super::DbImage,
    families: &[Family],
    cfg: &PipelineConfig,
) -> Vec<(Match<f64>, Family)> {
    let mut out = Vec::new();
    for family in families {
        let qr = family_range(&query.keypoints, family);
        let tr = img.family_range(family);
        if qr.is_empty() || tr.is_empty() {
            continue;
        }
        let prepare = |kps: &[crate::features::Keypoint<f64>], descs: &[Descriptor<f64>]| -> Vec<Descriptor<f64>> {
            if cfg.enhance.contains(family) {
                kps.iter().zip(descs).map(|(k, d)| enhance_descriptor(d, k.score)).collect()
            } else {
                descs.to_vec()
            }
        };
        let qd = prepare(&query.keypoints[qr.clone()], &query.descriptors[qr.clone()]);
        let td = prepare(&img.keypoints[tr.clone()], &img.descriptors[tr.clone()]);
        let Ok(matches) = match_descriptors(&qd, &td, cfg.ratio, cfg.mutual) else {
            continue;
        };
        out.extend(matches.into_iter().map(|m| {
            (Match { query_idx: m.query_idx + qr.start, train_idx: m.train_idx + tr.start, ..m }, family.clone())
        }));
    }
    out
}

fn family_range(kps: &[crate::features::Keypoint<f64>], family: &Family) -> std::ops::Range<usize> {
    match kps.iter().position(|k| &k.family == family) {
        None => 0..0,
        Some(s) => s..s + kps[s..].iter().take_while(|k| &k.family == family).count(),
    }
}

fn standard_pnp(
    matches: &[Match2D3D],
    k: &Intrinsics<f64>,
    cfg: &RansacConfig<f64>,
    refine_iterations: usize,
) -> Option<(Pose<f64>, Vec<usize>)> {
    let pairs: Vec<_> = matches.iter().map(|m| (m.pixel, m.position)).collect();
    let est = PnpEstimator { matches: &pairs, intrinsics: *k };
    let samples: Vec<_> = (0..pairs.len()).map(WeightedSample::uniform).collect();
    let hyp = consensus(&est, &samples, cfg, ScoringMode::Standard).ok()?;
    let inl: Vec<_> = hyp.inlier_indices.iter().map(|&i| pairs[i]).collect();
    let pose = match refine_pnp(&inl, k, &hyp.model, refine_iterations) {
        Ok(r) if !r.singular => r.pose,
        _ => hyp.model,
    };
    Some((pose, hyp.inlier_indices))
}
