//! End-to-end localization of query images against a [`Map`].

mod localize;
mod map;

use std::collections::BTreeSet;

pub use localize::{batch_localize, localize, Match2D3D};
pub use map::{DbImage, Map, MapError, MapPoint, PointId};

use crate::depth::{DcvParams, DepthMap, OrdinalIndexing};
use crate::estimation::RansacConfig;
use crate::features::{Descriptor, Family, Keypoint};
use crate::geometry::{Intrinsics, Pose};
use crate::retrieval::ImageId;
use crate::semantic::{LabelMap, ScwParams, DEFAULT_MU_MIN};

/// Optional stages. With everything off the localizer is plain retrieval,
/// nearest-neighbour matching and RANSAC-PnP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    /// Drop matches with differing or dynamic labels.
    pub scc: bool,
    /// Depth-consistency filtering (needs a depth map).
    pub dcv: bool,
    /// Soft per-match scoring with the candidate's `mu`.
    pub weighted: bool,
    /// Sample minimal sets in proportion to match consistency.
    pub bias_sampling: bool,
    /// Per-candidate poses clustered before merging.
    pub clustering: bool,
    /// Order candidates by semantic consistency weight.
    pub rerank: bool,
    /// Reject candidates failing homography verification.
    pub candidate_rejection: bool,
}

impl Stages {
    pub fn all() -> Self {
        Self {
            scc: true,
            dcv: true,
            weighted: true,
            bias_sampling: true,
            clustering: true,
            rerank: true,
            candidate_rejection: true,
        }
    }

    pub fn none() -> Self {
        Self {
            scc: false,
            dcv: false,
            weighted: false,
            bias_sampling: false,
            clustering: false,
            rerank: false,
            candidate_rejection: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub scw: ScwParams<f64>,
    pub homography: RansacConfig<f64>,
    pub pnp: RansacConfig<f64>,
    pub retrieval_k: usize,
    /// Candidates kept after re-ranking (or after retrieval when re-ranking
    /// is off).
    pub keep: usize,
    pub mu_min: f64,
    /// Minimum homography inlier ratio for a candidate.
    pub r_min: f64,
    pub ratio: f64,
    pub mutual: bool,
    /// Families to match; empty means every family in the map.
    pub families: Vec<Family>,
    /// Families whose descriptors are scaled by detection score.
    pub enhance: BTreeSet<Family>,
    /// Pixel radius within which two matches to one point are duplicates.
    pub dedupe_radius: f64,
    pub dcv: DcvParams<f64>,
    pub ordinal_indexing: OrdinalIndexing,
    pub cluster_trans_eps: f64,
    pub cluster_rot_eps: f64,
    /// Sampling weight factor for label-inconsistent matches.
    pub bias_label_penalty: f64,
    pub refine_iterations: usize,
    /// Count label-consistent matches among homography inliers only.
    pub sf_inliers_only: bool,
    pub stages: Stages,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scw: ScwParams::default(),
            homography: RansacConfig { min_inliers: 4, max_iterations: 500, ..RansacConfig::default() },
            pnp: RansacConfig::default(),
            retrieval_k: 20,
            keep: 10,
            mu_min: DEFAULT_MU_MIN,
            r_min: 0.15,
            ratio: 0.85,
            mutual: true,
            families: Vec::new(),
            enhance: BTreeSet::new(),
            dedupe_radius: 2.0,
            dcv: DcvParams::default(),
            ordinal_indexing: OrdinalIndexing::SortedPdv,
            cluster_trans_eps: 2.0,
            cluster_rot_eps: 10.0,
            bias_label_penalty: 0.5,
            refine_iterations: 50,
            sf_inliers_only: false,
            stages: Stages::all(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Default settings with every optional stage and descriptor enhancement
    /// disabled.
    pub fn baseline() -> Self {
        Self { stages: Stages::none(), enhance: BTreeSet::new(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.scw.validate().map_err(|e| e.to_string())?;
        self.homography.validate().map_err(|e| format!("homography: {e}"))?;
        self.pnp.validate().map_err(|e| format!("pnp: {e}"))?;
        if self.keep == 0 || self.retrieval_k == 0 {
            return Err("retrieval_k and keep must be positive".into());
        }
        if !(self.mu_min > 0.0 && self.mu_min <= 1.0) {
            return Err("mu_min must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.r_min) {
            return Err("r_min must lie in [0, 1]".into());
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err("ratio must lie in (0, 1]".into());
        }
        if !(self.dcv.tau > 0.0) {
            return Err("dcv_tau must be positive".into());
        }
        if !(self.dedupe_radius >= 0.0 && self.cluster_trans_eps >= 0.0 && self.cluster_rot_eps >= 0.0) {
            return Err("radii must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.bias_label_penalty) {
            return Err("bias_label_penalty must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Everything known about one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAssets {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics<f64>,
    /// All families concatenated, grouped by family.
    pub keypoints: Vec<Keypoint<f64>>,
    pub descriptors: Vec<Descriptor<f64>>,
    pub global: Vec<f64>,
    pub labels: Option<LabelMap>,
    pub depth: Option<DepthMap<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    RetrievalFailed,
    ConsensusFailed,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::RetrievalFailed => "retrieval_failed",
            Status::ConsensusFailed => "consensus_failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(Status::Ok),
            "retrieval_failed" => Some(Status::RetrievalFailed),
            "consensus_failed" => Some(Status::ConsensusFailed),
            _ => None,
        }
    }
}

/// Per-stage counts for one query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub retrieved: usize,
    /// Candidates surviving homography rejection.
    pub verified: usize,
    pub reranked: usize,
    pub candidates: Vec<ImageId>,
    pub scw: Vec<f64>,
    pub mu: Vec<f64>,
    pub matches_pre_scc: usize,
    pub matches_post_scc: usize,
    /// 2D-3D matches after lifting through tracks.
    pub lifted: usize,
    pub cluster_size: usize,
    pub matches_pre_dcv: usize,
    pub matches_post_dcv: usize,
    pub dcv_flagged: usize,
    pub dcv_reverted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub name: String,
    pub status: Status,
    /// Present iff `status` is [`Status::Ok`].
    pub pose: Option<Pose<f64>>,
    pub inlier_count: usize,
    pub diagnostics: Diagnostics,
}

impl LocalizationResult {
    pub fn failed(name: &str, status: Status, diagnostics: Diagnostics) -> Self {
        Self { name: name.to_string(), status, pose: None, inlier_count: 0, diagnostics }
    }
}
