//! Candidate database images for a query: global-descriptor retrieval,
//! homography verification, semantic re-ranking, and pose clustering.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::estimation::{consensus, HomographyEstimator, RansacConfig, ScoringMode, WeightedSample};
use crate::geometry::{nearest_rotation, pose_delta, Pixel, Pose};
use crate::scalar::{lit, Real};
use crate::semantic::{normalize_scw, scw, CandidateScore, ScwParams};

pub type ImageId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("global descriptor dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("duplicate image id {0}")]
    DuplicateId(ImageId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalCandidate<T: Real> {
    pub image_id: ImageId,
    pub global_distance: T,
    pub score: CandidateScore<T>,
    /// Query-to-candidate homography, when verification found one.
    pub homography: Option<Matrix3<T>>,
    pub pose_estimate: Option<Pose<T>>,
    /// Share of the consensus acceptance band granted to this candidate's
    /// matches; `1` until [`rerank`] assigns it.
    pub mu: T,
    /// Number of tentative matches the homography was fitted to.
    pub match_count: usize,
}

impl<T: Real> RetrievalCandidate<T> {
    pub fn new(image_id: ImageId, global_distance: T) -> Self {
        Self {
            image_id,
            global_distance,
            score: CandidateScore { s_c: 0, s_f: 0, s_r: T::zero() },
            homography: None,
            pose_estimate: None,
            mu: T::one(),
            match_count: 0,
        }
    }
}

/// The `k` database images nearest to `query` in Euclidean distance,
/// ascending, ties by image id. `k` is clamped to the database size.
pub fn retrieve<T: Real>(
    query: &[T],
    db: &[(ImageId, &[T])],
    k: usize,
) -> Result<Vec<RetrievalCandidate<T>>, RetrievalError> {
    let mut scored = Vec::with_capacity(db.len());
    for (id, gd) in db {
        if gd.len() != query.len() {
            return Err(RetrievalError::DimensionMismatch(query.len(), gd.len()));
        }
        let d2 = query.iter().zip(gd.iter()).fold(T::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b));
        scored.push((d2.sqrt(), *id));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(d, id)| RetrievalCandidate::new(id, d)).collect())
}

/// Consensus homography from query-to-candidate pixel pairs and its inlier
/// count. Fewer than four pairs, or no acceptable consensus, give `(None, 0)`.
pub fn geometric_verify<T: Real>(pairs: &[(Pixel<T>, Pixel<T>)], cfg: &RansacConfig<T>) -> (Option<Matrix3<T>>, usize) {
    if pairs.len() < 4 {
        return (None, 0);
    }
    let est = HomographyEstimator { pairs };
    let samples: Vec<_> = (0..pairs.len()).map(WeightedSample::uniform).collect();
    match consensus(&est, &samples, cfg, ScoringMode::Standard) {
        Ok(h) => {
            let n = h.inlier_indices.len();
            (Some(h.model), n)
        }
        Err(_) => (None, 0),
    }
}

/// Sorts by weighted score (recomputed from `s_c`, `s_f` with `p`)
/// descending, ties by higher `s_c` then lower image id, keeps the first
/// `keep`, and assigns each survivor its normalized score as `mu`.
pub fn rerank<T: Real>(
    mut candidates: Vec<RetrievalCandidate<T>>,
    p: &ScwParams<T>,
    keep: usize,
    mu_min: T,
) -> Vec<RetrievalCandidate<T>> {
    for c in &mut candidates {
        c.score.s_r = scw(c.score.s_c, c.score.s_f, p);
    }
    candidates.sort_by(|a, b| {
        b.score
            .s_r
            .partial_cmp(&a.score.s_r)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.score.s_c.cmp(&a.score.s_c))
            .then(a.image_id.cmp(&b.image_id))
    });
    candidates.truncate(keep);
    let scores: Vec<T> = candidates.iter().map(|c| c.score.s_r).collect();
    for (c, mu) in candidates.iter_mut().zip(normalize_scw(&scores, mu_min)) {
        c.mu = mu;
    }
    candidates
}

/// Whether a verified candidate is plausible: inlier ratio at least `r_min`
/// and the query frame, mapped through the homography, a convex quadrilateral
/// in front of the camera with non-negligible area.
pub fn accept_candidate<T: Real>(c: &RetrievalCandidate<T>, query_size: (T, T), r_min: T) -> bool {
    let Some(h) = c.homography else { return false };
    if c.match_count == 0 || c.score.s_c == 0 {
        return false;
    }
    if lit::<T>(c.score.s_c as f64) < r_min * lit(c.match_count as f64) {
        return false;
    }
    let (w, hgt) = query_size;
    let corners = [(T::zero(), T::zero()), (w, T::zero()), (w, hgt), (T::zero(), hgt)];
    let mut quad = Vec::with_capacity(4);
    for (u, v) in corners {
        let p = h * Vector3::new(u, v, T::one());
        if !(p.z > lit(1e-12)) {
            return false;
        }
        quad.push(Pixel::new(p.x / p.z, p.y / p.z));
    }
    let mut sign = T::zero();
    let mut area = T::zero();
    for i in 0..4 {
        let (a, b, c) = (quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]);
        let turn = (b - a).perp(&(c - b));
        if turn == T::zero() || (sign != T::zero() && turn.signum() != sign) {
            return false;
        }
        sign = turn.signum();
        area += a.coords.perp(&b.coords);
    }
    let area = (area / lit(2.0)).abs();
    area.is_finite() && area > lit::<T>(1e-4) * w * hgt
}

/// Keeps the candidates passing [`accept_candidate`], order preserved.
pub fn cluster_candidate_rejection<T: Real>(
    candidates: Vec<RetrievalCandidate<T>>,
    query_size: (T, T),
    r_min: T,
) -> Vec<RetrievalCandidate<T>> {
    candidates.into_iter().filter(|c| accept_candidate(c, query_size, r_min)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseCluster<T: Real> {
    /// Ascending.
    pub member_ids: Vec<ImageId>,
    /// Mean camera center with the chordal mean rotation.
    pub centroid_pose: Pose<T>,
    /// Largest pairwise translation distance among members.
    pub trans_radius: T,
    /// Largest pairwise rotation angle among members, degrees.
    pub rot_radius: T,
}

/// Largest connected component of the graph linking poses whose
/// [`pose_delta`] is within `(trans_eps, rot_eps)`. Ties go to the lowest
/// mean pairwise translation distance, then the lexicographically lowest
/// member ids. `None` on empty input.
pub fn cluster_poses<T: Real>(
    estimates: &[(ImageId, Pose<T>)],
    trans_eps: T,
    rot_eps: T,
) -> Result<Option<PoseCluster<T>>, RetrievalError> {
    let mut sorted: Vec<&(ImageId, Pose<T>)> = estimates.iter().collect();
    sorted.sort_by_key(|e| e.0);
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(RetrievalError::DuplicateId(w[0].0));
        }
    }
    let n = sorted.len();
    if n == 0 {
        return Ok(None);
    }
    let mut delta = vec![(T::zero(), T::zero()); n * n];
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = pose_delta(&sorted[i].1, &sorted[j].1);
            delta[i * n + j] = d;
            delta[j * n + i] = d;
            if d.0 <= trans_eps && d.1 <= rot_eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = components.len();
            components.push(Vec::new());
        }
        components[slot[r]].push(i);
    }
    let mean_trans = |c: &[usize]| -> T {
        if c.len() < 2 {
            return T::zero();
        }
        let mut sum = T::zero();
        for (a, &i) in c.iter().enumerate() {
            for &j in &c[a + 1..] {
                sum += delta[i * n + j].0;
            }
        }
        sum / lit((c.len() * (c.len() - 1) / 2) as f64)
    };
    let best = components
        .iter()
        .min_by(|a, b| {
            b.len()
                .cmp(&a.len())
                .then(mean_trans(a).partial_cmp(&mean_trans(b)).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.cmp(b))
        })
        .expect("non-empty");

    let mut center = Vector3::zeros();
    let mut rot_sum = Matrix3::zeros();
    let (mut tr, mut rr) = (T::zero(), T::zero());
    for (a, &i) in best.iter().enumerate() {
        center += sorted[i].1.center().coords;
        rot_sum += sorted[i].1.rotation();
        for &j in &best[a + 1..] {
            tr = tr.max(delta[i * n + j].0);
            rr = rr.max(delta[i * n + j].1);
        }
    }
    let count: T = lit(best.len() as f64);
    let rotation = nearest_rotation(&rot_sum);
    let center = center / count;
    let centroid = Pose::new(rotation, -(rotation * center)).unwrap_or(sorted[best[0]].1);
    Ok(Some(PoseCluster {
        member_ids: best.iter().map(|&i| sorted[i].0).collect(),
        centroid_pose: centroid,
        trans_radius: tr,
        rot_radius: rr,
    }))
}
