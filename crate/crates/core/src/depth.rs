//! Depth consistency between the map and a monocular depth prediction.
//!
//! Map depths come from projecting matched 3D points with a prior pose;
//! predicted depths are read from a depth map of unknown scale. Matches whose
//! depth rank disagrees with the prediction receive a high ordinal cost and
//! are removed, unless removing them fails to improve the pose fit.

use thiserror::Error;

use crate::estimation::refine_pnp;
use crate::geometry::{project, reprojection_error, Intrinsics, Pixel, Pose, WorldPoint};
use crate::scalar::{lit, Real};

/// Mean cost below which all matches are considered consistent.
pub const COST_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DepthError {
    #[error("pixel ({u}, {v}) outside {width}x{height} depth map")]
    OutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two depths, got {0}")]
    TooFew(usize),
    #[error("depth values must be finite and positive")]
    InvalidDepth,
    #[error("depth grid has {got} cells, expected {expected}")]
    GridSize { got: usize, expected: usize },
    #[error("tau must be positive")]
    InvalidTau,
}

/// Row-major grid of predicted depths; `0` marks missing data.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T: Real> {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<T>,
}

impl<T: Real> DepthMap<T> {
    pub fn new(width: usize, height: usize, depth: Vec<T>) -> Result<Self, DepthError> {
        if depth.len() != width * height {
            return Err(DepthError::GridSize { got: depth.len(), expected: width * height });
        }
        if depth.iter().any(|d| !d.is_finite() || *d < T::zero()) {
            return Err(DepthError::InvalidDepth);
        }
        Ok(Self { width, height, depth })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![T::zero(); width * height] }
    }

    /// Nearest-pixel lookup; `None` on a no-data cell.
    pub fn sample(&self, pixel: &Pixel<T>) -> Result<Option<T>, DepthError> {
        let (u, v) = (crate::scalar::to_f64(pixel.x), crate::scalar::to_f64(pixel.y));
        let (col, row) = (u.round(), v.round());
        if !(col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height) {
            return Err(DepthError::OutOfBounds { u, v, width: self.width, height: self.height });
        }
        let d = self.depth[row as usize * self.width + col as usize];
        Ok((d > T::zero()).then_some(d))
    }

    pub fn get(&self, col: usize, row: usize) -> T {
        self.depth[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: T) {
        self.depth[row * self.width + col] = value;
    }
}

/// Predicted depth at each pixel; `None` where the map has no data.
pub fn sample_pdv<T: Real>(depth: &DepthMap<T>, pixels: &[Pixel<T>]) -> Result<Vec<Option<T>>, DepthError> {
    pixels.iter().map(|p| depth.sample(p)).collect()
}

/// Camera-frame depth of each matched world point; `None` behind the camera.
pub fn estimated_depths<T: Real>(
    matches: &[(Pixel<T>, WorldPoint<T>)],
    pose: &Pose<T>,
    k: &Intrinsics<T>,
) -> Vec<Option<T>> {
    matches.iter().map(|(_, pw)| project(pw, pose, k).ok().map(|(_, z)| z)).collect()
}

/// Which array the ranks index when forming the ordinal cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OrdinalIndexing {
    /// Ranks index the predicted depths sorted ascending.
    #[default]
    SortedPdv,
    /// Ranks index the predicted depths in match order.
    RawPdv,
}

/// Adaptive ordinal costs, mean-normalized, with [`OrdinalIndexing::SortedPdv`].
pub fn adaptive_ordinal_costs<T: Real>(edv: &[T], pdv: &[T]) -> Result<Vec<T>, DepthError> {
    adaptive_ordinal_costs_with(edv, pdv, OrdinalIndexing::SortedPdv)
}

/// For match `m` with map-depth rank `i` and predicted-depth rank `j`, the
/// raw cost is `|D[i] - D[j]|` where `D` is the predicted depth array selected
/// by `indexing`. Costs are divided by their mean; a mean below
/// [`COST_EPSILON`] yields all zeros. Ties rank by position.
pub fn adaptive_ordinal_costs_with<T: Real>(
    edv: &[T],
    pdv: &[T],
    indexing: OrdinalIndexing,
) -> Result<Vec<T>, DepthError> {
    if edv.len() != pdv.len() {
        return Err(DepthError::LengthMismatch(edv.len(), pdv.len()));
    }
    let n = edv.len();
    if n < 2 {
        return Err(DepthError::TooFew(n));
    }
    if edv.iter().chain(pdv).any(|v| !v.is_finite() || *v <= T::zero()) {
        return Err(DepthError::InvalidDepth);
    }
    let rank_edv = ranks(edv);
    let rank_pdv = ranks(pdv);
    let table: Vec<T> = match indexing {
        OrdinalIndexing::SortedPdv => {
            let mut sorted = pdv.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            sorted
        }
        OrdinalIndexing::RawPdv => pdv.to_vec(),
    };
    let raw: Vec<T> = (0..n).map(|m| (table[rank_edv[m]] - table[rank_pdv[m]]).abs()).collect();
    let mean = raw.iter().fold(T::zero(), |a, c| a + *c) / lit(n as f64);
    if !(mean > lit(COST_EPSILON)) {
        return Ok(vec![T::zero(); n]);
    }
    Ok(raw.into_iter().map(|c| c / mean).collect())
}

/// Ordinal rank of every entry (stable: equal values rank by position).
fn ranks<T: Real>(values: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite").then(a.cmp(&b)));
    let mut rank = vec![0; values.len()];
    for (r, idx) in order.into_iter().enumerate() {
        rank[idx] = r;
    }
    rank
}

/// Per-match costs for a set of 2D-3D matches.
///
/// Matches behind the camera cost `+∞`; matches on a no-data cell or outside
/// the depth map cost `0` and take no part in the ranking. The rest go through
/// [`adaptive_ordinal_costs_with`].
pub fn match_depth_costs<T: Real>(
    matches: &[(Pixel<T>, WorldPoint<T>)],
    pose: &Pose<T>,
    k: &Intrinsics<T>,
    depth: &DepthMap<T>,
    indexing: OrdinalIndexing,
) -> Result<Vec<T>, DepthError> {
    let edv = estimated_depths(matches, pose, k);
    let pdv: Vec<Option<T>> = matches.iter().map(|m| depth.sample(&m.0).ok().flatten()).collect();
    let mut costs = vec![T::zero(); matches.len()];
    let mut idx = Vec::new();
    let (mut e, mut p) = (Vec::new(), Vec::new());
    for m in 0..matches.len() {
        match (edv[m], pdv[m]) {
            (None, _) => costs[m] = lit(f64::INFINITY),
            (Some(_), None) => {}
            (Some(a), Some(b)) => {
                idx.push(m);
                e.push(a);
                p.push(b);
            }
        }
    }
    if idx.len() >= 2 {
        let c = adaptive_ordinal_costs_with(&e, &p, indexing)?;
        for (m, v) in idx.into_iter().zip(c) {
            costs[m] = v;
        }
    }
    Ok(costs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcvParams<T: Real> {
    /// Costs above `tau` (a multiple of the mean cost) are removed.
    pub tau: T,
    /// Reprojection errors are truncated at this value (pixels) when
    /// comparing fits, and matches below it under the prior pose are the ones
    /// refit.
    pub inlier_threshold: T,
    /// Required drop in mean truncated error (pixels) to commit a removal.
    pub min_improvement: T,
    pub refine_iterations: usize,
}

impl<T: Real> Default for DcvParams<T> {
    fn default() -> Self {
        Self { tau: lit(2.0), inlier_threshold: lit(8.0), min_improvement: lit(1e-6), refine_iterations: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcvOutcome<T: Real> {
    /// Indices of the accepted matches, ascending.
    pub kept: Vec<usize>,
    /// Matches dropped in the committed result (0 when reverted).
    pub removed: usize,
    /// Matches the cost threshold tentatively removed.
    pub flagged: usize,
    pub reverted: bool,
    /// Mean truncated reprojection error of the input set after refitting.
    pub error_before: T,
    /// Same measure for the returned set.
    pub error_after: T,
    /// Pose refit on the returned set.
    pub pose: Pose<T>,
}

/// Removes matches with cost above `tau` and keeps the removal only if the
/// refit pose explains the survivors strictly better than the full set was
/// explained, by at least `min_improvement`.
///
/// The fit measure is the mean reprojection error truncated at
/// `inlier_threshold`, after refining `pose` on the set's inliers. Fewer than
/// four survivors revert automatically.
pub fn dcv_filter<T: Real>(
    matches: &[(Pixel<T>, WorldPoint<T>)],
    costs: &[T],
    params: &DcvParams<T>,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
) -> Result<DcvOutcome<T>, DepthError> {
    if matches.len() != costs.len() {
        return Err(DepthError::LengthMismatch(matches.len(), costs.len()));
    }
    if !(params.tau > T::zero()) {
        return Err(DepthError::InvalidTau);
    }
    let all: Vec<usize> = (0..matches.len()).collect();
    let (error_before, pose_before) = fit_error(matches, &all, params, pose, k);
    let survivors: Vec<usize> = all.iter().copied().filter(|&i| !(costs[i] > params.tau)).collect();
    let flagged = matches.len() - survivors.len();

    let revert = |reverted: bool| DcvOutcome {
        kept: all.clone(),
        removed: 0,
        flagged,
        reverted,
        error_before,
        error_after: error_before,
        pose: pose_before,
    };
    if flagged == 0 {
        return Ok(revert(false));
    }
    if survivors.len() < 4 {
        return Ok(revert(true));
    }
    let (error_after, pose_after) = fit_error(matches, &survivors, params, pose, k);
    if error_after + params.min_improvement < error_before {
        Ok(DcvOutcome {
            kept: survivors,
            removed: flagged,
            flagged,
            reverted: false,
            error_before,
            error_after,
            pose: pose_after,
        })
    } else {
        Ok(revert(true))
    }
}

/// Mean truncated reprojection error of `subset` after refining `prior` on
/// the subset's inliers.
pub fn fit_error<T: Real>(
    matches: &[(Pixel<T>, WorldPoint<T>)],
    subset: &[usize],
    params: &DcvParams<T>,
    prior: &Pose<T>,
    k: &Intrinsics<T>,
) -> (T, Pose<T>) {
    if subset.is_empty() {
        return (lit(f64::INFINITY), *prior);
    }
    let inliers: Vec<(Pixel<T>, WorldPoint<T>)> = subset
        .iter()
        .map(|&i| matches[i])
        .filter(|(px, pw)| reprojection_error(px, pw, prior, k) < params.inlier_threshold)
        .collect();
    let pose = match refine_pnp(&inliers, k, prior, params.refine_iterations) {
        Ok(r) if !r.singular => r.pose,
        _ => *prior,
    };
    let total = subset.iter().fold(T::zero(), |acc, &i| {
        let (px, pw) = &matches[i];
        acc + reprojection_error(px, pw, &pose, k).min(params.inlier_threshold)
    });
    (total / lit(subset.len() as f64), pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Point3, UnitQuaternion, Vector3};
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let c: Vec<f64> = adaptive_ordinal_costs(&[1.0, 2.0, 3.0], &[10.0, 30.0, 20.0]).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c[0].abs() < 1e-15 && (c[1] - 1.5).abs() < 1e-12 && (c[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn same_order_is_zero_cost() {
        let c = adaptive_ordinal_costs(&[1.0, 5.0, 2.0, 9.0], &[0.3, 2.0, 0.5, 7.0]).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn errors() {
        assert_eq!(adaptive_ordinal_costs(&[1.0, 2.0], &[1.0]), Err(DepthError::LengthMismatch(2, 1)));
        assert_eq!(adaptive_ordinal_costs(&[1.0], &[1.0]), Err(DepthError::TooFew(1)));
        assert_eq!(adaptive_ordinal_costs(&[1.0, -2.0], &[1.0, 2.0]), Err(DepthError::InvalidDepth));
    }

    #[test]
    fn raw_indexing_differs() {
        let c: Vec<f64> =
            adaptive_ordinal_costs_with(&[1.0, 2.0, 3.0], &[10.0, 30.0, 20.0], OrdinalIndexing::RawPdv).unwrap();
        // i = [0,1,2], j = [0,2,1]; raw table [10,30,20] -> [0, 10, 10]
        assert!((c[1] - 1.5).abs() < 1e-12 && c[0] == 0.0);
    }

    #[test]
    fn estimated_depth_examples() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let m = [(Pixel::new(50.0, 50.0), Point3::new(0.0, 0.0, 2.0))];
        assert_eq!(estimated_depths(&m, &Pose::identity(), &k), vec![Some(2.0)]);
        let back = Pose::from_center(UnitQuaternion::identity(), &Point3::new(0.0, 0.0, -1.0));
        assert_eq!(estimated_depths(&m, &back, &k), vec![Some(3.0)]);
        let ahead = Pose::from_center(UnitQuaternion::identity(), &Point3::new(0.0, 0.0, 3.0));
        assert_eq!(estimated_depths(&m, &ahead, &k), vec![None]);
    }

    #[test]
    fn pdv_sampling() {
        let uniform = DepthMap::new(4, 4, vec![5.0; 16]).unwrap();
        assert_eq!(uniform.sample(&Pixel::new(2.2, 3.1)).unwrap(), Some(5.0));
        let mut holes = uniform.clone();
        holes.set(1, 1, 0.0);
        assert_eq!(holes.sample(&Pixel::new(1.0, 1.0)).unwrap(), None);
        let grad = DepthMap::new(5, 2, (0..10).map(|i| 1.0 + (i % 5) as f64).collect()).unwrap();
        for u in 0..5 {
            assert_eq!(grad.sample(&Pixel::new(u as f64, 1.0)).unwrap(), Some(1.0 + u as f64));
        }
        assert!(matches!(grad.sample(&Pixel::new(5.0, 0.0)), Err(DepthError::OutOfBounds { .. })));
    }

    fn scene(n: usize) -> (Intrinsics<f64>, Pose<f64>, Vec<(Pixel<f64>, WorldPoint<f64>)>) {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let pose = Pose::from_center(UnitQuaternion::from_euler_angles(0.05, 0.1, -0.02), &Point3::new(0.2, 0.1, -1.0));
        let inv = pose.inverse();
        let m = (0..n)
            .map(|i| {
                let px = Pixel::new(40.0 + (i * 37 % 560) as f64, 30.0 + (i * 53 % 420) as f64);
                let z = 4.0 + (i as f64 * 0.731) % 9.0;
                (px, inv.transform(&crate::geometry::back_project(&px, z, &k)))
            })
            .collect();
        (k, pose, m)
    }

    #[test]
    fn all_zero_costs_do_not_remove() {
        let (k, pose, m) = scene(20);
        let out = dcv_filter(&m, &[0.0; 20], &DcvParams::default(), &pose, &k).unwrap();
        assert_eq!(out.kept.len(), 20);
        assert!(!out.reverted && out.removed == 0);
    }

    #[test]
    fn single_swap_is_removed() {
        let (k, pose, mut m) = scene(30);
        let (a, b) = (m[3].1, m[11].1);
        m[3].1 = b;
        m[11].1 = a;
        let depth = |pw: &WorldPoint<f64>| pose.transform(pw).z;
        let edv: Vec<f64> = m.iter().map(|(_, pw)| depth(pw)).collect();
        let mut pdv = edv.clone();
        pdv.swap(3, 11);
        let pdv: Vec<f64> = pdv.into_iter().map(|d| d * 0.37).collect();
        let costs = adaptive_ordinal_costs(&edv, &pdv).unwrap();
        let flagged: Vec<usize> = (0..30).filter(|&i| costs[i] > 2.0).collect();
        assert_eq!(flagged, vec![3, 11]);
        let out = dcv_filter(&m, &costs, &DcvParams::default(), &pose, &k).unwrap();
        assert!(!out.reverted);
        assert_eq!(out.removed, 2);
        assert!(out.error_after < out.error_before);
    }

    #[test]
    fn harmful_removal_reverts() {
        let (k, pose, m) = scene(30);
        let mut costs = vec![0.5; 30];
        costs[0] = 5.0;
        costs[7] = 5.0;
        let out = dcv_filter(&m, &costs, &DcvParams::default(), &pose, &k).unwrap();
        assert!(out.reverted);
        assert_eq!(out.kept, (0..30).collect::<Vec<_>>());
        assert_eq!(out.error_after, out.error_before);
    }

    #[test]
    fn too_few_survivors_revert() {
        let (k, pose, m) = scene(6);
        let costs = [9.0, 9.0, 9.0, 0.0, 0.0, 0.0];
        let out = dcv_filter(&m, &costs, &DcvParams::default(), &pose, &k).unwrap();
        assert!(out.reverted && out.kept.len() == 6);
    }

    #[test]
    fn behind_camera_costs_infinite() {
        let (k, pose, mut m) = scene(10);
        m[2].1 = pose.inverse().transform(&Point3::new(0.0, 0.0, -3.0));
        let dm = DepthMap::new(640, 480, vec![1.0; 640 * 480]).unwrap();
        let c = match_depth_costs(&m, &pose, &k, &dm, OrdinalIndexing::SortedPdv).unwrap();
        assert_eq!(c[2], f64::INFINITY);
        assert!(c.iter().enumerate().all(|(i, v)| i == 2 || v.is_finite()));
        let _ = Vector3::<f64>::zeros();
    }

    proptest! {
        #[test]
        fn scale_and_permutation_invariance(
            vals in proptest::collection::vec((0.1f64..100.0, 0.1f64..100.0), 2..60),
            s in 0.01f64..100.0,
            t in 0.01f64..100.0,
            rot in 0usize..60,
        ) {
            let edv: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let pdv: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let base = adaptive_ordinal_costs(&edv, &pdv).unwrap();
            let scaled = adaptive_ordinal_costs(
                &edv.iter().map(|v| v * t).collect::<Vec<_>>(),
                &pdv.iter().map(|v| v * s).collect::<Vec<_>>(),
            ).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            let n = edv.len();
            let r = rot % n;
            let perm: Vec<usize> = (0..n).map(|i| (i + r) % n).collect();
            let pe: Vec<f64> = perm.iter().map(|&i| edv[i]).collect();
            let pp: Vec<f64> = perm.iter().map(|&i| pdv[i]).collect();
            let pc = adaptive_ordinal_costs(&pe, &pp).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((pc[k] - base[i]).abs() <= 1e-12 * (1.0 + base[i].abs()));
            }
        }
    }
}
