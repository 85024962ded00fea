//! Consensus adapters for absolute pose and planar homographies.

use nalgebra::Matrix3;

use super::consensus::ModelEstimator;
use super::homography::{estimate_homography, transfer_error};
use super::p3p::solve_p3p;
use crate::geometry::{reprojection_error, Intrinsics, Pixel, Pose, WorldPoint};
use crate::scalar::Real;

/// Absolute pose from 2D-3D matches, hypothesized with P3P.
pub struct PnpEstimator<'a, T: Real> {
    pub matches: &'a [(Pixel<T>, WorldPoint<T>)],
    pub intrinsics: Intrinsics<T>,
}

impl<T: Real> ModelEstimator<T> for PnpEstimator<'_, T> {
    type Model = Pose<T>;

    fn sample_size(&self) -> usize {
        3
    }

    fn fit(&self, sample: &[usize]) -> Vec<Pose<T>> {
        let triple = [self.matches[sample[0]], self.matches[sample[1]], self.matches[sample[2]]];
        solve_p3p(&triple, &self.intrinsics).unwrap_or_default()
    }

    fn residual(&self, model: &Pose<T>, index: usize) -> T {
        let (px, pw) = &self.matches[index];
        reprojection_error(px, pw, model, &self.intrinsics)
    }
}

/// Homography between two images from pixel correspondences `(src, dst)`.
pub struct HomographyEstimator<'a, T: Real> {
    pub pairs: &'a [(Pixel<T>, Pixel<T>)],
}

impl<T: Real> ModelEstimator<T> for HomographyEstimator<'_, T> {
    type Model = Matrix3<T>;

    fn sample_size(&self) -> usize {
        4
    }

    fn fit(&self, sample: &[usize]) -> Vec<Matrix3<T>> {
        let pairs: Vec<_> = sample.iter().map(|&i| self.pairs[i]).collect();
        estimate_homography(&pairs).into_iter().collect()
    }

    fn residual(&self, model: &Matrix3<T>, index: usize) -> T {
        let (src, dst) = &self.pairs[index];
        transfer_error(model, src, dst)
    }
}
