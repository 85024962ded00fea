//! Robust model fitting: minimal solvers, least-squares refinement and the
//! consensus engine.

mod consensus;
mod homography;
mod models;
mod p3p;
mod refine;
mod scoring;

pub use consensus::{consensus, Hypothesis, ModelEstimator, ScoringMode, WeightedSample};
pub use homography::{estimate_homography, transfer, transfer_error};
pub use models::{HomographyEstimator, PnpEstimator};
pub use p3p::solve_p3p;
pub use refine::{refine_pnp, Refinement};
pub use scoring::{indicator, weighted_indicator};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("no real solution")]
    NoSolution,
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("best hypothesis has {inliers} inliers, {required} required")]
    ConsensusFailure { inliers: usize, required: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Parameters of one consensus run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig<T: Real> {
    /// Inlier threshold `e_t` in pixels.
    pub threshold: T,
    pub max_iterations: usize,
    /// Desired probability of having drawn at least one all-inlier sample.
    pub confidence: T,
    pub seed: u64,
    pub min_inliers: usize,
}

impl<T: Real> RansacConfig<T> {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if !(self.threshold > T::zero()) {
            return Err(EstimationError::InvalidConfig("threshold must be positive"));
        }
        if !(self.confidence > T::zero() && self.confidence < T::one()) {
            return Err(EstimationError::InvalidConfig("confidence must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(EstimationError::InvalidConfig("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

impl<T: Real> Default for RansacConfig<T> {
    fn default() -> Self {
        Self {
            threshold: crate::lit(8.0),
            max_iterations: 1000,
            confidence: crate::lit(0.9999),
            seed: 0,
            min_inliers: 12,
        }
    }
}
