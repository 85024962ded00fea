//! Monocular visual localization against a 3D point map.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: poses, intrinsics, projection, triangulation and pose metrics.
//! * [`estimation`]: P3P, normalized-DLT homographies, nonlinear PnP refinement
//!   and a seeded consensus engine with hard and soft (semantic-weighted)
//!   inlier scoring plus weighted minimal-set sampling.
//! * [`features`]: descriptor enhancement by detection score, ratio/mutual
//!   matching, multi-extractor merging and the mean matching accuracy metric.
//! * [`semantic`]: label-consistency filtering and candidate weighting.
//! * [`depth`]: ordinal depth-consistency costs and the filtering stage that
//!   reverts itself when it does not improve the fit.
//! * [`retrieval`]: global retrieval, homography verification, re-ranking and
//!   pose clustering.
//! * [`pipeline`]: the end-to-end localizer.
//! * [`io`]: the versioned text formats and the config file.
//! * [`synth`]: ground-truth scene generation and pose-recall evaluation.
//!
//! The numeric kernels are generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases.

pub mod depth;
pub mod estimation;
pub mod features;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod retrieval;
mod scalar;
pub mod semantic;
pub mod synth;

pub use scalar::{lit, Real};

pub type Pose64 = geometry::Pose<f64>;
pub type Pose32 = geometry::Pose<f32>;
pub type Intrinsics64 = geometry::Intrinsics<f64>;
pub type Intrinsics32 = geometry::Intrinsics<f32>;
pub type Pixel64 = geometry::Pixel<f64>;
pub type Pixel32 = geometry::Pixel<f32>;
pub type WorldPoint64 = geometry::WorldPoint<f64>;
pub type WorldPoint32 = geometry::WorldPoint<f32>;
pub type RansacConfig64 = estimation::RansacConfig<f64>;
pub type RansacConfig32 = estimation::RansacConfig<f32>;
pub type Descriptor64 = features::Descriptor<f64>;
pub type Descriptor32 = features::Descriptor<f32>;
pub type DepthMap64 = depth::DepthMap<f64>;
pub type DepthMap32 = depth::DepthMap<f32>;
