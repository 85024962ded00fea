//! Seeded hypothesize-and-verify consensus with hard or soft inlier scoring
//! and weight-proportional minimal-set sampling.
//!
//! Iterations are evaluated in fixed-size batches. Each iteration draws its
//! minimal set from its own ChaCha stream keyed by `(seed, iteration)`, and
//! batch results are reduced in iteration order, so the outcome does not
//! depend on how many worker threads evaluate a batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::scoring::{indicator, weighted_indicator};
use super::{EstimationError, RansacConfig};
use crate::scalar::{lit, to_f64, Real};

const BATCH: usize = 32;

/// A model family the consensus engine can hypothesize and score.
pub trait ModelEstimator<T: Real>: Sync {
    type Model: Clone + Send + Sync;

    /// Size of a minimal sample.
    fn sample_size(&self) -> usize;

    /// Fits zero or more models to a minimal sample of data indices.
    fn fit(&self, sample: &[usize]) -> Vec<Self::Model>;

    /// Residual of datum `index` under `model` (pixels); `+∞` when undefined.
    fn residual(&self, model: &Self::Model, index: usize) -> T;
}

/// One datum offered to the consensus engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSample<T: Real> {
    /// Datum index passed to the estimator.
    pub index: usize,
    /// Relative probability of being drawn into a minimal set.
    pub sampling_weight: T,
    /// Threshold reduction ratio in `(0, 1]` used by soft scoring.
    pub mu: T,
}

impl<T: Real> WeightedSample<T> {
    /// Unit weight and `mu = 1`.
    pub fn uniform(index: usize) -> Self {
        Self { index, sampling_weight: T::one(), mu: T::one() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMode {
    /// Count of residuals below the threshold.
    Standard,
    /// Sum of soft scores with each sample's own `mu`.
    Weighted,
}

/// Best hypothesis found by [`consensus`].
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<M, T: Real> {
    pub model: M,
    pub score: T,
    /// Datum indices (`WeightedSample::index`) scoring above zero, ascending.
    pub inlier_indices: Vec<usize>,
    pub mean_inlier_error: T,
    /// Iteration that produced the model.
    pub iteration: usize,
    /// Iterations evaluated in total.
    pub iterations: usize,
}

struct Scored<M, T: Real> {
    model: M,
    score: T,
    inliers: Vec<usize>,
    mean_error: T,
    iteration: usize,
}

impl<M, T: Real> Scored<M, T> {
    fn beats(&self, other: &Self) -> bool {
        if self.score != other.score {
            return self.score > other.score;
        }
        if self.mean_error != other.mean_error {
            return self.mean_error < other.mean_error;
        }
        self.iteration < other.iteration
    }
}

/// Runs consensus over `samples` and returns the best-scoring hypothesis.
pub fn consensus<T, E>(
    estimator: &E,
    samples: &[WeightedSample<T>],
    cfg: &RansacConfig<T>,
    mode: ScoringMode,
) -> Result<Hypothesis<E::Model, T>, EstimationError>
where
    T: Real,
    E: ModelEstimator<T>,
{
    cfg.validate()?;
    let m = estimator.sample_size();
    let weights: Vec<f64> = samples
        .iter()
        .map(|s| {
            let w = to_f64(s.sampling_weight);
            if w.is_finite() && w > 0.0 {
                w
            } else {
                0.0
            }
        })
        .collect();
    let drawable = weights.iter().filter(|w| **w > 0.0).count();
    if samples.len() < m || drawable < m {
        return Err(EstimationError::InsufficientSamples { needed: m, got: drawable.min(samples.len()) });
    }

    let evaluate = |iteration: usize| -> Option<Scored<E::Model, T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iteration as u64);
        let picked = draw_without_replacement(&weights, m, &mut rng);
        let data: Vec<usize> = picked.iter().map(|&p| samples[p].index).collect();
        let mut best: Option<Scored<E::Model, T>> = None;
        for model in estimator.fit(&data) {
            let scored = score_model(estimator, model, samples, cfg.threshold, mode, iteration);
            if best.as_ref().is_none_or(|b| scored.beats(b)) {
                best = Some(scored);
            }
        }
        best
    };

    let mut best: Option<Scored<E::Model, T>> = None;
    let mut required = cfg.max_iterations;
    let mut done = 0;
    while done < required {
        let end = (done + BATCH).min(cfg.max_iterations);
        let batch: Vec<Option<Scored<E::Model, T>>> = (done..end).into_par_iter().map(evaluate).collect();
        for candidate in batch.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| candidate.beats(b)) {
                best = Some(candidate);
            }
        }
        done = end;
        if let Some(b) = &best {
            required = required.min(adaptive_iterations(b.inliers.len(), samples.len(), m, to_f64(cfg.confidence)));
        }
    }

    let best = best.ok_or(EstimationError::ConsensusFailure { inliers: 0, required: cfg.min_inliers })?;
    if best.inliers.len() < cfg.min_inliers {
        return Err(EstimationError::ConsensusFailure { inliers: best.inliers.len(), required: cfg.min_inliers });
    }
    let mut inlier_indices = best.inliers;
    inlier_indices.sort_unstable();
    Ok(Hypothesis {
        model: best.model,
        score: best.score,
        inlier_indices,
        mean_inlier_error: best.mean_error,
        iteration: best.iteration,
        iterations: done,
    })
}

fn score_model<T: Real, E: ModelEstimator<T>>(
    estimator: &E,
    model: E::Model,
    samples: &[WeightedSample<T>],
    threshold: T,
    mode: ScoringMode,
    iteration: usize,
) -> Scored<E::Model, T> {
    let mut score = T::zero();
    let mut inliers = Vec::new();
    let mut err_sum = T::zero();
    for s in samples {
        let e = estimator.residual(&model, s.index);
        let v = match mode {
            ScoringMode::Standard => indicator(e, threshold),
            ScoringMode::Weighted => weighted_indicator(e, threshold, s.mu),
        };
        if v > T::zero() {
            score += v;
            err_sum += e;
            inliers.push(s.index);
        }
    }
    let mean_error = if inliers.is_empty() { lit(f64::INFINITY) } else { err_sum / lit(inliers.len() as f64) };
    Scored { model, score, inliers, mean_error, iteration }
}

/// Sequential weighted draws without replacement. Zero-weight entries are
/// never chosen; equal weights give uniform sampling.
fn draw_without_replacement(weights: &[f64], m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    let mut remaining: f64 = weights.iter().sum();
    for _ in 0..m {
        let target = rng.random::<f64>() * remaining;
        let mut acc = 0.0;
        let mut pick = None;
        let mut last_positive = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 || chosen.contains(&i) {
                continue;
            }
            last_positive = Some(i);
            acc += w;
            if target < acc {
                pick = Some(i);
                break;
            }
        }
        // Rounding in the running sum can leave the target just past the end.
        let Some(i) = pick.or(last_positive) else { break };
        remaining -= weights[i];
        chosen.push(i);
    }
    chosen
}

/// Iterations needed so that an all-inlier minimal set has been drawn with
/// the requested confidence, given the current inlier ratio.
fn adaptive_iterations(inliers: usize, total: usize, m: usize, confidence: f64) -> usize {
    if total == 0 || inliers == 0 {
        return usize::MAX;
    }
    let w = inliers as f64 / total as f64;
    let p_good = w.powi(m as i32);
    if p_good >= 1.0 {
        return 1;
    }
    let denom = (-p_good).ln_1p();
    if denom >= 0.0 || !denom.is_finite() {
        return usize::MAX;
    }
    let k = ((1.0 - confidence).ln() / denom).ceil();
    if k.is_finite() && k >= 1.0 {
        (k as usize).max(1)
    } else {
        usize::MAX
    }
}
