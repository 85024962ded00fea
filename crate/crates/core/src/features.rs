//! Local features: score-weighted descriptor enhancement, exact nearest
//! neighbour matching with ratio and mutual checks, merging of matches from
//! several extractors, and mean matching accuracy under a known homography.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::Matrix3;
use rayon::prelude::*;
use thiserror::Error;

use crate::estimation::transfer;
use crate::geometry::Pixel;
use crate::scalar::{lit, Real};
use crate::semantic::ClassId;

/// Identifies the extractor that produced a keypoint or descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Family(pub String);

impl Family {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Family {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint<T: Real> {
    pub pixel: Pixel<T>,
    /// Detection / descriptor confidence in `[0, 1]`.
    pub score: T,
    pub family: Family,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor<T: Real> {
    pub values: Vec<T>,
    pub family: Family,
}

impl<T: Real> Descriptor<T> {
    pub fn new(values: Vec<T>, family: Family) -> Self {
        Self { values, family }
    }

    pub fn norm(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt()
    }

    pub fn is_unit(&self, tol: T) -> bool {
        (self.norm() - T::one()).abs() <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match<T: Real> {
    pub query_idx: usize,
    pub train_idx: usize,
    pub distance: T,
    /// Consistency weight, 1 until a later stage assigns one.
    pub weight: T,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("descriptor family mismatch: expected {expected}, found {found}")]
    FamilyMismatch { expected: Family, found: Family },
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f64),
}

/// Scales every component by the detection score, `d' = d · s`.
pub fn enhance_descriptor<T: Real>(d: &Descriptor<T>, score: T) -> Descriptor<T> {
    Descriptor { values: d.values.iter().map(|v| *v * score).collect(), family: d.family.clone() }
}

/// Exact nearest-neighbour matching with Lowe's ratio test.
///
/// A query keeps its nearest train descriptor when `d1 / d2 < ratio`. With
/// `mutual`, the train descriptor's nearest query must be the same query and
/// pass the ratio test in that direction too, which makes the pair set
/// symmetric in its arguments. All-zero descriptors never match. Output is
/// sorted by query index.
pub fn match_descriptors<T: Real>(
    query: &[Descriptor<T>],
    train: &[Descriptor<T>],
    ratio: T,
    mutual: bool,
) -> Result<Vec<Match<T>>, MatchError> {
    if !(ratio > T::zero() && ratio <= T::one()) {
        return Err(MatchError::InvalidRatio(crate::scalar::to_f64(ratio)));
    }
    let Some(first) = query.first().or(train.first()) else {
        return Ok(Vec::new());
    };
    let dim = first.values.len();
    for d in query.iter().chain(train) {
        if d.family != first.family {
            return Err(MatchError::FamilyMismatch { expected: first.family.clone(), found: d.family.clone() });
        }
        if d.values.len() != dim {
            return Err(MatchError::DimensionMismatch(dim, d.values.len()));
        }
    }
    if query.is_empty() || train.is_empty() {
        return Ok(Vec::new());
    }

    let usable = |d: &Descriptor<T>| d.values.iter().any(|v| *v != T::zero());
    let q_ok: Vec<bool> = query.iter().map(usable).collect();
    let t_ok: Vec<bool> = train.iter().map(usable).collect();
    let t_ok = &t_ok;

    let nt = train.len();
    let dist: Vec<T> = query
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, q)| {
            let q_ok = q_ok[i];
            train.iter().enumerate().map(move |(j, t)| {
                if q_ok && t_ok[j] {
                    squared_distance(&q.values, &t.values)
                } else {
                    lit(f64::INFINITY)
                }
            })
        })
        .collect();

    let forward: Vec<Option<(usize, T)>> =
        (0..query.len()).map(|i| best_two(&dist[i * nt..(i + 1) * nt], ratio)).collect();
    let backward: Option<Vec<Option<(usize, T)>>> = mutual.then(|| {
        (0..nt)
            .map(|j| {
                let col: Vec<T> = (0..query.len()).map(|i| dist[i * nt + j]).collect();
                best_two(&col, ratio)
            })
            .collect()
    });

    let mut out = Vec::new();
    for (i, f) in forward.iter().enumerate() {
        let Some((j, d)) = *f else { continue };
        if let Some(back) = &backward {
            if back[j].map(|(bi, _)| bi) != Some(i) {
                continue;
            }
        }
        out.push(Match { query_idx: i, train_idx: j, distance: d, weight: T::one() });
    }
    Ok(out)
}

/// Nearest entry and its distance when it passes the ratio test.
fn best_two<T: Real>(row: &[T], ratio: T) -> Option<(usize, T)> {
    let inf: T = lit(f64::INFINITY);
    let (mut b1, mut d1, mut d2) = (usize::MAX, inf, inf);
    for (j, &d) in row.iter().enumerate() {
        if d < d1 {
            d2 = d1;
            d1 = d;
            b1 = j;
        } else if d < d2 {
            d2 = d;
        }
    }
    if b1 == usize::MAX || !d1.is_finite() {
        return None;
    }
    let (n1, n2) = (d1.sqrt(), d2.sqrt());
    let passes = if n2.is_finite() { n1 < ratio * n2 } else { true };
    passes.then_some((b1, n1))
}

#[inline]
fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| {
        let d = *x - *y;
        acc + d * d
    })
}

/// What [`merge_families`] needs to know about a match to detect duplicates.
pub trait MergeKey<T: Real> {
    fn query_pixel(&self) -> Pixel<T>;
    /// Identifier of the 3D point the match lifts to.
    fn target_id(&self) -> u64;
    fn distance(&self) -> T;
}

/// Unions the matches of several extractors.
///
/// Two matches are duplicates when they lift to the same 3D point and their
/// query keypoints are at most `dedupe_radius` pixels apart; the one with the
/// lower descriptor distance survives (earlier family and position on ties).
/// Survivors keep their family-then-position order.
pub fn merge_families<T, M>(per_family: &BTreeMap<Family, Vec<M>>, dedupe_radius: T) -> Vec<M>
where
    T: Real,
    M: MergeKey<T> + Clone,
{
    let all: Vec<&M> = per_family.values().flatten().collect();
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.sort_by(|&a, &b| {
        all[a].distance().partial_cmp(&all[b].distance()).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut accepted_by_target: HashMap<u64, Vec<Pixel<T>>> = HashMap::new();
    let mut keep = vec![false; all.len()];
    for idx in order {
        let m = all[idx];
        let px = m.query_pixel();
        let slot = accepted_by_target.entry(m.target_id()).or_default();
        if slot.iter().any(|p| (p - px).norm() <= dedupe_radius) {
            continue;
        }
        slot.push(px);
        keep[idx] = true;
    }
    all.into_iter().zip(keep).filter_map(|(m, k)| k.then_some(m)).cloned().collect()
}

/// Fraction of correspondences `(query, train)` whose train pixel lies within
/// each threshold of `h_true` applied to the query pixel. Empty input yields
/// zeros.
pub fn mean_matching_accuracy<T: Real>(
    pairs: &[(Pixel<T>, Pixel<T>)],
    h_true: &Matrix3<T>,
    thresholds: &[T],
) -> Vec<T> {
    if pairs.is_empty() {
        return vec![T::zero(); thresholds.len()];
    }
    let errors: Vec<T> = pairs
        .iter()
        .map(|(q, t)| match transfer(h_true, q) {
            Some(p) => (p - t).norm(),
            None => lit(f64::INFINITY),
        })
        .collect();
    let n: T = lit(pairs.len() as f64);
    thresholds.iter().map(|&th| lit::<T>(errors.iter().filter(|e| **e <= th).count() as f64) / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn fam() -> Family {
        Family::new("r2d2")
    }

    fn desc(v: &[f64]) -> Descriptor<f64> {
        Descriptor::new(v.to_vec(), fam())
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn enhancement_examples() {
        let d = desc(&[0.6, 0.8]);
        assert_eq!(enhance_descriptor(&d, 0.5).values, vec![0.3, 0.4]);
        assert_eq!(enhance_descriptor(&d, 1.0), d);
        let z = enhance_descriptor(&d, 0.0);
        assert!(z.values.iter().all(|v| *v == 0.0));
        assert!((enhance_descriptor(&d, 0.25).norm() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_descriptor_matches_nothing() {
        let q = vec![desc(&[0.0, 0.0])];
        let t = vec![desc(&[0.0, 0.0]), desc(&[1.0, 0.0])];
        assert!(match_descriptors(&q, &t, 0.9, false).unwrap().is_empty());
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Vec<_> = (0..50).map(|_| desc(&random_unit(&mut rng, 16))).collect();
        let m = match_descriptors(&q, &q.clone(), 0.9, true).unwrap();
        assert_eq!(m.len(), 50);
        for (i, mm) in m.iter().enumerate() {
            assert_eq!((mm.query_idx, mm.train_idx, mm.distance), (i, i, 0.0));
        }
    }

    #[test]
    fn equidistant_dropped_by_ratio() {
        let q = vec![desc(&[0.0, 1.0])];
        let t = vec![desc(&[1.0, 0.0]), desc(&[-1.0, 0.0])];
        assert!(match_descriptors(&q, &t, 1.0, false).unwrap().is_empty());
    }

    #[test]
    fn family_mismatch() {
        let q = vec![desc(&[1.0, 0.0])];
        let t = vec![Descriptor::new(vec![1.0, 0.0], Family::new("superpoint"))];
        assert!(matches!(match_descriptors(&q, &t, 0.8, true), Err(MatchError::FamilyMismatch { .. })));
    }

    #[test]
    fn gaussian_clusters_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200;
        let centers: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, 32)).collect();
        let noisy = |rng: &mut ChaCha8Rng, c: &[f64]| {
            let v: Vec<f64> = c.iter().map(|x| x + 0.03 * rng.sample::<f64, _>(StandardNormal)).collect();
            let nn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            desc(&v.iter().map(|x| x / nn).collect::<Vec<_>>())
        };
        let q: Vec<_> = centers.iter().map(|c| noisy(&mut rng, c)).collect();
        let t: Vec<_> = centers.iter().map(|c| noisy(&mut rng, c)).collect();
        let m = match_descriptors(&q, &t, 0.8, false).unwrap();
        let correct = m.iter().filter(|mm| mm.query_idx == mm.train_idx).count();
        assert!(correct as f64 >= 0.99 * n as f64, "{correct}");
        // Independent brute-force nearest neighbour.
        for mm in &m {
            let mut best = (usize::MAX, f64::INFINITY);
            for (j, tj) in t.iter().enumerate() {
                let d: f64 =
                    q[mm.query_idx].values.iter().zip(&tj.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if d < best.1 {
                    best = (j, d);
                }
            }
            assert_eq!(mm.train_idx, best.0);
            assert!((mm.distance - best.1).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_matching_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<_> = (0..60).map(|_| desc(&random_unit(&mut rng, 8))).collect();
        let b: Vec<_> = (0..70).map(|_| desc(&random_unit(&mut rng, 8))).collect();
        let ab: Vec<_> =
            match_descriptors(&a, &b, 0.95, true).unwrap().iter().map(|m| (m.query_idx, m.train_idx)).collect();
        let mut ba: Vec<_> =
            match_descriptors(&b, &a, 0.95, true).unwrap().iter().map(|m| (m.train_idx, m.query_idx)).collect();
        ba.sort();
        assert_eq!(ab, ba);
        assert!(!ab.is_empty());
    }

    #[test]
    fn enhanced_ranking_matches_brute_force() {
        // Same base descriptor at two scores; the enhanced distance from the
        // query decides which candidate is nearer.
        let base = [0.6, 0.8];
        let query_score = 0.7;
        let q = vec![enhance_descriptor(&desc(&base), query_score)];
        for (s1, s2) in [(0.9, 0.5), (0.72, 0.2), (0.3, 0.69), (1.0, 0.75)] {
            let t = vec![enhance_descriptor(&desc(&base), s1), enhance_descriptor(&desc(&base), s2)];
            let m = match_descriptors(&q, &t, 1.0, false).unwrap();
            // |s_q d - s d| = |s_q - s| for unit d.
            let expected = if (query_score - s1).abs() < (query_score - s2).abs() { 0 } else { 1 };
            assert_eq!(m[0].train_idx, expected);
        }
    }

    #[derive(Clone, Debug, PartialEq)]
    struct M {
        px: Pixel<f64>,
        point: u64,
        dist: f64,
        tag: usize,
    }

    impl MergeKey<f64> for M {
        fn query_pixel(&self) -> Pixel<f64> {
            self.px
        }
        fn target_id(&self) -> u64 {
            self.point
        }
        fn distance(&self) -> f64 {
            self.dist
        }
    }

    #[test]
    fn merge_disjoint_and_duplicates() {
        let a = vec![M { px: Pixel::new(1.0, 1.0), point: 1, dist: 0.2, tag: 0 }];
        let b = vec![M { px: Pixel::new(50.0, 1.0), point: 2, dist: 0.1, tag: 1 }];
        let mut map = BTreeMap::new();
        map.insert(Family::new("a"), a.clone());
        map.insert(Family::new("b"), b.clone());
        assert_eq!(merge_families(&map, 0.5).len(), 2);

        map.insert(Family::new("b"), vec![M { dist: 0.1, tag: 7, ..a[0].clone() }]);
        let out = merge_families(&map, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tag, 7);
    }

    #[test]
    fn merge_planted_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100;
        let a: Vec<M> = (0..n)
            .map(|i| M { px: Pixel::new(i as f64 * 10.0, 5.0), point: i as u64, dist: rng.random(), tag: i })
            .collect();
        let overlap = 30;
        let b: Vec<M> = (0..n)
            .map(|i| {
                if i < overlap {
                    M {
                        px: a[i].px + nalgebra::Vector2::new(0.6, 0.6),
                        point: a[i].point,
                        dist: rng.random(),
                        tag: 1000 + i,
                    }
                } else {
                    M {
                        px: Pixel::new(i as f64 * 10.0, 300.0),
                        point: 10_000 + i as u64,
                        dist: rng.random(),
                        tag: 1000 + i,
                    }
                }
            })
            .collect();
        let mut map = BTreeMap::new();
        map.insert(Family::new("a"), a);
        map.insert(Family::new("b"), b);
        assert_eq!(merge_families(&map, 1.0).len(), 2 * n - overlap);
    }

    #[test]
    fn mma_examples() {
        let h = Matrix3::<f64>::identity();
        let exact: Vec<_> = (0..10).map(|i| (Pixel::new(i as f64, 2.0), Pixel::new(i as f64, 2.0))).collect();
        assert_eq!(mean_matching_accuracy(&exact, &h, &[0.5, 1.0, 3.0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(mean_matching_accuracy::<f64>(&[], &h, &[1.0, 2.0]), vec![0.0, 0.0]);
        let half: Vec<_> = (0..10)
            .map(|i| {
                let p = Pixel::new(i as f64 * 3.0, 7.0);
                (p, if i % 2 == 0 { p } else { Pixel::new(p.x + 3.0, p.y + 4.0) })
            })
            .collect();
        assert_eq!(mean_matching_accuracy(&half, &h, &[1.0, 10.0]), vec![0.5, 1.0]);
    }
}
