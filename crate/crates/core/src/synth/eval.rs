//! Pose recall against ground truth.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::{pose_delta, Pose};
use crate::io::fmt_f64;
use crate::pipeline::{LocalizationResult, Status};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("result names do not match ground truth: {0}")]
    NameMismatch(String),
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `(translation, degrees)` pairs.
    pub thresholds: Vec<(f64, f64)>,
    /// Fraction of queries within each threshold pair.
    pub recall: Vec<f64>,
    pub n_queries: usize,
    pub n_ok: usize,
    /// Medians over successful queries; NaN when none succeeded.
    pub median_translation: f64,
    pub median_rotation_deg: f64,
    /// Mean per-query diagnostics over all queries.
    pub mean_stage_counts: BTreeMap<&'static str, f64>,
}

/// Parses `"t,r;t,r;..."`. Every value must be finite and non-negative.
pub fn parse_thresholds(text: &str) -> Result<Vec<(f64, f64)>, EvalError> {
    let bad = || EvalError::Thresholds(text.to_string());
    let out: Vec<(f64, f64)> = text
        .split(';')
        .map(|pair| {
            let (t, r) = pair.split_once(',').ok_or_else(bad)?;
            let t: f64 = t.trim().parse().map_err(|_| bad())?;
            let r: f64 = r.trim().parse().map_err(|_| bad())?;
            if !(t.is_finite() && r.is_finite() && t >= 0.0 && r >= 0.0) {
                return Err(bad());
            }
            Ok((t, r))
        })
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores results against ground truth. Both must name the same queries;
/// order may differ. Failed queries count as misses at every threshold.
pub fn evaluate(
    results: &[LocalizationResult],
    ground_truth: &[(String, Pose<f64>)],
    thresholds: &[(f64, f64)],
) -> Result<EvalReport, EvalError> {
    let gt: BTreeMap<&str, &Pose<f64>> = ground_truth.iter().map(|(n, p)| (n.as_str(), p)).collect();
    if gt.len() != ground_truth.len() {
        return Err(EvalError::NameMismatch("duplicate ground-truth name".into()));
    }
    let mut seen = BTreeMap::new();
    for r in results {
        if !gt.contains_key(r.name.as_str()) {
            return Err(EvalError::NameMismatch(format!("{} has no ground truth", r.name)));
        }
        if seen.insert(r.name.as_str(), r).is_some() {
            return Err(EvalError::NameMismatch(format!("{} appears twice in results", r.name)));
        }
    }
    if let Some(missing) = gt.keys().find(|n| !seen.contains_key(*n)) {
        return Err(EvalError::NameMismatch(format!("{missing} has no result")));
    }

    let mut hits = vec![0usize; thresholds.len()];
    let (mut dt, mut dr) = (Vec::new(), Vec::new());
    for r in results {
        let Some(pose) = r.pose.as_ref().filter(|_| r.status == Status::Ok) else { continue };
        let (t, deg) = pose_delta(pose, gt[r.name.as_str()]);
        dt.push(t);
        dr.push(deg);
        for (h, &(tt, tr)) in hits.iter_mut().zip(thresholds) {
            if t <= tt && deg <= tr {
                *h += 1;
            }
        }
    }
    let n = results.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let mut stages = BTreeMap::new();
    let mean = |f: &dyn Fn(&LocalizationResult) -> usize| frac(results.iter().map(f).sum());
    stages.insert("retrieved", mean(&|r| r.diagnostics.retrieved));
    stages.insert("verified", mean(&|r| r.diagnostics.verified));
    stages.insert("reranked", mean(&|r| r.diagnostics.reranked));
    stages.insert("pre_scc", mean(&|r| r.diagnostics.matches_pre_scc));
    stages.insert("post_scc", mean(&|r| r.diagnostics.matches_post_scc));
    stages.insert("lifted", mean(&|r| r.diagnostics.lifted));
    stages.insert("cluster_size", mean(&|r| r.diagnostics.cluster_size));
    stages.insert("pre_dcv", mean(&|r| r.diagnostics.matches_pre_dcv));
    stages.insert("post_dcv", mean(&|r| r.diagnostics.matches_post_dcv));
    stages.insert("dcv_flagged", mean(&|r| r.diagnostics.dcv_flagged));
    stages.insert("dcv_reverted", mean(&|r| usize::from(r.diagnostics.dcv_reverted)));
    stages.insert("inliers", mean(&|r| r.inlier_count));
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        recall: hits.into_iter().map(frac).collect(),
        n_queries: n,
        n_ok: dt.len(),
        median_translation: median(dt),
        median_rotation_deg: median(dr),
        mean_stage_counts: stages,
    })
}

impl EvalReport {
    pub fn format(&self) -> String {
        let mut s = format!("REPORT v1\nqueries {}\nlocalized {}\n", self.n_queries, self.n_ok);
        for (&(t, r), recall) in self.thresholds.iter().zip(&self.recall) {
            s.push_str(&format!("recall {} {} {}\n", fmt_f64(t), fmt_f64(r), fmt_f64(*recall)));
        }
        s.push_str(&format!("median_translation {}\n", fmt_f64(self.median_translation)));
        s.push_str(&format!("median_rotation_deg {}\n", fmt_f64(self.median_rotation_deg)));
        for (k, v) in &self.mean_stage_counts {
            s.push_str(&format!("mean {k} {}\n", fmt_f64(*v)));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Diagnostics;
    use nalgebra::{Point3, UnitQuaternion, Vector3};

    fn ok(name: &str, pose: Pose<f64>) -> LocalizationResult {
        LocalizationResult {
            name: name.into(),
            status: Status::Ok,
            pose: Some(pose),
            inlier_count: 10,
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn offset_pose_hits_only_loose_threshold() {
        let gt = Pose::from_center(UnitQuaternion::identity(), &Point3::origin());
        let est = Pose::from_center(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 1f64.to_radians()),
            &Point3::new(0.3, 0.0, 0.0),
        );
        let th = parse_thresholds("0.25,2;0.5,5").unwrap();
        let rep = evaluate(&[ok("a", est)], &[("a".into(), gt)], &th).unwrap();
        assert_eq!(rep.recall, vec![0.0, 1.0]);
        assert!((rep.median_translation - 0.3).abs() < 1e-12);
        assert!((rep.median_rotation_deg - 1.0).abs() < 1e-9);
    }

    #[test]
    fn failures_are_misses() {
        let p = Pose::identity();
        let res = vec![ok("a", p), LocalizationResult::failed("b", Status::ConsensusFailed, Diagnostics::default())];
        let gt = vec![("b".to_string(), p), ("a".to_string(), p)];
        let rep = evaluate(&res, &gt, &[(0.1, 1.0)]).unwrap();
        assert_eq!(rep.recall, vec![0.5]);
        assert_eq!(rep.n_ok, 1);
        assert!(rep.format().starts_with("REPORT v1\nqueries 2\nlocalized 1\n"));
    }

    #[test]
    fn name_mismatch() {
        let p = Pose::identity();
        assert!(matches!(evaluate(&[ok("a", p)], &[("b".into(), p)], &[(1.0, 1.0)]), Err(EvalError::NameMismatch(_))));
        assert!(matches!(evaluate(&[], &[("b".into(), p)], &[(1.0, 1.0)]), Err(EvalError::NameMismatch(_))));
        assert!(matches!(
            evaluate(&[ok("a", p), ok("a", p)], &[("a".into(), p)], &[(1.0, 1.0)]),
            Err(EvalError::NameMismatch(_))
        ));
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!(parse_thresholds("0.25,2;0.5,5;5,10").unwrap(), vec![(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)]);
        assert!(parse_thresholds("").is_err());
        assert!(parse_thresholds("1;2").is_err());
        assert!(parse_thresholds("-1,2").is_err());
        assert!(parse_thresholds("1,nan").is_err());
    }
}
