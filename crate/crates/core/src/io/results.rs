//! Localization results, ground-truth poses and per-keypoint truth flags.

use std::path::Path;

use super::assets::{parse_pose, push_pose};
use super::{check_token, fmt_f64, push_line, read_text, write_text, Reader, Result};
use crate::geometry::Pose;
use crate::pipeline::{Diagnostics, LocalizationResult, PointId, Status};

pub fn format_results(results: &[LocalizationResult]) -> Result<String> {
    let mut s = String::new();
    push_line(&mut s, format_args!("RES v1 {}", results.len()));
    for r in results {
        check_token(&r.name, "query name")?;
        s.push_str(&format!("{} {} ", r.name, r.status.as_str()));
        match &r.pose {
            Some(p) => {
                let mut tmp = String::new();
                push_pose(&mut tmp, p);
                s.push_str(tmp.trim_end());
            }
            None => s.push_str(&["nan"; 7].join(" ")),
        }
        push_line(&mut s, format_args!(" {}", r.inlier_count));
        push_line(&mut s, format_args!("DIAG {} {}", r.name, format_diag(&r.diagnostics)));
    }
    Ok(s)
}

fn join_list<I: IntoIterator<Item = String>>(items: I) -> String {
    let v: Vec<String> = items.into_iter().collect();
    if v.is_empty() {
        "-".to_string()
    } else {
        v.join(",")
    }
}

fn format_diag(d: &Diagnostics) -> String {
    [
        format!("retrieved={}", d.retrieved),
        format!("verified={}", d.verified),
        format!("reranked={}", d.reranked),
        format!("candidates={}", join_list(d.candidates.iter().map(|c| c.to_string()))),
        format!("scw={}", join_list(d.scw.iter().map(|v| fmt_f64(*v)))),
        format!("mu={}", join_list(d.mu.iter().map(|v| fmt_f64(*v)))),
        format!("pre_scc={}", d.matches_pre_scc),
        format!("post_scc={}", d.matches_post_scc),
        format!("lifted={}", d.lifted),
        format!("cluster_size={}", d.cluster_size),
        format!("pre_dcv={}", d.matches_pre_dcv),
        format!("post_dcv={}", d.matches_post_dcv),
        format!("dcv_flagged={}", d.dcv_flagged),
        format!("dcv_reverted={}", u8::from(d.dcv_reverted)),
    ]
    .join(" ")
}

fn parse_diag(r: &Reader<'_>, line: usize, tokens: &[&str]) -> Result<Diagnostics> {
    let mut d = Diagnostics::default();
    for tok in tokens {
        let Some((key, value)) = tok.split_once('=') else {
            return Err(r.err(line, format!("expected key=value, found {tok:?}")));
        };
        let list = |value: &str| -> Vec<String> {
            if value == "-" {
                Vec::new()
            } else {
                value.split(',').map(str::to_string).collect()
            }
        };
        match key {
            "retrieved" => d.retrieved = r.parse(line, value, key)?,
            "verified" => d.verified = r.parse(line, value, key)?,
            "reranked" => d.reranked = r.parse(line, value, key)?,
            "candidates" => {
                d.candidates = list(value).iter().map(|v| r.parse(line, v, key)).collect::<Result<_>>()?;
            }
            "scw" => d.scw = list(value).iter().map(|v| r.parse(line, v, key)).collect::<Result<_>>()?,
            "mu" => d.mu = list(value).iter().map(|v| r.parse(line, v, key)).collect::<Result<_>>()?,
            "pre_scc" => d.matches_pre_scc = r.parse(line, value, key)?,
            "post_scc" => d.matches_post_scc = r.parse(line, value, key)?,
            "lifted" => d.lifted = r.parse(line, value, key)?,
            "cluster_size" => d.cluster_size = r.parse(line, value, key)?,
            "pre_dcv" => d.matches_pre_dcv = r.parse(line, value, key)?,
            "post_dcv" => d.matches_post_dcv = r.parse(line, value, key)?,
            "dcv_flagged" => d.dcv_flagged = r.parse(line, value, key)?,
            "dcv_reverted" => d.dcv_reverted = r.parse::<u8>(line, value, key)? != 0,
            _ => return Err(r.err(line, format!("unknown diagnostic {key:?}"))),
        }
    }
    Ok(d)
}

pub fn parse_results(path: &Path, text: &str) -> Result<Vec<LocalizationResult>> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("RES")?;
    if h.len() != 1 {
        return Err(r.err(line, "expected `RES v1 <count>`"));
    }
    let n: usize = r.parse(line, h[0], "count")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, t) = r.row(10, "result row `name status qw qx qy qz tx ty tz inliers`")?;
        let status = Status::parse(t[1]).ok_or_else(|| r.err(line, format!("unknown status {:?}", t[1])))?;
        let pose = if status == Status::Ok {
            Some(parse_pose(&r, line, &t[2..9])?)
        } else {
            if t[2..9].iter().any(|v| !v.eq_ignore_ascii_case("nan")) {
                return Err(r.err(line, "failed query must have nan pose fields"));
            }
            None
        };
        let inlier_count = r.parse(line, t[9], "inlier count")?;
        let (dline, d) = r.next("DIAG line")?;
        if d[0] != "DIAG" || d.get(1) != Some(&t[0]) {
            return Err(r.err(dline, format!("expected `DIAG {}`", t[0])));
        }
        let diagnostics = parse_diag(&r, dline, &d[2..])?;
        out.push(LocalizationResult { name: t[0].to_string(), status, pose, inlier_count, diagnostics });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_results(results: &[LocalizationResult], path: &Path) -> Result<()> {
    write_text(path, &format_results(results)?)
}

pub fn load_results(path: &Path) -> Result<Vec<LocalizationResult>> {
    parse_results(path, &read_text(path)?)
}

pub fn format_ground_truth(poses: &[(String, Pose<f64>)]) -> Result<String> {
    let mut s = String::new();
    push_line(&mut s, format_args!("GT v1 {}", poses.len()));
    for (name, pose) in poses {
        check_token(name, "query name")?;
        s.push_str(name);
        s.push(' ');
        push_pose(&mut s, pose);
    }
    Ok(s)
}

pub fn parse_ground_truth(path: &Path, text: &str) -> Result<Vec<(String, Pose<f64>)>> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("GT")?;
    if h.len() != 1 {
        return Err(r.err(line, "expected `GT v1 <count>`"));
    }
    let n: usize = r.parse(line, h[0], "count")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, t) = r.row(8, "pose row `name qw qx qy qz tx ty tz`")?;
        out.push((t[0].to_string(), parse_pose(&r, line, &t[1..])?));
    }
    r.finish()?;
    Ok(out)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<(String, Pose<f64>)>> {
    parse_ground_truth(path, &read_text(path)?)
}

/// Truth about one query keypoint, withheld from the localizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeypointFlags {
    pub kp_idx: usize,
    /// Map point whose projection the keypoint is.
    pub true_point: Option<PointId>,
    /// Map point whose descriptor the keypoint carries.
    pub matched_point: Option<PointId>,
    pub is_outlier: bool,
    pub is_label_corrupted: bool,
}

pub fn format_flags(flags: &[KeypointFlags]) -> String {
    let opt = |p: Option<PointId>| p.map_or("-".to_string(), |v| v.to_string());
    let mut s = String::new();
    push_line(&mut s, format_args!("FLAGS v1 {}", flags.len()));
    for f in flags {
        push_line(
            &mut s,
            format_args!(
                "{} {} {} {} {}",
                f.kp_idx,
                opt(f.true_point),
                opt(f.matched_point),
                u8::from(f.is_outlier),
                u8::from(f.is_label_corrupted)
            ),
        );
    }
    s
}

pub fn parse_flags(path: &Path, text: &str) -> Result<Vec<KeypointFlags>> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("FLAGS")?;
    if h.len() != 1 {
        return Err(r.err(line, "expected `FLAGS v1 <count>`"));
    }
    let n: usize = r.parse(line, h[0], "count")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, t) = r.row(5, "flag row")?;
        let opt = |tok: &str| -> Result<Option<PointId>> {
            if tok == "-" {
                Ok(None)
            } else {
                r.parse(line, tok, "point id").map(Some)
            }
        };
        let flag = |tok: &str| -> Result<bool> { Ok(r.parse::<u8>(line, tok, "flag")? != 0) };
        out.push(KeypointFlags {
            kp_idx: r.parse(line, t[0], "keypoint index")?,
            true_point: opt(t[1])?,
            matched_point: opt(t[2])?,
            is_outlier: flag(t[3])?,
            is_label_corrupted: flag(t[4])?,
        });
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Point3, UnitQuaternion};

    fn sample() -> Vec<LocalizationResult> {
        let pose = Pose::from_center(UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3), &Point3::new(1.0, 2.0, -3.0));
        let d = Diagnostics {
            retrieved: 10,
            verified: 7,
            reranked: 5,
            candidates: vec![3, 1, 4],
            scw: vec![12.5, 3.0, 1.0],
            mu: vec![1.0, 0.24, 0.25],
            matches_pre_scc: 300,
            matches_post_scc: 250,
            lifted: 240,
            cluster_size: 3,
            matches_pre_dcv: 200,
            matches_post_dcv: 190,
            dcv_flagged: 10,
            dcv_reverted: false,
        };
        vec![
            LocalizationResult {
                name: "q0".into(),
                status: Status::Ok,
                pose: Some(pose),
                inlier_count: 180,
                diagnostics: d,
            },
            LocalizationResult::failed("q1", Status::ConsensusFailed, Diagnostics::default()),
        ]
    }

    #[test]
    fn results_round_trip() {
        let r = sample();
        let text = format_results(&r).unwrap();
        assert_eq!(parse_results(Path::new("r.txt"), &text).unwrap(), r);
        let row = text.lines().nth(3).unwrap();
        assert!(row.starts_with("q1 consensus_failed nan nan nan nan nan nan nan 0"), "{row}");
    }

    #[test]
    fn ground_truth_and_flags_round_trip() {
        let gt = vec![("a".to_string(), Pose::identity()), ("b".to_string(), sample()[0].pose.unwrap())];
        assert_eq!(parse_ground_truth(Path::new("g"), &format_ground_truth(&gt).unwrap()).unwrap(), gt);
        let flags = vec![
            KeypointFlags {
                kp_idx: 0,
                true_point: Some(4),
                matched_point: Some(9),
                is_outlier: true,
                is_label_corrupted: false,
            },
            KeypointFlags {
                kp_idx: 1,
                true_point: None,
                matched_point: None,
                is_outlier: false,
                is_label_corrupted: true,
            },
        ];
        assert_eq!(parse_flags(Path::new("f"), &format_flags(&flags)).unwrap(), flags);
    }

    #[test]
    fn names_with_spaces_rejected() {
        let mut r = sample();
        r[0].name = "bad name".into();
        assert!(format_results(&r).is_err());
    }
}
