//! Flat `key = value` configuration files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{fmt_f64, IoError, Result};
use crate::depth::OrdinalIndexing;
use crate::features::Family;
use crate::pipeline::PipelineConfig;
use crate::semantic::ClassId;

/// Parsed `key = value` lines. Keys are consumed by the typed getters and
/// [`KeyValues::finish`] rejects any left over.
#[derive(Debug, Clone)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| IoError::Format { path: path.to_path_buf(), line: i + 1, message };
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, found {line:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(err(format!("expected `key = value`, found {line:?}")));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(err(format!("duplicate key {k:?}")));
            }
        }
        Ok(Self { path: path.to_path_buf(), entries })
    }

    fn err(&self, line: usize, message: String) -> IoError {
        IoError::Format { path: self.path.clone(), line, message }
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => {
                v.parse().map(Some).map_err(|_| self.err(line, format!("invalid value for {key}: {v:?}")))
            }
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => match v.as_str() {
                "true" | "1" | "on" | "yes" => Ok(Some(true)),
                "false" | "0" | "off" | "no" => Ok(Some(false)),
                _ => Err(self.err(line, format!("invalid boolean for {key}: {v:?}"))),
            },
        }
    }

    /// Comma-separated list; `-` is the empty list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((_, v)) if v == "-" => Ok(Some(Vec::new())),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| self.err(line, format!("invalid list item for {key}: {s:?}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn set_bool(&mut self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.take_bool(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(self.err(*line, format!("unknown key {k:?}"))),
        }
    }
}

/// Reads a pipeline configuration; absent keys keep their defaults.
pub fn parse_pipeline_config(path: &Path, text: &str) -> Result<PipelineConfig> {
    let mut kv = KeyValues::parse(path, text)?;
    let mut c = PipelineConfig::default();
    kv.set("alpha1", &mut c.scw.alpha1)?;
    kv.set("alpha2", &mut c.scw.alpha2)?;
    if let Some(ids) = kv.take_list::<ClassId>("dynamic_classes")? {
        c.scw.dynamic_classes = ids.into_iter().collect();
    }
    kv.set("homography_threshold", &mut c.homography.threshold)?;
    kv.set("homography_max_iterations", &mut c.homography.max_iterations)?;
    kv.set("homography_confidence", &mut c.homography.confidence)?;
    kv.set("homography_min_inliers", &mut c.homography.min_inliers)?;
    kv.set("pnp_threshold", &mut c.pnp.threshold)?;
    kv.set("pnp_max_iterations", &mut c.pnp.max_iterations)?;
    kv.set("pnp_confidence", &mut c.pnp.confidence)?;
    kv.set("pnp_min_inliers", &mut c.pnp.min_inliers)?;
    kv.set("retrieval_k", &mut c.retrieval_k)?;
    kv.set("keep", &mut c.keep)?;
    kv.set("mu_min", &mut c.mu_min)?;
    kv.set("r_min", &mut c.r_min)?;
    kv.set("ratio", &mut c.ratio)?;
    kv.set_bool("mutual", &mut c.mutual)?;
    if let Some(f) = kv.take_list::<String>("families")? {
        c.families = f.into_iter().map(Family::new).collect();
    }
    if let Some(f) = kv.take_list::<String>("enhance")? {
        c.enhance = f.into_iter().map(Family::new).collect::<BTreeSet<_>>();
    }
    kv.set("dedupe_radius", &mut c.dedupe_radius)?;
    kv.set("dcv_tau", &mut c.dcv.tau)?;
    kv.set("dcv_min_improvement", &mut c.dcv.min_improvement)?;
    kv.set("dcv_refine_iterations", &mut c.dcv.refine_iterations)?;
    if let Some(v) = kv.take::<String>("ordinal_indexing")? {
        c.ordinal_indexing = match v.as_str() {
            "sorted" => OrdinalIndexing::SortedPdv,
            "raw" => OrdinalIndexing::RawPdv,
            _ => return Err(IoError::Invariant(format!("ordinal_indexing must be `sorted` or `raw`, found {v:?}"))),
        };
    }
    kv.set("cluster_trans_eps", &mut c.cluster_trans_eps)?;
    kv.set("cluster_rot_eps", &mut c.cluster_rot_eps)?;
    kv.set("bias_label_penalty", &mut c.bias_label_penalty)?;
    kv.set("refine_iterations", &mut c.refine_iterations)?;
    kv.set_bool("sf_inliers_only", &mut c.sf_inliers_only)?;
    kv.set_bool("scc", &mut c.stages.scc)?;
    kv.set_bool("dcv", &mut c.stages.dcv)?;
    kv.set_bool("weighted", &mut c.stages.weighted)?;
    kv.set_bool("bias_sampling", &mut c.stages.bias_sampling)?;
    kv.set_bool("clustering", &mut c.stages.clustering)?;
    kv.set_bool("rerank", &mut c.stages.rerank)?;
    kv.set_bool("candidate_rejection", &mut c.stages.candidate_rejection)?;
    kv.set("seed", &mut c.seed)?;
    kv.finish()?;
    c.validate().map_err(|e| IoError::Invariant(format!("{}: {e}", path.display())))?;
    Ok(c)
}

/// Writes every key, so the output documents the full configuration.
pub fn format_pipeline_config(c: &PipelineConfig) -> String {
    let list = |v: Vec<String>| if v.is_empty() { "-".to_string() } else { v.join(",") };
    let f = |x: f64| fmt_f64(x);
    let rows: Vec<(&str, String)> = vec![
        ("alpha1", f(c.scw.alpha1)),
        ("alpha2", f(c.scw.alpha2)),
        ("dynamic_classes", list(c.scw.dynamic_classes.iter().map(|d| d.to_string()).collect())),
        ("homography_threshold", f(c.homography.threshold)),
        ("homography_max_iterations", c.homography.max_iterations.to_string()),
        ("homography_confidence", f(c.homography.confidence)),
        ("homography_min_inliers", c.homography.min_inliers.to_string()),
        ("pnp_threshold", f(c.pnp.threshold)),
        ("pnp_max_iterations", c.pnp.max_iterations.to_string()),
        ("pnp_confidence", f(c.pnp.confidence)),
        ("pnp_min_inliers", c.pnp.min_inliers.to_string()),
        ("retrieval_k", c.retrieval_k.to_string()),
        ("keep", c.keep.to_string()),
        ("mu_min", f(c.mu_min)),
        ("r_min", f(c.r_min)),
        ("ratio", f(c.ratio)),
        ("mutual", c.mutual.to_string()),
        ("families", list(c.families.iter().map(|x| x.to_string()).collect())),
        ("enhance", list(c.enhance.iter().map(|x| x.to_string()).collect())),
        ("dedupe_radius", f(c.dedupe_radius)),
        ("dcv_tau", f(c.dcv.tau)),
        ("dcv_min_improvement", f(c.dcv.min_improvement)),
        ("dcv_refine_iterations", c.dcv.refine_iterations.to_string()),
        (
            "ordinal_indexing",
            match c.ordinal_indexing {
                OrdinalIndexing::SortedPdv => "sorted".into(),
                OrdinalIndexing::RawPdv => "raw".into(),
            },
        ),
        ("cluster_trans_eps", f(c.cluster_trans_eps)),
        ("cluster_rot_eps", f(c.cluster_rot_eps)),
        ("bias_label_penalty", f(c.bias_label_penalty)),
        ("refine_iterations", c.refine_iterations.to_string()),
        ("sf_inliers_only", c.sf_inliers_only.to_string()),
        ("scc", c.stages.scc.to_string()),
        ("dcv", c.stages.dcv.to_string()),
        ("weighted", c.stages.weighted.to_string()),
        ("bias_sampling", c.stages.bias_sampling.to_string()),
        ("clustering", c.stages.clustering.to_string()),
        ("rerank", c.stages.rerank.to_string()),
        ("candidate_rejection", c.stages.candidate_rejection.to_string()),
        ("seed", c.seed.to_string()),
    ];
    rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
