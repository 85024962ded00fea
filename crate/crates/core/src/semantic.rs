//! Semantic cues: label maps, the class table, label-consistency filtering
//! of matches, and the candidate weight that blends homography inliers with
//! label-consistent matches.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::features::Match;
use crate::geometry::Pixel;
use crate::scalar::{lit, Real};

pub type ClassId = u16;

/// Default floor for normalized candidate weights.
pub const DEFAULT_MU_MIN: f64 = 0.25;

/// Class names removed as dynamic objects by default.
pub const DEFAULT_DYNAMIC_NAMES: [&str; 7] = ["person", "rider", "car", "truck", "bus", "motorcycle", "bicycle"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SemanticError {
    #[error("index {index} out of range for {len} labels")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("pixel ({u}, {v}) outside {width}x{height} label map")]
    OutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("label grid has {got} cells, expected {expected}")]
    GridSize { got: usize, expected: usize },
    #[error("unknown class id {0}")]
    UnknownClass(ClassId),
    #[error("invalid weights: alpha1 and alpha2 must be non-negative and not both zero")]
    InvalidWeights,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub dynamic: bool,
}

/// Class id → name and dynamic flag.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassTable {
    pub classes: BTreeMap<ClassId, ClassInfo>,
}

impl ClassTable {
    pub fn insert(&mut self, id: ClassId, name: impl Into<String>, dynamic: bool) {
        self.classes.insert(id, ClassInfo { name: name.into(), dynamic });
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.classes.contains_key(&id)
    }

    pub fn dynamic_classes(&self) -> BTreeSet<ClassId> {
        self.classes.iter().filter(|(_, c)| c.dynamic).map(|(id, _)| *id).collect()
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().find(|(_, c)| c.name == name).map(|(id, _)| *id)
    }

    /// Marks the conventional pedestrian and vehicle classes as dynamic.
    pub fn with_default_dynamic(mut self) -> Self {
        for info in self.classes.values_mut() {
            if DEFAULT_DYNAMIC_NAMES.contains(&info.name.as_str()) {
                info.dynamic = true;
            }
        }
        self
    }
}

/// Dense per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<ClassId>) -> Result<Self, SemanticError> {
        if labels.len() != width * height {
            return Err(SemanticError::GridSize { got: labels.len(), expected: width * height });
        }
        Ok(Self { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, class: ClassId) -> Self {
        Self { width, height, labels: vec![class; width * height] }
    }

    /// Class at the nearest pixel to `pixel`.
    pub fn label_at<T: Real>(&self, pixel: &Pixel<T>) -> Result<ClassId, SemanticError> {
        let (u, v) = (crate::scalar::to_f64(pixel.x), crate::scalar::to_f64(pixel.y));
        let (col, row) = (u.round(), v.round());
        if !(col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height) {
            return Err(SemanticError::OutOfBounds { u, v, width: self.width, height: self.height });
        }
        Ok(self.labels[row as usize * self.width + col as usize])
    }

    pub fn get(&self, col: usize, row: usize) -> ClassId {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, class: ClassId) {
        self.labels[row * self.width + col] = class;
    }
}

/// Weights of the candidate score and the classes treated as dynamic.
#[derive(Debug, Clone, PartialEq)]
pub struct ScwParams<T: Real> {
    pub alpha1: T,
    pub alpha2: T,
    pub dynamic_classes: BTreeSet<ClassId>,
}

impl<T: Real> ScwParams<T> {
    pub fn new(alpha1: T, alpha2: T, dynamic_classes: BTreeSet<ClassId>) -> Result<Self, SemanticError> {
        let p = Self { alpha1, alpha2, dynamic_classes };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SemanticError> {
        if !(self.alpha1 >= T::zero() && self.alpha2 >= T::zero() && self.alpha1 + self.alpha2 > T::zero()) {
            return Err(SemanticError::InvalidWeights);
        }
        Ok(())
    }
}

impl<T: Real> Default for ScwParams<T> {
    fn default() -> Self {
        Self { alpha1: T::one(), alpha2: T::one(), dynamic_classes: BTreeSet::new() }
    }
}

/// Homography inliers `s_c`, label-consistent matches `s_f`, and their
/// weighted mean `s_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore<T: Real> {
    pub s_c: usize,
    pub s_f: usize,
    pub s_r: T,
}

impl<T: Real> CandidateScore<T> {
    pub fn new(s_c: usize, s_f: usize, p: &ScwParams<T>) -> Self {
        Self { s_c, s_f, s_r: scw(s_c, s_f, p) }
    }
}

/// `(α1 s_c + α2 s_f) / (α1 + α2)`.
pub fn scw<T: Real>(s_c: usize, s_f: usize, p: &ScwParams<T>) -> T {
    let sc: T = lit(s_c as f64);
    let sf: T = lit(s_f as f64);
    (p.alpha1 * sc + p.alpha2 * sf) / (p.alpha1 + p.alpha2)
}

/// Keeps matches whose two endpoints carry the same, non-dynamic label.
/// Order is preserved.
pub fn scc_filter<T: Real>(
    matches: &[Match<T>],
    query_labels: &[ClassId],
    train_labels: &[ClassId],
    dynamic: &BTreeSet<ClassId>,
) -> Result<Vec<Match<T>>, SemanticError> {
    let mut out = Vec::with_capacity(matches.len());
    for m in matches {
        let (q, t) = endpoint_labels(m, query_labels, train_labels)?;
        if q == t && !dynamic.contains(&q) {
            out.push(*m);
        }
    }
    Ok(out)
}

/// Number of matches whose endpoints share a label.
pub fn count_label_consistent<T: Real>(
    matches: &[Match<T>],
    query_labels: &[ClassId],
    train_labels: &[ClassId],
) -> Result<usize, SemanticError> {
    let mut n = 0;
    for m in matches {
        let (q, t) = endpoint_labels(m, query_labels, train_labels)?;
        n += usize::from(q == t);
    }
    Ok(n)
}

fn endpoint_labels<T: Real>(
    m: &Match<T>,
    query_labels: &[ClassId],
    train_labels: &[ClassId],
) -> Result<(ClassId, ClassId), SemanticError> {
    let q = *query_labels
        .get(m.query_idx)
        .ok_or(SemanticError::IndexOutOfRange { index: m.query_idx, len: query_labels.len() })?;
    let t = *train_labels
        .get(m.train_idx)
        .ok_or(SemanticError::IndexOutOfRange { index: m.train_idx, len: train_labels.len() })?;
    Ok((q, t))
}

/// Maps candidate scores to reduction ratios: `clamp(s / max, mu_min, 1)`.
/// All-zero (or empty-maximum) input maps to all ones.
pub fn normalize_scw<T: Real>(scores: &[T], mu_min: T) -> Vec<T> {
    let max = scores.iter().fold(T::zero(), |m, s| m.max(*s));
    if !(max > T::zero()) {
        return vec![T::one(); scores.len()];
    }
    scores.iter().map(|s| (*s / max).clamp(mu_min, T::one())).collect()
}

/// Majority label over a point's observations `(image_order, label)`; ties go
/// to the label seen in the latest image.
pub fn majority_label(observations: &[(usize, ClassId)]) -> Option<ClassId> {
    let mut counts: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for &(order, label) in observations {
        let e = counts.entry(label).or_insert((0, 0));
        e.0 += 1;
        e.1 = e.1.max(order);
    }
    counts.into_iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.1 .1.cmp(&b.1 .1))).map(|(label, _)| label)
}
