//! Synthetic scenes with exact ground truth and planted corruptions, and
//! pose-recall evaluation of localization results.
//!
//! Points are scattered in a box in front of a row of database cameras;
//! queries are perturbed copies of database viewpoints. Keypoints are exact
//! projections, descriptors are noisy per-point random codes, label and depth
//! rasters are rendered from the points themselves. Every random choice comes
//! from a ChaCha stream keyed by `(seed, image)`, so any single query can be
//! regenerated on its own.

mod eval;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

pub use eval::{evaluate, parse_thresholds, EvalError, EvalReport};

use crate::depth::DepthMap;
use crate::features::{Descriptor, Family, Keypoint};
use crate::geometry::{pose_delta, project, triangulate, Intrinsics, Pixel, Pose};
use crate::io::{self, IoError, KeyValues, KeypointFlags, Manifest, SfmImage, SfmModel};
use crate::pipeline::{Map, PointId, QueryAssets};
use crate::retrieval::ImageId;
use crate::semantic::{ClassId, ClassTable, LabelMap};

/// Class names by id; id 0 is the background.
pub const CLASS_NAMES: [&str; 9] =
    ["sky", "building", "vegetation", "road", "sidewalk", "pole", "sign", "car", "person"];

/// Classes marked dynamic in generated class tables.
pub const DYNAMIC_CLASSES: [ClassId; 2] = [7, 8];

const STREAM_DB: u64 = 1;
const STREAM_QUERY: u64 = 1 << 32;
const DISK_RADIUS: i64 = 3;
const MIN_DEPTH: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    pub family: Family,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_points: usize,
    pub n_db_images: usize,
    pub n_queries: usize,
    /// Points lie in `|x| ≤ extent_x`, `|y| ≤ extent_y`, `z ∈ depth_range`.
    pub extent_x: f64,
    pub extent_y: f64,
    pub depth_range: (f64, f64),
    /// Database cameras are spread along `x ∈ [-db_span, db_span]`.
    pub db_span: f64,
    /// Query centers are offset from their database anchor by up to these.
    pub query_offset: Vector3<f64>,
    /// Query rotations deviate from their anchor by up to this angle per axis.
    pub query_rotation_deg: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub families: Vec<FamilySpec>,
    /// Probability that a family detects a visible point.
    pub detection_rate: f64,
    /// Norm of the Gaussian perturbation added to descriptor codes.
    pub descriptor_noise: f64,
    /// Fraction of matchable query keypoints given another point's descriptor.
    pub outlier_match_rate: f64,
    /// Planted outliers always borrow a point of a different class.
    pub cross_label_outliers: bool,
    /// Fraction of query keypoints whose label pixel is overwritten.
    pub label_noise_rate: f64,
    /// Relative standard deviation of predicted depth.
    pub depth_noise_sigma: f64,
    /// Query keypoint noise, pixels.
    pub pixel_noise_sigma: f64,
    /// Predicted depth is `s · z^γ` with `γ ∈ [0.7, 1.3]` instead of `s · z`.
    pub depth_warp: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 500,
            n_db_images: 10,
            n_queries: 20,
            extent_x: 12.0,
            extent_y: 6.0,
            depth_range: (15.0, 25.0),
            db_span: 8.0,
            query_offset: Vector3::new(1.0, 0.3, 1.0),
            query_rotation_deg: 5.0,
            width: 640,
            height: 480,
            focal: 500.0,
            families: vec![
                FamilySpec { family: Family::new("r2d2"), dim: 32 },
                FamilySpec { family: Family::new("superpoint"), dim: 32 },
            ],
            detection_rate: 0.9,
            descriptor_noise: 0.05,
            outlier_match_rate: 0.0,
            cross_label_outliers: false,
            label_noise_rate: 0.0,
            depth_noise_sigma: 0.0,
            pixel_noise_sigma: 0.0,
            depth_warp: false,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_points < 8 {
            return bad("n_points must be at least 8");
        }
        if self.n_db_images < 2 {
            return bad("n_db_images must be at least 2");
        }
        if self.width < 16 || self.height < 16 || !(self.focal > 0.0) {
            return bad("image must be at least 16x16 with positive focal length");
        }
        if self.families.is_empty() || self.families.iter().any(|f| f.dim < 2) {
            return bad("need at least one family, each with dimension at least 2");
        }
        let names: BTreeSet<&str> = self.families.iter().map(|f| f.family.as_str()).collect();
        if names.len() != self.families.len() {
            return bad("family names must be unique");
        }
        if names.iter().any(|n| n.is_empty() || n.contains(|c: char| c.is_whitespace() || c == '#' || c == ',')) {
            return bad("family names must be single tokens");
        }
        for (name, r) in [
            ("detection_rate", self.detection_rate),
            ("outlier_match_rate", self.outlier_match_rate),
            ("label_noise_rate", self.label_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(SynthError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.detection_rate > 0.0) {
            return bad("detection_rate must be positive");
        }
        for (name, s) in [
            ("descriptor_noise", self.descriptor_noise),
            ("depth_noise_sigma", self.depth_noise_sigma),
            ("pixel_noise_sigma", self.pixel_noise_sigma),
            ("query_rotation_deg", self.query_rotation_deg),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.depth_range.0 > MIN_DEPTH && self.depth_range.1 > self.depth_range.0) {
            return bad("depth_range must be increasing and in front of the cameras");
        }
        if !(self.extent_x > 0.0 && self.extent_y > 0.0 && self.db_span >= 0.0) {
            return bad("extents must be positive");
        }
        if self.query_offset.iter().any(|v| !(*v >= 0.0)) {
            return bad("query offsets must be non-negative");
        }
        Ok(())
    }

    /// Reads a flat `key = value` file; absent keys keep their defaults.
    /// Families are written `name:dim,name:dim`.
    pub fn parse(path: &Path, text: &str) -> Result<Self, SynthError> {
        let mut kv = KeyValues::parse(path, text)?;
        let mut c = SceneConfig::default();
        kv.set("n_points", &mut c.n_points)?;
        kv.set("n_db_images", &mut c.n_db_images)?;
        kv.set("n_queries", &mut c.n_queries)?;
        kv.set("extent_x", &mut c.extent_x)?;
        kv.set("extent_y", &mut c.extent_y)?;
        kv.set("depth_min", &mut c.depth_range.0)?;
        kv.set("depth_max", &mut c.depth_range.1)?;
        kv.set("db_span", &mut c.db_span)?;
        kv.set("query_offset_x", &mut c.query_offset.x)?;
        kv.set("query_offset_y", &mut c.query_offset.y)?;
        kv.set("query_offset_z", &mut c.query_offset.z)?;
        kv.set("query_rotation_deg", &mut c.query_rotation_deg)?;
        kv.set("width", &mut c.width)?;
        kv.set("height", &mut c.height)?;
        kv.set("focal", &mut c.focal)?;
        if let Some(list) = kv.take_list::<String>("families")? {
            c.families = list
                .iter()
                .map(|item| {
                    let (name, dim) = item
                        .split_once(':')
                        .ok_or_else(|| SynthError::Config(format!("family {item:?} must be written name:dim")))?;
                    let dim = dim.parse().map_err(|_| SynthError::Config(format!("bad dimension in {item:?}")))?;
                    Ok(FamilySpec { family: Family::new(name), dim })
                })
                .collect::<Result<_, SynthError>>()?;
        }
        kv.set("detection_rate", &mut c.detection_rate)?;
        kv.set("descriptor_noise", &mut c.descriptor_noise)?;
        kv.set("outlier_match_rate", &mut c.outlier_match_rate)?;
        kv.set_bool("cross_label_outliers", &mut c.cross_label_outliers)?;
        kv.set("label_noise_rate", &mut c.label_noise_rate)?;
        kv.set("depth_noise_sigma", &mut c.depth_noise_sigma)?;
        kv.set("pixel_noise_sigma", &mut c.pixel_noise_sigma)?;
        kv.set_bool("depth_warp", &mut c.depth_warp)?;
        kv.set("seed", &mut c.seed)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn intrinsics(&self) -> Intrinsics<f64> {
        Intrinsics::new(self.focal, self.focal, self.width as f64 / 2.0, self.height as f64 / 2.0)
            .expect("validated focal length")
    }

    fn families(&self) -> Vec<Family> {
        self.families.iter().map(|f| f.family.clone()).collect()
    }
}

pub fn class_table() -> ClassTable {
    let mut t = ClassTable::default();
    for (id, name) in CLASS_NAMES.iter().enumerate() {
        let id = id as ClassId;
        t.insert(id, *name, DYNAMIC_CLASSES.contains(&id));
    }
    t
}

pub fn query_name(i: usize) -> String {
    format!("q_{i:04}")
}

pub fn db_name(i: usize) -> String {
    format!("db_{i:03}")
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy_code(code: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let per = sigma / (code.len() as f64).sqrt();
    let v: Vec<f64> = code.iter().map(|c| c + per * gaussian(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Class of a point by the octant it falls in relative to the box center.
fn octant_class(p: &Point3<f64>, mid_z: f64) -> ClassId {
    1 + usize::from(p.x > 0.0) as ClassId
        + 2 * usize::from(p.y > 0.0) as ClassId
        + 4 * usize::from(p.z > mid_z) as ClassId
}

/// Points visible in a view, with label and true-depth rasters.
struct View {
    /// `(point index, exact pixel, camera depth)`, ascending point index.
    visible: Vec<(usize, Pixel<f64>, f64)>,
    labels: LabelMap,
    depth: Vec<f64>,
}

/// Scene geometry shared by all images.
#[derive(Debug, Clone)]
struct World {
    points: Vec<Point3<f64>>,
    classes: Vec<ClassId>,
    scores: Vec<f64>,
    /// `codes[family][point]`.
    codes: Vec<Vec<Vec<f64>>>,
    db_poses: Vec<Pose<f64>>,
}

/// One generated query with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticQuery {
    pub assets: QueryAssets,
    pub pose: Pose<f64>,
    /// One entry per keypoint, in keypoint order.
    pub flags: Vec<KeypointFlags>,
    /// Scene point each keypoint is the projection of, including points
    /// missing from the map.
    pub scene_points: Vec<PointId>,
    /// Factor applied to true depth before any warp or noise.
    pub depth_scale: f64,
}

/// Deterministic scene generator. Database assets are built eagerly;
/// queries are produced on demand from their own random streams.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    cfg: SceneConfig,
    world: World,
    db: Vec<QueryAssets>,
    sfm: SfmModel,
    /// Map point ids observed in each family by at least one database image.
    observed: Vec<BTreeSet<PointId>>,
    /// Scene point of every database keypoint.
    db_points: Vec<Vec<PointId>>,
}

impl SceneGenerator {
    pub fn new(cfg: SceneConfig) -> Result<Self, SynthError> {
        cfg.validate()?;
        let world = make_world(&cfg);
        let k = cfg.intrinsics();
        let families = cfg.families();

        // (point, family index, image, keypoint index, pixel)
        let per_image: Vec<(QueryAssets, Vec<(usize, usize, usize, Pixel<f64>)>)> = (0..cfg.n_db_images)
            .into_par_iter()
            .map(|j| {
                let mut rng = rng_for(cfg.seed, STREAM_DB + j as u64);
                let pose = world.db_poses[j];
                let view = render(&world, &pose, &cfg);
                let mut keypoints = Vec::new();
                let mut descriptors = Vec::new();
                let mut obs = Vec::new();
                for (fi, f) in families.iter().enumerate() {
                    for &(p, px, _) in &view.visible {
                        if !(rng.random::<f64>() < cfg.detection_rate) {
                            continue;
                        }
                        let score = (world.scores[p] + 0.02 * gaussian(&mut rng)).clamp(0.05, 1.0);
                        obs.push((p, fi, keypoints.len(), px));
                        keypoints.push(Keypoint { pixel: px, score, family: f.clone(), label: world.classes[p] });
                        descriptors.push(Descriptor::new(
                            noisy_code(&world.codes[fi][p], cfg.descriptor_noise, &mut rng),
                            f.clone(),
                        ));
                    }
                }
                let global = global_descriptor(&pose, &mut rng);
                let assets = QueryAssets {
                    name: db_name(j),
                    width: cfg.width,
                    height: cfg.height,
                    intrinsics: k,
                    keypoints,
                    descriptors,
                    global,
                    labels: Some(view.labels),
                    depth: None,
                };
                (assets, obs)
            })
            .collect();

        let mut tracks: BTreeMap<usize, Vec<(ImageId, usize, Pixel<f64>, usize)>> = BTreeMap::new();
        for (j, (_, obs)) in per_image.iter().enumerate() {
            for &(p, fi, kp, px) in obs {
                tracks.entry(p).or_default().push((j as ImageId, kp, px, fi));
            }
        }
        let mut points = Vec::new();
        let mut observed = vec![BTreeSet::new(); families.len()];
        for (p, track) in tracks {
            let images: BTreeSet<ImageId> = track.iter().map(|t| t.0).collect();
            if images.len() < 2 {
                continue;
            }
            let Some(position) = widest_pair_triangulation(&track, &world.db_poses, &k) else {
                continue;
            };
            for t in &track {
                observed[t.3].insert(p as PointId);
            }
            points.push((p as PointId, position, track.iter().map(|t| (t.0, t.1)).collect()));
        }
        let sfm = SfmModel {
            images: (0..cfg.n_db_images)
                .map(|j| SfmImage { id: j as ImageId, name: db_name(j), pose: world.db_poses[j] })
                .collect(),
            points,
        };
        let db_points = per_image.iter().map(|(_, obs)| obs.iter().map(|o| o.0 as PointId).collect()).collect();
        let db = per_image.into_iter().map(|(a, _)| a).collect();
        Ok(Self { cfg, world, db, sfm, observed, db_points })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn database(&self) -> &[QueryAssets] {
        &self.db
    }

    pub fn sfm(&self) -> &SfmModel {
        &self.sfm
    }

    /// True position of a scene point.
    pub fn point(&self, id: PointId) -> Point3<f64> {
        self.world.points[id as usize]
    }

    pub fn class_of(&self, id: PointId) -> ClassId {
        self.world.classes[id as usize]
    }

    /// Scene point observed by keypoint `kp` of database image `image`.
    pub fn db_point(&self, image: usize, kp: usize) -> PointId {
        self.db_points[image][kp]
    }

    /// The map the written bundle builds into.
    pub fn build_map(&self) -> Map {
        io::assemble_map(&self.cfg.families(), class_table(), self.sfm.clone(), &self.db)
            .expect("generated reconstruction is consistent")
    }

    pub fn query(&self, i: usize) -> SyntheticQuery {
        let cfg = &self.cfg;
        let mut rng = rng_for(cfg.seed, STREAM_QUERY + i as u64);
        let anchor = self.world.db_poses[i % cfg.n_db_images];
        let off = cfg.query_offset;
        let center = anchor.center()
            + Vector3::new(
                rng.random_range(-1.0..=1.0) * off.x,
                rng.random_range(-1.0..=1.0) * off.y,
                rng.random_range(-1.0..=1.0) * off.z,
            );
        let r = cfg.query_rotation_deg.to_radians();
        let delta = UnitQuaternion::from_euler_angles(
            rng.random_range(-1.0..=1.0) * r,
            rng.random_range(-1.0..=1.0) * r,
            rng.random_range(-1.0..=1.0) * r,
        );
        let pose = Pose::from_center(delta * anchor.unit_quaternion(), &Point3::from(center));
        let view = render(&self.world, &pose, cfg);
        let families = cfg.families();
        let map_points: BTreeSet<PointId> = self.sfm.points.iter().map(|p| p.0).collect();

        // (family index, point)
        let mut origin: Vec<(usize, usize)> = Vec::new();
        let mut keypoints = Vec::new();
        let mut descriptors = Vec::new();
        let (w, h) = (cfg.width as f64 - 1.0, cfg.height as f64 - 1.0);
        for (fi, f) in families.iter().enumerate() {
            let mut batch = Vec::new();
            for &(p, px, _) in &view.visible {
                if !(rng.random::<f64>() < cfg.detection_rate) {
                    continue;
                }
                let mut px = px;
                if cfg.pixel_noise_sigma > 0.0 {
                    px.x += cfg.pixel_noise_sigma * gaussian(&mut rng);
                    px.y += cfg.pixel_noise_sigma * gaussian(&mut rng);
                }
                let score = (self.world.scores[p] + 0.02 * gaussian(&mut rng)).clamp(0.05, 1.0);
                let desc = noisy_code(&self.world.codes[fi][p], cfg.descriptor_noise, &mut rng);
                if !(px.x >= 0.0 && px.y >= 0.0 && px.x <= w && px.y <= h) {
                    continue;
                }
                batch.push((p, px, score, desc));
            }
            batch.shuffle(&mut rng);
            for (p, px, score, desc) in batch {
                origin.push((fi, p));
                keypoints.push(Keypoint { pixel: px, score, family: f.clone(), label: 0 });
                descriptors.push(Descriptor::new(desc, f.clone()));
            }
        }

        let mut labels = view.labels;
        let n_corrupt = (cfg.label_noise_rate * keypoints.len() as f64).floor() as usize;
        let mut order: Vec<usize> = (0..keypoints.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order[..n_corrupt] {
            let (col, row) = (keypoints[i].pixel.x.round() as usize, keypoints[i].pixel.y.round() as usize);
            let old = labels.get(col, row);
            labels.set(col, row, old % (CLASS_NAMES.len() as ClassId - 1) + 1);
        }
        for kp in keypoints.iter_mut() {
            kp.label = labels.label_at(&kp.pixel).expect("keypoints lie inside the image");
        }

        let mut flags: Vec<KeypointFlags> = origin
            .iter()
            .enumerate()
            .map(|(i, &(_, p))| {
                let id = p as PointId;
                let true_point = map_points.contains(&id).then_some(id);
                KeypointFlags {
                    kp_idx: i,
                    true_point,
                    matched_point: true_point,
                    is_outlier: false,
                    is_label_corrupted: keypoints[i].label != self.world.classes[p],
                }
            })
            .collect();

        let matchable: Vec<usize> = (0..flags.len()).filter(|&i| flags[i].true_point.is_some()).collect();
        let n_out = (cfg.outlier_match_rate * matchable.len() as f64).floor() as usize;
        let mut chosen = matchable;
        chosen.shuffle(&mut rng);
        chosen.truncate(n_out);
        chosen.sort_unstable();
        let detected: Vec<BTreeSet<PointId>> = (0..families.len())
            .map(|fi| origin.iter().filter(|o| o.0 == fi).map(|o| o.1 as PointId).collect())
            .collect();
        let mut used: Vec<BTreeSet<PointId>> = vec![BTreeSet::new(); families.len()];
        for i in chosen {
            let (fi, p) = origin[i];
            let p_class = self.world.classes[p];
            let eligible = |q: &PointId| {
                *q != p as PointId
                    && !detected[fi].contains(q)
                    && (!cfg.cross_label_outliers || self.world.classes[*q as usize] != p_class)
            };
            let fresh: Vec<PointId> =
                self.observed[fi].iter().copied().filter(|q| eligible(q) && !used[fi].contains(q)).collect();
            let pool =
                if fresh.is_empty() { self.observed[fi].iter().copied().filter(eligible).collect() } else { fresh };
            flags[i].is_outlier = true;
            if pool.is_empty() {
                flags[i].matched_point = None;
                descriptors[i].values = unit_vector(&mut rng, cfg.families[fi].dim);
            } else {
                let q = pool[rng.random_range(0..pool.len())];
                used[fi].insert(q);
                flags[i].matched_point = Some(q);
                descriptors[i].values = noisy_code(&self.world.codes[fi][q as usize], cfg.descriptor_noise, &mut rng);
            }
        }

        let depth_scale = rng.random_range(0.2..=5.0);
        let gamma = if cfg.depth_warp { rng.random_range(0.7..=1.3) } else { 1.0 };
        let mut depth = view.depth;
        for d in depth.iter_mut().filter(|d| **d > 0.0) {
            let mut v = depth_scale * d.powf(gamma);
            if cfg.depth_noise_sigma > 0.0 {
                v *= (1.0 + cfg.depth_noise_sigma * gaussian(&mut rng)).max(0.05);
            }
            *d = v;
        }
        let global = global_descriptor(&pose, &mut rng);
        let assets = QueryAssets {
            name: query_name(i),
            width: cfg.width,
            height: cfg.height,
            intrinsics: self.cfg.intrinsics(),
            keypoints,
            descriptors,
            global,
            labels: Some(labels),
            depth: Some(DepthMap::new(cfg.width, cfg.height, depth).expect("positive finite depth")),
        };
        let scene_points = origin.iter().map(|o| o.1 as PointId).collect();
        SyntheticQuery { assets, pose, flags, scene_points, depth_scale }
    }

    /// Writes the full bundle: manifest, class table, reconstruction, every
    /// database and query image, `gt.txt` and `truth/<query>.flags.txt`.
    pub fn write_bundle(&self, dir: &Path) -> Result<(), SynthError> {
        let families = self.cfg.families();
        let manifest = Manifest {
            families: families.clone(),
            classes: "classes.txt".into(),
            sfm: "sfm.txt".into(),
            db: (0..self.cfg.n_db_images).map(db_name).collect(),
            queries: (0..self.cfg.n_queries).map(query_name).collect(),
            ground_truth: Some("gt.txt".into()),
        };
        io::write_text(&dir.join("manifest.txt"), &manifest.format())?;
        io::write_text(&dir.join("classes.txt"), &io::format_classes(&class_table()))?;
        io::write_text(&dir.join("sfm.txt"), &self.sfm.format())?;
        self.db.par_iter().try_for_each(|a| io::write_image_assets(&dir.join(&a.name), a, &families))?;
        let poses: Vec<(String, Pose<f64>)> = (0..self.cfg.n_queries)
            .into_par_iter()
            .map(|i| {
                let q = self.query(i);
                io::write_image_assets(&dir.join(&q.assets.name), &q.assets, &families)?;
                io::write_text(
                    &dir.join("truth").join(format!("{}.flags.txt", q.assets.name)),
                    &io::format_flags(&q.flags),
                )?;
                Ok((q.assets.name, q.pose))
            })
            .collect::<Result<_, IoError>>()?;
        io::write_text(&dir.join("gt.txt"), &io::format_ground_truth(&poses)?)?;
        Ok(())
    }
}

/// Generates a scene and writes it to `dir`.
pub fn generate_scene(cfg: SceneConfig, dir: &Path) -> Result<SceneGenerator, SynthError> {
    let g = SceneGenerator::new(cfg)?;
    g.write_bundle(dir)?;
    Ok(g)
}

fn make_world(cfg: &SceneConfig) -> World {
    let mut rng = rng_for(cfg.seed, 0);
    let (z0, z1) = cfg.depth_range;
    let mid_z = 0.5 * (z0 + z1);
    let points: Vec<Point3<f64>> = (0..cfg.n_points)
        .map(|_| {
            Point3::new(
                rng.random_range(-cfg.extent_x..=cfg.extent_x),
                rng.random_range(-cfg.extent_y..=cfg.extent_y),
                rng.random_range(z0..=z1),
            )
        })
        .collect();
    let classes = points.iter().map(|p| octant_class(p, mid_z)).collect();
    let scores = (0..cfg.n_points).map(|_| rng.random_range(0.4..1.0)).collect();
    let codes =
        cfg.families.iter().map(|f| (0..cfg.n_points).map(|_| unit_vector(&mut rng, f.dim)).collect()).collect();
    let n = cfg.n_db_images;
    let db_poses = (0..n)
        .map(|j| {
            let x = -cfg.db_span + 2.0 * cfg.db_span * j as f64 / (n - 1) as f64;
            let yaw = rng.random_range(-5.0f64..=5.0).to_radians();
            let pitch = rng.random_range(-2.0f64..=2.0).to_radians();
            let q = UnitQuaternion::from_euler_angles(pitch, yaw, 0.0);
            Pose::from_center(q, &Point3::new(x, rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5)))
        })
        .collect();
    World { points, classes, scores, codes, db_poses }
}

/// Normalized camera center and viewing direction, lightly perturbed.
fn global_descriptor(pose: &Pose<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = pose.center();
    let dir = pose.rotation().transpose() * Vector3::z();
    [c.x / 8.0, c.y / 8.0, c.z / 8.0, dir.x, dir.y, dir.z].iter().map(|v| v + 0.01 * gaussian(rng)).collect()
}

fn render(world: &World, pose: &Pose<f64>, cfg: &SceneConfig) -> View {
    let k = cfg.intrinsics();
    let (w, h) = (cfg.width, cfg.height);
    let mut nearest: HashMap<(i64, i64), (f64, usize, Pixel<f64>)> = HashMap::new();
    for (i, p) in world.points.iter().enumerate() {
        let Ok((px, z)) = project(p, pose, &k) else { continue };
        if z < MIN_DEPTH || !(px.x >= 0.0 && px.y >= 0.0 && px.x <= (w - 1) as f64 && px.y <= (h - 1) as f64) {
            continue;
        }
        let cell = (px.x.round() as i64, px.y.round() as i64);
        let e = nearest.entry(cell).or_insert((z, i, px));
        if z < e.0 || (z == e.0 && i < e.1) {
            *e = (z, i, px);
        }
    }
    let mut visible: Vec<(usize, Pixel<f64>, f64)> = nearest.into_values().map(|(z, i, px)| (i, px, z)).collect();
    visible.sort_by_key(|v| v.0);

    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut labels = LabelMap::filled(w, h, 0);
    for &(i, px, z) in &visible {
        let (cu, cv) = (px.x.round() as i64, px.y.round() as i64);
        for dv in -DISK_RADIUS..=DISK_RADIUS {
            for du in -DISK_RADIUS..=DISK_RADIUS {
                let (u, v) = (cu + du, cv + dv);
                if du * du + dv * dv > DISK_RADIUS * DISK_RADIUS || u < 0 || v < 0 || u >= w as i64 || v >= h as i64 {
                    continue;
                }
                let idx = v as usize * w + u as usize;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    labels.set(u as usize, v as usize, world.classes[i]);
                }
            }
        }
    }
    // Each visible point owns its own center pixel.
    for &(i, px, z) in &visible {
        let (u, v) = (px.x.round() as usize, px.y.round() as usize);
        zbuf[v * w + u] = z;
        labels.set(u, v, world.classes[i]);
    }
    let depth = zbuf.into_iter().map(|z| if z.is_finite() { z } else { 0.0 }).collect();
    View { visible, labels, depth }
}

/// Triangulates from the two observing images with the widest baseline.
fn widest_pair_triangulation(
    track: &[(ImageId, usize, Pixel<f64>, usize)],
    poses: &[Pose<f64>],
    k: &Intrinsics<f64>,
) -> Option<Point3<f64>> {
    let mut best: Option<(f64, usize, usize)> = None;
    for a in 0..track.len() {
        for b in a + 1..track.len() {
            if track[a].0 == track[b].0 {
                continue;
            }
            let d = pose_delta(&poses[track[a].0 as usize], &poses[track[b].0 as usize]).0;
            if best.is_none_or(|(bd, _, _)| d > bd) {
                best = Some((d, a, b));
            }
        }
    }
    let (_, a, b) = best?;
    let (ta, tb) = (&track[a], &track[b]);
    triangulate(&ta.2, &poses[ta.0 as usize], &tb.2, &poses[tb.0 as usize], k).ok()
}
