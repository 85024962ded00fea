//! Per-image asset files, the bundle manifest, the reconstruction file and
//! the class table.
//!
//! A bundle directory holds `manifest.txt`, the class table, the
//! reconstruction, and one directory per image containing `camera.txt`,
//! `keypoints_<family>.txt`, `descriptors_<family>.txt`, `global.txt` and
//! optionally `labels.txt` and `depth.txt`.

use std::path::{Path, PathBuf};

use super::{check_token, push_floats, push_line, read_text, write_text, IoError, Reader, Result};
use crate::depth::DepthMap;
use crate::features::{Descriptor, Family, Keypoint};
use crate::geometry::{Intrinsics, Pixel, Pose, WorldPoint};
use crate::pipeline::{DbImage, Map, PointId, QueryAssets};
use crate::retrieval::ImageId;
use crate::semantic::{ClassId, ClassTable, LabelMap};

pub fn format_camera(width: usize, height: usize, k: &Intrinsics<f64>) -> String {
    let mut s = String::from("CAM v1\n");
    push_line(&mut s, format_args!("{width} {height}"));
    push_floats(&mut s, [k.fx, k.fy, k.cx, k.cy]);
    s
}

pub fn parse_camera(path: &Path, text: &str) -> Result<(usize, usize, Intrinsics<f64>)> {
    let mut r = Reader::new(path, text);
    r.header("CAM")?;
    let (line, t) = r.row(2, "image size")?;
    let width = r.parse(line, t[0], "width")?;
    let height = r.parse(line, t[1], "height")?;
    let (line, t) = r.row(4, "fx fy cx cy")?;
    let v = r.floats(line, &t, "intrinsic")?;
    let k = Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| r.err(line, e.to_string()))?;
    r.finish()?;
    Ok((width, height, k))
}

pub fn format_keypoints(family: &Family, kps: &[Keypoint<f64>]) -> String {
    let mut s = String::new();
    push_line(&mut s, format_args!("KPTS v1 {family} {}", kps.len()));
    for k in kps {
        push_line(
            &mut s,
            format_args!(
                "{} {} {} {}",
                super::fmt_f64(k.pixel.x),
                super::fmt_f64(k.pixel.y),
                super::fmt_f64(k.score),
                k.label
            ),
        );
    }
    s
}

pub fn parse_keypoints(path: &Path, text: &str) -> Result<(Family, Vec<Keypoint<f64>>)> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("KPTS")?;
    if h.len() != 2 {
        return Err(r.err(line, "expected `KPTS v1 <family> <count>`"));
    }
    let family = Family::new(h[0]);
    let count: usize = r.parse(line, h[1], "count")?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, t) = r.row(4, "keypoint row `u v score label`")?;
        let v = r.floats(line, &t[..3], "keypoint field")?;
        let label: ClassId = r.parse(line, t[3], "label")?;
        out.push(Keypoint { pixel: Pixel::new(v[0], v[1]), score: v[2], family: family.clone(), label });
    }
    r.finish()?;
    Ok((family, out))
}

pub fn format_descriptors(family: &Family, descs: &[Descriptor<f64>]) -> String {
    let dim = descs.first().map_or(0, |d| d.values.len());
    let mut s = String::new();
    push_line(&mut s, format_args!("DESC v1 {family} {} {dim}", descs.len()));
    for d in descs {
        push_floats(&mut s, d.values.iter().copied());
    }
    s
}

pub fn parse_descriptors(path: &Path, text: &str) -> Result<(Family, Vec<Descriptor<f64>>)> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("DESC")?;
    if h.len() != 3 {
        return Err(r.err(line, "expected `DESC v1 <family> <count> <dim>`"));
    }
    let family = Family::new(h[0]);
    let count: usize = r.parse(line, h[1], "count")?;
    let dim: usize = r.parse(line, h[2], "dimension")?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, t) = r.row(dim, "descriptor row")?;
        out.push(Descriptor::new(r.floats(line, &t, "descriptor value")?, family.clone()));
    }
    r.finish()?;
    Ok((family, out))
}

pub fn format_global(values: &[f64]) -> String {
    let mut s = String::new();
    push_line(&mut s, format_args!("GDESC v1 {}", values.len()));
    push_floats(&mut s, values.iter().copied());
    s
}

pub fn parse_global(path: &Path, text: &str) -> Result<Vec<f64>> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("GDESC")?;
    if h.len() != 1 {
        return Err(r.err(line, "expected `GDESC v1 <dim>`"));
    }
    let dim: usize = r.parse(line, h[0], "dimension")?;
    let (line, t) = r.row(dim, "global descriptor")?;
    let v = r.floats(line, &t, "descriptor value")?;
    r.finish()?;
    Ok(v)
}

pub fn format_labels(m: &LabelMap) -> String {
    let mut s = String::new();
    push_line(&mut s, format_args!("LMAP v1 {} {}", m.width, m.height));
    for row in 0..m.height {
        let cells: Vec<String> = (0..m.width).map(|c| m.get(c, row).to_string()).collect();
        push_line(&mut s, format_args!("{}", cells.join(" ")));
    }
    s
}

pub fn parse_labels(path: &Path, text: &str) -> Result<LabelMap> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("LMAP")?;
    if h.len() != 2 {
        return Err(r.err(line, "expected `LMAP v1 <w> <h>`"));
    }
    let w: usize = r.parse(line, h[0], "width")?;
    let hgt: usize = r.parse(line, h[1], "height")?;
    let mut labels = Vec::with_capacity(w * hgt);
    for _ in 0..hgt {
        let (line, t) = r.row(w, "label row")?;
        for tok in t {
            labels.push(r.parse::<ClassId>(line, tok, "class id")?);
        }
    }
    r.finish()?;
    LabelMap::new(w, hgt, labels).map_err(|e| r.err(line, e.to_string()))
}

pub fn format_depth(m: &DepthMap<f64>) -> String {
    let mut s = String::new();
    push_line(&mut s, format_args!("DMAP v1 {} {}", m.width, m.height));
    for row in 0..m.height {
        push_floats(&mut s, (0..m.width).map(|c| m.get(c, row)));
    }
    s
}

pub fn parse_depth(path: &Path, text: &str) -> Result<DepthMap<f64>> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("DMAP")?;
    if h.len() != 2 {
        return Err(r.err(line, "expected `DMAP v1 <w> <h>`"));
    }
    let w: usize = r.parse(line, h[0], "width")?;
    let hgt: usize = r.parse(line, h[1], "height")?;
    let mut depth = Vec::with_capacity(w * hgt);
    for _ in 0..hgt {
        let (line, t) = r.row(w, "depth row")?;
        depth.extend(r.floats(line, &t, "depth")?);
    }
    r.finish()?;
    DepthMap::new(w, hgt, depth).map_err(|e| r.err(line, e.to_string()))
}

pub fn format_classes(table: &ClassTable) -> String {
    let mut s = String::new();
    push_line(&mut s, format_args!("CLASSES v1 {}", table.classes.len()));
    for (id, c) in &table.classes {
        push_line(&mut s, format_args!("{id} {} {}", c.name, u8::from(c.dynamic)));
    }
    s
}

pub fn parse_classes(path: &Path, text: &str) -> Result<ClassTable> {
    let mut r = Reader::new(path, text);
    let (line, h) = r.header("CLASSES")?;
    if h.len() != 1 {
        return Err(r.err(line, "expected `CLASSES v1 <count>`"));
    }
    let n: usize = r.parse(line, h[0], "count")?;
    let table = read_class_rows(&mut r, n)?;
    r.finish()?;
    Ok(table)
}

pub(crate) fn read_class_rows(r: &mut Reader<'_>, n: usize) -> Result<ClassTable> {
    let mut table = ClassTable::default();
    for _ in 0..n {
        let (line, t) = r.row(3, "class row `id name dynamic`")?;
        let id: ClassId = r.parse(line, t[0], "class id")?;
        let dynamic = match t[2] {
            "0" => false,
            "1" => true,
            other => return Err(r.err(line, format!("dynamic flag must be 0 or 1, found {other:?}"))),
        };
        if table.contains(id) {
            return Err(r.err(line, format!("duplicate class id {id}")));
        }
        table.insert(id, t[1], dynamic);
    }
    Ok(table)
}

/// Bundle index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub families: Vec<Family>,
    pub classes: String,
    pub sfm: String,
    pub db: Vec<String>,
    pub queries: Vec<String>,
    pub ground_truth: Option<String>,
}

impl Manifest {
    pub fn format(&self) -> String {
        let mut s = String::from("MANIFEST v1\n");
        let fams: Vec<&str> = self.families.iter().map(Family::as_str).collect();
        push_line(&mut s, format_args!("families {}", fams.join(" ")));
        push_line(&mut s, format_args!("classes {}", self.classes));
        push_line(&mut s, format_args!("sfm {}", self.sfm));
        if let Some(gt) = &self.ground_truth {
            push_line(&mut s, format_args!("gt {gt}"));
        }
        for d in &self.db {
            push_line(&mut s, format_args!("db {d}"));
        }
        for q in &self.queries {
            push_line(&mut s, format_args!("query {q}"));
        }
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut r = Reader::new(path, text);
        r.header("MANIFEST")?;
        let mut m = Manifest::default();
        let (mut classes, mut sfm) = (None, None);
        while r.peek().is_some() {
            let (line, t) = r.next("manifest entry")?;
            match (t[0], t.len()) {
                ("families", n) if n >= 2 => m.families = t[1..].iter().map(|f| Family::new(*f)).collect(),
                ("classes", 2) => classes = Some(t[1].to_string()),
                ("sfm", 2) => sfm = Some(t[1].to_string()),
                ("gt", 2) => m.ground_truth = Some(t[1].to_string()),
                ("db", 2) => m.db.push(t[1].to_string()),
                ("query", 2) => m.queries.push(t[1].to_string()),
                _ => return Err(r.err(line, format!("unrecognized manifest entry {:?}", t.join(" ")))),
            }
        }
        let eof = text.lines().count() + 1;
        m.classes = classes.ok_or_else(|| r.err(eof, "manifest lacks a `classes` entry"))?;
        m.sfm = sfm.ok_or_else(|| r.err(eof, "manifest lacks an `sfm` entry"))?;
        if m.families.is_empty() {
            return Err(r.err(eof, "manifest lacks a `families` entry"));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmImage {
    pub id: ImageId,
    pub name: String,
    pub pose: Pose<f64>,
}

/// Registered database poses, triangulated points and their tracks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SfmModel {
    pub images: Vec<SfmImage>,
    pub points: Vec<(PointId, WorldPoint<f64>, Vec<(ImageId, usize)>)>,
}

impl SfmModel {
    pub fn format(&self) -> String {
        let mut s = String::from("SFM v1\n");
        push_line(&mut s, format_args!("IMAGES {}", self.images.len()));
        for img in &self.images {
            s.push_str(&format!("{} {} ", img.id, img.name));
            push_pose(&mut s, &img.pose);
        }
        push_line(&mut s, format_args!("POINTS {}", self.points.len()));
        for (id, p, _) in &self.points {
            s.push_str(&format!("{id} "));
            push_floats(&mut s, [p.x, p.y, p.z]);
        }
        let n_obs: usize = self.points.iter().map(|p| p.2.len()).sum();
        push_line(&mut s, format_args!("TRACKS {n_obs}"));
        for (id, _, track) in &self.points {
            for (img, kp) in track {
                push_line(&mut s, format_args!("{id} {img} {kp}"));
            }
        }
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut r = Reader::new(path, text);
        r.header("SFM")?;
        let (line, a) = r.section("IMAGES", 1)?;
        let n: usize = r.parse(line, a[0], "image count")?;
        let mut images = Vec::with_capacity(n);
        for _ in 0..n {
            let (line, t) = r.row(9, "image row `id name qw qx qy qz tx ty tz`")?;
            let id = r.parse(line, t[0], "image id")?;
            let pose = parse_pose(&r, line, &t[2..9])?;
            images.push(SfmImage { id, name: t[1].to_string(), pose });
        }
        let (line, a) = r.section("POINTS", 1)?;
        let n: usize = r.parse(line, a[0], "point count")?;
        let mut points = Vec::with_capacity(n);
        let mut index = std::collections::HashMap::with_capacity(n);
        for i in 0..n {
            let (line, t) = r.row(4, "point row `id x y z`")?;
            let id: PointId = r.parse(line, t[0], "point id")?;
            let v = r.floats(line, &t[1..], "coordinate")?;
            if index.insert(id, i).is_some() {
                return Err(r.err(line, format!("duplicate point id {id}")));
            }
            points.push((id, WorldPoint::new(v[0], v[1], v[2]), Vec::new()));
        }
        let (line, a) = r.section("TRACKS", 1)?;
        let n: usize = r.parse(line, a[0], "observation count")?;
        for _ in 0..n {
            let (line, t) = r.row(3, "track row `point_id image_id kp_idx`")?;
            let pid: PointId = r.parse(line, t[0], "point id")?;
            let img: ImageId = r.parse(line, t[1], "image id")?;
            let kp: usize = r.parse(line, t[2], "keypoint index")?;
            let Some(&i) = index.get(&pid) else {
                return Err(r.err(line, format!("track references unknown point {pid}")));
            };
            points[i].2.push((img, kp));
        }
        r.finish()?;
        Ok(Self { images, points })
    }
}

pub(crate) fn push_pose(s: &mut String, pose: &Pose<f64>) {
    let q = pose.quaternion_wxyz();
    let t = pose.translation();
    push_floats(s, [q[0], q[1], q[2], q[3], t.x, t.y, t.z]);
}

pub(crate) fn parse_pose(r: &Reader<'_>, line: usize, t: &[&str]) -> Result<Pose<f64>> {
    let v = r.floats(line, t, "pose field")?;
    Pose::from_quaternion_wxyz([v[0], v[1], v[2], v[3]], nalgebra::Vector3::new(v[4], v[5], v[6]))
        .map_err(|e| r.err(line, e.to_string()))
}

/// Writes the asset files of one image into `dir`.
pub fn write_image_assets(dir: &Path, assets: &QueryAssets, families: &[Family]) -> Result<()> {
    write_text(&dir.join("camera.txt"), &format_camera(assets.width, assets.height, &assets.intrinsics))?;
    for f in families {
        let idx: Vec<usize> = (0..assets.keypoints.len()).filter(|&i| &assets.keypoints[i].family == f).collect();
        let kps: Vec<_> = idx.iter().map(|&i| assets.keypoints[i].clone()).collect();
        let descs: Vec<_> = idx.iter().map(|&i| assets.descriptors[i].clone()).collect();
        write_text(&dir.join(format!("keypoints_{f}.txt")), &format_keypoints(f, &kps))?;
        write_text(&dir.join(format!("descriptors_{f}.txt")), &format_descriptors(f, &descs))?;
    }
    write_text(&dir.join("global.txt"), &format_global(&assets.global))?;
    if let Some(l) = &assets.labels {
        write_text(&dir.join("labels.txt"), &format_labels(l))?;
    }
    if let Some(d) = &assets.depth {
        write_text(&dir.join("depth.txt"), &format_depth(d))?;
    }
    Ok(())
}

/// Reads one image directory. Keypoints are concatenated in `families`
/// order; label and depth maps are optional.
pub fn load_image_assets(dir: &Path, name: &str, families: &[Family]) -> Result<QueryAssets> {
    let load = |file: &str| -> Result<(PathBuf, String)> {
        let p = dir.join(file);
        let text = read_text(&p)?;
        Ok((p, text))
    };
    let (p, t) = load("camera.txt")?;
    let (width, height, intrinsics) = parse_camera(&p, &t)?;
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    for f in families {
        let (kp_path, t) = load(&format!("keypoints_{f}.txt"))?;
        let (kf, kps) = parse_keypoints(&kp_path, &t)?;
        let (d_path, t) = load(&format!("descriptors_{f}.txt"))?;
        let (df, descs) = parse_descriptors(&d_path, &t)?;
        if &kf != f || &df != f {
            return Err(IoError::Invariant(format!(
                "{}: family {kf}/{df} does not match file name {f}",
                dir.display()
            )));
        }
        if kps.len() != descs.len() {
            return Err(IoError::Invariant(format!(
                "{}: {} keypoints but {} descriptors",
                d_path.display(),
                kps.len(),
                descs.len()
            )));
        }
        keypoints.extend(kps);
        descriptors.extend(descs);
    }
    let (p, t) = load("global.txt")?;
    let global = parse_global(&p, &t)?;
    let optional = |file: &str| -> Result<Option<(PathBuf, String)>> {
        match load(file) {
            Ok(x) => Ok(Some(x)),
            Err(IoError::MissingAsset(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let labels = optional("labels.txt")?.map(|(p, t)| parse_labels(&p, &t)).transpose()?;
    let depth = optional("depth.txt")?.map(|(p, t)| parse_depth(&p, &t)).transpose()?;
    Ok(QueryAssets { name: name.to_string(), width, height, intrinsics, keypoints, descriptors, global, labels, depth })
}

/// Query images at `dir`: every `query` entry when `dir` is a bundle root,
/// otherwise `dir` itself as a single query named after the directory.
pub fn load_query(dir: &Path, families: &[Family]) -> Result<Vec<QueryAssets>> {
    let manifest_path = dir.join("manifest.txt");
    if manifest_path.exists() {
        let manifest = Manifest::parse(&manifest_path, &read_text(&manifest_path)?)?;
        return manifest.queries.iter().map(|q| load_image_assets(&dir.join(q), q, families)).collect();
    }
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| IoError::Invariant(format!("cannot name query directory {}", dir.display())))?;
    Ok(vec![load_image_assets(dir, name, families)?])
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetBundle {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub classes: ClassTable,
    pub sfm: SfmModel,
    /// Database image assets in manifest order.
    pub db: Vec<QueryAssets>,
}

pub fn load_bundle(root: &Path) -> Result<AssetBundle> {
    let mp = root.join("manifest.txt");
    let manifest = Manifest::parse(&mp, &read_text(&mp)?)?;
    let cp = root.join(&manifest.classes);
    let classes = parse_classes(&cp, &read_text(&cp)?)?;
    let sp = root.join(&manifest.sfm);
    let sfm = SfmModel::parse(&sp, &read_text(&sp)?)?;
    let db = manifest
        .db
        .iter()
        .map(|name| load_image_assets(&root.join(name), name, &manifest.families))
        .collect::<Result<Vec<_>>>()?;
    Ok(AssetBundle { root: root.to_path_buf(), manifest, classes, sfm, db })
}

/// Loads a bundle and turns it into a validated [`Map`].
pub fn build_map(root: &Path) -> Result<Map> {
    let b = load_bundle(root)?;
    assemble_map(&b.manifest.families, b.classes, b.sfm, &b.db)
}

/// Joins registered poses and tracks with the database image assets.
pub fn assemble_map(families: &[Family], classes: ClassTable, sfm: SfmModel, db: &[QueryAssets]) -> Result<Map> {
    let mut images = Vec::with_capacity(sfm.images.len());
    for si in &sfm.images {
        check_token(&si.name, "image name")?;
        let a = db.iter().find(|a| a.name == si.name).ok_or_else(|| {
            IoError::Invariant(format!("registered image {} ({}) is not listed in the manifest", si.id, si.name))
        })?;
        images.push(DbImage {
            id: si.id,
            name: si.name.clone(),
            width: a.width,
            height: a.height,
            intrinsics: a.intrinsics,
            pose: si.pose,
            keypoints: a.keypoints.clone(),
            descriptors: a.descriptors.clone(),
            global: a.global.clone(),
        });
    }
    Map::from_reconstruction(families.to_vec(), classes, images, sfm.points)
        .map_err(|e| IoError::Invariant(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.txt")
    }

    #[test]
    fn keypoints_round_trip() {
        let f = Family::new("sp");
        let kps = vec![
            Keypoint { pixel: Pixel::new(0.1, 1.0 / 3.0), score: 0.7, family: f.clone(), label: 4 },
            Keypoint { pixel: Pixel::new(1e-300, 639.999), score: 1.0, family: f.clone(), label: 0 },
        ];
        let (ff, back) = parse_keypoints(p(), &format_keypoints(&f, &kps)).unwrap();
        assert_eq!(ff, f);
        assert_eq!(back, kps);
    }

    #[test]
    fn truncated_descriptors_report_line() {
        let f = Family::new("sp");
        let d = vec![Descriptor::new(vec![0.6, 0.8], f.clone()); 3];
        let text = format_descriptors(&f, &d);
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        match parse_descriptors(p(), &cut) {
            Err(IoError::Format { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("end of file"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_checked() {
        assert!(matches!(parse_global(p(), "GDESC v2 1\n1.0\n"), Err(IoError::VersionMismatch { .. })));
        assert!(matches!(parse_global(p(), "GDESC 1\n1.0\n"), Err(IoError::Format { .. })));
        assert_eq!(parse_global(p(), "# comment\n\nGDESC v1 2 # trailing\n1 2\n").unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn maps_round_trip() {
        let mut lm = LabelMap::filled(3, 2, 1);
        lm.set(2, 1, 7);
        assert_eq!(parse_labels(p(), &format_labels(&lm)).unwrap(), lm);
        let dm = DepthMap::new(2, 2, vec![0.0, 1.5, 1e-7, 3.25]).unwrap();
        assert_eq!(parse_depth(p(), &format_depth(&dm)).unwrap(), dm);
        let k = Intrinsics::new(500.0, 501.0, 320.5, 240.25).unwrap();
        assert_eq!(parse_camera(p(), &format_camera(640, 480, &k)).unwrap(), (640, 480, k));
    }

    #[test]
    fn classes_and_manifest_round_trip() {
        let mut t = ClassTable::default();
        t.insert(0, "sky", false);
        t.insert(3, "car", true);
        assert_eq!(parse_classes(p(), &format_classes(&t)).unwrap(), t);
        let m = Manifest {
            families: vec![Family::new("a"), Family::new("b")],
            classes: "classes.txt".into(),
            sfm: "sfm.txt".into(),
            db: vec!["db_0".into()],
            queries: vec!["q_0".into(), "q_1".into()],
            ground_truth: Some("gt.txt".into()),
        };
        assert_eq!(Manifest::parse(p(), &m.format()).unwrap(), m);
    }
}
