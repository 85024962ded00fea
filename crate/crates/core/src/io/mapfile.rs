//! Single-file map serialization.

use std::collections::BTreeMap;
use std::path::Path;

use super::assets::{parse_pose, push_pose, read_class_rows};
use super::{check_token, fmt_f64, push_floats, push_line, read_text, write_text, IoError, Reader, Result};
use crate::features::{Descriptor, Family, Keypoint};
use crate::geometry::{Intrinsics, Pixel, WorldPoint};
use crate::pipeline::{DbImage, Map, MapPoint, PointId};
use crate::retrieval::ImageId;
use crate::semantic::ClassId;

pub fn format_map(map: &Map) -> Result<String> {
    let mut s = String::from("MAP v1\n");
    for f in &map.families {
        check_token(f.as_str(), "family")?;
    }
    let fams: Vec<&str> = map.families.iter().map(Family::as_str).collect();
    push_line(&mut s, format_args!("FAMILIES {} {}", fams.len(), fams.join(" ")));
    push_line(&mut s, format_args!("CLASSES {}", map.class_table.classes.len()));
    for (id, c) in &map.class_table.classes {
        check_token(&c.name, "class name")?;
        push_line(&mut s, format_args!("{id} {} {}", c.name, u8::from(c.dynamic)));
    }
    push_line(&mut s, format_args!("IMAGES {}", map.images.len()));
    for img in &map.images {
        check_token(&img.name, "image name")?;
        let k = &img.intrinsics;
        s.push_str(&format!("{} {} {} {} ", img.id, img.name, img.width, img.height));
        s.push_str(&format!("{} {} {} {} ", fmt_f64(k.fx), fmt_f64(k.fy), fmt_f64(k.cx), fmt_f64(k.cy)));
        push_pose(&mut s, &img.pose);
    }
    for img in &map.images {
        push_line(&mut s, format_args!("GDESC {} {}", img.id, img.global.len()));
        push_floats(&mut s, img.global.iter().copied());
        push_line(&mut s, format_args!("KEYPOINTS {} {}", img.id, img.keypoints.len()));
        for kp in &img.keypoints {
            push_line(
                &mut s,
                format_args!(
                    "{} {} {} {} {}",
                    kp.family,
                    fmt_f64(kp.pixel.x),
                    fmt_f64(kp.pixel.y),
                    fmt_f64(kp.score),
                    kp.label
                ),
            );
        }
        for f in &map.families {
            let range = img.family_range(f);
            let dim = img.descriptors.get(range.start).filter(|_| !range.is_empty()).map_or(0, |d| d.values.len());
            push_line(&mut s, format_args!("DDESC {} {f} {} {dim}", img.id, range.len()));
            for d in &img.descriptors[range] {
                if d.values.len() != dim {
                    return Err(IoError::Invariant(format!(
                        "image {}: descriptor dimensions differ in family {f}",
                        img.id
                    )));
                }
                push_floats(&mut s, d.values.iter().copied());
            }
        }
    }
    push_line(&mut s, format_args!("POINTS {}", map.points.len()));
    for p in &map.points {
        s.push_str(&format!("{} ", p.id));
        let xyz = [p.position.x, p.position.y, p.position.z].map(fmt_f64);
        push_line(&mut s, format_args!("{} {}", xyz.join(" "), p.label));
    }
    let n_obs: usize = map.points.iter().map(|p| p.track.len()).sum();
    push_line(&mut s, format_args!("TRACKS {n_obs}"));
    for p in &map.points {
        for (img, kp) in &p.track {
            push_line(&mut s, format_args!("{} {img} {kp}", p.id));
        }
    }
    for f in &map.families {
        let rows: Vec<(PointId, &Descriptor<f64>)> =
            map.points.iter().filter_map(|p| p.descriptors.get(f).map(|d| (p.id, d))).collect();
        let dim = rows.first().map_or(0, |r| r.1.values.len());
        push_line(&mut s, format_args!("PDESC {f} {} {dim}", rows.len()));
        for (id, d) in rows {
            s.push_str(&format!("{id} "));
            push_floats(&mut s, d.values.iter().copied());
        }
    }
    Ok(s)
}

pub fn parse_map(path: &Path, text: &str) -> Result<Map> {
    let mut r = Reader::new(path, text);
    r.header("MAP")?;
    let (line, t) = r.next("FAMILIES section")?;
    if t[0] != "FAMILIES" || t.len() < 2 {
        return Err(r.err(line, "expected `FAMILIES <count> <names...>`"));
    }
    let n: usize = r.parse(line, t[1], "family count")?;
    if t.len() != n + 2 {
        return Err(r.err(line, format!("expected {n} family names")));
    }
    let families: Vec<Family> = t[2..].iter().map(|f| Family::new(*f)).collect();

    let (line, a) = r.section("CLASSES", 1)?;
    let n: usize = r.parse(line, a[0], "class count")?;
    let class_table = read_class_rows(&mut r, n)?;

    let (line, a) = r.section("IMAGES", 1)?;
    let n: usize = r.parse(line, a[0], "image count")?;
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, t) = r.row(15, "image row")?;
        let id: ImageId = r.parse(line, t[0], "image id")?;
        let width = r.parse(line, t[2], "width")?;
        let height = r.parse(line, t[3], "height")?;
        let k = r.floats(line, &t[4..8], "intrinsic")?;
        let intrinsics = Intrinsics::new(k[0], k[1], k[2], k[3]).map_err(|e| r.err(line, e.to_string()))?;
        let pose = parse_pose(&r, line, &t[8..15])?;
        images.push(DbImage {
            id,
            name: t[1].to_string(),
            width,
            height,
            intrinsics,
            pose,
            keypoints: Vec::new(),
            descriptors: Vec::new(),
            global: Vec::new(),
        });
    }
    for img in images.iter_mut() {
        let (line, a) = r.section("GDESC", 2)?;
        expect_id(&r, line, a[0], img.id)?;
        let dim: usize = r.parse(line, a[1], "dimension")?;
        let (line, t) = r.row(dim, "global descriptor")?;
        img.global = r.floats(line, &t, "descriptor value")?;

        let (line, a) = r.section("KEYPOINTS", 2)?;
        expect_id(&r, line, a[0], img.id)?;
        let count: usize = r.parse(line, a[1], "keypoint count")?;
        for _ in 0..count {
            let (line, t) = r.row(5, "keypoint row `family u v score label`")?;
            let v = r.floats(line, &t[1..4], "keypoint field")?;
            let label: ClassId = r.parse(line, t[4], "label")?;
            img.keypoints.push(Keypoint {
                pixel: Pixel::new(v[0], v[1]),
                score: v[2],
                family: Family::new(t[0]),
                label,
            });
        }
        for f in &families {
            let (line, a) = r.section("DDESC", 4)?;
            expect_id(&r, line, a[0], img.id)?;
            if a[1] != f.as_str() {
                return Err(r.err(line, format!("expected descriptors of family {f}, found {}", a[1])));
            }
            let count: usize = r.parse(line, a[2], "descriptor count")?;
            let dim: usize = r.parse(line, a[3], "dimension")?;
            for _ in 0..count {
                let (line, t) = r.row(dim, "descriptor row")?;
                img.descriptors.push(Descriptor::new(r.floats(line, &t, "descriptor value")?, f.clone()));
            }
        }
    }

    let (line, a) = r.section("POINTS", 1)?;
    let n: usize = r.parse(line, a[0], "point count")?;
    let mut points = Vec::with_capacity(n);
    let mut index = std::collections::HashMap::with_capacity(n);
    for i in 0..n {
        let (line, t) = r.row(5, "point row `id x y z label`")?;
        let id: PointId = r.parse(line, t[0], "point id")?;
        let v = r.floats(line, &t[1..4], "coordinate")?;
        let label: ClassId = r.parse(line, t[4], "label")?;
        if index.insert(id, i).is_some() {
            return Err(r.err(line, format!("duplicate point id {id}")));
        }
        points.push(MapPoint {
            id,
            position: WorldPoint::new(v[0], v[1], v[2]),
            label,
            descriptors: BTreeMap::new(),
            track: Vec::new(),
        });
    }
    let (line, a) = r.section("TRACKS", 1)?;
    let n: usize = r.parse(line, a[0], "observation count")?;
    for _ in 0..n {
        let (line, t) = r.row(3, "track row `point_id image_id kp_idx`")?;
        let pid: PointId = r.parse(line, t[0], "point id")?;
        let Some(&i) = index.get(&pid) else {
            return Err(r.err(line, format!("track references unknown point {pid}")));
        };
        points[i].track.push((r.parse(line, t[1], "image id")?, r.parse(line, t[2], "keypoint index")?));
    }
    for f in &families {
        let (line, a) = r.section("PDESC", 3)?;
        if a[0] != f.as_str() {
            return Err(r.err(line, format!("expected point descriptors of family {f}, found {}", a[0])));
        }
        let count: usize = r.parse(line, a[1], "descriptor count")?;
        let dim: usize = r.parse(line, a[2], "dimension")?;
        for _ in 0..count {
            let (line, t) = r.row(dim + 1, "point descriptor row")?;
            let pid: PointId = r.parse(line, t[0], "point id")?;
            let Some(&i) = index.get(&pid) else {
                return Err(r.err(line, format!("descriptor for unknown point {pid}")));
            };
            let d = Descriptor::new(r.floats(line, &t[1..], "descriptor value")?, f.clone());
            points[i].descriptors.insert(f.clone(), d);
        }
    }
    r.finish()?;
    Map::new(families, class_table, images, points).map_err(|e| IoError::Invariant(format!("{}: {e}", path.display())))
}

fn expect_id(r: &Reader<'_>, line: usize, token: &str, id: ImageId) -> Result<()> {
    let got: ImageId = r.parse(line, token, "image id")?;
    if got != id {
        return Err(r.err(line, format!("expected block for image {id}, found {got}")));
    }
    Ok(())
}

pub fn save_map(map: &Map, path: &Path) -> Result<()> {
    write_text(path, &format_map(map)?)
}

pub fn load_map(path: &Path) -> Result<Map> {
    parse_map(path, &read_text(path)?)
}
