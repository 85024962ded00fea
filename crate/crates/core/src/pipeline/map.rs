//! The immutable localization map: registered database images and the 3D
//! points triangulated from them.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::features::{Descriptor, Family, Keypoint};
use crate::geometry::{Intrinsics, Pose, WorldPoint};
use crate::retrieval::ImageId;
use crate::semantic::{majority_label, ClassId, ClassTable};

pub type PointId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("point {point}: {message}")]
    Point { point: PointId, message: String },
    #[error("image {image}: {message}")]
    Image { image: ImageId, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbImage {
    pub id: ImageId,
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics<f64>,
    pub pose: Pose<f64>,
    /// All families concatenated in the map's family order.
    pub keypoints: Vec<Keypoint<f64>>,
    /// Row `i` describes keypoint `i`.
    pub descriptors: Vec<Descriptor<f64>>,
    pub global: Vec<f64>,
}

impl DbImage {
    /// Index range of one family's keypoints.
    pub fn family_range(&self, family: &Family) -> std::ops::Range<usize> {
        let start = self.keypoints.iter().position(|k| &k.family == family);
        match start {
            None => 0..0,
            Some(s) => {
                let len = self.keypoints[s..].iter().take_while(|k| &k.family == family).count();
                s..s + len
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub id: PointId,
    pub position: WorldPoint<f64>,
    pub label: ClassId,
    /// Mean of the observing descriptors per family, renormalized.
    pub descriptors: BTreeMap<Family, Descriptor<f64>>,
    /// `(image id, keypoint index)` observations.
    pub track: Vec<(ImageId, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Map {
    pub families: Vec<Family>,
    pub class_table: ClassTable,
    pub images: Vec<DbImage>,
    pub points: Vec<MapPoint>,
    image_index: HashMap<ImageId, usize>,
    observation: HashMap<(ImageId, usize), usize>,
}

impl Map {
    /// Validates and indexes the parts. Labels and descriptors of `points`
    /// are kept as given.
    pub fn new(
        families: Vec<Family>,
        class_table: ClassTable,
        images: Vec<DbImage>,
        points: Vec<MapPoint>,
    ) -> Result<Self, MapError> {
        let mut image_index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if image_index.insert(img.id, i).is_some() {
                return Err(MapError::Image { image: img.id, message: "duplicate id".into() });
            }
            if img.descriptors.len() != img.keypoints.len() {
                return Err(MapError::Image {
                    image: img.id,
                    message: format!("{} descriptors for {} keypoints", img.descriptors.len(), img.keypoints.len()),
                });
            }
            let mut last = 0;
            for kp in &img.keypoints {
                let Some(pos) = families.iter().position(|f| f == &kp.family) else {
                    return Err(MapError::Image { image: img.id, message: format!("unknown family {}", kp.family) });
                };
                if pos < last {
                    return Err(MapError::Image { image: img.id, message: "keypoints not grouped by family".into() });
                }
                last = pos;
            }
        }
        let mut observation = HashMap::new();
        let mut ids = HashSet::with_capacity(points.len());
        for (p, point) in points.iter().enumerate() {
            if !ids.insert(point.id) {
                return Err(MapError::Point { point: point.id, message: "duplicate id".into() });
            }
            if point.track.is_empty() {
                return Err(MapError::Point { point: point.id, message: "empty track".into() });
            }
            for &(image, kp) in &point.track {
                let Some(&ii) = image_index.get(&image) else {
                    return Err(MapError::Point {
                        point: point.id,
                        message: format!("track references missing image {image}"),
                    });
                };
                if kp >= images[ii].keypoints.len() {
                    return Err(MapError::Point {
                        point: point.id,
                        message: format!("track references missing keypoint {kp} of image {image}"),
                    });
                }
                if observation.insert((image, kp), p).is_some() {
                    return Err(MapError::Point {
                        point: point.id,
                        message: format!("keypoint {kp} of image {image} observed by two points"),
                    });
                }
            }
        }
        Ok(Self { families, class_table, images, points, image_index, observation })
    }

    /// Builds a map from raw reconstruction output, labelling every point by
    /// the majority of its observing keypoints' labels (ties to the later
    /// image) and averaging descriptors per family.
    pub fn from_reconstruction(
        families: Vec<Family>,
        class_table: ClassTable,
        images: Vec<DbImage>,
        points: Vec<(PointId, WorldPoint<f64>, Vec<(ImageId, usize)>)>,
    ) -> Result<Self, MapError> {
        let order: HashMap<ImageId, usize> = images.iter().enumerate().map(|(i, img)| (img.id, i)).collect();
        let mut out = Vec::with_capacity(points.len());
        for (id, position, track) in points {
            let mut votes = Vec::with_capacity(track.len());
            let mut sums: BTreeMap<Family, Vec<f64>> = BTreeMap::new();
            for &(image, kp) in &track {
                let Some(&ii) = order.get(&image) else {
                    return Err(MapError::Point {
                        point: id,
                        message: format!("track references missing image {image}"),
                    });
                };
                let img = &images[ii];
                let (Some(k), Some(d)) = (img.keypoints.get(kp), img.descriptors.get(kp)) else {
                    return Err(MapError::Point {
                        point: id,
                        message: format!("track references missing keypoint {kp} of image {image}"),
                    });
                };
                votes.push((ii, k.label));
                let acc = sums.entry(k.family.clone()).or_insert_with(|| vec![0.0; d.values.len()]);
                if acc.len() != d.values.len() {
                    return Err(MapError::Point {
                        point: id,
                        message: "descriptor dimensions differ within a family".into(),
                    });
                }
                for (a, v) in acc.iter_mut().zip(&d.values) {
                    *a += v;
                }
            }
            let label = majority_label(&votes).unwrap_or(0);
            let descriptors = sums
                .into_iter()
                .map(|(f, v)| {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let v = if n > 0.0 { v.into_iter().map(|x| x / n).collect() } else { v };
                    (f.clone(), Descriptor::new(v, f))
                })
                .collect();
            out.push(MapPoint { id, position, label, descriptors, track });
        }
        Self::new(families, class_table, images, out)
    }

    pub fn image(&self, id: ImageId) -> Option<&DbImage> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    /// Map point observed by keypoint `kp` of image `image`, if any.
    pub fn point_of(&self, image: ImageId, kp: usize) -> Option<&MapPoint> {
        self.observation.get(&(image, kp)).map(|&p| &self.points[p])
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pixel;
    use nalgebra::Point3;

    fn image(id: ImageId, n: usize) -> DbImage {
        let fam = Family::new("a");
        DbImage {
            id,
            name: format!("db{id}"),
            width: 64,
            height: 48,
            intrinsics: Intrinsics::new(50.0, 50.0, 32.0, 24.0).unwrap(),
            pose: Pose::identity(),
            keypoints: (0..n)
                .map(|i| Keypoint {
                    pixel: Pixel::new(i as f64, 1.0),
                    score: 1.0,
                    family: fam.clone(),
                    label: (i % 3) as ClassId,
                })
                .collect(),
            descriptors: (0..n).map(|i| Descriptor::new(vec![i as f64, 1.0], fam.clone())).collect(),
            global: vec![0.0],
        }
    }

    #[test]
    fn labels_by_majority() {
        let imgs = vec![image(1, 4), image(2, 4), image(3, 4)];
        let map = Map::from_reconstruction(
            vec![Family::new("a")],
            ClassTable::default(),
            imgs,
            vec![(7, Point3::new(0.0, 0.0, 1.0), vec![(1, 1), (2, 1), (3, 2)])],
        )
        .unwrap();
        assert_eq!(map.points[0].label, 1);
        assert_eq!(map.point_of(2, 1).unwrap().id, 7);
        assert!(map.point_of(2, 2).is_none());
        assert!(map.points[0].descriptors[&Family::new("a")].is_unit(1e-12));
    }

    #[test]
    fn missing_image_names_point() {
        let err = Map::from_reconstruction(
            vec![Family::new("a")],
            ClassTable::default(),
            vec![image(1, 2)],
            vec![(42, Point3::origin(), vec![(9, 0)])],
        )
        .unwrap_err();
        assert!(matches!(err, MapError::Point { point: 42, .. }));
        assert!(err.to_string().contains("42"));
    }

    #[test]
    fn empty_map_is_valid() {
        let map = Map::new(vec![], ClassTable::default(), vec![], vec![]).unwrap();
        assert!(map.is_empty());
    }
}
