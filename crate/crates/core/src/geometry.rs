//! Camera geometry: rigid poses, pinhole intrinsics, projection,
//! triangulation and pose error metrics.
//!
//! Poses map world coordinates into the camera frame, `x_cam = R x_world + t`.
//! The pinhole model has zero skew and no distortion.

use nalgebra::{Matrix2, Matrix3, Point2, Point3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::scalar::{lit, Real};

/// A 3D point in world coordinates.
pub type WorldPoint<T> = Point3<T>;

/// Image coordinates in pixels.
pub type Pixel<T> = Point2<T>;

/// Smallest camera-frame depth accepted as "in front of the camera".
pub const MIN_DEPTH: f64 = 1e-12;

/// Orthonormality violation below which a rotation is taken as-is.
const ROTATION_EXACT_TOL: f64 = 1e-9;
/// Orthonormality violation below which a rotation is projected back onto SO(3).
const ROTATION_REPAIR_TOL: f64 = 1e-6;

/// Minimum angle between two viewing rays for triangulation (radians).
const MIN_RAY_ANGLE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {depth})")]
    CheiralityViolation { depth: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("invalid rotation matrix (orthonormality violation {violation:e})")]
    InvalidRotation { violation: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Rigid world-to-camera transform.
///
/// The rotation is held as a unit quaternion with non-negative scalar part;
/// the matrix form is derived from it so that serializing the quaternion
/// reproduces the pose exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    quaternion: UnitQuaternion<T>,
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    /// Builds a pose from a rotation matrix, validating it.
    ///
    /// Matrices within `1e-6` of orthonormal are projected onto the nearest
    /// rotation; anything worse, or with negative determinant, is rejected.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self, GeometryError> {
        let violation = orthonormality_violation(&rotation);
        let det = rotation.determinant();
        let det_err = crate::scalar::to_f64(det - T::one()).abs();
        if !violation.is_finite() || det <= T::zero() {
            return Err(GeometryError::InvalidRotation { violation });
        }
        let rotation = if violation <= ROTATION_EXACT_TOL && det_err <= ROTATION_EXACT_TOL {
            rotation
        } else if violation < ROTATION_REPAIR_TOL {
            nearest_rotation(&rotation)
        } else {
            return Err(GeometryError::InvalidRotation { violation });
        };
        let quaternion = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rotation));
        Ok(Self::from_unit_quaternion(quaternion, translation))
    }

    pub fn from_unit_quaternion(quaternion: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        let quaternion = canonical(quaternion);
        Self { rotation: quaternion.to_rotation_matrix().into_inner(), quaternion, translation }
    }

    /// Builds a pose from raw quaternion components `(w, x, y, z)`.
    ///
    /// Components already normalized to within `1e-12` are used verbatim, so a
    /// quaternion written by [`Pose::quaternion_wxyz`] reloads bit-exactly.
    pub fn from_quaternion_wxyz(wxyz: [T; 4], translation: Vector3<T>) -> Result<Self, GeometryError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let norm = q.norm();
        let violation = crate::scalar::to_f64(norm - T::one()).abs();
        if !violation.is_finite() || norm <= lit(1e-6) {
            return Err(GeometryError::InvalidRotation { violation });
        }
        let unit = if violation <= 1e-12 { UnitQuaternion::new_unchecked(q) } else { UnitQuaternion::new_normalize(q) };
        Ok(Self::from_unit_quaternion(unit, translation))
    }

    pub fn identity() -> Self {
        Self::from_unit_quaternion(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Pose of a camera with world-to-camera rotation `rotation` whose
    /// optical center sits at `center`.
    pub fn from_center(rotation: UnitQuaternion<T>, center: &Point3<T>) -> Self {
        let translation = -(rotation * center.coords);
        Self::from_unit_quaternion(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn unit_quaternion(&self) -> &UnitQuaternion<T> {
        &self.quaternion
    }

    /// Quaternion components `(w, x, y, z)` with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [T; 4] {
        let q = self.quaternion.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    /// Optical center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Point3<T> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Maps a world point into the camera frame.
    #[inline]
    pub fn transform(&self, point: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * point.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let inv = self.quaternion.inverse();
        Self::from_unit_quaternion(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::from_unit_quaternion(
            self.quaternion * other.quaternion,
            self.quaternion * other.translation + self.translation,
        )
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> Pose<U> {
        let [w, x, y, z] = self.quaternion_wxyz();
        let q = Quaternion::new(
            lit::<U>(crate::scalar::to_f64(w)),
            lit(crate::scalar::to_f64(x)),
            lit(crate::scalar::to_f64(y)),
            lit(crate::scalar::to_f64(z)),
        );
        let t = self.translation.map(|v| lit::<U>(crate::scalar::to_f64(v)));
        Pose::from_unit_quaternion(UnitQuaternion::new_normalize(q), t)
    }
}

fn canonical<T: Real>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    if q.quaternion().w < T::zero() {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

fn orthonormality_violation<T: Real>(r: &Matrix3<T>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    gram.iter().map(|v| crate::scalar::to_f64(*v).abs()).fold(0.0, f64::max)
}

/// Projects a 3×3 matrix onto SO(3) in the Frobenius sense.
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    u * d * v_t
}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self, GeometryError> {
        if !(fx > T::zero()) || !(fy > T::zero()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !cx.is_finite() || !cy.is_finite() || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics("non-finite parameter"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, o)
    }

    /// Camera-frame point to pixel. The caller guarantees `z > 0`.
    #[inline]
    pub fn project_camera(&self, p: &Point3<T>) -> Pixel<T> {
        Pixel::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Normalized image coordinates `K⁻¹ [u v 1]ᵀ`.
    #[inline]
    pub fn unproject(&self, pixel: &Pixel<T>) -> Vector3<T> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, T::one())
    }

    /// Unit bearing vector through a pixel.
    #[inline]
    pub fn bearing(&self, pixel: &Pixel<T>) -> Vector3<T> {
        self.unproject(pixel).normalize()
    }
}

/// Projects a world point, returning the pixel and the camera-frame depth.
pub fn project<T: Real>(
    point: &WorldPoint<T>,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
) -> Result<(Pixel<T>, T), GeometryError> {
    let pc = pose.transform(point);
    if !(pc.z > lit(MIN_DEPTH)) {
        return Err(GeometryError::CheiralityViolation { depth: crate::scalar::to_f64(pc.z) });
    }
    Ok((k.project_camera(&pc), pc.z))
}

/// Camera-frame point on the ray through `pixel` at depth `depth`.
pub fn back_project<T: Real>(pixel: &Pixel<T>, depth: T, k: &Intrinsics<T>) -> Point3<T> {
    Point3::from(k.unproject(pixel) * depth)
}

/// Distance in pixels between an observation and the projection of its world
/// point. Points behind the camera yield `+∞`.
#[inline]
pub fn reprojection_error<T: Real>(observed: &Pixel<T>, point: &WorldPoint<T>, pose: &Pose<T>, k: &Intrinsics<T>) -> T {
    match project(point, pose, k) {
        Ok((px, _)) => (px - observed).norm(),
        Err(_) => lit(f64::INFINITY),
    }
}

/// Translation distance between camera centers and rotation angle in degrees.
pub fn pose_delta<T: Real>(a: &Pose<T>, b: &Pose<T>) -> (T, T) {
    let trans = (a.center() - b.center()).norm();
    let rel = a.unit_quaternion() * b.unit_quaternion().inverse();
    let half = rel.imag().norm().atan2(rel.w.abs());
    let deg = (half * lit(360.0) / T::pi()).clamp(T::zero(), lit(180.0));
    (trans, deg)
}

/// Midpoint triangulation of two viewing rays.
pub fn triangulate<T: Real>(
    pix_a: &Pixel<T>,
    pose_a: &Pose<T>,
    pix_b: &Pixel<T>,
    pose_b: &Pose<T>,
    k: &Intrinsics<T>,
) -> Result<WorldPoint<T>, GeometryError> {
    let ca = pose_a.center();
    let cb = pose_b.center();
    let baseline = cb - ca;
    let scale = ca.coords.norm().max(cb.coords.norm()).max(T::one());
    if baseline.norm() <= scale * lit(1e-12) {
        return Err(GeometryError::DegenerateGeometry("zero baseline"));
    }
    let da = pose_a.rotation().transpose() * k.bearing(pix_a);
    let db = pose_b.rotation().transpose() * k.bearing(pix_b);
    let angle = da.cross(&db).norm().atan2(da.dot(&db));
    if angle.abs() <= lit(MIN_RAY_ANGLE) {
        return Err(GeometryError::DegenerateGeometry("parallel viewing rays"));
    }
    // Minimize |ca + s da - (cb + r db)| over (s, r).
    let m = Matrix2::new(da.dot(&da), -da.dot(&db), da.dot(&db), -db.dot(&db));
    let rhs = Vector2::new(baseline.dot(&da), baseline.dot(&db));
    let sol = m.lu().solve(&rhs).ok_or(GeometryError::DegenerateGeometry("parallel viewing rays"))?;
    let pa = ca + da * sol.x;
    let pb = cb + db * sol.y;
    Ok(Point3::from((pa.coords + pb.coords) * lit::<T>(0.5)))
}
