//! Grunert-style P3P: the three camera-to-point distances are found from the
//! law of cosines, reduced to a quartic in the distance ratio `s3 / s1`.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::EstimationError;
use crate::geometry::{reprojection_error, Intrinsics, Pixel, Pose, WorldPoint};
use crate::scalar::{epsilon, lit, Real};

/// Solves the absolute pose from three 2D-3D correspondences.
///
/// Returns every distinct real solution (at most four) that reprojects all
/// three inputs to within `1e-6` px (looser in single precision).
pub fn solve_p3p<T: Real>(
    matches: &[(Pixel<T>, WorldPoint<T>); 3],
    k: &Intrinsics<T>,
) -> Result<Vec<Pose<T>>, EstimationError> {
    let [(x1, p1), (x2, p2), (x3, p3)] = matches;

    let d12 = p2 - p1;
    let d13 = p3 - p1;
    let area = d12.cross(&d13).norm();
    if !(area > lit::<T>(1e-9) * d12.norm() * d13.norm()) {
        return Err(EstimationError::DegenerateGeometry("collinear world points"));
    }
    let pixel_scale = k.fx.max(k.fy);
    for (a, b) in [(x1, x2), (x1, x3), (x2, x3)] {
        if (a - b).norm() <= pixel_scale * lit(1e-12) {
            return Err(EstimationError::DegenerateGeometry("coincident pixels"));
        }
    }

    let j1 = k.bearing(x1);
    let j2 = k.bearing(x2);
    let j3 = k.bearing(x3);
    let cos_a = j2.dot(&j3);
    let cos_b = j1.dot(&j3);
    let cos_g = j1.dot(&j2);

    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = d12.norm_squared();

    // With s2 = u s1 and s3 = v s1, eliminating s1 leaves u = N(v) / D(v)
    // and N² - 2 cos_g N D + (1 - K) D² = 0, a quartic in v.
    let one = T::one();
    let two: T = lit(2.0);
    let r = (a2 - c2) / b2;
    let q = c2 / b2;
    let num = [r + one, -two * r * cos_b, r - one];
    let den = [two * cos_g, -two * cos_a];
    let one_minus_k = [one - q, two * q * cos_b, -q];

    let n2 = poly_mul(&num, &num);
    let nd = poly_mul(&num, &den);
    let d2 = poly_mul(&den, &den);
    let kd2 = poly_mul(&one_minus_k, &d2);
    let mut quartic = [T::zero(); 5];
    for i in 0..5 {
        let ndi = if i < nd.len() { nd[i] } else { T::zero() };
        quartic[i] = n2[i] - two * cos_g * ndi + kd2[i];
    }

    let tol = reprojection_tolerance(k);
    let mut poses: Vec<Pose<T>> = Vec::with_capacity(4);
    for v in real_roots(&quartic) {
        if !(v > T::zero()) {
            continue;
        }
        let dv = den[0] + den[1] * v;
        if dv.abs() <= lit(1e-14) {
            continue;
        }
        let u = poly_eval(&num, v) / dv;
        let base = one + v * v - two * v * cos_b;
        if !(u > T::zero()) || !(base > T::zero()) {
            continue;
        }
        let s1 = (b2 / base).sqrt();
        let dist = polish_distances(Vector3::new(s1, u * s1, v * s1), [cos_a, cos_b, cos_g], [a2, b2, c2]);
        if dist.iter().any(|s| !(*s > T::zero())) {
            continue;
        }
        let cam = [j1 * dist.x, j2 * dist.y, j3 * dist.z];
        let Some(pose) = align_triplets(&cam, &[p1.coords, p2.coords, p3.coords]) else {
            continue;
        };
        let ok = matches.iter().all(|(px, pw)| reprojection_error(px, pw, &pose, k) < tol);
        if !ok {
            continue;
        }
        let duplicate = poses.iter().any(|existing| {
            let (dt, dr) = crate::geometry::pose_delta(existing, &pose);
            dt < lit(1e-9) && dr < lit(1e-7)
        });
        if !duplicate {
            poses.push(pose);
        }
    }

    if poses.is_empty() {
        Err(EstimationError::NoSolution)
    } else {
        Ok(poses)
    }
}

fn reprojection_tolerance<T: Real>(k: &Intrinsics<T>) -> T {
    let floor: T = lit(1e-6);
    floor.max(epsilon::<T>() * k.fx.max(k.fy) * lit(1e3))
}

/// Coefficients are stored lowest degree first.
fn poly_mul<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_eval<T: Real>(coeffs: &[T], x: T) -> T {
    coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * x + c)
}

fn poly_derivative_eval<T: Real>(coeffs: &[T], x: T) -> T {
    let mut acc = T::zero();
    for (i, &c) in coeffs.iter().enumerate().skip(1).rev() {
        acc = acc * x + c * lit(i as f64);
    }
    acc
}

/// Real roots of a polynomial via companion-matrix eigenvalues, each polished
/// by a few Newton steps on the original coefficients.
fn real_roots<T: Real>(coeffs: &[T]) -> Vec<T> {
    let scale = coeffs.iter().fold(T::zero(), |m, c| m.max(c.abs()));
    if !(scale > T::zero()) {
        return Vec::new();
    }
    let mut degree = coeffs.len() - 1;
    while degree > 0 && coeffs[degree].abs() <= scale * lit(1e-14) {
        degree -= 1;
    }
    if degree == 0 {
        return Vec::new();
    }
    let c = &coeffs[..=degree];
    let lead = c[degree];
    let mut companion = DMatrix::<T>::zeros(degree, degree);
    for i in 0..degree {
        companion[(0, i)] = -c[degree - 1 - i] / lead;
        if i + 1 < degree {
            companion[(i + 1, i)] = T::one();
        }
    }
    let eig = companion.complex_eigenvalues();
    let mut roots = Vec::with_capacity(degree);
    for z in eig.iter() {
        if z.im.abs() > lit::<T>(1e-6) * T::one().max(z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let f = poly_eval(c, x);
            let df = poly_derivative_eval(c, x);
            if df == T::zero() {
                break;
            }
            let next = x - f / df;
            if !next.is_finite() || poly_eval(c, next).abs() > f.abs() {
                break;
            }
            x = next;
        }
        roots.push(x);
    }
    roots
}

/// Gauss-Newton on the three law-of-cosines equations.
fn polish_distances<T: Real>(mut s: Vector3<T>, cos: [T; 3], sq: [T; 3]) -> Vector3<T> {
    let two: T = lit(2.0);
    let [ca, cb, cg] = cos;
    let residual = |s: &Vector3<T>| {
        Vector3::new(
            s.y * s.y + s.z * s.z - two * s.y * s.z * ca - sq[0],
            s.x * s.x + s.z * s.z - two * s.x * s.z * cb - sq[1],
            s.x * s.x + s.y * s.y - two * s.x * s.y * cg - sq[2],
        )
    };
    let mut f = residual(&s);
    for _ in 0..5 {
        let jac = Matrix3::new(
            T::zero(),
            two * (s.y - s.z * ca),
            two * (s.z - s.y * ca),
            two * (s.x - s.z * cb),
            T::zero(),
            two * (s.z - s.x * cb),
            two * (s.x - s.y * cg),
            two * (s.y - s.x * cg),
            T::zero(),
        );
        let Some(step) = jac.lu().solve(&f) else { break };
        let next = s - step;
        let fn_ = residual(&next);
        if !(fn_.norm() < f.norm()) {
            break;
        }
        s = next;
        f = fn_;
    }
    s
}

/// Rigid transform mapping the world triplet onto the camera triplet.
fn align_triplets<T: Real>(cam: &[Vector3<T>; 3], world: &[Vector3<T>; 3]) -> Option<Pose<T>> {
    let frame = |p: &[Vector3<T>; 3]| -> Option<Matrix3<T>> {
        let e1 = (p[1] - p[0]).try_normalize(T::zero())?;
        let n = (p[1] - p[0]).cross(&(p[2] - p[0])).try_normalize(T::zero())?;
        let e2 = n.cross(&e1);
        Some(Matrix3::from_columns(&[e1, e2, n]))
    };
    let fc = frame(cam)?;
    let fw = frame(world)?;
    let rotation = fc * fw.transpose();
    let third: T = lit(1.0 / 3.0);
    let cc = (cam[0] + cam[1] + cam[2]) * third;
    let cw = (world[0] + world[1] + world[2]) * third;
    let translation = cc - rotation * cw;
    Pose::new(rotation, translation).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_delta, project};
    use nalgebra::{Point3, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics<f64> {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn contains(poses: &[Pose<f64>], truth: &Pose<f64>, tol_t: f64, tol_r: f64) -> bool {
        poses.iter().any(|p| {
            let (dt, dr) = pose_delta(p, truth);
            dt < tol_t && dr < tol_r
        })
    }

    #[test]
    fn recovers_generating_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = k();
        let mut hits = 0;
        for _ in 0..300 {
            let q = UnitQuaternion::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            let truth = Pose::from_center(
                q,
                &Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            );
            let inv = truth.inverse();
            let mut m = [(Pixel::origin(), Point3::origin()); 3];
            for slot in m.iter_mut() {
                let px = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                let depth = rng.random_range(2.0..20.0);
                let pc = crate::geometry::back_project(&px, depth, &k);
                *slot = (px, inv.transform(&pc));
            }
            if let Ok(sols) = solve_p3p(&m, &k) {
                assert!(sols.len() <= 4);
                for s in &sols {
                    for (px, pw) in &m {
                        assert!(reprojection_error(px, pw, s, &k) < 1e-6);
                    }
                }
                if contains(&sols, &truth, 1e-6, 1e-6) {
                    hits += 1;
                }
            }
        }
        assert!(hits >= 297, "only {hits}/300 recovered");
    }

    #[test]
    fn equilateral_identity_case() {
        let k = k();
        let r = 1.0;
        let pts = [0.0f64, 120.0, 240.0].map(|deg: f64| {
            let a = deg.to_radians();
            Point3::new(r * a.cos(), r * a.sin(), 4.0)
        });
        let pose = Pose::identity();
        let m = pts.map(|p| (project(&p, &pose, &k).unwrap().0, p));
        let sols = solve_p3p(&m, &k).unwrap();
        assert!(contains(&sols, &pose, 1e-9, 1e-7));
    }

    #[test]
    fn collinear_points_rejected() {
        let k = k();
        let pose = Pose::identity();
        let pts = [Point3::new(0.0, 0.0, 4.0), Point3::new(1.0, 0.0, 5.0), Point3::new(2.0, 0.0, 6.0)];
        let m = pts.map(|p| (project(&p, &pose, &k).unwrap().0, p));
        assert_eq!(solve_p3p(&m, &k).unwrap_err(), EstimationError::DegenerateGeometry("collinear world points"));
    }

    #[test]
    fn single_precision_solves() {
        let k = Intrinsics::<f32>::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let pose = Pose::<f32>::identity();
        let pts = [Point3::new(-1.0f32, -0.5, 5.0), Point3::new(1.2, -0.3, 6.0), Point3::new(0.1, 1.1, 4.5)];
        let m = pts.map(|p| (project(&p, &pose, &k).unwrap().0, p));
        let sols = solve_p3p(&m, &k).unwrap();
        assert!(sols.iter().any(|s| pose_delta(s, &pose).0 < 1e-2));
    }

    #[test]
    fn quartic_roots_of_known_polynomial() {
        // (x-1)(x-2)(x+3)(x-0.5) expanded, lowest degree first.
        let c = poly_mul(&poly_mul(&[-1.0, 1.0], &[-2.0, 1.0]), &poly_mul(&[3.0, 1.0], &[-0.5, 1.0]));
        let mut roots: Vec<f64> = real_roots(&c);
        roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected = [-3.0, 0.5, 1.0, 2.0];
        assert_eq!(roots.len(), 4);
        for (r, e) in roots.iter().zip(expected) {
            assert!((r - e).abs() < 1e-12);
        }
    }
}
