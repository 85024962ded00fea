//! Normalized DLT homography estimation.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::EstimationError;
use crate::geometry::Pixel;
use crate::scalar::{lit, Real};

/// Fits `H` with `dst ~ H src` to at least four correspondences.
///
/// Points are Hartley-normalized (centroid at the origin, RMS distance √2)
/// before the linear solve. The result is scaled so that `H[(2,2)] = 1`
/// whenever that entry is not vanishingly small, else to unit Frobenius norm.
pub fn estimate_homography<T: Real>(pairs: &[(Pixel<T>, Pixel<T>)]) -> Result<Matrix3<T>, EstimationError> {
    let n = pairs.len();
    if n < 4 {
        return Err(EstimationError::InsufficientSamples { needed: 4, got: n });
    }
    let src: Vec<Pixel<T>> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Pixel<T>> = pairs.iter().map(|p| p.1).collect();
    let (ts, src_n) = normalize(&src).ok_or(EstimationError::DegenerateGeometry("coincident source points"))?;
    let (td, dst_n) = normalize(&dst).ok_or(EstimationError::DegenerateGeometry("coincident target points"))?;

    if n == 4 && (has_collinear_triple(&src_n) || has_collinear_triple(&dst_n)) {
        return Err(EstimationError::DegenerateGeometry("three collinear points"));
    }

    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<T>::zeros(rows, 9);
    for (i, (s, d)) in src_n.iter().zip(&dst_n).enumerate() {
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let o = T::one();
        let r0 = 2 * i;
        let r1 = r0 + 1;
        for (c, val) in [-x, -y, -o].into_iter().enumerate() {
            a[(r0, c)] = val;
            a[(r1, c + 3)] = val;
        }
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(EstimationError::DegenerateGeometry("svd failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i].partial_cmp(&svd.singular_values[j]).unwrap_or(std::cmp::Ordering::Equal)
    });
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if !(second > largest * lit(1e-10)) {
        return Err(EstimationError::DegenerateGeometry("solution not unique"));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);

    let td_inv = td.try_inverse().ok_or(EstimationError::DegenerateGeometry("normalization"))?;
    let hm = td_inv * hn * ts;
    let frob = hm.norm();
    let h33 = hm[(2, 2)];
    let scaled = if h33.abs() > frob * lit(1e-12) { hm / h33 } else { hm / frob };
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::DegenerateGeometry("non-finite homography"));
    }
    Ok(scaled)
}

/// Applies `h` to a pixel; `None` when the point maps to infinity.
#[inline]
pub fn transfer<T: Real>(h: &Matrix3<T>, p: &Pixel<T>) -> Option<Pixel<T>> {
    let q = h * Vector3::new(p.x, p.y, T::one());
    if q.z.abs() <= lit(1e-12) {
        return None;
    }
    Some(Pixel::new(q.x / q.z, q.y / q.z))
}

/// One-sided transfer error `|H src - dst|`, `+∞` when undefined.
#[inline]
pub fn transfer_error<T: Real>(h: &Matrix3<T>, src: &Pixel<T>, dst: &Pixel<T>) -> T {
    match transfer(h, src) {
        Some(p) => (p - dst).norm(),
        None => lit(f64::INFINITY),
    }
}

fn normalize<T: Real>(pts: &[Pixel<T>]) -> Option<(Matrix3<T>, Vec<Pixel<T>>)> {
    let n: T = lit(pts.len() as f64);
    let (sx, sy) = pts.iter().fold((T::zero(), T::zero()), |(a, b), p| (a + p.x, b + p.y));
    let (mx, my) = (sx / n, sy / n);
    let ms = pts.iter().fold(T::zero(), |acc, p| acc + (p.x - mx) * (p.x - mx) + (p.y - my) * (p.y - my)) / n;
    let rms = ms.sqrt();
    if !(rms > T::zero()) {
        return None;
    }
    let s = lit::<T>(2.0).sqrt() / rms;
    let t = Matrix3::new(s, T::zero(), -s * mx, T::zero(), s, -s * my, T::zero(), T::zero(), T::one());
    let out = pts.iter().map(|p| Pixel::new(s * (p.x - mx), s * (p.y - my))).collect();
    Some((t, out))
}

fn has_collinear_triple<T: Real>(pts: &[Pixel<T>]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let a = pts[j] - pts[i];
                let b = pts[k] - pts[i];
                let cross = a.x * b.y - a.y * b.x;
                if cross.abs() <= lit::<T>(1e-9) * a.norm().max(T::one()) * b.norm().max(T::one()) {
                    return true;
                }
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square() -> Vec<Pixel<f64>> {
        vec![Pixel::new(0.0, 0.0), Pixel::new(100.0, 0.0), Pixel::new(100.0, 80.0), Pixel::new(0.0, 80.0)]
    }

    fn relative_error(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let an = a / a.norm();
        let bn = b / b.norm();
        let sign = if an.dot(&bn) < 0.0 { -1.0 } else { 1.0 };
        (an - bn * sign).norm()
    }

    #[test]
    fn identity_from_identical_points() {
        let pairs: Vec<_> = square().into_iter().map(|p| (p, p)).collect();
        let h = estimate_homography(&pairs).unwrap();
        assert!((h - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn pure_translation() {
        let pairs: Vec<_> = square().into_iter().map(|p| (p, Pixel::new(p.x + 10.0, p.y))).collect();
        let h = estimate_homography(&pairs).unwrap();
        let expected = Matrix3::new(1.0, 0.0, 10.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((h - expected).norm() < 1e-10, "{h}");
    }

    #[test]
    fn recovers_random_homography() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let truth = Matrix3::new(
                1.0 + rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-50.0..50.0),
                rng.random_range(-0.2..0.2),
                1.0 + rng.random_range(-0.2..0.2),
                rng.random_range(-50.0..50.0),
                rng.random_range(-1e-4..1e-4),
                rng.random_range(-1e-4..1e-4),
                1.0,
            );
            let pairs: Vec<_> = (0..8)
                .map(|_| {
                    let p = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                    (p, transfer(&truth, &p).unwrap())
                })
                .collect();
            let h = estimate_homography(&pairs).unwrap();
            assert!(relative_error(&h, &truth) < 1e-8);
        }
    }

    #[test]
    fn collinear_minimal_set_rejected() {
        let src = [Pixel::new(0.0, 0.0), Pixel::new(1.0, 1.0), Pixel::new(2.0, 2.0), Pixel::new(0.0, 5.0)];
        let pairs: Vec<_> = src.iter().map(|p| (*p, *p)).collect();
        assert!(matches!(estimate_homography(&pairs), Err(EstimationError::DegenerateGeometry(_))));
    }

    #[test]
    fn too_few_pairs() {
        let pairs: Vec<_> = square().into_iter().take(3).map(|p| (p, p)).collect();
        assert!(matches!(estimate_homography(&pairs), Err(EstimationError::InsufficientSamples { needed: 4, got: 3 })));
    }

    #[test]
    fn single_precision() {
        let pairs: Vec<_> = square()
            .into_iter()
            .map(|p| {
                let p = Pixel::new(p.x as f32, p.y as f32);
                (p, Pixel::new(p.x + 10.0, p.y - 3.0))
            })
            .collect();
        let h = estimate_homography(&pairs).unwrap();
        assert!((h[(0, 2)] - 10.0).abs() < 1e-3 && (h[(1, 2)] + 3.0).abs() < 1e-3);
    }
}
