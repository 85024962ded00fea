//! Levenberg-Marquardt refinement of a camera pose on 2D-3D matches.

use nalgebra::{Matrix6, UnitQuaternion, Vector3, Vector6};

use super::EstimationError;
use crate::geometry::{Intrinsics, Pixel, Pose, WorldPoint, MIN_DEPTH};
use crate::scalar::{lit, Real};

/// Outcome of [`refine_pnp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement<T: Real> {
    pub pose: Pose<T>,
    /// Sum of squared reprojection errors at the initial pose.
    pub initial_cost: T,
    pub final_cost: T,
    pub iterations: usize,
    /// The normal equations were rank deficient; `pose` is the initial pose.
    pub singular: bool,
}

/// Minimizes the summed squared reprojection error over `matches`.
///
/// Steps are only taken when they lower the cost, so the returned cost never
/// exceeds the initial one. Matches behind the initial camera are ignored.
pub fn refine_pnp<T: Real>(
    matches: &[(Pixel<T>, WorldPoint<T>)],
    k: &Intrinsics<T>,
    initial: &Pose<T>,
    iters: usize,
) -> Result<Refinement<T>, EstimationError> {
    if matches.len() < 4 {
        return Err(EstimationError::InsufficientSamples { needed: 4, got: matches.len() });
    }
    let active: Vec<&(Pixel<T>, WorldPoint<T>)> =
        matches.iter().filter(|(_, pw)| initial.transform(pw).z > lit(MIN_DEPTH)).collect();

    let initial_cost = cost(&active, k, initial);
    let mut result =
        Refinement { pose: *initial, initial_cost, final_cost: initial_cost, iterations: 0, singular: false };
    if active.len() < 4 {
        result.singular = true;
        return Ok(result);
    }

    let mut pose = *initial;
    let mut current = initial_cost;
    let mut lambda: T = lit(1e-4);
    for it in 0..iters {
        result.iterations = it + 1;
        let (jtj, jtr) = normal_equations(&active, k, &pose);
        if it == 0 && is_rank_deficient(&jtj) {
            result.singular = true;
            return Ok(result);
        }
        let mut improved = false;
        while lambda < lit(1e12) {
            let mut damped = jtj;
            for d in 0..6 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(lit(1e-12));
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= lit(10.0);
                continue;
            };
            let candidate = apply_step(&pose, &step);
            let c = cost(&active, k, &candidate);
            if c < current {
                let rel = (current - c) / current.max(lit(1e-300));
                pose = candidate;
                current = c;
                lambda = (lambda * lit(0.1)).max(lit(1e-12));
                improved = rel > lit(1e-15) && step.norm() > lit(1e-15);
                break;
            }
            lambda *= lit(10.0);
        }
        if !improved {
            break;
        }
    }
    result.pose = pose;
    result.final_cost = current;
    Ok(result)
}

fn cost<T: Real>(matches: &[&(Pixel<T>, WorldPoint<T>)], k: &Intrinsics<T>, pose: &Pose<T>) -> T {
    let mut total = T::zero();
    for (px, pw) in matches {
        let pc = pose.transform(pw);
        if !(pc.z > lit(MIN_DEPTH)) {
            return lit(f64::INFINITY);
        }
        total += (k.project_camera(&pc) - px).norm_squared();
    }
    total
}

/// Gauss-Newton normal equations for the left perturbation
/// `R <- exp(w) R`, `t <- t + dt`, parameter order `(w, dt)`.
fn normal_equations<T: Real>(
    matches: &[&(Pixel<T>, WorldPoint<T>)],
    k: &Intrinsics<T>,
    pose: &Pose<T>,
) -> (Matrix6<T>, Vector6<T>) {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    for (px, pw) in matches {
        let rp = pose.rotation() * pw.coords;
        let pc = rp + pose.translation();
        let iz = T::one() / pc.z;
        let iz2 = iz * iz;
        let r = Vector3::new(k.fx * pc.x * iz + k.cx - px.x, k.fy * pc.y * iz + k.cy - px.y, T::zero());
        // d(pc)/d(w) = -[rp]x, d(pc)/d(dt) = I
        let du = Vector3::new(k.fx * iz, T::zero(), -k.fx * pc.x * iz2);
        let dv = Vector3::new(T::zero(), k.fy * iz, -k.fy * pc.y * iz2);
        for (row, res) in [(du, r.x), (dv, r.y)] {
            let dw = rp.cross(&row);
            let j = Vector6::new(dw.x, dw.y, dw.z, row.x, row.y, row.z);
            jtj += j * j.transpose();
            jtr += j * res;
        }
    }
    (jtj, jtr)
}

fn is_rank_deficient<T: Real>(jtj: &Matrix6<T>) -> bool {
    let eig = jtj.symmetric_eigenvalues();
    let max = eig.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let min = eig.iter().fold(lit(f64::INFINITY), |m: T, v| m.min(*v));
    !(max > T::zero()) || !(min > max * lit(1e-14))
}

fn apply_step<T: Real>(pose: &Pose<T>, step: &Vector6<T>) -> Pose<T> {
    let dq = UnitQuaternion::from_scaled_axis(Vector3::new(step[0], step[1], step[2]));
    let q = dq * pose.unit_quaternion();
    let t = pose.translation() + Vector3::new(step[3], step[4], step[5]);
    Pose::from_unit_quaternion(q, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_delta, project};
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> (Pose<f64>, Intrinsics<f64>, Vec<(Pixel<f64>, WorldPoint<f64>)>) {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let truth =
            Pose::from_center(UnitQuaternion::from_euler_angles(0.1, -0.2, 0.05), &Point3::new(0.5, -0.3, -2.0));
        let matches = (0..n)
            .map(|_| {
                let pw =
                    Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..9.0));
                (project(&pw, &truth, &k).unwrap().0, pw)
            })
            .collect();
        (truth, k, matches)
    }

    #[test]
    fn converges_from_perturbed_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (truth, k, m) = scene(&mut rng, 40);
        let dq = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.01);
        let start = Pose::from_unit_quaternion(
            dq * truth.unit_quaternion(),
            truth.translation() + Vector3::new(0.01, 0.0, 0.0),
        );
        let r = refine_pnp(&m, &k, &start, 50).unwrap();
        let (dt, dr) = pose_delta(&r.pose, &truth);
        assert!(dt < 1e-8 && dr < 1e-8, "{dt} {dr}");
        assert!(r.final_cost <= r.initial_cost);
        assert!(!r.singular);
    }

    #[test]
    fn fixed_point_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (truth, k, m) = scene(&mut rng, 20);
        let r = refine_pnp(&m, &k, &truth, 20).unwrap();
        let (dt, dr) = pose_delta(&r.pose, &truth);
        assert!(dt < 1e-12 && dr < 1e-10);
    }

    #[test]
    fn rejects_three_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (truth, k, m) = scene(&mut rng, 3);
        assert!(matches!(
            refine_pnp(&m, &k, &truth, 10),
            Err(EstimationError::InsufficientSamples { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn singular_problem_returns_initial() {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let pw = Point3::new(0.0, 0.0, 5.0);
        let px = project(&pw, &Pose::identity(), &k).unwrap().0;
        let m = vec![(px, pw); 6];
        let start = Pose::identity();
        let r = refine_pnp(&m, &k, &start, 10).unwrap();
        assert!(r.singular);
        assert_eq!(r.pose, start);
    }

    #[test]
    fn never_increases_cost_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (truth, k, mut m) = scene(&mut rng, 30);
        for (px, _) in m.iter_mut() {
            px.x += rng.random_range(-2.0..2.0);
            px.y += rng.random_range(-2.0..2.0);
        }
        let r = refine_pnp(&m, &k, &truth, 30).unwrap();
        assert!(r.final_cost <= r.initial_cost);
    }
}
