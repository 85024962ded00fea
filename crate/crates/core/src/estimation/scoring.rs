//! Inlier indicator functions used to score hypotheses.

use crate::scalar::Real;

/// Hard inlier test: `1` when `e_p < e_t`, else `0`.
///
/// Non-finite errors (the behind-camera sentinel) always score `0`.
#[inline]
pub fn indicator<T: Real>(e_p: T, e_t: T) -> T {
    if e_p < e_t {
        T::one()
    } else {
        T::zero()
    }
}

/// Soft inlier score with a shrunken threshold `mu * e_t`:
/// `1 - (e_p / (mu e_t))²` inside the band, `0` outside.
#[inline]
pub fn weighted_indicator<T: Real>(e_p: T, e_t: T, mu: T) -> T {
    let band = mu * e_t;
    if e_p.abs() < band {
        let r = e_p / band;
        T::one() - r * r
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hard_indicator_examples() {
        assert_eq!(indicator(3.0, 8.0), 1.0);
        assert_eq!(indicator(8.0, 8.0), 0.0);
        assert_eq!(indicator(f64::INFINITY, 8.0), 0.0);
        assert_eq!(indicator(f64::NAN, 8.0), 0.0);
    }

    #[test]
    fn soft_indicator_examples() {
        assert_eq!(weighted_indicator(0.0, 8.0, 1.0), 1.0);
        assert_eq!(weighted_indicator(4.0, 8.0, 1.0), 0.75);
        assert_eq!(weighted_indicator(4.0, 8.0, 0.5), 0.0);
        assert_eq!(weighted_indicator(f64::INFINITY, 8.0, 1.0), 0.0);
        assert_eq!(weighted_indicator(4.0f32, 8.0, 1.0), 0.75);
    }

    proptest! {
        #[test]
        fn unit_mu_matches_hard_indicator(e in 0.0f64..20.0, t in 0.01f64..20.0) {
            prop_assert_eq!(weighted_indicator(e, t, 1.0) > 0.0, indicator(e, t) == 1.0);
        }

        #[test]
        fn decreasing_on_support(a in 0.0f64..8.0, b in 0.0f64..8.0, mu in 0.05f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (wl, wh) = (weighted_indicator(lo, 8.0, mu), weighted_indicator(hi, 8.0, mu));
            prop_assert!(wl >= wh);
            if lo < hi && wh > 0.0 {
                prop_assert!(wl > wh);
            }
        }

        #[test]
        fn shrinking_mu_nests_support(e in 0.0f64..10.0, m1 in 0.01f64..1.0, m2 in 0.01f64..1.0) {
            let (small, large) = if m1 < m2 { (m1, m2) } else { (m2, m1) };
            if weighted_indicator(e, 8.0, small) > 0.0 {
                prop_assert!(weighted_indicator(e, 8.0, large) > 0.0);
            }
        }
    }

    #[test]
    fn continuous_at_band_edge() {
        let just_inside = 8.0 * (1.0 - 1e-9);
        assert!(weighted_indicator(just_inside, 8.0, 1.0) < 1e-8);
    }
}
