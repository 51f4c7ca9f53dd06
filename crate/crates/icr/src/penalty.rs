//! Concave penalties (MCP, SCAD): values, derivatives for the majorization
//! weights, and the closed-form group proximal maps used by the solver.

use nalgebra::DVector;

use crate::error::{IcrError, Result};
use crate::model::PenaltyFamily;

/// Penalty value at t >= 0. Flat beyond tau * lambda for both families.
pub fn penalty_value(t: f64, lambda: f64, tau: f64, family: PenaltyFamily) -> f64 {
    debug_assert!(t >= 0.0 && lambda >= 0.0 && tau > 1.0);
    match family {
        PenaltyFamily::Mcp => {
            if t <= tau * lambda {
                lambda * t - t * t / (2.0 * tau)
            } else {
                tau * lambda * lambda / 2.0
            }
        }
        PenaltyFamily::Scad => {
            if t <= lambda {
                lambda * t
            } else if t <= tau * lambda {
                (2.0 * tau * lambda * t - t * t - lambda * lambda) / (2.0 * (tau - 1.0))
            } else {
                lambda * lambda * (tau + 1.0) / 2.0
            }
        }
    }
}

/// Derivative of the penalty in t. Continuous, nonnegative, zero beyond
/// tau * lambda; at t = 0 it returns the right limit, lambda.
pub fn penalty_deriv(t: f64, lambda: f64, tau: f64, family: PenaltyFamily) -> f64 {
    debug_assert!(t >= 0.0 && lambda >= 0.0 && tau > 1.0);
    match family {
        PenaltyFamily::Mcp => (lambda - t / tau).max(0.0),
        PenaltyFamily::Scad => {
            if t <= lambda {
                lambda
            } else {
                ((tau * lambda - t) / (tau - 1.0)).max(0.0)
            }
        }
    }
}

/// Proximal map of `sigma * p(||.||_2, lambda)`: the minimizer of
/// `sigma * p(||v||, lambda) + ||z - v||^2 / 2`. The direction of `z` is
/// preserved; only its length changes.
///
/// Single-valuedness requires tau > sigma for MCP and tau > 1 + sigma for
/// SCAD; violating that is a configuration error.
pub fn group_prox(
    z: &DVector<f64>,
    sigma: f64,
    lambda: f64,
    tau: f64,
    family: PenaltyFamily,
) -> Result<DVector<f64>> {
    let scale = group_prox_scale(z.norm(), sigma, lambda, tau, family)?;
    Ok(z * scale)
}

/// Length multiplier applied by `group_prox` to a vector of the given norm.
pub(crate) fn group_prox_scale(
    norm: f64,
    sigma: f64,
    lambda: f64,
    tau: f64,
    family: PenaltyFamily,
) -> Result<f64> {
    match family {
        PenaltyFamily::Mcp => {
            if tau <= sigma {
                return Err(IcrError::InvalidArgument(format!(
                    "MCP prox needs tau > step ({tau} <= {sigma})"
                )));
            }
            Ok(if norm <= sigma * lambda {
                0.0
            } else if norm <= tau * lambda {
                (norm - sigma * lambda) / (norm * (1.0 - sigma / tau))
            } else {
                1.0
            })
        }
        PenaltyFamily::Scad => {
            if tau <= 1.0 + sigma {
                return Err(IcrError::InvalidArgument(format!(
                    "SCAD prox needs tau > 1 + step ({tau} <= 1 + {sigma})"
                )));
            }
            Ok(if norm <= (1.0 + sigma) * lambda {
                if norm <= sigma * lambda {
                    0.0
                } else {
                    1.0 - sigma * lambda / norm
                }
            } else if norm <= tau * lambda {
                ((tau - 1.0) * norm - sigma * tau * lambda) / (norm * (tau - 1.0 - sigma))
            } else {
                1.0
            })
        }
    }
}

/// Group soft threshold: prox of `w * ||.||_2`. Zero when ||z|| <= w,
/// otherwise z shrunk toward the origin by w.
pub fn weighted_group_soft(z: &DVector<f64>, w: f64) -> DVector<f64> {
    assert!(w >= 0.0, "threshold must be nonnegative");
    let norm = z.norm();
    if norm <= w {
        DVector::zeros(z.len())
    } else {
        z * (1.0 - w / norm)
    }
}

/// Euclidean projection onto the ball of radius r. This is the prox of the
/// conjugate of `w * ||.||_2` (with r = w), the Moreau complement of the
/// group soft threshold.
pub fn project_ball(z: &DVector<f64>, r: f64) -> DVector<f64> {
    assert!(r >= 0.0, "radius must be nonnegative");
    let norm = z.norm();
    if norm <= r {
        z.clone()
    } else {
        z * (r / norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mcp_values() {
        for family in [PenaltyFamily::Mcp, PenaltyFamily::Scad] {
            assert_eq!(penalty_value(0.0, 2.0, 3.0, family), 0.0);
        }
        // Plateau: tau * lambda^2 / 2 from t = 6 on.
        assert_eq!(penalty_value(6.0, 2.0, 3.0, PenaltyFamily::Mcp), 6.0);
        assert_eq!(penalty_value(100.0, 2.0, 3.0, PenaltyFamily::Mcp), 6.0);
        assert_eq!(penalty_value(3.0, 2.0, 3.0, PenaltyFamily::Mcp), 4.5);
    }

    #[test]
    fn derivative_values() {
        for family in [PenaltyFamily::Mcp, PenaltyFamily::Scad] {
            assert_eq!(penalty_deriv(0.0, 2.0, 3.0, family), 2.0);
            assert_eq!(penalty_deriv(6.0, 2.0, 3.0, family), 0.0);
            assert_eq!(penalty_deriv(7.5, 2.0, 3.0, family), 0.0);
        }
        assert_eq!(penalty_deriv(3.0, 2.0, 3.0, PenaltyFamily::Mcp), 1.0);
    }

    #[test]
    fn derivative_matches_finite_differences_away_from_kinks() {
        let (lambda, tau): (f64, f64) = (1.5, 3.0);
        let h = 1e-6;
        for family in [PenaltyFamily::Mcp, PenaltyFamily::Scad] {
            for &t in &[0.2f64, 0.8, 2.0, 3.1, 4.0, 5.5] {
                let kinks = [lambda, tau * lambda];
                if kinks.iter().any(|k| (t - k).abs() < 10.0 * h) {
                    continue;
                }
                let fd = (penalty_value(t + h, lambda, tau, family)
                    - penalty_value(t - h, lambda, tau, family))
                    / (2.0 * h);
                assert_abs_diff_eq!(penalty_deriv(t, lambda, tau, family), fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn group_prox_regions() {
        let zero = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(
            group_prox(&zero, 0.5, 2.0, 3.0, PenaltyFamily::Mcp).unwrap(),
            zero
        );

        // Beyond the plateau the prox is the identity.
        let z = DVector::from_vec(vec![10.0, 0.0]);
        assert_eq!(
            group_prox(&z, 0.3, 2.0, 3.0, PenaltyFamily::Mcp).unwrap(),
            z
        );

        // Middle region, worked by hand: (3,4) * (5-2)/(5*(1-1/3)).
        let z = DVector::from_vec(vec![3.0, 4.0]);
        let out = group_prox(&z, 1.0, 2.0, 3.0, PenaltyFamily::Mcp).unwrap();
        assert_relative_eq!(out[0], 2.7, max_relative = 1e-12);
        assert_relative_eq!(out[1], 3.6, max_relative = 1e-12);

        // Dead zone.
        let z = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(
            group_prox(&z, 1.0, 2.0, 3.0, PenaltyFamily::Mcp).unwrap().norm(),
            0.0
        );
    }

    #[test]
    fn group_prox_rejects_invalid_step() {
        let z = DVector::from_vec(vec![1.0, 1.0]);
        assert!(group_prox(&z, 3.0, 2.0, 3.0, PenaltyFamily::Mcp).is_err());
        assert!(group_prox(&z, 2.5, 2.0, 3.0, PenaltyFamily::Scad).is_err());
    }

    /// Brute-force the scalar problem min_v sigma*p(v) + (norm - v)^2/2 by a
    /// dense grid plus local refinement.
    fn brute_force_prox_norm(
        norm: f64,
        sigma: f64,
        lambda: f64,
        tau: f64,
        family: PenaltyFamily,
    ) -> f64 {
        let objective =
            |v: f64| sigma * penalty_value(v, lambda, tau, family) + 0.5 * (norm - v) * (norm - v);
        let hi = norm + tau * lambda + 1.0;
        let mut best = (f64::INFINITY, 0.0);
        let coarse = 4000;
        for i in 0..=coarse {
            let v = hi * i as f64 / coarse as f64;
            let val = objective(v);
            if val < best.0 {
                best = (val, v);
            }
        }
        let mut lo = (best.1 - hi / coarse as f64).max(0.0);
        let mut up = best.1 + hi / coarse as f64;
        for _ in 0..200 {
            let m1 = lo + (up - lo) / 3.0;
            let m2 = up - (up - lo) / 3.0;
            if objective(m1) < objective(m2) {
                up = m2;
            } else {
                lo = m1;
            }
        }
        0.5 * (lo + up)
    }

    #[test]
    fn group_prox_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for family in [PenaltyFamily::Mcp, PenaltyFamily::Scad] {
            for _ in 0..25 {
                let z = DVector::from_vec(vec![
                    rng.random::<f64>() * 8.0 - 4.0,
                    rng.random::<f64>() * 8.0 - 4.0,
                ]);
                let sigma = 0.05 + rng.random::<f64>() * 0.9;
                let lambda = 0.1 + rng.random::<f64>() * 2.0;
                let out = group_prox(&z, sigma, lambda, 3.0, family).unwrap();
                let best_norm = brute_force_prox_norm(z.norm(), sigma, lambda, 3.0, family);
                assert_abs_diff_eq!(out.norm(), best_norm, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn soft_threshold_and_projection_examples() {
        let z = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(weighted_group_soft(&z, 0.0), z);
        assert_eq!(weighted_group_soft(&z, 5.5).norm(), 0.0);
        let shrunk = weighted_group_soft(&z, 2.0);
        assert_relative_eq!(shrunk[0], 1.8, max_relative = 1e-12);
        assert_relative_eq!(shrunk[1], 2.4, max_relative = 1e-12);

        assert_eq!(project_ball(&z, 6.0), z);
        let projected = project_ball(&z, 2.0);
        assert_relative_eq!(projected[0], 1.2, max_relative = 1e-12);
        assert_relative_eq!(projected[1], 1.6, max_relative = 1e-12);
    }

    #[test]
    fn moreau_decomposition_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let u = DVector::from_fn(3, |_, _| rng.random::<f64>() * 6.0 - 3.0);
            let w = rng.random::<f64>() * 3.0;
            let nu = 0.25 + rng.random::<f64>() * 2.0;
            // u = nu * prox_{h1/nu}(u/nu) + prox_{nu h1*}(u), with h1 = w||.||.
            let recomposed = weighted_group_soft(&(&u / nu), w / nu) * nu + project_ball(&u, w);
            assert_relative_eq!(recomposed, u, epsilon = 1e-12);
        }
    }

    #[test]
    fn group_prox_never_expands() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for family in [PenaltyFamily::Mcp, PenaltyFamily::Scad] {
            for _ in 0..50 {
                let z = DVector::from_fn(3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
                let lambda = 0.2 + rng.random::<f64>();
                let out = group_prox(&z, 0.3, lambda, 3.0, family).unwrap();
                if z.norm() <= 3.0 * lambda {
                    assert!(out.norm() <= z.norm() + 1e-15);
                } else {
                    assert_eq!(out, z);
                }
            }
        }
    }
}
