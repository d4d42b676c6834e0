//! Core augmentation math: geometry-aware box augmentation (neighbor convex
//! combination with a box-frame jitter fallback), Gaussian box sampling via
//! the reparametrization trick, and the modified regression target pair.

use crate::geometry::{alpha_from_theta, angle_distance, wrap_angle, Box3D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Hyperparameters for the augmentation and sampling transforms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Max neighbors used in the convex combination.
    pub k_max: usize,
    /// Neighbor interpolation radius in meters.
    pub r: f64,
    /// Orientation threshold for neighbor eligibility, radians.
    pub eps_theta: f64,
    /// Jitter bound in meters for the no-neighbor branch.
    pub d_j: f64,
    /// Gaussian spread for reparametrized sampling.
    pub alpha: f64,
    /// Per-dimension multipliers on `alpha` for (x, y, z, h, w, l, theta).
    pub per_dim_scale: [f64; 7],
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            k_max: 3,
            r: 10.0,
            eps_theta: std::f64::consts::PI / 12.0,
            d_j: 2.0,
            alpha: 0.1,
            per_dim_scale: [1.0; 7],
        }
    }
}

/// Neighbors of `b` in `pool`: within `r` meters (3D L2) and within
/// `eps_theta` of its yaw (wrapped distance). If more than `k_max` qualify,
/// `k_max` are drawn uniformly without replacement.
pub fn find_neighbors(
    b: &Box3D,
    pool: &[Box3D],
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Vec<Box3D> {
    let mut qualified: Vec<Box3D> = pool
        .iter()
        .filter(|n| {
            let d = ((n.x - b.x).powi(2) + (n.y - b.y).powi(2) + (n.z - b.z).powi(2)).sqrt();
            d < params.r && angle_distance(n.theta, b.theta) < params.eps_theta
        })
        .copied()
        .collect();
    if qualified.len() > params.k_max {
        // Partial Fisher-Yates: the first k_max slots become a uniform subset.
        for i in 0..params.k_max {
            let j = rng.gen_range(i..qualified.len());
            qualified.swap(i, j);
        }
        qualified.truncate(params.k_max);
    }
    qualified
}

/// Flat Dirichlet draw over `n` weights (uniform on the simplex).
fn sample_simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Convex combination of the source location and neighbor locations with the
/// given weights (`lambdas[0]` belongs to the source).
pub fn convex_combine(b: &Box3D, neighbors: &[Box3D], lambdas: &[f64]) -> Box3D {
    debug_assert_eq!(lambdas.len(), neighbors.len() + 1);
    let mut x = lambdas[0] * b.x;
    let mut y = lambdas[0] * b.y;
    let mut z = lambdas[0] * b.z;
    for (n, &lam) in neighbors.iter().zip(&lambdas[1..]) {
        x += lam * n.x;
        y += lam * n.y;
        z += lam * n.z;
    }
    Box3D {
        x,
        y,
        z,
        alpha: alpha_from_theta(b.theta, x, z),
        ..*b
    }
}

/// Box-frame jitter offsets: the along-length component strictly dominates
/// the across component, both bounded by `d_j`, signs randomized.
fn sample_jitter(d_j: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    loop {
        let d_across = rng.gen_range(0.0..d_j);
        let d_along = rng.gen_range(0.0..d_j);
        if d_along > 2.0 * d_across {
            let sa: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let sl: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            return (sa * d_across, sl * d_along);
        }
    }
}

/// Applies a (across, along) box-frame offset to the BEV location.
///
/// At `theta = 0` this reduces to adding the offset directly in camera frame.
pub fn apply_box_frame_offset(b: &Box3D, d_across: f64, d_along: f64) -> Box3D {
    let (s, c) = b.theta.sin_cos();
    let x = b.x + c * d_across + s * d_along;
    let z = b.z - s * d_across + c * d_along;
    Box3D {
        x,
        z,
        alpha: alpha_from_theta(b.theta, x, z),
        ..*b
    }
}

/// Geometry-aware augmentation: convex combination with same-lane neighbors
/// when any exist, otherwise a bounded box-frame jitter. Dimensions and yaw
/// are never changed; the observation angle is recomputed from the new
/// location.
pub fn geometry_aware_augment(
    b: &Box3D,
    pool: &[Box3D],
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Box3D {
    let neighbors = find_neighbors(b, pool, params, rng);
    if neighbors.is_empty() {
        if params.d_j == 0.0 {
            return *b;
        }
        let (d_across, d_along) = sample_jitter(params.d_j, rng);
        apply_box_frame_offset(b, d_across, d_along)
    } else {
        let lambdas = sample_simplex(neighbors.len() + 1, rng);
        convex_combine(b, &neighbors, &lambdas)
    }
}

/// Deterministic core of the reparametrized draw: `mu + eps * alpha * scale`
/// per component, with dimensions clamped to 0.1 m, yaw wrapped, and the
/// observation angle recomputed.
pub fn perturb_box(mu: &Box3D, eps: &[f64; 7], params: &AugmentParams) -> Box3D {
    let s = |i: usize| eps[i] * params.alpha * params.per_dim_scale[i];
    let x = mu.x + s(0);
    let z = mu.z + s(2);
    let theta = wrap_angle(mu.theta + s(6));
    Box3D {
        x,
        y: mu.y + s(1),
        z,
        h: (mu.h + s(3)).max(0.1),
        w: (mu.w + s(4)).max(0.1),
        l: (mu.l + s(5)).max(0.1),
        theta,
        alpha: alpha_from_theta(theta, x, z),
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Samples a box around `mu` with independent Gaussian noise of scale
/// `alpha * per_dim_scale` per component (reparametrization trick).
pub fn sample_box(mu: &Box3D, params: &AugmentParams, rng: &mut ChaCha8Rng) -> Box3D {
    if params.alpha == 0.0 {
        return *mu;
    }
    let mut eps = [0.0; 7];
    for e in &mut eps {
        *e = standard_normal(rng);
    }
    perturb_box(mu, &eps, params)
}

/// The regression-target pair: the ground-truth box pushed through
/// geometry-aware augmentation, and the predicted mean pushed through the
/// Gaussian draw. A regression loss between the two is the modified target.
pub fn modified_regression_pair(
    b_gt: &Box3D,
    mu_pred: &Box3D,
    pool: &[Box3D],
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> (Box3D, Box3D) {
    let b_tilde = geometry_aware_augment(b_gt, pool, params, rng);
    let b_hat = sample_box(mu_pred, params, rng);
    (b_hat, b_tilde)
}

/// Smooth-L1 over the 7 regression components (x, y, z, h, w, l, theta),
/// with the yaw difference wrapped.
pub fn smooth_l1_loss(a: &Box3D, b: &Box3D) -> f64 {
    let diffs = [
        a.x - b.x,
        a.y - b.y,
        a.z - b.z,
        a.h - b.h,
        a.w - b.w,
        a.l - b.l,
        wrap_angle(a.theta - b.theta),
    ];
    diffs
        .iter()
        .map(|&d| {
            let d = d.abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn car(x: f64, y: f64, z: f64, theta: f64) -> Box3D {
        Box3D::new(x, y, z, 1.5, 1.7, 4.0, theta)
    }

    #[test]
    fn neighbors_empty_pool() {
        let p = AugmentParams::default();
        assert!(find_neighbors(&car(0.0, 0.0, 0.0, 0.0), &[], &p, &mut rng(1)).is_empty());
    }

    #[test]
    fn neighbors_radius_filter() {
        let p = AugmentParams {
            r: 10.0,
            ..Default::default()
        };
        let b = car(0.0, 0.0, 0.0, 0.0);
        let near = car(0.0, 0.0, 5.0, 0.0);
        let far = car(0.0, 0.0, 15.0, 0.0);
        let got = find_neighbors(&b, &[near, far], &p, &mut rng(1));
        assert_eq!(got, vec![near]);
    }

    #[test]
    fn neighbors_orientation_filter() {
        let p = AugmentParams {
            eps_theta: PI / 12.0,
            ..Default::default()
        };
        let b = car(0.0, 0.0, 0.0, 0.0);
        let twisted = car(0.0, 0.0, 5.0, PI / 2.0);
        assert!(find_neighbors(&b, &[twisted], &p, &mut rng(1)).is_empty());
    }

    #[test]
    fn neighbors_orientation_wraps() {
        let p = AugmentParams {
            eps_theta: 0.3,
            ..Default::default()
        };
        let b = car(0.0, 0.0, 0.0, PI - 0.05);
        let other = car(0.0, 0.0, 5.0, -PI + 0.05);
        assert_eq!(find_neighbors(&b, &[other], &p, &mut rng(1)).len(), 1);
    }

    #[test]
    fn neighbors_subsample_is_subset() {
        let p = AugmentParams {
            k_max: 2,
            ..Default::default()
        };
        let b = car(0.0, 0.0, 0.0, 0.0);
        let pool: Vec<Box3D> = (0..6).map(|i| car(0.0, 0.0, 1.0 + i as f64, 0.0)).collect();
        let got = find_neighbors(&b, &pool, &p, &mut rng(3));
        assert_eq!(got.len(), 2);
        for g in &got {
            assert!(pool.contains(g));
        }
    }

    #[test]
    fn convex_combine_identity_weight() {
        let b = car(2.0, 1.5, 20.0, 0.2);
        let n = car(4.0, 1.5, 30.0, 0.2);
        let out = convex_combine(&b, &[n], &[1.0, 0.0]);
        assert_eq!((out.x, out.y, out.z), (b.x, b.y, b.z));
    }

    #[test]
    fn convex_combine_midpoint() {
        let b = car(2.0, 1.5, 20.0, 0.0);
        let n = car(4.0, 1.5, 30.0, 0.0);
        let out = convex_combine(&b, &[n], &[0.5, 0.5]);
        assert_eq!((out.x, out.y, out.z), (3.0, 1.5, 25.0));
        assert_eq!(out.theta, b.theta);
        assert_eq!((out.h, out.w, out.l), (b.h, b.w, b.l));
    }

    #[test]
    fn zero_jitter_is_identity() {
        let p = AugmentParams {
            d_j: 0.0,
            ..Default::default()
        };
        let b = car(1.0, 1.5, 25.0, 0.4);
        let out = geometry_aware_augment(&b, &[], &p, &mut rng(9));
        assert_eq!(out, b);
    }

    #[test]
    fn jitter_bounds_hold() {
        let p = AugmentParams {
            d_j: 2.0,
            ..Default::default()
        };
        for seed in 0..200 {
            let b = car(1.0, 1.5, 25.0, 0.0);
            let out = geometry_aware_augment(&b, &[], &p, &mut rng(seed));
            let dx = out.x - b.x;
            let dz = out.z - b.z;
            assert!(dx.abs() <= p.d_j && dz.abs() <= p.d_j);
            assert!(dz.abs() > 2.0 * dx.abs());
            assert_eq!((out.h, out.w, out.l, out.theta), (b.h, b.w, b.l, b.theta));
        }
    }

    #[test]
    fn jitter_is_box_frame() {
        // A quarter-turn heading swaps which camera axis carries the large
        // jitter component.
        let p = AugmentParams {
            d_j: 2.0,
            ..Default::default()
        };
        for seed in 0..100 {
            let b = car(1.0, 1.5, 25.0, PI / 2.0);
            let out = geometry_aware_augment(&b, &[], &p, &mut rng(seed));
            let dx = out.x - b.x;
            let dz = out.z - b.z;
            assert!(dx.abs() > 2.0 * dz.abs());
        }
    }

    #[test]
    fn sample_box_zero_alpha_identity() {
        let p = AugmentParams {
            alpha: 0.0,
            ..Default::default()
        };
        let mu = car(1.0, 1.5, 25.0, 0.4);
        assert_eq!(sample_box(&mu, &p, &mut rng(5)), mu);
    }

    #[test]
    fn perturb_box_forced_eps() {
        let p = AugmentParams {
            alpha: 0.1,
            ..Default::default()
        };
        let mu = car(1.0, 1.5, 25.0, 0.4);
        let out = perturb_box(&mu, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &p);
        assert!((out.x - (mu.x + 0.1)).abs() < 1e-12);
        assert_eq!(out.z, mu.z);
        assert_eq!(out.theta, mu.theta);
    }

    #[test]
    fn perturb_clamps_dims() {
        let p = AugmentParams {
            alpha: 10.0,
            ..Default::default()
        };
        let mu = car(1.0, 1.5, 25.0, 0.0);
        let out = perturb_box(&mu, &[0.0, 0.0, 0.0, -5.0, -5.0, -5.0, 0.0], &p);
        assert_eq!((out.h, out.w, out.l), (0.1, 0.1, 0.1));
    }

    #[test]
    fn sample_box_statistics_small() {
        let p = AugmentParams {
            alpha: 0.1,
            ..Default::default()
        };
        let mu = car(0.0, 1.5, 25.0, 0.0);
        let mut r = rng(42);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let s = sample_box(&mu, &p, &mut r);
            sum += s.x;
            sum2 += s.x * s.x;
        }
        let mean = sum / n as f64;
        let std = (sum2 / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 3.0 * 0.1 / (n as f64).sqrt() * 3.0, "mean {mean}");
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }

    #[test]
    fn modified_pair_degenerate() {
        let p = AugmentParams {
            alpha: 0.0,
            d_j: 0.0,
            ..Default::default()
        };
        let gt = car(1.0, 1.5, 25.0, 0.4);
        let mu = car(1.1, 1.5, 24.0, 0.5);
        let (b_hat, b_tilde) = modified_regression_pair(&gt, &mu, &[], &p, &mut rng(1));
        assert_eq!(b_hat, mu);
        assert_eq!(b_tilde, gt);
        assert_eq!(smooth_l1_loss(&b_hat, &b_hat), 0.0);
    }

    #[test]
    fn modified_pair_forced_loss() {
        // With forced lambda and eps the loss reduces to a hand evaluation.
        let p = AugmentParams::default();
        let gt = car(2.0, 1.5, 20.0, 0.0);
        let n = car(4.0, 1.5, 30.0, 0.0);
        let b_tilde = convex_combine(&gt, &[n], &[0.5, 0.5]);
        let mu = car(3.0, 1.5, 25.0, 0.0);
        let b_hat = perturb_box(&mu, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &p);
        // b_hat = (3.1, 1.5, 25), b_tilde = (3, 1.5, 25): only dx = 0.1.
        let expect = 0.5 * 0.1f64 * 0.1;
        assert!((smooth_l1_loss(&b_hat, &b_tilde) - expect).abs() < 1e-12);
    }

    #[test]
    fn determinism_same_seed() {
        let p = AugmentParams::default();
        let b = car(1.0, 1.5, 25.0, 0.1);
        let pool: Vec<Box3D> = (0..5).map(|i| car(0.5, 1.5, 22.0 + i as f64, 0.1)).collect();
        let a = geometry_aware_augment(&b, &pool, &p, &mut rng(77));
        let c = geometry_aware_augment(&b, &pool, &p, &mut rng(77));
        assert_eq!(a, c);
    }
}
