use serde::{Deserialize, Serialize};

use crate::importance::ImportanceMap;

/// Floor applied to predicted probabilities inside the logarithm.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub kl: f64,
    /// Unweighted hinge sum.
    pub rank: f64,
    /// `kl + lambda * rank`.
    pub total: f64,
}

/// `KL(a || a_hat)`; zero-mass entries of `a` contribute nothing.
pub fn kl_divergence(a: &[f64], a_hat: &[f64]) -> f64 {
    a.iter()
        .zip(a_hat)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.max(KL_FLOOR).ln()))
        .sum()
}

/// Sum over ordered pairs with `a_i > a_j` of `max(0, a_hat_j - a_hat_i + margin)`.
pub fn rank_hinge(a: &[f64], a_hat: &[f64], margin: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            if a[i] > a[j] {
                total += (a_hat[j] - a_hat[i] + margin).max(0.0);
            }
        }
    }
    total
}

pub fn loss(a: &ImportanceMap, a_hat: &ImportanceMap, lambda: f64, margin: f64) -> LossParts {
    let kl = kl_divergence(a.scores(), a_hat.scores());
    let rank = rank_hinge(a.scores(), a_hat.scores(), margin);
    LossParts {
        kl,
        rank,
        total: kl + lambda * rank,
    }
}

/// Gradient of [`loss`] with respect to `a_hat` (as a free vector).
pub fn loss_gradient(a: &ImportanceMap, a_hat: &ImportanceMap, lambda: f64, margin: f64) -> Vec<f64> {
    let (a, q) = (a.scores(), a_hat.scores());
    let mut g: Vec<f64> = a
        .iter()
        .zip(q)
        .map(|(p, q)| if *p > 0.0 && *q > KL_FLOOR { -p / q } else { 0.0 })
        .collect();
    if lambda != 0.0 {
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] > a[j] && q[j] - q[i] + margin > 0.0 {
                    g[j] += lambda;
                    g[i] -= lambda;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> ImportanceMap {
        ImportanceMap::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_spot_value() {
        let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
        let hand = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - hand).abs() < 1e-15);
        assert!((kl - 0.143841).abs() < 1e-5);
    }

    #[test]
    fn hinge_spot_value() {
        assert!((rank_hinge(&[0.7, 0.3], &[0.4, 0.5], 0.05) - 0.15).abs() < 1e-12);
        let parts = loss(&map(&[0.7, 0.3]), &map(&[0.5, 0.5]), 1.0, 0.05);
        assert!((parts.rank - 0.05).abs() < 1e-12);
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let a = map(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(loss(&a, &a, 0.02, 0.0).total, 0.0);
    }

    #[test]
    fn ties_contribute_nothing() {
        assert_eq!(rank_hinge(&[0.5, 0.5], &[0.9, 0.1], 0.1), 0.0);
    }

    #[test]
    fn floor_keeps_kl_finite() {
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_finite());
    }

    #[test]
    fn gradient_matches_difference() {
        let a = map(&[0.5, 0.3, 0.2]);
        let q = [0.2, 0.45, 0.35];
        let g = loss_gradient(&a, &map(&q), 0.7, 0.05);
        let f = |v: &[f64]| kl_divergence(a.scores(), v) + 0.7 * rank_hinge(a.scores(), v, 0.05);
        for i in 0..3 {
            let (mut up, mut dn) = (q, q);
            up[i] += 1e-7;
            dn[i] -= 1e-7;
            let fd = (f(&up) - f(&dn)) / 2e-7;
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }
}
