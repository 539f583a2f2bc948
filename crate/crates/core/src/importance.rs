//! Per-object importance distributions.
//!
//! An [`ImportanceMap`] is the contract between attention aggregation, the
//! predictor network and the pruner: one non-negative score per object,
//! summing to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the simplex sum.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    scores: Vec<f64>,
}

impl ImportanceMap {
    /// Wraps scores that must already lie on the simplex.
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::NotSimplex("empty".into()));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::NotSimplex(format!("entry {bad}")));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotSimplex(format!("sum {sum}")));
        }
        Ok(Self { scores })
    }

    /// Divides non-negative raw scores by their sum.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::NotSimplex("empty".into()));
        }
        if let Some(bad) = raw.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::NotSimplex(format!("entry {bad}")));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::DegenerateAttention);
        }
        Ok(Self {
            scores: raw.iter().map(|s| s / sum).collect(),
        })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform map over zero objects");
        Self {
            scores: vec![1.0 / n as f64; n],
        }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn into_scores(self) -> Vec<f64> {
        self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Temperature sharpening: `a_i^(1/T) / sum_j a_j^(1/T)`.
    ///
    /// `T = 1` returns the input unchanged, `T < 1` concentrates mass on the
    /// largest entries. Zero entries stay zero.
    pub fn sharpen(&self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if temperature == 1.0 {
            return Ok(self.clone());
        }
        let inv = 1.0 / temperature;
        // Scale by the max first so large exponents cannot underflow everything.
        let max = self.scores.iter().cloned().fold(0.0, f64::max);
        let powered: Vec<f64> = self
            .scores
            .iter()
            .map(|&a| if a == 0.0 { 0.0 } else { (a / max).powf(inv) })
            .collect();
        Self::normalize(&powered)
    }

    /// Object indices sorted by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        descending_order(&self.scores)
    }
}

/// Permutation sorting `scores` descending; equal scores keep ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharpen_identity_at_unit_temperature() {
        let a = ImportanceMap::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(a.sharpen(1.0).unwrap(), a);
    }

    #[test]
    fn sharpen_squares_at_half_temperature() {
        let a = ImportanceMap::new(vec![0.25, 0.75]).unwrap();
        let s = a.sharpen(0.5).unwrap();
        assert!((s.scores()[0] - 0.1).abs() < 1e-15);
        assert!((s.scores()[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sharpen_keeps_uniform() {
        let a = ImportanceMap::uniform(7);
        for t in [0.1, 0.5, 2.0, 10.0] {
            let s = a.sharpen(t).unwrap();
            for v in s.scores() {
                assert!((v - 1.0 / 7.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sharpen_zero_entries_stay_zero() {
        let a = ImportanceMap::new(vec![0.0, 0.4, 0.6]).unwrap();
        let s = a.sharpen(0.3).unwrap();
        assert_eq!(s.scores()[0], 0.0);
    }

    #[test]
    fn sharpen_rejects_bad_temperature() {
        let a = ImportanceMap::uniform(2);
        assert!(a.sharpen(0.0).is_err());
        assert!(a.sharpen(-1.0).is_err());
        assert!(a.sharpen(f64::NAN).is_err());
    }

    #[test]
    fn normalize_zero_sum_is_degenerate() {
        assert!(matches!(
            ImportanceMap::normalize(&[0.0, 0.0]),
            Err(Error::DegenerateAttention)
        ));
    }

    #[test]
    fn new_rejects_off_simplex() {
        assert!(ImportanceMap::new(vec![0.5, 0.6]).is_err());
        assert!(ImportanceMap::new(vec![-0.1, 1.1]).is_err());
        assert!(ImportanceMap::new(vec![]).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let a = ImportanceMap::new(vec![0.3, 0.2, 0.3, 0.2]).unwrap();
        assert_eq!(a.ranking(), vec![0, 2, 1, 3]);
    }
}
