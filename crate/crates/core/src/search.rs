//! Budgeted search over the threshold scale.
//!
//! Strategies form the one-parameter family `P(alpha) = alpha * P0` (each
//! threshold clamped to one). The batch cost `f(alpha)` is non-decreasing in
//! `alpha`, so bisection finds the largest feasible scale up to `epsilon`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::sap::{build_schedule, FlopsModel, ModelDims, PruningStrategy};

/// FLOPs ceiling, absolute or relative to the unpruned batch cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Flops(f64),
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epsilon: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub budget: Budget,
    pub max_iters: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            alpha_min: 0.0,
            alpha_max: 2.0,
            budget: Budget::Fraction(0.1),
            max_iters: 200,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min < self.alpha_max) || self.alpha_min < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= alpha_min < alpha_max, got [{}, {}]",
                self.alpha_min, self.alpha_max
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        let b = match self.budget {
            Budget::Flops(b) | Budget::Fraction(b) => b,
        };
        if !(b > 0.0) {
            return Err(Error::InvalidConfig("budget must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        Ok(())
    }

    /// Bisection steps needed to shrink the interval below `epsilon`.
    pub fn iteration_bound(&self) -> usize {
        ((self.alpha_max - self.alpha_min) / self.epsilon).log2().ceil().max(0.0) as usize + 1
    }
}

/// One validation sample: its predicted importance and unpruned text length.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub importance: ImportanceMap,
    pub text_len: usize,
}

/// Per-layer baseline thresholds `P0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineThresholds(pub Vec<f64>);

impl BaselineThresholds {
    /// `alpha * P0` with each threshold clamped into `[0, 1]`.
    pub fn scaled(&self, alpha: f64, min_retain: usize, monotone_depth: bool) -> PruningStrategy {
        PruningStrategy {
            thresholds: self.0.iter().map(|t| (alpha * t).clamp(0.0, 1.0)).collect(),
            min_retain,
            monotone_depth,
        }
    }
}

/// Static retention profile from which the baseline is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticProfile {
    /// Object counts per layer, clamped to each sample's object count.
    Counts(Vec<usize>),
    /// Retained fractions per layer; count is `ceil(f * n)` clamped to `[1, n]`.
    Fractions(Vec<f64>),
}

impl StaticProfile {
    /// First `drop_layer` layers keep everything, the rest keep `1 - ratio`.
    pub fn fixed_ratio(drop_layer: usize, ratio: f64, depth: usize) -> Self {
        StaticProfile::Fractions(
            (0..depth)
                .map(|k| if k < drop_layer { 1.0 } else { 1.0 - ratio })
                .collect(),
        )
    }

    pub fn depth(&self) -> usize {
        match self {
            StaticProfile::Counts(c) => c.len(),
            StaticProfile::Fractions(f) => f.len(),
        }
    }

    fn count(&self, layer: usize, n: usize) -> usize {
        match self {
            StaticProfile::Counts(c) => c[layer].min(n),
            StaticProfile::Fractions(f) => {
                let raw = (f[layer] * n as f64 - 1e-9).ceil().max(0.0) as usize;
                raw.clamp(1, n)
            }
        }
    }
}

/// `theta0_k` is the batch maximum of the top-`r0_k` cumulative predicted mass.
pub fn init_baseline_from_static(
    profile: &StaticProfile,
    batch: &[ImportanceMap],
) -> Result<BaselineThresholds> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let StaticProfile::Counts(c) = profile {
        if c.contains(&0) {
            return Err(Error::InvalidConfig("static counts must be at least 1".into()));
        }
    }
    let sorted: Vec<Vec<f64>> = batch
        .iter()
        .map(|a| a.ranking().iter().map(|&i| a.scores()[i]).collect())
        .collect();
    let thresholds = (0..profile.depth())
        .map(|k| {
            sorted
                .iter()
                .map(|s| {
                    let r = profile.count(k, s.len());
                    s[..r].iter().sum::<f64>().min(1.0)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(BaselineThresholds(thresholds))
}

/// Summed visual FLOPs of each sample's schedule under `strategy`.
pub fn batch_cost(batch: &[BatchItem], strategy: &PruningStrategy, dims: &ModelDims) -> Result<f64> {
    if strategy.depth() != dims.depth {
        return Err(Error::DimensionMismatch(format!(
            "strategy depth {} vs model depth {}",
            strategy.depth(),
            dims.depth
        )));
    }
    batch
        .iter()
        .map(|item| {
            let schedule = build_schedule(&item.importance, strategy);
            FlopsModel::new(*dims, item.importance.len(), item.text_len).visual_flops(Some(&schedule))
        })
        .sum()
}

/// Unpruned batch cost.
pub fn unpruned_cost(batch: &[BatchItem], dims: &ModelDims) -> f64 {
    batch
        .iter()
        .map(|item| {
            FlopsModel::new(*dims, item.importance.len(), item.text_len)
                .visual_flops(None)
                .expect("unpruned cost has no schedule to mismatch")
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub alpha_mid: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub alpha_star: f64,
    pub strategy: PruningStrategy,
    pub achieved_flops: f64,
    pub budget_flops: f64,
    pub unpruned_flops: f64,
    pub iterations: usize,
    pub feasible: bool,
    pub trace: Vec<TraceRow>,
}

impl SearchResult {
    /// CSV with header `iteration,alpha_low,alpha_high,cost`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,alpha_low,alpha_high,cost\n");
        for r in &self.trace {
            let _ = writeln!(out, "{},{},{},{}", r.iteration, r.alpha_low, r.alpha_high, r.cost);
        }
        out
    }
}

/// Bisection on `[alpha_min, alpha_max]` for a monotone cost `f`.
///
/// Returns the final lower bound, the iteration count and the trace. The
/// caller checks feasibility of `alpha_min` first.
pub fn bisect<F>(config: &SearchConfig, budget: f64, mut f: F) -> Result<(f64, usize, Vec<TraceRow>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut low = config.alpha_min;
    let mut high = config.alpha_max;
    let mut trace = Vec::new();
    let mut iterations = 0;
    while high - low > config.epsilon && iterations < config.max_iters {
        let mid = 0.5 * (low + high);
        let cost = f(mid)?;
        iterations += 1;
        trace.push(TraceRow {
            iteration: iterations,
            alpha_low: low,
            alpha_high: high,
            alpha_mid: mid,
            cost,
        });
        if cost <= budget {
            low = mid;
        } else {
            high = mid;
        }
    }
    Ok((low, iterations, trace))
}

/// Largest `alpha` (up to `epsilon`) with `batch_cost(alpha * P0) <= budget`.
///
/// When even `alpha_min` exceeds the budget the result is marked infeasible
/// and carries `alpha_min`.
pub fn search(
    batch: &[BatchItem],
    baseline: &BaselineThresholds,
    min_retain: usize,
    monotone_depth: bool,
    config: &SearchConfig,
    dims: &ModelDims,
) -> Result<SearchResult> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    config.validate()?;
    let unpruned = unpruned_cost(batch, dims);
    let budget = match config.budget {
        Budget::Flops(b) => b,
        Budget::Fraction(f) => f * unpruned,
    };
    let cost_at = |alpha: f64| batch_cost(batch, &baseline.scaled(alpha, min_retain, monotone_depth), dims);

    let floor_cost = cost_at(config.alpha_min)?;
    if floor_cost > budget {
        return Ok(SearchResult {
            alpha_star: config.alpha_min,
            strategy: baseline.scaled(config.alpha_min, min_retain, monotone_depth),
            achieved_flops: floor_cost,
            budget_flops: budget,
            unpruned_flops: unpruned,
            iterations: 0,
            feasible: false,
            trace: Vec::new(),
        });
    }
    let (alpha_star, iterations, trace) = bisect(config, budget, cost_at)?;
    let strategy = baseline.scaled(alpha_star, min_retain, monotone_depth);
    let achieved = batch_cost(batch, &strategy, dims)?;
    Ok(SearchResult {
        alpha_star,
        strategy,
        achieved_flops: achieved,
        budget_flops: budget,
        unpruned_flops: unpruned,
        iterations,
        feasible: true,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> ImportanceMap {
        ImportanceMap::new(v.to_vec()).unwrap()
    }

    #[test]
    fn baseline_examples() {
        let uniform = ImportanceMap::uniform(4);
        let b = init_baseline_from_static(&StaticProfile::Counts(vec![2]), std::slice::from_ref(&uniform)).unwrap();
        assert!((b.0[0] - 0.5).abs() < 1e-15);

        let x = map(&[0.4, 0.2, 0.2, 0.2]);
        let y = map(&[0.5, 0.4, 0.05, 0.05]);
        let b = init_baseline_from_static(&StaticProfile::Counts(vec![2]), &[x, y]).unwrap();
        assert!((b.0[0] - 0.9).abs() < 1e-15);

        let b = init_baseline_from_static(&StaticProfile::Counts(vec![4, 9]), &[uniform]).unwrap();
        assert_eq!(b.0, vec![1.0, 1.0]);

        assert!(matches!(
            init_baseline_from_static(&StaticProfile::Counts(vec![1]), &[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn fraction_profile_counts() {
        let p = StaticProfile::fixed_ratio(2, 0.95, 4);
        assert_eq!((0..4).map(|k| p.count(k, 10)).collect::<Vec<_>>(), vec![10, 10, 1, 1]);
        let p = StaticProfile::fixed_ratio(0, 0.7, 1);
        assert_eq!(p.count(0, 10), 3);
    }

    #[test]
    fn linear_cost_matches_grid() {
        let cfg = SearchConfig {
            epsilon: 1e-6,
            alpha_min: 0.0,
            alpha_max: 1.0,
            budget: Budget::Flops(0.37),
            max_iters: 100,
        };
        let (alpha, iters, _) = bisect(&cfg, 0.37, Ok).unwrap();
        let grid = (0..=1_000_000)
            .map(|i| i as f64 / 1e6)
            .filter(|a| *a <= 0.37)
            .fold(0.0, f64::max);
        assert!((alpha - grid).abs() <= 1e-6);
        assert!((alpha - 0.37).abs() <= 1e-6);
        assert!(iters <= cfg.iteration_bound());
    }

    fn toy_batch() -> Vec<BatchItem> {
        vec![
            BatchItem {
                importance: map(&[0.6, 0.2, 0.1, 0.1]),
                text_len: 5,
            },
            BatchItem {
                importance: map(&[0.25, 0.25, 0.3, 0.2]),
                text_len: 3,
            },
        ]
    }

    fn toy_dims() -> ModelDims {
        ModelDims {
            depth: 4,
            d_model: 16,
            d_ff: 32,
        }
    }

    #[test]
    fn extreme_strategies() {
        let batch = toy_batch();
        let dims = toy_dims();
        let all = batch_cost(&batch, &PruningStrategy::keep_all(4), &dims).unwrap();
        assert_eq!(all, unpruned_cost(&batch, &dims));
        let zero = PruningStrategy::new(vec![0.0; 4], 1, true).unwrap();
        let floor = batch_cost(&batch, &zero, &dims).unwrap();
        let one_each: f64 = batch
            .iter()
            .map(|b| FlopsModel::new(dims, 4, b.text_len).visual_flops_from_tokens(&[3; 4]))
            .sum();
        assert_eq!(floor, one_each);
    }

    #[test]
    fn generous_budget_reaches_alpha_max() {
        let batch = toy_batch();
        let dims = toy_dims();
        let base = init_baseline_from_static(&StaticProfile::Counts(vec![4, 3, 2, 1]), &batch
            .iter()
            .map(|b| b.importance.clone())
            .collect::<Vec<_>>())
        .unwrap();
        let cfg = SearchConfig {
            budget: Budget::Fraction(1.0),
            ..SearchConfig::default()
        };
        let r = search(&batch, &base, 1, true, &cfg, &dims).unwrap();
        assert!(r.feasible);
        assert!(cfg.alpha_max - r.alpha_star <= cfg.epsilon);
        assert!(r.achieved_flops <= r.budget_flops);
    }

    #[test]
    fn tiny_budget_is_infeasible() {
        let batch = toy_batch();
        let dims = toy_dims();
        let base = BaselineThresholds(vec![0.5; 4]);
        let cfg = SearchConfig {
            budget: Budget::Flops(1.0),
            ..SearchConfig::default()
        };
        let r = search(&batch, &base, 1, true, &cfg, &dims).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.alpha_star, cfg.alpha_min);
    }

    #[test]
    fn config_validation() {
        let bad = SearchConfig {
            alpha_min: 1.0,
            alpha_max: 1.0,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SearchConfig {
            epsilon: 0.0,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            SearchConfig {
                epsilon: 1e-6,
                alpha_min: 0.0,
                alpha_max: 1.0,
                ..SearchConfig::default()
            }
            .iteration_bound(),
            21
        );
    }
}
