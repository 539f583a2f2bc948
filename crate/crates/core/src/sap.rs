//! Sample-adaptive pruning.
//!
//! Each layer keeps the smallest-rank prefix of objects whose cumulative
//! predicted importance stays within that layer's threshold, so concentrated
//! predictions keep few objects and flat ones keep many. Objects are pruned
//! as whole token triplets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::TOKENS_PER_OBJECT;
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;

/// Slack on cumulative sums so a threshold of one always keeps everything.
pub const CUMULATIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningStrategy {
    pub thresholds: Vec<f64>,
    pub min_retain: usize,
    pub monotone_depth: bool,
}

impl PruningStrategy {
    pub fn new(thresholds: Vec<f64>, min_retain: usize, monotone_depth: bool) -> Result<Self> {
        if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidConfig(format!("threshold {t} outside [0, 1]")));
        }
        Ok(Self {
            thresholds,
            min_retain,
            monotone_depth,
        })
    }

    /// Keeps every object at every layer.
    pub fn keep_all(depth: usize) -> Self {
        Self {
            thresholds: vec![1.0; depth],
            min_retain: 1,
            monotone_depth: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.thresholds.len()
    }
}

/// Retained object sets per layer, each in descending-importance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub n_objects: usize,
    pub retained: Vec<Vec<usize>>,
}

impl PruneSchedule {
    pub fn unpruned(n_objects: usize, depth: usize) -> Self {
        Self {
            n_objects,
            retained: vec![(0..n_objects).collect(); depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.retained.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.retained.iter().map(Vec::len).collect()
    }

    /// Objects surviving the last layer.
    pub fn deepest(&self) -> Option<&[usize]> {
        self.retained.last().map(Vec::as_slice)
    }

    pub fn is_nested(&self) -> bool {
        self.retained
            .windows(2)
            .all(|w| w[1].iter().all(|o| w[0].contains(o)))
    }

    /// CSV with header `layer,retained_count,retained_object_ids`; ids are
    /// space-separated, 0-based, in rank order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,retained_count,retained_object_ids\n");
        for (layer, kept) in self.retained.iter().enumerate() {
            let ids: Vec<String> = kept.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{layer},{},{}", kept.len(), ids.join(" "));
        }
        out
    }
}

/// Largest prefix of the descending ranking whose mass is within `theta`,
/// clamped to `[min_retain, n]`.
pub fn retention_count(importance: &ImportanceMap, theta: f64, min_retain: usize) -> usize {
    let order = importance.ranking();
    retention_from_order(importance.scores(), &order, theta, min_retain)
}

fn retention_from_order(scores: &[f64], order: &[usize], theta: f64, min_retain: usize) -> usize {
    let n = scores.len();
    let mut mass = 0.0;
    let mut count = 0;
    for &i in order {
        mass += scores[i];
        if mass > theta + CUMULATIVE_TOL {
            break;
        }
        count += 1;
    }
    count.max(min_retain).min(n)
}

/// Per-layer retention under `strategy`; a fixed importance per sample.
pub fn build_schedule(importance: &ImportanceMap, strategy: &PruningStrategy) -> PruneSchedule {
    let order = importance.ranking();
    let mut prev = usize::MAX;
    let retained = strategy
        .thresholds
        .iter()
        .map(|&theta| {
            let mut r = retention_from_order(importance.scores(), &order, theta, strategy.min_retain);
            if strategy.monotone_depth {
                r = r.min(prev);
                prev = r;
            }
            order[..r].to_vec()
        })
        .collect();
    PruneSchedule {
        n_objects: importance.len(),
        retained,
    }
}

/// Fixed-ratio comparator: the first `drop_layer` layers keep everything,
/// later layers keep the top `ceil((1 - ratio) * n)` objects.
pub fn fixed_ratio_baseline(
    importance: &ImportanceMap,
    drop_layer: usize,
    ratio: f64,
    depth: usize,
    min_retain: usize,
) -> PruneSchedule {
    let n = importance.len();
    let kept = fixed_ratio_count(n, ratio, min_retain);
    let order = importance.ranking();
    let retained = (0..depth)
        .map(|layer| {
            if layer < drop_layer {
                order.clone()
            } else {
                order[..kept].to_vec()
            }
        })
        .collect();
    PruneSchedule {
        n_objects: n,
        retained,
    }
}

/// `ceil((1 - ratio) * n)` clamped to `[min_retain, n]`. A `1e-9` slack
/// absorbs products like `0.3 * 10 = 3.0000000000000004`.
pub fn fixed_ratio_count(n: usize, ratio: f64, min_retain: usize) -> usize {
    let raw = ((1.0 - ratio) * n as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.max(min_retain).min(n)
}

/// Mean fraction of visual tokens removed over all layers when a fraction
/// `ratio` is pruned after the first `drop_layer` of `depth` layers.
pub fn average_pruning_ratio(drop_layer: usize, ratio: f64, depth: usize) -> f64 {
    ratio * (depth - drop_layer) as f64 / depth as f64
}

/// Decoder dimensions of the pruned model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl Default for ModelDims {
    /// A 7B-class decoder: 32 layers, width 4096, FFN 11008.
    fn default() -> Self {
        Self {
            depth: 32,
            d_model: 4096,
            d_ff: 11008,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        Ok(())
    }

    /// FLOPs of one decoder layer over `tokens` positions:
    /// `4 N d^2` (QKVO) + `2 N^2 d` (scores and mixing) + `2 N d d_ff` (FFN).
    pub fn layer_flops(&self, tokens: usize) -> f64 {
        let n = tokens as f64;
        let d = self.d_model as f64;
        4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * self.d_ff as f64
    }
}

/// Cost model for one sample: dims plus its sequence shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub dims: ModelDims,
    pub n_objects: usize,
    /// Prompt plus generated tokens; never pruned.
    pub text_len: usize,
}

impl FlopsModel {
    pub fn new(dims: ModelDims, n_objects: usize, text_len: usize) -> Self {
        Self {
            dims,
            n_objects,
            text_len,
        }
    }

    fn visual_layer(&self, visual_tokens: usize) -> f64 {
        self.dims.layer_flops(visual_tokens + self.text_len) - self.dims.layer_flops(self.text_len)
    }

    /// Visual-attributable FLOPs summed over layers; `None` means unpruned.
    pub fn visual_flops(&self, schedule: Option<&PruneSchedule>) -> Result<f64> {
        match schedule {
            None => Ok(self.dims.depth as f64
                * self.visual_layer(TOKENS_PER_OBJECT * self.n_objects)),
            Some(s) => {
                if s.depth() != self.dims.depth || s.n_objects != self.n_objects {
                    return Err(Error::DimensionMismatch(format!(
                        "schedule of depth {} over {} objects for a model of depth {} with {} objects",
                        s.depth(),
                        s.n_objects,
                        self.dims.depth,
                        self.n_objects
                    )));
                }
                Ok(s.retained
                    .iter()
                    .map(|kept| self.visual_layer(TOKENS_PER_OBJECT * kept.len()))
                    .sum())
            }
        }
    }

    /// Same sum from explicit per-layer visual token counts.
    pub fn visual_flops_from_tokens(&self, visual_tokens: &[usize]) -> f64 {
        visual_tokens.iter().map(|&v| self.visual_layer(v)).sum()
    }

    /// `1 - pruned / unpruned` visual-attributable FLOPs.
    pub fn reduction_ratio(&self, schedule: &PruneSchedule) -> Result<f64> {
        let full = self.visual_flops(None)?;
        Ok(1.0 - self.visual_flops(Some(schedule))? / full)
    }
}

/// Retained objects drawn uniformly at random, nested across layers, with the
/// same per-layer counts as `reference`.
pub fn random_schedule_like<R: rand::Rng>(reference: &PruneSchedule, rng: &mut R) -> PruneSchedule {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..reference.n_objects).collect();
    order.shuffle(rng);
    PruneSchedule {
        n_objects: reference.n_objects,
        retained: reference
            .retained
            .iter()
            .map(|kept| order[..kept.len()].to_vec())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> ImportanceMap {
        ImportanceMap::new(v.to_vec()).unwrap()
    }

    #[test]
    fn retention_examples() {
        let a = map(&[0.5, 0.3, 0.2]);
        assert_eq!(retention_count(&a, 1.0, 1), 3);
        assert_eq!(retention_count(&a, 0.8, 1), 2);
        assert_eq!(retention_count(&a, 0.4, 1), 1);
        assert_eq!(retention_count(&a, 0.4, 0), 0);
        assert_eq!(retention_count(&a, 0.0, 1), 1);
    }

    #[test]
    fn full_threshold_keeps_all_despite_rounding() {
        let a = ImportanceMap::normalize(&[0.1; 10]).unwrap();
        assert_eq!(retention_count(&a, 1.0, 1), 10);
    }

    #[test]
    fn schedule_examples() {
        let a = map(&[0.5, 0.3, 0.2]);
        let s = build_schedule(&a, &PruningStrategy::new(vec![1.0, 0.8, 0.4], 1, true).unwrap());
        assert_eq!(s.counts(), vec![3, 2, 1]);
        assert_eq!(s.retained, vec![vec![0, 1, 2], vec![0, 1], vec![0]]);
        assert!(s.is_nested());

        let keep = build_schedule(&a, &PruningStrategy::keep_all(4));
        assert_eq!(keep, PruneSchedule::unpruned(3, 4));

        let clamped = build_schedule(&a, &PruningStrategy::new(vec![0.4, 0.8], 1, true).unwrap());
        assert_eq!(clamped.counts(), vec![1, 1]);
        let free = build_schedule(&a, &PruningStrategy::new(vec![0.4, 0.8], 1, false).unwrap());
        assert_eq!(free.counts(), vec![1, 2]);
    }

    #[test]
    fn ties_keep_lower_index() {
        let a = map(&[0.25, 0.25, 0.25, 0.25]);
        let s = build_schedule(&a, &PruningStrategy::new(vec![0.5], 1, true).unwrap());
        assert_eq!(s.retained[0], vec![0, 1]);
    }

    #[test]
    fn strategy_rejects_out_of_range() {
        assert!(PruningStrategy::new(vec![1.2], 1, true).is_err());
        assert!(PruningStrategy::new(vec![-0.1], 1, true).is_err());
    }

    #[test]
    fn pruning_ratio_reported_configurations() {
        assert!((average_pruning_ratio(16, 0.70, 32) - 0.35).abs() < 1e-9);
        assert!((average_pruning_ratio(6, 0.80, 32) - 0.65).abs() < 1e-9);
        assert!((average_pruning_ratio(2, 0.95, 32) - 0.890625).abs() < 1e-12);
    }

    #[test]
    fn fixed_ratio_examples() {
        let a = ImportanceMap::normalize(&(1..=10).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!(
            fixed_ratio_baseline(&a, 2, 0.0, 5, 1),
            PruneSchedule {
                n_objects: 10,
                retained: vec![a.ranking(); 5]
            }
        );
        let s = fixed_ratio_baseline(&a, 2, 0.95, 5, 1);
        assert_eq!(s.counts(), vec![10, 10, 1, 1, 1]);
        assert_eq!(s.retained[2], vec![9]);
        assert_eq!(fixed_ratio_baseline(&a, 0, 1.0, 3, 1).counts(), vec![1, 1, 1]);
        assert_eq!(fixed_ratio_count(10, 0.7, 1), 3);
        assert_eq!(fixed_ratio_count(10, 0.8, 1), 2);
    }

    #[test]
    fn flops_extremes() {
        let dims = ModelDims {
            depth: 3,
            d_model: 16,
            d_ff: 40,
        };
        let model = FlopsModel::new(dims, 5, 7);
        let all = PruneSchedule::unpruned(5, 3);
        assert_eq!(model.reduction_ratio(&all).unwrap(), 0.0);
        let none = PruneSchedule {
            n_objects: 5,
            retained: vec![vec![]; 3],
        };
        assert_eq!(model.reduction_ratio(&none).unwrap(), 1.0);
        assert!(model.visual_flops(Some(&PruneSchedule::unpruned(5, 2))).is_err());
    }

    #[test]
    fn ffn_term_is_linear_in_ffn_width() {
        let base = ModelDims {
            depth: 1,
            d_model: 8,
            d_ff: 20,
        };
        let wide = ModelDims { d_ff: 40, ..base };
        let n = 11;
        let ffn = |d: &ModelDims| 2.0 * n as f64 * d.d_model as f64 * d.d_ff as f64;
        let attn = base.layer_flops(n) - ffn(&base);
        assert_eq!(wide.layer_flops(n) - attn, 2.0 * ffn(&base));
    }

    #[test]
    fn schedule_csv() {
        let a = map(&[0.2, 0.5, 0.3]);
        let s = build_schedule(&a, &PruningStrategy::new(vec![1.0, 0.8], 1, true).unwrap());
        assert_eq!(
            s.to_csv(),
            "layer,retained_count,retained_object_ids\n0,3,1 2 0\n1,2,1 2\n"
        );
    }
}
