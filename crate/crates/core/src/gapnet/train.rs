use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{kl_divergence, LossParts};
use super::optim::{cosine_lr, AdamW};
use super::{GapNet, GapParams};
use crate::error::{Error, Result};
use crate::importance::{descending_order, ImportanceMap};
use crate::scenesim::SceneSample;

/// One line of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub kl: f64,
    pub rank: f64,
    pub total: f64,
}

impl HistoryRow {
    pub fn csv(rows: &[HistoryRow]) -> String {
        let mut out = String::from("epoch,split,kl,rank,total\n");
        for r in rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.split, r.kl, r.rank, r.total));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GapParams,
    /// Epoch 0 is the untrained network.
    pub history: Vec<HistoryRow>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        HistoryRow::csv(&self.history)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    /// Mean of the full objective against sharpened targets.
    pub loss: LossParts,
    /// Mean top-k recall against the unsharpened targets.
    pub recall: f64,
}

/// `|top_k(pred) ∩ top_k(oracle)| / k` with `k` capped at `n`.
pub fn top_k_recall(pred: &ImportanceMap, oracle: &ImportanceMap, k: usize) -> f64 {
    let k = k.min(oracle.len());
    if k == 0 {
        return 1.0;
    }
    let mut mine = descending_order(pred.scores());
    mine.truncate(k);
    let theirs = &descending_order(oracle.scores())[..k];
    mine.iter().filter(|i| theirs.contains(i)).count() as f64 / k as f64
}

fn sharpened(set: &[(SceneSample, ImportanceMap)], temperature: f64) -> Result<Vec<ImportanceMap>> {
    set.iter().map(|(_, a)| a.sharpen(temperature)).collect()
}

fn sum_parts(acc: &mut LossParts, p: &LossParts) {
    acc.kl += p.kl;
    acc.rank += p.rank;
    acc.total += p.total;
}

fn mean_parts(p: LossParts, n: usize) -> LossParts {
    let n = n.max(1) as f64;
    LossParts {
        kl: p.kl / n,
        rank: p.rank / n,
        total: p.total / n,
    }
}

/// Mean objective and top-`k` recall of `params` over `set`.
pub fn evaluate(
    net: &GapNet,
    params: &GapParams,
    set: &[(SceneSample, ImportanceMap)],
    k: usize,
) -> Result<EvalSummary> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = net.config();
    let mut parts = LossParts {
        kl: 0.0,
        rank: 0.0,
        total: 0.0,
    };
    let mut recall = 0.0;
    for (sample, oracle) in set {
        let pred = net.predict(sample, params)?;
        let target = oracle.sharpen(cfg.temperature)?;
        sum_parts(&mut parts, &super::loss::loss(&target, &pred, cfg.lambda, cfg.margin));
        recall += top_k_recall(&pred, oracle, k);
    }
    Ok(EvalSummary {
        count: set.len(),
        loss: mean_parts(parts, set.len()),
        recall: recall / set.len() as f64,
    })
}

fn history_row(epoch: usize, split: &str, p: LossParts) -> HistoryRow {
    HistoryRow {
        epoch,
        split: split.into(),
        kl: p.kl,
        rank: p.rank,
        total: p.total,
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Minibatch AdamW training with cosine decay from `net.init_params(seed)`.
///
/// Targets are sharpened once up front. Per-sample gradients are summed in
/// dataset order within each batch, so runs are bit-reproducible.
pub fn train(
    net: &GapNet,
    train_set: &[(SceneSample, ImportanceMap)],
    val_set: &[(SceneSample, ImportanceMap)],
) -> Result<TrainOutcome> {
    let cfg = net.config().clone();
    train_from(net, net.init_params(cfg.seed), train_set, val_set)
}

pub fn train_from(
    net: &GapNet,
    mut params: GapParams,
    train_set: &[(SceneSample, ImportanceMap)],
    val_set: &[(SceneSample, ImportanceMap)],
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = net.config().clone();
    let targets = sharpened(train_set, cfg.temperature)?;
    let val_targets = sharpened(val_set, cfg.temperature)?;
    let mut history = Vec::new();
    let val_loss = |params: &GapParams| -> Result<LossParts> {
        let mut acc = LossParts {
            kl: 0.0,
            rank: 0.0,
            total: 0.0,
        };
        for ((s, _), t) in val_set.iter().zip(&val_targets) {
            let pred = net.predict(s, params)?;
            sum_parts(&mut acc, &super::loss::loss(t, &pred, cfg.lambda, cfg.margin));
        }
        Ok(mean_parts(acc, val_set.len()))
    };
    let mut init = LossParts {
        kl: 0.0,
        rank: 0.0,
        total: 0.0,
    };
    for ((s, _), t) in train_set.iter().zip(&targets) {
        let pred = net.predict(s, &params)?;
        sum_parts(&mut init, &super::loss::loss(t, &pred, cfg.lambda, cfg.margin));
    }
    history.push(history_row(0, "train", mean_parts(init, train_set.len())));
    if !val_set.is_empty() {
        history.push(history_row(0, "val", val_loss(&params)?));
    }

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(params.values.len(), cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut grads = vec![0.0; params.values.len()];
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        order.shuffle(&mut rng);
        let mut acc = LossParts {
            kl: 0.0,
            rank: 0.0,
            total: 0.0,
        };
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let rotated;
                let sample = if cfg.rotate_augment {
                    rotated = rotate_about_vertical(&train_set[i].0, rng.random::<f64>() * std::f64::consts::TAU);
                    &rotated
                } else {
                    &train_set[i].0
                };
                let (_, cache) = net.forward(sample, &params)?;
                let (parts, g) = net.backward(&params, &cache, &targets[i])?;
                if !parts.total.is_finite() {
                    return Err(Error::DivergedLoss {
                        epoch,
                        value: parts.total,
                    });
                }
                sum_parts(&mut acc, &parts);
                for (dst, src) in grads.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params.values, &grads, cosine_lr(cfg.lr, step, total_steps));
            step += 1;
        }
        if !params.all_finite() {
            return Err(Error::DivergedLoss {
                epoch,
                value: f64::NAN,
            });
        }
        history.push(history_row(epoch, "train", mean_parts(acc, train_set.len())));
        if !val_set.is_empty() {
            history.push(history_row(epoch, "val", val_loss(&params)?));
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        steps: step,
    })
}

/// Copy of `sample` with every center rotated by `angle` about the z axis.
pub fn rotate_about_vertical(sample: &SceneSample, angle: f64) -> SceneSample {
    let (sin, cos) = angle.sin_cos();
    let mut out = sample.clone();
    for o in &mut out.objects {
        let [x, y, z] = o.center;
        o.center = [cos * x - sin * y, sin * x + cos * y, z];
    }
    out
}

/// Mean `KL(target || pred)` against sharpened targets.
pub fn mean_kl(net: &GapNet, params: &GapParams, set: &[(SceneSample, ImportanceMap)]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (s, a) in set {
        let pred = net.predict(s, params)?;
        total += kl_divergence(a.sharpen(net.config().temperature)?.scores(), pred.scores());
    }
    Ok(total / set.len() as f64)
}
