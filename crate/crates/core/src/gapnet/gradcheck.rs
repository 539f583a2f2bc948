//! Central finite-difference check of the training objective gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{GapNet, GapParams};
use crate::error::Result;
use crate::importance::ImportanceMap;
use crate::scenesim::SceneSample;

#[derive(Debug, Clone, Serialize)]
pub struct SegmentCheck {
    pub name: String,
    pub checked: usize,
    /// `||g - fd|| / max(||g||, ||fd||)` over the checked entries.
    pub rel_error: f64,
}

/// Which entries to probe and with what step.
#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub h: f64,
    /// Largest-gradient entries per segment.
    pub top: usize,
    /// Extra uniformly drawn entries per segment.
    pub random: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            top: 8,
            random: 8,
            seed: 0,
        }
    }
}

/// Compares analytic gradients with central differences, segment by segment.
pub fn finite_difference_check(
    net: &GapNet,
    params: &GapParams,
    sample: &SceneSample,
    target: &ImportanceMap,
    opts: FdOptions,
) -> Result<Vec<SegmentCheck>> {
    let FdOptions { h, top, random, seed } = opts;
    let (_, cache) = net.forward(sample, params)?;
    let (_, grad) = net.backward(params, &cache, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for seg in net.layout().segments() {
        let range = seg.range();
        let mut idx: Vec<usize> = range.clone().collect();
        idx.sort_by(|a, b| grad[*b].abs().total_cmp(&grad[*a].abs()).then(a.cmp(b)));
        idx.truncate(top);
        for _ in 0..random {
            idx.push(rng.random_range(range.clone()));
        }
        idx.sort_unstable();
        idx.dedup();
        let (mut diff, mut gn, mut fdn) = (0.0, 0.0, 0.0);
        let mut p = params.clone();
        for &i in &idx {
            let x = p.values[i];
            p.values[i] = x + h;
            let up = net.objective(sample, &p, target)?;
            p.values[i] = x - h;
            let dn = net.objective(sample, &p, target)?;
            p.values[i] = x;
            let fd = (up - dn) / (2.0 * h);
            diff += (grad[i] - fd).powi(2);
            gn += grad[i] * grad[i];
            fdn += fd * fd;
        }
        let scale = gn.sqrt().max(fdn.sqrt());
        let rel_error = if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale };
        out.push(SegmentCheck {
            name: seg.name.clone(),
            checked: idx.len(),
            rel_error,
        });
    }
    Ok(out)
}
