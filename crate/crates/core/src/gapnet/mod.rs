//! Lightweight importance predictor.
//!
//! Objects are embedded by early fusion (identifier + MLP over the two
//! semantic embeddings + a linear projection of box center and size). A
//! compact transformer encodes the prompt; a decoder whose layers apply
//! distance-biased self-attention over objects, cross-attention to the
//! prompt and a feed-forward block turns object states into one logit per
//! object, softmax-normalized into the predicted importance.

mod gradcheck;
mod loss;
mod model;
mod ops;
mod optim;
mod params;
mod train;

pub use gradcheck::{finite_difference_check, FdOptions, SegmentCheck};
pub use loss::{kl_divergence, loss, loss_gradient, rank_hinge, LossParts, KL_FLOOR};
pub use model::{distance_bucket, ForwardCache, GapNet, DISTANCE_BUCKETS};
pub use optim::{cosine_lr, AdamW};
pub use params::{Checkpoint, CheckpointSegment, GapParams, ParamLayout, Segment};
pub use train::{evaluate, mean_kl, rotate_about_vertical, top_k_recall, train, train_from, EvalSummary, HistoryRow, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenesim::VOCAB_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub sem3d_dim: usize,
    pub sem2d_dim: usize,
    pub vocab_size: usize,
    pub max_prompt_len: usize,
    /// Weight of the pairwise rank hinge.
    pub lambda: f64,
    /// Rank hinge margin.
    pub margin: f64,
    /// Sharpening temperature applied to targets before the KL term.
    pub temperature: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rotate each training scene about the vertical axis by a random angle
    /// every time it is visited. Queries and plants are invariant to this.
    pub rotate_augment: bool,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            sem3d_dim: 32,
            sem2d_dim: 32,
            vocab_size: VOCAB_SIZE,
            max_prompt_len: 16,
            lambda: 0.02,
            margin: 0.01,
            temperature: 0.5,
            lr: 8e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            rotate_augment: false,
        }
    }
}

impl GapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim must be a positive multiple of num_heads");
        }
        if self.ffn_dim == 0 || self.sem3d_dim == 0 || self.sem2d_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.vocab_size == 0 || self.max_prompt_len == 0 {
            return bad("vocabulary and prompt length must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.margin >= 0.0) {
            return bad("lambda and margin must be non-negative");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}
