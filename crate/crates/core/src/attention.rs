//! Attention-stack aggregation into object-centric importance.
//!
//! A target model's per-layer, per-head causal attention over the sequence
//! `[visual (3n) | prompt (m) | generated (t)]` is averaged into one matrix,
//! then read out three ways:
//!
//! * self importance: masked column means of the visual-visual block,
//! * prompt importance: column means of the prompt-visual block,
//! * text importance: confidence-weighted column means of the
//!   generated-visual block.
//!
//! The three vectors are summed per visual token, each object's token
//! triplet is mean-pooled, and the result is normalized onto the simplex.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceMap;

/// Row sums must match one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Visual tokens per object: identifier, 3D and 2D embeddings.
pub const TOKENS_PER_OBJECT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub n_objects: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
}

impl Segmentation {
    pub fn new(n_objects: usize, prompt_len: usize, gen_len: usize) -> Self {
        Self {
            n_objects,
            prompt_len,
            gen_len,
        }
    }

    pub fn visual_len(&self) -> usize {
        TOKENS_PER_OBJECT * self.n_objects
    }

    pub fn seq_len(&self) -> usize {
        self.visual_len() + self.prompt_len + self.gen_len
    }
}

/// Causal row-stochastic attention for every layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    segmentation: Segmentation,
    confidences: Vec<f64>,
    /// `layers * heads` square matrices, row-major, layer-major then head.
    matrices: Vec<f64>,
}

impl AttentionStack {
    /// Builds a stack and checks causality, row sums and shapes.
    pub fn new(
        layers: usize,
        heads: usize,
        segmentation: Segmentation,
        confidences: Vec<f64>,
        matrices: Vec<f64>,
    ) -> Result<Self> {
        let stack = Self {
            layers,
            heads,
            segmentation,
            confidences,
            matrices,
        };
        stack.validate()?;
        Ok(stack)
    }

    fn validate(&self) -> Result<()> {
        let size = self.segmentation.seq_len();
        let expected = self.layers * self.heads * size * size;
        if self.matrices.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "expected {expected} attention entries for L={} H={} size={size}, got {}",
                self.layers,
                self.heads,
                self.matrices.len()
            )));
        }
        if self.confidences.len() != self.segmentation.gen_len {
            return Err(Error::DimensionMismatch(format!(
                "{} confidences for {} generated tokens",
                self.confidences.len(),
                self.segmentation.gen_len
            )));
        }
        if let Some(c) = self
            .confidences
            .iter()
            .find(|c| !(**c > 0.0 && **c <= 1.0))
        {
            return Err(Error::InvalidStack(format!("confidence {c} outside (0, 1]")));
        }
        for layer in 0..self.layers {
            for head in 0..self.heads {
                let m = self.matrix(layer, head);
                for (i, row) in m.rows().into_iter().enumerate() {
                    let mut sum = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::InvalidStack(format!(
                                "entry ({i},{j}) = {v} at layer {layer} head {head}"
                            )));
                        }
                        if j > i && v != 0.0 {
                            return Err(Error::InvalidStack(format!(
                                "non-causal entry ({i},{j}) at layer {layer} head {head}"
                            )));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::InvalidStack(format!(
                            "row {i} sums to {sum} at layer {layer} head {head}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn segmentation(&self) -> Segmentation {
        self.segmentation
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn raw(&self) -> &[f64] {
        &self.matrices
    }

    pub fn matrix(&self, layer: usize, head: usize) -> ArrayView2<'_, f64> {
        let size = self.segmentation.seq_len();
        let off = (layer * self.heads + head) * size * size;
        ArrayView2::from_shape((size, size), &self.matrices[off..off + size * size])
            .expect("validated shape")
    }

    /// Serializes into the JSON interchange object.
    pub fn to_json(&self) -> StackJson {
        StackJson {
            layers: self.layers,
            heads: self.heads,
            n: self.segmentation.n_objects,
            m: self.segmentation.prompt_len,
            t: self.segmentation.gen_len,
            confidences: self.confidences.clone(),
            layout: ROW_MAJOR.to_string(),
            matrices: self.matrices.clone(),
        }
    }

    pub fn from_json(json: StackJson) -> Result<Self> {
        check_layout(&json.layout)?;
        Self::new(
            json.layers,
            json.heads,
            Segmentation::new(json.n, json.m, json.t),
            json.confidences,
            json.matrices,
        )
    }

    /// Writes raw little-endian `f64` matrices to `data_path` and a JSON
    /// manifest describing them to `manifest_path`.
    pub fn write_binary(&self, data_path: &Path, manifest_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.matrices.len() * 8);
        for v in &self.matrices {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(data_path)?.write_all(&bytes)?;
        let manifest = StackManifest {
            layers: self.layers,
            heads: self.heads,
            n: self.segmentation.n_objects,
            m: self.segmentation.prompt_len,
            t: self.segmentation.gen_len,
            confidences: self.confidences.clone(),
            layout: ROW_MAJOR.to_string(),
            dtype: F64_LE.to_string(),
            data_file: data_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            entries: self.matrices.len(),
        };
        fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a stack written by [`AttentionStack::write_binary`]. The data
    /// file is resolved relative to the manifest's directory.
    pub fn read_binary(manifest_path: &Path) -> Result<Self> {
        let manifest: StackManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        check_layout(&manifest.layout)?;
        if manifest.dtype != F64_LE {
            return Err(Error::SchemaMismatch(format!("dtype {}", manifest.dtype)));
        }
        let data_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.data_file);
        let mut bytes = Vec::new();
        fs::File::open(data_path)?.read_to_end(&mut bytes)?;
        if bytes.len() != manifest.entries * 8 {
            return Err(Error::SchemaMismatch(format!(
                "data file holds {} bytes, manifest declares {} entries",
                bytes.len(),
                manifest.entries
            )));
        }
        let matrices = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(
            manifest.layers,
            manifest.heads,
            Segmentation::new(manifest.n, manifest.m, manifest.t),
            manifest.confidences,
            matrices,
        )
    }
}

const ROW_MAJOR: &str = "row-major";
const F64_LE: &str = "f64-le";

fn check_layout(layout: &str) -> Result<()> {
    if layout != ROW_MAJOR {
        return Err(Error::SchemaMismatch(format!("layout {layout}")));
    }
    Ok(())
}

/// JSON form of an [`AttentionStack`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackJson {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub confidences: Vec<f64>,
    pub layout: String,
    pub matrices: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StackManifest {
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "H")]
    heads: usize,
    n: usize,
    m: usize,
    t: usize,
    confidences: Vec<f64>,
    layout: String,
    dtype: String,
    data_file: String,
    entries: usize,
}

/// Per-visual-token importance before pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScores {
    pub self_scores: Vec<f64>,
    pub prompt_scores: Vec<f64>,
    pub text_scores: Vec<f64>,
}

impl ComponentScores {
    /// Element-wise sum of the three components.
    pub fn global(&self) -> Vec<f64> {
        self.self_scores
            .iter()
            .zip(&self.prompt_scores)
            .zip(&self.text_scores)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }
}

/// Uniform mean over all layers and heads.
pub fn aggregate_mean(stack: &AttentionStack) -> Result<Array2<f64>> {
    let count = stack.layers * stack.heads;
    if count == 0 {
        return Err(Error::EmptyStack);
    }
    let size = stack.segmentation.seq_len();
    let mut acc = Array2::<f64>::zeros((size, size));
    for layer in 0..stack.layers {
        for head in 0..stack.heads {
            acc += &stack.matrix(layer, head);
        }
    }
    acc /= count as f64;
    Ok(acc)
}

/// Masked column means over the top-left `3n x 3n` block.
pub fn self_importance(mean: ArrayView2<'_, f64>, n_objects: usize) -> Result<Vec<f64>> {
    masked_column_means(mean, TOKENS_PER_OBJECT * n_objects)
}

/// Masked column means over the top-left `v x v` block.
///
/// Column `j` (0-based) averages rows `j..v`, i.e. `v - j` entries, the rows
/// allowed to see token `j` under the causal mask.
pub fn masked_column_means(mean: ArrayView2<'_, f64>, v: usize) -> Result<Vec<f64>> {
    if mean.nrows() < v || mean.ncols() < v {
        return Err(Error::DimensionMismatch(format!(
            "need a {v}x{v} visual block, matrix is {}x{}",
            mean.nrows(),
            mean.ncols()
        )));
    }
    Ok((0..v)
        .map(|j| {
            let col = mean.slice(s![j..v, j]);
            col.sum() / (v - j) as f64
        })
        .collect())
}

/// Column means of the `m x 3n` prompt-to-visual block.
pub fn prompt_importance(block: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let m = block.nrows();
    if m == 0 {
        return Err(Error::EmptyPrompt);
    }
    Ok(block
        .columns()
        .into_iter()
        .map(|c| c.sum() / m as f64)
        .collect())
}

/// Confidence-weighted column means of the `t x 3n` generated-to-visual block.
pub fn text_importance(block: ArrayView2<'_, f64>, confidences: &[f64]) -> Result<Vec<f64>> {
    let t = block.nrows();
    if t == 0 {
        return Err(Error::EmptyGeneration);
    }
    if confidences.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "{} confidences for {t} rows",
            confidences.len()
        )));
    }
    let total: f64 = confidences.iter().sum();
    if total == 0.0 {
        return Err(Error::ZeroConfidence);
    }
    let mut out = vec![0.0; block.ncols()];
    for (row, &s) in block.rows().into_iter().zip(confidences) {
        for (o, &a) in out.iter_mut().zip(row.iter()) {
            *o += s * a;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

/// Computes the three per-token components from a stack.
pub fn component_scores(stack: &AttentionStack) -> Result<ComponentScores> {
    let seg = stack.segmentation;
    let mean = aggregate_mean(stack)?;
    let v = seg.visual_len();
    let p_end = v + seg.prompt_len;
    let self_scores = self_importance(mean.view(), seg.n_objects)?;
    let prompt_scores = prompt_importance(mean.slice(s![v..p_end, 0..v]))?;
    let text_scores = text_importance(mean.slice(s![p_end.., 0..v]), &stack.confidences)?;
    Ok(ComponentScores {
        self_scores,
        prompt_scores,
        text_scores,
    })
}

/// Arithmetic mean of each consecutive token triplet.
pub fn pool_triplets(per_token: &[f64]) -> Result<Vec<f64>> {
    if !per_token.len().is_multiple_of(TOKENS_PER_OBJECT) {
        return Err(Error::DimensionMismatch(format!(
            "{} visual tokens is not a multiple of {TOKENS_PER_OBJECT}",
            per_token.len()
        )));
    }
    Ok(per_token
        .chunks_exact(TOKENS_PER_OBJECT)
        .map(|c| c.iter().sum::<f64>() / TOKENS_PER_OBJECT as f64)
        .collect())
}

/// Sums, pools and normalizes precomputed components.
pub fn oracle_from_components(components: &ComponentScores) -> Result<ImportanceMap> {
    let pooled = pool_triplets(&components.global())?;
    ImportanceMap::normalize(&pooled)
}

/// Ground-truth object importance for one stack.
pub fn build_oracle(stack: &AttentionStack) -> Result<ImportanceMap> {
    oracle_from_components(&component_scores(stack)?)
}
