//! Flat parameter storage with a named-segment index.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// How a segment is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

/// Accumulates segments together with their initializers.
#[derive(Debug, Default)]
pub(crate) struct LayoutBuilder {
    layout: ParamLayout,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    pub(crate) fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        let seg = Segment {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.layout.total,
        };
        self.layout.total += seg.len();
        self.layout.segments.push(seg);
        self.inits.push(init);
        self.layout.segments.len() - 1
    }

    pub(crate) fn finish(self) -> (ParamLayout, Vec<Init>) {
        (self.layout, self.inits)
    }
}

impl ParamLayout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segment(&self, id: usize) -> &Segment {
        &self.segments[id]
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Segments cover `0..total` contiguously without overlap.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for s in &self.segments {
            if s.offset != next {
                return false;
            }
            next += s.len();
        }
        next == self.total
    }

    pub(crate) fn initialize(&self, inits: &[Init], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.total];
        for (seg, init) in self.segments.iter().zip(inits) {
            let slot = &mut values[seg.range()];
            match *init {
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    for v in slot {
                        *v = dist.sample(&mut rng);
                    }
                }
            }
        }
        values
    }

    pub(crate) fn mat<'a>(&self, data: &'a [f64], id: usize) -> ArrayView2<'a, f64> {
        let s = &self.segments[id];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &data[s.range()]).expect("2-D segment")
    }

    pub(crate) fn vector<'a>(&self, data: &'a [f64], id: usize) -> ArrayView1<'a, f64> {
        let s = &self.segments[id];
        ArrayView1::from(&data[s.range()])
    }

    pub(crate) fn add_mat(&self, grads: &mut [f64], id: usize, g: &Array2<f64>) {
        let s = &self.segments[id];
        debug_assert_eq!(g.len(), s.len());
        for (dst, src) in grads[s.range()].iter_mut().zip(g.iter()) {
            *dst += src;
        }
    }

    pub(crate) fn add_vec(&self, grads: &mut [f64], id: usize, g: &Array1<f64>) {
        let s = &self.segments[id];
        debug_assert_eq!(g.len(), s.len());
        for (dst, src) in grads[s.range()].iter_mut().zip(g.iter()) {
            *dst += src;
        }
    }
}

/// All predictor weights in one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GapParams {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl GapParams {
    pub fn total_count(&self) -> usize {
        self.values.len()
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.values[s.range()])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Single-file JSON checkpoint: segment name, shape and row-major values.
    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            layout: ROW_MAJOR.into(),
            segments: self
                .layout
                .segments()
                .iter()
                .map(|s| CheckpointSegment {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    values: self.values[s.range()].to_vec(),
                })
                .collect(),
        }
    }

    /// Loads checkpoint values into `layout`, which must match segment for segment.
    pub fn from_checkpoint(layout: &ParamLayout, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.layout != ROW_MAJOR {
            return Err(Error::SchemaMismatch(format!("layout {}", ckpt.layout)));
        }
        if ckpt.segments.len() != layout.segments().len() {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint has {} segments, network expects {}",
                ckpt.segments.len(),
                layout.segments().len()
            )));
        }
        let mut values = Vec::with_capacity(layout.total());
        for (want, got) in layout.segments().iter().zip(&ckpt.segments) {
            if want.name != got.name || want.shape != got.shape || got.values.len() != want.len() {
                return Err(Error::SchemaMismatch(format!(
                    "segment {} {:?} does not match {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
            values.extend_from_slice(&got.values);
        }
        Ok(Self {
            layout: layout.clone(),
            values,
        })
    }

    /// Raw little-endian `f64` values plus a JSON sidecar manifest.
    pub fn write_binary(&self, data_path: &Path, manifest_path: &Path, config_hash: &str) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(data_path)?.write_all(&bytes)?;
        let manifest = BinaryManifest {
            config_hash: config_hash.to_string(),
            dtype: "f64-le".into(),
            layout: ROW_MAJOR.into(),
            data_file: data_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            total: self.values.len(),
            segments: self.layout.segments().to_vec(),
        };
        fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a binary checkpoint; returns the params and the recorded config hash.
    pub fn read_binary(layout: &ParamLayout, manifest_path: &Path) -> Result<(Self, String)> {
        let manifest: BinaryManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        if manifest.dtype != "f64-le" || manifest.layout != ROW_MAJOR {
            return Err(Error::SchemaMismatch(format!(
                "{} / {}",
                manifest.dtype, manifest.layout
            )));
        }
        if manifest.segments != layout.segments() {
            return Err(Error::SchemaMismatch("segment index differs from network".into()));
        }
        let data_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.data_file);
        let bytes = fs::read(data_path)?;
        if bytes.len() != manifest.total * 8 || manifest.total != layout.total() {
            return Err(Error::SchemaMismatch("binary checkpoint size".into()));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((
            Self {
                layout: layout.clone(),
                values,
            },
            manifest.config_hash,
        ))
    }
}

const ROW_MAJOR: &str = "row-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSegment {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub layout: String,
    pub segments: Vec<CheckpointSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BinaryManifest {
    config_hash: String,
    dtype: String,
    layout: String,
    data_file: String,
    total: usize,
    segments: Vec<Segment>,
}
