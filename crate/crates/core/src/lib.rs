//! Object-level visual token pruning for 3D multimodal decoders.
//!
//! The crate covers the whole loop: aggregating decoder attention into a
//! per-object importance map, a small predictor that learns that map from
//! scene inputs, per-sample retention schedules driven by cumulative
//! importance, a budgeted search over schedule thresholds, and a synthetic
//! scene generator with a planted-relevance teacher.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod gapnet;
pub mod importance;
pub mod sap;
pub mod scenesim;
pub mod search;

pub use attention::{build_oracle, AttentionStack, ComponentScores, Segmentation};
pub use error::{Error, Result};
pub use gapnet::{GapConfig, GapNet, GapParams};
pub use importance::ImportanceMap;
pub use sap::{FlopsModel, ModelDims, PruneSchedule, PruningStrategy};
pub use scenesim::{SceneConfig, SceneGenerator, SceneSample, TeacherConfig};
pub use search::{Budget, SearchConfig, SearchResult};
