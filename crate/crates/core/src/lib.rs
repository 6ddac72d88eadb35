//! Contextual rescoring of object detections.
//!
//! Detections become binary presence variables. A relation table learned by
//! counting object configurations in scale-invariant coordinates supplies
//! `P(X_i | neighbors)`, and one or more sweeps of belief propagation over a
//! small, dynamically chosen neighbor set per variable turn detector
//! confidences into context-aware posteriors. Context is ignored whenever the
//! posterior would be too sensitive to errors in it.
//!
//! ```
//! use fnm_core::inference::combine;
//!
//! let p = combine(0.8, 0.01, 0.02).unwrap();
//! assert!((p - 0.6644).abs() < 5e-4);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod context;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod priors;
pub mod registry;
pub mod relation;
pub mod stability;
pub mod synth;

pub use context::{ContextModel, Lookup, Neighbor, SceneContext};
pub use dataset::{AnnotatedScene, CategoryMap, GroundTruth};
pub use error::{Error, Result};
pub use geometry::{BBox, BinningConfig, Detection, Placement};
pub use inference::{Engine, InferenceConfig, SceneState};
pub use registry::Strategies;
pub use relation::{fit_relations, PriorTable, RelationModel, RelationTable};
