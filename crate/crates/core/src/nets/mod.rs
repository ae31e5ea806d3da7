//! Learned components: encoders, canonical decoders, the adaptive
//! aggregator, pose/light/confidence heads and the attribute-refining
//! network. All weights live in one [`ParamStore`] under hierarchical
//! names whose first segment is the training group.

pub mod aggregate;
pub mod layers;
pub mod model;
pub mod params;
pub mod refine;

pub use aggregate::{combine, Aggregated, Aggregator};
pub use layers::{filtered_connection, Conv, Decoder, Encoder, Overrides, Pyramid, Widths};
pub use model::{Aggregation, LapModel, ModelConfig, ViewFactors, AGGREGATION_GROUPS, REFINEMENT_GROUPS};
pub use params::{group_of, Binder, ParamStore};
pub use refine::{attribute_gate, CanonicalFace, Gate, Refined, INJECTION_LEVELS};
