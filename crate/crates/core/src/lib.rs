//! Video temporal grounding: cross-modal fusion with dummy tokens, a
//! temporal feature pyramid, anchor-free moment heads with adaptive score
//! refinement, training losses, inference and evaluation metrics.

pub mod data;
pub mod fusion;
pub mod heads;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use data::{Annotation, Dataset, FeatureSequence, QueryTokens, Sample};
pub use model::{ForwardOptions, Model, ModelConfig, ModelOutput};
pub use tensor::{Mask, Tensor};
