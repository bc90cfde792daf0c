//! The scalable Transformer: configuration, the widest parameter store,
//! width specs, cropped sub-models and their forward passes.

pub mod checkpoint;
mod config;
pub(crate) mod forward;
pub(crate) mod sampler;
mod spec;
mod store;

pub use config::ModelConfig;
pub use forward::{materialize, Encoded, SubModel, WeightSource};
pub use sampler::{non_widest_count, sample_distinct, sample_submodel, sample_type2_from, Variant};
pub use spec::WidthSpec;
pub use store::{
    AttentionIds, DecoderLayerIds, EncoderLayerIds, Layout, LinearIds, NormIds, Parameter,
    ParameterStore, Region,
};
