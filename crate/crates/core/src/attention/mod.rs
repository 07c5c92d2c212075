//! The global self-attention module.

mod bundle;
mod config;
mod kernels;
mod module;

pub use bundle::{BundleEntry, Manifest, ParamBundle, MANIFEST_FILE};
pub use config::{GsaConfig, GsaParams, KqvWeights, RelPosEmbedding};
pub use kernels::{
    axial_content_attention, build_reindex_tensor, content_attention, kqv_project,
    positional_attention, positional_attention_axis, Axis, Kqv,
};
pub use module::{
    gsa_backward, gsa_forward, gsa_forward_recorded, GsaBnStates, GsaGrads, GsaPass, GsaTape,
};
