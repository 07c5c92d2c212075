//! Network specs, architecture resolution, parameterized models and the toy trainer.

mod arch;
mod build;
mod describe;
mod spec;
mod toy;

pub use arch::{Architecture, Block, BlockKind, Layer, Op, Shape3};
pub use build::{build_model, model_forward, ConvParams, Model};
pub use describe::{describe_architecture, describe_model, LayerSummary, ModelSummary};
pub use spec::{canonical_blocks, Branches, ModelSpec, StemSpec, Variant, PRESETS};
pub use toy::{synthetic_dataset, train_toy, Dataset, ToyModel, ToySpec, TrainConfig, TrainReport};
