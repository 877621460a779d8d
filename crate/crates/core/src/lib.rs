//! In-context tabular classification with a feature-tokenization input layer.
//!
//! Numerical and categorical features are turned into per-feature tokens,
//! summed into sample embeddings, and fed to a small transformer encoder
//! that reads labeled support rows and predicts unlabeled query rows in one
//! forward pass. Everything runs on a small reverse-mode autodiff engine in
//! 64-bit floats.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exact_sum;
pub mod finetune;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prior;
pub mod protocol;
pub mod schema;
pub mod seed;
pub mod tensor;
pub mod tokenize;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig, RowBlock, SupportQueryBatch};
pub use schema::{Column, FeatureKind, FeatureSchema};
pub use tensor::{Param, ParamStore, Tensor};
