//! Cross-domain calibration engine for post-training quantization.
//!
//! The crate executes a small CNN model IR in floating point, calibrates
//! activation ranges on a (possibly out-of-domain) dataset with a two-pass
//! histogram observer, folds and optionally re-accumulates BatchNorm
//! statistics, simulates integer inference via fake quantization, and ranks
//! candidate calibration datasets by Gram-matrix domain discrepancy.

pub mod bn;
pub mod dataset;
pub mod error;
pub mod fakequant;
pub mod fixture;
pub mod gram;
pub mod graph;
pub mod histogram;
pub mod metrics;
pub mod model_io;
pub mod ops;
pub mod pipeline;
pub mod quant;
pub mod tensor;
pub mod xten;

pub use error::{Error, ErrorCategory, Result};
pub use graph::{BnMode, Graph, GraphBuilder, Metadata, Node, OpKind};
pub use quant::{QuantKind, QuantParams, QuantizedTensor};
pub use tensor::{Dtype, Tensor};
