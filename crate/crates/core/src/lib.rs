//! Bloch-response dictionaries, dictionary matching and a compact
//! regression network for MR fingerprinting, with the tooling to analyze
//! the network as a piecewise-affine map.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dictionary;
pub mod epg;
pub mod error;
pub mod format;
pub mod kmeans;
mod linalg;
pub mod maps;
pub mod matcher;
pub mod mrfnet;
pub mod recon;
pub mod spline;
pub mod subspace;

pub use dictionary::{Dictionary, ParamGrid, RangeSpec};
pub use epg::SequenceParams;
pub use error::{Error, Result};
pub use maps::{Engine, QMaps, SignalImage};
pub use matcher::{CompressedDictionary, CostReport};
pub use mrfnet::{MlpModel, TrainConfig};
pub use num_complex::{Complex32, Complex64};
pub use subspace::Subspace;
