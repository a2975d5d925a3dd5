//! Class-agnostic counting with a single plain vision transformer.
//!
//! Query-image tokens and exemplar tokens are concatenated and passed through
//! ordinary self-attention, so feature extraction and query/exemplar matching
//! happen in the same attention map. The exemplar-to-query block of the last
//! attention map, scaled by a magnitude embedding, is concatenated with the
//! query features and regressed to a density map whose sum is the count.

pub mod attention;
pub mod data;
pub mod autodiff;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod suite;
pub mod tensor;
pub mod train;

pub use autodiff::{OpKind, Tape, Var};
pub use error::{Error, Result};
pub use image::{DensityMap, Image};
pub use tensor::{ParamRng, Tensor};
