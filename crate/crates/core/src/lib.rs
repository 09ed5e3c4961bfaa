//! Multimodal named entity recognition over a flat lattice of words and visual objects.
//!
//! Sentences and their visual objects are flattened into one lattice of
//! cells, each with a head and tail word position. A stack of relative
//! attention layers encodes the lattice, a CRF tags the word cells, and a
//! text-only boundary-detection tower supplies an auxiliary loss.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod crf;
pub mod data;
pub mod ebd;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod labels;
pub mod lattice;
pub mod model;
pub mod optim;
pub mod params;
pub mod posenc;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
