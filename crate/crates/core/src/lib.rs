//! Adapter-based meta-learned paraphrase generation at desk scale.
//!
//! A small encoder-decoder is pretrained as a denoising autoencoder, its
//! adapters are meta-trained with MAML over source paraphrase domains while
//! the backbone stays frozen, and the adapters are then fine-tuned on a small
//! target corpus.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod generation;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod data;
pub mod meta;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{apply_primitive, Array, Prim, PrimId};
