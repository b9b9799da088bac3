//! delight: strip illumination and environmental nuisance from images of
//! repeated scenes.
//!
//! The toolkit trains encoder-decoder networks with a reconstruction target
//! that is a *different* illumination rendering of the input's scene, so the
//! network can only succeed by reconstructing what the variants share. A
//! triplet loss regularizes the latent space, and classification of unseen
//! images runs by nearest-neighbour retrieval over training embeddings.
//!
//! The crate ships a deterministic procedural generator of multi-illumination
//! scenes, so every claim is testable at desk scale, plus a CLI (`delight`)
//! covering generation, training, indexing, inference, and evaluation.
//!
//! The accompanying book (`book/`) walks through the concepts; its code
//! snippets compile and run as doc-tests via the [`guide`] module.

pub mod dataset;
pub mod error;
pub mod image_tensor;
pub mod model;
pub mod nn;
pub mod seeds;
pub mod ssim;
pub mod synthgen;

pub use error::{Error, Result};
pub use image_tensor::ImageTensor;
