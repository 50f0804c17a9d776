//! Logit-lens internal-consistency toolkit.
//!
//! Decodes latent predictions from every layer of a transformer trace,
//! scores each reasoning path by how often intermediate layers agree with
//! the final answer, and uses that score to weight self-consistency votes.
//! Also bundles the supporting analyses (linear probes, attention and FFN
//! anatomy) and a small trainable transformer that produces traces.

pub mod anatomy;
pub mod consistency;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod layerweights;
pub mod lens;
pub mod logistic;
pub mod optim;
pub mod pipeline;
pub mod probing;
pub mod stats;
pub mod tensor;
pub mod toymodel;
pub mod trace;

pub use error::{Error, Result};
pub use tensor::Tensor;
