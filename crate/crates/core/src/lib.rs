//! Entropy-gated latent memory for a small decoder-only transformer.
//!
//! The crate couples a frozen backbone with a lightweight consolidator that
//! reads the backbone's own KV cache instead of re-encoding history:
//!
//! - [`monitor`] turns the last layer's attention into a sink-masked,
//!   head-averaged entropy and decides when to consolidate.
//! - [`consolidator`] projects the last hidden state to a seed latent and
//!   autoregressively emits `K` memory embeddings through projection-free
//!   cross-attention into the cache.
//! - [`engine`] runs the generation loop, soft-injecting memories back into
//!   the cache, plus a re-encoding baseline for cost comparison.
//! - [`trainer`] fits the consolidator through the frozen backbone.
//! - [`bench`] hosts the cyclic efficiency benchmark, the depth sweep and the
//!   entropy-reduction statistics.

pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod consolidator;
pub mod engine;
pub mod error;
pub mod monitor;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
