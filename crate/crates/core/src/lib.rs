//! Learned KV-cache eviction for transformers.
//!
//! A small memory model scores every cached token from a spectrogram of its
//! attention column and evicts tokens with negative scores. The model is
//! trained by CMA-ES against a frozen toy decoder-only language model.

pub mod analysis;
pub mod binio;
pub mod cache;
pub mod config;
pub mod error;
pub mod eviction;
pub mod evolution;
pub mod lm;
pub mod numerics;
pub mod scorer;
pub mod spectrogram;
pub mod tasks;
pub mod training;
pub mod trace;

pub use error::{NammError, Result};
