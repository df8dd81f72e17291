//! Desk-scale vision-language pre-training on a procedural fashion corpus.
//!
//! The pipeline: a synthetic product generator ([`data`]) renders images
//! with templated captions and ground-truth token/region alignments; the
//! kaleido patch generator ([`kpg`]) cuts each object into 55 multi-scale
//! patches; the alignment generator ([`aag`]) derives token-patch
//! pre-alignments from attention heatmaps; alignment-guided masking
//! ([`agm`]) turns records into training examples for seven pre-training
//! objectives; a single-stream transformer ([`model`]) scores them; and
//! [`train`]/[`eval`] run pre-training, retrieval, and classification.
//!
//! Everything is deterministic given a seed. Data-parallel loops go
//! through [`exec`], which uses rayon under the default `parallel` feature
//! and falls back to sequential execution without it.

pub mod aag;
pub mod agm;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kpg;
pub mod model;
pub mod exec;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{KbError, Result};
