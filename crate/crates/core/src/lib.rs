//! capfuse: a hybrid image captioner.
//!
//! Two captioning models are trained independently on precomputed image
//! feature vectors: a k-nearest-neighbor consensus captioner and a small
//! from-scratch LSTM decoder. A logistic-regression gate over five
//! normalized features then picks the better caption per image.
//!
//! The crate exposes the pieces (corpus loading, BLEU scoring, neighbor
//! search and consensus, LSTM training/decoding, gate training) and a
//! pipeline that wires them into the `capfuse` CLI.

pub mod bleu;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fixture;
pub mod gate;
pub mod knn;
pub mod nic;
pub mod pipeline;

pub use error::{Error, Result};
