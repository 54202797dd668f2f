//! Desk-scale domain-adaptive pretraining for clinical note corpora.
//!
//! The crate covers the whole pipeline: note ingestion and sectionizing,
//! WordPiece vocabularies, masked-LM instance creation, a small transformer
//! encoder with hand-written backpropagation, pretraining and fine-tuning
//! loops, span-labeling evaluation, de-identification surrogates and an
//! embedding-neighbor probe.

pub mod corpus;
pub mod deid;
pub mod error;
pub mod experiments;
pub mod hashing;
pub mod model;
pub mod pipeline;
pub mod pretrain_data;
pub mod probe;
pub mod synth;
pub mod tasks;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
