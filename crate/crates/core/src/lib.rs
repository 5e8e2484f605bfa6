//! Pretraining and evaluation toolkit for text-attributed heterogeneous
//! graphs (TAHGs): typed multigraphs whose nodes carry free text.
//!
//! The pipeline, end to end:
//!
//! 1. [`graph`] loads and validates the graph (JSONL node/edge files).
//! 2. [`text`] builds a word-level vocabulary, assembles neighbor-augmented
//!    token sequences, and applies MLM corruption.
//! 3. [`sampler`] extracts K-order context sets around anchor nodes and
//!    draws positive/negative nodes for context-graph prediction (CGP).
//! 4. [`tensor`] / [`model`] provide a small reverse-mode autodiff engine,
//!    a transformer text encoder, a relation-aware graph network, and the
//!    bilinear pair scorer.
//! 5. [`pretrain`] jointly optimizes the CGP and MLM objectives.
//! 6. [`downstream`] exports frozen node embeddings and trains small
//!    headers for link prediction and node classification, scored by
//!    [`metrics`].
//! 7. [`synth`] generates planted-partition synthetic TAHGs so every
//!    contract above is testable without external data; [`ablation`]
//!    drives the K / neighbor-count / task / negative-ratio sweeps.

pub mod ablation;
pub mod checkpoint;
pub mod downstream;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use graph::{NodeId, RelId, TahGraph, TypeId};
