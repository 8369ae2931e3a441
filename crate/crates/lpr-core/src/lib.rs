//! Livestream product retrieval, desk scale.
//!
//! A cross-modal retrieval model that matches live video clips to shop
//! product images, guided by ASR transcripts and product titles. Training
//! combines a global alignment triplet objective, graph-masked cross-domain
//! attention over frame-level similarity graphs, and selective multimodal
//! hard-example mining. Inference scores galleries with the independent
//! global embeddings only.
//!
//! The crate also ships a deterministic synthetic livestream corpus
//! generator and the full training/evaluation harness used by the `lpr`
//! command-line tool.

pub mod arrayfile;
pub mod autograd;
pub mod encoders;
pub mod error;
pub mod graph_interaction;
pub mod hard_mining;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod synth_data;

pub use autograd::{Grads, Tape, Var};
pub use encoders::EncoderConfig;
pub use error::{Error, Result};
pub use harness::{Checkpoint, TrainConfig};
pub use nn::{Ctx, ParamStore};
pub use objectives::LossWeights;
pub use synth_data::{Corpus, CorpusRecord, CorpusSpec};
