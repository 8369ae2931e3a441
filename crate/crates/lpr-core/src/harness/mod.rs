//! Training, inference scoring, evaluation, checkpointing, and debug
//! exports: everything the command-line tool drives.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod export;
pub mod model;
pub mod plot;
pub mod train;

pub use checkpoint::{AdamState, Checkpoint};
pub use config::TrainConfig;
pub use eval::{evaluate_recall, rank_queries, score_gallery, GalleryEmbeddings, RankingResult, RecallReport};
pub use model::{embed_gallery as embed_gallery_raw, embed_queries, forward_train, init_params, Batch};
pub use train::{cosine_lr, train, Adam, StepMetrics, TrainOutcome};
