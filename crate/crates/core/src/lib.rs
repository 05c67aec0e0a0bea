//! Multi-faceted matching network for composed image retrieval.
//!
//! A composed query (reference image + modification text) and a candidate
//! target image are both encoded into multi-grained feature sequences,
//! aggregated into a set of learnable matching-token embeddings by one
//! parameter-shared Transformer encoder, and scored by the summed per-token
//! cosine similarity. Training and evaluation run on a seeded synthetic
//! attribute world, and an iterative dual self-training loop mines
//! unlabeled image pairs, captions them with a trainable difference
//! captioner, and retrains both models on the filtered pseudo triplets.

pub mod captioner;
pub mod encoders;
pub mod error;
pub mod matcher;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod seeds;
pub mod selftrain;
pub mod synthio;
pub mod trainer;

pub use captioner::{bleu1, rouge_l, CaptionMetrics, Captioner, CaptionerConfig};
pub use error::{Error, Result};
pub use matcher::{match_score, ScoreRule, TokenMatrix, TransformerConfig};
pub use model::{Ablation, LimnConfig, LimnModel};
pub use numerics::{
    adam_step, AdamState, Checkpoint, Graph, ParamStore, PoolKind, Tensor, TensorId,
};
pub use objective::LossConfig;
pub use selftrain::{
    run_paradigm, CirModel, LimnPort, MiningStrategy, ParadigmConfig, ParadigmOutcome,
};
pub use synthio::{Item, Provenance, Query, SlotSpec, Triplet, Vocab, World};
pub use trainer::{evaluate, score_triplet, train, RecallReport, TrainConfig, TrainMetrics};
