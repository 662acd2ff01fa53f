//! Domain-adaptive BERT pretraining and evaluation at desk scale.
//!
//! The stack, bottom to top:
//! - [`corpus`]: JSONL ingestion, sentence splitting, corpus statistics
//! - [`vocab`]: subword vocabulary training and greedy tokenization
//! - [`tensor`]: autodiff tensors, ops, gradient checking, checkpoints
//! - [`encoder`]: the transformer encoder itself
//! - [`pretrain`]: masked-token and next-sentence objectives, curriculum
//! - [`heads`]: task heads (classification, CRF tagging, biaffine parsing)
//! - [`frozen`]: fixed-encoder baselines over cached embeddings
//! - [`trainer`]: Adam, warmup schedule, grid search, early stopping
//! - [`metrics`]: span/token/sentence F1, attachment scores, bootstrap CIs
//! - [`datasets`]: task dataset containers and file formats
//! - [`tasks`]: end-to-end fine-tuning and frozen-feature runners
//! - [`ablation`]: paired vocabulary ablation harness

pub mod ablation;
pub mod corpus;
pub mod datasets;
pub mod encoder;
pub mod frozen;
pub mod heads;
pub mod metrics;
pub mod pretrain;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod util;
pub mod vocab;

pub use tensor::{Scalar, Tape, Tensor};
pub use vocab::Vocabulary;
