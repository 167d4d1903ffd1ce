//! Next-scale autoregressive transformer over hierarchical token
//! sequences, conditioned on low-resolution encoder features.

mod data;
mod generate;
mod loss;
mod model;
mod train;

pub use data::{level_inputs, prepare_examples, Conditioning, VarExample};
pub use generate::{generate, Generation, Sampler};
pub use loss::{classifier_free_guidance, loss_ce, loss_dpo, sequence_log_prob};
pub use model::{AttentionLayout, KvCache, VarConfig, VarModel};
pub use train::{evaluate_nll, train_var, VarLossReport, VarTrainConfig};
