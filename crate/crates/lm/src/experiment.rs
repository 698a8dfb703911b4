use std::time::Instant;

use pkm_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::{Split, TokenizedCorpus};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::train::TrainState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_train_loss: f64,
    pub eval: EvalReport,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    /// Evaluated tokens per second.
    pub eval_throughput: f64,
    pub param_count: usize,
}

/// Trains from scratch for `train.steps` steps and evaluates on `split`.
pub fn train_and_evaluate<T: Scalar>(
    corpus: &TokenizedCorpus,
    model: ModelConfig,
    train: TrainConfig,
    split: Split,
    eval_batch: usize,
) -> Result<(TrainState<T>, RunSummary)> {
    let mut state = TrainState::<T>::new(model, train)?;
    let t0 = Instant::now();
    let final_train_loss = state.train(corpus.split(Split::Train), train.steps)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let eval = evaluate(&state.model, corpus.split(split), eval_batch)?;
    let eval_seconds = t1.elapsed().as_secs_f64();
    let summary = RunSummary {
        final_train_loss,
        eval_throughput: eval.tokens as f64 / eval_seconds.max(1e-9),
        eval,
        train_seconds,
        eval_seconds,
        param_count: state.model.total_param_count(),
    };
    Ok((state, summary))
}
