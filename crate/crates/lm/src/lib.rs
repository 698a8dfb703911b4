//! A small decoder-only transformer language model whose feed-forward blocks
//! can be replaced by product-key memory layers, with training and
//! evaluation loops and a synthetic corpus generator.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod synthetic;
pub mod train;

pub use config::{MemorySpec, ModelConfig, TrainConfig};
pub use corpus::{
    format_manifest, parse_manifest, read_corpus_text, sample_batch, tokenize_corpus, Split, SplitSpec, TokenizeMode,
    TokenizedCorpus, Vocab,
};
pub use error::{LmError, Result};
pub use eval::{eval_windows, evaluate, EvalReport, MemoryReport};
pub use experiment::{train_and_evaluate, RunSummary};
pub use model::{cross_entropy, ModelGrads, Transformer};
pub use synthetic::{fact_corpus, FactCorpusSpec};
pub use train::{StepLog, TrainState};

pub type TransformerF32 = Transformer<f32>;
pub type TransformerF64 = Transformer<f64>;
pub type TrainStateF32 = TrainState<f32>;
pub type TrainStateF64 = TrainState<f64>;
