//! Command implementations shared by the binary and the tests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pkm_core::{KeyKind, Scalar};
use pkm_lm::{
    evaluate, parse_manifest, read_corpus_text, sample_batch, tokenize_corpus, EvalReport, LmError, MemorySpec,
    ModelConfig, Split, SplitSpec, TokenizeMode, TokenizedCorpus, TrainConfig, TrainState,
};
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::records::{append_records, Record};

pub const CHECKPOINT_FILE: &str = "checkpoint.pkm";
pub const RECORDS_FILE: &str = "records.tsv";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Bench(#[from] crate::bench::BenchError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CommandError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataOptions {
    pub path: PathBuf,
    pub tokenize: TokenizeMode,
    pub manifest: Option<PathBuf>,
}

impl DataOptions {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        DataOptions {
            path: path.into(),
            tokenize: TokenizeMode::Char,
            manifest: None,
        }
    }

    /// Explicit manifest, else `<file>.manifest` or `<dir>/split.manifest` when present.
    pub fn manifest_path(&self) -> Option<PathBuf> {
        if let Some(m) = &self.manifest {
            return Some(m.clone());
        }
        let candidate = if self.path.is_dir() {
            self.path.join("split.manifest")
        } else {
            self.path.with_extension("manifest")
        };
        candidate.is_file().then_some(candidate)
    }
}

pub fn load_corpus(data: &DataOptions) -> Result<TokenizedCorpus> {
    if !data.path.exists() {
        return Err(CommandError::Io {
            path: data.path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus path does not exist"),
        });
    }
    let text = read_corpus_text(&data.path)?;
    let split = match data.manifest_path() {
        Some(m) => parse_manifest(&std::fs::read_to_string(&m).map_err(io_err(&m))?)?,
        None => SplitSpec::default(),
    };
    Ok(tokenize_corpus(&text, data.tokenize, &split)?)
}

/// Model shape flags; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub layers: usize,
    pub dim: usize,
    pub attn_heads: usize,
    pub context: usize,
    pub ffn_mult: usize,
    /// `None` places one memory at layer `max(L − 1, 1)`.
    pub mem_positions: Option<Vec<usize>>,
    pub memory: MemorySpec,
    pub seed: u64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            layers: 2,
            dim: 32,
            attn_heads: 2,
            context: 16,
            ffn_mult: 4,
            mem_positions: None,
            memory: MemorySpec {
                n_sub: 64,
                heads: 4,
                k: 8,
                query_dim: 16,
                batch_norm: true,
                keys: KeyKind::Product,
            },
            seed: 0,
        }
    }
}

impl ModelOptions {
    pub fn positions(&self) -> Vec<usize> {
        self.mem_positions.clone().unwrap_or_else(|| vec![self.layers.saturating_sub(1).max(1)])
    }

    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            n_layers: self.layers,
            dim: self.dim,
            attn_heads: self.attn_heads,
            context: self.context,
            ffn_mult: self.ffn_mult,
            memory_positions: self.positions(),
            memory: self.memory,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub train: TrainConfig,
    /// 0 saves only at the end.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            train: TrainConfig {
                batch_size: 16,
                steps: 1500,
                lr_main: 3e-3,
                lr_values: 3e-2,
                warmup_steps: 100,
                ..TrainConfig::default()
            },
            checkpoint_every: 0,
            log_every: 100,
            eval_batch: 16,
        }
    }
}

pub fn eval_record(report: &EvalReport, split: &str) -> Vec<Record> {
    let mut out = vec![Record::new("eval")
        .with("split", split)
        .with("perplexity", report.perplexity)
        .with("nll", report.nll)
        .with("tokens", report.tokens)];
    for m in &report.memory {
        out.push(
            Record::new("memory")
                .with("split", split)
                .with("position", m.position)
                .with("usage", m.usage)
                .with("kl", m.kl)
                .with("head_overlap", m.head_overlap),
        );
    }
    out
}

pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub valid: EvalReport,
}

/// Trains on the corpus, logging `key=value` lines to `log` and writing
/// checkpoints and records under `out`.
pub fn cmd_train<T: Scalar>(
    data: &DataOptions,
    model: &ModelOptions,
    opts: &TrainOptions,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome<T>> {
    let corpus = load_corpus(data)?;
    let mut train = opts.train;
    train.seed = model.seed;
    let mut state = TrainState::<T>::new(model.config(corpus.vocab.len()), train)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let save = |state: &TrainState<T>| -> Result<Checkpoint<T>> {
        let ckpt = Checkpoint {
            state: state.clone(),
            vocab: Some(corpus.vocab.clone()),
            tokenize: Some(data.tokenize),
        };
        if let Some(dir) = out {
            checkpoint::save_checkpoint(&dir.join(CHECKPOINT_FILE), &ckpt)?;
        }
        Ok(ckpt)
    };
    let tokens = corpus.split(Split::Train);
    let mut records = Vec::new();
    let start = Instant::now();
    for _ in 0..train.steps {
        let batch = sample_batch(&mut state.rng, tokens, train.batch_size, state.model.config.context)?;
        let loss = state.train_step(&batch)?;
        let step = state.step;
        if opts.log_every > 0 && (step % opts.log_every == 0 || step == train.steps) {
            let lr = state.history.last().map_or(0.0, |l| l.lr);
            let rec = Record::new("train").with("step", step).with("loss", loss).with("lr", lr);
            writeln!(log, "step={step} loss={loss:.6} lr={lr:.3e}").map_err(io_err(Path::new("<log>")))?;
            records.push(rec);
        }
        if opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 && out.is_some() {
            save(&state)?;
        }
    }
    let train_seconds = start.elapsed().as_secs_f64();
    let checkpoint = save(&state)?;
    let valid = evaluate(&state.model, corpus.split(Split::Valid), opts.eval_batch)?;
    writeln!(
        log,
        "train_seconds={train_seconds:.3}\nvalid_perplexity={:.6}\nparams={}",
        valid.perplexity,
        state.model.total_param_count()
    )
    .map_err(io_err(Path::new("<log>")))?;
    records.extend(eval_record(&valid, "valid"));
    if let Some(dir) = out {
        let path = dir.join(RECORDS_FILE);
        append_records(&path, &records).map_err(io_err(&path))?;
    }
    Ok(TrainOutcome { checkpoint, valid })
}

pub fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(CommandError::Usage(format!("unknown split {other:?}; expected train, valid or test"))),
    }
}

/// Evaluates a checkpointed model on a corpus split.
pub fn eval_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, data: &DataOptions, split: Split, batch: usize) -> Result<EvalReport> {
    let mut data = data.clone();
    if let Some(mode) = ckpt.tokenize {
        data.tokenize = mode;
    }
    let corpus = load_corpus(&data)?;
    if let Some(vocab) = &ckpt.vocab {
        if vocab != &corpus.vocab {
            return Err(CommandError::Usage(format!(
                "corpus vocabulary ({} symbols) differs from the checkpoint's ({} symbols)",
                corpus.vocab.len(),
                vocab.len()
            )));
        }
    }
    Ok(evaluate(&ckpt.state.model, corpus.split(split), batch)?)
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    data: &DataOptions,
    split: Split,
    batch: usize,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<EvalReport> {
    let report = match checkpoint::peek_precision(checkpoint_path)?.as_str() {
        "f64" => eval_checkpoint(&checkpoint::load_checkpoint::<f64>(checkpoint_path)?, data, split, batch)?,
        _ => eval_checkpoint(&checkpoint::load_checkpoint::<f32>(checkpoint_path)?, data, split, batch)?,
    };
    let name = match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    };
    let records = eval_record(&report, name);
    let mut text = format!(
        "perplexity={}\nnll={}\ntokens={}\n",
        report.perplexity, report.nll, report.tokens
    );
    for m in &report.memory {
        text.push_str(&format!(
            "memory{p}.usage={}\nmemory{p}.kl={}\nmemory{p}.head_overlap={}\n",
            m.usage,
            m.kl,
            m.head_overlap,
            p = m.position
        ));
    }
    for r in &records[1..] {
        text.push_str(&r.to_line().expect("numeric fields"));
        text.push('\n');
    }
    log.write_all(text.as_bytes()).map_err(io_err(Path::new("<log>")))?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(RECORDS_FILE);
        append_records(&path, &records).map_err(io_err(&path))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Size,
    Bn,
    Position,
    HeadsKnn,
    FlatVsProduct,
}

impl std::str::FromStr for Axis {
    type Err = CommandError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size" => Ok(Axis::Size),
            "bn" => Ok(Axis::Bn),
            "position" => Ok(Axis::Position),
            "heads_knn" => Ok(Axis::HeadsKnn),
            "flat_vs_product" => Ok(Axis::FlatVsProduct),
            other => Err(CommandError::Usage(format!(
                "unknown ablation axis {other:?}; expected size, bn, position, heads_knn or flat_vs_product"
            ))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Size => "size",
            Axis::Bn => "bn",
            Axis::Position => "position",
            Axis::HeadsKnn => "heads_knn",
            Axis::FlatVsProduct => "flat_vs_product",
        }
    }
}

pub const SIZE_GRID: [usize; 3] = [4, 16, 64];
pub const HEADS_KNN_GRID: [(usize, usize); 4] = [(1, 64), (2, 32), (4, 16), (8, 8)];

/// One grid cell: a label and the model it trains.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: Vec<(&'static str, String)>,
    pub model: ModelOptions,
}

/// Grid for `axis` around `base`, before seeds are applied.
pub fn ablation_cells(axis: Axis, base: &ModelOptions) -> Vec<Cell> {
    let with_memory = |f: &dyn Fn(&mut MemorySpec)| {
        let mut m = base.clone();
        f(&mut m.memory);
        m
    };
    match axis {
        Axis::Size => {
            let mut cells = vec![Cell {
                label: vec![("memory", "none".into()), ("keys", "0".into())],
                model: ModelOptions {
                    mem_positions: Some(vec![]),
                    ..base.clone()
                },
            }];
            for c in SIZE_GRID {
                cells.push(Cell {
                    label: vec![("memory", "pkm".into()), ("keys", (c * c).to_string())],
                    model: with_memory(&|m| {
                        m.n_sub = c;
                        m.k = m.k.min(c);
                    }),
                });
            }
            cells
        }
        Axis::Bn => [false, true]
            .into_iter()
            .map(|bn| Cell {
                label: vec![("bn", if bn { "on" } else { "off" }.into()), ("keys", (base.memory.n_sub.pow(2)).to_string())],
                model: with_memory(&|m| m.batch_norm = bn),
            })
            .collect(),
        Axis::Position => (1..=base.layers)
            .map(|p| Cell {
                label: vec![("position", p.to_string())],
                model: ModelOptions {
                    mem_positions: Some(vec![p]),
                    ..base.clone()
                },
            })
            .collect(),
        Axis::HeadsKnn => HEADS_KNN_GRID
            .into_iter()
            .map(|(h, k)| Cell {
                label: vec![("mem_heads", h.to_string()), ("knn", k.to_string())],
                model: with_memory(&|m| {
                    m.heads = h;
                    m.k = k;
                    m.n_sub = m.n_sub.max(k);
                }),
            })
            .collect(),
        Axis::FlatVsProduct => [KeyKind::Product, KeyKind::Flat]
            .into_iter()
            .map(|kind| Cell {
                label: vec![(
                    "keys_mode",
                    match kind {
                        KeyKind::Product => "product",
                        KeyKind::Flat => "flat",
                    }
                    .into(),
                )],
                model: with_memory(&|m| m.keys = kind),
            })
            .collect(),
    }
}

/// Trains every cell for every seed and evaluates on the validation split;
/// one record per run, in grid order.
pub fn cmd_ablate<T: Scalar>(
    axis: Axis,
    data: &DataOptions,
    base: &ModelOptions,
    opts: &TrainOptions,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<Record>> {
    if seeds.is_empty() {
        return Err(CommandError::Usage("at least one seed is required".into()));
    }
    let corpus = load_corpus(data)?;
    let cells = ablation_cells(axis, base);
    let jobs: Vec<(&Cell, u64)> = cells.iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let records = jobs
        .par_iter()
        .map(|(cell, seed)| -> Result<Record> {
            let mut model = cell.model.clone();
            model.seed = *seed;
            let mut train = opts.train;
            train.seed = *seed;
            let (_, summary) =
                pkm_lm::train_and_evaluate::<T>(&corpus, model.config(corpus.vocab.len()), train, Split::Valid, opts.eval_batch)?;
            let mut rec = Record::new("ablate").with("axis", axis.name());
            for (k, v) in &cell.label {
                rec.push(k, v);
            }
            rec.push("seed", seed);
            rec.push("layers", model.layers);
            rec.push("dim", model.dim);
            rec.push("steps", train.steps);
            rec.push("perplexity", summary.eval.perplexity);
            rec.push("train_loss", summary.final_train_loss);
            if let Some(m) = summary.eval.memory.first() {
                rec.push("usage", m.usage);
                rec.push("kl", m.kl);
                rec.push("head_overlap", m.head_overlap);
            }
            rec.push("tokens_per_sec", format!("{:.1}", summary.eval_throughput));
            rec.push("params", summary.param_count);
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(RECORDS_FILE);
        append_records(&path, &records).map_err(io_err(&path))?;
    }
    Ok(records)
}
