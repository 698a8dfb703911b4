use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pkm_cli::bench::{run_bench, BenchConfig, DEFAULT_FLAT_CEILING, MIN_EXACT_SAMPLES};
use pkm_cli::commands::{
    cmd_ablate, cmd_eval, cmd_train, parse_split, Axis, CommandError, DataOptions, ModelOptions, Precision,
    TrainOptions, RECORDS_FILE,
};
use pkm_cli::records::{append_records, extract_columns, parse_records};
use pkm_core::KeyKind;
use pkm_lm::{fact_corpus, format_manifest, FactCorpusSpec, MemorySpec, TokenizeMode};

#[derive(Parser)]
#[command(name = "pkm", version, about = "Product-key memory benchmarks, training and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Product,
    Flat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizeArg {
    Char,
    Whitespace,
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect()
}

fn parse_positions(s: &str) -> Result<Vec<usize>, String> {
    if s == "none" {
        Ok(Vec::new())
    } else {
        parse_list(s)
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Corpus file, or a directory of .txt files.
    #[arg(long)]
    data: PathBuf,
    /// Three-line byte-offset split manifest; defaults to a sibling `.manifest` file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "char")]
    tokenize: TokenizeArg,
}

impl DataArgs {
    fn options(&self) -> DataOptions {
        DataOptions {
            path: self.data.clone(),
            manifest: self.manifest.clone(),
            tokenize: match self.tokenize {
                TokenizeArg::Char => TokenizeMode::Char,
                TokenizeArg::Whitespace => TokenizeMode::Whitespace,
            },
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    attn_heads: usize,
    #[arg(long, default_value_t = 16)]
    context: usize,
    /// Memory layer indices (1-based, comma separated) or `none`; defaults to layer max(L-1, 1).
    #[arg(long)]
    mem_positions: Option<String>,
    /// Sub-keys per codebook; the memory has subkeys² slots.
    #[arg(long, default_value_t = 64)]
    subkeys: usize,
    #[arg(long, default_value_t = 16)]
    dq: usize,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, value_enum, default_value = "on")]
    bn: OnOff,
    #[arg(long, value_enum, default_value = "product")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn options(&self) -> Result<ModelOptions, CommandError> {
        let mem_positions = match &self.mem_positions {
            Some(s) => Some(parse_positions(s).map_err(|e| CommandError::Usage(format!("--mem-positions {e}")))?),
            None => None,
        };
        Ok(ModelOptions {
            layers: self.layers,
            dim: self.dim,
            attn_heads: self.attn_heads,
            context: self.context,
            ffn_mult: 4,
            mem_positions,
            memory: MemorySpec {
                n_sub: self.subkeys,
                heads: self.heads,
                k: self.k,
                query_dim: self.dq,
                batch_norm: matches!(self.bn, OnOff::On),
                keys: match self.mode {
                    ModeArg::Product => KeyKind::Product,
                    ModeArg::Flat => KeyKind::Flat,
                },
            },
            seed: self.seed,
        })
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 1500)]
    steps: u64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 3e-2)]
    lr_values: f64,
    #[arg(long, default_value_t = 100)]
    warmup: u64,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        let mut o = TrainOptions::default();
        o.train.steps = self.steps;
        o.train.batch_size = self.batch;
        o.train.lr_main = self.lr;
        o.train.lr_values = self.lr_values;
        o.train.warmup_steps = self.warmup;
        o.train.clip_norm = self.clip;
        o.checkpoint_every = self.checkpoint_every;
        o.log_every = self.log_every;
        o
    }

    fn precision(&self) -> Precision {
        match self.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Time product-key and flat search and verify exactness.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
        subkeys: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dq: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        /// Restrict to one mode; both run by default.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, default_value_t = 512)]
        queries: usize,
        #[arg(long, default_value_t = MIN_EXACT_SAMPLES)]
        exact_samples: usize,
        #[arg(long, default_value_t = DEFAULT_FLAT_CEILING)]
        flat_ceiling: usize,
        #[arg(long, default_value_t = 0.2)]
        min_seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and save a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// train, valid or test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one memory hyperparameter.
    Ablate {
        /// size, bn, position, heads_knn or flat_vs_product
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated seeds; defaults to --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print chosen columns of a records file as tab-separated rows.
    PlotData {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated column keys.
        #[arg(long)]
        columns: String,
        /// key=value filters.
        #[arg(long = "where")]
        filters: Vec<String>,
    },
    /// Write the synthetic fact corpus and its split manifest.
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        facts: usize,
        #[arg(long, default_value_t = 20000)]
        train_lines: usize,
        #[arg(long, default_value_t = 1000)]
        valid_lines: usize,
        #[arg(long, default_value_t = 1000)]
        test_lines: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode, CommandError> {
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Bench {
            subkeys,
            dq,
            k,
            heads,
            mode,
            queries,
            exact_samples,
            flat_ceiling,
            min_seconds,
            seed,
            precision,
            out,
        } => {
            let config = BenchConfig {
                subkeys,
                query_dim: dq,
                k,
                heads,
                modes: match mode {
                    None => vec![KeyKind::Product, KeyKind::Flat],
                    Some(ModeArg::Product) => vec![KeyKind::Product],
                    Some(ModeArg::Flat) => vec![KeyKind::Flat],
                },
                queries,
                exact_samples,
                flat_ceiling,
                min_seconds,
                threads: threads_from_env(),
                seed,
            };
            let (rows, name) = match precision {
                PrecisionArg::F32 => (run_bench::<f32>(&config)?, "f32"),
                PrecisionArg::F64 => (run_bench::<f64>(&config)?, "f64"),
            };
            let records: Vec<_> = rows.iter().map(|r| r.record(name)).collect();
            for r in &records {
                writeln!(stdout, "{}", r.to_line().expect("numeric record")).ok();
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|source| io(&dir, source))?;
                let path = dir.join(RECORDS_FILE);
                append_records(&path, &records).map_err(|source| io(&path, source))?;
            }
            if rows.iter().any(|r| !r.exact() || !r.ops_match_formula) {
                eprintln!("exactness check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Train { data, model, train, out } => {
            let (d, m, t) = (data.options(), model.options()?, train.options());
            match train.precision() {
                Precision::F32 => drop(cmd_train::<f32>(&d, &m, &t, out.as_deref(), stdout)?),
                Precision::F64 => drop(cmd_train::<f64>(&d, &m, &t, out.as_deref(), stdout)?),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            batch,
            out,
        } => {
            cmd_eval(&checkpoint, &data.options(), parse_split(&split)?, batch, out.as_deref(), stdout)?;
        }
        Command::Ablate {
            axis,
            data,
            model,
            train,
            seeds,
            out,
        } => {
            let axis: Axis = axis.parse()?;
            let seeds: Vec<u64> = seeds.unwrap_or_else(|| vec![model.seed]);
            let (d, m, t) = (data.options(), model.options()?, train.options());
            let records = match train.precision() {
                Precision::F32 => cmd_ablate::<f32>(axis, &d, &m, &t, &seeds, out.as_deref())?,
                Precision::F64 => cmd_ablate::<f64>(axis, &d, &m, &t, &seeds, out.as_deref())?,
            };
            for r in &records {
                writeln!(stdout, "{}", r.to_line().expect("numeric record")).ok();
            }
        }
        Command::PlotData { input, columns, filters } => {
            let text = std::fs::read_to_string(&input).map_err(|source| io(&input, source))?;
            let records = parse_records(&text).map_err(|e| CommandError::Usage(e.to_string()))?;
            let cols: Vec<&str> = columns.split(',').collect();
            let filters = filters
                .iter()
                .map(|f| {
                    f.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| CommandError::Usage(format!("filter {f:?} is not key=value")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            writeln!(stdout, "{}", cols.join("\t")).ok();
            for row in extract_columns(&records, &cols, &filters) {
                writeln!(stdout, "{}", row.join("\t")).ok();
            }
        }
        Command::MakeCorpus {
            out,
            facts,
            train_lines,
            valid_lines,
            test_lines,
            seed,
        } => {
            let spec = FactCorpusSpec {
                facts,
                train_lines,
                valid_lines,
                test_lines,
                seed,
                ..FactCorpusSpec::default()
            };
            let (text, offsets) = fact_corpus(&spec);
            std::fs::write(&out, text).map_err(|source| io(&out, source))?;
            let manifest = out.with_extension("manifest");
            std::fs::write(&manifest, format_manifest(offsets)).map_err(|source| io(&manifest, source))?;
            writeln!(stdout, "corpus={}\nmanifest={}", out.display(), manifest.display()).ok();
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn io(path: &std::path::Path, source: std::io::Error) -> CommandError {
    CommandError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn threads_from_env() -> Option<usize> {
    std::env::var("PKM_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = threads_from_env() {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match run(cli) {
        Ok(code) => code,
        Err(CommandError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
