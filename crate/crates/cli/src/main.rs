//! `revgen`: one binary wiring the whole pipeline - synthetic data,
//! preprocessing, retrieval, training, sweeps, decoding, evaluation,
//! ablations, and the response-quality filter.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
//! Configuration precedence: command-line flag > `--config` file > default.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use revgen_core::corpus::tokenize_opts;
use revgen_core::numerics::Scalar;
use revgen_core::pipeline::{self, GenerateOptions, PipelineConfig};
use revgen_core::qafilter::{self, FilterConfig};
use revgen_core::retrieval::TfIdfIndex;
use revgen_core::synth::{self, SynthError};
use revgen_core::training::TrainConfig;
use revgen_core::Error;

#[derive(Parser)]
#[command(
    name = "revgen",
    version,
    about = "Retrieval-augmented response generation for app reviews"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON pipeline configuration file; explicit flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Floating-point width for model math.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

/// Per-run training knobs; unset flags fall back to the config file.
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long, value_name = "N")]
    hidden_units: Option<usize>,
    #[arg(long, value_name = "N")]
    emb_dim: Option<usize>,
    /// Retrieved responses fed to the model.
    #[arg(long, value_name = "N")]
    k: Option<usize>,
    #[arg(long, value_name = "RATE")]
    dropout: Option<f64>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "N")]
    vocab_cap: Option<usize>,
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Validate and checkpoint every this many batches.
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<usize>,
    #[arg(long, value_name = "RATE")]
    learning_rate: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, config: &mut TrainConfig) {
        let t = config;
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { t.$field = v; })*
            };
        }
        overlay!(
            hidden_units,
            emb_dim,
            k,
            dropout,
            batch_size,
            vocab_cap,
            max_len,
            epochs,
            checkpoint_every,
            learning_rate
        );
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic review/response corpus.
    Synth {
        /// Number of records (at least 10).
        #[arg(long, value_name = "N")]
        n: usize,
        #[arg(long, value_name = "JSONL")]
        out: PathBuf,
    },
    /// Tokenize, split, and build the vocabulary plus retrieval index.
    Preprocess {
        /// Raw corpus: one {app_id, review, response, description} per line.
        #[arg(long, value_name = "JSONL")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Fraction held out for validation and for test (each).
        #[arg(long, value_name = "F")]
        eval_fraction: Option<f64>,
        /// Apply the rule-based suffix lemmatizer during tokenization.
        #[arg(long, value_name = "BOOL")]
        lemmatize: Option<bool>,
        /// Retrieved responses attached per record.
        #[arg(long, value_name = "N")]
        k: Option<usize>,
    },
    /// Look up the most similar reviews' responses in a saved index.
    Retrieve {
        #[arg(long, value_name = "PATH")]
        index: PathBuf,
        #[arg(long, value_name = "N", default_value_t = 4)]
        k: usize,
        /// Queries: one {review} object per line.
        #[arg(long, value_name = "JSONL")]
        query_file: PathBuf,
        /// Destination; stdout when omitted.
        #[arg(long, value_name = "JSONL")]
        out: Option<PathBuf>,
    },
    /// Train on a preprocessed directory, checkpointing into --out-dir.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// One training run per grid value, reporting validation BLEU-4.
    Sweep {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// JSON object mapping parameter name to a list of values, e.g.
        /// {"K": [1, 2, 4], "dropout": [0.0, 0.1]}.
        #[arg(long, value_name = "PATH")]
        grid: PathBuf,
        /// Destination; stdout when omitted.
        #[arg(long, value_name = "JSONL")]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Decode responses for raw review records with a trained checkpoint.
    Generate {
        /// Preprocessed directory holding the vocabulary and index.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Raw records; description and response fields may be empty.
        #[arg(long, value_name = "JSONL")]
        input: PathBuf,
        #[arg(long, value_name = "JSONL")]
        out: PathBuf,
        /// Beam width; 1 decodes greedily.
        #[arg(long, value_name = "N")]
        beam: Option<usize>,
        /// Decode-step cap.
        #[arg(long, value_name = "N")]
        max_len: Option<usize>,
        /// Write per-example attention matrices into this directory.
        #[arg(long, value_name = "DIR")]
        dump_attention: Option<PathBuf>,
    },
    /// Corpus BLEU-4: candidates vs references, or a checkpoint on a split.
    Evaluate {
        /// Rows carrying tokens, generated_response, or response.
        #[arg(long, value_name = "JSONL", requires = "references")]
        candidates: Option<PathBuf>,
        #[arg(long, value_name = "JSONL", requires = "candidates")]
        references: Option<PathBuf>,
        /// Preprocessed directory (checkpoint mode).
        #[arg(long, value_name = "DIR", requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "PATH", requires = "data")]
        checkpoint: Option<PathBuf>,
        /// Split file inside the data directory to score.
        #[arg(long, value_name = "FILE", default_value = "test.jsonl")]
        split: String,
    },
    /// Train the four source-ablated variants and report validation BLEU-4.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Keep per-variant checkpoints here; discarded when omitted.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Stratified k-fold cross-validation of the response-quality filter.
    FilterCv {
        /// Gold rows: {review, accuracy_scores} or {review, label}.
        #[arg(long, value_name = "JSONL")]
        gold: PathBuf,
        #[arg(long, value_name = "N", default_value_t = 10)]
        k: usize,
        /// Random Fourier feature count.
        #[arg(long, value_name = "N")]
        rff_dim: Option<usize>,
        #[arg(long, value_name = "RATE")]
        lambda: Option<f64>,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Also fit a model on the full gold set and save it here.
        #[arg(long, value_name = "PATH")]
        model_out: Option<PathBuf>,
    },
    /// Label reviews with a saved filter model.
    FilterPredict {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Rows with a review field.
        #[arg(long, value_name = "JSONL")]
        input: PathBuf,
        /// Destination; stdout when omitted.
        #[arg(long, value_name = "JSONL")]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

macro_rules! from_core {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Core(Error::from(e))
            }
        })*
    };
}

from_core!(
    Error,
    revgen_core::corpus::CorpusError,
    revgen_core::retrieval::RetrievalError,
    revgen_core::training::TrainError,
    revgen_core::generation::GenerationError,
    revgen_core::metrics::MetricsError,
    revgen_core::qafilter::FilterError,
    revgen_core::pipeline::PipelineError,
    std::io::Error,
    serde_json::Error
);

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        // The only failure is asking for too few records.
        CliError::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Config file (or defaults) with the global seed override applied.
fn effective_config(global: &Global) -> Result<PipelineConfig, CliError> {
    let mut config = match &global.config {
        Some(path) => pipeline::load_config(path).map_err(|e| match e {
            revgen_core::pipeline::PipelineError::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Core(Error::from(other)),
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Writes one JSON object per line to `out`, or to stdout when absent.
fn emit_rows<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            for row in rows {
                serde_json::to_writer(&mut w, row)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for row in rows {
                serde_json::to_writer(&mut w, row)?;
                w.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct QueryRow {
    review: String,
}

fn read_query_rows(path: &Path) -> Result<Vec<QueryRow>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: QueryRow = serde_json::from_str(line).map_err(|e| {
            CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no query rows found",
            path.display()
        )));
    }
    Ok(rows)
}

/// Expands to a precision-dispatched call of a generic command function.
macro_rules! dispatch {
    ($precision:expr, $func:ident, $($arg:expr),*) => {
        match $precision {
            Precision::F32 => $func::<f32>($($arg),*),
            Precision::F64 => $func::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = effective_config(&cli.global)?;
    match cli.command {
        Command::Synth { n, out } => cmd_synth(&config, n, &out),
        Command::Preprocess { input, out_dir, eval_fraction, lemmatize, k } => {
            cmd_preprocess(config, &input, &out_dir, eval_fraction, lemmatize, k)
        }
        Command::Retrieve { index, k, query_file, out } => {
            cmd_retrieve(&config, &index, k, &query_file, out.as_deref())
        }
        Command::Train { data, out_dir, flags } => {
            dispatch!(cli.global.precision, cmd_train, config, &data, &out_dir, &flags)
        }
        Command::Sweep { data, grid, out, flags } => {
            dispatch!(cli.global.precision, cmd_sweep, config, &data, &grid, out.as_deref(), &flags)
        }
        Command::Generate { data, checkpoint, input, out, beam, max_len, dump_attention } => {
            dispatch!(
                cli.global.precision,
                cmd_generate,
                config,
                &data,
                &checkpoint,
                &input,
                &out,
                beam,
                max_len,
                dump_attention
            )
        }
        Command::Evaluate { candidates, references, data, checkpoint, split } => {
            match (candidates, data) {
                (Some(cands), None) => {
                    // clap guarantees references is present alongside candidates.
                    let refs = references.expect("clap enforces --references");
                    let report = pipeline::evaluate_files(&cands, &refs)?;
                    print_json(&report)
                }
                (None, Some(dir)) => {
                    let ckpt = checkpoint.expect("clap enforces --checkpoint");
                    let report = match cli.global.precision {
                        Precision::F32 => {
                            pipeline::eval_split_file::<f32>(&dir, &ckpt, &split)?
                        }
                        Precision::F64 => {
                            pipeline::eval_split_file::<f64>(&dir, &ckpt, &split)?
                        }
                    };
                    print_json(&report)
                }
                _ => Err(CliError::Usage(
                    "pass either --candidates with --references, or --data with --checkpoint"
                        .into(),
                )),
            }
        }
        Command::Ablate { data, out_dir, flags } => {
            dispatch!(cli.global.precision, cmd_ablate, config, &data, out_dir.as_deref(), &flags)
        }
        Command::FilterCv { gold, k, rff_dim, lambda, epochs, model_out } => cmd_filter_cv(
            &cli.global,
            &gold,
            k,
            rff_dim,
            lambda,
            epochs,
            model_out.as_deref(),
        ),
        Command::FilterPredict { model, input, out } => {
            cmd_filter_predict(&config, &model, &input, out.as_deref())
        }
    }
}

#[derive(Serialize)]
struct SynthSummary<'a> {
    records: usize,
    seed: u64,
    out: &'a Path,
}

fn cmd_synth(config: &PipelineConfig, n: usize, out: &Path) -> Result<(), CliError> {
    let seed = config.train.seed;
    let records = synth::generate(n, seed)?;
    let mut w = BufWriter::new(File::create(out)?);
    for record in &records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    print_json(&SynthSummary { records: records.len(), seed, out })
}

fn cmd_preprocess(
    mut config: PipelineConfig,
    input: &Path,
    out_dir: &Path,
    eval_fraction: Option<f64>,
    lemmatize: Option<bool>,
    k: Option<usize>,
) -> Result<(), CliError> {
    if let Some(f) = eval_fraction {
        config.eval_fraction = f;
    }
    if let Some(l) = lemmatize {
        config.lemmatize = l;
    }
    if let Some(k) = k {
        config.train.k = k;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let records = revgen_core::corpus::read_records(input)?;
    let summary = pipeline::preprocess(&records, &config, out_dir)?;
    print_json(&summary)
}

#[derive(Serialize)]
struct RetrievedText {
    response: String,
    score: f64,
}

#[derive(Serialize)]
struct RetrieveRow {
    review: String,
    retrieved: Vec<RetrievedText>,
}

fn cmd_retrieve(
    config: &PipelineConfig,
    index_path: &Path,
    k: usize,
    query_file: &Path,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let index = TfIdfIndex::load(index_path)?;
    let queries = read_query_rows(query_file)?;
    let rows: Vec<RetrieveRow> = queries
        .into_iter()
        .map(|q| {
            let tokens = tokenize_opts(&q.review, config.lemmatize);
            let hits = index.top_k(&tokens, k, None)?;
            let retrieved = hits
                .into_iter()
                .map(|(doc, score)| RetrievedText {
                    response: index.meta(doc).response_tokens.join(" "),
                    score,
                })
                .collect();
            Ok(RetrieveRow { review: q.review, retrieved })
        })
        .collect::<Result<_, revgen_core::retrieval::RetrievalError>>()?;
    emit_rows(&rows, out)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    best_step: usize,
    best_val_bleu4: Option<f64>,
    checkpoint: PathBuf,
    metrics: PathBuf,
}

fn cmd_train<F: Scalar>(
    mut config: PipelineConfig,
    data: &Path,
    out_dir: &Path,
    flags: &TrainFlags,
) -> Result<(), CliError> {
    flags.apply(&mut config.train);
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = pipeline::train_from_dir::<F>(data, &config.train, out_dir)?;
    print_json(&TrainSummary {
        steps: outcome.steps,
        best_step: outcome.best_step,
        best_val_bleu4: outcome.best_val_bleu4,
        checkpoint: out_dir.join("best.ckpt"),
        metrics: out_dir.join("metrics.jsonl"),
    })
}

fn cmd_sweep<F: Scalar>(
    mut config: PipelineConfig,
    data: &Path,
    grid_path: &Path,
    out: Option<&Path>,
    flags: &TrainFlags,
) -> Result<(), CliError> {
    flags.apply(&mut config.train);
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let text = std::fs::read_to_string(grid_path)?;
    let grid: BTreeMap<String, Vec<Value>> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", grid_path.display())))?;
    let rows = pipeline::sweep_from_dir::<F>(data, &config.train, &grid)?;
    emit_rows(&rows, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate<F: Scalar>(
    config: PipelineConfig,
    data: &Path,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    beam: Option<usize>,
    max_len: Option<usize>,
    dump_attention: Option<PathBuf>,
) -> Result<(), CliError> {
    let opts = GenerateOptions {
        beam: beam.unwrap_or(config.beam),
        max_len: max_len.unwrap_or(config.decode_max_len),
        dump_attention,
        lemmatize: config.lemmatize,
    };
    if opts.beam == 0 {
        return Err(CliError::Usage("beam width must be at least 1".into()));
    }
    let rows = pipeline::generate_from_files::<F>(data, checkpoint, input, out, &opts)?;
    #[derive(Serialize)]
    struct GenerateSummary<'a> {
        generated: usize,
        out: &'a Path,
    }
    print_json(&GenerateSummary { generated: rows.len(), out })
}

fn cmd_ablate<F: Scalar>(
    mut config: PipelineConfig,
    data: &Path,
    out_dir: Option<&Path>,
    flags: &TrainFlags,
) -> Result<(), CliError> {
    flags.apply(&mut config.train);
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let rows = pipeline::ablate::<F>(data, &config.train, out_dir)?;
    print_json(&rows)
}

fn cmd_filter_cv(
    global: &Global,
    gold_path: &Path,
    k: usize,
    rff_dim: Option<usize>,
    lambda: Option<f64>,
    epochs: Option<usize>,
    model_out: Option<&Path>,
) -> Result<(), CliError> {
    let mut config = FilterConfig::default();
    if let Some(d) = rff_dim {
        config.d = d;
    }
    if let Some(l) = lambda {
        config.lambda = l;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    let gold = qafilter::load_gold_set(gold_path)?;
    let report = qafilter::cross_validate(&gold, k, &config)?;
    if let Some(path) = model_out {
        let (model, index) = qafilter::train_filter(&gold, &config)?;
        qafilter::save_filter(path, &model, &index)?;
    }
    print_json(&report)
}

#[derive(Serialize)]
struct PredictionRow {
    review: String,
    label: qafilter::Label,
}

fn cmd_filter_predict(
    config: &PipelineConfig,
    model_path: &Path,
    input: &Path,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (model, index) = qafilter::load_filter(model_path)?;
    let queries = read_query_rows(input)?;
    let rows: Vec<PredictionRow> = queries
        .into_iter()
        .map(|q| {
            let tokens = tokenize_opts(&q.review, config.lemmatize);
            let label = model.predict(&index, &tokens);
            PredictionRow { review: q.review, label }
        })
        .collect();
    emit_rows(&rows, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use revgen_core::training::TrainError;

    #[test]
    fn exit_codes_follow_error_class() {
        let usage = CliError::Usage("bad flag".into());
        assert_eq!(usage.code(), 2);

        let data: CliError = std::io::Error::new(std::io::ErrorKind::NotFound, "gone").into();
        assert_eq!(data.code(), 3);

        let numerical: CliError =
            TrainError::NonFinite { what: "loss", step: 3 }.into();
        assert_eq!(numerical.code(), 4);
    }

    #[test]
    fn synth_error_is_a_usage_error() {
        let err: CliError = synth::generate(3, 0).unwrap_err().into();
        assert!(matches!(err, CliError::Usage(_)));
        assert_eq!(err.code(), 2);
    }
}
