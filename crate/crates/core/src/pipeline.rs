//! End-to-end orchestration shared by the command-line interface:
//! preprocessing raw records into splits with retrieval attached, training,
//! evaluation, generation, the four-way ablation table, and sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{read_records, tokenize, tokenize_opts, RawRecord, Vocabulary};
use crate::corpus::{encode_tokens, EncodedExample};
use crate::generation::{export_attention, DecodeStrategy, GeneratedRow};
use crate::metrics::{corpus_bleu4, BleuReport};
use crate::numerics::Scalar;
use crate::retrieval::{retrieve_k_padded, DocMeta, RetrievedResponse, TfIdfIndex};
use crate::training::{
    eval_bleu, load_checkpoint, train, Checkpoint, EvalExample, SweepRow, TrainConfig,
    TrainOutcome,
};

/// Validation and test each hold this share of the corpus by default
/// (~90.5/4.75/4.75 overall).
pub const DEFAULT_EVAL_FRACTION: f64 = 0.047623;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const INDEX_FILE: &str = "index.bin";

/// Ablation rows, in report order.
pub const ABLATION_LABELS: [&str; 4] =
    ["full", "-Retrieval", "-Description", "Only review (NMT)"];

/// Errors raised by pipeline orchestration.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Generation(#[from] crate::generation::GenerationError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Filter(#[from] crate::qafilter::FilterError),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("record {line}: review is empty after normalization")]
    EmptyReview { line: usize },
    #[error("record {line}: empty response (training corpora need responses)")]
    EmptyResponse { line: usize },
    #[error("split {name} needs at least {needed} records, got {got}")]
    SplitTooSmall {
        name: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// True when the failure is a NaN/Inf blow-up rather than a usage error.
    pub fn is_numerical(&self) -> bool {
        match self {
            PipelineError::Train(e) => e.is_numerical(),
            PipelineError::Generation(e) => e.is_numerical(),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// File-based configuration: training hyperparameters plus the knobs that
/// only the pipeline consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    /// Fraction of records held out for validation and for test (each).
    pub eval_fraction: f64,
    /// Beam width for generation; 1 means greedy.
    pub beam: usize,
    /// Decode-step cap for the `generate` path.
    pub decode_max_len: usize,
    /// Apply the rule-based suffix lemmatizer during tokenization.
    pub lemmatize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            eval_fraction: DEFAULT_EVAL_FRACTION,
            beam: 1,
            decode_max_len: 50,
            lemmatize: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.train.validate()?;
        if !(self.eval_fraction.is_finite() && (0.0..0.5).contains(&self.eval_fraction)) {
            return Err(PipelineError::BadConfig(format!(
                "eval_fraction {} must lie in [0, 0.5)",
                self.eval_fraction
            )));
        }
        if self.beam == 0 {
            return Err(PipelineError::BadConfig("beam width must be at least 1".into()));
        }
        if self.decode_max_len == 0 {
            return Err(PipelineError::BadConfig("decode_max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loads and validates a JSON [`PipelineConfig`]; unknown keys are
/// rejected.
pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let config: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| PipelineError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    config.validate().map_err(|e| PipelineError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(config)
}

/// One line of a preprocessed split file: tokenized record plus its
/// attached retrievals (exactly K entries, empty-padded).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitRow {
    pub app_id: String,
    pub review: Vec<String>,
    pub response: Vec<String>,
    pub description: Vec<String>,
    pub retrieved: Vec<RetrievedResponse>,
}

/// Corpus sizes produced by [`preprocess`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub vocab_size: usize,
}

/// Record indices for the train, validation, and test splits, in that
/// order.
pub type SplitMembership = (Vec<usize>, Vec<usize>, Vec<usize>);

/// Seeded shuffle split; validation and test each get round(n*fraction)
/// records, training the rest. Index lists come back sorted so split files
/// preserve input order.
pub fn split_indices(
    n: usize,
    fraction: f64,
    seed: u64,
) -> Result<SplitMembership, PipelineError> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = (n as f64 * fraction).round() as usize;
    if 2 * held >= n {
        return Err(PipelineError::SplitTooSmall {
            name: "train",
            needed: 1,
            got: n.saturating_sub(2 * held),
        });
    }
    let mut val: Vec<usize> = order[..held].to_vec();
    let mut test: Vec<usize> = order[held..2 * held].to_vec();
    let mut train: Vec<usize> = order[2 * held..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, val, test))
}

struct TokenizedRecord {
    app_id: String,
    review: Vec<String>,
    response: Vec<String>,
    description: Vec<String>,
}

/// Splits raw records, builds the vocabulary and tf-idf index from the
/// training split only, attaches top-K retrievals (leave-one-out for
/// training queries), and writes `train/val/test.jsonl`, `vocab.txt`, and
/// `index.bin` into `out_dir`.
pub fn preprocess(
    records: &[RawRecord],
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<PreprocessSummary, PipelineError> {
    config.validate()?;
    if records.is_empty() {
        return Err(crate::corpus::CorpusError::EmptyCorpus.into());
    }
    let tokenized: Vec<TokenizedRecord> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let review = tokenize_opts(&r.review, config.lemmatize);
            if review.is_empty() {
                return Err(PipelineError::EmptyReview { line: i + 1 });
            }
            let response = tokenize_opts(&r.response, config.lemmatize);
            if response.is_empty() {
                return Err(PipelineError::EmptyResponse { line: i + 1 });
            }
            Ok(TokenizedRecord {
                app_id: r.app_id.clone(),
                review,
                response,
                description: tokenize_opts(&r.description, config.lemmatize),
            })
        })
        .collect::<Result<_, _>>()?;

    let (train_idx, val_idx, test_idx) =
        split_indices(records.len(), config.eval_fraction, config.train.seed)?;

    let train_records: Vec<RawRecord> =
        train_idx.iter().map(|&i| records[i].clone()).collect();
    let vocab = Vocabulary::build_opts(
        &train_records,
        config.train.vocab_cap,
        config.lemmatize,
    )?;

    let docs: Vec<Vec<String>> =
        train_idx.iter().map(|&i| tokenized[i].review.clone()).collect();
    let meta: Vec<DocMeta> = train_idx
        .iter()
        .enumerate()
        .map(|(pos, &i)| DocMeta {
            review_id: pos,
            response_tokens: tokenized[i].response.clone(),
        })
        .collect();
    let index = TfIdfIndex::build_with_meta(&docs, meta)?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    vocab.save(&out_dir.join(VOCAB_FILE))?;
    index.save(&out_dir.join(INDEX_FILE))?;

    let write_split = |name: &str,
                       idxs: &[usize],
                       exclude_self: bool|
     -> Result<(), PipelineError> {
        let path = out_dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        for (pos, &i) in idxs.iter().enumerate() {
            let rec = &tokenized[i];
            let exclude = exclude_self.then_some(pos);
            let retrieved =
                retrieve_k_padded(&index, &rec.review, config.train.k, exclude)?;
            let row = SplitRow {
                app_id: rec.app_id.clone(),
                review: rec.review.clone(),
                response: rec.response.clone(),
                description: rec.description.clone(),
                retrieved,
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        Ok(())
    };
    write_split(TRAIN_FILE, &train_idx, true)?;
    write_split(VAL_FILE, &val_idx, false)?;
    write_split(TEST_FILE, &test_idx, false)?;

    Ok(PreprocessSummary {
        train: train_idx.len(),
        val: val_idx.len(),
        test: test_idx.len(),
        vocab_size: vocab.len(),
    })
}

/// Reads one split file written by [`preprocess`].
pub fn read_split(path: &Path) -> Result<Vec<SplitRow>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let row: SplitRow = serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn retrieved_token_lists(row: &SplitRow) -> Vec<Vec<String>> {
    row.retrieved.iter().map(|r| r.tokens.clone()).collect()
}

/// Encodes split rows against a vocabulary for training.
pub fn encode_rows(
    rows: &[SplitRow],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<EncodedExample>, PipelineError> {
    rows.iter()
        .map(|row| {
            encode_tokens(
                &row.review,
                &row.response,
                &row.description,
                &retrieved_token_lists(row),
                vocab,
                max_len,
            )
            .map_err(PipelineError::from)
        })
        .collect()
}

/// Encodes split rows as evaluation instances (encoded sources plus the
/// reference response surface tokens).
pub fn eval_rows(
    rows: &[SplitRow],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<EvalExample>, PipelineError> {
    rows.iter()
        .map(|row| {
            let encoded = encode_tokens(
                &row.review,
                &row.response,
                &row.description,
                &retrieved_token_lists(row),
                vocab,
                max_len,
            )?;
            Ok(EvalExample { encoded, reference: row.response.clone() })
        })
        .collect()
}

/// Trains from a preprocessed directory; checkpoints and the metrics log go
/// to `out_dir`.
pub fn train_from_dir<F: Scalar>(
    data_dir: &Path,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome<F>, PipelineError> {
    let vocab = Vocabulary::load(&data_dir.join(VOCAB_FILE))?;
    let train_rows = read_split(&data_dir.join(TRAIN_FILE))?;
    let val_rows = read_split(&data_dir.join(VAL_FILE))?;
    let train_set = encode_rows(&train_rows, &vocab, config.max_len)?;
    let val_set = eval_rows(&val_rows, &vocab, config.max_len)?;
    Ok(train::<F>(config, &vocab, &train_set, &val_set, Some(out_dir))?)
}

/// Scores a checkpoint against one split file by greedy decoding.
pub fn eval_split_file<F: Scalar>(
    data_dir: &Path,
    checkpoint_path: &Path,
    split_file: &str,
) -> Result<BleuReport, PipelineError> {
    let vocab = Vocabulary::load(&data_dir.join(VOCAB_FILE))?;
    let ckpt: Checkpoint<F> = load_checkpoint(checkpoint_path)?;
    ckpt.ensure_vocab(&vocab)?;
    let rows = read_split(&data_dir.join(split_file))?;
    let examples = eval_rows(&rows, &vocab, ckpt.config.max_len)?;
    Ok(eval_bleu(
        &ckpt.params,
        &ckpt.config.dims(vocab.len()),
        ckpt.config.toggles(),
        ckpt.config.max_len,
        &examples,
        &vocab,
    )?)
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub bleu4: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
}

impl AblationRow {
    fn from_report(model: &str, report: &BleuReport) -> Self {
        AblationRow {
            model: model.to_owned(),
            bleu4: report.bleu4,
            p1: report.precisions[0],
            p2: report.precisions[1],
            p3: report.precisions[2],
            p4: report.precisions[3],
        }
    }
}

/// Trains and evaluates the four source configurations (full, without
/// retrieval, without description, review only) on the validation split.
/// Each variant trains from the same seed; per-variant checkpoints land
/// under `out_dir` when given.
pub fn ablate<F: Scalar>(
    data_dir: &Path,
    base: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, PipelineError> {
    let vocab = Vocabulary::load(&data_dir.join(VOCAB_FILE))?;
    let train_rows = read_split(&data_dir.join(TRAIN_FILE))?;
    let val_rows = read_split(&data_dir.join(VAL_FILE))?;
    if val_rows.is_empty() {
        return Err(PipelineError::SplitTooSmall { name: "val", needed: 1, got: 0 });
    }
    let train_set = encode_rows(&train_rows, &vocab, base.max_len)?;
    let val_set = eval_rows(&val_rows, &vocab, base.max_len)?;

    let variants: [(&str, &str, bool, bool); 4] = [
        (ABLATION_LABELS[0], "full", true, true),
        (ABLATION_LABELS[1], "no-retrieval", true, false),
        (ABLATION_LABELS[2], "no-description", false, true),
        (ABLATION_LABELS[3], "only-review", false, false),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (label, dir_name, use_description, use_retrieved) in variants {
        let config = TrainConfig { use_description, use_retrieved, ..base.clone() };
        let variant_dir = out_dir.map(|d| d.join(dir_name));
        if let Some(dir) = &variant_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let outcome =
            train::<F>(&config, &vocab, &train_set, &val_set, variant_dir.as_deref())?;
        let report = eval_bleu(
            &outcome.best,
            &config.dims(vocab.len()),
            config.toggles(),
            config.max_len,
            &val_set,
            &vocab,
        )?;
        rows.push(AblationRow::from_report(label, &report));
    }
    Ok(rows)
}

/// Runs the hyperparameter sweep over a preprocessed directory. Retrievals
/// are re-attached from the stored index for every K the grid requests, so
/// sweeping K is as exact as preprocessing at that K.
pub fn sweep_from_dir<F: Scalar>(
    data_dir: &Path,
    template: &TrainConfig,
    grid: &BTreeMap<String, Vec<Value>>,
) -> Result<Vec<SweepRow>, PipelineError> {
    let vocab = Vocabulary::load(&data_dir.join(VOCAB_FILE))?;
    let index = TfIdfIndex::load(&data_dir.join(INDEX_FILE))?;
    let train_rows = read_split(&data_dir.join(TRAIN_FILE))?;
    let val_rows = read_split(&data_dir.join(VAL_FILE))?;

    let mut ks: Vec<usize> = vec![template.k];
    if let Some(values) = grid.get("K") {
        for v in values {
            if let Some(k) = v.as_u64() {
                ks.push(k as usize);
            }
        }
    }
    ks.sort_unstable();
    ks.dedup();
    ks.retain(|&k| k >= 1);

    let reattach = |rows: &[SplitRow],
                    k: usize,
                    exclude_self: bool|
     -> Result<Vec<SplitRow>, PipelineError> {
        rows.iter()
            .enumerate()
            .map(|(pos, row)| {
                let exclude = exclude_self.then_some(pos);
                let retrieved = retrieve_k_padded(&index, &row.review, k, exclude)?;
                Ok(SplitRow { retrieved, ..row.clone() })
            })
            .collect()
    };

    let mut by_k: BTreeMap<usize, (Vec<EncodedExample>, Vec<EvalExample>)> = BTreeMap::new();
    for &k in &ks {
        let train_k = reattach(&train_rows, k, true)?;
        let val_k = reattach(&val_rows, k, false)?;
        by_k.insert(
            k,
            (
                encode_rows(&train_k, &vocab, template.max_len)?,
                eval_rows(&val_k, &vocab, template.max_len)?,
            ),
        );
    }

    let rows = crate::training::sweep::<F>(template, grid, &vocab, |cfg| {
        by_k.get(&cfg.k).cloned().ok_or_else(|| {
            crate::training::TrainError::BadConfig(format!(
                "no encoding prepared for K={}",
                cfg.k
            ))
        })
    })?;
    Ok(rows)
}

/// Decoding options for the generation path.
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    /// Beam width; 1 decodes greedily.
    pub beam: usize,
    /// Decode-step cap.
    pub max_len: usize,
    /// When set, per-example attention dumps are written here.
    pub dump_attention: Option<PathBuf>,
    /// Must match the tokenization the model was trained with.
    pub lemmatize: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { beam: 1, max_len: 50, dump_attention: None, lemmatize: false }
    }
}

/// Generates responses for raw records: tokenize, attach top-K retrievals,
/// encode with an empty target, decode. Records may omit responses and
/// descriptions.
pub fn generate_responses<F: Scalar>(
    ckpt: &Checkpoint<F>,
    vocab: &Vocabulary,
    index: &TfIdfIndex,
    records: &[RawRecord],
    opts: &GenerateOptions,
) -> Result<Vec<GeneratedRow>, PipelineError> {
    ckpt.ensure_vocab(vocab)?;
    if opts.beam == 0 {
        return Err(PipelineError::BadConfig("beam width must be at least 1".into()));
    }
    let strategy = if opts.beam == 1 {
        DecodeStrategy::Greedy
    } else {
        DecodeStrategy::Beam(opts.beam)
    };
    let dims = ckpt.config.dims(vocab.len());
    let toggles = ckpt.config.toggles();
    if let Some(dir) = &opts.dump_attention {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let mut rows = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let review = tokenize_opts(&record.review, opts.lemmatize);
        let description = tokenize_opts(&record.description, opts.lemmatize);
        let retrieved = retrieve_k_padded(index, &review, ckpt.config.k, None)?;
        let retrieved_tokens: Vec<Vec<String>> =
            retrieved.into_iter().map(|r| r.tokens).collect();
        let example = encode_tokens(
            &review,
            &[],
            &description,
            &retrieved_tokens,
            vocab,
            ckpt.config.max_len,
        )?;
        let result =
            strategy.decode(&ckpt.params, &dims, &example, toggles, opts.max_len, vocab)?;
        if let Some(dir) = &opts.dump_attention {
            let clip = ckpt.config.max_len;
            let review_labels: Vec<String> =
                review.iter().take(clip).cloned().collect();
            let desc_labels: Vec<String> =
                description.iter().take(clip).cloned().collect();
            export_attention(
                &result,
                &review_labels,
                &desc_labels,
                &dir.join(format!("attention-{i:04}.json")),
            )?;
        }
        rows.push(GeneratedRow {
            review: record.review.clone(),
            generated_response: result.tokens.join(" "),
            termination: result.termination,
        });
    }
    Ok(rows)
}

/// File-level wrapper over [`generate_responses`]: loads the checkpoint,
/// vocabulary, and index, reads raw input records, writes output JSONL.
pub fn generate_from_files<F: Scalar>(
    data_dir: &Path,
    checkpoint_path: &Path,
    input: &Path,
    out: &Path,
    opts: &GenerateOptions,
) -> Result<Vec<GeneratedRow>, PipelineError> {
    let vocab = Vocabulary::load(&data_dir.join(VOCAB_FILE))?;
    let index = TfIdfIndex::load(&data_dir.join(INDEX_FILE))?;
    let ckpt: Checkpoint<F> = load_checkpoint(checkpoint_path)?;
    let records = read_records(input)?;
    let rows = generate_responses(&ckpt, &vocab, &index, &records, opts)?;
    let mut w = BufWriter::new(File::create(out).map_err(io_err(out))?);
    for row in &rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(io_err(out))?;
    }
    w.flush().map_err(io_err(out))?;
    Ok(rows)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextRow {
    Tokens { tokens: Vec<String> },
    Generated { generated_response: String },
    Plain { response: String },
}

fn read_text_rows(path: &Path) -> Result<Vec<Vec<String>>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let row: TextRow = serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(match row {
            TextRow::Tokens { tokens } => tokens,
            TextRow::Generated { generated_response } => tokenize(&generated_response),
            TextRow::Plain { response } => tokenize(&response),
        });
    }
    Ok(out)
}

/// Corpus BLEU-4 between two JSONL files. Rows may carry `tokens`,
/// `generated_response` (the `generate` output shape), or `response` (the
/// raw corpus shape).
pub fn evaluate_files(candidates: &Path, references: &Path) -> Result<BleuReport, PipelineError> {
    let cands = read_text_rows(candidates)?;
    let refs = read_text_rows(references)?;
    Ok(corpus_bleu4(&cands, &refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_config() -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.train.hidden_units = 4;
        config.train.emb_dim = 4;
        config.train.k = 1;
        config.train.dropout = 0.0;
        config.train.batch_size = 18;
        config.train.vocab_cap = synth::recommended_vocab_cap();
        config.train.max_len = 30;
        config.train.epochs = 1;
        config.train.checkpoint_every = 100;
        config.train.seed = 5;
        config
    }

    fn preprocessed_dir(n: usize, config: &PipelineConfig) -> tempfile::TempDir {
        let records = synth::generate(n, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        preprocess(&records, config, dir.path()).unwrap();
        dir
    }

    #[test]
    fn default_split_of_100_records_is_90_5_5() {
        let (train, val, test) = split_indices(100, DEFAULT_EVAL_FRACTION, 3).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (90, 5, 5));
        let mut all: Vec<usize> =
            train.iter().chain(&val).chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, DEFAULT_EVAL_FRACTION, 3).unwrap().1, val);
        assert_ne!(split_indices(100, DEFAULT_EVAL_FRACTION, 4).unwrap().1, val);
    }

    #[test]
    fn splits_too_small_for_training_are_rejected() {
        let err = split_indices(10, 0.49, 1).unwrap_err();
        assert!(matches!(err, PipelineError::SplitTooSmall { name: "train", .. }));
    }

    #[test]
    fn config_file_round_trip_and_unknown_key_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"train": {"K": 2}, "beam": 3}"#).unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.train.k, 2);
        assert_eq!(config.beam, 3);
        assert_eq!(config.decode_max_len, 50);

        std::fs::write(&path, r#"{"beams": 3}"#).unwrap();
        assert!(matches!(load_config(&path), Err(PipelineError::Config { .. })));

        std::fs::write(&path, r#"{"eval_fraction": 0.5}"#).unwrap();
        assert!(matches!(load_config(&path), Err(PipelineError::Config { .. })));
    }

    #[test]
    fn preprocess_writes_splits_vocab_and_index() {
        let config = tiny_config();
        let records = synth::generate(60, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = preprocess(&records, &config, dir.path()).unwrap();
        assert_eq!(summary.train + summary.val + summary.test, 60);
        assert_eq!(summary.val, summary.test);
        for name in [TRAIN_FILE, VAL_FILE, TEST_FILE, VOCAB_FILE, INDEX_FILE] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let train_rows = read_split(&dir.path().join(TRAIN_FILE)).unwrap();
        assert_eq!(train_rows.len(), summary.train);
        for row in &train_rows {
            assert_eq!(row.retrieved.len(), config.train.k);
        }
        // Re-running preprocess is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        preprocess(&records, &config, dir2.path()).unwrap();
        for name in [TRAIN_FILE, VAL_FILE, TEST_FILE, VOCAB_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap(),
                "{name} differs between runs"
            );
        }
    }

    #[test]
    fn training_queries_never_retrieve_their_own_response() {
        // Unique responses let identity leaks show up directly.
        let records: Vec<crate::corpus::RawRecord> = (0..20)
            .map(|i| crate::corpus::RawRecord {
                app_id: format!("app{i}"),
                review: format!("unique review number {i} about topic {i}"),
                response: format!("unique response number {i}"),
                description: String::new(),
            })
            .collect();
        let mut config = tiny_config();
        config.eval_fraction = 0.0;
        let dir = tempfile::tempdir().unwrap();
        preprocess(&records, &config, dir.path()).unwrap();
        let rows = read_split(&dir.path().join(TRAIN_FILE)).unwrap();
        assert_eq!(rows.len(), 20);
        for row in &rows {
            for hit in &row.retrieved {
                assert_ne!(hit.tokens, row.response, "retrieved own response");
            }
        }
    }

    #[test]
    fn degenerate_records_are_rejected_with_line_numbers() {
        let mut records = synth::generate(12, 1).unwrap();
        records[3].response = String::new();
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let err = preprocess(&records, &config, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::EmptyResponse { line: 4 }));

        let mut records = synth::generate(12, 1).unwrap();
        records[5].review = "   ".into();
        let err = preprocess(&records, &config, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::EmptyReview { line: 6 }));
    }

    #[test]
    fn train_eval_generate_round_trip() {
        let config = tiny_config();
        let data = preprocessed_dir(60, &config);
        let out = tempfile::tempdir().unwrap();
        let outcome =
            train_from_dir::<f64>(data.path(), &config.train, out.path()).unwrap();
        assert!(outcome.steps > 0);
        let best = out.path().join("best.ckpt");
        assert!(best.exists());

        let report = eval_split_file::<f64>(data.path(), &best, TEST_FILE).unwrap();
        assert!(report.bleu4.is_finite() && (0.0..=100.0).contains(&report.bleu4));

        let input = out.path().join("queries.jsonl");
        std::fs::write(
            &input,
            concat!(
                r#"{"app_id": "taskly", "review": "taskly crash on startup", "description": "taskly help with the fix for crash fixtasklycrash"}"#,
                "\n",
                r#"{"app_id": "fitgo", "review": "battery drain is terrible"}"#,
                "\n",
            ),
        )
        .unwrap();
        let out_file = out.path().join("generated.jsonl");
        let dump = out.path().join("attention");
        let opts = GenerateOptions {
            beam: 1,
            max_len: 12,
            dump_attention: Some(dump.clone()),
            lemmatize: false,
        };
        let rows = generate_from_files::<f64>(
            data.path(),
            &best,
            &input,
            &out_file,
            &opts,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(dump.join("attention-0000.json").exists());
        assert!(dump.join("attention-0001.json").exists());

        // Beam width 2 also decodes.
        let beam_opts = GenerateOptions { beam: 2, dump_attention: None, ..opts };
        let beam_rows = generate_from_files::<f64>(
            data.path(),
            &best,
            &input,
            &out_file,
            &beam_opts,
        )
        .unwrap();
        assert_eq!(beam_rows.len(), 2);
    }

    #[test]
    fn ablation_table_has_the_four_labeled_rows() {
        let config = tiny_config();
        let data = preprocessed_dir(48, &config);
        let out = tempfile::tempdir().unwrap();
        let mut train_cfg = config.train.clone();
        train_cfg.batch_size = 14;
        let rows = ablate::<f64>(data.path(), &train_cfg, Some(out.path())).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(labels, ABLATION_LABELS.to_vec());
        for row in &rows {
            assert!(row.bleu4.is_finite());
            for p in [row.p1, row.p2, row.p3, row.p4] {
                assert!((0.0..=1.0).contains(&p));
            }
        }
        assert!(out.path().join("full/best.ckpt").exists());
        assert!(out.path().join("only-review/best.ckpt").exists());
    }

    #[test]
    fn sweep_reattaches_retrievals_per_k() {
        let config = tiny_config();
        let data = preprocessed_dir(60, &config);
        let mut grid: BTreeMap<String, Vec<Value>> = BTreeMap::new();
        grid.insert("K".into(), vec![Value::from(1), Value::from(2)]);
        let mut template = config.train.clone();
        template.batch_size = 18;
        let rows = sweep_from_dir::<f64>(data.path(), &template, &grid).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].parameter, "K");
        assert!(rows.iter().all(|r| r.val_bleu4.is_finite()));
    }

    #[test]
    fn evaluate_files_scores_identical_corpora_at_100() {
        let dir = tempfile::tempdir().unwrap();
        let cands = dir.path().join("cands.jsonl");
        let refs = dir.path().join("refs.jsonl");
        std::fs::write(
            &cands,
            "{\"generated_response\": \"thanks for the report\"}\n{\"generated_response\": \"please update the app\"}\n",
        )
        .unwrap();
        std::fs::write(
            &refs,
            "{\"response\": \"thanks for the report\"}\n{\"response\": \"please update the app\"}\n",
        )
        .unwrap();
        let report = evaluate_files(&cands, &refs).unwrap();
        assert!((report.bleu4 - 100.0).abs() < 1e-9);

        std::fs::write(&refs, "{\"tokens\": [\"thanks\"]}\n").unwrap();
        assert!(matches!(
            evaluate_files(&cands, &refs),
            Err(PipelineError::Metrics(_))
        ));
    }
}
