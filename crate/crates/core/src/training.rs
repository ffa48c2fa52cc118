//! Training loop: per-example gradients averaged into minibatch updates,
//! Adam with global-norm clipping, periodic validation by BLEU, checkpoint
//! save/load, and one-axis hyperparameter sweeps.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{EncodedExample, Vocabulary};
use crate::generation::greedy_decode;
use crate::metrics::{corpus_bleu4, BleuReport};
use crate::model::{forward_loss, ModelDims, ModelParams, SourceToggles};
use crate::numerics::{Graph, Scalar, Tensor};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const CLIP_NORM: f64 = 5.0;
const CHECKPOINT_MAGIC: &[u8; 4] = b"RGCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Errors raised during training or checkpoint handling.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Generation(#[from] crate::generation::GenerationError),
    #[error("bad training configuration: {0}")]
    BadConfig(String),
    #[error("non-finite {what} at step {step}; lower the learning rate or inspect the data")]
    NonFinite { what: &'static str, step: usize },
    #[error("training set has {examples} examples, fewer than one batch of {batch_size}; lower batch_size")]
    CorpusTooSmall { examples: usize, batch_size: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("checkpoint {path}: {message}")]
    CheckpointFormat { path: String, message: String },
    #[error("checkpoint precision {found}-bit does not match requested {requested}-bit")]
    PrecisionMismatch { found: u32, requested: u32 },
    #[error("checkpoint vocabulary hash {found} does not match the current vocabulary {expected}")]
    VocabHashMismatch { expected: String, found: String },
    #[error("sweep key {0} is not a sweepable hyperparameter")]
    BadSweepKey(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl TrainError {
    /// True when the failure is a NaN/Inf blow-up rather than a usage error.
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Numerics(e) => e.is_numerical(),
            TrainError::Model(e) => e.is_numerical(),
            TrainError::Generation(e) => e.is_numerical(),
            _ => false,
        }
    }
}

/// Hyperparameters. Deserializes from JSON with every field optional;
/// unknown keys are rejected so config typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_units: usize,
    pub emb_dim: usize,
    /// Number of retrieved responses fed to the model.
    #[serde(rename = "K")]
    pub k: usize,
    pub dropout: f64,
    pub layers: usize,
    pub batch_size: usize,
    pub vocab_cap: usize,
    pub max_len: usize,
    pub epochs: usize,
    /// Validate and checkpoint every this many batches.
    pub checkpoint_every: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub use_description: bool,
    pub use_retrieved: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_units: 200,
            emb_dim: 100,
            k: 4,
            dropout: 0.1,
            layers: 1,
            batch_size: 32,
            vocab_cap: 10_000,
            max_len: 200,
            epochs: 3,
            checkpoint_every: 200,
            learning_rate: 1e-3,
            seed: 1234,
            use_description: true,
            use_retrieved: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let counts = [
            ("hidden_units", self.hidden_units),
            ("emb_dim", self.emb_dim),
            ("K", self.k),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("vocab_cap", self.vocab_cap),
            ("max_len", self.max_len),
            ("epochs", self.epochs),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TrainError::BadConfig(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::BadConfig(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims { vocab, emb: self.emb_dim, hidden: self.hidden_units, layers: self.layers }
    }

    pub fn toggles(&self) -> SourceToggles {
        SourceToggles { description: self.use_description, retrieved: self.use_retrieved }
    }
}

/// A validation/test instance: the encoded sources plus the reference
/// response as surface tokens for BLEU.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub encoded: EncodedExample,
    pub reference: Vec<String>,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    /// Present on steps where validation ran.
    pub val_bleu4: Option<f64>,
    /// Unix seconds.
    pub timestamp: u64,
}

/// First and second moment estimates, one pair per parameter tensor in
/// traversal order.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ModelParams<Tensor<F>>) -> Self {
        let zeros: Vec<Tensor<F>> = params
            .named_fields()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Update count: how many steps have been applied.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update. `grads` must align with the parameter traversal order
/// (`ModelParams::named_fields`). Moments update in the tensor's own
/// precision; bias corrections are computed in f64 and converted once.
pub fn adam_step<F: Scalar>(
    state: &mut AdamState<F>,
    params: &mut ModelParams<Tensor<F>>,
    grads: &[Tensor<F>],
    learning_rate: f64,
    step: usize,
) -> Result<(), TrainError> {
    assert_eq!(
        grads.len(),
        state.m.len(),
        "gradient list does not align with the parameter traversal"
    );
    if grads.iter().any(Tensor::has_non_finite) {
        return Err(TrainError::NonFinite { what: "gradient", step });
    }
    state.t += 1;
    let b1 = F::from_f64(ADAM_BETA1);
    let b2 = F::from_f64(ADAM_BETA2);
    let one_m_b1 = F::from_f64(1.0 - ADAM_BETA1);
    let one_m_b2 = F::from_f64(1.0 - ADAM_BETA2);
    let eps = F::from_f64(ADAM_EPS);
    let lr = F::from_f64(learning_rate);
    let bc1 = F::from_f64(1.0 - ADAM_BETA1.powi(state.t as i32));
    let bc2 = F::from_f64(1.0 - ADAM_BETA2.powi(state.t as i32));
    let mut idx = 0usize;
    params.for_each_mut(&mut |_, tensor| {
        let (m, v, g) = (&mut state.m[idx], &mut state.v[idx], &grads[idx]);
        for ((p, g), (m, v)) in tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *m = b1 * *m + one_m_b1 * *g;
            *v = b2 * *v + one_m_b2 * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        idx += 1;
    });
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm, accumulated in f64 regardless of precision.
pub fn clip_global_norm<F: Scalar>(
    grads: &mut [Tensor<F>],
    max_norm: f64,
    step: usize,
) -> Result<f64, TrainError> {
    let sq_sum: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum();
    let norm = sq_sum.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFinite { what: "gradient norm", step });
    }
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// Greedy-decodes every example and scores the corpus against the
/// references. Used both for validation during training and for final test
/// evaluation.
pub fn eval_bleu<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    dims: &ModelDims,
    toggles: SourceToggles,
    max_len: usize,
    examples: &[EvalExample],
    vocab: &Vocabulary,
) -> Result<BleuReport, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let candidates = examples
        .iter()
        .map(|ex| {
            greedy_decode(params, dims, &ex.encoded, toggles, max_len, vocab).map(|r| r.tokens)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let references: Vec<Vec<String>> = examples.iter().map(|ex| ex.reference.clone()).collect();
    Ok(corpus_bleu4(&candidates, &references)?)
}

/// Final state of a training run. `best` is the parameter snapshot at the
/// highest validation BLEU (the final parameters when nothing validated).
#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Scalar> {
    pub params: ModelParams<Tensor<F>>,
    pub best: ModelParams<Tensor<F>>,
    pub best_val_bleu4: Option<f64>,
    pub best_step: usize,
    pub steps: usize,
    pub history: Vec<MetricsRow>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Initializes parameters from the config seed and trains. Checkpoints and
/// a `metrics.jsonl` log land in `out_dir` when given.
pub fn train<F: Scalar>(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[EncodedExample],
    val_set: &[EvalExample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>, TrainError> {
    config.validate()?;
    let dims = config.dims(vocab.len());
    let params = ModelParams::init(&dims, config.seed)?;
    train_with_params(config, vocab, params, train_set, val_set, out_dir)
}

/// Trains from the given initial parameters (used when embeddings are
/// preloaded from a file).
pub fn train_with_params<F: Scalar>(
    config: &TrainConfig,
    vocab: &Vocabulary,
    mut params: ModelParams<Tensor<F>>,
    train_set: &[EncodedExample],
    val_set: &[EvalExample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>, TrainError> {
    config.validate()?;
    if train_set.len() < config.batch_size {
        return Err(TrainError::CorpusTooSmall {
            examples: train_set.len(),
            batch_size: config.batch_size,
        });
    }
    let dims = params.dims();
    if dims.vocab != vocab.len() {
        return Err(TrainError::BadConfig(format!(
            "parameter vocabulary {} does not match the {}-entry vocabulary",
            dims.vocab,
            vocab.len()
        )));
    }
    let toggles = config.toggles();
    let vocab_hash = vocab.content_hash();
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("metrics.jsonl");
            let file = OpenOptions::new()
                .create(true)
                .truncate(true)
                .write(true)
                .open(&path)
                .map_err(io_err(&path))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };

    let mut adam = AdamState::new(&params);
    let mut best = params.clone();
    let mut best_val: Option<f64> = None;
    let mut best_step = 0usize;
    let mut history = Vec::new();
    let mut step = 0usize;
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_batches = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let mut grads: Option<Vec<Tensor<F>>> = None;
            let mut loss_sum = 0.0f64;
            for (pos, &idx) in batch.iter().enumerate() {
                let graph_seed = config
                    .seed
                    .wrapping_add((step as u64).wrapping_mul(1_000_003))
                    .wrapping_add(pos as u64);
                let mut g = Graph::new(graph_seed);
                let bound = params.map(&mut |t| g.leaf(t.clone()));
                let fw = forward_loss(
                    &mut g,
                    &bound,
                    &dims,
                    &train_set[idx],
                    toggles,
                    config.dropout,
                    true,
                )?;
                let loss = g.value(fw.loss).item().as_f64();
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { what: "loss", step });
                }
                loss_sum += loss;
                g.backward(fw.loss)?;
                let mut example_grads = Vec::with_capacity(adam.m.len());
                bound.for_each(&mut |_, &id| {
                    let grad = g
                        .grad(id)
                        .cloned()
                        .unwrap_or_else(|| {
                            let (r, c) = g.value(id).shape();
                            Tensor::zeros(r, c)
                        });
                    example_grads.push(grad);
                });
                match grads.as_mut() {
                    None => grads = Some(example_grads),
                    Some(acc) => {
                        for (a, e) in acc.iter_mut().zip(&example_grads) {
                            a.add_scaled(e, F::one());
                        }
                    }
                }
            }
            let mut grads = grads.expect("batches are never empty");
            let inv = F::from_f64(1.0 / batch.len() as f64);
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            clip_global_norm(&mut grads, CLIP_NORM, step)?;
            adam_step(&mut adam, &mut params, &grads, config.learning_rate, step)?;
            let train_loss = loss_sum / batch.len() as f64;

            let is_final = step == total_batches;
            if step.is_multiple_of(config.checkpoint_every) || is_final {
                let val_bleu4 = if val_set.is_empty() {
                    None
                } else {
                    Some(eval_bleu(&params, &dims, toggles, config.max_len, val_set, vocab)?.bleu4)
                };
                if let Some(b) = val_bleu4 {
                    if best_val.is_none_or(|prev| b > prev) {
                        best_val = Some(b);
                        best_step = step;
                        best = params.clone();
                        if let Some(dir) = out_dir {
                            save_checkpoint(
                                &dir.join("best.ckpt"),
                                &best,
                                config,
                                &vocab_hash,
                                step,
                                best_val,
                            )?;
                        }
                    }
                }
                let row = MetricsRow { step, train_loss, val_bleu4, timestamp: now_unix() };
                if let Some(w) = metrics_file.as_mut() {
                    let line = serde_json::to_string(&row)?;
                    writeln!(w, "{line}").map_err(io_err(Path::new("metrics.jsonl")))?;
                    w.flush().map_err(io_err(Path::new("metrics.jsonl")))?;
                }
                history.push(row);
                if let Some(dir) = out_dir {
                    save_checkpoint(
                        &dir.join(format!("checkpoint-{step}.ckpt")),
                        &params,
                        config,
                        &vocab_hash,
                        step,
                        best_val,
                    )?;
                }
            }
        }
    }

    if val_set.is_empty() {
        best = params.clone();
        best_step = step;
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join("best.ckpt"), &best, config, &vocab_hash, step, None)?;
        }
    }
    Ok(TrainOutcome { params, best, best_val_bleu4: best_val, best_step, steps: step, history })
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    precision: u32,
    config: TrainConfig,
    vocab_hash: String,
    step: usize,
    best_val_bleu4: Option<f64>,
    tensors: Vec<TensorMeta>,
}

/// A deserialized checkpoint: parameters plus the config and vocabulary
/// fingerprint they were trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub params: ModelParams<Tensor<F>>,
    pub config: TrainConfig,
    pub vocab_hash: String,
    pub step: usize,
    pub best_val_bleu4: Option<f64>,
}

impl<F: Scalar> Checkpoint<F> {
    /// Fails unless the checkpoint was trained against `vocab`.
    pub fn ensure_vocab(&self, vocab: &Vocabulary) -> Result<(), TrainError> {
        let found = vocab.content_hash();
        if found != self.vocab_hash {
            return Err(TrainError::VocabHashMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// Writes magic, version, a JSON header (config, shapes, step, metrics),
/// then every tensor's elements little-endian in traversal order.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ModelParams<Tensor<F>>,
    config: &TrainConfig,
    vocab_hash: &str,
    step: usize,
    best_val_bleu4: Option<f64>,
) -> Result<(), TrainError> {
    let named = params.named_fields();
    let header = CheckpointHeader {
        precision: F::BITS,
        config: config.clone(),
        vocab_hash: vocab_hash.to_owned(),
        step,
        best_val_bleu4,
        tensors: named
            .iter()
            .map(|(name, t)| TensorMeta { name: name.clone(), rows: t.rows(), cols: t.cols() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let err = io_err(path);
    let mut w = BufWriter::new(File::create(path).map_err(&err)?);
    w.write_all(CHECKPOINT_MAGIC).map_err(&err)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(&err)?;
    w.write_u64::<LittleEndian>(header_json.len() as u64).map_err(&err)?;
    w.write_all(&header_json).map_err(&err)?;
    for (_, tensor) in &named {
        for v in tensor.data() {
            if F::BITS == 32 {
                w.write_f32::<LittleEndian>(v.as_f64() as f32).map_err(&err)?;
            } else {
                w.write_f64::<LittleEndian>(v.as_f64()).map_err(&err)?;
            }
        }
    }
    w.flush().map_err(&err)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. The requested
/// precision `F` must match the file's; shapes and tensor names must cover
/// the parameter set exactly.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, TrainError> {
    let err = io_err(path);
    let format = |message: String| TrainError::CheckpointFormat {
        path: path.display().to_string(),
        message,
    };
    let mut r = BufReader::new(File::open(path).map_err(&err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format("bad magic; not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(&err)?;
    if version != CHECKPOINT_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(&err)?;
    if header_len > 16 * 1024 * 1024 {
        return Err(format(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes).map_err(&err)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| format(format!("header: {e}")))?;
    if header.precision != F::BITS {
        return Err(TrainError::PrecisionMismatch {
            found: header.precision,
            requested: F::BITS,
        });
    }
    let vocab = header
        .tensors
        .iter()
        .find(|m| m.name == "embedding")
        .ok_or_else(|| format("no embedding tensor".into()))?
        .rows;
    let dims = header.config.dims(vocab);
    let mut stored: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    for meta in &header.tensors {
        let numel = meta.rows * meta.cols;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = if F::BITS == 32 {
                F::from_f64(r.read_f32::<LittleEndian>().map_err(&err)? as f64)
            } else {
                F::from_f64(r.read_f64::<LittleEndian>().map_err(&err)?)
            };
            data.push(v);
        }
        let tensor = Tensor::from_vec(meta.rows, meta.cols, data)
            .map_err(|e| format(format!("tensor {}: {e}", meta.name)))?;
        if stored.insert(meta.name.clone(), tensor).is_some() {
            return Err(format(format!("duplicate tensor {}", meta.name)));
        }
    }
    let mut params: ModelParams<Tensor<F>> = ModelParams::zeros(&dims)?;
    let mut failure: Option<String> = None;
    params.for_each_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        match stored.remove(&name) {
            Some(t) if t.shape() == tensor.shape() => *tensor = t,
            Some(t) => {
                failure = Some(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    tensor.shape()
                ))
            }
            None => failure = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(message) = failure {
        return Err(format(message));
    }
    if let Some(name) = stored.keys().next() {
        return Err(format(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint {
        params,
        config: header.config,
        vocab_hash: header.vocab_hash,
        step: header.step,
        best_val_bleu4: header.best_val_bleu4,
    })
}

/// One sweep result: the varied hyperparameter, its value, and the best
/// validation BLEU the run reached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: Value,
    pub val_bleu4: f64,
}

fn apply_sweep_value(config: &mut TrainConfig, key: &str, value: &Value) -> Result<(), TrainError> {
    let as_count = || {
        value
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| TrainError::BadConfig(format!("{key} value {value} must be a count")))
    };
    match key {
        "K" => config.k = as_count()?,
        "hidden_units" => config.hidden_units = as_count()?,
        "layers" => config.layers = as_count()?,
        "emb_dim" => config.emb_dim = as_count()?,
        "dropout" => {
            config.dropout = value.as_f64().ok_or_else(|| {
                TrainError::BadConfig(format!("dropout value {value} must be a number"))
            })?;
        }
        other => return Err(TrainError::BadSweepKey(other.to_owned())),
    }
    Ok(())
}

/// Varies one hyperparameter at a time, holding the rest at the template's
/// values: a grid of two keys with three values each yields six rows, not
/// nine. `provide` supplies the (train, validation) split for a config,
/// since K and max_len changes require re-encoding. An empty grid trains
/// the template once and reports it as the single `base` row.
pub fn sweep<F: Scalar>(
    template: &TrainConfig,
    grid: &BTreeMap<String, Vec<Value>>,
    vocab: &Vocabulary,
    mut provide: impl FnMut(&TrainConfig) -> Result<(Vec<EncodedExample>, Vec<EvalExample>), TrainError>,
) -> Result<Vec<SweepRow>, TrainError> {
    let mut run = |config: &TrainConfig| -> Result<f64, TrainError> {
        config.validate()?;
        let (train_set, val_set) = provide(config)?;
        if val_set.is_empty() {
            return Err(TrainError::EmptySplit("validation"));
        }
        let outcome = train::<F>(config, vocab, &train_set, &val_set, None)?;
        Ok(outcome.best_val_bleu4.expect("validation ran"))
    };
    if grid.is_empty() {
        let bleu = run(template)?;
        return Ok(vec![SweepRow { parameter: "base".into(), value: Value::Null, val_bleu4: bleu }]);
    }
    let mut rows = Vec::new();
    for (key, values) in grid {
        for value in values {
            let mut config = template.clone();
            apply_sweep_value(&mut config, key, value)?;
            let bleu = run(&config)?;
            rows.push(SweepRow { parameter: key.clone(), value: value.clone(), val_bleu4: bleu });
        }
    }
    Ok(rows)
}
