//! Response-quality filter: label reviews whose generated responses were
//! judged bad, featurize them with the shared unigram tf-idf, approximate a
//! Gaussian-kernel SVM with random Fourier features trained by hinge-loss
//! SGD, and evaluate with stratified k-fold cross-validation.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::retrieval::{SparseVec, TfIdfIndex};

const FILTER_MAGIC: &[u8; 4] = b"RGFM";
const FILTER_VERSION: u32 = 1;
/// Pairwise-distance sample cap for the bandwidth median heuristic.
const MEDIAN_SAMPLE: usize = 200;

/// Errors raised by the quality filter.
#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error("gold set is empty")]
    EmptyGoldSet,
    #[error("gold set contains only {0} examples; both classes are required")]
    SingleClass(&'static str),
    #[error("cross-validation needs at least 2 folds, got {0}")]
    BadFoldCount(usize),
    #[error("{folds} folds cannot partition {size} examples")]
    TooManyFolds { folds: usize, size: usize },
    #[error("gold set line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("filter model {path}: {message}")]
    ModelFormat { path: String, message: String },
    #[error("feature dimension must be at least 1")]
    ZeroDim,
    #[error("kernel bandwidth {0} must be positive and finite")]
    BadBandwidth(f64),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FilterError + '_ {
    move |source| FilterError::Io { path: path.display().to_string(), source }
}

/// Response quality as judged by annotators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Bad,
    NotBad,
}

impl Label {
    /// Hinge-loss encoding: bad = +1, not_bad = -1.
    pub fn sign(self) -> f64 {
        match self {
            Label::Bad => 1.0,
            Label::NotBad => -1.0,
        }
    }
}

/// A review with its quality label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledReview {
    pub tokens: Vec<String>,
    pub label: Label,
}

/// A review is bad iff any annotator scored its response's accuracy 3 or
/// lower.
pub fn label_from_scores(scores: &[i64]) -> Label {
    if scores.iter().any(|&s| s <= 3) {
        Label::Bad
    } else {
        Label::NotBad
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GoldRow {
    Scored { review: String, accuracy_scores: Vec<i64> },
    Labeled { review: String, label: Label },
}

/// Loads a JSONL gold set. Rows carry either raw annotator scores
/// (`accuracy_scores`) or a pre-assigned `label`; blank lines are skipped.
pub fn load_gold_set(path: &Path) -> Result<Vec<LabeledReview>, FilterError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut gold = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: GoldRow = serde_json::from_str(&line)
            .map_err(|e| FilterError::Parse { line: i + 1, message: e.to_string() })?;
        let (review, label) = match row {
            GoldRow::Scored { review, accuracy_scores } => {
                if accuracy_scores.is_empty() {
                    return Err(FilterError::Parse {
                        line: i + 1,
                        message: "accuracy_scores is empty".into(),
                    });
                }
                let label = label_from_scores(&accuracy_scores);
                (review, label)
            }
            GoldRow::Labeled { review, label } => (review, label),
        };
        gold.push(LabeledReview { tokens: tokenize(&review), label });
    }
    if gold.is_empty() {
        return Err(FilterError::EmptyGoldSet);
    }
    Ok(gold)
}

/// Per-class loss multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub bad: f64,
    pub not_bad: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights { bad: 1.0, not_bad: 1.0 };

    /// Weights inversely proportional to class frequency, normalized so a
    /// balanced set gets 1.0 each.
    pub fn inverse_frequency(labels: &[Label]) -> Result<Self, FilterError> {
        let bad = labels.iter().filter(|l| **l == Label::Bad).count();
        let not_bad = labels.len() - bad;
        if bad == 0 {
            return Err(FilterError::SingleClass("not_bad"));
        }
        if not_bad == 0 {
            return Err(FilterError::SingleClass("bad"));
        }
        let n = labels.len() as f64;
        Ok(ClassWeights { bad: n / (2.0 * bad as f64), not_bad: n / (2.0 * not_bad as f64) })
    }

    pub fn of(self, label: Label) -> f64 {
        match label {
            Label::Bad => self.bad,
            Label::NotBad => self.not_bad,
        }
    }
}

/// Random Fourier feature map approximating the RBF kernel
/// exp(-gamma * ||x - y||^2): z(x) = sqrt(2/D) * cos(Omega x + beta) with
/// Omega ~ N(0, 2*gamma) and beta ~ U[0, 2*pi).
#[derive(Debug, Clone)]
pub struct RffMap {
    /// Column-major (n_features columns of length d) for sparse products.
    omega: Vec<f64>,
    beta: Vec<f64>,
    d: usize,
    n_features: usize,
    gamma: f64,
}

impl RffMap {
    pub fn new(n_features: usize, d: usize, gamma: f64, seed: u64) -> Result<Self, FilterError> {
        if d == 0 {
            return Err(FilterError::ZeroDim);
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(FilterError::BadBandwidth(gamma));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 * gamma).sqrt();
        // Box-Muller: two uniforms to two independent standard normals.
        let mut spare: Option<f64> = None;
        let mut normal = |rng: &mut ChaCha8Rng| -> f64 {
            if let Some(z) = spare.take() {
                return z;
            }
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * PI * u2;
            spare = Some(r * theta.sin());
            r * theta.cos()
        };
        let omega: Vec<f64> =
            (0..d * n_features).map(|_| std * normal(&mut rng)).collect();
        let beta: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 * PI).collect();
        Ok(RffMap { omega, beta, d, n_features, gamma })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// z(x); entries beyond the trained feature space are ignored.
    pub fn map(&self, x: &SparseVec) -> Vec<f64> {
        let mut acc = self.beta.clone();
        for &(term, weight) in &x.entries {
            let t = term as usize;
            if t >= self.n_features {
                continue;
            }
            for (a, om) in acc.iter_mut().zip(&self.omega[t * self.d..(t + 1) * self.d]) {
                *a += om * weight;
            }
        }
        let scale = (2.0 / self.d as f64).sqrt();
        for a in &mut acc {
            *a = scale * a.cos();
        }
        acc
    }
}

/// Bandwidth for the RBF kernel: 1/(2 * median^2) over pairwise euclidean
/// distances of a (seeded) sample of at most 200 feature vectors. Falls
/// back to 1.0 when every sampled pair coincides.
pub fn median_heuristic_gamma(features: &[SparseVec], seed: u64) -> f64 {
    let mut idx: Vec<usize> = (0..features.len()).collect();
    if idx.len() > MEDIAN_SAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(MEDIAN_SAMPLE);
    }
    let norms: Vec<f64> = idx.iter().map(|&i| features[i].l2_norm()).collect();
    let mut dists = Vec::with_capacity(idx.len() * (idx.len().saturating_sub(1)) / 2);
    for a in 0..idx.len() {
        for b in (a + 1)..idx.len() {
            let d2 = (norms[a] * norms[a] + norms[b] * norms[b]
                - 2.0 * features[idx[a]].dot(&features[idx[b]]))
            .max(0.0);
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let median = dists[dists.len() / 2];
    1.0 / (2.0 * median * median)
}

/// Linear hinge-loss classifier over (mapped) dense features.
#[derive(Debug, Clone)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn score(&self, z: &[f64]) -> f64 {
        self.w.iter().zip(z).map(|(w, z)| w * z).sum::<f64>() + self.bias
    }

    /// Threshold exactly 0 predicts not_bad.
    pub fn predict(&self, z: &[f64]) -> Label {
        if self.score(z) > 0.0 {
            Label::Bad
        } else {
            Label::NotBad
        }
    }
}

/// The regularized weighted-hinge objective the SGD minimizes:
/// lambda/2 ||w||^2 + sum_i c_{y_i} max(0, 1 - y_i (w.z_i + b)).
pub fn objective(
    svm: &LinearSvm,
    features: &[Vec<f64>],
    labels: &[Label],
    lambda: f64,
    weights: ClassWeights,
) -> f64 {
    let reg = 0.5 * lambda * svm.w.iter().map(|w| w * w).sum::<f64>();
    let hinge: f64 = features
        .iter()
        .zip(labels)
        .map(|(z, &y)| weights.of(y) * (1.0 - y.sign() * svm.score(z)).max(0.0))
        .sum();
    reg + hinge
}

/// Pegasos-style SGD on the weighted hinge loss: per-example step 1/(lambda*t)
/// with t counting visits, weights shrunk by (1 - eta*lambda) every visit,
/// bias unregularized.
pub fn train_svm_sgd(
    features: &[Vec<f64>],
    labels: &[Label],
    epochs: usize,
    lambda: f64,
    weights: ClassWeights,
    seed: u64,
) -> Result<LinearSvm, FilterError> {
    if features.is_empty() {
        return Err(FilterError::EmptyGoldSet);
    }
    if !labels.contains(&Label::Bad) {
        return Err(FilterError::SingleClass("not_bad"));
    }
    if !labels.contains(&Label::NotBad) {
        return Err(FilterError::SingleClass("bad"));
    }
    let dim = features[0].len();
    let mut svm = LinearSvm { w: vec![0.0; dim], bias: 0.0 };
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0u64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let z = &features[i];
            let y = labels[i].sign();
            let margin = y * svm.score(z);
            let shrink = 1.0 - eta * lambda;
            for w in &mut svm.w {
                *w *= shrink;
            }
            if margin < 1.0 {
                let step = eta * weights.of(labels[i]) * y;
                for (w, zi) in svm.w.iter_mut().zip(z) {
                    *w += step * zi;
                }
                svm.bias += step;
            }
        }
    }
    Ok(svm)
}

/// Counts from one pass over a gold set: rows are predictions, columns are
/// truth. `fn_bad` is a bad response predicted not_bad (the miss that
/// matters).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fn_bad: usize,
    pub fp: usize,
    pub tp: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn record(&mut self, predicted: Label, actual: Label) {
        match (predicted, actual) {
            (Label::NotBad, Label::NotBad) => self.tn += 1,
            (Label::NotBad, Label::Bad) => self.fn_bad += 1,
            (Label::Bad, Label::NotBad) => self.fp += 1,
            (Label::Bad, Label::Bad) => self.tp += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tn + self.fn_bad + self.fp + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tn + self.tp, self.total())
    }

    /// Of responses predicted fine, how many were: tn / (tn + fn_bad).
    pub fn not_bad_precision(&self) -> f64 {
        ratio(self.tn, self.tn + self.fn_bad)
    }

    /// Of actually fine responses, how many passed: tn / (tn + fp).
    pub fn not_bad_recall(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn bad_precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn bad_recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_bad)
    }

    /// Share of bad responses the filter catches: tp / (tp + fn_bad).
    /// Identical to bad-class recall; named after its reporting role.
    pub fn bad_reduction(&self) -> f64 {
        self.bad_recall()
    }
}

/// Cross-validation result: the aggregate confusion matrix plus both
/// classes' metrics, since headline precision/recall describe the not_bad
/// class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub not_bad_precision: f64,
    pub not_bad_recall: f64,
    pub bad_precision: f64,
    pub bad_recall: f64,
    pub bad_reduction: f64,
}

impl From<ConfusionMatrix> for FilterReport {
    fn from(confusion: ConfusionMatrix) -> Self {
        FilterReport {
            confusion,
            accuracy: confusion.accuracy(),
            not_bad_precision: confusion.not_bad_precision(),
            not_bad_recall: confusion.not_bad_recall(),
            bad_precision: confusion.bad_precision(),
            bad_recall: confusion.bad_recall(),
            bad_reduction: confusion.bad_reduction(),
        }
    }
}

/// Per-class shuffled round-robin fold assignment. The round-robin cursor
/// continues across classes, so fold sizes differ by at most 1 overall and
/// each class's per-fold counts differ by at most 1.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<Vec<usize>, FilterError> {
    if k < 2 {
        return Err(FilterError::BadFoldCount(k));
    }
    if k > labels.len() {
        return Err(FilterError::TooManyFolds { folds: k, size: labels.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    let mut cursor = 0usize;
    for class in [Label::Bad, Label::NotBad] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = cursor % k;
            cursor += 1;
        }
    }
    Ok(assignment)
}

/// Filter training knobs; defaults follow the documented setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Random Fourier feature count.
    pub d: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { d: 1024, lambda: 1e-3, epochs: 50, seed: 1234 }
    }
}

/// K-fold cross-validation over already-mapped dense features: one model
/// per fold, predictions aggregated into a single confusion matrix.
pub fn cross_validate_features(
    features: &[Vec<f64>],
    labels: &[Label],
    k: usize,
    config: &FilterConfig,
) -> Result<ConfusionMatrix, FilterError> {
    let folds = stratified_kfold(labels, k, config.seed)?;
    let mut confusion = ConfusionMatrix::default();
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != fold).collect();
        let test_idx: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == fold).collect();
        if test_idx.is_empty() {
            continue;
        }
        let train_f: Vec<Vec<f64>> = train_idx.iter().map(|&i| features[i].clone()).collect();
        let train_l: Vec<Label> = train_idx.iter().map(|&i| labels[i]).collect();
        let weights = ClassWeights::inverse_frequency(&train_l)?;
        let svm = train_svm_sgd(
            &train_f,
            &train_l,
            config.epochs,
            config.lambda,
            weights,
            config.seed.wrapping_add(fold as u64 * 7919),
        )?;
        for &i in &test_idx {
            confusion.record(svm.predict(&features[i]), labels[i]);
        }
    }
    Ok(confusion)
}

/// Stratified k-fold cross-validation of the full pipeline on a labeled
/// gold set: shared tf-idf featurization, one RFF map, per-fold SVMs.
pub fn cross_validate(
    gold: &[LabeledReview],
    k: usize,
    config: &FilterConfig,
) -> Result<FilterReport, FilterError> {
    let feat = featurize_gold(gold, config)?;
    let confusion = cross_validate_features(&feat.features, &feat.labels, k, config)?;
    Ok(confusion.into())
}

/// Shared featurization of a gold set: one tf-idf index over its reviews,
/// one RFF map with a median-heuristic bandwidth.
struct GoldFeatures {
    features: Vec<Vec<f64>>,
    labels: Vec<Label>,
    index: TfIdfIndex,
    rff: RffMap,
}

fn featurize_gold(gold: &[LabeledReview], config: &FilterConfig) -> Result<GoldFeatures, FilterError> {
    if gold.is_empty() {
        return Err(FilterError::EmptyGoldSet);
    }
    let docs: Vec<Vec<String>> = gold.iter().map(|g| g.tokens.clone()).collect();
    let index = TfIdfIndex::build(&docs)?;
    let sparse: Vec<SparseVec> = gold.iter().map(|g| index.vectorize(&g.tokens)).collect();
    let gamma = median_heuristic_gamma(&sparse, config.seed);
    let rff = RffMap::new(index.terms().len(), config.d, gamma, config.seed)?;
    let features: Vec<Vec<f64>> = sparse.iter().map(|x| rff.map(x)).collect();
    let labels: Vec<Label> = gold.iter().map(|g| g.label).collect();
    Ok(GoldFeatures { features, labels, index, rff })
}

/// The trained filter: feature map plus linear weights.
#[derive(Debug, Clone)]
pub struct FilterModel {
    pub rff: RffMap,
    pub svm: LinearSvm,
    pub class_weights: ClassWeights,
}

impl FilterModel {
    /// Labels a tokenized review using the tf-idf index the model was
    /// trained with.
    pub fn predict(&self, index: &TfIdfIndex, tokens: &[String]) -> Label {
        self.svm.predict(&self.rff.map(&index.vectorize(tokens)))
    }
}

/// Trains a filter on the whole gold set. Returns the model and the tf-idf
/// index needed to featurize future reviews.
pub fn train_filter(
    gold: &[LabeledReview],
    config: &FilterConfig,
) -> Result<(FilterModel, TfIdfIndex), FilterError> {
    let feat = featurize_gold(gold, config)?;
    let class_weights = ClassWeights::inverse_frequency(&feat.labels)?;
    let svm = train_svm_sgd(
        &feat.features,
        &feat.labels,
        config.epochs,
        config.lambda,
        class_weights,
        config.seed,
    )?;
    Ok((FilterModel { rff: feat.rff, svm, class_weights }, feat.index))
}

#[derive(Serialize, Deserialize)]
struct FilterHeader {
    d: usize,
    n_features: usize,
    gamma: f64,
    bias: f64,
    class_weights: ClassWeights,
    terms: Vec<String>,
    idf: Vec<f64>,
}

/// Writes the model and its featurization vocabulary to one file: magic,
/// version, JSON header, then omega (column-major), beta, and w as
/// little-endian f64.
pub fn save_filter(
    path: &Path,
    model: &FilterModel,
    index: &TfIdfIndex,
) -> Result<(), FilterError> {
    let header = FilterHeader {
        d: model.rff.d,
        n_features: model.rff.n_features,
        gamma: model.rff.gamma,
        bias: model.svm.bias,
        class_weights: model.class_weights,
        terms: index.terms().to_vec(),
        idf: index.idf_table().to_vec(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let err = io_err(path);
    let mut w = BufWriter::new(File::create(path).map_err(&err)?);
    w.write_all(FILTER_MAGIC).map_err(&err)?;
    w.write_u32::<LittleEndian>(FILTER_VERSION).map_err(&err)?;
    w.write_u64::<LittleEndian>(header_json.len() as u64).map_err(&err)?;
    w.write_all(&header_json).map_err(&err)?;
    for &v in model.rff.omega.iter().chain(&model.rff.beta).chain(&model.svm.w) {
        w.write_f64::<LittleEndian>(v).map_err(&err)?;
    }
    w.flush().map_err(&err)?;
    Ok(())
}

/// Reads a file written by [`save_filter`].
pub fn load_filter(path: &Path) -> Result<(FilterModel, TfIdfIndex), FilterError> {
    let err = io_err(path);
    let format = |message: String| FilterError::ModelFormat {
        path: path.display().to_string(),
        message,
    };
    let mut r = BufReader::new(File::open(path).map_err(&err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(&err)?;
    if &magic != FILTER_MAGIC {
        return Err(format("bad magic; not a filter model".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(&err)?;
    if version != FILTER_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(&err)?;
    if header_len > 64 * 1024 * 1024 {
        return Err(format(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes).map_err(&err)?;
    let header: FilterHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| format(format!("header: {e}")))?;
    if header.d == 0 {
        return Err(format("feature dimension 0".into()));
    }
    if header.terms.len() != header.n_features || header.idf.len() != header.n_features {
        return Err(format("vocabulary tables do not match n_features".into()));
    }
    let mut read_block = |n: usize| -> Result<Vec<f64>, FilterError> {
        let mut out = vec![0.0f64; n];
        r.read_f64_into::<LittleEndian>(&mut out).map_err(&err)?;
        Ok(out)
    };
    let omega = read_block(header.d * header.n_features)?;
    let beta = read_block(header.d)?;
    let w = read_block(header.d)?;
    let index = TfIdfIndex::from_parts(header.terms, header.idf)?;
    let model = FilterModel {
        rff: RffMap {
            omega,
            beta,
            d: header.d,
            n_features: header.n_features,
            gamma: header.gamma,
        },
        svm: LinearSvm { w, bias: header.bias },
        class_weights: header.class_weights,
    };
    Ok((model, index))
}
