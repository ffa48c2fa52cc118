//! Decoding: greedy and length-normalized beam search over the trained
//! model's output distributions, plus attention-matrix export for
//! inspecting what the decoder attended to.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExample, Vocabulary, EOS_ID, SOS_ID};
use crate::model::{
    decode_step, encode_sources, init_decoder_state, ModelDims, ModelParams, SourceEncodings,
    SourceToggles, StepOutputs,
};
use crate::numerics::{Graph, Scalar, Tensor, TensorId};

/// Errors raised while decoding or exporting attention.
#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
    #[error("decoder produced no step outputs; nothing to export")]
    StepsAbsent,
    #[error("axis labels for {axis} have length {labels}, attention rows have length {width}")]
    LabelMismatch { axis: &'static str, labels: usize, width: usize },
    #[error(
        "model was trained with vocabulary {expected} but the loaded vocabulary hashes to {found}"
    )]
    VocabMismatch { expected: String, found: String },
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl GenerationError {
    /// True when the failure is a NaN/Inf blow-up rather than a usage error.
    pub fn is_numerical(&self) -> bool {
        match self {
            GenerationError::Model(e) => e.is_numerical(),
            GenerationError::Numerics(e) => e.is_numerical(),
            _ => false,
        }
    }
}

/// Why decoding stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLen,
}

/// Attention and gate values for one decode step, converted to f64 for
/// inspection and export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSummary {
    /// Surface form emitted at this step (the end marker included).
    pub token: String,
    pub alpha_review: Vec<f64>,
    /// Empty when the example has no description (or it is toggled off).
    pub alpha_desc: Vec<f64>,
    /// Response-level attention per retrieved slot; empty slots hold 0.
    pub alpha_resp_lvl: Vec<f64>,
    /// Description share of the fused copy distribution, when fusion ran.
    pub gamma: Option<f64>,
    /// Generation-gate value, when fusion ran.
    pub theta: Option<f64>,
}

/// A decoded response plus everything needed to audit it.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// Emitted surface tokens; the end marker and PAD never appear.
    pub tokens: Vec<String>,
    /// Raw emitted ids per step, including the final end marker when
    /// decoding stopped at one.
    pub emitted_ids: Vec<usize>,
    /// One summary per decode step, aligned with `emitted_ids`.
    pub steps: Vec<StepSummary>,
    pub termination: Termination,
    /// Sum of log-probabilities of the emitted ids.
    pub sum_logp: f64,
    /// `sum_logp` divided by the number of steps.
    pub normalized_logp: f64,
}

/// Fails when a checkpoint's vocabulary hash does not match the vocabulary
/// about to be used for encoding and decoding.
pub fn ensure_vocab_hash(expected: &str, vocab: &Vocabulary) -> Result<(), GenerationError> {
    let found = vocab.content_hash();
    if found != expected {
        return Err(GenerationError::VocabMismatch { expected: expected.to_owned(), found });
    }
    Ok(())
}

fn summarize<F: Scalar>(
    g: &Graph<F>,
    out: &StepOutputs,
    enc: &SourceEncodings,
    token: String,
) -> StepSummary {
    let row = |id: TensorId| -> Vec<f64> { g.value(id).data().iter().map(|v| v.as_f64()).collect() };
    let alpha_resp_lvl = match out.alpha_resp_lvl {
        Some(lvl) => {
            let present = row(lvl);
            enc.resp_slots
                .iter()
                .map(|slot| slot.map(|j| present[j]).unwrap_or(0.0))
                .collect()
        }
        None => Vec::new(),
    };
    StepSummary {
        token,
        alpha_review: row(out.alpha_review),
        alpha_desc: out.alpha_desc.map(&row).unwrap_or_default(),
        alpha_resp_lvl,
        gamma: out.gamma.map(|id| g.value(id).item().as_f64()),
        theta: out.theta.map(|id| g.value(id).item().as_f64()),
    }
}

fn surface(vocab: &Vocabulary, example: &EncodedExample, id: usize) -> String {
    vocab
        .decode(&[id], Some(&example.ext_map))
        .pop()
        .expect("decode of one id yields one token")
}

fn argmax_lowest_id<F: Scalar>(dist: &Tensor<F>) -> usize {
    let mut best = 0usize;
    let mut best_v = dist.get(0, 0);
    for (i, &v) in dist.data().iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

struct Session<F: Scalar> {
    g: Graph<F>,
    bound: ModelParams<TensorId>,
    enc: Option<SourceEncodings>,
}

impl<F: Scalar> Session<F> {
    fn new(
        params: &ModelParams<Tensor<F>>,
        dims: &ModelDims,
        example: &EncodedExample,
        toggles: SourceToggles,
    ) -> Result<Self, GenerationError> {
        let mut g = Graph::new(0);
        let bound = params.map(&mut |t| g.leaf(t.clone()));
        let enc = encode_sources(&mut g, &bound, dims, example, toggles, 0.0, false)?;
        Ok(Session { g, bound, enc: Some(enc) })
    }

    fn enc(&self) -> &SourceEncodings {
        self.enc.as_ref().expect("encodings live as long as the session")
    }

    fn initial_state(&mut self) -> Result<Vec<TensorId>, GenerationError> {
        let enc = self.enc.take().expect("encodings present");
        let state = init_decoder_state(&mut self.g, &self.bound, &enc)?;
        self.enc = Some(enc);
        Ok(state)
    }

    fn step(
        &mut self,
        state: &[TensorId],
        input_id: usize,
    ) -> Result<StepOutputs, GenerationError> {
        let enc = self.enc.take().expect("encodings present");
        let out = decode_step(&mut self.g, &self.bound, &enc, state, input_id, 0.0, false);
        self.enc = Some(enc);
        Ok(out?)
    }
}

/// Greedy decoding: the argmax of the output distribution at each step,
/// lowest id winning ties, fed back as the next input (extended ids fall
/// back to the UNK embedding). Stops at the end marker or `max_len` steps.
pub fn greedy_decode<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    dims: &ModelDims,
    example: &EncodedExample,
    toggles: SourceToggles,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<GenerationResult, GenerationError> {
    let mut session = Session::new(params, dims, example, toggles)?;
    let mut state = session.initial_state()?;
    let mut prev = SOS_ID;
    let mut emitted_ids = Vec::new();
    let mut steps = Vec::new();
    let mut sum_logp = 0.0;
    let mut termination = Termination::MaxLen;
    for _ in 0..max_len {
        let out = session.step(&state, prev)?;
        let dist = session.g.value(out.p_final);
        let id = argmax_lowest_id(dist);
        sum_logp += dist.get(0, id).as_f64().max(f64::MIN_POSITIVE).ln();
        let token = surface(vocab, example, id);
        steps.push(summarize(&session.g, &out, session.enc(), token));
        emitted_ids.push(id);
        if id == EOS_ID {
            termination = Termination::Eos;
            break;
        }
        state = out.state;
        prev = id;
    }
    let tokens = emitted_ids
        .iter()
        .filter(|&&id| id != EOS_ID)
        .map(|&id| surface(vocab, example, id))
        .collect();
    let normalized = if steps.is_empty() { 0.0 } else { sum_logp / steps.len() as f64 };
    Ok(GenerationResult {
        tokens,
        emitted_ids,
        steps,
        termination,
        sum_logp,
        normalized_logp: normalized,
    })
}

/// Forces `ids` through the decoder, returning the summed log-probability
/// of exactly that sequence and the per-step summaries.
pub fn force_decode<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    dims: &ModelDims,
    example: &EncodedExample,
    toggles: SourceToggles,
    ids: &[usize],
    vocab: &Vocabulary,
) -> Result<(f64, Vec<StepSummary>), GenerationError> {
    let mut session = Session::new(params, dims, example, toggles)?;
    let mut state = session.initial_state()?;
    let mut prev = SOS_ID;
    let mut sum_logp = 0.0;
    let mut steps = Vec::new();
    for &id in ids {
        let out = session.step(&state, prev)?;
        let dist = session.g.value(out.p_final);
        sum_logp += dist.get(0, id).as_f64().max(f64::MIN_POSITIVE).ln();
        let token = surface(vocab, example, id);
        steps.push(summarize(&session.g, &out, session.enc(), token));
        state = out.state;
        prev = id;
    }
    Ok((sum_logp, steps))
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    state: Vec<TensorId>,
    prev: usize,
    sum_logp: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        if self.ids.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.sum_logp / self.ids.len() as f64
        }
    }
}

/// Beam search with final ranking by length-normalized log-probability
/// (sum log P / length). Width 1 reduces to greedy decoding.
pub fn beam_decode<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    dims: &ModelDims,
    example: &EncodedExample,
    toggles: SourceToggles,
    width: usize,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<GenerationResult, GenerationError> {
    if width == 0 {
        return Err(GenerationError::ZeroBeamWidth);
    }
    let mut session = Session::new(params, dims, example, toggles)?;
    let initial = session.initial_state()?;
    let mut active = vec![Hypothesis { ids: Vec::new(), state: initial, prev: SOS_ID, sum_logp: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        let mut stepped: Vec<(StepOutputs, Hypothesis)> = Vec::new();
        for hyp in active.drain(..) {
            let out = session.step(&hyp.state, hyp.prev)?;
            let dist = session.g.value(out.p_final);
            let hyp_idx = stepped.len();
            // Per-hypothesis shortlist: the global top `width` extensions
            // are a subset of each hypothesis's top `width`.
            let mut local: Vec<(usize, f64)> = Vec::with_capacity(width + 1);
            for (id, &p) in dist.data().iter().enumerate() {
                let logp = p.as_f64().max(f64::MIN_POSITIVE).ln();
                let pos = local.partition_point(|&(_, l)| l >= logp);
                if pos < width {
                    local.insert(pos, (id, logp));
                    local.truncate(width);
                }
            }
            for (id, logp) in local {
                candidates.push((hyp_idx, id, hyp.sum_logp + logp));
            }
            stepped.push((out, hyp));
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("log-probabilities are never NaN")
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        for &(hyp_idx, id, sum_logp) in candidates.iter().take(width) {
            let (out, hyp) = &stepped[hyp_idx];
            let mut ids = hyp.ids.clone();
            ids.push(id);
            let next = Hypothesis { ids, state: out.state.clone(), prev: id, sum_logp };
            if id == EOS_ID {
                finished.push(next);
            } else {
                active.push(next);
            }
        }
    }

    let best = finished
        .into_iter()
        .chain(active)
        .max_by(|a, b| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .expect("normalized scores are never NaN")
                .then_with(|| b.ids.cmp(&a.ids))
        })
        .expect("at least one hypothesis survives");

    let termination = if best.ids.last() == Some(&EOS_ID) {
        Termination::Eos
    } else {
        Termination::MaxLen
    };
    let (sum_logp, steps) = force_decode(params, dims, example, toggles, &best.ids, vocab)?;
    let tokens = best
        .ids
        .iter()
        .filter(|&&id| id != EOS_ID)
        .map(|&id| surface(vocab, example, id))
        .collect();
    let normalized = if best.ids.is_empty() { 0.0 } else { sum_logp / best.ids.len() as f64 };
    Ok(GenerationResult {
        tokens,
        emitted_ids: best.ids,
        steps,
        termination,
        sum_logp,
        normalized_logp: normalized,
    })
}

/// Attention matrices for heatmap rendering: one row per decode step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentDump {
    /// Row labels: the token emitted at each step.
    pub generated: Vec<String>,
    /// Column labels for the review matrix.
    pub review_tokens: Vec<String>,
    /// (steps x review length) attention over review tokens.
    pub review: Vec<Vec<f64>>,
    /// Column labels for the description matrix; empty when absent.
    pub description_tokens: Vec<String>,
    /// (steps x description length); empty when the example has none.
    pub description: Vec<Vec<f64>>,
    /// (steps x K) response-level attention; empty when nothing was
    /// retrieved.
    pub retrieved: Vec<Vec<f64>>,
}

/// Builds the alignment matrices from a decode that kept step outputs and
/// writes them to `out` as JSON.
pub fn export_attention(
    result: &GenerationResult,
    review_tokens: &[String],
    description_tokens: &[String],
    out: &Path,
) -> Result<AlignmentDump, GenerationError> {
    if result.steps.is_empty() {
        return Err(GenerationError::StepsAbsent);
    }
    let review_width = result.steps[0].alpha_review.len();
    if review_tokens.len() != review_width {
        return Err(GenerationError::LabelMismatch {
            axis: "review",
            labels: review_tokens.len(),
            width: review_width,
        });
    }
    let desc_width = result.steps[0].alpha_desc.len();
    if desc_width > 0 && description_tokens.len() != desc_width {
        return Err(GenerationError::LabelMismatch {
            axis: "description",
            labels: description_tokens.len(),
            width: desc_width,
        });
    }
    let dump = AlignmentDump {
        generated: result.steps.iter().map(|s| s.token.clone()).collect(),
        review_tokens: review_tokens.to_vec(),
        review: result.steps.iter().map(|s| s.alpha_review.clone()).collect(),
        description_tokens: if desc_width > 0 {
            description_tokens.to_vec()
        } else {
            Vec::new()
        },
        description: if desc_width > 0 {
            result.steps.iter().map(|s| s.alpha_desc.clone()).collect()
        } else {
            Vec::new()
        },
        retrieved: if result.steps[0].alpha_resp_lvl.is_empty() {
            Vec::new()
        } else {
            result.steps.iter().map(|s| s.alpha_resp_lvl.clone()).collect()
        },
    };
    let json = serde_json::to_string_pretty(&dump)?;
    std::fs::write(out, json).map_err(|e| GenerationError::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    Ok(dump)
}

/// One generated row of the `generate` output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedRow {
    pub review: String,
    pub generated_response: String,
    pub termination: Termination,
}

/// Greedy unless a beam width > 1 is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

impl DecodeStrategy {
    pub fn decode<F: Scalar>(
        self,
        params: &ModelParams<Tensor<F>>,
        dims: &ModelDims,
        example: &EncodedExample,
        toggles: SourceToggles,
        max_len: usize,
        vocab: &Vocabulary,
    ) -> Result<GenerationResult, GenerationError> {
        match self {
            DecodeStrategy::Greedy => {
                greedy_decode(params, dims, example, toggles, max_len, vocab)
            }
            DecodeStrategy::Beam(width) => {
                beam_decode(params, dims, example, toggles, width, max_len, vocab)
            }
        }
    }
}
