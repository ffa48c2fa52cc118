//! Parameter container for the generator. Generic over the payload type so
//! the same structure holds stored tensors (`ModelParams<Tensor<F>>`) and
//! graph handles after binding (`ModelParams<TensorId>`). Traversal order is
//! fixed and shared by `map`, `for_each`, and `for_each_mut`; optimizer
//! state and checkpoints both rely on it.

use std::io::BufRead;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Vocabulary, NUM_SPECIALS};
use crate::numerics::{GruWeights, Scalar, Tensor};

use super::ModelError;

/// Additive attention parameters: score_i = v . tanh(W_h h_i + W_s s).
/// `w_h` is (2H x H), `w_s` (H x H), `v` (H x 1); the score width equals the
/// decoder width.
#[derive(Debug, Clone)]
pub struct AttentionHead<T> {
    pub w_h: T,
    pub w_s: T,
    pub v: T,
}

impl<T> AttentionHead<T> {
    pub const FIELD_NAMES: [&'static str; 3] = ["w_h", "w_s", "v"];

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionHead<U> {
        AttentionHead { w_h: f(&self.w_h), w_s: f(&self.w_s), v: f(&self.v) }
    }

    fn fields(&self) -> [&T; 3] {
        [&self.w_h, &self.w_s, &self.v]
    }

    fn fields_mut(&mut self) -> [&mut T; 3] {
        [&mut self.w_h, &mut self.w_s, &mut self.v]
    }
}

/// One bidirectional GRU layer: independent forward and backward cells.
#[derive(Debug, Clone)]
pub struct BiGruLayer<T> {
    pub fwd: GruWeights<T>,
    pub bwd: GruWeights<T>,
}

/// Stacked bidirectional encoder. Layer 0 consumes embeddings; every later
/// layer consumes the previous layer's concatenated (2H) outputs.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub layers: Vec<BiGruLayer<T>>,
}

/// Maps the review encoder's final states to one decoder layer's initial
/// state: s_0 = tanh([h_fwd, h_bwd] W + b).
#[derive(Debug, Clone)]
pub struct Bridge<T> {
    pub w: T,
    pub b: T,
}

/// Model shape. `hidden` is the per-direction encoder width and the decoder
/// width; encoder outputs are 2*hidden wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub emb: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab < NUM_SPECIALS {
            return Err(ModelError::ZeroDim("vocab"));
        }
        if self.emb == 0 {
            return Err(ModelError::ZeroDim("emb"));
        }
        if self.hidden == 0 {
            return Err(ModelError::ZeroDim("hidden"));
        }
        if self.layers == 0 {
            return Err(ModelError::ZeroDim("layers"));
        }
        Ok(())
    }
}

/// Every learnable tensor in the generator.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    /// (vocab x emb) embedding table shared by all encoders and the decoder.
    pub embedding: T,
    pub review_enc: Encoder<T>,
    pub desc_enc: Encoder<T>,
    /// One encoder shared by all retrieved responses.
    pub resp_enc: Encoder<T>,
    /// One bridge per decoder layer, all fed from the review encoder's top
    /// layer final states.
    pub bridges: Vec<Bridge<T>>,
    pub decoder: Vec<GruWeights<T>>,
    pub attn_review: AttentionHead<T>,
    pub attn_desc: AttentionHead<T>,
    /// Token-level attention inside each retrieved response.
    pub attn_resp_tok: AttentionHead<T>,
    /// Response-level attention across the retrieved responses' contexts.
    pub attn_resp_lvl: AttentionHead<T>,
    /// Fusion attention over the description and retrieved contexts.
    pub attn_fuse: AttentionHead<T>,
    /// Two-layer output projection [s_t, c_t] -> vocab logits.
    pub proj_w1: T,
    pub proj_b1: T,
    pub proj_w2: T,
    pub proj_b2: T,
    /// Generation-vs-copy gate inputs: fused context, state, decoder input.
    pub gate_w_ctx: T,
    pub gate_w_state: T,
    pub gate_w_input: T,
    pub gate_b: T,
}

fn map_encoder<T, U>(enc: &Encoder<T>, f: &mut impl FnMut(&T) -> U) -> Encoder<U> {
    Encoder {
        layers: enc
            .layers
            .iter()
            .map(|l| BiGruLayer { fwd: l.fwd.map(f), bwd: l.bwd.map(f) })
            .collect(),
    }
}

impl<T> ModelParams<T> {
    /// Rebuilds the structure with every tensor transformed, visiting fields
    /// in the same order as [`ModelParams::for_each`].
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embedding: f(&self.embedding),
            review_enc: map_encoder(&self.review_enc, f),
            desc_enc: map_encoder(&self.desc_enc, f),
            resp_enc: map_encoder(&self.resp_enc, f),
            bridges: self
                .bridges
                .iter()
                .map(|b| Bridge { w: f(&b.w), b: f(&b.b) })
                .collect(),
            decoder: self.decoder.iter().map(|d| d.map(f)).collect(),
            attn_review: self.attn_review.map(f),
            attn_desc: self.attn_desc.map(f),
            attn_resp_tok: self.attn_resp_tok.map(f),
            attn_resp_lvl: self.attn_resp_lvl.map(f),
            attn_fuse: self.attn_fuse.map(f),
            proj_w1: f(&self.proj_w1),
            proj_b1: f(&self.proj_b1),
            proj_w2: f(&self.proj_w2),
            proj_b2: f(&self.proj_b2),
            gate_w_ctx: f(&self.gate_w_ctx),
            gate_w_state: f(&self.gate_w_state),
            gate_w_input: f(&self.gate_w_input),
            gate_b: f(&self.gate_b),
        }
    }

    /// Visits every tensor with its canonical dotted name, in the fixed
    /// traversal order.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("embedding".into(), &self.embedding);
        for (enc_name, enc) in [
            ("review_enc", &self.review_enc),
            ("desc_enc", &self.desc_enc),
            ("resp_enc", &self.resp_enc),
        ] {
            for (i, layer) in enc.layers.iter().enumerate() {
                for (dir, cell) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                    for (name, field) in
                        GruWeights::<T>::FIELD_NAMES.iter().zip(cell.fields())
                    {
                        f(format!("{enc_name}.l{i}.{dir}.{name}"), field);
                    }
                }
            }
        }
        for (i, bridge) in self.bridges.iter().enumerate() {
            f(format!("bridge.l{i}.w"), &bridge.w);
            f(format!("bridge.l{i}.b"), &bridge.b);
        }
        for (i, cell) in self.decoder.iter().enumerate() {
            for (name, field) in GruWeights::<T>::FIELD_NAMES.iter().zip(cell.fields()) {
                f(format!("decoder.l{i}.{name}"), field);
            }
        }
        for (head_name, head) in [
            ("attn_review", &self.attn_review),
            ("attn_desc", &self.attn_desc),
            ("attn_resp_tok", &self.attn_resp_tok),
            ("attn_resp_lvl", &self.attn_resp_lvl),
            ("attn_fuse", &self.attn_fuse),
        ] {
            for (name, field) in AttentionHead::<T>::FIELD_NAMES.iter().zip(head.fields())
            {
                f(format!("{head_name}.{name}"), field);
            }
        }
        f("proj.w1".into(), &self.proj_w1);
        f("proj.b1".into(), &self.proj_b1);
        f("proj.w2".into(), &self.proj_w2);
        f("proj.b2".into(), &self.proj_b2);
        f("gate.w_ctx".into(), &self.gate_w_ctx);
        f("gate.w_state".into(), &self.gate_w_state);
        f("gate.w_input".into(), &self.gate_w_input);
        f("gate.b".into(), &self.gate_b);
    }

    /// Mutable variant of [`ModelParams::for_each`], same order.
    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        f("embedding".into(), &mut self.embedding);
        for (enc_name, enc) in [
            ("review_enc", &mut self.review_enc),
            ("desc_enc", &mut self.desc_enc),
            ("resp_enc", &mut self.resp_enc),
        ] {
            for (i, layer) in enc.layers.iter_mut().enumerate() {
                for (dir, cell) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                    for (name, field) in
                        GruWeights::<T>::FIELD_NAMES.iter().zip(cell.fields_mut())
                    {
                        f(format!("{enc_name}.l{i}.{dir}.{name}"), field);
                    }
                }
            }
        }
        for (i, bridge) in self.bridges.iter_mut().enumerate() {
            f(format!("bridge.l{i}.w"), &mut bridge.w);
            f(format!("bridge.l{i}.b"), &mut bridge.b);
        }
        for (i, cell) in self.decoder.iter_mut().enumerate() {
            for (name, field) in
                GruWeights::<T>::FIELD_NAMES.iter().zip(cell.fields_mut())
            {
                f(format!("decoder.l{i}.{name}"), field);
            }
        }
        for (head_name, head) in [
            ("attn_review", &mut self.attn_review),
            ("attn_desc", &mut self.attn_desc),
            ("attn_resp_tok", &mut self.attn_resp_tok),
            ("attn_resp_lvl", &mut self.attn_resp_lvl),
            ("attn_fuse", &mut self.attn_fuse),
        ] {
            for (name, field) in
                AttentionHead::<T>::FIELD_NAMES.iter().zip(head.fields_mut())
            {
                f(format!("{head_name}.{name}"), field);
            }
        }
        f("proj.w1".into(), &mut self.proj_w1);
        f("proj.b1".into(), &mut self.proj_b1);
        f("proj.w2".into(), &mut self.proj_w2);
        f("proj.b2".into(), &mut self.proj_b2);
        f("gate.w_ctx".into(), &mut self.gate_w_ctx);
        f("gate.w_state".into(), &mut self.gate_w_state);
        f("gate.w_input".into(), &mut self.gate_w_input);
        f("gate.b".into(), &mut self.gate_b);
    }

    /// (name, tensor) pairs in traversal order.
    pub fn named_fields(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name, t)));
        out
    }
}

fn xavier<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| F::from_f64(rng.gen_range(-limit..limit)))
}

fn init_gru<F: Scalar>(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruWeights<Tensor<F>> {
    GruWeights {
        w_z: xavier(rng, input, hidden),
        u_z: xavier(rng, hidden, hidden),
        b_z: Tensor::zeros(1, hidden),
        w_r: xavier(rng, input, hidden),
        u_r: xavier(rng, hidden, hidden),
        b_r: Tensor::zeros(1, hidden),
        w_h: xavier(rng, input, hidden),
        u_h: xavier(rng, hidden, hidden),
        b_h: Tensor::zeros(1, hidden),
    }
}

fn init_encoder<F: Scalar>(rng: &mut ChaCha8Rng, dims: &ModelDims) -> Encoder<Tensor<F>> {
    let layers = (0..dims.layers)
        .map(|l| {
            let input = if l == 0 { dims.emb } else { 2 * dims.hidden };
            BiGruLayer {
                fwd: init_gru(rng, input, dims.hidden),
                bwd: init_gru(rng, input, dims.hidden),
            }
        })
        .collect();
    Encoder { layers }
}

fn init_head<F: Scalar>(rng: &mut ChaCha8Rng, hidden: usize) -> AttentionHead<Tensor<F>> {
    AttentionHead {
        w_h: xavier(rng, 2 * hidden, hidden),
        w_s: xavier(rng, hidden, hidden),
        v: xavier(rng, hidden, 1),
    }
}

impl<F: Scalar> ModelParams<Tensor<F>> {
    /// Seeded initialization: Xavier-uniform weight matrices, zero biases,
    /// uniform(-0.1, 0.1) embeddings.
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let embedding =
            Tensor::from_fn(dims.vocab, dims.emb, |_, _| F::from_f64(rng.gen_range(-0.1..0.1)));
        let h = dims.hidden;
        Ok(ModelParams {
            embedding,
            review_enc: init_encoder(rng, dims),
            desc_enc: init_encoder(rng, dims),
            resp_enc: init_encoder(rng, dims),
            bridges: (0..dims.layers)
                .map(|_| Bridge { w: xavier(rng, 2 * h, h), b: Tensor::zeros(1, h) })
                .collect(),
            decoder: (0..dims.layers)
                .map(|l| {
                    let input = if l == 0 { dims.emb } else { h };
                    init_gru(rng, input, h)
                })
                .collect(),
            attn_review: init_head(rng, h),
            attn_desc: init_head(rng, h),
            attn_resp_tok: init_head(rng, h),
            attn_resp_lvl: init_head(rng, h),
            attn_fuse: init_head(rng, h),
            proj_w1: xavier(rng, 3 * h, h),
            proj_b1: Tensor::zeros(1, h),
            proj_w2: xavier(rng, h, dims.vocab),
            proj_b2: Tensor::zeros(1, dims.vocab),
            gate_w_ctx: xavier(rng, 2 * h, 1),
            gate_w_state: xavier(rng, h, 1),
            gate_w_input: xavier(rng, dims.emb, 1),
            gate_b: Tensor::zeros(1, 1),
        })
    }

    /// All-zero parameters with the same shapes as [`ModelParams::init`].
    /// Useful for shape-only paths and for tests exercising the uniform
    /// zero-logit case.
    pub fn zeros(dims: &ModelDims) -> Result<Self, ModelError> {
        let mut params = Self::init(dims, 0)?;
        params.for_each_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = F::zero();
            }
        });
        Ok(params)
    }

    /// Dimensions recovered from tensor shapes.
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embedding.rows(),
            emb: self.embedding.cols(),
            hidden: self.decoder[0].u_z.rows(),
            layers: self.decoder.len(),
        }
    }

    /// Overwrites embedding rows for vocabulary tokens found in a
    /// whitespace-separated text file (`token v1 .. vD` per line). Returns
    /// how many rows were replaced; tokens absent from the vocabulary are
    /// skipped.
    pub fn load_pretrained_embeddings(
        &mut self,
        path: &Path,
        vocab: &Vocabulary,
    ) -> Result<usize, ModelError> {
        let emb_dim = self.embedding.cols();
        let file = std::fs::File::open(path).map_err(|e| ModelError::EmbeddingFormat {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut loaded = 0;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ModelError::EmbeddingFormat {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line has a first field");
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| ModelError::EmbeddingFormat {
                        path: path.display().to_string(),
                        message: format!("line {}: {e}", i + 1),
                    })
                })
                .collect::<Result<_, _>>()?;
            if values.len() != emb_dim {
                return Err(ModelError::EmbeddingDim { expected: emb_dim, got: values.len() });
            }
            if let Some(id) = vocab.id(token) {
                for (j, v) in values.into_iter().enumerate() {
                    self.embedding.set(id, j, F::from_f64(v));
                }
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}
