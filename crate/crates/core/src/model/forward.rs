//! Forward pass: source encoding, the attentive decoder step, and the
//! teacher-forced training loss.
//!
//! Output widths follow the example's extended id space: the first `vocab`
//! columns are generation probabilities, the remaining columns belong to
//! this example's out-of-vocabulary source tokens and can only receive copy
//! mass. The review is encoded and attended for generation but never copied
//! from, so review-only out-of-vocabulary columns stay at exactly zero.

use crate::corpus::{EncodedExample, PAD_ID, SOS_ID, UNK_ID};
use crate::numerics::{gru_cell, Graph, NumericsError, Scalar, Tensor, TensorId};

use super::params::{AttentionHead, Encoder, ModelDims, ModelParams};
use super::ModelError;

/// Probability floor inside log() when assembling the loss; keeps steps with
/// (numerically) zero target mass finite with a dead gradient instead of
/// producing -inf.
pub const LOG_FLOOR: f64 = 1e-12;

/// Which auxiliary sources the decoder may copy from. Disabling both leaves
/// a plain attentive encoder-decoder over the review.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceToggles {
    pub description: bool,
    pub retrieved: bool,
}

impl SourceToggles {
    pub const FULL: SourceToggles = SourceToggles { description: true, retrieved: true };
    pub const NO_RETRIEVED: SourceToggles = SourceToggles { description: true, retrieved: false };
    pub const NO_DESCRIPTION: SourceToggles =
        SourceToggles { description: false, retrieved: true };
    pub const REVIEW_ONLY: SourceToggles = SourceToggles { description: false, retrieved: false };
}

impl Default for SourceToggles {
    fn default() -> Self {
        SourceToggles::FULL
    }
}

/// Encoded sources bound into a graph, ready for decoding.
#[derive(Debug)]
pub struct SourceEncodings {
    /// Review encoder outputs, (L_review x 2H).
    pub review: TensorId,
    review_final_fwd: TensorId,
    review_final_bwd: TensorId,
    /// Description encoder outputs and the aligned extended ids.
    pub desc: Option<(TensorId, Vec<usize>)>,
    /// Encoded non-empty retrieved responses with their extended ids.
    pub resp: Vec<(TensorId, Vec<usize>)>,
    /// Maps each original retrieved slot to its index in `resp`; `None` for
    /// empty slots (padding when retrieval found fewer documents).
    pub resp_slots: Vec<Option<usize>>,
    /// Generation vocabulary size (first columns of every distribution).
    pub vocab: usize,
    /// Full distribution width: vocab plus this example's extended tokens.
    pub width: usize,
}

/// Everything one decoder step produces. Values live in the graph; read
/// them through [`Graph::value`].
#[derive(Debug, Clone)]
pub struct StepOutputs {
    /// Updated per-layer decoder states.
    pub state: Vec<TensorId>,
    /// Generation distribution over the vocabulary, PAD masked to zero.
    pub p_vocab: TensorId,
    /// Copy distribution over the description (full width).
    pub p_desc: Option<TensorId>,
    /// Copy distribution over the retrieved responses (full width).
    pub p_resp: Option<TensorId>,
    /// Fused copy distribution (full width).
    pub p_fuse: Option<TensorId>,
    /// Final output distribution (full width).
    pub p_final: TensorId,
    /// Description share of the fused copy distribution.
    pub gamma: Option<TensorId>,
    /// Generation gate: probability mass given to `p_vocab`.
    pub theta: Option<TensorId>,
    pub alpha_review: TensorId,
    pub alpha_desc: Option<TensorId>,
    /// Token-level attention per original retrieved slot.
    pub alpha_resp_tok: Vec<Option<TensorId>>,
    /// Response-level attention over the present retrieved slots, in
    /// `SourceEncodings::resp` order.
    pub alpha_resp_lvl: Option<TensorId>,
}

fn lookup_ids(ids: &[usize], vocab: usize) -> Vec<usize> {
    ids.iter().map(|&i| if i >= vocab { UNK_ID } else { i }).collect()
}

/// Runs one stacked bidirectional encoder over pre-embedded inputs.
/// Returns (L x 2H) outputs plus the top layer's final forward and backward
/// states.
fn run_encoder<F: Scalar>(
    g: &mut Graph<F>,
    enc: &Encoder<TensorId>,
    embedded: TensorId,
    hidden: usize,
) -> Result<(TensorId, TensorId, TensorId), NumericsError> {
    let len = g.value(embedded).rows();
    let mut input = embedded;
    let mut final_fwd = embedded;
    let mut final_bwd = embedded;
    for layer in &enc.layers {
        let mut fwd_states = Vec::with_capacity(len);
        let mut h = g.leaf(Tensor::zeros(1, hidden));
        for i in 0..len {
            let x = g.slice_rows(input, i, i + 1)?;
            h = gru_cell(g, x, h, &layer.fwd)?;
            fwd_states.push(h);
        }
        final_fwd = h;
        let mut bwd_states = vec![h; len];
        let mut h = g.leaf(Tensor::zeros(1, hidden));
        for i in (0..len).rev() {
            let x = g.slice_rows(input, i, i + 1)?;
            h = gru_cell(g, x, h, &layer.bwd)?;
            bwd_states[i] = h;
        }
        final_bwd = h;
        let fwd = g.stack_rows(&fwd_states)?;
        let bwd = g.stack_rows(&bwd_states)?;
        input = g.concat_cols(fwd, bwd)?;
    }
    Ok((input, final_fwd, final_bwd))
}

/// Embeds and encodes the review plus whichever auxiliary sources are
/// non-empty and enabled.
pub fn encode_sources<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<TensorId>,
    dims: &ModelDims,
    example: &EncodedExample,
    toggles: SourceToggles,
    dropout: f64,
    train: bool,
) -> Result<SourceEncodings, ModelError> {
    if example.review_ids.is_empty() {
        return Err(ModelError::EmptyReview);
    }
    let embed = |g: &mut Graph<F>, ids: &[usize]| -> Result<TensorId, NumericsError> {
        let emb = g.embedding_lookup(params.embedding, &lookup_ids(ids, dims.vocab))?;
        g.dropout(emb, dropout, train)
    };

    let review_emb = embed(g, &example.review_ids)?;
    let (review, review_final_fwd, review_final_bwd) =
        run_encoder(g, &params.review_enc, review_emb, dims.hidden)?;

    let desc = if toggles.description && !example.description_ids.is_empty() {
        let emb = embed(g, &example.description_ids)?;
        let (out, _, _) = run_encoder(g, &params.desc_enc, emb, dims.hidden)?;
        Some((out, example.description_ids.clone()))
    } else {
        None
    };

    let mut resp = Vec::new();
    let mut resp_slots = Vec::with_capacity(example.retrieved_ids.len());
    if toggles.retrieved {
        for ids in &example.retrieved_ids {
            if ids.is_empty() {
                resp_slots.push(None);
                continue;
            }
            let emb = embed(g, ids)?;
            let (out, _, _) = run_encoder(g, &params.resp_enc, emb, dims.hidden)?;
            resp_slots.push(Some(resp.len()));
            resp.push((out, ids.clone()));
        }
    } else {
        resp_slots.resize(example.retrieved_ids.len(), None);
    }

    Ok(SourceEncodings {
        review,
        review_final_fwd,
        review_final_bwd,
        desc,
        resp,
        resp_slots,
        vocab: dims.vocab,
        width: example.id_space(),
    })
}

/// Initial decoder states, one per layer, each bridged from the review
/// encoder's top-layer final states.
pub fn init_decoder_state<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<TensorId>,
    enc: &SourceEncodings,
) -> Result<Vec<TensorId>, NumericsError> {
    let finals = g.concat_cols(enc.review_final_fwd, enc.review_final_bwd)?;
    params
        .bridges
        .iter()
        .map(|bridge| {
            let z = g.matmul(finals, bridge.w)?;
            let z = g.add_bias(z, bridge.b)?;
            Ok(g.tanh(z))
        })
        .collect()
}

/// Additive attention of a (1 x H) query over (L x 2H) states. Returns the
/// (1 x L) weights and the (1 x 2H) context.
pub fn attend<F: Scalar>(
    g: &mut Graph<F>,
    head: &AttentionHead<TensorId>,
    states: TensorId,
    query: TensorId,
) -> Result<(TensorId, TensorId), NumericsError> {
    let wh = g.matmul(states, head.w_h)?;
    let ws = g.matmul(query, head.w_s)?;
    let pre = g.add_bias(wh, ws)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, head.v)?;
    let row = g.transpose(scores);
    let alpha = g.masked_softmax(row, None)?;
    let ctx = g.matmul(alpha, states)?;
    Ok((alpha, ctx))
}

/// Generation distribution over the vocabulary: a two-layer projection of
/// [state, review context] softmaxed with PAD excluded.
pub fn vocab_dist<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<TensorId>,
    state: TensorId,
    review_ctx: TensorId,
    vocab: usize,
) -> Result<TensorId, NumericsError> {
    let feat = g.concat_cols(state, review_ctx)?;
    let h1 = g.matmul(feat, params.proj_w1)?;
    let h1 = g.add_bias(h1, params.proj_b1)?;
    let logits = g.matmul(h1, params.proj_w2)?;
    let logits = g.add_bias(logits, params.proj_b2)?;
    let mask: Vec<bool> = (0..vocab).map(|i| i != PAD_ID).collect();
    g.masked_softmax(logits, Some(&mask))
}

/// Copy distribution from the description: attention mass aggregated by
/// extended token id into a full-width distribution.
pub fn desc_copy_dist<F: Scalar>(
    g: &mut Graph<F>,
    alpha_desc: TensorId,
    desc_ids: &[usize],
    width: usize,
) -> Result<TensorId, NumericsError> {
    g.scatter_add_cols(alpha_desc, desc_ids, width)
}

/// Hierarchical copy distribution from the retrieved responses: per-response
/// aggregated token attention, weighted by response-level attention.
pub fn retrieved_copy_dist<F: Scalar>(
    g: &mut Graph<F>,
    per_resp: &[(TensorId, &[usize])],
    alpha_lvl: TensorId,
    width: usize,
) -> Result<TensorId, NumericsError> {
    debug_assert!(!per_resp.is_empty());
    let mut total: Option<TensorId> = None;
    for (j, (alpha_tok, ids)) in per_resp.iter().enumerate() {
        let scattered = g.scatter_add_cols(*alpha_tok, ids, width)?;
        let weight = g.gather_col(alpha_lvl, j)?;
        let weighted = g.mul_scalar(weight, scattered)?;
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("at least one retrieved response"))
}

/// Attention over the available copy contexts (description first, then
/// retrieved). Returns (gamma, fused context) where gamma is the
/// description's share; a constant zero leaf when no description exists.
pub fn fusion_attention<F: Scalar>(
    g: &mut Graph<F>,
    head: &AttentionHead<TensorId>,
    query: TensorId,
    c_desc: Option<TensorId>,
    c_resp: Option<TensorId>,
) -> Result<(TensorId, TensorId), NumericsError> {
    let rows: Vec<TensorId> = [c_desc, c_resp].into_iter().flatten().collect();
    debug_assert!(!rows.is_empty());
    let stack = g.stack_rows(&rows)?;
    let (alpha, ctx) = attend(g, head, stack, query)?;
    let gamma = if c_desc.is_some() {
        g.gather_col(alpha, 0)?
    } else {
        g.leaf(Tensor::zeros(1, 1))
    };
    Ok((gamma, ctx))
}

/// Mixes the copy distributions: gamma * p_desc + (1 - gamma) * p_resp,
/// degenerating to whichever side exists.
pub fn fuse_dists<F: Scalar>(
    g: &mut Graph<F>,
    gamma: TensorId,
    p_desc: Option<TensorId>,
    p_resp: Option<TensorId>,
) -> Result<TensorId, NumericsError> {
    match (p_desc, p_resp) {
        (Some(d), Some(r)) => {
            let desc_part = g.mul_scalar(gamma, d)?;
            let inv = g.affine(gamma, F::from_f64(-1.0), F::one());
            let resp_part = g.mul_scalar(inv, r)?;
            g.add(desc_part, resp_part)
        }
        (Some(d), None) => Ok(d),
        (None, Some(r)) => Ok(r),
        (None, None) => unreachable!("fusion requires at least one copy distribution"),
    }
}

/// Final mixture of the padded generation distribution and the fused copy
/// distribution under the generation gate theta.
pub fn mix_final<F: Scalar>(
    g: &mut Graph<F>,
    theta: TensorId,
    p_vocab_padded: TensorId,
    p_fuse: TensorId,
) -> Result<TensorId, NumericsError> {
    let gen = g.mul_scalar(theta, p_vocab_padded)?;
    let inv = g.affine(theta, F::from_f64(-1.0), F::one());
    let copy = g.mul_scalar(inv, p_fuse)?;
    g.add(gen, copy)
}

/// Computes the generation gate from the fused context, decoder state, and
/// decoder input, then mixes generation and copy into the final
/// distribution. Returns (theta, p_final).
#[allow(clippy::too_many_arguments)]
pub fn final_dist<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<TensorId>,
    c_fuse: TensorId,
    state: TensorId,
    x_emb: TensorId,
    p_vocab: TensorId,
    p_fuse: TensorId,
    ext_len: usize,
) -> Result<(TensorId, TensorId), NumericsError> {
    let from_ctx = g.matmul(c_fuse, params.gate_w_ctx)?;
    let from_state = g.matmul(state, params.gate_w_state)?;
    let from_input = g.matmul(x_emb, params.gate_w_input)?;
    let sum = g.add(from_ctx, from_state)?;
    let sum = g.add(sum, from_input)?;
    let sum = g.add(sum, params.gate_b)?;
    let theta = g.sigmoid(sum);
    let padded = g.pad_cols(p_vocab, ext_len);
    let p_final = mix_final(g, theta, padded, p_fuse)?;
    Ok((theta, p_final))
}

/// One decoder step: embed the input token (extended ids fall back to UNK),
/// advance the GRU stack, attend everywhere, and assemble the output
/// distribution.
pub fn decode_step<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<TensorId>,
    enc: &SourceEncodings,
    prev_state: &[TensorId],
    input_id: usize,
    dropout: f64,
    train: bool,
) -> Result<StepOutputs, ModelError> {
    let ext_len = enc.width - enc.vocab;
    let x = g.embedding_lookup(params.embedding, &lookup_ids(&[input_id], enc.vocab))?;
    let x = g.dropout(x, dropout, train)?;

    let mut state = Vec::with_capacity(params.decoder.len());
    let mut input = x;
    for (cell, &prev) in params.decoder.iter().zip(prev_state) {
        let h = gru_cell(g, input, prev, cell)?;
        state.push(h);
        input = h;
    }
    let s_top = *state.last().expect("decoder has at least one layer");
    let s = g.dropout(s_top, dropout, train)?;

    let (alpha_review, c_review) = attend(g, &params.attn_review, enc.review, s)?;
    let p_vocab = vocab_dist(g, params, s, c_review, enc.vocab)?;

    let mut alpha_desc = None;
    let mut desc_branch = None;
    if let Some((desc_states, desc_ids)) = &enc.desc {
        let (alpha, c_desc) = attend(g, &params.attn_desc, *desc_states, s)?;
        let p_desc = desc_copy_dist(g, alpha, desc_ids, enc.width)?;
        alpha_desc = Some(alpha);
        desc_branch = Some((c_desc, p_desc));
    }

    let mut alpha_resp_tok = vec![None; enc.resp_slots.len()];
    let mut alpha_resp_lvl = None;
    let mut resp_branch = None;
    if !enc.resp.is_empty() {
        let mut tok_alphas = Vec::with_capacity(enc.resp.len());
        let mut contexts = Vec::with_capacity(enc.resp.len());
        for (states, _) in &enc.resp {
            let (alpha, ctx) = attend(g, &params.attn_resp_tok, *states, s)?;
            tok_alphas.push(alpha);
            contexts.push(ctx);
        }
        let ctx_stack = g.stack_rows(&contexts)?;
        let (lvl, c_resp) = attend(g, &params.attn_resp_lvl, ctx_stack, s)?;
        let per_resp: Vec<(TensorId, &[usize])> = tok_alphas
            .iter()
            .zip(&enc.resp)
            .map(|(&alpha, (_, ids))| (alpha, ids.as_slice()))
            .collect();
        let p_resp = retrieved_copy_dist(g, &per_resp, lvl, enc.width)?;
        for (slot, resp_idx) in enc.resp_slots.iter().enumerate() {
            if let Some(j) = resp_idx {
                alpha_resp_tok[slot] = Some(tok_alphas[*j]);
            }
        }
        alpha_resp_lvl = Some(lvl);
        resp_branch = Some((c_resp, p_resp));
    }

    let (p_desc, p_resp) = (
        desc_branch.as_ref().map(|(_, p)| *p),
        resp_branch.as_ref().map(|(_, p)| *p),
    );
    let (gamma, theta, p_fuse, p_final) = if desc_branch.is_some() || resp_branch.is_some() {
        let c_desc = desc_branch.map(|(c, _)| c);
        let c_resp = resp_branch.map(|(c, _)| c);
        let (gamma, c_fuse) = fusion_attention(g, &params.attn_fuse, s, c_desc, c_resp)?;
        let p_fuse = fuse_dists(g, gamma, p_desc, p_resp)?;
        let (theta, p_final) = final_dist(g, params, c_fuse, s, x, p_vocab, p_fuse, ext_len)?;
        (Some(gamma), Some(theta), Some(p_fuse), p_final)
    } else {
        (None, None, None, g.pad_cols(p_vocab, ext_len))
    };

    Ok(StepOutputs {
        state,
        p_vocab,
        p_desc,
        p_resp,
        p_fuse,
        p_final,
        gamma,
        theta,
        alpha_review,
        alpha_desc,
        alpha_resp_tok,
        alpha_resp_lvl,
    })
}

/// Teacher-forced loss plus the per-step outputs.
#[derive(Debug)]
pub struct ForwardResult {
    pub loss: TensorId,
    pub steps: Vec<StepOutputs>,
}

/// Mean negative log-likelihood of the target under the model, teacher
/// forcing the gold prefix. With both copy sources disabled, extended
/// target ids are remapped to UNK so the loss matches a plain
/// encoder-decoder exactly; otherwise they stay, and steps whose target is
/// copy-unreachable contribute the floored log with a dead gradient.
pub fn forward_loss<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<TensorId>,
    dims: &ModelDims,
    example: &EncodedExample,
    toggles: SourceToggles,
    dropout: f64,
    train: bool,
) -> Result<ForwardResult, ModelError> {
    if example.response_ids.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let enc = encode_sources(g, params, dims, example, toggles, dropout, train)?;
    let mut state = init_decoder_state(g, params, &enc)?;
    let remap_ext = !toggles.description && !toggles.retrieved;

    let mut log_ps = Vec::with_capacity(example.response_ids.len());
    let mut steps = Vec::with_capacity(example.response_ids.len());
    let mut prev = SOS_ID;
    for &target in &example.response_ids {
        let out = decode_step(g, params, &enc, &state, prev, dropout, train)?;
        let y = if remap_ext && target >= dims.vocab { UNK_ID } else { target };
        let width = g.value(out.p_final).cols();
        if y >= width {
            return Err(ModelError::TargetOutOfRange { id: y, width });
        }
        let p_y = g.gather_col(out.p_final, y)?;
        log_ps.push(g.log_floor(p_y, F::from_f64(LOG_FLOOR)));
        state = out.state.clone();
        steps.push(out);
        prev = target;
    }
    let stacked = g.stack_rows(&log_ps)?;
    let total = g.sum_all(stacked);
    let loss = g.affine(total, F::from_f64(-1.0 / log_ps.len() as f64), F::zero());
    Ok(ForwardResult { loss, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ExtendedVocabMap, EOS_ID};

    fn dims() -> ModelDims {
        ModelDims { vocab: 10, emb: 4, hidden: 3, layers: 1 }
    }

    fn bind<F: Scalar>(
        g: &mut Graph<F>,
        params: &ModelParams<Tensor<F>>,
    ) -> ModelParams<TensorId> {
        params.map(&mut |t| g.leaf(t.clone()))
    }

    fn example(dims: &ModelDims) -> EncodedExample {
        let mut ext_map = ExtendedVocabMap::new(dims.vocab);
        let rare_review = ext_map.get_or_insert("rare-review");
        let rare_desc = ext_map.get_or_insert("rare-desc");
        let rare_resp = ext_map.get_or_insert("rare-resp");
        EncodedExample {
            review_ids: vec![4, 5, rare_review, 6],
            response_ids: vec![5, rare_desc, 7, EOS_ID],
            description_ids: vec![6, rare_desc, 7],
            retrieved_ids: vec![vec![5, rare_resp], vec![], vec![8, 9, 4]],
            ext_map,
        }
    }

    #[test]
    fn attend_uniform_for_zero_weights() {
        let mut g = Graph::<f64>::new(0);
        let head = AttentionHead {
            w_h: g.leaf(Tensor::zeros(6, 3)),
            w_s: g.leaf(Tensor::zeros(3, 3)),
            v: g.leaf(Tensor::zeros(3, 1)),
        };
        let states = g.leaf(Tensor::from_fn(4, 6, |i, j| (i * 6 + j) as f64 * 0.1));
        let query = g.leaf(Tensor::zeros(1, 3));
        let (alpha, ctx) = attend(&mut g, &head, states, query).unwrap();
        for &a in g.value(alpha).data() {
            assert!((a - 0.25).abs() < 1e-12);
        }
        let expected = |j: usize| (0..4).map(|i| (i * 6 + j) as f64 * 0.1).sum::<f64>() / 4.0;
        for j in 0..6 {
            assert!((g.value(ctx).get(0, j) - expected(j)).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_matches_scalar_oracle() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(13);
        let mut rand_t = |r: usize, c: usize| -> Tensor<f64> {
            Tensor::from_fn(r, c, |_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0))
        };
        let (len, h2, h) = (3usize, 4usize, 2usize);
        let states_t = rand_t(len, h2);
        let query_t = rand_t(1, h);
        let wh_t = rand_t(h2, h);
        let ws_t = rand_t(h, h);
        let v_t = rand_t(h, 1);

        let mut scores = Vec::new();
        for i in 0..len {
            let mut s = 0.0;
            for a in 0..h {
                let mut pre = 0.0;
                for b in 0..h2 {
                    pre += states_t.get(i, b) * wh_t.get(b, a);
                }
                for b in 0..h {
                    pre += query_t.get(0, b) * ws_t.get(b, a);
                }
                s += pre.tanh() * v_t.get(a, 0);
            }
            scores.push(s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let expected_alpha: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let mut g = Graph::<f64>::new(0);
        let head = AttentionHead {
            w_h: g.leaf(wh_t),
            w_s: g.leaf(ws_t),
            v: g.leaf(v_t),
        };
        let states = g.leaf(states_t.clone());
        let query = g.leaf(query_t);
        let (alpha, ctx) = attend(&mut g, &head, states, query).unwrap();
        for (got, want) in g.value(alpha).data().iter().zip(&expected_alpha) {
            assert!((got - want).abs() < 1e-12);
        }
        for j in 0..h2 {
            let want: f64 =
                (0..len).map(|i| expected_alpha[i] * states_t.get(i, j)).sum();
            assert!((g.value(ctx).get(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn vocab_dist_is_uniform_over_non_pad_for_zero_params() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::zeros(&d).unwrap();
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let state = g.leaf(Tensor::zeros(1, d.hidden));
        let ctx = g.leaf(Tensor::zeros(1, 2 * d.hidden));
        let p = vocab_dist(&mut g, &bound, state, ctx, d.vocab).unwrap();
        let value = g.value(p);
        assert_eq!(value.get(0, PAD_ID), 0.0);
        let expected = 1.0 / (d.vocab - 1) as f64;
        for i in 1..d.vocab {
            assert!((value.get(0, i) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn copy_dist_aggregates_attention_by_token() {
        let mut g = Graph::<f64>::new(0);
        let alpha = g.leaf(Tensor::from_vec(1, 3, vec![0.3, 0.2, 0.5]).unwrap());
        let p = desc_copy_dist(&mut g, alpha, &[4, 2, 4], 6).unwrap();
        let v = g.value(p);
        assert_eq!(v.get(0, 4), 0.8);
        assert_eq!(v.get(0, 2), 0.2);
        assert_eq!(v.get(0, 0), 0.0);
    }

    #[test]
    fn retrieved_copy_dist_weights_responses_hierarchically() {
        let mut g = Graph::<f64>::new(0);
        let a0 = g.leaf(Tensor::from_vec(1, 2, vec![0.75, 0.25]).unwrap());
        let a1 = g.leaf(Tensor::from_vec(1, 1, vec![1.0]).unwrap());
        let lvl = g.leaf(Tensor::from_vec(1, 2, vec![0.6, 0.4]).unwrap());
        let ids0 = [3usize, 1];
        let ids1 = [3usize];
        let p = retrieved_copy_dist(
            &mut g,
            &[(a0, ids0.as_slice()), (a1, ids1.as_slice())],
            lvl,
            5,
        )
        .unwrap();
        let v = g.value(p);
        assert!((v.get(0, 3) - (0.6 * 0.75 + 0.4 * 1.0)).abs() < 1e-12);
        assert!((v.get(0, 1) - 0.6 * 0.25).abs() < 1e-12);
        let total: f64 = v.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_dists_mixes_at_stated_rate() {
        let mut g = Graph::<f64>::new(0);
        let gamma = g.leaf(Tensor::from_vec(1, 1, vec![0.25]).unwrap());
        let p_d = g.leaf(Tensor::from_vec(1, 2, vec![0.8, 0.2]).unwrap());
        let p_r = g.leaf(Tensor::from_vec(1, 2, vec![0.2, 0.8]).unwrap());
        let fused = fuse_dists(&mut g, gamma, Some(p_d), Some(p_r)).unwrap();
        assert!((g.value(fused).get(0, 0) - 0.35).abs() < 1e-12);
        assert!((g.value(fused).get(0, 1) - 0.65).abs() < 1e-12);
    }

    #[test]
    fn mix_final_blends_generation_and_copy() {
        let mut g = Graph::<f64>::new(0);
        let theta = g.leaf(Tensor::from_vec(1, 1, vec![0.5]).unwrap());
        let p_vocab = g.leaf(Tensor::from_vec(1, 2, vec![0.4, 0.6]).unwrap());
        let p_fuse = g.leaf(Tensor::from_vec(1, 2, vec![0.1, 0.9]).unwrap());
        let p = mix_final(&mut g, theta, p_vocab, p_fuse).unwrap();
        assert!((g.value(p).get(0, 0) - 0.25).abs() < 1e-12);
        assert!((g.value(p).get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_step_half_probability_gives_ln_two_loss() {
        let mut g = Graph::<f64>::new(0);
        let p = g.leaf(Tensor::from_vec(1, 2, vec![0.5, 0.5]).unwrap());
        let p_y = g.gather_col(p, 0).unwrap();
        let ll = g.log_floor(p_y, LOG_FLOOR);
        let stacked = g.stack_rows(&[ll]).unwrap();
        let total = g.sum_all(stacked);
        let loss = g.affine(total, -1.0, 0.0);
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn distributions_sum_to_one_and_mixtures_stay_in_range() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::init(&d, 21).unwrap();
        let ex = example(&d);
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let res =
            forward_loss(&mut g, &bound, &d, &ex, SourceToggles::FULL, 0.0, false).unwrap();
        assert_eq!(res.steps.len(), ex.response_ids.len());
        for step in &res.steps {
            for id in [
                Some(step.p_vocab),
                step.p_desc,
                step.p_resp,
                step.p_fuse,
                Some(step.p_final),
            ]
            .into_iter()
            .flatten()
            {
                let total: f64 = g.value(id).data().iter().sum();
                assert!((total - 1.0).abs() < 1e-9, "distribution sums to {total}");
            }
            let gamma = g.value(step.gamma.unwrap()).item();
            let theta = g.value(step.theta.unwrap()).item();
            assert!((0.0..=1.0).contains(&gamma));
            assert!((0.0..=1.0).contains(&theta));
        }
        assert!(g.value(res.loss).item().is_finite());
    }

    #[test]
    fn review_oov_columns_get_no_mass() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::init(&d, 3).unwrap();
        let ex = example(&d);
        let rare_review_col = d.vocab; // first extended id belongs to the review
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let res =
            forward_loss(&mut g, &bound, &d, &ex, SourceToggles::FULL, 0.0, false).unwrap();
        for step in &res.steps {
            assert_eq!(g.value(step.p_final).get(0, rare_review_col), 0.0);
        }
    }

    #[test]
    fn absent_sources_disable_their_branches() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::init(&d, 5).unwrap();
        let mut ex = example(&d);
        ex.description_ids.clear();
        ex.retrieved_ids = vec![vec![], vec![]];
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let res =
            forward_loss(&mut g, &bound, &d, &ex, SourceToggles::FULL, 0.0, false).unwrap();
        for step in &res.steps {
            assert!(step.p_desc.is_none());
            assert!(step.p_resp.is_none());
            assert!(step.p_fuse.is_none());
            assert!(step.gamma.is_none());
            assert!(step.theta.is_none());
        }
    }

    #[test]
    fn toggles_disable_present_sources() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::init(&d, 5).unwrap();
        let ex = example(&d);
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let res =
            forward_loss(&mut g, &bound, &d, &ex, SourceToggles::NO_RETRIEVED, 0.0, false)
                .unwrap();
        for step in &res.steps {
            assert!(step.p_desc.is_some());
            assert!(step.p_resp.is_none());
            let gamma = g.value(step.gamma.unwrap()).item();
            assert_eq!(gamma, 1.0, "lone description takes the whole fused share");
        }
    }

    #[test]
    fn review_only_matches_manual_nll_recomputation() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::init(&d, 9).unwrap();
        let ex = example(&d);
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let res =
            forward_loss(&mut g, &bound, &d, &ex, SourceToggles::REVIEW_ONLY, 0.0, false)
                .unwrap();
        let mut manual = 0.0;
        for (step, &target) in res.steps.iter().zip(&ex.response_ids) {
            let y = if target >= d.vocab { UNK_ID } else { target };
            let p = g.value(step.p_final).get(0, y);
            manual -= p.max(LOG_FLOOR).ln();
            let ext_cols = g.value(step.p_final).cols() - d.vocab;
            for c in 0..ext_cols {
                assert_eq!(g.value(step.p_final).get(0, d.vocab + c), 0.0);
            }
        }
        manual /= ex.response_ids.len() as f64;
        assert!((g.value(res.loss).item() - manual).abs() < 1e-12);
    }

    #[test]
    fn every_parameter_receives_gradient_on_a_full_example() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::init(&d, 17).unwrap();
        let ex = example(&d);
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let res =
            forward_loss(&mut g, &bound, &d, &ex, SourceToggles::FULL, 0.0, true).unwrap();
        g.backward(res.loss).unwrap();
        for (name, &id) in bound.named_fields() {
            assert!(g.grad(id).is_some(), "parameter {name} got no gradient");
        }
    }

    #[test]
    fn full_forward_loss_passes_finite_difference_check() {
        let d = ModelDims { vocab: 10, emb: 3, hidden: 2, layers: 1 };
        let params = ModelParams::<Tensor<f64>>::init(&d, 41).unwrap();
        let ex = example(&d);
        let mut points = Vec::new();
        params.for_each(&mut |_, t| points.push(t.clone()));
        let err = crate::numerics::grad_check(
            |g, ids| {
                let mut i = 0;
                let bound = params.map(&mut |_| {
                    let id = ids[i];
                    i += 1;
                    id
                });
                let res = forward_loss(g, &bound, &d, &ex, SourceToggles::FULL, 0.0, false)
                    .map_err(|e| match e {
                        ModelError::Numerics(n) => n,
                        other => panic!("unexpected model error: {other}"),
                    })?;
                Ok(res.loss)
            },
            &points,
            1e-4,
            0,
        )
        .unwrap();
        assert!(err < 1e-3, "forward_loss gradient error {err}");
    }

    #[test]
    fn empty_target_is_rejected() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::init(&d, 1).unwrap();
        let mut ex = example(&d);
        ex.response_ids.clear();
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let err = forward_loss(&mut g, &bound, &d, &ex, SourceToggles::FULL, 0.0, false)
            .unwrap_err();
        assert!(matches!(err, ModelError::EmptyTarget));
    }

    #[test]
    fn forward_loss_is_deterministic_under_dropout() {
        let d = dims();
        let params = ModelParams::<Tensor<f64>>::init(&d, 23).unwrap();
        let ex = example(&d);
        let run = || {
            let mut g = Graph::new(77);
            let bound = bind(&mut g, &params);
            let res =
                forward_loss(&mut g, &bound, &d, &ex, SourceToggles::FULL, 0.3, true).unwrap();
            g.value(res.loss).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn multi_layer_stack_runs_and_stays_normalized() {
        let d = ModelDims { vocab: 10, emb: 4, hidden: 3, layers: 2 };
        let params = ModelParams::<Tensor<f64>>::init(&d, 31).unwrap();
        let ex = example(&d);
        let mut g = Graph::new(0);
        let bound = bind(&mut g, &params);
        let res =
            forward_loss(&mut g, &bound, &d, &ex, SourceToggles::FULL, 0.0, false).unwrap();
        for step in &res.steps {
            assert_eq!(step.state.len(), 2);
            let total: f64 = g.value(step.p_final).data().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
