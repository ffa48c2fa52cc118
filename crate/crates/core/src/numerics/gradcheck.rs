//! Finite-difference gradient verification. Always runs in f64: central
//! differences at eps = 1e-4 lose too many digits in f32.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, TensorId};
use super::gru::{gru_cell, GruWeights};
use super::tensor::Tensor;
use super::NumericsError;

/// Relative-error denominator guard: coordinates where both gradients are
/// essentially zero compare as equal instead of dividing by zero.
pub const REL_ERR_GUARD: f64 = 1e-8;

/// Compares the tape's gradients against central finite differences.
///
/// `build` reconstructs the scalar loss from leaves handed over in `points`
/// order; it runs once per perturbed coordinate, each time on a fresh graph
/// seeded identically so stochastic nodes (dropout) see the same masks.
/// Returns the max over coordinates of |analytic - numeric| /
/// max(|analytic|, |numeric|, guard).
pub fn grad_check(
    build: impl Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId, NumericsError>,
    points: &[Tensor<f64>],
    eps: f64,
    seed: u64,
) -> Result<f64, NumericsError> {
    let eval = |pts: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new(seed);
        let ids: Vec<TensorId> = pts.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let shape = g.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(seed);
    let ids: Vec<TensorId> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if g.value(loss).shape() != (1, 1) {
        return Err(NumericsError::NonScalarLoss(g.value(loss).shape()));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(points)
        .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();

    let mut max_rel = 0.0f64;
    let mut pts: Vec<Tensor<f64>> = points.to_vec();
    for pi in 0..points.len() {
        for i in 0..points[pi].numel() {
            let orig = pts[pi].data()[i];
            pts[pi].data_mut()[i] = orig + eps;
            let plus = eval(&pts)?;
            pts[pi].data_mut()[i] = orig - eps;
            let minus = eval(&pts)?;
            pts[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[i];
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_GUARD);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Gradient-checks every kernel op at a random point drawn from `seed`,
/// composing each op with tanh + sum so upstream gradients vary by position.
/// Returns (op name, max relative error) per op.
pub fn check_all_kernel_ops(
    seed: u64,
    eps: f64,
) -> Result<Vec<(&'static str, f64)>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(seed));
    let mut results = Vec::new();

    type Build = Box<dyn Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId, NumericsError>>;
    let squash = |g: &mut Graph<f64>, id: TensorId| -> Result<TensorId, NumericsError> {
        let t = g.tanh(id);
        Ok(g.sum_all(t))
    };

    let mut check = |name: &'static str,
                     points: Vec<Tensor<f64>>,
                     build: Build|
     -> Result<(), NumericsError> {
        let err = grad_check(build, &points, eps, seed)?;
        results.push((name, err));
        Ok(())
    };

    check(
        "matmul",
        vec![rand_tensor(&mut rng, 3, 4, -1.0, 1.0), rand_tensor(&mut rng, 4, 2, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            squash(g, y)
        }),
    )?;
    check(
        "add",
        vec![rand_tensor(&mut rng, 2, 3, -1.0, 1.0), rand_tensor(&mut rng, 2, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            squash(g, y)
        }),
    )?;
    check(
        "add_bias",
        vec![rand_tensor(&mut rng, 3, 4, -1.0, 1.0), rand_tensor(&mut rng, 1, 4, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.add_bias(ids[0], ids[1])?;
            squash(g, y)
        }),
    )?;
    check(
        "mul",
        vec![rand_tensor(&mut rng, 2, 3, -1.0, 1.0), rand_tensor(&mut rng, 2, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            squash(g, y)
        }),
    )?;
    check(
        "mul_scalar",
        vec![rand_tensor(&mut rng, 1, 1, -1.0, 1.0), rand_tensor(&mut rng, 2, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.mul_scalar(ids[0], ids[1])?;
            squash(g, y)
        }),
    )?;
    check(
        "affine",
        vec![rand_tensor(&mut rng, 2, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.affine(ids[0], -1.0, 1.0);
            squash(g, y)
        }),
    )?;
    check(
        "tanh",
        vec![rand_tensor(&mut rng, 2, 3, -2.0, 2.0)],
        Box::new(move |g, ids| {
            let y = g.tanh(ids[0]);
            Ok(g.sum_all(y))
        }),
    )?;
    check(
        "sigmoid",
        vec![rand_tensor(&mut rng, 2, 3, -2.0, 2.0)],
        Box::new(move |g, ids| {
            let y = g.sigmoid(ids[0]);
            squash(g, y)
        }),
    )?;
    check(
        "exp",
        vec![rand_tensor(&mut rng, 2, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.exp(ids[0]);
            squash(g, y)
        }),
    )?;
    check(
        "log",
        vec![rand_tensor(&mut rng, 2, 3, 0.5, 2.0)],
        Box::new(move |g, ids| {
            let y = g.log(ids[0]);
            squash(g, y)
        }),
    )?;
    check(
        "log_floor",
        vec![rand_tensor(&mut rng, 2, 3, 0.5, 2.0)],
        Box::new(move |g, ids| {
            let y = g.log_floor(ids[0], 1e-12);
            squash(g, y)
        }),
    )?;
    check(
        "dropout",
        vec![rand_tensor(&mut rng, 3, 4, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.dropout(ids[0], 0.4, true)?;
            squash(g, y)
        }),
    )?;
    check(
        "embedding_lookup",
        vec![rand_tensor(&mut rng, 4, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.embedding_lookup(ids[0], &[2, 0, 2, 3])?;
            squash(g, y)
        }),
    )?;
    check(
        "masked_softmax",
        vec![rand_tensor(&mut rng, 2, 4, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.masked_softmax(ids[0], None)?;
            squash(g, y)
        }),
    )?;
    check(
        "masked_softmax_masked",
        vec![rand_tensor(&mut rng, 2, 4, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.masked_softmax(ids[0], Some(&[true, false, true, true]))?;
            squash(g, y)
        }),
    )?;
    check(
        "concat_cols",
        vec![rand_tensor(&mut rng, 2, 3, -1.0, 1.0), rand_tensor(&mut rng, 2, 2, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.concat_cols(ids[0], ids[1])?;
            squash(g, y)
        }),
    )?;
    check(
        "stack_rows",
        vec![rand_tensor(&mut rng, 2, 3, -1.0, 1.0), rand_tensor(&mut rng, 1, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.stack_rows(&[ids[0], ids[1], ids[0]])?;
            squash(g, y)
        }),
    )?;
    check(
        "slice_cols",
        vec![rand_tensor(&mut rng, 2, 5, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.slice_cols(ids[0], 1, 4)?;
            squash(g, y)
        }),
    )?;
    check(
        "slice_rows",
        vec![rand_tensor(&mut rng, 4, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.slice_rows(ids[0], 1, 3)?;
            squash(g, y)
        }),
    )?;
    check(
        "transpose",
        vec![rand_tensor(&mut rng, 2, 4, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.transpose(ids[0]);
            squash(g, y)
        }),
    )?;
    check(
        "scatter_add_cols",
        vec![rand_tensor(&mut rng, 1, 5, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.scatter_add_cols(ids[0], &[0, 3, 1, 3, 0], 6)?;
            squash(g, y)
        }),
    )?;
    check(
        "gather_col",
        vec![rand_tensor(&mut rng, 3, 4, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.gather_col(ids[0], 2)?;
            squash(g, y)
        }),
    )?;
    check(
        "pad_cols",
        vec![rand_tensor(&mut rng, 2, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.pad_cols(ids[0], 2);
            squash(g, y)
        }),
    )?;
    check(
        "sum_all",
        vec![rand_tensor(&mut rng, 3, 3, -1.0, 1.0)],
        Box::new(move |g, ids| {
            let y = g.sum_all(ids[0]);
            Ok(g.tanh(y))
        }),
    )?;

    let gru_points = {
        let input = 3;
        let hidden = 4;
        let mut pts = vec![
            rand_tensor(&mut rng, 1, input, -1.0, 1.0),
            rand_tensor(&mut rng, 1, hidden, -0.9, 0.9),
        ];
        for i in 0..9 {
            let rows = match i % 3 {
                0 => input,
                1 => hidden,
                _ => 1,
            };
            pts.push(rand_tensor(&mut rng, rows, hidden, -0.8, 0.8));
        }
        pts
    };
    check(
        "gru_cell",
        gru_points,
        Box::new(move |g, ids| {
            let w = GruWeights {
                w_z: ids[2],
                u_z: ids[3],
                b_z: ids[4],
                w_r: ids[5],
                u_r: ids[6],
                b_r: ids[7],
                w_h: ids[8],
                u_h: ids[9],
                b_h: ids[10],
            };
            let h = gru_cell(g, ids[0], ids[1], &w)?;
            squash(g, h)
        }),
    )?;

    Ok(results)
}
