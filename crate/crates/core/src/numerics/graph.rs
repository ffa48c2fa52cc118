//! Computation tape: every op records its inputs at creation, so creation
//! order is already a topological order and one reverse sweep propagates
//! gradients deterministically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::NumericsError;

/// Handle to a node in one `Graph`. Ids from different graphs must not mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// Row-broadcast bias add: lhs (r x c) + bias (1 x c). The only
    /// broadcasting this kernel supports.
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// (1 x 1 scalar, tensor) broadcast product.
    MulScalar(TensorId, TensorId),
    /// Elementwise m * x + c with constant m, c.
    Affine(TensorId, F, F),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Log(TensorId),
    /// ln(max(x, floor)); gradient is zero at and below the floor.
    LogFloor(TensorId, F),
    /// Saved mask entries are 0 or 1/(1-p), so forward and backward are the
    /// same elementwise product.
    Dropout(TensorId, Tensor<F>),
    EmbeddingLookup(TensorId, Vec<usize>),
    /// Row-wise softmax; the optional column mask is shared by all rows and
    /// masked entries get exactly zero probability.
    MaskedSoftmax(TensorId),
    ConcatCols(TensorId, TensorId),
    StackRows(Vec<TensorId>),
    SliceCols(TensorId, usize, usize),
    SliceRows(TensorId, usize, usize),
    Transpose(TensorId),
    /// src (1 x n) scattered into (1 x width): out[ids[j]] += src[j].
    /// Realizes attention-mass aggregation by token identity.
    ScatterAddCols(TensorId, Vec<usize>),
    /// Column c of x as an (rows x 1) tensor.
    GatherCol(TensorId, usize),
    PadCols(TensorId),
    SumAll(TensorId),
}

#[derive(Debug)]
struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Arena of tensors plus the backward tape. Single-threaded by design: one
/// graph per training step.
#[derive(Debug)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    rng: ChaCha8Rng,
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> NumericsError {
    NumericsError::ShapeMismatch { op, left, right }
}

fn accum<F: Scalar>(slot: &mut Option<Tensor<F>>, delta: Tensor<F>) {
    match slot {
        Some(g) => g.add_scaled(&delta, F::one()),
        None => *slot = Some(delta),
    }
}

fn ew_mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

fn slice_cols_plain<F: Scalar>(t: &Tensor<F>, start: usize, end: usize) -> Tensor<F> {
    Tensor::from_fn(t.rows(), end - start, |r, c| t.get(r, start + c))
}

fn slice_rows_plain<F: Scalar>(t: &Tensor<F>, start: usize, end: usize) -> Tensor<F> {
    Tensor::from_fn(end - start, t.cols(), |r, c| t.get(start + r, c))
}

impl<F: Scalar> Graph<F> {
    /// `seed` drives only dropout masks; graphs without dropout are
    /// seed-independent.
    pub fn new(seed: u64) -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    fn val(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        self.val(id)
    }

    /// Gradient accumulated by the latest `backward`; `None` when the node
    /// was not reached.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (ar, ac) = self.val(a).shape();
        let (br, bc) = self.val(b).shape();
        if ac != br {
            return Err(shape_err("matmul", (ar, ac), (br, bc)));
        }
        let value = matmul(self.val(a), self.val(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape_err("add", self.val(a).shape(), self.val(b).shape()));
        }
        let mut value = self.val(a).clone();
        value.add_scaled(self.val(b), F::one());
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, NumericsError> {
        let (_, xc) = self.val(x).shape();
        let (br, bc) = self.val(bias).shape();
        if br != 1 || bc != xc {
            return Err(shape_err("add_bias", self.val(x).shape(), (br, bc)));
        }
        let xv = self.val(x);
        let bv = self.val(bias);
        let value = Tensor::from_fn(xv.rows(), xc, |r, c| xv.get(r, c) + bv.get(0, c));
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape_err("mul", self.val(a).shape(), self.val(b).shape()));
        }
        let value = ew_mul(self.val(a), self.val(b));
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Broadcast product of a 1 x 1 scalar node with an arbitrary tensor.
    pub fn mul_scalar(&mut self, s: TensorId, x: TensorId) -> Result<TensorId, NumericsError> {
        if self.val(s).shape() != (1, 1) {
            return Err(NumericsError::BadShape {
                op: "mul_scalar",
                expected: "a 1 x 1 scalar as first operand".to_owned(),
                got: self.val(s).shape(),
            });
        }
        let sv = self.val(s).item();
        let value = self.val(x).map(|v| sv * v);
        Ok(self.push(value, Op::MulScalar(s, x)))
    }

    /// Elementwise mul_const * x + add_const.
    pub fn affine(&mut self, x: TensorId, mul_const: F, add_const: F) -> TensorId {
        let value = self.val(x).map(|v| mul_const * v + add_const);
        self.push(value, Op::Affine(x, mul_const, add_const))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let value = self.val(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let one = F::one();
        let value = self.val(x).map(|v| {
            // Split on sign so exp never overflows.
            if v >= F::zero() {
                one / (one + (-v).exp())
            } else {
                let e = v.exp();
                e / (one + e)
            }
        });
        self.push(value, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let value = self.val(x).map(|v| v.exp());
        self.push(value, Op::Exp(x))
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let value = self.val(x).map(|v| v.ln());
        self.push(value, Op::Log(x))
    }

    /// ln(max(x, floor)): keeps log-likelihood terms finite when a
    /// probability underflows to zero; such entries get zero gradient.
    pub fn log_floor(&mut self, x: TensorId, floor: F) -> TensorId {
        let value = self.val(x).map(|v| v.max(floor).ln());
        self.push(value, Op::LogFloor(x, floor))
    }

    /// Inverted dropout: kept entries scale by 1/(1-p) so expectations match
    /// at inference, where (`active` = false) the input passes through
    /// untouched. Masks come from the graph's seeded RNG.
    pub fn dropout(&mut self, x: TensorId, p: f64, active: bool) -> Result<TensorId, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::BadDropoutRate(p));
        }
        if !active || p == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = self.val(x).shape();
        let scale = F::from_f64(1.0 / (1.0 - p));
        let mut mask = Tensor::zeros(rows, cols);
        for v in mask.data_mut() {
            if self.rng.gen::<f64>() >= p {
                *v = scale;
            }
        }
        let value = ew_mul(self.val(x), &mask);
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// Rows of `table` selected by `ids`, one output row per id.
    pub fn embedding_lookup(
        &mut self,
        table: TensorId,
        ids: &[usize],
    ) -> Result<TensorId, NumericsError> {
        let (rows, cols) = self.val(table).shape();
        if ids.is_empty() {
            return Err(NumericsError::BadShape {
                op: "embedding_lookup",
                expected: "at least one id".to_owned(),
                got: (0, 0),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(NumericsError::IdOutOfRange { id: bad, rows });
        }
        let tv = self.val(table);
        let value = Tensor::from_fn(ids.len(), cols, |r, c| tv.get(ids[r], c));
        Ok(self.push(value, Op::EmbeddingLookup(table, ids.to_vec())))
    }

    /// Row-wise softmax with max-subtraction. `mask` (when given) marks which
    /// columns participate; masked columns get exactly zero probability. All
    /// columns masked is an error.
    pub fn masked_softmax(
        &mut self,
        x: TensorId,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, NumericsError> {
        let (rows, cols) = self.val(x).shape();
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(NumericsError::BadShape {
                    op: "masked_softmax",
                    expected: format!("mask of length {cols}"),
                    got: (m.len(), 1),
                });
            }
            if !m.iter().any(|&keep| keep) {
                return Err(NumericsError::AllMasked);
            }
        }
        let keep = |c: usize| mask.is_none_or(|m| m[c]);
        let xv = self.val(x);
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut max = F::neg_infinity();
            for c in 0..cols {
                if keep(c) {
                    max = max.max(xv.get(r, c));
                }
            }
            let mut sum = F::zero();
            for c in 0..cols {
                if keep(c) {
                    let e = (xv.get(r, c) - max).exp();
                    value.set(r, c, e);
                    sum += e;
                }
            }
            for c in 0..cols {
                if keep(c) {
                    value.set(r, c, value.get(r, c) / sum);
                }
            }
        }
        Ok(self.push(value, Op::MaskedSoftmax(x)))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NumericsError> {
        let (ar, ac) = self.val(a).shape();
        let (br, bc) = self.val(b).shape();
        if ar != br {
            return Err(shape_err("concat_cols", (ar, ac), (br, bc)));
        }
        let av = self.val(a);
        let bv = self.val(b);
        let value = Tensor::from_fn(ar, ac + bc, |r, c| {
            if c < ac {
                av.get(r, c)
            } else {
                bv.get(r, c - ac)
            }
        });
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Vertical stack of tensors sharing a column count.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::BadShape {
                op: "stack_rows",
                expected: "at least one part".to_owned(),
                got: (0, 0),
            });
        };
        let cols = self.val(first).cols();
        let mut rows = 0;
        for &p in parts {
            let shape = self.val(p).shape();
            if shape.1 != cols {
                return Err(shape_err("stack_rows", (rows, cols), shape));
            }
            rows += shape.0;
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.val(p);
            for r in 0..pv.rows() {
                value.row_mut(offset + r).copy_from_slice(pv.row(r));
            }
            offset += pv.rows();
        }
        Ok(self.push(value, Op::StackRows(parts.to_vec())))
    }

    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        end: usize,
    ) -> Result<TensorId, NumericsError> {
        let (_, cols) = self.val(x).shape();
        if start >= end || end > cols {
            return Err(NumericsError::IndexOutOfBounds { op: "slice_cols", index: end, bound: cols });
        }
        let value = slice_cols_plain(self.val(x), start, end);
        Ok(self.push(value, Op::SliceCols(x, start, end)))
    }

    pub fn slice_rows(
        &mut self,
        x: TensorId,
        start: usize,
        end: usize,
    ) -> Result<TensorId, NumericsError> {
        let (rows, _) = self.val(x).shape();
        if start >= end || end > rows {
            return Err(NumericsError::IndexOutOfBounds { op: "slice_rows", index: end, bound: rows });
        }
        let value = slice_rows_plain(self.val(x), start, end);
        Ok(self.push(value, Op::SliceRows(x, start, end)))
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let value = self.val(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    /// Aggregates a (1 x n) row into a (1 x width) row by target column:
    /// out[ids[j]] += src[j].
    pub fn scatter_add_cols(
        &mut self,
        src: TensorId,
        ids: &[usize],
        width: usize,
    ) -> Result<TensorId, NumericsError> {
        let (rows, cols) = self.val(src).shape();
        if rows != 1 || ids.len() != cols {
            return Err(NumericsError::BadShape {
                op: "scatter_add_cols",
                expected: format!("1 x {} source", ids.len()),
                got: (rows, cols),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= width) {
            return Err(NumericsError::IndexOutOfBounds {
                op: "scatter_add_cols",
                index: bad,
                bound: width,
            });
        }
        let sv = self.val(src);
        let mut value = Tensor::zeros(1, width);
        for (j, &id) in ids.iter().enumerate() {
            let v = value.get(0, id) + sv.get(0, j);
            value.set(0, id, v);
        }
        Ok(self.push(value, Op::ScatterAddCols(src, ids.to_vec())))
    }

    /// Column `col` of x as an (rows x 1) tensor.
    pub fn gather_col(&mut self, x: TensorId, col: usize) -> Result<TensorId, NumericsError> {
        let (rows, cols) = self.val(x).shape();
        if col >= cols {
            return Err(NumericsError::IndexOutOfBounds { op: "gather_col", index: col, bound: cols });
        }
        let xv = self.val(x);
        let value = Tensor::from_fn(rows, 1, |r, _| xv.get(r, col));
        Ok(self.push(value, Op::GatherCol(x, col)))
    }

    /// Appends `extra` zero columns.
    pub fn pad_cols(&mut self, x: TensorId, extra: usize) -> TensorId {
        if extra == 0 {
            return x;
        }
        let xv = self.val(x);
        let (rows, cols) = xv.shape();
        let value = Tensor::from_fn(rows, cols + extra, |r, c| {
            if c < cols {
                xv.get(r, c)
            } else {
                F::zero()
            }
        });
        self.push(value, Op::PadCols(x))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let sum = self.val(x).data().iter().copied().sum();
        self.push(Tensor::scalar(sum), Op::SumAll(x))
    }

    /// Reverse sweep from `loss` (must be 1 x 1) populating gradients for
    /// every reachable node. Deterministic: fixed traversal and accumulation
    /// order give bit-identical results across runs.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NumericsError> {
        let shape = self.val(loss).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else { continue };
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&dout, &nodes[b.0].value);
                    let db = matmul_tn(&nodes[a.0].value, &dout);
                    accum(&mut grads[a.0], da);
                    accum(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accum(&mut grads[a.0], dout.clone());
                    accum(&mut grads[b.0], dout.clone());
                }
                Op::AddBias(a, b) => {
                    let cols = dout.cols();
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..dout.rows() {
                        for c in 0..cols {
                            let v = db.get(0, c) + dout.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    accum(&mut grads[a.0], dout.clone());
                    accum(&mut grads[b.0], db);
                }
                Op::Mul(a, b) => {
                    let da = ew_mul(&dout, &nodes[b.0].value);
                    let db = ew_mul(&dout, &nodes[a.0].value);
                    accum(&mut grads[a.0], da);
                    accum(&mut grads[b.0], db);
                }
                Op::MulScalar(s, x) => {
                    let sv = nodes[s.0].value.item();
                    let dx = dout.map(|v| sv * v);
                    let ds = ew_mul(&dout, &nodes[x.0].value).data().iter().copied().sum();
                    accum(&mut grads[x.0], dx);
                    accum(&mut grads[s.0], Tensor::scalar(ds));
                }
                Op::Affine(x, m, _) => {
                    let m = *m;
                    accum(&mut grads[x.0], dout.map(|v| m * v));
                }
                Op::Tanh(x) => {
                    let y = &nodes[idx].value;
                    let dx = Tensor::from_fn(y.rows(), y.cols(), |r, c| {
                        let t = y.get(r, c);
                        dout.get(r, c) * (F::one() - t * t)
                    });
                    accum(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let y = &nodes[idx].value;
                    let dx = Tensor::from_fn(y.rows(), y.cols(), |r, c| {
                        let s = y.get(r, c);
                        dout.get(r, c) * s * (F::one() - s)
                    });
                    accum(&mut grads[x.0], dx);
                }
                Op::Exp(x) => {
                    let dx = ew_mul(&dout, &nodes[idx].value);
                    accum(&mut grads[x.0], dx);
                }
                Op::Log(x) => {
                    let xv = &nodes[x.0].value;
                    let dx = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| {
                        dout.get(r, c) / xv.get(r, c)
                    });
                    accum(&mut grads[x.0], dx);
                }
                Op::LogFloor(x, floor) => {
                    let floor = *floor;
                    let xv = &nodes[x.0].value;
                    let dx = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| {
                        let v = xv.get(r, c);
                        if v > floor {
                            dout.get(r, c) / v
                        } else {
                            F::zero()
                        }
                    });
                    accum(&mut grads[x.0], dx);
                }
                Op::Dropout(x, mask) => {
                    accum(&mut grads[x.0], ew_mul(&dout, mask));
                }
                Op::EmbeddingLookup(table, ids) => {
                    let (rows, cols) = nodes[table.0].value.shape();
                    let mut dt = Tensor::zeros(rows, cols);
                    for (j, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            let v = dt.get(id, c) + dout.get(j, c);
                            dt.set(id, c, v);
                        }
                    }
                    accum(&mut grads[table.0], dt);
                }
                Op::MaskedSoftmax(x) => {
                    // Masked outputs are exactly zero, so y * (d - s) is
                    // already zero there; no mask test needed.
                    let y = &nodes[idx].value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut s = F::zero();
                        for c in 0..y.cols() {
                            s += y.get(r, c) * dout.get(r, c);
                        }
                        for c in 0..y.cols() {
                            dx.set(r, c, y.get(r, c) * (dout.get(r, c) - s));
                        }
                    }
                    accum(&mut grads[x.0], dx);
                }
                Op::ConcatCols(a, b) => {
                    let ac = nodes[a.0].value.cols();
                    accum(&mut grads[a.0], slice_cols_plain(&dout, 0, ac));
                    accum(&mut grads[b.0], slice_cols_plain(&dout, ac, dout.cols()));
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = nodes[p.0].value.rows();
                        accum(&mut grads[p.0], slice_rows_plain(&dout, offset, offset + rows));
                        offset += rows;
                    }
                }
                Op::SliceCols(x, start, _end) => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..dout.rows() {
                        for c in 0..dout.cols() {
                            dx.set(r, start + c, dout.get(r, c));
                        }
                    }
                    accum(&mut grads[x.0], dx);
                }
                Op::SliceRows(x, start, _end) => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..dout.rows() {
                        for c in 0..dout.cols() {
                            dx.set(start + r, c, dout.get(r, c));
                        }
                    }
                    accum(&mut grads[x.0], dx);
                }
                Op::Transpose(x) => {
                    accum(&mut grads[x.0], dout.transpose());
                }
                Op::ScatterAddCols(src, ids) => {
                    let mut dsrc = Tensor::zeros(1, ids.len());
                    for (j, &id) in ids.iter().enumerate() {
                        dsrc.set(0, j, dout.get(0, id));
                    }
                    accum(&mut grads[src.0], dsrc);
                }
                Op::GatherCol(x, col) => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        dx.set(r, *col, dout.get(r, 0));
                    }
                    accum(&mut grads[x.0], dx);
                }
                Op::PadCols(x) => {
                    let cols = nodes[x.0].value.cols();
                    accum(&mut grads[x.0], slice_cols_plain(&dout, 0, cols));
                }
                Op::SumAll(x) => {
                    let (rows, cols) = nodes[x.0].value.shape();
                    accum(&mut grads[x.0], Tensor::filled(rows, cols, dout.item()));
                }
            }
            grads[idx] = Some(dout);
        }
        Ok(())
    }
}
