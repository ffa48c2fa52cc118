//! Gated recurrent unit cell in the standard two-gate form:
//! z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
//! candidate = tanh(x W_h + (r . h) U_h + b_h),
//! h' = (1 - z) . h + z . candidate.

use super::graph::{Graph, TensorId};
use super::scalar::Scalar;
use super::NumericsError;

/// One GRU cell's weights, generic over the payload so the same structure
/// carries stored tensors, graph-bound ids, or optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights<T> {
    pub w_z: T,
    pub u_z: T,
    pub b_z: T,
    pub w_r: T,
    pub u_r: T,
    pub b_r: T,
    pub w_h: T,
    pub u_h: T,
    pub b_h: T,
}

impl<T> GruWeights<T> {
    /// Field names in the canonical traversal order shared by `fields`,
    /// `fields_mut`, and `map`.
    pub const FIELD_NAMES: [&'static str; 9] =
        ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];

    pub fn fields(&self) -> [&T; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h,
            &self.u_h, &self.b_h,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut T; 9] {
        [
            &mut self.w_z, &mut self.u_z, &mut self.b_z, &mut self.w_r, &mut self.u_r,
            &mut self.b_r, &mut self.w_h, &mut self.u_h, &mut self.b_h,
        ]
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GruWeights<U> {
        GruWeights {
            w_z: f(&self.w_z),
            u_z: f(&self.u_z),
            b_z: f(&self.b_z),
            w_r: f(&self.w_r),
            u_r: f(&self.u_r),
            b_r: f(&self.b_r),
            w_h: f(&self.w_h),
            u_h: f(&self.u_h),
            b_h: f(&self.b_h),
        }
    }
}

/// One recurrence step: x (batch x input_dim), h_prev (batch x hidden) ->
/// h (batch x hidden). Weight shapes: W_* (input_dim x hidden),
/// U_* (hidden x hidden), b_* (1 x hidden).
pub fn gru_cell<F: Scalar>(
    g: &mut Graph<F>,
    x: TensorId,
    h_prev: TensorId,
    w: &GruWeights<TensorId>,
) -> Result<TensorId, NumericsError> {
    let gate = |g: &mut Graph<F>, wx: TensorId, uh: TensorId, b: TensorId, h: TensorId|
     -> Result<TensorId, NumericsError> {
        let a = g.matmul(x, wx)?;
        let c = g.matmul(h, uh)?;
        let s = g.add(a, c)?;
        g.add_bias(s, b)
    };
    let z = gate(g, w.w_z, w.u_z, w.b_z, h_prev)?;
    let z = g.sigmoid(z);
    let r = gate(g, w.w_r, w.u_r, w.b_r, h_prev)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h_prev)?;
    let cand = gate(g, w.w_h, w.u_h, w.b_h, rh)?;
    let cand = g.tanh(cand);
    let one_minus_z = g.affine(z, -F::one(), F::one());
    let keep = g.mul(one_minus_z, h_prev)?;
    let update = g.mul(z, cand)?;
    g.add(keep, update)
}
