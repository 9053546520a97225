//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Each recorded node
//! owns its output value and a backward closure that maps the output gradient
//! to gradients of its inputs. [`Tape::backward`] walks the nodes in reverse
//! and returns gradients for leaves and bound parameters.
//!
//! All ops are generic over [`Scalar`] so the same network can train in `f32`
//! and be gradient-checked in `f64`.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod shape;
pub(crate) mod simd;

pub mod gradcheck;
pub mod params;

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use conv::{conv2d_forward, PadMode, Padding};
#[cfg(test)]
pub(crate) use conv::unfold;
pub use params::{ParamId, ParamStore};

/// Floating-point element type usable by the tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// In-place softmax of one row; returns the row's log-sum-exp.
    #[inline(always)]
    fn softmax_in_place(row: &mut [Self]) -> Self {
        let m = row.iter().fold(Self::neg_infinity(), |m, &v| m.max(v));
        let mut z = Self::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        let inv = Self::one() / z;
        row.iter_mut().for_each(|v| *v *= inv);
        m + z.ln()
    }

    /// `v <- exp(v - shift)` where every `v <= shift`.
    #[inline(always)]
    fn exp_shifted_in_place(row: &mut [Self], shift: Self) {
        row.iter_mut().for_each(|v| *v = (*v - shift).exp());
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn softmax_in_place(row: &mut [f32]) -> f32 {
        // Eight independent lanes let the reductions vectorise.
        let mut lanes = [f32::NEG_INFINITY; 8];
        let mut chunks = row.chunks_exact(8);
        for c in &mut chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l = if v > *l { v } else { *l };
            }
        }
        let m = chunks.remainder().iter().chain(&lanes).fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sums = [0.0f32; 8];
        let mut chunks = row.chunks_exact_mut(8);
        for c in &mut chunks {
            for (s, v) in sums.iter_mut().zip(c) {
                *v = exp_nonpositive(*v - m);
                *s += *v;
            }
        }
        let mut z: f32 = sums.iter().sum();
        for v in chunks.into_remainder() {
            *v = exp_nonpositive(*v - m);
            z += *v;
        }
        let inv = 1.0 / z;
        row.iter_mut().for_each(|v| *v *= inv);
        m + z.ln()
    }

    #[inline(always)]
    fn exp_shifted_in_place(row: &mut [f32], shift: f32) {
        row.iter_mut().for_each(|v| *v = exp_nonpositive(*v - shift));
    }
}

impl Scalar for f64 {}

/// `exp(x)` for `x <= 0`, branch-free so the softmax loop vectorises.
/// Cephes range reduction and polynomial; relative error about 2e-7.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;
    // Adding 1.5 * 2^23 rounds to the nearest integer in the low mantissa bits.
    const SHIFTER: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let t = x * LOG2E + SHIFTER;
    let n = t - SHIFTER;
    let r = x - n * C1 - n * C2;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 1.666_666_5e-1) * r
        + 5.000_000_1e-1;
    let p = p * r * r + r + 1.0;
    let k = (t.to_bits() as i32).wrapping_sub(0x4B40_0000);
    p * f32::from_bits(((k + 127) << 23) as u32)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a ArrayD<T>],
    pub output: &'a ArrayD<T>,
    pub grad: &'a ArrayD<T>,
    pub needs: &'a [bool],
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T> {
    value: ArrayD<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    keep_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    frozen: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            frozen: false,
        }
    }

    /// A tape whose parameters are bound as constants, so nothing on it keeps
    /// a backward closure. For inference.
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            keep_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            keep_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter from `store` as a leaf. Binding the same id twice
    /// returns the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if self.frozen { self.constant(value) } else { self.leaf(value) };
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "scalar() on a tensor of {} elements", value.len());
        *value.iter().next().unwrap()
    }

    /// Records an op output. Drops the backward closure when no input needs a gradient.
    pub fn push(&mut self, value: ArrayD<T>, inputs: Vec<Var>, backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            backward: requires_grad.then_some(backward),
            requires_grad,
            keep_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss` (seed gradient 1).
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let seed = ArrayD::from_elem(self.value(loss).raw_dim(), T::one());
        self.backward_with(loss, seed)
    }

    /// Back-propagates from `output` seeded with an explicit gradient.
    pub fn backward_with(&self, output: Var, seed: ArrayD<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed gradient shape");
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        let mut kept: HashMap<Var, ArrayD<T>> = HashMap::new();

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.keep_grad {
                kept.insert(Var(idx), grad.clone());
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let inputs: Vec<&ArrayD<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            };
            let input_grads = backward(&ctx);
            assert_eq!(input_grads.len(), node.inputs.len());
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                assert_eq!(g.shape(), self.nodes[input.0].value.shape());
                match &mut grads[input.0] {
                    Some(acc) => Zip::from(acc).and(&g).for_each(|a, &b| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let params = self
            .bound
            .iter()
            .filter_map(|(id, v)| kept.get(v).map(|g| (*id, g.clone())))
            .collect();
        Gradients { leaves: kept, params }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: HashMap<Var, ArrayD<T>>,
    params: HashMap<ParamId, ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.leaves.get(&v)
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> ArrayD<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(tape.value(v).raw_dim()))
    }

    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

pub(crate) fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a rank-4 tensor, got shape {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

#[cfg(test)]
mod tests {
    #[test]
    fn fast_exp_is_accurate() {
        let mut worst = 0.0f64;
        for i in 0..=200_000 {
            let x = -87.0 * i as f32 / 200_000.0;
            let e = super::exp_nonpositive(x) as f64;
            let r = (x as f64).exp();
            worst = worst.max((e - r).abs() / r);
        }
        assert!(worst < 5e-7, "{worst}");
    }

    #[test]
    fn softmax_rows_agree_across_precisions() {
        use super::Scalar;
        let mut a: Vec<f32> = (0..37).map(|i| ((i * 7919) % 101) as f32 * 0.37 - 12.0).collect();
        let mut b: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        f32::softmax_in_place(&mut a);
        f64::softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((*x as f64 - y).abs() <= 1e-6 * y.max(1e-6));
        }
    }
}

