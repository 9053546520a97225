//! Single-head cross-attention between two feature maps of equal spatial size.
//! Queries come from the detail map, keys and values from the context map.

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use crate::error::{invalid, Result};
use crate::nn::Builder;
use crate::tensor::simd::multiversion;
use crate::tensor::{Padding, ParamId, ParamStore, Scalar, Tape, Var};

/// Row-softmax of `q^T k / sqrt(d)`: `q` is `[d, Lq]`, `k` is `[d, Lk]`, result `[Lq, Lk]`.
pub fn attention_weights<T: Scalar>(q: ArrayView2<'_, T>, k: ArrayView2<'_, T>) -> Array2<T> {
    let mut s = scores(q, k);
    for mut row in s.rows_mut() {
        T::softmax_in_place(row.as_slice_mut().unwrap());
    }
    s
}

fn scores<T: Scalar>(q: ArrayView2<'_, T>, k: ArrayView2<'_, T>) -> Array2<T> {
    let mut s = Array2::zeros((q.ncols(), k.ncols()));
    general_mat_mul(T::one() / T::lit(q.nrows() as f64).sqrt(), &q.t(), &k, T::zero(), &mut s);
    s
}

fn item<T: Scalar>(a: &ArrayD<T>, b: usize) -> ArrayView2<'_, T> {
    a.index_axis(Axis(0), b).into_dimensionality::<Ix2>().unwrap()
}

/// Query rows per block; a block of scores stays cache resident.
const BLOCK: usize = 32;

fn blocks(len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len).step_by(BLOCK).map(move |s| (s, (s + BLOCK).min(len)))
}

multiversion! {
    /// Softmax of each `len`-wide row of `block`, writing log-sum-exps to `lse`.
    fn softmax_rows<T: Scalar>(block: &mut [T], len: usize, lse: &mut [T]) {
        for (row, l) in block.chunks_exact_mut(len).zip(lse) {
            *l = T::softmax_in_place(row);
        }
    }
}

multiversion! {
    /// Rebuilds probabilities from scores: `p = exp(s - lse)` row by row.
    fn exp_rows<T: Scalar>(block: &mut [T], len: usize, lse: &[T]) {
        for (row, &l) in block.chunks_exact_mut(len).zip(lse) {
            T::exp_shifted_in_place(row, l);
        }
    }
}

multiversion! {
    /// Softmax backward in place: `dp <- p * (dp - dots)` per row.
    fn softmax_backward_rows<T: Scalar>(dp: &mut [T], p: &[T], len: usize, dots: &[T]) {
        for ((row, prow), &dot) in dp.chunks_exact_mut(len).zip(p.chunks_exact(len)).zip(dots) {
            for (x, &pp) in row.iter_mut().zip(prow) {
                *x = pp * (*x - dot);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Batched attention on flattened sequences: `q [N,d,Lq]`, `k [N,d,Lk]`,
    /// `v [N,e,Lk]` give `[N,e,Lq]`, column `i` being `sum_j P[i,j] v[:,j]`.
    ///
    /// Probabilities are never stored whole: the forward pass keeps each query's
    /// log-sum-exp and the backward pass recomputes scores block by block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d, lq) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let (e, lk) = (vv.shape()[1], vv.shape()[2]);
        assert_eq!(kv.shape(), &[n, d, lk], "attention: key shape");
        assert_eq!(vv.shape()[0], n, "attention: value batch");
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut lse = Array2::<T>::zeros((n, lq));
        let mut out = ArrayD::zeros(IxDyn(&[n, e, lq]));
        let mut p = Array2::<T>::zeros((BLOCK, lk));
        for b in 0..n {
            let (qb, kb, vb) = (item(qv, b), item(kv, b), item(vv, b));
            let mut ob = out.index_axis_mut(Axis(0), b).into_dimensionality::<Ix2>().unwrap();
            for (r0, r1) in blocks(lq) {
                let mut pb = p.slice_mut(s![..r1 - r0, ..]);
                general_mat_mul(scale, &qb.slice(s![.., r0..r1]).t(), &kb, T::zero(), &mut pb);
                softmax_rows(
                    pb.as_slice_mut().unwrap(),
                    lk,
                    lse.slice_mut(s![b, r0..r1]).into_slice().unwrap(),
                );
                general_mat_mul(T::one(), &vb, &pb.t(), T::zero(), &mut ob.slice_mut(s![.., r0..r1]));
            }
        }
        self.push(
            out,
            vec![q, k, v],
            Box::new(move |ctx| {
                let (qv, kv, vv) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
                let mut dq = ArrayD::zeros(qv.raw_dim());
                let mut dk = ArrayD::zeros(kv.raw_dim());
                let mut dv = ArrayD::zeros(vv.raw_dim());
                let mut p = Array2::<T>::zeros((BLOCK, lk));
                let mut ds = Array2::<T>::zeros((BLOCK, lk));
                let mut dots = vec![T::zero(); BLOCK];
                for b in 0..n {
                    let (qb, kb, vb) = (item(qv, b), item(kv, b), item(vv, b));
                    let (gb, ob) = (item(ctx.grad, b), item(ctx.output, b));
                    for (r0, r1) in blocks(lq) {
                        let m = r1 - r0;
                        let mut pb = p.slice_mut(s![..m, ..]);
                        general_mat_mul(scale, &qb.slice(s![.., r0..r1]).t(), &kb, T::zero(), &mut pb);
                        exp_rows(pb.as_slice_mut().unwrap(), lk, lse.slice(s![b, r0..r1]).to_slice().unwrap());
                        let g = gb.slice(s![.., r0..r1]);
                        if ctx.needs[2] {
                            let mut t = dv.index_axis_mut(Axis(0), b).into_dimensionality::<Ix2>().unwrap();
                            general_mat_mul(T::one(), &g, &pb, T::one(), &mut t);
                        }
                        if !(ctx.needs[0] || ctx.needs[1]) {
                            continue;
                        }
                        // dS = P * (dP - <g_i, o_i>) with dP = g^T v.
                        let o = ob.slice(s![.., r0..r1]);
                        for (i, dot) in dots[..m].iter_mut().enumerate() {
                            *dot = g.column(i).dot(&o.column(i));
                        }
                        let mut dsb = ds.slice_mut(s![..m, ..]);
                        general_mat_mul(T::one(), &g.t(), &vb, T::zero(), &mut dsb);
                        softmax_backward_rows(dsb.as_slice_mut().unwrap(), pb.as_slice().unwrap(), lk, &dots[..m]);
                        if ctx.needs[0] {
                            let mut t = dq.index_axis_mut(Axis(0), b).into_dimensionality::<Ix2>().unwrap();
                            general_mat_mul(scale, &kb, &dsb.t(), T::zero(), &mut t.slice_mut(s![.., r0..r1]));
                        }
                        if ctx.needs[1] {
                            let mut t = dk.index_axis_mut(Axis(0), b).into_dimensionality::<Ix2>().unwrap();
                            general_mat_mul(scale, &qb.slice(s![.., r0..r1]), &dsb, T::one(), &mut t);
                        }
                    }
                }
                vec![
                    ctx.needs[0].then_some(dq),
                    ctx.needs[1].then_some(dk),
                    ctx.needs[2].then_some(dv),
                ]
            }),
        )
    }
}

/// Cross-attention of `x_d` onto `x_s` given projection weights shaped
/// `[d_k, C, 1, 1]`. Returns the aggregated map `[N, d_k, H, W]` (no residual).
pub fn cross_attend<T: Scalar>(tape: &mut Tape<T>, x_d: Var, x_s: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<Var> {
    let (sd, ss) = (tape.value(x_d).shape().to_vec(), tape.value(x_s).shape().to_vec());
    if sd.len() != 4 || ss.len() != 4 {
        return Err(invalid!("cross-attention expects rank-4 maps, got {sd:?} and {ss:?}"));
    }
    if sd[0] != ss[0] || sd[2..] != ss[2..] {
        return Err(invalid!("cross-attention: detail map {sd:?} and context map {ss:?} differ in batch or spatial size"));
    }
    for (name, w, c) in [("W_Q", w_q, sd[1]), ("W_K", w_k, ss[1]), ("W_V", w_v, ss[1])] {
        let ws = tape.value(w).shape();
        if ws.len() != 4 || ws[1] != c || ws[2] != 1 || ws[3] != 1 {
            return Err(invalid!("cross-attention: {name} has shape {ws:?}, input has {c} channels"));
        }
    }
    let dk = tape.value(w_q).shape()[0];
    if tape.value(w_k).shape()[0] != dk || tape.value(w_v).shape()[0] != dk {
        return Err(invalid!("cross-attention: projections must share one embedding size"));
    }
    let (n, h, w) = (sd[0], sd[2], sd[3]);
    let q = tape.conv2d(x_d, w_q, None, Padding::NONE);
    let k = tape.conv2d(x_s, w_k, None, Padding::NONE);
    let v = tape.conv2d(x_s, w_v, None, Padding::NONE);
    let q = tape.reshape(q, &[n, dk, h * w]);
    let k = tape.reshape(k, &[n, dk, h * w]);
    let v = tape.reshape(v, &[n, dk, h * w]);
    let o = tape.attention(q, k, v);
    Ok(tape.reshape(o, &[n, dk, h, w]))
}

/// Bias-free `W_Q`, `W_K`, `W_V` projections sharing one embedding size.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d_k: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, detail_channels: usize, context_channels: usize, d_k: usize) -> Self {
        b.scope(name, |b| CrossAttention {
            w_q: b.normal("w_q", &[d_k, detail_channels, 1, 1], (1.0 / detail_channels as f64).sqrt()),
            w_k: b.normal("w_k", &[d_k, context_channels, 1, 1], (1.0 / context_channels as f64).sqrt()),
            w_v: b.normal("w_v", &[d_k, context_channels, 1, 1], (1.0 / context_channels as f64).sqrt()),
            d_k,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x_d: Var, x_s: Var) -> Result<Var> {
        let w_q = tape.param(store, self.w_q);
        let w_k = tape.param(store, self.w_k);
        let w_v = tape.param(store, self.w_v);
        cross_attend(tape, x_d, x_s, w_q, w_k, w_v)
    }
}
