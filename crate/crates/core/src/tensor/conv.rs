use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::{dims4, Scalar, Tape, Var};

/// How out-of-range input positions are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Replicate the nearest edge pixel.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub h: usize,
    pub w: usize,
    pub mode: PadMode,
}

impl Padding {
    pub const NONE: Padding = Padding {
        h: 0,
        w: 0,
        mode: PadMode::Zero,
    };

    /// Zero padding that keeps the spatial size for an odd `kh x kw` kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Padding {
            h: kh / 2,
            w: kw / 2,
            mode: PadMode::Zero,
        }
    }

    pub fn same_replicate(kh: usize, kw: usize) -> Self {
        Padding {
            h: kh / 2,
            w: kw / 2,
            mode: PadMode::Replicate,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: Padding,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: Padding) -> Self {
        assert!(
            h + 2 * pad.h >= kh && w + 2 * pad.w >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad.h,
            w + 2 * pad.w
        );
        Geom {
            c,
            h,
            w,
            kh,
            kw,
            oh: h + 2 * pad.h - kh + 1,
            ow: w + 2 * pad.w - kw + 1,
            pad,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad.h == 0 && self.pad.w == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Valid output-column range `[lo, hi)` whose input column lands inside the image.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.w.saturating_sub(kx).min(self.ow);
        let hi = (self.w + self.pad.w).saturating_sub(kx).min(self.ow).max(lo);
        (lo, hi)
    }
}

/// Unfolds one `C x H x W` image into a `(C*kh*kw) x (OH*OW)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let (h, w, ow, ohw) = (g.h as isize, g.w, g.ow, g.cols());
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.oh {
                    let dst = &mut dst_row[oy * ow..(oy + 1) * ow];
                    let iy = oy as isize + ky as isize - g.pad.h as isize;
                    let iy = if (0..h).contains(&iy) {
                        iy as usize
                    } else {
                        match g.pad.mode {
                            PadMode::Zero => {
                                dst.fill(T::zero());
                                continue;
                            }
                            PadMode::Replicate => iy.clamp(0, h - 1) as usize,
                        }
                    };
                    let src = &plane[iy * w..(iy + 1) * w];
                    let shift = kx as isize - g.pad.w as isize;
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    let (left, right) = match g.pad.mode {
                        PadMode::Zero => (T::zero(), T::zero()),
                        PadMode::Replicate => (src[0], src[w - 1]),
                    };
                    dst[..lo].fill(left);
                    dst[hi..].fill(right);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let (h, w, ow, ohw) = (g.h as isize, g.w, g.ow, g.cols());
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.oh {
                    let src = &src_row[oy * ow..(oy + 1) * ow];
                    let iy = oy as isize + ky as isize - g.pad.h as isize;
                    let iy = if (0..h).contains(&iy) {
                        iy as usize
                    } else {
                        match g.pad.mode {
                            PadMode::Zero => continue,
                            PadMode::Replicate => iy.clamp(0, h - 1) as usize,
                        }
                    };
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let shift = kx as isize - g.pad.w as isize;
                    for ox in lo..hi {
                        dst[(ox as isize + shift) as usize] += src[ox];
                    }
                    if g.pad.mode == PadMode::Replicate {
                        for &v in &src[..lo] {
                            dst[0] += v;
                        }
                        for &v in &src[hi..] {
                            dst[w - 1] += v;
                        }
                    }
                }
            }
        }
    }
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn view2_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

/// Unfolds a whole batch: returns `[N, C*kh*kw, OH, OW]`.
#[cfg(test)]
pub(crate) fn unfold<T: Scalar>(x: &ArrayD<T>, kh: usize, kw: usize, pad: Padding) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x.shape());
    let g = Geom::new(c, h, w, kh, kw, pad);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let per = g.rows() * g.cols();
    let mut out = vec![T::zero(); n * per];
    for b in 0..n {
        im2col(&xs[b * c * h * w..(b + 1) * c * h * w], &g, &mut out[b * per..(b + 1) * per]);
    }
    ArrayD::from_shape_vec(IxDyn(&[n, g.rows(), g.oh, g.ow]), out).unwrap()
}

/// Plain stride-1 convolution without recording anything.
///
/// `x`: `[N, C, H, W]`, `weight`: `[O, C, kh, kw]`, `bias`: `[O]`.
pub fn conv2d_forward<T: Scalar>(x: &ArrayD<T>, weight: &ArrayD<T>, bias: Option<&ArrayD<T>>, pad: Padding) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x.shape());
    let (o, wc, kh, kw) = dims4(weight.shape());
    assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
    let g = Geom::new(c, h, w, kh, kw, pad);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let weight = weight.as_standard_layout();
    let w2 = view2(weight.as_slice().unwrap(), o, g.rows());
    let ohw = g.cols();
    let mut out = vec![T::zero(); n * o * ohw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.rows() * ohw]
    };
    for b in 0..n {
        let xb = &xs[b * c * h * w..(b + 1) * c * h * w];
        let cols_view = if g.is_pointwise() {
            view2(xb, c, ohw)
        } else {
            im2col(xb, &g, &mut cols);
            view2(&cols, g.rows(), ohw)
        };
        let mut ob = view2_mut(&mut out[b * o * ohw..(b + 1) * o * ohw], o, ohw);
        general_mat_mul(T::one(), &w2, &cols_view, T::zero(), &mut ob);
        if let Some(bias) = bias {
            for (oc, mut row) in ob.outer_iter_mut().enumerate() {
                let bv = bias[[oc]];
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, o, g.oh, g.ow]), out).unwrap()
}

impl<T: Scalar> Tape<T> {
    /// Stride-1 2-D convolution (cross-correlation).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, pad: Padding) -> Var {
        let value = conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), pad);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            value,
            inputs,
            Box::new(move |ctx| {
                let x = ctx.inputs[0];
                let weight = ctx.inputs[1];
                let (n, c, h, w) = dims4(x.shape());
                let (o, _, kh, kw) = dims4(weight.shape());
                let g = Geom::new(c, h, w, kh, kw, pad);
                let ohw = g.cols();
                let x = x.as_standard_layout();
                let xs = x.as_slice().unwrap();
                let gout = ctx.grad.as_standard_layout();
                let gs = gout.as_slice().unwrap();
                let weight = weight.as_standard_layout();
                let w2 = view2(weight.as_slice().unwrap(), o, g.rows());

                let mut dw = vec![T::zero(); o * g.rows()];
                let mut dx = ctx.needs[0].then(|| vec![T::zero(); n * c * h * w]);
                let mut cols = vec![T::zero(); g.rows() * ohw];
                for b in 0..n {
                    let gb = view2(&gs[b * o * ohw..(b + 1) * o * ohw], o, ohw);
                    if ctx.needs[1] {
                        let xb = &xs[b * c * h * w..(b + 1) * c * h * w];
                        let cols_view = if g.is_pointwise() {
                            view2(xb, c, ohw)
                        } else {
                            im2col(xb, &g, &mut cols);
                            view2(&cols, g.rows(), ohw)
                        };
                        let mut dwv = view2_mut(&mut dw, o, g.rows());
                        general_mat_mul(T::one(), &gb, &cols_view.t(), T::one(), &mut dwv);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                        if g.is_pointwise() {
                            let mut dxv = view2_mut(dxb, c, ohw);
                            general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut dxv);
                        } else {
                            let mut dcols = view2_mut(&mut cols, g.rows(), ohw);
                            general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut dcols);
                            col2im(&cols, &g, dxb);
                        }
                    }
                }
                let mut grads = vec![
                    dx.map(|d| ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), d).unwrap()),
                    ctx.needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[o, c, kh, kw]), dw).unwrap()),
                ];
                if ctx.inputs.len() == 3 {
                    let gb = gout.view().into_shape_with_order((n, o, ohw)).unwrap();
                    let db = gb.sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(0));
                    grads.push(Some(db.into_dyn()));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::tensor::gradcheck::{check, GradCheckConfig};

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng))
    }

    /// Direct six-loop convolution used as an oracle.
    fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, b: Option<&ArrayD<f64>>, pad: Padding) -> ArrayD<f64> {
        let (n, c, h, wd) = dims4(x.shape());
        let (o, _, kh, kw) = dims4(w.shape());
        let oh = h + 2 * pad.h - kh + 1;
        let ow = wd + 2 * pad.w - kw + 1;
        let mut out = ArrayD::zeros(IxDyn(&[n, o, oh, ow]));
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[[oc]]);
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - pad.h as isize;
                                    let ix = ox as isize + kx as isize - pad.w as isize;
                                    let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize;
                                    let v = match (inside, pad.mode) {
                                        (true, _) => x[[bi, ci, iy as usize, ix as usize]],
                                        (false, PadMode::Zero) => 0.0,
                                        (false, PadMode::Replicate) => x[[
                                            bi,
                                            ci,
                                            iy.clamp(0, h as isize - 1) as usize,
                                            ix.clamp(0, wd as isize - 1) as usize,
                                        ]],
                                    };
                                    acc += w[[oc, ci, ky, kx]] * v;
                                }
                            }
                        }
                        out[[bi, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let x = randn(&[2, 3, 7, 6], 1);
        for (kh, kw, pad) in [
            (3, 3, Padding::same(3, 3)),
            (1, 9, Padding::same(1, 9)),
            (9, 1, Padding::same_replicate(9, 1)),
            (1, 9, Padding::same_replicate(1, 9)),
            (1, 1, Padding::NONE),
            (3, 2, Padding::NONE),
        ] {
            let w = randn(&[4, 3, kh, kw], 2);
            let b = randn(&[4], 3);
            let got = conv2d_forward(&x, &w, Some(&b), pad);
            let want = naive_conv(&x, &w, Some(&b), pad);
            assert_eq!(got.shape(), want.shape());
            let err = (&got - &want).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(err < 1e-12, "kernel {kh}x{kw} {pad:?}: err {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (kh, kw, pad) in [
            (3, 3, Padding::same(3, 3)),
            (1, 5, Padding::same_replicate(1, 5)),
            (1, 1, Padding::NONE),
        ] {
            let inputs = vec![randn(&[2, 2, 5, 6], 4), randn(&[3, 2, kh, kw], 5), randn(&[3], 6)];
            let probe = randn(&[2, 3, 5, 6], 7);
            let report = check(
                &inputs,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), pad);
                    let p = t.constant(probe.clone());
                    let z = t.mul(y, p);
                    t.sum(z)
                },
                &GradCheckConfig::default(),
            );
            assert!(report.max_rel_err() < 1e-6, "{kh}x{kw}: {report:?}");
        }
    }
}
