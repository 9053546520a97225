use ndarray::{ArrayD, IxDyn};

use super::{dims4, Scalar, Tape, Var};

/// Source taps of a 1-D linear resize with half-pixel centres.
fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Tape<T> {
    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x).as_standard_layout();
        let (n, c, h, w) = dims4(xv.shape());
        let (oh, ow) = (h / 2, w / 2);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = xs[best];
                    arg[o] = best;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        self.push(
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.as_standard_layout();
                let mut dx = vec![T::zero(); n * c * h * w];
                for (&a, &gv) in arg.iter().zip(g.as_slice().unwrap()) {
                    dx[a] += gv;
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            }),
        )
    }

    /// Stride-1 max filter over a centred `kh x kw` window (odd sizes).
    /// Positions outside the image are ignored.
    pub fn max_filter(&mut self, x: Var, kh: usize, kw: usize) -> Var {
        assert!(kh % 2 == 1 && kw % 2 == 1, "max_filter: window must be odd");
        let xv = self.value(x).as_standard_layout();
        let (n, c, h, w) = dims4(xv.shape());
        let xs = xv.as_slice().unwrap();
        let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![T::zero(); xs.len()];
        let mut arg = vec![0usize; xs.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut best = base + (y as usize) * w + xx as usize;
                    for yy in (y - rh).max(0)..(y + rh + 1).min(h as isize) {
                        for xq in (xx - rw).max(0)..(xx + rw + 1).min(w as isize) {
                            let idx = base + yy as usize * w + xq as usize;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = base + y as usize * w + xx as usize;
                    out[o] = xs[best];
                    arg[o] = best;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.push(
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.as_standard_layout();
                let mut dx = vec![T::zero(); n * c * h * w];
                for (&a, &gv) in arg.iter().zip(g.as_slice().unwrap()) {
                    dx[a] += gv;
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            }),
        )
    }

    /// Stride-1 min filter, `-max_filter(-x)`.
    pub fn min_filter(&mut self, x: Var, kh: usize, kw: usize) -> Var {
        let neg = self.neg(x);
        let m = self.max_filter(neg, kh, kw);
        self.neg(m)
    }

    /// Bilinear resize with half-pixel centres (edge-clamped).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x).as_standard_layout();
        let (n, c, h, w) = dims4(xv.shape());
        let ty = resize_taps(oh, h);
        let tx = resize_taps(ow, w);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        self.push(
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let gp = &gs[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::lit(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::lit(fx);
                            let gv = gp[oy * ow + ox];
                            let top = gv * (T::one() - fy);
                            let bot = gv * fy;
                            dp[y0 * w + x0] += top * (T::one() - fx);
                            dp[y0 * w + x1] += top * fx;
                            dp[y1 * w + x0] += bot * (T::one() - fx);
                            dp[y1 * w + x1] += bot * fx;
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            }),
        )
    }
}
