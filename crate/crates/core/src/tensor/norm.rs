use ndarray::ArrayD;

use super::{dims4, Scalar, Tape, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    /// Instance normalisation without affine terms: every `(n, c)` plane is
    /// shifted to zero mean and scaled to unit (biased) variance.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let eps = T::lit(INSTANCE_NORM_EPS);
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv.shape());
        let hw = h * w;
        let inv_hw = T::one() / T::lit(hw as f64);
        let mut y = xv.as_standard_layout().into_owned();
        let mut inv_std = vec![T::zero(); n * c];
        {
            let ys = y.as_slice_mut().unwrap();
            for (k, plane) in ys.chunks_mut(hw).enumerate() {
                let mean = plane.iter().copied().sum::<T>() * inv_hw;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
                let is = T::one() / (var + eps).sqrt();
                inv_std[k] = is;
                for v in plane.iter_mut() {
                    *v = (*v - mean) * is;
                }
            }
        }
        self.push(
            y,
            vec![x],
            Box::new(move |ctx| {
                let y = ctx.output.as_standard_layout();
                let ys = y.as_slice().unwrap();
                let g = ctx.grad.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); n * c * hw];
                for k in 0..n * c {
                    let yp = &ys[k * hw..(k + 1) * hw];
                    let gp = &gs[k * hw..(k + 1) * hw];
                    let mean_g = gp.iter().copied().sum::<T>() * inv_hw;
                    let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                    let is = inv_std[k];
                    for ((d, &gv), &yv) in dx[k * hw..(k + 1) * hw].iter_mut().zip(gp).zip(yp) {
                        *d = is * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![Some(ArrayD::from_shape_vec(ctx.inputs[0].raw_dim(), dx).unwrap())]
            }),
        )
    }
}
