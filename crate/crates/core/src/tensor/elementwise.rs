use ndarray::{ArrayD, IxDyn, Zip};

use super::{Scalar, Tape, Var};

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &str) {
    assert_eq!(
        tape.value(a).shape(),
        tape.value(b).shape(),
        "{op}: operand shapes differ"
    );
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "add");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.mapv(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                let ga = ctx.needs[0].then(|| ctx.grad * ctx.inputs[1]);
                let gb = ctx.needs[1].then(|| ctx.grad * ctx.inputs[0]);
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(value, vec![a], Box::new(move |ctx| vec![Some(ctx.grad.mapv(|g| g * c))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, vec![a], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| T::one() - x);
        self.push(value, vec![a], Box::new(|ctx| vec![Some(ctx.grad.mapv(|g| -g))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            value,
            vec![a],
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                Zip::from(&mut g).and(ctx.inputs[0]).for_each(|g, &x| {
                    if x <= T::zero() {
                        *g = T::zero();
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| T::one() / (T::one() + (-x).exp()));
        self.push(
            value,
            vec![a],
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                Zip::from(&mut g)
                    .and(ctx.output)
                    .for_each(|g, &s| *g *= s * (T::one() - s));
                vec![Some(g)]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(
            value,
            vec![a],
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                Zip::from(&mut g)
                    .and(ctx.output)
                    .for_each(|g, &t| *g *= T::one() - t * t);
                vec![Some(g)]
            }),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        self.push(
            value,
            vec![a],
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                Zip::from(&mut g).and(ctx.inputs[0]).for_each(|g, &x| *g /= x);
                vec![Some(g)]
            }),
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                Zip::from(&mut g).and(ctx.inputs[0]).for_each(|g, &x| {
                    if x < lo || x > hi {
                        *g = T::zero();
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    /// Elementwise minimum. Ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "minimum");
        let mut value = self.value(a).clone();
        Zip::from(&mut value).and(self.value(b)).for_each(|v, &y| {
            if y < *v {
                *v = y;
            }
        });
        self.push(
            value,
            vec![a, b],
            Box::new(|ctx| {
                let mut ga = ctx.grad.clone();
                let mut gb = ctx.grad.clone();
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(ctx.inputs[0])
                    .and(ctx.inputs[1])
                    .for_each(|ga, gb, &x, &y| {
                        if y < x {
                            *ga = T::zero();
                        } else {
                            *gb = T::zero();
                        }
                    });
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![a],
            Box::new(|ctx| {
                let g = *ctx.grad.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(ctx.inputs[0].raw_dim(), g))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum over everything but the leading (batch) axis: `[N, ...] -> [N]`.
    pub fn sum_per_item(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n = shape[0];
        let per = self.value(a).len() / n.max(1);
        let flat = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, per))
            .expect("contiguous");
        let sums = flat.sum_axis(ndarray::Axis(1)).into_dyn();
        self.push(
            sums,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ArrayD::zeros(IxDyn(&shape));
                for (i, mut row) in g.outer_iter_mut().enumerate() {
                    row.fill(ctx.grad[[i]]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// `a / b` for two scalars (rank-0 or single-element tensors).
    pub fn div_scalar_var(&mut self, a: Var, b: Var) -> Var {
        let x = self.scalar(a);
        let y = self.scalar(b);
        let shape = self.value(a).raw_dim();
        self.push(
            ArrayD::from_elem(shape, x / y),
            vec![a, b],
            Box::new(move |ctx| {
                let g = *ctx.grad.iter().next().unwrap();
                vec![
                    Some(ArrayD::from_elem(ctx.inputs[0].raw_dim(), g / y)),
                    Some(ArrayD::from_elem(ctx.inputs[1].raw_dim(), -g * x / (y * y))),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{array, ArrayD};

    use crate::tensor::gradcheck::{check, GradCheckConfig};
    use crate::tensor::Tape;

    fn arr(v: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn forward_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(array![1.0, -2.0, 3.0].into_dyn());
        let b = tape.leaf(array![0.5, 0.5, 4.0].into_dyn());
        let m = tape.minimum(a, b);
        assert_eq!(tape.value(m).as_slice().unwrap(), &[0.5, -2.0, 3.0]);
        let r = tape.relu(a);
        assert_eq!(tape.value(r).as_slice().unwrap(), &[1.0, 0.0, 3.0]);
        let s = tape.sum(a);
        assert_eq!(tape.scalar(s), 2.0);
    }

    #[test]
    fn smooth_ops_match_finite_differences() {
        let inputs = vec![arr(&[0.3, -0.7, 1.2, 0.05]), arr(&[0.9, 0.2, -0.4, 0.6])];
        let report = check(
            &inputs,
            |t, v| {
                let s = t.sigmoid(v[0]);
                let th = t.tanh(v[1]);
                let p = t.mul(s, th);
                let q = t.sub(p, v[1]);
                let e = t.add_scalar(s, 1.0);
                let l = t.ln(e);
                let z = t.add(q, l);
                let c = t.scale(z, 0.7);
                let m = t.mean(c);
                let sum_s = t.sum(s);
                let r = t.div_scalar_var(m, sum_s);
                t.one_minus(r)
            },
            &GradCheckConfig::default(),
        );
        assert!(report.max_rel_err() < 1e-7, "{report:?}");
    }

    #[test]
    fn kinked_ops_match_away_from_kinks() {
        let inputs = vec![arr(&[0.3, -0.7, 1.2, 0.05]), arr(&[0.9, -0.2, 1.4, 0.6])];
        let report = check(
            &inputs,
            |t, v| {
                let r = t.relu(v[0]);
                let m = t.minimum(r, v[1]);
                let c = t.clamp(m, -0.5, 1.0);
                let per = t.sum_per_item(c);
                t.sum(per)
            },
            &GradCheckConfig::default(),
        );
        assert!(report.max_rel_err() < 1e-7, "{report:?}");
    }
}
