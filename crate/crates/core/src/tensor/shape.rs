use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{Scalar, Tape, Var};

impl<T: Scalar> Tape<T> {
    /// Row-major reshape to `shape` (same element count).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            xv.shape()
        );
        let value = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.push(
            value,
            vec![x],
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(ctx.inputs[0].raw_dim())
                    .unwrap();
                vec![Some(g)]
            }),
        )
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat: incompatible shapes");
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
        self.push(
            value,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(ctx.needs)
                    .map(|(&w, &need)| {
                        let slice = Slice::from(start..start + w);
                        start += w;
                        need.then(|| ctx.grad.slice_axis(Axis(1), slice).to_owned())
                    })
                    .collect()
            }),
        )
    }

    /// Channels `[start, end)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice_axis(Axis(1), Slice::from(start..end)).to_owned();
        self.push(
            value,
            vec![x],
            Box::new(move |ctx| {
                let mut g = ArrayD::zeros(ctx.inputs[0].raw_dim());
                g.slice_axis_mut(Axis(1), Slice::from(start..end)).assign(ctx.grad);
                vec![Some(g)]
            }),
        )
    }
}
