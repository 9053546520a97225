//! Segmentation objective: soft centerline Dice blended with binary cross-entropy.

use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Probability clamp used inside the log terms of BCE.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of `1 - clDice`; BCE gets `1 - alpha`.
    pub alpha: f64,
    /// Soft-skeleton iterations.
    pub skeleton_iters: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            skeleton_iters: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.skeleton_iters == 0 {
            return Err(invalid!("skeleton_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Soft erosion: the smaller of a vertical and a horizontal 3-tap min.
pub fn soft_erode<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let v = tape.min_filter(x, 3, 1);
    let h = tape.min_filter(x, 1, 3);
    tape.minimum(v, h)
}

pub fn soft_dilate<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.max_filter(x, 3, 3)
}

pub fn soft_open<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let e = soft_erode(tape, x);
    soft_dilate(tape, e)
}

/// Differentiable skeleton of a `[N, C, H, W]` probability map by iterated soft
/// opening. The soft union of the per-scale residues is capped by the input, so
/// the skeleton never exceeds its mask.
pub fn soft_skeleton<T: Scalar>(tape: &mut Tape<T>, x: Var, iters: usize) -> Var {
    let opened = soft_open(tape, x);
    let diff = tape.sub(x, opened);
    let mut skel = tape.relu(diff);
    let mut img = x;
    for _ in 0..iters {
        img = soft_erode(tape, img);
        let opened = soft_open(tape, img);
        let diff = tape.sub(img, opened);
        let delta = tape.relu(diff);
        // skel += relu(delta - skel * delta)
        let overlap = tape.mul(skel, delta);
        let fresh = tape.sub(delta, overlap);
        let fresh = tape.relu(fresh);
        skel = tape.add(skel, fresh);
    }
    tape.minimum(skel, x)
}

/// Soft clDice over every pixel of the batch (sums pool all items).
///
/// A ratio whose skeleton mass is zero counts as 0, and so does clDice, unless
/// both masks are empty, which is perfect agreement (1).
pub fn cl_dice<T: Scalar>(tape: &mut Tape<T>, pred: Var, label: Var, iters: usize) -> Result<Var> {
    check_pair(tape, pred, label)?;
    let empty = |t: &Tape<T>, v: Var| t.value(v).iter().all(|&x| x == T::zero());
    if empty(tape, pred) && empty(tape, label) {
        log::debug!("cl_dice: both masks empty, reporting 1");
        return Ok(tape.constant(ArrayD::from_elem(IxDyn(&[]), T::one())));
    }
    let s_pred = soft_skeleton(tape, pred, iters);
    let s_label = soft_skeleton(tape, label, iters);
    let tprec = covered_fraction(tape, s_pred, label);
    let tsens = covered_fraction(tape, s_label, pred);
    let (p, s) = (tape.scalar(tprec), tape.scalar(tsens));
    if p + s == T::zero() {
        log::debug!("cl_dice: zero topological precision and sensitivity");
        return Ok(tape.constant(ArrayD::from_elem(IxDyn(&[]), T::zero())));
    }
    let prod = tape.mul(tprec, tsens);
    let num = tape.scale(prod, T::lit(2.0));
    let den = tape.add(tprec, tsens);
    Ok(tape.div_scalar_var(num, den))
}

/// `|S ∩ V| / |S|`, or a constant 0 when the skeleton is empty.
fn covered_fraction<T: Scalar>(tape: &mut Tape<T>, skel: Var, mask: Var) -> Var {
    let mass = tape.sum(skel);
    if tape.scalar(mass) == T::zero() {
        log::debug!("cl_dice: empty skeleton, ratio set to 0");
        return tape.constant(ArrayD::from_elem(IxDyn(&[]), T::zero()));
    }
    let inter = tape.mul(skel, mask);
    let inter = tape.sum(inter);
    tape.div_scalar_var(inter, mass)
}

fn check_pair<T: Scalar>(tape: &Tape<T>, pred: Var, label: Var) -> Result<()> {
    let (ps, ls) = (tape.value(pred).shape(), tape.value(label).shape());
    if ps != ls {
        return Err(invalid!("prediction shape {ps:?} differs from label shape {ls:?}"));
    }
    if ps.len() != 4 {
        return Err(invalid!("expected [N, C, H, W] maps, got {ps:?}"));
    }
    Ok(())
}

/// Mean binary cross-entropy with the probability clamped to `[eps, 1 - eps]`.
/// The clamp is applied inside the log only, so the gradient is that of the
/// clamped expression (zero where the clamp is active).
pub fn bce<T: Scalar>(tape: &mut Tape<T>, pred: Var, label: Var) -> Result<Var> {
    check_pair(tape, pred, label)?;
    let eps = T::lit(BCE_EPS);
    let hi = T::one() - eps;
    let n = T::lit(tape.value(pred).len() as f64);
    let mut total = T::zero();
    Zip::from(tape.value(pred)).and(tape.value(label)).for_each(|&p, &y| {
        let q = p.max(eps).min(hi);
        total -= y * q.ln() + (T::one() - y) * (T::one() - q).ln();
    });
    Ok(tape.push(
        ArrayD::from_elem(IxDyn(&[]), total / n),
        vec![pred, label],
        Box::new(move |ctx| {
            let g = *ctx.grad.iter().next().unwrap() / n;
            let mut dp = ctx.inputs[0].clone();
            Zip::from(&mut dp).and(ctx.inputs[1]).for_each(|d, &y| {
                let p = *d;
                *d = if p < eps || p > hi {
                    T::zero()
                } else {
                    g * ((T::one() - y) / (T::one() - p) - y / p)
                };
            });
            let dy = ctx.needs[1].then(|| {
                let mut dy = ctx.inputs[0].clone();
                dy.mapv_inplace(|p| {
                    let q = p.max(eps).min(hi);
                    g * ((T::one() - q).ln() - q.ln())
                });
                dy
            });
            vec![Some(dp), dy]
        }),
    ))
}

/// `alpha * (1 - clDice) + (1 - alpha) * BCE`.
pub fn training_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, label: Var, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let b = bce(tape, pred, label)?;
    if weights.alpha == 0.0 {
        return Ok(b);
    }
    let cl = cl_dice(tape, pred, label, weights.skeleton_iters)?;
    let miss = tape.neg(cl);
    let miss = tape.add_scalar(miss, T::one());
    Ok(blend(tape, miss, b, weights.alpha))
}

/// `alpha * a + (1 - alpha) * b` for scalars.
pub(crate) fn blend<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, alpha: f64) -> Var {
    let a = tape.scale(a, T::lit(alpha));
    let b = tape.scale(b, T::lit(1.0 - alpha));
    tape.add(a, b)
}

/// Plain-array soft skeleton of a single `[H, W]` map.
pub fn soft_skeleton_map(map: &ndarray::Array2<f64>, iters: usize) -> ndarray::Array2<f64> {
    let (h, w) = map.dim();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(map.as_standard_layout().into_owned().into_shape_with_order((1, 1, h, w)).unwrap().into_dyn());
    let s = soft_skeleton(&mut tape, x, iters);
    tape.value(s)
        .clone()
        .into_shape_with_order((h, w))
        .unwrap()
}
