//! Kalman-smoothed kernel geometry for linear deformable convolution, and
//! differentiable sampling at the resulting tap positions.
//!
//! A linear kernel of odd length `L` has a centre tap and two arms of
//! `(L-1)/2` taps. Each arm starts at the centre with `x_0 = 0, p_0 = 1` and
//! accumulates its raw per-tap offsets through the scalar Kalman recursion
//!
//! ```text
//! K_i = p_{i-1} / (p_{i-1} + r)
//! x_i = x_{i-1} + K_i * delta_i
//! p_i = (1 - K_i) * p_{i-1}
//! ```
//!
//! which for `p_0 = 1` has the closed form `K_i = 1 / (i + r)`. Tap `+c` then
//! sits at `base + c + x_c` along the kernel axis (and `-c` at `base - c + x_c`
//! with the negative arm's state). The perpendicular coordinate never moves.
//!
//! Out-of-range sample positions are clamped to the border (edge replication).

use ndarray::{ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{dims4, Scalar, Tape, Var};

/// State of the scalar Kalman recursion along one kernel arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    /// Estimate covariance.
    pub p: f64,
    /// Measurement-noise hyperparameter.
    pub r: f64,
    /// Accumulated coordinate offset, in pixels.
    pub x: f64,
    pub step: usize,
}

impl KalmanState {
    /// Fresh arm state: `p_0 = 1`, `x_0 = 0`.
    pub fn new(r: f64) -> Result<Self> {
        Self::with_covariance(1.0, r)
    }

    pub fn with_covariance(p0: f64, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(invalid!("kalman: measurement noise r must be positive and finite, got {r}"));
        }
        if !(p0 > 0.0 && p0.is_finite()) {
            return Err(invalid!("kalman: initial covariance p0 must be positive and finite, got {p0}"));
        }
        Ok(Self {
            p: p0,
            r,
            x: 0.0,
            step: 0,
        })
    }

    /// Gain that the next update will apply.
    pub fn next_gain(&self) -> f64 {
        self.p / (self.p + self.r)
    }

    /// Absorbs one raw offset and returns the gain used.
    pub fn update(&mut self, delta: f64) -> f64 {
        let k = self.next_gain();
        self.x += k * delta;
        self.p *= 1.0 - k;
        self.step += 1;
        k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSequence {
    pub gains: Vec<f64>,
    pub final_covariance: f64,
}

/// Gains `K_1..K_n` of the recursion started from covariance `p0`.
pub fn kalman_gain_sequence(n: usize, r: f64, p0: f64) -> Result<GainSequence> {
    if n == 0 {
        return Err(invalid!("kalman: need at least one step"));
    }
    let mut state = KalmanState::with_covariance(p0, r)?;
    let gains = (0..n).map(|_| state.update(0.0)).collect();
    Ok(GainSequence {
        gains,
        final_covariance: state.p,
    })
}

/// Smoothed coordinates `x_1..x_n` for raw offsets `deltas`, from `x_0 = 0, p_0 = 1`.
pub fn kalman_accumulate(deltas: &[f64], r: f64) -> Result<Vec<f64>> {
    if let Some(i) = deltas.iter().position(|d| !d.is_finite()) {
        return Err(crate::Error::NonFinite(format!(
            "kalman_accumulate: raw offset {i} is {}",
            deltas[i]
        )));
    }
    let mut state = KalmanState::new(r)?;
    Ok(deltas
        .iter()
        .map(|&d| {
            state.update(d);
            state.x
        })
        .collect())
}

/// Gains for one arm as a plain vector, `p_0 = 1`.
pub fn arm_gains(arm: usize, r: f64) -> Result<Vec<f64>> {
    Ok(kalman_gain_sequence(arm.max(1), r, 1.0)?.gains[..arm].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Kernel runs along columns (`1 x L`); only column coordinates move.
    Horizontal,
    /// Kernel runs along rows (`L x 1`); only row coordinates move.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub length: usize,
    pub orientation: Orientation,
    /// Bound on each raw per-tap offset, in pixels.
    pub extent: f64,
}

impl KernelSpec {
    pub fn new(length: usize, orientation: Orientation, extent: f64) -> Result<Self> {
        if length % 2 == 0 || length == 0 {
            return Err(invalid!("kernel length must be odd, got {length}"));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(invalid!("offset extent must be positive, got {extent}"));
        }
        Ok(Self {
            length,
            orientation,
            extent,
        })
    }

    /// Taps per arm, `(L-1)/2`.
    pub fn arm(&self) -> usize {
        (self.length - 1) / 2
    }

    /// Offset channels per pixel: positive arm `c = 1..=arm`, then negative arm.
    pub fn offset_channels(&self) -> usize {
        self.length - 1
    }

    /// Signed tap index for kernel position `t` in `0..length`.
    pub fn tap(&self, t: usize) -> isize {
        t as isize - self.arm() as isize
    }

    /// Offset channel driving tap `c`, `None` for the centre.
    pub fn offset_channel(&self, c: isize) -> Option<usize> {
        match c {
            0 => None,
            c if c > 0 => Some(c as usize - 1),
            c => Some(self.arm() + (-c) as usize - 1),
        }
    }
}

/// Raw and Kalman-smoothed offsets, both shaped `[N, L-1, H, W]`.
#[derive(Debug, Clone)]
pub struct OffsetField<T> {
    pub raw: ArrayD<T>,
    pub smoothed: ArrayD<T>,
}

impl<T: Scalar> OffsetField<T> {
    /// Smooths `raw` arm by arm with [`kalman_accumulate`].
    pub fn from_raw(raw: ArrayD<T>, spec: &KernelSpec, r: f64) -> Result<Self> {
        let (n, ch, h, w) = dims4(raw.shape());
        if ch != spec.offset_channels() {
            return Err(invalid!(
                "offset field has {ch} channels, kernel of length {} needs {}",
                spec.length,
                spec.offset_channels()
            ));
        }
        let arm = spec.arm();
        let mut smoothed = ArrayD::zeros(raw.raw_dim());
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for side in 0..2 {
                        let deltas: Vec<f64> = (0..arm).map(|i| raw[[b, side * arm + i, y, x]].as_f64()).collect();
                        for (i, v) in kalman_accumulate(&deltas, r)?.into_iter().enumerate() {
                            smoothed[[b, side * arm + i, y, x]] = T::lit(v);
                        }
                    }
                }
            }
        }
        Ok(Self { raw, smoothed })
    }
}

/// Tap coordinates `(row, col)` for one pixel, ordered from tap `-arm` to `+arm`.
///
/// `smoothed` holds the pixel's `L-1` smoothed offsets in channel order
/// (positive arm first).
pub fn build_sample_grid(base: (f64, f64), smoothed: &[f64], spec: &KernelSpec) -> Result<Vec<(f64, f64)>> {
    if smoothed.len() != spec.offset_channels() {
        return Err(invalid!(
            "sample grid: {} offsets supplied, kernel of length {} needs {}",
            smoothed.len(),
            spec.length,
            spec.offset_channels()
        ));
    }
    Ok((0..spec.length)
        .map(|t| {
            let c = spec.tap(t);
            let shift = c as f64 + spec.offset_channel(c).map_or(0.0, |k| smoothed[k]);
            match spec.orientation {
                Orientation::Horizontal => (base.0, base.1 + shift),
                Orientation::Vertical => (base.0 + shift, base.1),
            }
        })
        .collect())
}

/// Linear interpolation taps along one axis of length `len` with border clamp.
/// Returns `(i0, i1, frac, inside)`; `inside` is false when clamping was active.
#[inline]
fn lerp_taps<T: Scalar>(pos: T, len: usize) -> (usize, usize, T, bool) {
    let hi = T::lit((len - 1) as f64);
    if !(pos >= T::zero()) {
        return (0, 0, T::zero(), false);
    }
    if pos >= hi {
        let last = len - 1;
        return (last, last, T::zero(), pos == hi);
    }
    let f = pos.floor();
    let i0 = f.to_usize().unwrap();
    (i0, (i0 + 1).min(len - 1), pos - f, true)
}

#[inline]
fn lerp<T: Scalar>(v0: T, v1: T, f: T) -> T {
    if f == T::zero() {
        v0
    } else {
        v0 + f * (v1 - v0)
    }
}

/// Bilinear interpolation of a single-channel map at real coordinates
/// `(row, col)`, clamping coordinates into the image.
pub fn bilinear_sample(feature: ArrayView2<'_, f64>, coords: &[(f64, f64)]) -> Vec<f64> {
    let (h, w) = feature.dim();
    coords
        .iter()
        .map(|&(y, x)| {
            let (y0, y1, fy, _) = lerp_taps(y, h);
            let (x0, x1, fx, _) = lerp_taps(x, w);
            let top = lerp(feature[[y0, x0]], feature[[y0, x1]], fx);
            let bot = lerp(feature[[y1, x0]], feature[[y1, x1]], fx);
            lerp(top, bot, fy)
        })
        .collect()
}

/// Differentiable bilinear sampling.
///
/// `feature`: `[N, C, H, W]`; `coords`: `[N, P, 2]` as `(row, col)`.
/// Returns `[N, C, P]`. The coordinate gradient is zero where clamping is
/// active and one-sided (from the floor cell) at lattice points.
pub fn sample_bilinear<T: Scalar>(tape: &mut Tape<T>, feature: Var, coords: Var) -> Var {
    let fv = tape.value(feature).as_standard_layout().into_owned();
    let cv = tape.value(coords).as_standard_layout().into_owned();
    let (n, c, h, w) = dims4(fv.shape());
    let p = cv.shape()[1];
    assert_eq!(cv.shape(), &[n, p, 2], "sample_bilinear: coords must be [N, P, 2]");
    let mut out = vec![T::zero(); n * c * p];
    let (fs, cs) = (fv.as_slice().unwrap(), cv.as_slice().unwrap());
    for b in 0..n {
        for k in 0..p {
            let (y0, y1, fy, _) = lerp_taps(cs[(b * p + k) * 2], h);
            let (x0, x1, fx, _) = lerp_taps(cs[(b * p + k) * 2 + 1], w);
            for ci in 0..c {
                let plane = &fs[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], fx);
                let bot = lerp(plane[y1 * w + x0], plane[y1 * w + x1], fx);
                out[(b * c + ci) * p + k] = lerp(top, bot, fy);
            }
        }
    }
    let value = ArrayD::from_shape_vec(IxDyn(&[n, c, p]), out).unwrap();
    tape.push(
        value,
        vec![feature, coords],
        Box::new(move |ctx| {
            let (fs, cs) = (fv.as_slice().unwrap(), cv.as_slice().unwrap());
            let g = ctx.grad.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut df = vec![T::zero(); n * c * h * w];
            let mut dc = vec![T::zero(); n * p * 2];
            for b in 0..n {
                for k in 0..p {
                    let (y0, y1, fy, in_y) = lerp_taps(cs[(b * p + k) * 2], h);
                    let (x0, x1, fx, in_x) = lerp_taps(cs[(b * p + k) * 2 + 1], w);
                    let (one_y, one_x) = (T::one() - fy, T::one() - fx);
                    for ci in 0..c {
                        let base = (b * c + ci) * h * w;
                        let gv = gs[(b * c + ci) * p + k];
                        let plane = &fs[base..base + h * w];
                        let (v00, v01, v10, v11) =
                            (plane[y0 * w + x0], plane[y0 * w + x1], plane[y1 * w + x0], plane[y1 * w + x1]);
                        df[base + y0 * w + x0] += gv * one_y * one_x;
                        df[base + y0 * w + x1] += gv * one_y * fx;
                        df[base + y1 * w + x0] += gv * fy * one_x;
                        df[base + y1 * w + x1] += gv * fy * fx;
                        if in_y && y1 != y0 {
                            let top = lerp(v00, v01, fx);
                            let bot = lerp(v10, v11, fx);
                            dc[(b * p + k) * 2] += gv * (bot - top);
                        }
                        if in_x && x1 != x0 {
                            dc[(b * p + k) * 2 + 1] += gv * (one_y * (v01 - v00) + fy * (v11 - v10));
                        }
                    }
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), df).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[n, p, 2]), dc).unwrap()),
            ]
        }),
    )
}

/// Kalman smoothing of raw offsets on the tape, per arm and pixel.
///
/// `raw`: `[N, 2*arm, H, W]`; channel `side*arm + i` holds `delta_{i+1}` of
/// that arm. Output channel `side*arm + j` is `sum_{i<=j} gains[i] * delta_{i+1}`.
pub fn kalman_smooth<T: Scalar>(tape: &mut Tape<T>, raw: Var, gains: &[f64]) -> Var {
    let arm = gains.len();
    let rv = tape.value(raw).as_standard_layout().into_owned();
    let (n, ch, h, w) = dims4(rv.shape());
    assert_eq!(ch, 2 * arm, "kalman_smooth: expected {} offset channels", 2 * arm);
    let gains: Vec<T> = gains.iter().map(|&g| T::lit(g)).collect();
    let hw = h * w;
    let rs = rv.as_slice().unwrap();
    let mut out = vec![T::zero(); rs.len()];
    for b in 0..n {
        for side in 0..2 {
            let base = (b * ch + side * arm) * hw;
            for px in 0..hw {
                let mut acc = T::zero();
                for (i, &k) in gains.iter().enumerate() {
                    acc += k * rs[base + i * hw + px];
                    out[base + i * hw + px] = acc;
                }
            }
        }
    }
    let value = ArrayD::from_shape_vec(IxDyn(&[n, ch, h, w]), out).unwrap();
    tape.push(
        value,
        vec![raw],
        Box::new(move |ctx| {
            let g = ctx.grad.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut d = vec![T::zero(); gs.len()];
            for b in 0..n {
                for side in 0..2 {
                    let base = (b * ch + side * arm) * hw;
                    for px in 0..hw {
                        let mut tail = T::zero();
                        for i in (0..arm).rev() {
                            tail += gs[base + i * hw + px];
                            d[base + i * hw + px] = gains[i] * tail;
                        }
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, ch, h, w]), d).unwrap())]
        }),
    )
}

/// Samples every input channel at the deformed linear-kernel taps of every pixel.
///
/// `x`: `[N, C, H, W]`; `smoothed`: `[N, L-1, H, W]`. Returns `[N, C*L, H, W]`
/// with channel `ci*L + t` holding channel `ci` at tap `t`, the same row order
/// an unfolded `1 x L` (or `L x 1`) convolution uses. With all offsets zero the
/// result equals the replicate-padded unfold exactly.
pub fn deform_sample<T: Scalar>(tape: &mut Tape<T>, x: Var, smoothed: Var, spec: &KernelSpec) -> Var {
    let xv = tape.value(x).as_standard_layout().into_owned();
    let ov = tape.value(smoothed).as_standard_layout().into_owned();
    let (n, c, h, w) = dims4(xv.shape());
    assert_eq!(
        ov.shape(),
        &[n, spec.offset_channels(), h, w],
        "deform_sample: offset field shape"
    );
    let spec = *spec;
    let l = spec.length;
    let hw = h * w;
    let taps = tap_table(&ov, &spec, n, h, w);
    let xs = xv.as_slice().unwrap();
    let mut out = vec![T::zero(); n * c * l * hw];
    for b in 0..n {
        for t in 0..l {
            let tt = &taps[(b * l + t) * hw..(b * l + t + 1) * hw];
            for ci in 0..c {
                let plane = &xs[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                let dst = &mut out[((b * c + ci) * l + t) * hw..((b * c + ci) * l + t + 1) * hw];
                for (d, tap) in dst.iter_mut().zip(tt) {
                    *d = lerp(plane[tap.i0], plane[tap.i1], tap.f);
                }
            }
        }
    }
    let value = ArrayD::from_shape_vec(IxDyn(&[n, c * l, h, w]), out).unwrap();
    tape.push(
        value,
        vec![x, smoothed],
        Box::new(move |ctx| {
            let xs = xv.as_slice().unwrap();
            let g = ctx.grad.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![T::zero(); n * c * hw];
            let mut doff = vec![T::zero(); n * spec.offset_channels() * hw];
            for b in 0..n {
                for t in 0..l {
                    let tt = &taps[(b * l + t) * hw..(b * l + t + 1) * hw];
                    let oc = spec.offset_channel(spec.tap(t));
                    for ci in 0..c {
                        let plane = &xs[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                        let gp = &gs[((b * c + ci) * l + t) * hw..((b * c + ci) * l + t + 1) * hw];
                        let dplane = &mut dx[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                        for (gv, tap) in gp.iter().zip(tt) {
                            dplane[tap.i0] += *gv * (T::one() - tap.f);
                            dplane[tap.i1] += *gv * tap.f;
                        }
                        if let Some(oc) = oc {
                            let dst = &mut doff[(b * spec.offset_channels() + oc) * hw..][..hw];
                            for ((d, gv), tap) in dst.iter_mut().zip(gp).zip(tt) {
                                if tap.inside && tap.i1 != tap.i0 {
                                    *d += *gv * (plane[tap.i1] - plane[tap.i0]);
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[n, spec.offset_channels(), h, w]), doff).unwrap()),
            ]
        }),
    )
}

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    f: T,
    inside: bool,
}

/// Flat-index interpolation taps for every `(batch, tap, pixel)`.
fn tap_table<T: Scalar>(offsets: &ArrayD<T>, spec: &KernelSpec, n: usize, h: usize, w: usize) -> Vec<Tap<T>> {
    let os = offsets.as_slice().unwrap();
    let l = spec.length;
    let hw = h * w;
    let mut taps = Vec::with_capacity(n * l * hw);
    for b in 0..n {
        for t in 0..l {
            let c = spec.tap(t);
            let oc = spec.offset_channel(c);
            for y in 0..h {
                for x in 0..w {
                    let off = oc.map_or(T::zero(), |k| os[((b * spec.offset_channels() + k) * h + y) * w + x]);
                    let shift = T::lit(c as f64) + off;
                    let tap = match spec.orientation {
                        Orientation::Horizontal => {
                            let (i0, i1, f, inside) = lerp_taps(T::lit(x as f64) + shift, w);
                            Tap {
                                i0: y * w + i0,
                                i1: y * w + i1,
                                f,
                                inside,
                            }
                        }
                        Orientation::Vertical => {
                            let (i0, i1, f, inside) = lerp_taps(T::lit(y as f64) + shift, h);
                            Tap {
                                i0: i0 * w + x,
                                i1: i1 * w + x,
                                f,
                                inside,
                            }
                        }
                    };
                    taps.push(tap);
                }
            }
        }
    }
    assert_eq!(taps.len(), n * l * hw);
    taps
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::{array, ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    use super::*;
    use crate::tensor::gradcheck::{check, GradCheckConfig};
    use crate::tensor::{unfold, Padding};

    #[test]
    fn gain_sequence_examples() {
        let seq = kalman_gain_sequence(4, 0.01, 1.0).unwrap();
        for (k, want) in seq.gains.iter().zip([0.990099, 0.497512, 0.332226, 0.249377]) {
            assert_abs_diff_eq!(*k, want, epsilon = 1e-6);
        }
        let seq = kalman_gain_sequence(3, 1.0, 1.0).unwrap();
        for (k, want) in seq.gains.iter().zip([0.5, 1.0 / 3.0, 0.25]) {
            assert_abs_diff_eq!(*k, want, epsilon = 1e-15);
        }
        let seq = kalman_gain_sequence(1, 1e12, 1.0).unwrap();
        assert!(seq.gains[0] < 1e-11);
    }

    #[test]
    fn gain_sequence_rejects_bad_arguments() {
        assert!(kalman_gain_sequence(3, 0.0, 1.0).is_err());
        assert!(kalman_gain_sequence(3, -1.0, 1.0).is_err());
        assert!(kalman_gain_sequence(3, 0.1, 0.0).is_err());
        assert!(kalman_gain_sequence(0, 0.1, 1.0).is_err());
    }

    #[test]
    fn accumulate_examples() {
        assert_eq!(kalman_accumulate(&[0.0; 4], 0.3).unwrap(), vec![0.0; 4]);
        let x = kalman_accumulate(&[1.0; 4], 0.01).unwrap();
        for (v, want) in x.iter().zip([0.990099, 1.487611, 1.819837, 2.069214]) {
            assert_abs_diff_eq!(*v, want, epsilon = 1e-6);
        }
        let x = kalman_accumulate(&[2.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(x, vec![1.0; 4]);
        assert!(kalman_accumulate(&[1.0, f64::NAN], 0.01).is_err());
    }

    #[test]
    fn covariance_decreases_and_gain_in_unit_interval() {
        let mut state = KalmanState::new(0.2).unwrap();
        let mut prev = state.p;
        for _ in 0..10 {
            let k = state.update(0.5);
            assert!(k > 0.0 && k < 1.0);
            assert!(state.p < prev);
            prev = state.p;
        }
    }

    proptest! {
        #[test]
        fn closed_form_gain(r in 1e-3f64..10.0, n in 1usize..16) {
            let seq = kalman_gain_sequence(n, r, 1.0).unwrap();
            for (i, k) in seq.gains.iter().enumerate() {
                prop_assert!((k - 1.0 / ((i + 1) as f64 + r)).abs() <= 1e-12);
            }
        }

        #[test]
        fn accumulate_is_linear(
            d1 in proptest::collection::vec(-3.0f64..3.0, 4),
            d2 in proptest::collection::vec(-3.0f64..3.0, 4),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            r in 1e-3f64..2.0,
        ) {
            let combo: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
            let lhs = kalman_accumulate(&combo, r).unwrap();
            let x1 = kalman_accumulate(&d1, r).unwrap();
            let x2 = kalman_accumulate(&d2, r).unwrap();
            for i in 0..4 {
                prop_assert!((lhs[i] - (a * x1[i] + b * x2[i])).abs() <= 1e-12);
            }
        }

        #[test]
        fn later_taps_move_less(d in proptest::collection::vec(-2.0f64..2.0, 8), r in 1e-3f64..2.0) {
            let x = kalman_accumulate(&d, r).unwrap();
            let gains = kalman_gain_sequence(8, r, 1.0).unwrap().gains;
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut prev = 0.0;
            for i in 0..8 {
                prop_assert!((x[i] - prev).abs() <= gains[i] * dmax + 1e-15);
                if i > 0 {
                    prop_assert!(gains[i] < gains[i - 1]);
                }
                prev = x[i];
            }
        }
    }

    #[test]
    fn sample_grid_examples() {
        let h = KernelSpec::new(9, Orientation::Horizontal, 2.0).unwrap();
        let grid = build_sample_grid((10.0, 10.0), &[0.0; 8], &h).unwrap();
        let cols: Vec<f64> = grid.iter().map(|p| p.1).collect();
        assert_eq!(cols, (6..=14).map(|c| c as f64).collect::<Vec<_>>());
        assert!(grid.iter().all(|p| p.0 == 10.0));

        let offs = [0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        let grid = build_sample_grid((10.0, 10.0), &offs, &h).unwrap();
        let pos: Vec<f64> = grid[5..].iter().map(|p| p.1).collect();
        assert_eq!(pos, vec![11.5, 12.5, 13.5, 14.5]);

        let v = KernelSpec::new(9, Orientation::Vertical, 2.0).unwrap();
        let grid = build_sample_grid((10.0, 10.0), &offs, &v).unwrap();
        assert!(grid.iter().all(|p| p.1 == 10.0));
        let rows: Vec<f64> = grid[5..].iter().map(|p| p.0).collect();
        assert_eq!(rows, vec![11.5, 12.5, 13.5, 14.5]);

        assert!(build_sample_grid((0.0, 0.0), &[0.0; 6], &h).is_err());
        assert!(KernelSpec::new(8, Orientation::Horizontal, 2.0).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let f = array![[1.0, 3.0], [5.0, 7.0]];
        assert_eq!(bilinear_sample(f.view(), &[(0.5, 0.5)]), vec![4.0]);
        assert_eq!(bilinear_sample(f.view(), &[(-5.0, -5.0)]), vec![1.0]);
        let g = ArrayD::from_shape_fn(IxDyn(&[4, 5]), |i| (i[0] * 5 + i[1]) as f64 * 1.5)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        assert_eq!(bilinear_sample(g.view(), &[(2.0, 3.0)]), vec![g[[2, 3]]]);
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let feat = ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 5, 6]), || u.sample(&mut rng));
        // Coordinates away from lattice lines and borders.
        let cu = Uniform::new(0.1, 0.9).unwrap();
        let coords = ArrayD::from_shape_fn(IxDyn(&[1, 7, 2]), |i| {
            let cell = (i[1] % 4) as f64;
            cell + cu.sample(&mut rng) + if i[2] == 0 { 0.0 } else { 0.5 * (i[1] % 2) as f64 }
        });
        let probe = ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 7]), || u.sample(&mut rng));
        let report = check(
            &[feat, coords],
            |t, v| {
                let s = sample_bilinear(t, v[0], v[1]);
                let p = t.constant(probe.clone());
                let z = t.mul(s, p);
                t.sum(z)
            },
            &GradCheckConfig {
                step: 1e-4,
                ..Default::default()
            },
        );
        assert!(report.max_rel_err() <= 1e-5, "{report:?}");
    }

    #[test]
    fn kalman_smooth_matches_scalar_recursion() {
        let spec = KernelSpec::new(9, Orientation::Horizontal, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Uniform::new(-2.0, 2.0).unwrap();
        let raw = ArrayD::from_shape_simple_fn(IxDyn(&[2, 8, 3, 4]), || u.sample(&mut rng));
        let field = OffsetField::from_raw(raw.clone(), &spec, 0.01).unwrap();
        let mut tape = Tape::<f64>::new();
        let rv = tape.leaf(raw);
        let sm = kalman_smooth(&mut tape, rv, &arm_gains(4, 0.01).unwrap());
        let err = (tape.value(sm) - &field.smoothed).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-14);
    }

    #[test]
    fn zero_offsets_reproduce_replicate_unfold_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 12, 12]), || u.sample(&mut rng));
        for (orientation, kh, kw) in [(Orientation::Horizontal, 1, 9), (Orientation::Vertical, 9, 1)] {
            let spec = KernelSpec::new(9, orientation, 2.0).unwrap();
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(x.clone());
            let off = tape.constant(ArrayD::zeros(IxDyn(&[2, 8, 12, 12])));
            let s = deform_sample(&mut tape, xv, off, &spec);
            let rigid = unfold(&x, kh, kw, Padding::same_replicate(kh, kw));
            assert_eq!(tape.value(s), &rigid);
        }
    }

    #[test]
    fn deform_and_smooth_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 6, 7]), || u.sample(&mut rng));
        let raw = ArrayD::from_shape_simple_fn(IxDyn(&[1, 4, 6, 7]), || 0.37 + 0.25 * u.sample(&mut rng));
        let probe = ArrayD::from_shape_simple_fn(IxDyn(&[1, 10, 6, 7]), || u.sample(&mut rng));
        for orientation in [Orientation::Horizontal, Orientation::Vertical] {
            let spec = KernelSpec::new(5, orientation, 2.0).unwrap();
            let gains = arm_gains(2, 0.3).unwrap();
            let report = check(
                &[x.clone(), raw.clone()],
                |t, v| {
                    let sm = kalman_smooth(t, v[1], &gains);
                    let s = deform_sample(t, v[0], sm, &spec);
                    let p = t.constant(probe.clone());
                    let z = t.mul(s, p);
                    t.sum(z)
                },
                &GradCheckConfig {
                    step: 1e-6,
                    ..Default::default()
                },
            );
            assert!(report.max_rel_err() <= 1e-5, "{orientation:?}: {report:?}");
        }
    }
}
