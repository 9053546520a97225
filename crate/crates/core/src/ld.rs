//! Linear deformable block: a rigid 3x3 base branch plus horizontal and
//! vertical deformable 1-D branches whose tap offsets are Kalman-smoothed.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::{norm_act, Builder, Conv2d, ConvBlock, ConvNormAct};
use crate::sampling::{arm_gains, deform_sample, kalman_smooth, KernelSpec, OffsetField, Orientation};
use crate::tensor::{Padding, ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdParams {
    pub kernel_length: usize,
    /// Kalman measurement-noise hyperparameter.
    pub r: f64,
    /// Offset bound in pixels.
    pub extent: f64,
}

impl Default for LdParams {
    fn default() -> Self {
        Self {
            kernel_length: 9,
            r: 0.01,
            extent: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(flatten)]
    pub params: LdParams,
}

impl LdConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            params: LdParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid!("LD block needs positive channel counts"));
        }
        if !(self.params.r > 0.0) {
            return Err(invalid!("Kalman r must be positive, got {}", self.params.r));
        }
        KernelSpec::new(self.params.kernel_length, Orientation::Horizontal, self.params.extent)?;
        Ok(())
    }
}

/// One deformable 1-D branch (offset conv, bound, smooth, sample, linear conv).
#[derive(Debug, Clone)]
pub struct DeformBranch {
    pub spec: KernelSpec,
    gains: Vec<f64>,
    pub offset: Conv2d,
    /// `[O, C, 1, L]` (horizontal) or `[O, C, L, 1]` (vertical).
    pub weight: ParamId,
    in_channels: usize,
    out_channels: usize,
}

impl DeformBranch {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, config: &LdConfig, orientation: Orientation) -> Result<Self> {
        let p = config.params;
        let spec = KernelSpec::new(p.kernel_length, orientation, p.extent)?;
        let gains = arm_gains(spec.arm(), p.r)?;
        let (c, o, l) = (config.in_channels, config.out_channels, spec.length);
        let kshape = match orientation {
            Orientation::Horizontal => [o, c, 1, l],
            Orientation::Vertical => [o, c, l, 1],
        };
        Ok(b.scope(name, |b| {
            // Small offset weights: the branch starts close to its rigid form.
            let offset = b.scope("offset", |b| Conv2d {
                weight: b.normal("weight", &[spec.offset_channels(), c, 3, 3], 0.01),
                bias: Some(b.zeros("bias", &[spec.offset_channels()])),
                pad: Padding::same(3, 3),
            });
            DeformBranch {
                spec,
                gains,
                offset,
                weight: b.he_normal("weight", &kshape, c * l),
                in_channels: c,
                out_channels: o,
            }
        }))
    }

    /// Bounded raw offsets and their smoothed counterparts, `[N, L-1, H, W]` each.
    pub fn offsets<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let pre = self.offset.forward(tape, store, x);
        let bounded = tape.tanh(pre);
        let raw = tape.scale(bounded, T::lit(self.spec.extent));
        let smoothed = kalman_smooth(tape, raw, &self.gains);
        (raw, smoothed)
    }

    /// Deformable linear convolution, before normalisation.
    pub fn forward_linear<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (_, smoothed) = self.offsets(tape, store, x);
        self.apply_offsets(tape, store, x, smoothed)
    }

    /// Deformable linear convolution with an externally supplied smoothed field.
    pub fn apply_offsets<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, smoothed: Var) -> Var {
        let cols = deform_sample(tape, x, smoothed, &self.spec);
        let w = tape.param(store, self.weight);
        // [O, C, 1, L] and [O, C, L, 1] flatten to the same [O, C*L] layout.
        let w = tape.reshape(w, &[self.out_channels, self.in_channels * self.spec.length, 1, 1]);
        tape.conv2d(cols, w, None, Padding::NONE)
    }

    /// The rigid 1-D convolution this branch degenerates to when all offsets are zero.
    pub fn rigid_linear<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let pad = match self.spec.orientation {
            Orientation::Horizontal => Padding::same_replicate(1, self.spec.length),
            Orientation::Vertical => Padding::same_replicate(self.spec.length, 1),
        };
        tape.conv2d(x, w, None, pad)
    }
}

#[derive(Debug, Clone)]
pub struct LdBlock {
    pub config: LdConfig,
    pub base: ConvBlock,
    pub horizontal: DeformBranch,
    pub vertical: DeformBranch,
    pub fuse: ConvNormAct,
}

impl LdBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, config: LdConfig) -> Result<Self> {
        config.validate()?;
        let (c, o) = (config.in_channels, config.out_channels);
        b.scope(name, |b| {
            Ok(LdBlock {
                config,
                base: ConvBlock::new(b, "base", c, o),
                horizontal: DeformBranch::new(b, "horizontal", &config, Orientation::Horizontal)?,
                vertical: DeformBranch::new(b, "vertical", &config, Orientation::Vertical)?,
                fuse: ConvNormAct::new(b, "fuse", 3 * o, o, (1, 1)),
            })
        })
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 {
            return Err(invalid!("LD block expects a rank-4 feature map, got {shape:?}"));
        }
        if shape[1] != self.config.in_channels {
            return Err(invalid!(
                "LD block expects {} input channels, got {}",
                self.config.in_channels,
                shape[1]
            ));
        }
        // Each axis is padded by (L-1)/2 on both sides; the padded extent must cover a kernel.
        let l = self.config.params.kernel_length;
        if shape[2] + l - 1 < l || shape[3] + l - 1 < l {
            return Err(invalid!("LD block input {shape:?} is smaller than a length-{l} kernel after padding"));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let base = self.base.forward(tape, store, x);
        let h = self.horizontal.forward_linear(tape, store, x);
        let h = norm_act(tape, h);
        let v = self.vertical.forward_linear(tape, store, x);
        let v = norm_act(tape, v);
        let cat = tape.concat_channels(&[base, h, v]);
        Ok(self.fuse.forward(tape, store, cat))
    }

    /// Offset fields of both branches, for inspection and plotting.
    pub fn offset_fields<T: Scalar>(&self, store: &ParamStore<T>, x: &ArrayD<T>) -> Result<[OffsetField<T>; 2]> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        self.check_input(&tape, xv)?;
        let field = |branch: &DeformBranch, tape: &mut Tape<T>| {
            let (raw, smoothed) = branch.offsets(tape, store, xv);
            OffsetField {
                raw: tape.value(raw).clone(),
                smoothed: tape.value(smoothed).clone(),
            }
        };
        Ok([field(&self.horizontal, &mut tape), field(&self.vertical, &mut tape)])
    }
}
