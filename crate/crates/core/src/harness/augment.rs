//! Joint flips and kernel-smoothed Gaussian noise for training patches.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::NoiseMode;

/// Normalised 5x5 Gaussian kernel (sigma = 1) as a separable 1-D tap list.
fn gauss5() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-0.5 * d * d).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i.rem_euclid(period);
    (if k < n { k } else { period - k }) as usize
}

/// 5x5 Gaussian smoothing with mirrored borders.
pub fn smooth5(x: &Array2<f64>) -> Array2<f64> {
    let k = gauss5();
    let (h, w) = x.dim();
    let rows: Array2<f64> = Array2::from_shape_fn((h, w), |(y, c)| {
        (0..5).map(|t| k[t] * x[[y, mirror(c as isize + t as isize - 2, w)]]).sum()
    });
    Array2::from_shape_fn((h, w), |(y, c)| {
        (0..5).map(|t| k[t] * rows[[mirror(y as isize + t as isize - 2, h), c]]).sum()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub sigma: f64,
    pub mode: NoiseMode,
}

/// Decisions drawn for one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

pub fn apply_flips<T: Clone>(x: &Array2<T>, f: Flips) -> Array2<T> {
    let mut v = x.view();
    if f.horizontal {
        v.invert_axis(Axis(1));
    }
    if f.vertical {
        v.invert_axis(Axis(0));
    }
    v.to_owned()
}

/// Flips patch and mask together (each axis with probability 1/2), then adds
/// noise to the patch only. Deterministic in `seed`.
pub fn augment(patch: &Array2<f64>, mask: &Array2<bool>, seed: u64, params: AugmentParams) -> (Array2<f64>, Array2<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flips = Flips {
        horizontal: rng.random_bool(0.5),
        vertical: rng.random_bool(0.5),
    };
    let mut out = apply_flips(patch, flips);
    let mask = apply_flips(mask, flips);
    if params.sigma > 0.0 {
        let normal = Normal::new(0.0, params.sigma).unwrap();
        let white = Array2::from_shape_simple_fn(out.raw_dim(), || normal.sample(&mut rng));
        out = match params.mode {
            NoiseMode::SmoothedNoise => out + smooth5(&white),
            NoiseMode::BlurPlusNoise => smooth5(&out) + white,
        };
    }
    (out, mask)
}
