//! Curvilinear phantoms: random smooth curves of 1-4 px width over a textured
//! background, with exact masks.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::{save_gray, save_mask};
use crate::error::{invalid, Result};

#[derive(Debug, Clone)]
pub struct Phantom {
    pub id: String,
    /// Intensities in `[0, 1]`.
    pub image: Array2<f64>,
    pub mask: Array2<bool>,
    /// Stroke width of every curve, in pixels.
    pub widths: Vec<u32>,
}

/// Catmull-Rom spline through `ctrl`, sampled every ~`step` pixels.
fn spline(ctrl: &[(f64, f64)], step: f64) -> Vec<(f64, f64)> {
    let n = ctrl.len();
    let at = |i: isize| ctrl[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::new();
    for i in 0..n as isize - 1 {
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        let len = ((p2.0 - p1.0).powi(2) + (p2.1 - p1.1).powi(2)).sqrt();
        let k = ((len / step).ceil() as usize).max(1);
        for s in 0..k {
            let t = s as f64 / k as f64;
            let (t2, t3) = (t * t, t * t * t);
            let c = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (3.0 * b - a - 3.0 * c + d) * t3)
            };
            out.push((c(p0.0, p1.0, p2.0, p3.0), c(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(ctrl[n - 1]);
    out
}

/// Smooth random walk of control points starting inside the image.
fn control_points(rng: &mut ChaCha8Rng, size: f64) -> Vec<(f64, f64)> {
    let margin = (size * 0.1).max(2.0);
    let mut p = (rng.random_range(margin..size - margin), rng.random_range(margin..size - margin));
    let mut heading = rng.random_range(0.0..TAU);
    let count = rng.random_range(4..7);
    let mut pts = vec![p];
    for _ in 1..count {
        heading += rng.random_range(-PI / 3.0..PI / 3.0);
        let step = rng.random_range(0.15..0.3) * size;
        p = (p.0 + step * heading.sin(), p.1 + step * heading.cos());
        pts.push(p);
    }
    pts
}

/// One phantom; the stream depends only on `(seed, index)`.
pub fn phantom(size: usize, seed: u64, index: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;

    // Background: a few low-frequency waves plus white noise.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.03..0.08),
                rng.random_range(0.5..3.0) * TAU / s,
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let base = rng.random_range(0.15..0.3);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut image = Array2::from_shape_fn((size, size), |(y, x)| {
        base + waves
            .iter()
            .map(|&(a, f, dir, ph)| a * (f * (x as f64 * dir.cos() + y as f64 * dir.sin()) + ph).sin())
            .sum::<f64>()
    });
    let mut mask = Array2::from_elem((size, size), false);

    let curves = rng.random_range(5..9);
    let mut widths = Vec::with_capacity(curves);
    let mut vessel = Array2::<f64>::zeros((size, size));
    for c in 0..curves {
        // The first curve is always a 1 px stressor.
        let w: u32 = if c == 0 { 1 } else { rng.random_range(1..=4) };
        widths.push(w);
        let contrast = rng.random_range(0.35..0.75);
        let radius = (w as f64 + 0.5) / 2.0;
        let reach = radius * 2.0 + 1.0;
        let path = spline(&control_points(&mut rng, s), 0.25);
        let mut dist = Array2::from_elem((size, size), f64::INFINITY);
        for &(py, px) in &path {
            let y0 = (py - reach).floor().max(0.0) as usize;
            let x0 = (px - reach).floor().max(0.0) as usize;
            let y1 = ((py + reach).ceil() as isize).min(size as isize - 1);
            let x1 = ((px + reach).ceil() as isize).min(size as isize - 1);
            if y1 < 0 || x1 < 0 {
                continue;
            }
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let d = ((y as f64 - py).powi(2) + (x as f64 - px).powi(2)).sqrt();
                    if d < dist[[y, x]] {
                        dist[[y, x]] = d;
                    }
                }
            }
        }
        for ((idx, &d), v) in dist.indexed_iter().zip(vessel.iter_mut()) {
            if d.is_finite() {
                // Half the contrast exactly at the mask boundary.
                *v = v.max(contrast * (-(2f64.ln()) * (d / radius).powi(2)).exp());
                if d <= radius {
                    mask[idx] = true;
                }
            }
        }
    }
    image.zip_mut_with(&vessel, |i, &v| *i += v);
    image.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    Phantom {
        id: format!("phantom_{index:03}"),
        image,
        mask,
        widths,
    }
}

pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(invalid!("synth: need at least one phantom"));
    }
    if size < 8 {
        return Err(invalid!("synth: size {size} is too small (minimum 8)"));
    }
    Ok((0..n as u64).map(|i| phantom(size, seed, i)).collect())
}

/// Writes `images/<id>.png` and `masks/<id>.png` under `dir`.
pub fn write_dataset(dir: &Path, phantoms: &[Phantom]) -> Result<()> {
    for p in phantoms {
        save_gray(&dir.join("images").join(format!("{}.png", p.id)), &p.image)?;
        save_mask(&dir.join("masks").join(format!("{}.png", p.id)), &p.mask)?;
    }
    Ok(())
}
