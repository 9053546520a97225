//! Sliding-window patch extraction and centre-weighted stitching.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{invalid, Error, Result};

/// Inverse-distance weights `1 / sqrt((W/2 - i)^2 + (W/2 - j)^2 + 1)` with the
/// integer centre `W/2`.
pub fn make_weight_map(size: usize) -> Array2<f64> {
    let c = (size / 2) as f64;
    Array2::from_shape_fn((size, size), |(i, j)| {
        let (di, dj) = (c - i as f64, c - j as f64);
        1.0 / (di * di + dj * dj + 1.0).sqrt()
    })
}

/// Mirror index into `0..n` without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Patch layout over an image reflect-padded at the bottom and right so the
/// window tiles it exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    /// Top-left corners in padded coordinates, row-major.
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image must be at least 1x1, got {height}x{width}"));
        }
        if stride == 0 || patch < stride {
            return Err(invalid!("need 0 < stride <= patch, got patch {patch}, stride {stride}"));
        }
        let padded = |n: usize| patch + n.saturating_sub(patch).div_ceil(stride) * stride;
        let (ph, pw) = (padded(height), padded(width));
        let origins = (0..=(ph - patch) / stride)
            .flat_map(|r| (0..=(pw - patch) / stride).map(move |c| (r * stride, c * stride)))
            .collect();
        Ok(Self {
            patch,
            stride,
            height,
            width,
            padded_height: ph,
            padded_width: pw,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn pad(&self, image: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(image.dim())?;
        let (h, w) = image.dim();
        Ok(Array2::from_shape_fn((self.padded_height, self.padded_width), |(y, x)| {
            image[[reflect(y, h), reflect(x, w)]]
        }))
    }

    fn check(&self, dim: (usize, usize)) -> Result<()> {
        if dim != (self.height, self.width) {
            return Err(invalid!(
                "image is {}x{}, grid was built for {}x{}",
                dim.0,
                dim.1,
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    /// Patches in `origins` order.
    pub fn extract(&self, image: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let padded = self.pad(image)?;
        let p = self.patch;
        Ok(self
            .origins
            .iter()
            .map(|&(r, c)| padded.slice(s![r..r + p, c..c + p]).to_owned())
            .collect())
    }

    /// Weighted mean of overlapping patches, cropped to the original size.
    ///
    /// The mean is accumulated incrementally (`m += w / W_total * (v - m)`), so a
    /// pixel whose patches all agree reproduces that value exactly.
    pub fn stitch(&self, patches: &[Array2<f64>], weights: &Array2<f64>) -> Result<Array2<f64>> {
        let p = self.patch;
        if patches.len() != self.origins.len() {
            return Err(invalid!("expected {} patches, got {}", self.origins.len(), patches.len()));
        }
        if weights.dim() != (p, p) {
            return Err(invalid!("weight map is {:?}, patch size is {p}", weights.dim()));
        }
        let mut mean = Array2::<f64>::zeros((self.padded_height, self.padded_width));
        let mut total = Array2::<f64>::zeros((self.padded_height, self.padded_width));
        for (patch, &(r, c)) in patches.iter().zip(&self.origins) {
            if patch.dim() != (p, p) {
                return Err(invalid!("patch is {:?}, expected {p}x{p}", patch.dim()));
            }
            for ((i, j), &v) in patch.indexed_iter() {
                let w = weights[[i, j]];
                let t = &mut total[[r + i, c + j]];
                let m = &mut mean[[r + i, c + j]];
                *t += w;
                *m += w / *t * (v - *m);
            }
        }
        let crop = s![..self.height, ..self.width];
        if total.slice(crop).iter().any(|&t| t <= 0.0) {
            return Err(Error::Internal("stitch left a pixel uncovered".into()));
        }
        Ok(mean.slice(crop).to_owned())
    }
}

/// `(patch, origin)` pairs for an image.
pub fn extract_patches(image: ArrayView2<f64>, patch: usize, stride: usize) -> Result<(PatchGrid, Vec<Array2<f64>>)> {
    let grid = PatchGrid::new(image.nrows(), image.ncols(), patch, stride)?;
    let patches = grid.extract(image)?;
    Ok((grid, patches))
}
