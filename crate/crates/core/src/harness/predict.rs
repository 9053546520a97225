//! Whole-image inference by weighted patch stitching.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::checkpoint::Model;
use crate::error::Result;
use crate::metrics::binarize;
use crate::tensor::Tape;
use crate::tiling::{make_weight_map, PatchGrid};

/// Patches per forward pass at inference.
pub const INFER_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Array2<f64>,
    pub mask: Array2<bool>,
}

/// Stacks `[H, W]` patches into an f32 `[N, 1, H, W]` batch.
pub fn stack(patches: &[&Array2<f64>]) -> ArrayD<f32> {
    let (h, w) = patches[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[patches.len(), 1, h, w]));
    for (mut slot, p) in out.axis_iter_mut(Axis(0)).zip(patches) {
        slot.iter_mut().zip(p.iter()).for_each(|(d, &v)| *d = v as f32);
    }
    out
}

/// Foreground probabilities for equally sized patches, in order.
pub fn predict_patches(model: &Model, patches: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFER_BATCH) {
        let refs: Vec<&Array2<f64>> = chunk.iter().collect();
        let mut tape = Tape::inference();
        let x = tape.constant(stack(&refs));
        let y = model.net.forward(&mut tape, &model.store, x)?;
        for item in tape.value(y).axis_iter(Axis(0)) {
            let (h, w) = (item.shape()[1], item.shape()[2]);
            out.push(Array2::from_shape_fn((h, w), |(r, c)| item[[0, r, c]] as f64));
        }
    }
    Ok(out)
}

/// Tiles with stride `W/2`, predicts each patch, stitches with the
/// centre-weighted map and thresholds at 0.5.
pub fn predict(model: &Model, image: &Array2<f64>) -> Result<Prediction> {
    let size = model.config().patch_size;
    let grid = PatchGrid::new(image.nrows(), image.ncols(), size, size / 2)?;
    let patches = grid.extract(image.view())?;
    let probs = grid.stitch(&predict_patches(model, &patches)?, &make_weight_map(size))?;
    let mask = binarize(probs.view());
    Ok(Prediction { probs, mask })
}

pub fn predict_many(model: &Model, images: &[Array2<f64>]) -> Result<Vec<Prediction>> {
    images.iter().map(|img| predict(model, img)).collect()
}
