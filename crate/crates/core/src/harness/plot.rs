//! Figures: segmentation overlays (PNG), offset quivers and persistence
//! diagrams (SVG).
//!
//! plotters is built without a font backend, so the SVGs carry geometry only;
//! the file names say what they show.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayD, ArrayView2, Axis};
use plotters::prelude::*;

use super::checkpoint::Model;
use super::predict::stack;
use crate::error::{invalid, Error, Result};
use crate::sampling::OffsetField;
use crate::tensor::Tape;
use crate::topology::PersistenceDiagram;

pub const TP: Rgb<u8> = Rgb([255, 255, 255]);
pub const FP: Rgb<u8> = Rgb([255, 0, 0]);
pub const FN: Rgb<u8> = Rgb([0, 0, 255]);

/// Grey image (min-max scaled) with true positives white, false positives
/// red and false negatives blue.
pub fn overlay(image: ArrayView2<f64>, pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<RgbImage> {
    if image.dim() != pred.dim() || image.dim() != gt.dim() {
        return Err(invalid!("overlay inputs differ in size: {:?}, {:?}, {:?}", image.dim(), pred.dim(), gt.dim()));
    }
    let (lo, hi) = image.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = image.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in image.indexed_iter() {
        let px = match (pred[[y, x]], gt[[y, x]]) {
            (true, true) => TP,
            (true, false) => FP,
            (false, true) => FN,
            (false, false) => {
                // Keep the background below white so true positives stand out.
                let g = (((v - lo) / span) * 200.0).round() as u8;
                Rgb([g, g, g])
            }
        };
        out.put_pixel(x as u32, y as u32, px);
    }
    Ok(out)
}

pub fn save_overlay(path: &Path, image: ArrayView2<f64>, pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<()> {
    overlay(image, pred, gt)?.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// One quiver arrow, in pixel coordinates of the sampled feature map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrow {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Arrow {
    pub fn length(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Per-pixel mean tap displacement of batch item `item`: the horizontal
/// branch moves columns (`dx`), the vertical branch moves rows (`dy`).
pub fn mean_displacement<T: crate::tensor::Scalar>(fields: &[OffsetField<T>; 2], item: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let mean = |a: &ArrayD<T>| -> Result<Array2<f64>> {
        if a.ndim() != 4 || item >= a.shape()[0] {
            return Err(invalid!("offset field {:?} has no item {item}", a.shape()));
        }
        let m = a.index_axis(Axis(0), item).mean_axis(Axis(0)).expect("offset field has taps");
        Ok(m.into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Internal(e.to_string()))?
            .mapv(|v| v.to_f64().unwrap_or(f64::NAN)))
    };
    Ok((mean(&fields[0].smoothed)?, mean(&fields[1].smoothed)?))
}

/// Arrows on a regular grid with spacing `step`.
pub fn quiver_arrows(dx: ArrayView2<f64>, dy: ArrayView2<f64>, step: usize) -> Result<Vec<Arrow>> {
    if dx.dim() != dy.dim() || step == 0 {
        return Err(invalid!("quiver needs equal-size fields and step > 0"));
    }
    let (h, w) = dx.dim();
    let mut out = Vec::new();
    for y in (step / 2..h).step_by(step) {
        for x in (step / 2..w).step_by(step) {
            out.push(Arrow {
                x: x as f64,
                y: y as f64,
                dx: dx[[y, x]],
                dy: dy[[y, x]],
            });
        }
    }
    Ok(out)
}

/// Offset fields of the first LDCA site at the finest resolution, for the
/// first item of `patch` (a `[H, W]` image at the model's patch size).
pub fn model_offsets(model: &Model, patch: &Array2<f64>) -> Result<((usize, usize), [OffsetField<f32>; 2])> {
    let site = model
        .net
        .ldca_sites()
        .into_iter()
        .min()
        .ok_or_else(|| Error::Config("model has no LDCA site to visualise".into()))?;
    let mut tape = Tape::inference();
    let x = tape.constant(stack(&[patch]));
    let (_, captured) = model.net.forward_capture(&mut tape, &model.store, x, site)?;
    let input = captured.ok_or_else(|| Error::Internal(format!("site {site:?} was not captured")))?;
    let node = model
        .net
        .nodes
        .iter()
        .find(|n| (n.i, n.j) == site)
        .and_then(|n| n.ldca.as_ref())
        .ok_or_else(|| Error::Internal(format!("no LDCA module at {site:?}")))?;
    let fields = node.ld.offset_fields(&model.store, tape.value(input))?;
    Ok((site, fields))
}

const CANVAS: u32 = 640;
const MARGIN: i32 = 20;

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Arrow glyphs over a `height x width` frame; `scale` multiplies lengths.
/// Returns the number of arrows drawn.
pub fn quiver_svg(path: &Path, arrows: &[Arrow], height: usize, width: usize, scale: f64) -> Result<usize> {
    let root = SVGBackend::new(path, (CANVAS, CANVAS)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let span = (CANVAS as i32 - 2 * MARGIN) as f64 / height.max(width).max(1) as f64;
    let to_px = |x: f64, y: f64| (MARGIN + (x * span).round() as i32, MARGIN + (y * span).round() as i32);
    let frame = [to_px(0.0, 0.0), to_px(width as f64, height as f64)];
    root.draw(&Rectangle::new(frame, BLACK.stroke_width(1))).map_err(plot_err)?;
    for a in arrows {
        let tail = to_px(a.x, a.y);
        let head = to_px(a.x + scale * a.dx, a.y + scale * a.dy);
        root.draw(&Circle::new(tail, 1, BLUE.filled())).map_err(plot_err)?;
        root.draw(&PathElement::new(vec![tail, head], RED.stroke_width(1))).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(arrows.len())
}

/// Canvas position of a `(birth, death)` point on the unit square (death on x,
/// birth on y, so points sit above the diagonal).
pub fn diagram_point(birth: f64, death: f64) -> (i32, i32) {
    let side = (CANVAS as i32 - 2 * MARGIN) as f64;
    let x = MARGIN + (death.clamp(0.0, 1.0) * side).round() as i32;
    let y = CANVAS as i32 - MARGIN - (birth.clamp(0.0, 1.0) * side).round() as i32;
    (x, y)
}

/// Prediction points as red discs and ground-truth points as blue squares,
/// with the diagonal. Returns the canvas positions of all points drawn.
pub fn diagram_svg(path: &Path, pred: &PersistenceDiagram, gt: Option<&PersistenceDiagram>) -> Result<Vec<(i32, i32)>> {
    let root = SVGBackend::new(path, (CANVAS, CANVAS)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (o, c) = (diagram_point(0.0, 0.0), diagram_point(1.0, 1.0));
    root.draw(&Rectangle::new([(o.0, c.1), (c.0, o.1)], BLACK.stroke_width(1))).map_err(plot_err)?;
    root.draw(&PathElement::new(vec![o, c], BLACK.mix(0.4).stroke_width(1))).map_err(plot_err)?;
    let mut drawn = Vec::new();
    if let Some(gt) = gt {
        for (b, d) in gt.pairs() {
            let p = diagram_point(b, d);
            root.draw(&Rectangle::new([(p.0 - 4, p.1 - 4), (p.0 + 4, p.1 + 4)], BLUE.stroke_width(2)))
                .map_err(plot_err)?;
            drawn.push(p);
        }
    }
    for (b, d) in pred.pairs() {
        let p = diagram_point(b, d);
        root.draw(&Circle::new(p, 3, RED.filled())).map_err(plot_err)?;
        drawn.push(p);
    }
    root.present().map_err(plot_err)?;
    Ok(drawn)
}
