//! 0-dimensional persistence of images, the averaged Hausdorff distance between
//! diagrams, and the topology-aware fine-tuning loss.

use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::bce;
use crate::tensor::{Scalar, Tape, Var};

/// One connected component: born at its brightest pixel, dead when it merges
/// into an older component (or at the global minimum for the survivor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub birth: f64,
    pub death: f64,
    /// Pixels whose values are `birth` and `death`; gradients flow to these.
    pub birth_pixel: (usize, usize),
    pub death_pixel: (usize, usize),
}

impl Point {
    pub fn coords(&self) -> [f64; 2] {
        [self.birth, self.death]
    }

    pub fn persistence(&self) -> f64 {
        self.birth - self.death
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    pub points: Vec<Point>,
}

impl PersistenceDiagram {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(birth, death)` pairs sorted descending, for multiset comparison.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<_> = self.points.iter().map(|p| (p.birth, p.death)).collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
        v
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = csv::Writer::from_writer(file);
        out.write_record(["birth", "death"]).map_err(|e| Error::Internal(e.to_string()))?;
        for p in &self.points {
            out.write_record([p.birth.to_string(), p.death.to_string()])
                .map_err(|e| Error::Internal(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Data(format!("{}: malformed row {rec:?}", path.display())))
            };
            points.push(Point {
                birth: num(0)?,
                death: num(1)?,
                birth_pixel: (0, 0),
                death_pixel: (0, 0),
            });
        }
        Ok(Self { points })
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Superlevel-set persistence under 4-connectivity, by descending union-find.
///
/// Components that are born and merge at the same value belong to one plateau
/// and produce no point. The oldest component dies at the global minimum.
pub fn compute_diagram(image: ArrayView2<f64>) -> PersistenceDiagram {
    let (h, w) = image.dim();
    let n = h * w;
    if n == 0 {
        return PersistenceDiagram::default();
    }
    let val = |i: usize| image[[i / w, i % w]];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| val(b).total_cmp(&val(a)).then(a.cmp(&b)));

    const UNSEEN: usize = usize::MAX;
    let mut parent = vec![UNSEEN; n];
    // Birth pixel and birth rank of each root; rank breaks birth ties (earlier is older).
    let mut birth_px = vec![0usize; n];
    let mut rank = vec![0usize; n];
    let mut points = Vec::new();
    let mut roots = Vec::with_capacity(4);

    for (r, &p) in order.iter().enumerate() {
        let (y, x) = (p / w, p % w);
        roots.clear();
        let mut visit = |q: usize, parent: &mut Vec<usize>| {
            if parent[q] != UNSEEN {
                let root = find(parent, q);
                if !roots.contains(&root) {
                    roots.push(root);
                }
            }
        };
        if y > 0 {
            visit(p - w, &mut parent);
        }
        if y + 1 < h {
            visit(p + w, &mut parent);
        }
        if x > 0 {
            visit(p - 1, &mut parent);
        }
        if x + 1 < w {
            visit(p + 1, &mut parent);
        }
        if roots.is_empty() {
            parent[p] = p;
            birth_px[p] = p;
            rank[p] = r;
            continue;
        }
        let elder = *roots.iter().min_by_key(|&&root| rank[root]).unwrap();
        let v = val(p);
        for &root in roots.iter() {
            if root == elder {
                continue;
            }
            let b = val(birth_px[root]);
            if b != v {
                points.push(Point {
                    birth: b,
                    death: v,
                    birth_pixel: (birth_px[root] / w, birth_px[root] % w),
                    death_pixel: (y, x),
                });
            }
            parent[root] = elder;
        }
        parent[p] = elder;
    }
    let last = *order.last().unwrap();
    let oldest = find(&mut parent, order[0]);
    points.push(Point {
        birth: val(birth_px[oldest]),
        death: val(last),
        birth_pixel: (birth_px[oldest] / w, birth_px[oldest] % w),
        death_pixel: (last / w, last % w),
    });
    PersistenceDiagram { points }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Stand-in for an empty diagram: the diagonal point at the middle of the other
/// diagram's value range.
fn surrogate(other: &[[f64; 2]]) -> [f64; 2] {
    let (lo, hi) = other
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mid = 0.5 * (lo + hi);
    [mid, mid]
}

/// Mean over `from` of the distance to the nearest point of `to`, with the
/// index of that nearest point.
fn nearest(from: &[[f64; 2]], to: &[[f64; 2]]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|&a| {
            to.iter()
                .enumerate()
                .map(|(j, &b)| (j, dist(a, b)))
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
                .unwrap()
        })
        .collect()
}

/// Symmetric mean-of-minima distance between two diagrams. An empty diagram is
/// replaced by a diagonal surrogate point; two empty diagrams are at distance 0.
pub fn modified_hausdorff(a: &PersistenceDiagram, b: &PersistenceDiagram) -> f64 {
    let pa: Vec<_> = a.points.iter().map(Point::coords).collect();
    let pb: Vec<_> = b.points.iter().map(Point::coords).collect();
    hausdorff_coords(&pa, &pb).0
}

/// Returns `(d_H, gradient w.r.t. each point of a)`.
fn hausdorff_coords(a: &[[f64; 2]], b: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => {
            log::debug!("modified_hausdorff: both diagrams empty, distance 0");
            return (0.0, Vec::new());
        }
        (true, false) => {
            log::debug!("modified_hausdorff: empty first diagram, using diagonal surrogate");
            return (hausdorff_coords(&[surrogate(b)], b).0, Vec::new());
        }
        (false, true) => {
            log::debug!("modified_hausdorff: empty second diagram, using diagonal surrogate");
            return hausdorff_coords(a, &[surrogate(a)]);
        }
        _ => {}
    }
    let mut grad = vec![[0.0; 2]; a.len()];
    let mut push = |i: usize, from: [f64; 2], to: [f64; 2], d: f64, coef: f64| {
        if d > 0.0 {
            grad[i][0] += coef * (from[0] - to[0]) / d;
            grad[i][1] += coef * (from[1] - to[1]) / d;
        }
    };
    let fwd = nearest(a, b);
    let ca = 0.5 / a.len() as f64;
    for (i, &(j, d)) in fwd.iter().enumerate() {
        push(i, a[i], b[j], d, ca);
    }
    let back = nearest(b, a);
    let cb = 0.5 / b.len() as f64;
    for (j, &(i, d)) in back.iter().enumerate() {
        push(i, a[i], b[j], d, cb);
    }
    let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    (0.5 * (mean(&fwd) + mean(&back)), grad)
}

/// `Loss_tp`: the distance between the diagrams of the prediction and of the
/// ground truth, averaged over every `[H, W]` map of a `[N, C, H, W]` batch.
/// Each diagram coordinate is one pixel's value, so the gradient reaches exactly
/// the birth and death pixels of the prediction's diagram.
pub fn topo_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let n = tape.value(pred).shape().first().copied().unwrap_or(0);
    topo_loss_items(tape, pred, gt, &(0..n).collect::<Vec<_>>())
}

/// [`topo_loss`] restricted to the batch items in `items` (averaged over them);
/// the other items get no gradient.
pub fn topo_loss_items<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var, items: &[usize]) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != tape.value(gt).shape() || shape.len() != 4 {
        return Err(invalid!(
            "topo_loss expects equal [N, C, H, W] shapes, got {:?} and {:?}",
            shape,
            tape.value(gt).shape()
        ));
    }
    if items.is_empty() || items.iter().any(|&i| i >= shape[0]) {
        return Err(invalid!("topo_loss: item list {items:?} is empty or out of range for batch {}", shape[0]));
    }
    let (h, w) = (shape[2], shape[3]);
    let nc = shape[1];
    let maps: Vec<usize> = items.iter().flat_map(|&i| (0..nc).map(move |c| i * nc + c)).collect();
    let to_f64 = |a: &ArrayD<T>| -> Vec<f64> { a.iter().map(|v| v.to_f64().unwrap()).collect() };
    let pv = to_f64(tape.value(pred));
    let gv = to_f64(tape.value(gt));
    let mut total = 0.0;
    // Per map: the prediction's points and the gradient on their coordinates.
    let mut sensitivities = Vec::with_capacity(maps.len());
    for &m in &maps {
        let view = |v: &[f64]| ArrayView2::from_shape((h, w), &v[m * h * w..(m + 1) * h * w]).unwrap().to_owned();
        let dp = compute_diagram(view(&pv).view());
        let dg = compute_diagram(view(&gv).view());
        let ca: Vec<_> = dp.points.iter().map(Point::coords).collect();
        let cb: Vec<_> = dg.points.iter().map(Point::coords).collect();
        let (d, g) = hausdorff_coords(&ca, &cb);
        total += d;
        sensitivities.push((m, dp.points, g));
    }
    let scale = 1.0 / maps.len() as f64;
    Ok(tape.push(
        ArrayD::from_elem(IxDyn(&[]), T::lit(total * scale)),
        vec![pred, gt],
        Box::new(move |ctx| {
            let g = ctx.grad.iter().next().unwrap().to_f64().unwrap() * scale;
            let mut dx = ArrayD::<T>::zeros(IxDyn(&shape));
            let flat = dx.as_slice_mut().unwrap();
            for (m, points, grads) in &sensitivities {
                for (p, dg) in points.iter().zip(grads) {
                    let at = |(y, x): (usize, usize)| m * h * w + y * w + x;
                    flat[at(p.birth_pixel)] += T::lit(g * dg[0]);
                    flat[at(p.death_pixel)] += T::lit(g * dg[1]);
                }
            }
            vec![Some(dx), None]
        }),
    ))
}

/// Fine-tuning objective `Loss_tp + BCE` (no blend weight).
pub fn finetune_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let tp = topo_loss(tape, pred, gt)?;
    let b = bce(tape, pred, gt)?;
    Ok(tape.add(tp, b))
}

/// Diagram of a `[H, W]` array of any scalar type.
pub fn diagram_of<T: Scalar>(map: &Array2<T>) -> PersistenceDiagram {
    compute_diagram(map.mapv(|v| v.to_f64().unwrap()).view())
}
