//! Pixel-level segmentation metrics, rank AUC, and hard-skeleton clDice.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Probability threshold for every hard metric.
pub const THRESHOLD: f64 = 0.5;

/// Hard decision for a probability map (`p >= 0.5`).
pub fn binarize(probs: ArrayView2<f64>) -> Array2<bool> {
    probs.mapv(|p| p >= THRESHOLD)
}

/// Interprets a `{0, 1}`-valued array as a mask; any other value is an error.
pub fn as_mask(values: ArrayView2<f64>, what: &str) -> Result<Array2<bool>> {
    if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(invalid!("{what} must be binary, found value {v}"));
    }
    Ok(values.mapv(|v| v == 1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Counts over the pixels selected by `fov` (all pixels when absent).
pub fn confusion(pred: ArrayView2<bool>, gt: ArrayView2<bool>, fov: Option<ArrayView2<bool>>) -> Result<Confusion> {
    if pred.dim() != gt.dim() {
        return Err(invalid!("prediction {:?} and ground truth {:?} differ in size", pred.dim(), gt.dim()));
    }
    if let Some(f) = &fov {
        if f.dim() != gt.dim() {
            return Err(invalid!("field-of-view mask {:?} differs from image {:?}", f.dim(), gt.dim()));
        }
    }
    let mut c = Confusion::default();
    for ((idx, &p), &g) in pred.indexed_iter().zip(gt.iter()) {
        if fov.as_ref().is_some_and(|f| !f[idx]) {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `num / den`, or 1 when the denominator is zero (the condition holds vacuously).
fn ratio(num: u64, den: u64, name: &str) -> f64 {
    if den == 0 {
        log::debug!("{name}: empty denominator, reported as 1");
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total(), "accuracy")
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, "sensitivity")
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, "specificity")
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, "dice")
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, "iou")
    }
}

/// Exact rank AUC: the probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn auc(scores: ArrayView2<f64>, gt: ArrayView2<bool>, fov: Option<ArrayView2<bool>>) -> Result<f64> {
    if scores.dim() != gt.dim() {
        return Err(invalid!("scores {:?} and ground truth {:?} differ in size", scores.dim(), gt.dim()));
    }
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    for ((idx, &s), &g) in scores.indexed_iter().zip(gt.iter()) {
        if fov.as_ref().is_none_or(|f| f[idx]) {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("score {s} at {idx:?}")));
            }
            pairs.push((s, g));
        }
    }
    auc_pairs(&mut pairs)
}

fn auc_pairs(pairs: &mut [(f64, bool)]) -> Result<f64> {
    let pos = pairs.iter().filter(|p| p.1).count() as u64;
    let neg = pairs.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes; ground truth has {pos} positive and {neg} negative pixels"
        )));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the Mann-Whitney U, kept integral so the result is exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let group_pos = pairs[i..j].iter().filter(|p| p.1).count() as u64;
        let group_neg = (j - i) as u64 - group_pos;
        twice_u += group_pos as u128 * (2 * neg_below + group_neg) as u128;
        neg_below += group_neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Zhang-Suen thinning of a binary mask (pixels outside the image are background).
pub fn thin(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut img = mask.clone();
    let at = |img: &Array2<bool>, y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[[y as usize, x as usize]]
    };
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            doomed.clear();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !img[[y as usize, x as usize]] {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&k| !p[k] && p[(k + 1) % 8]).count();
                    let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
                    let cond = if step == 0 {
                        !(n && e && s) && !(e && s && wst)
                    } else {
                        !(n && e && wst) && !(n && s && wst)
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        doomed.push((y as usize, x as usize));
                    }
                }
            }
            for &(y, x) in &doomed {
                img[[y, x]] = false;
            }
            changed |= !doomed.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

/// clDice with hard skeletons. Same empty-skeleton policy as the soft loss:
/// both masks empty is 1; an empty skeleton makes its ratio, and clDice, 0.
pub fn cl_dice_metric(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(invalid!("prediction {:?} and ground truth {:?} differ in size", pred.dim(), gt.dim()));
    }
    if !pred.iter().any(|&v| v) && !gt.iter().any(|&v| v) {
        log::debug!("cldice: both masks empty, reporting 1");
        return Ok(1.0);
    }
    let sp = thin(&pred.to_owned());
    let sl = thin(&gt.to_owned());
    let frac = |skel: &Array2<bool>, mask: &ArrayView2<bool>| {
        let mass = skel.iter().filter(|&&v| v).count();
        if mass == 0 {
            log::debug!("cldice: empty skeleton, ratio set to 0");
            return 0.0;
        }
        let inter = Zip::from(skel).and(mask).fold(0usize, |acc, &s, &m| acc + usize::from(s && m));
        inter as f64 / mass as f64
    };
    let tprec = frac(&sp, &gt);
    let tsens = frac(&sl, &pred);
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// Number of 4-connected foreground components.
pub fn component_count(mask: ArrayView2<bool>) -> usize {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..h * w {
        let (y, x) = (start / w, start % w);
        if !mask[[y, x]] || seen[[y, x]] {
            continue;
        }
        count += 1;
        seen[[y, x]] = true;
        stack.push((y, x));
        while let Some((y, x)) = stack.pop() {
            let nbrs = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for (ny, nx) in nbrs {
                if ny < h && nx < w && mask[[ny, nx]] && !seen[[ny, nx]] {
                    seen[[ny, nx]] = true;
                    stack.push((ny, nx));
                }
            }
        }
    }
    count
}

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    /// `None` when the ground truth has a single class inside the field of view.
    pub auc: Option<f64>,
    pub dice: f64,
    pub iou: f64,
    pub cldice: f64,
}

/// Every metric for one image. Hard metrics use `probs >= 0.5`; AUC uses the raw
/// probabilities. clDice is computed on the whole image (skeletons are global).
pub fn evaluate(
    image_id: &str,
    probs: ArrayView2<f64>,
    gt: ArrayView2<bool>,
    fov: Option<ArrayView2<bool>>,
) -> Result<ImageMetrics> {
    let pred = binarize(probs);
    let c = confusion(pred.view(), gt, fov)?;
    let auc = match auc(probs, gt, fov) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("{image_id}: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(ImageMetrics {
        image_id: image_id.to_string(),
        acc: c.accuracy(),
        sen: c.sensitivity(),
        spe: c.specificity(),
        auc,
        dice: c.dice(),
        iou: c.iou(),
        cldice: cl_dice_metric(pred.view(), gt)?,
    })
}

/// Macro average over images; AUC averages only the images where it is defined.
pub fn macro_average(rows: &[ImageMetrics]) -> Option<ImageMetrics> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
    Some(ImageMetrics {
        image_id: "mean".into(),
        acc: mean(|r| r.acc),
        sen: mean(|r| r.sen),
        spe: mean(|r| r.spe),
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        dice: mean(|r| r.dice),
        iou: mean(|r| r.iou),
        cldice: mean(|r| r.cldice),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub images: Vec<ImageMetrics>,
    pub mean: Option<ImageMetrics>,
}

impl Report {
    pub fn new(images: Vec<ImageMetrics>) -> Self {
        let mean = macro_average(&images);
        Self { images, mean }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One CSV row per image plus a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = csv::Writer::from_writer(file);
        for row in self.images.iter().chain(&self.mean) {
            out.serialize(row).map_err(|e| Error::Internal(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

impl std::fmt::Display for ImageMetrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let auc = self.auc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        write!(
            f,
            "{}: acc {:.4} sen {:.4} spe {:.4} auc {} dice {:.4} iou {:.4} cldice {:.4}",
            self.image_id, self.acc, self.sen, self.spe, auc, self.dice, self.iou, self.cldice
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn hand_confusion_instance() {
        // 8 TP, 2 FP, 2 FN, 88 TN on a 10x10 grid.
        let mut pred = Array2::from_elem((10, 10), false);
        let mut gt = Array2::from_elem((10, 10), false);
        for i in 0..10 {
            pred[[0, i]] = true;
            gt[[0, i]] = i < 8;
        }
        gt[[1, 0]] = true;
        gt[[1, 1]] = true;
        let c = confusion(pred.view(), gt.view(), None).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (8, 2, 2, 88));
        assert_eq!(c.accuracy(), 0.96);
        assert_eq!(c.sensitivity(), 0.8);
        assert_eq!(c.specificity(), 88.0 / 90.0);
        assert_eq!(c.dice(), 0.8);
        assert_eq!(c.iou(), 8.0 / 12.0);
    }

    #[test]
    fn identical_masks_and_empty_class() {
        let gt = mask(&[".#..", "##..", "...#"]);
        let c = confusion(gt.view(), gt.view(), None).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let z = Array2::from_elem((3, 3), false);
        let c = confusion(z.view(), z.view(), None).unwrap();
        assert_eq!(c.sensitivity(), 1.0);
        assert_eq!(c.dice(), 1.0);
    }

    #[test]
    fn fov_restricts_counts() {
        let pred = mask(&["##", "##"]);
        let gt = mask(&["#.", ".."]);
        let fov = mask(&["#.", "#."]);
        let c = confusion(pred.view(), gt.view(), Some(fov.view())).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 0, 0));
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn non_binary_input_is_rejected() {
        let v = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.5]).unwrap();
        assert!(as_mask(v.view(), "gt").is_err());
        let size = confusion(
            Array2::from_elem((2, 2), false).view(),
            Array2::from_elem((2, 3), false).view(),
            None,
        );
        assert!(size.is_err());
    }

    #[test]
    fn auc_examples() {
        let s = Array2::from_shape_vec((1, 4), vec![0.9, 0.4, 0.6, 0.1]).unwrap();
        let l = Array2::from_shape_vec((1, 4), vec![true, true, false, false]).unwrap();
        assert_eq!(auc(s.view(), l.view(), None).unwrap(), 0.75);
        let c = Array2::from_elem((1, 4), 0.3);
        assert_eq!(auc(c.view(), l.view(), None).unwrap(), 0.5);
        let sep = Array2::from_shape_vec((1, 4), vec![0.9, 0.8, 0.2, 0.1]).unwrap();
        assert_eq!(auc(sep.view(), l.view(), None).unwrap(), 1.0);
        let one = Array2::from_elem((1, 4), true);
        assert!(matches!(auc(s.view(), one.view(), None), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn thinning_keeps_lines_and_thins_bands() {
        let line = mask(&["........", ".######.", "........"]);
        assert_eq!(thin(&line), line);
        let band = mask(&["..........", ".########.", ".########.", ".########.", ".........."]);
        let s = thin(&band);
        let kept = s.iter().filter(|&&v| v).count();
        assert!(kept > 0 && kept < 10, "{kept}");
        assert!(Zip::from(&s).and(&band).all(|&a, &b| !a || b));
        assert_eq!(component_count(s.view()), 1);
    }

    #[test]
    fn cldice_metric_instances() {
        let l = mask(&["..............", "..##########..", ".............."]);
        assert_eq!(cl_dice_metric(l.view(), l.view()).unwrap(), 1.0);
        let half = mask(&["..............", "..#####.......", ".............."]);
        assert!((cl_dice_metric(half.view(), l.view()).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn line_break_hurts_cldice_more_than_dice() {
        let gt = mask(&[
            "........", "########", ".......#", ".......#", ".......#", ".......#", ".......#", ".......#",
        ]);
        let mut broken = gt.clone();
        broken[[1, 3]] = false;
        let cd = cl_dice_metric(broken.view(), gt.view()).unwrap();
        let dice = confusion(broken.view(), gt.view(), None).unwrap().dice();
        assert!(cd < 1.0);
        assert!(1.0 - dice < 0.05, "{dice}");
        assert_eq!(component_count(broken.view()), 2);
    }

    #[test]
    fn component_count_uses_four_connectivity() {
        assert_eq!(component_count(mask(&["#.", ".#"]).view()), 2);
        assert_eq!(component_count(mask(&["##", ".#"]).view()), 1);
        assert_eq!(component_count(mask(&["..", ".."]).view()), 0);
    }

    #[test]
    fn macro_average_skips_undefined_auc() {
        let base = ImageMetrics {
            image_id: "a".into(),
            acc: 1.0,
            sen: 1.0,
            spe: 1.0,
            auc: Some(0.8),
            dice: 0.5,
            iou: 0.2,
            cldice: 1.0,
        };
        let other = ImageMetrics {
            image_id: "b".into(),
            auc: None,
            dice: 1.0,
            ..base.clone()
        };
        let m = macro_average(&[base, other]).unwrap();
        assert_eq!(m.auc, Some(0.8));
        assert_eq!(m.dice, 0.75);
    }

    #[test]
    fn report_round_trips_through_json_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let probs = Array2::from_shape_vec((2, 2), vec![0.9, 0.2, 0.7, 0.1]).unwrap();
        let gt = mask(&["#.", ".."]);
        let row = evaluate("img0", probs.view(), gt.view(), None).unwrap();
        let report = Report::new(vec![row]);
        report.write_json(&dir.path().join("m.json")).unwrap();
        report.write_csv(&dir.path().join("m.csv")).unwrap();
        let back: Report = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(back.images, report.images);
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert!(csv.starts_with("image_id,acc,sen,spe,auc,dice,iou,cldice"));
        assert_eq!(csv.lines().count(), 3);
    }

    fn exhaustive_auc(s: &[f64], l: &[bool]) -> f64 {
        let mut twice = 0u64;
        let mut pairs = 0u64;
        for (i, &si) in s.iter().enumerate() {
            for (j, &sj) in s.iter().enumerate() {
                if l[i] && !l[j] {
                    pairs += 1;
                    twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(v in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let s: Vec<f64> = v.iter().map(|p| p.0 as f64 / 5.0).collect();
            let l: Vec<bool> = v.iter().map(|p| p.1).collect();
            prop_assume!(l.iter().any(|&b| b) && l.iter().any(|&b| !b));
            let n = s.len();
            let sa = Array2::from_shape_vec((1, n), s.clone()).unwrap();
            let la = Array2::from_shape_vec((1, n), l.clone()).unwrap();
            prop_assert_eq!(auc(sa.view(), la.view(), None).unwrap(), exhaustive_auc(&s, &l));
            // Any strictly increasing transform leaves the ranking, hence AUC, unchanged.
            let t = sa.mapv(|x| (3.0 * x).exp() - 7.0);
            prop_assert_eq!(auc(t.view(), la.view(), None).unwrap(), auc(sa.view(), la.view(), None).unwrap());
        }

        #[test]
        fn dice_iou_identity(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let c = Confusion { tp, tn, fp, fn_ };
            let iou = c.iou();
            prop_assert!((c.dice() - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        }

        #[test]
        fn thinning_is_a_subset_and_idempotent(v in proptest::collection::vec(any::<bool>(), 64)) {
            let m = Array2::from_shape_vec((8, 8), v).unwrap();
            let s = thin(&m);
            prop_assert!(Zip::from(&s).and(&m).all(|&a, &b| !a || b));
            prop_assert_eq!(thin(&s), s);
        }
    }
}
