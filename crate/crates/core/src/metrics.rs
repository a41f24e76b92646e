//! Detection and segmentation evaluation: greedy matching, all-point
//! average precision, image-level confusion, pixel overlap scores, and the
//! miss/false detection rates.
//!
//! Zero-denominator conventions: precision, recall, MDR, and FDR are 0 when
//! their denominator is 0; pixel IoU and Dice are 1 when both masks are
//! empty. Average precision over zero ground truths is reported as absent
//! (`None`), never as a number.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{iou, BBox};

/// One scored box prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(image_id: usize, bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Invalid(alloc::format!(
                "detection score must lie in [0,1], got {score}"
            )));
        }
        Ok(Self {
            image_id,
            bbox,
            score,
        })
    }
}

/// One ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub image_id: usize,
    pub bbox: BBox,
}

/// Outcome of greedy matching at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the detection slice, sorted by descending score
    /// (stable: equal scores keep input order).
    pub order: Vec<usize>,
    /// TP/FP label per detection, aligned with `order`.
    pub is_tp: Vec<bool>,
    /// Matched flag per ground-truth box.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    /// (TP, FP, FN) counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let tp = self.is_tp.iter().filter(|&&t| t).count();
        let fp = self.is_tp.len() - tp;
        let fn_ = self.gt_matched.iter().filter(|&&m| !m).count();
        (tp, fp, fn_)
    }
}

/// Greedy score-ordered matching: each detection claims the highest-IoU
/// still-unmatched ground truth on its image (ties to the lowest gt index)
/// and is a TP iff that IoU reaches the threshold. Unmatched ground truths
/// count as FN.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut gt_matched = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.image_id != det.image_id || gt_matched[gi] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= iou_threshold => {
                gt_matched[gi] = true;
                is_tp.push(true);
            }
            _ => is_tp.push(false),
        }
    }
    MatchResult {
        order,
        is_tp,
        gt_matched,
    }
}

/// P = TP/(TP+FP), R = TP/(TP+FN); 0 on empty denominators.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

/// MDR = FN/(TP+FN) = 1−R, FDR = FP/(TP+FP) = 1−P; 0 on empty denominators.
pub fn mdr_fdr(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    (ratio(fn_, tp + fn_), ratio(fp, tp + fp))
}

/// All-point interpolated average precision from score-ordered TP/FP
/// labels. The precision envelope is made monotone non-increasing from the
/// right and integrated over the recall steps. `None` when there are no
/// ground truths (absent class).
pub fn average_precision(is_tp: &[bool], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return None;
    }
    let n = is_tp.len();
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Suffix max → envelope.
    let mut envelope = precision;
    for k in (0..n.saturating_sub(1)).rev() {
        if envelope[k + 1] > envelope[k] {
            envelope[k] = envelope[k + 1];
        }
    }
    let mut ap = 0.0;
    for (k, &hit) in is_tp.iter().enumerate() {
        if hit {
            // Each TP advances recall by exactly 1/total_gt.
            ap += envelope[k] / total_gt as f64;
        }
    }
    Some(ap)
}

/// Matches then scores AP at one threshold.
pub fn ap_at(dets: &[Detection], gts: &[GtBox], iou_threshold: f64) -> Option<f64> {
    let m = match_detections(dets, gts, iou_threshold);
    average_precision(&m.is_tp, gts.len())
}

/// The 10 thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    core::array::from_fn(|k| 0.5 + 0.05 * k as f64)
}

/// Mean AP over classes; absent classes are skipped, and the mean itself is
/// absent when no class is present.
pub fn mean_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Image-level 2×2 confusion counts `[[TP, FN], [FP, TN]]` where row 0 is
/// "truly crack" and column 0 is "predicted crack".
pub fn confusion_matrix_images(pred_crack: &[bool], true_crack: &[bool]) -> Result<[[usize; 2]; 2]> {
    if pred_crack.len() != true_crack.len() {
        return Err(Error::DataLength {
            expected: true_crack.len(),
            got: pred_crack.len(),
        });
    }
    let mut m = [[0usize; 2]; 2];
    for (&p, &t) in pred_crack.iter().zip(true_crack) {
        match (t, p) {
            (true, true) => m[0][0] += 1,
            (true, false) => m[0][1] += 1,
            (false, true) => m[1][0] += 1,
            (false, false) => m[1][1] += 1,
        }
    }
    Ok(m)
}

/// Row-normalized confusion matrix; empty rows stay all-zero.
pub fn normalized_confusion(m: &[[usize; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        let total = m[r][0] + m[r][1];
        if total > 0 {
            out[r][0] = m[r][0] as f64 / total as f64;
            out[r][1] = m[r][1] as f64 / total as f64;
        }
    }
    out
}

/// Pixel IoU and Dice over binary masks; (1, 1) when both are empty.
pub fn pixel_iou_dice(pred: &[u8], gt: &[u8]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::DataLength {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.iter().chain(gt).any(|&v| v > 1) {
        return Err(Error::Invalid(alloc::format!(
            "masks must be binary (0/1)"
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        a += p as usize;
        b += g as usize;
        inter += (p & g) as usize;
    }
    let union = a + b - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    let iou = inter as f64 / union as f64;
    let dice = 2.0 * inter as f64 / (a + b) as f64;
    Ok((iou, dice))
}

/// Greedy non-maximum suppression: keeps detections in descending-score
/// order, dropping any whose IoU with an already-kept same-image detection
/// reaches the threshold. Returns kept indices into the input slice.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for &di in &order {
        let suppressed = kept.iter().any(|&ki| {
            dets[ki].image_id == dets[di].image_id
                && iou(&dets[ki].bbox, &dets[di].bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(di);
        }
    }
    kept
}

/// Full evaluation summary. Detection metrics use the provided detections
/// as-is (confidence filtering and NMS happen upstream); precision/recall
/// are taken at IoU 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// (threshold, AP) rows for the 10 thresholds.
    pub ap_table: Vec<(f64, f64)>,
    /// Image-level [[TP, FN], [FP, TN]].
    pub confusion: [[usize; 2]; 2],
    pub pixel_iou: f64,
    pub dice: f64,
    pub mdr: f64,
    pub fdr: f64,
}

/// Pixel-mask aggregates fed into [`evaluate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelTotals {
    pub inter: usize,
    pub pred: usize,
    pub gt: usize,
}

impl PixelTotals {
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::DataLength {
                expected: gt.len(),
                got: pred.len(),
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.pred += (p != 0) as usize;
            self.gt += (g != 0) as usize;
            self.inter += (p != 0 && g != 0) as usize;
        }
        Ok(())
    }

    pub fn iou_dice(&self) -> (f64, f64) {
        let union = self.pred + self.gt - self.inter;
        if union == 0 {
            return (1.0, 1.0);
        }
        (
            self.inter as f64 / union as f64,
            2.0 * self.inter as f64 / (self.pred + self.gt) as f64,
        )
    }
}

/// Builds the full report from detections, ground truths, per-image labels,
/// and pixel totals. Requires at least one ground-truth box so AP is
/// defined.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GtBox],
    image_pred_crack: &[bool],
    image_true_crack: &[bool],
    pixels: &PixelTotals,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Invalid(alloc::format!(
            "evaluation needs at least one ground-truth box"
        )));
    }
    let m50 = match_detections(dets, gts, 0.5);
    let (tp, fp, fn_) = m50.counts();
    let (precision, recall) = precision_recall(tp, fp, fn_);
    let (mdr, fdr) = mdr_fdr(tp, fp, fn_);

    let mut ap_table = Vec::with_capacity(10);
    for thr in coco_thresholds() {
        let ap = ap_at(dets, gts, thr).unwrap_or(0.0);
        ap_table.push((thr, ap));
    }
    let map50 = ap_table[0].1;
    let map50_95 = ap_table.iter().map(|&(_, ap)| ap).sum::<f64>() / ap_table.len() as f64;

    let confusion = confusion_matrix_images(image_pred_crack, image_true_crack)?;
    let (pixel_iou, dice) = pixels.iou_dice();
    Ok(EvalReport {
        precision,
        recall,
        map50,
        map50_95,
        ap_table,
        confusion,
        pixel_iou,
        dice,
        mdr,
        fdr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(img: usize, b: BBox, score: f64) -> Detection {
        Detection::new(img, b, score).unwrap()
    }

    #[test]
    fn single_exact_match_is_tp() {
        let gts = [GtBox {
            image_id: 0,
            bbox: bx(0.0, 0.0, 2.0, 2.0),
        }];
        let dets = [det(0, bx(0.0, 0.0, 2.0, 2.0), 0.9)];
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(m.counts(), (1, 0, 0));
    }

    #[test]
    fn second_detection_on_same_gt_is_fp() {
        let gts = [GtBox {
            image_id: 0,
            bbox: bx(0.0, 0.0, 2.0, 2.0),
        }];
        let dets = [
            det(0, bx(0.0, 0.0, 2.0, 2.0), 0.6),
            det(0, bx(0.1, 0.0, 2.1, 2.0), 0.8),
        ];
        let m = match_detections(&dets, &gts, 0.5);
        // Higher-score detection (index 1) wins the gt.
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.is_tp, vec![true, false]);
        assert_eq!(m.counts(), (1, 1, 0));
    }

    #[test]
    fn matching_respects_image_boundaries() {
        let gts = [GtBox {
            image_id: 1,
            bbox: bx(0.0, 0.0, 2.0, 2.0),
        }];
        let dets = [det(0, bx(0.0, 0.0, 2.0, 2.0), 0.9)];
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(m.counts(), (0, 1, 1));
    }

    #[test]
    fn precision_recall_conventions() {
        assert_eq!(precision_recall(9, 1, 0), (0.9, 1.0));
        assert_eq!(precision_recall(0, 0, 0), (0.0, 0.0));
        assert_eq!(precision_recall(0, 0, 3), (0.0, 0.0));
    }

    #[test]
    fn mdr_reproduces_published_recall_complements() {
        // Recall 72.3% → miss rate 27.7%; recall 73.2% → 26.8%.
        let (mdr, _) = mdr_fdr(723, 0, 277);
        assert!((mdr - 0.277).abs() < 1e-12);
        let (_, r) = precision_recall(723, 0, 277);
        assert!((r - 0.723).abs() < 1e-12);
        let (mdr, _) = mdr_fdr(732, 0, 268);
        assert!((mdr - 0.268).abs() < 1e-12);
        let (_, fdr) = mdr_fdr(5, 0, 0);
        assert_eq!(fdr, 0.0);
        assert_eq!(mdr_fdr(0, 0, 0), (0.0, 0.0));
    }

    #[test]
    fn ap_trivial_cases() {
        // All TP covering all gts → AP 1.
        assert_eq!(average_precision(&[true, true, true], 3), Some(1.0));
        // Single FP → AP 0.
        assert_eq!(average_precision(&[false], 2), Some(0.0));
        // No gts → absent.
        assert_eq!(average_precision(&[true], 0), None);
        // Bounded.
        let ap = average_precision(&[true, false, true, false], 4).unwrap();
        assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn mean_ap_skips_absent_classes() {
        assert_eq!(mean_ap(&[Some(0.8)]), Some(0.8));
        assert_eq!(mean_ap(&[Some(0.6), None, Some(1.0)]), Some(0.8));
        assert_eq!(mean_ap(&[None, None]), None);
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert!((t[0] - 0.5).abs() < 1e-12);
        assert!((t[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn confusion_counts_and_normalization() {
        let pred = [true, true, false, true, false];
        let truth = [true, false, false, true, true];
        let m = confusion_matrix_images(&pred, &truth).unwrap();
        assert_eq!(m, [[2, 1], [1, 1]]);
        let n = normalized_confusion(&m);
        assert!((n[0][0] + n[0][1] - 1.0).abs() < 1e-12);
        assert!((n[1][0] + n[1][1] - 1.0).abs() < 1e-12);
        // Empty row stays zero.
        let n = normalized_confusion(&[[0, 0], [3, 1]]);
        assert_eq!(n[0], [0.0, 0.0]);
        assert!(confusion_matrix_images(&pred, &truth[..3]).is_err());
    }

    #[test]
    fn pixel_overlap_conventions() {
        assert_eq!(pixel_iou_dice(&[1, 1], &[1, 1]).unwrap(), (1.0, 1.0));
        assert_eq!(pixel_iou_dice(&[0, 0], &[0, 0]).unwrap(), (1.0, 1.0));
        assert_eq!(pixel_iou_dice(&[1, 0], &[0, 1]).unwrap(), (0.0, 0.0));
        // 2×2 masks sharing one of their two-pixel rows' pixels:
        // |A| = 2, |B| = 2, |∩| = 1 → IoU 1/3, Dice 1/2.
        let (i, d) = pixel_iou_dice(&[1, 1, 0, 0], &[0, 1, 1, 0]).unwrap();
        assert!((i - 1.0 / 3.0).abs() < 1e-15);
        assert!((d - 0.5).abs() < 1e-15);
        assert!(pixel_iou_dice(&[2, 0], &[1, 0]).is_err());
        assert!(pixel_iou_dice(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn nms_suppresses_same_image_overlaps() {
        let dets = [
            det(0, bx(0.0, 0.0, 2.0, 2.0), 0.9),
            det(0, bx(0.1, 0.1, 2.1, 2.1), 0.8), // IoU ≈ 0.68 with the first
            det(0, bx(5.0, 5.0, 6.0, 6.0), 0.7),
            det(1, bx(0.0, 0.0, 2.0, 2.0), 0.6), // other image: kept
        ];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept, vec![0, 2, 3]);
    }

    #[test]
    fn detection_score_validation() {
        assert!(Detection::new(0, bx(0.0, 0.0, 1.0, 1.0), 1.5).is_err());
        assert!(Detection::new(0, bx(0.0, 0.0, 1.0, 1.0), -0.1).is_err());
    }
}
