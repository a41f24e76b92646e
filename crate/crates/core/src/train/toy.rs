//! End-to-end toy runs on synthetic cracks: the train/eval loop, the
//! eight-row architecture/loss ablation, and data-robustness sweeps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::detector::{decode_box_graph, DetectorConfig, TinyDetector};
use super::{sgd_step, ConvergenceTrace, SgdConfig, SgdState};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{box_loss_graph, iou, BBox, LossConfig, LossKind};
use crate::metrics::{evaluate, nms, Detection, EvalReport, GtBox, PixelTotals};
use crate::rng::{seeded, SeededRng};
use crate::synth::{augment, subsample, AugmentConfig, CrackSample};
use crate::tensor::Tensor;
use crate::warehouse::NafConfig;

/// Everything one toy run needs besides the data.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub detector: DetectorConfig,
    pub sgd: SgdConfig,
    pub loss: LossConfig,
    pub naf: NafConfig,
    /// Online augmentation of training samples; `None` trains on the raw set.
    pub augment: Option<AugmentConfig>,
    /// Class weights (background, crack) for the objectness cells.
    pub obj_weights: [f64; 2],
    /// Class weights (background, crack) for the mask pixels.
    pub mask_weights: [f64; 2],
    /// Multiplier on the mean positive-cell box loss.
    pub box_weight: f64,
    /// Detections below this crack probability are discarded at evaluation.
    pub conf_threshold: f64,
    /// IoU above which a lower-scored detection is suppressed.
    pub nms_iou: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            sgd: SgdConfig::default(),
            loss: LossConfig::default(),
            naf: NafConfig::default(),
            augment: None,
            obj_weights: [1.0, 12.0],
            mask_weights: [1.0, 5.0],
            box_weight: 1.0,
            conf_threshold: 0.25,
            nms_iou: 0.5,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.sgd.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        for w in self.obj_weights.iter().chain(&self.mask_weights) {
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::Invalid(format!("class weights must be positive")));
            }
        }
        if !(self.box_weight.is_finite() && self.box_weight > 0.0) {
            return Err(Error::Invalid(format!("box weight must be positive")));
        }
        if !(0.0..1.0).contains(&self.conf_threshold) || !(0.0..1.0).contains(&self.nms_iou) {
            return Err(Error::Invalid(format!(
                "confidence and suppression thresholds must lie in [0, 1)"
            )));
        }
        Ok(())
    }
}

/// One finished toy run: the held-out report after every epoch, the
/// per-image-step training trace, and the trained model.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub reports: Vec<EvalReport>,
    pub trace: ConvergenceTrace,
    pub detector: TinyDetector,
}

impl ToyRun {
    /// Report after the final epoch.
    pub fn last(&self) -> &EvalReport {
        self.reports.last().expect("at least one epoch")
    }
}

/// The cell of the head grid holding a box center; first box wins a cell.
fn positive_cells(boxes: &[BBox], grid: usize, stride: f64) -> Vec<(usize, usize, BBox)> {
    let mut taken = alloc::vec![false; grid * grid];
    let mut out = Vec::new();
    for b in boxes {
        let (cx, cy) = b.center();
        let col = ((cx / stride) as usize).min(grid - 1);
        let row = ((cy / stride) as usize).min(grid - 1);
        if !taken[row * grid + col] {
            taken[row * grid + col] = true;
            out.push((row, col, *b));
        }
    }
    out
}

struct StepOutcome {
    loss: f64,
    mean_iou: f64,
}

/// Builds the graph for one image, backpropagates and adds the parameter
/// gradients into `grad_acc` (ordered like [`TinyDetector::params`]).
fn train_step(
    det: &TinyDetector,
    sample: &CrackSample,
    cfg: &ToyConfig,
    epoch: usize,
    grad_acc: &mut [Tensor],
    step: usize,
) -> Result<StepOutcome> {
    let g = cfg.detector.grid();
    let s = cfg.detector.input_size;
    let stride = cfg.detector.stride();

    let mut tape = Tape::new();
    let vars = det.register(&mut tape, true);
    let img = tape.constant(sample.image_nchw());
    let out = det.forward(&mut tape, &vars, img, epoch, &cfg.naf)?;

    let positives = positive_cells(&sample.boxes, g, stride);
    let mut obj_target = alloc::vec![0u8; g * g];
    // Cells adjacent to a positive are ignored (class 2): their features are
    // nearly identical to the positive's, so treating them as hard negatives
    // only teaches the scorer to hedge.
    for (row, col, _) in &positives {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (r, c) = (*row as i64 + dr, *col as i64 + dc);
                if r >= 0 && c >= 0 && (r as usize) < g && (c as usize) < g {
                    obj_target[r as usize * g + c as usize] = 2;
                }
            }
        }
    }
    for (row, col, _) in &positives {
        obj_target[row * g + col] = 1;
    }

    let obj_sum = tape.wce(out.obj, &obj_target, cfg.obj_weights)?;
    let obj_loss = tape.scale(obj_sum, 1.0 / (g * g) as f64);
    let mask_sum = tape.wce(out.mask, &sample.mask, cfg.mask_weights)?;
    let mask_loss = tape.scale(mask_sum, 1.0 / (s * s) as f64);
    let mut total = tape.add(obj_loss, mask_loss);

    let mut iou_sum = 0.0;
    if !positives.is_empty() {
        let mut box_sum = None;
        for (row, col, gt) in &positives {
            let pred = decode_box_graph(&mut tape, out.boxes, *row, *col, stride)?;
            iou_sum += iou(&BBox::from_tensor(tape.value(pred))?, gt);
            let gt_id = tape.constant(gt.tensor());
            let term = box_loss_graph(&mut tape, pred, gt_id, &cfg.loss)?;
            box_sum = Some(match box_sum {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
        let mean = tape.scale(box_sum.expect("non-empty"), 1.0 / positives.len() as f64);
        let weighted = tape.scale(mean, cfg.box_weight);
        total = tape.add(total, weighted);
    }

    let loss = tape.value(total).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "toy training loss",
            index: step,
        });
    }
    tape.backward(total)?;
    for (acc, id) in grad_acc.iter_mut().zip(vars.ids()) {
        if let Some(grad) = tape.grad(id) {
            for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += g;
            }
        }
    }
    Ok(StepOutcome {
        loss,
        mean_iou: if positives.is_empty() {
            0.0
        } else {
            iou_sum / positives.len() as f64
        },
    })
}

/// Runs the detector over `samples` and assembles the evaluation report.
/// `epoch` fixes the warehouse anneal state used for inference.
/// Margin (pixels) around a candidate box when collecting nearby predicted
/// mask pixels for scoring.
const BLOB_MARGIN: f64 = 8.0;

/// Scores a candidate box by its IoU with the bounding box of the predicted
/// mask pixels in its neighbourhood (the box dilated by [`BLOB_MARGIN`]).
/// The densely supervised mask head acts as a free box-quality signal:
/// shifted or clipped boxes lose to the cluster neighbour that bounds the
/// blob, so ranking correlates with localisation quality instead of raw
/// objectness, which saturates on every cell a crack touches.
fn mask_agreement(mask: &[u8], size: usize, b: &BBox) -> f64 {
    let clamp = |v: f64| v.max(0.0).min(size as f64);
    let (ox1, oy1) = (clamp(b.x1 - BLOB_MARGIN), clamp(b.y1 - BLOB_MARGIN));
    let (ox2, oy2) = (clamp(b.x2 + BLOB_MARGIN), clamp(b.y2 + BLOB_MARGIN));
    let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    let mut any = false;
    for row in oy1 as usize..(oy2.ceil() as usize).min(size) {
        for col in ox1 as usize..(ox2.ceil() as usize).min(size) {
            if mask[row * size + col] == 0 {
                continue;
            }
            any = true;
            let (x, y) = (col as f64, row as f64);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1.0);
            y2 = y2.max(y + 1.0);
        }
    }
    if !any {
        return 0.0;
    }
    match BBox::new(x1, y1, x2, y2) {
        Ok(blob) => iou(b, &blob),
        Err(_) => 0.0,
    }
}

pub fn eval_detector(
    det: &TinyDetector,
    samples: &[CrackSample],
    cfg: &ToyConfig,
    epoch: usize,
) -> Result<EvalReport> {
    let size = cfg.detector.input_size;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut pred_flags = Vec::with_capacity(samples.len());
    let mut true_flags = Vec::with_capacity(samples.len());
    let mut pixels = PixelTotals::default();
    for (image_id, sample) in samples.iter().enumerate() {
        let p = det.predict(&sample.image_nchw(), epoch, &cfg.naf)?;
        let mut image_dets = Vec::new();
        for (cell, prob) in p.prob.iter().enumerate() {
            if *prob >= cfg.conf_threshold {
                if let Some(bbox) = p.boxes[cell] {
                    let score = mask_agreement(&p.mask, size, &bbox).max(1e-6);
                    image_dets.push(Detection::new(image_id, bbox, score)?);
                }
            }
        }
        let kept = nms(&image_dets, cfg.nms_iou);
        pred_flags.push(!kept.is_empty());
        for k in kept {
            dets.push(image_dets[k].clone());
        }
        true_flags.push(sample.has_crack());
        for b in &sample.boxes {
            gts.push(GtBox {
                image_id,
                bbox: *b,
            });
        }
        pixels.accumulate(&p.mask, &sample.mask)?;
    }
    evaluate(&dets, &gts, &pred_flags, &true_flags, &pixels)
}

fn fisher_yates(order: &mut [usize], rng: &mut SeededRng) {
    use crate::rng::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Trains on `train`, evaluating on `eval` after every epoch. Deterministic
/// in the config seed; aborts with the offending image-step index if the
/// loss leaves the finite range.
pub fn train_toy(train: &[CrackSample], eval: &[CrackSample], cfg: &ToyConfig) -> Result<ToyRun> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Invalid(format!(
            "training and evaluation splits must both be non-empty"
        )));
    }
    let mut rng = seeded(cfg.sgd.seed);
    let mut det = TinyDetector::init(cfg.detector, &mut rng)?;
    let mut params = det.params();
    let mut state = SgdState::zeros_like(&params);
    let mut trace = ConvergenceTrace {
        loss: Vec::new(),
        mean_iou: Vec::new(),
        steps_to_target: None,
    };
    let mut reports = Vec::with_capacity(cfg.sgd.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.sgd.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        fisher_yates(&mut order, &mut rng);
        for chunk in order.chunks(cfg.sgd.batch.max(1)) {
            let mut grad_acc: Vec<Tensor> =
                params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for &idx in chunk {
                let augmented;
                let sample = match &cfg.augment {
                    Some(acfg) => {
                        augmented = augment(&train[idx], acfg, &mut rng)?;
                        &augmented
                    }
                    None => &train[idx],
                };
                let outcome = train_step(&det, sample, cfg, epoch, &mut grad_acc, step)?;
                if trace.steps_to_target.is_none() && outcome.mean_iou >= 0.9 {
                    trace.steps_to_target = Some(step);
                }
                trace.loss.push(outcome.loss);
                trace.mean_iou.push(outcome.mean_iou);
                step += 1;
            }
            let inv = 1.0 / chunk.len() as f64;
            for acc in &mut grad_acc {
                for v in acc.data_mut() {
                    *v *= inv;
                }
            }
            sgd_step(&mut params, &grad_acc, &mut state, &cfg.sgd)?;
            det.set_params(&params)?;
        }
        reports.push(eval_detector(&det, eval, cfg, epoch)?);
    }
    Ok(ToyRun {
        reports,
        trace,
        detector: det,
    })
}

/// Exponential moving average with smoothing 2/(window+1), seeded at the
/// first element.
pub fn ema_series(xs: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = match xs.first() {
        Some(&x) => x,
        None => return out,
    };
    for (i, &x) in xs.iter().enumerate() {
        if i > 0 {
            acc = alpha * x + (1.0 - alpha) * acc;
        }
        out.push(acc);
    }
    out
}

/// One ablation cell: which switches were on and the final-epoch report.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub kwconv: bool,
    pub ta: bool,
    pub fpiou: bool,
    pub report: EvalReport,
}

/// Trains all eight switch combinations on the same data and seed. Row 0 is
/// the plain-convolution baseline with the aspect-ratio IoU loss; the last
/// row has everything on.
pub fn ablation_run(
    train: &[CrackSample],
    eval: &[CrackSample],
    cfg: &ToyConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(8);
    for bits in 0..8u32 {
        let kwconv = bits & 0b100 != 0;
        let ta = bits & 0b010 != 0;
        let fpiou = bits & 0b001 != 0;
        let mut sub = cfg.clone();
        sub.detector.kwconv = kwconv;
        sub.detector.ta = ta;
        sub.loss.kind = if fpiou { LossKind::FpIou } else { LossKind::Ciou };
        let run = train_toy(train, eval, &sub)?;
        rows.push(AblationRow {
            kwconv,
            ta,
            fpiou,
            report: run.reports.into_iter().last().expect("epochs > 0"),
        });
    }
    Ok(rows)
}

/// Which robustness protocol to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustKind {
    /// Train on nested 30/50/70/90/100% subsets, same evaluation set.
    Subsample,
    /// Train without and with online augmentation, same evaluation set.
    Augment,
}

/// One robustness row: a human-readable setting label plus the final report.
#[derive(Debug, Clone)]
pub struct RobustRow {
    pub label: String,
    pub report: EvalReport,
}

pub fn robustness_run(
    kind: RobustKind,
    train: &[CrackSample],
    eval: &[CrackSample],
    cfg: &ToyConfig,
) -> Result<Vec<RobustRow>> {
    let mut rows = Vec::new();
    match kind {
        RobustKind::Subsample => {
            let ids: Vec<usize> = (0..train.len()).collect();
            for fraction in [0.3, 0.5, 0.7, 0.9, 1.0] {
                let keep = subsample(&ids, fraction, cfg.sgd.seed)?;
                let subset: Vec<CrackSample> = keep.iter().map(|&i| train[i].clone()).collect();
                let run = train_toy(&subset, eval, cfg)?;
                rows.push(RobustRow {
                    label: format!("{}%", (fraction * 100.0 + 0.5) as u32),
                    report: run.reports.into_iter().last().expect("epochs > 0"),
                });
            }
        }
        RobustKind::Augment => {
            for on in [false, true] {
                let mut sub = cfg.clone();
                sub.augment = if on {
                    Some(cfg.augment.unwrap_or_default())
                } else {
                    None
                };
                let run = train_toy(train, eval, &sub)?;
                rows.push(RobustRow {
                    label: String::from(if on { "yes" } else { "no" }),
                    report: run.reports.into_iter().last().expect("epochs > 0"),
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GenConfig};

    fn tiny_dataset(count: usize, seed0: u64) -> Vec<CrackSample> {
        let cfg = GenConfig::default();
        (0..count)
            .map(|i| generate(seed0 + i as u64, &cfg).unwrap())
            .collect()
    }

    #[test]
    fn positive_cells_clamp_and_first_wins() {
        let near_edge = BBox::new(60.0, 60.0, 63.9, 63.9).unwrap();
        let cells = positive_cells(&[near_edge], 16, 4.0);
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].0, cells[0].1), (15, 15));

        let a = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let cells = positive_cells(&[a, b], 16, 4.0);
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].2, a);
    }

    #[test]
    fn ema_is_flat_on_constants_and_tracks_drops() {
        let flat = ema_series(&[2.0; 40], 20);
        assert!(flat.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let mut xs = alloc::vec![1.0; 40];
        xs.extend_from_slice(&[0.0; 40]);
        let ema = ema_series(&xs, 20);
        assert!(ema[39] > ema[79]);
    }

    #[test]
    fn one_epoch_run_produces_reports_and_trace() {
        let data = tiny_dataset(6, 900);
        let cfg = ToyConfig {
            sgd: SgdConfig {
                epochs: 2,
                batch: 3,
                ..SgdConfig::default()
            },
            ..ToyConfig::default()
        };
        let run = train_toy(&data[..4], &data[4..], &cfg).unwrap();
        assert_eq!(run.reports.len(), 2);
        assert_eq!(run.trace.loss.len(), 8);
        assert_eq!(run.trace.mean_iou.len(), 8);
        assert!(run.trace.loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn reruns_are_bit_identical() {
        let data = tiny_dataset(5, 31);
        let cfg = ToyConfig {
            sgd: SgdConfig {
                epochs: 2,
                batch: 2,
                ..SgdConfig::default()
            },
            ..ToyConfig::default()
        };
        let a = train_toy(&data[..3], &data[3..], &cfg).unwrap();
        let b = train_toy(&data[..3], &data[3..], &cfg).unwrap();
        assert_eq!(a.trace.loss, b.trace.loss);
        assert_eq!(a.reports.last(), b.reports.last());
    }
}
