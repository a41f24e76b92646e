//! Anchor-box regression races: the same seeded set of (anchor, target)
//! pairs is optimized independently under each loss, and the number of
//! steps to reach the IoU target is compared across losses.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::losses::{box_loss_graph, iou, BBox, LossConfig, LossKind};
use crate::rng::{seeded, Rng, SeededRng};
use crate::tensor::Tensor;

use super::{sgd_step, ConvergenceTrace, SgdConfig, SgdState};

/// Race protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaceConfig {
    /// Number of seeded (anchor, target) pairs, shared across lanes.
    pub n_pairs: usize,
    /// Step budget per pair.
    pub max_steps: usize,
    /// IoU at which a pair counts as converged.
    pub target_iou: f64,
    /// Side of the square coordinate space boxes live in.
    pub space: f64,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            n_pairs: 256,
            max_steps: 2000,
            target_iou: 0.9,
            space: 64.0,
            sgd: SgdConfig {
                lr0: 0.01,
                momentum: 0.937,
                ..SgdConfig::default()
            },
            seed: 42,
        }
    }
}

/// One loss's results over the shared pair suite.
#[derive(Debug, Clone, PartialEq)]
pub struct RaceLane {
    pub kind: LossKind,
    /// Aggregate per-step trace (means over pairs; finished pairs hold
    /// their final value). `steps_to_target` is the median over pairs.
    pub trace: ConvergenceTrace,
    /// Per-pair first step reaching the target IoU; `None` = never.
    pub per_pair_steps: Vec<Option<usize>>,
    /// Lower median of `per_pair_steps` with `None` sorted last.
    pub median_steps: Option<usize>,
}

/// Draws one target box and an overlapping anchor. The jitter ranges
/// guarantee a strictly positive initial IoU, mirroring how positive
/// anchors always overlap their assigned ground truth.
fn draw_pair(rng: &mut SeededRng, space: f64) -> (BBox, BBox) {
    let w = rng.gen_range(8.0..24.0);
    let h = rng.gen_range(8.0..24.0);
    let x1 = rng.gen_range(1.0..(space - 1.0 - w));
    let y1 = rng.gen_range(1.0..(space - 1.0 - h));
    let target = BBox::new(x1, y1, x1 + w, y1 + h).expect("generated box is valid");

    let dx = rng.gen_range(-0.4..0.4) * w;
    let dy = rng.gen_range(-0.4..0.4) * h;
    let sw = rng.gen_range(0.7..1.4);
    let sh = rng.gen_range(0.7..1.4);
    let (cx, cy) = target.center();
    let (acx, acy) = (cx + dx, cy + dy);
    let (aw, ah) = (sw * w, sh * h);
    let anchor = BBox::new(
        acx - aw / 2.0,
        acy - ah / 2.0,
        acx + aw / 2.0,
        acy + ah / 2.0,
    )
    .expect("jittered box is valid");
    debug_assert!(iou(&anchor, &target) > 0.0);
    (anchor, target)
}

/// Keeps both extents at least epsilon by recentering degenerate sides.
fn project_valid(corners: &mut [f64], eps: f64) {
    for axis in 0..2 {
        let (lo, hi) = (axis, axis + 2);
        if corners[hi] - corners[lo] < eps {
            let mid = 0.5 * (corners[lo] + corners[hi]);
            corners[lo] = mid - eps / 2.0;
            corners[hi] = mid + eps / 2.0;
        }
    }
}

/// Lower median with `None` treated as +∞.
fn median_steps(per_pair: &[Option<usize>]) -> Option<usize> {
    let mut sorted: Vec<Option<usize>> = per_pair.to_vec();
    sorted.sort_by_key(|s| s.unwrap_or(usize::MAX));
    sorted[(sorted.len() - 1) / 2]
}

/// Runs every lane over the same seeded pair suite.
pub fn box_regression_race(kinds: &[LossConfig], cfg: &RaceConfig) -> Result<Vec<RaceLane>> {
    cfg.sgd.validate()?;
    let mut rng = seeded(cfg.seed);
    let pairs: Vec<(BBox, BBox)> = (0..cfg.n_pairs).map(|_| draw_pair(&mut rng, cfg.space)).collect();

    let mut lanes = Vec::with_capacity(kinds.len());
    for loss_cfg in kinds {
        lanes.push(run_lane(loss_cfg, &pairs, cfg)?);
    }
    Ok(lanes)
}

fn run_lane(loss_cfg: &LossConfig, pairs: &[(BBox, BBox)], cfg: &RaceConfig) -> Result<RaceLane> {
    let n = pairs.len();
    let mut corners: Vec<Tensor> = pairs.iter().map(|(a, _)| a.tensor()).collect();
    let mut states: Vec<SgdState> =
        corners.iter().map(|c| SgdState::zeros_like(core::slice::from_ref(c))).collect();
    let mut current_iou: Vec<f64> = pairs
        .iter()
        .map(|(a, t)| iou(a, t))
        .collect();
    let mut current_loss: Vec<f64> = vec![0.0; n];
    let mut steps_to: Vec<Option<usize>> = current_iou
        .iter()
        .map(|&v| (v >= cfg.target_iou).then_some(0))
        .collect();
    let mut active: Vec<bool> = steps_to.iter().map(|s| s.is_none()).collect();

    let mut loss_trace = Vec::with_capacity(cfg.max_steps);
    let mut iou_trace = Vec::with_capacity(cfg.max_steps);

    for step in 1..=cfg.max_steps {
        if active.iter().all(|&a| !a) {
            break;
        }
        for p in 0..n {
            if !active[p] {
                continue;
            }
            let mut tape = Tape::new();
            let pred = tape.leaf(corners[p].clone());
            let gt = tape.constant(pairs[p].1.tensor());
            let loss = box_loss_graph(&mut tape, pred, gt, loss_cfg)?;
            current_loss[p] = tape.value(loss).item()?;
            tape.backward(loss)?;
            let grad = tape
                .grad(pred)
                .expect("leaf participates in the loss")
                .clone();
            sgd_step(
                core::slice::from_mut(&mut corners[p]),
                core::slice::from_ref(&grad),
                &mut states[p],
                &cfg.sgd,
            )?;
            project_valid(corners[p].data_mut(), 1e-3);
            let boxed = BBox::from_tensor(&corners[p])?;
            current_iou[p] = iou(&boxed, &pairs[p].1);
            if current_iou[p] >= cfg.target_iou {
                steps_to[p] = Some(step);
                active[p] = false;
            }
        }
        loss_trace.push(current_loss.iter().sum::<f64>() / n as f64);
        iou_trace.push(current_iou.iter().sum::<f64>() / n as f64);
    }

    let median = median_steps(&steps_to);
    Ok(RaceLane {
        kind: loss_cfg.kind,
        trace: ConvergenceTrace {
            loss: loss_trace,
            mean_iou: iou_trace,
            steps_to_target: median,
        },
        per_pair_steps: steps_to,
        median_steps: median,
    })
}
