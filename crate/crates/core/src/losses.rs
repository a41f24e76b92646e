//! Box-regression loss family and weighted cross-entropy.
//!
//! Every loss exists twice: as a pure scalar function (used for reporting
//! and as the oracle in tests) and as a tape graph over corner tensors (used
//! for training). The two are kept in exact correspondence.
//!
//! A note on the additive IoU term: the piecewise interval mappings take the
//! raw IoU value as input, while the additive term of the edge-penalty
//! losses is the loss form 1 − IoU — the only reading where coincident boxes
//! give exactly zero loss.

use alloc::string::String;
use alloc::vec;

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Axis-aligned box in corner form with positive width and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) || !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Corner tensor [x1, y1, x2, y2] for the tape builders.
    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[4], vec![self.x1, self.y1, self.x2, self.y2]).expect("fixed length")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape() != [4] {
            return Err(Error::RankMismatch {
                op: "box corners",
                expected: 1,
                got: t.shape().to_vec(),
            });
        }
        let d = t.data();
        Self::new(d[0], d[1], d[2], d[3])
    }
}

/// Absolute distances between corresponding edges of two boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeDistances {
    pub dw1: f64,
    pub dw2: f64,
    pub dh1: f64,
    pub dh2: f64,
}

/// Interval bounds of the piecewise IoU mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalerParams {
    pub d: f64,
    pub u: f64,
}

impl Default for FocalerParams {
    fn default() -> Self {
        Self { d: 0.0, u: 0.95 }
    }
}

impl FocalerParams {
    pub fn validated(self) -> Result<Self> {
        if !(0.0 <= self.d && self.d < self.u && self.u <= 1.0) {
            return Err(Error::Invalid(alloc::format!(
                "focaler bounds need 0 <= d < u <= 1, got d={} u={}",
                self.d,
                self.u
            )));
        }
        Ok(self)
    }
}

/// Attention regulator of the quality-weighted losses. `strict_outer_three`
/// keeps the literal leading 3 of the weight definition (net 9λq·e^{−(λq)²});
/// switching it off uses the bare bell m(λq).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PIoUv2Params {
    pub lambda: f64,
    pub strict_outer_three: bool,
}

impl Default for PIoUv2Params {
    fn default() -> Self {
        Self {
            lambda: 1.3,
            strict_outer_three: true,
        }
    }
}

/// Two-class cross-entropy weighting; class 0 is background, class 1 crack.
/// The divisor of the loss is always the actual mini-batch extent of the
/// logits; `batch` records the configured nominal batch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WceConfig {
    pub weights: [f64; 2],
    pub batch: usize,
}

impl Default for WceConfig {
    fn default() -> Self {
        Self {
            weights: [1.0, 1.0],
            batch: 8,
        }
    }
}

// ---- pure scalar forms ----

/// Intersection-over-union in [0, 1]; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Piecewise interval mapping: 0 below d, linear on [d, u], 1 above u.
pub fn focaler_map(v: f64, p: &FocalerParams) -> f64 {
    if v < p.d {
        0.0
    } else if v <= p.u {
        (v - p.d) / (p.u - p.d)
    } else {
        1.0
    }
}

/// Simplified mapping with the lower bound eliminated: v/u below u, else 1.
pub fn focaler_map_simplified(v: f64, u: f64) -> f64 {
    if v <= u {
        v / u
    } else {
        1.0
    }
}

pub fn edge_distances(pred: &BBox, gt: &BBox) -> EdgeDistances {
    EdgeDistances {
        dw1: (pred.x1 - gt.x1).abs(),
        dw2: (pred.x2 - gt.x2).abs(),
        dh1: (pred.y1 - gt.y1).abs(),
        dh2: (pred.y2 - gt.y2).abs(),
    }
}

/// Mean relative edge displacement, normalized by the ground-truth extents.
pub fn penalty_factor(pred: &BBox, gt: &BBox) -> f64 {
    let e = edge_distances(pred, gt);
    0.25 * ((e.dw1 + e.dw2) / gt.width() + (e.dh1 + e.dh2) / gt.height())
}

/// Edge-penalty loss: (1 − IoU) + 1 − e^{−p²}, bounded in [0, 2).
pub fn piou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let p = penalty_factor(pred, gt);
    (1.0 - iou(pred, gt)) + 1.0 - fmath::exp(-p * p)
}

/// Anchor quality q = e^{−p} ∈ (0, 1].
pub fn quality(p: f64) -> f64 {
    fmath::exp(-p)
}

/// Non-monotonic bell m(x) = 3x·e^{−x²}, maximal at x = 1/√2.
pub fn nonmonotonic_attention(x: f64) -> f64 {
    3.0 * x * fmath::exp(-x * x)
}

/// Weight applied by the quality-weighted losses for a given penalty p:
/// 3·m(λ·e^{−p}) in the strict form, m(λ·e^{−p}) otherwise. As a function
/// of q = e^{−p} it has a unique interior maximum at q = 1/(λ√2).
pub fn quality_weight(p: f64, v2: &PIoUv2Params) -> f64 {
    let m = nonmonotonic_attention(v2.lambda * quality(p));
    if v2.strict_outer_three {
        3.0 * m
    } else {
        m
    }
}

fn v2_weight(pred: &BBox, gt: &BBox, v2: &PIoUv2Params) -> f64 {
    quality_weight(penalty_factor(pred, gt), v2)
}

/// Quality-weighted edge-penalty loss.
pub fn piouv2_loss(pred: &BBox, gt: &BBox, v2: &PIoUv2Params) -> f64 {
    v2_weight(pred, gt, v2) * piou_loss(pred, gt)
}

/// Composite loss: quality weight × (interval-mapped IoU loss + edge
/// penalty term).
pub fn fp_iou_loss(pred: &BBox, gt: &BBox, u: f64, v2: &PIoUv2Params) -> f64 {
    let p = penalty_factor(pred, gt);
    let inner = (1.0 - focaler_map_simplified(iou(pred, gt), u)) + 1.0 - fmath::exp(-p * p);
    v2_weight(pred, gt, v2) * inner
}

/// Complete-IoU baseline: (1 − IoU) + ρ²/c² + αv.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let i = iou(pred, gt);
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (pcx - gcx) * (pcx - gcx) + (pcy - gcy) * (pcy - gcy);
    let ex1 = pred.x1.min(gt.x1);
    let ey1 = pred.y1.min(gt.y1);
    let ex2 = pred.x2.max(gt.x2);
    let ey2 = pred.y2.max(gt.y2);
    let c2 = (ex2 - ex1) * (ex2 - ex1) + (ey2 - ey1) * (ey2 - ey1);
    let four_over_pi2 = 4.0 / (core::f64::consts::PI * core::f64::consts::PI);
    let da = fmath::atan(gt.width() / gt.height()) - fmath::atan(pred.width() / pred.height());
    let v = four_over_pi2 * da * da;
    let alpha = v / ((1.0 - i) + v + 1e-12);
    (1.0 - i) + rho2 / c2 + alpha * v
}

/// Pure value of the weighted two-class cross-entropy; the tape op
/// [`Tape::wce`] is the differentiable twin.
pub fn weighted_cross_entropy_value(
    logits: &Tensor,
    target: &[u8],
    cfg: &WceConfig,
) -> Result<f64> {
    validate_wce(cfg)?;
    crate::autodiff::kernels::wce_forward(logits, target, cfg.weights)
}

/// Differentiable weighted cross-entropy with config validation.
pub fn weighted_cross_entropy_graph(
    tape: &mut Tape,
    logits: VarId,
    target: &[u8],
    cfg: &WceConfig,
) -> Result<VarId> {
    validate_wce(cfg)?;
    tape.wce(logits, target, cfg.weights)
}

fn validate_wce(cfg: &WceConfig) -> Result<()> {
    if cfg.weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::Invalid(alloc::format!(
            "cross-entropy class weights must be positive"
        )));
    }
    Ok(())
}

// ---- tape graphs ----

/// Splits a `[4]` corner tensor into scalar corner nodes (x1, y1, x2, y2).
fn corners(tape: &mut Tape, b: VarId) -> Result<[VarId; 4]> {
    if tape.value(b).shape() != [4] {
        return Err(Error::RankMismatch {
            op: "box corners",
            expected: 1,
            got: tape.value(b).shape().to_vec(),
        });
    }
    BBox::from_tensor(tape.value(b))?;
    Ok([
        tape.slice_first(b, 0)?,
        tape.slice_first(b, 1)?,
        tape.slice_first(b, 2)?,
        tape.slice_first(b, 3)?,
    ])
}

struct BoxGraph {
    x1: VarId,
    y1: VarId,
    x2: VarId,
    y2: VarId,
    w: VarId,
    h: VarId,
    area: VarId,
}

fn box_graph(tape: &mut Tape, b: VarId) -> Result<BoxGraph> {
    let [x1, y1, x2, y2] = corners(tape, b)?;
    let w = tape.sub(x2, x1);
    let h = tape.sub(y2, y1);
    let area = tape.mul(w, h);
    Ok(BoxGraph {
        x1,
        y1,
        x2,
        y2,
        w,
        h,
        area,
    })
}

/// Differentiable IoU of two corner tensors.
pub fn iou_graph(tape: &mut Tape, pred: VarId, gt: VarId) -> Result<VarId> {
    let a = box_graph(tape, pred)?;
    let b = box_graph(tape, gt)?;
    iou_of(tape, &a, &b)
}

fn iou_of(tape: &mut Tape, a: &BoxGraph, b: &BoxGraph) -> Result<VarId> {
    let ix1 = tape.max(a.x1, b.x1);
    let iy1 = tape.max(a.y1, b.y1);
    let ix2 = tape.min(a.x2, b.x2);
    let iy2 = tape.min(a.y2, b.y2);
    let iwr = tape.sub(ix2, ix1);
    let iw = tape.relu(iwr);
    let ihr = tape.sub(iy2, iy1);
    let ih = tape.relu(ihr);
    let inter = tape.mul(iw, ih);
    let areas = tape.add(a.area, b.area);
    let union = tape.sub(areas, inter);
    let inv = tape.recip(union);
    Ok(tape.mul(inter, inv))
}

/// Differentiable penalty factor.
pub fn penalty_graph(tape: &mut Tape, pred: VarId, gt: VarId) -> Result<VarId> {
    let a = box_graph(tape, pred)?;
    let b = box_graph(tape, gt)?;
    penalty_of(tape, &a, &b)
}

fn penalty_of(tape: &mut Tape, a: &BoxGraph, b: &BoxGraph) -> Result<VarId> {
    let dx1 = tape.sub(a.x1, b.x1);
    let dw1 = tape.abs(dx1);
    let dx2 = tape.sub(a.x2, b.x2);
    let dw2 = tape.abs(dx2);
    let dy1 = tape.sub(a.y1, b.y1);
    let dh1 = tape.abs(dy1);
    let dy2 = tape.sub(a.y2, b.y2);
    let dh2 = tape.abs(dy2);
    let wsum = tape.add(dw1, dw2);
    let winv = tape.recip(b.w);
    let wterm = tape.mul(wsum, winv);
    let hsum = tape.add(dh1, dh2);
    let hinv = tape.recip(b.h);
    let hterm = tape.mul(hsum, hinv);
    let total = tape.add(wterm, hterm);
    Ok(tape.scale(total, 0.25))
}

/// 1 − e^{−p²} given the penalty node.
fn edge_term(tape: &mut Tape, p: VarId) -> VarId {
    let p2 = tape.square(p);
    let neg = tape.scale(p2, -1.0);
    let e = tape.exp(neg);
    tape.one_minus(e)
}

/// Differentiable edge-penalty loss.
pub fn piou_graph(tape: &mut Tape, pred: VarId, gt: VarId) -> Result<VarId> {
    let a = box_graph(tape, pred)?;
    let b = box_graph(tape, gt)?;
    piou_of(tape, &a, &b)
}

fn piou_of(tape: &mut Tape, a: &BoxGraph, b: &BoxGraph) -> Result<VarId> {
    let i = iou_of(tape, a, b)?;
    let iou_term = tape.one_minus(i);
    let p = penalty_of(tape, a, b)?;
    let edge = edge_term(tape, p);
    Ok(tape.add(iou_term, edge))
}

/// Quality weight node: 3·m(λq) or m(λq), with q = e^{−p}.
fn weight_of(tape: &mut Tape, p: VarId, v2: &PIoUv2Params) -> VarId {
    let negp = tape.scale(p, -1.0);
    let q = tape.exp(negp);
    let x = tape.scale(q, v2.lambda);
    let x2 = tape.square(x);
    let negx2 = tape.scale(x2, -1.0);
    let bell = tape.exp(negx2);
    let m3 = tape.mul(x, bell);
    let m = tape.scale(m3, 3.0);
    if v2.strict_outer_three {
        tape.scale(m, 3.0)
    } else {
        m
    }
}

/// Differentiable quality-weighted edge-penalty loss.
pub fn piouv2_graph(
    tape: &mut Tape,
    pred: VarId,
    gt: VarId,
    v2: &PIoUv2Params,
) -> Result<VarId> {
    let a = box_graph(tape, pred)?;
    let b = box_graph(tape, gt)?;
    let base = piou_of(tape, &a, &b)?;
    let p = penalty_of(tape, &a, &b)?;
    let w = weight_of(tape, p, v2);
    Ok(tape.mul(w, base))
}

/// Differentiable composite loss. The interval mapping is built as
/// min(v/u, 1); at the breakpoint v = u the min's left-operand tie rule
/// yields the linear segment's derivative 1/u.
pub fn fp_iou_graph(
    tape: &mut Tape,
    pred: VarId,
    gt: VarId,
    u: f64,
    v2: &PIoUv2Params,
) -> Result<VarId> {
    let a = box_graph(tape, pred)?;
    let b = box_graph(tape, gt)?;
    let i = iou_of(tape, &a, &b)?;
    let scaled = tape.scale(i, 1.0 / u);
    let one = tape.scalar(1.0);
    let mapped = tape.min(scaled, one);
    let iou_term = tape.one_minus(mapped);
    let p = penalty_of(tape, &a, &b)?;
    let edge = edge_term(tape, p);
    let inner = tape.add(iou_term, edge);
    let w = weight_of(tape, p, v2);
    Ok(tape.mul(w, inner))
}

/// Differentiable interval-mapped IoU loss 1 − focaler(iou).
pub fn focaler_loss_graph(
    tape: &mut Tape,
    pred: VarId,
    gt: VarId,
    fp: &FocalerParams,
) -> Result<VarId> {
    fp.validated()?;
    let i = iou_graph(tape, pred, gt)?;
    let shifted = tape.add_const(i, -fp.d);
    let slope = tape.scale(shifted, 1.0 / (fp.u - fp.d));
    let clamped_low = tape.relu(slope);
    let one = tape.scalar(1.0);
    let mapped = tape.min(clamped_low, one);
    Ok(tape.one_minus(mapped))
}

/// Differentiable complete-IoU baseline.
pub fn ciou_graph(tape: &mut Tape, pred: VarId, gt: VarId) -> Result<VarId> {
    let a = box_graph(tape, pred)?;
    let b = box_graph(tape, gt)?;
    let i = iou_of(tape, &a, &b)?;
    let iou_term = tape.one_minus(i);

    let pcx_s = tape.add(a.x1, a.x2);
    let pcx = tape.scale(pcx_s, 0.5);
    let pcy_s = tape.add(a.y1, a.y2);
    let pcy = tape.scale(pcy_s, 0.5);
    let gcx_s = tape.add(b.x1, b.x2);
    let gcx = tape.scale(gcx_s, 0.5);
    let gcy_s = tape.add(b.y1, b.y2);
    let gcy = tape.scale(gcy_s, 0.5);
    let dx = tape.sub(pcx, gcx);
    let dx2 = tape.square(dx);
    let dy = tape.sub(pcy, gcy);
    let dy2 = tape.square(dy);
    let rho2 = tape.add(dx2, dy2);

    let ex1 = tape.min(a.x1, b.x1);
    let ey1 = tape.min(a.y1, b.y1);
    let ex2 = tape.max(a.x2, b.x2);
    let ey2 = tape.max(a.y2, b.y2);
    let ew = tape.sub(ex2, ex1);
    let ew2 = tape.square(ew);
    let eh = tape.sub(ey2, ey1);
    let eh2 = tape.square(eh);
    let c2 = tape.add(ew2, eh2);
    let c2inv = tape.recip(c2);
    let center_term = tape.mul(rho2, c2inv);

    let ginv = tape.recip(b.h);
    let gratio = tape.mul(b.w, ginv);
    let gat = tape.atan(gratio);
    let pinv = tape.recip(a.h);
    let pratio = tape.mul(a.w, pinv);
    let pat = tape.atan(pratio);
    let da = tape.sub(gat, pat);
    let da2 = tape.square(da);
    let v = tape.scale(da2, 4.0 / (core::f64::consts::PI * core::f64::consts::PI));
    let denom_a = tape.add(iou_term, v);
    let denom = tape.add_const(denom_a, 1e-12);
    let dinv = tape.recip(denom);
    let alpha = tape.mul(v, dinv);
    let aspect_term = tape.mul(alpha, v);

    let partial = tape.add(iou_term, center_term);
    Ok(tape.add(partial, aspect_term))
}

// ---- registry ----

/// Selectable box-loss kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Iou,
    Ciou,
    Focaler,
    Piou,
    Piouv2,
    FpIou,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Iou,
        LossKind::Ciou,
        LossKind::Focaler,
        LossKind::Piou,
        LossKind::Piouv2,
        LossKind::FpIou,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Iou => "iou",
            LossKind::Ciou => "ciou",
            LossKind::Focaler => "focaler",
            LossKind::Piou => "piou",
            LossKind::Piouv2 => "piouv2",
            LossKind::FpIou => "fpiou",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown loss kind \"{name}\"")))
    }
}

/// Full box-loss configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub focaler: FocalerParams,
    pub v2: PIoUv2Params,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::FpIou,
            focaler: FocalerParams::default(),
            v2: PIoUv2Params::default(),
        }
    }
}

/// Dispatches to the configured loss graph.
pub fn box_loss_graph(tape: &mut Tape, pred: VarId, gt: VarId, cfg: &LossConfig) -> Result<VarId> {
    match cfg.kind {
        LossKind::Iou => {
            let i = iou_graph(tape, pred, gt)?;
            Ok(tape.one_minus(i))
        }
        LossKind::Ciou => ciou_graph(tape, pred, gt),
        LossKind::Focaler => focaler_loss_graph(tape, pred, gt, &cfg.focaler),
        LossKind::Piou => piou_graph(tape, pred, gt),
        LossKind::Piouv2 => piouv2_graph(tape, pred, gt, &cfg.v2),
        LossKind::FpIou => fp_iou_graph(tape, pred, gt, cfg.focaler.u, &cfg.v2),
    }
}

/// Pure twin of [`box_loss_graph`].
pub fn box_loss_value(pred: &BBox, gt: &BBox, cfg: &LossConfig) -> f64 {
    match cfg.kind {
        LossKind::Iou => 1.0 - iou(pred, gt),
        LossKind::Ciou => ciou_loss(pred, gt),
        LossKind::Focaler => 1.0 - focaler_map(iou(pred, gt), &cfg.focaler),
        LossKind::Piou => piou_loss(pred, gt),
        LossKind::Piouv2 => piouv2_loss(pred, gt, &cfg.v2),
        LossKind::FpIou => fp_iou_loss(pred, gt, cfg.focaler.u, &cfg.v2),
    }
}

/// Parses a loss config from dotted config keys (`loss.kind`, `loss.u`,
/// `loss.d`, `loss.lambda`, `loss.strict_eq24`).
pub fn loss_config_from_pairs<'a>(
    pairs: impl Iterator<Item = (&'a str, &'a str)>,
) -> Result<LossConfig> {
    let mut cfg = LossConfig::default();
    let parse_f64 = |key: &str, val: &str| -> Result<f64> {
        val.parse::<f64>()
            .map_err(|_| Error::Invalid(alloc::format!("bad number for {key}: \"{val}\"")))
    };
    for (key, val) in pairs {
        match key {
            "loss.kind" => cfg.kind = LossKind::parse(val)?,
            "loss.u" => cfg.focaler.u = parse_f64(key, val)?,
            "loss.d" => cfg.focaler.d = parse_f64(key, val)?,
            "loss.lambda" => cfg.v2.lambda = parse_f64(key, val)?,
            "loss.strict_eq24" => {
                cfg.v2.strict_outer_three = match val {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(Error::Invalid(alloc::format!(
                            "bad boolean for loss.strict_eq24: \"{other}\""
                        )))
                    }
                }
            }
            _ => {
                return Err(Error::Invalid(alloc::format!(
                    "unknown loss config key \"{}\"",
                    String::from(key)
                )))
            }
        }
    }
    cfg.focaler = cfg.focaler.validated()?;
    if !(cfg.v2.lambda > 0.0) {
        return Err(Error::Invalid(alloc::format!(
            "loss.lambda must be positive"
        )));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_basic_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = bx(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &disjoint), 0.0);
        let b = bx(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn focaler_maps_hit_breakpoints() {
        let p = FocalerParams { d: 0.2, u: 0.8 };
        assert_eq!(focaler_map(0.2, &p), 0.0);
        assert_eq!(focaler_map(0.8, &p), 1.0);
        assert!((focaler_map(0.5, &p) - 0.5).abs() < 1e-15);
        let identity = FocalerParams { d: 0.0, u: 1.0 };
        assert_eq!(focaler_map(0.37, &identity), 0.37);
        assert_eq!(focaler_map_simplified(0.0, 0.95), 0.0);
        assert_eq!(focaler_map_simplified(0.95, 0.95), 1.0);
        assert_eq!(focaler_map_simplified(0.99, 0.95), 1.0);
        assert!((focaler_map_simplified(0.475, 0.95) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn edge_distances_and_penalty_hand_cases() {
        let gt = bx(1.0, 1.0, 4.0, 5.0);
        let pred = bx(0.0, 0.0, 2.0, 2.0);
        let e = edge_distances(&pred, &gt);
        assert_eq!((e.dw1, e.dw2, e.dh1, e.dh2), (1.0, 2.0, 1.0, 3.0));
        // ¼(1/3 + 2/3 + 1/4 + 3/4) = 0.5.
        assert!((penalty_factor(&pred, &gt) - 0.5).abs() < 1e-15);

        let unit = bx(0.0, 0.0, 1.0, 1.0);
        let shifted = bx(1.0, 0.0, 2.0, 1.0);
        assert!((penalty_factor(&shifted, &unit) - 0.5).abs() < 1e-15);
        assert_eq!(penalty_factor(&unit, &unit), 0.0);
    }

    #[test]
    fn bell_curve_peaks_where_calculus_says() {
        assert_eq!(nonmonotonic_attention(0.0), 0.0);
        let x_star = 1.0 / (2.0f64).sqrt();
        let peak = nonmonotonic_attention(x_star);
        assert!((peak - 3.0 / (2.0 * core::f64::consts::E).sqrt()).abs() < 1e-12);
        // Neighbors are lower.
        assert!(nonmonotonic_attention(x_star - 1e-3) < peak);
        assert!(nonmonotonic_attention(x_star + 1e-3) < peak);
        assert!((nonmonotonic_attention(1.0) - 3.0 / core::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn quality_is_exponential_in_penalty() {
        assert_eq!(quality(0.0), 1.0);
        assert!((quality((2.0f64).ln()) - 0.5).abs() < 1e-15);
        assert!(quality(50.0) > 0.0);
    }

    #[test]
    fn coincident_boxes_zero_every_loss() {
        let b = bx(2.0, 3.0, 7.0, 11.0);
        let v2 = PIoUv2Params::default();
        assert_eq!(piou_loss(&b, &b), 0.0);
        assert_eq!(piouv2_loss(&b, &b, &v2), 0.0);
        assert_eq!(fp_iou_loss(&b, &b, 0.95, &v2), 0.0);
        assert_eq!(ciou_loss(&b, &b), 0.0);
        assert_eq!(1.0 - iou(&b, &b), 0.0);
    }

    #[test]
    fn box_validation_rejects_degenerate() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, 0.0).is_err());
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn loss_kind_registry_round_trips() {
        for kind in LossKind::ALL {
            assert_eq!(LossKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(LossKind::parse("gumbo").is_err());
    }

    #[test]
    fn config_pairs_parse_and_validate() {
        let pairs = [
            ("loss.kind", "piouv2"),
            ("loss.u", "0.9"),
            ("loss.lambda", "1.5"),
            ("loss.strict_eq24", "false"),
        ];
        let cfg = loss_config_from_pairs(pairs.iter().copied()).unwrap();
        assert_eq!(cfg.kind, LossKind::Piouv2);
        assert_eq!(cfg.focaler.u, 0.9);
        assert_eq!(cfg.v2.lambda, 1.5);
        assert!(!cfg.v2.strict_outer_three);
        assert!(loss_config_from_pairs([("loss.u", "1.5")].iter().copied()).is_err());
        assert!(loss_config_from_pairs([("loss.wat", "1")].iter().copied()).is_err());
    }
}
