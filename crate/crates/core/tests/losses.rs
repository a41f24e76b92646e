//! Loss-family behavior: frozen hand/oracle fixtures, graph/pure
//! correspondence, invariances, subgradient choices, and gradient checks.

use crackle::autodiff::check::finite_diff_check;
use crackle::autodiff::Tape;
use crackle::losses::{
    box_loss_graph, box_loss_value, ciou_loss, edge_distances, focaler_loss_graph, focaler_map,
    focaler_map_simplified, fp_iou_loss, iou, nonmonotonic_attention, penalty_factor, piou_loss,
    piouv2_loss, quality, quality_weight, weighted_cross_entropy_value, BBox, FocalerParams,
    LossConfig, LossKind, PIoUv2Params, WceConfig,
};
use crackle::rng::{seeded, Rng};
use crackle::Tensor;

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// The canonical overlapping pair used throughout: pred (0,0,2,2) against
/// gt (1,1,4,5). Intersection is the unit square [1,2]², so
/// iou = 1 / (4 + 12 − 1) = 1/15 and p = ¼(1/3 + 2/3 + 1/4 + 3/4) = 1/2.
fn canonical() -> (BBox, BBox) {
    (bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 4.0, 5.0))
}

#[test]
fn canonical_pair_hand_arithmetic() {
    let (pred, gt) = canonical();
    assert!((iou(&pred, &gt) - 1.0 / 15.0).abs() < 1e-16);
    let e = edge_distances(&pred, &gt);
    assert_eq!((e.dw1, e.dw2, e.dh1, e.dh2), (1.0, 2.0, 1.0, 3.0));
    assert_eq!(penalty_factor(&pred, &gt), 0.5);
    let expected = 14.0 / 15.0 + 1.0 - (-0.25f64).exp();
    assert!((piou_loss(&pred, &gt) - expected).abs() < 1e-15);
    assert!((piou_loss(&pred, &gt) - 1.154_532_550_261_928_6).abs() < 1e-15);
}

#[test]
fn frozen_composite_fixtures() {
    // Constants computed by an independent scalar script composing the
    // definitions directly (iou = 1/15, p = 1/2, u = 0.95, λ = 1.3).
    let (pred, gt) = canonical();
    let strict = PIoUv2Params::default();
    let bare = PIoUv2Params {
        strict_outer_three: false,
        ..strict
    };
    assert!((piouv2_loss(&pred, &gt, &strict) - 4.399_839_794_362_57).abs() < 1e-12);
    assert!((piouv2_loss(&pred, &gt, &bare) - 1.466_613_264_787_523_2).abs() < 1e-12);
    assert!((fp_iou_loss(&pred, &gt, 0.95, &strict) - 4.386_468_119_079_199).abs() < 1e-12);
    assert!((fp_iou_loss(&pred, &gt, 0.95, &bare) - 1.462_156_039_693_066_2).abs() < 1e-12);
    assert!((ciou_loss(&pred, &gt) - 1.085_843_086_577_323_4).abs() < 1e-12);
}

#[test]
fn quality_weight_fixture_and_interior_maximum() {
    // λ = 1, p = ln 2 (q = ½): strict weight 3·m(½) = 4.5·e^{−¼}.
    let v2 = PIoUv2Params {
        lambda: 1.0,
        strict_outer_three: true,
    };
    let w = quality_weight((2.0f64).ln(), &v2);
    assert!((w - 4.5 * (-0.25f64).exp()).abs() < 1e-15);

    // As a function of q the weight peaks exactly at q* = 1/(λ√2).
    let v2 = PIoUv2Params::default();
    let at_q = |q: f64| quality_weight(-(q.ln()), &v2);
    let q_star = 1.0 / (v2.lambda * 2.0f64.sqrt());
    assert!(at_q(q_star) > at_q(q_star - 1e-3));
    assert!(at_q(q_star) > at_q(q_star + 1e-3));
    // Bell maximum of m itself: m(1/√2) = 3/√(2e).
    let m_peak = nonmonotonic_attention(1.0 / 2.0f64.sqrt());
    assert!((m_peak - 3.0 / (2.0 * std::f64::consts::E).sqrt()).abs() < 1e-12);
}

/// Draws a valid box with corners in a moderate range and extents ≥ 0.3, and
/// a second box overlapping it (shifted/scaled perturbation), so the pair
/// avoids the degenerate and fully-disjoint corners of the space.
fn random_pair(rng: &mut crackle::rng::SeededRng) -> (BBox, BBox) {
    let x1 = rng.gen_range(-4.0..4.0);
    let y1 = rng.gen_range(-4.0..4.0);
    let w = rng.gen_range(0.5..5.0);
    let h = rng.gen_range(0.5..5.0);
    let gt = bx(x1, y1, x1 + w, y1 + h);
    let dx = rng.gen_range(-0.3..0.3) * w;
    let dy = rng.gen_range(-0.3..0.3) * h;
    let sw = rng.gen_range(0.6..1.5);
    let sh = rng.gen_range(0.6..1.5);
    let pred = bx(x1 + dx, y1 + dy, x1 + dx + sw * w, y1 + dy + sh * h);
    (pred, gt)
}

fn all_configs() -> Vec<LossConfig> {
    LossKind::ALL
        .iter()
        .map(|&kind| LossConfig {
            kind,
            ..LossConfig::default()
        })
        .collect()
}

#[test]
fn graphs_match_pure_values_for_every_kind() {
    let mut rng = seeded(11);
    for _ in 0..50 {
        let (pred, gt) = random_pair(&mut rng);
        for cfg in all_configs() {
            let mut tape = Tape::new();
            let p = tape.leaf(pred.tensor());
            let g = tape.constant(gt.tensor());
            let loss = box_loss_graph(&mut tape, p, g, &cfg).unwrap();
            let got = tape.value(loss).item().unwrap();
            let want = box_loss_value(&pred, &gt, &cfg);
            assert!(
                (got - want).abs() < 1e-12,
                "{}: graph {got} vs pure {want}",
                cfg.kind.name()
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_for_every_kind() {
    let pairs = [
        canonical(),
        (bx(0.3, -0.2, 2.9, 1.7), bx(0.0, 0.0, 2.0, 2.0)),
        (bx(-1.0, -1.0, 4.0, 2.5), bx(0.0, 0.0, 3.0, 3.0)),
    ];
    for (pred, gt) in pairs {
        for cfg in all_configs() {
            let gt_t = gt.tensor();
            let rel = finite_diff_check(
                |tape, p| {
                    let g = tape.constant(gt_t.clone());
                    box_loss_graph(tape, p, g, &cfg)
                },
                &pred.tensor(),
                1e-6,
            )
            .unwrap();
            assert!(
                rel < 1e-6,
                "{} at {pred:?}: rel err {rel}",
                cfg.kind.name()
            );
        }
    }
}

#[test]
fn piou_bounds_and_coincidence_for_graphs() {
    let mut rng = seeded(23);
    for _ in 0..200 {
        let (pred, gt) = random_pair(&mut rng);
        let v = piou_loss(&pred, &gt);
        assert!((0.0..2.0).contains(&v), "piou {v} out of [0,2)");
    }
    // Disjoint boxes approach but never reach 2 (until e^{−p²} underflows
    // around p ≈ 27; p = 3 here).
    let far = (bx(0.0, 0.0, 1.0, 1.0), bx(3.0, 3.0, 4.0, 4.0));
    let v = piou_loss(&far.0, &far.1);
    assert!((1.0..2.0).contains(&v));
    assert!((v - (2.0 - (-9.0f64).exp())).abs() < 1e-15);

    // Coincident boxes: every kind evaluates to exactly zero, also on tape.
    let b = bx(1.5, -2.0, 4.5, 3.0);
    for cfg in all_configs() {
        assert_eq!(box_loss_value(&b, &b, &cfg), 0.0, "{}", cfg.kind.name());
        let mut tape = Tape::new();
        let p = tape.leaf(b.tensor());
        let g = tape.constant(b.tensor());
        let loss = box_loss_graph(&mut tape, p, g, &cfg).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0, "{}", cfg.kind.name());
    }
}

#[test]
fn near_zero_loss_implies_near_coincidence() {
    // Shrink a one-corner perturbation toward zero: the loss stays strictly
    // positive while boxes differ, and once it drops below 1e-3 the corner
    // deviation is already tiny.
    let gt = bx(0.0, 0.0, 2.0, 2.0);
    let mut last = f64::INFINITY;
    for k in 0..14 {
        let delta = 1.0 / (2.0f64).powi(k);
        let pred = bx(0.0, 0.0, 2.0 + delta, 2.0);
        let v = piou_loss(&pred, &gt);
        assert!(v > 0.0);
        assert!(v < last, "loss should shrink with the perturbation");
        if v < 1e-3 {
            assert!(delta < 1e-2);
        }
        last = v;
    }
}

#[test]
fn joint_translation_and_scale_invariance() {
    let mut rng = seeded(37);
    let shift = |b: &BBox, dx: f64, dy: f64| bx(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy);
    let scale = |b: &BBox, s: f64| bx(s * b.x1, s * b.y1, s * b.x2, s * b.y2);
    for _ in 0..25 {
        let (pred, gt) = random_pair(&mut rng);
        for cfg in all_configs() {
            let base = box_loss_value(&pred, &gt, &cfg);
            let translated =
                box_loss_value(&shift(&pred, 7.3, -4.1), &shift(&gt, 7.3, -4.1), &cfg);
            assert!(
                (base - translated).abs() < 1e-10,
                "{} translation: {base} vs {translated}",
                cfg.kind.name()
            );
            let scaled = box_loss_value(&scale(&pred, 2.7), &scale(&gt, 2.7), &cfg);
            assert!(
                (base - scaled).abs() < 1e-10,
                "{} scaling: {base} vs {scaled}",
                cfg.kind.name()
            );
        }
    }
}

#[test]
fn displacement_grid_has_positive_loss_slope() {
    // pred equal to gt translated by t along x: on a grid inside the
    // quality bell's rising region the loss increases with t and its
    // central finite-difference slope is strictly positive.
    let gt = bx(0.0, 0.0, 2.0, 2.0);
    let v2 = PIoUv2Params::default();
    let at = |t: f64| {
        let pred = bx(t, 0.0, 2.0 + t, 2.0);
        fp_iou_loss(&pred, &gt, 0.95, &v2)
    };
    let mut prev = at(0.05);
    for k in 1..=12 {
        let t = 0.1 * k as f64;
        let v = at(t);
        assert!(v > prev, "fp_iou not increasing at t={t}");
        let h = 1e-6;
        let slope = (at(t + h) - at(t - h)) / (2.0 * h);
        assert!(slope > 0.0, "slope {slope} at t={t}");
        prev = v;
    }
}

#[test]
fn focaler_map_monotone_and_lipschitz() {
    let p = FocalerParams { d: 0.1, u: 0.8 };
    let lipschitz = 1.0 / (p.u - p.d);
    let grid: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
    for pair in grid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (fa, fb) = (focaler_map(a, &p), focaler_map(b, &p));
        assert!(fb >= fa, "not monotone at {a}..{b}");
        assert!((fb - fa) <= lipschitz * (b - a) + 1e-15);
        // Simplified map: same properties with d = 0.
        let (sa, sb) = (focaler_map_simplified(a, 0.8), focaler_map_simplified(b, 0.8));
        assert!(sb >= sa);
        assert!((sb - sa) <= (b - a) / 0.8 + 1e-15);
    }
}

#[test]
fn quality_stays_in_unit_interval_and_pins_zero_penalty() {
    let mut rng = seeded(41);
    for _ in 0..100 {
        let (pred, gt) = random_pair(&mut rng);
        let p = penalty_factor(&pred, &gt);
        let q = quality(p);
        assert!(q > 0.0 && q <= 1.0);
        if q == 1.0 {
            assert_eq!(p, 0.0);
            let e = edge_distances(&pred, &gt);
            assert_eq!((e.dw1, e.dw2, e.dh1, e.dh2), (0.0, 0.0, 0.0, 0.0));
        }
    }
    assert_eq!(quality(0.0), 1.0);
}

/// A second, independently written complete-IoU: different factorization
/// and evaluation order, no shared helpers beyond the box type.
fn ciou_reference(pred: &BBox, gt: &BBox) -> f64 {
    let inter_w = f64::max(0.0, f64::min(pred.x2, gt.x2) - f64::max(pred.x1, gt.x1));
    let inter_h = f64::max(0.0, f64::min(pred.y2, gt.y2) - f64::max(pred.y1, gt.y1));
    let inter = inter_w * inter_h;
    let u = (pred.x2 - pred.x1) * (pred.y2 - pred.y1) + (gt.x2 - gt.x1) * (gt.y2 - gt.y1) - inter;
    let i = inter / u;
    let dcx = (pred.x1 + pred.x2 - gt.x1 - gt.x2) / 2.0;
    let dcy = (pred.y1 + pred.y2 - gt.y1 - gt.y2) / 2.0;
    let span_x = f64::max(pred.x2, gt.x2) - f64::min(pred.x1, gt.x1);
    let span_y = f64::max(pred.y2, gt.y2) - f64::min(pred.y1, gt.y1);
    let dist_term = (dcx * dcx + dcy * dcy) / (span_x * span_x + span_y * span_y);
    let angle = ((gt.x2 - gt.x1) / (gt.y2 - gt.y1)).atan()
        - ((pred.x2 - pred.x1) / (pred.y2 - pred.y1)).atan();
    let v = 4.0 / std::f64::consts::PI.powi(2) * angle * angle;
    (1.0 - i) + dist_term + v / (1.0 - i + v + 1e-12) * v
}

#[test]
fn ciou_matches_independent_reference() {
    let mut rng = seeded(53);
    for _ in 0..100 {
        let (pred, gt) = random_pair(&mut rng);
        let a = ciou_loss(&pred, &gt);
        let b = ciou_reference(&pred, &gt);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    // Concentric same-aspect boxes reduce to 1 − iou exactly.
    let outer = bx(-2.0, -1.0, 2.0, 1.0);
    let inner = bx(-1.0, -0.5, 1.0, 0.5);
    assert!((ciou_loss(&inner, &outer) - (1.0 - iou(&inner, &outer))).abs() < 1e-15);
}

#[test]
fn focaler_breakpoint_takes_left_segment_slope() {
    // pred (0,0,1,1) inside gt (0,0,1,2): iou = 1/2 exactly. With u = 1/2
    // the mapped value sits exactly on the breakpoint; the min's
    // first-operand tie rule must deliver the linear segment's slope 1/u,
    // so d(loss)/d(pred.y2) = −(1/u)·d(iou)/d(y2) = −2 · 1/2 = −1.
    let pred = bx(0.0, 0.0, 1.0, 1.0);
    let gt = bx(0.0, 0.0, 1.0, 2.0);
    let fp = FocalerParams { d: 0.0, u: 0.5 };

    let mut tape = Tape::new();
    let p = tape.leaf(pred.tensor());
    let g = tape.constant(gt.tensor());
    let loss = focaler_loss_graph(&mut tape, p, g, &fp).unwrap();
    assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    tape.backward(loss).unwrap();
    let grad = tape.grad(p).unwrap();
    assert!((grad.data()[3] - (-1.0)).abs() < 1e-15, "{:?}", grad.data());

    // Past the breakpoint (u below iou) the mapped value is the constant
    // branch and the same partial derivative is exactly zero.
    let fp_low = FocalerParams { d: 0.0, u: 0.4 };
    let mut tape = Tape::new();
    let p = tape.leaf(pred.tensor());
    let g = tape.constant(gt.tensor());
    let loss = focaler_loss_graph(&mut tape, p, g, &fp_low).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(p).unwrap();
    assert_eq!(grad.data()[3], 0.0);
}

#[test]
fn wce_matches_loop_oracle_and_closed_forms() {
    let cfg = WceConfig {
        weights: [1.0, 5.0],
        batch: 8,
    };
    // Loop oracle on a random case.
    let mut rng = seeded(67);
    let shape = [3usize, 2, 2, 4];
    let n = shape[0];
    let pixels = shape[2] * shape[3];
    let logits = Tensor::from_fn(&shape, |_| rng.gen_range(-2.0..2.0));
    let target: Vec<u8> = (0..n * pixels).map(|_| rng.gen_range(0..2u8)).collect();
    let got = weighted_cross_entropy_value(&logits, &target, &cfg).unwrap();

    let mut oracle = 0.0;
    let d = logits.data();
    for img in 0..n {
        for py in 0..shape[2] {
            for px in 0..shape[3] {
                let base = ((img * 2) * shape[2] + py) * shape[3] + px;
                let z0 = d[base];
                let z1 = d[base + shape[2] * shape[3]];
                let t = target[(img * shape[2] + py) * shape[3] + px] as usize;
                let zt = if t == 0 { z0 } else { z1 };
                let lse = z0.max(z1) + ((z0 - z0.max(z1)).exp() + (z1 - z0.max(z1)).exp()).ln();
                oracle -= cfg.weights[t] * (zt - lse);
            }
        }
    }
    oracle /= n as f64;
    assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");

    // Uniform logits: each pixel contributes w_t·ln 2; with targets half 0,
    // half 1 the per-image mean is (1+5)/2·ln 2 per pixel pair.
    let flat = Tensor::zeros(&[4, 2]);
    let targets = [0u8, 1, 0, 1];
    let v = weighted_cross_entropy_value(&flat, &targets, &cfg).unwrap();
    assert!((v - 3.0 * (2.0f64).ln()).abs() < 1e-12);
    let even = WceConfig::default();
    let v = weighted_cross_entropy_value(&flat, &targets, &even).unwrap();
    assert!((v - (2.0f64).ln()).abs() < 1e-12);

    // Logits hugely favoring the true class drive the loss to zero.
    let confident = Tensor::from_fn(&[4, 2], |i| {
        let row = i / 2;
        let class = i % 2;
        if class == targets[row] as usize {
            50.0
        } else {
            -50.0
        }
    });
    let v = weighted_cross_entropy_value(&confident, &targets, &cfg).unwrap();
    assert!(v.abs() < 1e-12);
}
