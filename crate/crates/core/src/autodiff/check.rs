//! Finite-difference validation of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng, SeededRng};
use crate::tensor::Tensor;

use super::{BinaryKind, KernelLayout, PoolMode, Tape, UnaryKind, VarId};

/// Compares the tape gradient of a scalar-valued graph against central
/// differences, rebuilding the graph for every perturbed input.
///
/// Returns the worst relative error over all coordinates of `x`:
/// `|analytic − numeric| / max(1, |analytic|)` where
/// `numeric = (f(x+εe_i) − f(x−εe_i)) / 2ε`.
pub fn finite_diff_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.constant(t.clone());
        let out = build(&mut tape, id)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = build(&mut tape, xid)?;
    let base = tape.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_diff_check forward",
            index: 0,
        });
    }
    tape.backward(out)?;
    let analytic = match tape.grad(xid) {
        Some(g) => g.clone(),
        None => Tensor::zeros(x.shape()),
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(&plus)?, eval(&minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check perturbed forward",
                index: i,
            });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check gradient",
                index: i,
            });
        }
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Result of one case of [`gradient_suite`].
#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: &'static str,
    pub rel_err: f64,
}

/// Uniform draw in (lo, hi).
fn uni(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Draw with |value| ≥ margin, random sign — keeps inputs away from the
/// kinks of relu/abs and the pole of recip.
fn uni_off_zero(rng: &mut SeededRng, shape: &[usize], margin: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(margin..hi);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Runs one finite-difference check of every differentiable op kind the tape
/// supports, with inputs drawn from `seed`. Returns the worst relative error
/// per case; callers decide the tolerance.
///
/// Each case turns the op output into a scalar by summing it against a fixed
/// random projection, so every input coordinate receives a distinct
/// gradient.
pub fn gradient_suite(seed: u64, eps: f64) -> Result<Vec<CheckCase>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();

    // Projects `y` to a scalar with fixed random weights drawn up front.
    fn proj(tape: &mut Tape, y: VarId, r: &Tensor) -> VarId {
        let rv = tape.constant(r.clone());
        let w = tape.mul(y, rv);
        tape.sum(w)
    }

    let mut run =
        |name: &'static str,
         x: Tensor,
         build: &dyn Fn(&mut Tape, VarId) -> Result<VarId>|
         -> Result<()> {
            let rel_err = finite_diff_check(build, &x, eps)?;
            out.push(CheckCase { name, rel_err });
            Ok(())
        };

    // Elementwise unaries.
    let smooth = [
        ("sigmoid", UnaryKind::Sigmoid),
        ("tanh", UnaryKind::Tanh),
        ("exp", UnaryKind::Exp),
        ("atan", UnaryKind::Atan),
    ];
    for (name, kind) in smooth {
        let x = uni(&mut rng, &[2, 3], -2.0, 2.0);
        let r = uni(&mut rng, &[2, 3], -1.0, 1.0);
        run(name, x, &move |t, v| {
            let y = t.unary(kind, v);
            Ok(proj(t, y, &r))
        })?;
    }
    for (name, kind, margin, hi) in [
        ("relu", UnaryKind::Relu, 0.2, 1.5),
        ("abs", UnaryKind::Abs, 0.2, 1.5),
        ("recip", UnaryKind::Recip, 0.5, 2.0),
    ] {
        let x = uni_off_zero(&mut rng, &[2, 3], margin, hi);
        let r = uni(&mut rng, &[2, 3], -1.0, 1.0);
        run(name, x, &move |t, v| {
            let y = t.unary(kind, v);
            Ok(proj(t, y, &r))
        })?;
    }
    {
        let x = uni(&mut rng, &[2, 3], -2.0, 2.0);
        let r = uni(&mut rng, &[2, 3], -1.0, 1.0);
        run("scale", x, &move |t, v| {
            let y = t.scale(v, 1.7);
            Ok(proj(t, y, &r))
        })?;
        let x = uni(&mut rng, &[2, 3], -2.0, 2.0);
        let r = uni(&mut rng, &[2, 3], -1.0, 1.0);
        run("add_const", x, &move |t, v| {
            let y = t.add_const(v, 0.3);
            Ok(proj(t, y, &r))
        })?;
    }

    // Elementwise binaries against a fixed second operand.
    for (name, kind) in [
        ("add", BinaryKind::Add),
        ("sub", BinaryKind::Sub),
        ("mul", BinaryKind::Mul),
        ("min", BinaryKind::Min),
        ("max", BinaryKind::Max),
    ] {
        let x = uni(&mut rng, &[2, 3], -2.0, 2.0);
        let y = uni(&mut rng, &[2, 3], -2.0, 2.0);
        let r = uni(&mut rng, &[2, 3], -1.0, 1.0);
        run(name, x, &move |t, v| {
            let yv = t.constant(y.clone());
            let z = t.binary(kind, v, yv);
            Ok(proj(t, z, &r))
        })?;
    }
    {
        // Scalar broadcast: the varying leaf is the scalar side.
        let x = uni(&mut rng, &[1], -2.0, 2.0);
        let y = uni(&mut rng, &[2, 3], -2.0, 2.0);
        let r = uni(&mut rng, &[2, 3], -1.0, 1.0);
        run("mul_scalar_broadcast", x, &move |t, v| {
            let yv = t.constant(y.clone());
            let z = t.mul(v, yv);
            Ok(proj(t, z, &r))
        })?;
    }

    // Reductions and shape ops.
    {
        let x = uni(&mut rng, &[3, 4], -2.0, 2.0);
        run("sum", x, &|t, v| Ok(t.sum(v)))?;
        let x = uni(&mut rng, &[3, 4], -2.0, 2.0);
        run("mean", x, &|t, v| Ok(t.mean(v)))?;
        let x = uni(&mut rng, &[2, 3, 4], -2.0, 2.0);
        let r = uni(&mut rng, &[2, 3, 1], -1.0, 1.0);
        run("sum_last", x, &move |t, v| {
            let y = t.sum_last(v);
            Ok(proj(t, y, &r))
        })?;
        let x = uni(&mut rng, &[2, 6], -2.0, 2.0);
        let r = uni(&mut rng, &[3, 4], -1.0, 1.0);
        run("reshape", x, &move |t, v| {
            let y = t.reshape(v, &[3, 4])?;
            Ok(proj(t, y, &r))
        })?;
        let x = uni(&mut rng, &[2, 1, 3], -2.0, 2.0);
        let r = uni(&mut rng, &[2, 4, 3], -1.0, 1.0);
        run("expand", x, &move |t, v| {
            let y = t.expand(v, &[2, 4, 3])?;
            Ok(proj(t, y, &r))
        })?;
        let x = uni(&mut rng, &[2, 3], -2.0, 2.0);
        let other = uni(&mut rng, &[2, 2], -2.0, 2.0);
        let r = uni(&mut rng, &[2, 5], -1.0, 1.0);
        run("concat", x, &move |t, v| {
            let o = t.constant(other.clone());
            let y = t.concat(v, o, 1)?;
            Ok(proj(t, y, &r))
        })?;
        let x = uni(&mut rng, &[3, 2, 2], -2.0, 2.0);
        let r = uni(&mut rng, &[1, 2, 2], -1.0, 1.0);
        run("slice_first", x, &move |t, v| {
            let y = t.slice_first(v, 1)?;
            Ok(proj(t, y, &r))
        })?;
        let x = uni(&mut rng, &[1, 3, 2, 2], -2.0, 2.0);
        let r = uni(&mut rng, &[3], -1.0, 1.0);
        run("pixel_vec", x, &move |t, v| {
            let y = t.pixel_vec(v, 0, 1, 1)?;
            Ok(proj(t, y, &r))
        })?;
    }

    // Linear layer, each input varied in turn.
    {
        let x = uni(&mut rng, &[2, 5], -1.0, 1.0);
        let w = uni(&mut rng, &[4, 5], -1.0, 1.0);
        let b = uni(&mut rng, &[4], -1.0, 1.0);
        let r = uni(&mut rng, &[2, 4], -1.0, 1.0);
        {
            let (w, b, r) = (w.clone(), b.clone(), r.clone());
            run("linear_x", x.clone(), &move |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.linear(v, wv, bv)?;
                Ok(proj(t, y, &r))
            })?;
        }
        {
            let (x, b, r) = (x.clone(), b.clone(), r.clone());
            run("linear_w", w.clone(), &move |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let y = t.linear(xv, v, bv)?;
                Ok(proj(t, y, &r))
            })?;
        }
        run("linear_b", b, &move |t, v| {
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.linear(xv, wv, v)?;
            Ok(proj(t, y, &r))
        })?;
    }

    // Convolutions.
    {
        let x = uni(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let k = uni(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let r = uni(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
        let (kc, rc) = (k.clone(), r.clone());
        run("conv2d_x", x.clone(), &move |t, v| {
            let kv = t.constant(kc.clone());
            let y = t.conv2d(v, kv, 1, 1)?;
            Ok(proj(t, y, &rc))
        })?;
        let xc = x.clone();
        run("conv2d_k", k, &move |t, v| {
            let xv = t.constant(xc.clone());
            let y = t.conv2d(xv, v, 1, 1)?;
            Ok(proj(t, y, &r))
        })?;
        let r2 = uni(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
        let k2 = uni(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        run("conv2d_stride2_x", x, &move |t, v| {
            let kv = t.constant(k2.clone());
            let y = t.conv2d(v, kv, 2, 0)?;
            Ok(proj(t, y, &r2))
        })?;
    }

    // Pooling and upsampling.
    for (name, mode, channel) in [
        ("pool_spatial_avg", PoolMode::Avg, false),
        ("pool_spatial_max", PoolMode::Max, false),
        ("pool_channel_avg", PoolMode::Avg, true),
        ("pool_channel_max", PoolMode::Max, true),
    ] {
        let x = uni(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
        let rshape: &[usize] = if channel { &[1, 1, 4, 4] } else { &[1, 3, 1, 1] };
        let r = uni(&mut rng, rshape, -1.0, 1.0);
        run(name, x, &move |t, v| {
            let y = if channel {
                t.pool_channel(v, mode)?
            } else {
                t.pool_spatial(v, mode)?
            };
            Ok(proj(t, y, &r))
        })?;
    }
    {
        let x = uni(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let r = uni(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        run("upsample2x", x, &move |t, v| {
            let y = t.upsample2x(v)?;
            Ok(proj(t, y, &r))
        })?;
    }

    // LSTM pixel scan: vary the input map and each parameter kind.
    {
        let c = 2;
        let x = uni(&mut rng, &[1, c, 3, 3], -1.0, 1.0);
        let mk_w = |rng: &mut SeededRng| uni(rng, &[c, 2 * c], -0.8, 0.8);
        let mk_b = |rng: &mut SeededRng| uni(rng, &[c], -0.5, 0.5);
        let params: Vec<Tensor> = (0..4)
            .flat_map(|_| {
                let w = mk_w(&mut rng);
                let b = mk_b(&mut rng);
                [w, b]
            })
            .collect();
        let r = uni(&mut rng, &[1, c, 3, 3], -1.0, 1.0);

        let build_scan = |t: &mut Tape,
                          x: VarId,
                          fixed: &[Tensor],
                          vary_slot: Option<(usize, VarId)>|
         -> Result<VarId> {
            let mut ids = [x; 8];
            for (i, p) in fixed.iter().enumerate() {
                ids[i] = match vary_slot {
                    Some((slot, v)) if slot == i => v,
                    _ => t.constant(p.clone()),
                };
            }
            t.lstm_scan(x, ids, false)
        };

        let (ps, rs, xs) = (params.clone(), r.clone(), x.clone());
        run("lstm_scan_x", x.clone(), &move |t, v| {
            let y = build_scan(t, v, &ps, None)?;
            Ok(proj(t, y, &rs))
        })?;
        for (slot, pname) in [
            (0usize, "lstm_scan_wf"),
            (1, "lstm_scan_bf"),
            (2, "lstm_scan_wi"),
            (3, "lstm_scan_bi"),
            (4, "lstm_scan_wc"),
            (5, "lstm_scan_bc"),
            (6, "lstm_scan_wo"),
            (7, "lstm_scan_bo"),
        ] {
            let (ps, rs, xs) = (params.clone(), r.clone(), xs.clone());
            run(pname, params[slot].clone(), &move |t, v| {
                let xv = t.constant(xs.clone());
                let y = build_scan(t, xv, &ps, Some((slot, v)))?;
                Ok(proj(t, y, &rs))
            })?;
        }
    }

    // Kernel assembly: vary the mixing weights and one unit.
    {
        let layout = KernelLayout::new([4, 2, 2, 2], [2, 1, 2, 2])?;
        let n_units = 3;
        let alpha = uni(&mut rng, &[layout.positions(), n_units], -1.0, 1.0);
        let units: Vec<Tensor> = (0..n_units)
            .map(|_| uni(&mut rng, &layout.unit, -1.0, 1.0))
            .collect();
        let r = uni(&mut rng, &layout.layer.to_vec(), -1.0, 1.0);
        let (us, rs) = (units.clone(), r.clone());
        run("assemble_alpha", alpha.clone(), &move |t, v| {
            let ids: Vec<VarId> = us.iter().map(|u| t.constant(u.clone())).collect();
            let y = t.assemble_kernels(v, &ids, layout)?;
            Ok(proj(t, y, &rs))
        })?;
        let a = alpha.clone();
        run("assemble_unit", units[1].clone(), &move |t, v| {
            let av = t.constant(a.clone());
            let mut ids: Vec<VarId> = Vec::new();
            for (j, u) in units.iter().enumerate() {
                if j == 1 {
                    ids.push(v);
                } else {
                    ids.push(t.constant(u.clone()));
                }
            }
            let y = t.assemble_kernels(av, &ids, layout)?;
            Ok(proj(t, y, &r))
        })?;
    }

    // Weighted cross-entropy over logits.
    {
        let x = uni(&mut rng, &[2, 2, 2, 2], -2.0, 2.0);
        let target: Vec<u8> = (0..8).map(|_| rng.gen_range(0..2u8)).collect();
        run("wce", x, &move |t, v| t.wce(v, &target, [0.7, 1.3]))?;
    }

    // Weighted cross-entropy with ignored pixels (class 2 contributes
    // nothing and must get zero gradient).
    {
        let x = uni(&mut rng, &[2, 2, 2, 2], -2.0, 2.0);
        let target: Vec<u8> = (0..8).map(|_| rng.gen_range(0..3u8)).collect();
        run("wce_ignore", x, &move |t, v| t.wce(v, &target, [0.7, 1.3]))?;
    }

    // Fan-out: the same leaf feeds two consumers.
    {
        let x = uni(&mut rng, &[2, 3], -1.5, 1.5);
        run("fan_out", x, &|t, v| {
            let sq = t.square(v);
            let s1 = t.sum(sq);
            let s2 = t.sum(v);
            Ok(t.add(s1, s2))
        })?;
    }

    Ok(out)
}

/// Gradient checks for the loss family: every box-loss kind on an
/// overlapping, seed-jittered pair, both quality-weight conventions, the
/// classification loss with and without ignored pixels, and the offset
/// decode composed with the default box loss.
pub fn loss_gradient_suite(seed: u64, eps: f64) -> Result<Vec<CheckCase>> {
    use crate::losses::{box_loss_graph, FocalerParams, LossConfig, LossKind, PIoUv2Params};

    let mut rng = seeded(seed);
    let mut out = Vec::new();

    // Overlapping valid pair with margins far above the probe step.
    let jitter = |rng: &mut SeededRng| rng.gen_range(-0.3..0.3);
    let gt = Tensor::new(
        &[4],
        alloc::vec![
            2.0 + jitter(&mut rng),
            2.0 + jitter(&mut rng),
            8.0 + jitter(&mut rng),
            7.0 + jitter(&mut rng),
        ],
    )?;
    let pred = Tensor::new(
        &[4],
        alloc::vec![
            1.5 + jitter(&mut rng),
            2.5 + jitter(&mut rng),
            7.0 + jitter(&mut rng),
            8.5 + jitter(&mut rng),
        ],
    )?;

    let kinds: [(&'static str, LossConfig); 7] = [
        (
            "iou",
            LossConfig {
                kind: LossKind::Iou,
                ..LossConfig::default()
            },
        ),
        (
            "ciou",
            LossConfig {
                kind: LossKind::Ciou,
                ..LossConfig::default()
            },
        ),
        (
            "focaler",
            LossConfig {
                kind: LossKind::Focaler,
                focaler: FocalerParams { d: 0.1, u: 0.9 },
                ..LossConfig::default()
            },
        ),
        (
            "piou",
            LossConfig {
                kind: LossKind::Piou,
                ..LossConfig::default()
            },
        ),
        (
            "piouv2_strict",
            LossConfig {
                kind: LossKind::Piouv2,
                ..LossConfig::default()
            },
        ),
        (
            "piouv2_lineage",
            LossConfig {
                kind: LossKind::Piouv2,
                v2: PIoUv2Params {
                    lambda: 1.3,
                    strict_outer_three: false,
                },
                ..LossConfig::default()
            },
        ),
        (
            "fpiou",
            LossConfig {
                kind: LossKind::FpIou,
                ..LossConfig::default()
            },
        ),
    ];
    for (name, cfg) in kinds {
        let gt = gt.clone();
        let rel_err = finite_diff_check(
            move |t, v| {
                let g = t.constant(gt.clone());
                box_loss_graph(t, v, g, &cfg)
            },
            &pred,
            eps,
        )?;
        out.push(CheckCase { name, rel_err });
    }

    // Classification loss over a 4×4 map, with and without ignored pixels.
    for (name, classes) in [("wce", 2u8), ("wce_ignore", 3u8)] {
        let x = uni(&mut rng, &[1, 2, 4, 4], -2.0, 2.0);
        let target: Vec<u8> = (0..16).map(|_| rng.gen_range(0..classes)).collect();
        let rel_err = finite_diff_check(
            move |t, v| t.wce(v, &target, [1.0, 12.0]),
            &x,
            eps,
        )?;
        out.push(CheckCase {
            name,
            rel_err,
        });
    }

    // Offsets → box decode → default loss, as used by the detector head.
    {
        let offsets = uni(&mut rng, &[1, 4, 2, 2], -0.5, 0.5);
        let gt = Tensor::new(&[4], alloc::vec![1.0, 1.0, 11.0, 7.0])?;
        let rel_err = finite_diff_check(
            move |t, v| {
                let pred = crate::train::decode_box_graph(t, v, 0, 1, 4.0)?;
                let g = t.constant(gt.clone());
                box_loss_graph(t, pred, g, &LossConfig::default())
            },
            &offsets,
            eps,
        )?;
        out.push(CheckCase {
            name: "decode_fpiou",
            rel_err,
        });
    }

    Ok(out)
}

/// Gradient checks through the dynamic convolution: input, kernel units and
/// scorer parameters, at a mid-anneal temperature and at the fully annealed
/// score-only endpoint.
pub fn kwconv_gradient_suite(seed: u64, eps: f64) -> Result<Vec<CheckCase>> {
    use crate::warehouse::{kwconv_forward, KernelUnitShape, KwLayer, NafConfig};

    let mut rng = seeded(seed);
    let mut out = Vec::new();

    let unit = KernelUnitShape {
        out_channels: 1,
        in_channels: 2,
        kh: 3,
        kw: 3,
    };
    let layer = KwLayer::new([2, 2, 3, 3], 1, 1, &unit, 4, 1.0)?;
    let (w_shape, b_rows) = layer.scorer_shapes();
    let naf = NafConfig::default();

    let x = uni(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    let units: Vec<Tensor> = (0..4)
        .map(|_| uni(&mut rng, &unit.tensor_shape(), -1.0, 1.0))
        .collect();
    let scorer_w = uni(&mut rng, &w_shape, -0.5, 0.5);
    let scorer_b = uni(&mut rng, &[b_rows], -0.2, 0.2);
    let r = uni(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);

    // Builds the full layer with the given leaf role; every other tensor is
    // a constant.
    #[derive(Clone, Copy, PartialEq)]
    enum Leaf {
        Input,
        Unit(usize),
        ScorerW,
        ScorerB,
    }
    let mut check = |name: &'static str, leaf: Leaf, epoch: usize| -> Result<()> {
        let (x, units, scorer_w, scorer_b) = (x.clone(), units.clone(), scorer_w.clone(), scorer_b.clone());
        let (layer, naf, unit, r) = (layer.clone(), naf.clone(), unit, r.clone());
        let target = match leaf {
            Leaf::Input => x.clone(),
            Leaf::Unit(i) => units[i].clone(),
            Leaf::ScorerW => scorer_w.clone(),
            Leaf::ScorerB => scorer_b.clone(),
        };
        let rel_err = finite_diff_check(
            move |t, v| {
                let xv = if leaf == Leaf::Input {
                    v
                } else {
                    t.constant(x.clone())
                };
                let uvs: Vec<VarId> = units
                    .iter()
                    .enumerate()
                    .map(|(i, u)| {
                        if leaf == Leaf::Unit(i) {
                            v
                        } else {
                            t.constant(u.clone())
                        }
                    })
                    .collect();
                let wv = if leaf == Leaf::ScorerW {
                    v
                } else {
                    t.constant(scorer_w.clone())
                };
                let bv = if leaf == Leaf::ScorerB {
                    v
                } else {
                    t.constant(scorer_b.clone())
                };
                let y = kwconv_forward(t, xv, &uvs, wv, bv, &layer, &naf, epoch, &unit)?;
                let rv = t.constant(r.clone());
                let p = t.mul(y, rv);
                Ok(t.sum(p))
            },
            &target,
            eps,
        )?;
        out.push(CheckCase { name, rel_err });
        Ok(())
    };

    check("kwconv_input", Leaf::Input, 10)?;
    check("kwconv_unit0", Leaf::Unit(0), 10)?;
    check("kwconv_unit3", Leaf::Unit(3), 10)?;
    check("kwconv_scorer_w", Leaf::ScorerW, 10)?;
    check("kwconv_scorer_b", Leaf::ScorerB, 10)?;
    check("kwconv_scorer_w_annealed", Leaf::ScorerW, 25)?;

    Ok(out)
}

/// Gradient checks through the attention branches: each branch w.r.t. its
/// input and its main parameters, plus the fused module.
pub fn ta_gradient_suite(seed: u64, eps: f64) -> Result<Vec<CheckCase>> {
    use crate::attention::{
        channel_attention, recurrent_branch, spatial_attention, triple_attention,
        ChannelAttentionVars, RecurrentGateVars, SpatialAttentionVars, TripleAttentionParams,
        TripleAttentionVars,
    };

    let mut rng = seeded(seed);
    let mut out = Vec::new();

    let params = TripleAttentionParams::init(4, 2, &mut rng)?;
    let x = uni(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
    let r_gate = uni(&mut rng, &[1, 4, 1, 1], -1.0, 1.0);
    let r_map = uni(&mut rng, &[1, 1, 3, 3], -1.0, 1.0);
    let r_full = uni(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);

    #[derive(Clone, Copy, PartialEq)]
    enum Leaf {
        Input,
        ChannelW1,
        ChannelW2,
        SpatialKernel,
        GateWf,
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Branch {
        Channel,
        Spatial,
        Recurrent,
        Full,
    }
    let mut check = |name: &'static str, branch: Branch, leaf: Leaf| -> Result<()> {
        let params = params.clone();
        let x = x.clone();
        let r = match branch {
            Branch::Channel => r_gate.clone(),
            Branch::Spatial => r_map.clone(),
            Branch::Recurrent | Branch::Full => r_full.clone(),
        };
        let target = match leaf {
            Leaf::Input => x.clone(),
            Leaf::ChannelW1 => params.channel.w1.clone(),
            Leaf::ChannelW2 => params.channel.w2.clone(),
            Leaf::SpatialKernel => params.spatial.kernel.clone(),
            Leaf::GateWf => params.gates.wf.clone(),
        };
        let rel_err = finite_diff_check(
            move |t, v| {
                let mut vars: TripleAttentionVars = params.register(t, false);
                let xv = if leaf == Leaf::Input {
                    v
                } else {
                    t.constant(x.clone())
                };
                match leaf {
                    Leaf::ChannelW1 => vars.channel.w1 = v,
                    Leaf::ChannelW2 => vars.channel.w2 = v,
                    Leaf::SpatialKernel => vars.spatial.kernel = v,
                    Leaf::GateWf => vars.gates.ids[0] = v,
                    Leaf::Input => {}
                }
                let y = match branch {
                    Branch::Channel => {
                        let c: ChannelAttentionVars = vars.channel;
                        channel_attention(t, xv, &c)?
                    }
                    Branch::Spatial => {
                        let s: SpatialAttentionVars = vars.spatial;
                        spatial_attention(t, xv, &s)?
                    }
                    Branch::Recurrent => {
                        let g: RecurrentGateVars = vars.gates;
                        recurrent_branch(t, xv, &g, vars.scan)?
                    }
                    Branch::Full => triple_attention(t, xv, &vars)?,
                };
                let rv = t.constant(r.clone());
                let p = t.mul(y, rv);
                Ok(t.sum(p))
            },
            &target,
            eps,
        )?;
        out.push(CheckCase { name, rel_err });
        Ok(())
    };

    check("ta_channel_input", Branch::Channel, Leaf::Input)?;
    check("ta_channel_w1", Branch::Channel, Leaf::ChannelW1)?;
    check("ta_channel_w2", Branch::Channel, Leaf::ChannelW2)?;
    check("ta_spatial_input", Branch::Spatial, Leaf::Input)?;
    check("ta_spatial_kernel", Branch::Spatial, Leaf::SpatialKernel)?;
    check("ta_recurrent_input", Branch::Recurrent, Leaf::Input)?;
    check("ta_recurrent_wf", Branch::Recurrent, Leaf::GateWf)?;
    check("ta_full_input", Branch::Full, Leaf::Input)?;

    Ok(out)
}
