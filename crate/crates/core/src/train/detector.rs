//! A tiny single-scale detector/segmenter for one-channel square images.
//!
//! Topology: three stride-2 4×4 backbone stages (each optionally a dynamic
//! convolution drawing from a per-stage warehouse), a neck that upsamples
//! the last stage, optionally refines it with triple attention, concatenates
//! the middle stage and mixes with a 1×1 convolution, and three 1×1 heads:
//! per-cell objectness logits, box offsets, and a mask logit map upsampled
//! back to input resolution. All output shapes are pure functions of the
//! input size and the fixed stride schedule (4× total to the head grid).

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{triple_attention, TripleAttentionParams, TripleAttentionVars};
use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::losses::BBox;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::warehouse::{
    kwconv_forward, num_mixing, partition_kernel, KernelUnitShape, KwLayer, NafConfig,
};

/// Architecture switches and sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Input images are `size × size`, one channel. Must be a multiple of 8.
    pub input_size: usize,
    /// Output channels of the three backbone stages.
    pub stage_channels: [usize; 3],
    /// Channels after the neck's 1×1 mix.
    pub neck_channels: usize,
    /// Swap every backbone stage convolution for a warehouse convolution.
    pub kwconv: bool,
    /// Refine the upsampled deep feature with triple attention.
    pub ta: bool,
    /// Units a stage kernel is partitioned into (along output channels).
    pub units_per_kernel: usize,
    /// Warehouse size as a multiple of the mixing positions per stage.
    pub unit_factor: usize,
    /// Channel-gate bottleneck reduction for the attention block.
    pub attention_reduction: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_channels: [8, 12, 16],
            neck_channels: 16,
            kwconv: false,
            ta: false,
            units_per_kernel: 4,
            unit_factor: 2,
            attention_reduction: 4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || self.input_size % 8 != 0 {
            return Err(Error::Invalid(alloc::format!(
                "input size must be a multiple of 8 and at least 16, got {}",
                self.input_size
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.neck_channels == 0 {
            return Err(Error::Invalid(alloc::format!("channel extents must be positive")));
        }
        if self.kwconv {
            if self.units_per_kernel == 0 || self.unit_factor == 0 {
                return Err(Error::Invalid(alloc::format!(
                    "warehouse geometry must be positive"
                )));
            }
            for &c in &self.stage_channels {
                if c % self.units_per_kernel != 0 {
                    return Err(Error::NotDivisible {
                        what: "stage output channels",
                        extent: c,
                        by: self.units_per_kernel,
                    });
                }
            }
        }
        if self.ta {
            let c3 = self.stage_channels[2];
            if self.attention_reduction == 0 || c3 % self.attention_reduction != 0 {
                return Err(Error::NotDivisible {
                    what: "attention channels",
                    extent: c3,
                    by: self.attention_reduction,
                });
            }
        }
        Ok(())
    }

    /// Head grid extent: the input is downsampled 8× by the backbone and
    /// upsampled 2× by the neck.
    pub fn grid(&self) -> usize {
        self.input_size / 4
    }

    /// Pixels per head cell along each axis.
    pub fn stride(&self) -> f64 {
        4.0
    }

    fn stage_kernel_shape(&self, stage: usize) -> [usize; 4] {
        let in_ch = if stage == 0 {
            1
        } else {
            self.stage_channels[stage - 1]
        };
        // 4×4 stride-2 pad-1 halves even extents exactly.
        [self.stage_channels[stage], in_ch, 4, 4]
    }
}

/// One backbone stage's trainable tensors; every stage also owns a
/// per-channel bias applied after its convolution.
#[derive(Debug, Clone)]
pub enum StageParams {
    Plain {
        kernel: Tensor,
        bias: Tensor,
    },
    Dynamic {
        units: Vec<Tensor>,
        scorer_w: Tensor,
        scorer_b: Tensor,
        bias: Tensor,
        layer: KwLayer,
        unit: KernelUnitShape,
    },
}

/// Tape handles mirroring [`StageParams`].
#[derive(Debug, Clone)]
pub enum StageVars {
    Plain {
        kernel: VarId,
        bias: VarId,
    },
    Dynamic {
        units: Vec<VarId>,
        scorer_w: VarId,
        scorer_b: VarId,
        bias: VarId,
    },
}

/// The full parameter set. Heads and the neck carry (kernel, bias) pairs.
#[derive(Debug, Clone)]
pub struct TinyDetector {
    pub cfg: DetectorConfig,
    pub stages: Vec<StageParams>,
    pub neck: Tensor,
    pub neck_bias: Tensor,
    pub ta: Option<TripleAttentionParams>,
    pub head_obj: Tensor,
    pub head_obj_bias: Tensor,
    pub head_box: Tensor,
    pub head_box_bias: Tensor,
    pub head_mask: Tensor,
    pub head_mask_bias: Tensor,
}

/// Tape handles for one registration of the detector.
#[derive(Debug, Clone)]
pub struct DetectorVars {
    pub stages: Vec<StageVars>,
    pub neck: VarId,
    pub neck_bias: VarId,
    pub ta: Option<TripleAttentionVars>,
    pub head_obj: VarId,
    pub head_obj_bias: VarId,
    pub head_box: VarId,
    pub head_box_bias: VarId,
    pub head_mask: VarId,
    pub head_mask_bias: VarId,
}

impl DetectorVars {
    /// Flat handle list in the same order as [`TinyDetector::params`].
    pub fn ids(&self) -> Vec<VarId> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                StageVars::Plain { kernel, bias } => {
                    out.push(*kernel);
                    out.push(*bias);
                }
                StageVars::Dynamic {
                    units,
                    scorer_w,
                    scorer_b,
                    bias,
                } => {
                    out.extend_from_slice(units);
                    out.push(*scorer_w);
                    out.push(*scorer_b);
                    out.push(*bias);
                }
            }
        }
        out.push(self.neck);
        out.push(self.neck_bias);
        if let Some(ta) = &self.ta {
            out.extend(ta.ids());
        }
        out.push(self.head_obj);
        out.push(self.head_obj_bias);
        out.push(self.head_box);
        out.push(self.head_box_bias);
        out.push(self.head_mask);
        out.push(self.head_mask_bias);
        out
    }
}

/// Raw head outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DetectorOutputs {
    /// `1×2×G×G` objectness logits.
    pub obj: VarId,
    /// `1×4×G×G` box offsets.
    pub boxes: VarId,
    /// `1×2×S×S` mask logits at input resolution.
    pub mask: VarId,
}

/// Kaiming-style uniform bound for layers feeding a rectifier.
fn he_init(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let k = crate::fmath::sqrt(6.0 / fan_in as f64);
    Tensor::rand_uniform(shape, -k, k, rng)
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let k = 1.0 / crate::fmath::sqrt(fan_in as f64);
    Tensor::rand_uniform(shape, -k, k, rng)
}

/// Broadcasts a per-channel bias over an N×C×H×W map.
fn bias_add(tape: &mut Tape, x: VarId, bias: VarId) -> Result<VarId> {
    let shape = tape.value(x).shape().to_vec();
    let c = shape[1];
    let col = tape.reshape(bias, &[1, c, 1, 1])?;
    let full = tape.expand(col, &shape)?;
    Ok(tape.add(x, full))
}

impl TinyDetector {
    /// Fresh parameters; the draw order is fixed (stages, neck, attention,
    /// heads), so equal seeds give equal networks. Hidden convolutions use
    /// rectifier-scaled bounds, heads use smaller ones, biases start at zero.
    pub fn init(cfg: DetectorConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(3);
        for stage in 0..3 {
            let shape = cfg.stage_kernel_shape(stage);
            let fan_in = shape[1] * shape[2] * shape[3];
            let bias = Tensor::zeros(&[shape[0]]);
            if cfg.kwconv {
                let unit = partition_kernel(shape, cfg.units_per_kernel)?[0];
                let positions = num_mixing(shape, &unit)?;
                let n = cfg.unit_factor * positions;
                let units = (0..n)
                    .map(|_| he_init(&unit.tensor_shape(), fan_in, rng))
                    .collect();
                let layer = KwLayer::new(shape, 2, 1, &unit, n, 1.0)?;
                let (w_shape, b_len) = layer.scorer_shapes();
                let scorer_w = uniform_init(&w_shape, shape[1], rng);
                let scorer_b = Tensor::zeros(&[b_len]);
                stages.push(StageParams::Dynamic {
                    units,
                    scorer_w,
                    scorer_b,
                    bias,
                    layer,
                    unit,
                });
            } else {
                stages.push(StageParams::Plain {
                    kernel: he_init(&shape, fan_in, rng),
                    bias,
                });
            }
        }
        let [_, c2, c3] = cfg.stage_channels;
        let neck = he_init(&[cfg.neck_channels, c2 + c3, 1, 1], c2 + c3, rng);
        let ta = if cfg.ta {
            Some(TripleAttentionParams::init(c3, cfg.attention_reduction, rng)?)
        } else {
            None
        };
        let head = |out: usize, rng: &mut SeededRng| {
            uniform_init(&[out, cfg.neck_channels, 1, 1], cfg.neck_channels, rng)
        };
        Ok(Self {
            head_obj: head(2, rng),
            head_obj_bias: Tensor::zeros(&[2]),
            head_box: head(4, rng),
            head_box_bias: Tensor::zeros(&[4]),
            head_mask: head(2, rng),
            head_mask_bias: Tensor::zeros(&[2]),
            neck_bias: Tensor::zeros(&[cfg.neck_channels]),
            cfg,
            stages,
            neck,
            ta,
        })
    }

    /// Snapshot of every trainable tensor, in registration order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for s in &self.stages {
            match s {
                StageParams::Plain { kernel, bias } => {
                    out.push(kernel.clone());
                    out.push(bias.clone());
                }
                StageParams::Dynamic {
                    units,
                    scorer_w,
                    scorer_b,
                    bias,
                    ..
                } => {
                    out.extend(units.iter().cloned());
                    out.push(scorer_w.clone());
                    out.push(scorer_b.clone());
                    out.push(bias.clone());
                }
            }
        }
        out.push(self.neck.clone());
        out.push(self.neck_bias.clone());
        if let Some(ta) = &self.ta {
            out.push(ta.channel.w1.clone());
            out.push(ta.channel.b1.clone());
            out.push(ta.channel.w2.clone());
            out.push(ta.channel.b2.clone());
            out.push(ta.spatial.kernel.clone());
            for t in ta.gates.blocks() {
                out.push(t.clone());
            }
        }
        out.push(self.head_obj.clone());
        out.push(self.head_obj_bias.clone());
        out.push(self.head_box.clone());
        out.push(self.head_box_bias.clone());
        out.push(self.head_mask.clone());
        out.push(self.head_mask_bias.clone());
        out
    }

    /// One stable, human-readable name per [`Self::params`] entry, in the
    /// same order; used to label checkpoint blocks.
    pub fn param_names(&self) -> Vec<alloc::string::String> {
        use alloc::format;
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            match s {
                StageParams::Plain { .. } => {
                    out.push(format!("stage{i}.kernel"));
                    out.push(format!("stage{i}.bias"));
                }
                StageParams::Dynamic { units, .. } => {
                    for u in 0..units.len() {
                        out.push(format!("stage{i}.unit{u}"));
                    }
                    out.push(format!("stage{i}.scorer_w"));
                    out.push(format!("stage{i}.scorer_b"));
                    out.push(format!("stage{i}.bias"));
                }
            }
        }
        out.push(format!("neck.kernel"));
        out.push(format!("neck.bias"));
        if self.ta.is_some() {
            for name in [
                "channel.w1",
                "channel.b1",
                "channel.w2",
                "channel.b2",
                "spatial.kernel",
                "gates.wf",
                "gates.bf",
                "gates.wi",
                "gates.bi",
                "gates.wc",
                "gates.bc",
                "gates.wo",
                "gates.bo",
            ] {
                out.push(format!("ta.{name}"));
            }
        }
        for head in ["head_obj", "head_box", "head_mask"] {
            out.push(format!("{head}.kernel"));
            out.push(format!("{head}.bias"));
        }
        out
    }

    /// Writes back a tensor list produced by [`Self::params`] (same order,
    /// same shapes) after the optimizer updated it.
    pub fn set_params(&mut self, new: &[Tensor]) -> Result<()> {
        let mut slots: Vec<&mut Tensor> = Vec::new();
        for s in &mut self.stages {
            match s {
                StageParams::Plain { kernel, bias } => {
                    slots.push(kernel);
                    slots.push(bias);
                }
                StageParams::Dynamic {
                    units,
                    scorer_w,
                    scorer_b,
                    bias,
                    ..
                } => {
                    for u in units.iter_mut() {
                        slots.push(u);
                    }
                    slots.push(scorer_w);
                    slots.push(scorer_b);
                    slots.push(bias);
                }
            }
        }
        slots.push(&mut self.neck);
        slots.push(&mut self.neck_bias);
        if let Some(ta) = &mut self.ta {
            slots.push(&mut ta.channel.w1);
            slots.push(&mut ta.channel.b1);
            slots.push(&mut ta.channel.w2);
            slots.push(&mut ta.channel.b2);
            slots.push(&mut ta.spatial.kernel);
            slots.push(&mut ta.gates.wf);
            slots.push(&mut ta.gates.bf);
            slots.push(&mut ta.gates.wi);
            slots.push(&mut ta.gates.bi);
            slots.push(&mut ta.gates.wc);
            slots.push(&mut ta.gates.bc);
            slots.push(&mut ta.gates.wo);
            slots.push(&mut ta.gates.bo);
        }
        slots.push(&mut self.head_obj);
        slots.push(&mut self.head_obj_bias);
        slots.push(&mut self.head_box);
        slots.push(&mut self.head_box_bias);
        slots.push(&mut self.head_mask);
        slots.push(&mut self.head_mask_bias);
        if new.len() != slots.len() {
            return Err(Error::DataLength {
                expected: slots.len(),
                got: new.len(),
            });
        }
        for (slot, t) in slots.into_iter().zip(new) {
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_params",
                    left: slot.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Puts every parameter on the tape, as leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DetectorVars {
        let put = |t: &Tensor, tape: &mut Tape| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let stages = self
            .stages
            .iter()
            .map(|s| match s {
                StageParams::Plain { kernel, bias } => StageVars::Plain {
                    kernel: put(kernel, tape),
                    bias: put(bias, tape),
                },
                StageParams::Dynamic {
                    units,
                    scorer_w,
                    scorer_b,
                    bias,
                    ..
                } => StageVars::Dynamic {
                    units: units.iter().map(|u| put(u, tape)).collect(),
                    scorer_w: put(scorer_w, tape),
                    scorer_b: put(scorer_b, tape),
                    bias: put(bias, tape),
                },
            })
            .collect();
        DetectorVars {
            stages,
            neck: put(&self.neck, tape),
            neck_bias: put(&self.neck_bias, tape),
            ta: self.ta.as_ref().map(|p| p.register(tape, trainable)),
            head_obj: put(&self.head_obj, tape),
            head_obj_bias: put(&self.head_obj_bias, tape),
            head_box: put(&self.head_box, tape),
            head_box_bias: put(&self.head_box_bias, tape),
            head_mask: put(&self.head_mask, tape),
            head_mask_bias: put(&self.head_mask_bias, tape),
        }
    }

    /// Full forward pass for one `1×1×S×S` image already on the tape.
    /// `epoch` drives the warehouse attention anneal.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &DetectorVars,
        image: VarId,
        epoch: usize,
        naf: &NafConfig,
    ) -> Result<DetectorOutputs> {
        let shape = tape.value(image).shape().to_vec();
        let s = self.cfg.input_size;
        if shape != [1, 1, s, s] {
            return Err(Error::ShapeMismatch {
                op: "detector input",
                left: shape,
                right: vec![1, 1, s, s],
            });
        }
        // Center intensities around mid-gray so early activations are
        // sign-balanced.
        let mut x = tape.add_const(image, -0.5);
        let mut skip = None;
        for (i, (params, handles)) in self.stages.iter().zip(&vars.stages).enumerate() {
            x = match (params, handles) {
                (StageParams::Plain { .. }, StageVars::Plain { kernel, bias }) => {
                    let y = tape.conv2d(x, *kernel, 2, 1)?;
                    bias_add(tape, y, *bias)?
                }
                (
                    StageParams::Dynamic { layer, unit, .. },
                    StageVars::Dynamic {
                        units,
                        scorer_w,
                        scorer_b,
                        bias,
                    },
                ) => {
                    let y = kwconv_forward(
                        tape, x, units, *scorer_w, *scorer_b, layer, naf, epoch, unit,
                    )?;
                    bias_add(tape, y, *bias)?
                }
                _ => {
                    return Err(Error::Invalid(alloc::format!(
                        "stage parameters and handles disagree"
                    )))
                }
            };
            x = tape.relu(x);
            if i == 1 {
                skip = Some(x);
            }
        }
        let mut up = tape.upsample2x(x)?;
        if let Some(ta) = &vars.ta {
            up = triple_attention(tape, up, ta)?;
        }
        let skip = skip.expect("three stages always pass the middle one");
        let cat = tape.concat(skip, up, 1)?;
        let mixed = tape.conv2d(cat, vars.neck, 1, 0)?;
        let mixed = bias_add(tape, mixed, vars.neck_bias)?;
        let neck = tape.relu(mixed);

        let head = |tape: &mut Tape, k: VarId, b: VarId| -> Result<VarId> {
            let y = tape.conv2d(neck, k, 1, 0)?;
            bias_add(tape, y, b)
        };
        let obj = head(tape, vars.head_obj, vars.head_obj_bias)?;
        let boxes = head(tape, vars.head_box, vars.head_box_bias)?;
        let m = head(tape, vars.head_mask, vars.head_mask_bias)?;
        let m = tape.upsample2x(m)?;
        let mask = tape.upsample2x(m)?;
        Ok(DetectorOutputs { obj, boxes, mask })
    }

    /// Inference on one image: per-cell crack probabilities and decoded
    /// boxes plus the hard mask. No thresholding or suppression here.
    pub fn predict(&self, image: &Tensor, epoch: usize, naf: &NafConfig) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let img = tape.constant(image.clone());
        let out = self.forward(&mut tape, &vars, img, epoch, naf)?;

        let g = self.cfg.grid();
        let stride = self.cfg.stride();
        let obj = tape.value(out.obj);
        let boxes = tape.value(out.boxes);
        let mut prob = Vec::with_capacity(g * g);
        let mut decoded = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                let margin = obj.at4(0, 1, i, j) - obj.at4(0, 0, i, j);
                prob.push(crate::fmath::sigmoid(margin));
                let t = [
                    boxes.at4(0, 0, i, j),
                    boxes.at4(0, 1, i, j),
                    boxes.at4(0, 2, i, j),
                    boxes.at4(0, 3, i, j),
                ];
                decoded.push(decode_box(t, i, j, stride).ok());
            }
        }
        let mask_map = tape.value(out.mask);
        let s = self.cfg.input_size;
        let mut mask = Vec::with_capacity(s * s);
        for i in 0..s {
            for j in 0..s {
                mask.push((mask_map.at4(0, 1, i, j) > mask_map.at4(0, 0, i, j)) as u8);
            }
        }
        Ok(Prediction {
            grid: g,
            prob,
            boxes: decoded,
            mask,
        })
    }
}

/// Per-cell inference results, row-major over the head grid.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub grid: usize,
    /// Crack probability per cell.
    pub prob: Vec<f64>,
    /// Decoded box per cell (`None` on numeric blow-up).
    pub boxes: Vec<Option<BBox>>,
    /// Hard mask at input resolution.
    pub mask: Vec<u8>,
}

/// Default box extent in strides: zero offsets decode to a box of
/// `BOX_SIZE_PRIOR` strides per side, so the exponential only has to learn
/// a correction around the typical object size instead of growing from one
/// stride up.
pub const BOX_SIZE_PRIOR: f64 = 4.0;

/// Decodes one cell's offsets `(tx, ty, tw, th)` into a box: the center
/// moves at most one stride from the cell center, extents are exponential
/// in the offsets around [`BOX_SIZE_PRIOR`] strides.
pub fn decode_box(t: [f64; 4], row: usize, col: usize, stride: f64) -> Result<BBox> {
    let cx = (col as f64 + 0.5) * stride + crate::fmath::tanh(t[0]) * stride;
    let cy = (row as f64 + 0.5) * stride + crate::fmath::tanh(t[1]) * stride;
    let w = crate::fmath::exp(t[2]) * stride * BOX_SIZE_PRIOR;
    let h = crate::fmath::exp(t[3]) * stride * BOX_SIZE_PRIOR;
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Tape twin of [`decode_box`] for one positive cell; returns a `[4]`
/// corner tensor ready for the box losses.
pub fn decode_box_graph(
    tape: &mut Tape,
    boxes: VarId,
    row: usize,
    col: usize,
    stride: f64,
) -> Result<VarId> {
    let t = tape.pixel_vec(boxes, 0, row, col)?;
    let tx = tape.slice_first(t, 0)?;
    let ty = tape.slice_first(t, 1)?;
    let tw = tape.slice_first(t, 2)?;
    let th = tape.slice_first(t, 3)?;

    let tx = tape.tanh(tx);
    let cx = tape.scale(tx, stride);
    let cx = tape.add_const(cx, (col as f64 + 0.5) * stride);
    let ty = tape.tanh(ty);
    let cy = tape.scale(ty, stride);
    let cy = tape.add_const(cy, (row as f64 + 0.5) * stride);

    let w = tape.exp(tw);
    let hw = tape.scale(w, 0.5 * stride * BOX_SIZE_PRIOR);
    let h = tape.exp(th);
    let hh = tape.scale(h, 0.5 * stride * BOX_SIZE_PRIOR);

    let x1 = tape.sub(cx, hw);
    let y1 = tape.sub(cy, hh);
    let x2 = tape.add(cx, hw);
    let y2 = tape.add(cy, hh);
    let xy = tape.concat(x1, y1, 0)?;
    let xyx = tape.concat(xy, x2, 0)?;
    tape.concat(xyx, y2, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn forward_shapes(cfg: DetectorConfig) -> ([usize; 4], [usize; 4], [usize; 4]) {
        let mut rng = seeded(7);
        let det = TinyDetector::init(cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = det.register(&mut tape, true);
        let s = cfg.input_size;
        let img = tape.constant(Tensor::rand_uniform(&[1, 1, s, s], 0.0, 1.0, &mut rng));
        let out = det.forward(&mut tape, &vars, img, 0, &NafConfig::default()).unwrap();
        let grab = |v: VarId, tape: &Tape| {
            let sh = tape.value(v).shape();
            [sh[0], sh[1], sh[2], sh[3]]
        };
        (
            grab(out.obj, &tape),
            grab(out.boxes, &tape),
            grab(out.mask, &tape),
        )
    }

    #[test]
    fn output_shapes_follow_input_size_for_every_variant() {
        for (kw, ta) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = DetectorConfig {
                kwconv: kw,
                ta,
                ..DetectorConfig::default()
            };
            let (obj, boxes, mask) = forward_shapes(cfg);
            assert_eq!(obj, [1, 2, 16, 16]);
            assert_eq!(boxes, [1, 4, 16, 16]);
            assert_eq!(mask, [1, 2, 64, 64]);
        }
        let small = DetectorConfig {
            input_size: 32,
            ..DetectorConfig::default()
        };
        let (obj, boxes, mask) = forward_shapes(small);
        assert_eq!(obj, [1, 2, 8, 8]);
        assert_eq!(boxes, [1, 4, 8, 8]);
        assert_eq!(mask, [1, 2, 32, 32]);
    }

    #[test]
    fn zero_offsets_decode_to_cell_centered_prior_sized_box() {
        let b = decode_box([0.0; 4], 2, 5, 4.0).unwrap();
        let half = 0.5 * 4.0 * BOX_SIZE_PRIOR;
        assert_eq!(
            (b.x1, b.y1, b.x2, b.y2),
            (22.0 - half, 10.0 - half, 22.0 + half, 10.0 + half)
        );

        let mut tape = Tape::new();
        let mut map = Tensor::zeros(&[1, 4, 8, 8]);
        map.data_mut()[0] = 0.3; // (0,0) tx
        let id = tape.constant(map);
        let g = decode_box_graph(&mut tape, id, 0, 0, 4.0).unwrap();
        let v = tape.value(g).data().to_vec();
        let n = decode_box([0.3, 0.0, 0.0, 0.0], 0, 0, 4.0).unwrap();
        assert!((v[0] - n.x1).abs() < 1e-12);
        assert!((v[1] - n.y1).abs() < 1e-12);
        assert!((v[2] - n.x2).abs() < 1e-12);
        assert!((v[3] - n.y2).abs() < 1e-12);
    }

    #[test]
    fn params_roundtrip_preserves_order_and_shapes() {
        for (kw, ta) in [(false, false), (true, true)] {
            let cfg = DetectorConfig {
                kwconv: kw,
                ta,
                ..DetectorConfig::default()
            };
            let mut rng = seeded(1);
            let mut det = TinyDetector::init(cfg, &mut rng).unwrap();
            let mut params = det.params();
            for p in &mut params {
                for v in p.data_mut() {
                    *v += 1.0;
                }
            }
            det.set_params(&params).unwrap();
            let back = det.params();
            assert_eq!(back.len(), params.len());
            for (a, b) in back.iter().zip(&params) {
                assert_eq!(a.shape(), b.shape());
                assert_eq!(a.data(), b.data());
            }
            let mut tape = Tape::new();
            let vars = det.register(&mut tape, true);
            assert_eq!(vars.ids().len(), params.len());
        }
    }

    #[test]
    fn bad_configs_are_rejected()  {
        let odd = DetectorConfig {
            input_size: 60,
            ..DetectorConfig::default()
        };
        assert!(odd.validate().is_err());
        let bad_kw = DetectorConfig {
            kwconv: true,
            stage_channels: [6, 12, 16],
            ..DetectorConfig::default()
        };
        assert!(bad_kw.validate().is_err());
        let bad_ta = DetectorConfig {
            ta: true,
            attention_reduction: 5,
            ..DetectorConfig::default()
        };
        assert!(bad_ta.validate().is_err());
    }
}
