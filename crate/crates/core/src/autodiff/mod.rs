//! Reverse-mode automatic differentiation on a structured op tape.
//!
//! Every forward operation appends a [`Node`] recording its inputs and the
//! computed value; [`Tape::backward`] walks the nodes in reverse creation
//! order, accumulating adjoints additively so values feeding several
//! consumers receive the sum of their downstream gradients.
//!
//! Op granularity is deliberately mixed: elementwise algebra, reductions and
//! reshapes are primitive nodes, while convolution, pooling, the linear map,
//! the LSTM pixel scan, kernel assembly and weighted cross-entropy are fused
//! nodes with hand-derived backward rules (each checked against finite
//! differences in the test suite).

pub mod check;
pub(crate) mod kernels;
pub(crate) mod lstm;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

pub use check::{
    finite_diff_check, gradient_suite, kwconv_gradient_suite, loss_gradient_suite,
    ta_gradient_suite, CheckCase,
};
pub use kernels::PoolMode;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Abs,
    Recip,
    Atan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Min,
    Max,
}

/// Block geometry for mixing kernel units into a full convolution kernel.
/// `layer` must be divisible by `unit` on every axis; the blocks are
/// enumerated row-major over the four block-grid axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelLayout {
    pub layer: [usize; 4],
    pub unit: [usize; 4],
}

impl KernelLayout {
    pub fn new(layer: [usize; 4], unit: [usize; 4]) -> Result<Self> {
        let names = ["output channels", "input channels", "kernel height", "kernel width"];
        for a in 0..4 {
            if unit[a] == 0 || layer[a] % unit[a] != 0 {
                return Err(Error::NotDivisible {
                    what: names[a],
                    extent: layer[a],
                    by: unit[a],
                });
            }
        }
        Ok(Self { layer, unit })
    }

    /// Number of unit-sized blocks tiling the layer kernel.
    pub fn positions(&self) -> usize {
        (0..4).map(|a| self.layer[a] / self.unit[a]).product()
    }

    fn grid(&self) -> [usize; 4] {
        [
            self.layer[0] / self.unit[0],
            self.layer[1] / self.unit[1],
            self.layer[2] / self.unit[2],
            self.layer[3] / self.unit[3],
        ]
    }

    /// Origin (offset per axis) of block `p` in the layer kernel.
    fn block_origin(&self, p: usize) -> [usize; 4] {
        let g = self.grid();
        let mut rem = p;
        let mut origin = [0usize; 4];
        for a in 0..4 {
            let stride: usize = g[a + 1..].iter().product();
            origin[a] = (rem / stride) * self.unit[a];
            rem %= stride;
        }
        origin
    }
}

enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        input: VarId,
    },
    Scale {
        input: VarId,
        factor: f64,
    },
    AddConst {
        input: VarId,
    },
    Binary {
        kind: BinaryKind,
        lhs: VarId,
        rhs: VarId,
    },
    Sum {
        input: VarId,
    },
    SumLast {
        input: VarId,
    },
    Reshape {
        input: VarId,
    },
    Expand {
        input: VarId,
    },
    Concat {
        lhs: VarId,
        rhs: VarId,
        axis: usize,
    },
    SliceFirst {
        input: VarId,
        index: usize,
    },
    PixelVec {
        input: VarId,
        item: usize,
        row: usize,
        col: usize,
    },
    Linear {
        input: VarId,
        weight: VarId,
        bias: VarId,
    },
    Conv2d {
        input: VarId,
        kernel: VarId,
        stride: usize,
        padding: usize,
    },
    PoolSpatial {
        input: VarId,
        mode: PoolMode,
    },
    PoolChannel {
        input: VarId,
        mode: PoolMode,
    },
    Upsample2x {
        input: VarId,
    },
    LstmScan {
        inputs: [VarId; 9],
        col_major: bool,
        trace: lstm::LstmTrace,
    },
    AssembleKernels {
        alpha: VarId,
        units: Vec<VarId>,
        layout: KernelLayout,
    },
    Wce {
        logits: VarId,
        target: Vec<u8>,
        weights: [f64; 2],
    },
}

impl Op {
    fn inputs(&self, buf: &mut Vec<VarId>) {
        buf.clear();
        match self {
            Op::Leaf => {}
            Op::Unary { input, .. }
            | Op::Scale { input, .. }
            | Op::AddConst { input }
            | Op::Sum { input }
            | Op::SumLast { input }
            | Op::Reshape { input }
            | Op::Expand { input }
            | Op::SliceFirst { input, .. }
            | Op::PixelVec { input, .. }
            | Op::PoolSpatial { input, .. }
            | Op::PoolChannel { input, .. }
            | Op::Upsample2x { input } => buf.push(*input),
            Op::Binary { lhs, rhs, .. } | Op::Concat { lhs, rhs, .. } => {
                buf.push(*lhs);
                buf.push(*rhs);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                buf.push(*input);
                buf.push(*weight);
                buf.push(*bias);
            }
            Op::Conv2d { input, kernel, .. } => {
                buf.push(*input);
                buf.push(*kernel);
            }
            Op::LstmScan { inputs, .. } => buf.extend_from_slice(inputs),
            Op::AssembleKernels { alpha, units, .. } => {
                buf.push(*alpha);
                buf.extend_from_slice(units);
            }
            Op::Wce { logits, .. } => buf.push(*logits),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation, replayable in reverse for
/// gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        let needs_grad = match &op {
            Op::Leaf => false, // set by `leaf`
            other => {
                let mut buf = Vec::new();
                other.inputs(&mut buf);
                buf.iter().any(|id| self.nodes[id.0].needs_grad)
            }
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].needs_grad = true;
        id
    }

    /// Records a value gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> VarId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `id`, if it was computed.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    // ---- elementwise ----

    pub fn unary(&mut self, kind: UnaryKind, input: VarId) -> VarId {
        let value = self.nodes[input.0].value.map(|x| match kind {
            UnaryKind::Sigmoid => fmath::sigmoid(x),
            UnaryKind::Tanh => fmath::tanh(x),
            UnaryKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryKind::Exp => fmath::exp(x),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Recip => 1.0 / x,
            UnaryKind::Atan => fmath::atan(x),
        });
        self.push(value, Op::Unary { kind, input })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: VarId) -> VarId {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn relu(&mut self, x: VarId) -> VarId {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn exp(&mut self, x: VarId) -> VarId {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn abs(&mut self, x: VarId) -> VarId {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn recip(&mut self, x: VarId) -> VarId {
        self.unary(UnaryKind::Recip, x)
    }
    pub fn atan(&mut self, x: VarId) -> VarId {
        self.unary(UnaryKind::Atan, x)
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> VarId {
        let value = self.nodes[x.0].value.map(|v| v * factor);
        self.push(value, Op::Scale { input: x, factor })
    }

    pub fn add_const(&mut self, x: VarId, offset: f64) -> VarId {
        let value = self.nodes[x.0].value.map(|v| v + offset);
        self.push(value, Op::AddConst { input: x })
    }

    /// 1 − x, elementwise.
    pub fn one_minus(&mut self, x: VarId) -> VarId {
        let neg = self.scale(x, -1.0);
        self.add_const(neg, 1.0)
    }

    /// x², elementwise.
    pub fn square(&mut self, x: VarId) -> VarId {
        self.binary(BinaryKind::Mul, x, x)
    }

    pub fn binary(&mut self, kind: BinaryKind, lhs: VarId, rhs: VarId) -> VarId {
        let (a, b) = (&self.nodes[lhs.0].value, &self.nodes[rhs.0].value);
        let value = if a.shape() == b.shape() {
            let mut out = a.clone();
            for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                *o = binary_apply(kind, *o, bv);
            }
            out
        } else if a.is_scalar() {
            let av = a.data()[0];
            b.map(|bv| binary_apply(kind, av, bv))
        } else if b.is_scalar() {
            let bv = b.data()[0];
            a.map(|av| binary_apply(kind, av, bv))
        } else {
            // Shape errors surface as panics here would be hostile; instead
            // record nothing and bubble up through the fallible wrapper.
            return self.binary_err(kind, lhs, rhs);
        };
        self.push(value, Op::Binary { kind, lhs, rhs })
    }

    #[cold]
    fn binary_err(&mut self, kind: BinaryKind, lhs: VarId, rhs: VarId) -> VarId {
        let (a, b) = (
            self.nodes[lhs.0].value.shape().to_vec(),
            self.nodes[rhs.0].value.shape().to_vec(),
        );
        panic!(
            "binary {:?} on incompatible shapes {:?} vs {:?} (only exact match or scalar broadcast)",
            kind, a, b
        );
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn min(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(BinaryKind::Min, a, b)
    }
    pub fn max(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary(BinaryKind::Max, a, b)
    }

    // ---- reductions & shape ----

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        self.push(value, Op::Sum { input: x })
    }

    /// Mean of all elements → scalar.
    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: VarId) -> VarId {
        let t = &self.nodes[x.0].value;
        let last = *t.shape().last().unwrap();
        let rows = t.len() / last;
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let mut out = Tensor::zeros(&shape);
        for r in 0..rows {
            out.data_mut()[r] = t.data()[r * last..(r + 1) * last].iter().sum();
        }
        self.push(out, Op::SumLast { input: x })
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { input: x }))
    }

    pub fn expand(&mut self, x: VarId, target: &[usize]) -> Result<VarId> {
        let value = kernels::expand_forward(&self.nodes[x.0].value, target)?;
        Ok(self.push(value, Op::Expand { input: x }))
    }

    pub fn concat(&mut self, a: VarId, b: VarId, axis: usize) -> Result<VarId> {
        let value =
            kernels::concat_forward(&self.nodes[a.0].value, &self.nodes[b.0].value, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                lhs: a,
                rhs: b,
                axis,
            },
        ))
    }

    /// Selects index `i` along axis 0, keeping the axis with extent 1.
    pub fn slice_first(&mut self, x: VarId, index: usize) -> Result<VarId> {
        let t = &self.nodes[x.0].value;
        let e0 = t.shape()[0];
        if index >= e0 {
            return Err(Error::Invalid(alloc::format!(
                "slice index {index} out of range for extent {e0}"
            )));
        }
        let inner = t.len() / e0;
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let value = Tensor::new(&shape, t.data()[index * inner..(index + 1) * inner].to_vec())?;
        Ok(self.push(value, Op::SliceFirst { input: x, index }))
    }

    /// Extracts the C-vector at one pixel of an N×C×H×W map.
    pub fn pixel_vec(&mut self, x: VarId, item: usize, row: usize, col: usize) -> Result<VarId> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 4 {
            return Err(Error::RankMismatch {
                op: "pixel_vec",
                expected: 4,
                got: t.shape().to_vec(),
            });
        }
        let c_n = t.shape()[1];
        let mut data = Vec::with_capacity(c_n);
        for c in 0..c_n {
            data.push(t.at4(item, c, row, col));
        }
        let value = Tensor::new(&[c_n], data)?;
        Ok(self.push(
            value,
            Op::PixelVec {
                input: x,
                item,
                row,
                col,
            },
        ))
    }

    // ---- fused layers ----

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let value = kernels::linear_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        )?;
        Ok(self.push(
            value,
            Op::Linear {
                input: x,
                weight: w,
                bias: b,
            },
        ))
    }

    pub fn conv2d(&mut self, x: VarId, k: VarId, stride: usize, padding: usize) -> Result<VarId> {
        let value = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[k.0].value,
            stride,
            padding,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: x,
                kernel: k,
                stride,
                padding,
            },
        ))
    }

    pub fn pool_spatial(&mut self, x: VarId, mode: PoolMode) -> Result<VarId> {
        let value = kernels::pool_spatial_forward(&self.nodes[x.0].value, mode)?;
        Ok(self.push(value, Op::PoolSpatial { input: x, mode }))
    }

    pub fn pool_channel(&mut self, x: VarId, mode: PoolMode) -> Result<VarId> {
        let value = kernels::pool_channel_forward(&self.nodes[x.0].value, mode)?;
        Ok(self.push(value, Op::PoolChannel { input: x, mode }))
    }

    pub fn upsample2x(&mut self, x: VarId) -> Result<VarId> {
        let value = kernels::upsample2x_forward(&self.nodes[x.0].value)?;
        Ok(self.push(value, Op::Upsample2x { input: x }))
    }

    /// LSTM scan over pixels; `params` order is wf, bf, wi, bi, wc, bc, wo, bo
    /// (weights C×2C over `[h_prev; x_t]`, biases C).
    pub fn lstm_scan(&mut self, x: VarId, params: [VarId; 8], col_major: bool) -> Result<VarId> {
        let pvals: [&Tensor; 8] = [
            &self.nodes[params[0].0].value,
            &self.nodes[params[1].0].value,
            &self.nodes[params[2].0].value,
            &self.nodes[params[3].0].value,
            &self.nodes[params[4].0].value,
            &self.nodes[params[5].0].value,
            &self.nodes[params[6].0].value,
            &self.nodes[params[7].0].value,
        ];
        let (value, trace) = lstm::lstm_scan_forward(&self.nodes[x.0].value, pvals, col_major)?;
        let inputs = [
            x, params[0], params[1], params[2], params[3], params[4], params[5], params[6],
            params[7],
        ];
        Ok(self.push(
            value,
            Op::LstmScan {
                inputs,
                col_major,
                trace,
            },
        ))
    }

    /// Mixes `units` (each of the layout's unit shape) into a full kernel:
    /// block p of the output is Σ_j alpha[p, j]·units[j].
    pub fn assemble_kernels(
        &mut self,
        alpha: VarId,
        units: &[VarId],
        layout: KernelLayout,
    ) -> Result<VarId> {
        let a = &self.nodes[alpha.0].value;
        let positions = layout.positions();
        if a.rank() != 2 || a.shape()[0] != positions || a.shape()[1] != units.len() {
            return Err(Error::ShapeMismatch {
                op: "assemble_kernels mixing weights",
                left: a.shape().to_vec(),
                right: vec![positions, units.len()],
            });
        }
        for u in units {
            if self.nodes[u.0].value.shape() != layout.unit {
                return Err(Error::ShapeMismatch {
                    op: "assemble_kernels unit",
                    left: self.nodes[u.0].value.shape().to_vec(),
                    right: layout.unit.to_vec(),
                });
            }
        }
        let mut out = Tensor::zeros(&layout.layer);
        let [uk, uc, uh, uw] = layout.unit;
        for p in 0..positions {
            let origin = layout.block_origin(p);
            for (j, u) in units.iter().enumerate() {
                let w = self.nodes[alpha.0].value.data()[p * units.len() + j];
                let unit = &self.nodes[u.0].value;
                for a0 in 0..uk {
                    for a1 in 0..uc {
                        for a2 in 0..uh {
                            for a3 in 0..uw {
                                let dst = out.idx4(
                                    origin[0] + a0,
                                    origin[1] + a1,
                                    origin[2] + a2,
                                    origin[3] + a3,
                                );
                                out.data_mut()[dst] += w * unit.at4(a0, a1, a2, a3);
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::AssembleKernels {
                alpha,
                units: units.to_vec(),
                layout,
            },
        ))
    }

    /// Two-class weighted cross-entropy over N×2×… logits; `target` is the
    /// flat class index per (item, pixel), and the scalar result is the
    /// weighted sum divided by N. Target value 2 marks a pixel as ignored:
    /// it adds no loss and receives no gradient.
    pub fn wce(&mut self, logits: VarId, target: &[u8], weights: [f64; 2]) -> Result<VarId> {
        let v = kernels::wce_forward(&self.nodes[logits.0].value, target, weights)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Wce {
                logits,
                target: target.to_vec(),
                weights,
            },
        ))
    }

    // ---- backward ----

    /// Computes gradients of scalar `loss` w.r.t. every differentiable node.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn ensure(&self, grads: &mut [Option<Tensor>], id: VarId) -> bool {
        if !self.nodes[id.0].needs_grad {
            return false;
        }
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        true
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Unary { kind, input } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let x = &self.nodes[input.0].value;
                let y = &self.nodes[i].value;
                let gx = grads[input.0].as_mut().unwrap();
                for j in 0..gout.len() {
                    let d = match kind {
                        UnaryKind::Sigmoid => {
                            let v = y.data()[j];
                            v * (1.0 - v)
                        }
                        UnaryKind::Tanh => {
                            let v = y.data()[j];
                            1.0 - v * v
                        }
                        UnaryKind::Relu => {
                            if x.data()[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Exp => y.data()[j],
                        UnaryKind::Abs => {
                            let v = x.data()[j];
                            if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Recip => {
                            let v = y.data()[j];
                            -v * v
                        }
                        UnaryKind::Atan => {
                            let v = x.data()[j];
                            1.0 / (1.0 + v * v)
                        }
                    };
                    gx.data_mut()[j] += gout.data()[j] * d;
                }
            }
            Op::Scale { input, factor } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].as_mut().unwrap();
                for j in 0..gout.len() {
                    gx.data_mut()[j] += gout.data()[j] * factor;
                }
            }
            Op::AddConst { input } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].as_mut().unwrap();
                for j in 0..gout.len() {
                    gx.data_mut()[j] += gout.data()[j];
                }
            }
            Op::Binary { kind, lhs, rhs } => {
                let (a, b) = (&self.nodes[lhs.0].value, &self.nodes[rhs.0].value);
                let n = gout.len();
                let aval = |j: usize| {
                    if a.is_scalar() {
                        a.data()[0]
                    } else {
                        a.data()[j]
                    }
                };
                let bval = |j: usize| {
                    if b.is_scalar() {
                        b.data()[0]
                    } else {
                        b.data()[j]
                    }
                };
                // (d/da, d/db) at element j.
                let partials = |j: usize| -> (f64, f64) {
                    match kind {
                        BinaryKind::Add => (1.0, 0.0 + 1.0),
                        BinaryKind::Sub => (1.0, -1.0),
                        BinaryKind::Mul => (bval(j), aval(j)),
                        // Ties route to the left operand so piecewise
                        // constructions take the left segment's derivative.
                        BinaryKind::Min => {
                            if aval(j) <= bval(j) {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        BinaryKind::Max => {
                            if aval(j) >= bval(j) {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    }
                };
                if self.ensure(grads, *lhs) {
                    let scalar_side = a.is_scalar() && n > 1;
                    let ga = grads[lhs.0].as_mut().unwrap();
                    for j in 0..n {
                        let (da, _) = partials(j);
                        let slot = if scalar_side { 0 } else { j };
                        ga.data_mut()[slot] += gout.data()[j] * da;
                    }
                }
                if self.ensure(grads, *rhs) {
                    let scalar_side = b.is_scalar() && n > 1;
                    let gb = grads[rhs.0].as_mut().unwrap();
                    for j in 0..n {
                        let (_, db) = partials(j);
                        let slot = if scalar_side { 0 } else { j };
                        gb.data_mut()[slot] += gout.data()[j] * db;
                    }
                }
            }
            Op::Sum { input } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let g = gout.data()[0];
                let gx = grads[input.0].as_mut().unwrap();
                for v in gx.data_mut() {
                    *v += g;
                }
            }
            Op::SumLast { input } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].as_mut().unwrap();
                let last = *self.nodes[input.0].value.shape().last().unwrap();
                let rows = gx.len() / last;
                for r in 0..rows {
                    let g = gout.data()[r];
                    for j in 0..last {
                        gx.data_mut()[r * last + j] += g;
                    }
                }
            }
            Op::Reshape { input } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].as_mut().unwrap();
                for j in 0..gout.len() {
                    gx.data_mut()[j] += gout.data()[j];
                }
            }
            Op::Expand { input } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let shape = self.nodes[input.0].value.shape().to_vec();
                kernels::expand_backward(gout, &shape, grads[input.0].as_mut().unwrap());
            }
            Op::Concat { lhs, rhs, axis } => {
                let (la, lb) = (
                    self.nodes[lhs.0].value.shape().to_vec(),
                    self.nodes[rhs.0].value.shape().to_vec(),
                );
                let want_a = self.ensure(grads, *lhs);
                let want_b = self.ensure(grads, *rhs);
                if want_a {
                    let ga = grads[lhs.0].take();
                    let mut ga = ga.unwrap();
                    kernels::concat_backward(gout, &la, &lb, *axis, Some(&mut ga), None);
                    grads[lhs.0] = Some(ga);
                }
                if want_b {
                    let gb = grads[rhs.0].take();
                    let mut gb = gb.unwrap();
                    kernels::concat_backward(gout, &la, &lb, *axis, None, Some(&mut gb));
                    grads[rhs.0] = Some(gb);
                }
            }
            Op::SliceFirst { input, index } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].as_mut().unwrap();
                let inner = gout.len();
                for j in 0..inner {
                    gx.data_mut()[index * inner + j] += gout.data()[j];
                }
            }
            Op::PixelVec {
                input,
                item,
                row,
                col,
            } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].as_mut().unwrap();
                for c in 0..gout.len() {
                    let idx = gx.idx4(*item, c, *row, *col);
                    gx.data_mut()[idx] += gout.data()[c];
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let want_x = self.ensure(grads, *input);
                let want_w = self.ensure(grads, *weight);
                let want_b = self.ensure(grads, *bias);
                let (mut gx, mut gw, mut gb) = (None, None, None);
                if want_x {
                    gx = grads[input.0].take();
                }
                if want_w {
                    gw = grads[weight.0].take();
                }
                if want_b {
                    gb = grads[bias.0].take();
                }
                kernels::linear_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    gout,
                    gx.as_mut(),
                    gw.as_mut(),
                    gb.as_mut(),
                );
                if let Some(g) = gx {
                    grads[input.0] = Some(g);
                }
                if let Some(g) = gw {
                    grads[weight.0] = Some(g);
                }
                if let Some(g) = gb {
                    grads[bias.0] = Some(g);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let want_x = self.ensure(grads, *input);
                let want_k = self.ensure(grads, *kernel);
                let (mut gx, mut gk) = (None, None);
                if want_x {
                    gx = grads[input.0].take();
                }
                if want_k {
                    gk = grads[kernel.0].take();
                }
                kernels::conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[kernel.0].value,
                    *stride,
                    *padding,
                    gout,
                    gx.as_mut(),
                    gk.as_mut(),
                );
                if let Some(g) = gx {
                    grads[input.0] = Some(g);
                }
                if let Some(g) = gk {
                    grads[kernel.0] = Some(g);
                }
            }
            Op::PoolSpatial { input, mode } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].take();
                let mut gx = gx.unwrap();
                kernels::pool_spatial_backward(&self.nodes[input.0].value, *mode, gout, &mut gx);
                grads[input.0] = Some(gx);
            }
            Op::PoolChannel { input, mode } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].take();
                let mut gx = gx.unwrap();
                kernels::pool_channel_backward(&self.nodes[input.0].value, *mode, gout, &mut gx);
                grads[input.0] = Some(gx);
            }
            Op::Upsample2x { input } => {
                if !self.ensure(grads, *input) {
                    return;
                }
                let gx = grads[input.0].take();
                let mut gx = gx.unwrap();
                kernels::upsample2x_backward(gout, &mut gx);
                grads[input.0] = Some(gx);
            }
            Op::LstmScan {
                inputs,
                col_major,
                trace,
            } => {
                let mut taken: [Option<Tensor>; 9] =
                    [None, None, None, None, None, None, None, None, None];
                for (slot, id) in inputs.iter().enumerate() {
                    if self.ensure(grads, *id) {
                        taken[slot] = grads[id.0].take();
                    }
                }
                {
                    let mut bufs: [Option<&mut Tensor>; 9] =
                        [None, None, None, None, None, None, None, None, None];
                    for (slot, t) in taken.iter_mut().enumerate() {
                        bufs[slot] = t.as_mut();
                    }
                    let pvals: [&Tensor; 8] = [
                        &self.nodes[inputs[1].0].value,
                        &self.nodes[inputs[2].0].value,
                        &self.nodes[inputs[3].0].value,
                        &self.nodes[inputs[4].0].value,
                        &self.nodes[inputs[5].0].value,
                        &self.nodes[inputs[6].0].value,
                        &self.nodes[inputs[7].0].value,
                        &self.nodes[inputs[8].0].value,
                    ];
                    lstm::lstm_scan_backward(
                        &self.nodes[inputs[0].0].value,
                        pvals,
                        trace,
                        *col_major,
                        gout,
                        bufs,
                    );
                }
                for (slot, id) in inputs.iter().enumerate() {
                    if let Some(t) = taken[slot].take() {
                        grads[id.0] = Some(t);
                    }
                }
            }
            Op::AssembleKernels {
                alpha,
                units,
                layout,
            } => {
                let n_units = units.len();
                let [uk, uc, uh, uw] = layout.unit;
                let positions = layout.positions();
                let want_alpha = self.ensure(grads, *alpha);
                for p in 0..positions {
                    let origin = layout.block_origin(p);
                    for (j, u) in units.iter().enumerate() {
                        let w = self.nodes[alpha.0].value.data()[p * n_units + j];
                        let unit = &self.nodes[u.0].value;
                        let mut dot = 0.0;
                        let want_unit = self.ensure(grads, *u);
                        for a0 in 0..uk {
                            for a1 in 0..uc {
                                for a2 in 0..uh {
                                    for a3 in 0..uw {
                                        let g = gout.at4(
                                            origin[0] + a0,
                                            origin[1] + a1,
                                            origin[2] + a2,
                                            origin[3] + a3,
                                        );
                                        dot += g * unit.at4(a0, a1, a2, a3);
                                        if want_unit {
                                            let gu = grads[u.0].as_mut().unwrap();
                                            let idx = gu.idx4(a0, a1, a2, a3);
                                            gu.data_mut()[idx] += w * g;
                                        }
                                    }
                                }
                            }
                        }
                        if want_alpha {
                            grads[alpha.0].as_mut().unwrap().data_mut()[p * n_units + j] += dot;
                        }
                    }
                }
            }
            Op::Wce {
                logits,
                target,
                weights,
            } => {
                if !self.ensure(grads, *logits) {
                    return;
                }
                let gl = grads[logits.0].take();
                let mut gl = gl.unwrap();
                kernels::wce_backward(
                    &self.nodes[logits.0].value,
                    target,
                    *weights,
                    gout.data()[0],
                    &mut gl,
                );
                grads[logits.0] = Some(gl);
            }
        }
    }
}

fn binary_apply(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Min => {
            if a <= b {
                a
            } else {
                b
            }
        }
        BinaryKind::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
    }
}
