//! Forward/backward compute kernels for the structured tape ops.
//!
//! These are plain functions over [`Tensor`]s; the tape calls them from its
//! dispatch. Backward kernels accumulate into the gradient buffers they are
//! handed (fan-out sums additively).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

pub fn conv2d_output_shape(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
) -> Result<[usize; 4]> {
    if input.len() != 4 {
        return Err(Error::RankMismatch {
            op: "conv2d input",
            expected: 4,
            got: input.to_vec(),
        });
    }
    if kernel.len() != 4 {
        return Err(Error::RankMismatch {
            op: "conv2d kernel",
            expected: 4,
            got: kernel.to_vec(),
        });
    }
    if input[1] != kernel[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            left: input.to_vec(),
            right: kernel.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::Invalid(alloc::format!("conv2d stride must be positive")));
    }
    let geom = |ext: usize, k: usize| -> Option<usize> {
        let padded = ext + 2 * padding;
        if padded < k || (padded - k) % stride != 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    };
    match (geom(input[2], kernel[2]), geom(input[3], kernel[3])) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([input[0], kernel[0], oh, ow]),
        _ => Err(Error::InvalidConvGeometry {
            input: input.to_vec(),
            kernel: kernel.to_vec(),
            stride,
            padding,
        }),
    }
}

/// Cross-correlation (no kernel flip), zero padding.
pub fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let out_shape = conv2d_output_shape(x.shape(), k.shape(), stride, padding)?;
    let [n_b, k_out, oh, ow] = out_shape;
    let (c_in, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&out_shape);
    for n in 0..n_b {
        for ko in 0..k_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at4(n, c, iy as usize, ix as usize)
                                    * k.at4(ko, c, ky, kx);
                            }
                        }
                    }
                    let idx = out.idx4(n, ko, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    grad_x: Option<&mut Tensor>,
    grad_k: Option<&mut Tensor>,
) {
    let (n_b, k_out, oh, ow) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    let (c_in, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut gx = grad_x;
    let mut gk = grad_k;
    for n in 0..n_b {
        for ko in 0..k_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.at4(n, ko, oy, ox);
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                if let Some(gx) = gx.as_deref_mut() {
                                    let idx = gx.idx4(n, c, iy, ix);
                                    gx.data_mut()[idx] += g * k.at4(ko, c, ky, kx);
                                }
                                if let Some(gk) = gk.as_deref_mut() {
                                    let idx = gk.idx4(ko, c, ky, kx);
                                    gk.data_mut()[idx] += g * x.at4(n, c, iy, ix);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel reduction over all H×W positions → N×C×1×1.
pub fn pool_spatial_forward(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::RankMismatch {
            op: "pool_spatial",
            expected: 4,
            got: x.shape().to_vec(),
        });
    }
    let [n_b, c_n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = Tensor::zeros(&[n_b, c_n, 1, 1]);
    for n in 0..n_b {
        for c in 0..c_n {
            let mut acc = match mode {
                PoolMode::Avg => 0.0,
                PoolMode::Max => f64::NEG_INFINITY,
            };
            for y in 0..h {
                for xw in 0..w {
                    let v = x.at4(n, c, y, xw);
                    match mode {
                        PoolMode::Avg => acc += v,
                        PoolMode::Max => acc = acc.max(v),
                    }
                }
            }
            if mode == PoolMode::Avg {
                acc /= (h * w) as f64;
            }
            let idx = out.idx4(n, c, 0, 0);
            out.data_mut()[idx] = acc;
        }
    }
    Ok(out)
}

/// Max ties route the whole gradient to the first maximal element in scan
/// order; avg spreads it uniformly.
pub fn pool_spatial_backward(x: &Tensor, mode: PoolMode, grad_out: &Tensor, grad_x: &mut Tensor) {
    let [n_b, c_n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    for n in 0..n_b {
        for c in 0..c_n {
            let g = grad_out.at4(n, c, 0, 0);
            match mode {
                PoolMode::Avg => {
                    let share = g / ((h * w) as f64);
                    for y in 0..h {
                        for xw in 0..w {
                            let idx = grad_x.idx4(n, c, y, xw);
                            grad_x.data_mut()[idx] += share;
                        }
                    }
                }
                PoolMode::Max => {
                    let (mut by, mut bx, mut best) = (0, 0, f64::NEG_INFINITY);
                    for y in 0..h {
                        for xw in 0..w {
                            let v = x.at4(n, c, y, xw);
                            if v > best {
                                best = v;
                                by = y;
                                bx = xw;
                            }
                        }
                    }
                    let idx = grad_x.idx4(n, c, by, bx);
                    grad_x.data_mut()[idx] += g;
                }
            }
        }
    }
}

/// Per-pixel reduction across the channel axis → N×1×H×W.
pub fn pool_channel_forward(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::RankMismatch {
            op: "pool_channel",
            expected: 4,
            got: x.shape().to_vec(),
        });
    }
    let [n_b, c_n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = Tensor::zeros(&[n_b, 1, h, w]);
    for n in 0..n_b {
        for y in 0..h {
            for xw in 0..w {
                let mut acc = match mode {
                    PoolMode::Avg => 0.0,
                    PoolMode::Max => f64::NEG_INFINITY,
                };
                for c in 0..c_n {
                    let v = x.at4(n, c, y, xw);
                    match mode {
                        PoolMode::Avg => acc += v,
                        PoolMode::Max => acc = acc.max(v),
                    }
                }
                if mode == PoolMode::Avg {
                    acc /= c_n as f64;
                }
                let idx = out.idx4(n, 0, y, xw);
                out.data_mut()[idx] = acc;
            }
        }
    }
    Ok(out)
}

pub fn pool_channel_backward(x: &Tensor, mode: PoolMode, grad_out: &Tensor, grad_x: &mut Tensor) {
    let [n_b, c_n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    for n in 0..n_b {
        for y in 0..h {
            for xw in 0..w {
                let g = grad_out.at4(n, 0, y, xw);
                match mode {
                    PoolMode::Avg => {
                        let share = g / (c_n as f64);
                        for c in 0..c_n {
                            let idx = grad_x.idx4(n, c, y, xw);
                            grad_x.data_mut()[idx] += share;
                        }
                    }
                    PoolMode::Max => {
                        let (mut bc, mut best) = (0, f64::NEG_INFINITY);
                        for c in 0..c_n {
                            let v = x.at4(n, c, y, xw);
                            if v > best {
                                best = v;
                                bc = c;
                            }
                        }
                        let idx = grad_x.idx4(n, bc, y, xw);
                        grad_x.data_mut()[idx] += g;
                    }
                }
            }
        }
    }
}

/// Affine map over the last axis: out[m, o] = Σ_i x[m, i]·w[o, i] + b[o].
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::RankMismatch {
            op: "linear weight",
            expected: 2,
            got: w.shape().to_vec(),
        });
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let x_in = *x.shape().last().unwrap();
    if x_in != d_in {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.shape() != [d_out] {
        return Err(Error::ShapeMismatch {
            op: "linear bias",
            left: b.shape().to_vec(),
            right: alloc::vec![d_out],
        });
    }
    let rows = x.len() / d_in;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = d_out;
    let mut out = Tensor::zeros(&out_shape);
    for m in 0..rows {
        for o in 0..d_out {
            let mut acc = b.data()[o];
            for i in 0..d_in {
                acc += x.data()[m * d_in + i] * w.data()[o * d_in + i];
            }
            out.data_mut()[m * d_out + o] = acc;
        }
    }
    Ok(out)
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    grad_x: Option<&mut Tensor>,
    grad_w: Option<&mut Tensor>,
    grad_b: Option<&mut Tensor>,
) {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / d_in;
    if let Some(gx) = grad_x {
        for m in 0..rows {
            for o in 0..d_out {
                let g = grad_out.data()[m * d_out + o];
                if g == 0.0 {
                    continue;
                }
                for i in 0..d_in {
                    gx.data_mut()[m * d_in + i] += g * w.data()[o * d_in + i];
                }
            }
        }
    }
    if let Some(gw) = grad_w {
        for m in 0..rows {
            for o in 0..d_out {
                let g = grad_out.data()[m * d_out + o];
                if g == 0.0 {
                    continue;
                }
                for i in 0..d_in {
                    gw.data_mut()[o * d_in + i] += g * x.data()[m * d_in + i];
                }
            }
        }
    }
    if let Some(gb) = grad_b {
        for m in 0..rows {
            for o in 0..d_out {
                gb.data_mut()[o] += grad_out.data()[m * d_out + o];
            }
        }
    }
}

/// Nearest-neighbour ×2 upsampling of the spatial axes.
pub fn upsample2x_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::RankMismatch {
            op: "upsample2x",
            expected: 4,
            got: x.shape().to_vec(),
        });
    }
    let [n_b, c_n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = Tensor::zeros(&[n_b, c_n, 2 * h, 2 * w]);
    for n in 0..n_b {
        for c in 0..c_n {
            for y in 0..(2 * h) {
                for xw in 0..(2 * w) {
                    let idx = out.idx4(n, c, y, xw);
                    out.data_mut()[idx] = x.at4(n, c, y / 2, xw / 2);
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward(grad_out: &Tensor, grad_x: &mut Tensor) {
    let [n_b, c_n, h2, w2] = [
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    ];
    for n in 0..n_b {
        for c in 0..c_n {
            for y in 0..h2 {
                for xw in 0..w2 {
                    let idx = grad_x.idx4(n, c, y / 2, xw / 2);
                    grad_x.data_mut()[idx] += grad_out.at4(n, c, y, xw);
                }
            }
        }
    }
}

/// Replicates size-1 axes of `x` up to `target`; other axes must match.
pub fn expand_forward(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    if x.rank() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "expand",
            left: x.shape().to_vec(),
            right: target.to_vec(),
        });
    }
    for (a, t) in x.shape().iter().zip(target.iter()) {
        if *a != *t && *a != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand",
                left: x.shape().to_vec(),
                right: target.to_vec(),
            });
        }
    }
    let mut out = Tensor::zeros(target);
    let n: usize = target.iter().product();
    for i in 0..n {
        out.data_mut()[i] = x.data()[collapse_index(i, target, x.shape())];
    }
    Ok(out)
}

pub fn expand_backward(grad_out: &Tensor, x_shape: &[usize], grad_x: &mut Tensor) {
    let n = grad_out.len();
    for i in 0..n {
        grad_x.data_mut()[collapse_index(i, grad_out.shape(), x_shape)] += grad_out.data()[i];
    }
}

/// Maps a flat index in `big` to the flat index of the matching element in
/// `small`, where `small` has extent 1 on broadcast axes.
fn collapse_index(flat: usize, big: &[usize], small: &[usize]) -> usize {
    let mut rem = flat;
    let mut src = 0usize;
    for axis in 0..big.len() {
        let stride: usize = big[axis + 1..].iter().product();
        let coord = rem / stride;
        rem %= stride;
        let sc = if small[axis] == 1 { 0 } else { coord };
        src = src * small[axis] + sc;
    }
    src
}

/// Concatenates `a` and `b` along `axis`; all other extents must agree.
pub fn concat_forward(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    if a.rank() != b.rank() || axis >= a.rank() {
        return Err(Error::ShapeMismatch {
            op: "concat",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    for (i, (ea, eb)) in a.shape().iter().zip(b.shape().iter()).enumerate() {
        if i != axis && ea != eb {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
    }
    let mut shape = a.shape().to_vec();
    shape[axis] += b.shape()[axis];
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let (ea, eb) = (a.shape()[axis], b.shape()[axis]);
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        let dst = o * (ea + eb) * inner;
        out.data_mut()[dst..dst + ea * inner]
            .copy_from_slice(&a.data()[o * ea * inner..(o + 1) * ea * inner]);
        out.data_mut()[dst + ea * inner..dst + (ea + eb) * inner]
            .copy_from_slice(&b.data()[o * eb * inner..(o + 1) * eb * inner]);
    }
    Ok(out)
}

pub fn concat_backward(
    grad_out: &Tensor,
    a_shape: &[usize],
    b_shape: &[usize],
    axis: usize,
    grad_a: Option<&mut Tensor>,
    grad_b: Option<&mut Tensor>,
) {
    let outer: usize = a_shape[..axis].iter().product();
    let inner: usize = a_shape[axis + 1..].iter().product();
    let (ea, eb) = (a_shape[axis], b_shape[axis]);
    if let Some(ga) = grad_a {
        for o in 0..outer {
            let src = o * (ea + eb) * inner;
            for i in 0..ea * inner {
                ga.data_mut()[o * ea * inner + i] += grad_out.data()[src + i];
            }
        }
    }
    if let Some(gb) = grad_b {
        for o in 0..outer {
            let src = o * (ea + eb) * inner + ea * inner;
            for i in 0..eb * inner {
                gb.data_mut()[o * eb * inner + i] += grad_out.data()[src + i];
            }
        }
    }
}

/// Two-class softmax cross-entropy with class weights, pixel-summed and
/// normalized by the leading (mini-batch) extent.
pub fn wce_forward(logits: &Tensor, target: &[u8], weights: [f64; 2]) -> Result<f64> {
    if logits.rank() < 2 || logits.shape()[1] != 2 {
        return Err(Error::RankMismatch {
            op: "weighted_cross_entropy (needs N×2×...)",
            expected: 2,
            got: logits.shape().to_vec(),
        });
    }
    let n_b = logits.shape()[0];
    let spatial: usize = logits.shape()[2..].iter().product();
    if target.len() != n_b * spatial {
        return Err(Error::DataLength {
            expected: n_b * spatial,
            got: target.len(),
        });
    }
    if target.iter().any(|&t| t > 2) {
        return Err(Error::Invalid(alloc::format!(
            "weighted_cross_entropy: target classes must be 0, 1, or 2 (ignore)"
        )));
    }
    let mut total = 0.0;
    for n in 0..n_b {
        for p in 0..spatial {
            let t = target[n * spatial + p] as usize;
            if t == 2 {
                continue;
            }
            let z0 = logits.data()[(n * 2) * spatial + p];
            let z1 = logits.data()[(n * 2 + 1) * spatial + p];
            let m = z0.max(z1);
            let lse = m + crate::fmath::ln(crate::fmath::exp(z0 - m) + crate::fmath::exp(z1 - m));
            let zt = if t == 0 { z0 } else { z1 };
            total -= weights[t] * (zt - lse);
        }
    }
    Ok(total / n_b as f64)
}

pub fn wce_backward(
    logits: &Tensor,
    target: &[u8],
    weights: [f64; 2],
    grad_scalar: f64,
    grad_logits: &mut Tensor,
) {
    let n_b = logits.shape()[0];
    let spatial: usize = logits.shape()[2..].iter().product();
    let scale = grad_scalar / n_b as f64;
    for n in 0..n_b {
        for p in 0..spatial {
            let t = target[n * spatial + p] as usize;
            if t == 2 {
                continue;
            }
            let i0 = (n * 2) * spatial + p;
            let i1 = (n * 2 + 1) * spatial + p;
            let (z0, z1) = (logits.data()[i0], logits.data()[i1]);
            let m = z0.max(z1);
            let (e0, e1) = (crate::fmath::exp(z0 - m), crate::fmath::exp(z1 - m));
            let p0 = e0 / (e0 + e1);
            let p1 = 1.0 - p0;
            let w = weights[t];
            let (d0, d1) = if t == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
            grad_logits.data_mut()[i0] += scale * w * (p0 - d0);
            grad_logits.data_mut()[i1] += scale * w * (p1 - d1);
        }
    }
}
