//! Fused LSTM scan over feature-map pixels.
//!
//! The recurrent attention branch walks every pixel of an N×C×H×W map in a
//! fixed order, feeding the C-vector at each pixel as one LSTM step and
//! writing the hidden state back to that pixel. The whole scan is one tape op
//! so the forward pass can stash the per-step gate activations it needs for
//! backpropagation through time.
//!
//! Gate layout: each weight is C×2C and acts on the concatenation
//! `[h_prev; x_t]` (hidden state first); each bias is C.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Per-step activations saved by the forward scan, flattened per batch item.
/// For every step we keep `[h_prev, c_prev, f, i, ctilde, o, c]`, each of
/// width C, in that order.
pub struct LstmTrace {
    pub per_step: Vec<f64>,
    pub channels: usize,
    pub steps: usize,
}

const TRACE_FIELDS: usize = 7;

impl LstmTrace {
    fn block(&self, n: usize, t: usize) -> &[f64] {
        let w = TRACE_FIELDS * self.channels;
        let base = (n * self.steps + t) * w;
        &self.per_step[base..base + w]
    }
}

fn validate(x: &Tensor, params: [&Tensor; 8]) -> Result<usize> {
    if x.rank() != 4 {
        return Err(Error::RankMismatch {
            op: "lstm_scan input",
            expected: 4,
            got: x.shape().to_vec(),
        });
    }
    let c = x.shape()[1];
    for (i, p) in params.iter().enumerate() {
        let want: &[usize] = if i % 2 == 0 { &[c, 2 * c] } else { &[c] };
        if p.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "lstm_scan parameter",
                left: p.shape().to_vec(),
                right: want.to_vec(),
            });
        }
    }
    Ok(c)
}

/// Pixel visit order: row-major scans y outer / x inner; column-major flips.
fn pixel_at(t: usize, h: usize, w: usize, col_major: bool) -> (usize, usize) {
    if col_major {
        (t % h, t / h)
    } else {
        (t / w, t % w)
    }
}

/// out[c] = Σ_j w[c, j]·z[j] + b[c], with z = [h; xv].
fn gate_preact(w: &Tensor, b: &Tensor, h: &[f64], xv: &[f64], out: &mut [f64]) {
    let c = b.len();
    for o in 0..c {
        let row = &w.data()[o * 2 * c..(o + 1) * 2 * c];
        let mut acc = b.data()[o];
        for j in 0..c {
            acc += row[j] * h[j] + row[c + j] * xv[j];
        }
        out[o] = acc;
    }
}

pub fn lstm_scan_forward(
    x: &Tensor,
    params: [&Tensor; 8],
    col_major: bool,
) -> Result<(Tensor, LstmTrace)> {
    let c = validate(x, params)?;
    let [n_b, _, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let steps = h * w;
    let [wf, bf, wi, bi, wc, bc, wo, bo] = params;

    let mut out = Tensor::zeros(x.shape());
    let mut trace = vec![0.0; n_b * steps * TRACE_FIELDS * c];

    let mut hv = vec![0.0; c];
    let mut cv = vec![0.0; c];
    let mut xv = vec![0.0; c];
    let mut pre = vec![0.0; c];
    for n in 0..n_b {
        hv.iter_mut().for_each(|v| *v = 0.0);
        cv.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..steps {
            let (py, px) = pixel_at(t, h, w, col_major);
            for ch in 0..c {
                xv[ch] = x.at4(n, ch, py, px);
            }
            let base = (n * steps + t) * TRACE_FIELDS * c;
            let (hp_o, cp_o, f_o, i_o, ct_o, o_o, c_o) =
                (base, base + c, base + 2 * c, base + 3 * c, base + 4 * c, base + 5 * c, base + 6 * c);
            trace[hp_o..hp_o + c].copy_from_slice(&hv);
            trace[cp_o..cp_o + c].copy_from_slice(&cv);

            gate_preact(wf, bf, &hv, &xv, &mut pre);
            for ch in 0..c {
                trace[f_o + ch] = fmath::sigmoid(pre[ch]);
            }
            gate_preact(wi, bi, &hv, &xv, &mut pre);
            for ch in 0..c {
                trace[i_o + ch] = fmath::sigmoid(pre[ch]);
            }
            gate_preact(wc, bc, &hv, &xv, &mut pre);
            for ch in 0..c {
                trace[ct_o + ch] = fmath::tanh(pre[ch]);
            }
            gate_preact(wo, bo, &hv, &xv, &mut pre);
            for ch in 0..c {
                trace[o_o + ch] = fmath::sigmoid(pre[ch]);
            }
            for ch in 0..c {
                let cnew = trace[f_o + ch] * cv[ch] + trace[i_o + ch] * trace[ct_o + ch];
                trace[c_o + ch] = cnew;
                cv[ch] = cnew;
                hv[ch] = trace[o_o + ch] * fmath::tanh(cnew);
                let idx = out.idx4(n, ch, py, px);
                out.data_mut()[idx] = hv[ch];
            }
        }
    }
    Ok((
        out,
        LstmTrace {
            per_step: trace,
            channels: c,
            steps,
        },
    ))
}

/// Backpropagation through time over the saved trace. Gradient buffers are
/// ordered like the op's inputs: x then the eight parameters.
#[allow(clippy::too_many_arguments)]
pub fn lstm_scan_backward(
    x: &Tensor,
    params: [&Tensor; 8],
    trace: &LstmTrace,
    col_major: bool,
    grad_out: &Tensor,
    mut grads: [Option<&mut Tensor>; 9],
) {
    let c = trace.channels;
    let [n_b, _, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let steps = trace.steps;
    let [wf, _bf, wi, _bi, wc, _bc, wo, _bo] = params;

    let mut dh = vec![0.0; c];
    let mut dc = vec![0.0; c];
    let mut dz = vec![0.0; 2 * c];
    let mut xv = vec![0.0; c];
    // Pre-activation gate grads for f, i, ctilde, o.
    let mut dg = [vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]];

    for n in 0..n_b {
        dh.iter_mut().for_each(|v| *v = 0.0);
        dc.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..steps).rev() {
            let (py, px) = pixel_at(t, h, w, col_major);
            let blk = trace.block(n, t);
            let (hp, cp, fg, ig, ct, og, cn) = (
                &blk[0..c],
                &blk[c..2 * c],
                &blk[2 * c..3 * c],
                &blk[3 * c..4 * c],
                &blk[4 * c..5 * c],
                &blk[5 * c..6 * c],
                &blk[6 * c..7 * c],
            );
            for ch in 0..c {
                xv[ch] = x.at4(n, ch, py, px);
                dh[ch] += grad_out.at4(n, ch, py, px);
            }
            for ch in 0..c {
                let tc = fmath::tanh(cn[ch]);
                let d_o = dh[ch] * tc;
                dc[ch] += dh[ch] * og[ch] * (1.0 - tc * tc);
                let d_f = dc[ch] * cp[ch];
                let d_i = dc[ch] * ct[ch];
                let d_ct = dc[ch] * ig[ch];
                dg[0][ch] = d_f * fg[ch] * (1.0 - fg[ch]);
                dg[1][ch] = d_i * ig[ch] * (1.0 - ig[ch]);
                dg[2][ch] = d_ct * (1.0 - ct[ch] * ct[ch]);
                dg[3][ch] = d_o * og[ch] * (1.0 - og[ch]);
                // Carry through the cell line to step t−1.
                dc[ch] *= fg[ch];
            }
            dz.iter_mut().for_each(|v| *v = 0.0);
            let ws = [wf, wi, wc, wo];
            for (g, wmat) in ws.iter().enumerate() {
                // Parameter grads: dW += dg ⊗ [h_prev; x_t], db += dg.
                let (w_slot, b_slot) = (1 + 2 * g, 2 + 2 * g);
                for o in 0..c {
                    let gv = dg[g][o];
                    if let Some(gw) = grads[w_slot].as_deref_mut() {
                        let row = &mut gw.data_mut()[o * 2 * c..(o + 1) * 2 * c];
                        for j in 0..c {
                            row[j] += gv * hp[j];
                            row[c + j] += gv * xv[j];
                        }
                    }
                    if let Some(gb) = grads[b_slot].as_deref_mut() {
                        gb.data_mut()[o] += gv;
                    }
                    // Input grads: dz += Wᵀ·dg.
                    let row = &wmat.data()[o * 2 * c..(o + 1) * 2 * c];
                    for j in 0..2 * c {
                        dz[j] += gv * row[j];
                    }
                }
            }
            for ch in 0..c {
                dh[ch] = dz[ch];
            }
            if let Some(gx) = grads[0].as_deref_mut() {
                for ch in 0..c {
                    let idx = gx.idx4(n, ch, py, px);
                    gx.data_mut()[idx] += dz[c + ch];
                }
            }
        }
    }
}
