//! Three-branch feature attention: channel gating, spatial gating, and an
//! LSTM scan that carries context across the whole image, fused by averaging.

use alloc::vec::Vec;

use crate::autodiff::{PoolMode, Tape, VarId};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Shared two-layer MLP of the channel branch: C → C/r (ReLU) → C.
#[derive(Debug, Clone)]
pub struct ChannelAttentionParams {
    pub r: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// 7×7 convolution over the stacked channel-average and channel-max maps.
#[derive(Debug, Clone)]
pub struct SpatialAttentionParams {
    pub kernel: Tensor,
}

/// Four gate affine maps, each [h_prev; x_t] (width 2C) → C.
#[derive(Debug, Clone)]
pub struct RecurrentGateParams {
    pub wf: Tensor,
    pub bf: Tensor,
    pub wi: Tensor,
    pub bi: Tensor,
    pub wc: Tensor,
    pub bc: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let k = 1.0 / crate::fmath::sqrt(fan_in as f64);
    Tensor::rand_uniform(shape, -k, k, rng)
}

impl ChannelAttentionParams {
    pub fn init(c: usize, r: usize, rng: &mut SeededRng) -> Result<Self> {
        if r == 0 || c % r != 0 {
            return Err(Error::NotDivisible {
                what: "channels",
                extent: c,
                by: r,
            });
        }
        let hidden = c / r;
        Ok(Self {
            r,
            w1: uniform_init(&[hidden, c], c, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: uniform_init(&[c, hidden], hidden, rng),
            b2: Tensor::zeros(&[c]),
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ChannelAttentionVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ChannelAttentionVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }
}

impl SpatialAttentionParams {
    pub fn init(rng: &mut SeededRng) -> Self {
        Self {
            kernel: uniform_init(&[1, 2, 7, 7], 2 * 7 * 7, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> SpatialAttentionVars {
        SpatialAttentionVars {
            kernel: if trainable {
                tape.leaf(self.kernel.clone())
            } else {
                tape.constant(self.kernel.clone())
            },
        }
    }
}

impl RecurrentGateParams {
    pub fn init(c: usize, rng: &mut SeededRng) -> Self {
        let mut w = || uniform_init(&[c, 2 * c], 2 * c, rng);
        let wf = w();
        let wi = w();
        let wc = w();
        let wo = w();
        Self {
            wf,
            bf: Tensor::zeros(&[c]),
            wi,
            bi: Tensor::zeros(&[c]),
            wc,
            bc: Tensor::zeros(&[c]),
            wo,
            bo: Tensor::zeros(&[c]),
        }
    }

    pub fn blocks(&self) -> [&Tensor; 8] {
        [
            &self.wf, &self.bf, &self.wi, &self.bi, &self.wc, &self.bc, &self.wo, &self.bo,
        ]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> RecurrentGateVars {
        let blocks = self.blocks();
        let ids = core::array::from_fn(|slot| {
            if trainable {
                tape.leaf(blocks[slot].clone())
            } else {
                tape.constant(blocks[slot].clone())
            }
        });
        RecurrentGateVars { ids }
    }
}

/// Tape handles for the channel-branch parameters.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttentionVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl ChannelAttentionVars {
    pub fn ids(&self) -> Vec<VarId> {
        alloc::vec![self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialAttentionVars {
    pub kernel: VarId,
}

/// Tape handles in gate order wf, bf, wi, bi, wc, bc, wo, bo.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentGateVars {
    pub ids: [VarId; 8],
}

/// Channel gate M_c = σ(MLP(avg-pool F) + MLP(max-pool F)), shape N×C×1×1.
pub fn channel_attention(
    tape: &mut Tape,
    f: VarId,
    vars: &ChannelAttentionVars,
) -> Result<VarId> {
    let shape = tape.value(f).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::RankMismatch {
            op: "channel_attention",
            expected: 4,
            got: shape,
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if tape.value(vars.w1).shape()[1] != c {
        return Err(Error::ShapeMismatch {
            op: "channel_attention mlp",
            left: tape.value(vars.w1).shape().to_vec(),
            right: shape,
        });
    }
    let mlp = |tape: &mut Tape, pooled: VarId| -> Result<VarId> {
        let flat = tape.reshape(pooled, &[n, c])?;
        let h = tape.linear(flat, vars.w1, vars.b1)?;
        let h = tape.relu(h);
        tape.linear(h, vars.w2, vars.b2)
    };
    let avg = tape.pool_spatial(f, PoolMode::Avg)?;
    let avg_path = mlp(tape, avg)?;
    let max = tape.pool_spatial(f, PoolMode::Max)?;
    let max_path = mlp(tape, max)?;
    let sum = tape.add(avg_path, max_path);
    let gate = tape.sigmoid(sum);
    tape.reshape(gate, &[n, c, 1, 1])
}

/// Spatial gate M_s = σ(conv7×7([channel-avg; channel-max], pad 3)), shape
/// N×1×H×W.
pub fn spatial_attention(
    tape: &mut Tape,
    f: VarId,
    vars: &SpatialAttentionVars,
) -> Result<VarId> {
    let avg = tape.pool_channel(f, PoolMode::Avg)?;
    let max = tape.pool_channel(f, PoolMode::Max)?;
    let stacked = tape.concat(avg, max, 1)?;
    let conv = tape.conv2d(stacked, vars.kernel, 1, 3)?;
    Ok(tape.sigmoid(conv))
}

/// One LSTM gate update on C-vectors; returns (h_t, c_t).
pub fn lstm_step(
    tape: &mut Tape,
    h_prev: VarId,
    c_prev: VarId,
    x_t: VarId,
    vars: &RecurrentGateVars,
) -> Result<(VarId, VarId)> {
    let z = tape.concat(h_prev, x_t, 0)?;
    let [wf, bf, wi, bi, wc, bc, wo, bo] = vars.ids;
    let fz = tape.linear(z, wf, bf)?;
    let f = tape.sigmoid(fz);
    let iz = tape.linear(z, wi, bi)?;
    let i = tape.sigmoid(iz);
    let cz = tape.linear(z, wc, bc)?;
    let ctilde = tape.tanh(cz);
    let keep = tape.mul(f, c_prev);
    let write = tape.mul(i, ctilde);
    let c_t = tape.add(keep, write);
    let oz = tape.linear(z, wo, bo)?;
    let o = tape.sigmoid(oz);
    let tc = tape.tanh(c_t);
    let h_t = tape.mul(o, tc);
    Ok((h_t, c_t))
}

/// Pixel scan order of the recurrent branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanOrder {
    #[default]
    RowMajor,
    ColumnMajor,
}

/// Long-range branch: the LSTM visits every pixel in scan order and its
/// hidden states, written back per pixel, form the output map.
pub fn recurrent_branch(
    tape: &mut Tape,
    f: VarId,
    vars: &RecurrentGateVars,
    scan: ScanOrder,
) -> Result<VarId> {
    tape.lstm_scan(f, vars.ids, scan == ScanOrder::ColumnMajor)
}

/// All three branch parameter sets, bundled for convenience.
#[derive(Debug, Clone)]
pub struct TripleAttentionParams {
    pub channel: ChannelAttentionParams,
    pub spatial: SpatialAttentionParams,
    pub gates: RecurrentGateParams,
    pub scan: ScanOrder,
}

impl TripleAttentionParams {
    pub fn init(c: usize, r: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttentionParams::init(c, r, rng)?,
            spatial: SpatialAttentionParams::init(rng),
            gates: RecurrentGateParams::init(c, rng),
            scan: ScanOrder::RowMajor,
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TripleAttentionVars {
        TripleAttentionVars {
            channel: self.channel.register(tape, trainable),
            spatial: self.spatial.register(tape, trainable),
            gates: self.gates.register(tape, trainable),
            scan: self.scan,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TripleAttentionVars {
    pub channel: ChannelAttentionVars,
    pub spatial: SpatialAttentionVars,
    pub gates: RecurrentGateVars,
    pub scan: ScanOrder,
}

impl TripleAttentionVars {
    pub fn ids(&self) -> Vec<VarId> {
        let mut out = self.channel.ids();
        out.push(self.spatial.kernel);
        out.extend_from_slice(&self.gates.ids);
        out
    }
}

/// Fused three-branch refinement:
/// (F⊙M_c + F⊙M_s + recurrent(F)) / 3, shape-preserving.
pub fn triple_attention(tape: &mut Tape, f: VarId, vars: &TripleAttentionVars) -> Result<VarId> {
    let shape = tape.value(f).shape().to_vec();
    let mc = channel_attention(tape, f, &vars.channel)?;
    let mc_full = tape.expand(mc, &shape)?;
    let branch_c = tape.mul(f, mc_full);

    let ms = spatial_attention(tape, f, &vars.spatial)?;
    let ms_full = tape.expand(ms, &shape)?;
    let branch_s = tape.mul(f, ms_full);

    let branch_r = recurrent_branch(tape, f, &vars.gates, vars.scan)?;

    let cs = tape.add(branch_c, branch_s);
    let all = tape.add(cs, branch_r);
    Ok(tape.scale(all, 1.0 / 3.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_mlp_gives_half_gate_everywhere() {
        let c = 4;
        let params = ChannelAttentionParams {
            r: 2,
            w1: Tensor::zeros(&[2, c]),
            b1: Tensor::zeros(&[2]),
            w2: Tensor::zeros(&[c, 2]),
            b2: Tensor::zeros(&[c]),
        };
        let mut tape = Tape::new();
        let mut rng = seeded(3);
        let f = tape.constant(Tensor::rand_uniform(&[2, c, 3, 3], -1.0, 1.0, &mut rng));
        let vars = params.register(&mut tape, false);
        let mc = channel_attention(&mut tape, f, &vars).unwrap();
        assert_eq!(tape.value(mc).shape(), &[2, c, 1, 1]);
        assert!(tape.value(mc).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_spatial_kernel_gives_half_gate() {
        let params = SpatialAttentionParams {
            kernel: Tensor::zeros(&[1, 2, 7, 7]),
        };
        let mut tape = Tape::new();
        let mut rng = seeded(4);
        let f = tape.constant(Tensor::rand_uniform(&[1, 3, 5, 4], -1.0, 1.0, &mut rng));
        let vars = params.register(&mut tape, false);
        let ms = spatial_attention(&mut tape, f, &vars).unwrap();
        assert_eq!(tape.value(ms).shape(), &[1, 1, 5, 4]);
        assert!(tape.value(ms).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_ranges_stay_strictly_inside_unit_interval() {
        let mut rng = seeded(5);
        let c = 4;
        let params = TripleAttentionParams::init(c, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::rand_uniform(&[1, c, 4, 4], -3.0, 3.0, &mut rng));
        let vars = params.register(&mut tape, false);
        let mc = channel_attention(&mut tape, f, &vars.channel).unwrap();
        let ms = spatial_attention(&mut tape, f, &vars.spatial).unwrap();
        for v in tape.value(mc).data().iter().chain(tape.value(ms).data()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn lstm_step_zero_params_matches_closed_form() {
        let c = 3;
        let params = RecurrentGateParams {
            wf: Tensor::zeros(&[c, 2 * c]),
            bf: Tensor::zeros(&[c]),
            wi: Tensor::zeros(&[c, 2 * c]),
            bi: Tensor::zeros(&[c]),
            wc: Tensor::zeros(&[c, 2 * c]),
            bc: Tensor::zeros(&[c]),
            wo: Tensor::zeros(&[c, 2 * c]),
            bo: Tensor::zeros(&[c]),
        };
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::zeros(&[c]));
        let c0 = tape.constant(Tensor::zeros(&[c]));
        let x = tape.constant(Tensor::full(&[c], 0.7));
        let vars = params.register(&mut tape, false);
        let (h1, c1) = lstm_step(&mut tape, h0, c0, x, &vars).unwrap();
        // Gates are σ(0)=0.5, candidate tanh(0)=0 ⇒ cell and hidden stay 0.
        assert!(tape.value(c1).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell_state() {
        let c = 2;
        // Bias +30 on forget (σ→1), −30 on input (σ→0): the cell is memory.
        let params = RecurrentGateParams {
            wf: Tensor::zeros(&[c, 2 * c]),
            bf: Tensor::full(&[c], 30.0),
            wi: Tensor::zeros(&[c, 2 * c]),
            bi: Tensor::full(&[c], -30.0),
            wc: Tensor::zeros(&[c, 2 * c]),
            bc: Tensor::zeros(&[c]),
            wo: Tensor::zeros(&[c, 2 * c]),
            bo: Tensor::zeros(&[c]),
        };
        let mut tape = Tape::new();
        let mut rng = seeded(6);
        let vars = params.register(&mut tape, false);
        let c_init = Tensor::rand_uniform(&[c], -1.0, 1.0, &mut rng);
        let mut h = tape.constant(Tensor::zeros(&[c]));
        let mut cell = tape.constant(c_init.clone());
        for _ in 0..25 {
            let x = tape.constant(Tensor::rand_uniform(&[c], -1.0, 1.0, &mut rng));
            let (hn, cn) = lstm_step(&mut tape, h, cell, x, &vars).unwrap();
            h = hn;
            cell = cn;
        }
        for (got, want) in tape.value(cell).data().iter().zip(c_init.data()) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn single_pixel_branch_equals_one_step() {
        let mut rng = seeded(8);
        let c = 3;
        let params = RecurrentGateParams::init(c, &mut rng);
        let x = Tensor::rand_uniform(&[1, c, 1, 1], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let fx = tape.constant(x.clone());
        let vars = params.register(&mut tape, false);
        let branch = recurrent_branch(&mut tape, fx, &vars, ScanOrder::RowMajor).unwrap();

        let h0 = tape.constant(Tensor::zeros(&[c]));
        let c0 = tape.constant(Tensor::zeros(&[c]));
        let xv = tape.pixel_vec(fx, 0, 0, 0).unwrap();
        let (h1, _) = lstm_step(&mut tape, h0, c0, xv, &vars).unwrap();
        for ch in 0..c {
            let got = tape.value(branch).at4(0, ch, 0, 0);
            let want = tape.value(h1).data()[ch];
            assert!((got - want).abs() < 1e-12);
        }
    }
}
