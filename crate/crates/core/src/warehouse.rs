//! Dynamic convolution with a shared warehouse of kernel units.
//!
//! A convolution layer's kernel is not stored directly; it is assembled at
//! forward time as a per-mixing-position linear combination of `n` small
//! kernel units held in a stage-wide warehouse. The combination weights come
//! from a normalized attention over scores predicted from the pooled input,
//! annealed during early training from a fixed binary assignment toward the
//! learned attention.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{KernelLayout, PoolMode, Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of one kernel unit; every unit extent divides the matching extent
/// of every layer kernel in the owning stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelUnitShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelUnitShape {
    pub fn tensor_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }

    /// Parameters in one unit.
    pub fn count(&self) -> usize {
        self.out_channels * self.in_channels * self.kh * self.kw
    }
}

/// Stage-scoped store of kernel units shared by every layer in the stage.
#[derive(Debug, Clone)]
pub struct Warehouse {
    pub stage_id: usize,
    pub unit_shape: KernelUnitShape,
    pub units: Vec<Tensor>,
}

impl Warehouse {
    pub fn new(stage_id: usize, unit_shape: KernelUnitShape, units: Vec<Tensor>) -> Result<Self> {
        for u in &units {
            if u.shape() != unit_shape.tensor_shape() {
                return Err(Error::ShapeMismatch {
                    op: "warehouse unit",
                    left: u.shape().to_vec(),
                    right: unit_shape.tensor_shape().to_vec(),
                });
            }
        }
        Ok(Self {
            stage_id,
            unit_shape,
            units,
        })
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }
}

/// Attention configuration: anneal length and the unit budget that shapes
/// the initial binary masks.
#[derive(Debug, Clone, Copy)]
pub struct NafConfig {
    pub tau_epochs: usize,
    pub budget_b: f64,
}

impl Default for NafConfig {
    fn default() -> Self {
        Self {
            tau_epochs: 20,
            budget_b: 1.0,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    let (mut a, mut b) = (a, b);
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Splits a layer kernel `[K, C, kh, kw]` evenly along the output-channel
/// axis into `m` non-overlapping units.
pub fn partition_kernel(kernel_shape: [usize; 4], m: usize) -> Result<Vec<KernelUnitShape>> {
    if m == 0 {
        return Err(Error::NotDivisible {
            what: "output channels",
            extent: kernel_shape[0],
            by: 0,
        });
    }
    if kernel_shape[0] % m != 0 {
        return Err(Error::NotDivisible {
            what: "output channels",
            extent: kernel_shape[0],
            by: m,
        });
    }
    let unit = KernelUnitShape {
        out_channels: kernel_shape[0] / m,
        in_channels: kernel_shape[1],
        kh: kernel_shape[2],
        kw: kernel_shape[3],
    };
    Ok(vec![unit; m])
}

/// Common unit shape for a stage of layer kernels.
///
/// When every layer has the same kernel shape the unit is that whole shape
/// (the stage degenerates to a per-layer warehouse). Otherwise the unit is
/// 1×1 spatially with both channel extents equal to the greatest common
/// divisor of all channel extents across the stage — the only reduction that
/// divides every layer on every axis (e.g. {3×3×64×128, 3×3×128×256} →
/// 1×1×64×64).
pub fn stage_unit_shape(layer_kernel_shapes: &[[usize; 4]]) -> Result<KernelUnitShape> {
    let Some(first) = layer_kernel_shapes.first() else {
        return Err(Error::Invalid(alloc::format!(
            "stage_unit_shape: empty layer list"
        )));
    };
    if layer_kernel_shapes.iter().all(|s| s == first) {
        return Ok(KernelUnitShape {
            out_channels: first[0],
            in_channels: first[1],
            kh: first[2],
            kw: first[3],
        });
    }
    let mut g = 0usize;
    for s in layer_kernel_shapes {
        g = gcd(g, s[0]);
        g = gcd(g, s[1]);
    }
    Ok(KernelUnitShape {
        out_channels: g,
        in_channels: g,
        kh: 1,
        kw: 1,
    })
}

/// Block layout of a layer kernel over a stage's unit shape.
pub fn layer_layout(layer_shape: [usize; 4], unit: &KernelUnitShape) -> Result<KernelLayout> {
    KernelLayout::new(layer_shape, unit.tensor_shape())
}

/// Number of mixing positions (unit-sized blocks) in a layer kernel.
pub fn num_mixing(layer_shape: [usize; 4], unit: &KernelUnitShape) -> Result<usize> {
    Ok(layer_layout(layer_shape, unit)?.positions())
}

/// Anneal temperature: linear decay from 1 at epoch 0 to 0 at `tau_epochs`.
pub fn temperature(epoch: usize, cfg: &NafConfig) -> f64 {
    if cfg.tau_epochs == 0 {
        return 0.0;
    }
    (1.0 - epoch as f64 / cfg.tau_epochs as f64).max(0.0)
}

/// Normalized attention: row i of the learned part is z_i / Σ_j |z_ij|
/// (signs preserved, so negative weights are possible), blended with the
/// binary mask as α = (1−τ)·normalized + τ·β.
pub fn naf(z: &Tensor, tau: f64, beta: &Tensor) -> Result<Tensor> {
    if z.shape() != beta.shape() || z.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "naf",
            left: z.shape().to_vec(),
            right: beta.shape().to_vec(),
        });
    }
    if tau >= 1.0 {
        return Ok(beta.clone());
    }
    let (rows, n) = (z.shape()[0], z.shape()[1]);
    let mut out = Tensor::zeros(z.shape());
    for i in 0..rows {
        let row = &z.data()[i * n..(i + 1) * n];
        let denom: f64 = row.iter().map(|v| v.abs()).sum();
        if denom == 0.0 {
            return Err(Error::ZeroScoreRow { row: i });
        }
        for j in 0..n {
            out.data_mut()[i * n + j] =
                (1.0 - tau) * row[j] / denom + tau * beta.data()[i * n + j];
        }
    }
    Ok(out)
}

/// Tape version of [`naf`]; differentiable w.r.t. `z`.
pub fn naf_graph(tape: &mut Tape, z: VarId, tau: f64, beta: VarId) -> Result<VarId> {
    let zshape = tape.value(z).shape().to_vec();
    if tape.value(beta).shape() != zshape.as_slice() || zshape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "naf",
            left: zshape,
            right: tape.value(beta).shape().to_vec(),
        });
    }
    if tau >= 1.0 {
        return Ok(tape.scale(beta, 1.0));
    }
    let (rows, n) = (zshape[0], zshape[1]);
    for i in 0..rows {
        let denom: f64 = tape.value(z).data()[i * n..(i + 1) * n]
            .iter()
            .map(|v| v.abs())
            .sum();
        if denom == 0.0 {
            return Err(Error::ZeroScoreRow { row: i });
        }
    }
    let az = tape.abs(z);
    let denom = tape.sum_last(az);
    let denom_full = tape.expand(denom, &zshape)?;
    let inv = tape.recip(denom_full);
    let normalized = tape.mul(z, inv);
    let scaled = tape.scale(normalized, 1.0 - tau);
    let masked = tape.scale(beta, tau);
    Ok(tape.add(scaled, masked))
}

/// Deterministic binary masks for a layer with `num_mixing` positions over
/// `n` units under budget `b`:
/// with `b ≥ 1` position i gets exclusive unit i (requires n ≥ num_mixing);
/// with `b < 1` only the first ⌊b·num_mixing⌋ positions get a unit (distinct
/// ones), the rest stay all-zero so each unit serves at most one position.
pub fn init_masks(num_mixing: usize, n: usize, b: f64) -> Result<Tensor> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::Invalid(alloc::format!(
            "mask budget must be a positive finite real"
        )));
    }
    let assigned = if b >= 1.0 {
        if n < num_mixing {
            return Err(Error::Invalid(alloc::format!(
                "budget {b} needs one exclusive unit per mixing position: n={n} < {num_mixing}"
            )));
        }
        num_mixing
    } else {
        let k = (b * num_mixing as f64) as usize;
        k.min(n)
    };
    let mut beta = Tensor::zeros(&[num_mixing, n]);
    for i in 0..assigned {
        beta.data_mut()[i * n + i] = 1.0;
    }
    Ok(beta)
}

/// One dynamic-convolution layer: geometry, its binary mask and the scorer
/// that maps pooled input features to unit scores.
#[derive(Debug, Clone)]
pub struct KwLayer {
    pub layer_shape: [usize; 4],
    pub stride: usize,
    pub padding: usize,
    /// Binary mask, `positions × n`.
    pub beta: Tensor,
}

impl KwLayer {
    pub fn new(
        layer_shape: [usize; 4],
        stride: usize,
        padding: usize,
        unit: &KernelUnitShape,
        n: usize,
        b: f64,
    ) -> Result<Self> {
        let positions = num_mixing(layer_shape, unit)?;
        let beta = init_masks(positions, n, b)?;
        Ok(Self {
            layer_shape,
            stride,
            padding,
            beta,
        })
    }

    pub fn positions(&self) -> usize {
        self.beta.shape()[0]
    }

    /// Scorer parameter shapes for this layer: weight `[positions·n, C]`,
    /// bias `[positions·n]`.
    pub fn scorer_shapes(&self) -> ([usize; 2], usize) {
        let rows = self.beta.shape()[0] * self.beta.shape()[1];
        ([rows, self.layer_shape[1]], rows)
    }
}

/// Full dynamic convolution forward pass on the tape.
///
/// Scores come from a global average pool of the input through the layer's
/// linear scorer; attention is the annealed normalized blend against the
/// layer mask; the kernel is assembled per sample and applied as a plain
/// convolution (no bias). Differentiable w.r.t. the input, the units and the
/// scorer parameters.
#[allow(clippy::too_many_arguments)]
pub fn kwconv_forward(
    tape: &mut Tape,
    input: VarId,
    units: &[VarId],
    scorer_w: VarId,
    scorer_b: VarId,
    layer: &KwLayer,
    cfg: &NafConfig,
    epoch: usize,
    unit: &KernelUnitShape,
) -> Result<VarId> {
    let in_shape = tape.value(input).shape().to_vec();
    if in_shape.len() != 4 {
        return Err(Error::RankMismatch {
            op: "kwconv input",
            expected: 4,
            got: in_shape,
        });
    }
    let n_batch = in_shape[0];
    let (positions, n_units) = (layer.beta.shape()[0], layer.beta.shape()[1]);
    if units.len() != n_units {
        return Err(Error::DataLength {
            expected: n_units,
            got: units.len(),
        });
    }
    let layout = layer_layout(layer.layer_shape, unit)?;
    let tau = temperature(epoch, cfg);

    // Scores per sample: pooled N×C×1×1 → N×C → linear → N×(positions·n).
    let pooled = tape.pool_spatial(input, PoolMode::Avg)?;
    let flat = tape.reshape(pooled, &[n_batch, in_shape[1]])?;
    let scores = tape.linear(flat, scorer_w, scorer_b)?;
    let beta = tape.constant(layer.beta.clone());

    let mut per_sample: Option<VarId> = None;
    for s in 0..n_batch {
        let zrow = tape.slice_first(scores, s)?;
        let z = tape.reshape(zrow, &[positions, n_units])?;
        let alpha = naf_graph(tape, z, tau, beta)?;
        let kernel = tape.assemble_kernels(alpha, units, layout)?;
        let xs = tape.slice_first(input, s)?;
        let y = tape.conv2d(xs, kernel, layer.stride, layer.padding)?;
        per_sample = Some(match per_sample {
            None => y,
            Some(acc) => tape.concat(acc, y, 0)?,
        });
    }
    Ok(per_sample.expect("batch extent is positive"))
}

/// Parameter accounting for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// n · |unit| trainable reals held in the warehouse.
    pub warehouse: usize,
    /// Linear scorer parameters summed over the stage's layers.
    pub scorers: usize,
    /// What plain convolutions with each layer's full kernel would cost.
    pub static_conv: usize,
}

impl ParamCount {
    pub fn total_dynamic(&self) -> usize {
        self.warehouse + self.scorers
    }
}

/// Counts stage parameters: the shared warehouse, per-layer scorers, and the
/// static-convolution baseline for comparison.
pub fn param_count(
    unit: &KernelUnitShape,
    n: usize,
    layer_shapes: &[[usize; 4]],
) -> Result<ParamCount> {
    let mut scorers = 0usize;
    let mut static_conv = 0usize;
    for &shape in layer_shapes {
        let positions = num_mixing(shape, unit)?;
        let rows = positions * n;
        scorers += rows * shape[1] + rows;
        static_conv += shape.iter().product::<usize>();
    }
    Ok(ParamCount {
        warehouse: n * unit.count(),
        scorers,
        static_conv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_conservative_and_identity_at_m1() {
        let shape = [8, 3, 3, 3];
        let whole = partition_kernel(shape, 1).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].tensor_shape(), shape);

        let units = partition_kernel(shape, 4).unwrap();
        assert_eq!(units.len(), 4);
        let total: usize = units.iter().map(|u| u.count()).sum();
        assert_eq!(total, shape.iter().product::<usize>());
        assert!(partition_kernel(shape, 3).is_err());
    }

    #[test]
    fn temperature_decays_linearly_and_clamps() {
        let cfg = NafConfig::default();
        assert_eq!(temperature(0, &cfg), 1.0);
        assert_eq!(temperature(10, &cfg), 0.5);
        assert_eq!(temperature(20, &cfg), 0.0);
        assert_eq!(temperature(500, &cfg), 0.0);
    }

    #[test]
    fn naf_matches_hand_example() {
        let z = Tensor::new(&[1, 3], vec![1.0, -1.0, 2.0]).unwrap();
        let beta = Tensor::zeros(&[1, 3]);
        let a = naf(&z, 0.0, &beta).unwrap();
        assert_eq!(a.data(), &[0.25, -0.25, 0.5]);
    }

    #[test]
    fn naf_rejects_zero_row_before_full_anneal() {
        let z = Tensor::zeros(&[2, 3]);
        let beta = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            naf(&z, 0.5, &beta),
            Err(Error::ZeroScoreRow { row: 0 })
        ));
        // At tau = 1 the mask wins outright and zero scores are fine.
        assert!(naf(&z, 1.0, &beta).is_ok());
    }

    #[test]
    fn masks_follow_budget() {
        let b1 = init_masks(3, 3, 1.0).unwrap();
        assert_eq!(b1.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

        let wide = init_masks(4, 8, 1.0).unwrap();
        for i in 0..4 {
            let row = &wide.data()[i * 8..(i + 1) * 8];
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        for j in 0..8 {
            let col: f64 = (0..4).map(|i| wide.data()[i * 8 + j]).sum();
            assert!(col <= 1.0);
        }

        let half = init_masks(4, 8, 0.5).unwrap();
        let hot_rows = (0..4)
            .filter(|&i| half.data()[i * 8..(i + 1) * 8].iter().sum::<f64>() > 0.0)
            .count();
        assert_eq!(hot_rows, 2);

        assert!(init_masks(5, 3, 1.0).is_err());
    }

    #[test]
    fn stage_unit_shape_follows_both_rules() {
        // Mixed stage: the worked two-layer example.
        let unit =
            stage_unit_shape(&[[128, 64, 3, 3], [256, 128, 3, 3]]).unwrap();
        assert_eq!(unit.tensor_shape(), [64, 64, 1, 1]);
        // Identical shapes keep the full kernel.
        let same = stage_unit_shape(&[[32, 32, 3, 3], [32, 32, 3, 3]]).unwrap();
        assert_eq!(same.tensor_shape(), [32, 32, 3, 3]);
        // Single layer is its own (maximal) unit.
        let single = stage_unit_shape(&[[16, 8, 3, 3]]).unwrap();
        assert_eq!(single.tensor_shape(), [16, 8, 3, 3]);
        assert!(stage_unit_shape(&[]).is_err());
    }
}
