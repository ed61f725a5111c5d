//! Convolution down-scaling: a pyramid of strided convolution blocks that
//! reduces `Z` (`L×d`) to a single `1×d` sequence vector.

use rand::Rng;

use crate::encoder::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Planned geometry of the pyramid for one input length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSchedule {
    pub input_len: usize,
    /// `(kernel, stride)` per block.
    pub layers: Vec<(usize, usize)>,
    /// Output length of each block.
    pub lengths: Vec<usize>,
    /// Right zero padding applied before each block's convolution.
    pub paddings: Vec<usize>,
}

impl ConvSchedule {
    /// Input length of block `j`.
    pub fn block_input_len(&self, j: usize) -> usize {
        if j == 0 {
            self.input_len
        } else {
            self.lengths[j - 1]
        }
    }

    pub fn output_len(&self) -> usize {
        *self.lengths.last().expect("schedules have at least one block")
    }
}

/// Smallest right pad `P` with `len + P ≥ kernel` and `(len + P − kernel)`
/// divisible by `stride`.
pub fn minimal_right_pad(len: usize, kernel: usize, stride: usize) -> usize {
    if len < kernel {
        kernel - len
    } else {
        (stride - (len - kernel) % stride) % stride
    }
}

/// Per-block lengths and paddings for input length `len`.
pub fn plan_schedule(len: usize, layers: &[(usize, usize)]) -> Result<ConvSchedule> {
    if layers.is_empty() {
        return Err(Error::Config("convolution schedule has no layers".into()));
    }
    if len == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let mut cur = len;
    let mut lengths = Vec::with_capacity(layers.len());
    let mut paddings = Vec::with_capacity(layers.len());
    for &(k, s) in layers {
        if k == 0 || s == 0 {
            return Err(Error::Config(format!("invalid layer ({k}, {s}): kernel and stride must be ≥ 1")));
        }
        let pad = minimal_right_pad(cur, k, s);
        cur = (cur + pad - k) / s + 1;
        paddings.push(pad);
        lengths.push(cur);
    }
    Ok(ConvSchedule {
        input_len: len,
        layers: layers.to_vec(),
        lengths,
        paddings,
    })
}

/// Row windows that average a length-`from` sequence down to `to` rows.
///
/// Uses window and stride `ceil(from/to)` with minimal right padding when that
/// yields exactly `to` windows; otherwise falls back to adaptive windows
/// `[floor(i·from/to), ceil((i+1)·from/to))`. Padding is excluded from means.
pub fn residual_windows(from: usize, to: usize) -> Vec<(usize, usize)> {
    let w = from.div_ceil(to);
    let pad = minimal_right_pad(from, w, w);
    if (from + pad - w) / w + 1 == to {
        return (0..to).map(|i| (i * w, ((i + 1) * w).min(from))).collect();
    }
    (0..to)
        .map(|i| (i * from / to, ((i + 1) * from).div_ceil(to)))
        .collect()
}

/// Greedy `(2, 2)` layers until the length is at most 7, then one layer
/// spanning the remainder.
pub fn schedule_family(len: usize) -> Vec<(usize, usize)> {
    let mut layers = Vec::new();
    let mut cur = len.max(1);
    while cur > 7 {
        layers.push((2, 2));
        cur = cur.div_ceil(2);
    }
    layers.push((cur, cur));
    layers
}

/// Multiply-adds of one forward pass: `Σ_j L_j·d²·(K_j + 1)` (convolution
/// plus the `W_G` projection).
pub fn count_flops(schedule: &ConvSchedule, d_v: usize) -> u64 {
    let d2 = (d_v * d_v) as u64;
    schedule
        .layers
        .iter()
        .zip(&schedule.lengths)
        .map(|(&(k, _), &l)| l as u64 * d2 * (k as u64 + 1))
        .sum()
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub kernel: ParamId,
    pub conv_bias: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub alpha1: ParamId,
    pub alpha2: ParamId,
}

impl BlockParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, index: usize, d: usize, kernel: usize, rng: &mut R) -> Self {
        let name = |s: &str| format!("block{index}.{s}");
        BlockParams {
            kernel: store.add(name("kernel"), Tensor::glorot(&[d, d, kernel], d * kernel, d * kernel, rng)),
            conv_bias: store.add(name("conv_bias"), Tensor::zeros(&[d])),
            w_g: store.add(name("w_g"), Tensor::glorot(&[d, d], d, d, rng)),
            b_g: store.add(name("b_g"), Tensor::zeros(&[d])),
            ln_gamma: store.add(name("ln_gamma"), Tensor::full(&[d], 1.0)),
            ln_beta: store.add(name("ln_beta"), Tensor::zeros(&[d])),
            alpha1: store.add(name("alpha1"), Tensor::scalar(0.5)),
            alpha2: store.add(name("alpha2"), Tensor::scalar(0.5)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CdsOptions {
    pub dropout: f64,
    pub training: bool,
    /// Drop both weighted residual terms.
    pub no_residuals: bool,
}

/// One pyramid stage:
/// `O_j = LN(GELU(conv(O_prev)ᵀ·W_G + b_G) + α₁·pool(Z) + α₂·pool(prog_res))`.
#[allow(clippy::too_many_arguments)]
pub fn conv_block<R: Rng + ?Sized>(
    g: &mut Graph,
    block: &BlockParams,
    o_prev: Var,
    z: Var,
    prog_res: Var,
    schedule: &ConvSchedule,
    j: usize,
    opts: CdsOptions,
    rng: &mut R,
) -> Result<Var> {
    let (kernel, stride) = schedule.layers[j];
    let in_len = schedule.block_input_len(j);
    let out_len = schedule.lengths[j];
    if g.value(o_prev).rows() != in_len {
        return Err(Error::dim("conv_block input", g.value(o_prev).shape(), &[in_len]));
    }
    if g.value(o_prev).shape()[1] != g.store().value(block.kernel).shape()[1]
        || g.store().value(block.kernel).shape()[2] != kernel
    {
        return Err(Error::dim(
            "conv_block kernel",
            g.value(o_prev).shape(),
            g.store().value(block.kernel).shape(),
        ));
    }
    let channels_first = g.transpose(o_prev)?;
    let (kv, cb) = (g.param(block.kernel), g.param(block.conv_bias));
    let conv = g.conv1d(channels_first, kv, cb, stride, (0, schedule.paddings[j]))?;
    let conv = g.transpose(conv)?;
    let (w, b) = (g.param(block.w_g), g.param(block.b_g));
    let proj = g.linear(conv, w, Some(b))?;
    let act = g.gelu(proj);
    let mut sum = g.dropout(act, opts.dropout, opts.training, rng)?;
    if !opts.no_residuals {
        let z_len = g.value(z).rows();
        let pooled_z = g.window_mean(z, &residual_windows(z_len, out_len), true)?;
        let a1 = g.param(block.alpha1);
        let term = g.scale_by(pooled_z, a1)?;
        sum = g.add(sum, term)?;
        let res_len = g.value(prog_res).rows();
        let pooled_res = g.window_mean(prog_res, &residual_windows(res_len, out_len), true)?;
        let a2 = g.param(block.alpha2);
        let term = g.scale_by(pooled_res, a2)?;
        sum = g.add(sum, term)?;
    }
    let (gamma, beta) = (g.param(block.ln_gamma), g.param(block.ln_beta));
    g.layer_norm(sum, gamma, beta, LAYER_NORM_EPS)
}

/// Runs every block, threading the progressive residual, and collapses the
/// final rows by averaging when more than one remains.
pub fn cds_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    blocks: &[BlockParams],
    schedule: &ConvSchedule,
    z: Var,
    opts: CdsOptions,
    rng: &mut R,
) -> Result<Var> {
    if blocks.len() != schedule.layers.len() {
        return Err(Error::Config(format!(
            "{} blocks for a {}-layer schedule",
            blocks.len(),
            schedule.layers.len()
        )));
    }
    let mut o = z;
    for (j, block) in blocks.iter().enumerate() {
        o = conv_block(g, block, o, z, o, schedule, j, opts, rng)?;
    }
    if g.value(o).rows() > 1 {
        o = g.mean_rows(o)?;
    }
    Ok(o)
}
