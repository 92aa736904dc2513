//! Gated multi-level fusion and mask prediction.
//!
//! Each level's pooled feature map is projected to a common width by a 1x1
//! convolution. Per level, 1x1 convolutions produce a memory gate m and a
//! reset gate r (sigmoid keeps them in (0,1)); the fused map is
//!
//!   G_i  = (1 - m_i) . X_i + sum_{j != i} gamma_j m_j . X_j
//!   Fo_i = r_i . tanh(G_i) + (1 - r_i) . X_i
//!
//! with gates broadcast across channels. The three fused maps are summed,
//! a 3x3 convolution reduces them to one channel, bilinear upsampling
//! restores the image resolution and a sigmoid yields the probability map.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    /// Common channel width after per-level projection.
    pub d_f: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { d_f: 500 }
    }
}

pub struct FusionParams {
    /// Per-level 1x1 projection kernels [d_f, C_i, 1, 1].
    pub proj: [ParamId; 3],
    /// Per-level memory-gate conv [1, d_f, 1, 1] and bias.
    pub gate_m: [(ParamId, ParamId); 3],
    /// Per-level reset-gate conv and bias.
    pub gate_r: [(ParamId, ParamId); 3],
    /// Cross-level ratio scalars, initialized to 1.
    pub gamma: [ParamId; 3],
    /// Final 3x3 conv [1, d_f, 3, 3] and bias.
    pub mask_kernel: ParamId,
    pub mask_bias: ParamId,
}

impl FusionParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        level_channels: [usize; 3],
        cfg: FusionConfig,
        rng: &mut Rng,
    ) -> Self {
        let d_f = cfg.d_f;
        let mut proj = Vec::new();
        let mut gate_m = Vec::new();
        let mut gate_r = Vec::new();
        let mut gamma = Vec::new();
        for (i, &c_in) in level_channels.iter().enumerate() {
            proj.push(store.add(
                &format!("fusion.proj{i}"),
                Tensor::kaiming_uniform(&[d_f, c_in, 1, 1], c_in, rng),
            ));
            gate_m.push((
                store.add(
                    &format!("fusion.gate_m{i}.kernel"),
                    Tensor::kaiming_uniform(&[1, d_f, 1, 1], d_f, rng),
                ),
                store.add(&format!("fusion.gate_m{i}.bias"), Tensor::zeros(&[1, 1, 1])),
            ));
            gate_r.push((
                store.add(
                    &format!("fusion.gate_r{i}.kernel"),
                    Tensor::kaiming_uniform(&[1, d_f, 1, 1], d_f, rng),
                ),
                store.add(&format!("fusion.gate_r{i}.bias"), Tensor::zeros(&[1, 1, 1])),
            ));
            gamma.push(store.add(&format!("fusion.gamma{i}"), Tensor::full(&[1], T::one())));
        }
        let mask_kernel = store.add(
            "fusion.mask.kernel",
            Tensor::kaiming_uniform(&[1, d_f, 3, 3], d_f * 9, rng),
        );
        let mask_bias = store.add("fusion.mask.bias", Tensor::zeros(&[1, 1, 1]));
        FusionParams {
            proj: [proj[0], proj[1], proj[2]],
            gate_m: [gate_m[0], gate_m[1], gate_m[2]],
            gate_r: [gate_r[0], gate_r[1], gate_r[2]],
            gamma: [gamma[0], gamma[1], gamma[2]],
            mask_kernel,
            mask_bias,
        }
    }
}

/// Project a pooled level map [H, W, C_i] to [d_f, H, W] with a 1x1 conv.
pub fn project_level<T: Scalar>(
    g: &mut Graph<T>,
    pv: &[Var],
    params: &FusionParams,
    level: usize,
    pooled: Var,
) -> Result<Var> {
    let chw = g.permute(pooled, &[2, 0, 1])?;
    g.conv2d(chw, pv[params.proj[level].index()], 1, 1)
}

/// Memory and reset gates of one level, each [1, H, W] in (0, 1).
pub fn compute_gates<T: Scalar>(
    g: &mut Graph<T>,
    pv: &[Var],
    params: &FusionParams,
    level: usize,
    x: Var,
) -> Result<(Var, Var)> {
    let gate = |g: &mut Graph<T>, kernel: ParamId, bias: ParamId| -> Result<Var> {
        let z = g.conv2d(x, pv[kernel.index()], 1, 1)?;
        let z = g.add(z, pv[bias.index()])?;
        g.sigmoid(z)
    };
    let (mk, mb) = params.gate_m[level];
    let (rk, rb) = params.gate_r[level];
    Ok((gate(g, mk, mb)?, gate(g, rk, rb)?))
}

/// Apply the gated cross-level mixing to all three levels.
///
/// Gates are [1, H, W] and broadcast over the d_f channels of X.
pub fn gated_fuse<T: Scalar>(
    g: &mut Graph<T>,
    xs: [Var; 3],
    m: [Var; 3],
    r: [Var; 3],
    gamma: [Var; 3],
) -> Result<[Var; 3]> {
    let gate_shape = g.shape(m[0]).to_vec();
    let ones = g.constant(Tensor::full(&gate_shape, T::one()));
    // gamma_j * m_j . X_j terms are shared across the three outputs.
    let mut cross = Vec::with_capacity(3);
    for j in 0..3 {
        let mx = g.mul(m[j], xs[j])?;
        let gamma_b = g.reshape(gamma[j], &[1, 1, 1])?;
        cross.push(g.mul(mx, gamma_b)?);
    }
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        let keep = g.sub(ones, m[i])?;
        let mut acc = g.mul(keep, xs[i])?;
        for j in 0..3 {
            if j != i {
                acc = g.add(acc, cross[j])?;
            }
        }
        let tanh_g = g.tanh(acc)?;
        let gated = g.mul(r[i], tanh_g)?;
        let keep_r = g.sub(ones, r[i])?;
        let bypass = g.mul(keep_r, xs[i])?;
        out.push(g.add(gated, bypass)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Sum the three fused maps; this is the final feature map the mask head
/// consumes (also used for activation visualization).
pub fn fused_sum<T: Scalar>(g: &mut Graph<T>, fused: [Var; 3]) -> Result<Var> {
    let s01 = g.add(fused[0], fused[1])?;
    g.add(s01, fused[2])
}

/// Sum the fused maps, reduce to one channel with a 3x3 conv, upsample to
/// the output size and apply the sigmoid. Returns [out_h, out_w].
pub fn predict_mask<T: Scalar>(
    g: &mut Graph<T>,
    pv: &[Var],
    params: &FusionParams,
    fused: [Var; 3],
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let total = fused_sum(g, fused)?;
    predict_mask_from_sum(g, pv, params, total, out_h, out_w)
}

/// Mask head on an already-summed feature map [d_f, H, W].
pub fn predict_mask_from_sum<T: Scalar>(
    g: &mut Graph<T>,
    pv: &[Var],
    params: &FusionParams,
    total: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let logits = g.conv2d(total, pv[params.mask_kernel.index()], 1, 1)?;
    let logits = g.add(logits, pv[params.mask_bias.index()])?;
    let up = g.upsample_bilinear(logits, out_h, out_w)?;
    let p = g.sigmoid(up)?;
    g.reshape(p, &[out_h, out_w])
}

/// Binary cross-entropy between the probability map and the 0/1 mask.
pub fn loss<T: Scalar>(g: &mut Graph<T>, p: Var, y: Var) -> Result<Var> {
    g.bce_loss(p, y)
}

/// Threshold a probability map: pixel >= threshold becomes 1.
pub fn binarize<T: Scalar>(p: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Usage(format!(
            "binarize threshold {threshold} outside (0,1)"
        )));
    }
    let thr = T::from_f64(threshold);
    Tensor::new(
        p.shape().to_vec(),
        p.data()
            .iter()
            .map(|&v| if v >= thr { T::one() } else { T::zero() })
            .collect(),
    )
}
