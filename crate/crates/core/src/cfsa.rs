//! Cross-frame self-attention for video clips.
//!
//! A clip of 2*tau + 1 frames (edges replicated by index clamping) is
//! encoded framewise; attention runs over all (frame, position) cells with
//! rows laid out frame-major (row = t * H*W + p) and the same score and
//! normalization conventions as the cross-modal block. Frame
//! attention-aware pooling collapses the clip into one map, which updates
//! the target frame's visual features residually: V_t := V_t + V_hat.
//!
//! Queries and keys project C_v down to d_k; the value projection maps
//! C_v to C_v so the pooled feature can be added back to V_t directly.

use crate::cmsa::attention;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CfsaConfig {
    pub d_k: usize,
    /// Clip half-width; the clip holds 2*tau + 1 frames.
    pub tau: usize,
    pub scaled: bool,
}

impl Default for CfsaConfig {
    fn default() -> Self {
        CfsaConfig {
            d_k: 512,
            tau: 5,
            scaled: false,
        }
    }
}

/// Visual-only projections of the cross-frame block.
pub struct CfsaParams {
    /// [d_k, C_v].
    pub w_q: ParamId,
    pub w_k: ParamId,
    /// [C_v, C_v]; the attended values keep the visual width so the
    /// residual update is dimensionally direct.
    pub w_v: ParamId,
}

impl CfsaParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        c_v: usize,
        d_k: usize,
        rng: &mut Rng,
    ) -> Self {
        CfsaParams {
            w_q: store.add(
                "cfsa.w_q",
                Tensor::kaiming_uniform(&[d_k, c_v], c_v, rng),
            ),
            w_k: store.add(
                "cfsa.w_k",
                Tensor::kaiming_uniform(&[d_k, c_v], c_v, rng),
            ),
            // Zero-initialized: a fresh block leaves the target frame's
            // features unchanged.
            w_v: store.add("cfsa.w_v", Tensor::zeros(&[c_v, c_v])),
        }
    }
}

/// Clip indices clamp(T - tau ..= T + tau, 0, len - 1).
pub fn extract_clip(video_len: usize, target: usize, tau: usize) -> Result<Vec<usize>> {
    if video_len == 0 {
        return Err(Error::Input("empty video".into()));
    }
    if target >= video_len {
        return Err(Error::Input(format!(
            "target frame {target} out of range for {video_len} frames"
        )));
    }
    let t = target as isize;
    let tau = tau as isize;
    Ok((t - tau..=t + tau)
        .map(|i| i.clamp(0, video_len as isize - 1) as usize)
        .collect())
}

/// Attention over all (frame, position) cells of a clip.
///
/// `clip_feats` holds one [C_v, H, W] map per frame. Returns the attended
/// rows [(2tau+1) * H*W, C_v] in frame-major order and the normalized
/// scores.
pub fn cfsa_attention<T: Scalar>(
    g: &mut Graph<T>,
    params: &CfsaParams,
    cfg: &CfsaConfig,
    pv: &[Var],
    clip_feats: &[Var],
) -> Result<(Var, Var)> {
    if clip_feats.is_empty() {
        return Err(Error::Input("empty clip".into()));
    }
    let shape = g.shape(clip_feats[0]).to_vec();
    let (c_v, h, w) = (shape[0], shape[1], shape[2]);
    let mut frame_rows = Vec::with_capacity(clip_feats.len());
    for &f in clip_feats {
        if g.shape(f) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "clip frames disagree: {:?} vs {:?}",
                g.shape(f),
                shape
            )));
        }
        let hwc = g.permute(f, &[1, 2, 0])?;
        frame_rows.push(g.reshape(hwc, &[h * w, c_v])?);
    }
    let rows = g.concat(&frame_rows, 0)?; // [(F*HW), C_v], frame-major
    let wq_t = g.permute(pv[params.w_q.index()], &[1, 0])?;
    let wk_t = g.permute(pv[params.w_k.index()], &[1, 0])?;
    let wv_t = g.permute(pv[params.w_v.index()], &[1, 0])?;
    let q = g.matmul(rows, wq_t)?;
    let k = g.matmul(rows, wk_t)?;
    let v = g.matmul(rows, wv_t)?;
    attention(g, q, k, v, None, cfg.scaled)
}

/// Frame attention-aware pooling: per-frame weights from the summed scores
/// of each frame's rows, then the weighted sum over frames.
///
/// Returns the pooled map [C_v, H, W].
pub fn frame_pool<T: Scalar>(
    g: &mut Graph<T>,
    vhat_rows: Var,
    scores: Var,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let hw = h * w;
    let r = frames * hw;
    if g.shape(scores) != [r, r] || g.shape(vhat_rows)[0] != r {
        return Err(Error::Shape(format!(
            "frame_pool expects scores [{r}, {r}] and rows [{r}, C], got {:?} and {:?}",
            g.shape(scores),
            g.shape(vhat_rows)
        )));
    }
    let c_v = g.shape(vhat_rows)[1];
    let grouped = g.reshape(scores, &[frames, hw, r])?;
    let sums = g.sum(grouped, &[1, 2], false)?; // [frames]
    let weights = g.softmax(sums, 0)?;
    let vhat3 = g.reshape(vhat_rows, &[frames, hw, c_v])?;
    let wb = g.reshape(weights, &[frames, 1, 1])?;
    let weighted = g.mul(vhat3, wb)?;
    let pooled = g.sum(weighted, &[0], false)?; // [hw, C_v]
    let hwc = g.reshape(pooled, &[h, w, c_v])?;
    g.permute(hwc, &[2, 0, 1])
}

/// Residual update of the target frame: V_t + V_hat.
pub fn temporal_update<T: Scalar>(g: &mut Graph<T>, v_target: Var, v_hat: Var) -> Result<Var> {
    if g.shape(v_target) != g.shape(v_hat) {
        return Err(Error::Shape(format!(
            "temporal_update shapes differ: {:?} vs {:?}",
            g.shape(v_target),
            g.shape(v_hat)
        )));
    }
    g.add(v_target, v_hat)
}

/// Full block: attention over the clip, frame pooling, residual update of
/// the target frame's features (position `target_pos` inside the clip).
pub fn cfsa_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &CfsaParams,
    cfg: &CfsaConfig,
    pv: &[Var],
    clip_feats: &[Var],
    target_pos: usize,
) -> Result<Var> {
    if target_pos >= clip_feats.len() {
        return Err(Error::Usage(format!(
            "target position {target_pos} outside clip of {} frames",
            clip_feats.len()
        )));
    }
    let shape = g.shape(clip_feats[0]).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let (vhat, scores) = cfsa_attention(g, params, cfg, pv, clip_feats)?;
    let pooled = frame_pool(g, vhat, scores, clip_feats.len(), h, w)?;
    temporal_update(g, clip_feats[target_pos], pooled)
}
