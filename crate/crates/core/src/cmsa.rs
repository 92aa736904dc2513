//! Cross-modal self-attention over joint (position, word) cells, with word
//! attention-aware pooling.
//!
//! The multimodal map F is flattened to rows in position-major, word-minor
//! order (row = p * N + n). The raw score between output row (p, n) and
//! summed column (p', n') is q_{p'n'} . k_{pn}; each row of the score
//! matrix is softmax-normalized over its columns, with PAD-word columns
//! excluded (exactly zero). The attended values pass through a linear map
//! back to the multimodal width and a residual with F; per-word attention
//! summaries then pool the word axis into a single map per level.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lang::build_multimodal;
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CmsaConfig {
    pub d_k: usize,
    /// Scale raw scores by 1/sqrt(d_k). Off by default.
    pub scaled: bool,
}

impl Default for CmsaConfig {
    fn default() -> Self {
        CmsaConfig {
            d_k: 512,
            scaled: false,
        }
    }
}

/// Projection matrices of one CMSA block. No bias terms.
pub struct CmsaParams {
    /// [d_k, C] where C = C_v + C_l + 8.
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// [C, d_k]. Zeroing this matrix turns the whole block into the
    /// identity on F; the default init is small uniform so the attention
    /// path receives gradient from the first step.
    pub w_vhat: ParamId,
}

impl CmsaParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        d_k: usize,
        rng: &mut Rng,
    ) -> Self {
        let w_q = store.add(
            &format!("{prefix}.w_q"),
            Tensor::kaiming_uniform(&[d_k, c_in], c_in, rng),
        );
        let w_k = store.add(
            &format!("{prefix}.w_k"),
            Tensor::kaiming_uniform(&[d_k, c_in], c_in, rng),
        );
        let w_v = store.add(
            &format!("{prefix}.w_v"),
            Tensor::kaiming_uniform(&[d_k, c_in], c_in, rng),
        );
        let w_vhat = store.add(
            &format!("{prefix}.w_vhat"),
            Tensor::kaiming_uniform(&[c_in, d_k], d_k, rng),
        );
        CmsaParams {
            w_q,
            w_k,
            w_v,
            w_vhat,
        }
    }
}

/// Per-cell linear projections q = W_q f, k = W_k f, v = W_v f.
///
/// `f_rows` is [R, C]; the weights are [d_k, C]; outputs are [R, d_k].
pub fn project_qkv<T: Scalar>(
    g: &mut Graph<T>,
    f_rows: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<(Var, Var, Var)> {
    let q_t = g.permute(w_q, &[1, 0])?;
    let k_t = g.permute(w_k, &[1, 0])?;
    let v_t = g.permute(w_v, &[1, 0])?;
    let q = g.matmul(f_rows, q_t)?;
    let k = g.matmul(f_rows, k_t)?;
    let v = g.matmul(f_rows, v_t)?;
    Ok((q, k, v))
}

/// Joint attention: scores S[r, c] = q_c . k_r, rows normalized over their
/// columns with `col_mask == false` columns excluded. Returns the attended
/// values [R, d_k] and the normalized scores [R, R].
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    col_mask: Option<&[bool]>,
    scaled: bool,
) -> Result<(Var, Var)> {
    let sq = g.shape(q).to_vec();
    if g.shape(k) != sq.as_slice() || g.shape(v)[0] != sq[0] {
        return Err(Error::Shape(format!(
            "attention operands must agree: q {:?}, k {:?}, v {:?}",
            sq,
            g.shape(k),
            g.shape(v)
        )));
    }
    let q_t = g.permute(q, &[1, 0])?;
    let mut scores = g.matmul(k, q_t)?;
    if scaled {
        let d_k = sq[1];
        scores = g.scalar_mul(scores, T::from_f64(1.0 / (d_k as f64).sqrt()))?;
    }
    let a = match col_mask {
        Some(m) => g.softmax_masked(scores, 1, m)?,
        None => g.softmax(scores, 1)?,
    };
    let vhat = g.matmul(a, v)?;
    Ok((vhat, a))
}

/// f_hat = W_vhat vhat + f, per row.
pub fn residual_transform<T: Scalar>(
    g: &mut Graph<T>,
    vhat: Var,
    f_rows: Var,
    w_vhat: Var,
) -> Result<Var> {
    let w_t = g.permute(w_vhat, &[1, 0])?;
    let back = g.matmul(vhat, w_t)?;
    g.add(back, f_rows)
}

/// Word attention: for each word n, sum the normalized scores over its rows
/// and every column, then softmax over the valid words only.
pub fn word_attention<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    hw: usize,
    n: usize,
    word_mask: &[bool],
) -> Result<Var> {
    let r = hw * n;
    if g.shape(a) != [r, r] {
        return Err(Error::Shape(format!(
            "word_attention expects scores [{r}, {r}], got {:?}",
            g.shape(a)
        )));
    }
    if word_mask.len() != n {
        return Err(Error::Shape(format!(
            "word mask length {} != word count {n}",
            word_mask.len()
        )));
    }
    let grouped = g.reshape(a, &[hw, n, r])?;
    let sums = g.sum(grouped, &[0, 2], false)?;
    g.softmax_masked(sums, 0, word_mask)
}

/// Pool the word axis: f_p = sum_n a_n * f_{pn}. `fhat_rows` is [H*W*N, C]
/// in position-major order; the result is [H, W, C].
pub fn word_pool<T: Scalar>(
    g: &mut Graph<T>,
    fhat_rows: Var,
    word_attn: Var,
    h: usize,
    w: usize,
    n: usize,
) -> Result<Var> {
    let c = g.shape(fhat_rows)[1];
    let grouped = g.reshape(fhat_rows, &[h * w, n, c])?;
    let wa = g.reshape(word_attn, &[1, n, 1])?;
    let weighted = g.mul(grouped, wa)?;
    let pooled = g.sum(weighted, &[1], false)?;
    g.reshape(pooled, &[h, w, c])
}

/// Everything a CMSA block produces for one level.
pub struct CmsaOutput {
    /// Word-pooled multimodal features, [H, W, C].
    pub pooled: Var,
    /// Per-word attention, [N]; PAD slots are exactly zero.
    pub word_attn: Var,
    /// Row-normalized attention scores, [H*W*N, H*W*N].
    pub scores: Var,
}

/// Full block: multimodal build, QKV, joint attention, residual, word
/// attention-aware pooling.
///
/// `word_mask` marks the valid word slots of `e` ([N, C_l]); pass all-true
/// when `e` holds only real words.
pub fn cmsa_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &CmsaParams,
    cfg: &CmsaConfig,
    pv: &[Var],
    v_level: Var,
    e: Var,
    s: Var,
    word_mask: &[bool],
) -> Result<CmsaOutput> {
    let (h, w) = {
        let sv = g.shape(v_level);
        (sv[1], sv[2])
    };
    let n = g.shape(e)[0];
    if word_mask.len() != n {
        return Err(Error::Shape(format!(
            "word mask length {} != word slots {n}",
            word_mask.len()
        )));
    }
    if !word_mask.iter().any(|&m| m) {
        return Err(Error::Input("expression has no valid words".into()));
    }
    let f = build_multimodal(g, v_level, e, s)?;
    let c = g.shape(f)[3];
    let r = h * w * n;
    // [N,H,W,C] -> [H,W,N,C] -> rows in position-major, word-minor order.
    let f_pm = g.permute(f, &[1, 2, 0, 3])?;
    let f_rows = g.reshape(f_pm, &[r, c])?;

    let (q, k, v) = project_qkv(
        g,
        f_rows,
        pv[params.w_q.index()],
        pv[params.w_k.index()],
        pv[params.w_v.index()],
    )?;
    let all_valid = word_mask.iter().all(|&m| m);
    let col_mask: Option<Vec<bool>> = if all_valid {
        None
    } else {
        Some((0..r).map(|cix| word_mask[cix % n]).collect())
    };
    let (vhat, scores) = attention(g, q, k, v, col_mask.as_deref(), cfg.scaled)?;
    let fhat = residual_transform(g, vhat, f_rows, pv[params.w_vhat.index()])?;
    let wa = word_attention(g, scores, h * w, n, word_mask)?;
    let pooled = word_pool(g, fhat, wa, h, w, n)?;
    Ok(CmsaOutput {
        pooled,
        word_attn: wa,
        scores,
    })
}

/// Ablation path: the block output is the plain average of the multimodal
/// features over the valid words; no attention anywhere.
pub fn no_attention_forward<T: Scalar>(
    g: &mut Graph<T>,
    v_level: Var,
    e: Var,
    s: Var,
) -> Result<Var> {
    let f = build_multimodal(g, v_level, e, s)?;
    g.mean(f, &[0], false) // [H, W, C]
}

/// Row-blocked attention over raw tensors: processes one output row at a
/// time without materializing the full score matrix. Bitwise-identical to
/// the materialized path for the same inputs.
pub fn attention_row_blocked<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    col_mask: Option<&[bool]>,
    scaled: bool,
) -> Result<Tensor<T>> {
    let shape = q.shape().to_vec();
    if shape.len() != 2 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "attention_row_blocked operands must be equal rank-2 shapes, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (r, d_k) = (shape[0], shape[1]);
    if let Some(m) = col_mask {
        if m.len() != r {
            return Err(Error::Shape(format!(
                "column mask length {} != row count {r}",
                m.len()
            )));
        }
        if !m.iter().any(|&x| x) {
            return Err(Error::Input("attention mask excludes every column".into()));
        }
    }
    let valid = |cix: usize| col_mask.map_or(true, |m| m[cix]);
    let scale = T::from_f64(if scaled {
        1.0 / (d_k as f64).sqrt()
    } else {
        1.0
    });
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![T::zero(); r * d_k];
    let mut row_scores = vec![T::zero(); r];
    for row in 0..r {
        let krow = &kd[row * d_k..(row + 1) * d_k];
        // Raw scores of this row, in column order, matching matmul(k, q^T).
        for (col, slot) in row_scores.iter_mut().enumerate() {
            let qcol = &qd[col * d_k..(col + 1) * d_k];
            let mut acc = T::zero();
            for (&kv, &qv) in krow.iter().zip(qcol.iter()) {
                acc += kv * qv;
            }
            *slot = acc * scale;
        }
        let mut max = T::neg_infinity();
        for col in 0..r {
            if valid(col) && row_scores[col] > max {
                max = row_scores[col];
            }
        }
        let mut denom = T::zero();
        for col in 0..r {
            if valid(col) {
                let e = (row_scores[col] - max).exp();
                row_scores[col] = e;
                denom += e;
            } else {
                row_scores[col] = T::zero();
            }
        }
        for col in 0..r {
            if valid(col) {
                row_scores[col] = row_scores[col] / denom;
            }
        }
        // vhat row accumulated over columns in index order, matching the
        // materialized matmul(a, v).
        let orow = &mut out[row * d_k..(row + 1) * d_k];
        for col in 0..r {
            let a = row_scores[col];
            let vrow = &vd[col * d_k..(col + 1) * d_k];
            for (o, &vv) in orow.iter_mut().zip(vrow.iter()) {
                *o += a * vv;
            }
        }
    }
    Tensor::new(vec![r, d_k], out)
}

/// Stack three per-level word attentions into a [3, N] matrix.
pub fn word_attention_matrix<T: Scalar>(levels: &[Vec<T>; 3]) -> Result<Tensor<T>> {
    let n = levels[0].len();
    if levels.iter().any(|l| l.len() != n) {
        return Err(Error::Shape(
            "word attention rows must have equal length".into(),
        ));
    }
    let mut data = Vec::with_capacity(3 * n);
    for row in levels {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![3, n], data)
}

/// CSV rendering of the [3, N] matrix: level rows, word columns, 6 decimal
/// places.
pub fn word_attention_csv<T: Scalar>(matrix: &Tensor<T>) -> String {
    let n = matrix.shape()[1];
    let mut out = String::new();
    for row in 0..matrix.shape()[0] {
        let cells: Vec<String> = (0..n)
            .map(|c| format!("{:.6}", matrix.at(&[row, c]).as_f64()))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::spatial_coords;
    use crate::reference;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn project_identity_padded_copies_features() {
        // W_q = [I | 0] keeps the first d_k feature channels.
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[3, 5], 1));
        let mut wq = Tensor::<f64>::zeros(&[2, 5]);
        wq.data_mut()[0] = 1.0; // (0,0)
        wq.data_mut()[6] = 1.0; // (1,1)
        let wq = g.constant(wq);
        let wk = g.constant(Tensor::zeros(&[2, 5]));
        let wv = g.constant(Tensor::zeros(&[2, 5]));
        let (q, k, v) = project_qkv(&mut g, f, wq, wk, wv).unwrap();
        let fd = g.value(f).clone();
        let qd = g.value(q);
        for row in 0..3 {
            assert_eq!(qd.at(&[row, 0]), fd.at(&[row, 0]));
            assert_eq!(qd.at(&[row, 1]), fd.at(&[row, 1]));
        }
        assert!(g.value(k).data().iter().all(|&x| x == 0.0));
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn project_zero_features_give_zero_qkv() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[4, 5]));
        let w = g.constant(rand_t(&[3, 5], 2));
        let (q, k, v) = project_qkv(&mut g, f, w, w, w).unwrap();
        for var in [q, k, v] {
            assert!(g.value(var).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn project_matches_hand_matvec() {
        // Single cell, 3-dim feature, 2-dim key.
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let wq = g.constant(Tensor::new(vec![2, 3], vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let (q, _, _) = project_qkv(&mut g, f, wq, z, z).unwrap();
        // q = W_q f = [1*1+0.5*2-1*3, 2*1+0*2+1*3] = [-1, 5]
        assert_eq!(g.value(q).data(), &[-1.0, 5.0]);
    }

    #[test]
    fn constant_scores_give_uniform_rows_and_mean_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[4, 2]));
        let k = g.constant(rand_t(&[4, 2], 3));
        let v = g.constant(rand_t(&[4, 2], 4));
        let (vhat, a) = attention(&mut g, q, k, v, None, false).unwrap();
        let ad = g.value(a).data();
        for &x in ad {
            assert!((x - 0.25).abs() < 1e-12);
        }
        let vd = g.value(v).data();
        let mean = [
            (vd[0] + vd[2] + vd[4] + vd[6]) / 4.0,
            (vd[1] + vd[3] + vd[5] + vd[7]) / 4.0,
        ];
        let vh = g.value(vhat).data();
        for row in 0..4 {
            assert!((vh[row * 2] - mean[0]).abs() < 1e-12);
            assert!((vh[row * 2 + 1] - mean[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(rand_t(&[6, 3], 5));
        let k = g.constant(rand_t(&[6, 3], 6));
        let v = g.constant(rand_t(&[6, 3], 7));
        let (_, a) = attention(&mut g, q, k, v, None, false).unwrap();
        let ad = g.value(a).data();
        for row in 0..6 {
            let sum: f64 = ad[row * 6..(row + 1) * 6].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_matches_nested_loop_oracle_on_toy() {
        // H=W=1, N=2, d_k=2 plus a sweep of small shapes.
        for seed in 0..20u64 {
            let mut rng = Rng::new(seed);
            let hw = 1 + rng.below(3);
            let n = 1 + rng.below(3);
            let d_k = 1 + rng.below(4);
            let r = hw * n;
            let q = Tensor::<f64>::rand_uniform(&[r, d_k], -2.0, 2.0, &mut rng);
            let k = Tensor::<f64>::rand_uniform(&[r, d_k], -2.0, 2.0, &mut rng);
            let v = Tensor::<f64>::rand_uniform(&[r, d_k], -2.0, 2.0, &mut rng);
            let (vhat_ref, a_ref) =
                reference::attention_reference(&q, &k, &v, hw, n, None, false);
            let mut g = Graph::<f64>::new();
            let qv = g.constant(q);
            let kv = g.constant(k);
            let vv = g.constant(v);
            let (vhat, a) = attention(&mut g, qv, kv, vv, None, false).unwrap();
            assert!(g.value(vhat).max_abs_diff(&vhat_ref) < 1e-6, "seed {seed}");
            assert!(g.value(a).max_abs_diff(&a_ref) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn masked_columns_are_exactly_zero() {
        let mut g = Graph::<f64>::new();
        // 2 positions x 2 words; word 1 masked -> columns 1 and 3.
        let q = g.constant(rand_t(&[4, 2], 8));
        let k = g.constant(rand_t(&[4, 2], 9));
        let v = g.constant(rand_t(&[4, 2], 10));
        let mask = [true, false, true, false];
        let (_, a) = attention(&mut g, q, k, v, Some(&mask), false).unwrap();
        let ad = g.value(a).data();
        for row in 0..4 {
            assert_eq!(ad[row * 4 + 1], 0.0);
            assert_eq!(ad[row * 4 + 3], 0.0);
            let sum: f64 = ad[row * 4..(row + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_identities() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[4, 3], 11));
        let vhat = g.constant(rand_t(&[4, 2], 12));
        let w0 = g.constant(Tensor::zeros(&[3, 2]));
        let out = residual_transform(&mut g, vhat, f, w0).unwrap();
        assert_eq!(g.value(out).data(), g.value(f).data());

        let w = g.constant(rand_t(&[3, 2], 13));
        let vhat0 = g.constant(Tensor::zeros(&[4, 2]));
        let out2 = residual_transform(&mut g, vhat0, f, w).unwrap();
        assert_eq!(g.value(out2).data(), g.value(f).data());
    }

    #[test]
    fn residual_matches_hand_computation() {
        let mut g = Graph::<f64>::new();
        // One row: vhat = [1, -1], W_vhat = [[2, 1], [0, 3]], f = [10, 20].
        let f = g.constant(Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap());
        let vhat = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 2], vec![2.0, 1.0, 0.0, 3.0]).unwrap());
        let out = residual_transform(&mut g, vhat, f, w).unwrap();
        // W_vhat * vhat = [2*1 + 1*(-1), 0*1 + 3*(-1)] = [1, -3]
        assert_eq!(g.value(out).data(), &[11.0, 17.0]);
    }

    #[test]
    fn word_attention_single_word_is_one() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(rand_softmax_rows(4, 20));
        // 4 positions, 1 word.
        let wa = word_attention(&mut g, a, 4, 1, &[true]).unwrap();
        assert_eq!(g.value(wa).data(), &[1.0]);
    }

    #[test]
    fn word_attention_uniform_scores_are_uniform() {
        let mut g = Graph::<f64>::new();
        let r = 2 * 4;
        let a = g.constant(Tensor::full(&[r, r], 1.0 / r as f64));
        let wa = word_attention(&mut g, a, 2, 4, &[true; 4]).unwrap();
        for &x in g.value(wa).data() {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn word_attention_matches_reference_on_toys() {
        for seed in 30..40u64 {
            let hw = 2;
            let n = 2;
            let a = rand_softmax_rows(hw * n, seed);
            let mask = [true, true];
            let expect = reference::slot_attention_reference(&a, hw, n, &mask);
            let mut g = Graph::<f64>::new();
            let av = g.constant(a);
            let wa = word_attention(&mut g, av, hw, n, &mask).unwrap();
            for (got, want) in g.value(wa).data().iter().zip(expect.iter()) {
                assert!((got - want).abs() < 1e-9, "seed {seed}");
            }
        }
    }

    /// Random row-stochastic matrix.
    fn rand_softmax_rows(r: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::<f64>::rand_uniform(&[r, r], 0.0, 1.0, &mut rng);
        for row in 0..r {
            let slice = &mut t.data_mut()[row * r..(row + 1) * r];
            let sum: f64 = slice.iter().sum();
            for v in slice {
                *v /= sum;
            }
        }
        t
    }

    #[test]
    fn word_pool_single_word_copies_map() {
        let mut g = Graph::<f64>::new();
        let fhat = g.constant(rand_t(&[4, 3], 21)); // 2x2 positions, 1 word
        let wa = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let pooled = word_pool(&mut g, fhat, wa, 2, 2, 1).unwrap();
        assert_eq!(g.value(pooled).data(), g.value(fhat).data());
    }

    #[test]
    fn word_pool_convexity_on_identical_rows() {
        // Every word slot holds the same per-position feature.
        let mut g = Graph::<f64>::new();
        let base = rand_t(&[2, 3], 22); // 2 positions (1x2), C=3
        let mut rows = Vec::new();
        for p in 0..2 {
            for _word in 0..3 {
                rows.extend_from_slice(&base.data()[p * 3..(p + 1) * 3]);
            }
        }
        let fhat = g.constant(Tensor::new(vec![6, 3], rows).unwrap());
        let wa = g.constant(Tensor::new(vec![3], vec![0.2, 0.5, 0.3]).unwrap());
        let pooled = word_pool(&mut g, fhat, wa, 1, 2, 3).unwrap();
        let pd = g.value(pooled).data();
        for (got, want) in pd.iter().zip(base.data().iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn word_pool_two_word_weighted_sum() {
        let mut g = Graph::<f64>::new();
        // 1 position, 2 words, C=2.
        let fhat = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap());
        let wa = g.constant(Tensor::new(vec![2], vec![0.75, 0.25]).unwrap());
        let pooled = word_pool(&mut g, fhat, wa, 1, 1, 2).unwrap();
        assert_eq!(g.value(pooled).data(), &[0.75 + 2.5, 1.5 + 5.0]);
    }

    struct Toy {
        store: ParamStore<f64>,
        params: CmsaParams,
        cfg: CmsaConfig,
        v: Tensor<f64>,
        e: Tensor<f64>,
        s: Tensor<f64>,
    }

    fn toy(seed: u64, c_v: usize, c_l: usize, h: usize, w: usize, n: usize, d_k: usize) -> Toy {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let c = c_v + c_l + 8;
        let params = CmsaParams::init(&mut store, "cmsa", c, d_k, &mut rng);
        // Tests want a non-trivial residual path.
        *store.get_mut(params.w_vhat) = Tensor::rand_uniform(&[c, d_k], -0.3, 0.3, &mut rng);
        Toy {
            v: Tensor::rand_uniform(&[c_v, h, w], -1.0, 1.0, &mut rng),
            e: Tensor::rand_uniform(&[n, c_l], -1.0, 1.0, &mut rng),
            s: spatial_coords(h, w),
            store,
            params,
            cfg: CmsaConfig { d_k, scaled: false },
        }
    }

    fn run_forward(toy: &Toy, e: &Tensor<f64>, mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let pv: Vec<Var> = toy
            .store
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), false))
            .collect();
        let vv = g.constant(toy.v.clone());
        let ev = g.constant(e.clone());
        let sv = g.constant(toy.s.clone());
        let out = cmsa_forward(&mut g, &toy.params, &toy.cfg, &pv, vv, ev, sv, mask).unwrap();
        (
            g.value(out.pooled).data().to_vec(),
            g.value(out.word_attn).data().to_vec(),
        )
    }

    #[test]
    fn forward_output_shape() {
        let t = toy(31, 3, 4, 2, 2, 2, 3);
        let mut g = Graph::<f64>::new();
        let pv: Vec<Var> = t.store.iter().map(|(_, x)| g.leaf(x.clone(), false)).collect();
        let vv = g.constant(t.v.clone());
        let ev = g.constant(t.e.clone());
        let sv = g.constant(t.s.clone());
        let out = cmsa_forward(&mut g, &t.params, &t.cfg, &pv, vv, ev, sv, &[true, true]).unwrap();
        assert_eq!(g.shape(out.pooled), &[2, 2, 3 + 4 + 8]);
        assert_eq!(g.shape(out.word_attn), &[2]);
        assert_eq!(g.shape(out.scores), &[8, 8]);
    }

    #[test]
    fn forward_word_permutation_equivariance() {
        let t = toy(32, 3, 4, 2, 2, 2, 3);
        let (pooled, wa) = run_forward(&t, &t.e, &[true, true]);
        let mut swapped = Tensor::<f64>::zeros(&[2, 4]);
        swapped.data_mut()[..4].copy_from_slice(&t.e.data()[4..8]);
        swapped.data_mut()[4..8].copy_from_slice(&t.e.data()[..4]);
        let (pooled2, wa2) = run_forward(&t, &swapped, &[true, true]);
        for (a, b) in pooled.iter().zip(pooled2.iter()) {
            assert!((a - b).abs() < 1e-9, "pooled changed under permutation");
        }
        assert!((wa[0] - wa2[1]).abs() < 1e-9);
        assert!((wa[1] - wa2[0]).abs() < 1e-9);
    }

    #[test]
    fn padded_masked_forward_equals_sliced_forward() {
        let t = toy(33, 3, 4, 2, 2, 2, 3);
        let (pooled, wa) = run_forward(&t, &t.e, &[true, true]);
        // Same two words plus two zero PAD rows, masked out.
        let mut padded = Tensor::<f64>::zeros(&[4, 4]);
        padded.data_mut()[..8].copy_from_slice(t.e.data());
        let (pooled_p, wa_p) = run_forward(&t, &padded, &[true, true, false, false]);
        for (a, b) in pooled.iter().zip(pooled_p.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((wa[0] - wa_p[0]).abs() < 1e-9);
        assert!((wa[1] - wa_p[1]).abs() < 1e-9);
        assert_eq!(wa_p[2], 0.0);
        assert_eq!(wa_p[3], 0.0);
    }

    #[test]
    fn zero_w_vhat_block_is_identity_on_f() {
        // With W_vhat = 0 the residual path returns F exactly; pooling with
        // any convex weights over identical per-word visual components keeps
        // the visual sub-vector intact. Check at the row level.
        let mut rng = Rng::new(34);
        let mut store = ParamStore::<f64>::new();
        let c = 3 + 4 + 8;
        let params = CmsaParams::init(&mut store, "cmsa", c, 3, &mut rng);
        *store.get_mut(params.w_vhat) = Tensor::zeros(&[c, 3]);
        let mut g = Graph::<f64>::new();
        let pv: Vec<Var> = store.iter().map(|(_, t)| g.leaf(t.clone(), false)).collect();
        let f_rows = g.constant(rand_t(&[8, c], 35));
        let (q, k, v) = project_qkv(
            &mut g,
            f_rows,
            pv[params.w_q.index()],
            pv[params.w_k.index()],
            pv[params.w_v.index()],
        )
        .unwrap();
        let (vhat, _) = attention(&mut g, q, k, v, None, false).unwrap();
        let fhat = residual_transform(&mut g, vhat, f_rows, pv[params.w_vhat.index()]).unwrap();
        assert_eq!(g.value(fhat).data(), g.value(f_rows).data());
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        // End-to-end toy: gradients w.r.t. all four projection matrices and
        // the inputs.
        let t = toy(36, 2, 3, 2, 1, 2, 2);
        let inputs: Vec<Tensor<f64>> = t
            .store
            .iter()
            .map(|(_, x)| x.clone())
            .chain([t.v.clone(), t.e.clone()])
            .collect();
        let worst = crate::gradcheck::check_gradients_detailed(&inputs, 1e-5, |g, vars| {
            let pv = &vars[..4];
            let vv = vars[4];
            let ev = vars[5];
            let sv = g.constant(t.s.clone());
            let out = cmsa_forward(
                g,
                &CmsaParams {
                    w_q: ParamId(0),
                    w_k: ParamId(1),
                    w_v: ParamId(2),
                    w_vhat: ParamId(3),
                },
                &t.cfg,
                pv,
                vv,
                ev,
                sv,
                &[true, true],
            )?;
            let sq = g.mul(out.pooled, out.pooled)?;
            let axes: Vec<usize> = (0..3).collect();
            g.mean(sq, &axes, false)
        })
        .unwrap();
        assert!(worst.rel_error < 1e-3, "cmsa fd worst {worst:?}");
    }

    #[test]
    fn row_blocked_attention_is_bitwise_identical() {
        for seed in 50..55u64 {
            let mut rng = Rng::new(seed);
            let r = 6;
            let d_k = 3;
            let q = Tensor::<f64>::rand_uniform(&[r, d_k], -2.0, 2.0, &mut rng);
            let k = Tensor::<f64>::rand_uniform(&[r, d_k], -2.0, 2.0, &mut rng);
            let v = Tensor::<f64>::rand_uniform(&[r, d_k], -2.0, 2.0, &mut rng);
            let mut g = Graph::<f64>::new();
            let qv = g.constant(q.clone());
            let kv = g.constant(k.clone());
            let vv = g.constant(v.clone());
            let (vhat, _) = attention(&mut g, qv, kv, vv, None, false).unwrap();
            let blocked = attention_row_blocked(&q, &k, &v, None, false).unwrap();
            assert_eq!(g.value(vhat).data(), blocked.data(), "seed {seed}");
        }
    }

    #[test]
    fn attention_matrix_rows_and_csv() {
        let levels = [
            vec![0.5f64, 0.5],
            vec![0.25, 0.75],
            vec![1.0, 0.0],
        ];
        let m = word_attention_matrix(&levels).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        for row in 0..3 {
            let sum: f64 = (0..2).map(|c| m.at(&[row, c])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let csv = word_attention_csv(&m);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("0.500000,0.500000"));

        let ones = [vec![1.0f64], vec![1.0], vec![1.0]];
        let m1 = word_attention_matrix(&ones).unwrap();
        assert_eq!(m1.shape(), &[3, 1]);
        assert!(m1.data().iter().all(|&x| x == 1.0));
    }
}
