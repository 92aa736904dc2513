//! Naive nested-loop reference implementations used to verify the
//! vectorized attention paths. These mirror the math with explicit index
//! quadruples and are deliberately independent of the graph engine.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention over joint (position, slot) cells with explicit loops.
///
/// `q`, `k`, `v` are [R, d_k] with rows laid out position-major,
/// slot-minor (R = cells * slots). The raw score between output row
/// r = (p, n) and summed column c = (p', n') is q_c . k_r; each row is
/// normalized over its unmasked columns, masked columns are exactly zero.
/// Returns (vhat [R, d_k], scores [R, R]).
pub fn attention_reference<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cells: usize,
    slots: usize,
    col_mask: Option<&[bool]>,
    scaled: bool,
) -> (Tensor<T>, Tensor<T>) {
    let r = cells * slots;
    let d_k = q.shape()[1];
    assert_eq!(q.shape(), &[r, d_k]);
    assert_eq!(k.shape(), q.shape());
    assert_eq!(v.shape(), q.shape());
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let scale = if scaled {
        1.0 / (d_k as f64).sqrt()
    } else {
        1.0
    };

    let valid = |c: usize| col_mask.map_or(true, |m| m[c]);

    let mut scores = vec![T::zero(); r * r];
    for p in 0..cells {
        for n in 0..slots {
            let row = p * slots + n;
            for pp in 0..cells {
                for nn in 0..slots {
                    let col = pp * slots + nn;
                    let mut dot = 0.0f64;
                    for d in 0..d_k {
                        dot += qd[col * d_k + d].as_f64() * kd[row * d_k + d].as_f64();
                    }
                    scores[row * r + col] = T::from_f64(dot * scale);
                }
            }
        }
    }

    let mut a = vec![T::zero(); r * r];
    for row in 0..r {
        let mut max = f64::NEG_INFINITY;
        for col in 0..r {
            if valid(col) {
                max = max.max(scores[row * r + col].as_f64());
            }
        }
        let mut denom = 0.0f64;
        for col in 0..r {
            if valid(col) {
                denom += (scores[row * r + col].as_f64() - max).exp();
            }
        }
        for col in 0..r {
            if valid(col) {
                a[row * r + col] =
                    T::from_f64((scores[row * r + col].as_f64() - max).exp() / denom);
            }
        }
    }

    let mut vhat = vec![T::zero(); r * d_k];
    for row in 0..r {
        for col in 0..r {
            let w = a[row * r + col].as_f64();
            for d in 0..d_k {
                let slot = row * d_k + d;
                vhat[slot] = T::from_f64(vhat[slot].as_f64() + w * vd[col * d_k + d].as_f64());
            }
        }
    }

    (
        Tensor::new(vec![r, d_k], vhat).unwrap(),
        Tensor::new(vec![r, r], a).unwrap(),
    )
}

/// Per-slot attention summary: for slot n, sum the normalized scores over
/// its rows and all columns, then softmax over the valid slots.
pub fn slot_attention_reference<T: Scalar>(
    a: &Tensor<T>,
    cells: usize,
    slots: usize,
    slot_mask: &[bool],
) -> Vec<T> {
    let r = cells * slots;
    assert_eq!(a.shape(), &[r, r]);
    let ad = a.data();
    let mut sums = vec![0.0f64; slots];
    for p in 0..cells {
        for n in 0..slots {
            let row = p * slots + n;
            for col in 0..r {
                sums[n] += ad[row * r + col].as_f64();
            }
        }
    }
    let mut max = f64::NEG_INFINITY;
    for n in 0..slots {
        if slot_mask[n] {
            max = max.max(sums[n]);
        }
    }
    let mut denom = 0.0f64;
    for n in 0..slots {
        if slot_mask[n] {
            denom += (sums[n] - max).exp();
        }
    }
    (0..slots)
        .map(|n| {
            if slot_mask[n] {
                T::from_f64((sums[n] - max).exp() / denom)
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Frame-major variant of [`attention_reference`] for cross-frame
/// attention: rows are (t, p) with t major, columns (t', p').
pub fn cfsa_attention_reference<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    frames: usize,
    cells: usize,
    scaled: bool,
) -> (Tensor<T>, Tensor<T>) {
    // Same math with (frames, cells) playing (cells, slots): rows t*cells+p.
    attention_reference(q, k, v, frames, cells, None, scaled)
}

/// Per-frame pooling weights: for frame t, sum scores over its rows and all
/// columns, then softmax over frames.
pub fn frame_weights_reference<T: Scalar>(
    a: &Tensor<T>,
    frames: usize,
    cells: usize,
) -> Vec<T> {
    let r = frames * cells;
    assert_eq!(a.shape(), &[r, r]);
    let ad = a.data();
    let mut sums = vec![0.0f64; frames];
    for t in 0..frames {
        for p in 0..cells {
            let row = t * cells + p;
            for col in 0..r {
                sums[t] += ad[row * r + col].as_f64();
            }
        }
    }
    let max = sums.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let denom: f64 = sums.iter().map(|&s| (s - max).exp()).sum();
    sums.iter().map(|&s| T::from_f64((s - max).exp() / denom)).collect()
}
