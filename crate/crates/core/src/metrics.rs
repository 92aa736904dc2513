//! Segmentation evaluation metrics: per-sample IoU, dataset-level overall
//! IoU, mean IoU and prec@X.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Thresholds reported as prec@X.
pub const PREC_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Intersection and union pixel counts of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    /// Both-empty masks count as a perfect match.
    pub fn ratio(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Count intersection and union of two binary masks (values 0 or 1).
pub fn iou_counts<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<IouCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let half = T::from_f64(0.5);
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        let p = p > half;
        let g = g > half;
        if p && g {
            intersection += 1;
        }
        if p || g {
            union += 1;
        }
    }
    Ok(IouCounts {
        intersection,
        union,
    })
}

/// Intersection-over-union of two binary masks; both-empty gives 1.0.
pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    Ok(iou_counts(pred, gt)?.ratio())
}

/// Dataset-level ratio: sum of intersections over sum of unions.
pub fn overall_iou(samples: &[IouCounts]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("overall_iou over an empty sample set".into()));
    }
    let inter: u64 = samples.iter().map(|c| c.intersection).sum();
    let union: u64 = samples.iter().map(|c| c.union).sum();
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Arithmetic mean of per-sample IoU values.
pub fn mean_iou(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Usage("mean_iou over an empty sample set".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Fraction of samples with IoU strictly greater than `x`.
pub fn prec_at(ious: &[f64], x: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Usage("prec_at over an empty sample set".into()));
    }
    if !(0.0 < x && x < 1.0) {
        return Err(Error::Usage(format!("prec threshold {x} outside (0,1)")));
    }
    Ok(ious.iter().filter(|&&v| v > x).count() as f64 / ious.len() as f64)
}

/// Aggregated evaluation results plus the per-sample IoU list.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub overall_iou: f64,
    pub mean_iou: f64,
    /// (threshold, fraction) pairs in ascending threshold order.
    pub prec: Vec<(f64, f64)>,
    pub per_sample: Vec<f64>,
}

impl EvalReport {
    pub fn from_counts(samples: &[IouCounts]) -> Result<Self> {
        let per_sample: Vec<f64> = samples.iter().map(|c| c.ratio()).collect();
        let prec = PREC_THRESHOLDS
            .iter()
            .map(|&x| prec_at(&per_sample, x).map(|v| (x, v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            overall_iou: overall_iou(samples)?,
            mean_iou: mean_iou(&per_sample)?,
            prec,
            per_sample,
        })
    }

    /// Flat key=value rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("overall_iou={:.6}\n", self.overall_iou));
        out.push_str(&format!("mean_iou={:.6}\n", self.mean_iou));
        for (x, v) in &self.prec {
            out.push_str(&format!("prec@{x}={v:.6}\n"));
        }
        out.push_str(&format!("samples={}\n", self.per_sample.len()));
        out
    }

    /// CSV of per-sample IoU values: header then one row per sample.
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("sample,iou\n");
        for (i, v) in self.per_sample.iter().enumerate() {
            out.push_str(&format!("{i},{v:.6}\n"));
        }
        out
    }
}
