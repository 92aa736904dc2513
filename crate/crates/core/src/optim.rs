//! Named parameter storage, the Adam optimizer and the polynomial
//! learning-rate policy.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, insertion-ordered container of named learnable tensors.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Adam hyperparameters. Weight decay is the classic L2 form added to the
/// gradient before the moment updates.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers plus the shared step counter.
pub struct AdamState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        AdamState {
            m: store.tensors.iter().map(|t| vec![T::zero(); t.numel()]).collect(),
            v: store.tensors.iter().map(|t| vec![T::zero(); t.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[T], &[T]) {
        (&self.m[id.0], &self.v[id.0])
    }

    /// Overwrite both moment buffers, e.g. when resuming from a checkpoint.
    pub fn set_moments(&mut self, id: ParamId, m: Vec<T>, v: Vec<T>) -> Result<()> {
        if m.len() != self.m[id.0].len() || v.len() != self.v[id.0].len() {
            return Err(Error::Shape(format!(
                "moment buffer length mismatch for parameter {}",
                id.0
            )));
        }
        self.m[id.0] = m;
        self.v[id.0] = v;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One bias-corrected Adam update over `ids`. `grads` is indexed by
    /// parameter position; every listed parameter must have a gradient.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        ids: &[ParamId],
        grads: &[Option<Vec<T>>],
        lr: f64,
        hp: &AdamHyper,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::from_f64(hp.beta1);
        let b2 = T::from_f64(hp.beta2);
        let one = T::one();
        let eps = T::from_f64(hp.eps);
        let wd = T::from_f64(hp.weight_decay);
        let lr_t = T::from_f64(lr);
        let bias1 = T::from_f64(1.0 - hp.beta1.powf(t));
        let bias2 = T::from_f64(1.0 - hp.beta2.powf(t));
        for &id in ids {
            let grad = grads
                .get(id.0)
                .and_then(|g| g.as_ref())
                .ok_or_else(|| {
                    Error::Usage(format!(
                        "adam update: parameter '{}' has no gradient",
                        store.name(id)
                    ))
                })?;
            let theta = store.tensors[id.0].data_mut();
            if grad.len() != theta.len() {
                return Err(Error::Shape(format!(
                    "adam update: gradient length {} != parameter length {}",
                    grad.len(),
                    theta.len()
                )));
            }
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..theta.len() {
                let g = grad[i] + wd * theta[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Polynomial learning-rate decay: base * (1 - iter/max_iter)^power.
/// Iterations past `max_iter` clamp to zero.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}
