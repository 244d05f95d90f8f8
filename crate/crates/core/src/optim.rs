//! Named parameters and the Adam optimizer (decoupled weight decay).

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CroError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Serializes names and optimizer settings only; values travel separately
/// through [`ParamStore::shape_table`], [`ParamStore::flat_values`] and
/// [`ParamStore::restore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    #[serde(skip)]
    values: Vec<Tensor>,
    #[serde(skip)]
    first_moment: Vec<Tensor>,
    #[serde(skip)]
    second_moment: Vec<Tensor>,
    step: u64,
    pub adam: AdamConfig,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let (r, c) = (value.rows(), value.cols());
        self.names.push(name.into());
        self.values.push(value);
        self.first_moment.push(Tensor::zeros(r, c));
        self.second_moment.push(Tensor::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    /// He-normal initialised `[rows, cols]` weight.
    pub fn add_random(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (2.0 / cols.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(vec![rows, cols], data).expect("shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// `(name, shape)` per parameter, in id order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Every parameter, row-major, concatenated in id order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|v| v.data().iter().copied())
            .collect()
    }

    /// Refills values (and zeroes the moments) from a shape table and flat data.
    /// The table must name the same parameters in the same order.
    pub fn restore(&mut self, table: &[(String, Vec<usize>)], data: &[f64]) -> Result<()> {
        if table.len() != self.names.len() {
            return Err(CroError::Shape(format!(
                "shape table lists {} parameters, model has {}",
                table.len(),
                self.names.len()
            )));
        }
        let total: usize = table.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if total != data.len() {
            return Err(CroError::Shape(format!(
                "shape table needs {total} values, got {}",
                data.len()
            )));
        }
        let mut values = Vec::with_capacity(table.len());
        let mut offset = 0;
        for ((name, shape), own) in table.iter().zip(&self.names) {
            if name != own {
                return Err(CroError::Shape(format!(
                    "parameter `{name}` where `{own}` was expected"
                )));
            }
            let len: usize = shape.iter().product();
            values.push(Tensor::new(
                shape.clone(),
                data[offset..offset + len].to_vec(),
            )?);
            offset += len;
        }
        self.first_moment = values
            .iter()
            .map(|v| Tensor::new(v.shape().to_vec(), vec![0.0; v.len()]))
            .collect::<Result<_>>()?;
        self.second_moment = self.first_moment.clone();
        self.values = values;
        Ok(())
    }

    /// Forget optimizer state (used when a new training stage starts from a
    /// pretrained model).
    pub fn reset_moments(&mut self) {
        for (m, v) in self.first_moment.iter_mut().zip(&mut self.second_moment) {
            m.data_mut().fill(0.0);
            v.data_mut().fill(0.0);
        }
        self.step = 0;
    }

    /// One Adam step. Parameters absent from `grads` get a zero gradient.
    ///
    /// Returns `false` (and leaves everything untouched) if any gradient is
    /// non-finite.
    pub fn adam_step(&mut self, grads: &[(ParamId, Tensor)]) -> bool {
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            warn!("non-finite gradient, skipping optimizer step");
            return false;
        }
        for (id, g) in grads {
            assert!(
                g.same_shape(&self.values[id.0]),
                "gradient for `{}` has shape {:?}, parameter has {:?}",
                self.names[id.0],
                g.shape(),
                self.values[id.0].shape()
            );
        }
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.adam.clone();
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut grad_of = vec![None; self.values.len()];
        for (id, g) in grads {
            grad_of[id.0] = Some(g);
        }
        for k in 0..self.values.len() {
            let theta = self.values[k].data_mut();
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for j in 0..theta.len() {
                let gj = grad_of[k].map_or(0.0, |g| g.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * theta[j]);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[1.5, -2.0]));
        store.adam_step(&[(id, Tensor::zeros(1, 2))]);
        assert_eq!(store.get(id).data(), &[1.5, -2.0]);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.adam.lr = 0.1;
        let id = store.add("w", Tensor::scalar(0.0));
        store.adam_step(&[(id, Tensor::scalar(1.0))]);
        assert!((store.get(id).item() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.adam.lr = 0.05;
        let id = store.add("w", Tensor::scalar(2.0));
        for _ in 0..1000 {
            let theta = store.get(id).item();
            store.adam_step(&[(id, Tensor::scalar(2.0 * theta))]);
        }
        assert!(
            store.get(id).item().abs() < 1e-3,
            "{}",
            store.get(id).item()
        );
    }

    #[test]
    fn nan_gradient_skips_update() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        assert!(!store.adam_step(&[(id, Tensor::scalar(f64::NAN))]));
        assert_eq!(store.get(id).item(), 1.0);
        assert_eq!(store.step_count(), 0);
    }
}
