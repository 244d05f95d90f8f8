//! Three-component 4-D Gaussian mixture for the synthetic portfolio task.
//! The first two coordinates are features, the last two are returns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CroError, Result};
use crate::models::cholesky_packed;
use crate::problems::data::Dataset;
use crate::tensor::Tensor;

const DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSpec {
    pub phi: f64,
    pub alpha: f64,
    pub sigma_a: [[f64; DIM]; DIM],
    pub means: [[f64; DIM]; 3],
}

impl Default for GmmSpec {
    fn default() -> Self {
        Self {
            phi: 0.7,
            alpha: 0.9,
            sigma_a: [
                [1.0, 0.0, 0.37, 0.0],
                [0.0, 1.5, 0.0, 0.0],
                [0.37, 0.0, 2.0, 0.73],
                [0.0, 0.0, 0.73, 3.0],
            ],
            means: [
                [0.0, 0.0, 0.0, 0.0],
                [1.0, 1.0, 1.0, -1.0],
                [-1.0, 1.0, -1.0, 1.0],
            ],
        }
    }
}

impl GmmSpec {
    /// `(p_a, p_b, p_c)`.
    pub fn weights(&self) -> [f64; 3] {
        let rest = 1.0 - self.phi;
        [
            self.phi,
            rest / (self.alpha + 1.0),
            self.alpha * rest / (self.alpha + 1.0),
        ]
    }

    /// `Σ_a`, `α Σ_a`, `Σ_a / α` as row-major 4x4 matrices.
    pub fn covariances(&self) -> [Vec<f64>; 3] {
        let flat: Vec<f64> = self.sigma_a.iter().flatten().copied().collect();
        [
            flat.clone(),
            flat.iter().map(|v| v * self.alpha).collect(),
            flat.iter().map(|v| v / self.alpha).collect(),
        ]
    }

    /// Packed Cholesky factors of the three covariances; errors if any is not PD.
    pub fn factors(&self) -> Result<[Vec<f64>; 3]> {
        if !(0.0..=1.0).contains(&self.phi) || self.alpha <= 0.0 {
            return Err(CroError::InvalidArgument(format!(
                "mixture needs phi in [0, 1] and alpha > 0 (got {}, {})",
                self.phi, self.alpha
            )));
        }
        let [a, b, c] = self.covariances();
        Ok([
            cholesky_packed(&a, DIM)?,
            cholesky_packed(&b, DIM)?,
            cholesky_packed(&c, DIM)?,
        ])
    }

    /// Draws `n` rows: component label, then a Gaussian vector split into
    /// `x = v[..2]`, `y = v[2..]`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let (ds, _) = self.sample_labeled(n, seed)?;
        Ok(ds)
    }

    pub fn sample_labeled(&self, n: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
        let factors = self.factors()?;
        let w = self.weights();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(2 * n);
        let mut ys = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let k = if u < w[0] {
                0
            } else if u < w[0] + w[1] {
                1
            } else {
                2
            };
            let e: [f64; DIM] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let l = &factors[k];
            let mut v = self.means[k];
            for i in 0..DIM {
                for j in 0..=i {
                    v[i] += l[i * (i + 1) / 2 + j] * e[j];
                }
            }
            xs.extend_from_slice(&v[..2]);
            ys.extend_from_slice(&v[2..]);
            labels.push(k);
        }
        let ds = Dataset::new(
            Tensor::new(vec![n, 2], xs)?,
            Tensor::new(vec![n, 2], ys)?,
            None,
        )?;
        Ok((ds, labels))
    }
}
