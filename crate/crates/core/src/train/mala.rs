//! Metropolis-adjusted Langevin sampling from `p(y) ∝ exp(-s(y))`.

use log::info;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MalaConfig {
    /// Step size `h` in standardized units.
    pub step: f64,
    pub burn_in: usize,
    /// Chains (samples) per data point.
    pub chains: usize,
}

impl Default for MalaConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            burn_in: 100,
            chains: 16,
        }
    }
}

/// Log acceptance probability of moving `y -> y'` under the Langevin
/// proposal `y' = y - h ∇s(y) + sqrt(2h) ξ`.
pub fn log_accept(
    y: &[f64],
    s_y: f64,
    g_y: &[f64],
    y_prop: &[f64],
    s_prop: f64,
    g_prop: &[f64],
    h: f64,
) -> f64 {
    // log q(y | y') - log q(y' | y)
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for i in 0..y.len() {
        fwd += (y_prop[i] - y[i] + h * g_y[i]).powi(2);
        bwd += (y[i] - y_prop[i] + h * g_prop[i]).powi(2);
    }
    (s_y - s_prop + (fwd - bwd) / (4.0 * h)).min(0.0)
}

/// Energy with gradient.
pub trait Energy {
    fn energy_grad(&self, y: &[f64]) -> (f64, Vec<f64>);
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Energy for F {
    fn energy_grad(&self, y: &[f64]) -> (f64, Vec<f64>) {
        self(y)
    }
}

/// Sampler with a step size that adapts between batches.
#[derive(Debug, Clone)]
pub struct Mala {
    pub step: f64,
    proposed: u64,
    accepted: u64,
}

impl Mala {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            proposed: 0,
            accepted: 0,
        }
    }

    /// Runs one chain for `steps` transitions from `init`; returns the final state.
    pub fn run(
        &mut self,
        energy: &impl Energy,
        init: &[f64],
        steps: usize,
        rng: &mut impl Rng,
    ) -> Vec<f64> {
        let h = self.step;
        let noise = (2.0 * h).sqrt();
        let mut y = init.to_vec();
        let (mut s, mut g) = energy.energy_grad(&y);
        for _ in 0..steps {
            let prop: Vec<f64> = y
                .iter()
                .zip(&g)
                .map(|(yi, gi)| {
                    let xi: f64 = StandardNormal.sample(rng);
                    yi - h * gi + noise * xi
                })
                .collect();
            let (sp, gp) = energy.energy_grad(&prop);
            self.proposed += 1;
            if !sp.is_finite() {
                continue;
            }
            let la = log_accept(&y, s, &g, &prop, sp, &gp, h);
            if rng.random::<f64>().ln() < la {
                y = prop;
                s = sp;
                g = gp;
                self.accepted += 1;
            }
        }
        y
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }

    /// Shrinks or grows the step when the acceptance rate left `[0.2, 0.8]`,
    /// then resets the counters.
    pub fn adapt(&mut self) {
        if let Some(rate) = self.acceptance_rate() {
            let old = self.step;
            if rate < 0.2 {
                self.step *= 0.7;
            } else if rate > 0.8 {
                self.step *= 1.3;
            }
            if self.step != old {
                info!(
                    "MALA acceptance {rate:.2}: step {old:.4} -> {:.4}",
                    self.step
                );
            }
        }
        self.proposed = 0;
        self.accepted = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_matches_hand_computation() {
        // s(y) = y²/2 in 1-D, h = 0.1
        let h = 0.1;
        // y = 1 -> 2: forward (2 - 1 + 0.1)² = 1.21, backward (1 - 2 + 0.2)² = 0.64
        let la = log_accept(&[1.0], 0.5, &[1.0], &[2.0], 2.0, &[2.0], h);
        assert!((la - (-1.5 + 0.57 / 0.4)).abs() < 1e-14, "{la}");
        // y = 1 -> 0.5 is uphill in probability: always accepted
        assert_eq!(
            log_accept(&[1.0], 0.5, &[1.0], &[0.5], 0.125, &[0.5], h),
            0.0
        );
    }
}
