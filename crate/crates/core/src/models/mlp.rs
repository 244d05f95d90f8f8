use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected ReLU network; the last layer is linear.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    input: usize,
    output: usize,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let weight = store.add_random(format!("{prefix}.{k}.weight"), w[1], w[0], rng);
                let bias = store.add(format!("{prefix}.{k}.bias"), Tensor::zeros(1, w[1]));
                (weight, bias)
            })
            .collect();
        Self {
            layers,
            input,
            output,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn output_width(&self) -> usize {
        self.output
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Bias of the output layer (useful for output initialisation).
    pub fn output_bias(&self) -> ParamId {
        self.layers.last().expect("at least one layer").1
    }

    pub fn output_weight(&self) -> ParamId {
        self.layers.last().expect("at least one layer").0
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let z = tape.matmul_t(h, wv)?;
            h = tape.add_row(z, bv)?;
            if k < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
