//! Parameterized building blocks shared by the encoder, heads and autoencoder.

use crate::error::Result;
use crate::numerics::ops::{layer_norm, layer_norm_backward, LayerNormCache};
use crate::numerics::{Parameter, Params, Tensor};
use crate::rng::Rng;

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Affine map `y = x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Parameter::zeros(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: Parameter::zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(name, fan_in, fan_out);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in layer.weight.value.data_mut() {
            *w = rng.uniform(-limit, limit);
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight.value)?;
        y.add_row_vector(self.bias.value.data());
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Result<Tensor> {
        x.t_matmul_acc(gy, &mut self.weight.grad)?;
        self.bias.accumulate(&gy.sum_rows());
        gy.matmul_t(&self.weight.value)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: Parameter::zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm(x, self.gamma.value.data(), self.beta.value.data(), LN_EPS)
    }

    pub fn backward(&mut self, cache: &LayerNormCache, gy: &Tensor) -> Tensor {
        let (dx, dg, db) = layer_norm_backward(cache, self.gamma.value.data(), gy);
        self.gamma.accumulate(&dg);
        self.beta.accumulate(&db);
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error};

    #[test]
    fn linear_gradients() {
        let mut rng = Rng::new(3);
        let mut lin = Linear::glorot("l", 4, 3, &mut rng);
        for b in lin.bias.value.data_mut() {
            *b = rng.uniform(-1.0, 1.0);
        }
        let x = Tensor::matrix(2, 4, (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let w = Tensor::matrix(2, 3, (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let dx = lin.backward(&x, &w).unwrap();

        let probe = lin.clone();
        let loss = |l: &Linear, x: &Tensor| {
            l.forward(x).unwrap().zip_map(&w, |a, b| a * b).unwrap().sum()
        };
        let nx = finite_difference_gradient(|t| loss(&probe, t), &x, 1e-5);
        assert!(relative_error(dx.data(), nx.data()) < 1e-6);
        let nw = finite_difference_gradient(
            |t| {
                let mut l = probe.clone();
                l.weight.value = t.clone();
                loss(&l, &x)
            },
            &probe.weight.value,
            1e-5,
        );
        assert!(relative_error(lin.weight.grad.data(), nw.data()) < 1e-6);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = Rng::new(1);
        let lin = Linear::glorot("l", 10, 6, &mut rng);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(lin.weight.value.data().iter().all(|w| w.abs() <= limit));
        assert!(lin.bias.value.data().iter().all(|&b| b == 0.0));
    }
}
