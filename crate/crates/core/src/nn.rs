//! Minimal dense layers: `f32` parameters, `f64` arithmetic.

use rand::Rng;

use crate::error::{PdfError, Result};
use crate::weights::{take_tensor, Tensor};

/// Affine map `y = W x + b` with `W` stored `[outputs, inputs]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    pub(crate) weight: Vec<f32>,
    pub(crate) bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        Self {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &DenseGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.iter().chain(&self.bias).copied()
    }
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit) as f32)
            .collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| {
                row.iter()
                    .zip(x)
                    .fold(f64::from(*b), |acc, (w, xi)| acc + f64::from(*w) * xi)
            })
            .collect()
    }

    /// Accumulates parameter gradients for one sample into `grad` and
    /// returns the gradient with respect to the input.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut DenseGrad) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                grad_in[i] += g * f64::from(row[i]);
            }
        }
        grad_in
    }

    /// Like [`Dense::backward`] but skips the input gradient.
    pub fn backward_params(&self, x: &[f64], grad_out: &[f64], grad: &mut DenseGrad) {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for (gw, xi) in grow.iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
    }

    /// `param <- param - step * grad`, rounded back to `f32`.
    pub fn descend(&mut self, grad: &DenseGrad, step: f64) {
        for (w, g) in self.weight.iter_mut().zip(&grad.weight) {
            *w = (f64::from(*w) - step * g) as f32;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b = (f64::from(*b) - step * g) as f32;
        }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        vec![
            Tensor {
                name: format!("{prefix}.weight"),
                dims: vec![self.outputs as u32, self.inputs as u32],
                data: self.weight.clone(),
            },
            Tensor {
                name: format!("{prefix}.bias"),
                dims: vec![self.outputs as u32],
                data: self.bias.clone(),
            },
        ]
    }

    pub fn from_tensors(tensors: &[Tensor], prefix: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let weight = take_tensor(
            tensors,
            &format!("{prefix}.weight"),
            &[outputs as u32, inputs as u32],
        )?;
        let bias = take_tensor(tensors, &format!("{prefix}.bias"), &[outputs as u32])?;
        Ok(Self {
            inputs,
            outputs,
            weight,
            bias,
        })
    }

    /// Mutable view over every parameter, weights first then biases.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = f32> + '_ {
        self.weight.iter().chain(&self.bias).copied()
    }
}

pub(crate) fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// Backprop through `y = tanh(x)` given `y`.
pub(crate) fn tanh_backward(y: &[f64], grad_out: &[f64]) -> Vec<f64> {
    y.iter().zip(grad_out).map(|(y, g)| g * (1.0 - y * y)).collect()
}

pub(crate) fn ensure_finite(values: &[f64], term: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(PdfError::Numeric { term })
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // index loops mirror the textbook sums
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Dense::glorot(5, 3, &mut rng);
        layer.bias = vec![0.1, -0.2, 0.3];
        let x = [0.5, -1.0, 2.0, 0.0, 0.25];
        let y = layer.forward(&x);
        for o in 0..3 {
            let mut acc = layer.bias[o] as f64;
            for i in 0..5 {
                acc += layer.weight[o * 5 + i] as f64 * x[i];
            }
            assert_eq!(y[o], acc);
        }
    }

    #[test]
    fn backward_matches_finite_difference_of_linear_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = Dense::glorot(4, 2, &mut rng);
        let x = [0.3, -0.7, 1.1, 0.2];
        let gout = [1.5, -0.5];
        let mut grad = DenseGrad::zeros_like(&layer);
        let gin = layer.backward(&x, &gout, &mut grad);
        // d(gout . y)/dx_i = sum_o gout_o W_oi
        for i in 0..4 {
            let expect: f64 = (0..2).map(|o| gout[o] * layer.weight[o * 4 + i] as f64).sum();
            assert!((gin[i] - expect).abs() < 1e-12);
        }
        assert_eq!(grad.bias, gout.to_vec());
        assert!((grad.weight[4 + 2] - gout[1] * x[2]).abs() < 1e-12);
    }
}
