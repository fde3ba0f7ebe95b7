use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, relu_inplace, Mat, Param, Parameterized};

/// Fully connected layer `y = x Wᵀ + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Linear {
            inputs,
            outputs,
            weight: Param::uniform(inputs * outputs, bound, rng),
            bias: Param::uniform(outputs, bound, rng),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear { inputs, outputs, weight: Param::zeros(inputs * outputs), bias: Param::zeros(outputs) }
    }

    fn weight_mat(&self) -> Mat {
        Mat::from_vec(self.outputs, self.inputs, self.weight.value.clone())
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.inputs, "linear input width");
        let mut y = Mat::broadcast_row(&self.bias.value, x.rows);
        gemm(1.0, x, false, &self.weight_mat(), true, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients given the layer input `x` and the
    /// output gradient `dy`; returns the input gradient.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.weight.ensure_grad();
        self.bias.ensure_grad();
        let mut dw = Mat::from_vec(self.outputs, self.inputs, std::mem::take(&mut self.weight.grad));
        gemm(1.0, dy, true, x, false, 1.0, &mut dw);
        self.weight.grad = dw.data;
        for (g, s) in self.bias.grad.iter_mut().zip(dy.column_sums()) {
            *g += s;
        }
        let mut dx = Mat::zeros(dy.rows, self.inputs);
        gemm(1.0, dy, false, &self.weight_mat(), false, 0.0, &mut dx);
        dx
    }
}

impl Parameterized for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Stack of linear layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Inputs seen by each layer during a taped forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Mat>,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Zeroes the last layer so the network starts out as the zero map.
    pub fn zero_last(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.value.fill(0.0);
        last.bias.value.fill(0.0);
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            relu_inplace(&mut h);
            h = layer.forward(&h);
        }
        h
    }

    pub fn forward_tape(&self, x: &Mat) -> (Mat, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            relu_inplace(&mut h);
            let next = layer.forward(&h);
            inputs.push(h);
            h = next;
        }
        (h, MlpTape { inputs })
    }

    pub fn backward(&mut self, tape: &MlpTape, dy: &Mat) -> Mat {
        let mut grad = dy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let x = &tape.inputs[i];
            grad = layer.backward(x, &grad);
            if i > 0 {
                // x is a ReLU output, so it is positive exactly where the unit was active
                for (g, v) in grad.data.iter_mut().zip(&x.data) {
                    if *v <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
        grad
    }
}

impl Parameterized for Mlp {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::numeric_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // loss = sum(y * probe) so dy = probe
    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[3, 5, 4, 2], &mut rng);
        let x = random_mat(4, 3, &mut rng);
        let probe = random_mat(4, 2, &mut rng);

        mlp.zero_grad();
        let (_, tape) = mlp.forward_tape(&x);
        let dx = mlp.backward(&tape, &probe);
        let analytic = mlp.flat_grads();

        let theta = mlp.flat_values();
        let mut scratch = mlp.clone();
        let numeric = numeric_gradient(&theta, 1e-6, |t| {
            scratch.load_flat(t).unwrap();
            let y = scratch.forward(&x);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }

        let numeric_x = numeric_gradient(&x.data, 1e-6, |xs| {
            let y = mlp.forward(&Mat::from_vec(4, 3, xs.to_vec()));
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        });
        for (a, n) in dx.data.iter().zip(&numeric_x) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn zeroed_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new(&[2, 8, 3], &mut rng);
        mlp.zero_last();
        let y = mlp.forward(&random_mat(5, 2, &mut rng));
        assert!(y.data.iter().all(|v| *v == 0.0));
    }
}
