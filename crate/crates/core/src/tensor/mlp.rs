use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;

use super::grid::Grid;
use super::layers::{
    affine_backward, affine_backward_step, affine_forward, LayerGrads, LayerParams,
};

/// Two fully connected layers: leaky-rectified hidden layer, linear output.
/// Output heads (sigmoid, softmax) live in the loss functions.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    pub hidden: LayerParams,
    pub output: LayerParams,
    pub leak: f64,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct NetTrace {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

fn glorot(fan_out: usize, fan_in: usize, rng: &mut impl Rng) -> LayerParams {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new(-a, a).expect("valid glorot range");
    LayerParams {
        weights: Grid::from_fn(&[fan_out, fan_in], |_| dist.sample(rng)),
        biases: Grid::zeros(&[fan_out]),
        tied: false,
    }
}

impl TwoLayerNet {
    pub fn new(input: usize, hidden: usize, output: usize, leak: f64, rng: &mut impl Rng) -> Self {
        TwoLayerNet {
            hidden: glorot(hidden, input, rng),
            output: glorot(output, hidden, rng),
            leak,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.output.fan_out()
    }

    pub fn forward(&self, x: &[f64]) -> Result<NetTrace> {
        let hidden_pre = affine_forward(x, &self.hidden)?;
        let hidden: Vec<f64> = hidden_pre
            .iter()
            .map(|&z| if z > 0.0 { z } else { self.leak * z })
            .collect();
        let output = affine_forward(&hidden, &self.output)?;
        Ok(NetTrace {
            hidden_pre,
            hidden,
            output,
        })
    }

    fn hidden_grad(&self, trace: &NetTrace, grad_hidden: &mut [f64]) {
        for (g, &z) in grad_hidden.iter_mut().zip(&trace.hidden_pre) {
            if z <= 0.0 {
                *g *= self.leak;
            }
        }
    }

    /// Parameter gradients for a given gradient on the output.
    pub fn gradients(
        &self,
        x: &[f64],
        trace: &NetTrace,
        grad_output: &[f64],
    ) -> Result<(LayerGrads, LayerGrads)> {
        let (g_out, mut g_hidden) = affine_backward(&trace.hidden, &self.output, grad_output)?;
        self.hidden_grad(trace, &mut g_hidden);
        let (g_in, _) = affine_backward(x, &self.hidden, &g_hidden)?;
        Ok((g_in, g_out))
    }

    /// Forward, loss, backward and SGD update in one pass. `loss` maps the
    /// output to `(loss, d loss / d output)`.
    pub fn train_step<F>(&mut self, x: &[f64], learning_rate: f64, loss: F) -> Result<f64>
    where
        F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let trace = self.forward(x)?;
        let (value, grad_output) = loss(&trace.output)?;
        let mut g_hidden = affine_backward_step(
            &trace.hidden,
            &mut self.output,
            &grad_output,
            learning_rate,
            true,
        )?;
        self.hidden_grad(&trace, &mut g_hidden);
        affine_backward_step(x, &mut self.hidden, &g_hidden, learning_rate, false)?;
        Ok(value)
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.output.num_params()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.hidden.flat();
        v.extend(self.output.flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.hidden.num_params();
        self.hidden.set_flat(&flat[..n]);
        self.output.set_flat(&flat[n..]);
    }

    pub fn fingerprint(&self) -> u64 {
        self.hidden.fingerprint() ^ self.output.fingerprint().rotate_left(31)
    }
}
