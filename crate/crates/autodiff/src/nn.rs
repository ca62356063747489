//! Parameter containers for the learned components: dense MLPs and 2-D convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anything holding trainable tensors, visited in a fixed order.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

impl Module for Tensor {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("tensor".to_string(), self)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![self]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, act: Activation, rng: &mut R) -> Self {
        let bound = match act {
            Activation::Relu => (6.0 / input as f64).sqrt(),
            _ => (6.0 / (input + output) as f64).sqrt(),
        };
        Self {
            weight: Tensor::uniform(&[input, output], bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Multi-layer perceptron: `activation` after every hidden layer,
/// `output_activation` after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub output_activation: Activation,
}

impl MlpParams {
    /// `dims = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    activation
                };
                Linear::new(w[0], w[1], act, rng)
            })
            .collect();
        Self {
            layers,
            activation,
            output_activation: Activation::Identity,
        }
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation, output_activation: Activation) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(AutodiffError::DimensionMismatch {
                    layer: i + 1,
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(AutodiffError::DimensionMismatch {
                    layer: i,
                    expected: l.output_dim(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Self {
            layers,
            activation,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(&l.weight, trainable), tape.param(&l.bias, trainable)))
                .collect(),
            activation: self.activation,
            output_activation: self.output_activation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }
}

impl Module for MlpParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), &l.weight));
            out.push((format!("layers.{i}.bias"), &l.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// [`MlpParams`] placed on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub activation: Activation,
    pub output_activation: Activation,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let expected = tape.value(w).shape()[0];
            let got = tape.value(h).cols();
            if expected != got {
                return Err(AutodiffError::DimensionMismatch {
                    layer: i,
                    expected,
                    got,
                });
            }
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
            let act = if i == last {
                self.output_activation
            } else {
                self.activation
            };
            h = act.apply(tape, h);
        }
        Ok(h)
    }

    /// Leaves in [`Module::params_mut`] order.
    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Convenience wrapper: bind `params` as constants and run one forward pass.
pub fn mlp_forward(tape: &mut Tape, params: &MlpParams, input: Var) -> Result<Var> {
    params.bind(tape, false).forward(tape, input)
}

/// 2-D convolution with a `[co, ci, k, k]` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dParams {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: Tensor::uniform(&[cout, cin, kernel, kernel], (6.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ConvVars {
        ConvVars {
            weight: tape.param(&self.weight, trainable),
            bias: tape.param(&self.bias, trainable),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl Module for Conv2dParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl ConvVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.conv2d(x, self.weight, self.bias, self.stride, self.pad)
    }

    pub fn leaves(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}
