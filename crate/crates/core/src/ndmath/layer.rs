use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Element-wise nonlinearity applied between MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at the pre-activation `z`. ReLU'(0) is 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, z: &Matrix) -> Matrix {
        z.map(|v| self.apply(v))
    }

    /// `grad ⊙ act'(pre)`.
    pub fn backward(self, pre: &Matrix, grad: &Matrix) -> Result<Matrix> {
        pre.zip_map(grad, "activation_backward", |z, g| g * self.derivative(z))
    }
}

/// Borrowed view of one parameter tensor and its gradient buffer.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Read-only view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub value: &'a [f64],
}

/// Anything that owns trainable parameters. Visitation order is stable and
/// defines both optimizer-state layout and checkpoint layout.
pub trait Parameters {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);

    fn zero_grad(&mut self) {
        let mut views = Vec::new();
        self.params_mut("", &mut views);
        for v in views {
            v.grad.fill(0.0);
        }
    }

    fn param_count(&self) -> usize {
        let mut views = Vec::new();
        self.params("", &mut views);
        views.iter().map(|v| v.value.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x W + b` with `W` stored as `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f64>,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Matrix::from_fn(in_dim, out_dim, |_, _| rng.random_range(-limit..=limit));
        Self::from_parts(weight, vec![0.0; out_dim]).expect("bias sized from weight")
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self::from_parts(Matrix::zeros(in_dim, out_dim), vec![0.0; out_dim]).expect("consistent")
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape("linear_layer", weight.shape(), (1, bias.len())));
        }
        Ok(Self {
            grad_weight: Matrix::zeros(weight.rows(), weight.cols()),
            grad_bias: vec![0.0; bias.len()],
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut out = input.matmul(&self.weight)?;
        out.add_row_broadcast(&self.bias)?;
        Ok(out)
    }

    /// Accumulates `∂L/∂W`, `∂L/∂b` and returns `∂L/∂input`.
    pub fn backward(&mut self, input: &Matrix, output_grad: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim() || output_grad.cols() != self.out_dim() {
            return Err(Error::shape("linear_backward", input.shape(), output_grad.shape()));
        }
        if input.rows() != output_grad.rows() {
            return Err(Error::shape("linear_backward", input.shape(), output_grad.shape()));
        }
        let gw = input.t_matmul(output_grad)?;
        self.grad_weight.add_assign(&gw)?;
        for (gb, s) in self.grad_bias.iter_mut().zip(output_grad.col_sums()) {
            *gb += s;
        }
        output_grad.matmul_t(&self.weight)
    }
}

impl Parameters for LinearLayer {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: join(prefix, "weight"),
            value: self.weight.as_mut_slice(),
            grad: self.grad_weight.as_mut_slice(),
        });
        out.push(ParamMut {
            name: join(prefix, "bias"),
            value: &mut self.bias,
            grad: &mut self.grad_bias,
        });
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            shape: self.weight.shape(),
            value: self.weight.as_slice(),
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            shape: (1, self.bias.len()),
            value: &self.bias,
        });
    }
}

/// Layer inputs and hidden pre-activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output_shape: (usize, usize),
}

impl MlpTape {
    pub fn input(&self) -> &Matrix {
        &self.inputs[0]
    }
}

/// Feed-forward stack of [`LinearLayer`]s with a shared activation between
/// layers and none after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    activation: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; at least two entries.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least input and output dims, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-width layer in {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::new(w[0], w[1], rng))
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<LinearLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidArgument(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(LinearLayer::out_dim))
            .collect()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, MlpTape)> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape("mlp_forward", input.shape(), (input.rows(), self.in_dim())));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            if k == last {
                let output_shape = z.shape();
                return Ok((
                    z,
                    MlpTape {
                        inputs,
                        pre,
                        output_shape,
                    },
                ));
            }
            h = self.activation.forward(&z);
            pre.push(z);
        }
        unreachable!("an Mlp always has at least one layer")
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape("mlp_forward", input.shape(), (input.rows(), self.in_dim())));
        }
        let mut h = self.layers[0].forward(input)?;
        for layer in &self.layers[1..] {
            h = self.activation.forward(&h);
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, tape: &MlpTape, output_grad: &Matrix) -> Result<Matrix> {
        self.check_tape(tape)?;
        if output_grad.shape() != tape.output_shape {
            return Err(Error::shape("mlp_backward", output_grad.shape(), tape.output_shape));
        }
        let mut g = output_grad.clone();
        for k in (0..self.layers.len()).rev() {
            let dinput = self.layers[k].backward(&tape.inputs[k], &g)?;
            g = if k > 0 {
                self.activation.backward(&tape.pre[k - 1], &dinput)?
            } else {
                dinput
            };
        }
        Ok(g)
    }

    fn check_tape(&self, tape: &MlpTape) -> Result<()> {
        if tape.inputs.len() != self.layers.len() || tape.pre.len() + 1 != self.layers.len() {
            return Err(Error::StaleTape(format!(
                "tape recorded {} layers, net has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        for (k, (layer, input)) in self.layers.iter().zip(&tape.inputs).enumerate() {
            if input.cols() != layer.in_dim() {
                return Err(Error::StaleTape(format!(
                    "layer {k} expects {} inputs, tape holds {}",
                    layer.in_dim(),
                    input.cols()
                )));
            }
        }
        if tape.output_shape.1 != self.out_dim() {
            return Err(Error::StaleTape(format!(
                "net outputs {} columns, tape recorded {}",
                self.out_dim(),
                tape.output_shape.1
            )));
        }
        Ok(())
    }
}

impl Parameters for Mlp {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer.params_mut(&join(prefix, &format!("layer{k}")), out);
        }
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (k, layer) in self.layers.iter().enumerate() {
            layer.params(&join(prefix, &format!("layer{k}")), out);
        }
    }
}
