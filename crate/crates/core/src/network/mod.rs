//! Layer and network representation, nominal forward pass and the gradient
//! tape used for training and attacks.

mod arch;
mod init;
pub mod io;
mod tape;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, conv_geometry, Tensor, TensorError};

pub use arch::{parse_architecture, parse_architecture_with, ArchError};
pub use init::init_parameters;
pub use tape::{GradientTape, Gradients, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("layer {index} ({kind}) cannot accept input of shape {input:?}")]
    Compose {
        index: usize,
        kind: &'static str,
        input: Vec<usize>,
    },
    #[error("network must end with a linear layer")]
    FinalLayerNotLinear,
    #[error("network has no layers")]
    Empty,
    #[error("input shape {got:?} does not match network input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any variable that requires a gradient")]
    Disconnected,
    #[error("class index {label} out of range for {classes} classes")]
    InvalidClass { label: usize, classes: usize },
    #[error("operation {op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0} activation is not supported here")]
    UnsupportedActivation(Activation),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Elementwise monotone activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => tensor::sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One transformation `z_k = h_k(z_{k-1})`.
///
/// Linear weights are `[out, in]` and compute `W z + b`. Convolution kernels
/// are `[K, C, h, w]` cross-correlations with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Activation(Activation),
    Flatten,
}

impl Layer {
    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(NetworkError::InvalidLayer(format!(
                "linear weight must have 2 axes, got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(NetworkError::InvalidLayer(format!(
                "linear bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Layer::Linear { weight, bias })
    }

    pub fn conv2d(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weight.shape().len() != 4 {
            return Err(NetworkError::InvalidLayer(format!(
                "conv kernel must have 4 axes, got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(NetworkError::InvalidLayer(format!(
                "conv bias {:?} does not match {} output channels",
                bias.shape(),
                weight.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(NetworkError::InvalidLayer("conv stride must be positive".into()));
        }
        Ok(Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Zero-initialized fully-connected layer.
    pub fn zeros_linear(inputs: usize, outputs: usize) -> Self {
        Layer::Linear {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Activation(_) => "activation",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Layer::Linear { .. } | Layer::Conv2d { .. })
    }

    /// Weight and bias, for affine layers.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let compose = || NetworkError::Compose {
            index,
            kind: self.kind(),
            input: input.to_vec(),
        };
        match self {
            Layer::Linear { weight, .. } => {
                if input.len() != 1 || input[0] != weight.shape()[1] {
                    return Err(compose());
                }
                Ok(vec![weight.shape()[0]])
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 {
                    return Err(compose());
                }
                let mut x_shape = vec![1];
                x_shape.extend_from_slice(input);
                let g = conv_geometry(&x_shape, weight.shape(), *stride, *padding).map_err(|_| compose())?;
                Ok(vec![g.out_channels, g.out_h, g.out_w])
            }
            Layer::Activation(_) => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Ordered layer stack ending in a linear layer that produces the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetworkError::Empty);
        }
        if !matches!(layers.last(), Some(Layer::Linear { .. })) {
            return Err(NetworkError::FinalLayerNotLinear);
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(i, &shape)?;
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes: shape[0],
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-example output shape of every layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                shape = l.output_shape(i, &shape).expect("validated at construction");
                shape.clone()
            })
            .collect()
    }

    /// Number of activation units (hidden units in the usual counting).
    pub fn hidden_units(&self) -> usize {
        self.layers
            .iter()
            .zip(self.layer_shapes())
            .filter(|(l, _)| matches!(l, Layer::Activation(_)))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn is_relu_only(&self) -> bool {
        self.layers
            .iter()
            .all(|l| !matches!(l, Layer::Activation(a) if *a != Activation::Relu))
    }

    /// Parameters in canonical order: for each affine layer, weight then bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Replaces all parameters (canonical order); shapes must match.
    pub fn with_parameters(&self, params: Vec<Tensor>) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.parameters_mut();
        if slots.len() != params.len() {
            return Err(NetworkError::InvalidLayer(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(NetworkError::InvalidLayer(format!(
                    "parameter shape {:?} does not match {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
        }
        Ok(out)
    }

    /// Index of the final linear layer.
    pub fn last_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Final layer weight and bias.
    pub fn last_linear(&self) -> (&Tensor, &Tensor) {
        self.layers
            .last()
            .and_then(Layer::params)
            .expect("final layer is linear")
    }

    /// Adds a leading batch axis if `x` is a single example; returns the
    /// batched shape and whether the axis was added.
    pub fn batched_shape(&self, shape: &[usize]) -> Result<(Vec<usize>, bool)> {
        if shape == self.input_shape.as_slice() {
            let mut s = vec![1];
            s.extend_from_slice(shape);
            Ok((s, true))
        } else if shape.len() == self.input_shape.len() + 1 && shape[1..] == self.input_shape[..] {
            Ok((shape.to_vec(), false))
        } else {
            Err(NetworkError::InputShape {
                expected: self.input_shape.clone(),
                got: shape.to_vec(),
            })
        }
    }

    /// Logits for a single example (`input_shape`) or a batch
    /// (`[B, input_shape..]`); always returns `[B, N]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (shape, _) = self.batched_shape(x.shape())?;
        let mut tape = GradientTape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.leaf(x.reshape(&shape)?, false);
        let out = self.forward_graph(&mut tape, &params, xv)?;
        Ok(tape.value(out)?.clone())
    }

    /// Predicted class per example (lowest index wins ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(tensor::argmax_rows(logits.data(), self.num_classes))
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut GradientTape, requires_grad: bool) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                l.params()
                    .map(|(w, b)| (tape.leaf(w.clone(), requires_grad), tape.leaf(b.clone(), requires_grad)))
            })
            .collect();
        BoundParams { vars }
    }

    /// Records `layers[range]` applied to `x` (batched) on the tape.
    pub fn forward_graph_range(
        &self,
        tape: &mut GradientTape,
        params: &BoundParams,
        mut x: Var,
        range: std::ops::Range<usize>,
    ) -> Result<Var> {
        for i in range {
            x = self.apply_layer(tape, params, i, x)?;
        }
        Ok(x)
    }

    /// Records the full forward pass; `x` must be batched.
    pub fn forward_graph(&self, tape: &mut GradientTape, params: &BoundParams, x: Var) -> Result<Var> {
        self.forward_graph_range(tape, params, x, 0..self.layers.len())
    }

    pub(crate) fn apply_layer(&self, tape: &mut GradientTape, params: &BoundParams, i: usize, x: Var) -> Result<Var> {
        match &self.layers[i] {
            Layer::Linear { .. } => {
                let (w, b) = params.get(i);
                tape.linear(x, w, Some(b))
            }
            Layer::Conv2d { stride, padding, .. } => {
                let (w, b) = params.get(i);
                tape.conv2d(x, w, Some(b), *stride, *padding)
            }
            Layer::Activation(a) => tape.activation(x, *a),
            Layer::Flatten => {
                let shape = tape.value(x)?.shape().to_vec();
                let flat: usize = shape[1..].iter().product();
                tape.reshape(x, &[shape[0], flat])
            }
        }
    }
}

/// Parameter leaves of a network on one tape, indexed by layer.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Option<(Var, Var)>>,
}

impl BoundParams {
    /// Weight and bias variables of affine layer `layer`.
    pub fn get(&self, layer: usize) -> (Var, Var) {
        self.vars[layer].expect("affine layer has parameters")
    }

    /// All parameter variables in canonical order.
    pub fn all(&self) -> Vec<Var> {
        self.vars.iter().flatten().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Gradients for every parameter in canonical order; parameters the loss
    /// does not depend on get zeros.
    pub fn gradients(&self, tape: &GradientTape, grads: &Gradients) -> Result<Vec<Tensor>> {
        self.all()
            .into_iter()
            .map(|v| {
                Ok(match grads.get(v) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(tape.value(v)?.shape()),
                })
            })
            .collect()
    }
}
