//! Text architecture descriptions.
//!
//! Grammar: layers separated by `;`, each one of
//!
//! - `conv K WxH+S` with an optional trailing `pad P` (default 0),
//! - `fc N`,
//! - `flatten`.
//!
//! A flatten is inserted before the first `fc` that receives a multi-axis
//! input, and a ReLU follows every layer except the last, which must be `fc`.

use thiserror::Error;

use super::{Activation, Layer, Network, NetworkError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ArchError {
    #[error("empty architecture string")]
    Empty,
    #[error("layer {index}: cannot parse `{text}`: {reason}")]
    Syntax {
        index: usize,
        text: String,
        reason: &'static str,
    },
    #[error("the last layer must be `fc N`")]
    LastNotFc,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Spec {
    Conv {
        channels: usize,
        kernel_w: usize,
        kernel_h: usize,
        stride: usize,
        padding: usize,
    },
    Fc(usize),
    Flatten,
}

fn positive(s: &str) -> Option<usize> {
    s.parse::<usize>().ok().filter(|&v| v > 0)
}

fn parse_layer(index: usize, text: &str) -> Result<Spec, ArchError> {
    let err = |reason| ArchError::Syntax {
        index,
        text: text.to_string(),
        reason,
    };
    let tokens: Vec<&str> = text.split_whitespace().collect();
    match tokens.as_slice() {
        ["flatten"] => Ok(Spec::Flatten),
        ["fc", n] => positive(n).map(Spec::Fc).ok_or_else(|| err("fc width must be a positive integer")),
        ["conv", k, geom, rest @ ..] => {
            let channels = positive(k).ok_or_else(|| err("channel count must be a positive integer"))?;
            let (size, stride) = geom.split_once('+').ok_or_else(|| err("expected WxH+S"))?;
            let (w, h) = size.split_once('x').ok_or_else(|| err("expected WxH+S"))?;
            let kernel_w = positive(w).ok_or_else(|| err("kernel width must be a positive integer"))?;
            let kernel_h = positive(h).ok_or_else(|| err("kernel height must be a positive integer"))?;
            let stride = positive(stride).ok_or_else(|| err("stride must be a positive integer"))?;
            let padding = match rest {
                [] => 0,
                ["pad", p] => p.parse().map_err(|_| err("padding must be a non-negative integer"))?,
                _ => return Err(err("unexpected trailing tokens")),
            };
            Ok(Spec::Conv {
                channels,
                kernel_w,
                kernel_h,
                stride,
                padding,
            })
        }
        _ => Err(err("expected `conv K WxH+S`, `fc N` or `flatten`")),
    }
}

/// Builds a zero-initialized ReLU network from an architecture string.
pub fn parse_architecture(text: &str, input_shape: &[usize]) -> Result<Network, ArchError> {
    parse_architecture_with(text, input_shape, Activation::Relu)
}

/// As [`parse_architecture`] with a chosen hidden activation.
pub fn parse_architecture_with(text: &str, input_shape: &[usize], activation: Activation) -> Result<Network, ArchError> {
    let parts: Vec<&str> = text.split(';').map(str::trim).collect();
    if parts.iter().all(|p| p.is_empty()) {
        return Err(ArchError::Empty);
    }
    let specs = parts
        .iter()
        .enumerate()
        .map(|(i, p)| parse_layer(i, p))
        .collect::<Result<Vec<_>, _>>()?;
    if !matches!(specs.last(), Some(Spec::Fc(_))) {
        return Err(ArchError::LastNotFc);
    }

    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    let last = specs.len() - 1;
    for (i, spec) in specs.iter().enumerate() {
        let layer = match *spec {
            Spec::Flatten => Layer::Flatten,
            Spec::Fc(n) => {
                if shape.len() != 1 {
                    layers.push(Layer::Flatten);
                    shape = vec![shape.iter().product()];
                }
                Layer::zeros_linear(shape[0], n)
            }
            Spec::Conv {
                channels,
                kernel_w,
                kernel_h,
                stride,
                padding,
            } => {
                let in_channels = shape.first().copied().unwrap_or(0);
                Layer::conv2d(
                    Tensor::zeros(&[channels, in_channels, kernel_h, kernel_w]),
                    Tensor::zeros(&[channels]),
                    stride,
                    padding,
                )?
            }
        };
        shape = layer.output_shape(layers.len(), &shape)?;
        layers.push(layer);
        if i != last && !matches!(spec, Spec::Flatten) {
            layers.push(Layer::Activation(activation));
        }
    }
    Ok(Network::new(layers, input_shape.to_vec())?)
}
