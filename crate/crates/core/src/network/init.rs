use super::Network;
use crate::tensor::{Rng, Tensor};

/// Truncation bound for the weight distribution, in standard deviations.
const TRUNCATION: f64 = 2.0;

/// Fresh parameters: weights from a normal truncated at two standard
/// deviations with std `sqrt(2 / fan_in)`, biases zero.
///
/// Layers are filled in order from a single stream, so the same seed always
/// gives the same network.
pub fn init_parameters(net: &Network, rng: &mut Rng) -> Network {
    let mut out = net.clone();
    for layer in &mut out.layers {
        let Some((weight, bias)) = layer.params_mut() else {
            continue;
        };
        let fan_in: usize = weight.shape()[1..].iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let data: Vec<f64> = (0..weight.len()).map(|_| rng.truncated_normal(std, TRUNCATION)).collect();
        *weight = Tensor::from_raw(weight.shape().to_vec(), data);
        *bias = Tensor::zeros(bias.shape());
    }
    debug_assert!(out.layers.iter().zip(&net.layers).all(|(a, b)| a.kind() == b.kind()));
    out
}
