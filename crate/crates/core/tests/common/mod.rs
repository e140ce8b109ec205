//! Shared generators and independent oracles for the integration tests.
#![allow(dead_code)]

use ibp_core::network::Activation;
use ibp_core::{Layer, Network, Rng, Tensor};

/// Fully connected net with the given widths, weights N(0, scale²/fan_in),
/// biases N(0, 0.1²), and `act` between layers.
pub fn random_mlp(rng: &mut Rng, widths: &[usize], act: Option<Activation>, scale: f64) -> Network {
    let mut layers = Vec::new();
    for k in 0..widths.len() - 1 {
        let (i, o) = (widths[k], widths[k + 1]);
        let w: Vec<f64> = (0..i * o).map(|_| rng.standard_normal() * scale / (i as f64).sqrt()).collect();
        let b: Vec<f64> = (0..o).map(|_| 0.1 * rng.standard_normal()).collect();
        layers.push(Layer::linear(Tensor::new(vec![o, i], w).unwrap(), Tensor::new(vec![o], b).unwrap()).unwrap());
        if let (Some(a), true) = (act, k + 2 < widths.len()) {
            layers.push(Layer::Activation(a));
        }
    }
    Network::new(layers, vec![widths[0]]).unwrap()
}

/// Small conv net on `[c, h, w]` inputs: conv (k×k, stride s, pad p), ReLU, flatten, fc.
pub fn random_conv(rng: &mut Rng, input: [usize; 3], filters: usize, k: usize, s: usize, p: usize, classes: usize) -> Network {
    let [c, h, w] = input;
    let wk: Vec<f64> = (0..filters * c * k * k).map(|_| rng.standard_normal() / ((c * k * k) as f64).sqrt()).collect();
    let bk: Vec<f64> = (0..filters).map(|_| 0.1 * rng.standard_normal()).collect();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let flat = filters * oh * ow;
    let wf: Vec<f64> = (0..classes * flat).map(|_| rng.standard_normal() / (flat as f64).sqrt()).collect();
    let bf: Vec<f64> = (0..classes).map(|_| 0.1 * rng.standard_normal()).collect();
    Network::new(
        vec![
            Layer::conv2d(Tensor::new(vec![filters, c, k, k], wk).unwrap(), Tensor::new(vec![filters], bk).unwrap(), s, p).unwrap(),
            Layer::Activation(Activation::Relu),
            Layer::Flatten,
            Layer::linear(Tensor::new(vec![classes, flat], wf).unwrap(), Tensor::new(vec![classes], bf).unwrap()).unwrap(),
        ],
        vec![c, h, w],
    )
    .unwrap()
}

/// Straight-line forward pass of one example, written independently of the
/// library kernels. Returns the logits.
pub fn naive_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    naive_trace(net, x).pop().unwrap()
}

/// Output of every layer for one example, computed by [`naive_forward`]'s loops.
pub fn naive_trace(net: &Network, x: &[f64]) -> Vec<Vec<f64>> {
    let mut shape = net.input_shape().to_vec();
    let mut v = x.to_vec();
    let mut trace = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Linear { weight, bias } => {
                let (o, i) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.data();
                let mut out = vec![0.0; o];
                for r in 0..o {
                    let mut s = 0.0;
                    for c in 0..i {
                        s += w[r * i + c] * v[c];
                    }
                    out[r] = s + bias.data()[r];
                }
                v = out;
                shape = vec![o];
            }
            Layer::Conv2d { weight, bias, stride, padding } => {
                let (f, c, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
                let (h, w) = (shape[1], shape[2]);
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (w + 2 * padding - kw) / stride + 1;
                let wd = weight.data();
                let mut out = vec![0.0; f * oh * ow];
                for ff in 0..f {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for cc in 0..c {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        s += wd[((ff * c + cc) * kh + ky) * kw + kx] * v[(cc * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            out[(ff * oh + oy) * ow + ox] = s + bias.data()[ff];
                        }
                    }
                }
                v = out;
                shape = vec![f, oh, ow];
            }
            Layer::Activation(a) => {
                v = v
                    .iter()
                    .map(|&z| match a {
                        Activation::Relu => z.max(0.0),
                        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                        Activation::Tanh => z.tanh(),
                    })
                    .collect();
            }
            Layer::Flatten => shape = vec![v.len()],
        }
        trace.push(v.clone());
    }
    trace
}

/// `max_{y ≠ t} z_y - z_t` at one point.
pub fn true_margin(net: &Network, x: &[f64], t: usize) -> f64 {
    let z = naive_forward(net, x);
    (0..z.len()).filter(|&y| y != t).map(|y| z[y] - z[t]).fold(f64::NEG_INFINITY, f64::max)
}

/// Every corner of the box `[lo, hi]` (at most 2^20 of them).
pub fn corners(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let n = lo.len();
    assert!(n <= 20);
    (0..1usize << n)
        .map(|mask| (0..n).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect())
        .collect()
}

/// Uniform point in `[lo, hi]`.
pub fn sample_in(rng: &mut Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(&l, &h)| rng.uniform_in(l, h)).collect()
}

/// `x` with a leading batch axis of 1.
pub fn batch1(net: &Network, x: &[f64]) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    Tensor::new(shape, x.to_vec()).unwrap()
}

/// The full robust training loss (batch mean) and its parameter gradients.
pub fn full_loss(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    kappa: f64,
    variant: ibp_core::training::LossVariant,
    use_elision: bool,
) -> (f64, Vec<Tensor>) {
    use ibp_core::bounds::{input_box, worst_case_graph, BoxVars};
    use ibp_core::network::GradientTape;
    let mut tape = GradientTape::new();
    let params = net.bind(&mut tape, true);
    let xv = tape.leaf(x.clone(), false);
    let logits = net.forward_graph(&mut tape, &params, xv).unwrap();
    let (lower, upper) = input_box(x, epsilon, None).unwrap().into_parts();
    let vars = BoxVars {
        lower: tape.leaf(lower, false),
        upper: tape.leaf(upper, false),
    };
    let worst = worst_case_graph(net, &mut tape, &params, vars, labels, use_elision).unwrap();
    let per = ibp_core::training::loss_graph(&mut tape, logits, Some(worst), labels, kappa, variant, 1.0).unwrap();
    let loss = tape.mean(per).unwrap();
    let value = tape.value(loss).unwrap().data()[0];
    let grads = tape.backward(loss).unwrap();
    (value, params.gradients(&tape, &grads).unwrap())
}

/// Smallest |pre-activation| over the nominal pass and every interval
/// endpoint feeding an activation. Finite differences are only meaningful
/// when this is well above the probe step.
pub fn kink_distance(net: &Network, x: &Tensor, epsilon: f64) -> f64 {
    use ibp_core::bounds::{input_box, propagate};
    let mut d = f64::INFINITY;
    let boxes = propagate(net, &input_box(x, epsilon, None).unwrap(), false).unwrap();
    let per = net.input_len();
    let traces: Vec<_> = x.data().chunks(per).map(|row| naive_trace(net, row)).collect();
    for (i, layer) in net.layers().iter().enumerate() {
        if matches!(layer, Layer::Activation(_)) {
            let prev = &boxes[i - 1];
            for t in [prev.lower(), prev.upper()] {
                d = t.data().iter().fold(d, |m, v| m.min(v.abs()));
            }
            for tr in &traces {
                d = tr[i - 1].iter().fold(d, |m, v| m.min(v.abs()));
            }
        }
    }
    d
}
pub mod suites;
