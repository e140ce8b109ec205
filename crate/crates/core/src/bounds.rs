//! Interval bound propagation.
//!
//! Boxes cross affine layers in center–radius form (`μ' = Wμ + b`,
//! `r' = |W| r`) and monotone activations in lower/upper form
//! (`[f(l), f(u)]`). The same tape operations serve evaluation and training,
//! so certified margins and training losses see identical numbers.

use thiserror::Error;

use crate::network::{BoundParams, GradientTape, Layer, Network, NetworkError, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("epsilon must be a non-negative finite number, got {0}")]
    Epsilon(f64),
    #[error("input box does not intersect the domain [{lo}, {hi}]")]
    EmptyIntersection { lo: f64, hi: f64 },
    #[error("lower bound exceeds upper bound at index {0}")]
    Inverted(usize),
    #[error("bounds shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("specification vector is empty")]
    EmptySpecification,
    #[error("class index {label} out of range for {classes} classes")]
    InvalidClass { label: usize, classes: usize },
}

impl From<TensorError> for BoundsError {
    fn from(e: TensorError) -> Self {
        BoundsError::Network(e.into())
    }
}

pub type Result<T> = std::result::Result<T, BoundsError>;

/// Axis-aligned box `lower ≤ z ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBounds {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalBounds {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(BoundsError::Shape(lower.shape().to_vec(), upper.shape().to_vec()));
        }
        if let Some(i) = lower.data().iter().zip(upper.data()).position(|(l, u)| l > u) {
            return Err(BoundsError::Inverted(i));
        }
        Ok(Self { lower, upper })
    }

    /// Degenerate box at `x`.
    pub fn point(x: Tensor) -> Self {
        Self {
            lower: x.clone(),
            upper: x,
        }
    }

    /// Box `[μ - r, μ + r]`; `r` must be non-negative.
    pub fn from_center_radius(center: &Tensor, radius: &Tensor) -> Result<Self> {
        if let Some(i) = radius.data().iter().position(|r| *r < 0.0) {
            return Err(BoundsError::Inverted(i));
        }
        Self::new(center.sub(radius)?, center.add(radius)?)
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.lower, self.upper)
    }

    /// `(upper + lower) / 2`.
    pub fn center(&self) -> Tensor {
        let data = self
            .lower
            .data()
            .iter()
            .zip(self.upper.data())
            .map(|(l, u)| (u + l) * 0.5)
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("midpoint of finite values")
    }

    /// `(upper - lower) / 2`.
    pub fn radius(&self) -> Tensor {
        let data = self
            .lower
            .data()
            .iter()
            .zip(self.upper.data())
            .map(|(l, u)| (u - l) * 0.5)
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("half-width of finite values")
    }

    /// Largest `upper - lower` over all coordinates.
    pub fn max_width(&self) -> f64 {
        self.lower
            .data()
            .iter()
            .zip(self.upper.data())
            .map(|(l, u)| u - l)
            .fold(0.0, f64::max)
    }

    /// Product of all side lengths.
    pub fn volume(&self) -> f64 {
        self.lower
            .data()
            .iter()
            .zip(self.upper.data())
            .map(|(l, u)| u - l)
            .product()
    }

    /// Whether `x` (same shape) lies in the box enlarged by `tol` on every side.
    pub fn contains(&self, x: &Tensor, tol: f64) -> bool {
        x.shape() == self.shape()
            && x
                .data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }
}

/// Linear property `cᵀz + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpecification {
    c: Tensor,
    d: f64,
}

impl LinearSpecification {
    pub fn new(c: Tensor, d: f64) -> Result<Self> {
        if c.is_empty() {
            return Err(BoundsError::EmptySpecification);
        }
        if !d.is_finite() {
            return Err(TensorError::NonFinite { op: "specification" }.into());
        }
        let n = c.len();
        Ok(Self {
            c: c.reshape(&[n])?,
            d,
        })
    }

    /// `c = e_y - e_true`, `d = 0`: positive exactly when class `y` beats the
    /// true class.
    pub fn adversarial(num_classes: usize, y: usize, y_true: usize) -> Result<Self> {
        for label in [y, y_true] {
            if label >= num_classes {
                return Err(BoundsError::InvalidClass {
                    label,
                    classes: num_classes,
                });
            }
        }
        let mut c = vec![0.0; num_classes];
        c[y] += 1.0;
        c[y_true] -= 1.0;
        Self::new(Tensor::vector(c)?, 0.0)
    }

    pub fn c(&self) -> &Tensor {
        &self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    /// `cᵀz + d` for a flat `z`.
    pub fn evaluate(&self, z: &[f64]) -> f64 {
        self.c.data().iter().zip(z).fold(0.0, |acc, (c, z)| acc + c * z) + self.d
    }
}

/// `[x0 - ε, x0 + ε]`, intersected with `[lo, hi]` when a domain is given.
pub fn input_box(x0: &Tensor, epsilon: f64, domain: Option<(f64, f64)>) -> Result<IntervalBounds> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(BoundsError::Epsilon(epsilon));
    }
    let mut lower: Vec<f64> = x0.data().iter().map(|v| v - epsilon).collect();
    let mut upper: Vec<f64> = x0.data().iter().map(|v| v + epsilon).collect();
    if let Some((lo, hi)) = domain {
        for (l, u) in lower.iter_mut().zip(upper.iter_mut()) {
            *l = l.max(lo);
            *u = u.min(hi);
            if l > u {
                return Err(BoundsError::EmptyIntersection { lo, hi });
            }
        }
    }
    IntervalBounds::new(
        Tensor::new(x0.shape().to_vec(), lower)?,
        Tensor::new(x0.shape().to_vec(), upper)?,
    )
}

/// Box variables for one layer on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxVars {
    pub lower: Var,
    pub upper: Var,
}

/// Records the propagation of a (batched) box through `layers[range]`.
/// Returns the box after each layer in the range.
pub fn propagate_graph(
    net: &Network,
    tape: &mut GradientTape,
    params: &BoundParams,
    input: BoxVars,
    range: std::ops::Range<usize>,
) -> Result<Vec<BoxVars>> {
    let mut cur = input;
    let mut out = Vec::with_capacity(range.len());
    for i in range {
        cur = match &net.layers()[i] {
            layer @ (Layer::Linear { .. } | Layer::Conv2d { .. }) => {
                let (w, b) = params.get(i);
                affine_box(tape, layer, w, b, cur)?
            }
            Layer::Activation(a) => BoxVars {
                lower: tape.activation(cur.lower, *a)?,
                upper: tape.activation(cur.upper, *a)?,
            },
            Layer::Flatten => {
                let shape = tape.value(cur.lower)?.shape().to_vec();
                let flat = [shape[0], shape[1..].iter().product()];
                BoxVars {
                    lower: tape.reshape(cur.lower, &flat)?,
                    upper: tape.reshape(cur.upper, &flat)?,
                }
            }
        };
        out.push(cur);
    }
    Ok(out)
}

/// `μ' = Wμ + b`, `r' = |W| r`, returned as `[μ' - r', μ' + r']`.
fn affine_box(tape: &mut GradientTape, layer: &Layer, w: Var, b: Var, cur: BoxVars) -> Result<BoxVars> {
    let (mu, r) = center_radius(tape, cur)?;
    let abs_w = tape.abs(w)?;
    let (mu_out, r_out) = match layer {
        Layer::Conv2d { stride, padding, .. } => (
            tape.conv2d(mu, w, Some(b), *stride, *padding)?,
            tape.conv2d(r, abs_w, None, *stride, *padding)?,
        ),
        _ => (tape.linear(mu, w, Some(b))?, tape.linear(r, abs_w, None)?),
    };
    Ok(BoxVars {
        lower: tape.sub(mu_out, r_out)?,
        upper: tape.add(mu_out, r_out)?,
    })
}

/// `μ = (u + l) / 2`, `r = (u - l) / 2` on the tape.
fn center_radius(tape: &mut GradientTape, b: BoxVars) -> Result<(Var, Var)> {
    let sum = tape.add(b.upper, b.lower)?;
    let diff = tape.sub(b.upper, b.lower)?;
    Ok((tape.scale(sum, 0.5)?, tape.scale(diff, 0.5)?))
}

/// Worst-case logits for a batch of boxes, recorded on the tape.
///
/// With elision the final layer is folded into each `e_y - e_true`
/// specification and the true-class entry is 0; without it the entries are
/// the output upper bounds, except the true class, which takes its lower
/// bound.
pub fn worst_case_graph(
    net: &Network,
    tape: &mut GradientTape,
    params: &BoundParams,
    input: BoxVars,
    labels: &[usize],
    use_elision: bool,
) -> Result<Var> {
    let last = net.last_index();
    if use_elision {
        let penultimate = propagate_graph(net, tape, params, input, 0..last)?
            .last()
            .copied()
            .unwrap_or(input);
        let (w, b) = params.get(last);
        let (mu, r) = center_radius(tape, penultimate)?;
        let center_logits = tape.linear(mu, w, Some(b))?;
        Ok(tape.elided_logits(center_logits, r, w, labels)?)
    } else {
        let out = *propagate_graph(net, tape, params, input, 0..last + 1)?
            .last()
            .expect("network has at least one layer");
        Ok(tape.worst_case(out.lower, out.upper, labels)?)
    }
}

fn batched(net: &Network, b: &IntervalBounds) -> Result<(Tensor, Tensor, bool)> {
    let (shape, added) = net.batched_shape(b.shape())?;
    Ok((b.lower.reshape(&shape)?, b.upper.reshape(&shape)?, added))
}

fn unbatch(t: &Tensor, added: bool) -> Tensor {
    if added {
        t.reshape(&t.shape()[1..]).expect("drop unit batch axis")
    } else {
        t.clone()
    }
}

/// Bounds after every layer (all `K` layers, or the first `K - 1` when
/// `stop_before_last`). A single example or a batch is accepted; the output
/// keeps the input's batching.
pub fn propagate(net: &Network, input: &IntervalBounds, stop_before_last: bool) -> Result<Vec<IntervalBounds>> {
    let (lower, upper, added) = batched(net, input)?;
    let mut tape = GradientTape::new();
    let params = net.bind(&mut tape, false);
    let vars = BoxVars {
        lower: tape.leaf(lower, false),
        upper: tape.leaf(upper, false),
    };
    let end = if stop_before_last { net.last_index() } else { net.layers().len() };
    propagate_graph(net, &mut tape, &params, vars, 0..end)?
        .into_iter()
        .map(|b| {
            Ok(IntervalBounds {
                lower: unbatch(tape.value(b.lower)?, added),
                upper: unbatch(tape.value(b.upper)?, added),
            })
        })
        .collect()
}

/// Bounds of a single affine layer. A single example or a batch is accepted.
pub fn affine_interval(layer: &Layer, input: &IntervalBounds) -> Result<IntervalBounds> {
    let Some((w, b)) = layer.params() else {
        return Err(NetworkError::InvalidLayer(format!("{} is not affine", layer.kind())).into());
    };
    let per_example_rank = if matches!(layer, Layer::Conv2d { .. }) { 3 } else { 1 };
    let added = input.shape().len() == per_example_rank;
    let mut shape = input.shape().to_vec();
    if added {
        shape.insert(0, 1);
    }
    let mut tape = GradientTape::new();
    let cur = BoxVars {
        lower: tape.leaf(input.lower.reshape(&shape)?, false),
        upper: tape.leaf(input.upper.reshape(&shape)?, false),
    };
    let w = tape.leaf(w.clone(), false);
    let b = tape.leaf(b.clone(), false);
    let out = affine_box(&mut tape, layer, w, b, cur)?;
    Ok(IntervalBounds {
        lower: unbatch(tape.value(out.lower)?, added),
        upper: unbatch(tape.value(out.upper)?, added),
    })
}

/// `[f(l), f(u)]` for a monotone activation.
pub fn activation_interval(f: crate::network::Activation, input: &IntervalBounds) -> IntervalBounds {
    let map = |t: &Tensor| {
        let data = t.data().iter().map(|&v| f.apply(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("activation of finite values")
    };
    IntervalBounds {
        lower: map(&input.lower),
        upper: map(&input.upper),
    }
}

/// Folds the final linear layer `(W, b)` into `spec`: `c' = Wᵀc`, `d' = cᵀb + d`.
pub fn elide(last: &Layer, spec: &LinearSpecification) -> Result<LinearSpecification> {
    let Layer::Linear { weight, bias } = last else {
        return Err(NetworkError::FinalLayerNotLinear.into());
    };
    let (outputs, inputs) = (weight.shape()[0], weight.shape()[1]);
    if spec.c.len() != outputs {
        return Err(BoundsError::Shape(spec.c.shape().to_vec(), weight.shape().to_vec()));
    }
    let w = weight.data();
    let c = spec.c.data();
    let mut c_new = vec![0.0; inputs];
    for (j, out) in c_new.iter_mut().enumerate() {
        *out = (0..outputs).fold(0.0, |acc, i| acc + w[i * inputs + j] * c[i]);
    }
    let d_new = c.iter().zip(bias.data()).fold(0.0, |acc, (c, b)| acc + c * b) + spec.d;
    LinearSpecification::new(Tensor::vector(c_new)?, d_new)
}

/// Maximum of `cᵀz + d` over the box.
pub fn spec_upper_bound(bounds: &IntervalBounds, spec: &LinearSpecification) -> Result<f64> {
    if bounds.lower.len() != spec.c.len() {
        return Err(BoundsError::Shape(bounds.shape().to_vec(), spec.c.shape().to_vec()));
    }
    let s = spec
        .c
        .data()
        .iter()
        .zip(bounds.lower.data().iter().zip(bounds.upper.data()))
        .fold(0.0, |acc, (&c, (&l, &u))| acc + if c > 0.0 { c * u } else { c * l });
    Ok(s + spec.d)
}

/// Worst-case logits at `x0` under an ε-box (clipped to `domain`).
pub fn worst_case_logits(
    net: &Network,
    x0: &Tensor,
    epsilon: f64,
    y_true: usize,
    use_elision: bool,
    domain: Option<(f64, f64)>,
) -> Result<Tensor> {
    let batch = worst_case_logits_batch(net, &input_box(x0, epsilon, domain)?, &[y_true], use_elision)?;
    Ok(batch.reshape(&[net.num_classes()])?)
}

/// Worst-case logits `[B, N]` for a batch of boxes.
pub fn worst_case_logits_batch(
    net: &Network,
    boxes: &IntervalBounds,
    labels: &[usize],
    use_elision: bool,
) -> Result<Tensor> {
    if let Some(&label) = labels.iter().find(|&&l| l >= net.num_classes()) {
        return Err(BoundsError::InvalidClass {
            label,
            classes: net.num_classes(),
        });
    }
    let (lower, upper, _) = batched(net, boxes)?;
    let mut tape = GradientTape::new();
    let params = net.bind(&mut tape, false);
    let vars = BoxVars {
        lower: tape.leaf(lower, false),
        upper: tape.leaf(upper, false),
    };
    let out = worst_case_graph(net, &mut tape, &params, vars, labels, use_elision)?;
    Ok(tape.value(out)?.clone())
}

/// Upper bound on `max_{y ≠ y_true} z_y - z_true` over each box of a batch.
pub fn max_margin_bounds(net: &Network, boxes: &IntervalBounds, labels: &[usize], use_elision: bool) -> Result<Vec<f64>> {
    let worst = worst_case_logits_batch(net, boxes, labels, use_elision)?;
    let n = net.num_classes();
    Ok(worst
        .data()
        .chunks_exact(n)
        .zip(labels)
        .map(|(row, &t)| {
            (0..n)
                .filter(|&y| y != t)
                .map(|y| row[y] - row[t])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}
