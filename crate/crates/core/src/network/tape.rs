//! Tensor-level reverse-mode differentiation.
//!
//! Values are computed eagerly when an operation is recorded. Each node keeps
//! whatever it needs for its vector-Jacobian product; nodes that no gradient
//! leaf feeds into are skipped during [`GradientTape::backward`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Activation, NetworkError, Result};
use crate::tensor::{self, kernels, ConvGeometry, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geometry: ConvGeometry,
        patches: Vec<f64>,
    },
    Abs(Var),
    Activation(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Vec<f64>,
    },
    SpecSoftplus {
        worst: Var,
        labels: Vec<usize>,
    },
    SpecHinge {
        worst: Var,
        labels: Vec<usize>,
        offset: f64,
    },
    MaxMargin {
        logits: Var,
        labels: Vec<usize>,
        argmax: Vec<usize>,
    },
    WorstCase {
        lower: Var,
        upper: Var,
        labels: Vec<usize>,
    },
    ElidedLogits {
        center: Var,
        radius: Var,
        w: Var,
        labels: Vec<usize>,
    },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
#[derive(Debug)]
pub struct GradientTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradientTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every variable that required one.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    tensor::ensure_finite(op, data).map_err(|_| NetworkError::NonFinite { op })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(NetworkError::InvalidLayer(format!(
            "{} labels for a batch of {rows}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(NetworkError::InvalidClass { label: bad, classes });
    }
    Ok(())
}

impl GradientTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(NetworkError::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(NetworkError::ForeignVar)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].needs_grad)
    }

    /// Records a constant or a differentiable input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.check(v)?.value)
    }

    /// `x Wᵀ + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.check(x)?.value.shape().to_vec();
        let ws = self.check(w)?.value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(tensor::TensorError::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            }
            .into());
        }
        let (batch, inputs, outputs) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.check(b)?.value.shape() != [outputs] {
                return Err(tensor::TensorError::ShapeMismatch {
                    op: "linear bias",
                    left: ws,
                    right: self.nodes[b.index].value.shape().to_vec(),
                }
                .into());
            }
        }
        let wt = kernels::transpose(outputs, inputs, self.nodes[w.index].value.data());
        let mut out = vec![0.0; batch * outputs];
        kernels::gemm(batch, inputs, outputs, self.nodes[x.index].value.data(), &wt, &mut out);
        if let Some(b) = b {
            let bias = self.nodes[b.index].value.data();
            for row in out.chunks_exact_mut(outputs) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        check_finite("linear", &out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(Tensor::from_raw(vec![batch, outputs], out), Op::Linear { x, w, b }, needs))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [K, C, h, w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.check(x)?.value.shape().to_vec();
        let ws = self.check(w)?.value.shape().to_vec();
        let g = tensor::conv_geometry(&xs, &ws, stride, padding)?;
        if let Some(b) = b {
            if self.check(b)?.value.shape() != [g.out_channels] {
                return Err(tensor::TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: ws,
                    right: self.nodes[b.index].value.shape().to_vec(),
                }
                .into());
            }
        }
        let bias = b.map(|b| self.nodes[b.index].value.data());
        let (out, patches) = tensor::conv2d_raw(
            &g,
            self.nodes[x.index].value.data(),
            self.nodes[w.index].value.data(),
            bias,
        );
        check_finite("conv2d", &out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        let patches = if self.nodes[w.index].needs_grad { patches } else { Vec::new() };
        Ok(self.push(
            Tensor::from_raw(vec![g.batch, g.out_channels, g.out_h, g.out_w], out),
            Op::Conv2d {
                x,
                w,
                b,
                geometry: g,
                patches,
            },
            needs,
        ))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.value.abs();
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Abs(x), needs))
    }

    pub fn activation(&mut self, x: Var, a: Activation) -> Result<Var> {
        let src = &self.check(x)?.value;
        let data: Vec<f64> = src.data().iter().map(|&v| a.apply(v)).collect();
        let value = Tensor::from_raw(src.shape().to_vec(), data);
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Activation(x, a), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.check(a)?.value.shape();
        let sb = self.check(b)?.value.shape();
        if sa != sb {
            return Err(tensor::TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            }
            .into());
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.nodes[a.index].value.add(&self.nodes[b.index].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.nodes[a.index].value.sub(&self.nodes[b.index].value)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.check(x)?.value.scale(factor)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(x)?.value.reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    fn logits_dims(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.check(v)?.value.shape();
        if s.len() != 2 {
            return Err(tensor::TensorError::Rank {
                op: "logits",
                expected: 2,
                shape: s.to_vec(),
            }
            .into());
        }
        Ok((s[0], s[1]))
    }

    /// Per-example softmax cross-entropy, `[B, N] -> [B]`.
    ///
    /// Computed from the differences `z_i - z_true`, so adding a constant to
    /// every logit of a row leaves the result bitwise unchanged whenever the
    /// shifted true logit is exactly zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.logits_dims(logits)?;
        check_labels(labels, rows, classes)?;
        let z = self.nodes[logits.index].value.data();
        let mut out = Vec::with_capacity(rows);
        let mut softmax = vec![0.0; rows * classes];
        for (r, &t) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let zt = row[t];
            let m = row.iter().map(|&v| v - zt).fold(f64::NEG_INFINITY, f64::max);
            let sm = &mut softmax[r * classes..(r + 1) * classes];
            let mut s = 0.0;
            for (p, &v) in sm.iter_mut().zip(row) {
                *p = ((v - zt) - m).exp();
                s += *p;
            }
            for p in sm.iter_mut() {
                *p /= s;
            }
            out.push(m + s.ln());
        }
        check_finite("cross_entropy", &out)?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::from_raw(vec![rows], out),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
            needs,
        ))
    }

    /// Mean over `y ≠ y_true` of `softplus(ẑ_y - ẑ_true)`, `[B, N] -> [B]`.
    pub fn spec_softplus(&mut self, worst: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.logits_dims(worst)?;
        check_labels(labels, rows, classes)?;
        let z = self.nodes[worst.index].value.data();
        let denom = (classes.max(2) - 1) as f64;
        let out: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = &z[r * classes..(r + 1) * classes];
                let s = (0..classes)
                    .filter(|&y| y != t)
                    .fold(0.0, |acc, y| acc + tensor::softplus(row[y] - row[t]));
                s / denom
            })
            .collect();
        check_finite("spec_softplus", &out)?;
        let needs = self.needs(&[worst]);
        Ok(self.push(
            Tensor::from_raw(vec![rows], out),
            Op::SpecSoftplus {
                worst,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over `y ≠ y_true` of `max(0, ẑ_y - ẑ_true + offset)`, `[B, N] -> [B]`.
    pub fn spec_hinge(&mut self, worst: Var, labels: &[usize], offset: f64) -> Result<Var> {
        let (rows, classes) = self.logits_dims(worst)?;
        check_labels(labels, rows, classes)?;
        let z = self.nodes[worst.index].value.data();
        let denom = (classes.max(2) - 1) as f64;
        let out: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = &z[r * classes..(r + 1) * classes];
                let s = (0..classes)
                    .filter(|&y| y != t)
                    .fold(0.0, |acc, y| acc + (row[y] - row[t] + offset).max(0.0));
                s / denom
            })
            .collect();
        check_finite("spec_hinge", &out)?;
        let needs = self.needs(&[worst]);
        Ok(self.push(
            Tensor::from_raw(vec![rows], out),
            Op::SpecHinge {
                worst,
                labels: labels.to_vec(),
                offset,
            },
            needs,
        ))
    }

    /// `max_{y ≠ y_true} z_y - z_true` per example, `[B, N] -> [B]`.
    pub fn max_margin(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.logits_dims(logits)?;
        check_labels(labels, rows, classes)?;
        if classes < 2 {
            return Err(NetworkError::InvalidClass { label: 1, classes });
        }
        let z = self.nodes[logits.index].value.data();
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for (r, &t) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let best = (0..classes)
                .filter(|&y| y != t)
                .reduce(|a, y| if row[y] > row[a] { y } else { a })
                .expect("at least two classes");
            argmax.push(best);
            out.push(row[best] - row[t]);
        }
        check_finite("max_margin", &out)?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::from_raw(vec![rows], out),
            Op::MaxMargin {
                logits,
                labels: labels.to_vec(),
                argmax,
            },
            needs,
        ))
    }

    /// Worst-case logits from output bounds: the true class takes its lower
    /// bound, every other class its upper bound.
    pub fn worst_case(&mut self, lower: Var, upper: Var, labels: &[usize]) -> Result<Var> {
        self.same_shape("worst_case", lower, upper)?;
        let (rows, classes) = self.logits_dims(lower)?;
        check_labels(labels, rows, classes)?;
        let mut out = self.nodes[upper.index].value.data().to_vec();
        let lo = self.nodes[lower.index].value.data();
        for (r, &t) in labels.iter().enumerate() {
            out[r * classes + t] = lo[r * classes + t];
        }
        let needs = self.needs(&[lower, upper]);
        Ok(self.push(
            Tensor::from_raw(vec![rows, classes], out),
            Op::WorstCase {
                lower,
                upper,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Worst-case logits with the final linear layer folded into each
    /// specification `e_y - e_true`.
    ///
    /// `center` holds the final layer applied to the penultimate box center,
    /// `radius` the penultimate box radius and `w` the final weight. Entry
    /// `y ≠ y_true` is `(center_y - center_true) + Σ_i |w_yi - w_true,i| radius_i`;
    /// the true-class entry is 0.
    pub fn elided_logits(&mut self, center: Var, radius: Var, w: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.logits_dims(center)?;
        let (rrows, hidden) = self.logits_dims(radius)?;
        let ws = self.check(w)?.value.shape().to_vec();
        if rrows != rows || ws != [classes, hidden] {
            return Err(tensor::TensorError::ShapeMismatch {
                op: "elided_logits",
                left: vec![rows, classes, hidden],
                right: ws,
            }
            .into());
        }
        check_labels(labels, rows, classes)?;
        let c = self.nodes[center.index].value.data();
        let r = self.nodes[radius.index].value.data();
        let wd = self.nodes[w.index].value.data();
        let mut out = vec![0.0; rows * classes];
        for (b, &t) in labels.iter().enumerate() {
            let rb = &r[b * hidden..(b + 1) * hidden];
            let wt = &wd[t * hidden..(t + 1) * hidden];
            for y in 0..classes {
                if y == t {
                    continue;
                }
                let wy = &wd[y * hidden..(y + 1) * hidden];
                let mut s = 0.0;
                for i in 0..hidden {
                    s += (wy[i] - wt[i]).abs() * rb[i];
                }
                out[b * classes + y] = (c[b * classes + y] - c[b * classes + t]) + s;
            }
        }
        check_finite("elided_logits", &out)?;
        let needs = self.needs(&[center, radius, w]);
        Ok(self.push(
            Tensor::from_raw(vec![rows, classes], out),
            Op::ElidedLogits {
                center,
                radius,
                w,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Mean of all entries, summed in index order.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        if v.is_empty() {
            return Err(NetworkError::NotScalar(v.shape().to_vec()));
        }
        let m = v.mean();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_raw(Vec::new(), vec![m]), Op::Mean(x), needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(NetworkError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.needs_grad {
            return Err(NetworkError::Disconnected);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad && matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::from_raw(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.index].value.data();
        let wants = |v: Var| self.nodes[v.index].needs_grad;
        let acc = |v: Var, delta: Vec<f64>, grads: &mut [Option<Vec<f64>>]| match &mut grads[v.index] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };

        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.index].value.shape();
                let (batch, inputs) = (xs[0], xs[1]);
                let outputs = node.value.shape()[1];
                if wants(*x) {
                    let mut dx = vec![0.0; batch * inputs];
                    kernels::gemm(batch, outputs, inputs, g, val(*w), &mut dx);
                    acc(*x, dx, grads);
                }
                if wants(*w) {
                    let gt = kernels::transpose(batch, outputs, g);
                    let mut dw = vec![0.0; outputs * inputs];
                    kernels::gemm(outputs, batch, inputs, &gt, val(*x), &mut dw);
                    acc(*w, dw, grads);
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let mut db = vec![0.0; outputs];
                    for row in g.chunks_exact(outputs) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(b, db, grads);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geometry,
                patches,
            } => {
                let gp = kernels::nchw_to_positions(geometry, g);
                let (np, k, plen) = (geometry.positions(), geometry.out_channels, geometry.patch_len());
                if wants(*w) {
                    let gpt = kernels::transpose(np, k, &gp);
                    let mut dw = vec![0.0; k * plen];
                    kernels::gemm(k, np, plen, &gpt, patches, &mut dw);
                    acc(*w, dw, grads);
                }
                if wants(*x) {
                    let mut dpatches = vec![0.0; np * plen];
                    kernels::gemm(np, k, plen, &gp, val(*w), &mut dpatches);
                    acc(*x, kernels::col2im(geometry, &dpatches), grads);
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let mut db = vec![0.0; k];
                    for row in gp.chunks_exact(k) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(b, db, grads);
                }
            }
            Op::Abs(x) => {
                if wants(*x) {
                    let d = g
                        .iter()
                        .zip(val(*x))
                        .map(|(g, &v)| {
                            if v > 0.0 {
                                *g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(*x, d, grads);
                }
            }
            Op::Activation(x, a) => {
                if wants(*x) {
                    let out = node.value.data();
                    let d = match a {
                        Activation::Relu => g
                            .iter()
                            .zip(val(*x))
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Activation::Sigmoid => g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect(),
                        Activation::Tanh => g.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect(),
                    };
                    acc(*x, d, grads);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec(), grads);
                }
                if wants(*b) {
                    acc(*b, g.to_vec(), grads);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec(), grads);
                }
                if wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect(), grads);
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    acc(*x, g.iter().map(|v| v * f).collect(), grads);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    acc(*x, g.to_vec(), grads);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                if wants(*logits) {
                    let classes = softmax.len() / labels.len();
                    let mut d = softmax.clone();
                    for (r, &t) in labels.iter().enumerate() {
                        d[r * classes + t] -= 1.0;
                        for v in &mut d[r * classes..(r + 1) * classes] {
                            *v *= g[r];
                        }
                    }
                    acc(*logits, d, grads);
                }
            }
            Op::SpecSoftplus { worst, labels } => {
                if wants(*worst) {
                    let z = val(*worst);
                    let classes = z.len() / labels.len();
                    let denom = (classes.max(2) - 1) as f64;
                    let mut d = vec![0.0; z.len()];
                    for (r, &t) in labels.iter().enumerate() {
                        for y in (0..classes).filter(|&y| y != t) {
                            let s = tensor::sigmoid(z[r * classes + y] - z[r * classes + t]) * g[r] / denom;
                            d[r * classes + y] += s;
                            d[r * classes + t] -= s;
                        }
                    }
                    acc(*worst, d, grads);
                }
            }
            Op::SpecHinge { worst, labels, offset } => {
                if wants(*worst) {
                    let z = val(*worst);
                    let classes = z.len() / labels.len();
                    let denom = (classes.max(2) - 1) as f64;
                    let mut d = vec![0.0; z.len()];
                    for (r, &t) in labels.iter().enumerate() {
                        for y in (0..classes).filter(|&y| y != t) {
                            if z[r * classes + y] - z[r * classes + t] + offset > 0.0 {
                                let s = g[r] / denom;
                                d[r * classes + y] += s;
                                d[r * classes + t] -= s;
                            }
                        }
                    }
                    acc(*worst, d, grads);
                }
            }
            Op::MaxMargin { logits, labels, argmax } => {
                if wants(*logits) {
                    let classes = val(*logits).len() / labels.len();
                    let mut d = vec![0.0; labels.len() * classes];
                    for (r, (&t, &y)) in labels.iter().zip(argmax).enumerate() {
                        d[r * classes + y] += g[r];
                        d[r * classes + t] -= g[r];
                    }
                    acc(*logits, d, grads);
                }
            }
            Op::WorstCase { lower, upper, labels } => {
                let classes = g.len() / labels.len();
                if wants(*lower) {
                    let mut d = vec![0.0; g.len()];
                    for (r, &t) in labels.iter().enumerate() {
                        d[r * classes + t] = g[r * classes + t];
                    }
                    acc(*lower, d, grads);
                }
                if wants(*upper) {
                    let mut d = g.to_vec();
                    for (r, &t) in labels.iter().enumerate() {
                        d[r * classes + t] = 0.0;
                    }
                    acc(*upper, d, grads);
                }
            }
            Op::ElidedLogits {
                center,
                radius,
                w,
                labels,
            } => {
                let classes = g.len() / labels.len();
                let r = val(*radius);
                let hidden = r.len() / labels.len();
                let wd = val(*w);
                let mut dc = vec![0.0; g.len()];
                let mut dr = vec![0.0; r.len()];
                let mut dw = vec![0.0; wd.len()];
                for (b, &t) in labels.iter().enumerate() {
                    let rb = &r[b * hidden..(b + 1) * hidden];
                    for y in (0..classes).filter(|&y| y != t) {
                        let gy = g[b * classes + y];
                        if gy == 0.0 {
                            continue;
                        }
                        dc[b * classes + y] += gy;
                        dc[b * classes + t] -= gy;
                        for i in 0..hidden {
                            let diff = wd[y * hidden + i] - wd[t * hidden + i];
                            dr[b * hidden + i] += gy * diff.abs();
                            let s = if diff > 0.0 {
                                gy * rb[i]
                            } else if diff < 0.0 {
                                -gy * rb[i]
                            } else {
                                0.0
                            };
                            dw[y * hidden + i] += s;
                            dw[t * hidden + i] -= s;
                        }
                    }
                }
                if wants(*center) {
                    acc(*center, dc, grads);
                }
                if wants(*radius) {
                    acc(*radius, dr, grads);
                }
                if wants(*w) {
                    acc(*w, dw, grads);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    acc(*x, vec![g[0] / n as f64; n], grads);
                }
            }
        }
    }
}
