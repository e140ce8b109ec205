//! Certification: IBP checks, a complete input-splitting branch-and-bound
//! verifier, dataset-level error rates, polytope sampling and the search for
//! examples that PGD misses but branch-and-bound falsifies.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_region, pgd_batch, pgd_batch_streams, AttackConfig, AttackLoss, AttackRecord, Region, RestartInit, StepRule};
use crate::bounds::{input_box, max_margin_bounds, propagate, worst_case_logits, BoundsError, IntervalBounds};
use crate::data::Dataset;
use crate::network::{Activation, Layer, Network, NetworkError};
use crate::tensor::{Rng, Tensor};

pub type Result<T> = std::result::Result<T, BoundsError>;

/// Slack on the `≤ 0` decision that absorbs floating-point noise.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Per-class IBP margins of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbpVerdict {
    pub verified: bool,
    /// Upper bound on `z_y - z_true` for every class; the true-class entry is 0.
    pub margins: Vec<f64>,
    /// Largest margin over `y ≠ y_true`.
    pub max_margin: f64,
}

/// IBP certificate for the ε-box around `x0` (clipped to `domain`).
/// Verified when every margin is at most `-DEFAULT_TOLERANCE`.
pub fn ibp_verified(
    net: &Network,
    x0: &Tensor,
    y_true: usize,
    epsilon: f64,
    use_elision: bool,
    domain: Option<(f64, f64)>,
) -> Result<IbpVerdict> {
    let worst = worst_case_logits(net, x0, epsilon, y_true, use_elision, domain)?;
    let w = worst.data();
    let margins: Vec<f64> = (0..w.len()).map(|y| if y == y_true { 0.0 } else { w[y] - w[y_true] }).collect();
    let max_margin = margins
        .iter()
        .enumerate()
        .filter(|&(y, _)| y != y_true)
        .map(|(_, &m)| m)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(IbpVerdict {
        verified: max_margin <= -DEFAULT_TOLERANCE,
        margins,
        max_margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Bisect the widest input coordinate; the lowest index wins ties.
    #[default]
    WidestCoordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BabMode {
    /// Stop as soon as the sign of the worst margin is settled.
    #[default]
    Decide,
    /// Keep refining until the bracket on the worst margin is narrower than
    /// `gap_tolerance`, even after a counterexample turns up.
    Optimize { gap_tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BabConfig {
    pub max_nodes: usize,
    /// Wall-clock budget per example. Leave unset for reproducible node counts.
    pub time_budget_ms: Option<u64>,
    /// Boxes narrower than this are not split further.
    pub min_box_width: f64,
    pub tolerance: f64,
    pub split_rule: SplitRule,
    pub mode: BabMode,
    /// PGD steps run inside each box from its center; 0 checks only the center.
    pub attack_steps: usize,
    pub use_elision: bool,
    pub domain_clip: Option<[f64; 2]>,
}

impl Default for BabConfig {
    fn default() -> Self {
        Self {
            max_nodes: 5000,
            time_budget_ms: None,
            min_box_width: 1e-4,
            tolerance: DEFAULT_TOLERANCE,
            split_rule: SplitRule::WidestCoordinate,
            mode: BabMode::Decide,
            attack_steps: 10,
            use_elision: true,
            domain_clip: Some([0.0, 1.0]),
        }
    }
}

impl BabConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetworkError::InvalidLayer(m.into()).into());
        if !(self.min_box_width > 0.0) || !(self.tolerance > 0.0) {
            return bad("min_box_width and tolerance must be positive");
        }
        if self.max_nodes == 0 {
            return bad("max_nodes must be positive");
        }
        if let BabMode::Optimize { gap_tolerance } = self.mode {
            if !(gap_tolerance > 0.0) {
                return bad("gap_tolerance must be positive");
            }
        }
        Ok(())
    }

    fn domain(&self) -> Option<(f64, f64)> {
        self.domain_clip.map(|[lo, hi]| (lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Verified,
    /// A point of the ε-box that the network misclassifies (`input_shape`).
    Falsified(Tensor),
    /// Budget exhausted, or only boxes too small to split remain undecided.
    Unknown,
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Verified => "verified",
            Status::Falsified(_) => "falsified",
            Status::Unknown => "unknown",
        }
    }

    pub fn is_verified(&self) -> bool {
        matches!(self, Status::Verified)
    }
}

/// Result of [`bab_verify`]. The worst margin `max_{x, y ≠ y_true} z_y - z_true`
/// over the ε-box lies in `[best_lower_bound, best_upper_bound]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationOutcome {
    pub status: Status,
    pub best_upper_bound: f64,
    pub best_lower_bound: f64,
    pub nodes_explored: usize,
    pub wall_time_ms: u64,
}

struct Node {
    bound: f64,
    seq: u64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Max-heap on the bound; among equal bounds the older node comes first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound).then(other.seq.cmp(&self.seq))
    }
}

fn ensure_relu(net: &Network) -> Result<()> {
    let other = net.layers().iter().find_map(|l| match l {
        Layer::Activation(a) if *a != Activation::Relu => Some(*a),
        _ => None,
    });
    match other {
        Some(a) => Err(NetworkError::UnsupportedActivation(a).into()),
        None => Ok(()),
    }
}

fn batched_input(net: &Network, x: Vec<f64>) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    Ok(Tensor::new(shape, x)?)
}

fn margin_of(net: &Network, x: &Tensor, y_true: usize) -> Result<(f64, usize)> {
    let z = net.forward(x)?;
    let z = z.data();
    let m = (0..z.len())
        .filter(|&y| y != y_true)
        .map(|y| z[y] - z[y_true])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((m, net.predict(x)?[0]))
}

/// Complete verification of `y_true` on the ε-box around `x0` by splitting
/// the input box and bounding each piece with IBP.
///
/// Nodes are expanded best-first by their IBP bound. Each expanded node has
/// its center checked (and, with `attack_steps > 0`, a PGD run confined to
/// the node); a misclassified point ends the search as `Falsified`. Nodes
/// whose bound is at most `-tolerance` are safe.
pub fn bab_verify(net: &Network, x0: &Tensor, y_true: usize, epsilon: f64, cfg: &BabConfig) -> Result<VerificationOutcome> {
    cfg.validate()?;
    ensure_relu(net)?;
    if y_true >= net.num_classes() {
        return Err(BoundsError::InvalidClass {
            label: y_true,
            classes: net.num_classes(),
        });
    }
    let x0 = x0.reshape(net.input_shape()).map_err(NetworkError::from)?;
    let root = input_box(&x0, epsilon, cfg.domain())?;
    let (lo, hi) = root.into_parts();
    bab_box(net, lo.into_data(), hi.into_data(), y_true, cfg)
}

/// [`bab_verify`] on an explicit box.
pub fn bab_box(net: &Network, lower: Vec<f64>, upper: Vec<f64>, y_true: usize, cfg: &BabConfig) -> Result<VerificationOutcome> {
    let start = Instant::now();
    let elapsed_ms = |s: &Instant| s.elapsed().as_millis() as u64;
    let bound_of = |boxes: &[(&[f64], &[f64])]| -> Result<Vec<f64>> {
        let mut shape = vec![boxes.len()];
        shape.extend_from_slice(net.input_shape());
        let lo: Vec<f64> = boxes.iter().flat_map(|b| b.0.iter().copied()).collect();
        let hi: Vec<f64> = boxes.iter().flat_map(|b| b.1.iter().copied()).collect();
        let ib = IntervalBounds::new(Tensor::new(shape.clone(), lo)?, Tensor::new(shape, hi)?)?;
        max_margin_bounds(net, &ib, &vec![y_true; boxes.len()], cfg.use_elision)
    };

    let mut seq = 0u64;
    let root_bound = bound_of(&[(&lower, &upper)])?[0];
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        bound: root_bound,
        seq,
        lower,
        upper,
    });
    let mut best_upper = root_bound;
    let mut stuck_max = f64::NEG_INFINITY;
    let mut best_lower = f64::NEG_INFINITY;
    // Optimize mode keeps going after a misclassification, remembering it.
    let mut witness: Option<Tensor> = None;
    let mut nodes = 0usize;
    // Node attacks start at the center, so this stream is never drawn from.
    let mut rng = Rng::new(0);

    let finish = |status: Status, upper: f64, lower: f64, nodes: usize, start: &Instant| VerificationOutcome {
        status,
        best_upper_bound: upper,
        best_lower_bound: lower,
        nodes_explored: nodes,
        wall_time_ms: elapsed_ms(start),
    };

    let verdict = |upper: f64, witness: &mut Option<Tensor>| match witness.take() {
        Some(x) => Status::Falsified(x),
        None if upper <= -cfg.tolerance => Status::Verified,
        None => Status::Unknown,
    };

    loop {
        let open_max = heap.peek().map_or(f64::NEG_INFINITY, |n| n.bound);
        best_upper = best_upper.min(open_max.max(stuck_max)).max(best_lower);
        let Some(top) = heap.peek() else {
            let status = verdict(best_upper, &mut witness);
            return Ok(finish(status, best_upper, best_lower, nodes, &start));
        };
        let done = match cfg.mode {
            BabMode::Decide => top.bound <= -cfg.tolerance,
            BabMode::Optimize { gap_tolerance } => best_upper - best_lower < gap_tolerance,
        };
        if done || nodes >= cfg.max_nodes || cfg.time_budget_ms.is_some_and(|t| elapsed_ms(&start) >= t) {
            let status = verdict(best_upper, &mut witness);
            return Ok(finish(status, best_upper, best_lower, nodes, &start));
        }
        let node = heap.pop().expect("peeked");
        nodes += 1;

        let center: Vec<f64> = node.lower.iter().zip(&node.upper).map(|(l, u)| 0.5 * (l + u)).collect();
        let (found, found_margin, found_pred) = search_node(net, &node, center, y_true, cfg, &mut rng)?;
        if found_pred != y_true && (witness.is_none() || found_margin > best_lower) {
            witness = Some(found.reshape(net.input_shape()).map_err(NetworkError::from)?);
        }
        best_lower = best_lower.max(found_margin);
        if witness.is_some() && cfg.mode == BabMode::Decide {
            let status = verdict(best_upper, &mut witness);
            return Ok(finish(status, best_upper.max(best_lower), best_lower, nodes, &start));
        }

        let (axis, width) = node
            .lower
            .iter()
            .zip(&node.upper)
            .map(|(l, u)| u - l)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, w)| if w > acc.1 { (i, w) } else { acc });
        if width < cfg.min_box_width {
            stuck_max = stuck_max.max(node.bound);
            continue;
        }
        let mid = 0.5 * (node.lower[axis] + node.upper[axis]);
        let mut left_upper = node.upper.clone();
        left_upper[axis] = mid;
        let mut right_lower = node.lower.clone();
        right_lower[axis] = mid;
        let bounds = bound_of(&[(&node.lower, &left_upper), (&right_lower, &node.upper)])?;
        for (b, (lo, hi)) in bounds.into_iter().zip([(node.lower.clone(), left_upper), (right_lower, node.upper)]) {
            seq += 1;
            heap.push(Node {
                bound: b,
                seq,
                lower: lo,
                upper: hi,
            });
        }
    }
}

/// Checks the node center and runs a short margin PGD inside the node.
/// Returns the best point found, its margin and its predicted class.
fn search_node(
    net: &Network,
    node: &Node,
    center: Vec<f64>,
    y_true: usize,
    cfg: &BabConfig,
    rng: &mut Rng,
) -> Result<(Tensor, f64, usize)> {
    let c = batched_input(net, center)?;
    if cfg.attack_steps == 0 {
        let (m, p) = margin_of(net, &c, y_true)?;
        return Ok((c, m, p));
    }
    let steps = cfg.attack_steps;
    let region = Region {
        step: node.lower.iter().zip(&node.upper).map(|(l, u)| (u - l) / steps as f64).collect(),
        lower: node.lower.clone(),
        upper: node.upper.clone(),
    };
    let attack = AttackConfig {
        epsilon: 0.0,
        steps,
        restarts: 1,
        step_rule: StepRule::SignedGradient { step_size: None },
        loss: AttackLoss::Margin,
        domain_clip: None,
        seed: 0,
        init: RestartInit::CenterThenUniform,
        stop_on_success: true,
    };
    let r = attack_region(net, &c, &[y_true], &region, &attack, std::slice::from_mut(rng), None)?.remove(0);
    let (m, p) = margin_of(net, &r.x_adv, y_true)?;
    Ok((r.x_adv, m, p))
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub index: usize,
    pub status: String,
    pub ibp_margin: f64,
    pub bab_upper: f64,
    pub bab_lower: f64,
    pub nodes: usize,
    pub time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub nominal_rate: f64,
    pub pgd_rate: f64,
    pub bab_rate: f64,
    pub ibp_rate: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedErrorReport {
    pub rates: ErrorRates,
    pub records: Vec<VerifyRecord>,
    /// Counterexamples by example index, for falsified examples.
    pub counterexamples: Vec<(usize, Tensor)>,
}

/// Nominal, PGD, complete and IBP error rates of `net` on `ds` at `epsilon`.
///
/// Each example goes through a cascade: misclassified examples count as
/// errors everywhere; IBP-certified ones are verified without further work;
/// the rest are attacked with PGD (`attack.epsilon` is overridden), and only
/// those PGD cannot break go to [`bab_verify`]. Unknown outcomes count as
/// errors, so `pgd_rate ≤ bab_rate ≤ ibp_rate` always holds.
pub fn verified_error(
    net: &Network,
    ds: &Dataset,
    epsilon: f64,
    attack: &AttackConfig,
    bab: &BabConfig,
) -> Result<VerifiedErrorReport> {
    bab.validate()?;
    ensure_relu(net)?;
    if ds.is_empty() {
        return Err(NetworkError::InvalidLayer("empty dataset".into()).into());
    }
    let attack = AttackConfig {
        epsilon,
        domain_clip: bab.domain_clip,
        ..attack.clone()
    };
    const CHUNK: usize = 100;
    let mut records = Vec::with_capacity(ds.len());
    let mut counterexamples = Vec::new();
    let (mut nominal, mut pgd, mut bab_err, mut ibp) = (0usize, 0usize, 0usize, 0usize);
    for start in (0..ds.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(ds.len())).collect();
        let (x, labels) = ds.batch(&idx);
        let pred = net.predict(&x)?;
        let margins = max_margin_bounds(net, &input_box(&x, epsilon, bab.domain())?, &labels, bab.use_elision)?;

        let to_attack: Vec<usize> = (0..idx.len())
            .filter(|&k| pred[k] == labels[k] && margins[k] > -DEFAULT_TOLERANCE)
            .collect();
        let attacked = if to_attack.is_empty() {
            Vec::new()
        } else {
            let chosen: Vec<usize> = to_attack.iter().map(|&k| idx[k]).collect();
            let (ax, al) = ds.batch(&chosen);
            // Streams follow the example index, exactly as in `empirical_error`.
            let streams: Vec<u64> = chosen.iter().map(|&i| i as u64).collect();
            pgd_batch_streams(net, &ax, &al, &attack, &streams)?
        };

        let mut attacked_iter = to_attack.iter().zip(attacked);
        let mut next_attack = attacked_iter.next();
        for k in 0..idx.len() {
            let i = idx[k];
            let xi = ds.example(i);
            let t0 = Instant::now();
            let (clean_margin, _) = margin_of(net, &xi, labels[k])?;
            let mut rec = VerifyRecord {
                index: i,
                status: String::new(),
                ibp_margin: margins[k],
                bab_upper: margins[k],
                bab_lower: clean_margin,
                nodes: 0,
                time_ms: 0,
            };
            if pred[k] != labels[k] {
                nominal += 1;
                pgd += 1;
                bab_err += 1;
                ibp += 1;
                rec.status = "falsified".into();
                counterexamples.push((i, xi.reshape(net.input_shape()).map_err(NetworkError::from)?));
            } else if margins[k] <= -DEFAULT_TOLERANCE {
                rec.status = "verified".into();
            } else {
                ibp += 1;
                let (_, r) = next_attack.take().expect("attacked in order");
                next_attack = attacked_iter.next();
                if r.success {
                    pgd += 1;
                    bab_err += 1;
                    let (m, _) = margin_of(net, &r.x_adv, labels[k])?;
                    rec.status = "falsified".into();
                    rec.bab_lower = m;
                    counterexamples.push((i, r.x_adv.reshape(net.input_shape()).map_err(NetworkError::from)?));
                } else {
                    let out = bab_verify(net, &xi, labels[k], epsilon, bab)?;
                    rec.status = out.status.name().into();
                    rec.bab_upper = out.best_upper_bound;
                    rec.bab_lower = out.best_lower_bound.max(clean_margin);
                    rec.nodes = out.nodes_explored;
                    if !out.status.is_verified() {
                        bab_err += 1;
                    }
                    if let Status::Falsified(c) = out.status {
                        counterexamples.push((i, c));
                    }
                }
            }
            rec.time_ms = t0.elapsed().as_millis() as u64;
            records.push(rec);
        }
    }
    let n = ds.len() as f64;
    Ok(VerifiedErrorReport {
        rates: ErrorRates {
            nominal_rate: nominal as f64 / n,
            pgd_rate: pgd as f64 / n,
            bab_rate: bab_err as f64 / n,
            ibp_rate: ibp as f64 / n,
            count: ds.len(),
        },
        records,
        counterexamples,
    })
}

/// Sampled images of an input box at one layer, with that layer's IBP box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopeSample {
    pub layer: usize,
    pub points: Vec<[f64; 2]>,
    pub box_lower: [f64; 2],
    pub box_upper: [f64; 2],
}

impl PolytopeSample {
    pub fn box_area(&self) -> f64 {
        (self.box_upper[0] - self.box_lower[0]) * (self.box_upper[1] - self.box_lower[1])
    }

    /// True when every sampled point lies in the box (with slack `tol`).
    pub fn contained(&self, tol: f64) -> bool {
        self.points.iter().all(|p| {
            (0..2).all(|k| p[k] >= self.box_lower[k] - tol && p[k] <= self.box_upper[k] + tol)
        })
    }
}

/// Largest grid accepted by [`polytope_sample`].
pub const MAX_POLYTOPE_POINTS: usize = 4_000_000;

/// Maps a regular grid over the ε-box around `x0` (clipped to `domain`) to
/// the output of `layers[layer]`, together with the IBP box at that layer.
///
/// The layer output must be 2-D unless `projection` (`[2, D]`) is given, in
/// which case points are projected and the box is projected with interval
/// arithmetic.
pub fn polytope_sample(
    net: &Network,
    x0: &Tensor,
    epsilon: f64,
    samples_per_axis: usize,
    layer: usize,
    projection: Option<&Tensor>,
    domain: Option<(f64, f64)>,
) -> Result<PolytopeSample> {
    if layer >= net.layers().len() {
        return Err(NetworkError::InvalidLayer(format!("layer {layer} out of range")).into());
    }
    let x0 = x0.reshape(net.input_shape()).map_err(NetworkError::from)?;
    let ib = input_box(&x0, epsilon, domain)?;
    let width: usize = net.layer_shapes()[layer].iter().product();
    if let Some(p) = projection {
        if p.shape() != [2, width] {
            return Err(BoundsError::Shape(p.shape().to_vec(), vec![2, width]));
        }
    } else if width != 2 {
        return Err(NetworkError::InvalidLayer(format!(
            "layer {layer} has {width} outputs; a 2-D projection is required"
        ))
        .into());
    }
    let d = x0.len();
    let n = samples_per_axis.max(1);
    let total = (0..d).try_fold(1usize, |acc, _| acc.checked_mul(n)).filter(|&t| t <= MAX_POLYTOPE_POINTS);
    let Some(total) = total else {
        return Err(NetworkError::InvalidLayer(format!("{n}^{d} samples exceed {MAX_POLYTOPE_POINTS}")).into());
    };

    let lo = ib.lower().data();
    let hi = ib.upper().data();
    let coord = |k: usize, j: usize| {
        if n == 1 {
            0.5 * (lo[k] + hi[k])
        } else {
            lo[k] + (hi[k] - lo[k]) * j as f64 / (n - 1) as f64
        }
    };
    let project = |v: &[f64]| -> [f64; 2] {
        match projection {
            Some(p) => {
                let pd = p.data();
                let dot = |row: usize| (0..width).fold(0.0, |s, i| s + pd[row * width + i] * v[i]);
                [dot(0), dot(1)]
            }
            None => [v[0], v[1]],
        }
    };

    let mut points = Vec::with_capacity(total);
    const CHUNK: usize = 4096;
    let mut flat = 0usize;
    while flat < total {
        let count = CHUNK.min(total - flat);
        let mut data = Vec::with_capacity(count * d);
        for q in flat..flat + count {
            let mut rest = q;
            for k in 0..d {
                data.push(coord(k, rest % n));
                rest /= n;
            }
        }
        let mut shape = vec![count];
        shape.extend_from_slice(net.input_shape());
        let x = Tensor::new(shape, data)?;
        let out = forward_to(net, &x, layer)?;
        for row in out.data().chunks_exact(width) {
            points.push(project(row));
        }
        flat += count;
    }

    let bounds = propagate(net, &ib, false)?;
    let b = &bounds[layer];
    let (bl, bu) = (b.lower().data(), b.upper().data());
    let (box_lower, box_upper) = match projection {
        Some(p) => {
            let pd = p.data();
            let mut l = [0.0; 2];
            let mut u = [0.0; 2];
            for row in 0..2 {
                let (mut c, mut r) = (0.0, 0.0);
                for i in 0..width {
                    let w = pd[row * width + i];
                    c += w * 0.5 * (bl[i] + bu[i]);
                    r += w.abs() * 0.5 * (bu[i] - bl[i]);
                }
                l[row] = c - r;
                u[row] = c + r;
            }
            (l, u)
        }
        None => ([bl[0], bl[1]], [bu[0], bu[1]]),
    };
    Ok(PolytopeSample {
        layer,
        points,
        box_lower,
        box_upper,
    })
}

/// Output of `layers[..=layer]` for a batch.
fn forward_to(net: &Network, x: &Tensor, layer: usize) -> Result<Tensor> {
    let mut tape = crate::network::GradientTape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), false);
    let out = net.forward_graph_range(&mut tape, &params, xv, 0..layer + 1)?;
    Ok(tape.value(out)?.clone())
}

/// An example PGD failed to break that branch-and-bound falsified.
#[derive(Debug, Clone, PartialEq)]
pub struct GapFinding {
    pub index: usize,
    pub attack: AttackRecord,
    pub counterexample: Tensor,
    pub counterexample_class: usize,
    pub linf_distance: f64,
    pub nodes: usize,
}

/// Examples of `ds` that are classified correctly, survive PGD, and are
/// falsified by [`bab_verify`]. Every counterexample is replayed before it
/// is reported.
pub fn pgd_gap_hunt(
    net: &Network,
    ds: &Dataset,
    epsilon: f64,
    attack: &AttackConfig,
    bab: &BabConfig,
) -> Result<Vec<GapFinding>> {
    let attack = AttackConfig {
        epsilon,
        domain_clip: bab.domain_clip,
        ..attack.clone()
    };
    let mut found = Vec::new();
    for i in 0..ds.len() {
        let x = ds.example(i);
        let y = ds.labels()[i];
        if net.predict(&x)?[0] != y {
            continue;
        }
        let r = pgd_batch(net, &x, &[y], &attack, i as u64)?.remove(0);
        if r.success {
            continue;
        }
        let out = bab_verify(net, &x, y, epsilon, bab)?;
        if let Status::Falsified(c) = out.status {
            let class = net.predict(&c)?[0];
            let linf_distance = c.max_abs_diff(&x.reshape(net.input_shape())?)?;
            if class == y || linf_distance > epsilon + 1e-12 {
                return Err(NetworkError::InvalidLayer(format!("counterexample for example {i} does not replay")).into());
            }
            found.push(GapFinding {
                index: i,
                attack: AttackRecord {
                    index: i,
                    success: false,
                    loss: r.loss,
                    linf_distance: r.linf_distance,
                },
                counterexample: c,
                counterexample_class: class,
                linf_distance,
                nodes: out.nodes_explored,
            });
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Layer};

    fn trap() -> Network {
        Network::new(
            vec![
                Layer::linear(Tensor::matrix(&[&[20.0]]).unwrap(), Tensor::vector(vec![-11.6]).unwrap()).unwrap(),
                Layer::Activation(Activation::Relu),
                Layer::linear(Tensor::matrix(&[&[0.0], &[1.0]]).unwrap(), Tensor::vector(vec![0.1, 0.0]).unwrap())
                    .unwrap(),
            ],
            vec![1],
        )
        .unwrap()
    }

    #[test]
    fn trap_is_falsified_by_splitting() {
        let net = trap();
        let x = Tensor::vector(vec![0.5]).unwrap();
        let out = bab_verify(&net, &x, 0, 0.1, &BabConfig::default()).unwrap();
        let Status::Falsified(c) = &out.status else { panic!("{out:?}") };
        assert_eq!(net.predict(c).unwrap(), vec![1]);
        assert!((c.data()[0] - 0.5).abs() <= 0.1 + 1e-12);
    }

    #[test]
    fn affine_net_resolves_at_root() {
        let net = Network::new(
            vec![Layer::linear(Tensor::matrix(&[&[1.0, -1.0], &[0.5, 0.5]]).unwrap(), Tensor::vector(vec![1.0, 0.0]).unwrap())
                .unwrap()],
            vec![2],
        )
        .unwrap();
        let x = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let out = bab_verify(&net, &x, 0, 0.1, &BabConfig::default()).unwrap();
        assert_eq!(out.status, Status::Verified);
        assert_eq!(out.nodes_explored, 0);
        // z1 - z0 = -0.5a + 1.5b - 1, maximized at a = 0.4, b = 0.6.
        assert!((out.best_upper_bound - (-0.2 + 0.9 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn polytope_at_zero_epsilon_is_a_point() {
        let net = trap();
        let x = Tensor::vector(vec![0.7]).unwrap();
        let s = polytope_sample(&net, &x, 0.0, 5, 2, None, None).unwrap();
        let z = net.forward(&x).unwrap();
        assert!(s.points.iter().all(|p| p == &[z.data()[0], z.data()[1]]));
        assert_eq!(s.box_lower, s.box_upper);
        assert_eq!(s.box_area(), 0.0);
    }
}
