//! Untargeted projected gradient attacks under an ℓ∞ budget.
//!
//! Every iterate is projected onto the ε-box around the clean input,
//! intersected with the data domain. The returned point is the best iterate
//! visited over all restarts: misclassifying iterates beat correctly
//! classified ones, then higher attack loss wins, then the earliest.

use serde::{Deserialize, Serialize};

use crate::bounds::{input_box, BoundsError};
use crate::data::Dataset;
use crate::network::{GradientTape, Network, NetworkError};
use crate::tensor::{self, Rng, Tensor};

pub type Result<T> = std::result::Result<T, BoundsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// Ascend the softmax cross-entropy of the true label.
    CrossEntropyAscent,
    /// Ascend `max_{y ≠ y_true} z_y - z_true`.
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// `x += α · sign(∇)`; `α` defaults to `2ε / steps`.
    SignedGradient { step_size: Option<f64> },
    /// Adam ascent on the input with the given learning rate.
    Adam { learning_rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartInit {
    /// Every restart starts uniformly at random in the feasible box.
    Uniform,
    /// Restart 0 starts at the clean input, later ones uniformly.
    CenterThenUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
    pub step_rule: StepRule,
    pub loss: AttackLoss,
    pub domain_clip: Option<[f64; 2]>,
    pub seed: u64,
    pub init: RestartInit,
    /// Skip the remaining restarts of an example once it is misclassified.
    pub stop_on_success: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            steps: 200,
            restarts: 10,
            step_rule: StepRule::SignedGradient { step_size: None },
            loss: AttackLoss::CrossEntropyAscent,
            domain_clip: Some([0.0, 1.0]),
            seed: 0,
            init: RestartInit::Uniform,
            stop_on_success: true,
        }
    }
}

impl AttackConfig {
    /// The seven-step Adam variant used for adversarial training.
    pub fn training(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 7,
            restarts: 1,
            step_rule: StepRule::Adam { learning_rate: 0.1 },
            stop_on_success: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(BoundsError::Epsilon(self.epsilon));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(NetworkError::InvalidLayer("attack needs at least one step and one restart".into()).into());
        }
        Ok(())
    }

    fn domain(&self) -> Option<(f64, f64)> {
        self.domain_clip.map(|[lo, hi]| (lo, hi))
    }
}

/// Outcome of attacking one example.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub success: bool,
    pub loss: f64,
    pub linf_distance: f64,
    pub predicted: usize,
}

/// One line of an attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub index: usize,
    pub success: bool,
    pub loss: f64,
    pub linf_distance: f64,
}

/// Per-example feasible boxes and signed step sizes, flattened over the batch.
#[derive(Debug, Clone)]
pub(crate) struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub step: Vec<f64>,
}

impl Region {
    /// ε-boxes around each row of `x0`, clipped to the config domain.
    fn around(x0: &Tensor, cfg: &AttackConfig) -> Result<Self> {
        let b = input_box(x0, cfg.epsilon, cfg.domain())?;
        let alpha = match cfg.step_rule {
            StepRule::SignedGradient { step_size } => step_size.unwrap_or(2.0 * cfg.epsilon / cfg.steps as f64),
            StepRule::Adam { learning_rate } => learning_rate,
        };
        let (lower, upper) = b.into_parts();
        Ok(Self {
            step: vec![alpha; lower.len()],
            lower: lower.into_data(),
            upper: upper.into_data(),
        })
    }
}

struct Best {
    x: Vec<f64>,
    success: bool,
    loss: f64,
    predicted: usize,
}

impl Best {
    fn consider(&mut self, x: &[f64], success: bool, loss: f64, predicted: usize) {
        let better = match (success, self.success) {
            (true, false) => true,
            (false, true) => false,
            _ => loss > self.loss,
        };
        if better {
            self.x.copy_from_slice(x);
            self.success = success;
            self.loss = loss;
            self.predicted = predicted;
        }
    }
}

type LossAndGrad = (Vec<f64>, Vec<usize>, Option<Vec<f64>>);

/// Attack loss per example, prediction per example and (optionally) the
/// gradient of the summed loss with respect to the inputs.
fn loss_and_grad(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    loss: AttackLoss,
    want_grad: bool,
) -> Result<LossAndGrad> {
    let mut tape = GradientTape::new();
    let params = net.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), want_grad);
    let logits = net.forward_graph(&mut tape, &params, xv)?;
    let per = match loss {
        AttackLoss::CrossEntropyAscent => tape.cross_entropy(logits, labels)?,
        AttackLoss::Margin => tape.max_margin(logits, labels)?,
    };
    let losses = tape.value(per)?.data().to_vec();
    let predicted = tensor::argmax_rows(tape.value(logits)?.data(), net.num_classes());
    let grad = if want_grad {
        // Scaling the mean back by the batch size seeds every example's
        // gradient with exactly 1, so results do not depend on batching.
        let mean = tape.mean(per)?;
        let total = tape.scale(mean, labels.len() as f64)?;
        let g = tape.backward(total)?;
        Some(g.get(xv).expect("input requires grad").data().to_vec())
    } else {
        None
    };
    Ok((losses, predicted, grad))
}

/// Core batched attack. `x0` is `[B, ..]`; `rngs` holds one stream per
/// example so results do not depend on how examples are batched.
pub(crate) fn attack_region(
    net: &Network,
    x0: &Tensor,
    labels: &[usize],
    region: &Region,
    cfg: &AttackConfig,
    rngs: &mut [Rng],
    init: Option<&Tensor>,
) -> Result<Vec<AttackResult>> {
    let batch = labels.len();
    let dim = x0.len() / batch.max(1);
    let shape = x0.shape().to_vec();
    let x0d = x0.data();

    // The clean input is the first candidate, so an attack never reports
    // anything weaker than doing nothing.
    let (clean_loss, clean_pred, _) = loss_and_grad(net, x0, labels, cfg.loss, false)?;
    let mut best: Vec<Best> = (0..batch)
        .map(|i| Best {
            x: x0d[i * dim..(i + 1) * dim].to_vec(),
            success: clean_pred[i] != labels[i],
            loss: clean_loss[i],
            predicted: clean_pred[i],
        })
        .collect();

    for restart in 0..cfg.restarts {
        let active: Vec<usize> = (0..batch)
            .filter(|&i| !(cfg.stop_on_success && best[i].success))
            .collect();
        if active.is_empty() {
            break;
        }
        let mut x = vec![0.0; active.len() * dim];
        for (slot, &i) in active.iter().enumerate() {
            let dst = &mut x[slot * dim..(slot + 1) * dim];
            let from_given = restart == 0 && init.is_some();
            let from_center = restart == 0 && cfg.init == RestartInit::CenterThenUniform;
            for (k, v) in dst.iter_mut().enumerate() {
                let j = i * dim + k;
                *v = if from_given {
                    init.expect("checked").data()[j]
                } else if from_center {
                    x0d[j]
                } else {
                    rngs[i].uniform_in(region.lower[j], region.upper[j])
                };
            }
        }
        let sub_labels: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let project = |x: &mut [f64]| {
            for (slot, &i) in active.iter().enumerate() {
                let r = i * dim..(i + 1) * dim;
                for ((v, l), u) in x[slot * dim..(slot + 1) * dim]
                    .iter_mut()
                    .zip(&region.lower[r.clone()])
                    .zip(&region.upper[r])
                {
                    *v = v.max(*l).min(*u);
                }
            }
        };
        project(&mut x);
        let mut sub_shape = shape.clone();
        sub_shape[0] = active.len();

        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        for step in 0..=cfg.steps {
            let xt = Tensor::new(sub_shape.clone(), x.clone()).map_err(NetworkError::from)?;
            let want_grad = step < cfg.steps;
            let (losses, preds, grad) = loss_and_grad(net, &xt, &sub_labels, cfg.loss, want_grad)?;
            for (slot, &i) in active.iter().enumerate() {
                best[i].consider(&x[slot * dim..(slot + 1) * dim], preds[slot] != labels[i], losses[slot], preds[slot]);
            }
            let Some(g) = grad else { break };
            match cfg.step_rule {
                StepRule::SignedGradient { .. } => {
                    for (slot, &i) in active.iter().enumerate() {
                        for k in 0..dim {
                            let j = slot * dim + k;
                            let s = if g[j] > 0.0 {
                                1.0
                            } else if g[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            x[j] += region.step[i * dim + k] * s;
                        }
                    }
                }
                StepRule::Adam { learning_rate } => {
                    let t = (step + 1) as i32;
                    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                    for j in 0..x.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        let mh = m[j] / (1.0 - f64::powi(b1, t));
                        let vh = v[j] / (1.0 - f64::powi(b2, t));
                        x[j] += learning_rate * mh / (vh.sqrt() + eps);
                    }
                }
            }
            project(&mut x);
        }
    }

    Ok(best
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let linf_distance = b
                .x
                .iter()
                .zip(&x0d[i * dim..(i + 1) * dim])
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            let mut ex_shape = shape.clone();
            ex_shape[0] = 1;
            AttackResult {
                x_adv: Tensor::from_raw(ex_shape, b.x),
                success: b.success,
                loss: b.loss,
                linf_distance,
                predicted: b.predicted,
            }
        })
        .collect())
}

/// Attacks every row of a batch. Example `i` draws its restarts from stream
/// `stream_offset + i` of `cfg.seed`.
pub fn pgd_batch(
    net: &Network,
    x0: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    stream_offset: u64,
) -> Result<Vec<AttackResult>> {
    let streams: Vec<u64> = (0..labels.len() as u64).map(|i| stream_offset + i).collect();
    pgd_batch_streams(net, x0, labels, cfg, &streams)
}

/// As [`pgd_batch`], with an explicit RNG stream per example.
pub fn pgd_batch_streams(
    net: &Network,
    x0: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    streams: &[u64],
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    if streams.len() != labels.len() {
        return Err(NetworkError::InvalidLayer(format!("{} streams for {} examples", streams.len(), labels.len())).into());
    }
    let (shape, _) = net.batched_shape(x0.shape())?;
    let x0 = x0.reshape(&shape)?;
    let region = Region::around(&x0, cfg)?;
    let mut rngs: Vec<Rng> = streams.iter().map(|&s| Rng::with_stream(cfg.seed, s)).collect();
    attack_region(net, &x0, labels, &region, cfg, &mut rngs, None)
}

/// Attacks a single example (`input_shape` or `[1, ..]`).
pub fn pgd_attack(net: &Network, x0: &Tensor, y_true: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    check_label(net, y_true)?;
    Ok(pgd_batch(net, x0, &[y_true], cfg, 0)?.remove(0))
}

/// As [`pgd_attack`], with restart 0 starting from `init` (projected onto
/// the feasible box).
pub fn pgd_attack_from(net: &Network, x0: &Tensor, y_true: usize, cfg: &AttackConfig, init: &Tensor) -> Result<AttackResult> {
    cfg.validate()?;
    check_label(net, y_true)?;
    let (shape, _) = net.batched_shape(x0.shape())?;
    let x0 = x0.reshape(&shape)?;
    let init = init.reshape(&shape)?;
    let region = Region::around(&x0, cfg)?;
    let mut rngs = vec![Rng::with_stream(cfg.seed, 0)];
    Ok(attack_region(net, &x0, &[y_true], &region, cfg, &mut rngs, Some(&init))?.remove(0))
}

fn check_label(net: &Network, y: usize) -> Result<()> {
    if y >= net.num_classes() {
        return Err(BoundsError::InvalidClass {
            label: y,
            classes: net.num_classes(),
        });
    }
    Ok(())
}

/// Empirical robust error and per-example records.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalReport {
    pub rate: f64,
    pub records: Vec<AttackRecord>,
}

/// Examples per attack batch.
const ATTACK_BATCH: usize = 100;

/// Fraction of examples that are misclassified or successfully attacked.
/// Example `i` uses RNG stream `i`, so the result does not depend on batching.
pub fn empirical_error(net: &Network, ds: &Dataset, cfg: &AttackConfig) -> Result<EmpiricalReport> {
    if ds.is_empty() {
        return Err(NetworkError::InvalidLayer("empty dataset".into()).into());
    }
    let mut records = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(ATTACK_BATCH) {
        let idx: Vec<usize> = (start..(start + ATTACK_BATCH).min(ds.len())).collect();
        let (x, labels) = ds.batch(&idx);
        for (i, r) in idx.iter().zip(pgd_batch(net, &x, &labels, cfg, start as u64)?) {
            records.push(AttackRecord {
                index: *i,
                success: r.success,
                loss: r.loss,
                linf_distance: r.linf_distance,
            });
        }
    }
    let failures = records.iter().filter(|r| r.success).count();
    Ok(EmpiricalReport {
        rate: failures as f64 / records.len() as f64,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_parameters, parse_architecture, Layer};

    fn linear_binary() -> Network {
        let w = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5]).unwrap();
        Network::new(vec![Layer::linear(w, Tensor::zeros(&[2])).unwrap()], vec![3]).unwrap()
    }

    #[test]
    fn zero_epsilon_stays_put() {
        let net = init_parameters(&parse_architecture("fc 8; fc 3", &[2]).unwrap(), &mut Rng::new(4));
        let x = Tensor::vector(vec![0.3, 0.6]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            steps: 5,
            restarts: 2,
            ..AttackConfig::default()
        };
        let nominal = net.predict(&x).unwrap()[0];
        let r = pgd_attack(&net, &x, 0, &cfg).unwrap();
        assert_eq!(r.x_adv.data(), x.data());
        assert_eq!(r.success, nominal != 0);
        assert_eq!(r.linf_distance, 0.0);
    }

    #[test]
    fn linear_model_reaches_closed_form_worst_case() {
        let net = linear_binary();
        let x = Tensor::vector(vec![0.5, 0.5, 0.5]).unwrap();
        let eps = 0.1;
        let cfg = AttackConfig {
            epsilon: eps,
            steps: 50,
            restarts: 1,
            loss: AttackLoss::Margin,
            stop_on_success: false,
            ..AttackConfig::default()
        };
        let r = pgd_attack(&net, &x, 0, &cfg).unwrap();
        // margin = w·x with w = (1, -2, 0.5); maximized at x + ε·sign(w).
        let best = (0.5 + eps) - 2.0 * (0.5 - eps) + 0.5 * (0.5 + eps);
        assert!((r.loss - best).abs() < 1e-6, "{} vs {best}", r.loss);
    }

    #[test]
    fn iterates_respect_projection() {
        let net = init_parameters(&parse_architecture("fc 16; fc 16; fc 2", &[2]).unwrap(), &mut Rng::new(9));
        let mut rng = Rng::new(1);
        for trial in 0..50 {
            let x = Tensor::vector(vec![rng.uniform(), rng.uniform()]).unwrap();
            let cfg = AttackConfig {
                epsilon: 0.2,
                steps: 10,
                restarts: 2,
                seed: trial,
                ..AttackConfig::default()
            };
            let r = pgd_attack(&net, &x, 1, &cfg).unwrap();
            assert!(r.linf_distance <= 0.2 + 1e-15);
            assert!(r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
