//! Robust training: the κ/ε curriculum, the mixed nominal/worst-case loss,
//! Adam, and the training loop for the nominal, IBP and PGD methods.

mod adam;
mod loss;
mod schedule;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{ibp_loss, ibp_loss_batch, loss_graph, LossVariant};
pub use schedule::{schedule_at, ScheduleConfig, SchedulePoint};

use crate::attack::{pgd_batch, AttackConfig, StepRule};
use crate::bounds::{input_box, max_margin_bounds, worst_case_graph, BoundsError, BoxVars};
use crate::data::{DataError, Dataset};
use crate::network::io::{Checkpoint, IoError};
use crate::network::{GradientTape, Network, NetworkError};
use crate::tensor::{self, Rng, Tensor};
use crate::verify::DEFAULT_TOLERANCE;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("step {step} outside the schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("gradient or parameter update is not finite")]
    NonFiniteGradient,
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Network(NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<NetworkError> for TrainError {
    fn from(e: NetworkError) -> Self {
        TrainError::Network(e)
    }
}

impl From<tensor::TensorError> for TrainError {
    fn from(e: tensor::TensorError) -> Self {
        TrainError::Network(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain cross-entropy; the κ and ε schedule is ignored.
    Nominal,
    /// The mixed nominal/worst-case loss under the κ and ε schedule.
    #[default]
    Ibp,
    /// Cross-entropy on PGD examples found at the scheduled ε.
    #[serde(alias = "pgd_adversarial")]
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(alias = "loss_variant")]
    pub loss: LossVariant,
    pub use_elision: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// The training ε is the scheduled ε times this factor.
    pub epsilon_multiplier: f64,
    /// ε for the logged verified error; defaults to `schedule.epsilon_train`.
    pub eval_epsilon: Option<f64>,
    /// Input boxes and PGD iterates are clipped to this domain.
    pub input_clip: Option<[f64; 2]>,
    pub hinge_offset: f64,
    pub log_every: usize,
    /// Size of the held-out slice used for logged error rates.
    pub eval_examples: usize,
    pub divergence_threshold: f64,
    pub pgd_steps: usize,
    pub pgd_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ibp,
            loss: LossVariant::CrossEntropy,
            use_elision: true,
            batch_size: 100,
            seed: 0,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            epsilon_multiplier: 1.0,
            eval_epsilon: None,
            input_clip: Some([0.0, 1.0]),
            hinge_offset: 1.0,
            log_every: 100,
            eval_examples: 1000,
            divergence_threshold: 1e6,
            pgd_steps: 7,
            pgd_learning_rate: 0.1,
        }
    }
}

impl TrainConfig {
    /// Full-batch IBP training on the 13-point toy set at ε = 0.08. The
    /// curriculum starts immediately and the learning rate is low; with a
    /// nominal warm-up or a larger rate the logits grow and the output box
    /// ends up wider than at initialization.
    pub fn toy() -> Self {
        Self {
            batch_size: 13,
            schedule: ScheduleConfig {
                total_steps: 5000,
                warmup_steps: 0,
                rampup_steps: 2000,
                kappa_final: 0.5,
                epsilon_train: 0.08,
                lr_initial: 1.2e-4,
                lr_decay_steps: vec![4000],
                lr_decay_factor: 0.1,
                ramp_epsilon: true,
            },
            log_every: 250,
            eval_examples: 13,
            ..Self::default()
        }
    }

    /// The MNIST recipe at a tenth of its length (6000 steps of 100).
    pub fn mnist_reduced(epsilon_train: f64) -> Self {
        Self {
            schedule: ScheduleConfig::mnist_scaled(epsilon_train, 10),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if self.method == Method::Ibp && !(self.schedule.epsilon_train > 0.0) {
            return bad("ibp training needs epsilon_train > 0");
        }
        if !(self.epsilon_multiplier > 0.0) || !self.epsilon_multiplier.is_finite() {
            return bad("epsilon_multiplier must be positive");
        }
        if let Some(e) = self.eval_epsilon {
            if !(e >= 0.0) || !e.is_finite() {
                return bad("eval_epsilon must be non-negative");
            }
        }
        if let Some([lo, hi]) = self.input_clip {
            if !(lo < hi) {
                return bad("input_clip must satisfy lo < hi");
            }
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if self.method == Method::Pgd && (self.pgd_steps == 0 || !(self.pgd_learning_rate > 0.0)) {
            return bad("pgd training needs pgd_steps > 0 and a positive pgd_learning_rate");
        }
        Ok(())
    }

    pub fn eval_epsilon(&self) -> f64 {
        self.eval_epsilon.unwrap_or(self.schedule.epsilon_train)
    }

    fn domain(&self) -> Option<(f64, f64)> {
        self.input_clip.map(|[lo, hi]| (lo, hi))
    }
}

/// One line of the metrics log. Values describe the parameters before the
/// update of that step; the record at `total_steps` describes the final
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub kappa: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub loss: f64,
    pub nominal_err: f64,
    pub ibp_verified_err: f64,
}

/// Everything that changes between steps besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// The next step to run.
    pub step: usize,
    pub adam: AdamState,
}

/// Nominal and IBP-verified error of `net` on `ds` at `epsilon`.
pub fn error_rates(
    net: &Network,
    ds: &Dataset,
    epsilon: f64,
    domain: Option<(f64, f64)>,
    use_elision: bool,
) -> Result<(f64, f64)> {
    const CHUNK: usize = 500;
    let mut wrong = 0;
    let mut unverified = 0;
    for start in (0..ds.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(ds.len())).collect();
        let (x, labels) = ds.batch(&idx);
        let pred = net.predict(&x)?;
        let margins = max_margin_bounds(net, &input_box(&x, epsilon, domain)?, &labels, use_elision)?;
        for ((p, y), m) in pred.iter().zip(&labels).zip(margins) {
            let ok = p == y;
            wrong += usize::from(!ok);
            unverified += usize::from(!ok || m > -DEFAULT_TOLERANCE);
        }
    }
    let n = ds.len() as f64;
    Ok((wrong as f64 / n, unverified as f64 / n))
}

/// Stream offset for the per-epoch shuffles; example streams stay below it.
const EPOCH_STREAM: u64 = 1 << 32;
/// Stream offset for PGD restarts during adversarial training.
const PGD_STREAM: u64 = 1 << 40;

/// Owns the parameters and optimizer state of one training run.
///
/// Batches are a pure function of `(seed, step)`: example `k` of step `s`
/// sits at position `q = s·B + k` of an endless sequence of per-epoch
/// permutations. Resuming therefore needs only the step and Adam moments.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    net: Network,
    train: &'a Dataset,
    eval: Dataset,
    state: TrainState,
    epoch: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    /// Starts a run at step 0. The logged error rates use the first
    /// `eval_examples` of `eval`.
    pub fn new(net: Network, train: &'a Dataset, eval: &Dataset, cfg: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(&net.parameters());
        Self::resume(
            net,
            train,
            eval,
            cfg,
            TrainState {
                step: 0,
                adam,
            },
        )
    }

    pub fn resume(net: Network, train: &'a Dataset, eval: &Dataset, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || eval.is_empty() {
            return Err(DataError::Empty.into());
        }
        for ds in [train, eval] {
            if ds.input_shape() != net.input_shape() {
                return Err(NetworkError::InputShape {
                    expected: net.input_shape().to_vec(),
                    got: ds.input_shape().to_vec(),
                }
                .into());
            }
            if ds.class_count() != net.num_classes() {
                return Err(TrainError::Config(format!(
                    "dataset has {} classes, network {}",
                    ds.class_count(),
                    net.num_classes()
                )));
            }
        }
        if cfg.method != Method::Nominal && (train.normalization().applied || eval.normalization().applied) {
            return Err(TrainError::Config(
                "robust training works in pixel units and needs unnormalized data".into(),
            ));
        }
        // `total_steps + 1` marks a finished run whose final record was logged.
        if state.step > cfg.schedule.total_steps + 1 {
            return Err(TrainError::StepOutOfRange {
                step: state.step,
                total: cfg.schedule.total_steps,
            });
        }
        let lengths: Vec<usize> = net.parameters().iter().map(|p| p.len()).collect();
        if state.adam.m.iter().map(Vec::len).ne(lengths.iter().copied()) {
            return Err(TrainError::Config("optimizer state does not match the network".into()));
        }
        let eval = eval.take(cfg.eval_examples.clamp(1, eval.len()));
        Ok(Self {
            cfg,
            net,
            train,
            eval,
            state,
            epoch: None,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.step > self.cfg.schedule.total_steps
    }

    /// Dataset indices of the batch for `step`.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.train.len();
        let b = self.cfg.batch_size;
        (0..b)
            .map(|k| {
                let q = step * b + k;
                let e = q / n;
                if self.epoch.as_ref().map(|(ep, _)| *ep) != Some(e) {
                    let perm = Rng::with_stream(self.cfg.seed, EPOCH_STREAM + e as u64).permutation(n);
                    self.epoch = Some((e, perm));
                }
                self.epoch.as_ref().expect("epoch permutation cached").1[q % n]
            })
            .collect()
    }

    /// Runs one step: computes the loss, logs a record if due, and applies
    /// the Adam update. Returns the record when one was logged. At
    /// `total_steps` only the final record is produced.
    pub fn step(&mut self) -> Result<Option<MetricRecord>> {
        let s = self.state.step;
        let total = self.cfg.schedule.total_steps;
        if s > total {
            return Err(TrainError::StepOutOfRange { step: s, total });
        }
        let point = schedule_at(&self.cfg.schedule, s)?;
        let log_due = s.is_multiple_of(self.cfg.log_every) || s == total;
        if s == total {
            let idx = self.batch_indices(s);
            let (loss, _) = self.loss_and_gradients(&idx, &point, false)?;
            self.state.step += 1;
            return Ok(Some(self.record(&point, loss)?));
        }
        let idx = self.batch_indices(s);
        let (loss, grads) = self.loss_and_gradients(&idx, &point, true)?;
        let record = if log_due {
            Some(self.record(&point, loss)?)
        } else {
            None
        };
        let mut params = self.net.parameters_mut();
        adam_step(&mut params, &grads, &mut self.state.adam, point.learning_rate, &self.cfg.adam)?;
        self.state.step += 1;
        Ok(record)
    }

    /// Runs to the end of the schedule, passing each logged record to `on_record`.
    pub fn run(&mut self, mut on_record: impl FnMut(&MetricRecord)) -> Result<Vec<MetricRecord>> {
        let mut log = Vec::new();
        while self.state.step <= self.cfg.schedule.total_steps {
            if let Some(r) = self.step()? {
                on_record(&r);
                log.push(r);
            }
        }
        Ok(log)
    }

    /// A checkpoint that [`Trainer::resume`] can continue from exactly.
    pub fn checkpoint(&self, architecture: Option<&str>) -> Checkpoint {
        let point = schedule_at(&self.cfg.schedule, self.state.step.min(self.cfg.schedule.total_steps)).ok();
        Checkpoint {
            network: self.net.clone(),
            architecture: architecture.map(str::to_owned),
            normalization: Some(self.train.normalization().clone()),
            input_clip: self.cfg.input_clip,
            training: Some(serde_json::json!({
                "config": self.cfg,
                "step": self.state.step,
                "schedule_point": point,
                "dataset": self.train.provenance(),
            })),
            optimizer_state: Some(self.state.adam.to_flat()),
        }
    }

    /// Restores the step and optimizer state saved by [`Trainer::checkpoint`].
    pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
        let step = ckpt
            .training
            .as_ref()
            .and_then(|t| t.get("step"))
            .and_then(|s| s.as_u64())
            .ok_or_else(|| TrainError::Config("checkpoint has no training step".into()))?;
        let flat = ckpt
            .optimizer_state
            .as_ref()
            .ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?;
        let lengths: Vec<usize> = ckpt.network.parameters().iter().map(|p| p.len()).collect();
        Ok(TrainState {
            step: step as usize,
            adam: AdamState::from_flat(flat, &lengths)?,
        })
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    fn record(&self, point: &SchedulePoint, loss: f64) -> Result<MetricRecord> {
        let (nominal_err, ibp_verified_err) = error_rates(
            &self.net,
            &self.eval,
            self.cfg.eval_epsilon(),
            self.cfg.domain(),
            self.cfg.use_elision,
        )?;
        Ok(MetricRecord {
            step: point.step,
            kappa: point.kappa,
            epsilon: point.epsilon,
            lr: point.learning_rate,
            loss,
            nominal_err,
            ibp_verified_err,
        })
    }

    fn loss_and_gradients(&self, idx: &[usize], point: &SchedulePoint, need_grad: bool) -> Result<(f64, Vec<Tensor>)> {
        let (x, labels) = self.train.batch(idx);
        let epsilon = point.epsilon * self.cfg.epsilon_multiplier;
        let x = match self.cfg.method {
            Method::Pgd if epsilon > 0.0 => self.adversarial_batch(&x, &labels, epsilon, point.step)?,
            _ => x,
        };
        let mut tape = GradientTape::new();
        let params = self.net.bind(&mut tape, need_grad);
        let xv = tape.leaf(x.clone(), false);
        let logits = self.net.forward_graph(&mut tape, &params, xv)?;
        let worst = if self.cfg.method == Method::Ibp && point.kappa < 1.0 {
            let b = input_box(&x, epsilon, self.cfg.domain())?;
            let (lower, upper) = b.into_parts();
            let vars = BoxVars {
                lower: tape.leaf(lower, false),
                upper: tape.leaf(upper, false),
            };
            Some(worst_case_graph(
                &self.net,
                &mut tape,
                &params,
                vars,
                &labels,
                self.cfg.use_elision,
            )?)
        } else {
            None
        };
        let per = loss_graph(
            &mut tape,
            logits,
            worst,
            &labels,
            point.kappa,
            self.cfg.loss,
            self.cfg.hinge_offset,
        )
        .map_err(|e| self.diverged(e, point.step))?;
        let loss = tape.mean(per)?;
        let value = tape.value(loss)?.data()[0];
        if !value.is_finite() || value > self.cfg.divergence_threshold {
            return Err(TrainError::Divergence {
                step: point.step,
                loss: value,
            });
        }
        if !need_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((value, params.gradients(&tape, &grads)?))
    }

    fn diverged(&self, e: TrainError, step: usize) -> TrainError {
        match e {
            TrainError::Network(NetworkError::NonFinite { .. }) => TrainError::Divergence { step, loss: f64::NAN },
            other => other,
        }
    }

    fn adversarial_batch(&self, x: &Tensor, labels: &[usize], epsilon: f64, step: usize) -> Result<Tensor> {
        let cfg = AttackConfig {
            epsilon,
            steps: self.cfg.pgd_steps,
            step_rule: StepRule::Adam {
                learning_rate: self.cfg.pgd_learning_rate,
            },
            domain_clip: self.cfg.input_clip,
            seed: self.cfg.seed,
            ..AttackConfig::training(epsilon)
        };
        let found = pgd_batch(&self.net, x, labels, &cfg, PGD_STREAM + (step * labels.len()) as u64)?;
        let mut data = Vec::with_capacity(x.len());
        for r in &found {
            data.extend_from_slice(r.x_adv.data());
        }
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub metrics: Vec<MetricRecord>,
}

/// Trains `net` on `ds` from step 0, logging error rates on `ds` itself.
pub fn train(net: Network, ds: &Dataset, cfg: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(net, ds, ds, cfg)?;
    let metrics = trainer.run(|_| {})?;
    Ok(TrainOutcome {
        network: trainer.into_network(),
        metrics,
    })
}
