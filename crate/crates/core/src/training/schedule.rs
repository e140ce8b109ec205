use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// κ and ε curricula plus the step-decayed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub rampup_steps: usize,
    pub kappa_final: f64,
    pub epsilon_train: f64,
    pub lr_initial: f64,
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay_factor: f64,
    /// When false, ε sits at `epsilon_train` from step 0 (ablation switch).
    pub ramp_epsilon: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::mnist(0.1)
    }
}

impl ScheduleConfig {
    /// The full 60K-step MNIST recipe: batch 100, warm-up 2K, ramp-up 10K,
    /// learning rate 1e-3 decayed 10× at 15K and 25K.
    pub fn mnist(epsilon_train: f64) -> Self {
        Self {
            total_steps: 60_000,
            warmup_steps: 2_000,
            rampup_steps: 10_000,
            kappa_final: 0.5,
            epsilon_train,
            lr_initial: 1e-3,
            lr_decay_steps: vec![15_000, 25_000],
            lr_decay_factor: 0.1,
            ramp_epsilon: true,
        }
    }

    /// [`Self::mnist`] with every step count divided by `divisor`.
    pub fn mnist_scaled(epsilon_train: f64, divisor: usize) -> Self {
        let full = Self::mnist(epsilon_train);
        let d = divisor.max(1);
        Self {
            total_steps: full.total_steps / d,
            warmup_steps: full.warmup_steps / d,
            rampup_steps: full.rampup_steps / d,
            lr_decay_steps: full.lr_decay_steps.iter().map(|s| s / d).collect(),
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.warmup_steps + self.rampup_steps > self.total_steps {
            return bad(format!(
                "warmup {} + rampup {} exceeds total steps {}",
                self.warmup_steps, self.rampup_steps, self.total_steps
            ));
        }
        if self.lr_decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("learning-rate decay steps must be strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&self.kappa_final) {
            return bad(format!("kappa_final {} outside [0, 1]", self.kappa_final));
        }
        if !(self.epsilon_train >= 0.0 && self.epsilon_train.is_finite()) {
            return bad(format!("epsilon_train {} must be finite and non-negative", self.epsilon_train));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("lr_initial {} must be positive", self.lr_initial));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("lr_decay_factor {} must be positive", self.lr_decay_factor));
        }
        Ok(())
    }
}

/// Curriculum values in effect at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePoint {
    pub step: usize,
    pub kappa: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

/// κ = 1 and ε = 0 up to the end of warm-up, then linear to
/// `(kappa_final, epsilon_train)` over the ramp-up, constant afterwards.
/// The end points are returned exactly, not interpolated.
pub fn schedule_at(cfg: &ScheduleConfig, step: usize) -> Result<SchedulePoint> {
    if step > cfg.total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    let ramp_end = cfg.warmup_steps + cfg.rampup_steps;
    let (kappa, ramp_eps) = if step <= cfg.warmup_steps && step < ramp_end {
        (1.0, 0.0)
    } else if step >= ramp_end {
        (cfg.kappa_final, cfg.epsilon_train)
    } else {
        let frac = (step - cfg.warmup_steps) as f64 / cfg.rampup_steps as f64;
        (1.0 + (cfg.kappa_final - 1.0) * frac, cfg.epsilon_train * frac)
    };
    let epsilon = if cfg.ramp_epsilon { ramp_eps } else { cfg.epsilon_train };
    let decays = cfg.lr_decay_steps.iter().filter(|&&d| d <= step).count();
    Ok(SchedulePoint {
        step,
        kappa,
        epsilon,
        learning_rate: cfg.lr_initial * cfg.lr_decay_factor.powi(decays as i32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let cfg = ScheduleConfig::mnist(0.2);
        let p0 = schedule_at(&cfg, 0).unwrap();
        assert_eq!((p0.kappa, p0.epsilon), (1.0, 0.0));
        let end = schedule_at(&cfg, 12_000).unwrap();
        assert_eq!((end.kappa, end.epsilon), (0.5, 0.2));
    }

    #[test]
    fn midpoint_and_decay() {
        let cfg = ScheduleConfig::mnist(0.2);
        let mid = schedule_at(&cfg, 7_000).unwrap();
        assert_eq!(mid.kappa, 0.75);
        assert_eq!(mid.epsilon, 0.1);
        assert_eq!(schedule_at(&cfg, 14_999).unwrap().learning_rate, 1e-3);
        assert!((schedule_at(&cfg, 15_000).unwrap().learning_rate - 1e-4).abs() < 1e-18);
        assert!((schedule_at(&cfg, 60_000).unwrap().learning_rate - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn out_of_range_and_invalid() {
        let cfg = ScheduleConfig::mnist(0.1);
        assert!(matches!(schedule_at(&cfg, 60_001), Err(TrainError::StepOutOfRange { .. })));
        let bad = ScheduleConfig {
            lr_decay_steps: vec![5, 5],
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = ScheduleConfig { total_steps: 100, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ablation_uses_full_epsilon_from_start() {
        let cfg = ScheduleConfig {
            ramp_epsilon: false,
            ..ScheduleConfig::mnist(0.3)
        };
        let p = schedule_at(&cfg, 0).unwrap();
        assert_eq!((p.kappa, p.epsilon), (1.0, 0.3));
    }
}
