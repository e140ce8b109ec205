use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ibp_core::attack::AttackConfig;
use ibp_core::data::{generate_toy, load_mnist, MnistSplit, ToySpec};
use ibp_core::training::{LossVariant, Method, TrainConfig};
use ibp_core::verify::BabConfig;
use ibp_core::Dataset;

pub const TOY_ARCH: &str = "fc 100; fc 100; fc 100; fc 2";
pub const MNIST_ARCH: &str = "conv 16 4x4+2; conv 32 4x4+1; fc 100; fc 10";

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Toy { seed: u64 },
    Idx { path: PathBuf },
}

impl DatasetSpec {
    /// `toy`, `toy:SEED` or `idx:PATH`.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "toy" {
            return Ok(DatasetSpec::Toy {
                seed: ToySpec::default().seed,
            });
        }
        if let Some(seed) = text.strip_prefix("toy:") {
            let seed = seed.parse().with_context(|| format!("bad toy seed in `{text}`"))?;
            return Ok(DatasetSpec::Toy { seed });
        }
        if let Some(path) = text.strip_prefix("idx:") {
            return Ok(DatasetSpec::Idx { path: path.into() });
        }
        bail!("dataset must be `toy`, `toy:SEED` or `idx:PATH`, got `{text}`")
    }

    pub fn is_toy(&self) -> bool {
        matches!(self, DatasetSpec::Toy { .. })
    }

    pub fn default_arch(&self) -> &'static str {
        if self.is_toy() {
            TOY_ARCH
        } else {
            MNIST_ARCH
        }
    }

    pub fn default_epsilon(&self) -> f64 {
        if self.is_toy() {
            0.08
        } else {
            0.1
        }
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        Ok(match self {
            DatasetSpec::Toy { seed } => generate_toy(&ToySpec {
                seed: *seed,
                ..ToySpec::default()
            })?,
            DatasetSpec::Idx { path } => load_mnist(
                path,
                match split {
                    Split::Train => MnistSplit::Train,
                    Split::Test => MnistSplit::Test,
                },
            )?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-batch toy recipe.
    Toy,
    /// The 60K-step MNIST recipe.
    Mnist,
    /// The MNIST recipe at a tenth of its length.
    MnistReduced,
}

impl Preset {
    pub fn train_config(self, epsilon: f64) -> TrainConfig {
        match self {
            Preset::Toy => {
                let mut cfg = TrainConfig::toy();
                cfg.schedule.epsilon_train = epsilon;
                cfg
            }
            Preset::Mnist => TrainConfig {
                schedule: ibp_core::training::ScheduleConfig::mnist(epsilon),
                ..TrainConfig::default()
            },
            Preset::MnistReduced => TrainConfig::mnist_reduced(epsilon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolytopeOptions {
    pub samples_per_axis: usize,
    /// Layer whose output is sampled; defaults to the logits.
    pub layer: Option<usize>,
    /// Dataset index of the sampled input; defaults to the first example of
    /// class 1 (the first example when there is none).
    pub index: Option<usize>,
    /// Optional `[2][D]` projection for layers wider than 2.
    pub projection: Option<Vec<Vec<f64>>>,
}

impl Default for PolytopeOptions {
    fn default() -> Self {
        Self {
            samples_per_axis: 101,
            layer: None,
            index: None,
            projection: None,
        }
    }
}

/// Configuration file contents. Every field is optional; the `train`,
/// `attack` and `bab` sections are patches applied on top of the defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<String>,
    pub arch: Option<String>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub split: Option<Split>,
    pub examples: Option<usize>,
    pub preset: Option<Preset>,
    pub train: Option<Value>,
    pub attack: Option<Value>,
    pub bab: Option<Value>,
    pub polytope: Option<PolytopeOptions>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Command-line overrides shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub dataset: Option<String>,
    pub arch: Option<String>,
    pub method: Option<Method>,
    pub loss: Option<LossVariant>,
    pub no_elision: bool,
    pub no_eps_schedule: bool,
}

/// The fully resolved configuration of one run, echoed to the output
/// directory as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub command: String,
    pub dataset: DatasetSpec,
    pub arch: String,
    pub seed: u64,
    pub epsilon: f64,
    pub split: Split,
    pub examples: Option<usize>,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub bab: BabConfig,
    pub polytope: PolytopeOptions,
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn patched<T: Serialize + for<'de> Deserialize<'de>>(base: T, patch: Option<&Value>, section: &str) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| anyhow!("invalid `{section}` section: {e}"))
}

pub fn resolve(command: &str, file: FileConfig, o: &Overrides, model_epsilon: Option<f64>) -> Result<Effective> {
    let dataset = DatasetSpec::parse(o.dataset.as_deref().or(file.dataset.as_deref()).unwrap_or("toy"))?;
    let seed = o.seed.or(file.seed).unwrap_or(0);
    let epsilon = o
        .epsilon
        .or(file.epsilon)
        .or(model_epsilon)
        .unwrap_or_else(|| dataset.default_epsilon());
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        bail!("epsilon must be a non-negative number, got {epsilon}");
    }
    let arch = o
        .arch
        .clone()
        .or(file.arch)
        .unwrap_or_else(|| dataset.default_arch().to_string());
    let preset = file.preset.unwrap_or(if dataset.is_toy() {
        Preset::Toy
    } else {
        Preset::MnistReduced
    });

    let mut train = patched(preset.train_config(epsilon), file.train.as_ref(), "train")?;
    train.seed = seed;
    if o.epsilon.is_some() || file.epsilon.is_some() {
        train.schedule.epsilon_train = epsilon;
    }
    if let Some(m) = o.method {
        train.method = m;
    }
    if let Some(l) = o.loss {
        train.loss = l;
    }
    if o.no_elision {
        train.use_elision = false;
    }
    if o.no_eps_schedule {
        train.schedule.ramp_epsilon = false;
    }
    train.validate()?;

    let mut attack = patched(AttackConfig::default(), file.attack.as_ref(), "attack")?;
    attack.epsilon = epsilon;
    attack.seed = seed;
    attack.validate()?;
    let mut bab = patched(BabConfig::default(), file.bab.as_ref(), "bab")?;
    if o.no_elision {
        bab.use_elision = false;
    }
    bab.validate()?;

    let split = file.split.unwrap_or(match (command, dataset.is_toy()) {
        (_, true) | ("train", _) => Split::Train,
        _ => Split::Test,
    });
    Ok(Effective {
        command: command.into(),
        dataset,
        arch,
        seed,
        epsilon,
        split,
        examples: file.examples,
        train,
        attack,
        bab,
        polytope: file.polytope.unwrap_or_default(),
    })
}
