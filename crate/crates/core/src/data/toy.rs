//! Small two-dimensional binary dataset with a minimum ℓ∞ separation.

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::tensor::{Rng, Tensor};

/// Seed of the default toy set. Among seeds 0..200 it has the widest gap
/// between opposite-label points (ℓ∞ 0.28); most seeds put some
/// opposite-label pair within `2 · 0.08`, where both points cannot be
/// certified at radius 0.08 at once (see [`conflicting_pairs`]).
pub const DEFAULT_TOY_SEED: u64 = 73;

/// RNG stream used for toy generation.
const TOY_STREAM: u64 = 0x70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub point_count: usize,
    pub positive_count: usize,
    pub min_pairwise_linf: f64,
    pub domain: [f64; 2],
    pub seed: u64,
    /// Total candidate draws before giving up.
    pub max_draws: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            point_count: 13,
            positive_count: 5,
            min_pairwise_linf: 0.08,
            domain: [0.0, 1.0],
            seed: DEFAULT_TOY_SEED,
            max_draws: 100_000,
        }
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Rejection-samples the points one at a time, then marks a random subset
/// of `positive_count` of them as class 1.
pub fn generate_toy(spec: &ToySpec) -> Result<Dataset> {
    let [lo, hi] = spec.domain;
    if !(lo < hi) || lo < 0.0 || hi > 1.0 {
        return Err(DataError::ToySpec(format!("domain [{lo}, {hi}] must lie inside [0, 1]")));
    }
    if spec.positive_count > spec.point_count {
        return Err(DataError::ToySpec("more positives than points".into()));
    }
    if !(spec.min_pairwise_linf >= 0.0) {
        return Err(DataError::ToySpec("separation must be non-negative".into()));
    }
    let mut rng = Rng::with_stream(spec.seed, TOY_STREAM);
    let mut points: Vec<[f64; 2]> = Vec::with_capacity(spec.point_count);
    let mut draws = 0;
    while points.len() < spec.point_count {
        if draws == spec.max_draws {
            return Err(DataError::RetryBudget(draws));
        }
        draws += 1;
        let p = [rng.uniform_in(lo, hi), rng.uniform_in(lo, hi)];
        if points.iter().all(|q| linf(&p, q) >= spec.min_pairwise_linf) {
            points.push(p);
        }
    }
    let mut labels = vec![0; spec.point_count];
    for &i in &rng.permutation(spec.point_count)[..spec.positive_count] {
        labels[i] = 1;
    }
    let inputs = Tensor::new(vec![spec.point_count, 2], points.concat())?;
    Dataset::new(inputs, labels, 2, format!("toy:seed={}", spec.seed))
}

/// Pairs of differently labeled examples whose ε-boxes intersect. At most
/// one point of each such pair can be certified at radius `epsilon`.
pub fn conflicting_pairs(ds: &Dataset, epsilon: f64) -> Vec<(usize, usize)> {
    let d = ds.inputs().len() / ds.len().max(1);
    let x = ds.inputs().data();
    let mut out = Vec::new();
    for i in 0..ds.len() {
        for j in i + 1..ds.len() {
            if ds.labels()[i] != ds.labels()[j] && linf(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]) <= 2.0 * epsilon {
                out.push((i, j));
            }
        }
    }
    out
}
