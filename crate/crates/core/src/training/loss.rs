use serde::{Deserialize, Serialize};

use super::Result;
use crate::network::{GradientTape, Var};
use crate::tensor::Tensor;

/// Loss applied to the worst-case logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    #[serde(alias = "xent")]
    CrossEntropy,
    Softplus,
    Hinge,
}

/// Per-example `κ·ce(z) + (1-κ)·ℓ(ẑ)`, written as `ce + (1-κ)(ℓ - ce)` so
/// that it is bitwise the nominal cross-entropy whenever `ℓ(ẑ) = ce(z)`.
/// Returns a `[B]` variable.
pub fn loss_graph(
    tape: &mut GradientTape,
    logits: Var,
    worst: Option<Var>,
    labels: &[usize],
    kappa: f64,
    variant: LossVariant,
    hinge_offset: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels)?;
    let Some(worst) = worst else {
        return Ok(ce);
    };
    let spec = match variant {
        LossVariant::CrossEntropy => tape.cross_entropy(worst, labels)?,
        LossVariant::Softplus => tape.spec_softplus(worst, labels)?,
        LossVariant::Hinge => tape.spec_hinge(worst, labels, hinge_offset)?,
    };
    let gap = tape.sub(spec, ce)?;
    let gap = tape.scale(gap, 1.0 - kappa)?;
    Ok(tape.add(ce, gap)?)
}

/// The robust training loss for one example, from its nominal logits `[N]`
/// and worst-case logits `[N]`. The hinge variant uses a margin offset of 1.
pub fn ibp_loss(logits: &Tensor, worst_logits: &Tensor, y_true: usize, kappa: f64, variant: LossVariant) -> Result<f64> {
    ibp_loss_batch(logits, worst_logits, &[y_true], kappa, variant)
}

/// Batch-mean form of [`ibp_loss`] for `[B, N]` logits.
pub fn ibp_loss_batch(
    logits: &Tensor,
    worst_logits: &Tensor,
    labels: &[usize],
    kappa: f64,
    variant: LossVariant,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(super::TrainError::Config(format!("kappa {kappa} outside [0, 1]")));
    }
    let rows = labels.len();
    let classes = logits.len() / rows.max(1);
    let mut tape = GradientTape::new();
    let z = tape.leaf(logits.reshape(&[rows, classes])?, false);
    let w = tape.leaf(worst_logits.reshape(&[rows, classes])?, false);
    let per = loss_graph(&mut tape, z, Some(w), labels, kappa, variant, 1.0)?;
    let m = tape.mean(per)?;
    Ok(tape.value(m)?.data()[0])
}
