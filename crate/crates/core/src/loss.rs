//! Training objectives: cross-entropy, KL divergence, the TRADES composite,
//! and label smoothing.
//!
//! Everything is built from tape primitives through log-softmax, so the
//! losses stay differentiable end to end and numerically stable on the
//! near-degenerate softmax outputs the margin experiments produce.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MlpClassifier, MlpVars};
use crate::tensor::{Tape, Var};

/// TRADES trades off natural cross-entropy against beta times the KL
/// divergence between natural and adversarial predictions; beta defaults to 6.
pub const TRADES_BETA_DEFAULT: f64 = 6.0;

/// A normalized target distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedLabel {
    values: Vec<f64>,
}

impl SmoothedLabel {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn class_count(&self) -> usize {
        self.values.len()
    }
}

/// Smoothed one-hot vector: `1 - rho` at `y` and `rho / (C-1)` elsewhere.
pub fn smooth_label(y: usize, class_count: usize, rho: f64) -> Result<SmoothedLabel> {
    if class_count < 2 {
        return Err(Error::invalid(format!(
            "label smoothing needs at least 2 classes, got {class_count}"
        )));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho {rho} outside [0,1)")));
    }
    if y >= class_count {
        return Err(Error::invalid(format!(
            "label {y} out of range for {class_count} classes"
        )));
    }
    let mut values = vec![rho / (class_count - 1) as f64; class_count];
    values[y] = 1.0 - rho;
    Ok(SmoothedLabel { values })
}

/// One-hot distribution (rho = 0).
pub fn one_hot(y: usize, class_count: usize) -> Result<SmoothedLabel> {
    smooth_label(y, class_count, 0.0)
}

/// Flatten per-sample targets into a `[batch, classes]` buffer.
pub fn stack_targets(targets: &[SmoothedLabel]) -> Result<Vec<f64>> {
    let Some(first) = targets.first() else {
        return Err(Error::invalid("empty target batch".to_string()));
    };
    let width = first.class_count();
    if targets.iter().any(|t| t.class_count() != width) {
        return Err(Error::invalid("ragged target batch".to_string()));
    }
    Ok(targets.iter().flat_map(|t| t.values.iter().copied()).collect())
}

fn batch_classes(tape: &Tape, logits: Var) -> Result<(usize, usize)> {
    let shape = tape.shape(logits);
    if shape.len() != 2 {
        return Err(Error::invalid(format!(
            "expected [batch, classes] logits, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Mean over the batch of `-log softmax(logits)[y]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (batch, classes) = batch_classes(tape, logits)?;
    if labels.len() != batch {
        return Err(Error::invalid(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    let mut onehot = vec![0.0; batch * classes];
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        onehot[b * classes + y] = 1.0;
    }
    let target = tape.constant(&[batch, classes], onehot)?;
    let logp = tape.log_softmax(logits);
    let picked = tape.mul(target, logp)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / batch as f64))
}

/// Mean over the batch of `-sum_j target_j log softmax(logits)_j` for
/// arbitrary normalized target rows.
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    let (batch, classes) = batch_classes(tape, logits)?;
    if targets.len() != batch * classes {
        return Err(Error::invalid(format!(
            "target buffer of {} does not hold {batch} rows of {classes}",
            targets.len()
        )));
    }
    for (b, row) in targets.chunks_exact(classes).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "target row {b} is not a distribution (sum {sum})"
            )));
        }
    }
    let target = tape.constant(&[batch, classes], targets.to_vec())?;
    let logp = tape.log_softmax(logits);
    let picked = tape.mul(target, logp)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / batch as f64))
}

/// Mean over the batch of `KL(softmax(p_logits) || softmax(q_logits))`,
/// differentiable through both operands.
pub fn kl_divergence(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    let (batch, _) = batch_classes(tape, p_logits)?;
    if tape.shape(p_logits) != tape.shape(q_logits) {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: tape.shape(p_logits).to_vec(),
            rhs: tape.shape(q_logits).to_vec(),
        });
    }
    let p = tape.softmax(p_logits);
    let log_p = tape.log_softmax(p_logits);
    let log_q = tape.log_softmax(q_logits);
    let diff = tape.sub(log_p, log_q)?;
    let weighted = tape.mul(p, diff)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / batch as f64))
}

/// TRADES composite: `CE(f(x_nat), y) + beta * KL(f(x_nat) || f(x_adv))`.
///
/// The KL term never sees labels; noise injection reaches TRADES only
/// through the cross-entropy labels.
pub fn trades_loss(
    tape: &mut Tape,
    model: &MlpClassifier,
    vars: &MlpVars,
    x_nat: Var,
    x_adv: Var,
    labels: &[usize],
    beta: f64,
) -> Result<Var> {
    if beta < 0.0 {
        return Err(Error::invalid(format!("trades beta {beta} < 0")));
    }
    if tape.shape(x_nat) != tape.shape(x_adv) {
        return Err(Error::ShapeMismatch {
            op: "trades_loss",
            lhs: tape.shape(x_nat).to_vec(),
            rhs: tape.shape(x_adv).to_vec(),
        });
    }
    let logits_nat = model.forward(tape, vars, x_nat)?;
    let natural = cross_entropy(tape, logits_nat, labels)?;
    if beta == 0.0 {
        return Ok(natural);
    }
    let logits_adv = model.forward(tape, vars, x_adv)?;
    let robust = kl_divergence(tape, logits_nat, logits_adv)?;
    let scaled = tape.scale(robust, beta);
    tape.add(natural, scaled)
}
