//! L∞-bounded adversarial example generation: iterated sign-gradient ascent
//! with projection back into the ε-ball, under a selectable inner objective.
//!
//! The attack label is always a parameter, never assumed clean — label-noise
//! injection into the inner maximization enters exactly here. Batches fan
//! out over fixed-size chunks so worker count never changes the numerics;
//! the model is immutable for the duration of a call.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::model::MlpClassifier;
use crate::rng;
use crate::tensor::Tape;

/// Batch rows processed per worker; fixed so results are independent of
/// thread count.
const CHUNK: usize = 64;

/// Inner-maximization objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// Ascend cross-entropy against the attack labels.
    CrossEntropy,
    /// Ascend the CW hinge `max(max_{j != y} f_j - f_y - kappa, 0)`.
    Cw { kappa: f64 },
    /// Ascend KL from the natural-point predictive distribution; labels are
    /// ignored. This is the TRADES inner objective.
    KlFromNatural,
}

/// PGD configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ radius in input units.
    pub epsilon: f64,
    /// Step size.
    pub alpha: f64,
    /// Iteration count; zero steps with no random start is the identity.
    pub steps: usize,
    pub objective: Objective,
    /// Start from a uniform draw in the ε-ball instead of the clean point.
    pub random_start: bool,
    /// Clamp iterates into [lo, hi] per coordinate (image-style domains).
    pub clamp_domain: Option<(f64, f64)>,
}

impl AttackConfig {
    /// The standard training attack: ε=8/255, α=2/255, K=10, cross-entropy,
    /// random start.
    pub fn train_default(clamp_domain: Option<(f64, f64)>) -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            objective: Objective::CrossEntropy,
            random_start: true,
            clamp_domain,
        }
    }

    /// Evaluation PGD with the training step-size ratio alpha = 2.5 eps / K.
    pub fn eval_pgd(epsilon: f64, steps: usize, clamp_domain: Option<(f64, f64)>) -> Self {
        AttackConfig {
            epsilon,
            alpha: 2.5 * epsilon / steps.max(1) as f64,
            steps,
            objective: Objective::CrossEntropy,
            random_start: true,
            clamp_domain,
        }
    }

    /// Evaluation CW-PGD.
    pub fn eval_cw(
        epsilon: f64,
        steps: usize,
        kappa: f64,
        clamp_domain: Option<(f64, f64)>,
    ) -> Self {
        AttackConfig {
            epsilon,
            alpha: 2.5 * epsilon / steps.max(1) as f64,
            steps,
            objective: Objective::Cw { kappa },
            random_start: true,
            clamp_domain,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn without_random_start(mut self) -> Self {
        self.random_start = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::invalid(format!("epsilon {} < 0", self.epsilon)));
        }
        if self.steps > 0 && (self.alpha.is_nan() || self.alpha <= 0.0) {
            return Err(Error::invalid(format!(
                "alpha {} must be positive when steps > 0",
                self.alpha
            )));
        }
        if let Objective::Cw { kappa } = self.objective {
            if kappa < 0.0 {
                return Err(Error::invalid(format!("cw kappa {kappa} < 0")));
            }
        }
        if let Some((lo, hi)) = self.clamp_domain {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::invalid(format!("clamp domain [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// Per-sample CW objective values `max(max_{j != y} z_j - z_y - kappa, 0)`
/// over flat `[batch, classes]` logits.
pub fn cw_objective(
    logits: &[f64],
    class_count: usize,
    labels: &[usize],
    kappa: f64,
) -> Result<Vec<f64>> {
    if class_count < 2 {
        return Err(Error::invalid(format!(
            "cw objective needs at least 2 classes, got {class_count}"
        )));
    }
    if kappa < 0.0 {
        return Err(Error::invalid(format!("cw kappa {kappa} < 0")));
    }
    if logits.len() != labels.len() * class_count {
        return Err(Error::invalid(format!(
            "logit buffer of {} does not hold {} rows of {class_count}",
            logits.len(),
            labels.len()
        )));
    }
    labels
        .iter()
        .zip(logits.chunks_exact(class_count))
        .map(|(&y, row)| {
            if y >= class_count {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {class_count} classes"
                )));
            }
            let best_other = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &z)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((best_other - row[y] - kappa).max(0.0))
        })
        .collect()
}

enum AttackTargets<'a> {
    Hard(&'a [usize]),
    Soft(&'a [f64]),
}

/// PGD under `cfg.objective` with hard attack labels.
///
/// Returns the adversarial batch; `x0` and the model are left untouched.
/// Every output coordinate satisfies `|x_adv - x0| <= epsilon` and lies in
/// the clamp domain when one is set.
pub fn pgd(
    model: &MlpClassifier,
    x0: &[f64],
    batch: usize,
    y_attack: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if y_attack.len() != batch {
        return Err(Error::invalid(format!(
            "{} attack labels for batch of {batch}",
            y_attack.len()
        )));
    }
    run_pgd(model, x0, batch, AttackTargets::Hard(y_attack), cfg, seed)
}

/// PGD ascending soft cross-entropy against explicit `[batch, classes]`
/// target distributions (the label-smoothing-in-the-attack variant).
pub fn pgd_with_targets(
    model: &MlpClassifier,
    x0: &[f64],
    batch: usize,
    targets: &[f64],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if targets.len() != batch * model.class_count() {
        return Err(Error::invalid(format!(
            "target buffer of {} does not hold {batch} rows of {}",
            targets.len(),
            model.class_count()
        )));
    }
    run_pgd(model, x0, batch, AttackTargets::Soft(targets), cfg, seed)
}

fn run_pgd(
    model: &MlpClassifier,
    x0: &[f64],
    batch: usize,
    targets: AttackTargets<'_>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dim = model.input_dim();
    if x0.len() != batch * dim {
        return Err(Error::invalid(format!(
            "feature buffer of {} does not hold {batch} rows of {dim}",
            x0.len()
        )));
    }
    if batch == 0 {
        return Ok(Vec::new());
    }

    let chunk_results: Result<Vec<Vec<f64>>> = (0..batch)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|rows| {
            let first = rows[0];
            let count = rows.len();
            let x0_chunk = &x0[first * dim..(first + count) * dim];
            let target_chunk = match &targets {
                AttackTargets::Hard(labels) => AttackTargets::Hard(&labels[first..first + count]),
                AttackTargets::Soft(t) => {
                    let c = model.class_count();
                    AttackTargets::Soft(&t[first * c..(first + count) * c])
                }
            };
            attack_chunk(model, x0_chunk, count, first, target_chunk, cfg, seed)
        })
        .collect();

    let mut out = Vec::with_capacity(batch * dim);
    for chunk in chunk_results? {
        out.extend_from_slice(&chunk);
    }
    Ok(out)
}

fn attack_chunk(
    model: &MlpClassifier,
    x0: &[f64],
    batch: usize,
    first_row: usize,
    targets: AttackTargets<'_>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let dim = model.input_dim();
    let mut x = x0.to_vec();

    if cfg.random_start && cfg.epsilon > 0.0 {
        for b in 0..batch {
            // Per-sample streams keep the draw independent of chunking.
            let mut stream = rng::stream(&[seed, 0x7273, (first_row + b) as u64]);
            for j in 0..dim {
                x[b * dim + j] += rng::uniform_in(&mut stream, -cfg.epsilon, cfg.epsilon);
            }
        }
        clamp_domain(&mut x, cfg.clamp_domain);
    }

    if cfg.steps == 0 {
        return Ok(x);
    }

    // The KL objective ascends divergence from the natural-point
    // distribution, which stays fixed over the iterations.
    let natural_targets = match (&targets, cfg.objective) {
        (_, Objective::KlFromNatural) => {
            let logits = model.predict_logits(x0, batch)?;
            Some(crate::tensor::softmax_rows(&logits, model.class_count()))
        }
        _ => None,
    };

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let mark = tape.mark();

    for step in 0..cfg.steps {
        tape.rewind(mark);
        let xv = tape.variable(&[batch, dim], x.clone())?;
        let logits = model.forward(&mut tape, &vars, xv)?;
        let objective = match (&targets, cfg.objective) {
            (AttackTargets::Hard(labels), Objective::CrossEntropy) => {
                loss::cross_entropy(&mut tape, logits, labels)?
            }
            (AttackTargets::Hard(labels), Objective::Cw { kappa }) => {
                let hinge = tape.cw_hinge(logits, labels, kappa)?;
                tape.sum(hinge)
            }
            (_, Objective::KlFromNatural) => {
                loss::soft_cross_entropy(&mut tape, logits, natural_targets.as_ref().unwrap())?
            }
            (AttackTargets::Soft(t), _) => loss::soft_cross_entropy(&mut tape, logits, t)?,
        };
        tape.backward(objective)?;
        let grad = tape
            .grad(xv)
            .expect("input variable receives a gradient")
            .to_vec();
        if grad.iter().any(|g| g.is_nan()) {
            return Err(Error::NonFinite {
                context: format!(
                    "pgd input gradient at step {step} (rows {first_row}..{})",
                    first_row + batch
                ),
            });
        }
        for (xi, (&x0i, &gi)) in x.iter_mut().zip(x0.iter().zip(&grad)) {
            // sign(0) = 0: no movement on zero gradient.
            let direction = if gi > 0.0 {
                1.0
            } else if gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            let moved = *xi + cfg.alpha * direction;
            *xi = moved.clamp(x0i - cfg.epsilon, x0i + cfg.epsilon);
        }
        clamp_domain(&mut x, cfg.clamp_domain);
    }
    Ok(x)
}

fn clamp_domain(x: &mut [f64], domain: Option<(f64, f64)>) {
    if let Some((lo, hi)) = domain {
        for v in x.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> MlpClassifier {
        MlpClassifier::init(&[2, 8, 3], 17).unwrap()
    }

    #[test]
    fn zero_steps_without_random_start_is_identity() {
        let model = tiny_model();
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.02,
            steps: 0,
            objective: Objective::CrossEntropy,
            random_start: false,
            clamp_domain: None,
        };
        let x0 = vec![0.3, -0.7, 1.1, 0.0];
        let adv = pgd(&model, &x0, 2, &[0, 2], &cfg, 5).unwrap();
        assert_eq!(adv, x0);
    }

    #[test]
    fn one_step_projection_arithmetic() {
        // 1-D: x0 = 0.5, eps = 0.1, alpha = 0.2, positive gradient:
        // raw step to 0.7 projects back to 0.6.
        let mut model = MlpClassifier::init(&[1, 2], 0).unwrap();
        {
            let mut params = model.params_mut();
            // logit_0 = x, logit_1 = -x: cross-entropy toward label 1 has
            // positive input gradient at x = 0.5.
            params[0].copy_from_slice(&[1.0, -1.0]);
            params[1].copy_from_slice(&[0.0, 0.0]);
        }
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.2,
            steps: 1,
            objective: Objective::CrossEntropy,
            random_start: false,
            clamp_domain: None,
        };
        let adv = pgd(&model, &[0.5], 1, &[1], &cfg, 0).unwrap();
        assert_eq!(adv, vec![0.6]);
    }

    #[test]
    fn ball_membership_and_domain_clamp() {
        let model = tiny_model();
        let cfg = AttackConfig {
            epsilon: 0.05,
            alpha: 0.02,
            steps: 7,
            objective: Objective::CrossEntropy,
            random_start: true,
            clamp_domain: Some((0.0, 1.0)),
        };
        let x0 = vec![0.01, 0.99, 0.5, 0.5, 0.0, 1.0];
        let adv = pgd(&model, &x0, 3, &[0, 1, 2], &cfg, 42).unwrap();
        for (a, &o) in adv.iter().zip(&x0) {
            assert!((a - o).abs() <= cfg.epsilon + 1e-12);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn default_train_config_matches_standard_values() {
        let cfg = AttackConfig::train_default(None);
        assert_eq!(cfg.epsilon, 8.0 / 255.0);
        assert_eq!(cfg.alpha, 2.0 / 255.0);
        assert_eq!(cfg.steps, 10);
        assert!(cfg.random_start);
    }

    #[test]
    fn attack_leaves_model_and_input_unchanged() {
        let model = tiny_model();
        let params_before: Vec<Vec<f64>> =
            model.params().iter().map(|(_, _, v)| v.to_vec()).collect();
        let x0 = vec![0.2, -0.4, 0.8, 0.6];
        let x0_before = x0.clone();
        let cfg = AttackConfig::train_default(None);
        pgd(&model, &x0, 2, &[1, 0], &cfg, 3).unwrap();
        assert_eq!(x0, x0_before);
        let params_after: Vec<Vec<f64>> =
            model.params().iter().map(|(_, _, v)| v.to_vec()).collect();
        assert_eq!(params_before, params_after);
    }

    #[test]
    fn deterministic_per_seed() {
        let model = tiny_model();
        let x0 = vec![0.2, -0.4, 0.8, 0.6];
        let cfg = AttackConfig::train_default(None);
        let a = pgd(&model, &x0, 2, &[1, 0], &cfg, 9).unwrap();
        let b = pgd(&model, &x0, 2, &[1, 0], &cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = pgd(&model, &x0, 2, &[1, 0], &cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cw_objective_hand_values() {
        // Confident-correct: max(0 - 5 - 0, 0) = 0.
        let v = cw_objective(&[5.0, 0.0, 0.0], 3, &[0], 0.0).unwrap();
        assert_eq!(v, vec![0.0]);
        // max(3 - 0 - 1, 0) = 2.
        let v = cw_objective(&[0.0, 3.0, 1.0], 3, &[0], 1.0).unwrap();
        assert_eq!(v, vec![2.0]);
        assert!(cw_objective(&[0.0], 1, &[0], 0.0).is_err());
    }

    #[test]
    fn cw_inactive_hinge_has_zero_input_gradient() {
        // Central finite differences of the hinge w.r.t. the input are zero
        // wherever the hinge is inactive: the gradient-vanishing regime.
        let model = tiny_model();
        let x = vec![0.4, -0.2];
        let logits = model.predict_logits(&x, 1).unwrap();
        let y = crate::model::argmax(&logits);
        let margin = logits[y]
            - logits
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &z)| z)
                .fold(f64::NEG_INFINITY, f64::max);
        assert!(margin > 0.0, "point must start correctly classified");

        let h = 1e-5;
        for j in 0..2 {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += h;
            minus[j] -= h;
            let op = cw_objective(&model.predict_logits(&plus, 1).unwrap(), 3, &[y], 0.0).unwrap();
            let om =
                cw_objective(&model.predict_logits(&minus, 1).unwrap(), 3, &[y], 0.0).unwrap();
            assert_eq!((op[0] - om[0]) / (2.0 * h), 0.0);
        }
    }

    #[test]
    fn projecting_a_feasible_point_is_identity() {
        // K steps with zero-gradient objective leave a feasible point fixed.
        let mut model = MlpClassifier::init(&[2, 2], 0).unwrap();
        for p in model.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let cfg = AttackConfig {
            epsilon: 0.3,
            alpha: 0.1,
            steps: 4,
            objective: Objective::Cw { kappa: 1.0 },
            random_start: false,
            clamp_domain: Some((-1.0, 1.0)),
        };
        let x0 = vec![0.25, -0.5];
        let adv = pgd(&model, &x0, 1, &[0], &cfg, 0).unwrap();
        assert_eq!(adv, x0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let model = tiny_model();
        let bad_alpha = AttackConfig {
            epsilon: 0.1,
            alpha: 0.0,
            steps: 3,
            objective: Objective::CrossEntropy,
            random_start: false,
            clamp_domain: None,
        };
        assert!(pgd(&model, &[0.0, 0.0], 1, &[0], &bad_alpha, 0).is_err());
        let bad_labels = AttackConfig::train_default(None);
        assert!(pgd(&model, &[0.0, 0.0], 1, &[0, 1], &bad_labels, 0).is_err());
    }
}
