//! SAT and TRADES training loops with configurable noise-injection site,
//! SGD with momentum and weight decay, four learning-rate schedules, and
//! per-epoch CSV logging.
//!
//! Observation-style sites (`inner`, `outer`, `both`, `mismatched`) flip
//! labels per minibatch; the `noilin` site flips the whole training set once
//! per epoch at the rate the scheduler currently holds. Validation data is
//! never flipped and never trained on; it only feeds the scheduler and
//! best-checkpoint selection.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, pgd_with_targets, AttackConfig, Objective};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::loss::{self, smooth_label};
use crate::metrics::{self, DiversityTrace};
use crate::model::{save_checkpoint, MlpClassifier};
use crate::noilin::NoilinState;
use crate::noise::{flip, flip_minibatch, NoiseSpec, NoisyView};
use crate::rng;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sat,
    Trades,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSite {
    /// Plain adversarial training; η is irrelevant.
    None,
    /// Flip the labels driving the attack only (Observation i).
    Inner,
    /// Flip the labels driving the loss only (Observation ii).
    Outer,
    /// One flip set drives both attack and loss (Observation iii).
    Both,
    /// Independent flip sets for attack and loss (Observation iv).
    Mismatched,
    /// Whole-dataset per-epoch flips at the scheduler's adaptive rate.
    Noilin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Base LR divided by 10 at 1/2 and 3/4 of the run (epochs 60 and 90
    /// of a 120-epoch run, scaled proportionally for other lengths).
    Piecewise,
    /// Divide by 10 every quarter of the run, capped at three decays.
    MultipleDecay,
    /// base * 0.5 * (1 + cos(pi * epoch / E)).
    Cosine,
    /// Triangular ramp: zero to base at E/2, back to zero at E.
    Cyclic,
}

/// Learning rate at `epoch` of a `total_epochs` run. Evaluating at
/// `epoch == total_epochs` yields the closed-form endpoint.
pub fn lr_at(schedule: LrSchedule, epoch: usize, total_epochs: usize, base: f64) -> f64 {
    let e = epoch as f64;
    let total = total_epochs as f64;
    match schedule {
        LrSchedule::Piecewise => {
            let mut decays = 0;
            if e >= total * 0.5 {
                decays += 1;
            }
            if e >= total * 0.75 {
                decays += 1;
            }
            base / 10f64.powi(decays)
        }
        LrSchedule::MultipleDecay => {
            let decays = ((e / (total / 4.0)).floor() as i32).min(3);
            base / 10f64.powi(decays)
        }
        LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * e / total).cos()),
        LrSchedule::Cyclic => base * (1.0 - (1.0 - 2.0 * e / total).abs()),
    }
}

/// One SGD-with-momentum update for a single parameter tensor:
/// `v <- momentum * v + (g + weight_decay * theta); theta <- theta - lr * v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::invalid(format!(
            "sgd_step buffers disagree: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if grad.iter().any(|g| g.is_nan()) {
        return Err(Error::NonFinite {
            context: "parameter gradient in sgd_step".to_string(),
        });
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// NoiLIn scheduler hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoilinParams {
    pub eta_min: f64,
    pub eta_max: f64,
    pub tau: usize,
    pub gamma: f64,
}

impl NoilinParams {
    /// Protocol defaults: (0.05, 0.6, 10, 0.1) for SAT and
    /// (0.05, 0.4, 10, 0.05) for TRADES.
    pub fn defaults_for(method: Method) -> Self {
        match method {
            Method::Sat => NoilinParams {
                eta_min: 0.05,
                eta_max: 0.6,
                tau: 10,
                gamma: 0.1,
            },
            Method::Trades => NoilinParams {
                eta_min: 0.05,
                eta_max: 0.4,
                tau: 10,
                gamma: 0.05,
            },
        }
    }

    pub fn to_state(self) -> Result<NoilinState> {
        NoilinState::init(self.eta_min, self.eta_max, self.tau, self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// Smoothed labels in the loss only.
    Outer,
    /// Smoothed labels also drive the attack objective.
    Both,
    /// Like `Both` with rho following the NoiLIn η schedule.
    Adaptive,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub mode: SmoothingMode,
    pub rho: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_trades_beta() -> f64 {
    loss::TRADES_BETA_DEFAULT
}

fn default_batch_size() -> usize {
    128
}

fn default_base_lr() -> f64 {
    0.1
}

fn default_lr_schedule() -> LrSchedule {
    LrSchedule::Piecewise
}

/// Full training configuration. A run is a pure function of this value and
/// the datasets; the runner derives every internal stream (shuffles, flips,
/// attack starts, the model seed) from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub injection_site: InjectionSite,
    pub noise: NoiseSpec,
    /// Hidden layer widths; input and class counts come from the data.
    pub hidden_layers: Vec<usize>,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Training-time attack.
    pub attack: AttackConfig,
    #[serde(default = "default_trades_beta")]
    pub trades_beta: f64,
    /// Scheduler parameters for the `noilin` site (and adaptive smoothing).
    #[serde(default)]
    pub noilin: Option<NoilinParams>,
    #[serde(default)]
    pub label_smoothing: Option<SmoothingConfig>,
    /// Train-split indices whose outer loss and weight-gradient norm are
    /// traced every epoch.
    #[serde(default)]
    pub tracked_examples: Vec<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, data: &RunData) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1".to_string()));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::invalid(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid(format!("weight_decay {} < 0", self.weight_decay)));
        }
        if self.trades_beta < 0.0 {
            return Err(Error::invalid(format!("trades_beta {} < 0", self.trades_beta)));
        }
        self.attack.validate()?;
        self.noise.validate(data.train.class_count())?;
        if let Some(p) = self.noilin {
            p.to_state()?;
        }
        if let Some(s) = &self.label_smoothing {
            if !(0.0..1.0).contains(&s.rho) {
                return Err(Error::invalid(format!("smoothing rho {} outside [0,1)", s.rho)));
            }
        }
        if let Some(&bad) = self
            .tracked_examples
            .iter()
            .find(|&&i| i >= data.train.len())
        {
            return Err(Error::invalid(format!(
                "tracked example {bad} out of range for train split of {}",
                data.train.len()
            )));
        }
        for (name, ds) in [("valid", &data.valid), ("test", &data.test)] {
            if ds.dim() != data.train.dim() || ds.class_count() != data.train.class_count() {
                return Err(Error::invalid(format!(
                    "{name} split geometry {}x{} disagrees with train {}x{}",
                    ds.len(),
                    ds.dim(),
                    data.train.len(),
                    data.train.dim()
                )));
            }
        }
        Ok(())
    }

    /// Scheduler parameters in effect: the configured ones, or the protocol
    /// defaults for the method when the config omits them.
    pub fn noilin_params(&self) -> NoilinParams {
        self.noilin
            .unwrap_or_else(|| NoilinParams::defaults_for(self.method))
    }
}

/// The three splits a run consumes. Validation is the clean monitor split.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: LabeledDataset,
    pub valid: LabeledDataset,
    pub test: LabeledDataset,
}

/// One CSV row of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub eta: f64,
    pub train_loss: f64,
    pub nat_train_acc: f64,
    pub nat_test_acc: f64,
    pub rob_valid_acc: f64,
    pub rob_test_pgd40: f64,
    pub rob_test_cw30: f64,
    pub boosted: bool,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,eta,train_loss,nat_train_acc,nat_test_acc,rob_valid_acc,rob_test_pgd40,rob_test_cw30,boosted";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.eta,
            self.train_loss,
            self.nat_train_acc,
            self.nat_test_acc,
            self.rob_valid_acc,
            self.rob_test_pgd40,
            self.rob_test_cw30,
            self.boosted
        )
    }
}

/// Per-batch label provenance, handed to observers for contract checks.
pub struct BatchProvenance<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub indices: &'a [usize],
    pub clean_labels: &'a [usize],
    pub attack_labels: &'a [usize],
    pub attack_flipped: &'a [bool],
    pub loss_labels: &'a [usize],
    pub loss_flipped: &'a [bool],
}

pub type BatchObserver<'o> = dyn FnMut(&BatchProvenance<'_>) + 'o;

/// Everything a finished run hands back.
pub struct RunOutcome {
    pub best: MlpClassifier,
    pub last: MlpClassifier,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
    pub traces: Vec<DiversityTrace>,
}

/// Content hash of the canonical config JSON (FNV-1a 64, hex). Stamped into
/// checkpoints so a run directory is self-describing.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

// Stream tags.
const TAG_MODEL: u64 = 0x6d6f64;
const TAG_SHUFFLE: u64 = 0x736866;
const TAG_NOISE: u64 = 0x6e6f69;
const TAG_ATTACK: u64 = 0x61746b;
const TAG_EVAL: u64 = 0x65766c;
const TAG_INNER: u64 = 1;
const TAG_OUTER: u64 = 2;
const TAG_BOTH: u64 = 3;

/// The fixed evaluation battery derived from the training attack: PGD-10
/// for validation, PGD-40 and CW-PGD-30 for test robustness.
#[derive(Debug, Clone, Copy)]
pub struct EvalAttacks {
    pub pgd10: AttackConfig,
    pub pgd40: AttackConfig,
    pub cw30: AttackConfig,
}

pub fn eval_attacks(train_attack: &AttackConfig) -> EvalAttacks {
    let eps = train_attack.epsilon;
    let domain = train_attack.clamp_domain;
    EvalAttacks {
        pgd10: AttackConfig::eval_pgd(eps, 10, domain),
        pgd40: AttackConfig::eval_pgd(eps, 40, domain),
        cw30: AttackConfig::eval_cw(eps, 30, 0.0, domain),
    }
}

/// Seed used for the per-epoch evaluation attacks. Fixed per run (not per
/// epoch) so that evaluating a saved checkpoint afterwards reproduces the
/// logged numbers exactly. Slot 1 is validation PGD-10, 2 is test PGD-40,
/// 3 is test CW-30.
pub fn eval_seed(run_seed: u64, slot: u64) -> u64 {
    rng::mix(&[run_seed, TAG_EVAL, slot])
}

/// Epoch-by-epoch training driver. [`run`] wraps it; it can also be stepped
/// manually when a caller wants custom stopping or inspection between
/// epochs.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a RunData,
    model: MlpClassifier,
    velocity: Vec<Vec<f64>>,
    scheduler: Option<NoilinState>,
    traces: Vec<DiversityTrace>,
    noise_seed: u64,
    evals: EvalAttacks,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a RunData) -> Result<Self> {
        cfg.validate(data)?;
        let mut sizes = vec![data.train.dim()];
        sizes.extend_from_slice(&cfg.hidden_layers);
        sizes.push(data.train.class_count());
        let model = MlpClassifier::init(&sizes, rng::mix(&[cfg.seed, TAG_MODEL]))?;
        let velocity = model
            .params()
            .iter()
            .map(|(_, _, v)| vec![0.0; v.len()])
            .collect();

        let needs_scheduler = cfg.injection_site == InjectionSite::Noilin
            || matches!(
                cfg.label_smoothing,
                Some(SmoothingConfig {
                    mode: SmoothingMode::Adaptive,
                    ..
                })
            );
        let scheduler = if needs_scheduler {
            Some(cfg.noilin_params().to_state()?)
        } else {
            None
        };

        Ok(Trainer {
            cfg,
            data,
            model,
            velocity,
            scheduler,
            traces: cfg
                .tracked_examples
                .iter()
                .map(|&i| DiversityTrace::new(i))
                .collect(),
            noise_seed: rng::mix(&[cfg.seed, TAG_NOISE, cfg.noise.seed]),
            evals: eval_attacks(&cfg.attack),
        })
    }

    /// η in effect for this epoch.
    fn epoch_eta(&self) -> f64 {
        match self.cfg.injection_site {
            InjectionSite::None => 0.0,
            InjectionSite::Noilin => self
                .scheduler
                .as_ref()
                .expect("noilin site keeps a scheduler")
                .current_eta(),
            _ => self.cfg.noise.rate,
        }
    }

    /// Smoothing level in effect for this epoch, if smoothing is on.
    fn epoch_rho(&self) -> Option<(SmoothingMode, f64)> {
        self.cfg.label_smoothing.map(|s| match s.mode {
            SmoothingMode::Adaptive => (
                s.mode,
                self.scheduler
                    .as_ref()
                    .expect("adaptive smoothing keeps a scheduler")
                    .current_eta(),
            ),
            _ => (s.mode, s.rho),
        })
    }

    fn spec_at(&self, rate: f64) -> NoiseSpec {
        NoiseSpec {
            kind: self.cfg.noise.kind.clone(),
            rate,
            seed: self.noise_seed,
        }
    }

    /// Attack/loss labels for one batch according to the injection site.
    #[allow(clippy::type_complexity)]
    fn batch_labels(
        &self,
        clean: &[usize],
        epoch_view: Option<(&NoisyView, &[usize])>,
        epoch: usize,
        batch: usize,
        eta: f64,
    ) -> Result<(Vec<usize>, Vec<bool>, Vec<usize>, Vec<bool>)> {
        let n = clean.len();
        let clean_mask = vec![false; n];
        let class_count = self.data.train.class_count();
        let spec = self.spec_at(eta);
        let batch_seed = |tag: u64| rng::mix(&[self.noise_seed, tag, epoch as u64, batch as u64]);
        Ok(match self.cfg.injection_site {
            InjectionSite::None => (clean.to_vec(), clean_mask.clone(), clean.to_vec(), clean_mask),
            InjectionSite::Inner => {
                let (labels, mask) =
                    flip_minibatch(clean, class_count, &spec, batch_seed(TAG_INNER))?;
                (labels, mask, clean.to_vec(), clean_mask)
            }
            InjectionSite::Outer => {
                let (labels, mask) =
                    flip_minibatch(clean, class_count, &spec, batch_seed(TAG_OUTER))?;
                (clean.to_vec(), clean_mask, labels, mask)
            }
            InjectionSite::Both => {
                let (labels, mask) =
                    flip_minibatch(clean, class_count, &spec, batch_seed(TAG_BOTH))?;
                (labels.clone(), mask.clone(), labels, mask)
            }
            InjectionSite::Mismatched => {
                let (attack, attack_mask) =
                    flip_minibatch(clean, class_count, &spec, batch_seed(TAG_INNER))?;
                let (loss_labels, loss_mask) =
                    flip_minibatch(clean, class_count, &spec, batch_seed(TAG_OUTER))?;
                (attack, attack_mask, loss_labels, loss_mask)
            }
            InjectionSite::Noilin => {
                let (view, indices) =
                    epoch_view.expect("noilin site provides a per-epoch view");
                let labels: Vec<usize> =
                    indices.iter().map(|&i| view.noisy_labels[i]).collect();
                let mask: Vec<bool> = indices.iter().map(|&i| view.flipped[i]).collect();
                (labels.clone(), mask.clone(), labels, mask)
            }
        })
    }

    /// Read-only view of the model in its current training state.
    pub fn model(&self) -> &MlpClassifier {
        &self.model
    }

    /// Diversity traces accumulated so far for the tracked examples.
    pub fn traces(&self) -> &[DiversityTrace] {
        &self.traces
    }

    /// One optimizer pass over the training split: per batch, pick attack
    /// labels per the injection site, generate adversarial examples, pick
    /// loss labels, take an SGD step; then evaluate, feed the scheduler,
    /// and assemble the epoch record.
    pub fn train_epoch(
        &mut self,
        epoch: usize,
        observer: &mut Option<&mut BatchObserver<'_>>,
    ) -> Result<EpochRecord> {
        let cfg = self.cfg;
        let n = self.data.train.len();
        let dim = self.data.train.dim();
        let class_count = self.data.train.class_count();
        let lr = lr_at(cfg.lr_schedule, epoch, cfg.epochs, cfg.base_lr);
        let eta = self.epoch_eta();
        let smoothing = self.epoch_rho();

        // Algorithm-1 mode flips the dataset once per epoch, not per batch.
        let epoch_view = if cfg.injection_site == InjectionSite::Noilin {
            Some(flip(&self.data.train, &self.spec_at(eta), epoch)?)
        } else {
            None
        };

        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_stream = rng::stream(&[cfg.seed, TAG_SHUFFLE, epoch as u64]);
        rng::shuffle(&mut shuffle_stream, &mut order);

        let mut loss_total = 0.0;
        for (batch_index, batch_indices) in order.chunks(cfg.batch_size).enumerate() {
            let (features, clean_labels) = self.data.train.gather(batch_indices);
            let b = batch_indices.len();
            let (attack_labels, attack_flipped, loss_labels, loss_flipped) = self.batch_labels(
                &clean_labels,
                epoch_view.as_ref().map(|v| (v, batch_indices)),
                epoch,
                batch_index,
                eta,
            )?;

            if let Some(obs) = observer.as_mut() {
                obs(&BatchProvenance {
                    epoch,
                    batch: batch_index,
                    indices: batch_indices,
                    clean_labels: &clean_labels,
                    attack_labels: &attack_labels,
                    attack_flipped: &attack_flipped,
                    loss_labels: &loss_labels,
                    loss_flipped: &loss_flipped,
                });
            }

            let attack_seed =
                rng::mix(&[cfg.seed, TAG_ATTACK, epoch as u64, batch_index as u64]);
            let adv = match cfg.method {
                Method::Sat => match smoothing {
                    // Smoothed labels drive the attack only in the
                    // both/adaptive variants.
                    Some((SmoothingMode::Both | SmoothingMode::Adaptive, rho)) if rho > 0.0 => {
                        let targets = smooth_batch(&attack_labels, class_count, rho)?;
                        pgd_with_targets(
                            &self.model,
                            &features,
                            b,
                            &targets,
                            &cfg.attack,
                            attack_seed,
                        )?
                    }
                    _ => pgd(
                        &self.model,
                        &features,
                        b,
                        &attack_labels,
                        &cfg.attack,
                        attack_seed,
                    )?,
                },
                Method::Trades => {
                    // TRADES maximizes the KL term; labels play no role in
                    // its inner problem.
                    let kl_attack = AttackConfig {
                        objective: Objective::KlFromNatural,
                        ..cfg.attack
                    };
                    pgd(
                        &self.model,
                        &features,
                        b,
                        &attack_labels,
                        &kl_attack,
                        attack_seed,
                    )?
                }
            };

            // Diversity updates read the pre-update model, matching the
            // state the batch was generated against.
            for (slot, trace) in self.traces.iter_mut().enumerate() {
                let _ = slot;
                if let Some(pos) = batch_indices.iter().position(|&i| i == trace.index) {
                    let row = &adv[pos * dim..(pos + 1) * dim];
                    let (outer_loss, grad_norm) =
                        metrics::outer_loss_and_grad_norm(&self.model, row, loss_labels[pos])?;
                    trace.outer_losses.push(outer_loss);
                    trace.grad_norms.push(grad_norm);
                }
            }

            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, true);
            let loss_var = match cfg.method {
                Method::Sat => {
                    let xv = tape.constant(&[b, dim], adv)?;
                    let logits = self.model.forward(&mut tape, &vars, xv)?;
                    match smoothing {
                        Some((_, rho)) if rho > 0.0 => {
                            let targets = smooth_batch(&loss_labels, class_count, rho)?;
                            loss::soft_cross_entropy(&mut tape, logits, &targets)?
                        }
                        _ => loss::cross_entropy(&mut tape, logits, &loss_labels)?,
                    }
                }
                Method::Trades => {
                    let x_nat = tape.constant(&[b, dim], features.clone())?;
                    let x_adv = tape.constant(&[b, dim], adv)?;
                    match smoothing {
                        Some((_, rho)) if rho > 0.0 => {
                            let logits_nat = self.model.forward(&mut tape, &vars, x_nat)?;
                            let targets = smooth_batch(&loss_labels, class_count, rho)?;
                            let natural =
                                loss::soft_cross_entropy(&mut tape, logits_nat, &targets)?;
                            let logits_adv = self.model.forward(&mut tape, &vars, x_adv)?;
                            let robust =
                                loss::kl_divergence(&mut tape, logits_nat, logits_adv)?;
                            let scaled = tape.scale(robust, cfg.trades_beta);
                            tape.add(natural, scaled)?
                        }
                        _ => loss::trades_loss(
                            &mut tape,
                            &self.model,
                            &vars,
                            x_nat,
                            x_adv,
                            &loss_labels,
                            cfg.trades_beta,
                        )?,
                    }
                }
            };

            let loss_value = tape.values(loss_var)[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {batch_index}"),
                });
            }
            loss_total += loss_value * b as f64;

            tape.backward(loss_var)?;
            let grads: Vec<Vec<f64>> = vars
                .weights
                .iter()
                .zip(&vars.biases)
                .flat_map(|(w, bv)| [*w, *bv])
                .map(|var| {
                    tape.grad(var)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.values(var).len()])
                })
                .collect();
            for ((param, grad), velocity) in self
                .model
                .params_mut()
                .into_iter()
                .zip(&grads)
                .zip(&mut self.velocity)
            {
                sgd_step(param, grad, velocity, lr, cfg.momentum, cfg.weight_decay)?;
            }
        }

        // Per-epoch evaluations; attack seeds are fixed per run so an
        // external eval of a checkpoint reproduces these numbers exactly.
        let nat_train_acc = metrics::accuracy(&self.model, &self.data.train, None, 0)?;
        let nat_test_acc = metrics::accuracy(&self.model, &self.data.test, None, 0)?;
        let rob_valid_acc = metrics::accuracy(
            &self.model,
            &self.data.valid,
            Some(&self.evals.pgd10),
            eval_seed(cfg.seed, 1),
        )?;
        let rob_test_pgd40 = metrics::accuracy(
            &self.model,
            &self.data.test,
            Some(&self.evals.pgd40),
            eval_seed(cfg.seed, 2),
        )?;
        let rob_test_cw30 = metrics::accuracy(
            &self.model,
            &self.data.test,
            Some(&self.evals.cw30),
            eval_seed(cfg.seed, 3),
        )?;

        let boosted = match self.scheduler.as_mut() {
            Some(s) => s.observe(rob_valid_acc)?,
            None => false,
        };

        Ok(EpochRecord {
            epoch,
            lr,
            eta,
            train_loss: loss_total / n as f64,
            nat_train_acc,
            nat_test_acc,
            rob_valid_acc,
            rob_test_pgd40,
            rob_test_cw30,
            boosted,
        })
    }
}

fn smooth_batch(labels: &[usize], class_count: usize, rho: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(labels.len() * class_count);
    for &y in labels {
        out.extend_from_slice(smooth_label(y, class_count, rho)?.values());
    }
    Ok(out)
}

/// Train per `cfg`, writing `epochs.csv`, `best.ckpt`, `last.ckpt`, and
/// (when examples are tracked) `diversity.csv` into `outdir`.
///
/// Best means argmax robust validation accuracy; ties keep the earlier
/// epoch. A one-epoch run makes best and last identical.
pub fn run(cfg: &TrainConfig, data: &RunData, outdir: &Path) -> Result<RunOutcome> {
    run_with_observer(cfg, data, outdir, None)
}

/// [`run`] with a per-batch provenance observer for contract checks.
pub fn run_with_observer(
    cfg: &TrainConfig,
    data: &RunData,
    outdir: &Path,
    mut observer: Option<&mut BatchObserver<'_>>,
) -> Result<RunOutcome> {
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut trainer = Trainer::new(cfg, data)?;
    let hash = config_hash(cfg);

    let csv_path = outdir.join("epochs.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{}", EpochRecord::CSV_HEADER).map_err(|e| Error::io(&csv_path, e))?;

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MlpClassifier)> = None;
    for epoch in 0..cfg.epochs {
        let record = trainer.train_epoch(epoch, &mut observer)?;
        writeln!(csv, "{}", record.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
        let improved = best
            .as_ref()
            .map(|(acc, _, _)| record.rob_valid_acc > *acc)
            .unwrap_or(true);
        if improved {
            best = Some((record.rob_valid_acc, epoch, trainer.model.clone()));
        }
        records.push(record);
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;

    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    save_checkpoint(&best_model, &outdir.join("best.ckpt"), &hash)?;
    save_checkpoint(&trainer.model, &outdir.join("last.ckpt"), &hash)?;
    if !trainer.traces.is_empty() {
        metrics::write_diversity_csv(&trainer.traces, &outdir.join("diversity.csv"))?;
    }

    Ok(RunOutcome {
        best: best_model,
        last: trainer.model,
        best_epoch,
        records,
        traces: trainer.traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_matches_protocol_epochs() {
        assert_eq!(lr_at(LrSchedule::Piecewise, 0, 120, 0.1), 0.1);
        assert_eq!(lr_at(LrSchedule::Piecewise, 59, 120, 0.1), 0.1);
        assert_eq!(lr_at(LrSchedule::Piecewise, 60, 120, 0.1), 0.01);
        assert_eq!(lr_at(LrSchedule::Piecewise, 89, 120, 0.1), 0.01);
        assert_eq!(lr_at(LrSchedule::Piecewise, 90, 120, 0.1), 0.001);
        assert_eq!(lr_at(LrSchedule::Piecewise, 119, 120, 0.1), 0.001);
        // Proportional scaling keeps the 50%/75% geometry.
        assert_eq!(lr_at(LrSchedule::Piecewise, 19, 40, 0.1), 0.1);
        assert_eq!(lr_at(LrSchedule::Piecewise, 20, 40, 0.1), 0.01);
        assert_eq!(lr_at(LrSchedule::Piecewise, 30, 40, 0.1), 0.001);
    }

    #[test]
    fn cosine_and_cyclic_endpoints() {
        assert_eq!(lr_at(LrSchedule::Cosine, 0, 100, 0.2), 0.2);
        assert!(lr_at(LrSchedule::Cosine, 100, 100, 0.2).abs() < 1e-17);
        assert_eq!(lr_at(LrSchedule::Cyclic, 0, 100, 0.2), 0.0);
        assert_eq!(lr_at(LrSchedule::Cyclic, 50, 100, 0.2), 0.2);
        assert_eq!(lr_at(LrSchedule::Cyclic, 100, 100, 0.2), 0.0);
    }

    #[test]
    fn multiple_decay_caps_at_three() {
        assert_eq!(lr_at(LrSchedule::MultipleDecay, 0, 120, 0.1), 0.1);
        assert_eq!(lr_at(LrSchedule::MultipleDecay, 29, 120, 0.1), 0.1);
        assert_eq!(lr_at(LrSchedule::MultipleDecay, 30, 120, 0.1), 0.01);
        assert_eq!(lr_at(LrSchedule::MultipleDecay, 60, 120, 0.1), 0.001);
        assert_eq!(lr_at(LrSchedule::MultipleDecay, 90, 120, 0.1), 0.0001);
        assert_eq!(lr_at(LrSchedule::MultipleDecay, 119, 120, 0.1), 0.0001);
    }

    #[test]
    fn vanilla_sgd_without_momentum() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![0.95, 2.1]);
    }

    #[test]
    fn momentum_hand_case_two_steps() {
        // theta = 1, g = 1, lr = 0.1, momentum = 0.9:
        // after two identical steps theta = 1 - 0.1 - 0.19 = 0.71.
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_the_velocity() {
        let mut p = vec![2.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.0, 5e-4).unwrap();
        // v = 0 + (0 + 5e-4 * 2) = 1e-3; theta = 2 - 1e-4.
        assert!((p[0] - (2.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        let err = sgd_step(&mut p, &[f64::NAN], &mut v, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn noilin_defaults_per_method() {
        let sat = NoilinParams::defaults_for(Method::Sat);
        assert_eq!((sat.eta_min, sat.eta_max, sat.tau, sat.gamma), (0.05, 0.6, 10, 0.1));
        let trades = NoilinParams::defaults_for(Method::Trades);
        assert_eq!(
            (trades.eta_min, trades.eta_max, trades.tau, trades.gamma),
            (0.05, 0.4, 10, 0.05)
        );
    }

    #[test]
    fn config_hash_tracks_content() {
        let cfg = crate::train::tests::helpers::tiny_config();
        let mut other = cfg.clone();
        assert_eq!(config_hash(&cfg), config_hash(&other));
        other.base_lr = 0.123;
        assert_ne!(config_hash(&cfg), config_hash(&other));
    }

    pub mod helpers {
        use super::super::*;
        use crate::noise::NoiseSpec;

        pub fn tiny_config() -> TrainConfig {
            TrainConfig {
                method: Method::Sat,
                injection_site: InjectionSite::None,
                noise: NoiseSpec::symmetric(0.2, 0),
                hidden_layers: vec![8],
                epochs: 2,
                batch_size: 32,
                lr_schedule: LrSchedule::Piecewise,
                base_lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                attack: AttackConfig {
                    epsilon: 0.1,
                    alpha: 0.025,
                    steps: 5,
                    objective: Objective::CrossEntropy,
                    random_start: true,
                    clamp_domain: None,
                },
                trades_beta: loss::TRADES_BETA_DEFAULT,
                noilin: None,
                label_smoothing: None,
                tracked_examples: Vec::new(),
                seed: 7,
            }
        }
    }
}
