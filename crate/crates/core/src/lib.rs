//! Desk-scale adversarial-training laboratory.
//!
//! The crate trains small MLP classifiers with standard adversarial training
//! (SAT) or TRADES, generates L∞-bounded adversarial examples by projected
//! sign-gradient ascent under cross-entropy, CW-hinge, or KL objectives, and
//! injects label noise at configurable sites of the minimax loop. The NoiLIn
//! schedule boosts the injection rate whenever windowed robust validation
//! accuracy degrades.
//!
//! Modules map onto the stages of an experiment:
//!
//! * [`tensor`] — dense f64 tensors on a reverse-mode gradient tape,
//! * [`model`] — seeded MLP classifiers and their checkpoint format,
//! * [`data`] — synthetic and IDX/CSV datasets plus the train/valid split,
//! * [`noise`] — symmetric and pair label flipping with provenance,
//! * [`attack`] — PGD under selectable inner objectives,
//! * [`loss`] — cross-entropy, KL, TRADES composite, label smoothing,
//! * [`noilin`] — the adaptive noise-rate scheduler,
//! * [`train`] — SGD training loops with per-epoch CSV logging,
//! * [`metrics`] — accuracy, logit margins, similarity and diversity reports.

pub mod attack;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod noilin;
pub mod noise;
pub mod rng;
pub mod tensor;
pub mod train;

pub use attack::{AttackConfig, Objective};
pub use data::{LabeledDataset, SplitSpec};
pub use error::{Error, Result};
pub use metrics::DiversityTrace;
pub use model::MlpClassifier;
pub use noilin::NoilinState;
pub use noise::{NoiseKind, NoiseSpec, NoisyView};
pub use tensor::{Tape, Var};
pub use train::{EpochRecord, InjectionSite, LrSchedule, Method, RunData, TrainConfig};
