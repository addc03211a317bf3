//! Shared fixtures for the benchmark suite.

use noilin_core::attack::{AttackConfig, Objective};
use noilin_core::data::{make_ternary_gaussian, LabeledDataset, DEFAULT_TERNARY_CENTERS};
use noilin_core::model::MlpClassifier;

pub fn bench_dataset(n_per_class: usize) -> LabeledDataset {
    make_ternary_gaussian(n_per_class, &DEFAULT_TERNARY_CENTERS, 0.8, 1234).unwrap()
}

pub fn bench_model(hidden: usize) -> MlpClassifier {
    MlpClassifier::init(&[2, hidden, 3], 99).unwrap()
}

pub fn bench_attack(steps: usize) -> AttackConfig {
    AttackConfig {
        epsilon: 0.5,
        alpha: 0.125,
        steps,
        objective: Objective::CrossEntropy,
        random_start: true,
        clamp_domain: None,
    }
}
