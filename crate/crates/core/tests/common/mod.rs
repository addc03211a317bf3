//! Shared fixtures for integration tests: a small ternary-Gaussian task, an
//! MNIST-style bump-image task, and a fast training configuration.

#![allow(dead_code)]

use std::path::Path;

use noilin_core::attack::{AttackConfig, Objective};
use noilin_core::data::{
    load_idx_pair, make_ternary_gaussian, split, write_idx_pair, LabeledDataset, SplitSpec,
    DEFAULT_TERNARY_CENTERS,
};
use noilin_core::loss::TRADES_BETA_DEFAULT;
use noilin_core::noise::NoiseSpec;
use noilin_core::rng;
use noilin_core::train::{InjectionSite, LrSchedule, Method, RunData, TrainConfig};

/// Ternary Gaussian splits sized for quick runs.
pub fn ternary_run_data(n_per_class: usize, sigma: f64, seed: u64) -> RunData {
    let full = make_ternary_gaussian(n_per_class, &DEFAULT_TERNARY_CENTERS, sigma, seed).unwrap();
    let spec = SplitSpec {
        validation_count: (full.len() / 5).max(1),
        seed: seed ^ 0x5eed,
    };
    let (train, valid) = split(&full, &spec).unwrap();
    let test =
        make_ternary_gaussian(n_per_class / 2, &DEFAULT_TERNARY_CENTERS, sigma, seed ^ 0x7e57)
            .unwrap();
    RunData { train, valid, test }
}

/// MNIST-style image task: each sample is a 14x14 rendering of a bright
/// Gaussian bump whose position carries the class; position distributions
/// overlap across classes, so some samples are genuinely ambiguous while
/// keeping their correct labels.
pub fn bump_images(
    n_per_class: usize,
    side: usize,
    latent_sigma: f64,
    pixel_noise: f64,
    seed: u64,
) -> LabeledDataset {
    let dim = side * side;
    let centers = [(0.38, 0.38), (0.62, 0.38), (0.50, 0.62)];
    let radius = 0.16;
    let mut features = Vec::with_capacity(3 * n_per_class * dim);
    let mut labels = Vec::with_capacity(3 * n_per_class);
    let mut stream = rng::stream(&[seed, 0x62756d70]);
    for (class, &(cx, cy)) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let (gx, gy) = rng::normal_pair(&mut stream);
            let zx = (cx + latent_sigma * gx).clamp(0.12, 0.88);
            let zy = (cy + latent_sigma * gy).clamp(0.12, 0.88);
            for py in 0..side {
                for px in 0..side {
                    let x = (px as f64 + 0.5) / side as f64;
                    let y = (py as f64 + 0.5) / side as f64;
                    let d2 = (x - zx).powi(2) + (y - zy).powi(2);
                    let v = (-d2 / (2.0 * radius * radius)).exp();
                    let (g, _) = rng::normal_pair(&mut stream);
                    features.push((v + pixel_noise * g).clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, dim, 3, Some((0.0, 1.0))).unwrap()
}

/// Bump-image splits routed through real IDX files: written out, loaded
/// back (quantized to bytes like any IDX source), then split.
pub fn bump_run_data_via_idx(
    dir: &Path,
    seed: u64,
    train_per_class: usize,
    test_per_class: usize,
    latent_sigma: f64,
    pixel_noise: f64,
    validation_count: usize,
) -> RunData {
    let side = 14;
    let full = bump_images(train_per_class, side, latent_sigma, pixel_noise, seed);
    let test = bump_images(test_per_class, side, latent_sigma, pixel_noise, seed ^ 0x7e57);
    let paths = [
        dir.join("train-images.idx"),
        dir.join("train-labels.idx"),
        dir.join("test-images.idx"),
        dir.join("test-labels.idx"),
    ];
    write_idx_pair(&full, &paths[0], &paths[1], side, side).unwrap();
    write_idx_pair(&test, &paths[2], &paths[3], side, side).unwrap();
    let full = load_idx_pair(&paths[0], &paths[1]).unwrap();
    let test = load_idx_pair(&paths[2], &paths[3]).unwrap();
    let (train, valid) = split(
        &full,
        &SplitSpec {
            validation_count,
            seed: seed ^ 0x5eed,
        },
    )
    .unwrap();
    RunData { train, valid, test }
}

/// A small, fast SAT configuration over the ternary task. The attack radius
/// is sized to the class separation (centers are 3 apart, sigma ~ 0.5).
pub fn fast_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        method: Method::Sat,
        injection_site: InjectionSite::None,
        noise: NoiseSpec::symmetric(0.2, 0),
        hidden_layers: vec![16],
        epochs,
        batch_size: 64,
        lr_schedule: LrSchedule::Piecewise,
        base_lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        attack: AttackConfig {
            epsilon: 0.25,
            alpha: 0.0625,
            steps: 5,
            objective: Objective::CrossEntropy,
            random_start: true,
            clamp_domain: None,
        },
        trades_beta: TRADES_BETA_DEFAULT,
        noilin: None,
        label_smoothing: None,
        tracked_examples: Vec::new(),
        seed,
    }
}
