//! Declarative experiment configuration.
//!
//! Experiments are JSON files with a strict schema: unknown keys are errors,
//! and parse failures report the offending field path. The `train` section
//! is the library's [`TrainConfig`]; the wrapper adds the dataset source,
//! the validation split size, and the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use noilin_core::data::{
    load_csv, load_idx_pair, make_ternary_gaussian, split, LabeledDataset, SplitSpec,
    DEFAULT_TERNARY_CENTERS,
};
use noilin_core::rng;
use noilin_core::train::{RunData, TrainConfig};

use crate::CliError;

/// Where the train and test splits come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Synthetic 2-D ternary Gaussians; the test set is drawn with a
    /// derived seed.
    Ternary {
        n_per_class: usize,
        sigma: f64,
        seed: u64,
        test_n_per_class: usize,
        #[serde(default)]
        centers: Option<[[f64; 2]; 3]>,
    },
    /// CSV files with header `f0,...,f{d-1},label`.
    Csv {
        train_path: PathBuf,
        test_path: PathBuf,
    },
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset), CliError> {
        match self {
            DatasetSpec::Ternary {
                n_per_class,
                sigma,
                seed,
                test_n_per_class,
                centers,
            } => {
                let centers = centers.unwrap_or(DEFAULT_TERNARY_CENTERS);
                let train = make_ternary_gaussian(*n_per_class, &centers, *sigma, *seed)?;
                let test = make_ternary_gaussian(
                    *test_n_per_class,
                    &centers,
                    *sigma,
                    rng::mix(&[*seed, 0x74657374]),
                )?;
                Ok((train, test))
            }
            DatasetSpec::Csv {
                train_path,
                test_path,
            } => Ok((load_csv(train_path)?, load_csv(test_path)?)),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                load_idx_pair(train_images, train_labels)?,
                load_idx_pair(test_images, test_labels)?,
            )),
        }
    }
}

/// A full experiment: dataset, split, training section, output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Samples held out of the training set as the clean validation split.
    pub validation_count: usize,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse a config file, reporting schema violations with field paths.
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut deserializer = serde_json::Deserializer::from_str(&text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut deserializer)
            .map_err(|e| {
                CliError::Config(format!(
                    "{}: at `{}`: {}",
                    path.display(),
                    e.path(),
                    e.inner()
                ))
            })?;
        Ok(cfg)
    }

    /// Materialize the three splits. The split seed derives from the run
    /// seed, so a config rerun reproduces the same partition.
    pub fn load_data(&self) -> Result<RunData, CliError> {
        let (full_train, test) = self.dataset.load()?;
        let spec = SplitSpec {
            validation_count: self.validation_count,
            seed: rng::mix(&[self.train.seed, 0x73706c69]),
        };
        let (train, valid) = split(&full_train, &spec)?;
        Ok(RunData { train, valid, test })
    }
}
