//! Per-epoch and per-minibatch noisy label assignment with provenance.
//!
//! Flipping is exact-count: exactly `round(rate * n)` indices are chosen
//! uniformly without replacement, so an "η portion" of labels is literal.
//! Symmetric flips draw uniformly over the other C-1 classes and never
//! return the original label; pair flips move along a fixed derangement,
//! cyclic `(c+1) mod C` by default or an explicit permutation.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

/// Flavor of label flipping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Uniform draw over the other C-1 classes.
    Symmetric,
    /// Cyclic adjacency c -> (c+1) mod C.
    Pair,
    /// Explicit adjacency permutation; must be a derangement.
    PairPermutation(Vec<usize>),
}

/// Noise configuration: flavor, rate in `[0,1]`, and the base seed that all
/// epoch and batch streams derive from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate,
            seed,
        }
    }

    pub fn pair(rate: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Pair,
            rate,
            seed,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(format!(
                "noise rate {} outside [0,1]",
                self.rate
            )));
        }
        if self.rate > 0.0 && class_count < 2 {
            return Err(Error::invalid(format!(
                "cannot flip labels with {class_count} classes"
            )));
        }
        if let NoiseKind::PairPermutation(perm) = &self.kind {
            if perm.len() != class_count {
                return Err(Error::invalid(format!(
                    "permutation of length {} for {class_count} classes",
                    perm.len()
                )));
            }
            let mut seen = vec![false; class_count];
            for (c, &t) in perm.iter().enumerate() {
                if t >= class_count || seen[t] {
                    return Err(Error::invalid(format!(
                        "{perm:?} is not a permutation of 0..{class_count}"
                    )));
                }
                if t == c {
                    return Err(Error::invalid(format!(
                        "permutation maps class {c} to itself; flips must change the label"
                    )));
                }
                seen[t] = true;
            }
        }
        Ok(())
    }
}

/// One noisy relabeling of a dataset, with full provenance.
#[derive(Debug, Clone)]
pub struct NoisyView {
    pub epoch: usize,
    pub noisy_labels: Vec<usize>,
    pub flipped: Vec<bool>,
}

impl NoisyView {
    pub fn flip_count(&self) -> usize {
        self.flipped.iter().filter(|&&f| f).count()
    }
}

fn flip_one(
    kind: &NoiseKind,
    label: usize,
    class_count: usize,
    stream: &mut impl RngCore,
) -> usize {
    match kind {
        NoiseKind::Symmetric => {
            // Uniform over the other C-1 classes, skipping the original.
            let draw = rng::below(stream, (class_count - 1) as u64) as usize;
            if draw >= label {
                draw + 1
            } else {
                draw
            }
        }
        NoiseKind::Pair => (label + 1) % class_count,
        NoiseKind::PairPermutation(perm) => perm[label],
    }
}

fn flip_labels(
    labels: &[usize],
    class_count: usize,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<(Vec<usize>, Vec<bool>)> {
    spec.validate(class_count)?;
    let n = labels.len();
    let count = (spec.rate * n as f64).round() as usize;
    let mut noisy = labels.to_vec();
    let mut flipped = vec![false; n];
    if count == 0 {
        return Ok((noisy, flipped));
    }
    let mut stream = rng::stream(&[seed, 0x666c6970]);
    let mut chosen = rng::sample_indices(&mut stream, n, count);
    // Fixed visit order so the draw for each index is position-independent.
    chosen.sort_unstable();
    for i in chosen {
        noisy[i] = flip_one(&spec.kind, labels[i], class_count, &mut stream);
        flipped[i] = true;
    }
    Ok((noisy, flipped))
}

/// Flip `round(rate * n)` labels of the whole dataset for one epoch. The
/// epoch index participates in the seeding, so every epoch draws a fresh
/// flip set; the same (dataset, spec, epoch) always yields the same view.
pub fn flip(ds: &LabeledDataset, spec: &NoiseSpec, epoch: usize) -> Result<NoisyView> {
    let (noisy_labels, flipped) = flip_labels(
        ds.labels(),
        ds.class_count(),
        spec,
        rng::mix(&[spec.seed, 0x65706f63, epoch as u64]),
    )?;
    Ok(NoisyView {
        epoch,
        noisy_labels,
        flipped,
    })
}

/// Flip `round(rate * batch_len)` labels of one minibatch.
pub fn flip_minibatch(
    labels: &[usize],
    class_count: usize,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<(Vec<usize>, Vec<bool>)> {
    flip_labels(labels, class_count, spec, seed)
}

/// Audit export: `index,base_label,noisy_label,flipped` per row.
pub fn write_noisy_view_csv(ds: &LabeledDataset, view: &NoisyView, path: &Path) -> Result<()> {
    let mut out = String::from("index,base_label,noisy_label,flipped\n");
    for i in 0..ds.len() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            ds.labels()[i],
            view.noisy_labels[i],
            view.flipped[i]
        ));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
