//! Evaluation and analysis: natural/robust accuracy, logit margins, the
//! NL-vs-CL adversarial similarity report, and per-example diversity traces.
//!
//! Everything here evaluates read-only model snapshots; reports are written
//! as CSV, one file per metric family.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::loss;
use crate::model::MlpClassifier;
use crate::rng;
use crate::tensor::{log_softmax_rows, softmax_rows, Tape};

/// Fraction of `ds` classified correctly; when `attack` is given, samples
/// are first perturbed by PGD against their true labels.
pub fn accuracy(
    model: &MlpClassifier,
    ds: &LabeledDataset,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("accuracy over an empty dataset".to_string()));
    }
    let features = match attack {
        Some(cfg) => pgd(model, ds.features(), ds.len(), ds.labels(), cfg, seed)?,
        None => ds.features().to_vec(),
    };
    let predictions = model.predict(&features, ds.len())?;
    let correct = predictions
        .iter()
        .zip(ds.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Per-sample logit margin `f^y - max_{j != y} f^j` on natural data.
/// Negative margin means the sample is misclassified.
pub fn per_sample_margins(model: &MlpClassifier, ds: &LabeledDataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::invalid("margins over an empty dataset".to_string()));
    }
    let logits = model.predict_logits(ds.features(), ds.len())?;
    let c = model.class_count();
    Ok(logits
        .chunks_exact(c)
        .zip(ds.labels())
        .map(|(row, &y)| {
            let best_other = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &z)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            row[y] - best_other
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MarginStats {
    pub median: f64,
    pub std: f64,
}

/// Median and standard deviation of the per-sample logit margins.
pub fn logit_margin_stats(model: &MlpClassifier, ds: &LabeledDataset) -> Result<MarginStats> {
    let margins = per_sample_margins(model, ds)?;
    Ok(MarginStats {
        median: median(&margins),
        std: std_dev(&margins),
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (values.len() - 1) as f64;
    var.sqrt()
}

/// Population variance of one trace; the per-example diversity statistic.
pub fn trace_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

/// Direction of the similarity KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(f(x_adv) || f(x_nat)) — matches the "KL(PGD with NL, Natural)" view.
    AdvFromNatural,
    /// KL(f(x_nat) || f(x_adv)).
    NaturalFromAdv,
}

/// One sample of the NL-vs-CL similarity study.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityRow {
    pub index: usize,
    /// KL between predictions on the NL-generated example and natural data.
    pub kl_nl: f64,
    /// KL between predictions on the CL-generated example and natural data.
    pub kl_cl: f64,
    /// Cross-entropy of natural data w.r.t. the true label.
    pub ce_natural: f64,
    /// Cross-entropy of the CL-generated example w.r.t. the true label.
    pub ce_cl: f64,
    /// Cross-entropy of the NL-generated example w.r.t. the true label.
    pub ce_nl: f64,
}

fn kl_rows(p_logits: &[f64], q_logits: &[f64], width: usize) -> Vec<f64> {
    let p = softmax_rows(p_logits, width);
    let log_p = log_softmax_rows(p_logits, width);
    let log_q = log_softmax_rows(q_logits, width);
    p.chunks_exact(width)
        .zip(log_p.chunks_exact(width).zip(log_q.chunks_exact(width)))
        .map(|(pr, (lpr, lqr))| {
            pr.iter()
                .zip(lpr.iter().zip(lqr))
                .map(|(&pi, (&lpi, &lqi))| pi * (lpi - lqi))
                .sum()
        })
        .collect()
}

fn ce_rows(logits: &[f64], labels: &[usize], width: usize) -> Vec<f64> {
    let logp = log_softmax_rows(logits, width);
    logp.chunks_exact(width)
        .zip(labels)
        .map(|(row, &y)| -row[y])
        .collect()
}

/// Compare adversarial examples generated with the clean label (CL) against
/// ones generated with a symmetric-flipped label (NL), per sample.
///
/// Both attacks share the same random-start draws so the comparison is
/// paired; the flipped label for each sample is a seeded uniform draw over
/// the other classes.
pub fn nl_similarity_report(
    model: &MlpClassifier,
    ds: &LabeledDataset,
    attack: &AttackConfig,
    direction: KlDirection,
    seed: u64,
) -> Result<Vec<SimilarityRow>> {
    let c = model.class_count();
    if c < 2 {
        return Err(Error::invalid(
            "similarity report needs at least 2 classes".to_string(),
        ));
    }
    if ds.is_empty() {
        return Err(Error::invalid("similarity report over an empty dataset".to_string()));
    }

    let mut flipped = Vec::with_capacity(ds.len());
    for (i, &y) in ds.labels().iter().enumerate() {
        let mut stream = rng::stream(&[seed, 0x6e6c73, i as u64]);
        let draw = rng::below(&mut stream, (c - 1) as u64) as usize;
        flipped.push(if draw >= y { draw + 1 } else { draw });
    }

    let attack_seed = rng::mix(&[seed, 0x73696d]);
    let x_cl = pgd(model, ds.features(), ds.len(), ds.labels(), attack, attack_seed)?;
    let x_nl = pgd(model, ds.features(), ds.len(), &flipped, attack, attack_seed)?;

    let logits_nat = model.predict_logits(ds.features(), ds.len())?;
    let logits_cl = model.predict_logits(&x_cl, ds.len())?;
    let logits_nl = model.predict_logits(&x_nl, ds.len())?;

    let (kl_cl, kl_nl) = match direction {
        KlDirection::AdvFromNatural => (
            kl_rows(&logits_cl, &logits_nat, c),
            kl_rows(&logits_nl, &logits_nat, c),
        ),
        KlDirection::NaturalFromAdv => (
            kl_rows(&logits_nat, &logits_cl, c),
            kl_rows(&logits_nat, &logits_nl, c),
        ),
    };
    let ce_natural = ce_rows(&logits_nat, ds.labels(), c);
    let ce_cl = ce_rows(&logits_cl, ds.labels(), c);
    let ce_nl = ce_rows(&logits_nl, ds.labels(), c);

    Ok((0..ds.len())
        .map(|i| SimilarityRow {
            index: i,
            kl_nl: kl_nl[i],
            kl_cl: kl_cl[i],
            ce_natural: ce_natural[i],
            ce_cl: ce_cl[i],
            ce_nl: ce_nl[i],
        })
        .collect())
}

/// Per-epoch outer-loss values and weight-gradient norms for one tracked
/// training example.
#[derive(Debug, Clone, Serialize)]
pub struct DiversityTrace {
    pub index: usize,
    pub outer_losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

impl DiversityTrace {
    pub fn new(index: usize) -> Self {
        DiversityTrace {
            index,
            outer_losses: Vec::new(),
            grad_norms: Vec::new(),
        }
    }

    pub fn epochs_observed(&self) -> usize {
        self.outer_losses.len()
    }
}

/// Outer loss `CE(f(x_adv), y)` and the L2 norm of its weight gradient for
/// one example under the current parameters; the per-epoch diversity update.
pub fn outer_loss_and_grad_norm(
    model: &MlpClassifier,
    x_adv: &[f64],
    label: usize,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let xv = tape.constant(&[1, model.input_dim()], x_adv.to_vec())?;
    let logits = model.forward(&mut tape, &vars, xv)?;
    let ce = loss::cross_entropy(&mut tape, logits, &[label])?;
    let value = tape.values(ce)[0];
    tape.backward(ce)?;
    let mut sq = 0.0;
    for var in vars.weights.iter().chain(&vars.biases) {
        if let Some(g) = tape.grad(*var) {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok((value, sq.sqrt()))
}

/// Fraction of predictions that match the labels.
pub fn accuracy_of_predictions(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count() as f64
        / predictions.len() as f64
}

pub fn write_similarity_csv(rows: &[SimilarityRow], path: &Path) -> Result<()> {
    let mut out = String::from("index,kl_nl,kl_cl,ce_natural,ce_cl,ce_nl\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.index, r.kl_nl, r.kl_cl, r.ce_natural, r.ce_cl, r.ce_nl
        ));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn write_margins_csv(margins: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("index,margin\n");
    for (i, m) in margins.iter().enumerate() {
        out.push_str(&format!("{i},{m}\n"));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Long-format diversity export: one row per (example, epoch).
pub fn write_diversity_csv(traces: &[DiversityTrace], path: &Path) -> Result<()> {
    let mut out = String::from("index,epoch,outer_loss,grad_norm\n");
    for t in traces {
        for e in 0..t.epochs_observed() {
            out.push_str(&format!(
                "{},{e},{},{}\n",
                t.index, t.outer_losses[e], t.grad_norms[e]
            ));
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
