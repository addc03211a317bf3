//! Subcommand implementations: `gen-data`, `train`, `eval`, `attack`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use noilin_core::attack::{pgd, AttackConfig, Objective};
use noilin_core::data::{load_csv, load_idx_pair, make_ternary_gaussian, write_csv, LabeledDataset, DEFAULT_TERNARY_CENTERS};
use noilin_core::error::Error as CoreError;
use noilin_core::metrics::{accuracy, logit_margin_stats};
use noilin_core::model::{load_checkpoint, MlpClassifier};
use noilin_core::rng;
use noilin_core::train::{config_hash, eval_seed, run, RunOutcome};

use crate::config::ExperimentConfig;
use crate::{AttackArgs, CliError, EvalArgs, GenDataArgs};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(CoreError::io(path, e))
}

/// `gen-data`: write a synthetic dataset as CSV plus a JSON sidecar
/// recording the generator parameters, rerunnable bit-identically.
pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if !args.ternary {
        return Err(CliError::Config(
            "only --ternary generation is available".to_string(),
        ));
    }
    if args.n == 0 || !args.n.is_multiple_of(3) {
        return Err(CliError::Config(format!(
            "--n must be a positive multiple of 3, got {}",
            args.n
        )));
    }
    let n_per_class = args.n / 3;
    let ds = make_ternary_gaussian(n_per_class, &DEFAULT_TERNARY_CENTERS, args.sigma, args.seed)?;
    write_csv(&ds, &args.out)?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        kind: &'a str,
        n: usize,
        n_per_class: usize,
        sigma: f64,
        seed: u64,
        centers: [[f64; 2]; 3],
        class_count: usize,
    }
    let sidecar_path = sidecar_path(&args.out);
    let sidecar = serde_json::to_string_pretty(&Sidecar {
        kind: "ternary",
        n: args.n,
        n_per_class,
        sigma: args.sigma,
        seed: args.seed,
        centers: DEFAULT_TERNARY_CENTERS,
        class_count: 3,
    })
    .expect("sidecar serializes");
    fs::write(&sidecar_path, sidecar).map_err(|e| io_err(&sidecar_path, e))?;
    println!(
        "wrote {} ({} samples) and {}",
        args.out.display(),
        ds.len(),
        sidecar_path.display()
    );
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

#[derive(Serialize)]
struct RunMetadata {
    config_hash: String,
    config_sha256: String,
    run_seed: u64,
    split_seed: u64,
    best_epoch: usize,
    decisions: Decisions,
}

#[derive(Serialize)]
struct Decisions {
    attack_random_start: bool,
    clamp_domain: Option<(f64, f64)>,
    weight_decay_applies_to_biases: bool,
    symmetric_flip_excludes_original_class: bool,
    pair_flip_adjacency: &'static str,
    validation_metric: &'static str,
    best_checkpoint_rule: &'static str,
}

/// `train`: run a declarative experiment into a self-describing directory.
pub fn train(config_path: &Path, out_override: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::from_path(config_path)?;
    if let Some(out) = out_override {
        cfg.output_dir = out.to_path_buf();
    }
    let data = cfg.load_data()?;
    let outdir = cfg.output_dir.clone();
    let outcome = run(&cfg.train, &data, &outdir)?;

    let config_bytes =
        fs::read(config_path).map_err(|e| io_err(config_path, e))?;
    let copy_path = outdir.join("config.json");
    fs::write(&copy_path, &config_bytes).map_err(|e| io_err(&copy_path, e))?;

    let metadata = RunMetadata {
        config_hash: config_hash(&cfg.train),
        config_sha256: hex::encode(Sha256::digest(&config_bytes)),
        run_seed: cfg.train.seed,
        split_seed: rng::mix(&[cfg.train.seed, 0x73706c69]),
        best_epoch: outcome.best_epoch,
        decisions: Decisions {
            attack_random_start: cfg.train.attack.random_start,
            clamp_domain: cfg.train.attack.clamp_domain,
            weight_decay_applies_to_biases: true,
            symmetric_flip_excludes_original_class: true,
            pair_flip_adjacency: "(c+1) mod C",
            validation_metric: "pgd10_robust_accuracy",
            best_checkpoint_rule: "argmax robust validation accuracy",
        },
    };
    let metadata_path = outdir.join("metadata.json");
    fs::write(
        &metadata_path,
        serde_json::to_string_pretty(&metadata).expect("metadata serializes"),
    )
    .map_err(|e| io_err(&metadata_path, e))?;

    report_outcome(&outdir, &outcome);
    Ok(())
}

fn report_outcome(outdir: &Path, outcome: &RunOutcome) {
    let last = outcome.records.last().expect("at least one epoch");
    println!("run directory: {}", outdir.display());
    println!(
        "best epoch {} (robust valid {:.4}); last epoch {}",
        outcome.best_epoch,
        outcome
            .records
            .get(outcome.best_epoch)
            .map(|r| r.rob_valid_acc)
            .unwrap_or(f64::NAN),
        last.epoch
    );
    println!(
        "final: nat_test {:.4} rob_pgd40 {:.4} rob_cw30 {:.4} eta {:.4}",
        last.nat_test_acc, last.rob_test_pgd40, last.rob_test_cw30, last.eta
    );
}

/// Parse an evaluation attack name: `pgd<steps>` or `cw<steps>`.
pub fn parse_attack_name(name: &str) -> Result<(String, usize, bool), CliError> {
    let lower = name.to_ascii_lowercase();
    let (is_cw, steps_str) = if let Some(rest) = lower.strip_prefix("pgd") {
        (false, rest)
    } else if let Some(rest) = lower.strip_prefix("cw") {
        (true, rest)
    } else {
        return Err(CliError::Config(format!(
            "unknown attack `{name}`: valid names are pgd<steps> (e.g. pgd10, pgd40) and cw<steps> (e.g. cw30)"
        )));
    };
    let steps: usize = steps_str.parse().map_err(|_| {
        CliError::Config(format!(
            "unknown attack `{name}`: valid names are pgd<steps> (e.g. pgd10, pgd40) and cw<steps> (e.g. cw30)"
        ))
    })?;
    Ok((lower, steps, is_cw))
}

/// Seed slot matching the training-time evaluation battery, so `eval`
/// reproduces logged numbers for the standard attacks.
fn seed_slot(name: &str) -> u64 {
    match name {
        "pgd10" => 1,
        "pgd40" => 2,
        "cw30" => 3,
        other => {
            let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
            for b in other.as_bytes() {
                hash ^= *b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
            hash
        }
    }
}

fn load_eval_dataset(
    data: &Option<PathBuf>,
    idx_images: &Option<PathBuf>,
    idx_labels: &Option<PathBuf>,
) -> Result<LabeledDataset, CliError> {
    match (data, idx_images, idx_labels) {
        (Some(csv), None, None) => Ok(load_csv(csv)?),
        (None, Some(images), Some(labels)) => Ok(load_idx_pair(images, labels)?),
        _ => Err(CliError::Config(
            "provide either --data <csv> or both --idx-images and --idx-labels".to_string(),
        )),
    }
}

fn check_geometry(model: &MlpClassifier, ds: &LabeledDataset) -> Result<(), CliError> {
    if model.input_dim() != ds.dim() || ds.class_count() > model.class_count() {
        return Err(CliError::Core(CoreError::ShapeMismatch {
            op: "checkpoint vs dataset",
            lhs: vec![model.input_dim(), model.class_count()],
            rhs: vec![ds.dim(), ds.class_count()],
        }));
    }
    Ok(())
}

/// Run seed for evaluation: explicit flag, else the run metadata sitting
/// next to the checkpoint, else 0.
fn resolve_eval_seed(args_seed: Option<u64>, checkpoint: &Path) -> u64 {
    if let Some(s) = args_seed {
        return s;
    }
    let metadata = checkpoint.parent().map(|d| d.join("metadata.json"));
    if let Some(path) = metadata {
        if let Ok(text) = fs::read_to_string(path) {
            if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
                if let Some(seed) = value.get("run_seed").and_then(|v| v.as_u64()) {
                    return seed;
                }
            }
        }
    }
    0
}

/// `eval`: natural accuracy, robust accuracy per requested attack, and
/// logit-margin statistics for a checkpoint on a dataset.
pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let (model, _header) = load_checkpoint(&args.checkpoint)?;
    let ds = load_eval_dataset(&args.data, &args.idx_images, &args.idx_labels)?;
    check_geometry(&model, &ds)?;
    let run_seed = resolve_eval_seed(args.seed, &args.checkpoint);
    let domain = ds.domain_bounds();

    let natural = accuracy(&model, &ds, None, 0)?;
    let margins = logit_margin_stats(&model, &ds)?;
    let mut lines = vec![format!("natural,{natural}")];
    println!("natural accuracy: {natural:.4}");

    for name in &args.attack {
        let (canonical, steps, is_cw) = parse_attack_name(name)?;
        let cfg = if is_cw {
            AttackConfig::eval_cw(args.epsilon, steps, args.kappa, domain)
        } else {
            AttackConfig::eval_pgd(args.epsilon, steps, domain)
        };
        let robust = accuracy(&model, &ds, Some(&cfg), eval_seed(run_seed, seed_slot(&canonical)))?;
        println!("robust accuracy under {canonical}: {robust:.4}");
        lines.push(format!("{canonical},{robust}"));
    }
    println!(
        "logit margin: median {:.4}, std {:.4}",
        margins.median, margins.std
    );

    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let acc_path = out.join("eval.csv");
        let mut text = String::from("attack,accuracy\n");
        for line in &lines {
            text.push_str(line);
            text.push('\n');
        }
        fs::write(&acc_path, text).map_err(|e| io_err(&acc_path, e))?;
        let margin_path = out.join("margins.csv");
        let text = format!("median,std\n{},{}\n", margins.median, margins.std);
        fs::write(&margin_path, text).map_err(|e| io_err(&margin_path, e))?;
        println!("reports written to {}", out.display());
    }
    Ok(())
}

/// `attack`: one-shot adversarial-example dump. The output CSV has the
/// dataset schema (features plus true label), so it loads back as a
/// dataset; a sidecar JSON records the attack parameters.
pub fn attack(args: &AttackArgs) -> Result<(), CliError> {
    let (model, _header) = load_checkpoint(&args.checkpoint)?;
    let ds = load_eval_dataset(&args.data, &args.idx_images, &args.idx_labels)?;
    check_geometry(&model, &ds)?;

    let objective = match args.objective.as_str() {
        "ce" => Objective::CrossEntropy,
        "cw" => Objective::Cw { kappa: args.kappa },
        other => {
            return Err(CliError::Config(format!(
                "unknown objective `{other}`: valid objectives are ce and cw"
            )))
        }
    };
    let cfg = AttackConfig {
        epsilon: args.epsilon,
        alpha: args
            .alpha
            .unwrap_or(2.5 * args.epsilon / args.steps.max(1) as f64),
        steps: args.steps,
        objective,
        random_start: !args.no_random_start,
        clamp_domain: ds.domain_bounds(),
    };
    let adv = pgd(&model, ds.features(), ds.len(), ds.labels(), &cfg, args.seed)?;
    let adv_ds = LabeledDataset::new(
        adv,
        ds.labels().to_vec(),
        ds.dim(),
        ds.class_count(),
        ds.domain_bounds(),
    )?;
    write_csv(&adv_ds, &args.out)?;

    let predictions = model.predict(adv_ds.features(), adv_ds.len())?;
    let robust = predictions
        .iter()
        .zip(ds.labels())
        .filter(|(p, y)| p == y)
        .count() as f64
        / ds.len() as f64;

    #[derive(Serialize)]
    struct AttackSidecar<'a> {
        checkpoint: &'a Path,
        epsilon: f64,
        alpha: f64,
        steps: usize,
        objective: &'a str,
        kappa: f64,
        random_start: bool,
        seed: u64,
        robust_accuracy: f64,
    }
    let sidecar = serde_json::to_string_pretty(&AttackSidecar {
        checkpoint: &args.checkpoint,
        epsilon: cfg.epsilon,
        alpha: cfg.alpha,
        steps: cfg.steps,
        objective: &args.objective,
        kappa: args.kappa,
        random_start: cfg.random_start,
        seed: args.seed,
        robust_accuracy: robust,
    })
    .expect("sidecar serializes");
    let sidecar_file = sidecar_path(&args.out);
    fs::write(&sidecar_file, sidecar).map_err(|e| io_err(&sidecar_file, e))?;

    println!(
        "wrote {} adversarial samples to {} (robust accuracy {robust:.4})",
        adv_ds.len(),
        args.out.display()
    );
    Ok(())
}
