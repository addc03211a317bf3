//! End-to-end checks of the training loop: determinism, injection-site
//! provenance contracts, scheduler coupling, and checkpoint consistency.

mod common;

use std::fs;

use common::{fast_config, ternary_run_data};
use noilin_core::metrics::accuracy;
use noilin_core::model::load_checkpoint;
use noilin_core::noilin::NoilinState;
use noilin_core::train::{
    eval_attacks, eval_seed, run, run_with_observer, InjectionSite, Method, NoilinParams,
};

#[test]
fn rerun_with_same_config_is_byte_identical() {
    let data = ternary_run_data(60, 0.5, 3);
    let cfg = fast_config(2, 11);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run(&cfg, &data, dir_a.path()).unwrap();
    run(&cfg, &data, dir_b.path()).unwrap();
    let csv_a = fs::read(dir_a.path().join("epochs.csv")).unwrap();
    let csv_b = fs::read(dir_b.path().join("epochs.csv")).unwrap();
    assert!(!csv_a.is_empty());
    assert_eq!(csv_a, csv_b);
    let last_a = fs::read(dir_a.path().join("last.ckpt")).unwrap();
    let last_b = fs::read(dir_b.path().join("last.ckpt")).unwrap();
    assert_eq!(last_a, last_b);
}

#[test]
fn single_epoch_best_equals_last() {
    let data = ternary_run_data(40, 0.5, 5);
    let cfg = fast_config(1, 2);
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&cfg, &data, dir.path()).unwrap();
    assert_eq!(outcome.best_epoch, 0);
    let (best, _) = load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    let (last, _) = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    for (b, l) in best.params().iter().zip(last.params().iter()) {
        assert_eq!(b.2, l.2);
    }
}

#[test]
fn injection_site_none_ignores_the_noise_rate() {
    let data = ternary_run_data(40, 0.5, 7);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut cfg_a = fast_config(2, 9);
    cfg_a.noise.rate = 0.1;
    let mut cfg_b = fast_config(2, 9);
    cfg_b.noise.rate = 0.7;
    run(&cfg_a, &data, dir_a.path()).unwrap();
    run(&cfg_b, &data, dir_b.path()).unwrap();
    let rows_a: Vec<String> = fs::read_to_string(dir_a.path().join("epochs.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split_once(',').unwrap().1.to_string()) // drop the epoch col, keep the rest
        .collect();
    let rows_b: Vec<String> = fs::read_to_string(dir_b.path().join("epochs.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split_once(',').unwrap().1.to_string())
        .collect();
    assert_eq!(rows_a, rows_b);
}

fn round_count(rate: f64, n: usize) -> usize {
    (rate * n as f64).round() as usize
}

#[test]
fn provenance_contracts_per_site() {
    let data = ternary_run_data(40, 0.5, 13);
    for site in [
        InjectionSite::None,
        InjectionSite::Inner,
        InjectionSite::Outer,
        InjectionSite::Both,
        InjectionSite::Mismatched,
    ] {
        let mut cfg = fast_config(2, 21);
        cfg.injection_site = site;
        cfg.noise.rate = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let mut saw_batches = 0usize;
        let mut saw_distinct_flip_sets = false;
        {
            let mut observer = |p: &noilin_core::train::BatchProvenance<'_>| {
                saw_batches += 1;
                let b = p.indices.len();
                let attack_flips = p.attack_flipped.iter().filter(|&&f| f).count();
                let loss_flips = p.loss_flipped.iter().filter(|&&f| f).count();
                for i in 0..b {
                    assert_eq!(p.attack_flipped[i], p.attack_labels[i] != p.clean_labels[i]);
                    assert_eq!(p.loss_flipped[i], p.loss_labels[i] != p.clean_labels[i]);
                }
                match site {
                    InjectionSite::None => {
                        assert_eq!(attack_flips, 0);
                        assert_eq!(loss_flips, 0);
                    }
                    InjectionSite::Inner => {
                        // Loss labels stay intact; the attack sees flips.
                        assert_eq!(p.loss_labels, p.clean_labels);
                        assert_eq!(attack_flips, round_count(0.25, b));
                    }
                    InjectionSite::Outer => {
                        assert_eq!(p.attack_labels, p.clean_labels);
                        assert_eq!(loss_flips, round_count(0.25, b));
                    }
                    InjectionSite::Both => {
                        assert_eq!(p.attack_labels, p.loss_labels);
                        assert_eq!(p.attack_flipped, p.loss_flipped);
                        assert_eq!(attack_flips, round_count(0.25, b));
                    }
                    InjectionSite::Mismatched => {
                        assert_eq!(attack_flips, round_count(0.25, b));
                        assert_eq!(loss_flips, round_count(0.25, b));
                        if p.attack_flipped != p.loss_flipped {
                            saw_distinct_flip_sets = true;
                        }
                    }
                    InjectionSite::Noilin => unreachable!(),
                }
            };
            run_with_observer(&cfg, &data, dir.path(), Some(&mut observer)).unwrap();
        }
        assert!(saw_batches > 0);
        if site == InjectionSite::Mismatched {
            assert!(saw_distinct_flip_sets, "independent flip sets never diverged");
        }
    }
}

#[test]
fn noilin_site_flips_whole_epoch_and_matches_scheduler_replay() {
    let data = ternary_run_data(50, 0.6, 17);
    let mut cfg = fast_config(8, 23);
    cfg.injection_site = InjectionSite::Noilin;
    cfg.noilin = Some(NoilinParams {
        eta_min: 0.1,
        eta_max: 0.5,
        tau: 2,
        gamma: 0.2,
    });
    let dir = tempfile::tempdir().unwrap();

    // Per-epoch flip totals must be consistent with one dataset-level flip.
    let mut per_epoch_flips = vec![0usize; cfg.epochs];
    let mut per_epoch_rows = vec![0usize; cfg.epochs];
    let outcome = {
        let mut observer = |p: &noilin_core::train::BatchProvenance<'_>| {
            assert_eq!(p.attack_labels, p.loss_labels);
            per_epoch_flips[p.epoch] += p.attack_flipped.iter().filter(|&&f| f).count();
            per_epoch_rows[p.epoch] += p.indices.len();
        };
        run_with_observer(&cfg, &data, dir.path(), Some(&mut observer)).unwrap()
    };

    let n = data.train.len();
    for (epoch, record) in outcome.records.iter().enumerate() {
        assert_eq!(per_epoch_rows[epoch], n);
        assert_eq!(per_epoch_flips[epoch], round_count(record.eta, n));
    }

    // Replaying the logged robust validation accuracies through a fresh
    // scheduler must reproduce the eta and boosted columns exactly.
    let mut replay = NoilinState::init(0.1, 0.5, 2, 0.2).unwrap();
    for record in &outcome.records {
        assert_eq!(record.eta, replay.current_eta(), "epoch {}", record.epoch);
        let boosted = replay.observe(record.rob_valid_acc).unwrap();
        assert_eq!(record.boosted, boosted, "epoch {}", record.epoch);
    }
    // Eta never decreases and respects the cap.
    for pair in outcome.records.windows(2) {
        assert!(pair[1].eta >= pair[0].eta);
        assert!(pair[1].eta <= 0.5);
    }
}

#[test]
fn eval_of_last_checkpoint_reproduces_final_csv_row() {
    let data = ternary_run_data(40, 0.5, 19);
    let cfg = fast_config(2, 31);
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&cfg, &data, dir.path()).unwrap();
    let last_row = outcome.records.last().unwrap();

    let (model, header) = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(header.config_hash, noilin_core::train::config_hash(&cfg));
    let evals = eval_attacks(&cfg.attack);

    let nat = accuracy(&model, &data.test, None, 0).unwrap();
    let rob_valid = accuracy(&model, &data.valid, Some(&evals.pgd10), eval_seed(cfg.seed, 1)).unwrap();
    let rob_pgd40 = accuracy(&model, &data.test, Some(&evals.pgd40), eval_seed(cfg.seed, 2)).unwrap();
    let rob_cw30 = accuracy(&model, &data.test, Some(&evals.cw30), eval_seed(cfg.seed, 3)).unwrap();

    assert_eq!(nat, last_row.nat_test_acc);
    assert_eq!(rob_valid, last_row.rob_valid_acc);
    assert_eq!(rob_pgd40, last_row.rob_test_pgd40);
    assert_eq!(rob_cw30, last_row.rob_test_cw30);
}

#[test]
fn trades_runs_and_uses_the_kl_inner_objective() {
    let data = ternary_run_data(40, 0.5, 23);
    let mut cfg = fast_config(2, 37);
    cfg.method = Method::Trades;
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&cfg, &data, dir.path()).unwrap();
    assert_eq!(outcome.records.len(), 2);
    for r in &outcome.records {
        assert!(r.train_loss.is_finite());
        for acc in [
            r.nat_train_acc,
            r.nat_test_acc,
            r.rob_valid_acc,
            r.rob_test_pgd40,
            r.rob_test_cw30,
        ] {
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}

#[test]
fn tracked_examples_produce_full_length_traces() {
    let data = ternary_run_data(30, 0.5, 29);
    let mut cfg = fast_config(3, 41);
    cfg.injection_site = InjectionSite::Outer;
    cfg.noise.rate = 0.3;
    cfg.tracked_examples = vec![0, 5, 11];
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&cfg, &data, dir.path()).unwrap();
    assert_eq!(outcome.traces.len(), 3);
    for trace in &outcome.traces {
        assert_eq!(trace.epochs_observed(), cfg.epochs);
        assert!(trace.outer_losses.iter().all(|v| v.is_finite()));
        assert!(trace.grad_norms.iter().all(|v| v.is_finite()));
    }
    assert!(dir.path().join("diversity.csv").exists());
}

#[test]
fn memorizer_reaches_full_training_accuracy() {
    // Tight clusters and a near-zero attack radius reduce SAT to natural
    // training; the model memorizes the train split.
    let data = ternary_run_data(40, 0.1, 47);
    let mut cfg = fast_config(20, 3);
    cfg.attack.epsilon = 0.01;
    cfg.attack.alpha = 0.005;
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&cfg, &data, dir.path()).unwrap();
    let acc = accuracy(&outcome.last, &data.train, None, 0).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn more_attack_steps_never_help_robust_accuracy_much() {
    // Statistical invariant: on trained models, K=20 robust accuracy stays
    // within one point of K=5 from below, averaged over seeds.
    let mut acc5_total = 0.0;
    let mut acc20_total = 0.0;
    for seed in [61u64, 62, 63] {
        let data = ternary_run_data(50, 0.8, seed);
        let cfg = fast_config(8, seed);
        let dir = tempfile::tempdir().unwrap();
        let outcome = run(&cfg, &data, dir.path()).unwrap();
        let base = noilin_core::attack::AttackConfig::eval_pgd(cfg.attack.epsilon, 5, None);
        let strong = noilin_core::attack::AttackConfig::eval_pgd(cfg.attack.epsilon, 20, None);
        acc5_total += accuracy(&outcome.last, &data.test, Some(&base), seed).unwrap();
        acc20_total += accuracy(&outcome.last, &data.test, Some(&strong), seed).unwrap();
    }
    assert!(
        acc20_total / 3.0 <= acc5_total / 3.0 + 0.01,
        "PGD-20 {:.4} should not beat PGD-5 {:.4} by more than a point",
        acc20_total / 3.0,
        acc5_total / 3.0
    );
}

#[test]
fn outer_noise_shrinks_logit_margins() {
    // Matched seeds, same data: training with outer-site label noise leaves
    // a model with smaller median logit margins in the majority of seeds.
    let mut wins = 0;
    for seed in [71u64, 72, 73] {
        let data = ternary_run_data(60, 0.8, seed);
        let sat = fast_config(12, seed);
        let mut outer = fast_config(12, seed);
        outer.injection_site = InjectionSite::Outer;
        outer.noise.rate = 0.25;
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let out_sat = run(&sat, &data, dir_a.path()).unwrap();
        let out_outer = run(&outer, &data, dir_b.path()).unwrap();
        let m_sat = noilin_core::metrics::logit_margin_stats(&out_sat.last, &data.test).unwrap();
        let m_outer =
            noilin_core::metrics::logit_margin_stats(&out_outer.last, &data.test).unwrap();
        if m_outer.median < m_sat.median {
            wins += 1;
        }
    }
    assert!(wins >= 2, "outer-NL shrank margins in only {wins}/3 seeds");
}

#[test]
fn label_smoothing_variants_train() {
    use noilin_core::train::{SmoothingConfig, SmoothingMode};
    let data = ternary_run_data(40, 0.6, 53);
    for mode in [SmoothingMode::Outer, SmoothingMode::Both, SmoothingMode::Adaptive] {
        let mut cfg = fast_config(2, 59);
        cfg.label_smoothing = Some(SmoothingConfig { mode, rho: 0.1 });
        let dir = tempfile::tempdir().unwrap();
        let outcome = run(&cfg, &data, dir.path()).unwrap();
        assert!(outcome.records.iter().all(|r| r.train_loss.is_finite()));
    }
}

#[test]
fn divergent_training_aborts_with_numeric_error() {
    let data = ternary_run_data(30, 0.5, 31);
    let mut cfg = fast_config(6, 43);
    cfg.base_lr = 1e120;
    cfg.weight_decay = 0.0;
    let dir = tempfile::tempdir().unwrap();
    match run(&cfg, &data, dir.path()) {
        Err(noilin_core::Error::NonFinite { .. }) => {}
        Err(other) => panic!("expected a NonFinite abort, got {other:?}"),
        Ok(_) => panic!("expected a NonFinite abort, got a finished run"),
    }
}
