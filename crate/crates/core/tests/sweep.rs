mod common;

use occlm::corpus::TokenDataset;
use occlm::sweep::{self, leaderboard, sample_trial, LogRange, SweepOptions, SweepReport, SweepSpec, TrialRecord};
use occlm::tokenizer::Vocabulary;
use occlm::train::{NullSink, StopReason, TrainConfig};
use occlm::Error;

struct Data {
    vocab: Vocabulary,
    train: TokenDataset,
    valid: TokenDataset,
}

fn data() -> Data {
    let (vocab, train, valid) = common::small_data(120, 8);
    Data { vocab, train, valid }
}

fn spec(vocab_size: usize, trials: usize) -> SweepSpec {
    SweepSpec {
        trial_count: trials,
        max_epochs: 2,
        seed: 9,
        lr: LogRange { min: 1e-3, max: 1e-2 },
        n_layers: vec![1, 2],
        n_heads: vec![1, 2],
        dropout: vec![0.0, 0.1],
        occlusion_prob: vec![0.0, 0.3],
        base_model: common::tiny_config(vocab_size),
        base_train: TrainConfig {
            batch_size: 8,
            patience: 10,
            ..TrainConfig::default()
        },
    }
}

fn run(d: &Data, spec: &SweepSpec, opts: &SweepOptions) -> occlm::Result<sweep::SweepOutcome> {
    sweep::run_sweep(spec, &d.train, &d.valid, d.vocab.specials(), opts, &mut NullSink)
}

#[test]
fn sweep_writes_sorted_results_and_reports() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let s = spec(d.vocab.len(), 4);
    let opts = SweepOptions {
        out_dir: Some(dir.path().to_path_buf()),
        deterministic: true,
        ..SweepOptions::new("s1")
    };
    let out = run(&d, &s, &opts).unwrap();
    assert_eq!(out.leaderboard.len(), 4);
    let losses: Vec<f64> = out.leaderboard.iter().map(|r| r.best_valid_loss.unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[0] <= w[1]), "{losses:?}");
    assert_eq!(out.best, out.leaderboard[0]);
    let best_ck = out.best_checkpoint.expect("winning checkpoint");
    assert_eq!(best_ck.meta.valid_loss, out.best.best_valid_loss);

    let run_dir = dir.path().join("s1");
    for k in 0..4 {
        for f in ["record.json", "config.toml", "metrics.jsonl", "checkpoint.ckpt"] {
            assert!(run_dir.join(format!("trial_{k}")).join(f).exists(), "trial_{k}/{f}");
        }
    }
    let on_disk: Vec<TrialRecord> =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("leaderboard.json")).unwrap()).unwrap();
    assert_eq!(on_disk, out.leaderboard);

    let report = sweep::sweep_report(&out.leaderboard);
    assert_eq!(report.columns, ["dropout", "lr", "n_heads", "n_layers", "occlusion_prob"]);
    let path = run_dir.join("report.json");
    report.save(&path).unwrap();
    assert_eq!(SweepReport::load(&path).unwrap(), report);
    let table = report.table_tsv();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("trial_id\tdropout\tlr\tn_heads\tn_layers\tocclusion_prob\tbest_valid_loss"));
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 9));
    let curves = report.curves_tsv();
    assert_eq!(curves.lines().count(), 1 + 4 * 2);
}

#[test]
fn single_trial_report_has_one_row() {
    let d = data();
    let out = run(&d, &spec(d.vocab.len(), 1), &SweepOptions::new("one")).unwrap();
    let report = sweep::sweep_report(&out.leaderboard);
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.table_tsv().lines().count(), 2);
}

#[test]
fn trial_parameters_depend_only_on_seed_and_index() {
    let s = spec(300, 8);
    let longer = SweepSpec {
        trial_count: 30,
        ..s.clone()
    };
    for k in 0..8 {
        assert_eq!(sample_trial(&s, k).unwrap(), sample_trial(&longer, k).unwrap());
    }
    let other_seed = SweepSpec { seed: 10, ..s.clone() };
    assert!((0..8).any(|k| sample_trial(&s, k).unwrap() != sample_trial(&other_seed, k).unwrap()));
}

#[test]
fn learning_rates_are_log_uniform() {
    let s = SweepSpec {
        trial_count: 4000,
        lr: LogRange { min: 1e-5, max: 1e-3 },
        ..spec(300, 1)
    };
    let low = (0..s.trial_count)
        .map(|k| sample_trial(&s, k).unwrap().lr)
        .inspect(|lr| assert!((1e-5..=1e-3).contains(lr)))
        .filter(|&lr| lr < 1e-4)
        .count();
    // each decade holds half the mass; 3 sigma of a binomial(4000, 0.5) is about 95
    let expected = s.trial_count / 2;
    assert!(low.abs_diff(expected) < 95, "{low} of {} below 1e-4", s.trial_count);
}

#[test]
fn diverged_trials_are_recorded_not_fatal() {
    let d = data();
    // a seed whose trials mix tame and absurd learning rates
    let base = SweepSpec {
        lr: LogRange { min: 1e-3, max: 1e7 },
        ..spec(d.vocab.len(), 4)
    };
    let s = (0..200)
        .map(|seed| SweepSpec { seed, ..base.clone() })
        .find(|s| {
            let lrs: Vec<f64> = (0..4).map(|k| sample_trial(s, k).unwrap().lr).collect();
            lrs.iter().any(|&l| l < 1e-2) && lrs.iter().any(|&l| l > 1e5)
        })
        .expect("some seed mixes learning rates");
    let out = run(&d, &s, &SweepOptions::new("mixed")).unwrap();
    assert_eq!(out.leaderboard.len(), 4);
    for r in &out.leaderboard {
        if r.params.lr > 1e5 {
            assert_eq!(r.stop_reason, StopReason::Diverged, "trial {} lr {}", r.trial_id, r.params.lr);
            assert!(r.note.as_deref().unwrap_or("").contains("diverged"));
        }
    }
    assert!(out.best.completed());

    let all_bad = SweepSpec {
        lr: LogRange { min: 1e6, max: 1e7 },
        trial_count: 2,
        ..s
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = SweepOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..SweepOptions::new("bad")
    };
    match run(&d, &all_bad, &opts) {
        Err(Error::Sweep(msg)) => assert!(msg.contains("none of 2"), "{msg}"),
        other => panic!("expected a sweep error, got {other:?}"),
    }
    let board: Vec<TrialRecord> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bad/leaderboard.json")).unwrap()).unwrap();
    assert!(board.iter().all(|r| r.stop_reason == StopReason::Diverged));
}

#[test]
fn parallel_and_sequential_sweeps_agree() {
    let d = data();
    let s = spec(d.vocab.len(), 3);
    let seq = run(
        &d,
        &s,
        &SweepOptions {
            deterministic: true,
            ..SweepOptions::new("p")
        },
    )
    .unwrap();
    let par = run(
        &d,
        &s,
        &SweepOptions {
            deterministic: true,
            parallel: 3,
            ..SweepOptions::new("p")
        },
    )
    .unwrap();
    assert_eq!(seq.leaderboard, par.leaderboard);
    assert_eq!(seq.best_checkpoint, par.best_checkpoint);
}

#[test]
fn interrupted_sweep_resumes_without_rerunning_finished_trials() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let opts = SweepOptions {
        out_dir: Some(dir.path().to_path_buf()),
        deterministic: true,
        ..SweepOptions::new("resume")
    };
    run(&d, &spec(d.vocab.len(), 2), &opts).unwrap();
    // mark trial 0 so that a rerun would be visible
    let record = dir.path().join("resume/trial_0/record.json");
    let mut r0: TrialRecord = serde_json::from_str(&std::fs::read_to_string(&record).unwrap()).unwrap();
    r0.wall_ms = 123_456;
    std::fs::write(&record, serde_json::to_string(&r0).unwrap()).unwrap();

    let full = spec(d.vocab.len(), 4);
    let resumed = run(&d, &full, &opts).unwrap();
    assert_eq!(resumed.leaderboard.len(), 4);
    let kept = resumed.leaderboard.iter().find(|r| r.trial_id == 0).unwrap();
    assert_eq!(kept.wall_ms, 123_456);

    let fresh = run(
        &d,
        &full,
        &SweepOptions {
            deterministic: true,
            ..SweepOptions::new("fresh")
        },
    )
    .unwrap();
    let strip = |b: &[TrialRecord]| {
        leaderboard(b)
            .into_iter()
            .map(|mut r| {
                r.wall_ms = 0;
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&resumed.leaderboard), strip(&fresh.leaderboard));
}
