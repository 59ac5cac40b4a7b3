use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use occlm::cli::{RunConfig, RunManifest, RunStatus, RunSummary};
use occlm::corpus::demo;
use occlm::eval::EvalReport;
use occlm::train::JsonlSink;

fn occlm(args: &[&str]) -> Output {
    occlm_env(args, &[])
}

fn occlm_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_occlm"));
    cmd.args(args).env_remove("OCCLM_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = occlm(args);
    assert!(
        out.status.success(),
        "occlm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Raw corpus, clean, split and a 300-entry vocabulary under `root`.
fn prepare(root: &Path) -> (PathBuf, PathBuf) {
    let raw = root.join("raw.txt");
    std::fs::write(&raw, demo::general_corpus(400, 5).join("\n")).unwrap();
    let data = root.join("data");
    let clean = data.join("clean.txt");
    ok(&["corpus", "clean", "--input", s(&raw), "--out", s(&clean)]);
    ok(&["corpus", "split", "--input", s(&clean), "--out", s(&data)]);
    let tok = root.join("tok");
    ok(&["tokenizer", "train", "--input", s(&data.join("train.txt")), "--vocab-size", "300", "--out", s(&tok)]);
    (data, tok.join("vocab.txt"))
}

const SMALL_MODEL: &[&str] = &[
    "--d-model", "16", "--block-size", "16", "--n-layers", "1", "--n-heads", "2", "--batch-size", "8",
];

fn pretrain_args<'a>(data: &'a str, vocab: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["--deterministic", "pretrain", "--data", data, "--vocab", vocab, "--out", out, "--epochs", "2"];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    args
}

#[test]
fn help_and_usage_errors() {
    let help = occlm(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["tokenizer", "corpus", "pretrain", "finetune", "eval", "sweep", "generate", "quickstart"] {
        assert!(text.contains(sub), "help lists {sub}");
    }
    assert_eq!(code(&occlm(&["frobnicate"])), 2);
    assert_eq!(code(&occlm(&["pretrain", "--epochs", "many"])), 2);
    assert_eq!(code(&occlm(&[])), 2);
}

#[test]
fn missing_inputs_are_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = occlm(&["pretrain", "--vocab", s(&dir.path().join("none.txt"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input"));
    let out = occlm(&["eval", "--checkpoint", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn end_to_end_pipeline() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, vocab) = prepare(root);
    let (data_s, vocab_s) = (s(&data), s(&vocab));

    let stats = ok(&["corpus", "stats", "--data", data_s, "--vocab", vocab_s, "--json"]);
    let stats: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert!(stats.to_string().contains("train"));

    let pre = root.join("pre");
    ok(&pretrain_args(data_s, vocab_s, s(&pre), &["--objective", "occlusion", "--occlusion-prob", "0.3"]));
    let summary = RunSummary::load(pre.join("summary.json")).unwrap();
    assert_eq!(summary.epochs, 2);
    assert_eq!(summary.objective, "occlusion");
    assert_eq!(summary.occlusion_prob, 0.3);
    assert!(summary.best_valid_perplexity > 1.0);
    let manifest = RunManifest::load(pre.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, RunStatus::Succeeded);
    assert_eq!(manifest.run_id, summary.run_id);
    assert!(manifest.vocab_hash.is_some());
    assert_eq!(manifest.data_hashes.len(), 2);
    let cfg = RunConfig::from_toml(&std::fs::read_to_string(pre.join("config.toml")).unwrap()).unwrap();
    assert_eq!((cfg.model.d_model, cfg.model.block_size, cfg.model.vocab_size), (16, 16, 300));
    let metrics = JsonlSink::read(pre.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 4);
    assert!(metrics.iter().all(|m| m.wall_ms == 0 && m.run_id == summary.run_id));

    // a finished run resumes to the same artifacts
    let best = std::fs::read(pre.join("best.ckpt")).unwrap();
    let summary_text = std::fs::read(pre.join("summary.json")).unwrap();
    ok(&pretrain_args(data_s, vocab_s, s(&pre), &["--objective", "occlusion", "--occlusion-prob", "0.3", "--resume"]));
    assert_eq!(std::fs::read(pre.join("best.ckpt")).unwrap(), best);
    assert_eq!(std::fs::read(pre.join("summary.json")).unwrap(), summary_text);
    let changed = occlm(&pretrain_args(data_s, vocab_s, s(&pre), &["--lr", "0.5", "--resume"]));
    assert_eq!(code(&changed), 1);
    assert!(String::from_utf8_lossy(&changed.stderr).contains("belongs to run"));

    // packed training data
    let packed = data.join("train.json");
    ok(&["corpus", "pack", "--input", s(&data.join("train.txt")), "--vocab", vocab_s, "--block-size", "16", "--out", s(&packed)]);
    let mut args = vec!["--deterministic", "pretrain", "--train", s(&packed), "--valid"];
    let valid = data.join("valid.txt");
    args.extend([s(&valid), "--vocab", vocab_s, "--epochs", "1"]);
    let pre_packed = root.join("pre_packed");
    args.extend(["--out", s(&pre_packed)]);
    args.extend_from_slice(SMALL_MODEL);
    ok(&args);
    assert!(pre_packed.join("best.ckpt").exists());

    let ckpt = pre.join("best.ckpt");
    let report = root.join("eval.json");
    let transcript = root.join("transcript.txt");
    ok(&[
        "eval", "--checkpoint", s(&ckpt), "--vocab", vocab_s, "--split", s(&data.join("test.txt")), "--bleu",
        "--out", s(&report), "--transcript", s(&transcript),
    ]);
    let report = EvalReport::load(&report).unwrap();
    assert_eq!(report.split, "test");
    assert!((report.perplexity - report.mean_loss.exp()).abs() < 1e-9 * report.perplexity);
    let bleu = report.bleu.unwrap();
    assert!((0.0..=1.0).contains(&bleu));
    assert!(report.bleu_pairs.unwrap() > 0);
    let transcript = std::fs::read_to_string(&transcript).unwrap();
    assert!(transcript.contains("REF") && transcript.contains("GEN"));

    let gen = ok(&["generate", "--checkpoint", s(&ckpt), "--vocab", vocab_s, "--prompt", "the", "--max-new-tokens", "5"]);
    assert!(gen.starts_with("the"), "{gen}");

    let ft = root.join("ft");
    ok(&[
        "--deterministic", "finetune", "--checkpoint", s(&ckpt), "--data", data_s, "--vocab", vocab_s, "--out",
        s(&ft), "--epochs", "2", "--unfreeze-top-k", "1", "--unfreeze-interval", "1", "--batch-size", "8",
    ]);
    assert_eq!(RunSummary::load(ft.join("summary.json")).unwrap().epochs, 2);

    // a vocabulary the checkpoint was not trained with
    let other = root.join("other");
    ok(&["tokenizer", "train", "--input", s(&data.join("valid.txt")), "--vocab-size", "280", "--out", s(&other)]);
    let foreign = occlm(&["eval", "--checkpoint", s(&ckpt), "--vocab", s(&other.join("vocab.txt")), "--split", s(&valid)]);
    assert_eq!(code(&foreign), 1);

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "pipeline took {secs:.1}s");
}

#[test]
fn config_precedence_on_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, vocab) = prepare(root);
    let config = root.join("run.toml");
    std::fs::write(&config, "preset = \"preset:desk\"\n[train]\nseed = 5\nmax_epochs = 1\n").unwrap();
    let seed_of = |out: &Path| RunSummary::load(out.join("summary.json")).unwrap().seed;
    let run = |name: &str, extra: &[&str], env: &[(&str, &str)]| {
        let out = root.join(name);
        let mut args = vec!["pretrain", "--data", s(&data), "--vocab", s(&vocab), "--config", s(&config)];
        args.extend(["--out", s(&out)]);
        args.extend_from_slice(SMALL_MODEL);
        args.extend_from_slice(extra);
        let o = occlm_env(&args, env);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        seed_of(&out)
    };
    assert_eq!(run("file", &[], &[]), 5);
    assert_eq!(run("env", &[], &[("OCCLM_SEED", "8")]), 8);
    assert_eq!(run("flag", &["--seed", "9"], &[("OCCLM_SEED", "8")]), 9);

    std::fs::write(&config, "[train]\nlearning_rate = 1e-3\n").unwrap();
    let out = occlm(&["pretrain", "--data", s(&data), "--vocab", s(&vocab), "--config", s(&config)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn objective_and_probability_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (data, vocab) = prepare(dir.path());
    let out = root_out(dir.path());
    let o = occlm(&pretrain_args(s(&data), s(&vocab), s(&out), &["--objective", "standard", "--occlusion-prob", "0.3"]));
    assert_eq!(code(&o), 1);
    let o = occlm(&pretrain_args(s(&data), s(&vocab), s(&out), &["--occlusion-prob", "1.5"]));
    assert_eq!(code(&o), 1);
}

fn root_out(root: &Path) -> PathBuf {
    root.join("out")
}

#[test]
fn sweep_from_a_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data, vocab) = prepare(root);
    let spec_path = root.join("spec.toml");
    ok(&["sweep", "--init-spec", s(&spec_path)]);
    let mut spec = occlm::sweep::SweepSpec::from_toml(&std::fs::read_to_string(&spec_path).unwrap()).unwrap();
    assert_eq!(spec.trial_count, 20);
    spec.trial_count = 2;
    spec.max_epochs = 1;
    spec.n_layers = vec![1];
    spec.n_heads = vec![2];
    spec.lr = occlm::sweep::LogRange { min: 1e-3, max: 3e-3 };
    spec.base_model.d_model = 16;
    spec.base_model.block_size = 16;
    std::fs::write(&spec_path, spec.to_toml().unwrap()).unwrap();

    let out = root.join("sweeps");
    let args = [
        "--deterministic", "sweep", "--spec", s(&spec_path), "--data", s(&data), "--vocab", s(&vocab), "--out",
        s(&out), "--run-id", "demo",
    ];
    ok(&args);
    let run_dir = out.join("demo");
    for f in ["leaderboard.json", "report.json", "table.tsv", "curves.tsv", "manifest.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let table = std::fs::read_to_string(run_dir.join("table.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let report = std::fs::read(run_dir.join("report.json")).unwrap();
    // the second invocation finds every trial done and rebuilds the same report
    ok(&args);
    assert_eq!(std::fs::read(run_dir.join("report.json")).unwrap(), report);
}

#[test]
fn quickstart_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("qs");
    ok(&["quickstart", "--out", s(&out)]);
    for f in ["corpus/desk.txt", "config.toml", "run.sh"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let cfg = RunConfig::from_toml(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(code(&occlm(&["quickstart", "--out", s(&out)])), 1);
    ok(&["quickstart", "--out", s(&out), "--force"]);
}
