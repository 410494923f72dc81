use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edr::checkpoint::read_manifest;

fn edr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = edr(args);
    assert!(
        out.status.success(),
        "edr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, task: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen-data", "--task", task, "--train", "120", "--dev", "10", "--test", "10", "--out", s(&data), "--seed", "3",
    ]);
    data
}

const SMALL: [&str; 12] = [
    "--embed", "8", "--hidden", "12", "--batch-size", "8", "--epochs-stage1", "1", "--epochs-stage2", "1",
    "--checkpoint-every", "10",
];

fn train(dir: &Path, data: &Path, model: &str, extra: &[&str]) -> PathBuf {
    let m = dir.join(model);
    let (src, tgt, dsrc, dtgt) = (
        data.join("train.src"),
        data.join("train.tgt"),
        data.join("dev.src"),
        data.join("dev.tgt"),
    );
    let mut args = vec![
        "train",
        "--model-dir",
        s(&m),
        "--train-src",
        s(&src),
        "--train-tgt",
        s(&tgt),
        "--dev-src",
        s(&dsrc),
        "--dev-tgt",
        s(&dtgt),
    ];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
    m
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "lexsub");
    let m = train(dir.path(), &data, "m", &[]);
    for f in ["model.edrc", "src.vocab", "tgt.vocab", "metrics.tsv", "config.txt"] {
        assert!(m.join(f).exists(), "{f} missing");
    }
    let test_src = data.join("test.src");
    let test_tgt = data.join("test.tgt");
    let kbest = dir.path().join("kbest.tsv");
    let out = ok(&[
        "translate", "--model-dir", s(&m), "--input", s(&test_src), "--beam", "4", "--kbest-out", s(&kbest),
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 10);
    let kb = fs::read_to_string(&kbest).unwrap();
    assert!(kb.starts_with("sent_id\trank_final"));

    let out = ok(&["score", "--model-dir", s(&m), "--src", s(&test_src), "--tgt", s(&test_tgt)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 11);
    for line in text.lines().skip(1) {
        let cols: Vec<f64> = line.split('\t').skip(1).map(|c| c.parse().unwrap()).collect();
        assert!(cols.iter().all(|v| v.is_finite() && *v < 0.0), "{line}");
    }

    let buckets = dir.path().join("buckets.csv");
    let out = ok(&[
        "evaluate", "--model-dir", s(&m), "--src", s(&test_src), "--tgt", s(&test_tgt), "--buckets", "3",
        "--buckets-out", s(&buckets),
    ]);
    let report = String::from_utf8(out.stdout).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("oracle_bleu")).count(), 3);
    assert!(fs::read_to_string(&buckets).unwrap().starts_with("bucket_low,bucket_high,bleu,mean_len"));

    let out = ok(&["reconstruct", "--model-dir", s(&m), "--input", s(&test_src), "--mode", "greedy"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 10);

    let out = ok(&[
        "sweep-beam", "--model-dir", s(&m), "--src", s(&test_src), "--tgt", s(&test_tgt), "--beams", "1,5",
    ]);
    let sweep = String::from_utf8(out.stdout).unwrap();
    assert_eq!(sweep.lines().next(), Some("beam\tbleu\tmean_len\tlength_ratio"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn same_seed_same_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "copy");
    let a = train(dir.path(), &data, "a", &["--dropout", "0.3"]);
    let b = train(dir.path(), &data, "b", &["--dropout", "0.3"]);
    let read = |p: PathBuf| fs::read(p).unwrap();
    assert_eq!(read(a.join("metrics.tsv")), read(b.join("metrics.tsv")));
    assert_eq!(read(a.join("model.edrc")), read(b.join("model.edrc")));

    let input = data.join("test.src");
    let t = |m: &Path| {
        ok(&["reconstruct", "--model-dir", s(m), "--input", s(&input), "--mode", "stochastic", "--seed", "5"]).stdout
    };
    assert_eq!(t(&a), t(&b));
}

#[test]
fn generated_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m");
    let mut args = vec!["train", "--model-dir", s(&m), "--task", "copy", "--gen", "100", "--stage", "1", "--val-size", "10"];
    args.extend(SMALL);
    ok(&args);
    let metrics = fs::read_to_string(m.join("metrics.tsv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.split('\t').nth(2) == Some("nan")), "{metrics}");
}

#[test]
fn config_precedence_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# layer two\nbeam = 7\nseed = 11\nhidden = 9\n").unwrap();
    let out = ok(&["--config", s(&cfg), "--seed", "1", "gradcheck"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("beam = 7"), "{err}");
    assert!(err.contains("seed = 1\n"), "{err}");
    assert!(err.contains("hidden = 9"), "{err}");
    assert!(err.contains("lambda = 1"), "{err}");
    assert!(String::from_utf8(out.stdout).unwrap().contains("PASS"));
}

#[test]
fn lambda_zero_builds_no_reconstructor() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "copy");
    let m = train(dir.path(), &data, "m", &["--lambda", "0"]);
    let manifest = read_manifest(&m.join("model.edrc")).unwrap();
    assert!(manifest.iter().all(|(name, _)| !name.starts_with("rec.")), "{manifest:?}");
    let metrics = fs::read_to_string(m.join("metrics.tsv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.split('\t').nth(2) == Some("nan")));
}

#[test]
fn stage_two_resumes_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "copy");
    let m = train(dir.path(), &data, "m", &["--stage", "1"]);
    let before = fs::read_to_string(m.join("metrics.tsv")).unwrap();
    train(dir.path(), &data, "m", &["--stage", "2"]);
    let after = fs::read_to_string(m.join("metrics.tsv")).unwrap();
    assert!(after.starts_with(&before));
    assert!(after.lines().count() > before.lines().count());
    let manifest = read_manifest(&m.join("model.edrc")).unwrap();
    assert!(manifest.iter().any(|(name, _)| name.starts_with("rec.")));
}

#[test]
fn stage_one_checkpoint_cannot_rerank() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "copy");
    let m = train(dir.path(), &data, "m", &["--stage", "1"]);
    let input = data.join("test.src");
    let out = edr(&["translate", "--model-dir", s(&m), "--input", s(&input), "--lambda", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no reconstructor"));
    ok(&["translate", "--model-dir", s(&m), "--input", s(&input), "--lambda", "0", "--beam", "1"]);
}

#[test]
fn errors_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "copy");
    let m = train(dir.path(), &data, "m", &["--stage", "1"]);

    let src = dir.path().join("x.src");
    let tgt = dir.path().join("x.tgt");
    fs::write(&src, "a b\n\nc\n").unwrap();
    fs::write(&tgt, "a b\nd\nc\n").unwrap();
    let out = edr(&["score", "--model-dir", s(&m), "--src", s(&src), "--tgt", s(&tgt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    fs::write(&tgt, "a b\n").unwrap();
    let out = edr(&["score", "--model-dir", s(&m), "--src", s(&src), "--tgt", s(&tgt)]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(edr(&["translate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(edr(&["--beam", "0", "gradcheck"]).status.code(), Some(1));
    let missing = dir.path().join("nope");
    assert_eq!(edr(&["translate", "--model-dir", s(&missing), "--input", s(&src)]).status.code(), Some(2));
}
