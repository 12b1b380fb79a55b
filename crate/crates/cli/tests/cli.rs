//! End-to-end checks of the `v2w` binary: outputs, exit codes and replay.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use tempfile::TempDir;

const TINY: &[&str] = &[
    "--layers",
    "1",
    "--hidden",
    "16",
    "--heads",
    "2",
    "--max-len",
    "24",
    "--frozen",
    "0",
    "--epochs",
    "1",
    "--k-neg",
    "4",
];

fn v2w(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_v2w"))
        .args(args)
        .env("V2W_THREADS", "1")
        .output()
        .expect("running v2w")
}

fn ok(args: &[&str]) -> String {
    let out = v2w(args);
    assert!(
        out.status.success(),
        "v2w {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// Synthetic data and a vocabulary.
    fn new(cves: usize) -> Self {
        let w = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(&[
            "synth",
            "--out",
            &w.path("data"),
            "--cves",
            &cves.to_string(),
            "--seed",
            "1",
        ]);
        ok(&[
            "build-vocab",
            "--data",
            &w.path("data"),
            "--size",
            "300",
            "--out",
            &w.path("vocab"),
        ]);
        w
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_str().unwrap().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (data, vocab, out) = (
            self.path("data"),
            self.path("vocab/vocab.txt"),
            self.path(out),
        );
        let mut args = vec!["train", "--data", &data, "--vocab", &vocab, "--out", &out];
        args.extend(TINY);
        args.extend(extra);
        v2w(&args)
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn ingest_args(nvd: &Path, out: &str) -> Vec<String> {
    let f = fixtures();
    vec![
        "ingest".into(),
        "--nvd-dir".into(),
        nvd.to_str().unwrap().into(),
        "--cwe-defs".into(),
        f.join("cwe_definitions.csv").to_str().unwrap().into(),
        "--cwe-edges".into(),
        f.join("cwe_edges.csv").to_str().unwrap().into(),
        "--out".into(),
        out.into(),
    ]
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn ingest_prints_tallies_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a").to_str().unwrap().to_string();
    let b = dir.path().join("b").to_str().unwrap().to_string();
    let stdout = ok(&strs(&ingest_args(&fixtures().join("nvd"), &a)));
    assert!(stdout.starts_with("records=43 labeled=39\n"), "{stdout}");
    assert!(stdout.contains("rejected=2 sentinel_labels=3"), "{stdout}");
    ok(&strs(&ingest_args(&fixtures().join("nvd"), &b)));
    for f in [
        "corpus.csv",
        "cwe_definitions.csv",
        "cwe_edges.csv",
        "ingest_tally.json",
    ] {
        assert_eq!(
            std::fs::read(Path::new(&a).join(f)).unwrap(),
            std::fs::read(Path::new(&b).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn strict_ingest_names_the_malformed_item() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = ingest_args(
        &fixtures().join("nvd"),
        dir.path().join("out").to_str().unwrap(),
    );
    args.push("--strict".into());
    let out = v2w(&strs(&args));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("CVE-2019-2702"), "{stderr}");
}

#[test]
fn missing_inputs_exit_2() {
    let w = Workspace::new(40);
    let out = w.train("run", &["--init", &w.path("nowhere.ckpt")]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(
        v2w(&["evaluate", "--run", &w.path("no-run")]).status.code(),
        Some(2)
    );
    let out = v2w(&[
        "predict",
        "--model",
        &w.path("none.ckpt"),
        "--data",
        &w.path("data"),
        "text",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(v2w(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(v2w(&["--help"]).status.code(), Some(0));
}

#[test]
fn mismatches_exit_3() {
    let w = Workspace::new(60);
    assert!(w.train("run", &["--protocol", "random"]).status.success());
    let ckpt = w.path("run/model.ckpt");
    let (data, again) = (w.path("data"), w.path("again"));
    let out = v2w(&[
        "train", "--data", &data, "--init", &ckpt, "--out", &again, "--hidden", "32",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = v2w(&[
        "evaluate",
        "--run",
        &w.path("run"),
        "--protocol",
        "temporal",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = v2w(&["evaluate", "--run", &w.path("run"), "--split-seed", "9"]);
    assert_eq!(out.status.code(), Some(3));
}

fn path_lines(stdout: &str) -> usize {
    stdout
        .lines()
        .filter(|l| {
            l.trim_start()
                .split_once(". ")
                .is_some_and(|(n, _)| n.parse::<usize>().is_ok())
        })
        .count()
}

#[test]
fn predict_respects_the_path_budget() {
    let w = Workspace::new(60);
    assert!(w.train("run", &["--protocol", "random"]).status.success());
    let (model, data) = (w.path("run/model.ckpt"), w.path("data"));
    let text = "Remote attackers exploit the parser";
    let precise = ok(&[
        "predict", "--model", &model, "--data", &data, "--k", "1,1,1", text,
    ]);
    assert_eq!(path_lines(&precise), 1, "{precise}");
    assert!(precise.contains("novel: "), "{precise}");
    let relaxed = ok(&[
        "predict", "--model", &model, "--data", &data, "--k", "5,2,2", text,
    ]);
    assert!((1..=20).contains(&path_lines(&relaxed)), "{relaxed}");

    let mut child = Command::new(env!("CARGO_BIN_EXE_v2w"))
        .args([
            "predict", "--model", &model, "--data", &data, "--k", "1,1,1",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(text.as_bytes())
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), precise);
}

#[test]
fn zero_shot_evaluation_fills_the_zero_shot_bucket() {
    let w = Workspace::new(200);
    let out = w.train(
        "run",
        &["--protocol", "zero-shot", "--hold-out", "SYN-1-00"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    ok(&[
        "evaluate",
        "--run",
        &w.path("run"),
        "--protocol",
        "zero-shot",
        "--hold-out",
        "SYN-1-00",
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(w.path("run/eval/report.json")).unwrap()).unwrap();
    let buckets = report
        .as_object()
        .unwrap()
        .values()
        .map(|r| r["buckets"]["zero-shot"]["count"].as_u64().unwrap_or(0))
        .sum::<u64>();
    assert!(buckets > 0, "{report}");

    let out = w.train("bad", &["--protocol", "zero-shot"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn replaying_a_run_config_reproduces_the_checkpoint() {
    let w = Workspace::new(60);
    assert!(w
        .train("run", &["--protocol", "random", "--seed", "3"])
        .status
        .success());
    let config = w.path("run/run_config.json");
    ok(&["train", "--config", &config, "--out", &w.path("replay")]);
    assert_eq!(
        std::fs::read(w.path("run/model.ckpt")).unwrap(),
        std::fs::read(w.path("replay/model.ckpt")).unwrap()
    );
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    assert_eq!(stored["command"], "train");
    assert_eq!(stored["train"]["seed"], 3);
    assert_eq!(stored["threads"], 1);
}

#[test]
fn baselines_train_and_evaluate() {
    let w = Workspace::new(60);
    for kind in ["tfidf-link", "tfidf-class"] {
        let out = w.train(kind, &["--protocol", "random", "--model-kind", kind]);
        assert!(
            out.status.success(),
            "{kind}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        ok(&["evaluate", "--run", &w.path(kind)]);
        assert!(Path::new(&w.path(&format!("{kind}/eval/report.json"))).exists());
    }
}
