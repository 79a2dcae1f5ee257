use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 2
recalibration_rounds = 1

[data.synthetic]
n_queries = 10
test_queries = 3
n_docs_per_query = 8

[model]
n_layers = 2
n_heads = 2
d_model = 16
d_ff = 32

[selection]
k = 2

[loss]
epochs = 1
steps = 3
"#;

fn headrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = headrank(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fails_with(args: &[&str], code: i32, category: &str) {
    let out = headrank(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    assert!(stderr.starts_with(&format!("error[{category}]")), "{stderr}");
}

struct Work {
    _tmp: TempDir,
    root: PathBuf,
}

impl Work {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("run.toml"), config).unwrap();
        Self { _tmp: tmp, root }
    }

    fn p(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn data(&self) -> (String, String) {
        ok(&["gen-data", "--config", &self.p("run.toml"), "--out", &self.p("data")]);
        (self.p("data/corpus.jsonl"), self.p("data/qrels.txt"))
    }
}

fn read(path: &str) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn every_command_runs_in_sequence() {
    let w = Work::new(SMALL);
    let cfg = w.p("run.toml");
    let (corpus, qrels) = w.data();
    let data = ["--corpus", corpus.as_str(), "--qrels", qrels.as_str()];
    let with = |cmd: &str, out: &str, extra: &[&str]| {
        let mut args = vec![cmd, "--config", cfg.as_str(), "--out", out];
        args.extend_from_slice(&data);
        args.extend_from_slice(extra);
        ok(&args);
    };

    let sel = w.p("sel");
    with("select-heads", &sel, &[]);
    let heads = w.p("sel/heads.json");
    let init = w.p("sel/model_init.ckpt");
    assert!(read(&heads).contains("\"l_max\""));

    let tr = w.p("train");
    with("train", &tr, &["--heads", &heads, "--checkpoint", &init]);
    let model = w.p("train/model.ckpt");
    assert_eq!(read(&w.p("train/train_log.jsonl")).lines().count(), 3);

    let rc = w.p("recal");
    with("recalibrate", &rc, &["--heads", &heads, "--checkpoint", &model]);
    assert!(read(&w.p("recal/overlap.md")).contains('|'));

    let rr = w.p("rerank");
    with("rerank", &rr, &["--heads", &w.p("recal/heads.json"), "--checkpoint", &model]);
    let base = w.p("rerank0");
    with("rerank", &base, &["--heads", "L1-H0", "--checkpoint", &init]);
    let run = w.p("rerank/run.txt");
    let run0 = w.p("rerank0/run.txt");
    assert_eq!(read(&run).lines().count(), 3 * 8);

    let ev = w.p("eval");
    with("eval", &ev, &["--run", &run]);
    let metrics: serde_json::Value = serde_json::from_str(&read(&w.p("eval/metrics.json"))).unwrap();
    assert!(metrics["mean_ndcg"].as_f64().unwrap() >= 0.0);

    let dg = w.p("diag");
    with("diagnose", &dg, &["--run", &format!("trained={run}"), "--run", &format!("base={run0}")]);
    let table = read(&w.p("diag/diagnose.md"));
    assert!(table.contains("| trained |") && table.contains("| base |"));

    let vz = w.p("viz");
    with("visualize", &vz, &["--heads", &heads, "--checkpoint", &model, "--run", &format!("trained={run}")]);
    let html = read(&w.p("viz/heatmap.html"));
    let doc = roxmltree::Document::parse(html.trim_start_matches("<!DOCTYPE html>\n")).unwrap();
    let rows = doc.descendants().filter(|n| n.has_tag_name("tr")).count();
    assert_eq!(rows, 1 + 5);

    for dir in [&sel, &tr, &rc, &rr, &ev, &dg, &vz] {
        let manifest: serde_json::Value =
            serde_json::from_str(&read(&format!("{dir}/manifest.json"))).unwrap();
        assert!(!manifest["artifacts"].as_array().unwrap().is_empty());
    }
}

#[test]
fn recalibrating_untrained_parameters_keeps_the_heads() {
    let w = Work::new(SMALL);
    let cfg = w.p("run.toml");
    let (corpus, qrels) = w.data();
    let sel = w.p("sel");
    ok(&["select-heads", "--config", &cfg, "--out", &sel, "--corpus", &corpus, "--qrels", &qrels]);
    let rc = w.p("rc");
    ok(&[
        "recalibrate", "--config", &cfg, "--out", &rc, "--corpus", &corpus, "--qrels", &qrels,
        "--heads", &w.p("sel/heads.json"), "--checkpoint", &w.p("sel/model_init.ckpt"),
    ]);
    let heads = |p: &str| {
        let v: serde_json::Value = serde_json::from_str(&read(p)).unwrap();
        v["heads"].clone()
    };
    assert_eq!(heads(&w.p("sel/heads.json")), heads(&w.p("rc/heads.json")));
    assert_eq!(read(&w.p("sel/head_scores.json")), read(&w.p("rc/head_scores.json")));
}

#[test]
fn edited_artifacts_are_refused_as_stale() {
    let w = Work::new(SMALL);
    let (corpus, qrels) = w.data();
    let mut text = read(&corpus);
    text.push('\n');
    fs::write(&corpus, text).unwrap();
    fails_with(
        &["select-heads", "--config", &w.p("run.toml"), "--out", &w.p("s"), "--corpus", &corpus, "--qrels", &qrels],
        5,
        "stale-input",
    );
}

#[test]
fn failures_map_to_exit_codes() {
    let w = Work::new(SMALL);
    let cfg = w.p("run.toml");
    let (corpus, qrels) = w.data();
    let loose = |name: &str, body: &[u8]| {
        let path = w.root.join(name);
        fs::write(&path, body).unwrap();
        path.display().to_string()
    };

    let bad_cfg = loose("bad.toml", b"seed = 1\nunknown_key = 3\n");
    fails_with(&["gen-data", "--config", &bad_cfg, "--out", &w.p("x")], 3, "config");
    fails_with(&["gen-data", "--config", &cfg, "--k", "0", "--out", &w.p("x")], 3, "config");

    let bad_corpus = loose("corpus.jsonl", b"{not json}\n");
    let loose_qrels = loose("qrels.txt", read(&qrels).as_bytes());
    fails_with(
        &["select-heads", "--config", &cfg, "--out", &w.p("x"), "--corpus", &bad_corpus, "--qrels", &loose_qrels],
        4,
        "input",
    );

    fails_with(
        &["select-heads", "--config", &cfg, "--out", &w.p("x"), "--corpus", &w.p("missing.jsonl"), "--qrels", &qrels],
        6,
        "io",
    );

    let bad_ckpt = loose("broken.ckpt", b"HEADRANK\x01");
    fails_with(
        &[
            "rerank", "--config", &cfg, "--out", &w.p("x"), "--corpus", &corpus, "--qrels", &qrels,
            "--heads", "L1-H0", "--checkpoint", &bad_ckpt,
        ],
        8,
        "checkpoint",
    );

    let blowup = loose("blowup.toml", format!("{SMALL}learning_rate = 1.7e308\n").as_bytes());
    fails_with(
        &[
            "train", "--config", &blowup, "--out", &w.p("x"), "--corpus", &corpus, "--qrels", &qrels,
            "--heads", "L1-H0,L2-H1",
        ],
        7,
        "numeric",
    );
}

#[test]
fn pipeline_writes_every_artifact() {
    let w = Work::new(SMALL);
    let out = w.p("pipe");
    ok(&["pipeline", "--config", &w.p("run.toml"), "--out", &out]);
    for name in [
        "config.toml", "corpus.jsonl", "qrels.txt", "model_init.ckpt", "heads_initial.json",
        "model.ckpt", "heads.json", "overlap_round1.md", "run.txt", "run_untrained.txt",
        "metrics.json", "diagnose.md", "heatmap.html", "manifest.json",
    ] {
        assert!(Path::new(&out).join(name).is_file(), "missing {name}");
    }
}
