use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const TINY: &str = r#"
[gen]
n_docs = 5
units_per_doc = [8, 18]

[train]
epochs = 2
accum = 2

[train.model.encoder]
d_model = 16
n_layers = 1
n_heads = 2
d_ffn = 16

[train.model.proposer]
hidden = 16

[train.model.decoder]
n_layers = 1
n_heads = 2
d_ffn = 16
"#;

fn formtree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formtree"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = formtree(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&["gen", "--seed", "7", "--n-docs", "4", "--out", s(&a)]);
    ok(&["gen", "--seed", "7", "--n-docs", "4", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.json");
    ok(&["gen", "--seed", "8", "--n-docs", "4", "--out", s(&c)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn zero_documents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.json");
    let stats: Value = serde_json::from_str(&ok(&["--json", "gen", "--n-docs", "0", "--out", s(&out)])).unwrap();
    assert_eq!(stats["documents"], 0);
    assert_eq!(read_json(&out)["documents"], json!([]));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (from_cfg, plain, seed3) = (d.join("a.json"), d.join("plain.json"), d.join("seed3.json"));
    let gen = "[gen]\nn_docs = 3\nunits_per_doc = [8, 18]\n";
    let with_out = d.join("with_out.toml");
    std::fs::write(&with_out, format!("out = {:?}\n{gen}seed = 3\n", s(&from_cfg))).unwrap();
    let bare = d.join("bare.toml");
    std::fs::write(&bare, gen).unwrap();

    ok(&["--config", s(&with_out), "gen", "--seed", "7"]);
    ok(&["--config", s(&bare), "gen", "--seed", "7", "--out", s(&plain)]);
    ok(&["--config", s(&bare), "gen", "--seed", "3", "--out", s(&seed3)]);
    assert_eq!(read_json(&from_cfg)["documents"].as_array().unwrap().len(), 3);
    assert_eq!(std::fs::read(&from_cfg).unwrap(), std::fs::read(&plain).unwrap());
    assert_ne!(std::fs::read(&from_cfg).unwrap(), std::fs::read(&seed3).unwrap());
}

#[test]
fn bad_flag_is_a_usage_error() {
    let o = formtree(&["gen", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = formtree(&["gen", "--seed", "seven", "--out", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = formtree(&["gen"]);
    assert_eq!(o.status.code(), Some(2), "missing --out");
}

#[test]
fn missing_file_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = formtree(&["eval", "--pred", s(&missing), "--gt", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
    let o = formtree(&["--config", s(&missing), "gen", "--out", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn decode_of_one_hot_scores_reproduces_labels() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.json");
    ok(&["gen", "--seed", "11", "--n-docs", "6", "--out", s(&corpus)]);
    let c = read_json(&corpus);
    for doc in c["documents"].as_array().unwrap() {
        let parent: Vec<usize> = serde_json::from_value(doc["labels"]["parent"].clone()).unwrap();
        let rel: Vec<String> = serde_json::from_value(doc["labels"]["rel_type"].clone()).unwrap();
        let n = parent.len();
        let mut r = vec![vec![0.0; n]; n];
        let mut types = vec![vec![json!("root"); n]; n];
        for j in 0..n {
            r[parent[j]][j] = 1.0;
            types[parent[j]][j] = json!(rel[j]);
        }
        let scores = dir.path().join("scores.json");
        std::fs::write(&scores, json!({ "R": r, "C": types, "schema": c["schema"] }).to_string()).unwrap();
        let out: Value = serde_json::from_str(&ok(&["decode", "--scores", s(&scores)])).unwrap();
        assert_eq!(out["parent"], json!(parent));
        assert_eq!(out["rel_type"], json!(rel));
        assert_eq!(out["diagnostics"], json!([]));
    }
}

#[test]
fn decode_rejects_ragged_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("bad.json");
    std::fs::write(&scores, r#"{"R": [[1.0, 0.0]], "C": [[0, 0]]}"#).unwrap();
    let o = formtree(&["decode", "--scores", s(&scores)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.json");
    ok(&["gen", "--seed", "3", "--n-docs", "8", "--out", s(&corpus)]);
    let r: Value = serde_json::from_str(&ok(&["--json", "eval", "--pred", s(&corpus), "--gt", s(&corpus)])).unwrap();
    for key in ["f1_field", "f1_tree", "macro_f1_field", "macro_f1_tree", "teds_mean"] {
        assert_eq!(r[key], 1.0, "{key}");
    }
    for v in r["teds"].as_object().unwrap().values() {
        assert_eq!(*v, 1.0);
    }
    let table = ok(&["eval", "--pred", s(&corpus), "--gt", s(&corpus)]);
    assert!(table.contains("micro"));
}

#[test]
fn gen_train_predict_eval_pipeline() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let (corpus, ckpt, pred) = (d.join("c.json"), d.join("m.ckpt"), d.join("pred.json"));
    let c = s(&cfg);
    ok(&["--config", c, "gen", "--seed", "2", "--out", s(&corpus)]);

    let summary: Value = serde_json::from_str(&ok(&[
        "--config", c, "--json", "train", "--corpus", s(&corpus), "--out-ckpt", s(&ckpt),
    ]))
    .unwrap();
    assert_eq!(summary["steps"], 6);
    let log = std::fs::read_to_string(d.join("m.ckpt.metrics.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1], summary["final"]);

    // Training again with the same seed gives the same checkpoint.
    let again = d.join("again.ckpt");
    ok(&["--config", c, "train", "--corpus", s(&corpus), "--out-ckpt", s(&again)]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let dots = d.join("dots");
    ok(&["predict", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--out", s(&pred), "--dot", s(&dots), "--jobs", "1"]);
    assert_eq!(std::fs::read_dir(&dots).unwrap().count(), 5);
    let par = d.join("pred4.json");
    ok(&["predict", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--out", s(&par), "--jobs", "4"]);
    assert_eq!(std::fs::read(&pred).unwrap(), std::fs::read(&par).unwrap());

    let report = d.join("report.json");
    let r: Value = serde_json::from_str(&ok(&[
        "--json", "eval", "--pred", s(&pred), "--gt", s(&corpus), "--out", s(&report),
    ]))
    .unwrap();
    assert_eq!(r["n_docs"], 5);
    assert_eq!(read_json(&report), r);
    for key in ["f1_field", "f1_tree", "teds_mean"] {
        let x = r[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{key} = {x}");
    }

    let proposal_only = d.join("raw.json");
    ok(&["predict", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--out", s(&proposal_only), "--route", "proposal-only"]);
    ok(&["eval", "--pred", s(&proposal_only), "--gt", s(&corpus)]);
}

#[test]
fn inspect_dumps_feed_decode() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let (corpus, ckpt) = (d.join("c.json"), d.join("m.ckpt"));
    let c = s(&cfg);
    ok(&["--config", c, "gen", "--seed", "4", "--out", s(&corpus)]);
    ok(&["--config", c, "train", "--corpus", s(&corpus), "--out-ckpt", s(&ckpt), "--epochs", "1", "--precision", "f64"]);
    let dump = d.join("inspect.json");
    ok(&["inspect", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--doc", "1", "--out", s(&dump)]);
    let v = read_json(&dump);
    let n = v["R"].as_array().unwrap().len();
    assert_eq!(v["C"].as_array().unwrap().len(), n);
    assert_eq!(v["levels"]["unit_level"].as_array().unwrap().len(), n);
    let np = v["proposals"].as_array().unwrap().len();
    assert_eq!(np, n * n.min(5));
    assert_eq!(v["masks"]["self"].as_array().unwrap().len(), np);
    assert_eq!(v["masks"]["cross"][0].as_str().unwrap().len(), n);
    for j in 0..n {
        let col: f64 = (0..n).map(|i| v["R"][i][j].as_f64().unwrap()).sum();
        assert!((col - 1.0).abs() < 1e-9);
    }
    let decoded: Value = serde_json::from_str(&ok(&["decode", "--scores", s(&dump)])).unwrap();
    assert_eq!(decoded["parent"].as_array().unwrap().len(), n);

    let by_id = ok(&["inspect", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--doc", v["doc_id"].as_str().unwrap()]);
    assert_eq!(serde_json::from_str::<Value>(&by_id).unwrap(), v);
    let o = formtree(&["inspect", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--doc", "999"]);
    assert_eq!(o.status.code(), Some(1));
}
