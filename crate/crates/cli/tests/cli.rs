use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn herc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_herc")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SPEC: &str = r#"{"classes":3,"dialogues":10,"len_min":2,"len_max":4,"dim_t":4,"dim_a":5,"dim_v":3,"seed":2}"#;

fn write_config(dir: &Path, mode: &str) -> String {
    let config = format!(
        r#"{{"corpus":"corpus.jsonl","classes":3,"dim_t":4,"dim_a":5,"dim_v":3,"hidden":8,"heads":2,"ffn_inner":8,
            "experts":2,"top_k":1,"epochs":2,"lr":0.005,"ablation":"{mode}","window_past":1,"window_future":1}}"#
    );
    let path = dir.join("run.json");
    fs::write(&path, config).unwrap();
    path.to_str().unwrap().to_string()
}

fn gen(dir: &Path) -> String {
    let spec = dir.join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let corpus = dir.join("corpus.jsonl");
    let o = herc(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", corpus.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    corpus.to_str().unwrap().to_string()
}

#[test]
fn unknown_input_prints_usage_and_fails() {
    for args in [vec!["frobnicate"], vec!["train", "--bogus"], vec![]] {
        let o = herc(&args);
        assert!(!o.status.success());
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
    let o = herc(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(1));
    let o = herc(&["train", "--config", "x.json", "--ablation", "moa"]);
    assert!(!o.status.success());
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path());
    let first = fs::read(&a).unwrap();
    let second = gen(dir.path());
    assert_eq!(first, fs::read(second).unwrap());
    let text = String::from_utf8(first).unwrap();
    assert!(text.lines().next().unwrap().contains("\"hfl-1\""));
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn train_eval_and_route_stats() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen(dir.path());
    let config = write_config(dir.path(), "baseline");
    let out_dir = dir.path().join("run");
    let o = herc(&["train", "--config", &config, "--ablation", "hgf+moa", "--seed", "4", "--out-dir", out_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let log = stdout(&o);
    assert_eq!(log.lines().count(), 4, "{log}");
    assert!(log.lines().last().unwrap().contains("\"best_epoch\""));
    assert_eq!(fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap().lines().count(), 3);

    let ckpt = out_dir.join("best.ckpt");
    let graph = dir.path().join("graph.json");
    let o = herc(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", &corpus, "--split", "test", "--dump-graph", graph.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() <= 1.0);
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(graph).unwrap()).unwrap();
    assert!(dump["edges"].is_array());

    let o = herc(&["route-stats", "--ckpt", ckpt.to_str().unwrap(), "--data", &corpus]);
    assert!(o.status.success(), "{o:?}");
    let stats: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(stats["pairs"].as_object().unwrap().len(), 6);
}

#[test]
fn ablation_ladder_prints_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let config = write_config(dir.path(), "hgf+moa");
    let json = dir.path().join("ladder.json");
    let o = herc(&["ablation-ladder", "--config", &config, "--seeds", "0,1", "--out", json.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{table}");
    for (row, mode) in rows.iter().zip(["baseline", "hgf", "hgf+moa"]) {
        assert!(row.starts_with(mode));
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 6);
}

#[test]
fn gradcheck_exit_status() {
    let o = herc(&["gradcheck", "--module", "graph", "--seeds", "2"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).starts_with("PASS graph"));
    let o = herc(&["gradcheck", "--module", "optics"]);
    assert!(!o.status.success());
}
