use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sedformer(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sedformer"))
        .args(args)
        .current_dir(root)
        .env("SEDFORMER_OUT", root)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn sedformer")
}

fn run_ok(root: &Path, args: &[&str]) -> Output {
    let out = sedformer(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

const SMALL_MODEL: [&str; 6] = ["--dim", "8", "--heads", "2", "--blocks", "1"];

/// A two-series synthetic dataset and a checkpoint trained for one epoch.
fn trained(root: &Path) -> (PathBuf, PathBuf) {
    run_ok(root, &["prepare", "--series", "2", "--out", "data"]);
    let mut args = vec!["train", "--data", "data", "--out", "model", "--epochs", "1"];
    args.extend(SMALL_MODEL);
    run_ok(root, &args);
    (root.join("data"), root.join("model/model.json"))
}

#[test]
fn prepare_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    run_ok(tmp.path(), &["prepare", "--series", "2", "--seed", "3", "--out", "a"]);
    run_ok(tmp.path(), &["prepare", "--series", "2", "--seed", "3", "--out", "b"]);
    let a = dir_bytes(&tmp.path().join("a"));
    assert!(a.contains_key("meta.json") && a.contains_key("config.json") && a.contains_key("train.csv"));
    assert_eq!(a, dir_bytes(&tmp.path().join("b")));
}

#[test]
fn sparsifying_rates_give_distinct_masks() {
    let tmp = TempDir::new().unwrap();
    let mut masks = Vec::new();
    for rate in ["0.25", "0.5", "0.75"] {
        run_ok(tmp.path(), &["prepare", "--series", "2", "--rate", rate, "--out", rate]);
        let (_, rows) = csv_rows(&tmp.path().join(rate).join("train.csv"));
        let observed: BTreeSet<(String, String, String)> = rows
            .into_iter()
            .filter(|r| r[3] == "history")
            .map(|r| (r[0].clone(), r[4].clone(), r[5].clone()))
            .collect();
        masks.push(observed);
    }
    assert!(masks[0].len() > masks[1].len() && masks[1].len() > masks[2].len());
    assert_ne!(masks[0], masks[1]);
    assert_ne!(masks[1], masks[2]);
}

#[test]
fn prepare_reads_a_wide_corpus() {
    let tmp = TempDir::new().unwrap();
    let days = 400;
    let mut text = String::from("id");
    for d in 0..days {
        text.push_str(&format!(",2020-{:02}-{:02}", 1 + d / 28 % 12, 1 + d % 28));
    }
    text.push('\n');
    for s in 0..8 {
        text.push_str(&format!("s{s}"));
        for d in 0..days {
            text.push_str(&format!(",{}", ((d as f64) * 0.1 + s as f64).sin() * 10.0 + 20.0));
        }
        text.push('\n');
    }
    let corpus = tmp.path().join("corpus.csv");
    fs::write(&corpus, text).unwrap();
    run_ok(tmp.path(), &["prepare", "--corpus", corpus.to_str().unwrap(), "--group", "4", "--out", "c"]);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("c/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["variates"], 4);
}

#[test]
fn bad_input_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let rate = sedformer(tmp.path(), &["prepare", "--rate", "1.1", "--out", "x"]);
    assert_eq!(rate.status.code(), Some(2));

    let corpus = sedformer(tmp.path(), &["prepare", "--corpus", "missing.csv", "--out", "x"]);
    assert_eq!(corpus.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&corpus.stderr).contains("missing.csv"));

    run_ok(tmp.path(), &["prepare", "--series", "2", "--out", "data"]);
    let eval = sedformer(tmp.path(), &["eval", "--checkpoint", "nope.json", "--data", "data", "--out", "e"]);
    assert_eq!(eval.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&eval.stderr).contains("nope.json"));

    let sweep = sedformer(tmp.path(), &["sweep", "--data", "data", "--param", "width", "--out", "s"]);
    assert_eq!(sweep.status.code(), Some(2));

    let config = tmp.path().join("bad.json");
    fs::write(&config, "{ not json").unwrap();
    let bad = sedformer(tmp.path(), &["--config", config.to_str().unwrap(), "viz", "--out", "v"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_and_eval_write_their_artifacts() {
    let tmp = TempDir::new().unwrap();
    let (_, checkpoint) = trained(tmp.path());
    let model_dir = checkpoint.parent().unwrap();
    for f in ["config.json", "history.csv", "model.json"] {
        assert!(model_dir.join(f).exists(), "missing {f}");
    }
    let (header, rows) = csv_rows(&model_dir.join("history.csv"));
    assert_eq!(header, ["epoch", "train_loss", "val_mse", "val_mae"]);
    assert_eq!(rows.len(), 1);

    run_ok(tmp.path(), &["eval", "--checkpoint", checkpoint.to_str().unwrap(), "--data", "data", "--out", "eval"]);
    let (header, rows) = csv_rows(&tmp.path().join("eval/metrics.csv"));
    assert_eq!(header, ["rate", "split", "mse", "mae", "n_queries"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "test");
    let (header, rows) = csv_rows(&tmp.path().join("eval/baselines.csv"));
    assert_eq!(header, ["rate", "split", "forecaster", "mse", "mae", "n_queries"]);
    let names: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    assert_eq!(names, ["sedformer", "persistence", "mean"]);
    assert!(tmp.path().join("eval/config.json").exists());
}

#[test]
fn untrained_model_gives_finite_metrics() {
    let tmp = TempDir::new().unwrap();
    run_ok(tmp.path(), &["prepare", "--series", "2", "--out", "data"]);
    run_ok(tmp.path(), &["train", "--data", "data", "--out", "init", "--epochs", "0"]);
    run_ok(tmp.path(), &["eval", "--checkpoint", "init/model.json", "--data", "data", "--split", "val", "--out", "e"]);
    let (_, rows) = csv_rows(&tmp.path().join("e/metrics.csv"));
    for r in &rows {
        let mse: f64 = r[2].parse().unwrap();
        let mae: f64 = r[3].parse().unwrap();
        assert!(mse.is_finite() && mae.is_finite() && mse >= 0.0);
    }
}

#[test]
fn viz_writes_event_synchronous_rasters() {
    let tmp = TempDir::new().unwrap();
    run_ok(tmp.path(), &["viz", "--out", "viz"]);
    let dir = tmp.path().join("viz");
    let (header, rows) = csv_rows(&dir.join("spikes.csv"));
    assert_eq!(header, ["encoder", "t", "x", "spike"]);

    let mut steps: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        steps.entry(r[0].clone()).or_default().push(r[1].parse().unwrap());
    }
    assert_eq!(steps.keys().map(String::as_str).collect::<Vec<_>>(), ["conv", "delta", "sedse"]);
    // grid encoders run on an evenly spaced calendar, the event encoder on samples
    assert_eq!(steps["delta"], steps["conv"]);
    assert!(steps["sedse"].len() < steps["delta"].len());

    let svg = fs::read_to_string(dir.join("raster.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    let mut rows_seen = 0;
    for g in doc.descendants().filter(|n| n.attribute("class") == Some("row")) {
        rows_seen += 1;
        let enc = g.attribute("data-encoder").unwrap();
        for tick in g.descendants().filter(|n| n.attribute("class") == Some("spike")) {
            let t: f64 = tick.attribute("data-t").unwrap().parse().unwrap();
            assert!(steps[enc].iter().any(|&s| (s - t).abs() < 1e-9), "{enc} tick at {t} is not one of its steps");
        }
    }
    assert_eq!(rows_seen, 3);
}

#[test]
fn energy_report_is_additive_and_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (_, checkpoint) = trained(tmp.path());
    let ck = checkpoint.to_str().unwrap();
    run_ok(tmp.path(), &["energy", "--checkpoint", ck, "--data", "data", "--out", "e1"]);
    run_ok(tmp.path(), &["energy", "--checkpoint", ck, "--data", "data", "--out", "e2"]);
    let (a, b) = (dir_bytes(&tmp.path().join("e1")), dir_bytes(&tmp.path().join("e2")));
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_slice(&a["energy.json"]).unwrap();
    let sum: f64 = report["layers"].as_array().unwrap().iter().map(|l| l["energy_pj"].as_f64().unwrap()).sum();
    let total = report["total_pj"].as_f64().unwrap();
    assert!((sum - total).abs() <= 1e-9 * total, "{sum} vs {total}");
    assert!(a.contains_key("energy.txt"));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let tmp = TempDir::new().unwrap();
    run_ok(tmp.path(), &["prepare", "--series", "2", "--out", "data"]);
    let mut args = vec!["sweep", "--data", "data", "--param", "blocks", "--epochs", "1", "--out", "sweep"];
    args.extend(&SMALL_MODEL[..4]);
    run_ok(tmp.path(), &args);
    let (header, rows) = csv_rows(&tmp.path().join("sweep/sweep.csv"));
    assert_eq!(header, ["param", "value", "mse", "mae", "n_queries", "best_epoch"]);
    let values: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(values, ["1", "2", "3", "4"]);
    assert!(rows.iter().all(|r| r[0] == "blocks"));
}

#[test]
fn saved_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    run_ok(tmp.path(), &["viz", "--tau", "3", "--seed", "11", "--out", "a"]);
    let cfg = tmp.path().join("a/config.json");
    run_ok(tmp.path(), &["--config", cfg.to_str().unwrap(), "viz", "--out", "b"]);
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
}
