use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn riskrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskrank"))
        .args(args)
        .env_remove("RISKRANK_VERBOSE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = riskrank(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn prepared(dir: &Path, seed: &str) {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--n", "400", "--seed", seed, "--out", d]);
    ok(&["split", "--data", d, "--seed", seed]);
    ok(&["group", "--data", d, "--size", "50", "--seed", seed, "--exhaustive-test-groups"]);
}

fn labels(csv_path: &Path) -> Vec<u8> {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    let li = r.headers().unwrap().iter().position(|h| h == "label").unwrap();
    r.records().map(|row| row.unwrap()[li].parse().unwrap()).collect()
}

fn groups(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_groups_hold_one_positive_each() {
    let tmp = tempfile::tempdir().unwrap();
    prepared(tmp.path(), "5");
    let y = labels(&tmp.path().join("train.csv"));
    let gs = groups(&tmp.path().join("groups_train.jsonl"));
    assert!(!gs.is_empty());
    for g in gs {
        let members: Vec<usize> = serde_json::from_value(g["members"].clone()).unwrap();
        let pos = members.iter().filter(|&&m| y[m] == 1).count();
        assert_eq!(pos, 1, "group {}", g["group_id"]);
        assert!(members.len() <= 50);
    }
}

#[test]
fn oracle_scores_score_perfectly_with_prior() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepared(d, "2");
    let y = labels(&d.join("test.csv"));
    let mut w = csv::Writer::from_path(d.join("oracle.csv")).unwrap();
    w.write_record(["group_id", "row", "score"]).unwrap();
    let mut n = 0;
    for g in groups(&d.join("groups_test.jsonl")) {
        for m in g["members"].as_array().unwrap() {
            let m = m.as_u64().unwrap() as usize;
            w.write_record([g["group_id"].to_string(), m.to_string(), y[m].to_string()]).unwrap();
            n += 1;
        }
    }
    w.flush().unwrap();
    drop(w);
    let pos = y.iter().filter(|&&v| v == 1).count();
    assert!(pos > 0);
    assert_eq!(n, y.len());
    let prior = format!("{}", pos as f64 / n as f64);
    let out = d.join("report");
    let ds = d.to_str().unwrap();
    let table = ok(&[
        "eval", "--data", ds, "--scores", d.join("oracle.csv").to_str().unwrap(),
        "--with-prior", "--prior", &prior, "--out", out.to_str().unwrap(),
    ]);
    assert!(table.contains("with-prior"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["f1"].as_f64(), Some(1.0), "{report}");
    assert!(report["seed"].is_u64());
    assert_eq!(report["config_hash"].as_str().map(str::len), Some(64));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seed", "1"]);
    assert!(out.starts_with("max_relative_error="), "{out}");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut hashes: HashMap<String, Vec<u8>> = HashMap::new();
    for dir in [a.path(), b.path()] {
        prepared(dir, "8");
        let d = dir.to_str().unwrap();
        let m = dir.join("m");
        ok(&[
            "train", "--data", d, "--out", m.to_str().unwrap(), "--seed", "8",
            "--set", "epochs=2", "--set", "d_k=8", "--set", "ff_width=16",
            "--set", "n_self_layers=1", "--set", "n_cross_layers=1",
        ]);
        ok(&["rank", "--data", d, "--model", m.to_str().unwrap(), "--out", dir.join("s.csv").to_str().unwrap()]);
        for f in [
            "schema.json", "records.csv", "ledger.csv", "train.csv", "test.csv",
            "groups_train.jsonl", "groups_test.jsonl", "s.csv", "m/model.ckpt", "m/train.json",
        ] {
            let bytes = fs::read(dir.join(f)).unwrap();
            match hashes.get(f) {
                Some(prev) => assert!(prev == &bytes, "{f} differs between runs"),
                None => {
                    hashes.insert(f.to_string(), bytes);
                }
            }
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("m/train.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 8);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn errors_are_one_line_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [(&[&str], i32, &str); 4] = [
        (&["frobnicate"], 2, "usage"),
        (&["gradcheck", "--set", "colour=blue"], 2, "config"),
        (&["split", "--data", "/definitely/not/here"], 3, "data"),
        (&["eval", "--data", tmp.path().to_str().unwrap(), "--scores", "x.csv"], 3, ""),
    ];
    for (args, code, kind) in cases {
        let o = riskrank(args);
        assert_eq!(o.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error kind={kind}")), "{err}");
    }
}
