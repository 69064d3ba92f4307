//! Drives the `hsmc` binary end to end through a temporary directory.

use std::process::{Command, Output};

use serde_json::Value;

/// Runs the binary on a whitespace-separated argument line. Temporary
/// paths contain no spaces.
fn hsmc(line: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsmc"))
        .args(line.split_whitespace())
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

#[test]
fn generate_train_filter_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data/train.jsonl");
    let gen = stdout_json(&hsmc(&format!(
        "generate --kind synthetic --seed 4 --out {} --sequences 3 --length 6",
        data.display()
    )));
    assert_eq!(gen["sequences"], 3);
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 3);

    let out_dir = dir.path().join("run");
    let config = dir.path().join("config.json");
    let cfg = serde_json::json!({
        "model": "nn-gssm",
        "particles": 3,
        "steps": 2,
        "step_size": 0.05,
        "neural": { "latent_dim": 2, "transition_hidden": 4, "decoder_hidden": 4 },
        "metric": { "hidden": 4 },
        "optimizer": { "learning_rate": 0.01, "steps": 3 },
        "seed": 1,
        "dataset": data,
        "output_dir": out_dir,
    });
    std::fs::write(&config, cfg.to_string()).unwrap();
    let trained = stdout_json(&hsmc(&format!("train --config {}", config.display())));
    assert_eq!(trained["steps"], 3);
    assert!(trained["train_elbo"].as_f64().unwrap().is_finite());
    let ckpt = out_dir.join("final.json");
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let filtered = stdout_json(&hsmc(&format!(
        "filter --checkpoint {} --data {} --K 4 --S 2",
        ckpt.display(),
        data.display()
    )));
    assert!(filtered["logZ"].as_f64().unwrap().is_finite());
    assert_eq!(filtered["sequences"].as_array().unwrap().len(), 3);

    // S=0 through the CLI is the bootstrap filter, bit for bit
    let h0 = stdout_json(&hsmc(&format!(
        "filter --checkpoint {} --data {} --K 4 --S 0 --seed 9",
        ckpt.display(),
        data.display()
    )));
    let b = stdout_json(&hsmc(&format!(
        "filter --checkpoint {} --data {} --K 4 --method smc --seed 9",
        ckpt.display(),
        data.display()
    )));
    assert_eq!(h0["logZ"].as_f64().unwrap().to_bits(), b["logZ"].as_f64().unwrap().to_bits());

    let table_path = dir.path().join("table.json");
    let table = stdout_json(&hsmc(&format!(
        "eval --checkpoint {} --data {} --K 2,4 --S 1 --reps 3 --out {}",
        ckpt.display(),
        data.display(),
        table_path.display()
    )));
    assert_eq!(table["cells"].as_array().unwrap().len(), 2);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&table_path).unwrap()).unwrap();
    assert_eq!(written, table);
}

#[test]
fn check_grad_passes_and_reports() {
    let r = stdout_json(&hsmc("check-grad --model lgssm --seed 2"));
    assert!(r["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn ingest_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trips.csv");
    std::fs::write(
        &csv,
        "starttime,stoptime,start station name,end station name\n\
         2020-01-01 08:10:00,2020-01-01 08:30:00,A,B\n\
         2020-01-01 08:40:00,2020-01-01 09:05:00,A,B\n\
         2020-01-01 09:15:00,2020-01-01 09:20:00,B,A\n\
         2020-01-01 10:00:00,2020-01-01 10:30:00,A,A\n",
    )
    .unwrap();
    let out = dir.path().join("bike.jsonl");
    let report = stdout_json(&hsmc(&format!(
        "ingest --input {} --out {} --min-span-days 0 --min-mean-per-hour 0",
        csv.display(),
        out.display()
    )));
    assert_eq!(report["rows_read"], 4);
    assert_eq!(report["stations_kept"], serde_json::json!(["A", "B"]));
    assert_eq!(report["hours"], 3);
    let line: Value = serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(line["y"], serde_json::json!([[2.0, 0.0], [0.0, 1.0], [1.0, 0.0]]));
}

#[test]
fn errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let e = stderr_json(&hsmc(&format!("train --config {}", missing.display())));
    assert_eq!(e["error"], "io");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "particles": 3, "no_such_field": 1 }"#).unwrap();
    let e = stderr_json(&hsmc(&format!("train --config {}", bad.display())));
    assert_eq!(e["error"], "json");
    assert!(e["message"].as_str().unwrap().contains("no_such_field"));

    let data = dir.path().join("d.jsonl");
    std::fs::write(&data, "").unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        serde_json::json!({ "dataset": data, "steps": 30, "step_size": 0.05, "output_dir": dir.path() }).to_string(),
    )
    .unwrap();
    let e = stderr_json(&hsmc(&format!("train --config {}", cfg.display())));
    assert_eq!(e["error"], "config");
}
