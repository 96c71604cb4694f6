//! End-to-end runs of the binary on a small synthetic IDX dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SIDE: usize = 4;

/// Class `c` lights pixel `c` (and a faint neighbour) so the task is learnable.
fn write_idx(dir: &Path, prefix: &str, count: usize) {
    let mut images = Vec::new();
    for v in [0x0803u32, count as u32, SIDE as u32, SIDE as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::new();
    for v in [0x0801u32, count as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    for k in 0..count {
        let class = (k * 7) % 10;
        for p in 0..SIDE * SIDE {
            images.push(if p == class { 250 } else if p == class + 3 { 90 } else { ((k + p) % 4 * 10) as u8 });
        }
        labels.push(class as u8);
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", 200);
    write_idx(dir.path(), "t10k", 30);
    dir
}

fn spnn(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spnn"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .output()
        .unwrap()
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--shape", "16,12,10", "--split", "120,40,40", "--epochs", "3", "--batch", "10", "--lr", "0.05",
        "--out", out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    spnn(data, &args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<serde_json::Value> {
    stdout(o).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn trained_model(dir: &TempDir, extra: &[&str]) -> PathBuf {
    let model = dir.path().join("m.spnn");
    let out = train(dir.path(), &model, extra);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

#[test]
fn train_emits_metrics_and_model() {
    let dir = fixture();
    let model = dir.path().join("m.spnn");
    let out = train(dir.path(), &model, &["--sparsity", "0.5", "--quant", "ternary", "--official-test"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 4);
    for (k, line) in lines[..3].iter().enumerate() {
        assert_eq!(line["epoch"], k + 1);
        assert!(line["test_error_quantized"].is_number());
        assert!(line["official_test_error"].is_number());
    }
    assert_eq!(lines[3]["event"], "done");
    assert!(model.is_file());
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = fixture();
    let (a, b) = (dir.path().join("a.spnn"), dir.path().join("b.spnn"));
    for path in [&a, &b] {
        assert!(train(dir.path(), path, &["--sparsity", "0.75", "--seed", "9"]).status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.spnn");
    assert!(train(dir.path(), &c, &["--sparsity", "0.75", "--seed", "10"]).status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn eval_reports_rate_and_parameters() {
    let dir = fixture();
    let model = trained_model(&dir, &[]);
    let m = model.to_str().unwrap();
    let out = spnn(dir.path(), &["eval", "--model", m, "--split", "120,40,40"]);
    assert!(out.status.success());
    let v = &json_lines(&out)[0];
    assert_eq!(v["samples"], 40);
    assert_eq!(v["parameters"], 16 * 12 + 12 * 10 + 12 + 10);
    assert_eq!(v["parameters_with_batch_norm"], 16 * 12 + 12 * 10 + 12 + 10 + 24);

    let out = spnn(dir.path(), &["eval", "--model", m, "--test-mode", "quantized", "--set", "official"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(json_lines(&out)[0]["mode"], "real");
}

#[test]
fn report_totals_add_up() {
    let dir = fixture();
    let model = trained_model(&dir, &["--sparsity", "0.5", "--quant", "binary"]);
    let out = spnn(dir.path(), &["report", "--model", model.to_str().unwrap(), "--json"]);
    assert!(out.status.success());
    let v = &json_lines(&out)[0];
    let layers = v["layers"].as_array().unwrap();
    let sum: u64 = layers.iter().map(|l| l["memory_bits"].as_u64().unwrap()).sum();
    assert_eq!(v["total_memory_bits"].as_u64().unwrap(), sum);
    // 16 rows on a 4-bit de Bruijn register at half density: 8 per neuron.
    assert!(layers[0]["neuron_memory_bits"].as_array().unwrap().iter().all(|b| b == 8));

    let table = spnn(dir.path(), &["report", "--model", model.to_str().unwrap()]);
    assert!(stdout(&table).contains("total memory bits"));
}

#[test]
fn simulate_matches_software_in_both_modes() {
    let dir = fixture();
    let model = trained_model(&dir, &["--sparsity", "0.5", "--quant", "ternary"]);
    let trace = dir.path().join("trace.jsonl");
    for (mode, layer, inputs) in [("sparse", "0", 16), ("fc", "0", 16), ("sparse", "1", 12)] {
        let out = spnn(
            dir.path(),
            &["simulate", "--model", model.to_str().unwrap(), "--layer", layer, "--input", "3", "--mode", mode, "--trace", trace.to_str().unwrap()],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v = &json_lines(&out)[0];
        assert_eq!(v["match"], true);
        assert_eq!(v["cycles"], inputs);
        assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), inputs);
    }
    let fixed = spnn(dir.path(), &["simulate", "--model", model.to_str().unwrap(), "--fixed"]);
    assert!(fixed.status.success(), "{}", String::from_utf8_lossy(&fixed.stderr));
}

#[test]
fn exit_codes() {
    let dir = fixture();
    let model = dir.path().join("m.spnn");
    // Usage errors.
    assert_eq!(spnn(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(train(dir.path(), &model, &["--sparsity", "1.5"]).status.code(), Some(2));
    assert_eq!(train(dir.path(), &model, &["--shape", "16,0,10"]).status.code(), Some(2));
    // Data errors.
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(train(empty.path(), &model, &[]).status.code(), Some(3));
    fs::write(&model, b"SPNN garbage").unwrap();
    assert_eq!(spnn(dir.path(), &["report", "--model", model.to_str().unwrap()]).status.code(), Some(3));
    // Divergence.
    assert_eq!(train(dir.path(), &model, &["--lr", "1e30"]).status.code(), Some(4));
}
