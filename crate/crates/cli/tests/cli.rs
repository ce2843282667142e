//! End-to-end checks of the `coopflow` binary: exit codes, audit
//! headers, determinism of `gen`, and a miniature gen -> train -> sweep
//! pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_coopflow");

const TINY_SPEC: &str = r#"seed = 5

[world]
n_objects = 3
n_frames = 6
point_density = 80.0
ground_points = 150
train_scenarios = 2
eval_scenarios = 1

[train]
stage1_epochs = 1
stage2_epochs = 1

[channel]
latencies_ms = [0, 200]

[eval]
variants = ["flow_fusion", "mid_no_pred", "non_fusion"]
window = [0.2, 0.6]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_spec(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_str().unwrap().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn usage_errors_exit_1_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1), "unknown subcommand is a usage error");

    let bad = write_spec(tmp.path(), "seed = 1\n[world]\nnum_objects = 3\n");
    let out = run(&["verify", "--spec", &bad]);
    assert_eq!(out.status.code(), Some(2), "unknown spec key is a config error");
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("num_objects"), "error should name the key: {msg}");

    let good = write_spec(tmp.path(), TINY_SPEC);
    let out = run(&["sweep", "--spec", &good, "--checkpoint", "/nonexistent", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(3), "missing checkpoint is a runtime error");

    let out = run(&["gen", "--spec", &good, "--latencies", "abc", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1), "unparseable latency override is a usage error");

    let out = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn gen_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), TINY_SPEC);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&["gen", "--spec", &spec, "--out", a.to_str().unwrap()]).status.success());
    assert!(run(&["gen", "--spec", &spec, "--out", b.to_str().unwrap()]).status.success());
    let (sa, sb) = (dir_snapshot(&a), dir_snapshot(&b));
    assert_eq!(sa.len(), 3, "expected 2 train + 1 eval scenario files");
    assert_eq!(sa, sb, "same spec must generate identical directory content");
    for (name, bytes) in &sa {
        let text = String::from_utf8_lossy(bytes);
        assert!(text.contains("spec_sha256"), "{name} lacks the audit hash");
    }
}

#[test]
fn verify_exits_0_on_a_correct_build() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), TINY_SPEC);
    let out = run(&["verify", "--spec", &spec]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "verify should pass: {stdout}");
    assert!(stdout.contains("PASS"), "verify should print check lines: {stdout}");
    assert!(!stdout.contains("FAIL"), "no check may fail: {stdout}");
}

#[test]
fn pipeline_produces_audited_results() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), TINY_SPEC);
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    let res = tmp.path().join("res");

    let out = run(&["gen", "--spec", &spec, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "gen failed: {}", String::from_utf8_lossy(&out.stderr));

    let out = run(&[
        "train",
        "--spec",
        &spec,
        "--scenarios",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.join("narrow.ckpt").exists());
    assert!(!ckpt.join("wide.ckpt").exists(), "no wide variant was requested");
    let log = fs::read_to_string(ckpt.join("train_log.csv")).unwrap();
    assert!(log.starts_with("# spec_sha256 = "), "log lacks audit header: {log}");
    assert!(log.contains("stage,width,epoch,loss,cls,reg"));
    assert!(log.contains("stage2,narrow,"), "derivative generator must be trained");

    let out = run(&[
        "sweep",
        "--spec",
        &spec,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        res.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "sweep failed: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(res.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# spec_sha256 = "));
    assert_eq!(lines[1], "# seed = 5");
    assert_eq!(lines[2], "variant,latency_ms,map_bev_50,map_bev_70,avg_byte,frames,seed");
    assert_eq!(lines.len(), 3 + 6, "3 variants x 2 latencies plus headers");

    // The silent variant bills zero bytes at every latency.
    for l in lines.iter().filter(|l| l.starts_with("non_fusion,")) {
        let avg_byte = l.split(',').nth(4).unwrap();
        assert_eq!(avg_byte, "0.0", "non-fusion row should bill nothing: {l}");
    }
    // At zero staleness the extrapolating variant reduces to the plain
    // one, so their metric columns agree exactly.
    let metric_cols = |prefix: &str| {
        let row = lines.iter().find(|l| l.starts_with(prefix)).unwrap();
        row.split(',').skip(2).take(2).map(str::to_string).collect::<Vec<_>>()
    };
    assert_eq!(
        metric_cols("flow_fusion,0,"),
        metric_cols("mid_no_pred,0,"),
        "zero-latency mAP must match between extrapolating and plain fusion"
    );

    for tag in ["flow_fusion", "mid_no_pred", "non_fusion"] {
        let curve = fs::read_to_string(res.join(format!("curve_{tag}.dat"))).unwrap();
        let data_rows: Vec<&str> = curve.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data_rows.len(), 2, "one curve point per latency for {tag}");
        for row in data_rows {
            assert_eq!(row.split_whitespace().count(), 2, "curve rows are two columns");
        }
    }
}

#[test]
fn latency_and_variant_overrides_shape_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), TINY_SPEC);
    let res = tmp.path().join("res");
    let ckpt = tmp.path().join("ckpt");
    // Variants that need no training: sweep straight from init params is
    // invalid (no checkpoint file), so train first with 0 epochs.
    let quick = TINY_SPEC
        .replace("stage1_epochs = 1", "stage1_epochs = 0")
        .replace("stage2_epochs = 1", "stage2_epochs = 0");
    let spec0 = tmp.path().join("quick.toml");
    fs::write(&spec0, quick).unwrap();
    let data = tmp.path().join("data");
    assert!(run(&["gen", "--spec", spec0.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .status
        .success());
    assert!(run(&[
        "train",
        "--spec",
        spec0.to_str().unwrap(),
        "--scenarios",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap()
    ])
    .status
    .success());
    let out = run(&[
        "sweep",
        "--spec",
        &spec,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        res.to_str().unwrap(),
        "--variants",
        "non_fusion",
        "--latencies",
        "0",
        "--seed",
        "9",
    ]);
    assert!(out.status.success(), "sweep failed: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(res.join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2, "header plus exactly one overridden cell");
    assert!(rows[1].starts_with("non_fusion,0,"), "override should pick the cell: {}", rows[1]);
    assert!(rows[1].ends_with(",9"), "--seed must land in the seed column: {}", rows[1]);
    assert!(csv.contains("# seed = 9"));
}
