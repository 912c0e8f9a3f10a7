//! Behavioral tests of the `skva` binary: flag handling, report shape,
//! config loading, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn skva(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skva"))
        .args(args)
        .env_remove("SKVA_CONFIG")
        .output()
        .expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn data_lines(body: &str) -> Vec<&str> {
    body.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn sweep_emits_the_documented_csv_shape() {
    let out = skva(&["sweep"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let lines = data_lines(&text);
    assert_eq!(
        lines[0],
        "policy,shared_len,batch,max_batch,latency_per_token,rate_per_request,\
system_throughput,normalized_throughput,row_kind"
    );
    // 5 policies x 5 shared lengths, each with at least the summary row.
    assert!(lines.len() > 25);
    for line in &lines[1..] {
        assert_eq!(line.matches(',').count(), 8, "column count in {line}");
    }
    // The baseline policy normalizes to exactly 1 everywhere.
    for line in lines[1..].iter().filter(|l| l.starts_with("FlashAttention")) {
        let norm = line.split(',').nth(7).unwrap();
        assert_eq!(norm, "1.00000e0", "in {line}");
    }
    // One summary row per (policy, shared length).
    let summaries = lines.iter().filter(|l| l.ends_with(",max_batch")).count();
    assert_eq!(summaries, 25);
    // The peak ratio is reported next to the published figure on stderr.
    let err = stderr(&out);
    assert!(err.contains("peak normalized throughput"), "stderr: {err}");
    assert!(err.contains("538.7"), "stderr: {err}");
}

#[test]
fn util_emits_two_pool_rows_per_batch() {
    let out = skva(&["util"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let lines = data_lines(&text);
    assert_eq!(
        lines[0],
        "node_role,shared_len,batch,mfu,bw_util,cap_util,feasible"
    );
    // Default batch list has 9 entries; each contributes both pools.
    assert_eq!(lines.len(), 1 + 9 * 2);
    assert!(lines[1].starts_with("unique_node,"));
    assert!(lines[2].starts_with("shared_node,"));
}

#[test]
fn manifest_line_carries_version_digest_and_seed() {
    let out = skva(&["sweep", "--seed", "7"]);
    let text = stdout(&out);
    let manifest = text.lines().next().unwrap();
    assert!(manifest.starts_with("# skva "));
    assert!(manifest.contains("config sha256:"));
    assert!(manifest.contains("seed 7"));
    assert!(manifest.contains("generated "));
}

#[test]
fn verify_passes_and_reports_each_property() {
    let out = skva(&["verify", "--cases", "25"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for name in [
        "chunked-merge-equivalence",
        "merge-associativity",
        "merge-permutation-invariance",
        "batched-gemm-bit-equality",
        "routing-topk-oracle",
        "routing-coverage-transparency",
        "decode-concat-equivalence",
    ] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
    assert!(text.contains("all 7 properties hold"));
}

#[test]
fn injected_fault_fails_verification_with_exit_one() {
    let out = skva(&["verify", "--cases", "10", "--inject-fault", "merge-sign"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("FAILED"));
    assert!(text.contains("chunked-merge-equivalence"));
    assert!(text.contains("case seed"));
}

#[test]
fn unknown_fault_name_is_a_usage_error() {
    let out = skva(&["verify", "--inject-fault", "bit-rot"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("merge-sign"));
}

#[test]
fn trace_file_records_one_routing_decision_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let out = skva(&["verify", "--cases", "12", "--trace", path.to_str().unwrap()]);
    assert!(out.status.success());
    let body = std::fs::read_to_string(&path).unwrap();
    let lines = data_lines(&body);
    assert_eq!(lines[0], "case,case_seed,num_chunks,k,selected,scores");
    assert_eq!(lines.len(), 1 + 12);
    // Selected ids and scores are semicolon-joined, one pair of columns.
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), 6);
}

#[test]
fn json_mirror_matches_the_csv_rows() {
    let csv = skva(&["sweep"]);
    let json = skva(&["sweep", "--json"]);
    assert!(json.status.success());
    let value: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert!(value["manifest"]["config_digest"].is_string());
    assert_eq!(value["manifest"]["seed"], 42);
    let rows = value["rows"].as_array().unwrap();
    let csv_rows = data_lines(&stdout(&csv)).len() - 1;
    assert_eq!(rows.len(), csv_rows);
    assert!(rows[0]["policy"].is_string());
    assert!(rows[0]["normalized_throughput"].is_number());
    assert_eq!(rows[0]["kind"], "sweep");
}

#[test]
fn sweep_out_flag_writes_the_report_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    let out = skva(&["sweep", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).is_empty());
    let body = std::fs::read_to_string(&path).unwrap();
    assert!(body.lines().count() > 25);
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        r#"
[workload]
shared_len = "8K"
shared_lens = ["8K"]
unique_len = "1K"
chunk_size = "1K"
sparsity = 0.5
batch_sizes = [1, 2]
"#,
    )
    .unwrap();
    path
}

#[test]
fn config_file_reshapes_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path());
    let out = skva(&["sweep", "--config", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    let lines = data_lines(&text);
    // One shared length, batches {1, 2} plus a summary row, five policies.
    assert_eq!(lines.len() - 1, 5 * 3);
    for line in &lines[1..] {
        assert_eq!(line.split(',').nth(1).unwrap(), "8192", "in {line}");
    }
}

#[test]
fn config_env_var_is_equivalent_to_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path());
    let by_flag = skva(&["sweep", "--config", path.to_str().unwrap()]);
    let by_env = Command::new(env!("CARGO_BIN_EXE_skva"))
        .args(["sweep"])
        .env("SKVA_CONFIG", &path)
        .output()
        .unwrap();
    assert!(by_env.status.success());
    assert_eq!(data_lines(&stdout(&by_flag)), data_lines(&stdout(&by_env)));
}

#[test]
fn example_config_reproduces_the_defaults() {
    // The annotated reference config spells out every default; if the
    // defaults move, this pins the docs to move with them.
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/example.toml");
    let from_example = skva(&["sweep", "--config", path]);
    let built_in = skva(&["sweep"]);
    assert!(from_example.status.success());
    assert_eq!(
        data_lines(&stdout(&from_example)),
        data_lines(&stdout(&built_in))
    );
    // Same resolved config, same digest: the manifest lines differ only in
    // their trailing timestamp.
    let digest = |out: &Output| {
        let text = stdout(out);
        let manifest = text.lines().next().unwrap().to_string();
        manifest.split(" generated ").next().unwrap().to_string()
    };
    assert_eq!(digest(&from_example), digest(&built_in));
}

#[test]
fn invalid_config_is_rejected_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[workload]\nsparsity = 1.5\n").unwrap();
    let out = skva(&["sweep", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("workload.sparsity"));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = skva(&["sweep", "--config", "/nonexistent/skva.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overlap_model_flag_accepts_max_and_rejects_others() {
    let ok = skva(&["sweep", "--overlap-model", "max"]);
    assert!(ok.status.success());
    let bad = skva(&["sweep", "--overlap-model", "average"]);
    assert_eq!(bad.status.code(), Some(2));

    // Overlapped latencies can only be shorter, so capped throughput rows
    // are at least the serial ones.
    let serial = skva(&["sweep"]);
    let latency_at = |out: &Output, idx: usize| -> f64 {
        data_lines(&stdout(out))[idx]
            .split(',')
            .nth(4)
            .unwrap()
            .parse()
            .unwrap()
    };
    for idx in [1, 5, 12] {
        assert!(latency_at(&ok, idx) <= latency_at(&serial, idx));
    }
}
