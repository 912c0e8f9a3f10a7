//! Deterministic report serialization.
//!
//! Every report is a CSV body preceded by exactly one `#`-prefixed manifest
//! line. The manifest carries the only run-varying value (the timestamp), so
//! two runs with the same configuration produce byte-identical output once
//! lines starting with `#` are dropped. JSON mirrors keep the same split:
//! rows are deterministic, the manifest object is not.

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Floats render with six significant digits in scientific notation
/// (`format!("{:.5e}")`), which keeps rows compact, locale-free, and stable
/// across platforms.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.5e}")
}

/// RFC 4180 quoting, applied only when the field content requires it.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Run metadata attached to every report.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool_version: &'static str,
    /// SHA-256 of the canonical TOML rendering of the effective
    /// configuration — the resolved settings, not the input file bytes, so
    /// equivalent spellings digest identically.
    pub config_digest: String,
    pub seed: u64,
    pub generated: String,
}

impl Manifest {
    pub fn new(canonical_config: &str, seed: u64) -> Self {
        let digest = Sha256::digest(canonical_config.as_bytes());
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            config_digest: format!("{digest:x}"),
            seed,
            generated: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        }
    }

    /// The one line of a report that may differ between otherwise identical
    /// runs. It starts with `#` so consumers can strip it before diffing.
    pub fn comment_line(&self) -> String {
        format!(
            "# skva {} config sha256:{} seed {} generated {}",
            self.tool_version, self.config_digest, self.seed, self.generated
        )
    }
}

/// Assembles a report: manifest comment, header row, then data rows, all
/// LF-terminated.
pub fn csv_report(manifest: &Manifest, header: &str, rows: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&manifest.comment_line());
    out.push('\n');
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    out
}

/// JSON mirror of a report: `{"manifest": ..., "rows": [...]}`.
pub fn json_report<T: Serialize>(manifest: &Manifest, rows: &[T]) -> String {
    let value = serde_json::json!({
        "manifest": manifest,
        "rows": rows,
    });
    let mut text = serde_json::to_string_pretty(&value).expect("report rows serialize");
    text.push('\n');
    text
}

pub const SWEEP_HEADER: &str = "policy,shared_len,batch,max_batch,latency_per_token,\
rate_per_request,system_throughput,normalized_throughput,row_kind";

pub fn sweep_row_csv(row: &skva_core::perf::SweepRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        csv_field(&row.policy),
        row.shared_len,
        row.batch,
        row.max_batch,
        fmt_float(row.latency_per_token),
        fmt_float(row.rate_per_request),
        fmt_float(row.system_throughput),
        fmt_float(row.normalized_throughput),
        row.kind.label(),
    )
}

pub const UTIL_HEADER: &str = "node_role,shared_len,batch,mfu,bw_util,cap_util,feasible";

/// One node-pool utilization sample, flattened for serialization.
#[derive(Debug, Clone, Serialize)]
pub struct UtilRow {
    pub node_role: &'static str,
    pub shared_len: u64,
    pub batch: u64,
    pub mfu: f64,
    pub bw_util: f64,
    pub cap_util: f64,
    pub feasible: bool,
}

pub fn util_row_csv(row: &UtilRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        row.node_role,
        row.shared_len,
        row.batch,
        fmt_float(row.mfu),
        fmt_float(row.bw_util),
        fmt_float(row.cap_util),
        row.feasible,
    )
}
