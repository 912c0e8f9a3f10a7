//! `skva` — drives the shared-KV attention reference pipeline.
//!
//! Three subcommands: `verify` replays randomized equivalence checks of the
//! numeric kernels, `sweep` evaluates serving throughput for every
//! configured policy, and `util` profiles per-node-pool utilization. Reports
//! are deterministic CSV (or JSON) apart from a single `#` manifest line.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error.

mod report;
mod verify;

use clap::{Parser, Subcommand};
use skva_core::config::{default_config, load_config, Config};
use skva_core::perf::{
    node_utilization, throughput, ModelOptions, OverlapModel, RowKind, PUBLISHED_PEAK_SPEEDUP,
};
use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "skva",
    version,
    about = "Shared-KV attention pipeline checks and serving-performance reports"
)]
struct Cli {
    /// Configuration file (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true, env = "SKVA_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for randomized verification; recorded in report manifests.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

fn parse_fault(s: &str) -> Result<verify::Fault, String> {
    s.parse()
}

fn parse_overlap(s: &str) -> Result<OverlapModel, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Check pipeline equivalences on randomized desk-scale cases.
    Verify {
        /// Cases per property.
        #[arg(long, default_value_t = 150)]
        cases: u64,

        /// Write the routing decisions the oracle property exercised to a
        /// CSV file.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,

        /// Corrupt one pipeline step to demonstrate failure detection.
        #[arg(long, hide = true, value_name = "FAULT", value_parser = parse_fault)]
        inject_fault: Option<verify::Fault>,
    },

    /// Evaluate serving throughput for every configured policy.
    Sweep {
        /// Write the report here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,

        /// Emit JSON instead of CSV.
        #[arg(long)]
        json: bool,

        /// Let small batches run at roofline speed instead of capping each
        /// request at the configured target rate.
        #[arg(long)]
        no_slo_cap: bool,

        /// How component times combine: sum (serial) or max (full overlap).
        #[arg(long, default_value = "sum", value_parser = parse_overlap)]
        overlap_model: OverlapModel,
    },

    /// Profile node-pool utilization across the configured batch sizes.
    Util {
        /// Write the report here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,

        /// Emit JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let config = match &cli.config {
        Some(path) => load_config(path)?,
        None => default_config(),
    };
    let manifest = report::Manifest::new(&config.to_toml_string(), cli.seed);

    match cli.command {
        Command::Verify {
            cases,
            trace,
            inject_fault,
        } => cmd_verify(&manifest, cli.seed, cases, trace, inject_fault),
        Command::Sweep {
            out,
            json,
            no_slo_cap,
            overlap_model,
        } => {
            let opts = ModelOptions {
                slo_cap: !no_slo_cap,
                overlap: overlap_model,
            };
            cmd_sweep(&config, &manifest, out, json, &opts)
        }
        Command::Util { out, json } => cmd_util(&config, &manifest, out, json),
    }
}

fn write_or_print(out: Option<PathBuf>, body: String) -> io::Result<()> {
    match out {
        Some(path) => fs::write(path, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

const TRACE_HEADER: &str = "case,case_seed,num_chunks,k,selected,scores";

fn trace_row_csv(row: &verify::TraceRow) -> String {
    let ids: Vec<String> = row.selected.iter().map(|id| id.to_string()).collect();
    let scores: Vec<String> = row.scores.iter().map(|s| report::fmt_float(*s)).collect();
    format!(
        "{},{:016x},{},{},{},{}",
        row.case,
        row.case_seed,
        row.num_chunks,
        row.k,
        ids.join(";"),
        scores.join(";"),
    )
}

fn cmd_verify(
    manifest: &report::Manifest,
    seed: u64,
    cases: u64,
    trace_path: Option<PathBuf>,
    fault: Option<verify::Fault>,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let opts = verify::VerifyOptions { seed, cases, fault };
    let (outcomes, trace) = verify::run(&opts);

    println!("verification: {cases} cases per property, seed {seed}");
    let mut failed = Vec::new();
    for o in &outcomes {
        match &o.failure {
            None => {
                let bound = match o.tolerance {
                    Some(t) => format!("worst {} of {t:.0e}", report::fmt_float(o.worst)),
                    None => "exact".to_owned(),
                };
                println!("  {:<32} {:>5} cases  {bound}  ok", o.name, o.cases);
            }
            Some(f) => {
                println!(
                    "  {:<32} FAILED at case {} (case seed {:016x}): {}",
                    o.name, f.case, f.case_seed, f.message
                );
                failed.push(o.name);
            }
        }
    }

    if let Some(path) = trace_path {
        let rows: Vec<String> = trace.iter().map(trace_row_csv).collect();
        fs::write(&path, report::csv_report(manifest, TRACE_HEADER, &rows))?;
        println!("routing trace: {} decisions -> {}", trace.len(), path.display());
    }

    if failed.is_empty() {
        println!("all {} properties hold", outcomes.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "verification failed: {} (reproduce with --seed {seed})",
            failed.join(", ")
        );
        Ok(ExitCode::from(1))
    }
}

fn cmd_sweep(
    config: &Config,
    manifest: &report::Manifest,
    out: Option<PathBuf>,
    json: bool,
    opts: &ModelOptions,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    // Row order: policies as configured, then shared length ascending as
    // configured, then batch ascending with the summary row last.
    let mut rows = Vec::new();
    for policy in &config.policies {
        rows.extend(throughput(
            policy,
            &config.workload,
            &config.model,
            &config.hardware,
            opts,
        ));
    }

    let body = if json {
        report::json_report(manifest, &rows)
    } else {
        let lines: Vec<String> = rows.iter().map(report::sweep_row_csv).collect();
        report::csv_report(manifest, report::SWEEP_HEADER, &lines)
    };
    write_or_print(out, body)?;

    let peak = rows
        .iter()
        .filter(|r| r.kind == RowKind::MaxBatch)
        .map(|r| r.normalized_throughput)
        .fold(0.0, f64::max);
    eprintln!(
        "peak normalized throughput {peak:.1} (published reference {PUBLISHED_PEAK_SPEEDUP})"
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_util(
    config: &Config,
    manifest: &report::Manifest,
    out: Option<PathBuf>,
    json: bool,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    // Row order: batch ascending as configured, unique pool before shared.
    let mut rows = Vec::new();
    for &batch in &config.workload.batch_sizes {
        for profile in node_utilization(&config.workload, &config.model, &config.hardware, batch) {
            rows.push(report::UtilRow {
                node_role: profile.role.label(),
                shared_len: config.workload.shared_len,
                batch,
                mfu: profile.mfu,
                bw_util: profile.bw_util,
                cap_util: profile.cap_util,
                feasible: profile.feasible,
            });
        }
    }

    let body = if json {
        report::json_report(manifest, &rows)
    } else {
        let lines: Vec<String> = rows.iter().map(report::util_row_csv).collect();
        report::csv_report(manifest, report::UTIL_HEADER, &lines)
    };
    write_or_print(out, body)?;
    Ok(ExitCode::SUCCESS)
}
