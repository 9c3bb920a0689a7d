mod config;
mod output;
mod run;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aqsgd_core::simnet::{self, Compression};
use aqsgd_core::verify;
use clap::{Args, Parser, Subcommand};

use config::{RawConfig, RunSpec};

#[derive(Parser)]
#[command(name = "aqsgd", version, about = "Pipeline-parallel SGD with quantized activation deltas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, summary and manifest.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Record the error decomposition and write audit.json.
        #[arg(long)]
        audit: bool,
        /// Re-run the configuration recorded in a manifest.json.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Run a named self-check suite, or `all`.
    Verify {
        suite: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of a grid over several seeds and write sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Throughput of a pipeline preset across a bandwidth range.
    Simnet {
        #[arg(long, default_value = "gpt2xl-8stage")]
        preset: String,
        /// Comma-separated; paired with --bw-bits.
        #[arg(long, default_value = "4,4")]
        fw_bits: String,
        #[arg(long, default_value = "4,8")]
        bw_bits: String,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 1e7)]
        min_bw: f64,
        #[arg(long, default_value_t = 1e11)]
        max_bw: f64,
        #[arg(long, default_value = "simnet-out")]
        out: PathBuf,
    },
}

/// Run-file path plus overrides. Every override accepts a comma list, used
/// by `sweep` as a grid axis.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    fw_bits: Option<String>,
    #[arg(long)]
    bw_bits: Option<String>,
    #[arg(long)]
    buffer_bits: Option<String>,
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn raw(&self) -> Result<RawConfig, String> {
        let mut raw = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                RawConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => RawConfig::default(),
        };
        let overrides = [
            ("seed", &self.seed),
            ("mode", &self.mode),
            ("fw_bits", &self.fw_bits),
            ("bw_bits", &self.bw_bits),
            ("buffer_bits", &self.buffer_bits),
            ("stages", &self.stages),
            ("epochs", &self.epochs),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                raw.set(key, v).map_err(|e| e.to_string())?;
            }
        }
        Ok(raw)
    }
}

enum CmdError {
    /// Bad config or arguments: exit 2.
    Usage(String),
    /// Failed check or runtime failure: exit 1.
    Failure(String),
}

fn usage(e: impl Into<String>) -> CmdError {
    CmdError::Usage(e.into())
}

fn failure(e: impl Into<String>) -> CmdError {
    CmdError::Failure(e.into())
}

fn load_manifest(path: &Path) -> Result<RunSpec, CmdError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_train(args: &RunArgs, audit: bool, manifest: Option<&Path>) -> Result<(), CmdError> {
    let spec = match manifest {
        Some(path) => load_manifest(path)?,
        None => {
            let raw = args.raw().map_err(usage)?;
            RunSpec::from_raw(&raw).map_err(|e| usage(e.to_string()))?
        }
    };
    let prepared = run::prepare(&spec, audit).map_err(usage)?;
    let outcome = run::execute(&prepared).map_err(failure)?;
    let dir = &args.out;
    output::ensure_dir(dir).map_err(failure)?;
    let boundaries = prepared.spec.config.stages - 1;
    output::write_metrics(&dir.join("metrics.csv"), boundaries, &outcome.metrics).map_err(failure)?;
    let summary = run::summarize(&prepared.spec, &outcome);
    output::write_json(&dir.join("summary.json"), &summary).map_err(failure)?;
    let mut outputs = vec![PathBuf::from("metrics.csv"), PathBuf::from("summary.json")];
    if audit {
        let report = run::audit(&prepared, &outcome).map_err(failure)?;
        output::write_json(&dir.join("audit.json"), &report).map_err(failure)?;
        outputs.push(PathBuf::from("audit.json"));
        println!(
            "audit: lemma1 {} ({}), lemma2 {}",
            if report.lemma1.pass { "pass" } else { "fail" },
            if report.lemma1.hard { "hard" } else { "soft" },
            report
                .lemma2_theorem1
                .as_ref()
                .map_or("not run", |r| if r.pass { "pass" } else { "fail" })
        );
    }
    let manifest = output::Manifest::new(
        "train",
        &prepared.spec.config,
        Some(prepared.spec.dataset.clone()),
        vec![prepared.spec.config.seed],
        outputs,
    );
    output::write_json(&dir.join("manifest.json"), &manifest).map_err(failure)?;
    match summary.final_loss {
        Some(l) if !summary.diverged => println!("final loss {l:.6e} after {} steps", summary.steps),
        _ => println!("diverged at step {}", summary.diverged_at.unwrap_or(0)),
    }
    Ok(())
}

fn cmd_verify(suite: &str, out: Option<&Path>) -> Result<(), CmdError> {
    let names: Vec<&str> = if suite == "all" {
        verify::SUITES.to_vec()
    } else if verify::SUITES.contains(&suite) {
        vec![suite]
    } else {
        return Err(usage(format!("unknown suite `{suite}`; expected one of {:?} or all", verify::SUITES)));
    };
    let mut reports = Vec::new();
    for name in names {
        let report = verify::run_suite(name).map_err(|e| failure(e.to_string()))?;
        for c in &report.checks {
            println!("{} {name}: {} ({})", if c.pass { "ok  " } else { "FAIL" }, c.label, c.detail);
        }
        reports.push(report);
    }
    if let Some(dir) = out {
        output::ensure_dir(dir).map_err(failure)?;
        output::write_json(&dir.join("verify.json"), &reports).map_err(failure)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(failure(format!("suites failed: {}", failed.join(", "))))
    }
}

fn parse_bits(list: &str) -> Result<Vec<u8>, CmdError> {
    list.split(',')
        .map(|s| s.trim().parse::<u8>().map_err(|_| usage(format!("bad bit width `{s}`"))))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_simnet(
    preset: &str,
    fw: &str,
    bw: &str,
    points: usize,
    min_bw: f64,
    max_bw: f64,
    out: &Path,
) -> Result<(), CmdError> {
    let pipe = simnet::preset(preset).map_err(|e| usage(e.to_string()))?;
    let (fw, bw) = (parse_bits(fw)?, parse_bits(bw)?);
    if fw.len() != bw.len() {
        return Err(usage("--fw-bits and --bw-bits need the same number of entries"));
    }
    if points == 0 || !(min_bw > 0.0 && max_bw >= min_bw) {
        return Err(usage("need points > 0 and 0 < min-bw ≤ max-bw"));
    }
    let mut compressions = vec![Compression::Raw32];
    for (&f, &b) in fw.iter().zip(&bw) {
        compressions.push(Compression::DirectQ { fw_bits: f, bw_bits: b });
        compressions.push(Compression::AqSgd { fw_bits: f, bw_bits: b });
    }
    let rows = simnet::bandwidth_sweep(&pipe, &simnet::log_grid(min_bw, max_bw, points), &compressions)
        .map_err(|e| usage(e.to_string()))?;
    output::ensure_dir(out).map_err(failure)?;
    let header: Vec<String> = simnet::SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect();
    output::write_csv(
        &out.join("simnet.csv"),
        &header,
        rows.iter().map(|r| {
            vec![
                r.bandwidth_bps.to_string(),
                r.mode.clone(),
                r.bits_fw.to_string(),
                r.bits_bw.to_string(),
                r.samples_per_sec.to_string(),
            ]
        }),
    )
    .map_err(failure)?;
    let mut bands = Vec::new();
    for c in compressions.iter().skip(1) {
        let b = simnet::ratio_bands(&pipe, 10e9, 100e6, *c).map_err(|e| usage(e.to_string()))?;
        println!(
            "{} fw{} bw{}: 10 Gbps → 100 Mbps degradation {:.1}% (raw32 slowdown {:.2}x)",
            c.mode(),
            c.bits().0,
            c.bits().1,
            100.0 * b.compressed_degradation,
            b.raw_slowdown
        );
        bands.push(serde_json::json!({
            "mode": c.mode(),
            "bits_fw": c.bits().0,
            "bits_bw": c.bits().1,
            "raw_slowdown": b.raw_slowdown,
            "compressed_degradation": b.compressed_degradation,
        }));
    }
    output::write_json(&out.join("bands.json"), &bands).map_err(failure)?;
    let manifest = output::Manifest::new(
        "simnet",
        serde_json::json!({ "preset": preset, "pipeline": pipe, "points": points, "min_bw": min_bw, "max_bw": max_bw }),
        None,
        Vec::new(),
        vec![PathBuf::from("simnet.csv"), PathBuf::from("bands.json")],
    );
    output::write_json(&out.join("manifest.json"), &manifest).map_err(failure)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, audit, manifest } => cmd_train(run, *audit, manifest.as_deref()),
        Command::Verify { suite, out } => cmd_verify(suite, out.as_deref()),
        Command::Sweep { run } => run.raw().map_err(usage).and_then(|raw| sweep::cmd_sweep(&raw, &run.out)),
        Command::Simnet {
            preset,
            fw_bits,
            bw_bits,
            points,
            min_bw,
            max_bw,
            out,
        } => cmd_simnet(preset, fw_bits, bw_bits, *points, *min_bw, *max_bw, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
