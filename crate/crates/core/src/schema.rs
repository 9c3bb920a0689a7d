//! Column layout of the per-step metrics CSV.
//!
//! The layout is versioned. Any change to the column set must bump
//! [`METRICS_SCHEMA_VERSION`] and the pinned list in [`pinned_columns`].

use crate::protocol::StepMetrics;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

const LEADING: [&str; 6] = ["step", "epoch", "sample_id", "loss", "grad_norm", "delta_norm_total"];
const TRAILING: [&str; 2] = ["bytes_fw", "bytes_bw"];

/// Header for a run with `boundaries` stage boundaries (`K − 1`).
pub fn metrics_columns(boundaries: usize) -> Vec<String> {
    LEADING
        .iter()
        .map(|s| s.to_string())
        .chain((1..=boundaries).map(|b| format!("delta_norm_b{b}")))
        .chain(TRAILING.iter().map(|s| s.to_string()))
        .collect()
}

/// One CSV record. Floats use Rust's shortest round-trip formatting.
pub fn metrics_record(m: &StepMetrics) -> Vec<String> {
    let mut row = vec![
        m.step.to_string(),
        m.epoch.to_string(),
        m.sample.to_string(),
        m.loss.to_string(),
        m.grad_norm.to_string(),
        m.delta_norm_total().to_string(),
    ];
    row.extend(m.delta_norms.iter().map(f64::to_string));
    row.push(m.bytes_fw.to_string());
    row.push(m.bytes_bw.to_string());
    row
}

/// The two-boundary header as it stood when the current version was cut.
pub fn pinned_columns(version: u32) -> Option<&'static [&'static str]> {
    match version {
        1 => Some(&[
            "step",
            "epoch",
            "sample_id",
            "loss",
            "grad_norm",
            "delta_norm_total",
            "delta_norm_b1",
            "delta_norm_b2",
            "bytes_fw",
            "bytes_bw",
        ]),
        _ => None,
    }
}

/// `Err` describes how the generated header differs from the pinned one.
pub fn check_schema() -> Result<(), String> {
    let pinned = pinned_columns(METRICS_SCHEMA_VERSION)
        .ok_or_else(|| format!("no pinned header for version {METRICS_SCHEMA_VERSION}"))?;
    let actual = metrics_columns(2);
    if actual.iter().map(String::as_str).eq(pinned.iter().copied()) {
        Ok(())
    } else {
        Err(format!(
            "metrics header {actual:?} drifted from pinned v{METRICS_SCHEMA_VERSION} {pinned:?}"
        ))
    }
}
