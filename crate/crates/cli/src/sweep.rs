//! Grid sweeps: every cell runs once per seed, cells and seeds in parallel,
//! results written in grid order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RawConfig, RunSpec};
use crate::{failure, output, run, usage, CmdError};

pub const MIN_SEEDS: usize = 3;

pub const SWEEP_COLUMNS: [&str; 13] = [
    "mode",
    "stages",
    "scheme",
    "fw_bits",
    "bw_bits",
    "buffer_bits",
    "lr",
    "epochs",
    "seeds",
    "diverged",
    "mean_final_loss",
    "std_final_loss",
    "min_final_loss",
];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub spec: RunSpec,
    pub seeds: Vec<u64>,
    pub final_losses: Vec<Option<f64>>,
}

impl SweepRow {
    fn converged(&self) -> Vec<f64> {
        self.final_losses.iter().flatten().copied().collect()
    }

    /// Mean and sample standard deviation over converged seeds.
    pub fn stats(&self) -> Option<(f64, f64)> {
        let l = self.converged();
        if l.is_empty() {
            return None;
        }
        let n = l.len() as f64;
        let mean = l.iter().sum::<f64>() / n;
        let std = if l.len() > 1 {
            (l.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some((mean, std))
    }

    fn record(&self) -> Vec<String> {
        let c = &self.spec.config;
        let stats = self.stats();
        let fw_bits = if c.mode == aqsgd_core::protocol::Mode::Fp32 { 0 } else { c.fw.bits() };
        let bw_bits = if c.mode == aqsgd_core::protocol::Mode::Fp32 { 0 } else { c.bw.bits() };
        vec![
            c.mode.to_string(),
            c.stages.to_string(),
            c.fw.scheme().name().to_string(),
            fw_bits.to_string(),
            bw_bits.to_string(),
            c.buffer.to_string(),
            c.fixed_lr().map_or_else(|_| "theorem".into(), |v| v.to_string()),
            c.epochs.to_string(),
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            self.final_losses.iter().filter(|l| l.is_none()).count().to_string(),
            stats.map_or_else(String::new, |s| s.0.to_string()),
            stats.map_or_else(String::new, |s| s.1.to_string()),
            self.converged().into_iter().reduce(f64::min).map_or_else(String::new, |v| v.to_string()),
        ]
    }
}

/// Expand the grid and run it. Seeds come from the `seed` axis.
pub fn run_grid(raw: &RawConfig) -> Result<Vec<SweepRow>, CmdError> {
    let seeds: Vec<u64> = raw
        .seeds()
        .iter()
        .map(|s| s.parse().map_err(|_| usage(format!("bad seed `{s}`"))))
        .collect::<Result<_, _>>()?;
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() < MIN_SEEDS || distinct.len() != seeds.len() {
        return Err(usage(format!("sweep needs at least {MIN_SEEDS} distinct seeds, got {seeds:?}")));
    }
    let mut base = raw.clone();
    base.set("seed", "0").map_err(|e| usage(e.to_string()))?;
    let cells: Vec<RunSpec> = base
        .expand()
        .iter()
        .map(RunSpec::from_raw)
        .collect::<Result<_, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let mut jobs = Vec::with_capacity(cells.len() * seeds.len());
    for (i, cell) in cells.iter().enumerate() {
        for &seed in &seeds {
            let mut spec = cell.clone();
            spec.config.seed = seed;
            spec.dataset.seed = seed;
            let prepared = run::prepare(&spec, false).map_err(usage)?;
            jobs.push((i, prepared));
        }
    }
    let losses: Vec<Result<Option<f64>, String>> = jobs
        .par_iter()
        .map(|(_, p)| run::execute(p).map(|o| if o.diverged { None } else { o.final_loss }))
        .collect();
    let mut rows: Vec<SweepRow> = cells
        .into_iter()
        .map(|spec| SweepRow {
            spec,
            seeds: seeds.clone(),
            final_losses: Vec::new(),
        })
        .collect();
    for ((i, _), loss) in jobs.iter().zip(losses) {
        rows[*i].final_losses.push(loss.map_err(failure)?);
    }
    Ok(rows)
}

/// Soft check: within each group differing only in forward bits, AQ-SGD's
/// mean final loss should not rise with more bits.
fn fw_bits_notes(rows: &[SweepRow]) -> Vec<String> {
    use aqsgd_core::protocol::Mode;
    let mut notes = Vec::new();
    let aq: Vec<&SweepRow> = rows.iter().filter(|r| r.spec.config.mode == Mode::AqSgd).collect();
    let mut groups: Vec<Vec<&SweepRow>> = Vec::new();
    for r in aq {
        let c = &r.spec.config;
        match groups.iter_mut().find(|g| {
            let h = &g[0].spec.config;
            h.stages == c.stages && h.bw == c.bw && h.buffer == c.buffer
        }) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    for mut g in groups.into_iter().filter(|g| g.len() > 1) {
        g.sort_by_key(|r| r.spec.config.fw.bits());
        let means: Vec<Option<f64>> = g.iter().map(|r| r.stats().map(|s| s.0)).collect();
        let monotone = means.windows(2).all(|w| matches!(w, [Some(a), Some(b)] if b <= a));
        let c = &g[0].spec.config;
        notes.push(format!(
            "aqsgd K={} bw{} buffer {}: mean final loss {} in fw bits",
            c.stages,
            c.bw.bits(),
            c.buffer,
            if monotone { "nonincreasing" } else { "not monotone" }
        ));
    }
    notes
}

pub fn cmd_sweep(raw: &RawConfig, out: &Path) -> Result<(), CmdError> {
    let rows = run_grid(raw)?;
    output::ensure_dir(out).map_err(failure)?;
    let header: Vec<String> = SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect();
    output::write_csv(&out.join("sweep.csv"), &header, rows.iter().map(SweepRow::record)).map_err(failure)?;
    for note in fw_bits_notes(&rows) {
        println!("{note}");
    }
    let seeds = rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
    let manifest = output::Manifest::new(
        "sweep",
        rows.iter().map(|r| &r.spec).collect::<Vec<_>>(),
        None,
        seeds,
        vec![PathBuf::from("sweep.csv")],
    );
    output::write_json(&out.join("manifest.json"), &manifest).map_err(failure)?;
    println!("{} cells written to {}", rows.len(), out.join("sweep.csv").display());
    Ok(())
}
