//! Analytic pipeline timing under constrained links.
//!
//! A synchronous GPipe schedule: every micro-batch of a batch runs forward
//! through all stages, then backward in the same order once the last stage
//! has finished its forwards. Each boundary has one link per direction, and
//! a link carries one message at a time. Buffer I/O for AQ-SGD is prefetched
//! during the previous micro-batch's forward compute on the same stage (the
//! previous batch's backward, for the first micro-batch) and charged only
//! for the part that does not fit. Batches repeat identically, so an epoch
//! is a whole number of batch times.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantize::{encoded_bytes, QuantizerSpec};

#[derive(Debug, Error, PartialEq)]
pub enum SimnetError {
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, SimnetError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// Bits per second.
    pub bandwidth: f64,
    /// One-way latency in seconds.
    pub latency: f64,
}

impl LinkSpec {
    pub fn new(bandwidth: f64, latency: f64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(SimnetError::InvalidLink(format!("bandwidth {bandwidth}")));
        }
        if !(latency >= 0.0 && latency.is_finite()) {
            return Err(SimnetError::InvalidLink(format!("latency {latency}")));
        }
        Ok(Self { bandwidth, latency })
    }

    pub fn bandwidth(bps: f64) -> Result<Self> {
        Self::new(bps, 0.0)
    }
}

/// Seconds to move `bytes` over `link`.
pub fn transfer_time(bytes: u64, link: &LinkSpec) -> f64 {
    link.latency + 8.0 * bytes as f64 / link.bandwidth
}

/// Per-stage costs for one micro-batch, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub forward: f64,
    pub backward: f64,
    /// Coordinates of the activation this stage sends downstream; ignored
    /// for the last stage.
    pub payload_dims: usize,
    /// Reading the buffered message of one micro-batch.
    pub fetch: f64,
    /// Writing it back.
    pub store: f64,
}

impl StageCost {
    fn validate(&self) -> Result<()> {
        let all = [self.forward, self.backward, self.fetch, self.store];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimnetError::InvalidPipeline(format!("negative or non-finite cost {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Compression {
    /// 32-bit floats both ways.
    Raw32,
    /// Activations and gradients quantized directly.
    DirectQ { fw_bits: u8, bw_bits: u8 },
    /// Quantized deltas; adds buffer fetch and store.
    AqSgd { fw_bits: u8, bw_bits: u8 },
}

impl Compression {
    pub fn mode(&self) -> &'static str {
        match self {
            Self::Raw32 => "fp32",
            Self::DirectQ { .. } => "directq",
            Self::AqSgd { .. } => "aqsgd",
        }
    }

    /// `(fw, bw)` bits; 32 for raw.
    pub fn bits(&self) -> (u8, u8) {
        match *self {
            Self::Raw32 => (32, 32),
            Self::DirectQ { fw_bits, bw_bits } | Self::AqSgd { fw_bits, bw_bits } => (fw_bits, bw_bits),
        }
    }

    fn bytes(bits: u8, dims: usize) -> u64 {
        if bits >= 32 {
            4 * dims as u64
        } else {
            let spec = QuantizerSpec::range(bits).expect("validated bits");
            encoded_bytes(&spec, dims) as u64
        }
    }

    /// Forward and backward message sizes for `dims` coordinates.
    pub fn message_bytes(&self, dims: usize) -> (u64, u64) {
        let (f, b) = self.bits();
        (Self::bytes(f, dims), Self::bytes(b, dims))
    }

    fn validate(&self) -> Result<()> {
        let (f, b) = self.bits();
        let ok = |x: u8| x == 32 || QuantizerSpec::range(x).is_ok();
        if !ok(f) || !ok(b) {
            return Err(SimnetError::InvalidPipeline(format!("unsupported bits {f}/{b}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<StageCost>,
    pub micro_batches: usize,
    pub micro_batch_size: usize,
    pub batches_per_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub batch_seconds: f64,
    pub epoch_seconds: f64,
    pub samples_per_sec: f64,
}

/// Time one epoch under the schedule described in the module docs.
pub fn epoch_time(pipe: &PipelineSpec, link: &LinkSpec, compression: Compression) -> Result<EpochTiming> {
    let k = pipe.stages.len();
    let m = pipe.micro_batches;
    if k == 0 || m == 0 || pipe.micro_batch_size == 0 || pipe.batches_per_epoch == 0 {
        return Err(SimnetError::InvalidPipeline("empty pipeline".into()));
    }
    pipe.stages.iter().try_for_each(StageCost::validate)?;
    compression.validate()?;
    let buffered = matches!(compression, Compression::AqSgd { .. });
    let comm: Vec<(f64, f64)> = pipe.stages[..k - 1]
        .iter()
        .map(|s| {
            let (f, b) = compression.message_bytes(s.payload_dims);
            (transfer_time(f, link), transfer_time(b, link))
        })
        .collect();

    // Forward: done[i] = completion of the latest forward on stage i,
    // link_free[i] = when boundary i's forward link is next idle.
    let mut fwd_done = vec![vec![0.0_f64; m]; k];
    let mut link_free = vec![0.0_f64; k.saturating_sub(1)];
    for j in 0..m {
        for i in 0..k {
            let stage = &pipe.stages[i];
            let arrival = if i == 0 {
                0.0
            } else {
                // Boundary i − 1 sends once stage i − 1 has finished and the link is idle.
                let start = fwd_done[i - 1][j].max(link_free[i - 1]);
                link_free[i - 1] = start + comm[i - 1].0;
                link_free[i - 1]
            };
            let free = if j == 0 { 0.0 } else { fwd_done[i][j - 1] };
            let io = if buffered && k > 1 {
                // Micro-batch 0 prefetches behind the previous batch's last backward.
                let prior = if j == 0 { stage.backward } else { stage.forward };
                (stage.fetch + stage.store - prior).max(0.0)
            } else {
                0.0
            };
            fwd_done[i][j] = arrival.max(free) + io + stage.forward;
        }
    }
    let mut bwd_done = vec![vec![0.0_f64; m]; k];
    let mut link_free = vec![0.0_f64; k.saturating_sub(1)];
    for j in 0..m {
        for i in (0..k).rev() {
            let stage = &pipe.stages[i];
            let arrival = if i == k - 1 {
                fwd_done[k - 1][m - 1]
            } else {
                let start = bwd_done[i + 1][j].max(link_free[i]);
                link_free[i] = start + comm[i].1;
                link_free[i]
            };
            let free = if j == 0 { fwd_done[i][m - 1] } else { bwd_done[i][j - 1] };
            bwd_done[i][j] = arrival.max(free) + stage.backward;
        }
    }
    let batch_seconds = (0..k).map(|i| bwd_done[i][m - 1]).fold(0.0, f64::max);
    let epoch_seconds = batch_seconds * pipe.batches_per_epoch as f64;
    let samples = (m * pipe.micro_batch_size * pipe.batches_per_epoch) as f64;
    Ok(EpochTiming {
        batch_seconds,
        epoch_seconds,
        samples_per_sec: samples / epoch_seconds,
    })
}

/// Named calibration presets.
pub fn preset(name: &str) -> Result<PipelineSpec> {
    match name {
        // GPT2-XL split over 8 machines: 6 layers, 44 ms forward per stage,
        // backward taken as twice the forward; one 1024-token sequence of
        // 1600-d hidden states per micro-batch, 32 micro-batches per batch.
        "gpt2xl-8stage" => Ok(PipelineSpec {
            stages: vec![
                StageCost {
                    forward: 0.044,
                    backward: 0.088,
                    payload_dims: 1024 * 1600,
                    fetch: 0.0002,
                    store: 0.0002,
                };
                8
            ],
            micro_batches: 32,
            micro_batch_size: 1,
            batches_per_epoch: 1,
        }),
        other => Err(SimnetError::UnknownPreset(other.to_string())),
    }
}

pub const PRESETS: &[&str] = &["gpt2xl-8stage"];

/// Column order of sweep CSV files.
pub const SWEEP_COLUMNS: [&str; 5] = ["bandwidth_bps", "mode", "bits_fw", "bits_bw", "samples_per_sec"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bandwidth_bps: f64,
    pub mode: String,
    pub bits_fw: u8,
    pub bits_bw: u8,
    pub samples_per_sec: f64,
}

/// `points` bandwidths spaced evenly in log scale over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| match i {
            0 => lo,
            i if i == points - 1 => hi,
            i => (a + (b - a) * i as f64 / (points - 1) as f64).exp(),
        })
        .collect()
}

/// Throughput of every compression at every bandwidth (zero latency).
pub fn bandwidth_sweep(
    pipe: &PipelineSpec,
    bandwidths: &[f64],
    compressions: &[Compression],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(bandwidths.len() * compressions.len());
    for &bw in bandwidths {
        let link = LinkSpec::bandwidth(bw)?;
        for c in compressions {
            let (bits_fw, bits_bw) = c.bits();
            rows.push(SweepRow {
                bandwidth_bps: bw,
                mode: c.mode().to_string(),
                bits_fw,
                bits_bw,
                samples_per_sec: epoch_time(pipe, &link, *c)?.samples_per_sec,
            });
        }
    }
    Ok(rows)
}

/// Throughput ratios between a fast and a slow link for the preset bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioBands {
    /// Fast over slow throughput for raw 32-bit messages.
    pub raw_slowdown: f64,
    /// Relative throughput loss of the compressed run, `1 − slow/fast`.
    pub compressed_degradation: f64,
}

pub fn ratio_bands(pipe: &PipelineSpec, fast: f64, slow: f64, compressed: Compression) -> Result<RatioBands> {
    let t = |bw: f64, c: Compression| -> Result<f64> {
        Ok(epoch_time(pipe, &LinkSpec::bandwidth(bw)?, c)?.samples_per_sec)
    };
    Ok(RatioBands {
        raw_slowdown: t(fast, Compression::Raw32)? / t(slow, Compression::Raw32)?,
        compressed_degradation: 1.0 - t(slow, compressed)? / t(fast, compressed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(k: usize, dims: usize) -> PipelineSpec {
        PipelineSpec {
            stages: vec![
                StageCost {
                    forward: 1.0,
                    backward: 2.0,
                    payload_dims: dims,
                    fetch: 0.0,
                    store: 0.0,
                };
                k
            ],
            micro_batches: 4,
            micro_batch_size: 1,
            batches_per_epoch: 1,
        }
    }

    #[test]
    fn transfer_examples() {
        assert_eq!(transfer_time(0, &LinkSpec::bandwidth(1e9).unwrap()), 0.0);
        let t = transfer_time(1_250_000, &LinkSpec::bandwidth(1e8).unwrap());
        assert!((t - 0.1).abs() < 1e-15);
        let link = LinkSpec::new(1e8, 0.01).unwrap();
        let half = LinkSpec::new(5e7, 0.01).unwrap();
        let (a, b) = (transfer_time(1000, &link) - 0.01, transfer_time(1000, &half) - 0.01);
        assert!((b - 2.0 * a).abs() < 1e-15);
        assert!(LinkSpec::new(0.0, 0.0).is_err());
        assert!(LinkSpec::new(1.0, -1.0).is_err());
    }

    #[test]
    fn compute_only_schedule() {
        // K stages, M micro-batches, no communication: (M + K − 1)(f + b).
        let pipe = flat(3, 10);
        let t = epoch_time(&pipe, &LinkSpec::bandwidth(f64::INFINITY).unwrap(), Compression::Raw32).unwrap();
        assert!((t.batch_seconds - 6.0 * 3.0).abs() < 1e-12);
        let single = epoch_time(&flat(1, 10), &LinkSpec::bandwidth(1.0).unwrap(), Compression::Raw32).unwrap();
        assert!((single.batch_seconds - 4.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_message_link_bound() {
        // K = 2, M = 1, raw message of 2 coords = 8 bytes = 64 bits at 64 bps.
        let mut pipe = flat(2, 2);
        pipe.micro_batches = 1;
        let t = epoch_time(&pipe, &LinkSpec::bandwidth(64.0).unwrap(), Compression::Raw32).unwrap();
        // f + 1 + f, then b + 1 + b.
        assert!((t.batch_seconds - (1.0 + 1.0 + 1.0 + 2.0 + 1.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn hidden_fetch_costs_nothing() {
        let pipe = flat(2, 64);
        let mut slow = pipe.clone();
        for s in &mut slow.stages {
            s.fetch = 3.0;
        }
        let link = LinkSpec::bandwidth(1e12).unwrap();
        let c = Compression::AqSgd { fw_bits: 4, bw_bits: 8 };
        let d = Compression::DirectQ { fw_bits: 4, bw_bits: 8 };
        let base = epoch_time(&pipe, &link, d).unwrap().batch_seconds;
        assert_eq!(epoch_time(&pipe, &link, c).unwrap().batch_seconds, base);
        assert!(epoch_time(&slow, &link, c).unwrap().batch_seconds > base);
    }

    #[test]
    fn more_micro_batches_take_longer() {
        let mut pipe = preset("gpt2xl-8stage").unwrap();
        let link = LinkSpec::bandwidth(1e9).unwrap();
        let a = epoch_time(&pipe, &link, Compression::Raw32).unwrap().epoch_seconds;
        pipe.micro_batches *= 2;
        let b = epoch_time(&pipe, &link, Compression::Raw32).unwrap().epoch_seconds;
        assert!(b > a);
    }

    #[test]
    fn rejects_bad_input() {
        let mut pipe = flat(2, 4);
        pipe.stages[0].forward = -1.0;
        let link = LinkSpec::bandwidth(1.0).unwrap();
        assert!(epoch_time(&pipe, &link, Compression::Raw32).is_err());
        let pipe = flat(2, 4);
        assert!(epoch_time(&pipe, &link, Compression::DirectQ { fw_bits: 0, bw_bits: 4 }).is_err());
        assert!(preset("nope").is_err());
    }
}
