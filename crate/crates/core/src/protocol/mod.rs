//! The training protocol: per-sample message buffers, delta-quantized
//! forward exchanges, directly quantized backward gradients, and the
//! FP32 / DirectQ baselines.
//!
//! Boundary ids are 1-based: boundary `i` sits between stage `i` and stage
//! `i + 1` (stages counted from 1). Every boundary owns three random streams,
//! `Forward(i)`, `Backward(i)` and `Buffer(i)`, so quantizer draws never
//! depend on the execution mode.

mod buffer;
mod engine;
pub mod wire;
mod workers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use buffer::{
    backward_exchange, forward_exchange, payload_bytes, ActivationBuffer, BufferEntry,
    BufferPrecision, ForwardSend,
};
pub use engine::{
    checkpoint, fresh_buffers, resume_training, run_training, step, step_k2, step_kgt2, Checkpoint, StepAnalysis, StepMetrics, StepRngs,
    TrainOutcome,
};
pub(crate) use engine::{compressed_pass, PassTrace};

use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::quantize::{QuantizeError, QuantizerSpec};

pub type SampleId = u32;

/// Loss above this value marks a run as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("boundary {boundary}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        boundary: u16,
        expected: usize,
        found: usize,
    },
    #[error("protocol corruption: {0}")]
    Corrupt(String),
    #[error("buffer copies diverged at boundary {boundary} after step {step}")]
    BufferDivergence { step: u64, boundary: u16 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("worker failed: {0}")]
    Worker(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl ProtocolError {
    /// True for errors caused by a value overflowing to infinity or NaN,
    /// which the training loop reports as divergence.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            ProtocolError::Numerics(NumericsError::NonFinite { .. })
                | ProtocolError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Delta-quantized forward messages against per-sample buffers.
    AqSgd,
    /// Activations and gradients quantized directly, no buffers.
    DirectQ,
    /// No compression.
    Fp32,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aqsgd" | "aq-sgd" => Ok(Self::AqSgd),
            "directq" => Ok(Self::DirectQ),
            "fp32" => Ok(Self::Fp32),
            other => Err(ProtocolError::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AqSgd => "aqsgd",
            Self::DirectQ => "directq",
            Self::Fp32 => "fp32",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    Fixed(f64),
    /// Resolved from the theorem constants before training; see
    /// `analysis::resolve_learning_rate`.
    Theorem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    /// A fresh permutation of the dataset every epoch.
    EpochShuffle,
    /// Independent uniform draws.
    UniformWithReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateOrder {
    /// Every stage reads the pre-step parameters.
    Simultaneous,
    /// Each stage updates before computing the gradient it sends upstream.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Execution {
    /// One thread runs every stage in order.
    Reference,
    /// One thread per stage, connected by bounded channels carrying frames.
    Workers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub stages: usize,
    pub fw: QuantizerSpec,
    pub bw: QuantizerSpec,
    pub buffer: BufferPrecision,
    pub lr: LearningRate,
    pub epochs: u64,
    /// Overrides `epochs · N` when set.
    pub steps: Option<u64>,
    pub sampling: Sampling,
    pub seed: u64,
    pub order: UpdateOrder,
    /// Record the error decomposition of every step.
    pub analysis: bool,
    /// Full-batch checkpoint every this many steps; 0 disables them.
    pub checkpoint_every: u64,
    /// Keep receiver-side buffer copies in reference mode and compare
    /// digests after every step. Worker mode always compares.
    pub verify_mirror: bool,
    pub execution: Execution,
}

impl TrainConfig {
    pub fn new(mode: Mode, stages: usize) -> Self {
        Self {
            mode,
            stages,
            fw: QuantizerSpec::range(4).expect("valid bits"),
            bw: QuantizerSpec::range(8).expect("valid bits"),
            buffer: BufferPrecision::Full,
            lr: LearningRate::Fixed(0.05),
            epochs: 10,
            steps: None,
            sampling: Sampling::EpochShuffle,
            seed: 0,
            order: UpdateOrder::Simultaneous,
            analysis: false,
            checkpoint_every: 0,
            verify_mirror: false,
            execution: Execution::Reference,
        }
    }

    pub fn with_quantizers(mut self, fw: QuantizerSpec, bw: QuantizerSpec) -> Self {
        self.fw = fw;
        self.bw = bw;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = LearningRate::Fixed(lr);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: u64) -> Self {
        self.epochs = epochs;
        self
    }

    /// Forward quantizer actually applied; FP32 ignores the configured one.
    pub fn effective_fw(&self) -> QuantizerSpec {
        match self.mode {
            Mode::Fp32 => QuantizerSpec::identity(),
            _ => self.fw,
        }
    }

    pub fn effective_bw(&self) -> QuantizerSpec {
        match self.mode {
            Mode::Fp32 => QuantizerSpec::identity(),
            _ => self.bw,
        }
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.steps.unwrap_or(self.epochs * n as u64)
    }

    pub fn fixed_lr(&self) -> Result<f64> {
        match self.lr {
            LearningRate::Fixed(g) if g.is_finite() && g >= 0.0 => Ok(g),
            LearningRate::Fixed(g) => Err(ProtocolError::InvalidConfig(format!(
                "learning rate {g} is not a finite non-negative number"
            ))),
            LearningRate::Theorem => Err(ProtocolError::InvalidConfig(
                "theorem learning rate must be resolved before training".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(ProtocolError::InvalidConfig(format!(
                "need at least 2 stages, got {}",
                self.stages
            )));
        }
        self.fixed_lr()?;
        if self.analysis && self.order == UpdateOrder::Sequential {
            return Err(ProtocolError::InvalidConfig(
                "error analysis assumes simultaneous updates".into(),
            ));
        }
        if self.analysis && self.execution == Execution::Workers {
            return Err(ProtocolError::InvalidConfig(
                "error analysis runs in reference mode only".into(),
            ));
        }
        if self.stages > usize::from(u16::MAX) {
            return Err(ProtocolError::InvalidConfig("too many stages".into()));
        }
        Ok(())
    }
}
