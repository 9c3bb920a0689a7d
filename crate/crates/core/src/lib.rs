//! AQ-SGD laboratory: pipeline-parallel SGD with quantized activation deltas,
//! its baselines, a numeric audit of the convergence bounds, and an analytic
//! throughput model for slow links.

pub mod model;
pub mod numerics;
pub mod quantize;
pub mod protocol;
pub mod analysis;
pub mod schema;
pub mod simnet;
pub mod verify;
