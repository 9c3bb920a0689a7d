//! Unbiased stochastic quantizers, their wire encoding and byte accounting.
//!
//! Two coded schemes are provided:
//!
//! * [`Scheme::L2StochasticRound`] normalizes by the L2 norm and rounds each
//!   coordinate stochastically to the grid `k / 2^b`, `k ∈ [-2^b, 2^b]`. Every
//!   coordinate error is below `‖x‖ / 2^b`, so `‖x − Q(x)‖ ≤ (√d / 2^b)·‖x‖`
//!   holds for every draw, not just in expectation. The grid has `2^(b+1) + 1`
//!   points, so codes are `b + 2` bits wide on the wire.
//! * [`Scheme::RangeUniformStochastic`] normalizes by the max-abs value into
//!   `[-1, 1]` and rounds onto `2^b` evenly spaced levels including both
//!   endpoints. Codes are `b` bits wide. Coordinate error is below the level
//!   spacing `2‖x‖∞ / (2^b − 1)`.
//!
//! Rounding is always "up with probability equal to the fractional
//! position", using exactly one uniform draw per coordinate, which makes both
//! schemes exactly unbiased.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{RngStream, Vector};

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 16;

/// Bytes of the scale header that precedes packed codes.
pub const SCALE_HEADER_BYTES: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantizeError {
    #[error("bit width {0} outside [{MIN_BITS}, {MAX_BITS}]")]
    InvalidBits(u8),
    #[error("scheme {0} has no certified relative-error constant")]
    NoCertificate(Scheme),
    #[error("quantizer constant c_Q = {cq} for dimension {dim} is not below sqrt(1/2)")]
    Inadmissible { cq: f64, dim: usize },
    #[error("malformed payload: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, QuantizeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Identity,
    L2StochasticRound,
    RangeUniformStochastic,
}

impl Scheme {
    /// One-byte identifier used in frame headers.
    pub fn wire_id(self) -> u8 {
        match self {
            Scheme::Identity => 0,
            Scheme::L2StochasticRound => 1,
            Scheme::RangeUniformStochastic => 2,
        }
    }

    pub fn from_wire_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Scheme::Identity),
            1 => Ok(Scheme::L2StochasticRound),
            2 => Ok(Scheme::RangeUniformStochastic),
            other => Err(QuantizeError::Format(format!("unknown scheme id {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Identity => "identity",
            Scheme::L2StochasticRound => "l2",
            Scheme::RangeUniformStochastic => "range",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "fp" | "none" => Some(Scheme::Identity),
            "l2" => Some(Scheme::L2StochasticRound),
            "range" | "uniform" => Some(Scheme::RangeUniformStochastic),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizerSpec {
    scheme: Scheme,
    bits: u8,
}

impl QuantizerSpec {
    pub fn identity() -> Self {
        Self {
            scheme: Scheme::Identity,
            bits: 0,
        }
    }

    pub fn new(scheme: Scheme, bits: u8) -> Result<Self> {
        if scheme == Scheme::Identity {
            return Ok(Self::identity());
        }
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(QuantizeError::InvalidBits(bits));
        }
        Ok(Self { scheme, bits })
    }

    pub fn l2(bits: u8) -> Result<Self> {
        Self::new(Scheme::L2StochasticRound, bits)
    }

    pub fn range(bits: u8) -> Result<Self> {
        Self::new(Scheme::RangeUniformStochastic, bits)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Nominal bit width `b`; zero for the identity.
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn is_identity(&self) -> bool {
        self.scheme == Scheme::Identity
    }

    /// Width in bits of one packed code on the wire.
    pub fn code_width(&self) -> u32 {
        match self.scheme {
            Scheme::Identity => 64,
            Scheme::L2StochasticRound => u32::from(self.bits) + 2,
            Scheme::RangeUniformStochastic => u32::from(self.bits),
        }
    }

    /// Number of representable levels per coordinate (coded schemes only).
    fn levels(&self) -> u32 {
        match self.scheme {
            Scheme::Identity => 0,
            Scheme::L2StochasticRound => (1u32 << (self.bits + 1)) + 1,
            Scheme::RangeUniformStochastic => 1u32 << self.bits,
        }
    }
}

impl std::fmt::Display for QuantizerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.scheme {
            Scheme::Identity => f.write_str("identity"),
            s => write!(f, "{s}{}", self.bits),
        }
    }
}

/// An encoded message.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedPayload {
    /// Full-precision values, sent unmodified.
    Raw(Vector),
    Coded {
        scale: f64,
        /// Bits per code.
        width: u32,
        codes: Vec<u32>,
    },
}

impl QuantizedPayload {
    pub fn len(&self) -> usize {
        match self {
            QuantizedPayload::Raw(v) => v.len(),
            QuantizedPayload::Coded { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_raw(&self) -> bool {
        matches!(self, QuantizedPayload::Raw(_))
    }
}

/// Stochastically quantize `x`.
pub fn quantize(spec: &QuantizerSpec, x: &Vector, rng: &mut RngStream) -> QuantizedPayload {
    let scale = match spec.scheme {
        Scheme::Identity => return QuantizedPayload::Raw(x.clone()),
        Scheme::L2StochasticRound => x.l2_norm(),
        Scheme::RangeUniformStochastic => x.linf_norm(),
    };
    let levels = spec.levels();
    let top = f64::from(levels - 1);
    let codes = x
        .iter()
        .map(|&xi| {
            // Always consume one draw so stream positions depend only on d.
            let u = rng.uniform();
            if scale == 0.0 {
                return 0;
            }
            let pos = match spec.scheme {
                Scheme::L2StochasticRound => {
                    let half = f64::from(1u32 << spec.bits);
                    (xi / scale) * half + half
                }
                _ => (xi / scale + 1.0) * top / 2.0,
            };
            let pos = pos.clamp(0.0, top);
            let lo = pos.floor().min(top - 1.0);
            let frac = (pos - lo).clamp(0.0, 1.0);
            let code = if u < frac { lo + 1.0 } else { lo };
            code as u32
        })
        .collect();
    QuantizedPayload::Coded {
        scale,
        width: spec.code_width(),
        codes,
    }
}

/// Reconstruct the vector a payload encodes.
pub fn dequantize(spec: &QuantizerSpec, payload: &QuantizedPayload) -> Result<Vector> {
    match (spec.scheme, payload) {
        (Scheme::Identity, QuantizedPayload::Raw(v)) => Ok(v.clone()),
        (Scheme::Identity, QuantizedPayload::Coded { .. }) => Err(QuantizeError::Format(
            "identity scheme expects a raw payload".into(),
        )),
        (_, QuantizedPayload::Raw(_)) => Err(QuantizeError::Format(format!(
            "scheme {} expects a coded payload",
            spec.scheme
        ))),
        (scheme, QuantizedPayload::Coded { scale, width, codes }) => {
            if *width != spec.code_width() {
                return Err(QuantizeError::Format(format!(
                    "code width {width} does not match {} for {spec}",
                    spec.code_width()
                )));
            }
            if !scale.is_finite() || *scale < 0.0 {
                return Err(QuantizeError::Format(format!("invalid scale {scale}")));
            }
            if codes.is_empty() {
                return Err(QuantizeError::Format("empty payload".into()));
            }
            let levels = spec.levels();
            if let Some(bad) = codes.iter().find(|&&c| c >= levels) {
                return Err(QuantizeError::Format(format!(
                    "code {bad} exceeds {} levels",
                    levels
                )));
            }
            if *scale == 0.0 {
                return Ok(Vector::zeros(codes.len()));
            }
            let values = codes
                .iter()
                .map(|&c| match scheme {
                    Scheme::L2StochasticRound => {
                        let half = f64::from(1u32 << spec.bits);
                        scale * ((f64::from(c) - half) / half)
                    }
                    _ => {
                        let top = f64::from(levels - 1);
                        scale * ((2.0 * f64::from(c) - top) / top)
                    }
                })
                .collect();
            Vector::new(values).map_err(|e| QuantizeError::Format(e.to_string()))
        }
    }
}

/// `dequantize(quantize(x))`.
pub fn round_trip(spec: &QuantizerSpec, x: &Vector, rng: &mut RngStream) -> Vector {
    let payload = quantize(spec, x, rng);
    dequantize(spec, &payload).expect("freshly quantized payload is well formed")
}

/// Relative-error constant `c_Q` with `‖x − Q(x)‖ ≤ c_Q ‖x‖` guaranteed.
pub fn certified_cq(spec: &QuantizerSpec, dim: usize) -> Result<f64> {
    match spec.scheme {
        Scheme::Identity => Ok(0.0),
        Scheme::L2StochasticRound => Ok((dim as f64).sqrt() / f64::from(1u32 << spec.bits)),
        Scheme::RangeUniformStochastic => Err(QuantizeError::NoCertificate(spec.scheme)),
    }
}

/// Certified `c_Q`, additionally required to be below `√(1/2)`.
pub fn admissible_cq(spec: &QuantizerSpec, dim: usize) -> Result<f64> {
    let cq = certified_cq(spec, dim)?;
    if cq >= std::f64::consts::FRAC_1_SQRT_2 {
        return Err(QuantizeError::Inadmissible { cq, dim });
    }
    Ok(cq)
}

/// Sampled relative error of a quantizer on Gaussian inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmpiricalCq {
    pub max: f64,
    pub mean: f64,
    pub trials: usize,
}

/// Estimate `‖x − Q(x)‖ / ‖x‖` by sampling; the only constant available for
/// uncertified schemes.
pub fn empirical_cq(
    spec: &QuantizerSpec,
    dim: usize,
    trials: usize,
    rng: &mut RngStream,
) -> EmpiricalCq {
    let mut max = 0.0_f64;
    let mut sum = 0.0;
    let mut counted = 0;
    for _ in 0..trials {
        let x = Vector::new((0..dim).map(|_| rng.normal()).collect()).expect("finite normals");
        let norm = x.l2_norm();
        if norm == 0.0 {
            continue;
        }
        let q = round_trip(spec, &x, rng);
        let ratio = x.sub(&q).expect("same length").l2_norm() / norm;
        max = max.max(ratio);
        sum += ratio;
        counted += 1;
    }
    EmpiricalCq {
        max,
        mean: if counted > 0 { sum / counted as f64 } else { 0.0 },
        trials: counted,
    }
}

/// Wire size of one payload of dimension `dim`.
pub fn encoded_bytes(spec: &QuantizerSpec, dim: usize) -> usize {
    match spec.scheme {
        Scheme::Identity => 8 * dim,
        _ => (dim * spec.code_width() as usize).div_ceil(8) + SCALE_HEADER_BYTES,
    }
}

/// Serialize a payload. Raw payloads are `8·d` bytes of little-endian `f64`.
/// Coded payloads are an 8-byte little-endian `f64` scale followed by codes
/// packed least-significant bit first, zero padded to a byte boundary.
pub fn encode_payload(payload: &QuantizedPayload) -> Vec<u8> {
    match payload {
        QuantizedPayload::Raw(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        QuantizedPayload::Coded { scale, width, codes } => {
            let width = *width as usize;
            let mut out = Vec::with_capacity(SCALE_HEADER_BYTES + (codes.len() * width).div_ceil(8));
            out.extend_from_slice(&scale.to_le_bytes());
            let mut acc: u64 = 0;
            let mut filled = 0usize;
            for &c in codes {
                acc |= u64::from(c) << filled;
                filled += width;
                while filled >= 8 {
                    out.push(acc as u8);
                    acc >>= 8;
                    filled -= 8;
                }
            }
            if filled > 0 {
                out.push(acc as u8);
            }
            out
        }
    }
}

/// Parse a payload of `dim` elements produced by [`encode_payload`].
pub fn decode_payload(bytes: &[u8], spec: &QuantizerSpec, dim: usize) -> Result<QuantizedPayload> {
    let expected = encoded_bytes(spec, dim);
    if bytes.len() != expected {
        return Err(QuantizeError::Format(format!(
            "payload of {} bytes, expected {expected} for {spec} with d = {dim}",
            bytes.len()
        )));
    }
    if spec.is_identity() {
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        return Vector::new(values)
            .map(QuantizedPayload::Raw)
            .map_err(|e| QuantizeError::Format(e.to_string()));
    }
    let scale = f64::from_le_bytes(bytes[..8].try_into().expect("8-byte header"));
    let width = spec.code_width() as usize;
    let mask = (1u64 << width) - 1;
    let mut codes = Vec::with_capacity(dim);
    let mut acc: u64 = 0;
    let mut filled = 0usize;
    let mut body = bytes[8..].iter();
    for _ in 0..dim {
        while filled < width {
            let byte = body.next().expect("length checked above");
            acc |= u64::from(*byte) << filled;
            filled += 8;
        }
        codes.push((acc & mask) as u32);
        acc >>= width;
        filled -= width;
    }
    if acc != 0 {
        return Err(QuantizeError::Format("non-zero padding bits".into()));
    }
    Ok(QuantizedPayload::Coded {
        scale,
        width: width as u32,
        codes,
    })
}

/// Anything that maps a vector to a (possibly random) reconstruction of it.
///
/// Verification suites take this instead of a concrete spec so they can be
/// run against deliberately broken doubles.
pub trait StochasticQuantizer {
    fn apply(&self, x: &Vector, rng: &mut RngStream) -> Vector;
}

impl StochasticQuantizer for QuantizerSpec {
    fn apply(&self, x: &Vector, rng: &mut RngStream) -> Vector {
        round_trip(self, x, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamId;
    use proptest::prelude::*;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, StreamId::Aux(77))
    }

    fn gaussian(d: usize, r: &mut RngStream) -> Vector {
        Vector::new((0..d).map(|_| r.normal()).collect()).unwrap()
    }

    fn coded_specs() -> Vec<QuantizerSpec> {
        vec![QuantizerSpec::l2(4).unwrap(), QuantizerSpec::range(4).unwrap()]
    }

    #[test]
    fn zero_vector_gives_zero_payload() {
        let mut r = rng(1);
        for spec in coded_specs() {
            let p = quantize(&spec, &Vector::zeros(5), &mut r);
            match &p {
                QuantizedPayload::Coded { scale, codes, .. } => {
                    assert_eq!(*scale, 0.0);
                    assert!(codes.iter().all(|&c| c == 0));
                }
                QuantizedPayload::Raw(_) => panic!("expected coded payload"),
            }
            let back = dequantize(&spec, &p).unwrap();
            assert!(back.bitwise_eq(&Vector::zeros(5)));
        }
    }

    #[test]
    fn grid_points_are_reproduced_exactly() {
        let mut r = rng(2);
        let l2 = QuantizerSpec::l2(3).unwrap();
        for x in [vec![1.0, 0.0, 0.0], vec![0.5, -0.5, 0.5, -0.5], vec![0.0, -2.0]] {
            let x = Vector::new(x).unwrap();
            for _ in 0..50 {
                assert!(round_trip(&l2, &x, &mut r).bitwise_eq(&x));
            }
        }
        let range = QuantizerSpec::range(1).unwrap();
        let x = Vector::new(vec![-3.0, 3.0, 3.0]).unwrap();
        for _ in 0..50 {
            assert!(round_trip(&range, &x, &mut r).bitwise_eq(&x));
        }
    }

    #[test]
    fn identity_is_bitwise() {
        let mut r = rng(3);
        let x = gaussian(17, &mut r);
        let spec = QuantizerSpec::identity();
        assert!(round_trip(&spec, &x, &mut r).bitwise_eq(&x));
        assert_eq!(encoded_bytes(&spec, 1024), 8192);
    }

    #[test]
    fn all_zero_codes_decode_to_minimum_level() {
        for spec in coded_specs() {
            let p = QuantizedPayload::Coded {
                scale: 2.5,
                width: spec.code_width(),
                codes: vec![0; 4],
            };
            let v = dequantize(&spec, &p).unwrap();
            assert!(v.iter().all(|&x| x == -2.5));
        }
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        let spec = QuantizerSpec::range(2).unwrap();
        let wrong_width = QuantizedPayload::Coded {
            scale: 1.0,
            width: 3,
            codes: vec![0, 1],
        };
        assert!(matches!(dequantize(&spec, &wrong_width), Err(QuantizeError::Format(_))));
        let out_of_range = QuantizedPayload::Coded {
            scale: 1.0,
            width: 2,
            codes: vec![4],
        };
        assert!(dequantize(&spec, &out_of_range).is_err());
        let raw = QuantizedPayload::Raw(Vector::zeros(2));
        assert!(dequantize(&spec, &raw).is_err());
        assert!(decode_payload(&[0u8; 3], &spec, 4).is_err());
    }

    #[test]
    fn certified_constants() {
        assert_eq!(certified_cq(&QuantizerSpec::identity(), 1000).unwrap(), 0.0);
        let cq = certified_cq(&QuantizerSpec::l2(4).unwrap(), 16).unwrap();
        assert_eq!(cq, 0.25);
        assert!(cq < std::f64::consts::FRAC_1_SQRT_2);
        assert!(matches!(
            certified_cq(&QuantizerSpec::range(4).unwrap(), 16),
            Err(QuantizeError::NoCertificate(_))
        ));
        assert!(matches!(
            admissible_cq(&QuantizerSpec::l2(2).unwrap(), 16),
            Err(QuantizeError::Inadmissible { .. })
        ));
    }

    #[test]
    fn byte_accounting() {
        let r4 = QuantizerSpec::range(4).unwrap();
        assert_eq!(encoded_bytes(&r4, 1024), 520);
        assert_eq!(encoded_bytes(&QuantizerSpec::range(1).unwrap(), 1), 9);
        // L2 codes carry the sign and the closed grid: b + 2 bits each.
        assert_eq!(encoded_bytes(&QuantizerSpec::l2(4).unwrap(), 1024), 768 + 8);
    }

    #[test]
    fn bits_are_validated() {
        assert_eq!(QuantizerSpec::l2(0), Err(QuantizeError::InvalidBits(0)));
        assert_eq!(QuantizerSpec::range(17), Err(QuantizeError::InvalidBits(17)));
        assert!(QuantizerSpec::range(16).is_ok());
    }

    #[test]
    fn l2_bound_holds_for_every_draw() {
        let spec = QuantizerSpec::l2(4).unwrap();
        let mut r = rng(4);
        for _ in 0..10_000 {
            let x = gaussian(16, &mut r);
            let q = round_trip(&spec, &x, &mut r);
            assert!(x.sub(&q).unwrap().l2_norm() <= 0.25 * x.l2_norm());
        }
    }

    #[test]
    fn range_coordinate_error_below_spacing() {
        let mut r = rng(5);
        for bits in [1u8, 2, 4, 8] {
            let spec = QuantizerSpec::range(bits).unwrap();
            let spacing = 2.0 / f64::from((1u32 << bits) - 1);
            for _ in 0..2000 {
                let x = gaussian(12, &mut r);
                let q = round_trip(&spec, &x, &mut r);
                let s = x.linf_norm();
                for (a, b) in x.iter().zip(q.iter()) {
                    assert!((a - b).abs() <= spacing * s * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn monte_carlo_mean_is_unbiased() {
        let mut r = rng(6);
        let x = gaussian(16, &mut r);
        for spec in coded_specs() {
            let n = 100_000;
            let mut sum = vec![0.0; 16];
            let mut sq = vec![0.0; 16];
            for _ in 0..n {
                let q = round_trip(&spec, &x, &mut r);
                for i in 0..16 {
                    sum[i] += q[i];
                    sq[i] += q[i] * q[i];
                }
            }
            for i in 0..16 {
                let mean = sum[i] / n as f64;
                let var = (sq[i] / n as f64 - mean * mean).max(0.0);
                let se = (var / n as f64).sqrt();
                assert!((mean - x[i]).abs() <= 4.0 * se + 1e-12, "{spec} coord {i}");
            }
        }
    }

    #[test]
    fn empirical_cq_is_below_certified_for_l2() {
        let spec = QuantizerSpec::l2(6).unwrap();
        let est = empirical_cq(&spec, 32, 500, &mut rng(8));
        assert!(est.max <= certified_cq(&spec, 32).unwrap());
        assert!(est.mean > 0.0);
    }

    proptest! {
        #[test]
        fn wire_round_trip(seed in any::<u64>(), d in 1usize..70, bits in 1u8..=16, l2 in any::<bool>()) {
            let spec = if l2 { QuantizerSpec::l2(bits) } else { QuantizerSpec::range(bits) }.unwrap();
            let mut r = rng(seed);
            let x = gaussian(d, &mut r);
            let p = quantize(&spec, &x, &mut r);
            let bytes = encode_payload(&p);
            prop_assert_eq!(bytes.len(), encoded_bytes(&spec, d));
            prop_assert_eq!(decode_payload(&bytes, &spec, d).unwrap(), p);
        }

        #[test]
        fn scale_equivariance(seed in any::<u64>(), d in 1usize..40, exp in -6i32..6, l2 in any::<bool>()) {
            let spec = if l2 { QuantizerSpec::l2(5) } else { QuantizerSpec::range(5) }.unwrap();
            let mut gen = rng(seed);
            let x = gaussian(d, &mut gen);
            let c = 2f64.powi(exp);
            let cx = x.scaled(c).unwrap();
            let mut r1 = RngStream::new(seed, StreamId::Aux(5));
            let mut r2 = r1.clone();
            let (p1, p2) = (quantize(&spec, &x, &mut r1), quantize(&spec, &cx, &mut r2));
            match (p1, p2) {
                (QuantizedPayload::Coded { scale: s1, codes: c1, .. },
                 QuantizedPayload::Coded { scale: s2, codes: c2, .. }) => {
                    prop_assert_eq!(c1, c2);
                    prop_assert_eq!(s2, c * s1);
                }
                _ => prop_assert!(false, "coded payloads expected"),
            }
        }
    }
}
