//! Inter-worker frame layout.
//!
//! A frame is a 16-byte header followed by the payload bytes produced by
//! [`encode_payload`]:
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 8    | step index, `u64` LE                    |
//! | 8      | 4    | sample id, `u32` LE                     |
//! | 12     | 2    | boundary id (1-based), `u16` LE         |
//! | 14     | 1    | direction: 0 forward, 1 backward, 2 halt|
//! | 15     | 1    | scheme wire id (0 for raw payloads)     |
//!
//! Halt frames carry no payload.

use super::{ProtocolError, Result, SampleId};
use crate::quantize::{decode_payload, encode_payload, QuantizedPayload, QuantizerSpec, Scheme};

pub const HEADER_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward = 0,
    Backward = 1,
    Halt = 2,
}

impl Direction {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Self::Forward),
            1 => Ok(Self::Backward),
            2 => Ok(Self::Halt),
            other => Err(ProtocolError::Corrupt(format!("direction byte {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub step: u64,
    pub sample: SampleId,
    pub boundary: u16,
    pub direction: Direction,
    pub scheme: Scheme,
}

/// Frame for a payload; coded payloads carry the scheme of `spec`.
pub fn encode_frame(
    step: u64,
    sample: SampleId,
    boundary: u16,
    direction: Direction,
    spec: &QuantizerSpec,
    payload: &QuantizedPayload,
) -> Vec<u8> {
    let scheme = if payload.is_raw() {
        Scheme::Identity
    } else {
        spec.scheme()
    };
    let mut out = header_bytes(step, sample, boundary, direction, scheme).to_vec();
    out.extend_from_slice(&encode_payload(payload));
    out
}

pub fn halt_frame(step: u64, sample: SampleId, boundary: u16) -> Vec<u8> {
    header_bytes(step, sample, boundary, Direction::Halt, Scheme::Identity).to_vec()
}

fn header_bytes(
    step: u64,
    sample: SampleId,
    boundary: u16,
    direction: Direction,
    scheme: Scheme,
) -> [u8; HEADER_BYTES] {
    let mut h = [0u8; HEADER_BYTES];
    h[0..8].copy_from_slice(&step.to_le_bytes());
    h[8..12].copy_from_slice(&sample.to_le_bytes());
    h[12..14].copy_from_slice(&boundary.to_le_bytes());
    h[14] = direction as u8;
    h[15] = scheme.wire_id();
    h
}

pub fn decode_header(bytes: &[u8]) -> Result<FrameHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(ProtocolError::Corrupt(format!(
            "frame of {} bytes is shorter than its header",
            bytes.len()
        )));
    }
    Ok(FrameHeader {
        step: u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")),
        sample: u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")),
        boundary: u16::from_le_bytes(bytes[12..14].try_into().expect("2 bytes")),
        direction: Direction::from_byte(bytes[14])?,
        scheme: Scheme::from_wire_id(bytes[15])?,
    })
}

/// Parse a frame whose coded payloads use `spec`. Raw payloads are accepted
/// whatever `spec` is.
pub fn decode_frame(
    bytes: &[u8],
    spec: &QuantizerSpec,
    dim: usize,
) -> Result<(FrameHeader, Option<QuantizedPayload>)> {
    let header = decode_header(bytes)?;
    let body = &bytes[HEADER_BYTES..];
    if header.direction == Direction::Halt {
        if !body.is_empty() {
            return Err(ProtocolError::Corrupt("halt frame with a payload".into()));
        }
        return Ok((header, None));
    }
    let decode_spec = match header.scheme {
        Scheme::Identity => QuantizerSpec::identity(),
        s if s == spec.scheme() => *spec,
        s => {
            return Err(ProtocolError::Corrupt(format!(
                "frame scheme {s} does not match configured {spec}"
            )))
        }
    };
    let payload = decode_payload(body, &decode_spec, dim)?;
    Ok((header, Some(payload)))
}
