//! Per-sample message buffers and the forward/backward exchanges.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Mode, ProtocolError, Result, SampleId};
use crate::numerics::{RngStream, Vector};
use crate::quantize::{dequantize, encoded_bytes, quantize, round_trip, QuantizedPayload, QuantizerSpec};

/// Precision of the stored messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferPrecision {
    Full,
    /// Re-encode every stored message with `RangeUniformStochastic` at this
    /// many bits (2 to 16).
    Bits(u8),
}

impl BufferPrecision {
    pub fn new_bits(z: u8) -> Result<Self> {
        if !(2..=16).contains(&z) {
            return Err(ProtocolError::InvalidConfig(format!(
                "buffer bits must be in 2..=16, got {z}"
            )));
        }
        Ok(Self::Bits(z))
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Self::Full);
        }
        let z: u8 = s
            .parse()
            .map_err(|_| ProtocolError::InvalidConfig(format!("buffer bits '{s}'")))?;
        Self::new_bits(z)
    }
}

impl std::fmt::Display for BufferPrecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Full => f.write_str("full"),
            Self::Bits(z) => write!(f, "{z}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub message: Vector,
    /// Steps at which the sample crossed this boundary.
    pub visits: Vec<u64>,
}

/// One side's copy of the messages buffered at a boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBuffer {
    boundary: u16,
    dim: usize,
    precision: BufferPrecision,
    entries: BTreeMap<SampleId, BufferEntry>,
}

/// Sender-side result of a forward exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSend {
    pub payload: QuantizedPayload,
    /// The message the next stage consumes.
    pub received: Vector,
    /// Payload size in bytes.
    pub bytes: u64,
    /// `‖a − m_old‖` on compressed visits, zero otherwise.
    pub residual: f64,
    pub first_visit: bool,
}

impl ActivationBuffer {
    pub fn new(boundary: u16, dim: usize, precision: BufferPrecision) -> Self {
        Self {
            boundary,
            dim,
            precision,
            entries: BTreeMap::new(),
        }
    }

    pub fn boundary(&self) -> u16 {
        self.boundary
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> BufferPrecision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn message(&self, sample: SampleId) -> Option<&Vector> {
        self.entries.get(&sample).map(|e| &e.message)
    }

    pub fn visits(&self, sample: SampleId) -> &[u64] {
        self.entries.get(&sample).map_or(&[], |e| &e.visits)
    }

    pub fn entries(&self) -> impl Iterator<Item = (SampleId, &BufferEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// SHA-256 over the boundary id and every entry in sample order: sample
    /// id, message bits and visit steps, all little-endian.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.boundary.to_le_bytes());
        for (id, e) in &self.entries {
            h.update(id.to_le_bytes());
            for v in e.message.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update((e.visits.len() as u64).to_le_bytes());
            for s in &e.visits {
                h.update(s.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim {
            return Err(ProtocolError::DimensionMismatch {
                boundary: self.boundary,
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }

    fn store(&mut self, sample: SampleId, step: u64, message: &Vector, buf_rng: &mut RngStream) {
        let stored = match self.precision {
            BufferPrecision::Full => message.clone(),
            BufferPrecision::Bits(z) => round_trip(
                &QuantizerSpec::range(z).expect("validated buffer bits"),
                message,
                buf_rng,
            ),
        };
        let entry = self.entries.entry(sample).or_insert_with(|| BufferEntry {
            message: stored.clone(),
            visits: Vec::new(),
        });
        entry.message = stored;
        entry.visits.push(step);
    }

    /// Sender side: encode the activation against the buffered message and
    /// update this copy.
    ///
    /// The first visit sends the activation raw. Later visits send
    /// `Q(a − m)` and set `m ← m + Q(a − m)`; with the identity quantizer the
    /// update is `m ← a` and the activation is sent raw.
    pub fn send(
        &mut self,
        sample: SampleId,
        step: u64,
        activation: &Vector,
        fw: &QuantizerSpec,
        rng: &mut RngStream,
        buf_rng: &mut RngStream,
    ) -> Result<ForwardSend> {
        self.check_dim(activation.len())?;
        let (payload, received, residual, first_visit) = match self.entries.get(&sample) {
            Some(entry) if !fw.is_identity() => {
                let diff = activation.sub(&entry.message)?;
                let payload = quantize(fw, &diff, rng);
                let dm = dequantize(fw, &payload)?;
                let m = entry.message.add(&dm)?;
                (payload, m, diff.l2_norm(), false)
            }
            existing => (
                QuantizedPayload::Raw(activation.clone()),
                activation.clone(),
                0.0,
                existing.is_none(),
            ),
        };
        self.store(sample, step, &received, buf_rng);
        let bytes = payload_bytes(&payload) as u64;
        Ok(ForwardSend {
            payload,
            received,
            bytes,
            residual,
            first_visit,
        })
    }

    /// Receiver side: apply a payload produced by [`ActivationBuffer::send`]
    /// on the mirrored copy.
    pub fn receive(
        &mut self,
        sample: SampleId,
        step: u64,
        payload: &QuantizedPayload,
        fw: &QuantizerSpec,
        buf_rng: &mut RngStream,
    ) -> Result<Vector> {
        self.check_dim(payload.len())?;
        let message = match (self.entries.get(&sample), payload) {
            (_, QuantizedPayload::Raw(a)) => a.clone(),
            (Some(entry), coded) => {
                let dm = dequantize(fw, coded)?;
                entry.message.add(&dm)?
            }
            (None, QuantizedPayload::Coded { .. }) => {
                return Err(ProtocolError::Corrupt(format!(
                    "coded delta for sample {sample} with no buffered message at boundary {}",
                    self.boundary
                )))
            }
        };
        if !payload.is_raw() && fw.is_identity() {
            return Err(ProtocolError::Corrupt("coded payload for identity quantizer".into()));
        }
        self.store(sample, step, &message, buf_rng);
        Ok(message)
    }
}

/// Size of a payload on the wire, excluding the frame header.
pub fn payload_bytes(payload: &QuantizedPayload) -> usize {
    match payload {
        QuantizedPayload::Raw(v) => encoded_bytes(&QuantizerSpec::identity(), v.len()),
        QuantizedPayload::Coded { width, codes, .. } => {
            (codes.len() * *width as usize).div_ceil(8) + crate::quantize::SCALE_HEADER_BYTES
        }
    }
}

/// AQ-SGD forward exchange on a single buffer shared by both sides.
/// Returns the received message and the payload size in bytes.
pub fn forward_exchange(
    buffer: &mut ActivationBuffer,
    sample: SampleId,
    step: u64,
    activation: &Vector,
    fw: &QuantizerSpec,
    rng: &mut RngStream,
    buf_rng: &mut RngStream,
) -> Result<(Vector, u64)> {
    let out = buffer.send(sample, step, activation, fw, rng, buf_rng)?;
    Ok((out.received, out.bytes))
}

/// Backward exchange: the gradient is quantized directly, with no buffer.
/// Returns the payload, the received gradient and the payload size.
pub fn backward_exchange(
    grad: &Vector,
    expected_dim: usize,
    bw: &QuantizerSpec,
    rng: &mut RngStream,
) -> Result<(QuantizedPayload, Vector, u64)> {
    if grad.len() != expected_dim {
        return Err(ProtocolError::DimensionMismatch {
            boundary: 0,
            expected: expected_dim,
            found: grad.len(),
        });
    }
    let payload = quantize(bw, grad, rng);
    let received = dequantize(bw, &payload)?;
    let bytes = payload_bytes(&payload) as u64;
    Ok((payload, received, bytes))
}

/// Forward send for any mode. `buffer` is required for AQ-SGD and ignored
/// otherwise.
pub(crate) fn forward_send(
    mode: Mode,
    fw: &QuantizerSpec,
    buffer: Option<&mut ActivationBuffer>,
    sample: SampleId,
    step: u64,
    activation: &Vector,
    rng: &mut RngStream,
    buf_rng: &mut RngStream,
) -> Result<ForwardSend> {
    let (payload, received) = match mode {
        Mode::AqSgd => {
            let buffer = buffer.expect("AQ-SGD keeps a buffer per boundary");
            return buffer.send(sample, step, activation, fw, rng, buf_rng);
        }
        Mode::Fp32 => (QuantizedPayload::Raw(activation.clone()), activation.clone()),
        Mode::DirectQ => {
            let payload = quantize(fw, activation, rng);
            let received = dequantize(fw, &payload)?;
            (payload, received)
        }
    };
    let bytes = payload_bytes(&payload) as u64;
    Ok(ForwardSend {
        payload,
        received,
        bytes,
        residual: 0.0,
        first_visit: false,
    })
}

/// Receiver-side counterpart of [`forward_send`].
pub(crate) fn forward_receive(
    mode: Mode,
    fw: &QuantizerSpec,
    buffer: Option<&mut ActivationBuffer>,
    sample: SampleId,
    step: u64,
    payload: &QuantizedPayload,
    buf_rng: &mut RngStream,
) -> Result<Vector> {
    match mode {
        Mode::AqSgd => buffer
            .expect("AQ-SGD keeps a buffer per boundary")
            .receive(sample, step, payload, fw, buf_rng),
        Mode::Fp32 => Ok(dequantize(&QuantizerSpec::identity(), payload)?),
        Mode::DirectQ => Ok(dequantize(fw, payload)?),
    }
}
