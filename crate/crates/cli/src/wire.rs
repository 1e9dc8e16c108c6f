//! Binary frames sent on the streaming endpoint. All fields little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RIR1"
//! 4       4     u32 payload length in bytes (everything after this field)
//! 8       8     u64 sequence number, 1 for the first frame of a connection
//! 16      8     u64 request id echoed from the update message (0 if absent)
//! 24      8     f64 compute time in milliseconds
//! 32      8     f64 sample rate in Hz
//! 40      4     u32 receivers R
//! 44      4     u32 samples per impulse response S
//! 48      4     u32 transfer-function bins B
//! 52      4RS   f32 pressures in Pa, receiver-major
//! 52+4RS  4RB   f32 magnitudes in dB, receiver-major; bin k is k * f_s / S Hz
//! ```

use anyhow::{bail, ensure, Result};

pub const MAGIC: &[u8; 4] = b"RIR1";
pub const HEADER_LEN: usize = 52;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub seq: u64,
    pub id: u64,
    pub compute_ms: f64,
    pub f_s: f64,
    pub samples: usize,
    pub bins: usize,
    /// One impulse response per receiver.
    pub pressures: Vec<Vec<f32>>,
    /// One magnitude spectrum per receiver.
    pub magnitude_db: Vec<Vec<f32>>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let r = self.pressures.len();
        let len = HEADER_LEN + 4 * r * (self.samples + self.bins);
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&((len - 8) as u32).to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.id.to_le_bytes());
        out.extend_from_slice(&self.compute_ms.to_le_bytes());
        out.extend_from_slice(&self.f_s.to_le_bytes());
        for n in [r, self.samples, self.bins] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.pressures.iter().chain(&self.magnitude_db).flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        ensure!(bytes.len() >= HEADER_LEN, "frame of {} bytes is shorter than the header", bytes.len());
        ensure!(&bytes[..4] == MAGIC, "bad magic {:?}", &bytes[..4]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (r, samples, bins) = (u32_at(40), u32_at(44), u32_at(48));
        let len = HEADER_LEN + 4 * r * (samples + bins);
        if u32_at(4) != len - 8 || bytes.len() != len {
            bail!("frame length {} does not match header ({} expected)", bytes.len(), len);
        }
        let mut values = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<Vec<f32>> { (0..r).map(|_| values.by_ref().take(n).collect()).collect() };
        let pressures = take(samples);
        let magnitude_db = take(bins);
        Ok(Frame {
            seq: u64_at(8),
            id: u64_at(16),
            compute_ms: f64_at(24),
            f_s: f64_at(32),
            samples,
            bins,
            pressures,
            magnitude_db,
        })
    }
}
