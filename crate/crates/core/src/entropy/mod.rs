//! Entropy coding: uniform scalar quantization, bit-level IO, an adaptive
//! Run-Length / Golomb-Rice coder and an adaptive arithmetic coder driven by
//! discretized Laplacian models.
//!
//! All payloads produced here are byte-aligned and deterministic: the same
//! symbols and model seeds yield bit-identical streams on every platform
//! (only IEEE-754 double arithmetic is used when deriving model tables, no
//! libm transcendentals). Symbol counts are *not* embedded in the streams —
//! they travel as explicit 32-bit little-endian counts in the container — so
//! decoders always receive the expected symbol count out of band.

mod laplace;
mod range;
mod rlgr;

pub use laplace::{laplace_ac_decode, laplace_ac_encode, LaplacianModel};
pub use range::{RangeDecoder, RangeEncoder};
pub use rlgr::{rlgr_decode, rlgr_encode};

use thiserror::Error;

/// Errors from quantization and entropy coding.
#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("quantizer stepsize must be positive and finite, got {stepsize}")]
    InvalidStepsize { stepsize: f64 },
    #[error("input value {index} is not finite")]
    NonFinite { index: usize },
    #[error("quantized magnitude at index {index} overflows the symbol range")]
    Overflow { index: usize },
    #[error("bitstream truncated at bit {bit}")]
    TruncatedStream { bit: usize },
    #[error("diversity seed {index} must be positive and finite")]
    InvalidSeed { index: usize },
    #[error("seed count {seeds} does not match symbol count {symbols}")]
    SeedCountMismatch { seeds: usize, symbols: usize },
    #[error("arithmetic decoder state corrupt at symbol {index}")]
    CorruptStream { index: usize },
}

/// Uniform scalar quantizer stepsize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSpec {
    step: f64,
}

impl QuantizerSpec {
    pub fn new(step: f64) -> Result<Self, EntropyError> {
        if !(step.is_finite() && step > 0.0) {
            return Err(EntropyError::InvalidStepsize { stepsize: step });
        }
        Ok(Self { step })
    }

    pub fn step(&self) -> f64 {
        self.step
    }
}

/// Quantizes `round(f / Δ)` with ties away from zero (the behavior of
/// `f64::round`). Rejects non-finite inputs and magnitudes that do not fit
/// the `i32` symbol range.
pub fn quantize(values: &[f64], q: QuantizerSpec) -> Result<Vec<i32>, EntropyError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if !v.is_finite() {
                return Err(EntropyError::NonFinite { index });
            }
            let r = (v / q.step).round();
            if r.abs() > i32::MAX as f64 {
                return Err(EntropyError::Overflow { index });
            }
            Ok(r as i32)
        })
        .collect()
}

/// Reconstructs `Δ · qᵢ`.
pub fn dequantize(symbols: &[i32], q: QuantizerSpec) -> Vec<f64> {
    symbols.iter().map(|&s| f64::from(s) * q.step).collect()
}

/// A byte-aligned bit payload with its exact bit length.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bitstream {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl Bitstream {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let bit_len = bytes.len() * 8;
        Self { bytes, bit_len }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }
}

/// MSB-first bit writer.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_bit(&mut self, bit: bool) {
        let pos = self.bit_len & 7;
        if pos == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().expect("byte pushed above") |= 0x80 >> pos;
        }
        self.bit_len += 1;
    }

    /// Writes the low `n` bits of `value`, most significant first.
    pub fn put_bits(&mut self, value: u32, n: u32) {
        debug_assert!(n <= 32);
        for i in (0..n).rev() {
            self.put_bit((value >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn finish(self) -> Bitstream {
        Bitstream { bytes: self.bytes, bit_len: self.bit_len }
    }
}

/// MSB-first bit reader over a [`Bitstream`].
#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: usize,
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(stream: &'a Bitstream) -> Self {
        Self { bytes: &stream.bytes, bit_len: stream.bit_len, pos: 0 }
    }

    pub fn get_bit(&mut self) -> Result<bool, EntropyError> {
        if self.pos >= self.bit_len {
            return Err(EntropyError::TruncatedStream { bit: self.pos });
        }
        let byte = self.bytes[self.pos >> 3];
        let bit = (byte >> (7 - (self.pos & 7))) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn get_bits(&mut self, n: u32) -> Result<u32, EntropyError> {
        debug_assert!(n <= 32);
        let mut v = 0u32;
        for _ in 0..n {
            v = (v << 1) | u32::from(self.get_bit()?);
        }
        Ok(v)
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}
