//! Adaptive arithmetic coding with discretized Laplacian models.
//!
//! Each symbol is coded under a two-sided geometric (discretized Laplacian)
//! distribution whose diversity is the product of a per-symbol *seed*
//! (side information shared by encoder and decoder, e.g. derived from graph
//! eigenvalues) and a stream-global adaptive factor updated by an
//! exponential moving average of observed magnitudes. Seeds give the model
//! its per-coefficient shape; the EMA absorbs the overall scale.
//!
//! The coded alphabet covers magnitudes up to [`DIRECT_MAX`] plus an escape
//! symbol that switches to a raw 32-bit zigzag payload; every symbol keeps a
//! probability of at least 1/4096 so outliers stay decodable. Frequency
//! tables are built from IEEE-754 double arithmetic only (the geometric
//! ratio uses a repeated-squaring rational approximation of `exp(-1/b)`),
//! so streams are bit-identical across platforms.

use super::range::{RangeDecoder, RangeEncoder, MAX_TOTAL};
use super::{Bitstream, EntropyError};

/// Largest magnitude coded directly; larger magnitudes escape.
pub const DIRECT_MAX: i32 = 256;

/// Alphabet: 0, ±1..±DIRECT_MAX, escape.
const N_SYMBOLS: usize = 2 * DIRECT_MAX as usize + 2;
const ESCAPE: usize = N_SYMBOLS - 1;

/// Probability floor of 1/4096 expressed in frequency counts.
const FLOOR: u32 = MAX_TOTAL / 4096;

/// Index layout: 0 → 0, 2m−1 → +m, 2m → −m.
#[inline]
fn symbol_index(value: i32) -> usize {
    debug_assert!(value.abs() <= DIRECT_MAX);
    if value == 0 {
        0
    } else if value > 0 {
        2 * value as usize - 1
    } else {
        2 * (-value) as usize
    }
}

#[inline]
fn index_value(index: usize) -> i32 {
    debug_assert!(index < ESCAPE);
    if index == 0 {
        0
    } else if index % 2 == 1 {
        ((index + 1) / 2) as i32
    } else {
        -((index / 2) as i32)
    }
}

#[inline]
fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

#[inline]
fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

/// Portable stand-in for `exp(-t)`: `(1 + t/64)^-64` via repeated squaring.
/// Uses only IEEE-defined operations, so results are bit-identical
/// everywhere; accuracy (~1% in the useful range) is irrelevant because the
/// adaptive factor absorbs scale errors.
#[inline]
fn portable_exp_neg(t: f64) -> f64 {
    let mut r = 1.0 / (1.0 + t / 64.0);
    for _ in 0..6 {
        r *= r;
    }
    r
}

/// Adaptive diversity state for one coded stream.
#[derive(Debug, Clone)]
pub struct LaplacianModel {
    decay: f64,
    /// EMA of |symbol| / seed: the stream-global scale factor.
    tnorm: f64,
}

impl LaplacianModel {
    pub fn new(decay: f64) -> Result<Self, EntropyError> {
        if !(decay.is_finite() && (0.0..1.0).contains(&decay)) {
            return Err(EntropyError::InvalidStepsize { stepsize: decay });
        }
        Ok(Self { decay, tnorm: 1.0 })
    }

    /// Effective diversity for a coefficient with the given seed.
    pub fn diversity(&self, seed: f64) -> f64 {
        (seed * self.tnorm).clamp(1e-6, 1e9)
    }

    /// Geometric ratio `r ≈ exp(-1/b)` of the discretized Laplacian.
    fn ratio(&self, seed: f64) -> f64 {
        portable_exp_neg(1.0 / self.diversity(seed)).clamp(1e-12, 0.9999)
    }

    /// Builds the integer frequency table (sums exactly to [`MAX_TOTAL`]).
    fn frequencies(&self, seed: f64) -> Vec<u32> {
        let r = self.ratio(seed);
        let mut weights = vec![0.0f64; N_SYMBOLS];
        weights[0] = 1.0;
        let mut w = 1.0f64;
        let mut wsum = 1.0f64;
        for m in 1..=DIRECT_MAX as usize {
            w *= r;
            weights[2 * m - 1] = w;
            weights[2 * m] = w;
            wsum += 2.0 * w;
        }
        // Escape carries the truncated geometric tail mass (both signs).
        let tail = 2.0 * w * r / (1.0 - r);
        weights[ESCAPE] = tail;
        wsum += tail;

        let available = (MAX_TOTAL - N_SYMBOLS as u32 * FLOOR) as f64;
        let mut freqs = vec![0u32; N_SYMBOLS];
        let mut sum = 0u32;
        for (f, &w) in freqs.iter_mut().zip(&weights) {
            *f = FLOOR + (available * w / wsum).floor() as u32;
            sum += *f;
        }
        // Deterministic remainder assignment keeps the total exact.
        freqs[0] += MAX_TOTAL - sum;
        freqs
    }

    /// EMA update from an observed magnitude; identical on both sides.
    fn update(&mut self, seed: f64, magnitude: f64) {
        let obs = magnitude / seed.max(1e-9);
        self.tnorm = (self.decay * self.tnorm + (1.0 - self.decay) * obs).clamp(1e-3, 1e6);
    }
}

fn validate_seeds(seeds: &[f64]) -> Result<(), EntropyError> {
    for (index, &s) in seeds.iter().enumerate() {
        if !(s.is_finite() && s > 0.0) {
            return Err(EntropyError::InvalidSeed { index });
        }
    }
    Ok(())
}

/// Encodes symbols under per-symbol diversity seeds.
///
/// `seeds` must align one-to-one with `symbols`; the decoder must be given
/// the identical seed sequence (it is derivable from already-decoded state
/// in the codec, never transmitted).
pub fn laplace_ac_encode(
    symbols: &[i32],
    seeds: &[f64],
    decay: f64,
) -> Result<Bitstream, EntropyError> {
    if symbols.len() != seeds.len() {
        return Err(EntropyError::SeedCountMismatch { seeds: seeds.len(), symbols: symbols.len() });
    }
    validate_seeds(seeds)?;
    let mut model = LaplacianModel::new(decay)?;
    let mut enc = RangeEncoder::new();
    for (&x, &seed) in symbols.iter().zip(seeds) {
        let freqs = model.frequencies(seed);
        let index =
            if x.unsigned_abs() <= DIRECT_MAX as u32 { symbol_index(x) } else { ESCAPE };
        let cum: u32 = freqs[..index].iter().sum();
        enc.encode(cum, freqs[index], MAX_TOTAL);
        if index == ESCAPE {
            enc.encode_raw_bits(zigzag(x), 32);
        }
        model.update(seed, f64::from(x.unsigned_abs() as u32));
    }
    Ok(Bitstream::from_bytes(enc.finish()))
}

/// Decodes `seeds.len()` symbols; seeds must match the encoder's exactly.
pub fn laplace_ac_decode(
    stream: &Bitstream,
    seeds: &[f64],
    decay: f64,
) -> Result<Vec<i32>, EntropyError> {
    validate_seeds(seeds)?;
    let mut model = LaplacianModel::new(decay)?;
    let mut dec = RangeDecoder::new(stream.bytes());
    let mut out = Vec::with_capacity(seeds.len());
    for (index, &seed) in seeds.iter().enumerate() {
        let freqs = model.frequencies(seed);
        let target = dec.decode_target(MAX_TOTAL);
        let mut cum = 0u32;
        let mut sym = ESCAPE;
        for (s, &f) in freqs.iter().enumerate() {
            if target < cum + f {
                sym = s;
                break;
            }
            cum += f;
        }
        dec.decode_update(cum, freqs[sym], MAX_TOTAL);
        let value = if sym == ESCAPE {
            let v = unzigzag(dec.decode_raw_bits(32));
            if v.unsigned_abs() <= DIRECT_MAX as u32 {
                // The encoder never escapes a directly-codable magnitude.
                return Err(EntropyError::CorruptStream { index });
            }
            v
        } else {
            index_value(sym)
        };
        model.update(seed, f64::from(value.unsigned_abs() as u32));
        out.push(value);
    }
    Ok(out)
}
