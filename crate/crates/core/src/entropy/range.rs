//! 32-bit range coder with carry propagation.
//!
//! Classic byte-oriented range coder: the encoder keeps a 33-bit `low`
//! accumulator (the extra bit is the pending carry), a 32-bit `range`, and
//! delays byte output through a cache so that a carry can still propagate
//! through a run of `0xFF` bytes. Frequencies are integer counts with a
//! total of at most 2¹⁶, which together with the 2²⁴ renormalization bound
//! guarantees a nonzero sub-range for every symbol.
//!
//! The first emitted byte is always the flushed initial cache (zero); the
//! decoder primes its 32-bit window by shifting in five bytes, discarding
//! those leading bits naturally. Reads past the end of the stream return
//! zero bytes — the trailing flush makes this safe, and symbol counts are
//! enforced by the caller.

/// Renormalization threshold.
const TOP: u32 = 1 << 24;

/// Maximum allowed cumulative frequency total.
pub const MAX_TOTAL: u32 = 1 << 16;

/// Range encoder accumulating bytes in memory.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    /// Narrows the interval to the symbol spanning `[cum, cum + freq)` out
    /// of `total`. Requires `freq > 0`, `cum + freq ≤ total ≤ MAX_TOTAL`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= MAX_TOTAL);
        let r = self.range / total;
        self.low += u64::from(cum) * u64::from(r);
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Encodes one bit with a uniform model (used for raw escape payloads).
    pub fn encode_raw_bit(&mut self, bit: bool) {
        let half = MAX_TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half, MAX_TOTAL);
    }

    /// Encodes the low `n` bits of `value`, most significant first.
    pub fn encode_raw_bits(&mut self, value: u32, n: u32) {
        for i in (0..n).rev() {
            self.encode_raw_bit((value >> i) & 1 == 1);
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 32) as u32;
        if self.low < 0xFF00_0000 || carry == 1 {
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry as u8));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Flushes the remaining state and returns the stream bytes.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

/// Range decoder over a byte slice.
#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self { code: 0, range: u32::MAX, input, pos: 0 };
        for _ in 0..5 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Returns a value in `[0, total)` locating the next symbol in the
    /// cumulative frequency table.
    pub fn decode_target(&mut self, total: u32) -> u32 {
        debug_assert!(total <= MAX_TOTAL);
        let r = self.range / total;
        (self.code / r).min(total - 1)
    }

    /// Consumes the symbol previously located via [`Self::decode_target`].
    pub fn decode_update(&mut self, cum: u32, freq: u32, total: u32) {
        let r = self.range / total;
        self.code = self.code.wrapping_sub(cum.wrapping_mul(r));
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.range <<= 8;
        }
    }

    pub fn decode_raw_bit(&mut self) -> bool {
        let half = MAX_TOTAL / 2;
        let bit = self.decode_target(MAX_TOTAL) >= half;
        self.decode_update(if bit { half } else { 0 }, half, MAX_TOTAL);
        bit
    }

    pub fn decode_raw_bits(&mut self, n: u32) -> u32 {
        let mut v = 0u32;
        for _ in 0..n {
            v = (v << 1) | u32::from(self.decode_raw_bit());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Splits [0, total) into `weights.len()` spans and returns (cum, freq)
    /// of symbol `s`.
    fn span(weights: &[u32], s: usize) -> (u32, u32) {
        let cum: u32 = weights[..s].iter().sum();
        (cum, weights[s])
    }

    fn locate(weights: &[u32], target: u32) -> usize {
        let mut cum = 0;
        for (s, &w) in weights.iter().enumerate() {
            if target < cum + w {
                return s;
            }
            cum += w;
        }
        unreachable!("target within total")
    }

    #[test]
    fn round_trips_with_static_model() {
        let weights = [1u32, 9, 90, 900, 9000, 55536];
        let total: u32 = weights.iter().sum();
        assert_eq!(total, MAX_TOTAL);

        let mut state = 99u64;
        let symbols: Vec<usize> = (0..20_000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                // Bias toward the heavy symbol to exercise long stable runs.
                if state & 0xF != 0 {
                    5
                } else {
                    (state >> 40) as usize % 6
                }
            })
            .collect();

        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            let (cum, freq) = span(&weights, s);
            enc.encode(cum, freq, total);
        }
        let bytes = enc.finish();

        let mut dec = RangeDecoder::new(&bytes);
        for (i, &expected) in symbols.iter().enumerate() {
            let target = dec.decode_target(total);
            let s = locate(&weights, target);
            assert_eq!(s, expected, "symbol {i}");
            let (cum, freq) = span(&weights, s);
            dec.decode_update(cum, freq, total);
        }
    }

    #[test]
    fn carry_propagation_survives_adversarial_models() {
        // Skewed two-symbol models push `low` close to carry boundaries and
        // generate 0xFF cascades; verify exact recovery on many layouts.
        for &heavy in &[MAX_TOTAL - 1, MAX_TOTAL - 16, 65_000, 40_000] {
            let weights = [heavy, MAX_TOTAL - heavy];
            let mut state = u64::from(heavy) | 1;
            let symbols: Vec<usize> = (0..5000)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    usize::from((state >> 45) % 97 == 0)
                })
                .collect();
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                let (cum, freq) = span(&weights, s);
                enc.encode(cum, freq, MAX_TOTAL);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes);
            for &expected in &symbols {
                let target = dec.decode_target(MAX_TOTAL);
                let s = locate(&weights, target);
                assert_eq!(s, expected);
                let (cum, freq) = span(&weights, s);
                dec.decode_update(cum, freq, MAX_TOTAL);
            }
        }
    }

    #[test]
    fn raw_bits_round_trip() {
        let values = [0u32, 1, 0xFFFF_FFFF, 0x8000_0001, 12345];
        let mut enc = RangeEncoder::new();
        for &v in &values {
            enc.encode_raw_bits(v, 32);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for &v in &values {
            assert_eq!(dec.decode_raw_bits(32), v);
        }
    }

    #[test]
    fn compresses_skewed_data_below_one_bit_per_symbol() {
        let weights = [65_000u32, 536];
        let n = 10_000;
        let mut enc = RangeEncoder::new();
        for _ in 0..n {
            let (cum, freq) = span(&weights, 0);
            enc.encode(cum, freq, MAX_TOTAL);
        }
        let bytes = enc.finish();
        // H(p) ≈ 0.012 bits/symbol at p = 536/65536; allow generous slack.
        assert!(bytes.len() * 8 < n / 4, "{} bytes for {n} symbols", bytes.len());
    }
}
