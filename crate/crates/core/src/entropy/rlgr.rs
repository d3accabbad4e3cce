//! Adaptive Run-Length / Golomb-Rice (RLGR) coder.
//!
//! The coder switches between two modes driven by a fractional adaptation
//! counter `kp` (with `k = kp >> 3`):
//!
//! * **Run mode** (`k > 0`) — a complete run of `2^k` zeros costs a single
//!   `0` bit; a partial run of `r < 2^k` zeros followed by a nonzero value
//!   is coded as `1`, `r` in `k` bits, a sign bit and the Golomb-Rice code
//!   of `|value| − 1`. Complete runs push `k` up, partial runs push it down.
//! * **Golomb-Rice mode** (`k == 0`) — each symbol is zigzag-mapped
//!   (`0, 1, −1, 2, −2, … → 0, 1, 2, 3, 4, …`) and Golomb-Rice coded with
//!   parameter `kr`, which adapts to the observed quotients.
//!
//! A quotient ≥ 24 escapes to a raw 32-bit value, bounding the worst-case
//! unary length. The stream stores no symbol count; the container carries
//! counts out of band, and a trailing zero run may therefore be flushed as a
//! partial run without a terminating value. All constants below are
//! normative for this bitstream.

use super::{BitReader, BitWriter, Bitstream, EntropyError};

/// Fractional bits of the adaptation counters.
const LSGR: u32 = 3;
/// Upper clamp for `kp` (run parameter counter), i.e. `k ≤ 10`.
const KP_MAX: u32 = 80;
/// Upper clamp for `krp` (Golomb-Rice parameter counter), i.e. `kr ≤ 24`.
const KRP_MAX: u32 = 192;
/// `kp` increment after a complete zero run.
const KP_UP_RUN: u32 = 4;
/// `kp` decrement after a partial (interrupted) run.
const KP_DOWN_RUN: u32 = 6;
/// `kp` increment after coding a zero in Golomb-Rice mode.
const KP_UP_ZERO: u32 = 3;
/// `kp` decrement after coding a nonzero in Golomb-Rice mode.
const KP_DOWN_NONZERO: u32 = 3;
/// Unary quotient cap; larger quotients switch to a raw 32-bit escape.
const UNARY_CAP: u32 = 24;
/// Initial counter values (`k = kr = 1`).
const KP_INIT: u32 = 8;
const KRP_INIT: u32 = 8;

/// Zigzag map for signed symbols: 0 → 0, 1 → 1, −1 → 2, 2 → 3, −2 → 4, …
#[inline]
fn zigzag(v: i32) -> u32 {
    let w = v.wrapping_neg();
    ((w << 1) ^ (w >> 31)) as u32
}

#[inline]
fn unzigzag(u: u32) -> i32 {
    if u & 1 == 1 {
        ((u >> 1) as i32).wrapping_add(1)
    } else {
        -((u >> 1) as i32)
    }
}

/// Adaptive coder state shared by encoder and decoder.
struct State {
    kp: u32,
    krp: u32,
}

impl State {
    fn new() -> Self {
        Self { kp: KP_INIT, krp: KRP_INIT }
    }

    fn k(&self) -> u32 {
        self.kp >> LSGR
    }

    fn kr(&self) -> u32 {
        self.krp >> LSGR
    }

    fn after_complete_run(&mut self) {
        self.kp = (self.kp + KP_UP_RUN).min(KP_MAX);
    }

    fn after_partial_run(&mut self) {
        self.kp = self.kp.saturating_sub(KP_DOWN_RUN);
    }

    fn after_gr_symbol(&mut self, u: u32) {
        if u == 0 {
            self.kp = (self.kp + KP_UP_ZERO).min(KP_MAX);
        } else {
            self.kp = self.kp.saturating_sub(KP_DOWN_NONZERO);
        }
    }

    /// Golomb-Rice parameter adaptation from the observed quotient.
    fn after_gr_code(&mut self, quotient: u32) {
        if quotient == 0 {
            self.krp = self.krp.saturating_sub(2);
        } else if quotient > 1 {
            self.krp = (self.krp + quotient).min(KRP_MAX);
        }
    }
}

fn write_gr(w: &mut BitWriter, u: u32, state: &mut State) {
    let kr = state.kr();
    let quotient = u >> kr;
    if quotient < UNARY_CAP {
        for _ in 0..quotient {
            w.put_bit(true);
        }
        w.put_bit(false);
        w.put_bits(u, kr);
    } else {
        for _ in 0..UNARY_CAP {
            w.put_bit(true);
        }
        w.put_bits(u, 32);
    }
    state.after_gr_code(quotient);
}

fn read_gr(r: &mut BitReader, state: &mut State) -> Result<u32, EntropyError> {
    let kr = state.kr();
    let mut quotient = 0u32;
    while quotient < UNARY_CAP && r.get_bit()? {
        quotient += 1;
    }
    let u = if quotient == UNARY_CAP {
        r.get_bits(32)?
    } else {
        (quotient << kr) | r.get_bits(kr)?
    };
    state.after_gr_code(u >> kr);
    Ok(u)
}

/// Encodes a signed symbol vector; `rlgr_decode` needs the symbol count.
pub fn rlgr_encode(symbols: &[i32]) -> Bitstream {
    let mut w = BitWriter::new();
    let mut state = State::new();
    let mut i = 0usize;
    while i < symbols.len() {
        let k = state.k();
        if k > 0 {
            let capacity = 1usize << k;
            let mut run = 0usize;
            while run < capacity && i + run < symbols.len() && symbols[i + run] == 0 {
                run += 1;
            }
            if run == capacity {
                w.put_bit(false);
                state.after_complete_run();
                i += run;
            } else if i + run == symbols.len() {
                // Trailing zeros with no terminating value: flush the count;
                // the decoder stops once the out-of-band symbol count is met.
                w.put_bit(true);
                w.put_bits(run as u32, k);
                i += run;
            } else {
                let value = symbols[i + run];
                w.put_bit(true);
                w.put_bits(run as u32, k);
                w.put_bit(value < 0);
                write_gr(&mut w, value.unsigned_abs() - 1, &mut state);
                state.after_partial_run();
                i += run + 1;
            }
        } else {
            let value = symbols[i];
            let u = zigzag(value);
            write_gr(&mut w, u, &mut state);
            state.after_gr_symbol(u);
            i += 1;
        }
    }
    w.finish()
}

/// Decodes exactly `count` symbols from an RLGR stream.
pub fn rlgr_decode(stream: &Bitstream, count: usize) -> Result<Vec<i32>, EntropyError> {
    let mut r = BitReader::new(stream);
    let mut state = State::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let k = state.k();
        if k > 0 {
            if !r.get_bit()? {
                let capacity = 1usize << k;
                out.extend(std::iter::repeat(0).take(capacity.min(count - out.len())));
                state.after_complete_run();
            } else {
                let run = r.get_bits(k)? as usize;
                out.extend(std::iter::repeat(0).take(run.min(count - out.len())));
                if out.len() >= count {
                    break; // flushed trailing run
                }
                let negative = r.get_bit()?;
                let magnitude = read_gr(&mut r, &mut state)? + 1;
                let value = magnitude as i32;
                out.push(if negative { -value } else { value });
                state.after_partial_run();
            }
        } else {
            let u = read_gr(&mut r, &mut state)?;
            out.push(unzigzag(u));
            state.after_gr_symbol(u);
        }
    }
    Ok(out)
}
