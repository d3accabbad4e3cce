//! Motion field transmission.
//!
//! The normative path codes each coordinate of the field in the reference
//! graph's Fourier basis: smooth fields concentrate their energy in the
//! low-frequency coefficients, so uniform quantization followed by the
//! run-length/Golomb-Rice coder produces long zero runs. The decoder owns
//! the same graph (it is built from decoded geometry), so no connectivity
//! or basis information is transmitted.
//!
//! A direct signal-domain variant (quantize the raw per-vertex components)
//! is kept alongside as the comparison baseline for rate measurements.

use super::CodecError;
use crate::entropy::{dequantize, quantize, rlgr_decode, rlgr_encode, Bitstream, QuantizerSpec};
use crate::motion::MotionField;
use crate::spectral::{gft, inverse_gft, Spectrum};

fn split_blocks(field: &MotionField) -> [&[f64]; 3] {
    let n = field.len();
    let stacked = field.stacked();
    [&stacked[..n], &stacked[n..2 * n], &stacked[2 * n..]]
}

/// The three coordinate blocks travel as one RLGR stream of `3n` symbols
/// (x, then y, then z): the split point is implied by the vertex count, so
/// the only framing is the count itself and the byte length.
fn write_stream(n: usize, stream: Bitstream) -> Vec<u8> {
    let bytes = stream.into_bytes();
    let mut out = Vec::with_capacity(8 + bytes.len());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bytes);
    out
}

fn read_stream(payload: &[u8], expected_n: usize) -> Result<Vec<i32>, CodecError> {
    let what = "motion payload";
    if payload.len() < 8 {
        return Err(CodecError::Truncated { context: what });
    }
    let n = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
    if n != expected_n {
        return Err(CodecError::MalformedPayload { what });
    }
    let len = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes")) as usize;
    if 8 + len > payload.len() {
        return Err(CodecError::Truncated { context: what });
    }
    if 8 + len < payload.len() {
        return Err(CodecError::MalformedPayload { what });
    }
    let stream = Bitstream::from_bytes(payload[8..].to_vec());
    Ok(rlgr_decode(&stream, 3 * n)?)
}

/// Codes a motion field in the reference graph's Fourier basis: per
/// coordinate, GFT → uniform quantization → RLGR.
pub fn encode_motion_gft(
    spectrum: &Spectrum,
    field: &MotionField,
    delta: f64,
) -> Result<Vec<u8>, CodecError> {
    if spectrum.len() != field.len() {
        return Err(CodecError::MalformedPayload { what: "motion field size" });
    }
    let q = QuantizerSpec::new(delta)?;
    let mut symbols = Vec::with_capacity(3 * field.len());
    for block in split_blocks(field) {
        let coeffs = gft(spectrum, block)?;
        symbols.extend(quantize(&coeffs, q)?);
    }
    Ok(write_stream(field.len(), rlgr_encode(&symbols)))
}

/// Decodes a GFT-domain motion payload against the same spectrum.
pub fn decode_motion_gft(
    spectrum: &Spectrum,
    payload: &[u8],
    delta: f64,
    vertex_count: usize,
) -> Result<MotionField, CodecError> {
    if spectrum.len() != vertex_count {
        return Err(CodecError::MalformedPayload { what: "motion field size" });
    }
    let q = QuantizerSpec::new(delta)?;
    let symbols = read_stream(payload, vertex_count)?;
    let mut stacked = Vec::with_capacity(3 * vertex_count);
    for coords in symbols.chunks_exact(vertex_count) {
        let coeffs = dequantize(coords, q);
        stacked.extend(inverse_gft(spectrum, &coeffs)?);
    }
    Ok(MotionField::from_stacked(stacked)?)
}

/// Baseline coder: quantizes the per-vertex components directly (no
/// transform), then RLGR over the same concatenated layout.
pub fn encode_motion_signal(field: &MotionField, delta: f64) -> Result<Vec<u8>, CodecError> {
    let q = QuantizerSpec::new(delta)?;
    let mut symbols = Vec::with_capacity(3 * field.len());
    for block in split_blocks(field) {
        symbols.extend(quantize(block, q)?);
    }
    Ok(write_stream(field.len(), rlgr_encode(&symbols)))
}

/// Decodes a signal-domain motion payload.
pub fn decode_motion_signal(
    payload: &[u8],
    delta: f64,
    vertex_count: usize,
) -> Result<MotionField, CodecError> {
    let q = QuantizerSpec::new(delta)?;
    let symbols = read_stream(payload, vertex_count)?;
    let mut stacked = Vec::with_capacity(3 * vertex_count);
    for coords in symbols.chunks_exact(vertex_count) {
        stacked.extend(dequantize(coords, q));
    }
    Ok(MotionField::from_stacked(stacked)?)
}

/// Projects a field onto the `keep` lowest Fourier modes of the spectrum,
/// per coordinate. This is an encoder-side tool: a truncated field warps
/// the reference almost as well when the discarded modes are quantization
/// wobble, and its coefficients cost far fewer bits. The decoder never sees
/// the choice — it just receives whichever coefficients were coded.
pub fn lowpass_field(
    spectrum: &Spectrum,
    field: &MotionField,
    keep: usize,
) -> Result<MotionField, CodecError> {
    if spectrum.len() != field.len() {
        return Err(CodecError::MalformedPayload { what: "motion field size" });
    }
    let keep = keep.min(field.len());
    let mut stacked = Vec::with_capacity(3 * field.len());
    for block in split_blocks(field) {
        let mut coeffs = gft(spectrum, block)?;
        for c in coeffs.iter_mut().skip(keep) {
            *c = 0.0;
        }
        stacked.extend(inverse_gft(spectrum, &coeffs)?);
    }
    Ok(MotionField::from_stacked(stacked)?)
}

/// Signal-to-quantization-noise ratio of a reconstructed field, in dB.
/// Returns `f64::INFINITY` for an exact reconstruction.
pub fn motion_sqnr_db(original: &MotionField, decoded: &MotionField) -> f64 {
    let signal: f64 = original.stacked().iter().map(|x| x * x).sum();
    let noise: f64 = original
        .stacked()
        .iter()
        .zip(decoded.stacked())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    if noise == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (signal / noise).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::VoxelGraph;
    use crate::spectral::eigendecompose;

    fn lcg(state: &mut u64) -> u64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        *state
    }

    fn unit(state: &mut u64) -> f64 {
        (lcg(state) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn random_connected_graph(n: usize, seed: u64) -> VoxelGraph {
        let mut state = seed;
        let mut edges = Vec::new();
        for i in 1..n {
            let j = (lcg(&mut state) >> 33) as usize % i;
            edges.push((j as u32, i as u32, 0.5 + unit(&mut state)));
        }
        for i in 0..n / 2 {
            let a = (2 * i) as u32;
            let b = ((2 * i + 5) % n) as u32;
            if a != b && !edges.iter().any(|&(x, y, _)| (x.min(y), x.max(y)) == (a.min(b), a.max(b)))
            {
                edges.push((a, b, 1.0));
            }
        }
        VoxelGraph::from_edges(n, edges).unwrap()
    }

    /// A field whose coordinates are random combinations of the lowest
    /// eigenvectors — smooth on the graph by construction.
    fn smooth_field(spectrum: &Spectrum, seed: u64, amplitude: f64) -> MotionField {
        let n = spectrum.len();
        let mut state = seed;
        let mut stacked = Vec::with_capacity(3 * n);
        for _ in 0..3 {
            let mut coeffs = vec![0.0; n];
            for (l, c) in coeffs.iter_mut().enumerate() {
                let falloff = (-(l as f64) / 3.0).exp();
                *c = (unit(&mut state) * 2.0 - 1.0) * amplitude * falloff;
            }
            stacked.extend(inverse_gft(spectrum, &coeffs).unwrap());
        }
        MotionField::from_stacked(stacked).unwrap()
    }

    #[test]
    fn zero_field_codes_to_zero_field() {
        let graph = random_connected_graph(40, 1);
        let spectrum = eigendecompose(&graph).unwrap();
        let field = MotionField::zero(40);
        let payload = encode_motion_gft(&spectrum, &field, 0.5).unwrap();
        let decoded = decode_motion_gft(&spectrum, &payload, 0.5, 40).unwrap();
        assert_eq!(decoded, field);
        // A single all-zero RLGR stream is tiny: count + length + a few bytes.
        assert!(payload.len() <= 8 + 3, "payload {} bytes", payload.len());
    }

    #[test]
    fn lowpass_keeps_the_leading_modes_and_drops_the_rest() {
        let graph = random_connected_graph(40, 11);
        let spectrum = eigendecompose(&graph).unwrap();
        let field = smooth_field(&spectrum, 55, 3.0);

        // keep = n is the identity up to round-off.
        let full = lowpass_field(&spectrum, &field, 40).unwrap();
        for (a, b) in field.stacked().iter().zip(full.stacked()) {
            assert!((a - b).abs() < 1e-9);
        }

        // A strict truncation matches zeroing the coefficient tail directly.
        let keep = 7;
        let truncated = lowpass_field(&spectrum, &field, keep).unwrap();
        for c in 0..3 {
            let orig = gft(&spectrum, &field.stacked()[c * 40..(c + 1) * 40]).unwrap();
            let cut = gft(&spectrum, &truncated.stacked()[c * 40..(c + 1) * 40]).unwrap();
            for (l, (&a, &b)) in orig.iter().zip(&cut).enumerate() {
                let expected = if l < keep { a } else { 0.0 };
                assert!((b - expected).abs() < 1e-9, "mode {l}: {b} vs {expected}");
            }
        }

        // On a connected graph, keep = 1 collapses each coordinate to its mean.
        let dc = lowpass_field(&spectrum, &field, 1).unwrap();
        for c in 0..3 {
            let block = &field.stacked()[c * 40..(c + 1) * 40];
            let mean = block.iter().sum::<f64>() / 40.0;
            for &v in &dc.stacked()[c * 40..(c + 1) * 40] {
                assert!((v - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_field_energy_sits_in_the_zero_mode() {
        let graph = random_connected_graph(30, 2);
        let spectrum = eigendecompose(&graph).unwrap();
        assert_eq!(spectrum.zero_multiplicity(), 1);
        let mut stacked = vec![0.0; 90];
        for v in stacked.iter_mut().take(30) {
            *v = 5.0;
        }
        let field = MotionField::from_stacked(stacked).unwrap();
        let coeffs = gft(&spectrum, &field.stacked()[..30]).unwrap();
        for (l, &c) in coeffs.iter().enumerate() {
            if l == 0 {
                assert!(c.abs() > 1.0);
            } else {
                assert!(c.abs() < 1e-8, "mode {l} leaked {c}");
            }
        }
        // End to end at Δ=1: reconstruction stays within the quantizer bound.
        let payload = encode_motion_gft(&spectrum, &field, 1.0).unwrap();
        let decoded = decode_motion_gft(&spectrum, &payload, 1.0, 30).unwrap();
        let coeffs_hat = gft(&spectrum, &decoded.stacked()[..30]).unwrap();
        for (a, b) in coeffs.iter().zip(&coeffs_hat) {
            assert!((a - b).abs() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn gft_round_trip_respects_coefficient_bound() {
        let graph = random_connected_graph(50, 3);
        let spectrum = eigendecompose(&graph).unwrap();
        let field = smooth_field(&spectrum, 77, 3.0);
        for delta in [0.25, 0.5, 1.0] {
            let payload = encode_motion_gft(&spectrum, &field, delta).unwrap();
            let decoded = decode_motion_gft(&spectrum, &payload, delta, 50).unwrap();
            for c in 0..3 {
                let orig = gft(&spectrum, &field.stacked()[c * 50..(c + 1) * 50]).unwrap();
                let rec = gft(&spectrum, &decoded.stacked()[c * 50..(c + 1) * 50]).unwrap();
                for (a, b) in orig.iter().zip(&rec) {
                    assert!((a - b).abs() <= delta / 2.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn signal_domain_round_trip_respects_component_bound() {
        let graph = random_connected_graph(50, 4);
        let spectrum = eigendecompose(&graph).unwrap();
        let field = smooth_field(&spectrum, 99, 2.0);
        let delta = 0.5;
        let payload = encode_motion_signal(&field, delta).unwrap();
        let decoded = decode_motion_signal(&payload, delta, 50).unwrap();
        for (a, b) in field.stacked().iter().zip(decoded.stacked()) {
            assert!((a - b).abs() <= delta / 2.0 + 1e-12);
        }
    }

    #[test]
    fn sqnr_is_monotone_in_delta() {
        let graph = random_connected_graph(60, 5);
        let spectrum = eigendecompose(&graph).unwrap();
        let field = smooth_field(&spectrum, 123, 4.0);
        let mut last = f64::INFINITY;
        for delta in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let payload = encode_motion_gft(&spectrum, &field, delta).unwrap();
            let decoded = decode_motion_gft(&spectrum, &payload, delta, 60).unwrap();
            let sqnr = motion_sqnr_db(&field, &decoded);
            assert!(sqnr <= last + 1e-9, "Δ={delta}: {sqnr} after {last}");
            last = sqnr;
        }
    }

    #[test]
    fn smooth_fields_cost_fewer_bits_in_the_fourier_domain() {
        // At equal stepsize the transform path concentrates the energy and
        // RLGR sees long zero runs; the raw path pays for every component.
        let graph = random_connected_graph(80, 6);
        let spectrum = eigendecompose(&graph).unwrap();
        let mut gft_total = 0usize;
        let mut signal_total = 0usize;
        for seed in 0..5u64 {
            let field = smooth_field(&spectrum, 1000 + seed, 3.0);
            gft_total += encode_motion_gft(&spectrum, &field, 0.25).unwrap().len();
            signal_total += encode_motion_signal(&field, 0.25).unwrap().len();
        }
        assert!(
            gft_total < signal_total,
            "gft {gft_total} bytes vs signal {signal_total} bytes"
        );
    }

    #[test]
    fn payload_validation_catches_mismatches() {
        let graph = random_connected_graph(20, 7);
        let spectrum = eigendecompose(&graph).unwrap();
        let field = MotionField::zero(20);
        let payload = encode_motion_gft(&spectrum, &field, 0.5).unwrap();
        // Wrong vertex count.
        assert!(decode_motion_gft(&spectrum, &payload, 0.5, 19).is_err());
        // Truncation.
        assert!(matches!(
            decode_motion_gft(&spectrum, &payload[..payload.len() - 1], 0.5, 20),
            Err(CodecError::Truncated { .. } | CodecError::MalformedPayload { .. })
        ));
        // Trailing garbage.
        let mut extended = payload.clone();
        extended.push(0xAB);
        assert!(decode_motion_gft(&spectrum, &extended, 0.5, 20).is_err());
        // Field larger than the spectrum is rejected at encode time.
        let big = MotionField::zero(21);
        assert!(encode_motion_gft(&spectrum, &big, 0.5).is_err());
    }
}
