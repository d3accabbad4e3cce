//! Block-transform color coding.
//!
//! Color residuals (original minus predicted, per RGB channel) are coded
//! block by block: the frame is split into cubic blocks along Morton order,
//! each occupied block gets its own K-nearest-neighbor graph and Fourier
//! basis, and the residual is quantized in that basis. Two adaptive
//! arithmetic-coder streams per channel carry the coefficients:
//!
//! - the *DC* stream holds one coefficient per connected component of each
//!   block graph. DC terms are mutually predictable, so each is coded
//!   relative to the rounded running mean of the previously decoded DC
//!   terms, with an initial model diversity inversely proportional to the
//!   component's vertex count;
//! - the *AC* stream holds the remaining coefficients with an initial
//!   diversity of `1/√λ`, matching the decay expected of smooth residuals.
//!
//! Block graphs and spectra are derived from geometry alone, which the
//! decoder has already recovered losslessly, so both sides agree on every
//! basis without any side information. Decoded colors are *not* clamped or
//! rounded: reconstruction is exactly `prediction + dequantized residual`,
//! so a zero residual reproduces the prediction bit for bit.

use super::{CodecError, ColorParams};
use crate::entropy::{
    dequantize, laplace_ac_decode, laplace_ac_encode, quantize, Bitstream, QuantizerSpec,
};
use crate::graph::build_knn_graph;
use crate::spectral::{eigendecompose, gft, inverse_gft, Spectrum};
use crate::voxel::VoxelFrame;
use rayon::prelude::*;

/// Neighbor count for the per-block graphs.
const BLOCK_KNN: usize = 26;

/// An encoded color payload plus the colors the decoder will reconstruct.
#[derive(Clone, Debug)]
pub struct ColorPayload {
    /// Serialized coefficient streams (six per frame: DC and AC × RGB).
    pub bytes: Vec<u8>,
    /// The reconstruction a decoder of `bytes` will produce, bit for bit.
    pub decoded: Vec<[f64; 3]>,
}

/// Per-block transform state shared by encoder and decoder.
struct BlockTransform {
    /// First vertex of the block in frame order.
    start: usize,
    /// Fourier basis of the block's K-NN graph.
    spectrum: Spectrum,
    /// Connected components of the block graph = leading zero-eigenvalue
    /// coefficients of the spectrum.
    dc_count: usize,
    /// Initial model diversity per DC coefficient.
    dc_seeds: Vec<f64>,
    /// Initial model diversity per AC coefficient.
    ac_seeds: Vec<f64>,
}

impl BlockTransform {
    fn len(&self) -> usize {
        self.spectrum.len()
    }

    fn ac_count(&self) -> usize {
        self.len() - self.dc_count
    }
}

/// Splits a frame into runs of vertices sharing a block index. Voxels are
/// Morton-sorted, so every cubic block is one contiguous run.
fn block_ranges(frame: &VoxelFrame, block_size: u32) -> Vec<(usize, usize)> {
    let shift = 3 * block_size.trailing_zeros().min(frame.grid().depth());
    let mut ranges = Vec::new();
    let mut start = 0usize;
    while start < frame.len() {
        let block = frame.morton_key(start) >> shift;
        let mut end = start + 1;
        while end < frame.len() && frame.morton_key(end) >> shift == block {
            end += 1;
        }
        ranges.push((start, end));
        start = end;
    }
    ranges
}

/// Builds the per-block graphs, spectra and model seeds from geometry.
fn analyze_blocks(
    frame: &VoxelFrame,
    params: &ColorParams,
) -> Result<Vec<BlockTransform>, CodecError> {
    block_ranges(frame, params.block_size)
        .into_par_iter()
        .map(|(start, end)| {
            let voxels = frame.voxels()[start..end].to_vec();
            let colors = vec![[0.0; 3]; voxels.len()];
            let sub = VoxelFrame::new(*frame.grid(), voxels, colors)?;
            let graph = build_knn_graph(&sub, BLOCK_KNN)?;
            let spectrum = eigendecompose(&graph)?;
            let components = graph.components();
            let mut sizes = vec![0usize; components.count];
            for &label in &components.labels {
                sizes[label as usize] += 1;
            }
            // The spectrum's zero eigenvalues are ordered by component
            // label, so seed c belongs to coefficient c.
            let dc_seeds = sizes.iter().map(|&m| params.dc_constant / m as f64).collect();
            let ac_seeds = spectrum.eigenvalues()[components.count..]
                .iter()
                .map(|&l| 1.0 / l.max(1e-12).sqrt())
                .collect();
            Ok(BlockTransform {
                start,
                spectrum,
                dc_count: components.count,
                dc_seeds,
                ac_seeds,
            })
        })
        .collect()
}

/// Rounded running mean of the DC coefficients decoded so far; both sides
/// drive one per channel, in stream order.
#[derive(Default)]
struct DcPredictor {
    sum: f64,
    count: usize,
}

impl DcPredictor {
    fn predict(&self) -> i32 {
        if self.count == 0 {
            0
        } else {
            (self.sum / self.count as f64).round() as i32
        }
    }

    fn push(&mut self, value: i32) {
        self.sum += f64::from(value);
        self.count += 1;
    }
}

fn checked_symbol(value: i64, channel: usize) -> Result<i32, CodecError> {
    i32::try_from(value).map_err(|_| CodecError::ColorStream {
        channel,
        reason: "coefficient outside the 32-bit range".into(),
    })
}

/// Adds a block's dequantized residual onto `out` (which starts as the
/// prediction). Identical arithmetic on both sides keeps them bit-equal.
fn add_block_reconstruction(
    block: &BlockTransform,
    ints: &[i32],
    q: QuantizerSpec,
    channel: usize,
    out: &mut [[f64; 3]],
) -> Result<(), CodecError> {
    let coeffs = dequantize(ints, q);
    let signal = inverse_gft(&block.spectrum, &coeffs)?;
    for (local, value) in signal.iter().enumerate() {
        out[block.start + local][channel] += value;
    }
    Ok(())
}

fn write_stream(
    out: &mut Vec<u8>,
    symbols: &[i32],
    seeds: &[f64],
    decay: f64,
) -> Result<(), CodecError> {
    out.extend_from_slice(&(symbols.len() as u32).to_le_bytes());
    let bytes = if symbols.is_empty() {
        Vec::new()
    } else {
        laplace_ac_encode(symbols, seeds, decay)?.into_bytes()
    };
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bytes);
    Ok(())
}

fn read_u32(payload: &[u8], offset: &mut usize) -> Result<u32, CodecError> {
    let end = *offset + 4;
    if end > payload.len() {
        return Err(CodecError::Truncated { context: "color payload" });
    }
    let value = u32::from_le_bytes(payload[*offset..end].try_into().expect("4 bytes"));
    *offset = end;
    Ok(value)
}

fn read_stream(
    payload: &[u8],
    offset: &mut usize,
    expected: usize,
    seeds: &[f64],
    decay: f64,
    channel: usize,
) -> Result<Vec<i32>, CodecError> {
    let count = read_u32(payload, offset)? as usize;
    if count != expected {
        return Err(CodecError::ColorStream {
            channel,
            reason: format!("declares {count} coefficients, geometry implies {expected}"),
        });
    }
    let len = read_u32(payload, offset)? as usize;
    if *offset + len > payload.len() {
        return Err(CodecError::Truncated { context: "color payload" });
    }
    let bytes = payload[*offset..*offset + len].to_vec();
    *offset += len;
    if count == 0 {
        if len != 0 {
            return Err(CodecError::ColorStream {
                channel,
                reason: "nonempty stream for zero coefficients".into(),
            });
        }
        return Ok(Vec::new());
    }
    Ok(laplace_ac_decode(&Bitstream::from_bytes(bytes), seeds, decay)?)
}

/// Encodes the difference between a frame's colors and their prediction.
///
/// Returns the payload together with the decoder's exact reconstruction,
/// which the caller feeds back into the loop as the decoded colors. The
/// intra case is the degenerate path with an all-zero prediction.
pub fn encode_colors(
    target: &VoxelFrame,
    predicted: &[[f64; 3]],
    params: &ColorParams,
) -> Result<ColorPayload, CodecError> {
    if predicted.len() != target.len() {
        return Err(CodecError::MalformedPayload { what: "color prediction" });
    }
    let q = QuantizerSpec::new(params.delta)?;
    let blocks = analyze_blocks(target, params)?;
    let mut decoded = predicted.to_vec();
    let mut bytes = Vec::new();
    for channel in 0..3 {
        let mut dc_symbols = Vec::new();
        let mut dc_seeds = Vec::new();
        let mut ac_symbols = Vec::new();
        let mut ac_seeds = Vec::new();
        let mut predictor = DcPredictor::default();
        let mut block_ints: Vec<Vec<i32>> = Vec::with_capacity(blocks.len());
        for block in &blocks {
            let residual: Vec<f64> = (block.start..block.start + block.len())
                .map(|v| target.colors()[v][channel] - predicted[v][channel])
                .collect();
            let ints = quantize(&gft(&block.spectrum, &residual)?, q)?;
            for (k, &int) in ints.iter().enumerate() {
                if k < block.dc_count {
                    let symbol =
                        checked_symbol(i64::from(int) - i64::from(predictor.predict()), channel)?;
                    dc_symbols.push(symbol);
                    dc_seeds.push(block.dc_seeds[k]);
                    predictor.push(int);
                } else {
                    ac_symbols.push(int);
                    ac_seeds.push(block.ac_seeds[k - block.dc_count]);
                }
            }
            block_ints.push(ints);
        }
        write_stream(&mut bytes, &dc_symbols, &dc_seeds, params.ema_decay)?;
        write_stream(&mut bytes, &ac_symbols, &ac_seeds, params.ema_decay)?;
        for (block, ints) in blocks.iter().zip(&block_ints) {
            add_block_reconstruction(block, ints, q, channel, &mut decoded)?;
        }
    }
    Ok(ColorPayload { bytes, decoded })
}

/// Decodes a color payload against losslessly recovered geometry and the
/// same prediction the encoder used.
pub fn decode_colors(
    geometry: &VoxelFrame,
    predicted: &[[f64; 3]],
    payload: &[u8],
    params: &ColorParams,
) -> Result<Vec<[f64; 3]>, CodecError> {
    if predicted.len() != geometry.len() {
        return Err(CodecError::MalformedPayload { what: "color prediction" });
    }
    let q = QuantizerSpec::new(params.delta)?;
    let blocks = analyze_blocks(geometry, params)?;
    let dc_total: usize = blocks.iter().map(|b| b.dc_count).sum();
    let ac_total: usize = blocks.iter().map(|b| b.ac_count()).sum();
    let dc_seeds: Vec<f64> = blocks.iter().flat_map(|b| b.dc_seeds.iter().copied()).collect();
    let ac_seeds: Vec<f64> = blocks.iter().flat_map(|b| b.ac_seeds.iter().copied()).collect();
    let mut out = predicted.to_vec();
    let mut offset = 0usize;
    for channel in 0..3 {
        let dc_symbols =
            read_stream(payload, &mut offset, dc_total, &dc_seeds, params.ema_decay, channel)?;
        let ac_symbols =
            read_stream(payload, &mut offset, ac_total, &ac_seeds, params.ema_decay, channel)?;
        let mut predictor = DcPredictor::default();
        let mut dc_iter = dc_symbols.iter();
        let mut ac_iter = ac_symbols.iter();
        for block in &blocks {
            let mut ints = Vec::with_capacity(block.len());
            for _ in 0..block.dc_count {
                let &symbol = dc_iter.next().expect("DC count validated");
                let int =
                    checked_symbol(i64::from(symbol) + i64::from(predictor.predict()), channel)?;
                predictor.push(int);
                ints.push(int);
            }
            for _ in 0..block.ac_count() {
                ints.push(*ac_iter.next().expect("AC count validated"));
            }
            add_block_reconstruction(block, &ints, q, channel, &mut out)?;
        }
    }
    if offset != payload.len() {
        return Err(CodecError::MalformedPayload { what: "color payload" });
    }
    Ok(out)
}

/// Predicts each target vertex's color as the average of its `neighbors`
/// nearest warped points (squared Euclidean distance, ties toward the
/// smaller warped index). An empty warped set predicts zero.
pub fn predict_color(
    warped_positions: &[[f64; 3]],
    warped_colors: &[[f64; 3]],
    target: &VoxelFrame,
    neighbors: usize,
) -> Vec<[f64; 3]> {
    debug_assert_eq!(warped_positions.len(), warped_colors.len());
    if warped_positions.is_empty() || neighbors == 0 {
        return vec![[0.0; 3]; target.len()];
    }
    (0..target.len())
        .into_par_iter()
        .map(|i| {
            let p = target.position(i);
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(neighbors + 1);
            for (j, w) in warped_positions.iter().enumerate() {
                let d2 = (0..3).map(|t| (p[t] - w[t]) * (p[t] - w[t])).sum::<f64>();
                let candidate = (d2, j);
                if best.len() == neighbors && candidate >= *best.last().expect("nonempty") {
                    continue;
                }
                let pos = best.partition_point(|b| *b < candidate);
                best.insert(pos, candidate);
                best.truncate(neighbors);
            }
            let mut color = [0.0f64; 3];
            for &(_, j) in &best {
                for t in 0..3 {
                    color[t] += warped_colors[j][t];
                }
            }
            for c in &mut color {
                *c /= best.len() as f64;
            }
            color
        })
        .collect()
}

/// Predicts every target vertex as the mean reference color (the weakest
/// baseline predictor: no geometry at all).
pub fn global_mean_prediction(reference_colors: &[[f64; 3]], target_len: usize) -> Vec<[f64; 3]> {
    if reference_colors.is_empty() {
        return vec![[0.0; 3]; target_len];
    }
    let mut mean = [0.0f64; 3];
    for c in reference_colors {
        for t in 0..3 {
            mean[t] += c[t];
        }
    }
    for m in &mut mean {
        *m /= reference_colors.len() as f64;
    }
    vec![mean; target_len]
}
