//! The encoder/decoder pipelines and the sequence container.
//!
//! A sequence is coded frame by frame. The first frame (and every GOP
//! refresh) is an I-frame: geometry goes out as an entropy-coded octree and
//! colors are transform-coded against a zero prediction. Every other frame
//! is a P-frame referencing the previously *decoded* frame:
//!
//! 1. a dense motion field is estimated between the decoded reference and
//!    the incoming target ([`crate::motion`]), transform-coded in the
//!    reference graph's Fourier basis and transmitted ([`motion_coding`]);
//! 2. the reference is warped by the *decoded* motion; the symmetric
//!    difference between the warped occupancy and the target occupancy is
//!    coded as an octree stream — geometry is lossless ([`geometry_coding`]);
//! 3. target colors are predicted by nearest-neighbor averaging in the
//!    warped frame and the residual is coded block-by-block in the graph
//!    Fourier domain ([`color_coding`]).
//!
//! Everything the decoder needs is in the container: graphs, spectra and
//! block structures are rebuilt from decoded geometry, so no connectivity is
//! ever transmitted. The encoder mirrors its own decoder exactly (closed
//! loop), which keeps the two in lockstep and prevents drift.

mod color_coding;
mod container;
mod geometry_coding;
mod motion_coding;

pub use color_coding::{
    decode_colors, encode_colors, global_mean_prediction, predict_color, ColorPayload,
};
pub use container::SequenceHeader;
use container::FrameRecord;
pub use geometry_coding::{
    decode_geometry_i, decode_geometry_p, encode_geometry_i, encode_geometry_p, warp_frame,
    WarpedFrame,
};
pub use motion_coding::{
    decode_motion_gft, decode_motion_signal, encode_motion_gft, encode_motion_signal,
    lowpass_field, motion_sqnr_db,
};

use crate::entropy::EntropyError;
use crate::graph::{build_knn_graph, GraphError, VoxelGraph};
use crate::motion::{
    estimate_motion, synthesize_training_pairs, train_precision, MotionError, MotionParams,
    PrecisionModel,
};
use crate::octree::OctreeError;
use crate::sgw::{estimate_lambda_max, SgwError, WaveletConfig};
use crate::spectral::{eigendecompose, SpectralError, Spectrum};
use crate::voxel::{VoxelError, VoxelFrame};
use thiserror::Error;

/// Errors from sequence encoding/decoding and the container format.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("sequence is empty")]
    EmptySequence,
    #[error("frame {frame} is empty")]
    EmptyFrame { frame: usize },
    #[error("frame {frame} uses a different grid than frame 0")]
    GridMismatch { frame: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("container does not start with the expected magic bytes")]
    BadMagic,
    #[error("unsupported container version {got}")]
    UnsupportedVersion { got: u16 },
    #[error("container truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("container has {extra} unread trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("frame {frame}: {what} payload is inconsistent")]
    PayloadMismatch { frame: usize, what: &'static str },
    #[error("malformed {what} payload")]
    MalformedPayload { what: &'static str },
    #[error("color stream for channel {channel}: {reason}")]
    ColorStream { channel: usize, reason: String },
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Octree(#[from] OctreeError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Sgw(#[from] SgwError),
}

/// All sequence-level tunables. The scalar fields are recorded in the
/// container header; the precision model is encoder-side only.
#[derive(Clone, Debug)]
pub struct SequenceConfig {
    /// K for the per-frame K-nearest-neighbor graphs.
    pub knn: usize,
    /// Number of wavelet scales for descriptors (band count is scales + 1).
    pub scale_count: usize,
    /// Spectrum partition factor for the wavelet scale placement.
    pub partition: f64,
    /// Chebyshev approximation degree for descriptors.
    pub chebyshev_degree: usize,
    /// Motion estimation tunables (clusters, threshold percentile, mu).
    pub motion: MotionParams,
    /// Quantization stepsize for motion coefficients, in grid units.
    pub delta_motion: f64,
    /// Quantization stepsize for color residual coefficients.
    pub delta_color: f64,
    /// Quantization stepsize for I-frame color coefficients; `None` follows
    /// `delta_color`. A finer intra step protects the reference frames that
    /// long predicted runs are built on, so coarse residual quantization
    /// degrades gracefully instead of starting from a ruined reference.
    pub delta_color_intra: Option<f64>,
    /// I-frame period: every `gop`-th frame is intra-coded (0 = only the
    /// first frame).
    pub gop: usize,
    /// Color block edge length in voxels (a power of two).
    pub block_size: u32,
    /// Neighbor count for color prediction from the warped frame.
    pub color_neighbors: usize,
    /// Exponential decay of the adaptive Laplacian coefficient models.
    pub ema_decay: f64,
    /// Proportionality constant for DC diversity seeds.
    pub dc_constant: f64,
    /// Matching metric; `None` trains one on the first frame.
    pub precision: Option<PrecisionModel>,
    /// Rigid offsets (grid units) used for self-supervised metric training.
    pub training_offsets: Vec<[f64; 3]>,
    /// Covariance regularization for metric training.
    pub training_epsilon: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            knn: 26,
            scale_count: 4,
            partition: 2.0,
            chebyshev_degree: 30,
            motion: MotionParams::default(),
            delta_motion: 0.5,
            delta_color: 64.0,
            delta_color_intra: None,
            gop: 0,
            block_size: 16,
            color_neighbors: 3,
            ema_decay: 0.95,
            dc_constant: 1.0,
            precision: None,
            training_offsets: vec![[0.4, -0.3, 0.6], [1.2, 0.7, -0.5], [-0.8, 0.5, 1.1]],
            training_epsilon: 1e-4,
        }
    }
}

impl SequenceConfig {
    fn validate(&self) -> Result<(), CodecError> {
        let bad = |msg: &str| Err(CodecError::InvalidConfig(msg.into()));
        if self.knn == 0 {
            return bad("knn must be positive");
        }
        if self.scale_count == 0 {
            return bad("scale_count must be positive");
        }
        if !(self.partition.is_finite() && self.partition > 0.5) {
            return bad("partition must be finite and > 0.5");
        }
        if self.chebyshev_degree == 0 {
            return bad("chebyshev_degree must be positive");
        }
        if !(self.delta_motion.is_finite() && self.delta_motion > 0.0) {
            return bad("delta_motion must be positive");
        }
        if !(self.delta_color.is_finite() && self.delta_color > 0.0) {
            return bad("delta_color must be positive");
        }
        if let Some(delta) = self.delta_color_intra {
            if !(delta.is_finite() && delta > 0.0) {
                return bad("delta_color_intra must be positive");
            }
        }
        if self.block_size == 0 || !self.block_size.is_power_of_two() {
            return bad("block_size must be a power of two");
        }
        if self.color_neighbors == 0 {
            return bad("color_neighbors must be positive");
        }
        if !(self.ema_decay.is_finite() && (0.0..1.0).contains(&self.ema_decay)) {
            return bad("ema_decay must be in [0, 1)");
        }
        if !(self.dc_constant.is_finite() && self.dc_constant > 0.0) {
            return bad("dc_constant must be positive");
        }
        if !(self.training_epsilon.is_finite() && self.training_epsilon > 0.0) {
            return bad("training_epsilon must be positive");
        }
        Ok(())
    }

    /// The color-coder subset of this configuration (P-frame stepsize).
    pub fn color_params(&self) -> ColorParams {
        ColorParams {
            delta: self.delta_color,
            block_size: self.block_size,
            ema_decay: self.ema_decay,
            dc_constant: self.dc_constant,
        }
    }

    /// Like [`color_params`](Self::color_params) but with the I-frame
    /// stepsize.
    pub fn intra_color_params(&self) -> ColorParams {
        ColorParams {
            delta: self.delta_color_intra.unwrap_or(self.delta_color),
            ..self.color_params()
        }
    }
}

/// Per-frame payload and quality accounting.
#[derive(Clone, Debug)]
pub struct FrameStats {
    /// Frame index in the sequence.
    pub index: usize,
    /// True for I-frames.
    pub intra: bool,
    /// Occupied voxel count of the (decoded) frame.
    pub vertices: usize,
    /// Geometry payload size in bits (8 × payload bytes).
    pub geometry_bits: usize,
    /// Motion payload size in bits (0 for I-frames).
    pub motion_bits: usize,
    /// Color payload size in bits.
    pub color_bits: usize,
    /// Bits an uncompensated geometry diff would have taken (equals
    /// `geometry_bits` for I-frames).
    pub uncompensated_geometry_bits: usize,
    /// Accepted sparse correspondences driving the motion field.
    pub anchors: usize,
    /// Prediction SNR `20·log10(‖c‖/‖c − c̃‖)` of the color predictor
    /// against the original colors (`f64::INFINITY` for an exact match).
    pub prediction_snr_db: f64,
    /// Per-channel PSNR (peak 255) of decoded vs. original colors.
    pub color_psnr_db: [f64; 3],
    /// Mean of the three per-channel PSNR values.
    pub color_psnr_avg_db: f64,
}

impl FrameStats {
    /// Total payload bits of the frame (geometry + motion + color).
    pub fn total_bits(&self) -> usize {
        self.geometry_bits + self.motion_bits + self.color_bits
    }

    /// Bits per vertex of one payload.
    pub fn bpv(bits: usize, vertices: usize) -> f64 {
        if vertices == 0 {
            0.0
        } else {
            bits as f64 / vertices as f64
        }
    }
}

/// An encoded sequence: container bytes plus encoder-side statistics.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    /// The self-contained container.
    pub bytes: Vec<u8>,
    /// One entry per frame.
    pub stats: Vec<FrameStats>,
}

/// A decoded sequence: the recovered frames plus the header they came with.
#[derive(Clone, Debug)]
pub struct DecodedSequence {
    /// The parsed container header.
    pub header: SequenceHeader,
    /// Decoded frames (exact geometry, quantized colors).
    pub frames: Vec<VoxelFrame>,
}

/// Prediction SNR in dB: `20·log10(‖c‖ / ‖c − c̃‖)` over all channels.
pub fn prediction_snr_db(actual: &[[f64; 3]], predicted: &[[f64; 3]]) -> f64 {
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (c, p) in actual.iter().zip(predicted) {
        for t in 0..3 {
            signal += c[t] * c[t];
            let d = c[t] - p[t];
            noise += d * d;
        }
    }
    if noise == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (signal / noise).log10()
}

/// Per-channel PSNR (peak 255) of decoded against original colors.
pub fn color_psnr_db(original: &[[f64; 3]], decoded: &[[f64; 3]]) -> [f64; 3] {
    let n = original.len();
    let mut out = [f64::INFINITY; 3];
    if n == 0 {
        return out;
    }
    for t in 0..3 {
        let mse = original
            .iter()
            .zip(decoded)
            .map(|(a, b)| (a[t] - b[t]) * (a[t] - b[t]))
            .sum::<f64>()
            / n as f64;
        if mse > 0.0 {
            out[t] = 10.0 * (255.0 * 255.0 / mse).log10();
        }
    }
    out
}

fn mean_finite(values: [f64; 3]) -> f64 {
    values.iter().map(|v| v.min(99.0)).sum::<f64>() / 3.0
}

/// Derives the wavelet configuration used for a reference graph.
fn wavelets_for(graph: &VoxelGraph, config: &SequenceConfig) -> Result<WaveletConfig, CodecError> {
    Ok(WaveletConfig::auto(
        estimate_lambda_max(graph),
        config.scale_count,
        config.partition,
        config.chebyshev_degree,
    )?)
}

/// Trains the matching metric on the first frame by self-supervision:
/// rigidly shifted copies of the frame provide ground-truth correspondences.
/// Falls back to the identity metric when training is impossible (e.g. a
/// frame too small to survive re-voxelization).
pub fn self_train_precision(
    frame: &VoxelFrame,
    graph: &VoxelGraph,
    config: &SequenceConfig,
) -> Result<PrecisionModel, CodecError> {
    let wavelets = wavelets_for(graph, config)?;
    let pairs = synthesize_training_pairs(
        frame,
        graph,
        &wavelets,
        config.knn,
        &config.training_offsets,
    )?;
    if pairs.len() < 2 {
        return Ok(PrecisionModel::identity(wavelets.descriptor_len()));
    }
    Ok(train_precision(
        &pairs,
        config.training_epsilon,
        "self-supervised-first-frame",
    )?)
}

/// Decoder state for one reference frame, shared by encoder and decoder.
struct Reference {
    frame: VoxelFrame,
    graph: VoxelGraph,
    spectrum: Spectrum,
}

/// The intra/predicted schedule: frame 0 always intra, then every `gop`-th
/// frame when a group-of-pictures length is set (0 = single leading intra).
fn is_intra(index: usize, gop: usize) -> bool {
    index == 0 || (gop > 0 && index % gop == 0)
}

impl Reference {
    fn build(frame: VoxelFrame, knn: usize) -> Result<Self, CodecError> {
        let graph = build_knn_graph(&frame, knn)?;
        let spectrum = eigendecompose(&graph)?;
        Ok(Self { frame, graph, spectrum })
    }
}

/// Encodes a sequence of voxel frames into a self-contained container.
///
/// All frames must share the grid of frame 0. The encoder maintains the
/// decoder's state internally, so every prediction references previously
/// *decoded* data.
pub fn encode_sequence(
    frames: &[VoxelFrame],
    config: &SequenceConfig,
) -> Result<EncodedSequence, CodecError> {
    config.validate()?;
    if frames.is_empty() {
        return Err(CodecError::EmptySequence);
    }
    let grid = frames[0].grid();
    for (index, frame) in frames.iter().enumerate() {
        if frame.is_empty() {
            return Err(CodecError::EmptyFrame { frame: index });
        }
        if frame.grid() != grid {
            return Err(CodecError::GridMismatch { frame: index });
        }
    }
    let header = SequenceHeader::from_config(grid, config, frames.len());
    let mut bytes = header.to_bytes();
    let mut stats = Vec::with_capacity(frames.len());

    // The matching metric: supplied, or self-trained on the first frame.
    let mut model = config.precision.clone();

    let mut reference: Option<Reference> = None;
    for (index, frame) in frames.iter().enumerate() {
        let (record, decoded, frame_stats) = if is_intra(index, config.gop) {
            encode_i_frame(index, frame, config)?
        } else {
            let reference_state = reference.as_ref().expect("P-frame has a reference");
            if model.is_none() {
                model = Some(self_train_precision(
                    &reference_state.frame,
                    &reference_state.graph,
                    config,
                )?);
            }
            encode_p_frame(
                index,
                frame,
                reference_state,
                model.as_ref().expect("model just ensured"),
                config,
            )?
        };
        container::write_record(&mut bytes, &record);
        stats.push(frame_stats);
        // Reference state (graph + eigendecomposition) is only needed when
        // the next frame is predicted; skip the work otherwise.
        let next = index + 1;
        reference = if next < frames.len() && !is_intra(next, config.gop) {
            Some(Reference::build(decoded, config.knn)?)
        } else {
            None
        };
    }
    Ok(EncodedSequence { bytes, stats })
}

fn encode_i_frame(
    index: usize,
    frame: &VoxelFrame,
    config: &SequenceConfig,
) -> Result<(FrameRecord, VoxelFrame, FrameStats), CodecError> {
    let geometry = encode_geometry_i(frame)?;
    // Intra color coding is the degenerate differential path: predict zero.
    let zero = vec![[0.0; 3]; frame.len()];
    let payload = encode_colors(frame, &zero, &config.intra_color_params())?;
    let mut decoded = frame.clone();
    decoded.set_colors(payload.decoded.clone())?;
    let psnr = color_psnr_db(frame.colors(), payload.decoded.as_slice());
    let stats = FrameStats {
        index,
        intra: true,
        vertices: frame.len(),
        geometry_bits: geometry.len() * 8,
        motion_bits: 0,
        color_bits: payload.bytes.len() * 8,
        uncompensated_geometry_bits: geometry.len() * 8,
        anchors: 0,
        prediction_snr_db: prediction_snr_db(frame.colors(), &zero),
        color_psnr_db: psnr,
        color_psnr_avg_db: mean_finite(psnr),
    };
    let record = FrameRecord {
        intra: true,
        geometry,
        motion: Vec::new(),
        color: payload.bytes,
    };
    Ok((record, decoded, stats))
}

fn encode_p_frame(
    index: usize,
    target: &VoxelFrame,
    reference: &Reference,
    model: &PrecisionModel,
    config: &SequenceConfig,
) -> Result<(FrameRecord, VoxelFrame, FrameStats), CodecError> {
    // 1. Estimate motion between the decoded reference and the target.
    let target_graph = build_knn_graph(target, config.knn)?;
    let wavelets = wavelets_for(&reference.graph, config)?;
    let estimate = estimate_motion(
        &reference.frame,
        &reference.graph,
        target,
        &target_graph,
        model,
        &wavelets,
        &config.motion,
    )?;

    // 2.+3. Transmit the field in the reference graph's Fourier basis, warp,
    //    and code the occupancy difference (lossless geometry). Which field
    //    to transmit is an encoder choice: the estimate carries quantization
    //    wobble from integer anchor displacements, and a spectral truncation
    //    often warps just as well for a fraction of the coefficient bits.
    //    Evaluate a few truncations by actual coded cost (motion + geometry)
    //    and keep the cheapest; ties go to the smoother field. The decoder is
    //    oblivious — it sees ordinary coefficients either way.
    let n = reference.frame.len();
    let dc = reference.spectrum.zero_multiplicity().max(1);
    let mut keeps = vec![dc, (n / 16).max(dc), (n / 4).max(dc), n];
    keeps.sort_unstable();
    keeps.dedup();
    let mut chosen: Option<(Vec<u8>, Vec<u8>, WarpedFrame)> = None;
    for keep in keeps {
        let candidate = if keep == n {
            estimate.field.clone()
        } else {
            lowpass_field(&reference.spectrum, &estimate.field, keep)?
        };
        let motion = encode_motion_gft(&reference.spectrum, &candidate, config.delta_motion)?;
        let decoded_field =
            decode_motion_gft(&reference.spectrum, &motion, config.delta_motion, n)?;
        let warped = warp_frame(&reference.frame, &decoded_field)?;
        let geometry = encode_geometry_p(&warped.set, target)?;
        let better = match &chosen {
            None => true,
            Some((m, g, _)) => motion.len() + geometry.len() < m.len() + g.len(),
        };
        if better {
            chosen = Some((motion, geometry, warped));
        }
    }
    let (motion, geometry, warped) = chosen.expect("at least one motion candidate");
    let uncompensated = encode_geometry_p(&reference.frame.to_set(), target)?;

    // 4. Predict colors from the warped frame and code the residual.
    let predicted = predict_color(
        &warped.positions,
        &warped.colors,
        target,
        config.color_neighbors,
    );
    let payload = encode_colors(target, &predicted, &config.color_params())?;
    let mut decoded = target.clone();
    decoded.set_colors(payload.decoded.clone())?;

    let psnr = color_psnr_db(target.colors(), payload.decoded.as_slice());
    let stats = FrameStats {
        index,
        intra: false,
        vertices: target.len(),
        geometry_bits: geometry.len() * 8,
        motion_bits: motion.len() * 8,
        color_bits: payload.bytes.len() * 8,
        uncompensated_geometry_bits: uncompensated.len() * 8,
        anchors: estimate.sparse.len(),
        prediction_snr_db: prediction_snr_db(target.colors(), &predicted),
        color_psnr_db: psnr,
        color_psnr_avg_db: mean_finite(psnr),
    };
    let record = FrameRecord { intra: false, geometry, motion, color: payload.bytes };
    Ok((record, decoded, stats))
}

/// Decodes a container produced by [`encode_sequence`].
pub fn decode_sequence(bytes: &[u8]) -> Result<DecodedSequence, CodecError> {
    let (header, mut offset) = SequenceHeader::from_bytes(bytes)?;
    let mut frames: Vec<VoxelFrame> = Vec::with_capacity(header.frame_count as usize);
    for index in 0..header.frame_count as usize {
        let record = container::read_record(bytes, &mut offset, index)?;
        let frame = if record.intra {
            let geometry = decode_geometry_i(&record.geometry, &header.grid)?;
            let zero = vec![[0.0; 3]; geometry.len()];
            let colors =
                decode_colors(&geometry, &zero, &record.color, &header.intra_codec_params())?;
            let mut frame = geometry;
            frame.set_colors(colors)?;
            frame
        } else {
            // Reference state (graph + eigendecomposition) is derived from
            // the previous decoded frame on demand, so intra-only stretches
            // never pay for it.
            let previous = frames
                .last()
                .ok_or(CodecError::PayloadMismatch { frame: index, what: "frame type" })?;
            let reference_state = Reference::build(previous.clone(), header.knn as usize)?;
            let field = decode_motion_gft(
                &reference_state.spectrum,
                &record.motion,
                header.delta_motion,
                reference_state.frame.len(),
            )?;
            let warped = warp_frame(&reference_state.frame, &field)?;
            let geometry = decode_geometry_p(&warped.set, &record.geometry, &header.grid)?;
            let predicted = predict_color(
                &warped.positions,
                &warped.colors,
                &geometry,
                header.color_neighbors as usize,
            );
            let colors =
                decode_colors(&geometry, &predicted, &record.color, &header.codec_params())?;
            let mut frame = geometry;
            frame.set_colors(colors)?;
            frame
        };
        frames.push(frame);
    }
    if offset != bytes.len() {
        return Err(CodecError::TrailingBytes { extra: bytes.len() - offset });
    }
    Ok(DecodedSequence { header, frames })
}

/// The subset of parameters the color coder needs on both sides.
#[derive(Clone, Copy, Debug)]
pub struct ColorParams {
    /// Quantization stepsize for residual coefficients.
    pub delta: f64,
    /// Block edge length in voxels (power of two).
    pub block_size: u32,
    /// Adaptive model decay.
    pub ema_decay: f64,
    /// DC diversity constant.
    pub dc_constant: f64,
}
