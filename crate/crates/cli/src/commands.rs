//! The operations behind the `dpcc` binary: loading frames from PLY
//! directories or the synthetic generator, encoding to a container file,
//! decoding back to PLY, rate-distortion sweeps, and the three-way
//! prediction comparison.

use std::fs;
use std::path::{Path, PathBuf};

use dpcc_core::codec::{
    self, decode_sequence, encode_sequence, global_mean_prediction, predict_color,
    prediction_snr_db, warp_frame, CodecError, SequenceConfig,
};
use dpcc_core::motion::estimate_motion;
use dpcc_core::ply::{read_ply, write_ply, PlyError, PlyFormat};
use dpcc_core::sgw::{estimate_lambda_max, WaveletConfig};
use dpcc_core::voxel::{voxelize, VoxelError, VoxelFrame, VoxelGrid};
use dpcc_core::{build_knn_graph, FrameStats};
use thiserror::Error;

use crate::metrics::{cap_db, frame_csv, summarize, sweep_csv, SequenceSummary};
use crate::synth::{generate_synthetic, SynthError, SyntheticSequence, SyntheticSpec};

/// Errors surfaced by the command layer.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Input(String),
}

/// Voxel grid requested on the command line; the origin is fixed at zero,
/// so world coordinates are `stepsize * (voxel + 0.5)`.
#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    pub depth: u32,
    pub stepsize: f64,
}

impl GridSpec {
    pub fn grid(&self) -> Result<VoxelGrid, CliError> {
        Ok(VoxelGrid::new([0.0; 3], self.stepsize, self.depth)?)
    }
}

/// Where input frames come from.
#[derive(Clone, Debug)]
pub enum Input {
    /// Directory of `.ply` files; frame order is the lexicographic order of
    /// the file names.
    PlyDir(PathBuf),
    /// Generated sequence (carries its own grid parameters).
    Synthetic(SyntheticSpec),
}

/// Loads the input frames. PLY clouds are voxelized onto `grid`; synthetic
/// sequences use the grid embedded in their spec.
pub fn load_frames(input: &Input, grid: &GridSpec) -> Result<Vec<VoxelFrame>, CliError> {
    match input {
        Input::PlyDir(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .map(|entry| entry.path())
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
                })
                .collect();
            if paths.is_empty() {
                return Err(CliError::Input(format!(
                    "no .ply files found in {}",
                    dir.display()
                )));
            }
            paths.sort();
            let grid = grid.grid()?;
            paths
                .iter()
                .map(|p| Ok(voxelize(&read_ply(p)?, &grid)?))
                .collect()
        }
        Input::Synthetic(spec) => Ok(generate_synthetic(spec)?.frames),
    }
}

/// World-space voxel centers of a frame.
fn world_points(frame: &VoxelFrame) -> Vec<[f64; 3]> {
    let origin = frame.grid().origin();
    let step = frame.grid().stepsize();
    (0..frame.len())
        .map(|n| {
            let p = frame.position(n);
            [
                origin[0] + step * p[0],
                origin[1] + step * p[1],
                origin[2] + step * p[2],
            ]
        })
        .collect()
}

/// Frame colors rounded to the nearest integer channel value.
fn byte_colors(frame: &VoxelFrame) -> Vec<[u8; 3]> {
    frame
        .colors()
        .iter()
        .map(|c| {
            [
                c[0].round().clamp(0.0, 255.0) as u8,
                c[1].round().clamp(0.0, 255.0) as u8,
                c[2].round().clamp(0.0, 255.0) as u8,
            ]
        })
        .collect()
}

fn write_frame_ply(frame: &VoxelFrame, path: &Path) -> Result<(), CliError> {
    Ok(write_ply(
        path,
        &world_points(frame),
        &byte_colors(frame),
        PlyFormat::BinaryLittleEndian,
    )?)
}

/// What `cmd_encode` produced.
#[derive(Clone, Debug)]
pub struct EncodeReport {
    /// Per-frame statistics, one entry per input frame.
    pub stats: Vec<FrameStats>,
    /// Sequence-level means of the statistics.
    pub summary: SequenceSummary,
    /// Size of the written container in bytes.
    pub container_bytes: usize,
}

/// Encodes the input frames into `container`; optionally writes the
/// per-frame CSV.
pub fn cmd_encode(
    input: &Input,
    grid: &GridSpec,
    config: &SequenceConfig,
    container: &Path,
    csv: Option<&Path>,
) -> Result<EncodeReport, CliError> {
    let frames = load_frames(input, grid)?;
    let encoded = encode_sequence(&frames, config)?;
    fs::write(container, &encoded.bytes)?;
    if let Some(csv_path) = csv {
        fs::write(csv_path, frame_csv(&encoded.stats))?;
    }
    Ok(EncodeReport {
        summary: summarize(&encoded.stats),
        container_bytes: encoded.bytes.len(),
        stats: encoded.stats,
    })
}

/// Decodes `container` and writes one PLY per frame (`frame_0000.ply`, …)
/// into `out_dir`. Returns the written paths in frame order.
pub fn cmd_decode(container: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let bytes = fs::read(container)?;
    let decoded = decode_sequence(&bytes)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(decoded.frames.len());
    for (index, frame) in decoded.frames.iter().enumerate() {
        let path = out_dir.join(format!("frame_{index:04}.ply"));
        write_frame_ply(frame, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// One operating point of a rate-distortion sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub delta_motion: f64,
    pub delta_color: f64,
    pub summary: SequenceSummary,
}

/// Encodes the input once per `(delta_motion, delta_color)` pair and
/// reports sequence-mean rate and quality; optionally writes the sweep CSV.
pub fn cmd_rd_sweep(
    input: &Input,
    grid: &GridSpec,
    base: &SequenceConfig,
    motion_deltas: &[f64],
    color_deltas: &[f64],
    csv: Option<&Path>,
) -> Result<Vec<SweepRow>, CliError> {
    if motion_deltas.is_empty() || color_deltas.is_empty() {
        return Err(CliError::Input(
            "rate-distortion sweep needs at least one delta per ladder".into(),
        ));
    }
    let frames = load_frames(input, grid)?;
    let mut rows = Vec::with_capacity(motion_deltas.len() * color_deltas.len());
    for &delta_motion in motion_deltas {
        for &delta_color in color_deltas {
            let mut config = base.clone();
            config.delta_motion = delta_motion;
            config.delta_color = delta_color;
            let encoded = encode_sequence(&frames, &config)?;
            rows.push(SweepRow {
                delta_motion,
                delta_color,
                summary: summarize(&encoded.stats),
            });
        }
    }
    if let Some(csv_path) = csv {
        let triples: Vec<(f64, f64, SequenceSummary)> = rows
            .iter()
            .map(|r| (r.delta_motion, r.delta_color, r.summary))
            .collect();
        fs::write(csv_path, sweep_csv(&triples))?;
    }
    Ok(rows)
}

/// Mean prediction SNRs (dB, capped at 99) of the three color predictors
/// over all consecutive frame pairs.
#[derive(Clone, Copy, Debug)]
pub struct PredictionReport {
    /// Consecutive pairs averaged.
    pub pairs: usize,
    /// Motion-compensated prediction: colors carried along the estimated
    /// motion field, then averaged over the nearest warped points.
    pub mc_db: f64,
    /// Static prediction: each target vertex copies its nearest neighbor
    /// in the reference frame.
    pub static_db: f64,
    /// Global prediction: every vertex gets the reference's mean color.
    pub mean_db: f64,
}

/// Compares the motion-compensated, static-nearest-neighbor and global-mean
/// color predictors over every consecutive pair of `frames`.
///
/// Motion is estimated with the raw (unquantized) field so the comparison
/// isolates prediction quality from coding loss.
pub fn cmd_compare_prediction(
    frames: &[VoxelFrame],
    config: &SequenceConfig,
) -> Result<PredictionReport, CliError> {
    if frames.len() < 2 {
        return Err(CliError::Input(
            "prediction comparison needs at least two frames".into(),
        ));
    }
    let mut reference_graph = build_knn_graph(&frames[0], config.knn).map_err(CodecError::from)?;
    let model = match &config.precision {
        Some(model) => model.clone(),
        None => codec::self_train_precision(&frames[0], &reference_graph, config)?,
    };

    let mut sums = [0.0f64; 3];
    let pairs = frames.len() - 1;
    for t in 0..pairs {
        let reference = &frames[t];
        let target = &frames[t + 1];
        let target_graph = build_knn_graph(target, config.knn).map_err(CodecError::from)?;
        let wavelets = WaveletConfig::auto(
            estimate_lambda_max(&reference_graph),
            config.scale_count,
            config.partition,
            config.chebyshev_degree,
        )
        .map_err(CodecError::from)?;
        let estimate = estimate_motion(
            reference,
            &reference_graph,
            target,
            &target_graph,
            &model,
            &wavelets,
            &config.motion,
        )
        .map_err(CodecError::from)?;
        let warped = warp_frame(reference, &estimate.field)?;

        let mc = predict_color(&warped.positions, &warped.colors, target, config.color_neighbors);
        let nearest = predict_color(&reference.positions(), reference.colors(), target, 1);
        let mean = global_mean_prediction(reference.colors(), target.len());
        for (slot, predicted) in [&mc, &nearest, &mean].into_iter().enumerate() {
            sums[slot] += cap_db(prediction_snr_db(target.colors(), predicted));
        }
        reference_graph = target_graph;
    }
    Ok(PredictionReport {
        pairs,
        mc_db: sums[0] / pairs as f64,
        static_db: sums[1] / pairs as f64,
        mean_db: sums[2] / pairs as f64,
    })
}

/// Generates a synthetic sequence, writes one PLY per frame into `out_dir`,
/// and optionally exports the ground-truth motion as CSV
/// (`frame,vertex,dx,dy,dz`, displacements in voxel units).
pub fn cmd_synth(
    spec: &SyntheticSpec,
    out_dir: &Path,
    truth_csv: Option<&Path>,
) -> Result<SyntheticSequence, CliError> {
    let sequence = generate_synthetic(spec)?;
    fs::create_dir_all(out_dir)?;
    for (index, frame) in sequence.frames.iter().enumerate() {
        write_frame_ply(frame, &out_dir.join(format!("frame_{index:04}.ply")))?;
    }
    if let Some(csv_path) = truth_csv {
        let mut csv = String::from("frame,vertex,dx,dy,dz\n");
        for (t, field) in sequence.truth.iter().enumerate() {
            for (v, d) in field.iter().enumerate() {
                csv.push_str(&format!(
                    "{t},{v},{:.6},{:.6},{:.6}\n",
                    d[0], d[1], d[2]
                ));
            }
        }
        fs::write(csv_path, csv)?;
    }
    Ok(sequence)
}
