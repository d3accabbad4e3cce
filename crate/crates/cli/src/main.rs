//! `dpcc` — command-line harness for the dynamic point cloud codec.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpcc_cli::{
    cmd_compare_prediction, cmd_decode, cmd_encode, cmd_rd_sweep, cmd_synth, load_frames,
    CliError, GridSpec, Input, SyntheticSpec,
};
use dpcc_core::codec::{CodecError, SequenceConfig};
use dpcc_core::motion::{MotionParams, PrecisionModel};

#[derive(Parser, Debug)]
#[command(
    name = "dpcc",
    about = "Encode, decode and benchmark dynamic voxelized point cloud sequences",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode a frame sequence into a container file.
    Encode {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        codec: CodecArgs,
        /// Motion coefficient quantization step.
        #[arg(long = "delta-motion", default_value_t = 0.5)]
        delta_motion: f64,
        /// Color residual quantization step.
        #[arg(long = "delta-color", default_value_t = 64.0)]
        delta_color: f64,
        /// Output container file.
        #[arg(long, short, value_name = "FILE")]
        output: PathBuf,
        /// Write per-frame statistics to this CSV file.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Decode a container into one PLY file per frame.
    Decode {
        /// Container file produced by `encode`.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output directory for the PLY frames.
        #[arg(long, short, value_name = "DIR")]
        output: PathBuf,
    },
    /// Encode at every (delta-motion, delta-color) pair and report
    /// rate-distortion points.
    RdSweep {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        codec: CodecArgs,
        /// Comma-separated motion quantization ladder.
        #[arg(
            long = "delta-motion",
            value_delimiter = ',',
            default_value = "0.5"
        )]
        delta_motion: Vec<f64>,
        /// Comma-separated color quantization ladder.
        #[arg(
            long = "delta-color",
            value_delimiter = ',',
            default_value = "32,64,256,512,1024"
        )]
        delta_color: Vec<f64>,
        /// Write the sweep table to this CSV file.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Compare motion-compensated, nearest-neighbor and global-mean color
    /// prediction over consecutive frames.
    ComparePrediction {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        codec: CodecArgs,
    },
    /// Generate a synthetic sequence and write it as PLY frames.
    Synth {
        /// Preset name (see --synth on the other subcommands).
        #[arg(long, value_name = "PRESET")]
        synth: String,
        #[command(flatten)]
        grid: GridArgs,
        /// Number of frames to generate.
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory for the PLY frames.
        #[arg(long, short, value_name = "DIR")]
        output: PathBuf,
        /// Write the ground-truth motion to this CSV file.
        #[arg(long = "truth-csv", value_name = "FILE")]
        truth_csv: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Directory of .ply frames, ordered by file name.
    #[arg(long, value_name = "DIR", conflicts_with = "synth")]
    input: Option<PathBuf>,
    /// Synthetic preset: sphere, sphere-slow, body, blob or blob-drift.
    #[arg(long, value_name = "PRESET")]
    synth: Option<String>,
    /// Frame count for synthetic input.
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Seed for synthetic input.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl InputArgs {
    fn resolve(&self, grid: &GridArgs) -> Result<Input, CliError> {
        match (&self.input, &self.synth) {
            (Some(dir), None) => Ok(Input::PlyDir(dir.clone())),
            (None, Some(name)) => {
                let spec = SyntheticSpec::preset(
                    name,
                    self.frames,
                    grid.depth,
                    grid.stepsize,
                    self.seed,
                )
                .ok_or_else(|| {
                    CliError::Input(format!(
                        "unknown preset {name:?}; available: {}",
                        SyntheticSpec::preset_names().join(", ")
                    ))
                })?;
                Ok(Input::Synthetic(spec))
            }
            _ => Err(CliError::Input(
                "exactly one of --input or --synth is required".into(),
            )),
        }
    }
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Octree depth; the grid has 2^depth cells per axis.
    #[arg(long, default_value_t = 7)]
    depth: u32,
    /// World edge length of one voxel.
    #[arg(long, default_value_t = 1.0)]
    stepsize: f64,
}

impl GridArgs {
    fn spec(&self) -> GridSpec {
        GridSpec {
            depth: self.depth,
            stepsize: self.stepsize,
        }
    }
}

#[derive(Args, Debug)]
struct CodecArgs {
    /// Neighbor count of the per-frame K-NN graphs.
    #[arg(long = "k-neighbors", default_value_t = 26)]
    k_neighbors: usize,
    /// Number of wavelet scales in the feature descriptors.
    #[arg(long, default_value_t = 4)]
    scales: usize,
    /// Chebyshev approximation degree for the wavelet transform.
    #[arg(long = "cheb-degree", default_value_t = 30)]
    cheb_degree: usize,
    /// Smoothness weight of the motion interpolation.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// K-means cluster count for correspondence selection (0 = automatic).
    #[arg(long, default_value_t = 0)]
    clusters: usize,
    /// Acceptance percentile of the matching-score distribution.
    #[arg(long = "threshold-percentile", default_value_t = 25.0)]
    threshold_percentile: f64,
    /// Group-of-pictures length; 0 encodes a single leading I-frame.
    #[arg(long, default_value_t = 0)]
    gop: usize,
    /// Load a pre-trained matching metric instead of self-training.
    #[arg(long = "precision-model", value_name = "FILE")]
    precision_model: Option<PathBuf>,
}

impl CodecArgs {
    fn config(&self) -> Result<SequenceConfig, CliError> {
        let precision = match &self.precision_model {
            Some(path) => Some(PrecisionModel::load(path).map_err(CodecError::from)?),
            None => None,
        };
        Ok(SequenceConfig {
            knn: self.k_neighbors,
            scale_count: self.scales,
            chebyshev_degree: self.cheb_degree,
            motion: MotionParams {
                clusters: self.clusters,
                threshold_percentile: self.threshold_percentile,
                mu: self.mu,
            },
            gop: self.gop,
            precision,
            ..SequenceConfig::default()
        })
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Encode {
            input,
            grid,
            codec,
            delta_motion,
            delta_color,
            output,
            csv,
        } => {
            let mut config = codec.config()?;
            config.delta_motion = delta_motion;
            config.delta_color = delta_color;
            let report = cmd_encode(
                &input.resolve(&grid)?,
                &grid.spec(),
                &config,
                &output,
                csv.as_deref(),
            )?;
            let s = report.summary;
            println!(
                "encoded {} frames into {} ({} bytes)",
                s.frames,
                output.display(),
                report.container_bytes
            );
            println!(
                "rate    {:.3} bpv (geometry {:.3}, motion {:.3}, color {:.3})",
                s.mean_total_bpv, s.mean_geometry_bpv, s.mean_motion_bpv, s.mean_color_bpv
            );
            println!(
                "quality {:.2} dB color PSNR, {:.2} dB prediction SNR",
                s.mean_psnr_db, s.mean_prediction_snr_db
            );
        }
        Command::Decode { input, output } => {
            let written = cmd_decode(&input, &output)?;
            println!("decoded {} frames into {}", written.len(), output.display());
        }
        Command::RdSweep {
            input,
            grid,
            codec,
            delta_motion,
            delta_color,
            csv,
        } => {
            let rows = cmd_rd_sweep(
                &input.resolve(&grid)?,
                &grid.spec(),
                &codec.config()?,
                &delta_motion,
                &delta_color,
                csv.as_deref(),
            )?;
            println!("delta_motion  delta_color  total_bpv  color_bpv  psnr_db");
            for row in &rows {
                println!(
                    "{:>12}  {:>11}  {:>9.3}  {:>9.3}  {:>7.2}",
                    row.delta_motion,
                    row.delta_color,
                    row.summary.mean_total_bpv,
                    row.summary.mean_color_bpv,
                    row.summary.mean_psnr_db
                );
            }
        }
        Command::ComparePrediction { input, grid, codec } => {
            let frames = load_frames(&input.resolve(&grid)?, &grid.spec())?;
            let report = cmd_compare_prediction(&frames, &codec.config()?)?;
            println!("prediction SNR over {} frame pairs:", report.pairs);
            println!("  motion-compensated  {:>6.2} dB", report.mc_db);
            println!("  nearest neighbor    {:>6.2} dB", report.static_db);
            println!("  global mean         {:>6.2} dB", report.mean_db);
        }
        Command::Synth {
            synth,
            grid,
            frames,
            seed,
            output,
            truth_csv,
        } => {
            let spec = SyntheticSpec::preset(&synth, frames, grid.depth, grid.stepsize, seed)
                .ok_or_else(|| {
                    CliError::Input(format!(
                        "unknown preset {synth:?}; available: {}",
                        SyntheticSpec::preset_names().join(", ")
                    ))
                })?;
            let sequence = cmd_synth(&spec, &output, truth_csv.as_deref())?;
            let sizes: Vec<usize> = sequence.frames.iter().map(|f| f.len()).collect();
            println!(
                "wrote {} frames ({}..{} voxels) into {}",
                sequence.frames.len(),
                sizes.iter().min().unwrap_or(&0),
                sizes.iter().max().unwrap_or(&0),
                output.display()
            );
        }
    }
    Ok(())
}
