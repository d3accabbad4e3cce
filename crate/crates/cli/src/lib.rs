//! Command-line harness for the point cloud codec: synthetic sequence
//! generation with ground-truth motion, PLY ingestion, metrics and
//! rate-distortion reporting.
//!
//! The binary (`dpcc`) is a thin argument-parsing layer over [`commands`];
//! everything observable is in the library so tests can drive the exact
//! same code paths.

pub mod commands;
pub mod metrics;
pub mod synth;

pub use commands::{
    cmd_compare_prediction, cmd_decode, cmd_encode, cmd_rd_sweep, cmd_synth, load_frames,
    CliError, EncodeReport, GridSpec, Input, PredictionReport, SweepRow,
};
pub use metrics::{cap_db, frame_csv, summarize, sweep_csv, SequenceSummary};
pub use synth::{generate_synthetic, Shape, SyntheticSequence, SyntheticSpec};
