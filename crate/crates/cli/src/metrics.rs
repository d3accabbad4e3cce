//! Report formatting: per-frame metric rows, sequence aggregates and the
//! CSV layouts the `dpcc` binary writes.
//!
//! Rates are reported in bits per vertex (payload bits divided by the
//! decoded frame's vertex count; container framing and header excluded).
//! Qualities are dB values on the [0, 255] color scale with peak 255;
//! infinite values (exact reconstructions) are capped at 99 dB in reports.

use dpcc_core::codec::FrameStats;

/// Column order of the per-frame CSV (one row per frame).
pub const FRAME_CSV_HEADER: &str = "frame,intra,vertices,geometry_bpv,motion_bpv,color_bpv,\
total_bpv,psnr_r_db,psnr_g_db,psnr_b_db,psnr_avg_db,prediction_snr_db";

/// Column order of the rate-distortion sweep CSV (one row per operating
/// point).
pub const SWEEP_CSV_HEADER: &str =
    "delta_motion,delta_color,frames,mean_total_bpv,mean_color_bpv,mean_psnr_db";

/// Caps a dB value for reporting: exact matches (infinite dB) read as 99.
pub fn cap_db(value: f64) -> f64 {
    if value.is_finite() {
        value.min(99.0)
    } else {
        99.0
    }
}

fn bpv(bits: usize, vertices: usize) -> f64 {
    FrameStats::bpv(bits, vertices)
}

/// Formats one frame's statistics as a CSV row (no trailing newline).
pub fn frame_row(stats: &FrameStats) -> String {
    let v = stats.vertices;
    format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4}",
        stats.index,
        u8::from(stats.intra),
        v,
        bpv(stats.geometry_bits, v),
        bpv(stats.motion_bits, v),
        bpv(stats.color_bits, v),
        bpv(stats.total_bits(), v),
        cap_db(stats.color_psnr_db[0]),
        cap_db(stats.color_psnr_db[1]),
        cap_db(stats.color_psnr_db[2]),
        cap_db(stats.color_psnr_avg_db),
        cap_db(stats.prediction_snr_db),
    )
}

/// Formats a whole sequence as a CSV document, header included.
pub fn frame_csv(stats: &[FrameStats]) -> String {
    let mut out = String::from(FRAME_CSV_HEADER);
    out.push('\n');
    for s in stats {
        out.push_str(&frame_row(s));
        out.push('\n');
    }
    out
}

/// Per-sequence aggregates (plain means over frames).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceSummary {
    pub frames: usize,
    pub mean_geometry_bpv: f64,
    pub mean_motion_bpv: f64,
    pub mean_color_bpv: f64,
    pub mean_total_bpv: f64,
    /// Mean of the per-frame channel-averaged PSNR (capped at 99 dB).
    pub mean_psnr_db: f64,
    /// Mean of the per-frame prediction SNR (capped at 99 dB).
    pub mean_prediction_snr_db: f64,
}

/// Averages per-frame statistics into sequence-level numbers.
pub fn summarize(stats: &[FrameStats]) -> SequenceSummary {
    let n = stats.len().max(1) as f64;
    let mean = |f: &dyn Fn(&FrameStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    SequenceSummary {
        frames: stats.len(),
        mean_geometry_bpv: mean(&|s| bpv(s.geometry_bits, s.vertices)),
        mean_motion_bpv: mean(&|s| bpv(s.motion_bits, s.vertices)),
        mean_color_bpv: mean(&|s| bpv(s.color_bits, s.vertices)),
        mean_total_bpv: mean(&|s| bpv(s.total_bits(), s.vertices)),
        mean_psnr_db: mean(&|s| cap_db(s.color_psnr_avg_db)),
        mean_prediction_snr_db: mean(&|s| cap_db(s.prediction_snr_db)),
    }
}

/// Formats rate-distortion sweep rows as a CSV document, header included.
/// Each row is `(delta_motion, delta_color, summary)`.
pub fn sweep_csv(rows: &[(f64, f64, SequenceSummary)]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for (delta_motion, delta_color, summary) in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.4}\n",
            delta_motion,
            delta_color,
            summary.frames,
            summary.mean_total_bpv,
            summary.mean_color_bpv,
            summary.mean_psnr_db,
        ));
    }
    out
}
