//! The sequence container: a fixed little-endian header followed by
//! length-prefixed per-frame records.
//!
//! The header carries every parameter a decoder needs (and, for provenance,
//! the encoder-side tunables that shaped the streams). Each frame record is
//! `[frame_type: u8][geom_len: u32][geom][motion_len: u32][motion]`
//! `[color_len: u32][color]`.

use super::{CodecError, ColorParams, SequenceConfig};
use crate::voxel::VoxelGrid;

/// Container magic; the trailing digit is the format version gate.
const MAGIC: &[u8; 8] = b"DPCCSEQ1";
/// Current container version.
const VERSION: u16 = 1;

/// Everything the decoder needs, parsed from the container prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceHeader {
    /// The voxel grid shared by all frames.
    pub grid: VoxelGrid,
    /// K of the per-frame K-NN graphs (decoder rebuilds them).
    pub knn: u32,
    /// Wavelet scale count used by the encoder's matcher.
    pub scale_count: u32,
    /// Wavelet partition factor.
    pub partition: f64,
    /// Chebyshev degree of the encoder's descriptor transform.
    pub chebyshev_degree: u32,
    /// Motion smoothness weight used at estimation time.
    pub mu: f64,
    /// K-means cluster count (0 = automatic).
    pub clusters: u32,
    /// Correspondence acceptance percentile.
    pub threshold_percentile: f64,
    /// Motion coefficient quantization stepsize.
    pub delta_motion: f64,
    /// Color residual quantization stepsize.
    pub delta_color: f64,
    /// Color quantization stepsize for I-frames.
    pub delta_color_intra: f64,
    /// Color block edge length in voxels.
    pub block_size: u32,
    /// Neighbor count for warped-frame color prediction.
    pub color_neighbors: u32,
    /// Adaptive Laplacian model decay.
    pub ema_decay: f64,
    /// DC diversity constant.
    pub dc_constant: f64,
    /// I-frame period (0 = first frame only).
    pub gop: u32,
    /// Number of frame records that follow.
    pub frame_count: u32,
}

impl SequenceHeader {
    /// Builds the header for an encode run.
    pub fn from_config(grid: &VoxelGrid, config: &SequenceConfig, frames: usize) -> Self {
        Self {
            grid: grid.clone(),
            knn: config.knn as u32,
            scale_count: config.scale_count as u32,
            partition: config.partition,
            chebyshev_degree: config.chebyshev_degree as u32,
            mu: config.motion.mu,
            clusters: config.motion.clusters as u32,
            threshold_percentile: config.motion.threshold_percentile,
            delta_motion: config.delta_motion,
            delta_color: config.delta_color,
            block_size: config.block_size,
            color_neighbors: config.color_neighbors as u32,
            ema_decay: config.ema_decay,
            dc_constant: config.dc_constant,
            gop: config.gop as u32,
            frame_count: frames as u32,
        }
    }

    /// The color coder parameters embedded in this header.
    pub fn codec_params(&self) -> ColorParams {
        ColorParams {
            delta: self.delta_color,
            block_size: self.block_size,
            ema_decay: self.ema_decay,
            dc_constant: self.dc_constant,
        }
    }

    /// Serializes the header (fixed layout, little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for c in self.grid.origin() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.grid.stepsize().to_le_bytes());
        out.extend_from_slice(&self.grid.depth().to_le_bytes());
        for v in [
            self.knn,
            self.scale_count,
            self.chebyshev_degree,
            self.clusters,
            self.block_size,
            self.color_neighbors,
            self.gop,
            self.frame_count,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [
            self.partition,
            self.mu,
            self.threshold_percentile,
            self.delta_motion,
            self.delta_color,
            self.ema_decay,
            self.dc_constant,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a header from the container prefix; returns the header and the
    /// offset of the first frame record.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), CodecError> {
        let mut r = Cursor { bytes, offset: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(CodecError::BadMagic);
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(CodecError::UnsupportedVersion { got: version });
        }
        let origin = [r.f64("grid origin")?, r.f64("grid origin")?, r.f64("grid origin")?];
        let stepsize = r.f64("grid stepsize")?;
        let depth = r.u32("grid depth")?;
        let grid = VoxelGrid::new(origin, stepsize, depth)
            .map_err(|_| CodecError::InvalidConfig("header grid is invalid".into()))?;
        let knn = r.u32("knn")?;
        let scale_count = r.u32("scale count")?;
        let chebyshev_degree = r.u32("chebyshev degree")?;
        let clusters = r.u32("clusters")?;
        let block_size = r.u32("block size")?;
        let color_neighbors = r.u32("color neighbors")?;
        let gop = r.u32("gop")?;
        let frame_count = r.u32("frame count")?;
        let partition = r.f64("partition")?;
        let mu = r.f64("mu")?;
        let threshold_percentile = r.f64("threshold percentile")?;
        let delta_motion = r.f64("delta motion")?;
        let delta_color = r.f64("delta color")?;
        let ema_decay = r.f64("ema decay")?;
        let dc_constant = r.f64("dc constant")?;
        let header = Self {
            grid,
            knn,
            scale_count,
            partition,
            chebyshev_degree,
            mu,
            clusters,
            threshold_percentile,
            delta_motion,
            delta_color,
            block_size,
            color_neighbors,
            ema_decay,
            dc_constant,
            gop,
            frame_count,
        };
        if header.knn == 0 {
            return Err(CodecError::InvalidConfig("header knn is zero".into()));
        }
        if header.block_size == 0 || !header.block_size.is_power_of_two() {
            return Err(CodecError::InvalidConfig("header block size".into()));
        }
        if !(header.delta_motion > 0.0) || !(header.delta_color > 0.0) {
            return Err(CodecError::InvalidConfig("header stepsize".into()));
        }
        Ok((header, r.offset))
    }
}

/// One frame's payloads, as stored in the container.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    /// True for I-frames (empty motion payload).
    pub intra: bool,
    /// Geometry payload bytes.
    pub geometry: Vec<u8>,
    /// Motion payload bytes (empty for I-frames).
    pub motion: Vec<u8>,
    /// Color payload bytes.
    pub color: Vec<u8>,
}

/// Appends one frame record to the container.
pub fn write_record(out: &mut Vec<u8>, record: &FrameRecord) {
    out.push(u8::from(!record.intra));
    for payload in [&record.geometry, &record.motion, &record.color] {
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(payload);
    }
}

/// Reads the frame record at `*offset`, advancing the offset.
pub fn read_record(
    bytes: &[u8],
    offset: &mut usize,
    frame: usize,
) -> Result<FrameRecord, CodecError> {
    let mut r = Cursor { bytes, offset: *offset };
    let kind = r.take(1, "frame type")?[0];
    let intra = match kind {
        0 => true,
        1 => false,
        _ => return Err(CodecError::PayloadMismatch { frame, what: "frame type" }),
    };
    let geometry = r.payload("geometry payload")?;
    let motion = r.payload("motion payload")?;
    let color = r.payload("color payload")?;
    if intra && !motion.is_empty() {
        return Err(CodecError::PayloadMismatch { frame, what: "intra motion" });
    }
    *offset = r.offset;
    Ok(FrameRecord { intra, geometry, motion, color })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], CodecError> {
        if self.offset + n > self.bytes.len() {
            return Err(CodecError::Truncated { context });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }

    fn payload(&mut self, context: &'static str) -> Result<Vec<u8>, CodecError> {
        let len = self.u32(context)? as usize;
        Ok(self.take(len, context)?.to_vec())
    }
}
