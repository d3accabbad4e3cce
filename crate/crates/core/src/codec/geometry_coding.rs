//! Lossless geometry payloads and motion-compensated warping.
//!
//! I-frames transmit the octree occupancy bytes of the whole frame;
//! P-frames transmit the octree of the *symmetric difference* between the
//! warped reference occupancy and the target occupancy. Both byte streams
//! are further compressed with the run-length/Golomb-Rice coder — occupancy
//! bytes of sparse diffs are dominated by small values and runs. Applying
//! the decoded XOR set to the warped occupancy recovers the target exactly,
//! so geometry never loses a voxel.

use super::CodecError;
use crate::entropy::{rlgr_decode, rlgr_encode, Bitstream};
use crate::motion::MotionField;
use crate::octree::{apply_xor, build_octree, Octree};
use crate::voxel::{VoxelFrame, VoxelGrid, VoxelSet};

/// Flag for a payload that carries an octree stream.
const PAYLOAD_OCTREE: u8 = 1;
/// Flag for an empty-set payload (nothing follows).
const PAYLOAD_EMPTY: u8 = 0;

fn encode_octree_bytes(tree: &Octree) -> Vec<u8> {
    let symbols: Vec<i32> = tree.bytes().iter().map(|&b| i32::from(b)).collect();
    let stream = rlgr_encode(&symbols);
    let mut out = Vec::with_capacity(5 + stream.bytes().len());
    out.push(PAYLOAD_OCTREE);
    out.extend_from_slice(&(symbols.len() as u32).to_le_bytes());
    out.extend_from_slice(stream.bytes());
    out
}

fn decode_octree_bytes(
    payload: &[u8],
    grid: &VoxelGrid,
    what: &'static str,
) -> Result<Option<VoxelSet>, CodecError> {
    let flag = *payload.first().ok_or(CodecError::Truncated { context: what })?;
    match flag {
        PAYLOAD_EMPTY => Ok(None),
        PAYLOAD_OCTREE => {
            if payload.len() < 5 {
                return Err(CodecError::Truncated { context: what });
            }
            let count =
                u32::from_le_bytes(payload[1..5].try_into().expect("4 bytes")) as usize;
            let stream = Bitstream::from_bytes(payload[5..].to_vec());
            let symbols = rlgr_decode(&stream, count)?;
            let mut bytes = Vec::with_capacity(symbols.len());
            for s in symbols {
                let b = u8::try_from(s).map_err(|_| CodecError::MalformedPayload { what })?;
                bytes.push(b);
            }
            let tree = Octree::from_bytes(grid.depth(), bytes);
            Ok(Some(tree.decode(grid)?))
        }
        _ => Err(CodecError::MalformedPayload { what }),
    }
}

/// Serializes a frame's full occupancy (I-frame geometry).
pub fn encode_geometry_i(frame: &VoxelFrame) -> Result<Vec<u8>, CodecError> {
    if frame.is_empty() {
        return Ok(vec![PAYLOAD_EMPTY]);
    }
    Ok(encode_octree_bytes(&build_octree(frame)?))
}

/// Recovers an I-frame's geometry (colors zeroed).
pub fn decode_geometry_i(payload: &[u8], grid: &VoxelGrid) -> Result<VoxelFrame, CodecError> {
    match decode_octree_bytes(payload, grid, "intra geometry")? {
        Some(set) => Ok(set.to_frame()),
        None => Ok(VoxelFrame::new(*grid, Vec::new(), Vec::new())?),
    }
}

/// Serializes the symmetric difference between the warped occupancy and the
/// target occupancy (P-frame geometry).
pub fn encode_geometry_p(warped: &VoxelSet, target: &VoxelFrame) -> Result<Vec<u8>, CodecError> {
    let diff = warped.symmetric_difference(&target.to_set())?;
    if diff.is_empty() {
        return Ok(vec![PAYLOAD_EMPTY]);
    }
    Ok(encode_octree_bytes(&Octree::from_set(&diff)?))
}

/// Recovers a P-frame's geometry from the warped occupancy and the coded
/// diff (colors zeroed).
pub fn decode_geometry_p(
    warped: &VoxelSet,
    payload: &[u8],
    grid: &VoxelGrid,
) -> Result<VoxelFrame, CodecError> {
    match decode_octree_bytes(payload, grid, "geometry diff")? {
        Some(diff) => Ok(apply_xor(warped, &diff)?.to_frame()),
        None => Ok(warped.to_frame()),
    }
}

/// A reference frame displaced by a decoded motion field.
#[derive(Clone, Debug)]
pub struct WarpedFrame {
    /// Warped point positions in grid units (reference order).
    pub positions: Vec<[f64; 3]>,
    /// Colors carried over unchanged from the reference.
    pub colors: Vec<[f64; 3]>,
    /// Occupancy of the warped points (deduplicated).
    pub set: VoxelSet,
    /// Number of points clamped back onto the grid boundary.
    pub clamped: usize,
}

/// Displaces every reference vertex by its motion vector. Points pushed
/// outside the grid are clamped to the boundary (and counted); coincident
/// warped points merge into one occupied voxel.
pub fn warp_frame(
    reference: &VoxelFrame,
    field: &MotionField,
) -> Result<WarpedFrame, CodecError> {
    if field.len() != reference.len() {
        return Err(CodecError::Motion(
            crate::motion::MotionError::DimensionMismatch {
                got: field.len(),
                expected: reference.len(),
            },
        ));
    }
    let grid = reference.grid();
    let cells = f64::from(grid.cells_per_axis());
    let mut positions = Vec::with_capacity(reference.len());
    let mut clamped = 0usize;
    for i in 0..reference.len() {
        let p = reference.position(i);
        let v = field.vector(i);
        let mut q = [0.0f64; 3];
        let mut hit = false;
        for t in 0..3 {
            let c = p[t] + v[t];
            q[t] = c.clamp(0.0, cells);
            hit |= q[t] != c;
        }
        if hit {
            clamped += 1;
        }
        positions.push(q);
    }
    let last = grid.cells_per_axis() - 1;
    let mut keys: Vec<u64> = positions
        .iter()
        .map(|q| {
            let cell = |c: f64| (c.floor() as u32).min(last);
            crate::morton::encode(cell(q[0]), cell(q[1]), cell(q[2]))
        })
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let set = VoxelSet::from_keys(*grid, keys)?;
    Ok(WarpedFrame {
        positions,
        colors: reference.colors().to_vec(),
        set,
        clamped,
    })
}
