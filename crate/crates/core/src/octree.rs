//! Octree occupancy coding of voxel sets and XOR-based set differencing.
//!
//! A voxel set at depth `d` is serialized as one byte per *internal* node in
//! depth-first order: bit `b` of a node's byte is set iff child octant `b`
//! is occupied. Child octant order matches the Morton convention (`bit 0` =
//! low corner, child index `x | y<<1 | z<<2`), so depth-first traversal with
//! ascending child index enumerates leaves exactly in Morton key order —
//! decoding therefore yields the canonical vertex ordering directly.
//!
//! The serialization is bijective: `decode(build(S)) == S` and re-encoding a
//! decoded set reproduces the byte stream exactly. Temporal geometry coding
//! exploits this by transmitting the octree of the *symmetric difference*
//! between the (motion-compensated) previous occupancy and the current one;
//! applying XOR at the decoder recovers the current set losslessly.

use crate::voxel::{VoxelError, VoxelFrame, VoxelGrid, VoxelSet};
use thiserror::Error;

/// Errors from octree construction and decoding.
#[derive(Debug, Error)]
pub enum OctreeError {
    #[error("cannot build an octree from an empty voxel set")]
    EmptyInput,
    #[error("octree depth {tree} does not match grid depth {grid}")]
    DepthMismatch { tree: u32, grid: u32 },
    #[error("octree stream truncated: expected a node byte at offset {offset}")]
    Truncated { offset: usize },
    #[error("octree stream has {surplus} surplus bytes starting at offset {offset}")]
    Surplus { offset: usize, surplus: usize },
    #[error("malformed octree stream: empty occupancy byte at offset {offset}")]
    EmptyNode { offset: usize },
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

/// A serialized occupancy octree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Octree {
    depth: u32,
    bytes: Vec<u8>,
}

impl Octree {
    /// Builds the occupancy tree of a non-empty voxel set.
    pub fn from_set(set: &VoxelSet) -> Result<Self, OctreeError> {
        if set.is_empty() {
            return Err(OctreeError::EmptyInput);
        }
        let depth = set.grid().depth();
        let mut bytes = Vec::new();
        emit_node(set.keys(), 0, depth, &mut bytes);
        Ok(Self { depth, bytes })
    }

    /// Wraps raw bytes received from a bitstream; validation happens when
    /// decoding.
    pub fn from_bytes(depth: u32, bytes: Vec<u8>) -> Self {
        Self { depth, bytes }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Decodes the stream back into a voxel set on `grid`.
    ///
    /// Fails on truncated streams, surplus trailing bytes and zero occupancy
    /// bytes (a node with no occupied child cannot appear in a well-formed
    /// stream), reporting the byte offset in each case.
    pub fn decode(&self, grid: &VoxelGrid) -> Result<VoxelSet, OctreeError> {
        if grid.depth() != self.depth {
            return Err(OctreeError::DepthMismatch { tree: self.depth, grid: grid.depth() });
        }
        let mut keys = Vec::new();
        let mut cursor = 0usize;
        walk_node(&self.bytes, &mut cursor, 0, self.depth, 0, &mut keys)?;
        if cursor != self.bytes.len() {
            return Err(OctreeError::Surplus {
                offset: cursor,
                surplus: self.bytes.len() - cursor,
            });
        }
        Ok(VoxelSet::from_keys(*grid, keys)?)
    }
}

/// Serializes the subtree covering `keys` (which share their prefix above
/// `level`) and appends its bytes in depth-first order.
fn emit_node(keys: &[u64], level: u32, depth: u32, out: &mut Vec<u8>) {
    let shift = 3 * (depth - 1 - level);
    let mut byte = 0u8;
    // Keys are Morton-sorted, so each child's keys form a contiguous run.
    let mut runs: [(usize, usize); 8] = [(0, 0); 8];
    let mut start = 0;
    while start < keys.len() {
        let child = ((keys[start] >> shift) & 7) as usize;
        let mut end = start + 1;
        while end < keys.len() && ((keys[end] >> shift) & 7) as usize == child {
            end += 1;
        }
        byte |= 1 << child;
        runs[child] = (start, end);
        start = end;
    }
    out.push(byte);
    if level + 1 < depth {
        for child in 0..8 {
            if byte & (1 << child) != 0 {
                let (s, e) = runs[child];
                emit_node(&keys[s..e], level + 1, depth, out);
            }
        }
    }
}

/// Decodes one node and its subtree, appending leaf Morton keys in order.
fn walk_node(
    bytes: &[u8],
    cursor: &mut usize,
    level: u32,
    depth: u32,
    prefix: u64,
    keys: &mut Vec<u64>,
) -> Result<(), OctreeError> {
    let offset = *cursor;
    let byte = *bytes.get(offset).ok_or(OctreeError::Truncated { offset })?;
    *cursor += 1;
    if byte == 0 {
        return Err(OctreeError::EmptyNode { offset });
    }
    let shift = 3 * (depth - 1 - level);
    for child in 0..8u64 {
        if byte & (1 << child) != 0 {
            let key = prefix | (child << shift);
            if level + 1 == depth {
                keys.push(key);
            } else {
                walk_node(bytes, cursor, level + 1, depth, key, keys)?;
            }
        }
    }
    Ok(())
}

/// Builds the octree of a frame's occupancy.
pub fn build_octree(frame: &VoxelFrame) -> Result<Octree, OctreeError> {
    Octree::from_set(&frame.to_set())
}

/// Decodes an octree into a geometry-only frame (colors zeroed) on `grid`.
pub fn decode_octree(tree: &Octree, grid: &VoxelGrid) -> Result<VoxelFrame, OctreeError> {
    Ok(tree.decode(grid)?.to_frame())
}

/// Symmetric difference of two frames' occupancy sets.
pub fn xor_voxel_sets(a: &VoxelFrame, b: &VoxelFrame) -> Result<VoxelSet, OctreeError> {
    Ok(a.to_set().symmetric_difference(&b.to_set())?)
}

/// Applies an XOR diff to a base set; its own inverse, so the same call
/// recovers the target at the decoder and the base from the target.
pub fn apply_xor(base: &VoxelSet, diff: &VoxelSet) -> Result<VoxelSet, OctreeError> {
    Ok(base.symmetric_difference(diff)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::VoxelGrid;

    fn grid(depth: u32) -> VoxelGrid {
        VoxelGrid::new([0.0; 3], 1.0, depth).unwrap()
    }

    fn set_of(grid: VoxelGrid, voxels: &[[u32; 3]]) -> VoxelSet {
        let mut keys: Vec<u64> =
            voxels.iter().map(|v| crate::morton::encode(v[0], v[1], v[2])).collect();
        keys.sort_unstable();
        keys.dedup();
        VoxelSet::from_keys(grid, keys).unwrap()
    }

    #[test]
    fn single_voxel_at_depth_three_is_three_one_bit_bytes() {
        let s = set_of(grid(3), &[[0, 0, 0]]);
        let tree = Octree::from_set(&s).unwrap();
        assert_eq!(tree.bytes(), &[0x01, 0x01, 0x01]);
        for b in tree.bytes() {
            assert_eq!(b.count_ones(), 1);
        }
        assert_eq!(tree.decode(&grid(3)).unwrap(), s);
    }

    #[test]
    fn full_depth_one_cube_is_single_ff_byte() {
        let all: Vec<[u32; 3]> = (0..8u32).map(|c| [c & 1, (c >> 1) & 1, (c >> 2) & 1]).collect();
        let s = set_of(grid(1), &all);
        let tree = Octree::from_set(&s).unwrap();
        assert_eq!(tree.bytes(), &[0xFF]);
        assert_eq!(tree.decode(&grid(1)).unwrap(), s);
    }

    #[test]
    fn known_stream_decodes_to_origin_voxel() {
        let tree = Octree::from_bytes(3, vec![0x01, 0x01, 0x01]);
        let frame = decode_octree(&tree, &grid(3)).unwrap();
        assert_eq!(frame.voxels(), &[[0, 0, 0]]);
    }

    #[test]
    fn random_set_round_trips_and_reencodes_bit_exact() {
        // 100 pseudorandom voxels at depth 5.
        let g = grid(5);
        let mut state = 12345u64;
        let mut voxels = Vec::new();
        for _ in 0..100 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            voxels.push([
                (state >> 5) as u32 & 31,
                (state >> 23) as u32 & 31,
                (state >> 41) as u32 & 31,
            ]);
        }
        let s = set_of(g, &voxels);
        let tree = Octree::from_set(&s).unwrap();
        let decoded = tree.decode(&g).unwrap();
        assert_eq!(decoded, s);
        let tree2 = Octree::from_set(&decoded).unwrap();
        assert_eq!(tree.bytes(), tree2.bytes());
    }

    #[test]
    fn truncated_and_surplus_streams_report_offsets() {
        let s = set_of(grid(4), &[[1, 2, 3], [7, 7, 7], [0, 0, 0]]);
        let bytes = Octree::from_set(&s).unwrap().into_bytes();

        let mut truncated = bytes.clone();
        truncated.pop();
        let err = Octree::from_bytes(4, truncated).decode(&grid(4)).unwrap_err();
        assert!(matches!(err, OctreeError::Truncated { offset } if offset == bytes.len() - 1));

        let mut surplus = bytes.clone();
        surplus.push(0xAB);
        let err = Octree::from_bytes(4, surplus).decode(&grid(4)).unwrap_err();
        assert!(
            matches!(err, OctreeError::Surplus { offset, surplus: 1 } if offset == bytes.len())
        );
    }

    #[test]
    fn zero_occupancy_byte_is_malformed() {
        let err = Octree::from_bytes(2, vec![0x01, 0x00]).decode(&grid(2)).unwrap_err();
        assert!(matches!(err, OctreeError::EmptyNode { offset: 1 }));
    }

    #[test]
    fn empty_set_is_rejected() {
        let s = VoxelSet::from_keys(grid(3), vec![]).unwrap();
        assert!(matches!(Octree::from_set(&s), Err(OctreeError::EmptyInput)));
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let s = set_of(grid(3), &[[0, 0, 0]]);
        let tree = Octree::from_set(&s).unwrap();
        assert!(matches!(
            tree.decode(&grid(4)),
            Err(OctreeError::DepthMismatch { tree: 3, grid: 4 })
        ));
    }

    #[test]
    fn xor_round_trip_recovers_target() {
        let g = grid(4);
        let a = set_of(g, &[[0, 0, 0], [1, 2, 3], [4, 4, 4], [15, 15, 15]]);
        let b = set_of(g, &[[1, 2, 3], [4, 4, 4], [8, 0, 2]]);
        let diff = a.symmetric_difference(&b).unwrap();
        assert_eq!(apply_xor(&a, &diff).unwrap(), b);
        assert_eq!(apply_xor(&b, &diff).unwrap(), a);
        // |a Δ b| = |a| + |b| − 2|a ∩ b|; the intersection here is 2 voxels.
        assert_eq!(diff.len(), a.len() + b.len() - 4);
    }

    #[test]
    fn diff_tree_never_larger_than_union_tree() {
        let g = grid(5);
        let mut state = 777u64;
        let mut rnd_set = |n: usize, st: &mut u64| {
            let mut v = Vec::new();
            for _ in 0..n {
                *st = st.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.push([
                    (*st >> 7) as u32 & 31,
                    (*st >> 21) as u32 & 31,
                    (*st >> 43) as u32 & 31,
                ]);
            }
            set_of(g, &v)
        };
        for _ in 0..20 {
            let a = rnd_set(60, &mut state);
            let b = rnd_set(60, &mut state);
            let diff = a.symmetric_difference(&b).unwrap();
            if diff.is_empty() {
                continue;
            }
            let union_keys: Vec<u64> = {
                let mut k: Vec<u64> = a.keys().iter().chain(b.keys()).copied().collect();
                k.sort_unstable();
                k.dedup();
                k
            };
            let union = VoxelSet::from_keys(g, union_keys).unwrap();
            let diff_len = Octree::from_set(&diff).unwrap().bytes().len();
            let union_len = Octree::from_set(&union).unwrap().bytes().len();
            assert!(diff_len <= union_len);
        }
    }
}
