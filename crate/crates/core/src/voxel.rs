//! Voxelization of raw point clouds onto a cubic grid.
//!
//! A [`VoxelGrid`] places a `2^depth × 2^depth × 2^depth` lattice of cubic
//! cells at some origin and stepsize. [`voxelize`] maps every raw point to
//! the cell containing it; each occupied cell becomes one vertex of a
//! [`VoxelFrame`] carrying the arithmetic mean of the colors that fell into
//! it. Voxels are kept sorted by Morton key — that ordering is the canonical
//! vertex indexing used by the graph, feature, motion and coding stages, and
//! it is identical across runs and platforms.
//!
//! Positions are handled in *grid units* (cell widths) throughout the codec:
//! the representative position of voxel `(i, j, k)` is its center
//! `(i+0.5, j+0.5, k+0.5)`. Conversion to world coordinates only happens at
//! the PLY boundary.

use crate::morton;
use thiserror::Error;

/// Errors arising from grid construction and voxelization.
#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("points and colors have different lengths ({points} vs {colors})")]
    LengthMismatch { points: usize, colors: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("grid origin has a non-finite coordinate")]
    NonFiniteOrigin,
    #[error("grid stepsize must be positive and finite, got {stepsize}")]
    InvalidStepsize { stepsize: f64 },
    #[error("grid depth must be in 1..=21, got {depth}")]
    InvalidDepth { depth: u32 },
    #[error("point {index} at ({x}, {y}, {z}) lies outside the grid bounding cube")]
    OutOfRange { index: usize, x: f64, y: f64, z: f64 },
    #[error("voxel list is not unique and Morton-sorted at position {index}")]
    NotMortonSorted { index: usize },
    #[error("voxel {index} has a coordinate outside [0, 2^depth)")]
    VoxelOutOfRange { index: usize },
    #[error("voxels and colors have different lengths ({voxels} vs {colors})")]
    ColorLengthMismatch { voxels: usize, colors: usize },
    #[error("operands are defined on different voxel grids")]
    GridMismatch,
}

/// A raw (pre-voxelization) colored point cloud in source units.
#[derive(Debug, Clone, Default)]
pub struct RawPointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl RawPointCloud {
    /// Builds a cloud, validating that points and colors align and that all
    /// coordinates are finite.
    pub fn new(points: Vec<[f64; 3]>, colors: Vec<[u8; 3]>) -> Result<Self, VoxelError> {
        if points.len() != colors.len() {
            return Err(VoxelError::LengthMismatch { points: points.len(), colors: colors.len() });
        }
        for (index, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(VoxelError::NonFinitePoint { index });
            }
        }
        Ok(Self { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A cubic voxel grid: `2^depth` cells per axis starting at `origin`, each
/// cell `stepsize` wide in world units.
#[derive(Debug, Clone, Copy)]
pub struct VoxelGrid {
    origin: [f64; 3],
    stepsize: f64,
    depth: u32,
}

impl PartialEq for VoxelGrid {
    /// Grid identity is bit-exact: two grids are interchangeable for coding
    /// purposes only if origin and stepsize match to the last bit.
    fn eq(&self, other: &Self) -> bool {
        self.depth == other.depth
            && self.stepsize.to_bits() == other.stepsize.to_bits()
            && self
                .origin
                .iter()
                .zip(&other.origin)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Eq for VoxelGrid {}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], stepsize: f64, depth: u32) -> Result<Self, VoxelError> {
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(VoxelError::NonFiniteOrigin);
        }
        if !(stepsize.is_finite() && stepsize > 0.0) {
            return Err(VoxelError::InvalidStepsize { stepsize });
        }
        if depth == 0 || depth > morton::MAX_BITS {
            return Err(VoxelError::InvalidDepth { depth });
        }
        Ok(Self { origin, stepsize, depth })
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn stepsize(&self) -> f64 {
        self.stepsize
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Number of cells along each axis (`2^depth`).
    pub fn cells_per_axis(&self) -> u32 {
        1u32 << self.depth
    }

    /// Cell containing a world-space point, or `None` if outside the cube.
    ///
    /// Points exactly on the upper boundary are folded into the last cell so
    /// that the closed bounding cube is fully covered.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<[u32; 3]> {
        let cells = self.cells_per_axis();
        let mut out = [0u32; 3];
        for a in 0..3 {
            let t = (p[a] - self.origin[a]) / self.stepsize;
            if !(0.0..=(cells as f64)).contains(&t) {
                return None;
            }
            out[a] = (t.floor() as u32).min(cells - 1);
        }
        Some(out)
    }

    /// Converts a position in grid units to world coordinates.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + p[0] * self.stepsize,
            self.origin[1] + p[1] * self.stepsize,
            self.origin[2] + p[2] * self.stepsize,
        ]
    }
}

/// A voxelized frame: unique, Morton-sorted occupied cells with real-valued
/// mean colors. The index into `voxels` is the canonical vertex id.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFrame {
    grid: VoxelGrid,
    voxels: Vec<[u32; 3]>,
    colors: Vec<[f64; 3]>,
}

impl VoxelFrame {
    /// Builds a frame from an already-sorted voxel list, validating the
    /// Morton order, the coordinate range and the color alignment.
    pub fn new(
        grid: VoxelGrid,
        voxels: Vec<[u32; 3]>,
        colors: Vec<[f64; 3]>,
    ) -> Result<Self, VoxelError> {
        if voxels.len() != colors.len() {
            return Err(VoxelError::ColorLengthMismatch {
                voxels: voxels.len(),
                colors: colors.len(),
            });
        }
        let cells = grid.cells_per_axis();
        let mut prev = None;
        for (index, v) in voxels.iter().enumerate() {
            if v.iter().any(|&c| c >= cells) {
                return Err(VoxelError::VoxelOutOfRange { index });
            }
            let key = morton::encode(v[0], v[1], v[2]);
            if let Some(p) = prev {
                if key <= p {
                    return Err(VoxelError::NotMortonSorted { index });
                }
            }
            prev = Some(key);
        }
        Ok(Self { grid, voxels, colors })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[[u32; 3]] {
        &self.voxels
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Replaces the per-voxel colors (used when attaching decoded colors to
    /// decoded geometry).
    pub fn set_colors(&mut self, colors: Vec<[f64; 3]>) -> Result<(), VoxelError> {
        if colors.len() != self.voxels.len() {
            return Err(VoxelError::ColorLengthMismatch {
                voxels: self.voxels.len(),
                colors: colors.len(),
            });
        }
        self.colors = colors;
        Ok(())
    }

    /// Representative position of vertex `n` in grid units: the voxel center.
    pub fn position(&self, n: usize) -> [f64; 3] {
        let v = self.voxels[n];
        [v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5]
    }

    /// All representative positions in grid units.
    pub fn positions(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|n| self.position(n)).collect()
    }

    /// Morton key of vertex `n`.
    pub fn morton_key(&self, n: usize) -> u64 {
        let v = self.voxels[n];
        morton::encode(v[0], v[1], v[2])
    }

    /// The frame's occupancy as a plain voxel set.
    pub fn to_set(&self) -> VoxelSet {
        let keys = (0..self.len()).map(|n| self.morton_key(n)).collect();
        VoxelSet { grid: self.grid, keys }
    }
}

/// A set of occupied voxels (geometry only), stored as sorted unique Morton
/// keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelSet {
    grid: VoxelGrid,
    keys: Vec<u64>,
}

impl VoxelSet {
    /// Builds a set from sorted, unique, in-range Morton keys.
    pub fn from_keys(grid: VoxelGrid, keys: Vec<u64>) -> Result<Self, VoxelError> {
        let limit = 1u64 << (3 * grid.depth());
        let mut prev = None;
        for (index, &k) in keys.iter().enumerate() {
            if k >= limit {
                return Err(VoxelError::VoxelOutOfRange { index });
            }
            if let Some(p) = prev {
                if k <= p {
                    return Err(VoxelError::NotMortonSorted { index });
                }
            }
            prev = Some(k);
        }
        Ok(Self { grid, keys })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Voxel triples in canonical (Morton) order.
    pub fn voxels(&self) -> Vec<[u32; 3]> {
        self.keys
            .iter()
            .map(|&k| {
                let (x, y, z) = morton::decode(k);
                [x, y, z]
            })
            .collect()
    }

    /// Symmetric difference with another set over the same grid.
    pub fn symmetric_difference(&self, other: &VoxelSet) -> Result<VoxelSet, VoxelError> {
        if self.grid != other.grid {
            return Err(VoxelError::GridMismatch);
        }
        let mut keys = Vec::with_capacity(self.keys.len() + other.keys.len());
        let (mut i, mut j) = (0, 0);
        while i < self.keys.len() && j < other.keys.len() {
            match self.keys[i].cmp(&other.keys[j]) {
                std::cmp::Ordering::Less => {
                    keys.push(self.keys[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    keys.push(other.keys[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    i += 1;
                    j += 1;
                }
            }
        }
        keys.extend_from_slice(&self.keys[i..]);
        keys.extend_from_slice(&other.keys[j..]);
        Ok(VoxelSet { grid: self.grid, keys })
    }

    /// Geometry-only frame view of this set (colors zeroed).
    pub fn to_frame(&self) -> VoxelFrame {
        VoxelFrame {
            grid: self.grid,
            voxels: self.voxels(),
            colors: vec![[0.0; 3]; self.keys.len()],
        }
    }
}

/// Maps every raw point to its grid cell and pools colors per occupied cell.
///
/// The occupied set is exactly the set of cells containing at least one
/// point; each voxel's color is the (real-valued) arithmetic mean of the
/// colors of its points. Fails if any point lies outside the grid cube.
pub fn voxelize(cloud: &RawPointCloud, grid: &VoxelGrid) -> Result<VoxelFrame, VoxelError> {
    use std::collections::BTreeMap;

    if cloud.points.len() != cloud.colors.len() {
        return Err(VoxelError::LengthMismatch {
            points: cloud.points.len(),
            colors: cloud.colors.len(),
        });
    }

    // Accumulate (color sum, count) per occupied cell, keyed by Morton code.
    // BTreeMap gives the canonical ordering for free.
    let mut cells: BTreeMap<u64, ([f64; 3], u64)> = BTreeMap::new();
    for (index, (p, c)) in cloud.points.iter().zip(&cloud.colors).enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(VoxelError::NonFinitePoint { index });
        }
        let cell = grid.cell_of(*p).ok_or(VoxelError::OutOfRange {
            index,
            x: p[0],
            y: p[1],
            z: p[2],
        })?;
        let key = morton::encode(cell[0], cell[1], cell[2]);
        let entry = cells.entry(key).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            entry.0[a] += f64::from(c[a]);
        }
        entry.1 += 1;
    }

    let mut voxels = Vec::with_capacity(cells.len());
    let mut colors = Vec::with_capacity(cells.len());
    for (key, (sum, count)) in cells {
        let (x, y, z) = morton::decode(key);
        voxels.push([x, y, z]);
        colors.push([sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64]);
    }
    Ok(VoxelFrame { grid: *grid, voxels, colors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(depth: u32) -> VoxelGrid {
        VoxelGrid::new([0.0; 3], 1.0, depth).unwrap()
    }

    #[test]
    fn single_point_at_origin_occupies_first_cell() {
        let cloud = RawPointCloud::new(vec![[0.0, 0.0, 0.0]], vec![[10, 20, 30]]).unwrap();
        let frame = voxelize(&cloud, &unit_grid(3)).unwrap();
        assert_eq!(frame.voxels(), &[[0, 0, 0]]);
        assert_eq!(frame.colors(), &[[10.0, 20.0, 30.0]]);
        assert_eq!(frame.position(0), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn corner_points_fill_all_octants_at_depth_one() {
        let eps = 1e-9;
        let mut points = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    points.push([
                        x as f64 * (2.0 - 2.0 * eps) + eps,
                        y as f64 * (2.0 - 2.0 * eps) + eps,
                        z as f64 * (2.0 - 2.0 * eps) + eps,
                    ]);
                }
            }
        }
        let colors = vec![[255, 255, 255]; points.len()];
        let cloud = RawPointCloud::new(points, colors).unwrap();
        let frame = voxelize(&cloud, &unit_grid(1)).unwrap();
        assert_eq!(frame.len(), 8);
        let expected: Vec<[u32; 3]> = (0..8u32).map(|c| [c & 1, (c >> 1) & 1, (c >> 2) & 1]).collect();
        assert_eq!(frame.voxels(), expected.as_slice());
    }

    #[test]
    fn colors_average_within_a_cell() {
        let cloud = RawPointCloud::new(
            vec![[0.25, 0.25, 0.25], [0.75, 0.75, 0.75]],
            vec![[0, 0, 100], [50, 0, 200]],
        )
        .unwrap();
        let frame = voxelize(&cloud, &unit_grid(2)).unwrap();
        assert_eq!(frame.len(), 1);
        assert_eq!(frame.colors()[0], [25.0, 0.0, 150.0]);
    }

    #[test]
    fn out_of_range_point_reports_index() {
        let cloud =
            RawPointCloud::new(vec![[0.5; 3], [9.0, 0.0, 0.0]], vec![[0; 3], [0; 3]]).unwrap();
        match voxelize(&cloud, &unit_grid(2)) {
            Err(VoxelError::OutOfRange { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected OutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn upper_boundary_points_fold_into_last_cell() {
        // The closed cube is covered: a point exactly at origin + 2^d * step
        // belongs to the final cell rather than being rejected.
        let cloud = RawPointCloud::new(vec![[4.0, 4.0, 4.0]], vec![[1, 2, 3]]).unwrap();
        let frame = voxelize(&cloud, &unit_grid(2)).unwrap();
        assert_eq!(frame.voxels(), &[[3, 3, 3]]);
    }

    #[test]
    fn voxel_order_is_morton() {
        let cloud = RawPointCloud::new(
            vec![[1.5, 0.5, 0.5], [0.5, 0.5, 0.5], [0.5, 1.5, 0.5], [0.5, 0.5, 1.5]],
            vec![[0; 3]; 4],
        )
        .unwrap();
        let frame = voxelize(&cloud, &unit_grid(2)).unwrap();
        assert_eq!(frame.voxels(), &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        for n in 1..frame.len() {
            assert!(frame.morton_key(n - 1) < frame.morton_key(n));
        }
    }

    #[test]
    fn grid_validation_rejects_bad_parameters() {
        assert!(matches!(
            VoxelGrid::new([0.0; 3], 0.0, 3),
            Err(VoxelError::InvalidStepsize { .. })
        ));
        assert!(matches!(
            VoxelGrid::new([0.0; 3], 1.0, 0),
            Err(VoxelError::InvalidDepth { .. })
        ));
        assert!(matches!(
            VoxelGrid::new([0.0; 3], 1.0, 22),
            Err(VoxelError::InvalidDepth { .. })
        ));
        assert!(matches!(
            VoxelGrid::new([f64::NAN, 0.0, 0.0], 1.0, 3),
            Err(VoxelError::NonFiniteOrigin)
        ));
    }

    #[test]
    fn frame_construction_rejects_unsorted_voxels() {
        let grid = unit_grid(3);
        let err = VoxelFrame::new(grid, vec![[1, 0, 0], [0, 0, 0]], vec![[0.0; 3]; 2]);
        assert!(matches!(err, Err(VoxelError::NotMortonSorted { index: 1 })));
        let dup = VoxelFrame::new(grid, vec![[1, 0, 0], [1, 0, 0]], vec![[0.0; 3]; 2]);
        assert!(matches!(dup, Err(VoxelError::NotMortonSorted { index: 1 })));
    }

    #[test]
    fn symmetric_difference_basics() {
        let grid = unit_grid(3);
        let a = VoxelSet::from_keys(grid, vec![1, 2, 5]).unwrap();
        let b = VoxelSet::from_keys(grid, vec![2, 5, 9]).unwrap();
        let d = a.symmetric_difference(&b).unwrap();
        assert_eq!(d.keys(), &[1, 9]);
        let empty = a.symmetric_difference(&a).unwrap();
        assert!(empty.is_empty());
    }
}
