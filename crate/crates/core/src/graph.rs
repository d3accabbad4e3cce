//! K-nearest-neighbor graphs over occupied voxels.
//!
//! Vertices are the voxels of a frame in canonical (Morton) order. Each
//! vertex is connected to its K nearest neighbors under Euclidean distance
//! between voxel centers, the directed lists are symmetrized by union, and
//! edge weights are inverse distances `w = 1/d`. Distances between voxel
//! centers equal integer-lattice distances, so all nearest-neighbor
//! comparisons are exact integer comparisons — graph construction is fully
//! deterministic across platforms. Ties at equal distance are broken toward
//! the smaller vertex index.
//!
//! The graph exposes its combinatorial Laplacian `L = D − W` as a sparse
//! operator ([`VoxelGraph::laplacian_apply`]) plus a dense assembly for
//! small problems, and connected-component labeling used by the spectral
//! stage.

use crate::voxel::VoxelFrame;
use std::collections::HashMap;
use thiserror::Error;

/// Errors from graph construction.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("k must be at least 1, got {k}")]
    InvalidK { k: usize },
    #[error("cannot build a graph over an empty frame")]
    EmptyFrame,
    #[error("edge ({i}, {j}) is invalid for {n} vertices")]
    InvalidEdge { i: u32, j: u32, n: usize },
    #[error("edge ({i}, {j}) has non-positive or non-finite weight {weight}")]
    InvalidWeight { i: u32, j: u32, weight: f64 },
    #[error("duplicate edge ({i}, {j})")]
    DuplicateEdge { i: u32, j: u32 },
}

/// Connected-component labeling: `labels[v]` is the component id of vertex
/// `v`; ids are dense in `0..count` and ordered by smallest member vertex.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabels {
    pub count: usize,
    pub labels: Vec<u32>,
}

/// An undirected weighted graph over frame vertices, stored as CSR.
#[derive(Debug, Clone)]
pub struct VoxelGraph {
    n: usize,
    offsets: Vec<u32>,
    targets: Vec<u32>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
    edge_count: usize,
}

impl VoxelGraph {
    /// Builds a graph from canonical undirected edges `(i, j, w)` with
    /// `i < j`, unique pairs, positive finite weights.
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (u32, u32, f64)>,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::EmptyFrame);
        }
        let mut canonical: Vec<(u32, u32, f64)> = Vec::new();
        for (i, j, w) in edges {
            if i == j || (i as usize) >= n || (j as usize) >= n {
                return Err(GraphError::InvalidEdge { i, j, n });
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(GraphError::InvalidWeight { i, j, weight: w });
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            canonical.push((a, b, w));
        }
        canonical.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        for pair in canonical.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(GraphError::DuplicateEdge { i: pair[0].0, j: pair[0].1 });
            }
        }

        let mut counts = vec![0u32; n];
        for &(i, j, _) in &canonical {
            counts[i as usize] += 1;
            counts[j as usize] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        offsets.push(0);
        for &c in &counts {
            acc += c;
            offsets.push(acc);
        }
        let mut cursor: Vec<u32> = offsets[..n].to_vec();
        let mut targets = vec![0u32; acc as usize];
        let mut weights = vec![0.0f64; acc as usize];
        for &(i, j, w) in &canonical {
            for (from, to) in [(i, j), (j, i)] {
                let slot = cursor[from as usize] as usize;
                targets[slot] = to;
                weights[slot] = w;
                cursor[from as usize] += 1;
            }
        }
        // Neighbor lists sorted by target index → deterministic iteration
        // and summation order everywhere downstream.
        for v in 0..n {
            let (s, e) = (offsets[v] as usize, offsets[v + 1] as usize);
            let mut row: Vec<(u32, f64)> =
                targets[s..e].iter().copied().zip(weights[s..e].iter().copied()).collect();
            row.sort_unstable_by_key(|&(t, _)| t);
            for (slot, (t, w)) in row.into_iter().enumerate() {
                targets[s + slot] = t;
                weights[s + slot] = w;
            }
        }
        let degrees = (0..n)
            .map(|v| {
                let (s, e) = (offsets[v] as usize, offsets[v + 1] as usize);
                weights[s..e].iter().sum()
            })
            .collect();
        Ok(Self { n, offsets, targets, weights, degrees, edge_count: canonical.len() })
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Weighted degree (sum of incident edge weights).
    pub fn degree(&self, v: usize) -> f64 {
        self.degrees[v]
    }

    /// Neighbors of `v` as `(vertex, weight)`, ascending by vertex index.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.offsets[v] as usize, self.offsets[v + 1] as usize);
        self.targets[s..e]
            .iter()
            .zip(&self.weights[s..e])
            .map(|(&t, &w)| (t as usize, w))
    }

    /// Canonical undirected edges `(i, j, w)` with `i < j`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            self.neighbors(i)
                .filter(move |&(j, _)| j > i)
                .map(move |(j, w)| (i as u32, j as u32, w))
        })
    }

    /// Applies the combinatorial Laplacian: `out = (D − W) x`.
    pub fn laplacian_apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        for v in 0..self.n {
            let mut acc = self.degrees[v] * x[v];
            let (s, e) = (self.offsets[v] as usize, self.offsets[v + 1] as usize);
            for (t, w) in self.targets[s..e].iter().zip(&self.weights[s..e]) {
                acc -= w * x[*t as usize];
            }
            out[v] = acc;
        }
    }

    /// Dense Laplacian (for small graphs, oracles and the spectral stage's
    /// per-component assembly).
    pub fn laplacian_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut l = nalgebra::DMatrix::zeros(self.n, self.n);
        for v in 0..self.n {
            l[(v, v)] = self.degrees[v];
            for (t, w) in self.neighbors(v) {
                l[(v, t)] = -w;
            }
        }
        l
    }

    /// Labels connected components (union-find with path halving).
    pub fn components(&self) -> ComponentLabels {
        let mut parent: Vec<u32> = (0..self.n as u32).collect();
        fn find(parent: &mut [u32], mut v: u32) -> u32 {
            while parent[v as usize] != v {
                parent[v as usize] = parent[parent[v as usize] as usize];
                v = parent[v as usize];
            }
            v
        }
        for i in 0..self.n {
            for (j, _) in self.neighbors(i) {
                let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                if a != b {
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    parent[hi as usize] = lo;
                }
            }
        }
        let mut labels = vec![u32::MAX; self.n];
        let mut count = 0usize;
        for v in 0..self.n {
            let root = find(&mut parent, v as u32) as usize;
            if labels[root] == u32::MAX {
                labels[root] = count as u32;
                count += 1;
            }
            labels[v] = labels[root];
        }
        ComponentLabels { count, labels }
    }

    /// Upper bound on the largest Laplacian eigenvalue: twice the maximum
    /// weighted degree.
    pub fn lambda_max_bound(&self) -> f64 {
        2.0 * self.degrees.iter().cloned().fold(0.0, f64::max)
    }
}

/// Builds the symmetrized K-nearest-neighbor graph of a frame.
///
/// Every vertex contributes edges to its `k` nearest neighbors (exact,
/// integer-lattice distances; ties to the smaller index); the union of the
/// directed lists is taken, and each kept edge gets weight `1/d`.
pub fn build_knn_graph(frame: &VoxelFrame, k: usize) -> Result<VoxelGraph, GraphError> {
    if k == 0 {
        return Err(GraphError::InvalidK { k });
    }
    let n = frame.len();
    if n == 0 {
        return Err(GraphError::EmptyFrame);
    }
    let voxels = frame.voxels();
    let index: HashMap<u64, u32> =
        (0..n).map(|i| (frame.morton_key(i), i as u32)).collect();

    use rayon::prelude::*;
    let neighbor_lists: Vec<Vec<(u64, u32)>> = (0..n)
        .into_par_iter()
        .map(|i| knn_of(i, voxels, &index, k, frame.grid().cells_per_axis()))
        .collect();

    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(n * k);
    for (i, list) in neighbor_lists.iter().enumerate() {
        for &(_, j) in list {
            let (a, b) = if (i as u32) < j { (i as u32, j) } else { (j, i as u32) };
            edges.push((a, b));
        }
    }
    edges.sort_unstable();
    edges.dedup();

    let weighted = edges.into_iter().map(|(a, b)| {
        let d2 = dist2(voxels[a as usize], voxels[b as usize]);
        (a, b, 1.0 / (d2 as f64).sqrt())
    });
    VoxelGraph::from_edges(n, weighted)
}

#[inline]
fn dist2(a: [u32; 3], b: [u32; 3]) -> u64 {
    let mut acc = 0u64;
    for t in 0..3 {
        let d = i64::from(a[t]) - i64::from(b[t]);
        acc += (d * d) as u64;
    }
    acc
}

/// K nearest neighbors of vertex `i` by expanding Chebyshev shells around
/// its voxel, falling back to a linear scan when the shell volume exceeds
/// the vertex count.
fn knn_of(
    i: usize,
    voxels: &[[u32; 3]],
    index: &HashMap<u64, u32>,
    k: usize,
    cells: u32,
) -> Vec<(u64, u32)> {
    use std::collections::BinaryHeap;

    let v = voxels[i];
    // Max-heap of (d², j): the root is the current worst candidate, and the
    // tuple order breaks distance ties toward smaller vertex indices.
    let mut heap: BinaryHeap<(u64, u32)> = BinaryHeap::with_capacity(k + 1);
    let consider = |j: u32, heap: &mut BinaryHeap<(u64, u32)>| {
        if j as usize == i {
            return;
        }
        let d2 = dist2(v, voxels[j as usize]);
        if heap.len() < k {
            heap.push((d2, j));
        } else if let Some(&worst) = heap.peek() {
            if (d2, j) < worst {
                heap.pop();
                heap.push((d2, j));
            }
        }
    };

    let max_shell = cells as i64; // beyond this every cell is out of range
    let mut shell = 1i64;
    loop {
        // Shell volume heuristic: when scanning the cube surface costs more
        // than scanning all vertices, brute force wins.
        let cube = (2 * shell + 1).pow(3) as usize;
        if cube > voxels.len() {
            let mut brute: Vec<(u64, u32)> = (0..voxels.len() as u32)
                .filter(|&j| j as usize != i)
                .map(|j| (dist2(v, voxels[j as usize]), j))
                .collect();
            brute.sort_unstable();
            brute.truncate(k);
            return brute;
        }
        for (dx, dy, dz) in shell_offsets(shell) {
            let x = v[0] as i64 + dx;
            let y = v[1] as i64 + dy;
            let z = v[2] as i64 + dz;
            if x < 0 || y < 0 || z < 0 || x >= cells as i64 || y >= cells as i64 || z >= cells as i64
            {
                continue;
            }
            let key = crate::morton::encode(x as u32, y as u32, z as u32);
            if let Some(&j) = index.get(&key) {
                consider(j, &mut heap);
            }
        }
        // Cells in shell s+1 are at distance² ≥ (s+1)². Stop only when the
        // current worst is strictly closer: an equal-distance candidate in
        // the next shell could still win its index tie-break.
        if heap.len() == k {
            let worst = heap.peek().expect("heap non-empty").0;
            let next_min = ((shell + 1) * (shell + 1)) as u64;
            if worst < next_min {
                break;
            }
        }
        shell += 1;
        if shell > max_shell {
            break; // fewer than k vertices reachable (tiny frames)
        }
    }
    let mut list = heap.into_sorted_vec();
    list.truncate(k);
    list
}

/// Integer offsets of the cube surface at Chebyshev radius `s`.
fn shell_offsets(s: i64) -> impl Iterator<Item = (i64, i64, i64)> {
    let faces = (-s..=s).flat_map(move |a| {
        (-s..=s).flat_map(move |b| [(s, a, b), (-s, a, b)])
    });
    let edges_y = (-s + 1..s).flat_map(move |a| {
        (-s..=s).flat_map(move |b| [(a, s, b), (a, -s, b)])
    });
    let edges_z = (-s + 1..s).flat_map(move |a| {
        (-s + 1..s).flat_map(move |b| [(a, b, s), (a, b, -s)])
    });
    faces.chain(edges_y).chain(edges_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{RawPointCloud, VoxelGrid};

    fn frame_of(voxels: &[[u32; 3]], depth: u32) -> VoxelFrame {
        let grid = VoxelGrid::new([0.0; 3], 1.0, depth).unwrap();
        let points: Vec<[f64; 3]> = voxels
            .iter()
            .map(|v| [v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5])
            .collect();
        let colors = vec![[0u8; 3]; points.len()];
        crate::voxel::voxelize(&RawPointCloud::new(points, colors).unwrap(), &grid).unwrap()
    }

    #[test]
    fn two_voxels_single_edge() {
        let frame = frame_of(&[[0, 0, 0], [3, 0, 0]], 3);
        let g = build_knn_graph(&frame, 2).unwrap();
        assert_eq!(g.vertex_count(), 2);
        assert_eq!(g.edge_count(), 1);
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges.len(), 1);
        let (i, j, w) = edges[0];
        assert_eq!((i, j), (0, 1));
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(g.components().count, 1);
    }

    #[test]
    fn symmetrization_is_union_not_intersection() {
        // Three collinear voxels with k=1: the middle one is nearest to both
        // ends, but each end picks only the middle. Union keeps both edges.
        let frame = frame_of(&[[0, 0, 0], [2, 0, 0], [5, 0, 0]], 3);
        let g = build_knn_graph(&frame, 1).unwrap();
        let edges: Vec<_> = g.edges().map(|(i, j, _)| (i, j)).collect();
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn knn_matches_brute_force_on_random_sets() {
        // 200 pseudorandom voxels at depth 6; the shell search must agree
        // with an exhaustive scan, including index tie-breaks.
        let mut state = 2024u64;
        let mut voxels = Vec::new();
        for _ in 0..200 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            voxels.push([
                (state >> 10) as u32 & 63,
                (state >> 25) as u32 & 63,
                (state >> 45) as u32 & 63,
            ]);
        }
        let frame = frame_of(&voxels, 6);
        let vx = frame.voxels();
        let n = frame.len();
        let k = 7;
        let index: HashMap<u64, u32> = (0..n).map(|i| (frame.morton_key(i), i as u32)).collect();
        for i in 0..n {
            let fast = knn_of(i, vx, &index, k, 64);
            let mut brute: Vec<(u64, u32)> = (0..n as u32)
                .filter(|&j| j as usize != i)
                .map(|j| (dist2(vx[i], vx[j as usize]), j))
                .collect();
            brute.sort_unstable();
            brute.truncate(k);
            assert_eq!(fast, brute, "vertex {i}");
        }
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let mut state = 12u64;
        let mut voxels = Vec::new();
        for _ in 0..80 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            voxels.push([
                (state >> 10) as u32 & 31,
                (state >> 25) as u32 & 31,
                (state >> 45) as u32 & 31,
            ]);
        }
        let frame = frame_of(&voxels, 5);
        let g = build_knn_graph(&frame, 5).unwrap();
        let ones = vec![1.0; g.vertex_count()];
        let mut out = vec![0.0; g.vertex_count()];
        g.laplacian_apply(&ones, &mut out);
        for v in out {
            assert!(v.abs() < 1e-12);
        }
        // Dense assembly agrees with the operator on a pseudorandom vector.
        let x: Vec<f64> = (0..g.vertex_count()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let mut sparse = vec![0.0; x.len()];
        g.laplacian_apply(&x, &mut sparse);
        let dense = g.laplacian_dense() * nalgebra::DVector::from_column_slice(&x);
        for (a, b) in sparse.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn far_clusters_form_separate_components() {
        let frame = frame_of(&[[0, 0, 0], [1, 0, 0], [60, 60, 60], [60, 60, 61]], 6);
        let g = build_knn_graph(&frame, 1).unwrap();
        let comps = g.components();
        assert_eq!(comps.count, 2);
        assert_eq!(comps.labels[0], comps.labels[1]);
        assert_eq!(comps.labels[2], comps.labels[3]);
        assert_ne!(comps.labels[0], comps.labels[2]);
    }

    #[test]
    fn edge_validation_catches_mistakes() {
        assert!(matches!(
            VoxelGraph::from_edges(3, vec![(0, 0, 1.0)]),
            Err(GraphError::InvalidEdge { .. })
        ));
        assert!(matches!(
            VoxelGraph::from_edges(3, vec![(0, 5, 1.0)]),
            Err(GraphError::InvalidEdge { .. })
        ));
        assert!(matches!(
            VoxelGraph::from_edges(3, vec![(0, 1, 0.0)]),
            Err(GraphError::InvalidWeight { .. })
        ));
        assert!(matches!(
            VoxelGraph::from_edges(3, vec![(0, 1, 1.0), (1, 0, 2.0)]),
            Err(GraphError::DuplicateEdge { i: 0, j: 1 })
        ));
        assert!(matches!(build_knn_graph(&frame_of(&[[0, 0, 0]], 3), 0), Err(GraphError::InvalidK { .. })));
    }

    #[test]
    fn single_vertex_graph_has_no_edges() {
        let frame = frame_of(&[[5, 5, 5]], 4);
        let g = build_knn_graph(&frame, 26).unwrap();
        assert_eq!(g.vertex_count(), 1);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.components().count, 1);
        assert_eq!(g.degree(0), 0.0);
    }

    #[test]
    fn shell_offsets_cover_the_cube_surface_exactly() {
        for s in 1..4i64 {
            let mut offs: Vec<(i64, i64, i64)> = shell_offsets(s).collect();
            offs.sort_unstable();
            let expected_len = ((2 * s + 1).pow(3) - (2 * s - 1).pow(3)) as usize;
            assert_eq!(offs.len(), expected_len, "shell {s} size");
            let dedup_len = {
                let mut d = offs.clone();
                d.dedup();
                d.len()
            };
            assert_eq!(dedup_len, offs.len(), "shell {s} duplicates");
            for &(x, y, z) in &offs {
                assert_eq!(x.abs().max(y.abs()).max(z.abs()), s);
            }
        }
    }
}
