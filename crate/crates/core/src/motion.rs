//! Motion estimation between consecutive voxel frames.
//!
//! The pipeline puts two frames in correspondence and produces a dense,
//! graph-smooth displacement field on the reference frame:
//!
//! 1. **Matching.** Every vertex carries an octant-partitioned wavelet
//!    descriptor ([`crate::sgw`]). Descriptors are compared with a Mahalanobis
//!    score `(a − b)ᵀ P (a − b)` whose precision matrix `P` is learned as a
//!    regularized inverse covariance of descriptor differences over known
//!    correspondences ([`train_precision`]). Matching factors `P = L Lᵀ` once
//!    and whitens all descriptors, turning each score into a squared
//!    Euclidean distance.
//! 2. **Sparse selection.** Target vertices are clustered with k-means in 3D;
//!    each cluster contributes its best-scoring vertex, kept only when the
//!    score beats an acceptance threshold (a per-frame-pair score
//!    percentile). This yields at most one anchor per cluster.
//! 3. **Local confidence.** Each accepted pair gets a 3×3 matrix `M_n`: the
//!    normalized covariance of the 3D offsets of the reference 2-hop
//!    neighborhood, weighted by inverse score excess. Flat score landscapes
//!    produce large (low-confidence) covariances.
//! 4. **Interpolation.** The dense field minimizes
//!    `Σ (v(m) − v_n)ᵀ M_n⁻¹ (v(m) − v_n) + μ Σ_c v_cᵀ L v_c`, i.e. anchored
//!    fitting plus graph-Dirichlet smoothness per coordinate. The normal
//!    equations `(Q + μ·blockdiag(L,L,L)) v = Q v_t` are solved with a
//!    Jacobi-preconditioned conjugate-gradient iteration; components without
//!    anchors stay at zero motion and are reported in the diagnostics.

use crate::graph::VoxelGraph;
use crate::sgw::{compute_all_descriptors, FeatureDescriptor, SgwError, WaveletConfig};
use crate::voxel::{voxelize, RawPointCloud, VoxelFrame};
use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Default smoothness weight μ (edge weights are inverse voxel distances).
pub const DEFAULT_MU: f64 = 1.0;
/// Default acceptance threshold: percentile of the best-score distribution.
pub const DEFAULT_THRESHOLD_PERCENTILE: f64 = 25.0;
/// Default covariance regularization for precision training.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Score excess below which a neighbor is skipped in `M_n` estimation.
const COVARIANCE_SKIP_EXCESS: f64 = 1e-9;
/// Eigenvalue floor for the `M_n` pseudo-inverse, as a fraction of trace.
const PINV_FLOOR_FRACTION: f64 = 1e-8;
/// Conjugate-gradient convergence target, relative to `‖b‖₂`.
const CG_TOLERANCE: f64 = 1e-12;
/// Lloyd iteration cap for k-means.
const KMEANS_MAX_ITERS: usize = 20;
/// Precision-model file magic (includes the format version).
const MODEL_MAGIC: &[u8; 8] = b"DPCCPRE1";

/// Errors from matching, training, and interpolation.
#[derive(Debug, Error)]
pub enum MotionError {
    #[error("descriptor has {got} entries, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("precision training needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("regularization epsilon must be positive and finite")]
    InvalidEpsilon,
    #[error("matrix is not symmetric positive-definite")]
    NotPositiveDefinite,
    #[error("reference frame has no vertices")]
    EmptyReference,
    #[error("frame has {frame} voxels but the graph has {graph} vertices")]
    FrameGraphMismatch { frame: usize, graph: usize },
    #[error("vertex index {index} out of range for {count} vertices")]
    VertexOutOfRange { index: usize, count: usize },
    #[error("smoothness weight mu must be positive and finite")]
    InvalidMu,
    #[error("motion field entries must be finite")]
    NonFiniteField,
    #[error("precision model file is invalid: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sgw(#[from] SgwError),
}

// ---------------------------------------------------------------------------
// Precision model
// ---------------------------------------------------------------------------

/// Learned Mahalanobis metric for descriptor comparison.
///
/// Holds a symmetric positive-definite matrix `P` (the regularized inverse
/// covariance of descriptor differences) together with its Cholesky-derived
/// whitener `W = Lᵀ`, `P = L Lᵀ`, so that
/// `(a − b)ᵀ P (a − b) = ‖W(a − b)‖²`.
#[derive(Clone, Debug)]
pub struct PrecisionModel {
    matrix: DMatrix<f64>,
    whitener: DMatrix<f64>,
    epsilon: f64,
    training_pairs: u64,
    training_id: String,
}

impl PrecisionModel {
    fn from_matrix(
        matrix: DMatrix<f64>,
        epsilon: f64,
        training_pairs: u64,
        training_id: String,
    ) -> Result<Self, MotionError> {
        let dim = matrix.nrows();
        if dim == 0 || matrix.ncols() != dim {
            return Err(MotionError::BadModelFile("matrix is not square".into()));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(MotionError::BadModelFile("non-finite entry".into()));
        }
        let scale = matrix.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-10 * scale {
                    return Err(MotionError::NotPositiveDefinite);
                }
            }
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or(MotionError::NotPositiveDefinite)?;
        let whitener = chol.l().transpose();
        Ok(Self {
            matrix: sym,
            whitener,
            epsilon,
            training_pairs,
            training_id,
        })
    }

    /// The identity metric (plain squared Euclidean matching).
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            whitener: DMatrix::identity(dim, dim),
            epsilon: 0.0,
            training_pairs: 0,
            training_id: "identity".into(),
        }
    }

    /// Descriptor dimension the model was trained for.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The precision matrix `P`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Regularization used at training time.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of training pairs.
    pub fn training_pairs(&self) -> u64 {
        self.training_pairs
    }

    /// Free-form provenance tag of the training set.
    pub fn training_id(&self) -> &str {
        &self.training_id
    }

    /// Maps a descriptor into the whitened space where the Mahalanobis score
    /// is the squared Euclidean norm.
    pub fn whiten(&self, values: &[f64]) -> Result<Vec<f64>, MotionError> {
        let dim = self.dim();
        if values.len() != dim {
            return Err(MotionError::DimensionMismatch {
                got: values.len(),
                expected: dim,
            });
        }
        // w = Lᵀ v; the whitener is upper-triangular.
        let mut out = vec![0.0; dim];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in i..dim {
                acc += self.whitener[(i, j)] * values[j];
            }
            *o = acc;
        }
        Ok(out)
    }

    /// Serializes the model (little-endian header + row-major `P`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MotionError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&self.training_pairs.to_le_bytes())?;
        w.write_all(&self.epsilon.to_le_bytes())?;
        let id = self.training_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                w.write_all(&self.matrix[(i, j)].to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a model written by [`PrecisionModel::save`] and revalidates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MotionError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(MotionError::BadModelFile("bad magic".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 || dim > 1 << 20 {
            return Err(MotionError::BadModelFile(format!("bad dimension {dim}")));
        }
        let training_pairs = read_u64(&mut r)?;
        let epsilon = read_f64(&mut r)?;
        let id_len = read_u32(&mut r)? as usize;
        if id_len > 1 << 16 {
            return Err(MotionError::BadModelFile("oversized id".into()));
        }
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let training_id = String::from_utf8(id)
            .map_err(|_| MotionError::BadModelFile("id is not UTF-8".into()))?;
        let mut matrix = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                matrix[(i, j)] = read_f64(&mut r)?;
            }
        }
        Self::from_matrix(matrix, epsilon, training_pairs, training_id)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, MotionError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, MotionError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, MotionError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Learns a precision matrix from corresponding descriptor pairs:
/// `P = (Cov(a − b) + ε·I)⁻¹`, with the population (1/n) covariance of the
/// mean-centered differences.
pub fn train_precision(
    pairs: &[(Vec<f64>, Vec<f64>)],
    epsilon: f64,
    training_id: &str,
) -> Result<PrecisionModel, MotionError> {
    let n = pairs.len();
    if n < 2 {
        return Err(MotionError::TooFewPairs(n));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(MotionError::InvalidEpsilon);
    }
    let dim = pairs[0].0.len();
    let mut diffs = Vec::with_capacity(n);
    for (a, b) in pairs {
        if a.len() != dim || b.len() != dim {
            return Err(MotionError::DimensionMismatch {
                got: a.len().max(b.len()),
                expected: dim,
            });
        }
        let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
        diffs.push(d);
    }
    let mut mean = vec![0.0; dim];
    for d in &diffs {
        for (m, &x) in mean.iter_mut().zip(d) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for d in &diffs {
        let c: Vec<f64> = d.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
        for i in 0..dim {
            let ci = c[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += ci * c[j];
            }
        }
    }
    let scale = 1.0 / n as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] * scale;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += epsilon;
    }
    let p = cov
        .cholesky()
        .ok_or(MotionError::NotPositiveDefinite)?
        .inverse();
    PrecisionModel::from_matrix(p, epsilon, n as u64, training_id.to_string())
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Mahalanobis matching score `σ(a, b) = (a − b)ᵀ P (a − b)`.
pub fn match_score(a: &[f64], b: &[f64], model: &PrecisionModel) -> Result<f64, MotionError> {
    let dim = model.dim();
    if a.len() != dim || b.len() != dim {
        return Err(MotionError::DimensionMismatch {
            got: a.len().max(b.len()),
            expected: dim,
        });
    }
    let p = model.matrix();
    let mut score = 0.0;
    for i in 0..dim {
        let di = a[i] - b[i];
        if di == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..dim {
            row += p[(i, j)] * (a[j] - b[j]);
        }
        score += di * row;
    }
    Ok(score)
}

/// Best reference match for one target descriptor: exhaustive argmin of the
/// Mahalanobis score, ties broken toward the smaller vertex index (vertex
/// order is Morton order).
pub fn best_match(
    target: &FeatureDescriptor,
    reference: &[FeatureDescriptor],
    model: &PrecisionModel,
) -> Result<(usize, f64), MotionError> {
    if reference.is_empty() {
        return Err(MotionError::EmptyReference);
    }
    let mut best = (0usize, f64::INFINITY);
    for (m, desc) in reference.iter().enumerate() {
        let s = match_score(desc.values(), target.values(), model)?;
        if s < best.1 {
            best = (m, s);
        }
    }
    Ok(best)
}

/// Descriptors mapped through a model's whitener, stored row-major.
#[derive(Clone, Debug)]
pub struct WhitenedDescriptors {
    dim: usize,
    data: Vec<f64>,
}

impl WhitenedDescriptors {
    /// Whitens a full descriptor table.
    pub fn new(
        model: &PrecisionModel,
        descriptors: &[FeatureDescriptor],
    ) -> Result<Self, MotionError> {
        let dim = model.dim();
        let rows: Result<Vec<Vec<f64>>, MotionError> = descriptors
            .par_iter()
            .map(|d| model.whiten(d.values()))
            .collect();
        let mut data = Vec::with_capacity(dim * descriptors.len());
        for row in rows? {
            data.extend_from_slice(&row);
        }
        Ok(Self { dim, data })
    }

    /// Number of descriptors.
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    /// True when empty.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Whitened row for vertex `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// One target vertex's best reference match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestMatch {
    /// Reference vertex index.
    pub reference: usize,
    /// Mahalanobis score of the match.
    pub score: f64,
}

fn nearest_row(wref: &WhitenedDescriptors, target_row: &[f64]) -> BestMatch {
    let mut best = BestMatch {
        reference: 0,
        score: f64::INFINITY,
    };
    for m in 0..wref.len() {
        let row = wref.row(m);
        let mut acc = 0.0;
        for (&x, &y) in row.iter().zip(target_row) {
            let d = x - y;
            acc += d * d;
            if acc >= best.score {
                break;
            }
        }
        if acc < best.score {
            best = BestMatch {
                reference: m,
                score: acc,
            };
        }
    }
    best
}

/// Best reference match for every target vertex, computed in the whitened
/// space (exactly the Mahalanobis argmin, ties toward smaller index).
pub fn match_frames(
    reference: &WhitenedDescriptors,
    target: &WhitenedDescriptors,
) -> Result<Vec<BestMatch>, MotionError> {
    if reference.is_empty() {
        return Err(MotionError::EmptyReference);
    }
    if reference.dim != target.dim {
        return Err(MotionError::DimensionMismatch {
            got: target.dim,
            expected: reference.dim,
        });
    }
    Ok((0..target.len())
        .into_par_iter()
        .map(|n| nearest_row(reference, target.row(n)))
        .collect())
}

// ---------------------------------------------------------------------------
// Sparse correspondence selection
// ---------------------------------------------------------------------------

/// An accepted correspondence with its local confidence matrix.
#[derive(Clone, Debug)]
pub struct Correspondence {
    /// Reference vertex `m_n`.
    pub reference: usize,
    /// Target vertex `n`.
    pub target: usize,
    /// Match score `σ(m_n, n)`.
    pub score: f64,
    /// `p_target(n) − p_reference(m_n)` in grid units.
    pub displacement: [f64; 3],
    /// Offset covariance `M_n` (PSD; zero means "no fitting force").
    pub covariance: Matrix3<f64>,
}

/// The sparse anchor set driving motion interpolation. Each target vertex
/// appears at most once.
#[derive(Clone, Debug, Default)]
pub struct SparseCorrespondences {
    pairs: Vec<Correspondence>,
}

impl SparseCorrespondences {
    /// Builds directly from pairs (used by tests and tools).
    pub fn from_pairs(pairs: Vec<Correspondence>) -> Self {
        Self { pairs }
    }

    /// Accepted pairs, ordered by target vertex.
    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    /// Number of accepted pairs.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// True when no pair was accepted.
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn pairs_mut(&mut self) -> &mut [Correspondence] {
        &mut self.pairs
    }
}

/// Deterministic k-means on 3D points: farthest-point initialization seeded
/// at vertex 0 (the Morton-first vertex), at most 20 Lloyd iterations, all
/// ties broken toward smaller indices. Returns per-point cluster labels.
fn kmeans_labels(points: &[[f64; 3]], k: usize) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let d2 = |a: [f64; 3], b: [f64; 3]| -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        dx * dx + dy * dy + dz * dz
    };
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
    centers.push(points[0]);
    let mut nearest: Vec<f64> = points.iter().map(|&p| d2(p, centers[0])).collect();
    while centers.len() < k {
        let (mut arg, mut best) = (0usize, -1.0f64);
        for (i, &dist) in nearest.iter().enumerate() {
            if dist > best {
                best = dist;
                arg = i;
            }
        }
        let c = points[arg];
        centers.push(c);
        for (dist, &p) in nearest.iter_mut().zip(points) {
            let d = d2(p, c);
            if d < *dist {
                *dist = d;
            }
        }
    }
    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, &p) in points.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (c, &center) in centers.iter().enumerate() {
                let d = d2(p, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if labels[i] != best.0 {
                labels[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (&label, &p) in labels.iter().zip(points) {
            for t in 0..3 {
                sums[label][t] += p[t];
            }
            counts[label] += 1;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                for t in 0..3 {
                    center[t] = sums[c][t] / counts[c] as f64;
                }
            }
            // Empty clusters keep their previous center.
        }
    }
    labels
}

/// Selects sparse correspondences: k-means clusters over target coordinates,
/// one representative per cluster (the member with the lowest best-match
/// score, ties toward smaller target index), accepted only when the score is
/// strictly below `tau`. Covariances are left at zero; see
/// [`estimate_offset_covariance`].
pub fn select_sparse(
    reference: &VoxelFrame,
    target: &VoxelFrame,
    matches: &[BestMatch],
    clusters: usize,
    tau: f64,
) -> Result<SparseCorrespondences, MotionError> {
    if matches.len() != target.len() {
        return Err(MotionError::DimensionMismatch {
            got: matches.len(),
            expected: target.len(),
        });
    }
    if target.is_empty() {
        return Ok(SparseCorrespondences::default());
    }
    let labels = kmeans_labels(&target.positions(), clusters);
    let k = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut reps: Vec<Option<usize>> = vec![None; k];
    for (n, &label) in labels.iter().enumerate() {
        let better = match reps[label] {
            None => true,
            Some(cur) => matches[n].score < matches[cur].score,
        };
        if better {
            reps[label] = Some(n);
        }
    }
    let mut pairs = Vec::new();
    for rep in reps.into_iter().flatten() {
        let bm = matches[rep];
        if !(bm.score < tau) {
            continue;
        }
        if bm.reference >= reference.len() {
            return Err(MotionError::VertexOutOfRange {
                index: bm.reference,
                count: reference.len(),
            });
        }
        let pt = target.position(rep);
        let pr = reference.position(bm.reference);
        pairs.push(Correspondence {
            reference: bm.reference,
            target: rep,
            score: bm.score,
            displacement: [pt[0] - pr[0], pt[1] - pr[1], pt[2] - pr[2]],
            covariance: Matrix3::zeros(),
        });
    }
    pairs.sort_by_key(|p| p.target);
    Ok(SparseCorrespondences { pairs })
}

/// Nearest-rank percentile of the best-score distribution, used as the
/// acceptance threshold τ.
pub fn score_percentile(matches: &[BestMatch], percentile: f64) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let mut scores: Vec<f64> = matches.iter().map(|m| m.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let q = (percentile / 100.0).clamp(0.0, 1.0);
    let rank = ((q * scores.len() as f64).ceil() as usize).max(1) - 1;
    scores[rank.min(scores.len() - 1)]
}

// ---------------------------------------------------------------------------
// Offset covariance
// ---------------------------------------------------------------------------

/// Unique 2-hop neighborhood of `center` (center excluded).
fn two_hop_neighborhood(graph: &VoxelGraph, center: usize) -> Vec<usize> {
    let mut seen = vec![false; graph.vertex_count()];
    seen[center] = true;
    let mut out = Vec::new();
    let mut frontier = Vec::new();
    for (j, _) in graph.neighbors(center) {
        if !seen[j] {
            seen[j] = true;
            out.push(j);
            frontier.push(j);
        }
    }
    for &j in &frontier {
        for (l, _) in graph.neighbors(j) {
            if !seen[l] {
                seen[l] = true;
                out.push(l);
            }
        }
    }
    out
}

/// Estimates the offset covariance `M_n` of a match `(m_n, n)`:
///
/// `M_n = (1/|N²|) Σ_{m ∈ N²(m_n)} (Δp Δpᵀ) / (σ(m, n) − σ(m_n, n))`
///
/// where `Δp = p(m) − p(m_n)` over the reference 2-hop neighborhood, and
/// terms whose score excess is ≤ 1e−9 (including any negative excess) are
/// skipped while still counting toward the `1/|N²|` normalization. Returns
/// the matrix and the number of skipped terms; an empty or fully skipped
/// neighborhood yields the zero matrix.
pub fn estimate_offset_covariance(
    reference: &VoxelFrame,
    graph: &VoxelGraph,
    whitened_reference: &WhitenedDescriptors,
    whitened_target_row: &[f64],
    m_n: usize,
    best_score: f64,
) -> Result<(Matrix3<f64>, usize), MotionError> {
    if reference.len() != graph.vertex_count() {
        return Err(MotionError::FrameGraphMismatch {
            frame: reference.len(),
            graph: graph.vertex_count(),
        });
    }
    if m_n >= reference.len() {
        return Err(MotionError::VertexOutOfRange {
            index: m_n,
            count: reference.len(),
        });
    }
    let hood = two_hop_neighborhood(graph, m_n);
    if hood.is_empty() {
        return Ok((Matrix3::zeros(), 0));
    }
    let p0 = reference.position(m_n);
    let mut acc = Matrix3::zeros();
    let mut skipped = 0usize;
    for &m in &hood {
        let row = whitened_reference.row(m);
        let mut score = 0.0;
        for (&x, &y) in row.iter().zip(whitened_target_row) {
            let d = x - y;
            score += d * d;
        }
        let excess = score - best_score;
        if excess <= COVARIANCE_SKIP_EXCESS {
            skipped += 1;
            continue;
        }
        let p = reference.position(m);
        let dp = Vector3::new(p[0] - p0[0], p[1] - p0[1], p[2] - p0[2]);
        acc += dp * dp.transpose() / excess;
    }
    Ok((acc / hood.len() as f64, skipped))
}

/// Eigen-pseudo-inverse of a symmetric PSD 3×3 matrix, flooring eigenvalues
/// below `1e−8 · trace` to zero (so a zero or near-singular direction
/// contributes no fitting force).
pub fn pseudo_inverse_psd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let trace = m.trace();
    if !(trace > 0.0) {
        return Matrix3::zeros();
    }
    let floor = PINV_FLOOR_FRACTION * trace;
    let eig = nalgebra::SymmetricEigen::new(*m);
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        let lam = eig.eigenvalues[i];
        if lam > floor {
            let v = eig.eigenvectors.column(i);
            out += v * v.transpose() / lam;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Dense interpolation
// ---------------------------------------------------------------------------

/// Dense per-reference-vertex displacement field.
///
/// Stored as the stacked optimization vector: all x components, then all y,
/// then all z (`3N` entries total).
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    n: usize,
    stacked: Vec<f64>,
}

impl MotionField {
    /// The zero field on `n` vertices.
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            stacked: vec![0.0; 3 * n],
        }
    }

    /// Wraps a stacked vector (`3N` finite entries, x/y/z blocks).
    pub fn from_stacked(stacked: Vec<f64>) -> Result<Self, MotionError> {
        if stacked.len() % 3 != 0 {
            return Err(MotionError::DimensionMismatch {
                got: stacked.len(),
                expected: stacked.len() / 3 * 3,
            });
        }
        if stacked.iter().any(|x| !x.is_finite()) {
            return Err(MotionError::NonFiniteField);
        }
        Ok(Self {
            n: stacked.len() / 3,
            stacked,
        })
    }

    /// Number of vertices.
    pub fn len(&self) -> usize {
        self.n
    }

    /// True when the field covers no vertices.
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// The stacked coordinate-block vector.
    pub fn stacked(&self) -> &[f64] {
        &self.stacked
    }

    /// Displacement of vertex `i`.
    pub fn vector(&self, i: usize) -> [f64; 3] {
        [
            self.stacked[i],
            self.stacked[self.n + i],
            self.stacked[2 * self.n + i],
        ]
    }

    /// Graph-Dirichlet energy `Σ_c v_cᵀ L v_c` of the field.
    pub fn dirichlet_energy(&self, graph: &VoxelGraph) -> f64 {
        let n = self.n;
        let mut tmp = vec![0.0; n];
        let mut total = 0.0;
        for c in 0..3 {
            let block = &self.stacked[c * n..(c + 1) * n];
            graph.laplacian_apply(block, &mut tmp);
            total += block.iter().zip(&tmp).map(|(&x, &y)| x * y).sum::<f64>();
        }
        total
    }
}

/// Interpolation result with solver diagnostics.
#[derive(Clone, Debug)]
pub struct MotionInterpolation {
    /// The dense field.
    pub field: MotionField,
    /// Connected components that contained no anchor (their motion is zero).
    pub unanchored_components: usize,
    /// Conjugate-gradient iterations used.
    pub iterations: usize,
    /// Final relative residual `‖Av − b‖ / ‖b‖` (0 for a zero system).
    pub relative_residual: f64,
}

/// Interpolates a dense motion field from sparse anchors by minimizing
/// anchored fitting energy plus `μ ×` graph-Dirichlet smoothness:
///
/// `(Q + μ·blockdiag(L, L, L)) v = Q v_t`
///
/// with `Q` block-diagonal holding `M_n⁻¹` (pseudo-inverse) at each anchor —
/// anchors sharing a reference vertex accumulate additively — and `v_t` the
/// sparse displacement vectors. The system is solved with Jacobi-
/// preconditioned conjugate gradients to a `1e−12` relative residual target;
/// components without anchors have a zero right-hand side and therefore stay
/// at zero motion.
pub fn interpolate_motion(
    graph: &VoxelGraph,
    sparse: &SparseCorrespondences,
    mu: f64,
) -> Result<MotionInterpolation, MotionError> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(MotionError::InvalidMu);
    }
    let n = graph.vertex_count();
    for pair in sparse.pairs() {
        if pair.reference >= n {
            return Err(MotionError::VertexOutOfRange {
                index: pair.reference,
                count: n,
            });
        }
    }
    // Assemble Q (per-vertex 3×3 blocks) and b = Q v_t.
    let mut q: HashMap<usize, Matrix3<f64>> = HashMap::new();
    let mut b = vec![0.0; 3 * n];
    for pair in sparse.pairs() {
        let inv = pseudo_inverse_psd(&pair.covariance);
        if inv == Matrix3::zeros() {
            continue;
        }
        let m = pair.reference;
        *q.entry(m).or_insert_with(Matrix3::zeros) += inv;
        let rhs = inv * Vector3::from(pair.displacement);
        for c in 0..3 {
            b[c * n + m] += rhs[c];
        }
    }
    // Count components without any anchoring force.
    let comps = graph.components();
    let mut anchored = vec![false; comps.count];
    for &m in q.keys() {
        anchored[comps.labels[m] as usize] = true;
    }
    let unanchored_components = anchored.iter().filter(|&&a| !a).count();

    let bnorm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok(MotionInterpolation {
            field: MotionField::zero(n),
            unanchored_components,
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    // A·x and the Jacobi diagonal.
    let apply_a = |x: &[f64], out: &mut [f64]| {
        for c in 0..3 {
            let (src, dst) = (&x[c * n..(c + 1) * n], &mut out[c * n..(c + 1) * n]);
            graph.laplacian_apply(src, dst);
            for v in dst.iter_mut() {
                *v *= mu;
            }
        }
        for (&m, block) in &q {
            let xm = Vector3::new(x[m], x[n + m], x[2 * n + m]);
            let ym = block * xm;
            for c in 0..3 {
                out[c * n + m] += ym[c];
            }
        }
    };
    let mut diag = vec![0.0; 3 * n];
    for v in 0..n {
        let d = mu * graph.degree(v);
        for c in 0..3 {
            diag[c * n + v] = d;
        }
    }
    for (&m, block) in &q {
        for c in 0..3 {
            diag[c * n + m] += block[(c, c)];
        }
    }
    let precondition = |r: &[f64], z: &mut [f64]| {
        for ((z, &r), &d) in z.iter_mut().zip(r).zip(&diag) {
            *z = if d > 0.0 { r / d } else { r };
        }
    };

    // Preconditioned conjugate gradients from x = 0.
    let dim = 3 * n;
    let max_iters = 10 * dim + 50;
    let mut x = vec![0.0; dim];
    let mut r = b.clone();
    let mut z = vec![0.0; dim];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; dim];
    let mut rz: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
    let target = CG_TOLERANCE * bnorm;
    let mut iterations = 0usize;
    while iterations < max_iters {
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= target {
            break;
        }
        apply_a(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(&a, &b)| a * b).sum();
        if !(pap > 0.0) {
            // Singular direction: the Krylov space has been exhausted within
            // the range of A; the current iterate is the consistent solution.
            break;
        }
        let alpha = rz / pap;
        for ((x, &p), (r, &ap)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
            *x += alpha * p;
            *r -= alpha * ap;
        }
        precondition(&r, &mut z);
        let rz_next: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for (p, &z) in p.iter_mut().zip(&z) {
            *p = z + beta * *p;
        }
        iterations += 1;
    }
    apply_a(&x, &mut ap);
    let residual = ap
        .iter()
        .zip(&b)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(MotionInterpolation {
        field: MotionField::from_stacked(x)?,
        unanchored_components,
        iterations,
        relative_residual: residual / bnorm,
    })
}

// ---------------------------------------------------------------------------
// End-to-end estimation
// ---------------------------------------------------------------------------

/// Tunables for [`estimate_motion`].
#[derive(Clone, Copy, Debug)]
pub struct MotionParams {
    /// K-means cluster count; 0 selects `max(1, target_vertices / 10)`.
    pub clusters: usize,
    /// Acceptance threshold percentile of the best-score distribution.
    pub threshold_percentile: f64,
    /// Smoothness weight μ.
    pub mu: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            clusters: 0,
            threshold_percentile: DEFAULT_THRESHOLD_PERCENTILE,
            mu: DEFAULT_MU,
        }
    }
}

/// A complete motion estimate with the evidence that produced it.
#[derive(Clone, Debug)]
pub struct MotionEstimate {
    /// Dense displacement field on the reference frame.
    pub field: MotionField,
    /// Accepted sparse correspondences (covariances filled in).
    pub sparse: SparseCorrespondences,
    /// Acceptance threshold τ actually used.
    pub tau: f64,
    /// Components of the reference graph without anchors (zero motion).
    pub unanchored_components: usize,
    /// Conjugate-gradient iterations.
    pub iterations: usize,
    /// Final relative residual of the interpolation solve.
    pub relative_residual: f64,
    /// Neighbors skipped during covariance estimation (flat score excess).
    pub skipped_covariance_terms: usize,
}

/// Runs the full pipeline between a reference and a target frame: descriptor
/// computation, whitened matching, threshold + cluster selection, offset
/// covariances, and dense interpolation.
pub fn estimate_motion(
    reference: &VoxelFrame,
    reference_graph: &VoxelGraph,
    target: &VoxelFrame,
    target_graph: &VoxelGraph,
    model: &PrecisionModel,
    wavelets: &WaveletConfig,
    params: &MotionParams,
) -> Result<MotionEstimate, MotionError> {
    if reference.is_empty() {
        return Err(MotionError::EmptyReference);
    }
    if model.dim() != wavelets.descriptor_len() {
        return Err(MotionError::DimensionMismatch {
            got: wavelets.descriptor_len(),
            expected: model.dim(),
        });
    }
    let ref_desc = compute_all_descriptors(reference, reference_graph, wavelets)?;
    let tgt_desc = compute_all_descriptors(target, target_graph, wavelets)?;
    let wref = WhitenedDescriptors::new(model, &ref_desc)?;
    let wtgt = WhitenedDescriptors::new(model, &tgt_desc)?;
    let matches = match_frames(&wref, &wtgt)?;
    let tau = score_percentile(&matches, params.threshold_percentile);
    let clusters = if params.clusters == 0 {
        (target.len() / 10).max(1)
    } else {
        params.clusters
    };
    let mut sparse = select_sparse(reference, target, &matches, clusters, tau)?;
    let covs: Result<Vec<(Matrix3<f64>, usize)>, MotionError> = sparse
        .pairs()
        .par_iter()
        .map(|pair| {
            estimate_offset_covariance(
                reference,
                reference_graph,
                &wref,
                wtgt.row(pair.target),
                pair.reference,
                pair.score,
            )
        })
        .collect();
    let covs = covs?;
    let mut skipped_covariance_terms = 0;
    for (pair, (cov, skipped)) in sparse.pairs_mut().iter_mut().zip(&covs) {
        pair.covariance = *cov;
        skipped_covariance_terms += *skipped;
    }
    let solved = interpolate_motion(reference_graph, &sparse, params.mu)?;
    Ok(MotionEstimate {
        field: solved.field,
        sparse,
        tau,
        unanchored_components: solved.unanchored_components,
        iterations: solved.iterations,
        relative_residual: solved.relative_residual,
        skipped_covariance_terms,
    })
}

/// Builds ground-truth training pairs for [`train_precision`] by rigidly
/// translating a frame (in grid units), re-voxelizing on the same grid, and
/// pairing descriptors of unambiguously mapped voxels. Non-integer offsets
/// exercise re-quantization noise, which is exactly what the metric must be
/// robust to.
pub fn synthesize_training_pairs(
    frame: &VoxelFrame,
    graph: &VoxelGraph,
    wavelets: &WaveletConfig,
    knn: usize,
    offsets: &[[f64; 3]],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, MotionError> {
    use crate::graph::build_knn_graph;

    let ref_desc = compute_all_descriptors(frame, graph, wavelets)?;
    let grid = frame.grid().clone();
    let mut pairs = Vec::new();
    for t in offsets {
        let mut points = Vec::with_capacity(frame.len());
        let mut colors = Vec::with_capacity(frame.len());
        let mut sources = Vec::with_capacity(frame.len());
        for i in 0..frame.len() {
            let p = frame.position(i);
            let world = grid.to_world([p[0] + t[0], p[1] + t[1], p[2] + t[2]]);
            if grid.cell_of(world).is_none() {
                continue;
            }
            let c = frame.colors()[i];
            points.push(world);
            colors.push([
                c[0].round().clamp(0.0, 255.0) as u8,
                c[1].round().clamp(0.0, 255.0) as u8,
                c[2].round().clamp(0.0, 255.0) as u8,
            ]);
            sources.push(i);
        }
        if points.len() < 2 {
            continue;
        }
        let cloud = RawPointCloud::new(points.clone(), colors)
            .map_err(|e| MotionError::BadModelFile(format!("training cloud: {e}")))?;
        let moved = voxelize(&cloud, &grid)
            .map_err(|e| MotionError::BadModelFile(format!("training frame: {e}")))?;
        let moved_graph = build_knn_graph(&moved, knn)
            .map_err(|e| MotionError::BadModelFile(format!("training graph: {e}")))?;
        let moved_desc = compute_all_descriptors(&moved, &moved_graph, wavelets)?;
        // Map each source vertex to the voxel its center landed in; voxels
        // receiving more than one source are ambiguous and dropped.
        let mut key_to_index: HashMap<u64, usize> = HashMap::new();
        for j in 0..moved.len() {
            key_to_index.insert(moved.morton_key(j), j);
        }
        let mut hits: HashMap<usize, usize> = HashMap::new();
        let mut mapping = Vec::new();
        for (&src, world) in sources.iter().zip(&points) {
            let Some(cell) = grid.cell_of(*world) else {
                continue;
            };
            let key = crate::morton::encode(cell[0], cell[1], cell[2]);
            let Some(&j) = key_to_index.get(&key) else {
                continue;
            };
            *hits.entry(j).or_insert(0) += 1;
            mapping.push((src, j));
        }
        for (src, j) in mapping {
            if hits[&j] == 1 {
                pairs.push((
                    ref_desc[src].values().to_vec(),
                    moved_desc[j].values().to_vec(),
                ));
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_knn_graph;
    use crate::sgw::estimate_lambda_max;
    use crate::voxel::VoxelGrid;

    fn lcg(state: &mut u64) -> u64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        *state
    }

    fn unit(state: &mut u64) -> f64 {
        (lcg(state) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn random_frame(n: usize, depth: u32, seed: u64) -> VoxelFrame {
        let side = 1u64 << depth;
        let mut state = seed;
        let mut seen = std::collections::HashSet::new();
        let mut points = Vec::new();
        let mut colors = Vec::new();
        while points.len() < n {
            let x = (lcg(&mut state) >> 33) % side;
            let y = (lcg(&mut state) >> 33) % side;
            let z = (lcg(&mut state) >> 33) % side;
            let r = (lcg(&mut state) >> 33) % 256;
            let g = (lcg(&mut state) >> 33) % 256;
            let b = (lcg(&mut state) >> 33) % 256;
            if !seen.insert((x, y, z)) {
                continue;
            }
            points.push([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]);
            colors.push([r as u8, g as u8, b as u8]);
        }
        let grid = VoxelGrid::new([0.0; 3], 1.0, depth).unwrap();
        voxelize(&RawPointCloud::new(points, colors).unwrap(), &grid).unwrap()
    }

    #[test]
    fn match_score_is_a_quadratic_form() {
        let model = PrecisionModel::identity(6);
        let a = vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0];
        let b = vec![0.0; 6];
        assert_eq!(match_score(&a, &b, &model).unwrap(), 25.0);
        assert_eq!(match_score(&a, &a, &model).unwrap(), 0.0);
        assert_eq!(
            match_score(&a, &b, &model).unwrap(),
            match_score(&b, &a, &model).unwrap()
        );
        assert!(match_score(&a, &[1.0], &model).is_err());
    }

    #[test]
    fn match_score_matches_triple_loop_oracle() {
        // Train a small real model, then check the quadratic form against a
        // naive Σᵢⱼ dᵢ Pᵢⱼ dⱼ evaluation.
        let mut state = 77u64;
        let dim = 5;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..40)
            .map(|_| {
                let a: Vec<f64> = (0..dim).map(|_| unit(&mut state) * 4.0).collect();
                let b: Vec<f64> = a.iter().map(|&x| x + unit(&mut state) - 0.5).collect();
                (a, b)
            })
            .collect();
        let model = train_precision(&pairs, 1e-3, "oracle").unwrap();
        let a: Vec<f64> = (0..dim).map(|_| unit(&mut state) * 2.0).collect();
        let b: Vec<f64> = (0..dim).map(|_| unit(&mut state) * 2.0).collect();
        let got = match_score(&a, &b, &model).unwrap();
        let p = model.matrix();
        let mut want = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                want += (a[i] - b[i]) * p[(i, j)] * (a[j] - b[j]);
            }
        }
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        // Whitened distance agrees with the quadratic form.
        let wa = model.whiten(&a).unwrap();
        let wb = model.whiten(&b).unwrap();
        let wd: f64 = wa.iter().zip(&wb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        assert!((got - wd).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn train_precision_identity_and_scalar_cases() {
        // All-zero differences with ε = 1 invert to the identity.
        let zeros = vec![(vec![1.0, 2.0], vec![1.0, 2.0]); 5];
        let model = train_precision(&zeros, 1.0, "zeros").unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((model.matrix()[(i, j)] - want).abs() < 1e-12);
            }
        }
        // 1-D differences {2, -2} have population variance 4 → P ≈ 1/4.
        let scalar = vec![(vec![2.0], vec![0.0]), (vec![-2.0], vec![0.0])];
        let model = train_precision(&scalar, 1e-4, "scalar").unwrap();
        assert!((model.matrix()[(0, 0)] - 0.25).abs() < 1e-3);
        assert!(train_precision(&scalar[..1], 1e-4, "x").is_err());
        assert!(train_precision(&scalar, 0.0, "x").is_err());
    }

    #[test]
    fn train_precision_matches_independent_inversion() {
        let mut state = 3u64;
        let dim = 8;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..60)
            .map(|_| {
                let a: Vec<f64> = (0..dim).map(|_| unit(&mut state) * 10.0).collect();
                let b: Vec<f64> = a
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| x + (unit(&mut state) - 0.5) * (1.0 + k as f64))
                    .collect();
                (a, b)
            })
            .collect();
        let eps = 1e-4;
        let model = train_precision(&pairs, eps, "rigid").unwrap();
        // Independent path: assemble the covariance the slow way and invert
        // with LU instead of Cholesky.
        let n = pairs.len();
        let diffs: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x - y).collect())
            .collect();
        let mean: Vec<f64> = (0..dim)
            .map(|k| diffs.iter().map(|d| d[k]).sum::<f64>() / n as f64)
            .collect();
        let mut cov = DMatrix::zeros(dim, dim);
        for d in &diffs {
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += (d[i] - mean[i]) * (d[j] - mean[j]) / n as f64;
                }
            }
        }
        for i in 0..dim {
            cov[(i, i)] += eps;
        }
        let want: DMatrix<f64> = cov.try_inverse().unwrap();
        let got = model.matrix();
        let scale = want.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        for i in 0..dim {
            for j in 0..dim {
                assert!(
                    (got[(i, j)] - want[(i, j)]).abs() <= 1e-6 * scale,
                    "P[{i},{j}]"
                );
            }
        }
        // Model invariants: symmetric, PD (Cholesky succeeded at build).
        for i in 0..dim {
            for j in 0..dim {
                assert!((got[(i, j)] - got[(j, i)]).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn model_round_trips_through_file() {
        let pairs = vec![
            (vec![1.0, 0.0], vec![0.5, 0.25]),
            (vec![0.0, 2.0], vec![0.5, 1.0]),
            (vec![3.0, 1.0], vec![2.0, 0.5]),
        ];
        let model = train_precision(&pairs, 0.01, "round-trip-set").unwrap();
        let dir = std::env::temp_dir().join(format!("dpcc-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.bin");
        model.save(&path).unwrap();
        let loaded = PrecisionModel::load(&path).unwrap();
        assert_eq!(loaded.dim(), 2);
        assert_eq!(loaded.training_pairs(), 3);
        assert_eq!(loaded.training_id(), "round-trip-set");
        assert_eq!(loaded.epsilon(), 0.01);
        assert_eq!(loaded.matrix(), model.matrix());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn real_descriptors(
        frame: &VoxelFrame,
        k: usize,
    ) -> (Vec<FeatureDescriptor>, WaveletConfig, VoxelGraph) {
        let graph = build_knn_graph(frame, k).unwrap();
        let cfg = WaveletConfig::auto(estimate_lambda_max(&graph), 2, 2.0, 12).unwrap();
        let desc = compute_all_descriptors(frame, &graph, &cfg).unwrap();
        (desc, cfg, graph)
    }

    #[test]
    fn best_match_agrees_with_whitened_batch_path() {
        let ref_frame = random_frame(60, 4, 41);
        let tgt_frame = random_frame(60, 4, 42);
        let (ref_desc, cfg, _) = real_descriptors(&ref_frame, 5);
        let (tgt_desc, _, _) = {
            let graph = build_knn_graph(&tgt_frame, 5).unwrap();
            let desc = compute_all_descriptors(&tgt_frame, &graph, &cfg).unwrap();
            (desc, (), ())
        };
        let dim = cfg.descriptor_len();
        let mut state = 9u64;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..dim + 5)
            .map(|_| {
                let a: Vec<f64> = (0..dim).map(|_| unit(&mut state) * 3.0).collect();
                let b: Vec<f64> = a.iter().map(|&x| x + unit(&mut state) * 0.1).collect();
                (a, b)
            })
            .collect();
        let model = train_precision(&pairs, 0.05, "agree").unwrap();
        let wref = WhitenedDescriptors::new(&model, &ref_desc).unwrap();
        let wtgt = WhitenedDescriptors::new(&model, &tgt_desc).unwrap();
        let batch = match_frames(&wref, &wtgt).unwrap();
        for (n, bm) in batch.iter().enumerate() {
            let (m, s) = best_match(&tgt_desc[n], &ref_desc, &model).unwrap();
            assert_eq!(m, bm.reference, "target {n}");
            assert!((s - bm.score).abs() <= 1e-6 * s.abs().max(1.0));
        }
    }

    #[test]
    fn identical_descriptor_matches_itself_with_zero_score() {
        let frame = random_frame(40, 4, 8);
        let (desc, _, _) = real_descriptors(&frame, 5);
        let model = PrecisionModel::identity(desc[0].len());
        let wref = WhitenedDescriptors::new(&model, &desc).unwrap();
        let matches = match_frames(&wref, &wref).unwrap();
        for (n, bm) in matches.iter().enumerate() {
            assert_eq!(bm.reference, n);
            assert_eq!(bm.score, 0.0);
        }
        let (m, s) = best_match(&desc[7], &desc, &model).unwrap();
        assert_eq!((m, s), (7, 0.0));
    }

    #[test]
    fn select_sparse_respects_threshold_and_clusters() {
        let reference = random_frame(50, 4, 10);
        let target = random_frame(50, 4, 11);
        let matches: Vec<BestMatch> = (0..target.len())
            .map(|n| BestMatch {
                reference: n % reference.len(),
                score: (n % 7) as f64,
            })
            .collect();
        // τ = 0 rejects everything (scores ≥ 0).
        let none = select_sparse(&reference, &target, &matches, 10, 0.0).unwrap();
        assert!(none.is_empty());
        // τ = ∞ with one cluster per vertex accepts all vertices.
        let all = select_sparse(&reference, &target, &matches, target.len(), f64::INFINITY)
            .unwrap();
        assert_eq!(all.len(), target.len());
        let mut targets: Vec<usize> = all.pairs().iter().map(|p| p.target).collect();
        targets.dedup();
        assert_eq!(targets.len(), all.len(), "each target at most once");
        // K clusters bound the result size.
        let k = 6;
        let some = select_sparse(&reference, &target, &matches, k, f64::INFINITY).unwrap();
        assert!(some.len() <= k);
        assert!(!some.is_empty());
        // Displacements point from reference position to target position.
        for p in some.pairs() {
            let pr = reference.position(p.reference);
            let pt = target.position(p.target);
            for t in 0..3 {
                assert!((p.displacement[t] - (pt[t] - pr[t])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn percentile_is_nearest_rank() {
        let mk = |scores: &[f64]| -> Vec<BestMatch> {
            scores
                .iter()
                .map(|&score| BestMatch {
                    reference: 0,
                    score,
                })
                .collect()
        };
        let m = mk(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(score_percentile(&m, 25.0), 1.0);
        assert_eq!(score_percentile(&m, 50.0), 2.0);
        assert_eq!(score_percentile(&m, 100.0), 4.0);
        assert_eq!(score_percentile(&[], 25.0), 0.0);
    }

    #[test]
    fn offset_covariance_formula_and_skip_rule() {
        // Center voxel with two 1-hop neighbors at ±x. Whitened descriptors
        // are 1-D: center/target identical (best score 0), neighbors at
        // distance 1 → excess exactly 1.
        let grid = VoxelGrid::new([0.0; 3], 1.0, 4).unwrap();
        let points = vec![[5.5, 5.5, 5.5], [6.5, 5.5, 5.5], [4.5, 5.5, 5.5]];
        let frame = voxelize(
            &RawPointCloud::new(points, vec![[0u8; 3]; 3]).unwrap(),
            &grid,
        )
        .unwrap();
        let graph = build_knn_graph(&frame, 2).unwrap();
        let center = frame.voxels().iter().position(|v| *v == [5, 5, 5]).unwrap();
        let mut data = vec![0.0; frame.len()];
        for (i, v) in frame.voxels().iter().enumerate() {
            data[i] = if *v == [5, 5, 5] { 0.0 } else { 1.0 };
        }
        let wref = WhitenedDescriptors { dim: 1, data };
        let (m, skipped) =
            estimate_offset_covariance(&frame, &graph, &wref, &[0.0], center, 0.0).unwrap();
        assert_eq!(skipped, 0);
        let want = Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0));
        assert!((m - want).norm() < 1e-12, "got {m}");
        // All neighbors at the best score → everything skipped → zero matrix.
        let flat = WhitenedDescriptors {
            dim: 1,
            data: vec![0.0; frame.len()],
        };
        let (m, skipped) =
            estimate_offset_covariance(&frame, &graph, &flat, &[0.0], center, 0.0).unwrap();
        assert_eq!(m, Matrix3::zeros());
        assert_eq!(skipped, 2);
    }

    #[test]
    fn offset_covariance_matches_naive_summation() {
        let frame = random_frame(80, 4, 19);
        let graph = build_knn_graph(&frame, 6).unwrap();
        let mut state = 5u64;
        let dim = 4;
        let data: Vec<f64> = (0..frame.len() * dim).map(|_| unit(&mut state)).collect();
        let wref = WhitenedDescriptors { dim, data };
        let wtgt: Vec<f64> = (0..dim).map(|_| unit(&mut state)).collect();
        let m_n = 17usize;
        let best = 0.01;
        let (got, _) =
            estimate_offset_covariance(&frame, &graph, &wref, &wtgt, m_n, best).unwrap();
        // Naive re-evaluation.
        let hood = two_hop_neighborhood(&graph, m_n);
        let p0 = frame.position(m_n);
        let mut want = Matrix3::zeros();
        for &m in &hood {
            let score: f64 = wref
                .row(m)
                .iter()
                .zip(&wtgt)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            let excess = score - best;
            if excess <= 1e-9 {
                continue;
            }
            let p = frame.position(m);
            let dp = Vector3::new(p[0] - p0[0], p[1] - p0[1], p[2] - p0[2]);
            want += dp * dp.transpose() / excess;
        }
        want /= hood.len() as f64;
        assert!((got - want).norm() <= 1e-12 * want.norm().max(1.0));
        // PSD check.
        let eig = nalgebra::SymmetricEigen::new(got);
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn pseudo_inverse_floors_small_eigenvalues() {
        let m = Matrix3::from_diagonal(&Vector3::new(4.0, 1e-12, 0.0));
        let inv = pseudo_inverse_psd(&m);
        let want = Matrix3::from_diagonal(&Vector3::new(0.25, 0.0, 0.0));
        assert!((inv - want).norm() < 1e-12);
        assert_eq!(pseudo_inverse_psd(&Matrix3::zeros()), Matrix3::zeros());
        // Full-rank case: inverse within fp noise.
        let f = Matrix3::new(2.0, 0.5, 0.0, 0.5, 3.0, 0.25, 0.0, 0.25, 1.5);
        let inv = pseudo_inverse_psd(&f);
        assert!(((f * inv) - Matrix3::identity()).norm() < 1e-10);
    }

    fn line_graph(n: usize) -> VoxelGraph {
        let edges: Vec<(u32, u32, f64)> =
            (0..n - 1).map(|i| (i as u32, i as u32 + 1, 1.0)).collect();
        VoxelGraph::from_edges(n, edges).unwrap()
    }

    fn anchor(m: usize, v: [f64; 3]) -> Correspondence {
        Correspondence {
            reference: m,
            target: 0,
            score: 0.0,
            displacement: v,
            covariance: Matrix3::identity(),
        }
    }

    #[test]
    fn constant_anchors_reproduce_constant_field() {
        let graph = line_graph(12);
        let c = [1.5, -0.75, 2.0];
        let sparse =
            SparseCorrespondences::from_pairs(vec![anchor(2, c), anchor(7, c), anchor(11, c)]);
        let out = interpolate_motion(&graph, &sparse, 1.0).unwrap();
        for i in 0..12 {
            let v = out.field.vector(i);
            for t in 0..3 {
                assert!((v[t] - c[t]).abs() <= 1e-6, "vertex {i}: {v:?}");
            }
        }
        assert_eq!(out.unanchored_components, 0);
        assert!(out.relative_residual <= 1e-8);
    }

    #[test]
    fn empty_sparse_set_yields_zero_field() {
        let graph = line_graph(5);
        let out = interpolate_motion(&graph, &SparseCorrespondences::default(), 1.0).unwrap();
        assert_eq!(out.field, MotionField::zero(5));
        assert_eq!(out.iterations, 0);
        assert_eq!(out.unanchored_components, 1);
    }

    #[test]
    fn unanchored_component_stays_zero() {
        // Two disjoint 3-chains; only the first gets an anchor.
        let edges = vec![(0u32, 1u32, 1.0), (1, 2, 1.0), (3, 4, 1.0), (4, 5, 1.0)];
        let graph = VoxelGraph::from_edges(6, edges).unwrap();
        let sparse = SparseCorrespondences::from_pairs(vec![anchor(1, [2.0, 0.0, -1.0])]);
        let out = interpolate_motion(&graph, &sparse, 0.5).unwrap();
        assert_eq!(out.unanchored_components, 1);
        for i in 3..6 {
            assert_eq!(out.field.vector(i), [0.0, 0.0, 0.0]);
        }
        for i in 0..3 {
            let v = out.field.vector(i);
            assert!((v[0] - 2.0).abs() < 1e-6 && (v[2] + 1.0).abs() < 1e-6);
        }
    }

    fn random_instance(
        n: usize,
        seed: u64,
    ) -> (VoxelGraph, SparseCorrespondences) {
        let mut state = seed;
        let mut edges = Vec::new();
        for i in 1..n {
            // Random connected graph: attach each vertex to an earlier one,
            // plus extra random edges.
            let j = (lcg(&mut state) >> 33) as usize % i;
            edges.push((j as u32, i as u32, 0.25 + unit(&mut state)));
        }
        for _ in 0..n {
            let a = (lcg(&mut state) >> 33) as usize % n;
            let b = (lcg(&mut state) >> 33) as usize % n;
            if a != b && !edges.iter().any(|&(x, y, _)| {
                (x, y) == (a.min(b) as u32, a.max(b) as u32)
                    || (y, x) == (a.min(b) as u32, a.max(b) as u32)
            }) {
                edges.push((a.min(b) as u32, a.max(b) as u32, 0.25 + unit(&mut state)));
            }
        }
        let graph = VoxelGraph::from_edges(n, edges).unwrap();
        let mut pairs = Vec::new();
        for m in 0..n {
            if lcg(&mut state) % 3 == 0 {
                // Random PSD covariance: A Aᵀ + small diagonal.
                let a = Matrix3::from_fn(|_, _| unit(&mut state) - 0.5);
                let cov = a * a.transpose() + Matrix3::identity() * 0.05;
                pairs.push(Correspondence {
                    reference: m,
                    target: m,
                    score: 0.0,
                    displacement: [
                        unit(&mut state) * 4.0 - 2.0,
                        unit(&mut state) * 4.0 - 2.0,
                        unit(&mut state) * 4.0 - 2.0,
                    ],
                    covariance: cov,
                });
            }
        }
        if pairs.is_empty() {
            pairs.push(anchor(0, [1.0, 0.0, 0.0]));
        }
        (graph, SparseCorrespondences::from_pairs(pairs))
    }

    #[test]
    fn interpolation_matches_dense_direct_solve() {
        for seed in [100u64, 200, 300] {
            let n = 30;
            let (graph, sparse) = random_instance(n, seed);
            let mu = 0.8;
            let out = interpolate_motion(&graph, &sparse, mu).unwrap();
            // Dense oracle: assemble A = Q + μ blockdiag(L) explicitly.
            let ldense = graph.laplacian_dense();
            let dim = 3 * n;
            let mut a = DMatrix::<f64>::zeros(dim, dim);
            for c in 0..3 {
                for i in 0..n {
                    for j in 0..n {
                        a[(c * n + i, c * n + j)] = mu * ldense[(i, j)];
                    }
                }
            }
            let mut b = DMatrix::<f64>::zeros(dim, 1);
            for pair in sparse.pairs() {
                let inv = pseudo_inverse_psd(&pair.covariance);
                let m = pair.reference;
                for ci in 0..3 {
                    for cj in 0..3 {
                        a[(ci * n + m, cj * n + m)] += inv[(ci, cj)];
                    }
                    let rhs = inv * Vector3::from(pair.displacement);
                    b[(ci * n + m, 0)] = rhs[ci];
                }
            }
            let x = a.lu().solve(&b).expect("dense solve");
            let scale = x.iter().fold(0.0f64, |acc, &v| acc.max(v.abs())).max(1.0);
            for i in 0..dim {
                assert!(
                    (out.field.stacked()[i] - x[(i, 0)]).abs() <= 1e-6 * scale,
                    "seed {seed} entry {i}: {} vs {}",
                    out.field.stacked()[i],
                    x[(i, 0)]
                );
            }
            assert!(out.relative_residual <= 1e-8);
        }
    }

    #[test]
    fn solution_minimizes_the_objective() {
        let (graph, sparse) = random_instance(25, 4242);
        let mu = 1.3;
        let out = interpolate_motion(&graph, &sparse, mu).unwrap();
        let objective = |field: &MotionField| -> f64 {
            let mut fit = 0.0;
            for pair in sparse.pairs() {
                let inv = pseudo_inverse_psd(&pair.covariance);
                let v = field.vector(pair.reference);
                let d = Vector3::new(
                    v[0] - pair.displacement[0],
                    v[1] - pair.displacement[1],
                    v[2] - pair.displacement[2],
                );
                fit += (d.transpose() * inv * d)[(0, 0)];
            }
            fit + mu * field.dirichlet_energy(&graph)
        };
        let base = objective(&out.field);
        let mut state = 31u64;
        for _ in 0..100 {
            let perturbed: Vec<f64> = out
                .field
                .stacked()
                .iter()
                .map(|&x| x + (unit(&mut state) - 0.5) * 0.2)
                .collect();
            let field = MotionField::from_stacked(perturbed).unwrap();
            assert!(objective(&field) >= base - 1e-9 * base.abs().max(1.0));
        }
    }

    #[test]
    fn dirichlet_energy_is_monotone_in_mu() {
        let (graph, sparse) = random_instance(40, 77);
        let mut last = f64::INFINITY;
        for mu in [0.1, 1.0, 10.0, 100.0, 1000.0] {
            let out = interpolate_motion(&graph, &sparse, mu).unwrap();
            let energy = out.field.dirichlet_energy(&graph);
            assert!(
                energy <= last * (1.0 + 1e-9) + 1e-12,
                "energy {energy} after {last} at mu {mu}"
            );
            last = energy;
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let graph = line_graph(4);
        let sparse = SparseCorrespondences::from_pairs(vec![anchor(9, [1.0, 0.0, 0.0])]);
        assert!(matches!(
            interpolate_motion(&graph, &sparse, 1.0),
            Err(MotionError::VertexOutOfRange { .. })
        ));
        let ok = SparseCorrespondences::from_pairs(vec![anchor(1, [1.0, 0.0, 0.0])]);
        assert!(matches!(
            interpolate_motion(&graph, &ok, 0.0),
            Err(MotionError::InvalidMu)
        ));
        assert!(matches!(
            interpolate_motion(&graph, &ok, f64::NAN),
            Err(MotionError::InvalidMu)
        ));
    }

    #[test]
    fn kmeans_is_deterministic_and_covers_all_labels() {
        let frame = random_frame(120, 5, 55);
        let pts = frame.positions();
        let a = kmeans_labels(&pts, 8);
        let b = kmeans_labels(&pts, 8);
        assert_eq!(a, b);
        let mut seen = vec![false; 8];
        for &l in &a {
            assert!(l < 8);
            seen[l] = true;
        }
        assert!(seen.iter().all(|&s| s), "farthest-point init fills all clusters");
        // k ≥ n degenerates to singletons.
        let five: Vec<[f64; 3]> = pts[..5].to_vec();
        let labels = kmeans_labels(&five, 10);
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
    }

    #[test]
    fn rigid_translation_motion_is_recovered_end_to_end() {
        // A dense blob translated by an integer offset: the pipeline should
        // recover the constant field almost exactly.
        let mut points = Vec::new();
        let mut colors = Vec::new();
        let mut state = 12u64;
        for x in 0..6u32 {
            for y in 0..6u32 {
                for z in 0..3u32 {
                    points.push([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]);
                    colors.push([
                        ((x * 40) % 256) as u8,
                        ((y * 35 + 17) % 256) as u8,
                        ((lcg(&mut state) >> 33) % 256) as u8,
                    ]);
                }
            }
        }
        let grid = VoxelGrid::new([0.0; 3], 1.0, 5).unwrap();
        let reference =
            voxelize(&RawPointCloud::new(points.clone(), colors.clone()).unwrap(), &grid)
                .unwrap();
        let shift = [3.0, 2.0, 1.0];
        let moved: Vec<[f64; 3]> = points
            .iter()
            .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
            .collect();
        let target = voxelize(&RawPointCloud::new(moved, colors).unwrap(), &grid).unwrap();
        let rg = build_knn_graph(&reference, 8).unwrap();
        let tg = build_knn_graph(&target, 8).unwrap();
        let cfg = WaveletConfig::auto(estimate_lambda_max(&rg), 4, 2.0, 30).unwrap();
        let training =
            synthesize_training_pairs(&reference, &rg, &cfg, 8, &[[0.4, -0.3, 0.6], [1.2, 0.7, -0.5]])
                .unwrap();
        assert!(training.len() > cfg.descriptor_len() / 2);
        let model = train_precision(&training, 1e-3, "rigid-test").unwrap();
        let est = estimate_motion(
            &reference,
            &rg,
            &target,
            &tg,
            &model,
            &cfg,
            &MotionParams {
                clusters: 12,
                ..MotionParams::default()
            },
        )
        .unwrap();
        assert!(!est.sparse.is_empty());
        let mut err = 0.0f64;
        for i in 0..reference.len() {
            let v = est.field.vector(i);
            let e = (0..3)
                .map(|t| (v[t] - shift[t]).powi(2))
                .sum::<f64>()
                .sqrt();
            err += e;
        }
        err /= reference.len() as f64;
        assert!(err <= 1.0, "mean endpoint error {err} too large");
    }
}
