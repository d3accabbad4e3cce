//! Graph Fourier transform: Laplacian eigendecomposition per connected
//! component.
//!
//! The Laplacian of a graph with `c` connected components has eigenvalue 0
//! with multiplicity exactly `c`, and a generic dense solver may return an
//! arbitrary rotation of that degenerate eigenspace. To keep the transform
//! fully deterministic the decomposition is assembled *per component*: each
//! component is eigendecomposed on its own (its zero eigenvector is the
//! normalized component indicator, unique up to sign), vectors are lifted
//! back to full length, and the global basis is ordered by `(eigenvalue,
//! component id, within-component rank)`. Every eigenvector's sign is fixed
//! so its first significantly-nonzero entry is positive.
//!
//! The smallest eigenvalue of each component is clamped to exactly zero (it
//! is zero in exact arithmetic), which makes the structural zero
//! multiplicity available without threshold games; [`Spectrum::zero_multiplicity`]
//! still applies the conventional relative threshold for reporting.

use crate::graph::VoxelGraph;
use nalgebra::DMatrix;
use thiserror::Error;

/// Errors from spectral analysis.
#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("signal length {got} does not match vertex count {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("eigendecomposition produced a non-finite value")]
    NonFinite,
}

/// Orthonormal Laplacian eigenbasis with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    /// Column `l` is the eigenvector of `eigenvalues[l]`.
    basis: DMatrix<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// Number of eigenvalues at (or numerically indistinguishable from)
    /// zero, using the relative threshold `1e-8 · λ_max`.
    pub fn zero_multiplicity(&self) -> usize {
        let threshold = 1e-8 * self.lambda_max();
        self.eigenvalues.iter().filter(|&&l| l <= threshold).count()
    }
}

/// Backend chokepoint: dense symmetric eigendecomposition returning
/// ascending `(eigenvalues, eigenvectors)`.
fn dense_sym_eigen(mat: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = mat.nrows();
    let fm = faer::Mat::from_fn(n, n, |i, j| mat[(i, j)]);
    let evd = fm.selfadjoint_eigendecomposition(faer::Side::Lower);
    let values = evd.s().column_vector();
    let vectors = evd.u();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values
            .read(a)
            .partial_cmp(&values.read(b))
            .expect("finite eigenvalues")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| values.read(i)).collect();
    let basis = DMatrix::from_fn(n, n, |i, j| vectors.read(i, order[j]));
    (eigenvalues, basis)
}

/// Fixes an eigenvector's sign: first entry whose magnitude exceeds
/// `1e-12 ×` the vector's max magnitude must be positive.
fn fix_sign(column: &mut [f64]) {
    let max = column.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max == 0.0 {
        return;
    }
    for &v in column.iter() {
        if v.abs() > 1e-12 * max {
            if v < 0.0 {
                for entry in column.iter_mut() {
                    *entry = -*entry;
                }
            }
            return;
        }
    }
}

/// Eigendecomposes the graph Laplacian deterministically.
pub fn eigendecompose(graph: &VoxelGraph) -> Result<Spectrum, SpectralError> {
    let n = graph.vertex_count();
    let components = graph.components();

    // Member vertices per component, ascending within each.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); components.count];
    for (v, &label) in components.labels.iter().enumerate() {
        members[label as usize].push(v);
    }

    struct Entry {
        eigenvalue: f64,
        component: usize,
        rank: usize,
        column: Vec<f64>, // full-length, zero outside the component
    }

    let mut entries: Vec<Entry> = Vec::with_capacity(n);
    for (component, verts) in members.iter().enumerate() {
        let m = verts.len();
        if m == 1 {
            let mut column = vec![0.0; n];
            column[verts[0]] = 1.0;
            entries.push(Entry { eigenvalue: 0.0, component, rank: 0, column });
            continue;
        }
        // Dense sub-Laplacian of the component.
        let mut sub = DMatrix::zeros(m, m);
        let local: std::collections::HashMap<usize, usize> =
            verts.iter().enumerate().map(|(l, &v)| (v, l)).collect();
        for (l, &v) in verts.iter().enumerate() {
            sub[(l, l)] = graph.degree(v);
            for (t, w) in graph.neighbors(v) {
                let lt = local[&t]; // neighbors stay within the component
                sub[(l, lt)] = -w;
            }
        }
        let (mut values, vectors) = dense_sym_eigen(&sub);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite);
        }
        // The smallest eigenvalue of a connected component is structurally
        // zero; pin it so multiplicity counting is exact.
        values[0] = 0.0;
        for (rank, value) in values.iter().enumerate() {
            let mut column = vec![0.0; n];
            for (l, &v) in verts.iter().enumerate() {
                column[v] = vectors[(l, rank)];
            }
            fix_sign(&mut column);
            entries.push(Entry {
                eigenvalue: value.max(0.0),
                component,
                rank,
                column,
            });
        }
    }

    entries.sort_by(|a, b| {
        a.eigenvalue
            .partial_cmp(&b.eigenvalue)
            .expect("finite eigenvalues")
            .then(a.component.cmp(&b.component))
            .then(a.rank.cmp(&b.rank))
    });

    let eigenvalues = entries.iter().map(|e| e.eigenvalue).collect();
    let mut basis = DMatrix::zeros(n, n);
    for (l, entry) in entries.iter().enumerate() {
        for (v, &x) in entry.column.iter().enumerate() {
            basis[(v, l)] = x;
        }
    }
    Ok(Spectrum { eigenvalues, basis })
}

/// Forward GFT: `F = Uᵀ f`.
pub fn gft(spectrum: &Spectrum, signal: &[f64]) -> Result<Vec<f64>, SpectralError> {
    let n = spectrum.len();
    if signal.len() != n {
        return Err(SpectralError::DimensionMismatch { expected: n, got: signal.len() });
    }
    let v = nalgebra::DVector::from_column_slice(signal);
    Ok(spectrum.basis.tr_mul(&v).iter().copied().collect())
}

/// Inverse GFT: `f = U F`.
pub fn inverse_gft(spectrum: &Spectrum, coeffs: &[f64]) -> Result<Vec<f64>, SpectralError> {
    let n = spectrum.len();
    if coeffs.len() != n {
        return Err(SpectralError::DimensionMismatch { expected: n, got: coeffs.len() });
    }
    let v = nalgebra::DVector::from_column_slice(coeffs);
    Ok((&spectrum.basis * v).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::VoxelGraph;

    fn path_graph(n: usize) -> VoxelGraph {
        let edges = (0..n - 1).map(|i| (i as u32, i as u32 + 1, 1.0));
        VoxelGraph::from_edges(n, edges).unwrap()
    }

    #[test]
    fn two_vertex_graph_has_known_spectrum() {
        let g = VoxelGraph::from_edges(2, vec![(0, 1, 1.0)]).unwrap();
        let s = eigendecompose(&g).unwrap();
        assert_eq!(s.eigenvalues()[0], 0.0);
        assert!((s.eigenvalues()[1] - 2.0).abs() < 1e-12);
        // Constant vector first, difference vector second, sign-fixed.
        let r = 1.0 / 2.0f64.sqrt();
        assert!((s.basis()[(0, 0)] - r).abs() < 1e-12);
        assert!((s.basis()[(1, 0)] - r).abs() < 1e-12);
        assert!((s.basis()[(0, 1)] - r).abs() < 1e-12);
        assert!((s.basis()[(1, 1)] + r).abs() < 1e-12);
    }

    #[test]
    fn residuals_and_orthonormality_on_path() {
        let g = path_graph(20);
        let s = eigendecompose(&g).unwrap();
        let l = g.laplacian_dense();
        let lmax = s.lambda_max();
        for k in 0..s.len() {
            let v = s.basis().column(k);
            let resid = (&l * v) - s.eigenvalues()[k] * v;
            assert!(resid.norm() <= 1e-8 * lmax.max(1.0), "eigenpair {k}");
        }
        let gram = s.basis().tr_mul(s.basis());
        for i in 0..s.len() {
            for j in 0..s.len() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_multiplicity_equals_component_count() {
        // Two disjoint paths + an isolated vertex = 3 components.
        let mut edges = vec![(0u32, 1u32, 1.0), (1, 2, 1.0)];
        edges.extend([(3, 4, 0.5), (4, 5, 0.5)]);
        let g = VoxelGraph::from_edges(7, edges).unwrap();
        let s = eigendecompose(&g).unwrap();
        assert_eq!(g.components().count, 3);
        assert_eq!(s.zero_multiplicity(), 3);
        // The three zero eigenvalues come first and are exactly zero.
        assert_eq!(&s.eigenvalues()[..3], &[0.0, 0.0, 0.0]);
        assert!(s.eigenvalues()[3] > 0.0);
    }

    #[test]
    fn zero_eigenvectors_are_component_indicators() {
        let g = VoxelGraph::from_edges(5, vec![(0, 1, 2.0), (2, 3, 1.0), (3, 4, 1.0)]).unwrap();
        let s = eigendecompose(&g).unwrap();
        // Component ids: {0,1} → 0, {2,3,4} → 1. Zero vectors ordered by
        // component id; entries constant and positive on their component.
        let v0 = s.basis().column(0);
        assert!((v0[0] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((v0[1] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(v0[2], 0.0);
        let v1 = s.basis().column(1);
        assert_eq!(v1[0], 0.0);
        for t in 2..5 {
            assert!((v1[t] - 1.0 / 3.0f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn gft_satisfies_parseval_and_round_trips() {
        let g = path_graph(31);
        let s = eigendecompose(&g).unwrap();
        let signal: Vec<f64> = (0..31).map(|i| ((i * 31 + 7) % 13) as f64 - 6.0).collect();
        let coeffs = gft(&s, &signal).unwrap();
        let back = inverse_gft(&s, &coeffs).unwrap();
        let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!((norm2(&signal) - norm2(&coeffs)).abs() < 1e-10 * norm2(&signal).max(1.0));
        for (a, b) in signal.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_signal_concentrates_on_zero_mode() {
        let g = path_graph(10);
        let s = eigendecompose(&g).unwrap();
        let coeffs = gft(&s, &vec![3.0; 10]).unwrap();
        assert!((coeffs[0] - 3.0 * 10.0f64.sqrt()).abs() < 1e-10);
        for &c in &coeffs[1..] {
            assert!(c.abs() < 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g = path_graph(4);
        let s = eigendecompose(&g).unwrap();
        assert!(matches!(
            gft(&s, &[1.0, 2.0]),
            Err(SpectralError::DimensionMismatch { expected: 4, got: 2 })
        ));
        assert!(matches!(
            inverse_gft(&s, &[1.0; 9]),
            Err(SpectralError::DimensionMismatch { expected: 4, got: 9 })
        ));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let g = path_graph(40);
        let a = eigendecompose(&g).unwrap();
        let b = eigendecompose(&g).unwrap();
        assert_eq!(a.eigenvalues(), b.eigenvalues());
        assert_eq!(a.basis(), b.basis());
    }
}
