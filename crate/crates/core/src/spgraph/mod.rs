//! kNN graphs over point clouds: Gaussian adjacency, degrees, normalized
//! Laplacians and propagation operators in CSR form, and graph geodesics.

pub(crate) mod csr;
mod geodesic;
mod knn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csr::{Pattern, SparseMatrix};
pub use geodesic::{geodesics_from, graph_geodesics};
pub use knn::{build_knn, NeighborLists};

/// Row sums `d_ii = Σ_j a_ij` of an adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeVector(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplacianKind {
    /// `I - D^{-1/2} A D^{-1/2}`
    Sym,
    /// `I - D^{-1} A`
    Rw,
}

/// Symmetrized kNN graph whose values are Euclidean edge lengths.
///
/// The pattern is the union of every point's neighbour list with the
/// transposed lists. Zero-length edges (duplicate points) are stored
/// explicitly; this is an internal structure, not an adjacency.
pub fn distance_graph(nb: &NeighborLists) -> Result<SparseMatrix> {
    let n = nb.n();
    let mut entries = Vec::with_capacity(2 * n * nb.k);
    for i in 0..n {
        let (idx, d) = nb.row(i);
        for (&j, &dist) in idx.iter().zip(d) {
            entries.push((i, j, dist));
            entries.push((j, i, dist));
        }
    }
    entries.sort_by_key(|a| (a.0, a.1));
    // Both directions of an edge carry the same length, so deduplicating
    // (rather than summing) is the max-symmetrization.
    entries.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let mut row_ptr = vec![0usize; n + 1];
    let mut col_idx = Vec::with_capacity(entries.len());
    let mut values = Vec::with_capacity(entries.len());
    for (i, j, d) in entries {
        row_ptr[i + 1] += 1;
        col_idx.push(j);
        values.push(d);
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    SparseMatrix::new(n, row_ptr, col_idx, values)
}

/// Gaussian edge weight `exp(-d² / (2σ²))`, floored at the smallest normal
/// `f64` so that far neighbours of tiny-σ kernels stay in the pattern.
#[inline]
pub fn gaussian_weight(dist: f64, sigma: f64) -> f64 {
    (-(dist * dist) / (2.0 * sigma * sigma))
        .exp()
        .max(f64::MIN_POSITIVE)
}

/// Adjacency with the Gaussian kernel of width `sigma` on a distance graph.
pub fn gaussian_adjacency(dist: &SparseMatrix, sigma: f64) -> Result<SparseMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    Ok(dist.map_values(|_, _, d| gaussian_weight(d, sigma)))
}

/// Symmetric Gaussian adjacency of a kNN graph (union of neighbourhoods).
pub fn build_adjacency(nb: &NeighborLists, sigma: f64) -> Result<SparseMatrix> {
    gaussian_adjacency(&distance_graph(nb)?, sigma)
}

pub fn degrees(a: &SparseMatrix) -> Result<DegreeVector> {
    let d = a.row_sums();
    if let Some(i) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::IsolatedNode(i));
    }
    Ok(DegreeVector(d))
}

/// Propagation operator `I - L`: `D^{-1/2} A D^{-1/2}` for `Sym`,
/// `D^{-1} A` for `Rw`. Shares the adjacency's sparsity pattern.
pub fn propagation(a: &SparseMatrix, kind: LaplacianKind) -> Result<SparseMatrix> {
    let DegreeVector(d) = degrees(a)?;
    Ok(match kind {
        LaplacianKind::Sym => {
            let s: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
            a.map_values(|i, j, v| v / s[i] / s[j])
        }
        LaplacianKind::Rw => a.map_values(|i, _, v| v / d[i]),
    })
}

/// Normalized Laplacian with unit diagonal.
pub fn laplacian(a: &SparseMatrix, kind: LaplacianKind) -> Result<SparseMatrix> {
    let p = propagation(a, kind)?;
    let n = p.n();
    let mut entries = Vec::with_capacity(p.nnz() + n);
    for i in 0..n {
        entries.push((i, i, 1.0));
        let (cols, vals) = p.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            entries.push((i, j, -v));
        }
    }
    SparseMatrix::from_triplets(n, entries)
}
