//! Lanczos iteration with full reorthogonalization for the algebraically
//! smallest eigenpairs of a sparse symmetric matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::spgraph::SparseMatrix;

/// The `m` smallest eigenpairs: ascending eigenvalues, orthonormal
/// eigenvectors as the columns of an `n x m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub eigvals: Vec<f64>,
    pub eigvecs: Array2<f64>,
}

impl SpectralDecomposition {
    pub fn m(&self) -> usize {
        self.eigvals.len()
    }

    pub fn n(&self) -> usize {
        self.eigvecs.nrows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LanczosOptions {
    /// Relative residual target `‖Lq - θq‖ <= tol * max(1, |θ|)`.
    pub tol: f64,
    /// Fresh start vectors allowed after an invariant subspace is exhausted.
    pub max_restarts: usize,
    /// Convergence is tested every this many iterations.
    pub check_every: usize,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            tol: 1e-9,
            max_restarts: 64,
            check_every: 8,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two passes of classical Gram-Schmidt against every basis vector.
fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for v in basis {
            let c = dot(w, v);
            for (wi, vi) in w.iter_mut().zip(v) {
                *wi -= c * vi;
            }
        }
    }
}

/// A random unit vector orthogonal to `basis`, or `None` if the basis
/// already spans the space numerically.
fn fresh_start(n: usize, basis: &[Vec<f64>], r: &mut impl Rng) -> Option<Vec<f64>> {
    for _ in 0..4 {
        let mut v: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let before = norm(&v);
        orthogonalize(&mut v, basis);
        let after = norm(&v);
        if after > 1e-8 * before {
            v.iter_mut().for_each(|x| *x /= after);
            return Some(v);
        }
    }
    None
}

struct Ritz {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    /// `|β_j s_{j,i}|` per Ritz pair.
    bounds: Vec<f64>,
}

fn ritz(alpha: &[f64], beta: &[f64], last_beta: f64) -> Ritz {
    let j = alpha.len();
    let mut t = DMatrix::<f64>::zeros(j, j);
    for i in 0..j {
        t[(i, i)] = alpha[i];
        if i + 1 < j {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(j, j, |r, c| eig.eigenvectors[(r, order[c])]);
    let bounds = order
        .iter()
        .map(|&i| (last_beta * eig.eigenvectors[(j - 1, i)]).abs())
        .collect();
    Ritz {
        values,
        vectors,
        bounds,
    }
}

/// Smallest `m` eigenpairs of the symmetric matrix `l`.
pub fn lanczos_eigs(l: &SparseMatrix, m: usize, seed: u64) -> Result<SpectralDecomposition> {
    lanczos_eigs_with(l, m, seed, LanczosOptions::default())
}

pub fn lanczos_eigs_with(
    l: &SparseMatrix,
    m: usize,
    seed: u64,
    opts: LanczosOptions,
) -> Result<SpectralDecomposition> {
    let n = l.n();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "eigenpair count must satisfy 1 <= m <= n (m = {m}, n = {n})"
        )));
    }
    let scale = l
        .values()
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1.0);
    let asym = l.asymmetry();
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric(asym));
    }

    let mut r = rng::stream(seed, "lanczos", n as u64, m as u64);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n.min(4 * m + 32));
    let mut alpha: Vec<f64> = Vec::new();
    // beta[i] couples basis i and i + 1; zero across restarts.
    let mut beta: Vec<f64> = Vec::new();
    let mut restarts = 0;
    let mut v = fresh_start(n, &basis, &mut r).expect("empty basis");
    let breakdown = 1e-10 * scale;

    loop {
        let mut w = l.spmv(&v);
        let a = dot(&w, &v);
        basis.push(v);
        alpha.push(a);
        orthogonalize(&mut w, &basis);
        let b = norm(&w);
        let j = basis.len();

        let exhausted = j == n;
        let check =
            exhausted || (j >= m && (j - m).is_multiple_of(opts.check_every)) || b <= breakdown;
        if check && j >= m {
            let last = if b <= breakdown || exhausted { 0.0 } else { b };
            let rz = ritz(&alpha, &beta, last);
            let converged = rz.bounds[..m]
                .iter()
                .zip(&rz.values[..m])
                .all(|(bound, theta)| *bound <= opts.tol * theta.abs().max(1.0));
            // After a breakdown the tridiagonal is block diagonal and the
            // bounds of the current block are exact; the smallest values may
            // still hide in an unexplored subspace, so only stop on breakdown
            // when the whole space is covered.
            if exhausted || (converged && b > breakdown) {
                return Ok(assemble(&basis, &rz, m));
            }
        }

        if b <= breakdown {
            restarts += 1;
            if restarts > opts.max_restarts {
                return Err(Error::NoConvergence(format!(
                    "Lanczos broke down {restarts} times before {m} eigenpairs converged"
                )));
            }
            match fresh_start(n, &basis, &mut r) {
                Some(fresh) => {
                    beta.push(0.0);
                    v = fresh;
                }
                None => {
                    let rz = ritz(&alpha, &beta, 0.0);
                    return Ok(assemble(&basis, &rz, m));
                }
            }
        } else {
            beta.push(b);
            w.iter_mut().for_each(|x| *x /= b);
            v = w;
        }
    }
}

fn assemble(basis: &[Vec<f64>], rz: &Ritz, m: usize) -> SpectralDecomposition {
    let n = basis[0].len();
    let j = basis.len();
    let mut q = Array2::<f64>::zeros((n, m));
    for c in 0..m {
        for (k, v) in basis.iter().enumerate().take(j) {
            let s = rz.vectors[(k, c)];
            if s != 0.0 {
                for i in 0..n {
                    q[[i, c]] += s * v[i];
                }
            }
        }
    }
    SpectralDecomposition {
        eigvals: rz.values[..m].to_vec(),
        eigvecs: q,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spgraph::{build_adjacency, build_knn, laplacian, LaplacianKind};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> SparseMatrix {
        let a = SparseMatrix::from_dense(
            array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]].view(),
        )
        .unwrap();
        laplacian(&a, LaplacianKind::Sym).unwrap()
    }

    fn check_invariants(l: &SparseMatrix, d: &SpectralDecomposition) {
        let qtq = d.eigvecs.t().dot(&d.eigvecs);
        for ((i, j), v) in qtq.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 1e-8, "QtQ[{i},{j}] = {v}");
        }
        let lq = l.spmm(d.eigvecs.view()).unwrap();
        for (c, &lam) in d.eigvals.iter().enumerate() {
            let res: f64 = (0..d.n())
                .map(|i| (lq[[i, c]] - lam * d.eigvecs[[i, c]]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(res < 1e-6 * lam.abs().max(1.0), "residual {res} for {lam}");
            assert!((-1e-10..=2.0 + 1e-10).contains(&lam));
        }
        assert!(d.eigvals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn path_graph_spectrum() {
        let l = path3();
        let d = lanczos_eigs(&l, 3, 1).unwrap();
        for (got, want) in d.eigvals.iter().zip([0.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        check_invariants(&l, &d);
    }

    #[test]
    fn smallest_of_connected_graph_is_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<[f64; 3]> = (0..200).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
        let nb = build_knn(&coords, 10).unwrap();
        let l = laplacian(&build_adjacency(&nb, 0.3).unwrap(), LaplacianKind::Sym).unwrap();
        let d = lanczos_eigs(&l, 1, 2).unwrap();
        assert!(d.eigvals[0].abs() < 1e-10, "{}", d.eigvals[0]);
        let d = lanczos_eigs(&l, 12, 2).unwrap();
        check_invariants(&l, &d);
    }

    #[test]
    fn rejects_bad_requests() {
        let l = path3();
        assert!(lanczos_eigs(&l, 0, 1).is_err());
        assert!(lanczos_eigs(&l, 4, 1).is_err());
        let ns = SparseMatrix::from_triplets(2, vec![(0, 1, 1.0), (1, 0, 0.5)]).unwrap();
        assert!(matches!(
            lanczos_eigs(&ns, 1, 1),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn disconnected_graph_recovers_repeated_zero() {
        // Two components: the zero eigenvalue has multiplicity two.
        let a = SparseMatrix::from_triplets(
            4,
            vec![(0, 1, 1.0), (1, 0, 1.0), (2, 3, 0.5), (3, 2, 0.5)],
        )
        .unwrap();
        let l = laplacian(&a, LaplacianKind::Sym).unwrap();
        let d = lanczos_eigs(&l, 4, 3).unwrap();
        let want = [0.0, 0.0, 2.0, 2.0];
        for (got, w) in d.eigvals.iter().zip(want) {
            assert!((got - w).abs() < 1e-10, "{:?}", d.eigvals);
        }
        check_invariants(&l, &d);
    }
}
