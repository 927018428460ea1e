//! Square CSR matrices and sparse x dense products.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row pointers and column indices, shared between matrices with the same
/// sparsity (all kernels of a bank use one pattern).
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

/// Square matrix in compressed sparse row form. Column indices are strictly
/// increasing within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::with_pattern(n, Arc::new(Pattern { row_ptr, col_idx }), values)
    }

    pub fn with_pattern(n: usize, pattern: Arc<Pattern>, values: Vec<f64>) -> Result<Self> {
        let Pattern { row_ptr, col_idx } = &*pattern;
        if row_ptr.len() != n + 1 || row_ptr[0] != 0 || row_ptr[n] != col_idx.len() {
            return Err(Error::Shape("malformed CSR row pointers".into()));
        }
        if values.len() != col_idx.len() {
            return Err(Error::Shape(format!(
                "{} values for {} stored entries",
                values.len(),
                col_idx.len()
            )));
        }
        for i in 0..n {
            if row_ptr[i] > row_ptr[i + 1] {
                return Err(Error::Shape(format!("row pointer decreases at row {i}")));
            }
            let cols = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= n) {
                return Err(Error::Shape(format!(
                    "row {i}: columns unsorted or out of range"
                )));
            }
        }
        Ok(SparseMatrix { n, pattern, values })
    }

    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(i, j, _)) = entries.iter().find(|(i, j, _)| *i >= n || *j >= n) {
            return Err(Error::Shape(format!("entry ({i}, {j}) outside {n}x{n}")));
        }
        entries.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in entries {
            if last == Some((i, j)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            col_idx.push(j);
            values.push(v);
            row_ptr[i + 1] += 1;
            last = Some((i, j));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self::new(n, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n,
            pattern: Arc::new(Pattern {
                row_ptr: (0..=n).collect(),
                col_idx: (0..n).collect(),
            }),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(a: ArrayView2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Shape("matrix is not square".into()));
        }
        let mut entries = Vec::new();
        for ((i, j), &v) in a.indexed_iter() {
            if v != 0.0 {
                entries.push((i, j, v));
            }
        }
        Self::from_triplets(a.nrows(), entries)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.pattern.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.pattern.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    /// Same sparsity, new values.
    pub fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> SparseMatrix {
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.n {
            for p in self.row_ptr()[i]..self.row_ptr()[i + 1] {
                values.push(f(i, self.col_idx()[p], self.values[p]));
            }
        }
        SparseMatrix {
            n: self.n,
            pattern: Arc::clone(&self.pattern),
            values,
        }
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr()[i]..self.row_ptr()[i + 1];
        (&self.col_idx()[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let n = self.n;
        let mut counts = vec![0usize; n + 1];
        for &j in self.col_idx() {
            counts[j + 1] += 1;
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                col_idx[next[j]] = i;
                values[next[j]] = v;
                next[j] += 1;
            }
        }
        SparseMatrix {
            n,
            pattern: Arc::new(Pattern {
                row_ptr: counts,
                col_idx,
            }),
            values,
        }
    }

    /// Largest `|a_ij - a_ji|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                a[[i, j]] = v;
            }
        }
        a
    }

    fn check_rhs(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.nrows() != self.n {
            return Err(Error::Shape(format!(
                "sparse {n}x{n} times dense {}x{}",
                x.nrows(),
                x.ncols(),
                n = self.n
            )));
        }
        Ok(())
    }

    /// `self * x`, rows computed in parallel. Each output row is reduced in
    /// storage order, so the result does not depend on the thread count.
    pub fn spmm(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rhs(&x)?;
        let c = x.ncols();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n * c];
        if c > 0 {
            out.par_chunks_mut(c)
                .enumerate()
                .for_each(|(i, orow)| self.row_product(i, xs, c, orow));
        }
        Ok(Array2::from_shape_vec((self.n, c), out).expect("shape"))
    }

    /// Single-threaded `self * x`.
    pub fn spmm_seq(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rhs(&x)?;
        let c = x.ncols();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n * c];
        if c > 0 {
            for (i, orow) in out.chunks_mut(c).enumerate() {
                self.row_product(i, xs, c, orow);
            }
        }
        Ok(Array2::from_shape_vec((self.n, c), out).expect("shape"))
    }

    #[inline]
    fn row_product(&self, i: usize, xs: &[f64], c: usize, orow: &mut [f64]) {
        let (cols, vals) = self.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            let xrow = &xs[j * c..(j + 1) * c];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o += v * xv;
            }
        }
    }

    pub fn spmv(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "spmv dimension mismatch");
        (0..self.n)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_sparse(n: usize, density: f64, rng: &mut ChaCha8Rng) -> SparseMatrix {
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if rng.gen::<f64>() < density {
                    entries.push((i, j, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        SparseMatrix::from_triplets(n, entries).unwrap()
    }

    #[test]
    fn identity_product_is_exact() {
        let x = array![[1.5, -2.0], [0.25, 3.0], [7.0, 1e-9]];
        let y = SparseMatrix::identity(3).spmm(x.view()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn random_product_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_sparse(100, 0.08, &mut rng);
        let x = Array2::from_shape_fn((100, 7), |_| rng.gen_range(-1.0..1.0));
        let dense = a.to_dense();
        let mut expect = Array2::<f64>::zeros((100, 7));
        for i in 0..100 {
            for k in 0..100 {
                for c in 0..7 {
                    expect[[i, c]] += dense[[i, k]] * x[[k, c]];
                }
            }
        }
        let par = a.spmm(x.view()).unwrap();
        let seq = a.spmm_seq(x.view()).unwrap();
        let diff = (&par - &expect)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "{diff}");
        assert_eq!(par, seq);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let a = SparseMatrix::identity(3);
        assert!(a.spmm(Array2::zeros((4, 2)).view()).is_err());
    }

    #[test]
    fn transpose_and_triplets() {
        let a =
            SparseMatrix::from_triplets(3, vec![(0, 2, 1.0), (0, 2, 2.0), (2, 1, -1.0)]).unwrap();
        assert_eq!(a.get(0, 2), 3.0);
        assert_eq!(a.nnz(), 2);
        let t = a.transpose();
        assert_eq!(t.get(2, 0), 3.0);
        assert_eq!(t.get(1, 2), -1.0);
        assert_eq!(t.to_dense(), a.to_dense().t());
        assert!(a.asymmetry() > 0.0);
    }

    #[test]
    fn unsorted_columns_rejected() {
        assert!(SparseMatrix::new(2, vec![0, 2, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
    }
}
