//! Conjugate gradients for the implicit diffusion system `(λL + I) X = B`.
//!
//! All right-hand sides advance together so every iteration costs a single
//! sparse x dense product; each column keeps its own step sizes and stops
//! updating once its residual meets the tolerance.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::spgraph::SparseMatrix;

pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_CG_MAX_ITER: usize = 1000;

fn apply(l: &SparseMatrix, lambda: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut y = l.spmm(x)?;
    Zip::from(&mut y)
        .and(&x)
        .for_each(|y, &x| *y = lambda * *y + x);
    Ok(y)
}

fn col_dots(a: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    a.axis_iter(Axis(1))
        .zip(b.axis_iter(Axis(1)))
        .map(|(x, y)| x.dot(&y))
        .collect()
}

/// Solve `(λL + I) X = B` column by column to relative residual `tol`.
pub fn cg_solve(
    l: &SparseMatrix,
    lambda: f64,
    b: ArrayView2<f64>,
    tol: f64,
) -> Result<Array2<f64>> {
    cg_solve_with(l, lambda, b, tol, DEFAULT_CG_MAX_ITER)
}

pub fn cg_solve_with(
    l: &SparseMatrix,
    lambda: f64,
    b: ArrayView2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Array2<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if b.nrows() != l.n() {
        return Err(Error::Shape(format!(
            "system of size {} with {} right-hand-side rows",
            l.n(),
            b.nrows()
        )));
    }
    if lambda == 0.0 {
        return Ok(b.to_owned());
    }
    let c = b.ncols();
    let mut x = Array2::<f64>::zeros(b.raw_dim());
    let mut r = b.to_owned();
    let mut p = r.clone();
    let b_norm: Vec<f64> = col_dots(&r, &r).into_iter().map(f64::sqrt).collect();
    let mut rr = col_dots(&r, &r);
    let mut active: Vec<bool> = (0..c).map(|j| rr[j].sqrt() > tol * b_norm[j]).collect();

    for _ in 0..max_iter {
        if !active.iter().any(|&a| a) {
            return Ok(x);
        }
        let ap = apply(l, lambda, p.view())?;
        let pap = col_dots(&p, &ap);
        for j in 0..c {
            if !active[j] {
                continue;
            }
            let step = rr[j] / pap[j];
            x.column_mut(j).scaled_add(step, &p.column(j));
            r.column_mut(j).scaled_add(-step, &ap.column(j));
        }
        let rr_new = col_dots(&r, &r);
        for j in 0..c {
            if !active[j] {
                continue;
            }
            if rr_new[j].sqrt() <= tol * b_norm[j] {
                active[j] = false;
                continue;
            }
            let beta = rr_new[j] / rr[j];
            let mut pj = p.column_mut(j);
            pj *= beta;
            pj += &r.column(j);
            rr[j] = rr_new[j];
        }
    }
    if active.iter().any(|&a| a) {
        let worst = (0..c)
            .filter(|&j| active[j])
            .map(|j| r.column(j).dot(&r.column(j)).sqrt() / b_norm[j])
            .fold(0.0f64, f64::max);
        return Err(Error::NoConvergence(format!(
            "CG reached {max_iter} iterations with relative residual {worst:e}"
        )));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_lambda_is_identity() {
        let l = SparseMatrix::from_dense(array![[1.0, -1.0], [-1.0, 1.0]].view()).unwrap();
        let b = array![[0.3, 1.0], [-2.0, 5.0]];
        assert_eq!(cg_solve(&l, 0.0, b.view(), 1e-8).unwrap(), b);
    }

    #[test]
    fn two_node_system() {
        let l = SparseMatrix::from_dense(array![[1.0, -1.0], [-1.0, 1.0]].view()).unwrap();
        let x = cg_solve(&l, 1.0, array![[1.0], [0.0]].view(), 1e-12).unwrap();
        assert!((x[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
        assert!((x[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn residual_meets_tolerance_per_column() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let n = 60;
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..i {
                if r.gen::<f64>() < 0.1 {
                    let w = r.gen_range(0.1..1.0);
                    entries.push((i, j, -w));
                    entries.push((j, i, -w));
                    entries.push((i, i, w));
                    entries.push((j, j, w));
                }
            }
        }
        let l = SparseMatrix::from_triplets(n, entries).unwrap();
        let b = Array2::from_shape_fn((n, 4), |_| r.gen_range(-1.0..1.0));
        let x = cg_solve(&l, 3.0, b.view(), 1e-10).unwrap();
        let ax = apply(&l, 3.0, x.view()).unwrap();
        for j in 0..4 {
            let res = (&ax.column(j) - &b.column(j)).mapv(|v| v * v).sum().sqrt();
            let bn = b.column(j).mapv(|v| v * v).sum().sqrt();
            assert!(res <= 1e-10 * bn * 1.0001);
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let l = SparseMatrix::from_dense(
            array![[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]].view(),
        )
        .unwrap();
        let err =
            cg_solve_with(&l, 100.0, array![[1.0], [0.0], [0.0]].view(), 1e-14, 1).unwrap_err();
        assert!(matches!(err, Error::NoConvergence(_)));
    }
}
