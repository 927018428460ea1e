//! Diffusion operators on point-cloud graphs and the multi-kernel bank that
//! forms the propagation stage of every network layer.
//!
//! Three diffusion modes are supported:
//!
//! * `rw`: `t` applications of a propagation matrix, either `I - L_rw` or
//!   `I - L_sym` (see [`Propagation`]),
//! * `exact-cg`: the implicit step `(λ L_sym + I)^{-1} P` solved by CG,
//! * `exact-spectral`: the same step restricted to the `m` smallest
//!   eigenpairs, `Q (λΛ + I)^{-1} Qᵀ P`.
//!
//! Every mode is a fixed linear map, so its adjoint (used by backprop) is
//! the transposed map: the identical operator for the symmetric variants.

mod cg;
mod lanczos;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::spgraph::{
    build_knn, distance_graph, gaussian_adjacency, laplacian, propagation, LaplacianKind,
    SparseMatrix,
};

pub use cg::{cg_solve, cg_solve_with, DEFAULT_CG_MAX_ITER, DEFAULT_CG_TOL};
pub use lanczos::{lanczos_eigs, lanczos_eigs_with, LanczosOptions, SpectralDecomposition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionMode {
    Rw,
    ExactSpectral,
    ExactCg,
}

/// Normalization of the random-walk propagation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagation {
    /// `I - L_sym = D^{-1/2} A D^{-1/2}`.
    SymNormalized,
    /// `I - L_rw = D^{-1} A`; row-stochastic, preserves constant signals.
    RwNormalized,
}

impl Propagation {
    fn kind(self) -> LaplacianKind {
        match self {
            Propagation::SymNormalized => LaplacianKind::Sym,
            Propagation::RwNormalized => LaplacianKind::Rw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub mode: DiffusionMode,
    /// Propagation steps (`rw` mode).
    pub t: usize,
    /// Diffusion time (exact modes).
    pub lambda: f64,
    pub propagation: Propagation,
    /// Eigenpairs kept by `exact-spectral`.
    pub m: usize,
    pub cg_tol: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            mode: DiffusionMode::Rw,
            t: 7,
            lambda: 1.0,
            propagation: Propagation::SymNormalized,
            m: 64,
            cg_tol: DEFAULT_CG_TOL,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.mode == DiffusionMode::ExactSpectral && self.m == 0 {
            return Err(Error::InvalidArgument("exact-spectral needs m >= 1".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::InvalidArgument("cg_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// One kernel of a bank, in the representation its diffusion mode needs.
#[derive(Debug, Clone)]
pub enum DiffusionOperator {
    Propagation {
        matrix: SparseMatrix,
        /// Present only when `matrix` is not symmetric.
        transpose: Option<SparseMatrix>,
    },
    Laplacian(SparseMatrix),
    Spectral(SpectralDecomposition),
}

impl DiffusionOperator {
    pub fn n(&self) -> usize {
        match self {
            DiffusionOperator::Propagation { matrix, .. } => matrix.n(),
            DiffusionOperator::Laplacian(l) => l.n(),
            DiffusionOperator::Spectral(d) => d.n(),
        }
    }

    /// Build the operator for one adjacency.
    pub fn from_adjacency(a: &SparseMatrix, config: &DiffusionConfig, seed: u64) -> Result<Self> {
        Ok(match config.mode {
            DiffusionMode::Rw => {
                let matrix = propagation(a, config.propagation.kind())?;
                let transpose = match config.propagation {
                    Propagation::SymNormalized => None,
                    Propagation::RwNormalized => Some(matrix.transpose()),
                };
                DiffusionOperator::Propagation { matrix, transpose }
            }
            DiffusionMode::ExactCg => {
                DiffusionOperator::Laplacian(laplacian(a, LaplacianKind::Sym)?)
            }
            DiffusionMode::ExactSpectral => {
                let l = laplacian(a, LaplacianKind::Sym)?;
                let m = config.m.min(l.n());
                DiffusionOperator::Spectral(lanczos_eigs(&l, m, seed)?)
            }
        })
    }
}

fn repeat_spmm(m: &SparseMatrix, t: usize, p: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut x = p.to_owned();
    for _ in 0..t {
        x = m.spmm(x.view())?;
    }
    Ok(x)
}

fn spectral_filter(d: &SpectralDecomposition, lambda: f64, p: ArrayView2<f64>) -> Array2<f64> {
    let mut coeff = d.eigvecs.t().dot(&p);
    for (mut row, &ev) in coeff.axis_iter_mut(Axis(0)).zip(&d.eigvals) {
        row /= lambda * ev + 1.0;
    }
    d.eigvecs.dot(&coeff)
}

/// Diffuse the feature matrix `p` (`n x f`) with one operator.
pub fn diffuse(
    op: &DiffusionOperator,
    config: &DiffusionConfig,
    p: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    apply_operator(op, config, p, false)
}

/// Adjoint of [`diffuse`]: `Kᵀ g` for the linear map `K` it applies.
pub fn diffuse_adjoint(
    op: &DiffusionOperator,
    config: &DiffusionConfig,
    g: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    apply_operator(op, config, g, true)
}

fn apply_operator(
    op: &DiffusionOperator,
    config: &DiffusionConfig,
    p: ArrayView2<f64>,
    adjoint: bool,
) -> Result<Array2<f64>> {
    if p.nrows() != op.n() {
        return Err(Error::Shape(format!(
            "operator on {} nodes applied to {} rows",
            op.n(),
            p.nrows()
        )));
    }
    let out = match (op, config.mode) {
        (DiffusionOperator::Propagation { matrix, transpose }, DiffusionMode::Rw) => {
            let m = match (adjoint, transpose) {
                (true, Some(t)) => t,
                _ => matrix,
            };
            repeat_spmm(m, config.t, p)?
        }
        (DiffusionOperator::Laplacian(l), DiffusionMode::ExactCg) => {
            cg_solve(l, config.lambda, p, config.cg_tol)?
        }
        (DiffusionOperator::Spectral(d), DiffusionMode::ExactSpectral) => {
            spectral_filter(d, config.lambda, p)
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "operator representation does not match diffusion mode {:?}",
                config.mode
            )))
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("diffusion output".into()));
    }
    Ok(out)
}

/// Per-σ diffusion operators over one shared kNN graph.
#[derive(Debug, Clone)]
pub struct KernelBank {
    /// Ascending.
    pub sigmas: Vec<f64>,
    pub operators: Vec<DiffusionOperator>,
    pub config: DiffusionConfig,
    pub k: usize,
}

impl KernelBank {
    pub fn n(&self) -> usize {
        self.operators[0].n()
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }
}

/// Build the kNN graph once and one operator per σ on it.
pub fn build_kernel_bank(
    coords: &[[f64; 3]],
    sigmas: &[f64],
    k: usize,
    config: &DiffusionConfig,
) -> Result<KernelBank> {
    if sigmas.is_empty() {
        return Err(Error::InvalidArgument(
            "kernel bank needs at least one sigma".into(),
        ));
    }
    config.validate()?;
    let mut sigmas = sigmas.to_vec();
    sigmas.sort_by(f64::total_cmp);
    let nb = build_knn(coords, k)?;
    let dist = distance_graph(&nb)?;
    let operators = sigmas
        .par_iter()
        .enumerate()
        .map(|(s, &sigma)| {
            let a = gaussian_adjacency(&dist, sigma)?;
            DiffusionOperator::from_adjacency(
                &a,
                config,
                rng::derive_seed(0, "bank-eigs", s as u64, 0),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelBank {
        sigmas,
        operators,
        config: *config,
        k,
    })
}

/// Diffuse `p` (`n x f`) with every kernel; block `s` of the `n x (S·f)`
/// output holds kernel `s`.
pub fn apply_bank(bank: &KernelBank, p: ArrayView2<f64>) -> Result<Array2<f64>> {
    let f = p.ncols();
    let blocks = bank
        .operators
        .par_iter()
        .map(|op| diffuse(op, &bank.config, p))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((p.nrows(), f * bank.len()));
    for (s, b) in blocks.iter().enumerate() {
        out.slice_mut(s![.., s * f..(s + 1) * f]).assign(b);
    }
    Ok(out)
}

/// Adjoint of [`apply_bank`]: `Σ_s K_sᵀ g_s` for `g` of width `S·f`.
pub fn apply_bank_adjoint(bank: &KernelBank, g: ArrayView2<f64>) -> Result<Array2<f64>> {
    let s_count = bank.len();
    if !g.ncols().is_multiple_of(s_count) {
        return Err(Error::Shape(format!(
            "gradient width {} is not a multiple of {s_count} kernels",
            g.ncols()
        )));
    }
    let f = g.ncols() / s_count;
    let parts = bank
        .operators
        .par_iter()
        .enumerate()
        .map(|(s, op)| diffuse_adjoint(op, &bank.config, g.slice(s![.., s * f..(s + 1) * f])))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((g.nrows(), f));
    for part in &parts {
        out += part;
    }
    Ok(out)
}
