//! Truncated Fock-space linear algebra: state vectors, canonical operators,
//! Hermitian eigendecomposition, matrix functions, tensor products and partial
//! traces. Everything else in the crate is built on top of these values.
//!
//! Convention: the quadratures satisfy ⟨q̂⟩ = √2·Re(α) and ⟨p̂⟩ = √2·Im(α) on a
//! coherent state |α⟩ (shot-noise variance 1/2 units). Joint spaces are ordered
//! A ⊗ B with the A index slow, so `kron(x, y)[(a·dB + b, a'·dB + b')] = x[a,a']·y[b,b']`.

use faer::{c64, Mat, MatRef, Side};
use std::sync::Once;
use thiserror::Error;

static LINALG_INIT: Once = Once::new();

/// Forces sequential dense kernels so results are bit-reproducible regardless
/// of how many sweep workers are running.
pub(crate) fn init_linalg() {
    LINALG_INIT.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

#[derive(Debug, Error)]
pub enum FockError {
    #[error("eigensolver failed to converge on a {dim}×{dim} Hermitian matrix")]
    EigenFailed { dim: usize },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
}

/// A state vector on the truncated Fock space spanned by |0⟩..|n_cutoff⟩.
#[derive(Debug, Clone)]
pub struct FockVector {
    amplitudes: Vec<c64>,
}

impl FockVector {
    pub fn new(amplitudes: Vec<c64>) -> Self {
        assert!(!amplitudes.is_empty(), "Fock vector needs dim >= 1");
        Self { amplitudes }
    }

    pub fn basis_state(n: usize, dim: usize) -> Self {
        assert!(n < dim);
        let mut amplitudes = vec![c64::new(0.0, 0.0); dim];
        amplitudes[n] = c64::new(1.0, 0.0);
        Self { amplitudes }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitude(&self, n: usize) -> c64 {
        self.amplitudes[n]
    }

    pub fn amplitudes(&self) -> &[c64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// ⟨self|other⟩ with the left argument conjugated.
    pub fn dot(&self, other: &FockVector) -> c64 {
        assert_eq!(self.dim(), other.dim());
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// The rank-one projector |v⟩⟨v| (unnormalized if the vector is).
    pub fn projector(&self) -> HermitianOperator {
        let d = self.dim();
        HermitianOperator::from_fn(d, |i, j| self.amplitudes[i] * self.amplitudes[j].conj())
    }
}

/// Truncated coherent state |α⟩ with ⟨n|α⟩ = e^{-|α|²/2} αⁿ/√(n!), computed by
/// the stable recurrence c_{n+1} = c_n·α/√(n+1).
pub fn coherent_state_fock(alpha: c64, n_cutoff: usize) -> FockVector {
    let mut amplitudes = Vec::with_capacity(n_cutoff + 1);
    let mut c = c64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
    amplitudes.push(c);
    for n in 0..n_cutoff {
        c *= alpha / c64::new(((n + 1) as f64).sqrt(), 0.0);
        amplitudes.push(c);
    }
    FockVector::new(amplitudes)
}

/// Dense complex Hermitian matrix; every constructor symmetrizes, so the
/// stored entries always satisfy entry(i,j) = conj(entry(j,i)) exactly.
#[derive(Debug, Clone)]
pub struct HermitianOperator {
    mat: Mat<c64>,
}

impl HermitianOperator {
    /// Builds from an arbitrary square matrix by averaging with its adjoint.
    pub fn from_mat(m: Mat<c64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "Hermitian operator must be square");
        let n = m.nrows();
        let mut out = Mat::<c64>::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = c64::new(m[(i, i)].re, 0.0);
            for j in 0..i {
                let v = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
                out[(i, j)] = v;
                out[(j, i)] = v.conj();
            }
        }
        Self { mat: out }
    }

    pub fn from_fn(dim: usize, f: impl Fn(usize, usize) -> c64) -> Self {
        Self::from_mat(Mat::from_fn(dim, dim, f))
    }

    pub fn zeros(dim: usize) -> Self {
        Self { mat: Mat::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mat: Mat::identity(dim, dim) }
    }

    pub fn diagonal(entries: &[f64]) -> Self {
        let d = entries.len();
        Self::from_fn(d, |i, j| {
            if i == j {
                c64::new(entries[i], 0.0)
            } else {
                c64::new(0.0, 0.0)
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> c64 {
        self.mat[(i, j)]
    }

    pub fn mat(&self) -> MatRef<'_, c64> {
        self.mat.as_ref()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.mat[(i, i)].re).sum()
    }

    /// Hilbert–Schmidt pairing Re Tr[A·B]; real for Hermitian arguments.
    pub fn inner(&self, other: &HermitianOperator) -> f64 {
        assert_eq!(self.dim(), other.dim());
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                // Tr[AB] = Σ_ij A_ij B_ji; B_ji = conj(B_ij)
                let a = self.mat[(i, j)];
                let b = other.mat[(i, j)].conj();
                acc += a.re * b.re - a.im * b.im;
            }
        }
        acc
    }

    pub fn frobenius_norm(&self) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += self.mat[(i, j)].norm_sqr();
            }
        }
        acc.sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let n = self.dim();
        Self {
            mat: Mat::from_fn(n, n, |i, j| self.mat[(i, j)] * s),
        }
    }

    pub fn add(&self, other: &HermitianOperator) -> Self {
        assert_eq!(self.dim(), other.dim());
        let n = self.dim();
        Self {
            mat: Mat::from_fn(n, n, |i, j| self.mat[(i, j)] + other.mat[(i, j)]),
        }
    }

    pub fn sub(&self, other: &HermitianOperator) -> Self {
        assert_eq!(self.dim(), other.dim());
        let n = self.dim();
        Self {
            mat: Mat::from_fn(n, n, |i, j| self.mat[(i, j)] - other.mat[(i, j)]),
        }
    }

    /// Eigendecomposition M = V diag(λ) V† with eigenvalues sorted descending.
    pub fn hermitian_eig(&self) -> Result<EigDecomposition, FockError> {
        init_linalg();
        let n = self.dim();
        let evd = self
            .mat
            .self_adjoint_eigen(Side::Lower)
            .map_err(|_| FockError::EigenFailed { dim: n })?;
        let u = evd.U();
        let s = evd.S();
        // faer returns nondecreasing order; flip to descending
        let eigenvalues: Vec<f64> = (0..n).map(|k| s[n - 1 - k].re).collect();
        let vectors = Mat::from_fn(n, n, |i, k| u[(i, n - 1 - k)]);
        Ok(EigDecomposition { eigenvalues, vectors })
    }

    /// Eigenvalues only (descending); cheaper than the full decomposition.
    pub fn eigenvalues(&self) -> Result<Vec<f64>, FockError> {
        init_linalg();
        let n = self.dim();
        let mut vals = self
            .mat
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|_| FockError::EigenFailed { dim: n })?;
        vals.reverse();
        Ok(vals)
    }

    pub fn min_eigenvalue(&self) -> Result<f64, FockError> {
        Ok(*self
            .eigenvalues()?
            .last()
            .expect("dim >= 1"))
    }

    /// V diag(f(λ)) V† for a real function of the (real) spectrum.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> Result<Self, FockError> {
        let eig = self.hermitian_eig()?;
        Ok(eig.assemble(|l| f(l)))
    }

    /// Eigenvalue-wise log₂ with eigenvalues below `floor` clipped to `floor`
    /// before the logarithm.
    pub fn matrix_log_clipped(&self, floor: f64) -> Result<Self, FockError> {
        assert!(floor > 0.0, "log floor must be positive");
        self.map_eigenvalues(|l| l.max(floor).log2())
    }

    /// Eigenvalue-wise square root with negative eigenvalues clipped to zero.
    pub fn matrix_sqrt_clipped(&self) -> Result<Self, FockError> {
        self.map_eigenvalues(|l| l.max(0.0).sqrt())
    }
}

/// Default clipping floor for [`HermitianOperator::matrix_log_clipped`]; below
/// the double-precision resolution of the perturbed spectra handled here.
pub const LOG_FLOOR: f64 = 1e-14;

/// Result of [`HermitianOperator::hermitian_eig`]: eigenvalues descending,
/// eigenvector matrix with matching columns.
pub struct EigDecomposition {
    pub eigenvalues: Vec<f64>,
    pub vectors: Mat<c64>,
}

impl EigDecomposition {
    /// V diag(g(λ)) V†.
    pub fn assemble(&self, g: impl Fn(f64) -> f64) -> HermitianOperator {
        let n = self.eigenvalues.len();
        let mut scaled = Mat::<c64>::zeros(n, n);
        for k in 0..n {
            let gl = g(self.eigenvalues[k]);
            for i in 0..n {
                scaled[(i, k)] = self.vectors[(i, k)] * gl;
            }
        }
        let m = &scaled * self.vectors.adjoint();
        HermitianOperator::from_mat(m)
    }

    pub fn reconstruct(&self) -> HermitianOperator {
        self.assemble(|l| l)
    }
}

/// The canonical operators on the truncated space: q̂, p̂, and the derived
/// n̂ = ½(q̂² + p̂² − 1), d̂ = q̂² − p̂². The derived pair is intentionally built
/// from the truncated q̂, p̂, so the top one or two Fock levels carry the usual
/// cutoff edge effects.
pub struct Quadratures {
    pub q: HermitianOperator,
    pub p: HermitianOperator,
    pub n: HermitianOperator,
    pub d: HermitianOperator,
}

pub fn ladder_and_quadratures(n_cutoff: usize) -> Quadratures {
    assert!(n_cutoff >= 1, "need at least two Fock levels");
    let dim = n_cutoff + 1;
    // annihilation operator: a|n⟩ = √n |n-1⟩
    let mut a = Mat::<c64>::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = c64::new((n as f64).sqrt(), 0.0);
    }
    let adag = a.adjoint().to_owned();
    let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
    let q = HermitianOperator::from_mat({
        let s = &a + &adag;
        Mat::from_fn(dim, dim, |i, j| s[(i, j)] * inv_sqrt2)
    });
    let p = HermitianOperator::from_mat({
        let d = &adag - &a;
        Mat::from_fn(dim, dim, |i, j| d[(i, j)] * c64::new(0.0, inv_sqrt2))
    });
    let q2 = q.mat() * q.mat();
    let p2 = p.mat() * p.mat();
    let n_op = HermitianOperator::from_mat(Mat::from_fn(dim, dim, |i, j| {
        let diag = if i == j { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) };
        (q2[(i, j)] + p2[(i, j)] - diag) * 0.5
    }));
    let d_op = HermitianOperator::from_mat(Mat::from_fn(dim, dim, |i, j| q2[(i, j)] - p2[(i, j)]));
    Quadratures { q, p, n: n_op, d: d_op }
}

/// Kronecker product with the first factor on the slow index.
pub fn kron(x: &HermitianOperator, y: &HermitianOperator) -> HermitianOperator {
    HermitianOperator::from_mat(kron_mat(x.mat(), y.mat()))
}

pub(crate) fn kron_mat(x: MatRef<'_, c64>, y: MatRef<'_, c64>) -> Mat<c64> {
    let (ra, ca) = (x.nrows(), x.ncols());
    let (rb, cb) = (y.nrows(), y.ncols());
    Mat::from_fn(ra * rb, ca * cb, |i, j| {
        x[(i / rb, j / cb)] * y[(i % rb, j % cb)]
    })
}

/// Tr_B over the fast index: returns the dim_a × dim_a reduction.
pub fn partial_trace_b(op: &HermitianOperator, dim_a: usize, dim_b: usize) -> HermitianOperator {
    assert_eq!(
        op.dim(),
        dim_a * dim_b,
        "operator dim {} is not {dim_a}×{dim_b}",
        op.dim()
    );
    HermitianOperator::from_fn(dim_a, |x, y| {
        let mut acc = c64::new(0.0, 0.0);
        for b in 0..dim_b {
            acc += op.entry(x * dim_b + b, y * dim_b + b);
        }
        acc
    })
}

/// Tr_A over the slow index: returns the dim_b × dim_b reduction.
pub fn partial_trace_a(op: &HermitianOperator, dim_a: usize, dim_b: usize) -> HermitianOperator {
    assert_eq!(
        op.dim(),
        dim_a * dim_b,
        "operator dim {} is not {dim_a}×{dim_b}",
        op.dim()
    );
    HermitianOperator::from_fn(dim_b, |i, j| {
        let mut acc = c64::new(0.0, 0.0);
        for a in 0..dim_a {
            acc += op.entry(a * dim_b + i, a * dim_b + j);
        }
        acc
    })
}
