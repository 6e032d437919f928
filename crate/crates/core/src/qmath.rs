//! Dense complex linear algebra for one- and two-qubit polarization states,
//! plus the entanglement metrics used to grade links.
//!
//! Two-qubit basis order is fixed as (HH, HV, VH, VV). The first tensor slot
//! always belongs to the node listed first in a link name, so an `A-B` state
//! has Alice's photon in slot one.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

/// A state vector in the computational (H/V) basis.
pub type Ket = Vec<C64>;

const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-12;
const PSD_TOL: f64 = -1e-10;
const SYMMETRIZE_TOL: f64 = 1e-10;
const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("matrix is not Hermitian (max asymmetry {0:e})")]
    NonHermitianInput(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("trace {0} differs from 1")]
    TraceNotUnity(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositive(f64),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
}

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Row-major dense complex matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for col in 0..self.cols {
                let z = self[(r, col)];
                write!(f, "{:+.4}{:+.4}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<C64>]) -> Self {
        let r = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols, data }
    }

    pub fn from_real(rows: &[&[f64]]) -> Self {
        let rows: Vec<Vec<C64>> = rows
            .iter()
            .map(|row| row.iter().map(|&x| C64::new(x, 0.0)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn diag(values: &[C64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// |ket⟩⟨ket|
    pub fn outer(ket: &[C64]) -> Self {
        let n = ket.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = ket[i] * ket[j].conj();
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for col in 0..self.cols {
                m[(col, r)] = self[(r, col)].conj();
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for col in 0..self.cols {
                m[(col, r)] = self[(r, col)];
            }
        }
        m
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest |m_ij - conj(m_ji)|.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for r in 0..self.rows {
            for col in r..self.cols {
                worst = worst.max((self[(r, col)] - self[(col, r)].conj()).norm());
            }
        }
        worst
    }

    /// (M + M†)/2
    pub fn hermitian_part(&self) -> Self {
        (self + &self.adjoint()).scale_real(0.5)
    }

    pub fn apply(&self, v: &[C64]) -> Ket {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| (0..self.cols).map(|col| self[(r, col)] * v[col]).sum())
            .collect()
    }

    /// ⟨v|M|v⟩
    pub fn expectation(&self, v: &[C64]) -> C64 {
        let mv = self.apply(v);
        v.iter().zip(&mv).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (r, col): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + col]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (r, col): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + col]
    }
}

impl Mul for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        out
    }
}

impl Add for &CMatrix {
    type Output = CMatrix;
    fn add(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &CMatrix {
    type Output = CMatrix;
    fn sub(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Kronecker product, row-major block convention: block (i, j) is a[i,j]·b.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let mut out = CMatrix::zeros(a.rows * b.rows, a.cols * b.cols);
    for ar in 0..a.rows {
        for ac in 0..a.cols {
            let s = a[(ar, ac)];
            for br in 0..b.rows {
                for bc in 0..b.cols {
                    out[(ar * b.rows + br, ac * b.cols + bc)] = s * b[(br, bc)];
                }
            }
        }
    }
    out
}

pub fn kron_ket(a: &[C64], b: &[C64]) -> Ket {
    a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect()
}

pub fn normalize(ket: &[C64]) -> Ket {
    let n = ket.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    ket.iter().map(|z| z / n).collect()
}

pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Eigendecomposition of a Hermitian matrix. `vectors` holds eigenvectors as
/// columns, in the same order as `values` (ascending).
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

impl Eigen {
    /// V·diag(λ)·V†
    pub fn reconstruct(&self) -> CMatrix {
        let d = CMatrix::diag(
            &self
                .values
                .iter()
                .map(|&v| C64::new(v, 0.0))
                .collect::<Vec<_>>(),
        );
        &(&self.vectors * &d) * &self.vectors.adjoint()
    }
}

/// Cyclic complex Jacobi eigensolver for Hermitian matrices.
///
/// Inputs whose asymmetry is at most 1e-10 are symmetrized first; anything
/// worse is rejected.
pub fn eigh(m: &CMatrix) -> Result<Eigen, MathError> {
    if !m.is_square() {
        return Err(MathError::NotSquare(m.rows, m.cols));
    }
    let asym = m.max_asymmetry();
    if asym > SYMMETRIZE_TOL {
        return Err(MathError::NonHermitianInput(asym));
    }
    let n = m.rows;
    let mut a = m.hermitian_part();
    let mut v = CMatrix::identity(n);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)].norm())
            .fold(0.0, f64::max);
        if off < JACOBI_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let r = apq.norm();
                if r < JACOBI_TOL * 1e-3 {
                    continue;
                }
                let phase = apq / r;
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let zeta = (aqq - app) / (2.0 * r);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (zeta * zeta + 1.0).sqrt())
                } else {
                    -1.0 / (-zeta + (zeta * zeta + 1.0).sqrt())
                };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                // Unitary acting on the (p, q) plane: columns
                // u_p = (c, -s·conj(phase)), u_q = (s·phase, c).
                let upp = C64::new(cs, 0.0);
                let uqp = -phase.conj() * sn;
                let upq = phase * sn;
                let uqq = C64::new(cs, 0.0);
                // A <- A U
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * upp + akq * uqp;
                    a[(k, q)] = akp * upq + akq * uqq;
                }
                // A <- U† A
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = upp.conj() * apk + uqp.conj() * aqk;
                    a[(q, k)] = upq.conj() * apk + uqq.conj() * aqk;
                }
                a[(p, q)] = C64::new(0.0, 0.0);
                a[(q, p)] = C64::new(0.0, 0.0);
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * upp + vkq * uqp;
                    v[(k, q)] = vkp * upq + vkq * uqq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(Eigen { values, vectors })
}

pub fn eigenvalues(m: &CMatrix) -> Result<Vec<f64>, MathError> {
    eigh(m).map(|e| e.values)
}

/// Σ|λ_i| of a Hermitian matrix.
pub fn trace_norm(m: &CMatrix) -> Result<f64, MathError> {
    Ok(eigenvalues(m)?.iter().map(|l| l.abs()).sum())
}

fn validate_density(m: &CMatrix, dim: usize) -> Result<(), MathError> {
    if !m.is_square() {
        return Err(MathError::NotSquare(m.rows, m.cols));
    }
    if m.rows != dim {
        return Err(MathError::DimensionMismatch {
            expected: dim,
            found: m.rows,
        });
    }
    let asym = m.max_asymmetry();
    if asym > HERMITIAN_TOL {
        return Err(MathError::NonHermitianInput(asym));
    }
    let tr = m.trace().re;
    if (tr - 1.0).abs() > TRACE_TOL {
        return Err(MathError::TraceNotUnity(tr));
    }
    let min = eigenvalues(m)?[0];
    if min < PSD_TOL {
        return Err(MathError::NotPositive(min));
    }
    Ok(())
}

macro_rules! density_type {
    ($name:ident, $dim:expr) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(try_from = "CMatrix", into = "CMatrix")]
        pub struct $name(CMatrix);

        impl $name {
            pub const DIM: usize = $dim;

            /// Validates Hermiticity, unit trace and positivity.
            pub fn new(m: CMatrix) -> Result<Self, MathError> {
                validate_density(&m, $dim)?;
                Ok(Self(m))
            }

            /// Skips validation; callers guarantee the invariants by construction.
            pub(crate) fn from_trusted(m: CMatrix) -> Self {
                debug_assert_eq!(m.rows(), $dim);
                Self(m)
            }

            pub fn from_pure(ket: &[C64]) -> Result<Self, MathError> {
                if ket.len() != $dim {
                    return Err(MathError::DimensionMismatch {
                        expected: $dim,
                        found: ket.len(),
                    });
                }
                Ok(Self(CMatrix::outer(&normalize(ket))))
            }

            pub fn maximally_mixed() -> Self {
                Self(CMatrix::identity($dim).scale_real(1.0 / $dim as f64))
            }

            /// Convex combination w·a + (1−w)·b.
            pub fn mix(a: &Self, b: &Self, w: f64) -> Self {
                Self(&a.0.scale_real(w) + &b.0.scale_real(1.0 - w))
            }

            /// Elementwise mean of a non-empty set of states.
            pub fn mean<'a>(states: impl IntoIterator<Item = &'a Self>) -> Option<Self> {
                let mut acc = CMatrix::zeros($dim, $dim);
                let mut n = 0usize;
                for s in states {
                    acc = &acc + &s.0;
                    n += 1;
                }
                (n > 0).then(|| Self(acc.scale_real(1.0 / n as f64)))
            }

            /// U ρ U†
            pub fn conjugate_by(&self, u: &CMatrix) -> Self {
                Self(&(u * &self.0) * &u.adjoint())
            }

            pub fn matrix(&self) -> &CMatrix {
                &self.0
            }

            pub fn into_matrix(self) -> CMatrix {
                self.0
            }

            pub fn purity(&self) -> f64 {
                (&self.0 * &self.0).trace().re
            }
        }

        impl TryFrom<CMatrix> for $name {
            type Error = MathError;
            fn try_from(m: CMatrix) -> Result<Self, MathError> {
                Self::new(m)
            }
        }

        impl From<$name> for CMatrix {
            fn from(d: $name) -> CMatrix {
                d.0
            }
        }

        impl AsRef<CMatrix> for $name {
            fn as_ref(&self) -> &CMatrix {
                &self.0
            }
        }

        impl DensityOperator for $name {
            const DIM: usize = $dim;
        }

        impl TrustedDensity for $name {
            fn trusted(m: CMatrix) -> Self {
                Self::from_trusted(m)
            }

            fn mean_of(states: &[Self]) -> Option<Self> {
                Self::mean(states)
            }
        }
    };
}

/// Common view of validated density matrices of a fixed dimension.
pub trait DensityOperator: Clone + AsRef<CMatrix> {
    const DIM: usize;
}

pub(crate) trait TrustedDensity: DensityOperator {
    fn trusted(m: CMatrix) -> Self;
    fn mean_of(states: &[Self]) -> Option<Self>;
}

density_type!(DensityMatrix2Q, 4);
density_type!(DensityMatrix1Q, 2);

/// Which tensor slot of a two-qubit state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subsystem {
    First,
    Second,
}

impl Subsystem {
    pub fn other(self) -> Self {
        match self {
            Subsystem::First => Subsystem::Second,
            Subsystem::Second => Subsystem::First,
        }
    }
}

/// Named single-qubit and Bell states.
pub mod states {
    use super::*;

    pub fn h() -> Ket {
        vec![c(1.0, 0.0), c(0.0, 0.0)]
    }

    pub fn v() -> Ket {
        vec![c(0.0, 0.0), c(1.0, 0.0)]
    }

    pub fn d() -> Ket {
        normalize(&[c(1.0, 0.0), c(1.0, 0.0)])
    }

    pub fn a() -> Ket {
        normalize(&[c(1.0, 0.0), c(-1.0, 0.0)])
    }

    /// (|H⟩ + i|V⟩)/√2
    pub fn r() -> Ket {
        normalize(&[c(1.0, 0.0), c(0.0, 1.0)])
    }

    /// (|H⟩ − i|V⟩)/√2
    pub fn l() -> Ket {
        normalize(&[c(1.0, 0.0), c(0.0, -1.0)])
    }

    /// (|HV⟩ + e^{iφ}|VH⟩)/√2
    pub fn psi_phase(phi: f64) -> Ket {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        vec![
            c(0.0, 0.0),
            c(s, 0.0),
            C64::from_polar(s, phi),
            c(0.0, 0.0),
        ]
    }

    pub fn psi_plus() -> Ket {
        psi_phase(0.0)
    }

    pub fn psi_minus() -> Ket {
        psi_phase(std::f64::consts::PI)
    }

    pub fn phi_plus() -> Ket {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        vec![c(s, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(s, 0.0)]
    }

    pub fn phi_minus() -> Ket {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        vec![c(s, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-s, 0.0)]
    }

    pub fn bell_density(ket: &[C64]) -> DensityMatrix2Q {
        DensityMatrix2Q::from_pure(ket).expect("4-dim ket")
    }

    /// p·|Ψ+⟩⟨Ψ+| + (1−p)·I/4
    pub fn werner(p: f64) -> DensityMatrix2Q {
        DensityMatrix2Q::mix(
            &bell_density(&psi_plus()),
            &DensityMatrix2Q::maximally_mixed(),
            p,
        )
    }
}

/// Partial transpose over the second subsystem: ρ^{T_B}[(i,j),(k,l)] = ρ[(i,l),(k,j)].
pub fn partial_transpose(rho: &DensityMatrix2Q) -> CMatrix {
    partial_transpose_on(rho, Subsystem::Second)
}

pub fn partial_transpose_on(rho: &DensityMatrix2Q, which: Subsystem) -> CMatrix {
    partial_transpose_raw(rho.matrix(), which)
}

fn partial_transpose_raw(m: &CMatrix, which: Subsystem) -> CMatrix {
    let mut out = CMatrix::zeros(4, 4);
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    let src = match which {
                        Subsystem::Second => (2 * i + l, 2 * k + j),
                        Subsystem::First => (2 * k + j, 2 * i + l),
                    };
                    out[(2 * i + j, 2 * k + l)] = m[src];
                }
            }
        }
    }
    out
}

/// Partial transpose of an arbitrary 4×4 matrix (second slot); used for the
/// involution property on non-physical inputs.
pub fn partial_transpose_matrix(m: &CMatrix) -> CMatrix {
    assert_eq!((m.rows(), m.cols()), (4, 4));
    partial_transpose_raw(m, Subsystem::Second)
}

/// log₂‖ρ^{T_B}‖₁, clamped at zero.
pub fn log_negativity(rho: &DensityMatrix2Q) -> Result<f64, MathError> {
    let norm = trace_norm(&partial_transpose(rho))?;
    Ok(norm.log2().max(0.0))
}

/// ⟨ψ|ρ|ψ⟩ for a normalized target.
pub fn fidelity_with_pure(rho: &impl AsRef<CMatrix>, target: &[C64]) -> Result<f64, MathError> {
    let m = rho.as_ref();
    if m.rows() != target.len() {
        return Err(MathError::DimensionMismatch {
            expected: m.rows(),
            found: target.len(),
        });
    }
    Ok(m.expectation(target).re.clamp(0.0, 1.0))
}

/// Uhlmann fidelity between two qubit states: tr(ρσ) + 2√(det ρ · det σ).
pub fn fidelity_1q(a: &DensityMatrix1Q, b: &DensityMatrix1Q) -> f64 {
    let det = |m: &CMatrix| (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).re.max(0.0);
    let overlap = (a.matrix() * b.matrix()).trace().re;
    (overlap + 2.0 * (det(a.matrix()) * det(b.matrix())).sqrt()).clamp(0.0, 1.0)
}

/// Reduced state of the kept qubit.
pub fn partial_trace(rho: &DensityMatrix2Q, keep: Subsystem) -> DensityMatrix1Q {
    DensityMatrix1Q::from_trusted(partial_trace_raw(rho.matrix(), keep))
}

pub(crate) fn partial_trace_raw(m: &CMatrix, keep: Subsystem) -> CMatrix {
    let mut out = CMatrix::zeros(2, 2);
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = C64::new(0.0, 0.0);
            for t in 0..2 {
                acc += match keep {
                    Subsystem::First => m[(2 * a + t, 2 * b + t)],
                    Subsystem::Second => m[(2 * t + a, 2 * t + b)],
                };
            }
            out[(a, b)] = acc;
        }
    }
    out
}

/// Stokes vector (S1, S2, S3) = (⟨σz⟩, ⟨σx⟩, ⟨σy⟩); +S1 is H, +S2 is D, +S3 is
/// (|H⟩ + i|V⟩)/√2.
pub fn stokes(rho: &DensityMatrix1Q) -> [f64; 3] {
    let m = rho.matrix();
    [
        (m[(0, 0)] - m[(1, 1)]).re,
        2.0 * m[(0, 1)].re,
        -2.0 * m[(0, 1)].im,
    ]
}

/// Quality and throughput of a distributed entangled link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntanglementSummary {
    /// ebits
    pub log_negativity: f64,
    /// pairs per second
    pub coincidence_rate: f64,
    /// ebits per second
    pub ebit_rate: f64,
    pub fidelity: f64,
}

impl EntanglementSummary {
    pub fn new(log_negativity: f64, coincidence_rate: f64, fidelity: f64) -> Self {
        Self {
            log_negativity,
            coincidence_rate,
            ebit_rate: ebit_rate(log_negativity, coincidence_rate),
            fidelity,
        }
    }
}

pub fn ebit_rate(log_negativity: f64, coincidence_rate: f64) -> f64 {
    log_negativity * coincidence_rate
}

#[cfg(test)]
mod tests {
    use super::states::*;
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    /// Closed-form eigenvalues of a 2×2 Hermitian matrix.
    fn eig2_closed_form(m: &CMatrix) -> [f64; 2] {
        let a = m[(0, 0)].re;
        let d = m[(1, 1)].re;
        let b = m[(0, 1)].norm();
        let mean = 0.5 * (a + d);
        let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        [mean - disc, mean + disc]
    }

    #[test]
    fn kron_identity_and_basis() {
        let i2 = CMatrix::identity(2);
        assert_eq!(kron(&i2, &i2), CMatrix::identity(4));
        let hv = kron(&CMatrix::outer(&h()), &CMatrix::outer(&v()));
        let expected = CMatrix::diag(&[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)]);
        assert_eq!(hv, expected);
    }

    #[test]
    fn kron_bit_flip_on_both() {
        let x = CMatrix::from_real(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let xx = kron(&x, &x);
        let hh = kron_ket(&h(), &h());
        let vv = kron_ket(&v(), &v());
        assert_eq!(xx.apply(&hh), vv);
    }

    #[test]
    fn partial_transpose_of_psi_plus() {
        let pt = partial_transpose(&bell_density(&psi_plus()));
        let ev = sorted(eigenvalues(&pt).unwrap());
        let want = [-0.5, 0.5, 0.5, 0.5];
        for (a, b) in ev.iter().zip(want) {
            assert!(close(*a, b, 1e-12), "{ev:?}");
        }
    }

    #[test]
    fn partial_transpose_product_diagonal_unchanged() {
        let rho = DensityMatrix2Q::from_pure(&kron_ket(&h(), &h())).unwrap();
        assert_eq!(partial_transpose(&rho), *rho.matrix());
    }

    #[test]
    fn werner_half_partial_transpose_spectrum() {
        let p = 0.5;
        let pt = partial_transpose(&werner(p));
        let ev = sorted(eigenvalues(&pt).unwrap());
        // p·λ(PT Ψ+) + (1−p)/4
        let mut want: Vec<f64> = [-0.5, 0.5, 0.5, 0.5]
            .iter()
            .map(|l| p * l + (1.0 - p) / 4.0)
            .collect();
        want.sort_by(f64::total_cmp);
        assert_eq!(want, vec![-0.125, 0.375, 0.375, 0.375]);
        for (a, b) in ev.iter().zip(&want) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn trace_norm_examples() {
        assert!(close(trace_norm(&CMatrix::identity(4)).unwrap(), 4.0, 1e-14));
        let pt = partial_transpose(&bell_density(&psi_plus()));
        assert!(close(trace_norm(&pt).unwrap(), 2.0, 1e-12));
        assert!(close(
            trace_norm(&partial_transpose(&werner(0.5))).unwrap(),
            1.25,
            1e-12
        ));
    }

    #[test]
    fn trace_norm_rejects_non_hermitian() {
        let m = CMatrix::from_real(&[&[1.0, 1.0], &[0.0, 1.0]]);
        assert!(matches!(trace_norm(&m), Err(MathError::NonHermitianInput(_))));
        // Tiny asymmetry is symmetrized away.
        let mut m = CMatrix::identity(2);
        m[(0, 1)] = c(1e-12, 0.0);
        assert!(close(trace_norm(&m).unwrap(), 2.0, 1e-10));
    }

    #[test]
    fn jacobi_matches_closed_form_2x2() {
        let m = CMatrix::from_rows(&[
            vec![c(0.3, 0.0), c(0.2, -0.7)],
            vec![c(0.2, 0.7), c(-1.1, 0.0)],
        ]);
        let ev = eigenvalues(&m).unwrap();
        let want = eig2_closed_form(&m);
        assert!(close(ev[0], want[0], 1e-13));
        assert!(close(ev[1], want[1], 1e-13));
    }

    #[test]
    fn log_negativity_examples() {
        assert!(close(log_negativity(&bell_density(&psi_plus())).unwrap(), 1.0, 1e-12));
        let hh = DensityMatrix2Q::from_pure(&kron_ket(&h(), &h())).unwrap();
        assert_eq!(log_negativity(&hh).unwrap(), 0.0);
        assert!(close(
            log_negativity(&werner(0.5)).unwrap(),
            1.25_f64.log2(),
            1e-12
        ));
        assert!(close(1.25_f64.log2(), 0.3219, 1e-4));
    }

    #[test]
    fn log_negativity_independent_of_transposed_side() {
        for p in [0.2, 0.5, 0.9] {
            let rho = DensityMatrix2Q::mix(
                &werner(p),
                &DensityMatrix2Q::from_pure(&kron_ket(&d(), &r())).unwrap(),
                0.7,
            );
            let a = trace_norm(&partial_transpose_on(&rho, Subsystem::First)).unwrap();
            let b = trace_norm(&partial_transpose_on(&rho, Subsystem::Second)).unwrap();
            assert!(close(a, b, 1e-12));
        }
    }

    #[test]
    fn fidelity_examples() {
        let psi = psi_plus();
        assert!(close(fidelity_with_pure(&bell_density(&psi), &psi).unwrap(), 1.0, 1e-12));
        assert!(close(
            fidelity_with_pure(&DensityMatrix2Q::maximally_mixed(), &psi).unwrap(),
            0.25,
            1e-12
        ));
        // (1+3p)/4 against a direct contraction
        let w = werner(0.5);
        let direct: C64 = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| psi[i].conj() * w.matrix()[(i, j)] * psi[j])
            .sum();
        assert!(close(direct.re, 0.625, 1e-12));
        assert!(close(fidelity_with_pure(&w, &psi).unwrap(), 0.625, 1e-12));
        assert!(matches!(
            fidelity_with_pure(&w, &h()),
            Err(MathError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn partial_trace_examples() {
        let half = CMatrix::identity(2).scale_real(0.5);
        let red = partial_trace(&bell_density(&psi_plus()), Subsystem::First);
        assert!(red.matrix().max_abs_diff(&half) < 1e-12);

        let hv = DensityMatrix2Q::from_pure(&kron_ket(&h(), &v())).unwrap();
        let red = partial_trace(&hv, Subsystem::Second);
        assert!(red.matrix().max_abs_diff(&CMatrix::outer(&v())) < 1e-12);

        let dd = DensityMatrix2Q::from_pure(&kron_ket(&d(), &d())).unwrap();
        let red = partial_trace(&dd, Subsystem::First);
        let want = CMatrix::from_real(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(red.matrix().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn ebit_rate_examples() {
        assert!(close(ebit_rate(0.89, 231.5), 206.0, 0.05));
        assert_eq!(ebit_rate(0.0, 1000.0), 0.0);
        assert_eq!(ebit_rate(1.0, 52.4), 52.4);
        let s = EntanglementSummary::new(0.96, 54.6, 0.96);
        assert_eq!(s.ebit_rate, 0.96 * 54.6);
    }

    #[test]
    fn density_validation() {
        let bad = CMatrix::identity(4);
        assert!(matches!(DensityMatrix2Q::new(bad), Err(MathError::TraceNotUnity(_))));
        let neg = CMatrix::from_real(&[&[1.5, 0.0], &[0.0, -0.5]]);
        assert!(matches!(DensityMatrix1Q::new(neg), Err(MathError::NotPositive(_))));
        assert!(matches!(
            DensityMatrix1Q::new(CMatrix::identity(4).scale_real(0.25)),
            Err(MathError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stokes_of_labels() {
        let s = stokes(&DensityMatrix1Q::from_pure(&r()).unwrap());
        assert!(close(s[2], 1.0, 1e-12) && close(s[0], 0.0, 1e-12));
        let s = stokes(&DensityMatrix1Q::from_pure(&d()).unwrap());
        assert!(close(s[1], 1.0, 1e-12));
        let s = stokes(&DensityMatrix1Q::from_pure(&v()).unwrap());
        assert!(close(s[0], -1.0, 1e-12));
    }

    #[test]
    fn uhlmann_fidelity_qubits() {
        let r = DensityMatrix1Q::from_pure(&states::r()).unwrap();
        let l = DensityMatrix1Q::from_pure(&states::l()).unwrap();
        assert!(close(fidelity_1q(&r, &r), 1.0, 1e-12));
        assert!(close(fidelity_1q(&r, &l), 0.0, 1e-12));
        let mixed = DensityMatrix1Q::maximally_mixed();
        assert!(close(fidelity_1q(&mixed, &mixed), 1.0, 1e-12));
        assert!(close(fidelity_1q(&r, &mixed), 0.5, 1e-12));
    }
}
