//! Dense complex linear algebra on finite-dimensional factored Hilbert spaces.
//!
//! Matrices are thin wrappers around `nalgebra` dynamic matrices. Tensor
//! products use the convention that the left factor varies slowest, so a
//! flat index over `d_0 ⊗ d_1 ⊗ …` is the mixed-radix number with the first
//! factor as its most significant digit.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::Tolerances;
use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, PartialEq)]
pub struct ComplexSquareMatrix(DMatrix<C64>);

impl fmt::Debug for ComplexSquareMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexSquareMatrix({}x{})", self.dim(), self.dim())?;
        for r in 0..self.dim() {
            let row: Vec<String> = (0..self.dim())
                .map(|c| {
                    let z = self.0[(r, c)];
                    format!("{:+.4}{:+.4}i", z.re, z.im)
                })
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

impl ComplexSquareMatrix {
    /// Builds a matrix from row-major entries.
    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("matrix must have dim >= 1".into()));
        }
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: row.len() });
            }
        }
        let m = DMatrix::from_fn(dim, dim, |r, c| rows[r][c]);
        Self::from_inner(m)
    }

    /// Wraps an `nalgebra` matrix, checking squareness and finiteness.
    pub fn from_inner(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidArgument("matrix must have dim >= 1".into()));
        }
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let z = m[(r, c)];
                if !(z.re.is_finite() && z.im.is_finite()) {
                    return Err(Error::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(Self(m))
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> C64) -> Self {
        Self(DMatrix::from_fn(dim, dim, f))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, |r, c| if r == c { C64::new(diag[r], 0.0) } else { ZERO })
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    /// The rank-1 projector `|v⟩⟨v|`.
    pub fn outer(v: &KetVector) -> Self {
        Self::outer_pair(v, v)
    }

    /// `|u⟩⟨v|`.
    pub fn outer_pair(u: &KetVector, v: &KetVector) -> Self {
        Self(&u.0 * v.0.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.0[(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: C64) {
        self.0[(row, col)] = value;
    }

    pub fn inner(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<C64> {
        self.0
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn scale(&self, s: C64) -> Self {
        Self(&self.0 * s)
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn apply(&self, v: &KetVector) -> KetVector {
        KetVector(&self.0 * &v.0)
    }

    /// `[A, B] = AB − BA`.
    pub fn commutator(&self, other: &Self) -> Self {
        Self(&self.0 * &other.0 - &other.0 * &self.0)
    }

    /// Max-entry norm, `max |a_rc|`.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "max_abs_diff dimension mismatch");
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).norm()))
    }

    /// Max-entry deviation from Hermiticity.
    pub fn hermitian_deviation(&self) -> f64 {
        let n = self.dim();
        let mut dev = 0.0_f64;
        for r in 0..n {
            for c in r..n {
                dev = dev.max((self.0[(r, c)] - self.0[(c, r)].conj()).norm());
            }
        }
        dev
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_deviation() <= tol
    }

    /// Max-entry deviation of `P² − P`.
    pub fn idempotency_deviation(&self) -> f64 {
        let sq = Self(&self.0 * &self.0);
        sq.max_abs_diff(self)
    }

    /// `⟨ψ|A|ψ⟩`.
    pub fn expectation(&self, psi: &KetVector) -> C64 {
        psi.0.dotc(&(&self.0 * &psi.0))
    }

    /// `⟨u|A|v⟩`.
    pub fn sandwich(&self, u: &KetVector, v: &KetVector) -> C64 {
        u.0.dotc(&(&self.0 * &v.0))
    }

    /// Restriction `B† A B` of `self` to the column space of `basis`.
    fn compress(&self, basis: &[KetVector]) -> DMatrix<C64> {
        let b = kets_as_columns(basis);
        b.adjoint() * &self.0 * b
    }
}

impl Add for &ComplexSquareMatrix {
    type Output = ComplexSquareMatrix;
    fn add(self, rhs: Self) -> ComplexSquareMatrix {
        ComplexSquareMatrix(&self.0 + &rhs.0)
    }
}

impl Sub for &ComplexSquareMatrix {
    type Output = ComplexSquareMatrix;
    fn sub(self, rhs: Self) -> ComplexSquareMatrix {
        ComplexSquareMatrix(&self.0 - &rhs.0)
    }
}

impl Mul for &ComplexSquareMatrix {
    type Output = ComplexSquareMatrix;
    fn mul(self, rhs: Self) -> ComplexSquareMatrix {
        ComplexSquareMatrix(&self.0 * &rhs.0)
    }
}

impl Neg for &ComplexSquareMatrix {
    type Output = ComplexSquareMatrix;
    fn neg(self) -> ComplexSquareMatrix {
        ComplexSquareMatrix(-&self.0)
    }
}

impl Serialize for ComplexSquareMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.dim();
        let rows: Vec<Vec<[f64; 2]>> = (0..n)
            .map(|r| (0..n).map(|c| [self.0[(r, c)].re, self.0[(r, c)].im]).collect())
            .collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ComplexSquareMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<[f64; 2]>> = Vec::deserialize(deserializer)?;
        let rows: Vec<Vec<C64>> = rows
            .into_iter()
            .map(|row| row.into_iter().map(|[re, im]| C64::new(re, im)).collect())
            .collect();
        ComplexSquareMatrix::from_rows(&rows).map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KetVector(DVector<C64>);

impl KetVector {
    pub fn new(amplitudes: Vec<C64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::InvalidArgument("ket must have dim >= 1".into()));
        }
        Ok(Self(DVector::from_vec(amplitudes)))
    }

    /// Builds a ket and checks that it is normalized within `tol`.
    pub fn normalized(amplitudes: Vec<C64>, tol: f64) -> Result<Self> {
        let v = Self::new(amplitudes)?;
        let norm = v.norm();
        if (norm - 1.0).abs() > tol {
            return Err(Error::NotNormalized { norm });
        }
        Ok(v)
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = DVector::zeros(dim);
        v[index] = ONE;
        Self(v)
    }

    pub fn from_inner(v: DVector<C64>) -> Self {
        Self(v)
    }

    pub fn inner(&self) -> &DVector<C64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn amplitude(&self, i: usize) -> C64 {
        self.0[i]
    }

    pub fn amplitudes(&self) -> Vec<C64> {
        self.0.iter().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// `⟨self|other⟩`.
    pub fn dot(&self, other: &Self) -> C64 {
        self.0.dotc(&other.0)
    }

    pub fn scale(&self, s: C64) -> Self {
        Self(&self.0 * s)
    }

    pub fn renormalized(&self) -> Self {
        Self(&self.0 / C64::new(self.norm(), 0.0))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).norm()))
    }

    /// Kronecker product `self ⊗ other`.
    pub fn tensor(&self, other: &Self) -> Self {
        Self(self.0.kronecker(&other.0))
    }

    /// Multiplies by a phase so that the largest-magnitude amplitude (first
    /// one on ties) is real and positive.
    pub fn phase_normalized(&self) -> Self {
        let max = self.0.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        if max == 0.0 {
            return self.clone();
        }
        let pivot = self.0.iter().find(|z| z.norm() >= max * (1.0 - 1e-9)).copied().unwrap();
        let phase = pivot.conj() / pivot.norm();
        self.scale(phase)
    }
}

fn kets_as_columns(kets: &[KetVector]) -> DMatrix<C64> {
    let dim = kets[0].dim();
    DMatrix::from_fn(dim, kets.len(), |r, c| kets[c].0[r])
}

/// Validated statistical operator: Hermitian, positive semidefinite, unit trace.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityOperator(ComplexSquareMatrix);

impl DensityOperator {
    pub fn new(matrix: ComplexSquareMatrix, tol: &Tolerances) -> Result<Self> {
        let dev = matrix.hermitian_deviation();
        if dev > tol.hermitian {
            return Err(Error::NotHermitian { deviation: dev });
        }
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > tol.density || tr.im.abs() > tol.density {
            return Err(Error::InvalidDensity(format!("trace {tr} differs from 1")));
        }
        let eig = hermitian_eig(&matrix, tol)?;
        if let Some(&min) = eig.values.last() {
            if min < -tol.density {
                return Err(Error::InvalidDensity(format!("negative eigenvalue {min:e}")));
            }
        }
        Ok(Self(matrix))
    }

    /// `|ψ⟩⟨ψ|` for a normalized ket.
    pub fn pure(psi: &KetVector) -> Self {
        Self(ComplexSquareMatrix::outer(psi))
    }

    pub(crate) fn new_unchecked(matrix: ComplexSquareMatrix) -> Self {
        Self(matrix)
    }

    pub fn matrix(&self) -> &ComplexSquareMatrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }
}

/// Ordered factor dimensions of a preferred factorization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpace {
    factor_dims: Vec<usize>,
}

impl FactorSpace {
    pub fn new(factor_dims: Vec<usize>) -> Result<Self> {
        if factor_dims.is_empty() || factor_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "factor dimensions must be a non-empty list of positive integers".into(),
            ));
        }
        Ok(Self { factor_dims })
    }

    pub fn factor_dims(&self) -> &[usize] {
        &self.factor_dims
    }

    pub fn num_factors(&self) -> usize {
        self.factor_dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.factor_dims.iter().product()
    }

    /// Mixed-radix digits of a flat index, first factor most significant.
    pub fn split_index(&self, mut flat: usize) -> Vec<usize> {
        let mut digits = vec![0; self.factor_dims.len()];
        for (k, &d) in self.factor_dims.iter().enumerate().rev() {
            digits[k] = flat % d;
            flat /= d;
        }
        digits
    }

    pub fn join_index(&self, digits: &[usize]) -> usize {
        digits.iter().zip(&self.factor_dims).fold(0, |acc, (&i, &d)| acc * d + i)
    }
}

/// Kronecker product `A ⊗ B` (left factor varies slowest).
pub fn tensor_product(a: &ComplexSquareMatrix, b: &ComplexSquareMatrix) -> ComplexSquareMatrix {
    ComplexSquareMatrix(a.0.kronecker(&b.0))
}

/// Tensor product of a list of factors, left to right.
pub fn tensor_product_all(factors: &[&ComplexSquareMatrix]) -> ComplexSquareMatrix {
    let mut acc = factors[0].clone();
    for f in &factors[1..] {
        acc = tensor_product(&acc, f);
    }
    acc
}

/// Reduced density operator on factor `keep`, tracing out all other factors.
pub fn partial_trace(w: &DensityOperator, space: &FactorSpace, keep: usize) -> Result<DensityOperator> {
    let total = space.total_dim();
    if w.dim() != total {
        return Err(Error::DimensionMismatch { expected: total, found: w.dim() });
    }
    if keep >= space.num_factors() {
        return Err(Error::InvalidArgument(format!(
            "factor index {keep} out of range for {} factors",
            space.num_factors()
        )));
    }
    let d = space.factor_dims()[keep];
    let mut out = DMatrix::<C64>::zeros(d, d);
    let m = w.matrix();
    // Sum over matching "environment" digits.
    for r in 0..total {
        let rd = space.split_index(r);
        for c in 0..total {
            let cd = space.split_index(c);
            if rd.iter().zip(&cd).enumerate().all(|(k, (a, b))| k == keep || a == b) {
                out[(rd[keep], cd[keep])] += m.get(r, c);
            }
        }
    }
    Ok(DensityOperator::new_unchecked(ComplexSquareMatrix(out)))
}

/// Reduced state of factor `keep` for the pure state `psi`, computed as
/// `M M†` where `M` reshapes `psi` into (kept) × (environment).
pub fn reduced_state(psi: &KetVector, space: &FactorSpace, keep: usize) -> Result<DensityOperator> {
    let total = space.total_dim();
    if psi.dim() != total {
        return Err(Error::DimensionMismatch { expected: total, found: psi.dim() });
    }
    let d = space.factor_dims()[keep];
    let env = total / d;
    let mut m = DMatrix::<C64>::zeros(d, env);
    for flat in 0..total {
        let mut digits = space.split_index(flat);
        let row = digits[keep];
        digits.remove(keep);
        let col = digits
            .iter()
            .zip(space.factor_dims().iter().enumerate().filter(|(k, _)| *k != keep).map(|(_, d)| d))
            .fold(0, |acc, (&i, &dd)| acc * dd + i);
        m[(row, col)] = psi.0[flat];
    }
    Ok(DensityOperator::new_unchecked(ComplexSquareMatrix(&m * m.adjoint())))
}

/// Embeds an operator acting on factor `k` into the full space.
pub fn embed_factor(op: &ComplexSquareMatrix, space: &FactorSpace, k: usize) -> ComplexSquareMatrix {
    let parts: Vec<ComplexSquareMatrix> = space
        .factor_dims()
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == k { op.clone() } else { ComplexSquareMatrix::identity(d) })
        .collect();
    let refs: Vec<&ComplexSquareMatrix> = parts.iter().collect();
    tensor_product_all(&refs)
}

/// Spectral decomposition of a Hermitian matrix.
#[derive(Clone, Debug)]
pub struct Eigen {
    /// Descending eigenvalues.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, phase-normalized, in the order of `values`.
    pub vectors: Vec<KetVector>,
    /// Index ranges of clusters of eigenvalues closer than the degeneracy
    /// threshold; singletons included.
    pub clusters: Vec<std::ops::Range<usize>>,
}

impl Eigen {
    pub fn reconstruct(&self) -> ComplexSquareMatrix {
        let n = self.vectors[0].dim();
        let mut acc = ComplexSquareMatrix::zeros(n);
        for (l, v) in self.values.iter().zip(&self.vectors) {
            acc = &acc + &ComplexSquareMatrix::outer(v).scale_real(*l);
        }
        acc
    }

    pub fn has_degeneracy(&self) -> bool {
        self.clusters.iter().any(|c| c.len() > 1)
    }
}

fn lex_cmp(a: &KetVector, b: &KetVector) -> Ordering {
    for (x, y) in a.0.iter().zip(b.0.iter()) {
        match y.re.partial_cmp(&x.re).unwrap_or(Ordering::Equal) {
            Ordering::Equal => {}
            o => return o,
        }
        match y.im.partial_cmp(&x.im).unwrap_or(Ordering::Equal) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    Ordering::Equal
}

/// Eigendecomposition of a Hermitian matrix with deterministic ordering:
/// descending eigenvalues, and within a degenerate cluster, descending
/// lexicographic order of the phase-normalized eigenvector amplitudes.
pub fn hermitian_eig(a: &ComplexSquareMatrix, tol: &Tolerances) -> Result<Eigen> {
    let dev = a.hermitian_deviation();
    if dev > tol.hermitian {
        return Err(Error::NotHermitian { deviation: dev });
    }
    let n = a.dim();
    // Symmetrize so the solver sees an exactly Hermitian input.
    let sym = (&a.0 + a.0.adjoint()) * C64::new(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or(Error::EigenFailure)?;
    let mut pairs: Vec<(f64, KetVector)> = (0..n)
        .map(|k| {
            let v = KetVector(eig.eigenvectors.column(k).into_owned());
            (eig.eigenvalues[k], v.phase_normalized())
        })
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal));

    let mut clusters = Vec::new();
    let mut start = 0;
    for k in 1..=n {
        if k == n || pairs[k - 1].0 - pairs[k].0 > tol.degeneracy {
            clusters.push(start..k);
            start = k;
        }
    }
    for c in &clusters {
        pairs[c.clone()].sort_by(|x, y| lex_cmp(&x.1, &y.1));
    }
    let (values, vectors) = pairs.into_iter().unzip();
    Ok(Eigen { values, vectors, clusters })
}

/// Matrix exponential by Padé scaling and squaring.
pub fn matrix_exponential(a: &ComplexSquareMatrix) -> ComplexSquareMatrix {
    ComplexSquareMatrix(a.0.exp())
}

/// Cached eigendecomposition of a time-independent Hamiltonian, giving
/// `e^{-iHt}` for any `t`.
#[derive(Clone, Debug)]
pub struct Propagator {
    energies: Vec<f64>,
    basis: DMatrix<C64>,
}

impl Propagator {
    pub fn new(hamiltonian: &ComplexSquareMatrix, tol: &Tolerances) -> Result<Self> {
        let eig = hermitian_eig(hamiltonian, tol)?;
        let basis = kets_as_columns(&eig.vectors);
        Ok(Self { energies: eig.values, basis })
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn unitary(&self, t: f64) -> ComplexSquareMatrix {
        let phases = DMatrix::from_diagonal(&DVector::from_iterator(
            self.dim(),
            self.energies.iter().map(|&e| (-I * e * t).exp()),
        ));
        ComplexSquareMatrix(&self.basis * phases * self.basis.adjoint())
    }

    pub fn evolve(&self, psi0: &KetVector, t: f64) -> Result<KetVector> {
        if psi0.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: psi0.dim() });
        }
        let coeffs = self.basis.adjoint() * &psi0.0;
        let rotated = DVector::from_iterator(
            self.dim(),
            coeffs.iter().zip(&self.energies).map(|(c, &e)| c * (-I * e * t).exp()),
        );
        Ok(KetVector(&self.basis * rotated))
    }
}

/// `e^{-iHt} |ψ₀⟩` for a time-independent Hermitian `H`.
pub fn evolve_state(psi0: &KetVector, hamiltonian: &ComplexSquareMatrix, t: f64) -> Result<KetVector> {
    let tol = Tolerances::default();
    let norm = psi0.norm();
    if (norm - 1.0).abs() > tol.normalization {
        return Err(Error::NotNormalized { norm });
    }
    Propagator::new(hamiltonian, &tol)?.evolve(psi0, t)
}

/// Projector onto the span of `vectors` (assumed orthonormal).
pub fn span_projector(vectors: &[KetVector], dim: usize) -> ComplexSquareMatrix {
    let mut p = ComplexSquareMatrix::zeros(dim);
    for v in vectors {
        p = &p + &ComplexSquareMatrix::outer(v);
    }
    p
}

/// Orthonormal basis of the range of a Hermitian positive semidefinite
/// matrix: eigenvectors whose eigenvalue exceeds `cutoff`.
pub fn range_basis(a: &ComplexSquareMatrix, cutoff: f64, tol: &Tolerances) -> Result<Vec<KetVector>> {
    let eig = hermitian_eig(a, tol)?;
    Ok(eig
        .values
        .iter()
        .zip(eig.vectors)
        .filter(|(l, _)| **l > cutoff)
        .map(|(_, v)| v)
        .collect())
}

/// Eigenvectors of `reference` compressed to the subspace spanned by
/// `basis`, lifted back to the full space, in descending eigenvalue order.
pub(crate) fn compressed_eigvecs(
    reference: &ComplexSquareMatrix,
    basis: &[KetVector],
    tol: &Tolerances,
) -> Result<(Vec<f64>, Vec<KetVector>)> {
    let small = ComplexSquareMatrix(reference.compress(basis));
    let eig = hermitian_eig(&small, &Tolerances { hermitian: 1e-8, ..*tol })?;
    let b = kets_as_columns(basis);
    let lifted = eig
        .vectors
        .iter()
        .map(|v| KetVector(&b * &v.0).phase_normalized())
        .collect();
    Ok((eig.values, lifted))
}

/// Löwdin (symmetric) orthonormalization of a set of vectors; returns the
/// orthonormal set closest to the input in the least-squares sense.
pub(crate) fn lowdin_orthonormalize(vectors: &[KetVector], tol: &Tolerances) -> Option<Vec<KetVector>> {
    let x = kets_as_columns(vectors);
    let gram = ComplexSquareMatrix(x.adjoint() * &x);
    let eig = hermitian_eig(&gram, &Tolerances { hermitian: 1e-8, ..*tol }).ok()?;
    if eig.values.iter().any(|&l| l < 1e-6) {
        return None;
    }
    let r = vectors.len();
    let mut inv_sqrt = DMatrix::<C64>::zeros(r, r);
    for (l, v) in eig.values.iter().zip(&eig.vectors) {
        inv_sqrt += (&v.0 * v.0.adjoint()) * C64::new(1.0 / l.sqrt(), 0.0);
    }
    let y = x * inv_sqrt;
    Some((0..r).map(|c| KetVector(y.column(c).into_owned())).collect())
}

/// Pauli matrices and other small builders used by scenarios and tests.
pub mod ops {
    use super::*;

    pub fn sigma_x() -> ComplexSquareMatrix {
        ComplexSquareMatrix::from_fn(2, |r, c| if r != c { ONE } else { ZERO })
    }

    pub fn sigma_y() -> ComplexSquareMatrix {
        ComplexSquareMatrix::from_fn(2, |r, c| match (r, c) {
            (0, 1) => -I,
            (1, 0) => I,
            _ => ZERO,
        })
    }

    pub fn sigma_z() -> ComplexSquareMatrix {
        ComplexSquareMatrix::from_real_diagonal(&[1.0, -1.0])
    }

    /// `|k⟩⟨k|` in dimension `dim`.
    pub fn basis_projector(dim: usize, k: usize) -> ComplexSquareMatrix {
        ComplexSquareMatrix::outer(&KetVector::basis(dim, k))
    }
}

#[cfg(test)]
mod tests {
    use super::ops::*;
    use super::*;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn singlet() -> KetVector {
        let s = 1.0 / 2f64.sqrt();
        KetVector::new(vec![ZERO, C64::new(s, 0.0), C64::new(-s, 0.0), ZERO]).unwrap()
    }

    #[test]
    fn identity_tensor_identity() {
        let i2 = ComplexSquareMatrix::identity(2);
        assert_eq!(tensor_product(&i2, &i2), ComplexSquareMatrix::identity(4));
    }

    #[test]
    fn tensor_block_convention() {
        let p = ComplexSquareMatrix::from_real_diagonal(&[1.0, 0.0]);
        let got = tensor_product(&p, &ComplexSquareMatrix::identity(2));
        assert_eq!(got, ComplexSquareMatrix::from_real_diagonal(&[1.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn sigma_x_squared_flips_singlet_sign() {
        let xx = tensor_product(&sigma_x(), &sigma_x());
        let s = singlet();
        let out = xx.apply(&s);
        assert!(out.max_abs_diff(&s.scale(-ONE)) < 1e-15);
    }

    #[test]
    fn singlet_reduces_to_maximally_mixed() {
        let space = FactorSpace::new(vec![2, 2]).unwrap();
        let w = DensityOperator::pure(&singlet());
        for keep in 0..2 {
            let red = partial_trace(&w, &space, keep).unwrap();
            let half = ComplexSquareMatrix::identity(2).scale_real(0.5);
            assert!(red.matrix().max_abs_diff(&half) < 1e-15);
            let fast = reduced_state(&singlet(), &space, keep).unwrap();
            assert!(fast.matrix().max_abs_diff(&half) < 1e-15);
        }
    }

    #[test]
    fn product_state_partial_trace_recovers_factor() {
        let space = FactorSpace::new(vec![2, 3]).unwrap();
        let ra = ComplexSquareMatrix::from_rows(&[
            vec![C64::new(0.7, 0.0), C64::new(0.1, 0.2)],
            vec![C64::new(0.1, -0.2), C64::new(0.3, 0.0)],
        ])
        .unwrap();
        let rb = ComplexSquareMatrix::from_real_diagonal(&[0.5, 0.25, 0.25]);
        let w = DensityOperator::new(tensor_product(&ra, &rb), &tol()).unwrap();
        let red_a = partial_trace(&w, &space, 0).unwrap();
        let red_b = partial_trace(&w, &space, 1).unwrap();
        assert!(red_a.matrix().max_abs_diff(&ra) < 1e-14);
        assert!(red_b.matrix().max_abs_diff(&rb) < 1e-14);
    }

    #[test]
    fn partial_trace_dimension_mismatch() {
        let space = FactorSpace::new(vec![2, 2]).unwrap();
        let w = DensityOperator::pure(&KetVector::basis(3, 0));
        assert!(matches!(partial_trace(&w, &space, 0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn diagonal_eigen_is_sorted_descending() {
        let a = ComplexSquareMatrix::from_real_diagonal(&[3.0, 1.0, 2.0]);
        let eig = hermitian_eig(&a, &tol()).unwrap();
        assert_eq!(eig.values, vec![3.0, 2.0, 1.0]);
        assert!(eig.vectors[0].max_abs_diff(&KetVector::basis(3, 0)) < 1e-14);
        assert!(eig.vectors[1].max_abs_diff(&KetVector::basis(3, 2)) < 1e-14);
        assert!(eig.vectors[2].max_abs_diff(&KetVector::basis(3, 1)) < 1e-14);
        assert!(!eig.has_degeneracy());
    }

    #[test]
    fn easy_family_eigenvalues_at_pi_over_three() {
        let th = std::f64::consts::FRAC_PI_3;
        let w = ComplexSquareMatrix::from_real_diagonal(&[th.cos().powi(2), th.sin().powi(2)]);
        let eig = hermitian_eig(&w, &tol()).unwrap();
        assert!((eig.values[0] - 0.75).abs() < 1e-15);
        assert!((eig.values[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cluster_flagged() {
        let a = ComplexSquareMatrix::from_real_diagonal(&[0.5, 0.5 + 1e-10, 0.0]);
        let eig = hermitian_eig(&a, &tol()).unwrap();
        assert_eq!(eig.clusters, vec![0..2, 2..3]);
    }

    #[test]
    fn non_hermitian_rejected() {
        let a = ComplexSquareMatrix::from_rows(&[vec![ONE, ONE], vec![ZERO, ONE]]).unwrap();
        assert!(matches!(hermitian_eig(&a, &tol()), Err(Error::NotHermitian { .. })));
        let psi = KetVector::basis(2, 0);
        assert!(evolve_state(&psi, &a, 1.0).is_err());
    }

    #[test]
    fn exp_of_zero_and_rotation() {
        assert!(matrix_exponential(&ComplexSquareMatrix::zeros(3)).max_abs_diff(&ComplexSquareMatrix::identity(3)) < 1e-15);
        let a = sigma_x().scale(-I * std::f64::consts::FRAC_PI_2);
        let got = matrix_exponential(&a);
        assert!(got.max_abs_diff(&sigma_x().scale(-I)) < 1e-12);
    }

    #[test]
    fn rotation_evolution_matches_closed_form() {
        let omega = 0.8;
        // H = -ω σ_x generates cos ωt |1⟩ + i sin ωt |2⟩.
        let h = sigma_x().scale_real(-omega);
        let psi0 = KetVector::basis(2, 0);
        for &t in &[0.0, 0.3, 1.1, 2.5] {
            let psi = evolve_state(&psi0, &h, t).unwrap();
            assert!((psi.amplitude(0) - C64::new((omega * t).cos(), 0.0)).norm() < 1e-12);
            assert!((psi.amplitude(1) - C64::new(0.0, (omega * t).sin())).norm() < 1e-12);
        }
    }

    #[test]
    fn eigenstate_only_acquires_phase() {
        let h = sigma_z().scale_real(1.7);
        let e = KetVector::basis(2, 1);
        let t = 0.9;
        let psi = evolve_state(&e, &h, t).unwrap();
        let expected = e.scale((I * 1.7 * t).exp());
        assert!(psi.max_abs_diff(&expected) < 1e-14);
        let frozen = evolve_state(&e, &ComplexSquareMatrix::zeros(2), t).unwrap();
        assert!(frozen.max_abs_diff(&e) < 1e-15);
    }

    #[test]
    fn factor_index_round_trip() {
        let space = FactorSpace::new(vec![2, 3, 2]).unwrap();
        for flat in 0..12 {
            assert_eq!(space.join_index(&space.split_index(flat)), flat);
        }
        assert_eq!(space.split_index(7), vec![1, 0, 1]);
    }

    #[test]
    fn matrix_json_is_rows_of_pairs() {
        let m = sigma_y();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[[0.0,0.0],[-0.0,-1.0]],[[0.0,1.0],[0.0,0.0]]]");
        let back: ComplexSquareMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
