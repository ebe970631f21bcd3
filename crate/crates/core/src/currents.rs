//! Antisymmetric probability currents `j_ji` (net flow from `i` into `j`).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::hilbert::{ComplexSquareMatrix, KetVector};

/// Antisymmetric current matrix stored as its strict upper triangle, so
/// `j_ij = -j_ji` holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct CurrentMatrix {
    dim: usize,
    // upper[a * dim + b] for a < b holds j_ab.
    upper: Vec<f64>,
}

/// Which extra term the generalized current adds to the static one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtraTerm {
    /// `⟨ψ|(Ṗ_j P_i − Ṗ_i P_j)|ψ⟩`
    #[default]
    Paired,
    /// `(1/D)⟨ψ|(Ṗ_j − Ṗ_i)|ψ⟩`
    MinimalFlowLike,
}

impl CurrentMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, upper: vec![0.0; dim * dim] }
    }

    /// Builds from `f(j, i) = j_ji`, evaluated only for `j < i`.
    pub fn from_upper(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for a in 0..dim {
            for b in (a + 1)..dim {
                m.upper[a * dim + b] = f(a, b);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `j_ji`.
    pub fn get(&self, j: usize, i: usize) -> f64 {
        use std::cmp::Ordering::*;
        match j.cmp(&i) {
            Less => self.upper[j * self.dim + i],
            Greater => -self.upper[i * self.dim + j],
            Equal => 0.0,
        }
    }

    /// Net inflow `Σ_i j_ji` into each state.
    pub fn divergence(&self) -> Vec<f64> {
        (0..self.dim).map(|j| (0..self.dim).map(|i| self.get(j, i)).sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.upper.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `Σ_{i,j} j_ji²`.
    pub fn squared_norm(&self) -> f64 {
        2.0 * self.upper.iter().map(|v| v * v).sum::<f64>()
    }
}

fn check_balance(pdot: &[f64], tol: &Tolerances) -> Result<()> {
    let sum: f64 = pdot.iter().sum();
    if sum.abs() > tol.pdot_balance {
        return Err(Error::UnbalancedPdot { sum });
    }
    Ok(())
}

/// `j_ji = (ṗ_j − ṗ_i)/D`, the least-norm antisymmetric solution of continuity.
pub fn minimal_flow_current(pdot: &[f64], tol: &Tolerances) -> Result<CurrentMatrix> {
    check_balance(pdot, tol)?;
    let d = pdot.len();
    let inv = 1.0 / d as f64;
    Ok(CurrentMatrix::from_upper(d, |j, i| (pdot[j] - pdot[i]) * inv))
}

fn check_dims(psi: &KetVector, h: &ComplexSquareMatrix, projectors: &[ComplexSquareMatrix]) -> Result<()> {
    let n = psi.dim();
    for m in std::iter::once(h).chain(projectors) {
        if m.dim() != n {
            return Err(Error::DimensionMismatch { expected: n, found: m.dim() });
        }
    }
    Ok(())
}

/// `2 Im⟨ψ|P_j H P_i|ψ⟩` for all pairs, with `φ_i = P_i ψ` precomputed.
fn hamiltonian_part(psi: &KetVector, h: &ComplexSquareMatrix, projectors: &[ComplexSquareMatrix]) -> Vec<Vec<f64>> {
    let phi: Vec<KetVector> = projectors.iter().map(|p| p.apply(psi)).collect();
    let h_phi: Vec<KetVector> = phi.iter().map(|v| h.apply(v)).collect();
    (0..phi.len()).map(|j| (0..phi.len()).map(|i| 2.0 * phi[j].dot(&h_phi[i]).im).collect()).collect()
}

/// `j_ji = 2 Im⟨ψ|P_j H P_i|ψ⟩` for time-independent projectors.
pub fn static_schrodinger_current(
    psi: &KetVector,
    h: &ComplexSquareMatrix,
    projectors: &[ComplexSquareMatrix],
) -> Result<CurrentMatrix> {
    check_dims(psi, h, projectors)?;
    let part = hamiltonian_part(psi, h, projectors);
    Ok(CurrentMatrix::from_upper(projectors.len(), |j, i| part[j][i]))
}

/// `ṗ_j = 2 Im⟨ψ|P_j H|ψ⟩`.
pub fn static_pdot(psi: &KetVector, h: &ComplexSquareMatrix, projectors: &[ComplexSquareMatrix]) -> Result<Vec<f64>> {
    check_dims(psi, h, projectors)?;
    let h_psi = h.apply(psi);
    Ok(projectors.iter().map(|p| 2.0 * p.apply(psi).dot(&h_psi).im).collect())
}

/// `ṗ_j = 2 Im⟨ψ|P_j H|ψ⟩ + ⟨ψ|Ṗ_j|ψ⟩`.
pub fn generalized_pdot(
    psi: &KetVector,
    h: &ComplexSquareMatrix,
    projectors: &[ComplexSquareMatrix],
    derivatives: &[ComplexSquareMatrix],
) -> Result<Vec<f64>> {
    check_dims(psi, h, derivatives)?;
    let base = static_pdot(psi, h, projectors)?;
    Ok(base.iter().zip(derivatives).map(|(b, d)| b + d.expectation(psi).re).collect())
}

fn check_derivative_sum(derivatives: &[ComplexSquareMatrix], tol: &Tolerances) -> Result<()> {
    let Some(first) = derivatives.first() else { return Ok(()) };
    let sum = derivatives.iter().fold(ComplexSquareMatrix::zeros(first.dim()), |acc, d| &acc + d);
    let deviation = sum.max_abs();
    if deviation > tol.derivative_sum {
        return Err(Error::DerivativeSum { deviation });
    }
    Ok(())
}

/// Static current plus a projector-motion term, for time-dependent `P_i(t)`.
pub fn generalized_schrodinger_current(
    psi: &KetVector,
    h: &ComplexSquareMatrix,
    projectors: &[ComplexSquareMatrix],
    derivatives: &[ComplexSquareMatrix],
    extra: ExtraTerm,
    tol: &Tolerances,
) -> Result<CurrentMatrix> {
    check_dims(psi, h, projectors)?;
    check_dims(psi, h, derivatives)?;
    if derivatives.len() != projectors.len() {
        return Err(Error::DimensionMismatch { expected: projectors.len(), found: derivatives.len() });
    }
    check_derivative_sum(derivatives, tol)?;
    let part = hamiltonian_part(psi, h, projectors);
    let d = projectors.len();
    match extra {
        ExtraTerm::Paired => {
            // ⟨ψ|Ṗ_j P_i|ψ⟩ = ⟨Ṗ_j ψ|φ_i⟩
            let phi: Vec<KetVector> = projectors.iter().map(|p| p.apply(psi)).collect();
            let dpsi: Vec<KetVector> = derivatives.iter().map(|q| q.apply(psi)).collect();
            Ok(CurrentMatrix::from_upper(d, |j, i| {
                let extra = dpsi[j].dot(&phi[i]) - dpsi[i].dot(&phi[j]);
                part[j][i] + extra.re
            }))
        }
        ExtraTerm::MinimalFlowLike => {
            let e: Vec<f64> = derivatives.iter().map(|q| q.expectation(psi).re).collect();
            let inv = 1.0 / d as f64;
            Ok(CurrentMatrix::from_upper(d, |j, i| part[j][i] + (e[j] - e[i]) * inv))
        }
    }
}

/// `max_j |ṗ_j − Σ_i j_ji|`.
pub fn continuity_residual(current: &CurrentMatrix, pdot: &[f64]) -> f64 {
    current.divergence().iter().zip(pdot).fold(0.0, |m, (div, p)| m.max((p - div).abs()))
}

/// Writes `time,i,j,j_ji` rows for `i < j`.
pub fn write_currents_csv<W: Write>(out: W, times: &[f64], currents: &[CurrentMatrix]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "i", "j", "j_ji"])?;
    for (t, c) in times.iter().zip(currents) {
        for i in 0..c.dim() {
            for j in (i + 1)..c.dim() {
                w.serialize((t, i, j, c.get(j, i)))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
