//! Numerical tolerances shared across the pipeline.

use serde::{Deserialize, Serialize};

/// Every threshold used by the library, with its default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Max-entry deviation `|A - A†|` accepted as Hermitian.
    pub hermitian: f64,
    /// Accepted deviation of a ket norm from 1.
    pub normalization: f64,
    /// Accepted deviation of a density-operator trace from 1, and of its
    /// smallest eigenvalue below 0.
    pub density: f64,
    /// Eigenvalues closer than this form a degenerate cluster.
    pub degeneracy: f64,
    /// Idempotency and orthogonality tolerance for projectors.
    pub projector: f64,
    /// Minimum overlap accepted when continuing an eigenbasis between grid nodes.
    pub overlap_threshold: f64,
    /// Probabilities at or below this value are treated as zero.
    pub zero_probability: f64,
    /// Currents at or below this value are treated as zero where they meet
    /// an empty state. Finite-difference projector derivatives leave noise of
    /// order 1e-10 in currents that vanish exactly.
    pub zero_current: f64,
    /// Accepted imbalance `|Σ ṗ|` for probability derivative vectors.
    pub pdot_balance: f64,
    /// Accepted max entry of `Σ Ṗ_i`.
    pub derivative_sum: f64,
    /// Accepted deviation of a probability vector sum from 1.
    pub probability_sum: f64,
    /// Accepted magnitude of the last Feller term.
    pub truncation_tail: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            hermitian: 1e-10,
            normalization: 1e-10,
            density: 1e-10,
            degeneracy: 1e-8,
            projector: 1e-8,
            overlap_threshold: 0.5,
            zero_probability: 1e-12,
            zero_current: 1e-8,
            pdot_balance: 1e-10,
            derivative_sum: 1e-6,
            probability_sum: 1e-9,
            truncation_tail: 1e-10,
        }
    }
}
