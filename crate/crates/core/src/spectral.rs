//! Continuous tracking of eigenprojections of reduced states over a time grid.
//!
//! Each grid node is diagonalized independently; labels are carried from one
//! node to the next by the permutation that maximizes the summed squared
//! overlap with the previous eigenbasis. Degenerate clusters are continued as
//! a whole and then split into rank-1 parts closest to the previous step, so
//! every label always denotes a one-dimensional projector and the label set
//! has fixed cardinality equal to the factor dimension.

use serde::Serialize;

use crate::assignment::max_weight_assignment;
use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::hilbert::{
    compressed_eigvecs, hermitian_eig, lowdin_orthonormalize, range_basis, ComplexSquareMatrix, DensityOperator,
    KetVector, C64,
};

/// One tracked label at one grid node.
#[derive(Clone, Debug)]
pub struct TrackedComponent {
    pub vector: KetVector,
    pub projector: ComplexSquareMatrix,
    pub weight: f64,
}

impl TrackedComponent {
    fn new(vector: KetVector, state: &ComplexSquareMatrix) -> Self {
        let weight = state.expectation(&vector).re;
        let projector = ComplexSquareMatrix::outer(&vector);
        Self { vector, projector, weight }
    }
}

/// Tracked eigenprojections `P_i(t_k)` and weights `w_i(t_k)` on a grid.
#[derive(Clone, Debug)]
pub struct SpectralTrajectory {
    times: Vec<f64>,
    frames: Vec<Vec<TrackedComponent>>,
    breakpoints: Vec<usize>,
}

impl SpectralTrajectory {
    /// Assembles a trajectory from per-node label vectors (rank-1 labels).
    pub fn from_vectors(times: Vec<f64>, vectors: Vec<Vec<KetVector>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != vectors.len() || times.len() != weights.len() || times.is_empty() {
            return Err(Error::InvalidArgument("trajectory arrays must be non-empty and equally long".into()));
        }
        check_grid(&times)?;
        let labels = vectors[0].len();
        let frames = vectors
            .into_iter()
            .zip(weights)
            .map(|(vs, ws)| {
                if vs.len() != labels || ws.len() != labels {
                    return Err(Error::DimensionMismatch { expected: labels, found: vs.len() });
                }
                Ok(vs
                    .into_iter()
                    .zip(ws)
                    .map(|(v, w)| TrackedComponent { projector: ComplexSquareMatrix::outer(&v), vector: v, weight: w })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { times, frames, breakpoints: Vec::new() })
    }

    /// Declares grid nodes at which the underlying family is only piecewise
    /// smooth; derivative stencils never straddle them.
    pub fn with_breakpoints(mut self, mut breakpoints: Vec<usize>) -> Self {
        breakpoints.retain(|&b| b > 0 && b + 1 < self.times.len());
        breakpoints.sort_unstable();
        breakpoints.dedup();
        self.breakpoints = breakpoints;
        self
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.frames[0].len()
    }

    pub fn dim(&self) -> usize {
        self.frames[0][0].vector.dim()
    }

    pub fn breakpoints(&self) -> &[usize] {
        &self.breakpoints
    }

    pub fn frame(&self, node: usize) -> &[TrackedComponent] {
        &self.frames[node]
    }

    pub fn projector(&self, node: usize, label: usize) -> &ComplexSquareMatrix {
        &self.frames[node][label].projector
    }

    pub fn projectors(&self, node: usize) -> Vec<ComplexSquareMatrix> {
        self.frames[node].iter().map(|c| c.projector.clone()).collect()
    }

    pub fn weight(&self, node: usize, label: usize) -> f64 {
        self.frames[node][label].weight
    }

    pub fn weights(&self, node: usize) -> Vec<f64> {
        self.frames[node].iter().map(|c| c.weight).collect()
    }

    /// Node index range `[lo, hi]` of the smooth segment used for node `k`.
    /// A breakpoint node belongs to the segment that starts there.
    fn segment_of(&self, k: usize) -> (usize, usize) {
        let last = self.times.len() - 1;
        let lo = self.breakpoints.iter().copied().filter(|&b| b <= k).max().unwrap_or(0);
        let hi = self.breakpoints.iter().copied().find(|&b| b > k).unwrap_or(last);
        (lo, hi)
    }

    /// Finite-difference weights for `d/dt` at node `k`, as (node, weight).
    pub fn derivative_stencil(&self, k: usize) -> Vec<(usize, f64)> {
        let (lo, hi) = self.segment_of(k);
        let width = (hi - lo + 1).min(5);
        if width < 2 {
            return Vec::new();
        }
        let start = k.saturating_sub(width / 2).clamp(lo, hi + 1 - width);
        let nodes: Vec<usize> = (start..start + width).collect();
        let xs: Vec<f64> = nodes.iter().map(|&n| self.times[n]).collect();
        let w = first_derivative_weights(self.times[k], &xs);
        nodes.into_iter().zip(w).collect()
    }
}

fn check_grid(times: &[f64]) -> Result<()> {
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("grid times must be strictly increasing".into()));
    }
    Ok(())
}

/// Fornberg's recursion for first-derivative weights at `x0` on nodes `xs`.
pub fn first_derivative_weights(x0: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    // c[j][m]: weight of node j for derivative order m (m = 0, 1).
    let mut c = vec![[0.0f64; 2]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(1);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for m in (1..=mn).rev() {
                    c[i][m] = c1 * (m as f64 * c[i - 1][m - 1] - c5 * c[i - 1][m]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for m in (1..=mn).rev() {
                c[j][m] = (c4 * c[j][m] - m as f64 * c[j][m - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|w| w[1]).collect()
}

/// Fixed reference operator used to pick deterministic bases inside
/// degenerate subspaces: `diag(d, d-1, …, 1)`.
fn reference_operator(dim: usize) -> ComplexSquareMatrix {
    let diag: Vec<f64> = (0..dim).map(|k| (dim - k) as f64).collect();
    ComplexSquareMatrix::from_real_diagonal(&diag)
}

/// Generic Hermitian perturbation of the reference, used when the diagonal
/// reference is itself degenerate on the subspace.
fn perturbed_reference(dim: usize) -> ComplexSquareMatrix {
    let mut r = reference_operator(dim);
    for a in 0..dim {
        for b in (a + 1)..dim {
            let re = (((a + 1) * (b + 2)) as f64).sqrt().fract();
            let im = (((a + 3) * (b + 5)) as f64).sqrt().fract();
            let z = C64::new(re, im) * 1e-2;
            r.set(a, b, z);
            r.set(b, a, z.conj());
        }
    }
    r
}

/// Splits the subspace spanned by `basis` into reference-operator
/// eigenvectors.
fn refine_basis(basis: &[KetVector], tol: &Tolerances) -> Result<Vec<KetVector>> {
    if basis.len() == 1 {
        return Ok(vec![basis[0].phase_normalized()]);
    }
    let dim = basis[0].dim();
    let (vals, vecs) = compressed_eigvecs(&reference_operator(dim), basis, tol)?;
    if vals.windows(2).all(|w| w[0] - w[1] > 1e-6) {
        return Ok(vecs);
    }
    Ok(compressed_eigvecs(&perturbed_reference(dim), basis, tol)?.1)
}

/// Replaces every projector of rank `r` by `r` mutually orthogonal rank-1
/// projectors summing to it, chosen as eigenvectors of a fixed reference
/// operator restricted to its range.
pub fn fiduciary_refine(projectors: &[ComplexSquareMatrix], tol: &Tolerances) -> Result<Vec<ComplexSquareMatrix>> {
    Ok(fiduciary_vectors(projectors, tol)?.iter().map(ComplexSquareMatrix::outer).collect())
}

pub(crate) fn fiduciary_vectors(projectors: &[ComplexSquareMatrix], tol: &Tolerances) -> Result<Vec<KetVector>> {
    let mut out = Vec::new();
    for p in projectors {
        let herm = p.hermitian_deviation();
        if herm > tol.projector {
            return Err(Error::NotHermitian { deviation: herm });
        }
        let dev = p.idempotency_deviation();
        if dev > tol.projector {
            return Err(Error::NotIdempotent { deviation: dev });
        }
        let basis = range_basis(p, 0.5, &Tolerances { hermitian: tol.projector, ..*tol })?;
        if basis.is_empty() {
            continue;
        }
        out.extend(refine_basis(&basis, tol)?);
    }
    Ok(out)
}

/// Labels of eigenvalue clusters at one node: (vectors of the cluster, weight).
fn node_clusters(state: &ComplexSquareMatrix, tol: &Tolerances) -> Result<Vec<Vec<KetVector>>> {
    let eig = hermitian_eig(state, tol)?;
    Ok(eig.clusters.iter().map(|c| eig.vectors[c.clone()].to_vec()).collect())
}

/// Continues the eigenprojections of `states` along `grid`.
pub fn track(states: &[DensityOperator], grid: &[f64], tol: &Tolerances) -> Result<SpectralTrajectory> {
    if states.len() != grid.len() || states.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} states for {} grid times",
            states.len(),
            grid.len()
        )));
    }
    check_grid(grid)?;
    let dim = states[0].dim();
    let mut frames: Vec<Vec<TrackedComponent>> = Vec::with_capacity(grid.len());

    let mut first = Vec::with_capacity(dim);
    for cluster in node_clusters(states[0].matrix(), tol)? {
        first.extend(refine_basis(&cluster, tol)?);
    }
    frames.push(first.into_iter().map(|v| TrackedComponent::new(v, states[0].matrix())).collect());

    for (k, state) in states.iter().enumerate().skip(1) {
        if state.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: state.dim() });
        }
        let prev: Vec<&KetVector> = frames[k - 1].iter().map(|c| &c.vector).collect();
        let clusters = node_clusters(state.matrix(), tol)?;
        let next = continue_labels(&prev, &clusters, tol, grid[k])?;
        frames.push(next.into_iter().map(|v| TrackedComponent::new(v, state.matrix())).collect());
    }
    Ok(SpectralTrajectory { times: grid.to_vec(), frames, breakpoints: Vec::new() })
}

/// Assigns the previous labels to the new clusters and builds new label vectors.
fn continue_labels(
    prev: &[&KetVector],
    clusters: &[Vec<KetVector>],
    tol: &Tolerances,
    time: f64,
) -> Result<Vec<KetVector>> {
    let n = prev.len();
    // One slot per dimension of each cluster.
    let slots: Vec<usize> = clusters.iter().enumerate().flat_map(|(c, vs)| std::iter::repeat_n(c, vs.len())).collect();
    let overlap = |a: usize, c: usize| -> f64 { clusters[c].iter().map(|u| u.dot(prev[a]).norm_sqr()).sum() };
    let weight: Vec<Vec<f64>> = (0..n).map(|a| slots.iter().map(|&c| overlap(a, c)).collect()).collect();
    let perm = max_weight_assignment(&weight);

    let worst = (0..n).map(|a| weight[a][perm[a]]).fold(f64::INFINITY, f64::min);
    if worst < tol.overlap_threshold {
        return Err(Error::AmbiguousContinuation { time, overlap: worst });
    }

    let mut out: Vec<Option<KetVector>> = vec![None; n];
    for (c, cluster) in clusters.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&a| slots[perm[a]] == c).collect();
        if cluster.len() == 1 {
            out[members[0]] = Some(align_phase(&cluster[0], prev[members[0]]));
            continue;
        }
        // Project the previous vectors into the cluster and orthonormalize.
        let projected: Vec<KetVector> = members
            .iter()
            .map(|&a| {
                let mut acc = KetVector::from_inner(nalgebra::DVector::zeros(prev[a].dim()));
                for u in cluster {
                    acc = KetVector::from_inner(acc.inner() + u.inner() * u.dot(prev[a]));
                }
                acc
            })
            .collect();
        match lowdin_orthonormalize(&projected, tol) {
            Some(vs) => {
                for (&a, v) in members.iter().zip(vs) {
                    out[a] = Some(v);
                }
            }
            None => {
                let refined = refine_basis(cluster, tol)?;
                let w: Vec<Vec<f64>> =
                    members.iter().map(|&a| refined.iter().map(|u| u.dot(prev[a]).norm_sqr()).collect()).collect();
                let inner = max_weight_assignment(&w);
                for (m, &a) in members.iter().enumerate() {
                    out[a] = Some(align_phase(&refined[inner[m]], prev[a]));
                }
            }
        }
    }
    Ok(out.into_iter().map(|v| v.expect("every label assigned")).collect())
}

/// Rotates the global phase of `v` so that `⟨prev|v⟩` is real and positive.
fn align_phase(v: &KetVector, prev: &KetVector) -> KetVector {
    let z = prev.dot(v);
    if z.norm() < 1e-12 {
        return v.clone();
    }
    v.scale(z.conj() / z.norm())
}

/// `Ṗ_i(t_k)` for every label, by finite differences of the tracked
/// projectors within the smooth segment containing node `k`.
pub fn projector_derivative(traj: &SpectralTrajectory, k: usize) -> Vec<ComplexSquareMatrix> {
    let stencil = traj.derivative_stencil(k);
    let dim = traj.dim();
    (0..traj.num_labels())
        .map(|label| {
            let mut acc = ComplexSquareMatrix::zeros(dim);
            for &(node, w) in &stencil {
                acc = &acc + &traj.projector(node, label).scale_real(w);
            }
            acc
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Crossing {
    /// Grid interval `[t_k, t_{k+1}]`.
    pub interval: (f64, f64),
    pub labels: (usize, usize),
    /// Smallest weight gap on the interval under linear interpolation.
    pub min_gap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CrossingReport {
    pub crossings: Vec<Crossing>,
}

impl CrossingReport {
    pub fn is_empty(&self) -> bool {
        self.crossings.is_empty()
    }
}

/// Reports every grid interval on which two tracked weights come within
/// `gap_threshold` of each other or change order.
pub fn detect_crossings(traj: &SpectralTrajectory, gap_threshold: f64) -> CrossingReport {
    let mut crossings = Vec::new();
    let n = traj.num_labels();
    for k in 0..traj.len().saturating_sub(1) {
        for a in 0..n {
            for b in (a + 1)..n {
                let d0 = traj.weight(k, a) - traj.weight(k, b);
                let d1 = traj.weight(k + 1, a) - traj.weight(k + 1, b);
                let min_gap = if d0 * d1 <= 0.0 { 0.0 } else { d0.abs().min(d1.abs()) };
                if min_gap <= gap_threshold {
                    crossings.push(Crossing { interval: (traj.times[k], traj.times[k + 1]), labels: (a, b), min_gap });
                }
            }
        }
    }
    CrossingReport { crossings }
}
