use serde::Serialize;

use crate::currents::{
    continuity_residual, generalized_pdot, generalized_schrodinger_current, minimal_flow_current,
    static_schrodinger_current, CurrentMatrix,
};
use crate::error::{Error, Result};
use crate::feller::{
    backward_residual, chapman_kolmogorov_residual, feller_minimal, forward_ode_kernel, forward_residual,
    honesty_deficit, GriddedRates, KernelExport, RateFunction, TransitionKernel,
};
use crate::hilbert::{reduced_state, tensor_product_all, ComplexSquareMatrix, FactorSpace, KetVector, Propagator};
use crate::kinetics::{classify_singularities, compute_rates, master_residual, RateMatrix, SingularityReport};
use crate::modal::{joint_indices, joint_state_records, JointStateRecord};
use crate::sampler::{
    ensemble_marginals, sample_ensemble, EnsembleSpec, EnsembleStats, ExecMode, RateTrajectory, SamplePath,
};
use crate::spectral::{detect_crossings, projector_derivative, track, SpectralTrajectory};

use super::{CurrentKind, Scenario, ScenarioError, Stage};

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub ensemble: bool,
    pub kernels: bool,
    pub exec: ExecMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { ensemble: true, kernels: true, exec: ExecMode::Parallel }
    }
}

/// Contiguous grid range on which two labels of one factor are flagged.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossingRange {
    pub labels: (usize, usize),
    pub start: f64,
    pub end: f64,
    pub intervals: usize,
    pub min_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FactorCrossings {
    pub factor: usize,
    pub ranges: Vec<CrossingRange>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoleReport {
    /// Grid nodes whose rate matrix has at least one pole.
    pub pole_nodes: usize,
    pub pole_states: Vec<usize>,
    pub singularities: SingularityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelWindow {
    pub s: f64,
    pub t: f64,
    pub chapman_kolmogorov: f64,
    pub kolmogorov_forward: f64,
    pub kolmogorov_backward: f64,
    pub feller_vs_ode: f64,
    pub honesty_deficit: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KernelDiagnostics {
    pub windows: Vec<KernelWindow>,
    /// Why kernels were not evaluated, if they were not.
    pub skipped: Option<String>,
    pub max_chapman_kolmogorov: f64,
    pub max_kolmogorov_forward: f64,
    pub max_kolmogorov_backward: f64,
    pub max_feller_vs_ode: f64,
    pub max_honesty_deficit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleDiagnostics {
    pub paths: usize,
    pub master_seed: u64,
    /// Query times after snapping to grid nodes.
    pub query_times: Vec<f64>,
    pub total_variation: Vec<f64>,
    pub max_total_variation: f64,
    pub total_variation_limit: f64,
    /// `[factor][query]` total variation of single-factor marginals.
    pub factor_total_variation: Vec<Vec<f64>>,
    /// Largest `|f − p| / sqrt(p(1−p)/N)` over query times and states with
    /// `0 < p < 1`.
    pub max_z_score: f64,
    /// Empirical mass on states with zero probability.
    pub zero_probability_mass: f64,
    pub mean_jumps: f64,
    pub deterministic: bool,
    /// Fraction of path time spent in states with `p < 1e-6`.
    pub zero_sojourn_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub current: CurrentKind,
    pub dim: usize,
    pub grid_nodes: usize,
    pub breakpoints: Vec<f64>,
    pub continuity_residual: f64,
    pub master_residual: f64,
    pub max_rate: f64,
    pub crossings: Vec<FactorCrossings>,
    pub poles: PoleReport,
    pub kernels: KernelDiagnostics,
    pub ensemble: Option<EnsembleDiagnostics>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// Everything the exporters need besides the report.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub space: FactorSpace,
    pub times: Vec<f64>,
    pub factors: Vec<SpectralTrajectory>,
    /// Probabilities of the modal states the current refers to, per node.
    pub probabilities: Vec<Vec<f64>>,
    pub fd_pdot: Vec<Vec<f64>>,
    pub currents: Vec<CurrentMatrix>,
    pub rates: Vec<RateMatrix>,
    pub kernels: Vec<KernelExport>,
    pub joint_states: Vec<JointStateRecord>,
    pub paths: Vec<SamplePath>,
    pub stats: Option<EnsembleStats>,
    pub factor_stats: Vec<EnsembleStats>,
    /// Quantum probabilities at the snapped query times.
    pub quantum: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub artifacts: RunArtifacts,
}

fn stage(stage: Stage) -> impl FnOnce(Error) -> ScenarioError {
    move |source| ScenarioError::Stage { stage, source }
}

fn map_nodes<T: Send>(n: usize, exec: ExecMode, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    match exec {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

fn try_map_nodes<T: Send>(n: usize, exec: ExecMode, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    map_nodes(n, exec, f).into_iter().collect()
}

/// Uniform grid per Hamiltonian segment, so that switch times are nodes.
/// Returns the nodes, breakpoint indices and each node's segment (later
/// segment at a switch).
fn build_grid(segments: &[(f64, f64)], step: f64) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut times = vec![segments[0].0];
    let mut seg_of = vec![0];
    let mut breakpoints = Vec::new();
    for (m, &(a, b)) in segments.iter().enumerate() {
        if m > 0 {
            breakpoints.push(times.len() - 1);
            *seg_of.last_mut().expect("non-empty") = m;
        }
        let n = ((b - a) / step - 1e-9).ceil().max(1.0) as usize;
        for k in 1..=n {
            times.push(if k == n { b } else { a + (b - a) * k as f64 / n as f64 });
            seg_of.push(m);
        }
    }
    (times, breakpoints, seg_of)
}

fn apply_stencil(stencil: &[(usize, f64)], series: &[Vec<f64>]) -> Vec<f64> {
    let d = series[0].len();
    let mut out = vec![0.0; d];
    for &(node, w) in stencil {
        for (o, v) in out.iter_mut().zip(&series[node]) {
            *o += w * v;
        }
    }
    out
}

fn merge_crossings(factor: usize, traj: &SpectralTrajectory, gap: f64) -> FactorCrossings {
    let report = detect_crossings(traj, gap);
    let mut ranges: Vec<CrossingRange> = Vec::new();
    for c in report.crossings {
        match ranges.iter_mut().rev().find(|r| r.labels == c.labels) {
            Some(r) if r.end == c.interval.0 => {
                r.end = c.interval.1;
                r.intervals += 1;
                r.min_gap = r.min_gap.min(c.min_gap);
            }
            _ => ranges.push(CrossingRange {
                labels: c.labels,
                start: c.interval.0,
                end: c.interval.1,
                intervals: 1,
                min_gap: c.min_gap,
            }),
        }
    }
    ranges.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.labels.cmp(&b.labels)));
    FactorCrossings { factor, ranges }
}

/// Rank-1 joint projectors and their derivatives by the product rule.
fn joint_frame(
    factors: &[SpectralTrajectory],
    k: usize,
    with_derivative: bool,
) -> (Vec<KetVector>, Vec<ComplexSquareMatrix>, Vec<ComplexSquareMatrix>) {
    let counts: Vec<usize> = factors.iter().map(SpectralTrajectory::num_labels).collect();
    let projectors: Vec<Vec<ComplexSquareMatrix>> = factors.iter().map(|f| f.projectors(k)).collect();
    let derivatives: Vec<Vec<ComplexSquareMatrix>> =
        if with_derivative { factors.iter().map(|f| projector_derivative(f, k)).collect() } else { Vec::new() };
    let mut vectors = Vec::new();
    let mut joint = Vec::new();
    let mut joint_dot = Vec::new();
    for idx in joint_indices(&counts) {
        let v = idx
            .0
            .iter()
            .zip(factors)
            .map(|(&l, f)| f.frame(k)[l].vector.clone())
            .reduce(|a, b| a.tensor(&b))
            .expect("at least one factor");
        joint.push(ComplexSquareMatrix::outer(&v));
        vectors.push(v);
        if with_derivative {
            let mut sum: Option<ComplexSquareMatrix> = None;
            for nu in 0..factors.len() {
                let parts: Vec<&ComplexSquareMatrix> = idx
                    .0
                    .iter()
                    .enumerate()
                    .map(|(m, &l)| if m == nu { &derivatives[m][l] } else { &projectors[m][l] })
                    .collect();
                let term = tensor_product_all(&parts);
                sum = Some(match sum {
                    Some(s) => &s + &term,
                    None => term,
                });
            }
            joint_dot.push(sum.expect("at least one factor"));
        }
    }
    (vectors, joint, joint_dot)
}

struct Evolution {
    times: Vec<f64>,
    breakpoints: Vec<usize>,
    hamiltonians: Vec<ComplexSquareMatrix>,
    segment_of: Vec<usize>,
    states: Vec<KetVector>,
}

fn evolve(scenario: &Scenario) -> std::result::Result<Evolution, ScenarioError> {
    let tol = &scenario.tolerances;
    let segments = scenario.hamiltonian_segments()?;
    let bounds: Vec<(f64, f64)> = segments.iter().map(|s| (s.0, s.1)).collect();
    let (times, breakpoints, segment_of) = build_grid(&bounds, scenario.time.grid_step);
    let hamiltonians: Vec<ComplexSquareMatrix> = segments.into_iter().map(|s| s.2).collect();
    let mut states = Vec::with_capacity(times.len());
    let mut start_state = scenario.initial_ket()?;
    let mut idx = 0;
    for (m, h) in hamiltonians.iter().enumerate() {
        let prop = Propagator::new(h, tol).map_err(stage(Stage::Evolve))?;
        let start_time = times[idx];
        let end = breakpoints.get(m).copied().unwrap_or(times.len() - 1);
        let first = if m == 0 { idx } else { idx + 1 };
        for k in first..=end {
            states.push(prop.evolve(&start_state, times[k] - start_time).map_err(stage(Stage::Evolve))?);
        }
        start_state = states[end].clone();
        idx = end;
    }
    Ok(Evolution { times, breakpoints, hamiltonians, segment_of, states })
}

/// Runs the full pipeline on a validated scenario.
pub fn run(scenario: &Scenario, options: &RunOptions) -> std::result::Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    let tol = scenario.tolerances;
    let th = &scenario.thresholds;
    let exec = options.exec;
    let space = scenario.factor_space()?;
    let dim = space.total_dim();

    let ev = evolve(scenario)?;
    let n = ev.times.len();
    let times = &ev.times;
    let h_at = |k: usize| &ev.hamiltonians[ev.segment_of[k]];

    // Tracking per factor.
    let mut factors = Vec::with_capacity(space.num_factors());
    for nu in 0..space.num_factors() {
        let rhos = try_map_nodes(n, exec, |k| reduced_state(&ev.states[k], &space, nu))
            .map_err(stage(Stage::Track))?;
        let traj = track(&rhos, times, &tol).map_err(stage(Stage::Track))?.with_breakpoints(ev.breakpoints.clone());
        factors.push(traj);
    }
    let crossings: Vec<FactorCrossings> =
        factors.iter().enumerate().map(|(nu, f)| merge_crossings(nu, f, th.crossing_gap)).collect();

    // Currents and the probabilities they refer to.
    let kind = scenario.current;
    let frozen = match kind {
        CurrentKind::StaticSchrodinger => Some(joint_frame(&factors, 0, false).1),
        _ => None,
    };
    let per_node = try_map_nodes(n, exec, |k| {
        let psi = &ev.states[k];
        let h = h_at(k);
        match &frozen {
            Some(projectors) => {
                let p: Vec<f64> = projectors.iter().map(|q| q.expectation(psi).re.clamp(0.0, 1.0)).collect();
                Ok((p, static_schrodinger_current(psi, h, projectors)?))
            }
            None => {
                let (vectors, projectors, dots) = joint_frame(&factors, k, true);
                let p: Vec<f64> = vectors.iter().map(|v| v.dot(psi).norm_sqr().clamp(0.0, 1.0)).collect();
                let j = if kind == CurrentKind::MinimalFlow {
                    minimal_flow_current(&generalized_pdot(psi, h, &projectors, &dots)?, &tol)?
                } else {
                    generalized_schrodinger_current(psi, h, &projectors, &dots, scenario.extra_term, &tol)?
                };
                Ok((p, j))
            }
        }
    })
    .map_err(stage(Stage::Currents))?;
    let (probabilities, currents): (Vec<Vec<f64>>, Vec<CurrentMatrix>) = per_node.into_iter().unzip();
    let fd_pdot: Vec<Vec<f64>> =
        (0..n).map(|k| apply_stencil(&factors[0].derivative_stencil(k), &probabilities)).collect();
    let continuity = (0..n).map(|k| continuity_residual(&currents[k], &fd_pdot[k])).fold(0.0, f64::max);

    // Rates.
    let rates = try_map_nodes(n, exec, |k| compute_rates(&scenario.rate_choice, &currents[k], &probabilities[k], &tol))
        .map_err(stage(Stage::Rates))?;
    let master = (0..n).map(|k| master_residual(&rates[k], &probabilities[k], &fd_pdot[k])).fold(0.0, f64::max);
    let max_rate = rates.iter().map(RateMatrix::max_finite).fold(0.0, f64::max);
    let mut pole_states: Vec<usize> = rates.iter().flat_map(RateMatrix::pole_states).collect();
    pole_states.sort_unstable();
    pole_states.dedup();
    let poles = PoleReport {
        pole_nodes: rates.iter().filter(|r| r.has_pole()).count(),
        pole_states,
        singularities: classify_singularities(times, &probabilities, &rates, th.isolated_zero, &tol),
    };

    // Kernels.
    let (kernel_diag, kernel_exports) = if options.kernels {
        kernels(scenario, times, &ev.breakpoints, &rates).map_err(stage(Stage::Kernels))?
    } else {
        (KernelDiagnostics { skipped: Some("disabled".into()), ..Default::default() }, Vec::new())
    };

    let joint_states = joint_state_records(scenario.factor_dims.as_slice(), &probabilities[0]);

    // Ensemble.
    let mut paths = Vec::new();
    let mut stats = None;
    let mut factor_stats = Vec::new();
    let mut quantum = Vec::new();
    let mut ensemble_diag = None;
    if options.ensemble {
        let traj = RateTrajectory::new(times.clone(), rates.clone(), probabilities.clone())
            .map_err(stage(Stage::Sampling))?;
        let spec = EnsembleSpec {
            paths: scenario.ensemble.paths,
            master_seed: scenario.ensemble.master_seed,
            horizon: scenario.time.t1,
            policy: scenario.pole_policy,
        };
        paths = sample_ensemble(&traj, &probabilities[0], &spec, exec).map_err(stage(Stage::Sampling))?;
        let nodes: Vec<usize> = scenario.ensemble.query_times.iter().map(|&q| nearest_node(times, q)).collect();
        let qtimes: Vec<f64> = nodes.iter().map(|&k| times[k]).collect();
        quantum = nodes.iter().map(|&k| probabilities[k].clone()).collect();
        let joint = ensemble_marginals(&paths, &qtimes, dim, None);
        let tv = joint.total_variation(&quantum);
        let mut factor_tv = Vec::new();
        for nu in 0..space.num_factors() {
            let s = ensemble_marginals(&paths, &qtimes, dim, Some((&space, nu)));
            let reference: Vec<Vec<f64>> = quantum.iter().map(|p| factor_marginal(&space, nu, p)).collect();
            factor_tv.push(s.total_variation(&reference));
            factor_stats.push(s);
        }
        let big_n = paths.len() as f64;
        let mut max_z = 0.0f64;
        let mut zero_mass = 0.0f64;
        for (f, p) in joint.distributions.iter().zip(&quantum) {
            for (a, b) in f.iter().zip(p) {
                let var = b * (1.0 - b);
                if var > 0.0 {
                    max_z = max_z.max((a - b).abs() / (var / big_n).sqrt());
                } else if *b <= tol.zero_probability {
                    zero_mass = zero_mass.max(*a);
                }
            }
        }
        let span = scenario.time.t1 - scenario.time.t0;
        let jumps: usize = paths.iter().map(SamplePath::jumps).sum();
        let sojourn: f64 = paths.iter().map(|p| traj.zero_sojourn_time(p, scenario.time.t1)).sum();
        let max_tv = tv.iter().copied().fold(0.0, f64::max);
        ensemble_diag = Some(EnsembleDiagnostics {
            paths: paths.len(),
            master_seed: scenario.ensemble.master_seed,
            query_times: qtimes,
            total_variation: tv,
            max_total_variation: max_tv,
            total_variation_limit: th.total_variation_limit(dim, paths.len()),
            factor_total_variation: factor_tv,
            max_z_score: max_z,
            zero_probability_mass: zero_mass,
            mean_jumps: jumps as f64 / big_n,
            deterministic: jumps == 0,
            zero_sojourn_fraction: sojourn / (big_n * span),
        });
        stats = Some(joint);
    }

    let mut report = RunReport {
        scenario: scenario.name.clone(),
        current: kind,
        dim,
        grid_nodes: n,
        breakpoints: ev.breakpoints.iter().map(|&b| times[b]).collect(),
        continuity_residual: continuity,
        master_residual: master,
        max_rate,
        crossings,
        poles,
        kernels: kernel_diag,
        ensemble: ensemble_diag,
        failures: Vec::new(),
        passed: true,
    };
    report.failures = check_thresholds(&report, scenario);
    report.passed = report.failures.is_empty();

    let artifacts = RunArtifacts {
        space,
        times: ev.times.clone(),
        factors,
        probabilities,
        fd_pdot,
        currents,
        rates,
        kernels: kernel_exports,
        joint_states,
        paths,
        stats,
        factor_stats,
        quantum,
    };
    Ok(RunOutput { report, artifacts })
}

fn nearest_node(times: &[f64], q: f64) -> usize {
    let k = times.partition_point(|&t| t < q);
    if k == 0 {
        0
    } else if k == times.len() || q - times[k - 1] <= times[k] - q {
        k - 1
    } else {
        k
    }
}

pub(super) fn factor_marginal(space: &FactorSpace, factor: usize, p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; space.factor_dims()[factor]];
    for (flat, v) in p.iter().enumerate() {
        out[space.split_index(flat)[factor]] += v;
    }
    out
}

fn check_thresholds(r: &RunReport, scenario: &Scenario) -> Vec<String> {
    let th = &scenario.thresholds;
    let k = &r.kernels;
    let mut checks = vec![
        ("continuity residual", r.continuity_residual, th.continuity),
        ("master residual", r.master_residual, th.master),
        ("Chapman-Kolmogorov residual", k.max_chapman_kolmogorov, th.chapman_kolmogorov),
        ("forward-equation residual", k.max_kolmogorov_forward, th.kolmogorov_forward),
        ("backward-equation residual", k.max_kolmogorov_backward, th.kolmogorov_backward),
        ("Feller vs ODE kernel discrepancy", k.max_feller_vs_ode, th.feller_vs_ode),
        ("honesty deficit", k.max_honesty_deficit, th.honesty_deficit),
    ];
    if let Some(e) = &r.ensemble {
        checks.push(("ensemble total variation", e.max_total_variation, e.total_variation_limit));
        checks.push(("zero-probability sojourn fraction", e.zero_sojourn_fraction, th.zero_sojourn));
    }
    checks
        .into_iter()
        .filter(|(_, value, limit)| !(value.is_finite() && *value >= 0.0 && value <= limit))
        .map(|(name, value, limit)| format!("{name} {value:.3e} exceeds {limit:.1e}"))
        .collect()
}

/// Largest `rate · ode_step` at which kernel finite differences are trusted:
/// the central-difference error of the Kolmogorov residuals grows like
/// `dt² T³ / 6`, about 2e-5 at this bound with `dt = 1e-3`.
const STIFFNESS: f64 = 0.005;

/// Kernel checks on up to `kernel_windows` pole-free windows that stay
/// inside one Hamiltonian segment and whose rates the ODE step resolves.
fn kernels(
    scenario: &Scenario,
    times: &[f64],
    breakpoints: &[usize],
    rates: &[RateMatrix],
) -> Result<(KernelDiagnostics, Vec<KernelExport>)> {
    let th = &scenario.thresholds;
    let tol = scenario.tolerances;
    let gridded = GriddedRates::new(times, rates)?;
    let n = times.len();
    let mut bounds = vec![0];
    bounds.extend_from_slice(breakpoints);
    bounds.push(n - 1);
    let span = times[n - 1] - times[0];
    let margin = 2.0 * th.ode_step;
    // Nodes whose rates the finite-difference step resolves.
    let resolved: Vec<bool> = rates
        .iter()
        .map(|r| (0..r.dim()).all(|i| r.exit_rate(i).is_some_and(|x| x * th.ode_step <= STIFFNESS)))
        .collect();
    let reach = |k: usize, dir: f64| nearest_node(times, times[k] + dir * margin);
    let smooth = |k: usize| {
        let (a, b) = (reach(k, -1.0).saturating_sub(1), (reach(k, 1.0) + 1).min(n - 1));
        (a..=b).all(|m| resolved[m])
    };
    let mut diag = KernelDiagnostics::default();
    let mut exports = Vec::new();
    for m in 0..th.kernel_windows {
        let s0 = times[0] + margin + span * m as f64 / th.kernel_windows as f64;
        let Some(seg) = bounds.windows(2).find(|w| times[w[0]] <= s0 && s0 < times[w[1]]) else { continue };
        let (lo, hi) = (times[seg[0]], times[seg[1]]);
        let mut ks = nearest_node(times, s0.max(lo + margin));
        while ks + 1 < n && times[ks] < hi - margin && !smooth(ks) {
            ks += 1;
        }
        let s = times[ks];
        if !(s < hi - margin) || !smooth(ks) {
            continue;
        }
        let first = reach(ks, -1.0).saturating_sub(1);
        let target = (span / th.kernel_windows as f64).min(th.max_kernel_span);
        let mut ke = ks;
        while ke + 1 < n && times[ke + 1] <= hi - margin && times[ke + 1] - s <= target {
            let last = (reach(ke + 1, 1.0) + 1).min(n - 1);
            if !resolved[first..=last].iter().all(|&r| r) {
                break;
            }
            ke += 1;
        }
        // Quadrature nodes on grid nodes and midpoints, so Simpson pairs never
        // straddle a kink of the interpolated rates and kernels at neighbouring
        // grid times use the same discretisation.
        let h_grid = times[ks + 1] - times[ks];
        let quad = h_grid / (2.0 * (h_grid / (2.0 * th.quad_step)).ceil()) * (1.0 + 1e-9);
        let mut window = None;
        let mut len = times[ke] - s;
        for _ in 0..6 {
            let mut kt = nearest_node(times, s + len);
            while kt > ks && !smooth(kt) {
                kt -= 1;
            }
            let t = times[kt];
            if !(t - s > 4.0 * th.ode_step) {
                break;
            }
            match feller_minimal(&gridded, s, t, th.n_max, quad, &tol) {
                Ok(kernel) => {
                    window = Some((t, kernel));
                    break;
                }
                Err(Error::TruncationNotConverged { .. }) => len = 0.5 * (t - s),
                Err(e) => return Err(e),
            }
        }
        let Some((t, kernel)) = window else { continue };
        let kernel_fn = |a: f64, b: f64| -> Result<TransitionKernel> {
            feller_minimal(&gridded, a, b, th.n_max, quad, &tol)
        };
        let mid = times[nearest_node(times, 0.5 * (s + t))];
        let ode = forward_ode_kernel(&gridded, s, t, th.ode_step)?;
        let w = KernelWindow {
            s,
            t,
            chapman_kolmogorov: chapman_kolmogorov_residual(kernel_fn, s, mid - s, t)?,
            kolmogorov_forward: forward_residual(kernel_fn, &gridded as &dyn RateFunction, s, t, h_grid)?,
            kolmogorov_backward: backward_residual(kernel_fn, &gridded as &dyn RateFunction, s, t, h_grid)?,
            feller_vs_ode: (&kernel.matrix - &ode.matrix).amax(),
            honesty_deficit: honesty_deficit(&kernel).iter().fold(0.0, |m, d| m.max(d.abs())),
        };
        diag.max_chapman_kolmogorov = diag.max_chapman_kolmogorov.max(w.chapman_kolmogorov);
        diag.max_kolmogorov_forward = diag.max_kolmogorov_forward.max(w.kolmogorov_forward);
        diag.max_kolmogorov_backward = diag.max_kolmogorov_backward.max(w.kolmogorov_backward);
        diag.max_feller_vs_ode = diag.max_feller_vs_ode.max(w.feller_vs_ode);
        diag.max_honesty_deficit = diag.max_honesty_deficit.max(w.honesty_deficit);
        diag.windows.push(w);
        exports.push(kernel.export());
    }
    if diag.windows.is_empty() {
        diag.skipped = Some("no pole-free, rate-resolved window inside a single Hamiltonian segment".into());
    }
    Ok((diag, exports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_puts_switch_on_a_node() {
        let (times, bps, seg) = build_grid(&[(0.0, 0.25), (0.25, 1.0)], 0.1);
        assert_eq!(bps.len(), 1);
        assert_eq!(times[bps[0]], 0.25);
        assert_eq!(*times.last().unwrap(), 1.0);
        assert!(times.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 0.1 + 1e-12));
        assert_eq!(seg[bps[0]], 1);
        assert_eq!(seg[bps[0] - 1], 0);
    }

    #[test]
    fn grid_exact_steps() {
        let (times, bps, _) = build_grid(&[(0.0, 1.0)], 1e-3);
        assert_eq!(times.len(), 1001);
        assert!(bps.is_empty());
    }

    #[test]
    fn nearest_node_snaps() {
        let t = [0.0, 0.1, 0.2];
        assert_eq!(nearest_node(&t, 0.04), 0);
        assert_eq!(nearest_node(&t, 0.06), 1);
        assert_eq!(nearest_node(&t, 5.0), 2);
        assert_eq!(nearest_node(&t, -1.0), 0);
    }

    #[test]
    fn factor_marginal_sums() {
        let space = FactorSpace::new(vec![2, 2]).unwrap();
        assert_eq!(factor_marginal(&space, 0, &[0.1, 0.2, 0.3, 0.4]), vec![0.30000000000000004, 0.7]);
        assert_eq!(factor_marginal(&space, 1, &[0.1, 0.2, 0.3, 0.4]), vec![0.4, 0.6000000000000001]);
    }
}
