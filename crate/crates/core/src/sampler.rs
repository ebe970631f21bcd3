//! Monte Carlo sample paths of the jump process on a rate grid.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::FactorSpace;
use crate::kinetics::{Rate, RateMatrix};

/// What to do when a path sits in a state whose exit rate diverges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolePolicy {
    /// Jump at the last grid node before the pole, or immediately when the
    /// path is already past it.
    #[default]
    Resample,
    Abort,
}

/// How ensembles are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

/// Probabilities below this count as zero when sampling the initial state.
const ZERO_WEIGHT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub seed: u64,
    pub initial: usize,
    /// `(time, destination)` pairs with strictly increasing times.
    pub events: Vec<(f64, usize)>,
}

impl SamplePath {
    /// State occupied at time `t` (the last event at or before `t`).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.events.partition_point(|e| e.0 <= t);
        if k == 0 {
            self.initial
        } else {
            self.events[k - 1].1
        }
    }

    pub fn jumps(&self) -> usize {
        self.events.len()
    }
}

/// Per-path stream seed derived from the master seed and path index.
pub fn path_seed(master_seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(master_seed ^ splitmix(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

fn draw_index(weights: impl Iterator<Item = f64> + Clone, u: f64) -> Option<usize> {
    let total: f64 = weights.clone().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last = None;
    for (k, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(k);
        if acc > target {
            return Some(k);
        }
    }
    last
}

/// Inverse-CDF draw over `p0` in index order.
pub fn sample_initial<R: Rng + ?Sized>(p0: &[f64], rng: &mut R) -> usize {
    let w = p0.iter().map(|&p| if p > ZERO_WEIGHT { p } else { 0.0 });
    draw_index(w, rng.gen::<f64>()).unwrap_or(0)
}

fn exp_draw<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(1.0 - rng.gen::<f64>()).ln()
}

/// Waiting time under a time-dependent exit rate on `[s, horizon]`.
///
/// The cumulative hazard is accumulated by the trapezoidal rule at
/// `step` and interpolated linearly; `None` means no jump before `horizon`.
pub fn sample_waiting_time<R: Rng + ?Sized>(
    exit_rate: impl Fn(f64) -> f64,
    s: f64,
    horizon: f64,
    step: f64,
    rng: &mut R,
) -> Result<Option<f64>> {
    if !(step > 0.0) || !(horizon >= s) {
        return Err(Error::InvalidArgument("need step > 0 and horizon >= s".into()));
    }
    let n = ((horizon - s) / step).ceil().max(1.0) as usize;
    let h = (horizon - s) / n as f64;
    let times: Vec<f64> = (0..=n).map(|k| if k == n { horizon } else { s + k as f64 * h }).collect();
    let mut rates = Vec::with_capacity(n + 1);
    for &t in &times {
        let r = exit_rate(t);
        if !(r >= 0.0) {
            return Err(Error::NegativeRate { state: 0, time: t, rate: r });
        }
        rates.push(r);
    }
    let mut cum = vec![0.0; n + 1];
    for k in 0..n {
        cum[k + 1] = cum[k] + 0.5 * h * (rates[k] + rates[k + 1]);
    }
    let e = exp_draw(rng);
    if cum[n] < e {
        return Ok(None);
    }
    let k = cum.partition_point(|&c| c < e);
    let (a, b) = (cum[k - 1], cum[k]);
    Ok(Some(times[k - 1] + (times[k] - times[k - 1]) * (e - a) / (b - a)))
}

/// Precomputed per-state hazard tables for a gridded rate trajectory.
#[derive(Clone, Debug)]
pub struct RateTrajectory {
    times: Vec<f64>,
    rates: Vec<RateMatrix>,
    probabilities: Vec<Vec<f64>>,
    dim: usize,
    /// `exit[k][i]`, `None` at poles.
    exit: Vec<Vec<Option<f64>>>,
    /// Cumulative hazard from the first node, skipping barrier intervals.
    cum: Vec<Vec<f64>>,
    /// `next_barrier[i][k]`: first interval `≥ k` touching a pole of `i`,
    /// or the number of intervals if none.
    next_barrier: Vec<Vec<usize>>,
    /// Cumulative time with `p_i < zero_sojourn` (linear in each interval).
    zero_time: Vec<Vec<f64>>,
}

/// Probability level below which occupation is counted as zero sojourn.
pub const ZERO_SOJOURN_LEVEL: f64 = 1e-6;

impl RateTrajectory {
    /// `probabilities[k][i]` are the single-time probabilities on the grid,
    /// used as a last-resort jump distribution out of poles.
    pub fn new(times: Vec<f64>, rates: Vec<RateMatrix>, probabilities: Vec<Vec<f64>>) -> Result<Self> {
        let n = times.len();
        if n < 2 || rates.len() != n || probabilities.len() != n {
            return Err(Error::InvalidArgument("rate trajectory needs at least two matching nodes".into()));
        }
        let dim = rates[0].dim();
        let exit: Vec<Vec<Option<f64>>> = rates.iter().map(|r| (0..dim).map(|i| r.exit_rate(i)).collect()).collect();
        let intervals = n - 1;
        let mut cum = vec![vec![0.0; dim]; n];
        let mut next_barrier = vec![vec![intervals; intervals + 1]; dim];
        let mut zero_time = vec![vec![0.0; dim]; n];
        for i in 0..dim {
            for k in 0..intervals {
                let dt = times[k + 1] - times[k];
                cum[k + 1][i] = cum[k][i]
                    + match (exit[k][i], exit[k + 1][i]) {
                        (Some(a), Some(b)) => 0.5 * dt * (a + b),
                        _ => 0.0,
                    };
                let (p0, p1) = (probabilities[k][i], probabilities[k + 1][i]);
                let z = zero_fraction(p0, p1, ZERO_SOJOURN_LEVEL);
                zero_time[k + 1][i] = zero_time[k][i] + z * dt;
            }
            for k in (0..intervals).rev() {
                let barrier = exit[k][i].is_none() || exit[k + 1][i].is_none();
                next_barrier[i][k] = if barrier { k } else { next_barrier[i][k + 1] };
            }
        }
        Ok(Self { times, rates, probabilities, dim, exit, cum, next_barrier, zero_time })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rates(&self) -> &[RateMatrix] {
        &self.rates
    }

    fn interval_of(&self, t: f64) -> usize {
        let n = self.times.len();
        self.times.partition_point(|&x| x <= t).clamp(1, n - 1) - 1
    }

    fn hazard_at(&self, i: usize, k: usize, t: f64) -> f64 {
        let (a, b) = (self.times[k], self.times[k + 1]);
        let w = ((t - a) / (b - a)).clamp(0.0, 1.0);
        self.cum[k][i] + w * (self.cum[k + 1][i] - self.cum[k][i])
    }

    fn zero_time_at(&self, i: usize, t: f64) -> f64 {
        let k = self.interval_of(t);
        let (a, b) = (self.times[k], self.times[k + 1]);
        let w = ((t - a) / (b - a)).clamp(0.0, 1.0);
        self.zero_time[k][i] + w * (self.zero_time[k + 1][i] - self.zero_time[k][i])
    }

    /// Jump weights out of `i` using the rates at node `k`.
    fn node_weights(&self, i: usize, k: usize) -> Vec<f64> {
        let r = &self.rates[k];
        let pole = r.exit_rate(i).is_none();
        (0..self.dim)
            .map(|j| {
                if j == i {
                    return 0.0;
                }
                match r.get(j, i) {
                    Rate::Finite(v) if !pole => v,
                    Rate::Finite(_) => 0.0,
                    Rate::Pole { current } => current.max(0.0),
                }
            })
            .collect()
    }

    fn fallback_weights(&self, i: usize, k: usize) -> Vec<f64> {
        (0..self.dim).map(|j| if j == i { 0.0 } else { self.probabilities[k][j].max(0.0) }).collect()
    }

    fn draw_destination<R: Rng + ?Sized>(&self, i: usize, candidates: &[Vec<f64>], rng: &mut R) -> Result<usize> {
        let u = rng.gen::<f64>();
        for w in candidates {
            if let Some(j) = draw_index(w.iter().copied(), u) {
                return Ok(j);
            }
        }
        Err(Error::InvalidArgument(format!("no admissible destination out of state {i}")))
    }

    /// One path from `initial` at the first grid time to `horizon`.
    pub fn sample_path<R: Rng + ?Sized>(
        &self,
        initial: usize,
        horizon: f64,
        policy: PolePolicy,
        seed: u64,
        rng: &mut R,
    ) -> Result<SamplePath> {
        let horizon = horizon.min(*self.times.last().unwrap());
        let mut events = Vec::new();
        let mut state = initial;
        let mut s = self.times[0];
        let intervals = self.times.len() - 1;
        while s < horizon {
            let k = self.interval_of(s);
            let i = state;
            let barrier = self.next_barrier[i][k];
            let start = self.hazard_at(i, k, s);
            let e = exp_draw(rng);

            let (tau, dest) = if barrier == k {
                // Already inside an interval touching a pole.
                let pole_node = if self.exit[k][i].is_none() { k } else { k + 1 };
                if policy == PolePolicy::Abort {
                    return Err(Error::PoleEncountered { time: self.times[pole_node], state: i });
                }
                let tau = s.next_up().max(s + 1e-12);
                let near = if (self.times[k + 1] - s) < (s - self.times[k]) { k + 1 } else { k };
                let node = if self.exit[near][i].is_none() { near } else { pole_node };
                let dest = self.draw_destination(i, &[self.node_weights(i, node), self.fallback_weights(i, node)], rng)?;
                (tau, dest)
            } else {
                let end_node = barrier.min(intervals);
                let available = self.cum[end_node][i] - start;
                if e <= available {
                    // First node at which the hazard reaches e.
                    let target = start + e;
                    let lo = k + 1;
                    let m = lo + self.cum[lo..=end_node].partition_point(|c| c[i] < target);
                    let m = m.min(end_node);
                    let (a, b) = (self.cum[m - 1][i], self.cum[m][i]);
                    let (ta, tb) = (self.times[m - 1], self.times[m]);
                    let from = if m - 1 == k { s } else { ta };
                    let base = if m - 1 == k { start } else { a };
                    let tau = if b > base { from + (tb - from) * ((target - base) / (b - base)).clamp(0.0, 1.0) } else { tb };
                    let tau = tau.max(s.next_up());
                    let w = ((tau - ta) / (tb - ta)).clamp(0.0, 1.0);
                    let r0 = self.node_weights(i, m - 1);
                    let r1 = self.node_weights(i, m);
                    let mixed: Vec<f64> = r0.iter().zip(&r1).map(|(x, y)| (1.0 - w) * x + w * y).collect();
                    let dest = self.draw_destination(i, &[mixed, r1, r0, self.fallback_weights(i, m)], rng)?;
                    (tau, dest)
                } else if barrier < intervals {
                    // Survived to the node before the pole: forced jump there.
                    if policy == PolePolicy::Abort {
                        return Err(Error::PoleEncountered { time: self.times[barrier + 1], state: i });
                    }
                    let tau = self.times[barrier].max(s.next_up());
                    let dest = self.draw_destination(
                        i,
                        &[
                            self.node_weights(i, barrier),
                            self.node_weights(i, barrier + 1),
                            self.fallback_weights(i, barrier),
                        ],
                        rng,
                    )?;
                    (tau, dest)
                } else {
                    break;
                }
            };
            if tau > horizon {
                break;
            }
            events.push((tau, dest));
            state = dest;
            s = tau;
        }
        Ok(SamplePath { seed, initial, events })
    }

    /// Time spent by `path` in states with `p_i(t) < ZERO_SOJOURN_LEVEL`.
    pub fn zero_sojourn_time(&self, path: &SamplePath, horizon: f64) -> f64 {
        let mut total = 0.0;
        let mut state = path.initial;
        let mut s = self.times[0];
        for &(t, dest) in path.events.iter().chain(std::iter::once(&(horizon, usize::MAX))) {
            let t = t.min(horizon);
            total += self.zero_time_at(state, t) - self.zero_time_at(state, s);
            if dest == usize::MAX {
                break;
            }
            state = dest;
            s = t;
        }
        total
    }
}

/// Fraction of `[0, 1]` on which the linear interpolant of `p0 → p1` is
/// below `level`.
fn zero_fraction(p0: f64, p1: f64, level: f64) -> f64 {
    match (p0 < level, p1 < level) {
        (true, true) => 1.0,
        (false, false) => 0.0,
        (true, false) => (level - p0) / (p1 - p0),
        (false, true) => (p0 - level) / (p0 - p1),
    }
}

/// Ensemble configuration shared by every path.
#[derive(Clone, Copy, Debug)]
pub struct EnsembleSpec {
    pub paths: usize,
    pub master_seed: u64,
    pub horizon: f64,
    pub policy: PolePolicy,
}

fn one_path(traj: &RateTrajectory, p0: &[f64], spec: &EnsembleSpec, index: usize) -> Result<SamplePath> {
    let seed = path_seed(spec.master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = sample_initial(p0, &mut rng);
    traj.sample_path(initial, spec.horizon, spec.policy, seed, &mut rng)
}

/// Samples `spec.paths` independent paths; the result does not depend on
/// the execution mode.
pub fn sample_ensemble(traj: &RateTrajectory, p0: &[f64], spec: &EnsembleSpec, mode: ExecMode) -> Result<Vec<SamplePath>> {
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..spec.paths).into_par_iter().map(|k| one_path(traj, p0, spec, k)).collect()
        }
        _ => (0..spec.paths).map(|k| one_path(traj, p0, spec, k)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub query_times: Vec<f64>,
    /// `distributions[q][state]`, counts divided by the path count.
    pub distributions: Vec<Vec<f64>>,
    pub paths: usize,
}

impl EnsembleStats {
    /// `½ Σ |f − p|` against reference probabilities per query time.
    pub fn total_variation(&self, reference: &[Vec<f64>]) -> Vec<f64> {
        self.distributions
            .iter()
            .zip(reference)
            .map(|(f, p)| 0.5 * f.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .collect()
    }
}

/// Empirical state distribution at each query time, optionally reduced to
/// one factor's labels.
pub fn ensemble_marginals(
    paths: &[SamplePath],
    query_times: &[f64],
    num_states: usize,
    factor: Option<(&FactorSpace, usize)>,
) -> EnsembleStats {
    let bins = factor.map_or(num_states, |(space, f)| space.factor_dims()[f]);
    let n = paths.len();
    let distributions = query_times
        .iter()
        .map(|&q| {
            let mut counts = vec![0usize; bins];
            for p in paths {
                let s = p.state_at(q);
                let b = factor.map_or(s, |(space, f)| space.split_index(s)[f]);
                counts[b] += 1;
            }
            counts.into_iter().map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
        })
        .collect();
    EnsembleStats { query_times: query_times.to_vec(), distributions, paths: n }
}

/// JSONL with per-factor labels for the initial state and destinations.
pub fn write_paths_jsonl<W: Write>(mut out: W, paths: &[SamplePath], space: &FactorSpace) -> io::Result<()> {
    #[derive(Serialize)]
    struct Line {
        seed: u64,
        initial: Vec<usize>,
        events: Vec<(f64, Vec<usize>)>,
    }
    for p in paths {
        let line = Line {
            seed: p.seed,
            initial: space.split_index(p.initial),
            events: p.events.iter().map(|&(t, d)| (t, space.split_index(d))).collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        writeln!(out)?;
    }
    Ok(())
}

/// `time,state,frequency,quantum_probability` rows.
pub fn write_stats_csv<W: Write>(out: W, stats: &EnsembleStats, quantum: &[Vec<f64>]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "state", "frequency", "quantum_probability"])?;
    for ((t, f), q) in stats.query_times.iter().zip(&stats.distributions).zip(quantum) {
        for (s, (a, b)) in f.iter().zip(q).enumerate() {
            w.serialize((t, s, a, b))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::currents::CurrentMatrix;
    use crate::kinetics::bell_rates;
    use crate::Tolerances;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn grid(t1: f64, step: f64) -> Vec<f64> {
        let n = (t1 / step).round() as usize;
        (0..=n).map(|k| k as f64 * step).collect()
    }

    #[test]
    fn initial_sampling() {
        let mut r = rng(1);
        assert!((0..1000).all(|_| sample_initial(&[1.0, 0.0, 0.0], &mut r) == 0));
        let singlet = [0.0, 0.5, 0.5, 0.0];
        assert!((0..10_000).all(|_| matches!(sample_initial(&singlet, &mut r), 1 | 2)));
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_initial(&[0.25; 4], &mut r)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.006);
        }
    }

    #[test]
    fn waiting_time_laws() {
        let mut r = rng(2);
        assert!((0..100).all(|_| sample_waiting_time(|_| 0.0, 0.0, 3.0, 1e-3, &mut r).unwrap().is_none()));
        assert!(matches!(sample_waiting_time(|_| -1.0, 0.0, 1.0, 1e-2, &mut r), Err(Error::NegativeRate { .. })));

        let n = 100_000;
        let draws: Vec<Option<f64>> =
            (0..n).map(|_| sample_waiting_time(|_| 2.0, 0.0, 5.0, 1e-3, &mut r).unwrap()).collect();
        for t in [0.1, 0.5, 1.0] {
            let surv = draws.iter().filter(|d| d.is_none_or(|x| x > t)).count() as f64 / n as f64;
            let p = (-2.0 * t).exp();
            assert!((surv - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "t={t} surv={surv} exact={p}");
        }

        let step = |u: f64| if u < 0.5 { 0.0 } else { 3.0 };
        let draws: Vec<Option<f64>> = (0..n).map(|_| sample_waiting_time(step, 0.0, 2.0, 1e-3, &mut r).unwrap()).collect();
        assert!(draws.iter().flatten().all(|&x| x >= 0.5 - 1e-3));
        let t = 0.8;
        let surv = draws.iter().filter(|d| d.is_none_or(|x| x > t)).count() as f64 / n as f64;
        let p = (-3.0f64 * (t - 0.5)).exp();
        assert!((surv - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt() + 2e-3);
    }

    fn two_state_easy(step: f64, t1: f64) -> RateTrajectory {
        let times = grid(t1, step);
        let tol = Tolerances::default();
        let mut rates = Vec::new();
        let mut probs = Vec::new();
        for &t in &times {
            let p1 = t.cos().powi(2);
            let j = (2.0 * t).sin();
            rates.push(bell_rates(&CurrentMatrix::from_upper(2, |_, _| -j), &[p1, 1.0 - p1], &tol));
            probs.push(vec![p1, 1.0 - p1]);
        }
        RateTrajectory::new(times, rates, probs).unwrap()
    }

    #[test]
    fn zero_rates_give_empty_paths() {
        let times = grid(1.0, 0.01);
        let n = times.len();
        let traj = RateTrajectory::new(times, vec![RateMatrix::zeros(3); n], vec![vec![0.2, 0.3, 0.5]; n]).unwrap();
        let spec = EnsembleSpec { paths: 500, master_seed: 9, horizon: 1.0, policy: PolePolicy::Abort };
        let paths = sample_ensemble(&traj, &[0.2, 0.3, 0.5], &spec, ExecMode::Sequential).unwrap();
        assert!(paths.iter().all(|p| p.events.is_empty()));
        let stats = ensemble_marginals(&paths, &[0.0, 0.5, 1.0], 3, None);
        assert_eq!(stats.distributions[0], stats.distributions[2]);
    }

    #[test]
    fn cos_squared_marginals_follow_born_rule() {
        let traj = two_state_easy(1e-3, 0.7);
        let spec = EnsembleSpec { paths: 100_000, master_seed: 17, horizon: 0.7, policy: PolePolicy::Resample };
        let paths = sample_ensemble(&traj, &[1.0, 0.0], &spec, ExecMode::Parallel).unwrap();
        let stats = ensemble_marginals(&paths, &[0.2, 0.5], 2, None);
        for (q, f) in stats.query_times.iter().zip(&stats.distributions) {
            let p = q.sin().powi(2);
            let sigma = (p * (1.0 - p) / 1e5).sqrt();
            assert!((f[1] - p).abs() <= 3.0 * sigma, "t={q}: {} vs {p}", f[1]);
        }
        for p in &paths {
            assert!(p.events.windows(2).all(|w| w[1].0 > w[0].0));
            assert!(p.events.len() <= 1);
        }
    }

    #[test]
    fn pole_forces_jump_before_zero() {
        // p = (1 − t, t) until t = 1, then (0, 1): the rate out of state 0 is
        // 1/(1 − t) and the node at t = 1 is a pole.
        let times = grid(1.5, 1e-2);
        let tol = Tolerances::default();
        let mut rates = Vec::new();
        let mut probs = Vec::new();
        for &t in &times {
            let p0 = (1.0f64 - t).max(0.0);
            let j = if t <= 1.0 + 1e-12 { 1.0 } else { 0.0 };
            rates.push(bell_rates(&CurrentMatrix::from_upper(2, |_, _| -j), &[p0, 1.0 - p0], &tol));
            probs.push(vec![p0, 1.0 - p0]);
        }
        assert!(rates[100].has_pole());
        let traj = RateTrajectory::new(times, rates, probs).unwrap();
        let mut r = rng(5);
        let mut forced = 0;
        for k in 0..2000 {
            let p = traj.sample_path(0, 1.5, PolePolicy::Resample, k, &mut r).unwrap();
            assert_eq!(p.events.len(), 1, "{p:?}");
            assert!(p.events[0].0 <= 0.99 + 1e-12);
            forced += usize::from((p.events[0].0 - 0.99).abs() < 1e-12);
        }
        assert!(forced > 0);
        let mut aborted = 0;
        for k in 0..2000 {
            match traj.sample_path(0, 1.5, PolePolicy::Abort, k, &mut r) {
                Err(Error::PoleEncountered { state: 0, .. }) => aborted += 1,
                Ok(p) => assert_eq!(p.events.len(), 1),
                Err(e) => panic!("{e}"),
            }
        }
        assert!(aborted > 0 && aborted < 200, "{aborted}");
    }

    #[test]
    fn ensembles_are_reproducible_across_modes() {
        let traj = two_state_easy(1e-3, 1.0);
        let spec = EnsembleSpec { paths: 2000, master_seed: 42, horizon: 1.0, policy: PolePolicy::Resample };
        let a = sample_ensemble(&traj, &[1.0, 0.0], &spec, ExecMode::Parallel).unwrap();
        let b = sample_ensemble(&traj, &[1.0, 0.0], &spec, ExecMode::Sequential).unwrap();
        let c = sample_ensemble(&traj, &[1.0, 0.0], &spec, ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn state_lookup_and_factor_marginals() {
        let p = SamplePath { seed: 0, initial: 3, events: vec![(0.5, 1), (0.8, 2)] };
        assert_eq!(p.state_at(0.1), 3);
        assert_eq!(p.state_at(0.5), 1);
        assert_eq!(p.state_at(0.9), 2);
        let space = FactorSpace::new(vec![2, 2]).unwrap();
        let stats = ensemble_marginals(&[p.clone()], &[0.1, 0.6], 4, Some((&space, 0)));
        assert_eq!(stats.distributions, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let mut buf = Vec::new();
        write_paths_jsonl(&mut buf, &[p], &space).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"seed\":0,\"initial\":[1,1],\"events\":[[0.5,[0,1]],[0.8,[1,0]]]}\n");
    }

    #[test]
    fn zero_sojourn_accounting() {
        let times = grid(1.0, 0.1);
        let n = times.len();
        let traj = RateTrajectory::new(times, vec![RateMatrix::zeros(2); n], vec![vec![0.0, 1.0]; n]).unwrap();
        let p = SamplePath { seed: 0, initial: 1, events: vec![(0.25, 0), (0.75, 1)] };
        assert!((traj.zero_sojourn_time(&p, 1.0) - 0.5).abs() < 1e-12);
    }
}
