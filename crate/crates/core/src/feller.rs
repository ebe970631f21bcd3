//! Finite-time transition kernels `p_ji(t, s)` from time-dependent rates.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::Tolerances;
use crate::error::{Error, Result};
use crate::kinetics::{Rate, RateMatrix};

/// Time-dependent generator `T(u)` with `T_jk = t_jk` off the diagonal and
/// `T_kk = −t_k`.
pub trait RateFunction: Sync {
    fn dim(&self) -> usize;
    fn generator_at(&self, u: f64) -> Result<DMatrix<f64>>;
}

fn dense(rates: &RateMatrix, time: f64) -> Result<DMatrix<f64>> {
    let d = rates.dim();
    let mut g = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            match rates.get(j, i) {
                Rate::Finite(v) => {
                    g[(j, i)] = v;
                    g[(i, i)] -= v;
                }
                Rate::Pole { .. } => return Err(Error::PoleInInterval { time, state: i }),
            }
        }
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct ConstantRates {
    generator: DMatrix<f64>,
}

impl ConstantRates {
    pub fn new(rates: &RateMatrix) -> Result<Self> {
        Ok(Self { generator: dense(rates, f64::NAN)? })
    }

    /// From off-diagonal entries `rates[j][i] = t_ji`; the diagonal is ignored.
    pub fn from_offdiagonal(rates: &[Vec<f64>]) -> Result<Self> {
        Self::new(&RateMatrix::from_fn(rates.len(), |j, i| rates[j][i])?)
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }
}

impl RateFunction for ConstantRates {
    fn dim(&self) -> usize {
        self.generator.nrows()
    }

    fn generator_at(&self, _u: f64) -> Result<DMatrix<f64>> {
        Ok(self.generator.clone())
    }
}

/// Rates given by a closure returning off-diagonal entries.
pub struct FnRates<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64) -> RateMatrix + Sync> FnRates<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64) -> RateMatrix + Sync> RateFunction for FnRates<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn generator_at(&self, u: f64) -> Result<DMatrix<f64>> {
        dense(&(self.f)(u), u)
    }
}

/// Rates sampled on a grid, linearly interpolated between nodes.
#[derive(Clone, Debug)]
pub struct GriddedRates {
    times: Vec<f64>,
    generators: Vec<Option<DMatrix<f64>>>,
    pole_state: Vec<usize>,
    dim: usize,
}

impl GriddedRates {
    pub fn new(times: &[f64], rates: &[RateMatrix]) -> Result<Self> {
        if times.len() != rates.len() || times.is_empty() {
            return Err(Error::InvalidArgument("rate grid and rate list must match".into()));
        }
        let dim = rates[0].dim();
        let mut generators = Vec::with_capacity(rates.len());
        let mut pole_state = Vec::with_capacity(rates.len());
        for (t, r) in times.iter().zip(rates) {
            match dense(r, *t) {
                Ok(g) => {
                    generators.push(Some(g));
                    pole_state.push(0);
                }
                Err(_) => {
                    generators.push(None);
                    pole_state.push(r.pole_states()[0]);
                }
            }
        }
        Ok(Self { times: times.to_vec(), generators, pole_state, dim })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn node(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.generators[k]
            .as_ref()
            .ok_or(Error::PoleInInterval { time: self.times[k], state: self.pole_state[k] })
    }

    /// Whether every node in `[s, t]` (and the bracketing nodes) is pole-free.
    pub fn pole_free(&self, s: f64, t: f64) -> bool {
        let lo = self.bracket(s).0;
        let hi = self.bracket(t).1;
        self.generators[lo..=hi].iter().all(Option::is_some)
    }

    fn bracket(&self, u: f64) -> (usize, usize) {
        let n = self.times.len();
        if n == 1 {
            return (0, 0);
        }
        let k = self.times.partition_point(|&x| x <= u).clamp(1, n - 1);
        (k - 1, k)
    }
}

impl RateFunction for GriddedRates {
    fn dim(&self) -> usize {
        self.dim
    }

    fn generator_at(&self, u: f64) -> Result<DMatrix<f64>> {
        let (a, b) = self.bracket(u);
        if a == b {
            return self.node(a).cloned();
        }
        let w = ((u - self.times[a]) / (self.times[b] - self.times[a])).clamp(0.0, 1.0);
        if w == 0.0 {
            return self.node(a).cloned();
        }
        if w == 1.0 {
            return self.node(b).cloned();
        }
        Ok(self.node(a)? * (1.0 - w) + self.node(b)? * w)
    }
}

/// `p_ji(t, s)` as a dense matrix (row `j`, column `i`).
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionKernel {
    pub s: f64,
    pub t: f64,
    pub matrix: DMatrix<f64>,
    pub n_max: Option<usize>,
}

impl TransitionKernel {
    pub fn identity(dim: usize, s: f64) -> Self {
        Self { s, t: s, matrix: DMatrix::identity(dim, dim), n_max: None }
    }

    fn clamped(s: f64, t: f64, mut matrix: DMatrix<f64>, n_max: Option<usize>) -> Self {
        matrix.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self { s, t, matrix, n_max }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.matrix[(j, i)]
    }

    pub fn export(&self) -> KernelExport {
        KernelExport {
            s: self.s,
            t: self.t,
            matrix: (0..self.dim()).map(|j| (0..self.dim()).map(|i| self.get(j, i)).collect()).collect(),
            n_max: self.n_max,
            deficit: honesty_deficit(self),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelExport {
    pub s: f64,
    pub t: f64,
    pub matrix: Vec<Vec<f64>>,
    pub n_max: Option<usize>,
    pub deficit: Vec<f64>,
}

/// Partial sums of the jump-count series at the final time.
#[derive(Clone, Debug)]
pub struct FellerSeries {
    pub s: f64,
    pub t: f64,
    /// `terms[n] = p⁽ⁿ⁾(t, s)`.
    pub terms: Vec<DMatrix<f64>>,
}

impl FellerSeries {
    /// Kernel from the first `n + 1` terms.
    pub fn partial_kernel(&self, n: usize) -> TransitionKernel {
        let d = self.terms[0].nrows();
        let sum = self.terms[..=n.min(self.terms.len() - 1)].iter().fold(DMatrix::zeros(d, d), |acc, m| acc + m);
        TransitionKernel::clamped(self.s, self.t, sum, Some(n))
    }

    pub fn tail(&self) -> f64 {
        self.terms.last().map_or(0.0, DMatrix::amax)
    }
}

/// Evaluates the series terms `p⁽⁰⁾ … p⁽ⁿᵐᵃˣ⁾` at time `t`.
///
/// All terms are built on one node set `u_m = s + m h` with `M` even and
/// `h ≤ quad_step`. The inner integrals are accumulated node by node:
/// Simpson over node pairs, and the parabola through the next pair for the
/// odd node in between.
pub fn feller_series(rates: &dyn RateFunction, s: f64, t: f64, n_max: usize, quad_step: f64) -> Result<FellerSeries> {
    if !(t >= s) || !(quad_step > 0.0) {
        return Err(Error::InvalidArgument(format!("need s <= t and quad_step > 0, got s={s}, t={t}")));
    }
    let d = rates.dim();
    if t == s {
        let mut terms = vec![DMatrix::identity(d, d)];
        terms.extend((0..n_max).map(|_| DMatrix::zeros(d, d)));
        return Ok(FellerSeries { s, t, terms });
    }
    let pairs = ((t - s) / (2.0 * quad_step)).ceil().max(1.0) as usize;
    let m_nodes = 2 * pairs;
    let h = (t - s) / m_nodes as f64;
    let nodes: Vec<f64> = (0..=m_nodes).map(|m| if m == m_nodes { t } else { s + m as f64 * h }).collect();
    let gens: Vec<DMatrix<f64>> = nodes.iter().map(|&u| rates.generator_at(u)).collect::<Result<_>>()?;
    for (g, &u) in gens.iter().zip(&nodes) {
        for j in 0..d {
            for i in 0..d {
                if i != j && g[(j, i)] < 0.0 {
                    return Err(Error::NegativeRate { state: i, time: u, rate: g[(j, i)] });
                }
            }
        }
    }

    // Cumulative hazard Λ_k(u_m) = ∫_s^{u_m} t_k.
    let exit = |m: usize, k: usize| -gens[m][(k, k)];
    let mut lambda = vec![vec![0.0; d]; m_nodes + 1];
    for m in (0..m_nodes).step_by(2) {
        for k in 0..d {
            let (f0, f1, f2) = (exit(m, k), exit(m + 1, k), exit(m + 2, k));
            lambda[m + 1][k] = lambda[m][k] + h * (5.0 * f0 + 8.0 * f1 - f2) / 12.0;
            lambda[m + 2][k] = lambda[m][k] + h * (f0 + 4.0 * f1 + f2) / 3.0;
        }
    }

    // p⁽⁰⁾ at every node.
    let mut level: Vec<DMatrix<f64>> = (0..=m_nodes)
        .map(|m| DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, (0..d).map(|k| (-lambda[m][k]).exp()))))
        .collect();
    let mut terms = vec![level[m_nodes].clone()];

    for _ in 0..n_max {
        // g(u_m) = off-diagonal part of T(u_m) times p⁽ⁿ⁻¹⁾(u_m).
        let g: Vec<DMatrix<f64>> = (0..=m_nodes)
            .map(|m| {
                let mut off = gens[m].clone();
                off.fill_diagonal(0.0);
                off * &level[m]
            })
            .collect();
        let mut next: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, d); m_nodes + 1];
        for m in (0..m_nodes).step_by(2) {
            for j in 0..d {
                let l0 = lambda[m][j];
                let l1 = lambda[m + 1][j];
                let l2 = lambda[m + 2][j];
                // Weights e^{-(Λ(target) − Λ(u))} for targets u_{m+1}, u_{m+2}.
                let to1 = [(l0 - l1).exp(), 1.0, (l2 - l1).exp()];
                let to2 = [(l0 - l2).exp(), (l1 - l2).exp(), 1.0];
                for i in 0..d {
                    let prev = next[m][(j, i)];
                    let (g0, g1, g2) = (g[m][(j, i)], g[m + 1][(j, i)], g[m + 2][(j, i)]);
                    next[m + 1][(j, i)] =
                        to1[0] * prev + h * (5.0 * to1[0] * g0 + 8.0 * g1 - to1[2] * g2) / 12.0;
                    next[m + 2][(j, i)] =
                        to2[0] * prev + h * (to2[0] * g0 + 4.0 * to2[1] * g1 + g2) / 3.0;
                }
            }
        }
        next.iter_mut().for_each(|mat| mat.iter_mut().for_each(|v| *v = v.max(0.0)));
        terms.push(next[m_nodes].clone());
        level = next;
    }
    Ok(FellerSeries { s, t, terms })
}

/// Truncated minimal solution `Σ_{n ≤ n_max} p⁽ⁿ⁾(t, s)`.
pub fn feller_minimal(
    rates: &dyn RateFunction,
    s: f64,
    t: f64,
    n_max: usize,
    quad_step: f64,
    tol: &Tolerances,
) -> Result<TransitionKernel> {
    let series = feller_series(rates, s, t, n_max, quad_step)?;
    let tail = series.tail();
    if tail > tol.truncation_tail {
        return Err(Error::TruncationNotConverged { tail });
    }
    Ok(series.partial_kernel(n_max))
}

/// Classical fourth-order Runge–Kutta on `∂_t p = T(t) p`, `p(s, s) = I`.
pub fn forward_ode_kernel(rates: &dyn RateFunction, s: f64, t: f64, ode_step: f64) -> Result<TransitionKernel> {
    if !(t >= s) || !(ode_step > 0.0) {
        return Err(Error::InvalidArgument(format!("need s <= t and ode_step > 0, got s={s}, t={t}")));
    }
    let d = rates.dim();
    let mut p = DMatrix::<f64>::identity(d, d);
    if t == s {
        return Ok(TransitionKernel { s, t, matrix: p, n_max: None });
    }
    let n = ((t - s) / ode_step).ceil().max(1.0) as usize;
    let h = (t - s) / n as f64;
    for k in 0..n {
        let u = s + k as f64 * h;
        let g0 = rates.generator_at(u)?;
        let gm = rates.generator_at(u + 0.5 * h)?;
        let g1 = rates.generator_at(if k + 1 == n { t } else { u + h })?;
        let k1 = &g0 * &p;
        let k2 = &gm * (&p + &k1 * (0.5 * h));
        let k3 = &gm * (&p + &k2 * (0.5 * h));
        let k4 = &g1 * (&p + &k3 * h);
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(TransitionKernel::clamped(s, t, p, None))
}

/// Max-entry norm of `p(t, s) − p(t, s+h) p(s+h, s)`.
pub fn chapman_kolmogorov_residual(
    kernel: impl Fn(f64, f64) -> Result<TransitionKernel>,
    s: f64,
    h: f64,
    t: f64,
) -> Result<f64> {
    if !(s <= s + h && s + h <= t) {
        return Err(Error::InvalidArgument(format!("need s <= s+h <= t, got s={s}, h={h}, t={t}")));
    }
    let whole = kernel(s, t)?;
    let late = kernel(s + h, t)?;
    let early = kernel(s, s + h)?;
    Ok((whole.matrix - late.matrix * early.matrix).amax())
}

/// Per-column `1 − Σ_j p_ji(t, s)`.
pub fn honesty_deficit(kernel: &TransitionKernel) -> Vec<f64> {
    (0..kernel.dim()).map(|i| 1.0 - kernel.matrix.column(i).sum()).collect()
}

/// Central-difference residual of the forward equation at `t`:
/// `max |∂_t p(t,s) − T(t) p(t,s)|`.
pub fn forward_residual(
    kernel: impl Fn(f64, f64) -> Result<TransitionKernel>,
    rates: &dyn RateFunction,
    s: f64,
    t: f64,
    dt: f64,
) -> Result<f64> {
    let plus = kernel(s, t + dt)?.matrix;
    let minus = kernel(s, t - dt)?.matrix;
    let mid = kernel(s, t)?.matrix;
    let deriv = (plus - minus) / (2.0 * dt);
    Ok((deriv - rates.generator_at(t)? * mid).amax())
}

/// Central-difference residual of the backward equation at `s`:
/// `max |∂_s p(t,s) + p(t,s) T(s)|`.
pub fn backward_residual(
    kernel: impl Fn(f64, f64) -> Result<TransitionKernel>,
    rates: &dyn RateFunction,
    s: f64,
    t: f64,
    ds: f64,
) -> Result<f64> {
    let plus = kernel(s + ds, t)?.matrix;
    let minus = kernel(s - ds, t)?.matrix;
    let mid = kernel(s, t)?.matrix;
    let deriv = (plus - minus) / (2.0 * ds);
    Ok((deriv + mid * rates.generator_at(s)?).amax())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn expm(g: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
        (g * tau).exp()
    }

    #[test]
    fn zero_rates_give_identity() {
        let r = ConstantRates::new(&RateMatrix::zeros(3)).unwrap();
        let k = feller_minimal(&r, 0.2, 1.3, 25, 1e-2, &tol()).unwrap();
        assert_eq!(k.matrix, DMatrix::identity(3, 3));
        let k = forward_ode_kernel(&r, 0.2, 1.3, 1e-2).unwrap();
        assert_eq!(k.matrix, DMatrix::identity(3, 3));
    }

    #[test]
    fn zeroth_term_is_survival() {
        let lam = 1.7;
        let r = ConstantRates::from_offdiagonal(&[vec![0.0, 0.3], vec![lam, 0.0]]).unwrap();
        let series = feller_series(&r, 0.0, 0.8, 0, 1e-3).unwrap();
        assert!((series.terms[0][(0, 0)] - (-lam * 0.8f64).exp()).abs() < 1e-12);
        assert_eq!(series.terms[0][(1, 0)], 0.0);
    }

    #[test]
    fn two_state_constant_matches_exponential() {
        let r = ConstantRates::from_offdiagonal(&[vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let k = feller_minimal(&r, 0.0, 1.0, 20, 1e-3, &tol()).unwrap();
        let e = expm(r.generator(), 1.0);
        assert!((&k.matrix - &e).amax() < 1e-6, "{}", (&k.matrix - &e).amax());
        let ode = forward_ode_kernel(&r, 0.0, 1.0, 1e-3).unwrap();
        assert!((&ode.matrix - &e).amax() < 1e-9);
        assert!(honesty_deficit(&k).iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn partial_sums_grow_and_deficit_shrinks() {
        let r = ConstantRates::from_offdiagonal(&[vec![0.0, 6.0, 2.0], vec![5.0, 0.0, 4.0], vec![3.0, 1.0, 0.0]]).unwrap();
        let series = feller_series(&r, 0.0, 1.0, 12, 1e-3).unwrap();
        let mut prev_max_deficit = f64::INFINITY;
        let mut prev = series.partial_kernel(0).matrix;
        for n in 1..=12 {
            let k = series.partial_kernel(n);
            assert!(k.matrix.iter().zip(prev.iter()).all(|(a, b)| a >= b));
            let def = honesty_deficit(&k).into_iter().fold(0.0, f64::max);
            assert!(def > 0.0 && def < prev_max_deficit);
            prev_max_deficit = def;
            prev = k.matrix;
        }
        assert!(matches!(feller_minimal(&r, 0.0, 1.0, 5, 1e-3, &tol()), Err(Error::TruncationNotConverged { .. })));
    }

    #[test]
    fn time_dependent_rates_agree_with_ode() {
        let r = FnRates::new(2, |u: f64| {
            RateMatrix::from_fn(2, |j, _| if j == 1 { 1.0 + u.sin() } else { 0.5 * u * u }).unwrap()
        });
        let f = feller_minimal(&r, 0.1, 1.2, 25, 1e-3, &tol()).unwrap();
        let o = forward_ode_kernel(&r, 0.1, 1.2, 1e-3).unwrap();
        assert!((&f.matrix - &o.matrix).amax() < 1e-6);
        for c in 0..2 {
            assert!((o.matrix.column(c).sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn chapman_kolmogorov_and_kolmogorov_residuals() {
        let r = FnRates::new(2, |u: f64| {
            RateMatrix::from_fn(2, |j, _| if j == 1 { 1.0 + 0.5 * u } else { 0.3 + u * u }).unwrap()
        });
        let k = |a: f64, b: f64| forward_ode_kernel(&r, a, b, 1e-3);
        assert!(chapman_kolmogorov_residual(k, 0.2, 0.0, 0.9).unwrap() < 1e-14);
        assert!(chapman_kolmogorov_residual(k, 0.2, 0.3, 0.9).unwrap() < 1e-8);
        let kf = |a: f64, b: f64| feller_minimal(&r, a, b, 25, 1e-3, &tol());
        assert!(chapman_kolmogorov_residual(kf, 0.2, 0.3, 0.9).unwrap() < 1e-6);
        assert!(forward_residual(k, &r, 0.2, 0.7, 1e-3).unwrap() < 1e-4);
        assert!(backward_residual(k, &r, 0.3, 0.9, 1e-3).unwrap() < 1e-4);
    }

    #[test]
    fn gridded_rates_interpolate_and_detect_poles() {
        let times = [0.0, 1.0, 2.0];
        let mk = |v: f64| RateMatrix::from_fn(2, |_, _| v).unwrap();
        let g = GriddedRates::new(&times, &[mk(1.0), mk(3.0), mk(5.0)]).unwrap();
        assert!((g.generator_at(0.25).unwrap()[(1, 0)] - 1.5).abs() < 1e-15);
        assert!((g.generator_at(2.0).unwrap()[(1, 0)] - 5.0).abs() < 1e-15);

        let c = crate::currents::CurrentMatrix::from_upper(2, |_, _| -1.0);
        let pole = crate::kinetics::bell_rates(&c, &[0.0, 1.0], &tol());
        let g = GriddedRates::new(&times, &[mk(1.0), mk(1.0), pole]).unwrap();
        assert!(g.pole_free(0.0, 0.9));
        assert!(!g.pole_free(0.0, 1.5));
        assert!(matches!(feller_minimal(&g, 0.0, 1.5, 5, 1e-2, &tol()), Err(Error::PoleInInterval { .. })));
        assert!(matches!(forward_ode_kernel(&g, 0.0, 1.5, 1e-2), Err(Error::PoleInInterval { .. })));
    }

    #[test]
    fn kernel_export_has_deficit() {
        let k = TransitionKernel::identity(2, 0.5);
        let e = k.export();
        assert_eq!(e.deficit, vec![0.0, 0.0]);
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"s":0.5,"t":0.5,"matrix":[[1.0,0.0],[0.0,1.0]],"n_max":null,"deficit":[0.0,0.0]}"#
        );
    }
}
