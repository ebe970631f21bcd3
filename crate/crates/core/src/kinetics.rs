//! Transition rates `t_ji` from currents and single-time probabilities.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::Tolerances;
use crate::currents::CurrentMatrix;
use crate::error::{Error, Result};

/// One off-diagonal rate entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rate {
    Finite(f64),
    /// Nonzero current out of a state with zero probability; carries the
    /// offending `j_ji`.
    Pole { current: f64 },
}

impl Rate {
    pub fn finite(self) -> Option<f64> {
        match self {
            Rate::Finite(v) => Some(v),
            Rate::Pole { .. } => None,
        }
    }

    pub fn is_pole(self) -> bool {
        matches!(self, Rate::Pole { .. })
    }
}

/// Rate matrix with `t_ji` (jump from `i` to `j`) in row `j`, column `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateMatrix {
    dim: usize,
    entries: Vec<Rate>,
}

impl RateMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: vec![Rate::Finite(0.0); dim * dim] }
    }

    /// From finite off-diagonal entries `f(j, i)`; the diagonal is derived.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut m = Self::zeros(dim);
        for j in 0..dim {
            for i in 0..dim {
                if i != j {
                    let v = f(j, i);
                    if !(v >= 0.0) || !v.is_finite() {
                        return Err(Error::NegativeRate { state: i, time: f64::NAN, rate: v });
                    }
                    m.entries[j * dim + i] = Rate::Finite(v);
                }
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Off-diagonal entry `t_ji`; the diagonal is reported through
    /// [`RateMatrix::exit_rate`].
    pub fn get(&self, j: usize, i: usize) -> Rate {
        if i == j {
            return match self.exit_rate(i) {
                Some(e) => Rate::Finite(-e),
                None => Rate::Pole { current: 0.0 },
            };
        }
        self.entries[j * self.dim + i]
    }

    fn set(&mut self, j: usize, i: usize, r: Rate) {
        self.entries[j * self.dim + i] = r;
    }

    /// `t_i = −t_ii = Σ_{j≠i} t_ji`, or `None` if column `i` has a pole.
    pub fn exit_rate(&self, i: usize) -> Option<f64> {
        let mut sum = 0.0;
        for j in 0..self.dim {
            if j != i {
                sum += self.entries[j * self.dim + i].finite()?;
            }
        }
        Some(sum)
    }

    pub fn has_pole(&self) -> bool {
        self.entries.iter().any(|r| r.is_pole())
    }

    pub fn pole_states(&self) -> Vec<usize> {
        (0..self.dim).filter(|&i| self.exit_rate(i).is_none()).collect()
    }

    /// Largest finite off-diagonal entry.
    pub fn max_finite(&self) -> f64 {
        self.entries.iter().filter_map(|r| r.finite()).fold(0.0, f64::max)
    }

    /// Dense generator with `t_ii` on the diagonal; `None` if any pole.
    pub fn generator(&self) -> Option<Vec<Vec<f64>>> {
        (0..self.dim)
            .map(|j| (0..self.dim).map(|i| self.get(j, i).finite()).collect::<Option<Vec<f64>>>())
            .collect()
    }
}

/// Constant nonnegative free parameters `c_ji` for the general family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FreeChoice {
    Uniform(f64),
    Matrix(Vec<Vec<f64>>),
}

impl FreeChoice {
    pub fn get(&self, j: usize, i: usize) -> f64 {
        match self {
            FreeChoice::Uniform(c) => *c,
            FreeChoice::Matrix(m) => m[j][i],
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = match self {
            FreeChoice::Uniform(c) => *c >= 0.0 && c.is_finite(),
            FreeChoice::Matrix(m) => {
                m.len() == dim
                    && m.iter().all(|r| r.len() == dim && r.iter().all(|c| *c >= 0.0 && c.is_finite()))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("free choice c must be a nonnegative scalar or {dim}x{dim} matrix")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateChoice {
    #[default]
    Bell,
    BellNote9,
    General { c: FreeChoice },
}

/// `max{0, j_ji/p_i}` with the zero-probability conventions: at `p_i = 0`
/// vanishing or inward current gives 0, outward current a pole.
fn bell_entry(j_ji: f64, p_i: f64, tol: &Tolerances) -> Rate {
    if p_i > tol.zero_probability {
        Rate::Finite((j_ji / p_i).max(0.0))
    } else if j_ji <= tol.zero_current {
        Rate::Finite(0.0)
    } else {
        Rate::Pole { current: j_ji }
    }
}

/// Bell's choice `t_ji = max{0, j_ji/p_i}`.
pub fn bell_rates(current: &CurrentMatrix, p: &[f64], tol: &Tolerances) -> RateMatrix {
    let d = current.dim();
    let mut m = RateMatrix::zeros(d);
    for j in 0..d {
        for i in 0..d {
            if i != j {
                m.set(j, i, bell_entry(current.get(j, i), p[i], tol));
            }
        }
    }
    m
}

/// The variant `t_ji = j_ji/p_i` for `j_ji > 0` and `0` otherwise, which is
/// discontinuous where both current and probability vanish.
pub fn bell_note9_rates(current: &CurrentMatrix, p: &[f64], tol: &Tolerances) -> RateMatrix {
    let d = current.dim();
    let mut m = RateMatrix::zeros(d);
    for j in 0..d {
        for i in 0..d {
            if i == j {
                continue;
            }
            let jj = current.get(j, i);
            let r = if jj <= tol.zero_current {
                Rate::Finite(0.0)
            } else if p[i] > tol.zero_probability {
                Rate::Finite(jj / p[i])
            } else {
                Rate::Pole { current: jj }
            };
            m.set(j, i, r);
        }
    }
    m
}

/// General solution: for `j < i`, `t_ji = max{0, j_ji/p_i} + c_ji` and
/// `t_ij = (t_ji p_i − j_ji)/p_j`.
pub fn general_rates(current: &CurrentMatrix, p: &[f64], c: &FreeChoice, tol: &Tolerances) -> Result<RateMatrix> {
    let d = current.dim();
    c.validate(d)?;
    let mut m = RateMatrix::zeros(d);
    for j in 0..d {
        for i in (j + 1)..d {
            let jj = current.get(j, i);
            let t_ji = match bell_entry(jj, p[i], tol) {
                Rate::Finite(v) => v + c.get(j, i),
                Rate::Pole { .. } => return Err(Error::PolePresent { state: i }),
            };
            if p[j] <= tol.zero_probability {
                // The forced value is 0/0 unless the numerator vanishes too.
                let num = t_ji * p[i] - jj;
                if num.abs() > tol.zero_current {
                    return Err(Error::ZeroProbabilityDivision { state: j, probability: p[j] });
                }
                m.set(j, i, Rate::Finite(t_ji));
                m.set(i, j, Rate::Finite(0.0));
                continue;
            }
            let t_ij = ((t_ji * p[i] - jj) / p[j]).max(0.0);
            m.set(j, i, Rate::Finite(t_ji));
            m.set(i, j, Rate::Finite(t_ij));
        }
    }
    Ok(m)
}

pub fn compute_rates(choice: &RateChoice, current: &CurrentMatrix, p: &[f64], tol: &Tolerances) -> Result<RateMatrix> {
    match choice {
        RateChoice::Bell => Ok(bell_rates(current, p, tol)),
        RateChoice::BellNote9 => Ok(bell_note9_rates(current, p, tol)),
        RateChoice::General { c } => general_rates(current, p, c, tol),
    }
}

/// Exit rates and conditional jump distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpDecomposition {
    pub exit_rates: Vec<f64>,
    /// `jump[i][j] = Π_ji`; `None` where `t_i = 0`.
    pub jump: Vec<Option<Vec<f64>>>,
}

pub fn jump_decomposition(rates: &RateMatrix) -> Result<JumpDecomposition> {
    let d = rates.dim();
    let mut exit_rates = Vec::with_capacity(d);
    let mut jump = Vec::with_capacity(d);
    for i in 0..d {
        let t_i = rates.exit_rate(i).ok_or(Error::PolePresent { state: i })?;
        exit_rates.push(t_i);
        if t_i > 0.0 {
            let col = (0..d).map(|j| if j == i { 0.0 } else { rates.get(j, i).finite().unwrap_or(0.0) / t_i }).collect();
            jump.push(Some(col));
        } else {
            jump.push(None);
        }
    }
    Ok(JumpDecomposition { exit_rates, jump })
}

/// `max_j |ṗ_j − Σ_i [t_ji p_i − t_ij p_j]|`. Vanishing flows out of empty
/// states count as `∞ · 0 = 0`; a pole entry carries the current it was
/// built from, the limit of `t_ji p_i` as `p_i → 0`.
pub fn master_residual(rates: &RateMatrix, p: &[f64], pdot: &[f64]) -> f64 {
    let d = rates.dim();
    let flow = |j: usize, i: usize| match rates.get(j, i) {
        Rate::Finite(t) => t * p[i],
        Rate::Pole { current } => current,
    };
    (0..d)
        .map(|j| {
            let net: f64 = (0..d).filter(|&i| i != j).map(|i| flow(j, i) - flow(i, j)).sum();
            (pdot[j] - net).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SingularityKind {
    IsolatedZero,
    IntervalZero,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Singularity {
    /// Estimated zero location (start of the run for interval zeros).
    pub time: f64,
    /// End of the zero run; equals `time` for isolated zeros.
    pub until: f64,
    pub state: usize,
    pub kind: SingularityKind,
    /// The exit-rate integral diverges on approach to the zero.
    pub divergent_hazard: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SingularityReport {
    pub singularities: Vec<Singularity>,
}

impl SingularityReport {
    pub fn is_empty(&self) -> bool {
        self.singularities.is_empty()
    }

    pub fn isolated(&self) -> impl Iterator<Item = &Singularity> {
        self.singularities.iter().filter(|s| s.kind == SingularityKind::IsolatedZero)
    }
}

/// Parabola minimum through three equally weighted points.
fn parabola_min(t: [f64; 3], y: [f64; 3]) -> Option<(f64, f64)> {
    let d1 = (y[1] - y[0]) / (t[1] - t[0]);
    let d2 = (y[2] - y[1]) / (t[2] - t[1]);
    let a = (d2 - d1) / (t[2] - t[0]);
    if a <= 0.0 {
        return None;
    }
    let b = d1 - a * (t[0] + t[1]);
    let tm = -b / (2.0 * a);
    let c = y[0] - a * t[0] * t[0] - b * t[0];
    Some((tm, c - b * b / (4.0 * a)))
}

/// Locates zeros of each `p_i` on the grid. `p[k][i]` and `rates[k]` are
/// per node. Isolated zeros are local minima whose interpolating parabola
/// reaches `isolated_threshold`; interval zeros are runs of at least two
/// nodes at or below `tol.zero_probability`.
pub fn classify_singularities(
    times: &[f64],
    p: &[Vec<f64>],
    rates: &[RateMatrix],
    isolated_threshold: f64,
    tol: &Tolerances,
) -> SingularityReport {
    let n = times.len();
    let mut out = Vec::new();
    if n == 0 {
        return SingularityReport::default();
    }
    let d = p[0].len();
    for i in 0..d {
        let zero = |k: usize| p[k][i] <= tol.zero_probability;
        let mut k = 0;
        while k < n {
            if zero(k) {
                let start = k;
                while k + 1 < n && zero(k + 1) {
                    k += 1;
                }
                if k > start {
                    out.push(Singularity {
                        time: times[start],
                        until: times[k],
                        state: i,
                        kind: SingularityKind::IntervalZero,
                        divergent_hazard: false,
                    });
                    k += 1;
                    continue;
                }
            }
            if k > 0 && k + 1 < n && p[k][i] <= p[k - 1][i] && p[k][i] < p[k + 1][i] && !zero(k - 1) && !zero(k + 1)
            {
                let t3 = [times[k - 1], times[k], times[k + 1]];
                let y3 = [p[k - 1][i], p[k][i], p[k + 1][i]];
                if let Some((tm, ym)) = parabola_min(t3, y3) {
                    if ym <= isolated_threshold {
                        let divergent = divergent_on_approach(times, rates, i, k, tm);
                        out.push(Singularity {
                            time: tm,
                            until: tm,
                            state: i,
                            kind: SingularityKind::IsolatedZero,
                            divergent_hazard: divergent,
                        });
                    }
                }
            }
            k += 1;
        }
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.state.cmp(&b.state)));
    SingularityReport { singularities: out }
}

/// Divergence test for `∫ t_i du` towards `t*`: the rate behaves like
/// `c/(t* − t)` with `c` of order one when the zero is approached through
/// outflow. Checks the two nodes before the zero.
fn divergent_on_approach(times: &[f64], rates: &[RateMatrix], state: usize, k: usize, t_star: f64) -> bool {
    let before: Vec<usize> = (k.saturating_sub(2)..=k).filter(|&m| times[m] < t_star).collect();
    if before.is_empty() {
        return false;
    }
    before.iter().all(|&m| match rates[m].exit_rate(state) {
        None => true,
        Some(r) => r * (t_star - times[m]) > 0.5,
    })
}

/// Writes `time,i,j,rate,pole_flag` rows for every ordered pair `i ≠ j`,
/// where `rate` is `t_ji`.
pub fn write_rates_csv<W: Write>(out: W, times: &[f64], rates: &[RateMatrix]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "i", "j", "rate", "pole_flag"])?;
    for (t, m) in times.iter().zip(rates) {
        for i in 0..m.dim() {
            for j in 0..m.dim() {
                if i == j {
                    continue;
                }
                match m.get(j, i) {
                    Rate::Finite(v) => w.serialize((t, i, j, v, 0u8))?,
                    Rate::Pole { .. } => w.serialize((t, i, j, f64::INFINITY, 1u8))?,
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
