use std::collections::BTreeMap;

use crate::config::Tolerances;
use crate::currents::ExtraTerm;
use crate::hilbert::{embed_factor, ops, tensor_product_all, ComplexSquareMatrix, FactorSpace, KetVector, C64};
use crate::kinetics::RateChoice;
use crate::sampler::PolePolicy;

use super::{
    BuilderSpec, CurrentKind, EnsembleConfig, HamiltonianSpec, ScheduleSegment, Scenario, Thresholds, TimeSpec,
};

const PATHS: usize = 100_000;
const MASTER_SEED: u64 = 20_241_014;

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> Result<f64, String> {
    let v = params.get(key).copied().unwrap_or(default);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("parameter '{key}' must be finite"))
    }
}

fn expect_dims(name: &str, dims: &[usize], ok: bool, shape: &str) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(format!("'{name}' needs factor_dims {shape}, got {dims:?}"))
    }
}

fn check_params(b: &BuilderSpec, allowed: &[&str]) -> Result<(), String> {
    match b.params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(format!("'{}' has no parameter '{k}' (allowed: {})", b.name, allowed.join(", "))),
        None => Ok(()),
    }
}

/// Dense Hamiltonian from a named builder.
///
/// * `easyexample` (`theta`): `⟨11|H|00⟩ = iθ` on `2 ⊗ 2`, so `|00⟩` evolves
///   into `cos θt |00⟩ + sin θt |11⟩`.
/// * `albert_free` (`omega`): `−ω σx ⊗ I` on `2 ⊗ 2`.
/// * `zero`: any dimensions.
/// * `ideal_measurement` (`lambda`): `λ |1⟩⟨1| ⊗ I ⊗ σy` on `2 ⊗ n ⊗ 2`.
/// * `two_spin` (`jx`, `jy`, `h1`, `h2`, `hx`): `jx σxσx + jy σyσy + h1 σz⊗I
///   + h2 I⊗σz + hx σx⊗I`.
pub(crate) fn build_hamiltonian(b: &BuilderSpec, dims: &[usize]) -> Result<ComplexSquareMatrix, String> {
    let total: usize = dims.iter().product();
    let p = &b.params;
    match b.name.as_str() {
        "easyexample" => {
            check_params(b, &["theta"])?;
            expect_dims(&b.name, dims, dims == [2, 2], "[2, 2]")?;
            let theta = param(p, "theta", 1.0)?;
            let mut h = ComplexSquareMatrix::zeros(4);
            h.set(3, 0, C64::new(0.0, theta));
            h.set(0, 3, C64::new(0.0, -theta));
            Ok(h)
        }
        "albert_free" => {
            check_params(b, &["omega"])?;
            expect_dims(&b.name, dims, dims == [2, 2], "[2, 2]")?;
            let omega = param(p, "omega", 1.0)?;
            Ok(tensor_product_all(&[&ops::sigma_x(), &ComplexSquareMatrix::identity(2)]).scale_real(-omega))
        }
        "zero" => {
            check_params(b, &[])?;
            Ok(ComplexSquareMatrix::zeros(total))
        }
        "ideal_measurement" => {
            check_params(b, &["lambda"])?;
            expect_dims(&b.name, dims, dims.len() == 3 && dims[0] == 2 && dims[2] == 2, "[2, n, 2]")?;
            let lambda = param(p, "lambda", 1.0)?;
            let env = ComplexSquareMatrix::identity(dims[1]);
            Ok(tensor_product_all(&[&ops::basis_projector(2, 1), &env, &ops::sigma_y()]).scale_real(lambda))
        }
        "two_spin" => {
            check_params(b, &["jx", "jy", "h1", "h2", "hx"])?;
            expect_dims(&b.name, dims, dims == [2, 2], "[2, 2]")?;
            let space = FactorSpace::new(dims.to_vec()).map_err(|e| e.to_string())?;
            let (sx, sy, sz) = (ops::sigma_x(), ops::sigma_y(), ops::sigma_z());
            let terms = [
                (param(p, "jx", 1.0)?, tensor_product_all(&[&sx, &sx])),
                (param(p, "jy", 0.3)?, tensor_product_all(&[&sy, &sy])),
                (param(p, "h1", 0.4)?, embed_factor(&sz, &space, 0)),
                (param(p, "h2", -0.3)?, embed_factor(&sz, &space, 1)),
                (param(p, "hx", 0.2)?, embed_factor(&sx, &space, 0)),
            ];
            Ok(terms.iter().fold(ComplexSquareMatrix::zeros(4), |acc, (c, m)| &acc + &m.scale_real(*c)))
        }
        other => Err(format!(
            "unknown builder '{other}' (expected easyexample, albert_free, zero, ideal_measurement or two_spin)"
        )),
    }
}

fn builder(name: &str, params: &[(&str, f64)]) -> HamiltonianSpec {
    HamiltonianSpec::Builder(BuilderSpec {
        name: name.to_string(),
        params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    })
}

fn amplitudes(psi: &KetVector) -> Vec<[f64; 2]> {
    psi.amplitudes().iter().map(|a| [a.re, a.im]).collect()
}

fn real_state(dim: usize, entries: &[(usize, f64)]) -> Vec<[f64; 2]> {
    let mut v = vec![[0.0, 0.0]; dim];
    for &(k, a) in entries {
        v[k] = [a, 0.0];
    }
    v
}

fn base(name: &str, dims: Vec<usize>, h: HamiltonianSpec, psi: Vec<[f64; 2]>, t1: f64, queries: Vec<f64>) -> Scenario {
    Scenario {
        name: name.to_string(),
        factor_dims: dims,
        hamiltonian: h,
        initial_state: psi,
        time: TimeSpec { t0: 0.0, t1, grid_step: 1e-3 },
        current: CurrentKind::GeneralizedSchrodinger,
        extra_term: ExtraTerm::Paired,
        rate_choice: RateChoice::Bell,
        ensemble: EnsembleConfig { paths: PATHS, master_seed: MASTER_SEED, query_times: queries },
        pole_policy: PolePolicy::Resample,
        thresholds: Thresholds::default(),
        tolerances: Tolerances::default(),
    }
}

/// Two spins driven so that the first factor's weights are
/// `(cos² θt, sin² θt)`, starting from `|00⟩`.
pub fn easyexample(theta: f64) -> Scenario {
    base(
        "easyexample",
        vec![2, 2],
        builder("easyexample", &[("theta", theta)]),
        real_state(4, &[(0, 1.0)]),
        1.0,
        vec![0.1, 0.3, 0.5, 0.7, 0.9],
    )
}

fn albert_free() -> Scenario {
    base(
        "albert-free",
        vec![2, 2],
        builder("albert_free", &[("omega", 1.0)]),
        real_state(4, &[(0, 0.7f64.sqrt()), (3, 0.3f64.sqrt())]),
        1.0,
        vec![0.1, 0.3, 0.5, 0.7, 0.9],
    )
}

fn singlet() -> Scenario {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    base(
        "singlet",
        vec![2, 2],
        builder("zero", &[]),
        real_state(4, &[(1, a), (2, -a)]),
        1.0,
        vec![0.1, 0.3, 0.5, 0.7, 0.9],
    )
}

/// System, environment and apparatus. The system label is already
/// possessed (correlated with the environment); the apparatus records it
/// during `[0, π/2λ]` and is then left alone.
fn measured_possessed_property() -> Scenario {
    let lambda = 1.0;
    let switch = std::f64::consts::FRAC_PI_2 / lambda;
    let schedule = HamiltonianSpec::Schedule(vec![
        ScheduleSegment { until: switch, hamiltonian: builder("ideal_measurement", &[("lambda", lambda)]) },
        ScheduleSegment { until: 2.0, hamiltonian: builder("zero", &[]) },
    ]);
    // (√0.6 |00⟩ + √0.4 |11⟩) ⊗ |0⟩ in system ⊗ environment ⊗ apparatus.
    let psi = real_state(8, &[(0, 0.6f64.sqrt()), (6, 0.4f64.sqrt())]);
    base("measured-possessed-property", vec![2, 2, 2], schedule, psi, 2.0, vec![0.3, 0.8, 1.3, 1.7, 1.9])
}

/// Product state under an entangling interaction. The smaller Schmidt
/// weight rises to about 0.22 and falls back to about 0.05 by `t = 2`,
/// without crossing 1/2 or returning to zero.
fn interacting_two_spin() -> Scenario {
    let spin = |a: f64, phase: f64| {
        KetVector::new(vec![C64::new(a.cos(), 0.0), C64::from_polar(a.sin(), phase)]).expect("non-empty")
    };
    let psi = spin(0.3, 0.4).tensor(&spin(0.9, 0.0));
    let h = builder("two_spin", &[("jx", 1.0), ("jy", 0.3), ("h1", 0.4), ("h2", -0.3), ("hx", 0.2)]);
    base("interacting-two-spin", vec![2, 2], h, amplitudes(&psi), 2.0, vec![0.2, 0.6, 1.0, 1.4, 1.8])
}

pub fn builtin_names() -> Vec<&'static str> {
    vec!["easyexample", "albert-free", "singlet", "measured-possessed-property", "interacting-two-spin"]
}

pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "easyexample" => Some(easyexample(1.0)),
        "albert-free" => Some(albert_free()),
        "singlet" => Some(singlet()),
        "measured-possessed-property" => Some(measured_possessed_property()),
        "interacting-two-spin" => Some(interacting_two_spin()),
        _ => None,
    }
}

pub fn builtin_scenarios() -> Vec<Scenario> {
    builtin_names().into_iter().filter_map(builtin).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::Propagator;

    fn spec(name: &str, params: &[(&str, f64)]) -> BuilderSpec {
        BuilderSpec { name: name.into(), params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }

    #[test]
    fn easyexample_generates_cos_squared() {
        let theta = 0.7;
        let h = build_hamiltonian(&spec("easyexample", &[("theta", theta)]), &[2, 2]).unwrap();
        let psi0 = KetVector::basis(4, 0);
        let prop = Propagator::new(&h, &Tolerances::default()).unwrap();
        for &t in &[0.2, 0.9, 1.7] {
            let psi = prop.evolve(&psi0, t).unwrap();
            assert!((psi.amplitude(0) - C64::new((theta * t).cos(), 0.0)).norm() < 1e-12);
            assert!((psi.amplitude(3) - C64::new((theta * t).sin(), 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn measurement_copies_the_system_label() {
        let h = build_hamiltonian(&spec("ideal_measurement", &[("lambda", 1.0)]), &[2, 2, 2]).unwrap();
        let s = measured_possessed_property();
        let psi0 = s.initial_ket().unwrap();
        let psi = Propagator::new(&h, &Tolerances::default())
            .unwrap()
            .evolve(&psi0, std::f64::consts::FRAC_PI_2)
            .unwrap();
        // √0.6 |000⟩ + √0.4 |111⟩ up to phase
        assert!((psi.amplitude(0).norm_sqr() - 0.6).abs() < 1e-12);
        assert!((psi.amplitude(7).norm_sqr() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn builders_reject_bad_input() {
        assert!(build_hamiltonian(&spec("easyexample", &[]), &[2, 3]).is_err());
        assert!(build_hamiltonian(&spec("easyexample", &[("omega", 1.0)]), &[2, 2]).is_err());
        assert!(build_hamiltonian(&spec("nope", &[]), &[2]).is_err());
        assert!(build_hamiltonian(&spec("albert_free", &[("omega", f64::NAN)]), &[2, 2]).is_err());
    }

    #[test]
    fn all_builders_hermitian() {
        for (name, dims) in [
            ("easyexample", vec![2, 2]),
            ("albert_free", vec![2, 2]),
            ("zero", vec![3]),
            ("ideal_measurement", vec![2, 3, 2]),
            ("two_spin", vec![2, 2]),
        ] {
            let h = build_hamiltonian(&spec(name, &[]), &dims).unwrap();
            assert!(h.hermitian_deviation() < 1e-15, "{name}");
            assert_eq!(h.dim(), dims.iter().product::<usize>());
        }
    }

    #[test]
    fn names_resolve() {
        for n in builtin_names() {
            assert_eq!(builtin(n).unwrap().name, n);
        }
        assert!(builtin("unknown").is_none());
    }
}
