use std::fs;

use modal_dynamics::hilbert::FactorSpace;
use modal_dynamics::sampler::SamplePath;
use modal_dynamics::scenario::{
    builtin, builtin_scenarios, load_scenario, parse_scenario, run, write_exports, CurrentKind, ExportLevel,
    RunOptions, RunOutput, ScenarioError,
};

fn run_builtin(name: &str, current: CurrentKind, paths: usize) -> RunOutput {
    let mut s = builtin(name).unwrap();
    s.current = current;
    s.ensemble.paths = paths;
    run(&s, &RunOptions::default()).unwrap()
}

fn labels(space: &FactorSpace, path: &SamplePath, t: f64) -> Vec<usize> {
    space.split_index(path.state_at(t))
}

#[test]
fn builtin_list_is_complete_and_valid() {
    let all = builtin_scenarios();
    assert!(all.len() >= 5);
    for s in &all {
        s.validate().unwrap();
        assert_eq!(load_scenario(&s.name).unwrap(), *s);
        assert_eq!(parse_scenario(&s.to_canonical_json()).unwrap(), *s);
    }
}

#[test]
fn singlet_is_static_with_even_split() {
    let out = run_builtin("singlet", CurrentKind::GeneralizedSchrodinger, 100_000);
    let r = &out.report;
    assert_eq!(r.max_rate, 0.0);
    assert!(out.artifacts.currents.iter().all(|c| c.max_abs() < 1e-12));
    assert!(out.artifacts.paths.iter().all(|p| p.jumps() == 0));
    let e = r.ensemble.as_ref().unwrap();
    assert!(e.deterministic);

    // Joint probabilities (0, 1/2, 1/2, 0) over (↑↑, ↑↓, ↓↑, ↓↓), in the
    // tracked labels: the two occupied states have equal weight.
    let stats = out.artifacts.stats.as_ref().unwrap();
    let n = stats.paths as f64;
    for (q, dist) in stats.distributions.iter().enumerate() {
        let quantum = &out.artifacts.quantum[q];
        let mut sorted = quantum.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted[0].abs() < 1e-12 && sorted[1].abs() < 1e-12);
        assert!((sorted[2] - 0.5).abs() < 1e-12 && (sorted[3] - 0.5).abs() < 1e-12);
        for (f, p) in dist.iter().zip(quantum) {
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((f - p).abs() <= 3.0 * sigma, "{f} vs {p}");
        }
    }
}

#[test]
fn albert_free_generalized_is_deterministic() {
    let out = run_builtin("albert-free", CurrentKind::GeneralizedSchrodinger, 10_000);
    let e = out.report.ensemble.as_ref().unwrap();
    assert!(e.deterministic);
    assert_eq!(e.mean_jumps, 0.0);
    assert!(out.report.max_rate <= 1e-8);
    assert!(out.report.passed);
}

#[test]
fn static_current_on_free_system_is_not_deterministic() {
    // The frozen basis makes the free rotation look like transitions.
    let out = run_builtin("albert-free", CurrentKind::StaticSchrodinger, 2_000);
    assert!(out.report.ensemble.as_ref().unwrap().mean_jumps > 0.1);
}

#[test]
fn measurement_keeps_the_possessed_label_and_correlates_the_pointer() {
    let s = builtin("measured-possessed-property").unwrap();
    let out = run(&s, &RunOptions::default()).unwrap();
    assert!(out.report.passed, "{:?}", out.report.failures);
    let space = &out.artifacts.space;
    let switch = std::f64::consts::FRAC_PI_2;
    let queries = &out.report.ensemble.as_ref().unwrap().query_times;
    let late: Vec<f64> = queries.iter().copied().filter(|&t| t > switch).collect();
    assert!(!late.is_empty());

    for path in &out.artifacts.paths {
        // The system label never changes.
        let system = labels(space, path, 0.0)[0];
        assert!(queries.iter().all(|&t| labels(space, path, t)[0] == system));
        assert!(path.events.iter().all(|&(_, s)| space.split_index(s)[0] == system));
    }
    for &t in &late {
        let (x, y): (Vec<f64>, Vec<f64>) = out
            .artifacts
            .paths
            .iter()
            .map(|p| {
                let l = labels(space, p, t);
                (l[0] as f64, l[2] as f64)
            })
            .unzip();
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let corr = cov / (vx * vy).sqrt();
        assert!((corr.abs() - 1.0).abs() < 1e-12, "correlation {corr} at t = {t}");
    }
}

#[test]
fn interacting_spins_jump() {
    let out = run_builtin("interacting-two-spin", CurrentKind::GeneralizedSchrodinger, 5_000);
    let e = out.report.ensemble.as_ref().unwrap();
    assert!(!e.deterministic);
    assert!(e.mean_jumps > 0.1);
}

#[test]
fn every_builtin_is_sound() {
    for s in builtin_scenarios() {
        for current in [CurrentKind::GeneralizedSchrodinger, CurrentKind::MinimalFlow, CurrentKind::StaticSchrodinger] {
            let mut s = s.clone();
            s.current = current;
            let out = run(&s, &RunOptions::default()).unwrap();
            let r = &out.report;
            assert!(r.passed, "{} {current}: {:?}", s.name, r.failures);
            let e = r.ensemble.as_ref().unwrap();
            // Per-state 3σ band at N = 1e5 with the fixed builtin seed.
            assert!(e.max_z_score <= 3.0, "{} {current}: z = {}", s.name, e.max_z_score);
            assert!(e.zero_sojourn_fraction <= 0.01);
            assert_eq!(e.zero_probability_mass, 0.0);
            for v in [r.continuity_residual, r.master_residual, r.kernels.max_chapman_kolmogorov, r.kernels.max_honesty_deficit.abs()] {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }
}

#[test]
fn exports_are_byte_identical() {
    let mut s = builtin("interacting-two-spin").unwrap();
    s.ensemble.paths = 2_000;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = write_exports(&a, &s, &run(&s, &RunOptions::default()).unwrap(), ExportLevel::Full).unwrap();
    let sequential = RunOptions { exec: modal_dynamics::sampler::ExecMode::Sequential, ..RunOptions::default() };
    let second = write_exports(&b, &s, &run(&s, &sequential).unwrap(), ExportLevel::Full).unwrap();
    assert_eq!(first, second);
    assert!(first.files.contains(&"paths.jsonl".to_string()));
    for name in first.files.iter().chain(std::iter::once(&"manifest.json".to_string())) {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let reloaded = parse_scenario(&fs::read_to_string(a.join("scenario.json")).unwrap()).unwrap();
    assert_eq!(reloaded, s);
}

#[test]
fn report_only_writes_three_files() {
    let mut s = builtin("singlet").unwrap();
    s.ensemble.paths = 100;
    let dir = tempfile::tempdir().unwrap();
    let m = write_exports(dir.path(), &s, &run(&s, &RunOptions::default()).unwrap(), ExportLevel::ReportOnly).unwrap();
    assert_eq!(m.files, ["scenario.json", "report.json"]);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 3);
}

#[test]
fn loading_errors_are_specific() {
    match load_scenario("/definitely/not/here.json") {
        Err(ScenarioError::Io { .. }) => {}
        other => panic!("{other:?}"),
    }
    let mut s = builtin("easyexample").unwrap();
    s.time.grid_step = 0.0;
    let e = parse_scenario(&s.to_canonical_json()).unwrap_err();
    assert!(e.is_validation() && e.to_string().contains("grid_step"), "{e}");
    s = builtin("easyexample").unwrap();
    s.ensemble.paths = 0;
    let e = parse_scenario(&s.to_canonical_json()).unwrap_err();
    assert!(e.is_validation(), "{e}");
}
