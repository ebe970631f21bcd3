use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::currents::write_currents_csv;
use crate::kinetics::write_rates_csv;
use crate::sampler::{write_paths_jsonl, write_stats_csv};

use super::pipeline::factor_marginal;
use super::{RunOutput, Scenario, ScenarioError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExportLevel {
    #[default]
    Full,
    /// Manifest, scenario and report only.
    ReportOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub scenario: String,
    pub scenario_sha256: String,
    pub seed: u64,
    pub paths: usize,
    pub tool_version: String,
    pub passed: bool,
    pub files: Vec<String>,
}

fn err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Export(e.to_string())
}

fn create(dir: &Path, name: &str, files: &mut Vec<String>) -> Result<BufWriter<File>, ScenarioError> {
    files.push(name.to_string());
    let f = File::create(dir.join(name)).map_err(|e| err(format!("{name}: {e}")))?;
    Ok(BufWriter::new(f))
}

fn json<T: Serialize>(dir: &Path, name: &str, value: &T, files: &mut Vec<String>) -> Result<(), ScenarioError> {
    let mut w = create(dir, name, files)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(err)?;
    writeln!(w).map_err(err)?;
    w.flush().map_err(err)
}

#[derive(Serialize)]
struct FrameRecord {
    time: f64,
    weights: Vec<f64>,
    vectors: Vec<Vec<[f64; 2]>>,
}

/// Writes one run directory. Output depends only on the scenario and the
/// run result, so equal inputs give byte-identical files.
pub fn write_exports(
    dir: &Path,
    scenario: &Scenario,
    output: &RunOutput,
    level: ExportLevel,
) -> Result<Manifest, ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| err(format!("{}: {e}", dir.display())))?;
    let canonical = scenario.to_canonical_json();
    let mut files = Vec::new();
    {
        let mut w = create(dir, "scenario.json", &mut files)?;
        writeln!(w, "{canonical}").map_err(err)?;
        w.flush().map_err(err)?;
    }
    json(dir, "report.json", &output.report, &mut files)?;

    if level == ExportLevel::Full {
        let a = &output.artifacts;
        for (nu, traj) in a.factors.iter().enumerate() {
            let mut w = csv::Writer::from_writer(create(dir, &format!("trajectory_f{nu}.csv"), &mut files)?);
            w.write_record(["time", "label", "weight"]).map_err(err)?;
            for k in 0..traj.len() {
                for l in 0..traj.num_labels() {
                    w.serialize((traj.times()[k], l, traj.weight(k, l))).map_err(err)?;
                }
            }
            w.flush().map_err(err)?;
            let frames: Vec<FrameRecord> = (0..traj.len())
                .map(|k| FrameRecord {
                    time: traj.times()[k],
                    weights: traj.weights(k),
                    vectors: traj
                        .frame(k)
                        .iter()
                        .map(|c| c.vector.amplitudes().iter().map(|z| [z.re, z.im]).collect())
                        .collect(),
                })
                .collect();
            json(dir, &format!("projectors_f{nu}.json"), &frames, &mut files)?;
        }
        {
            let mut w = csv::Writer::from_writer(create(dir, "probabilities.csv", &mut files)?);
            w.write_record(["time", "state", "p", "pdot_fd"]).map_err(err)?;
            for (k, t) in a.times.iter().enumerate() {
                for (s, (p, d)) in a.probabilities[k].iter().zip(&a.fd_pdot[k]).enumerate() {
                    w.serialize((t, s, p, d)).map_err(err)?;
                }
            }
            w.flush().map_err(err)?;
        }
        write_currents_csv(create(dir, "currents.csv", &mut files)?, &a.times, &a.currents).map_err(err)?;
        write_rates_csv(create(dir, "rates.csv", &mut files)?, &a.times, &a.rates).map_err(err)?;
        json(dir, "kernels.json", &a.kernels, &mut files)?;
        json(dir, "joint_states.json", &a.joint_states, &mut files)?;
        if let Some(stats) = &a.stats {
            let mut w = create(dir, "paths.jsonl", &mut files)?;
            write_paths_jsonl(&mut w, &a.paths, &a.space).map_err(err)?;
            w.flush().map_err(err)?;
            write_stats_csv(create(dir, "stats.csv", &mut files)?, stats, &a.quantum).map_err(err)?;
            for (nu, fs) in a.factor_stats.iter().enumerate() {
                let reference: Vec<Vec<f64>> = a.quantum.iter().map(|p| factor_marginal(&a.space, nu, p)).collect();
                write_stats_csv(create(dir, &format!("stats_f{nu}.csv"), &mut files)?, fs, &reference)
                    .map_err(err)?;
            }
        }
    }

    let manifest = Manifest {
        scenario: scenario.name.clone(),
        scenario_sha256: format!("{:x}", Sha256::digest(canonical.as_bytes())),
        seed: scenario.ensemble.master_seed,
        paths: scenario.ensemble.paths,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        passed: output.report.passed,
        files: files.clone(),
    };
    json(dir, "manifest.json", &manifest, &mut files)?;
    Ok(manifest)
}
