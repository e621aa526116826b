//! Experiment grids: instances × configs × seeds × algorithms, one CSV row
//! per run plus a JSON manifest of completed cells so reruns resume.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::HybridConfig;
use crate::dataset::{sample_dataset, Provenance};
use crate::error::{invalid, Error, Result};
use crate::instance::{gen_instance, Family, GeneratedInstance, InstanceSpec};
use crate::pipeline::{run_hybrid, run_pure_offline, run_pure_online, Algorithm, RunReport};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::serde_util::fmt_f64;

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Hybrid]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub instances: Vec<InstanceSpec>,
    pub configs: Vec<HybridConfig>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
}

impl SweepPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let plan: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?,
            _ => serde_json::from_str(&text)?,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() || self.configs.is_empty() || self.seeds.is_empty() || self.algorithms.is_empty() {
            return invalid("sweep plan needs at least one instance, config, seed and algorithm");
        }
        self.instances.iter().try_for_each(InstanceSpec::validate)?;
        self.configs.iter().try_for_each(HybridConfig::validate)
    }

    /// All cells in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for instance in 0..self.instances.len() {
            for config in 0..self.configs.len() {
                for &seed in &self.seeds {
                    for &algorithm in &self.algorithms {
                        out.push(Cell { instance, config, seed, algorithm });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub instance: usize,
    pub config: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("i{}-c{}-s{}-{}", self.instance, self.config, self.seed, self.algorithm)
    }
}

/// Seeds a cell derives from its run seed: instance generation, offline
/// sampling and the algorithm itself. Shared across algorithms so baselines
/// see the same instance and offline data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSeeds {
    pub instance: u64,
    pub offline: u64,
    pub run: u64,
}

pub fn cell_seeds(spec: &InstanceSpec, cfg: &HybridConfig, seed: u64) -> CellSeeds {
    CellSeeds {
        instance: derive_seed(spec.seed, &[seed, 1]),
        offline: derive_seed(spec.seed, &[seed, 2]),
        run: derive_seed(cfg.seed, &[seed, 3]),
    }
}

/// Instance, offline data and report for one cell. The offline dataset has
/// `cfg.k_off` episodes from the instance's behavior mixture; pure-online
/// runs use `k_off + k_on` online episodes.
pub fn run_cell(spec: &InstanceSpec, cfg: &HybridConfig, seed: u64, algorithm: Algorithm) -> Result<(GeneratedInstance, RunReport)> {
    let seeds = cell_seeds(spec, cfg, seed);
    let inst = gen_instance(spec, &mut rng_from_seed(seeds.instance))?;
    let cfg = HybridConfig { seed: seeds.run, ..cfg.clone() };
    let reward = inst.mdp.reward().clone();
    let (_, mut report) = match algorithm {
        Algorithm::PureOnline => run_pure_online(&inst.mdp, &reward, cfg.k_off + cfg.k_on, &cfg)?,
        _ => {
            let offline = sample_dataset(&inst.mdp, &inst.behavior, cfg.k_off, &mut rng_from_seed(seeds.offline), Provenance::Offline1)?;
            if algorithm == Algorithm::Hybrid {
                run_hybrid(&inst.mdp, &offline, &reward, &cfg)?
            } else {
                run_pure_offline(&inst.mdp, &offline, &reward, &cfg)?
            }
        }
    };
    report.instance_meta = inst.meta.clone();
    Ok((inst, report))
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell_id: String,
    pub instance: usize,
    pub config: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub family: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub k_off: usize,
    pub k_on: usize,
    pub c_star_0: String,
    /// `σ:C*(σ)` pairs separated by `;`.
    pub c_star_grid: String,
    pub status: String,
    pub suboptimality_gap: Option<f64>,
    pub pessimistic_value: Option<f64>,
    pub warnings: String,
    pub error: String,
}

fn row_for(plan: &SweepPlan, cell: &Cell, outcome: Result<(GeneratedInstance, RunReport)>) -> SweepRow {
    let spec = &plan.instances[cell.instance];
    let cfg = &plan.configs[cell.config];
    let family = match spec.family {
        Family::Random => "random".to_string(),
        Family::PartialCoverage { sigma_target, mismatch_c } => format!("partial_coverage(sigma={sigma_target},c={mismatch_c})"),
    };
    let mut row = SweepRow {
        cell_id: cell.id(),
        instance: cell.instance,
        config: cell.config,
        seed: cell.seed,
        algorithm: cell.algorithm,
        family,
        num_states: spec.num_states,
        num_actions: spec.num_actions,
        horizon: spec.horizon,
        k_off: cfg.k_off,
        k_on: cfg.k_on,
        c_star_0: String::new(),
        c_star_grid: String::new(),
        status: "ok".into(),
        suboptimality_gap: None,
        pessimistic_value: None,
        warnings: String::new(),
        error: String::new(),
    };
    match outcome {
        Ok((inst, report)) => {
            row.c_star_0 = inst.meta.first().map(|r| fmt_f64(r.c_star_sigma)).unwrap_or_default();
            row.c_star_grid = inst
                .meta
                .iter()
                .map(|r| format!("{}:{}", r.sigma, fmt_f64(r.c_star_sigma)))
                .collect::<Vec<_>>()
                .join(";");
            row.suboptimality_gap = Some(report.suboptimality_gap);
            row.pessimistic_value = Some(report.stage3.pessimistic_value);
            row.warnings = report.warnings.join("; ");
        }
        Err(e) => {
            row.status = "error".into();
            row.error = e.to_string();
        }
    }
    row
}

/// Single-cell row without touching the filesystem.
pub fn sweep_row(plan: &SweepPlan, cell: &Cell) -> SweepRow {
    let outcome = run_cell(&plan.instances[cell.instance], &plan.configs[cell.config], cell.seed, cell.algorithm);
    row_for(plan, cell, outcome)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan: Option<SweepPlan>,
    pub completed: BTreeSet<String>,
    pub failed: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepSummary {
    pub ran: usize,
    pub skipped: usize,
    pub failed: usize,
    pub results: PathBuf,
    pub manifest: PathBuf,
}

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

struct Sink {
    writer: csv::Writer<std::fs::File>,
    manifest: Manifest,
    manifest_path: PathBuf,
    failed: usize,
}

impl Sink {
    fn record(&mut self, row: &SweepRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        if row.status == "ok" {
            self.manifest.completed.insert(row.cell_id.clone());
        } else {
            self.failed += 1;
            self.manifest.failed.insert(row.cell_id.clone());
        }
        std::fs::write(&self.manifest_path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}

/// Run every cell not yet recorded as completed in `out_dir`'s manifest,
/// using at most `workers` threads. Failed runs become error rows and are
/// retried on the next invocation.
pub fn run_sweep(plan: &SweepPlan, out_dir: impl AsRef<Path>, workers: usize) -> Result<SweepSummary> {
    plan.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let results = out_dir.join(RESULTS_FILE);
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest: Manifest = if manifest_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?
    } else {
        Manifest::default()
    };
    if let Some(previous) = &manifest.plan {
        if previous != plan {
            return invalid(format!("{} belongs to a different plan", manifest_path.display()));
        }
    }
    manifest.plan = Some(plan.clone());
    manifest.failed.clear();

    let pending: Vec<Cell> = plan.cells().into_iter().filter(|c| !manifest.completed.contains(&c.id())).collect();
    let skipped = plan.cells().len() - pending.len();
    let fresh = !results.exists() || std::fs::metadata(&results)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(&results)?;
    let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let sink = Mutex::new(Sink { writer, manifest, manifest_path: manifest_path.clone(), failed: 0 });

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
    let write_errors: Vec<Error> = pool.install(|| {
        pending
            .par_iter()
            .filter_map(|cell| {
                let row = sweep_row(plan, cell);
                log::info!("{} -> {}", row.cell_id, row.status);
                sink.lock().expect("sink lock poisoned").record(&row).err()
            })
            .collect()
    });
    if let Some(e) = write_errors.into_iter().next() {
        return Err(e);
    }
    let sink = sink.into_inner().expect("sink lock poisoned");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&sink.manifest)?)?;
    Ok(SweepSummary { ran: pending.len(), skipped, failed: sink.failed, results, manifest: manifest_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::BehaviorSpec;

    fn plan(seeds: Vec<u64>) -> SweepPlan {
        let spec = InstanceSpec {
            family: Family::Random,
            num_states: 2,
            num_actions: 2,
            horizon: 2,
            behavior: BehaviorSpec::Expert,
            seed: 1,
        };
        let cfg = HybridConfig { k_off: 20, k_on: 30, t_max_ftrl: Some(3), ..HybridConfig::default() };
        SweepPlan { instances: vec![spec.clone(), InstanceSpec { seed: 2, ..spec }], configs: vec![cfg], seeds, algorithms: default_algorithms() }
    }

    #[test]
    fn cell_ids_are_unique() {
        let p = SweepPlan { algorithms: vec![Algorithm::Hybrid, Algorithm::PureOffline], ..plan(vec![1, 2, 3]) };
        let ids: BTreeSet<String> = p.cells().iter().map(Cell::id).collect();
        assert_eq!(ids.len(), 12);
    }

    #[test]
    fn rerun_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let p = plan(vec![5]);
        let first = run_sweep(&p, dir.path(), 2).unwrap();
        assert_eq!((first.ran, first.skipped, first.failed), (2, 0, 0));
        let before = std::fs::read_to_string(&first.results).unwrap();
        let second = run_sweep(&p, dir.path(), 2).unwrap();
        assert_eq!((second.ran, second.skipped), (0, 2));
        assert_eq!(std::fs::read_to_string(&second.results).unwrap(), before);
        assert!(run_sweep(&plan(vec![6]), dir.path(), 1).is_err());
    }
}
