//! `hybrid-rl` command-line driver.
//!
//! Exit codes: 0 on success, 2 on invalid input, 3 when `--strict` is set and
//! the run finished with warnings, 1 on any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hybrid_rl::config::HybridConfig;
use hybrid_rl::dataset::{sample_dataset, Provenance, TrajectoryDataset};
use hybrid_rl::instance::InstanceSpec;
use hybrid_rl::mdp::{optimal_policy, policy_value};
use hybrid_rl::pipeline::{run_hybrid, run_pure_offline, run_pure_online, RunReport};
use hybrid_rl::seeding::rng_from_seed;
use hybrid_rl::sweep::{run_sweep, SweepPlan};
use hybrid_rl::{DeterministicPolicy, TabularMdp};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hybrid-rl", version, about = "Hybrid offline/online RL on tabular episodic MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance from a spec file.
    GenMdp {
        #[arg(long)]
        spec: PathBuf,
        /// MDP JSON output.
        #[arg(long)]
        out: PathBuf,
        /// Full instance (MDP, behavior mixture, optimal policy, C*(σ) grid) as JSON.
        #[arg(long)]
        instance_out: Option<PathBuf>,
        /// Offline dataset sampled from the behavior mixture.
        #[arg(long, requires = "episodes")]
        offline_out: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Seed for offline sampling.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Three-stage hybrid run. `k_off` is taken from the dataset.
    RunHybrid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        offline: PathBuf,
    },
    /// Online-only baseline with `--episodes` online episodes.
    RunOnline {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `k_off + k_on` from the config.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Offline-only baseline on the whole dataset.
    RunOffline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        offline: PathBuf,
    },
    /// Run an instance × config × seed grid, writing results.csv and manifest.json.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Exit with code 3 if any cell failed.
        #[arg(long)]
        strict: bool,
    },
    /// Exact value and suboptimality gap of a policy (a policy file or a run report).
    Eval {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policy: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    mdp: PathBuf,
    /// TOML or JSON config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the theoretical constants; fields set in `--config` still win.
    #[arg(long)]
    paper_literal: bool,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with code 3 if the report carries warnings.
    #[arg(long)]
    strict: bool,
}

impl RunArgs {
    fn config(&self) -> Result<HybridConfig> {
        let base = if self.paper_literal { HybridConfig::default().paper_literal() } else { HybridConfig::default() };
        let mut cfg = match &self.config {
            Some(path) => HybridConfig::load_over(path, &base).with_context(|| format!("reading config {}", path.display()))?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn mdp(&self) -> Result<TabularMdp> {
        read_json(&self.mdp)
    }
}

/// Literal round counts and caps grow like `(K^on H)^2` and `(K^on H)^4`.
fn warn_if_heavy(cfg: &HybridConfig, mdp: &TabularMdp) {
    let (horizon, ns, na) = mdp.dims();
    let params = cfg.imitation_params(horizon, ns, na);
    if params.t_max > 1_000_000 || params.inner.cap > 10_000_000 {
        log::warn!(
            "imitation uses {} FTRL rounds with inner cap {}; set t_max_ftrl and inner_cap in the config to bound the run",
            params.t_max,
            params.inner.cap
        );
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(hybrid_rl::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_offline(path: &Path) -> Result<TrajectoryDataset> {
    TrajectoryDataset::load(path, Provenance::Offline1).with_context(|| format!("reading dataset {}", path.display()))
}

enum Outcome {
    Clean,
    Warned,
}

fn emit_report(args: &RunArgs, mut report: RunReport, started: std::time::Instant) -> Result<Outcome> {
    report.wall_time_secs = Some(started.elapsed().as_secs_f64());
    for w in &report.warnings {
        log::warn!("{w}");
    }
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    eprintln!("{} gap = {:.6}", report.algorithm, report.suboptimality_gap);
    Ok(if args.strict && !report.warnings.is_empty() { Outcome::Warned } else { Outcome::Clean })
}

fn run(command: Command) -> Result<Outcome> {
    let started = std::time::Instant::now();
    match command {
        Command::GenMdp { spec, out, instance_out, offline_out, episodes, data_seed } => {
            let spec = InstanceSpec::load(&spec).with_context(|| format!("reading spec {}", spec.display()))?;
            let inst = spec.generate()?;
            write_json(&out, &inst.mdp)?;
            if let Some(path) = instance_out {
                write_json(&path, &inst)?;
            }
            if let (Some(path), Some(k)) = (offline_out, episodes) {
                let data = sample_dataset(&inst.mdp, &inst.behavior, k, &mut rng_from_seed(data_seed), Provenance::Offline1)?;
                data.save(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(Outcome::Clean)
        }
        Command::RunHybrid { run, offline } => {
            let mdp = run.mdp()?;
            let data = load_offline(&offline)?;
            let cfg = HybridConfig { k_off: data.len(), ..run.config()? };
            warn_if_heavy(&cfg, &mdp);
            let (_, report) = run_hybrid(&mdp, &data, mdp.reward(), &cfg)?;
            emit_report(&run, report, started)
        }
        Command::RunOnline { run, episodes } => {
            let mdp = run.mdp()?;
            let cfg = run.config()?;
            let k = episodes.unwrap_or(cfg.k_off + cfg.k_on);
            let (_, report) = run_pure_online(&mdp, mdp.reward(), k, &cfg)?;
            emit_report(&run, report, started)
        }
        Command::RunOffline { run, offline } => {
            let mdp = run.mdp()?;
            let data = load_offline(&offline)?;
            let cfg = HybridConfig { k_off: data.len(), ..run.config()? };
            let (_, report) = run_pure_offline(&mdp, &data, mdp.reward(), &cfg)?;
            emit_report(&run, report, started)
        }
        Command::Sweep { plan, out, workers, strict } => {
            let plan = SweepPlan::load(&plan).with_context(|| format!("reading plan {}", plan.display()))?;
            let summary = run_sweep(&plan, &out, workers.max(1))?;
            eprintln!(
                "sweep: {} ran, {} skipped, {} failed; results in {}",
                summary.ran,
                summary.skipped,
                summary.failed,
                summary.results.display()
            );
            Ok(if strict && summary.failed > 0 { Outcome::Warned } else { Outcome::Clean })
        }
        Command::Eval { mdp, policy } => {
            let mdp: TabularMdp = read_json(&mdp)?;
            let policy = load_policy(&policy)?;
            let optimal = optimal_policy(&mdp).v_init;
            let value = policy_value(&mdp, &policy)?.v_init;
            let out = json!({ "optimal_value": optimal, "policy_value": value, "suboptimality_gap": optimal - value });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(Outcome::Clean)
        }
    }
}

/// A bare policy document, or any JSON object with a `policy` field (such as a run report).
fn load_policy(path: &Path) -> Result<DeterministicPolicy> {
    let value: serde_json::Value = read_json(path)?;
    let doc = match value.get("policy") {
        Some(inner) => inner.clone(),
        None => value,
    };
    serde_json::from_value(doc)
        .map_err(hybrid_rl::Error::from)
        .with_context(|| format!("parsing policy {}", path.display()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use hybrid_rl::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::State(_)) => 1,
        Some(_) => 2,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Warned) => ExitCode::from(3),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
