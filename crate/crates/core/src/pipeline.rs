//! The three-stage hybrid algorithm and its pure-online and pure-offline
//! baselines, each returning the learned policy and a [`RunReport`].

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::HybridConfig;
use crate::dataset::{sample_dataset, Provenance, TrajectoryDataset};
use crate::error::{invalid, Error, Result};
use crate::explore::compute_mu_explore;
use crate::imitate::run_imitation;
use crate::mdp::{optimal_policy, policy_value, DeterministicPolicy, TabularMdp};
use crate::occupancy::{run_stage1, FwTrace, Stage1Params, StopReason};
use crate::offline_density::{estimate_d_off, ConcentrabilityReport, CutoffParams};
use crate::seeding::{derive_seed, rng_from_seed, SimRng};
use crate::vilcb::{two_fold_subsample, vi_lcb, PessimisticSolution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Hybrid,
    PureOnline,
    PureOffline,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Hybrid => "hybrid",
            Algorithm::PureOnline => "pure_online",
            Algorithm::PureOffline => "pure_offline",
        })
    }
}

/// Frank-Wolfe trace without the per-iteration objective values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub final_value: f64,
    pub stopped_by: StopReason,
}

impl From<&FwTrace> for TraceSummary {
    fn from(t: &FwTrace) -> Self {
        Self { iterations: t.iterations, final_value: t.final_g, stopped_by: t.stopped_by }
    }
}

/// Episodes consumed per source. Online entries sum to `K^on`, offline to `K^off`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeAccounting {
    pub offline1: usize,
    pub offline2: usize,
    pub prepare: usize,
    pub imitate: usize,
    pub explore: usize,
    /// Target share of the preparation stage minus what `N·H` rounding allowed.
    pub prepare_rounding: usize,
}

impl EpisodeAccounting {
    pub fn online(&self) -> usize {
        self.prepare + self.imitate + self.explore
    }

    pub fn offline(&self) -> usize {
        self.offline1 + self.offline2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub n_per_step: usize,
    pub threshold_xi: f64,
    pub step_traces: Vec<TraceSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineDensitySummary {
    pub cutoff: f64,
    pub support_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploreSummary {
    pub trace: TraceSummary,
    pub certified_g: f64,
    pub support_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitateSummary {
    pub ftrl_rounds: usize,
    pub inner_traces: Vec<TraceSummary>,
    pub coverage_certificate: f64,
    pub cap_hits: usize,
    pub support_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage3Summary {
    pub input_episodes: usize,
    /// Episode counts per provenance tag fed to the pessimistic solver.
    pub provenance_counts: Vec<(String, usize)>,
    pub retained_transitions: usize,
    pub k_total: usize,
    /// `Σ_s ρ(s) V̂_1(s)`
    pub pessimistic_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: Algorithm,
    /// Set for the pure-online baseline, which reuses this crate's own stages.
    pub note: Option<String>,
    pub suboptimality_gap: f64,
    pub optimal_value: f64,
    pub policy_value: f64,
    pub policy: DeterministicPolicy,
    pub episodes: EpisodeAccounting,
    pub stage1: Option<Stage1Summary>,
    pub offline_density: Option<OfflineDensitySummary>,
    pub explore: Option<ExploreSummary>,
    pub imitate: Option<ImitateSummary>,
    pub stage3: Stage3Summary,
    pub warnings: Vec<String>,
    /// `C*(σ)` grid of the instance, when known.
    pub instance_meta: Vec<ConcentrabilityReport>,
    pub config: HybridConfig,
    /// Filled by callers that time the run; `None` keeps reports reproducible.
    pub wall_time_secs: Option<f64>,
}

/// `V*_1(ρ) − V^π_1(ρ)`.
pub fn evaluate(mdp: &TabularMdp, policy: &DeterministicPolicy) -> Result<f64> {
    let opt = optimal_policy(mdp);
    Ok(opt.v_init - policy_value(mdp, policy)?.v_init)
}

/// Hybrid split of the online budget: `(N, prepare, imitate, explore)` with
/// `N = ⌊K^on/(3H)⌋`, prepare `= N·H`, imitate `= ⌊K^on/3⌋` and the rest explore.
pub fn hybrid_budget(k_on: usize, horizon: usize) -> Result<(usize, usize, usize, usize)> {
    if horizon == 0 || k_on < 3 * horizon {
        return invalid(format!("k_on = {k_on} is below 3H = {}", 3 * horizon));
    }
    let n = k_on / (3 * horizon);
    let prepare = n * horizon;
    let imitate = k_on / 3;
    Ok((n, prepare, imitate, k_on - prepare - imitate))
}

struct Streams {
    stage1: SimRng,
    imitate: SimRng,
    explore: SimRng,
    stage3: SimRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            stage1: rng_from_seed(derive_seed(seed, &[1])),
            imitate: rng_from_seed(derive_seed(seed, &[2])),
            explore: rng_from_seed(derive_seed(seed, &[3])),
            stage3: rng_from_seed(derive_seed(seed, &[4])),
        }
    }
}

fn check_reward(mdp: &TabularMdp, reward: &Array3<f64>) -> Result<TabularMdp> {
    if reward.dim() != mdp.reward().dim() {
        return invalid(format!("reward shape {:?} does not match the MDP", reward.dim()));
    }
    mdp.with_reward(reward.clone())
}

/// Pool, shuffle, subsample and run pessimistic value iteration.
fn stage3(
    pool: TrajectoryDataset,
    mdp: &TabularMdp,
    cfg: &HybridConfig,
    k_total: usize,
    rng: &mut SimRng,
) -> Result<(PessimisticSolution, Stage3Summary)> {
    let (_, ns, na) = mdp.dims();
    let mut episodes = pool.episodes().to_vec();
    if episodes.iter().any(|t| t.provenance() == Provenance::Offline1) {
        return Err(Error::State("first offline half leaked into the pessimistic solver input".into()));
    }
    episodes.shuffle(rng);
    let pool = TrajectoryDataset::new(mdp.horizon(), episodes)?;
    let trimmed = two_fold_subsample(&pool, ns, na, cfg.delta, cfg.c_trim, rng)?;
    let sol = vi_lcb(&trimmed, mdp.reward(), cfg.delta, cfg.c_b, k_total)?;
    let pessimistic_value = mdp.init_dist().iter().zip(sol.v_hat.row(0)).map(|(p, v)| p * v).sum();
    let summary = Stage3Summary {
        input_episodes: pool.len(),
        provenance_counts: pool.provenance_counts().into_iter().map(|(p, n)| (p.to_string(), n)).collect(),
        retained_transitions: trimmed.len(),
        k_total,
        pessimistic_value,
    };
    Ok((sol, summary))
}

fn finish(
    algorithm: Algorithm,
    mdp: &TabularMdp,
    sol: &PessimisticSolution,
    parts: ReportParts,
    cfg: &HybridConfig,
) -> Result<(DeterministicPolicy, RunReport)> {
    let opt = optimal_policy(mdp);
    let value = policy_value(mdp, &sol.policy)?.v_init;
    let gap = opt.v_init - value;
    debug_assert!(gap >= -1e-9, "negative suboptimality gap {gap}");
    let report = RunReport {
        algorithm,
        note: parts.note,
        suboptimality_gap: gap,
        optimal_value: opt.v_init,
        policy_value: value,
        policy: sol.policy.clone(),
        episodes: parts.episodes,
        stage1: parts.stage1,
        offline_density: parts.offline_density,
        explore: parts.explore,
        imitate: parts.imitate,
        stage3: parts.stage3,
        warnings: parts.warnings,
        instance_meta: Vec::new(),
        config: cfg.clone(),
        wall_time_secs: None,
    };
    Ok((sol.policy.clone(), report))
}

struct ReportParts {
    note: Option<String>,
    episodes: EpisodeAccounting,
    stage1: Option<Stage1Summary>,
    offline_density: Option<OfflineDensitySummary>,
    explore: Option<ExploreSummary>,
    imitate: Option<ImitateSummary>,
    stage3: Stage3Summary,
    warnings: Vec<String>,
}

fn trace_warnings(label: &str, traces: &[FwTrace], warnings: &mut Vec<String>) {
    let capped = traces.iter().filter(|t| t.stopped_by == StopReason::Cap).count();
    if capped > 0 {
        warnings.push(format!("{label}: {capped} of {} Frank-Wolfe runs hit the iteration cap", traces.len()));
    }
}

/// Three stages: reward-free occupancy estimation, exploration/imitation
/// data collection, pessimistic planning on the second offline half plus the
/// new online data. `reward` is only read in the last stage.
pub fn run_hybrid(
    mdp: &TabularMdp,
    offline: &TrajectoryDataset,
    reward: &Array3<f64>,
    cfg: &HybridConfig,
) -> Result<(DeterministicPolicy, RunReport)> {
    let (horizon, ns, na) = mdp.dims();
    cfg.validate_hybrid(horizon)?;
    if offline.len() != cfg.k_off {
        return invalid(format!("offline dataset has {} episodes but k_off = {}", offline.len(), cfg.k_off));
    }
    offline.validate_for(mdp)?;
    let revealed = check_reward(mdp, reward)?;
    let env = mdp.with_reward(Array3::zeros((horizon, ns, na)))?;
    let mut rng = Streams::new(cfg.seed);
    let mut warnings = Vec::new();

    let (off1, off2) = offline.split_offline_halves();
    let (n, prepare, n_imitate, n_explore) = hybrid_budget(cfg.k_on, horizon)?;
    let threshold_xi = cfg.threshold_xi(horizon, ns, na);
    let s1 = run_stage1(
        &env,
        &Stage1Params { k_on_prepare: prepare, k_on: cfg.k_on, threshold_xi, step_cap: cfg.stage1_cap },
        &mut rng.stage1,
    )?;
    trace_warnings("stage 1", &s1.step_traces, &mut warnings);

    let cutoff = CutoffParams { k_off: cfg.k_off, n, k_on: cfg.k_on, delta: cfg.delta, c_off: cfg.c_off, mode: cfg.cutoff_mode };
    let d_off = estimate_d_off(&off1, ns, na, &cutoff)?;
    if d_off.is_zero() {
        warnings.push(format!("offline density thresholded to zero (cutoff {:.3e})", d_off.cutoff));
    }

    let explore = compute_mu_explore(&s1.handle, cfg.k_on, cfg.explore_cap)?;
    trace_warnings("explore", std::slice::from_ref(&explore.trace), &mut warnings);
    let imitate = run_imitation(&d_off.d_off_hat, &s1.handle, cfg.k_on, &cfg.imitation_params(horizon, ns, na))?;
    trace_warnings("imitate", &imitate.inner_traces, &mut warnings);

    let d_imitate = sample_dataset(&env, &imitate.mixture, n_imitate, &mut rng.imitate, Provenance::Imitate)?;
    let d_explore = sample_dataset(&env, &explore.mixture, n_explore, &mut rng.explore, Provenance::Explore)?;
    let mut pool = off2.clone();
    pool.extend(d_imitate)?;
    pool.extend(d_explore)?;
    let (sol, stage3) = stage3(pool, &revealed, cfg, cfg.k_off + cfg.k_on, &mut rng.stage3)?;

    let episodes = EpisodeAccounting {
        offline1: off1.len(),
        offline2: off2.len(),
        prepare,
        imitate: n_imitate,
        explore: n_explore,
        prepare_rounding: cfg.k_on / 3 - prepare,
    };
    assert_eq!(episodes.online(), cfg.k_on, "online episode accounting");
    assert_eq!(episodes.offline(), cfg.k_off, "offline episode accounting");

    let parts = ReportParts {
        note: None,
        episodes,
        stage1: Some(Stage1Summary {
            n_per_step: s1.n_per_step,
            threshold_xi,
            step_traces: s1.step_traces.iter().map(TraceSummary::from).collect(),
        }),
        offline_density: Some(OfflineDensitySummary { cutoff: d_off.cutoff, support_size: d_off.support_size() }),
        explore: Some(ExploreSummary {
            trace: (&explore.trace).into(),
            certified_g: explore.certified_g,
            support_size: explore.mixture.support_size(),
        }),
        imitate: Some(ImitateSummary {
            ftrl_rounds: imitate.ftrl_rounds,
            inner_traces: imitate.inner_traces.iter().map(TraceSummary::from).collect(),
            coverage_certificate: imitate.coverage_certificate,
            cap_hits: imitate.cap_hits,
            support_size: imitate.mixture.support_size(),
        }),
        stage3,
        warnings,
    };
    finish(Algorithm::Hybrid, &revealed, &sol, parts, cfg)
}

/// Online-only surrogate baseline: half the budget for occupancy estimation,
/// half under the exploration mixture, then pessimistic planning. `cfg.k_on`
/// and `cfg.k_off` are ignored in favour of `k_total`.
pub fn run_pure_online(
    mdp: &TabularMdp,
    reward: &Array3<f64>,
    k_total: usize,
    cfg: &HybridConfig,
) -> Result<(DeterministicPolicy, RunReport)> {
    let (horizon, ns, na) = mdp.dims();
    cfg.validate()?;
    if k_total < 2 * horizon {
        return invalid(format!("online budget {k_total} is below 2H = {}", 2 * horizon));
    }
    let revealed = check_reward(mdp, reward)?;
    let env = mdp.with_reward(Array3::zeros((horizon, ns, na)))?;
    let mut rng = Streams::new(cfg.seed);
    let mut warnings = Vec::new();

    let prepare = (k_total / 2) / horizon * horizon;
    let n_explore = k_total - prepare;
    let threshold_xi = cfg.threshold_xi(horizon, ns, na);
    let s1 = run_stage1(
        &env,
        &Stage1Params { k_on_prepare: prepare, k_on: k_total, threshold_xi, step_cap: cfg.stage1_cap },
        &mut rng.stage1,
    )?;
    trace_warnings("stage 1", &s1.step_traces, &mut warnings);
    let explore = compute_mu_explore(&s1.handle, k_total, cfg.explore_cap)?;
    trace_warnings("explore", std::slice::from_ref(&explore.trace), &mut warnings);
    let pool = sample_dataset(&env, &explore.mixture, n_explore, &mut rng.explore, Provenance::Explore)?;
    let (sol, stage3) = stage3(pool, &revealed, cfg, k_total, &mut rng.stage3)?;

    let parts = ReportParts {
        note: Some("surrogate online baseline built from this crate's exploration stages".into()),
        episodes: EpisodeAccounting {
            prepare,
            explore: n_explore,
            prepare_rounding: k_total / 2 - prepare,
            ..EpisodeAccounting::default()
        },
        stage1: Some(Stage1Summary {
            n_per_step: s1.n_per_step,
            threshold_xi,
            step_traces: s1.step_traces.iter().map(TraceSummary::from).collect(),
        }),
        offline_density: None,
        explore: Some(ExploreSummary {
            trace: (&explore.trace).into(),
            certified_g: explore.certified_g,
            support_size: explore.mixture.support_size(),
        }),
        imitate: None,
        stage3,
        warnings,
    };
    let mut cfg = cfg.clone();
    cfg.k_on = k_total;
    cfg.k_off = 0;
    finish(Algorithm::PureOnline, &revealed, &sol, parts, &cfg)
}

/// Offline-only baseline: subsampling and pessimistic planning on the whole dataset.
pub fn run_pure_offline(
    mdp: &TabularMdp,
    offline: &TrajectoryDataset,
    reward: &Array3<f64>,
    cfg: &HybridConfig,
) -> Result<(DeterministicPolicy, RunReport)> {
    cfg.validate()?;
    if offline.len() < 2 {
        return invalid("pure offline run needs at least two episodes");
    }
    offline.validate_for(mdp)?;
    let revealed = check_reward(mdp, reward)?;
    let mut rng = Streams::new(cfg.seed);
    let pool = TrajectoryDataset::new(
        offline.horizon(),
        offline.episodes().iter().cloned().map(|t| t.with_provenance(Provenance::Offline2)).collect(),
    )?;
    let (sol, stage3) = stage3(pool, &revealed, cfg, offline.len(), &mut rng.stage3)?;
    let parts = ReportParts {
        note: None,
        episodes: EpisodeAccounting { offline2: offline.len(), ..EpisodeAccounting::default() },
        stage1: None,
        offline_density: None,
        explore: None,
        imitate: None,
        stage3,
        warnings: Vec::new(),
    };
    let mut cfg = cfg.clone();
    cfg.k_off = offline.len();
    cfg.k_on = 0;
    finish(Algorithm::PureOffline, &revealed, &sol, parts, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::random_mdp;
    use crate::mdp::PolicyMixture;
    use ndarray::{arr1, Array4};

    fn small_cfg(k_off: usize, k_on: usize) -> HybridConfig {
        HybridConfig { k_off, k_on, t_max_ftrl: Some(5), ..HybridConfig::default() }
    }

    #[test]
    fn budget_split() {
        assert_eq!(hybrid_budget(2000, 3).unwrap(), (222, 666, 666, 668));
        assert_eq!(hybrid_budget(9, 3).unwrap(), (1, 3, 3, 3));
        assert!(hybrid_budget(8, 3).is_err());
    }

    #[test]
    fn trivial_mdp_has_zero_gap() {
        let mdp = TabularMdp::new(Array4::ones((2, 1, 1, 1)), Array3::from_elem((2, 1, 1), 0.5), arr1(&[1.0])).unwrap();
        let mut rng = rng_from_seed(1);
        let mix = PolicyMixture::point_mass(DeterministicPolicy::first_action(2, 1, 1));
        let off = sample_dataset(&mdp, &mix, 2, &mut rng, Provenance::Offline1).unwrap();
        let (pi, rep) = run_hybrid(&mdp, &off, mdp.reward(), &small_cfg(2, 6)).unwrap();
        assert_eq!(pi, DeterministicPolicy::first_action(2, 1, 1));
        assert_eq!(rep.suboptimality_gap, 0.0);
        assert_eq!(run_pure_online(&mdp, mdp.reward(), 4, &small_cfg(2, 6)).unwrap().1.suboptimality_gap, 0.0);
        assert_eq!(run_pure_offline(&mdp, &off, mdp.reward(), &small_cfg(2, 6)).unwrap().1.suboptimality_gap, 0.0);
    }

    #[test]
    fn zero_reward_has_zero_gap_and_accounting_balances() {
        let mut rng = rng_from_seed(2);
        let mdp = random_mdp(&mut rng, 3, 2, 3);
        let mix = PolicyMixture::point_mass(DeterministicPolicy::first_action(3, 3, 2));
        let off = sample_dataset(&mdp, &mix, 50, &mut rng, Provenance::Offline1).unwrap();
        let (_, rep) = run_hybrid(&mdp, &off, &Array3::zeros((3, 3, 2)), &small_cfg(50, 100)).unwrap();
        assert_eq!(rep.suboptimality_gap, 0.0);
        assert_eq!(rep.episodes.online(), 100);
        assert_eq!(rep.episodes.offline(), 50);
        assert!(rep.stage3.provenance_counts.iter().all(|(p, _)| p != "offline1"));
    }

    #[test]
    fn budget_errors() {
        let mut rng = rng_from_seed(3);
        let mdp = random_mdp(&mut rng, 2, 2, 3);
        let mix = PolicyMixture::point_mass(DeterministicPolicy::first_action(3, 2, 2));
        let off = sample_dataset(&mdp, &mix, 4, &mut rng, Provenance::Offline1).unwrap();
        assert!(matches!(run_hybrid(&mdp, &off, mdp.reward(), &small_cfg(4, 8)), Err(Error::InvalidInput(_))));
        assert!(matches!(run_hybrid(&mdp, &off, mdp.reward(), &small_cfg(5, 9)), Err(Error::InvalidInput(_))));
        assert!(matches!(run_pure_online(&mdp, mdp.reward(), 5, &small_cfg(4, 9)), Err(Error::InvalidInput(_))));
    }
}
