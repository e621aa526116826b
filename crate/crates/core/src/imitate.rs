//! Imitation mixture `μ^imitate`: an FTRL adversary over stochastic policies
//! against a Frank-Wolfe inner solver for the mixture.
//!
//! Round `t` solves `min_μ φ(μ, π^t)` approximately, where
//! `φ(μ, π) = Σ_{h,s} E_{a∼π_h(·|s)} d̂^off_h(s,a) / (1/(K^on H) + E_μ d̂_h(s,a))`,
//! then the adversary plays exponential weights on the accumulated ratios.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mdp::{backward_induction, OccupancyTable, Policy, PolicyMixture, StochasticPolicy};
use crate::occupancy::{coverage_floor, FwTrace, OccupancyHandle, StopReason};

/// `π_h(a|s) ∝ exp(η · G_h(s,a))`, evaluated with the row max subtracted.
pub fn ftrl_update(cumulative_gains: &Array3<f64>, eta: f64) -> Result<StochasticPolicy> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return invalid(format!("eta must be a finite non-negative number, got {eta}"));
    }
    let (horizon, ns, na) = cumulative_gains.dim();
    let mut probs = Array3::zeros((horizon, ns, na));
    for h in 0..horizon {
        for s in 0..ns {
            let row = cumulative_gains.slice(ndarray::s![h, s, ..]);
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..na {
                let w = (eta * (row[a] - top)).exp();
                probs[[h, s, a]] = w;
                z += w;
            }
            for a in 0..na {
                probs[[h, s, a]] /= z;
            }
        }
    }
    StochasticPolicy::new(probs)
}

/// `d̂^off / (floor + E_μ d̂)` entrywise.
pub fn ratio_table(d_off_hat: &OccupancyTable, mixture_table: &OccupancyTable, floor: f64) -> Array3<f64> {
    let mut out = d_off_hat.d.clone();
    out.zip_mut_with(&mixture_table.d, |x, &m| *x /= floor + m);
    out
}

fn phi_from_table(adversary: &StochasticPolicy, d_off_hat: &OccupancyTable, mixture_table: &OccupancyTable, floor: f64) -> f64 {
    adversary
        .probs()
        .iter()
        .zip(d_off_hat.d.iter())
        .zip(mixture_table.d.iter())
        .map(|((&p, &o), &m)| p * o / (floor + m))
        .sum()
}

/// `E_μ d̂` over all steps, atom by atom.
pub fn mixture_table(handle: &OccupancyHandle, mixture: &PolicyMixture) -> Result<OccupancyTable> {
    let (h, s, a) = handle.dims();
    let mut out = OccupancyTable::zeros(h, s, a);
    for atom in mixture.atoms() {
        out.d.scaled_add(atom.weight, &handle.eval(&atom.policy)?.d);
    }
    Ok(out)
}

fn check_shapes(adversary: &StochasticPolicy, d_off_hat: &OccupancyTable, handle: &OccupancyHandle) -> Result<()> {
    if adversary.dims() != handle.dims() || d_off_hat.dims() != handle.dims() {
        return invalid("adversary, offline density and handle have inconsistent dimensions");
    }
    Ok(())
}

pub fn phi_objective(
    mixture: &PolicyMixture,
    adversary: &StochasticPolicy,
    d_off_hat: &OccupancyTable,
    handle: &OccupancyHandle,
    k_on: usize,
) -> Result<f64> {
    check_shapes(adversary, d_off_hat, handle)?;
    let table = mixture_table(handle, mixture)?;
    Ok(phi_from_table(adversary, d_off_hat, &table, coverage_floor(k_on, handle.horizon())))
}

/// Step-size rule of the inner Frank-Wolfe solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum InnerStep {
    /// Exact minimisation of `φ` along the segment towards the search direction.
    LineSearch,
    /// Constant `α = step_scale · S / (K^on H)³`.
    Constant { step_scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerSolverParams {
    pub step: InnerStep,
    pub cap: usize,
}

impl InnerSolverParams {
    /// Constant step with cap `⌈cap_scale · (K^on H)⁴ / S²⌉`.
    pub fn constant_step(step_scale: f64, cap_scale: f64, k_on: usize, horizon: usize, num_states: usize) -> Self {
        let kh = (k_on * horizon) as f64;
        let cap = (cap_scale * kh.powi(4) / (num_states as f64).powi(2)).ceil();
        Self { step: InnerStep::Constant { step_scale }, cap: if cap >= usize::MAX as f64 { usize::MAX } else { cap as usize } }
    }
}

/// Threshold of the inner stopping rule, `108·S·H`.
pub fn stopping_threshold(num_states: usize, horizon: usize) -> f64 {
    108.0 * (num_states * horizon) as f64
}

#[derive(Clone, Debug)]
pub struct SubproblemOutcome {
    pub mixture: PolicyMixture,
    pub trace: FwTrace,
    pub mixture_table: OccupancyTable,
}

/// `argmin_{α∈[0,1]} Σ w / (floor + m + α (d − m))` by bisection on the derivative.
fn line_search(weights: &Array3<f64>, current: &OccupancyTable, target: &OccupancyTable, floor: f64) -> f64 {
    let slope = |alpha: f64| -> f64 {
        let mut acc = 0.0;
        for ((&w, &m), &d) in weights.iter().zip(current.d.iter()).zip(target.d.iter()) {
            if w > 0.0 {
                let den = floor + m + alpha * (d - m);
                acc -= w * (d - m) / (den * den);
            }
        }
        acc
    };
    if slope(0.0) >= 0.0 {
        return 0.0;
    }
    if slope(1.0) <= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Frank-Wolfe on `μ ↦ φ(μ, adversary)`. Each iteration first checks
/// `φ ≤ 108·S·H`; otherwise it plans on the estimated model with reward
/// `adversary · d̂^off / (floor + E_μ d̂)²` and moves towards that policy.
pub fn solve_mu_subproblem(
    adversary: &StochasticPolicy,
    d_off_hat: &OccupancyTable,
    handle: &OccupancyHandle,
    k_on: usize,
    warm_start: Option<&PolicyMixture>,
    params: &InnerSolverParams,
) -> Result<SubproblemOutcome> {
    check_shapes(adversary, d_off_hat, handle)?;
    if k_on == 0 {
        return invalid("k_on must be positive");
    }
    let (horizon, ns, na) = handle.dims();
    let floor = coverage_floor(k_on, horizon);
    let threshold = stopping_threshold(ns, horizon);
    let mut mixture = match warm_start {
        Some(m) => m.clone(),
        None => PolicyMixture::point_mass(crate::mdp::DeterministicPolicy::first_action(horizon, ns, na)),
    };
    let mut table = mixture_table(handle, &mixture)?;
    let mut weights = adversary.probs().clone();
    weights.zip_mut_with(&d_off_hat.d, |p, &o| *p *= o);

    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        let phi = phi_from_table(adversary, d_off_hat, &table, floor);
        objective.push(phi);
        let stopped_by = if phi <= threshold {
            Some(StopReason::Threshold)
        } else if iterations >= params.cap {
            Some(StopReason::Cap)
        } else {
            None
        };
        if let Some(stopped_by) = stopped_by {
            let trace = FwTrace { iterations, final_g: phi, stopped_by, objective };
            return Ok(SubproblemOutcome { mixture, trace, mixture_table: table });
        }

        let mut reward = weights.clone();
        reward.zip_mut_with(&table.d, |w, &m| *w /= (floor + m) * (floor + m));
        let (direction, _) = backward_induction(handle.kernels().p_hat().view(), reward.view());
        let d_dir = handle.eval(&direction)?;
        let alpha = match params.step {
            InnerStep::LineSearch => line_search(&weights, &table, &d_dir, floor),
            InnerStep::Constant { step_scale } => (step_scale * ns as f64 / ((k_on * horizon) as f64).powi(3)).min(1.0),
        };
        if alpha <= 0.0 {
            let trace = FwTrace { iterations, final_g: phi, stopped_by: StopReason::Cap, objective };
            return Ok(SubproblemOutcome { mixture, trace, mixture_table: table });
        }
        table.d *= 1.0 - alpha;
        table.d.scaled_add(alpha, &d_dir.d);
        mixture.step_towards(alpha, &direction);
        iterations += 1;
    }
}

/// How the FTRL learning rate is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EtaRule {
    Fixed { eta: f64 },
    /// `√(ln A / (2 T L̂²))` with `L̂` the largest gain observed so far.
    Adaptive,
    /// `√(ln A / (2 T (K^on H)²))`
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitationParams {
    pub eta: EtaRule,
    pub t_max: usize,
    pub warm_start: bool,
    pub inner: InnerSolverParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitateResult {
    /// Uniform average of the per-round mixtures.
    pub mixture: PolicyMixture,
    pub per_round_mixtures: Vec<PolicyMixture>,
    pub ftrl_rounds: usize,
    pub inner_traces: Vec<FwTrace>,
    /// `Σ_{h,s} max_a d̂^off_h(s,a) / (1/(K^on H) + E_{μ^imitate} d̂_h(s,a))`
    pub coverage_certificate: f64,
    /// Inner solves that ended without meeting the stopping rule.
    pub cap_hits: usize,
}

/// `Σ_{h,s} max_a d̂^off / (floor + E_μ d̂)`.
pub fn coverage_certificate(d_off_hat: &OccupancyTable, mixture_table: &OccupancyTable, floor: f64) -> f64 {
    let ratios = ratio_table(d_off_hat, mixture_table, floor);
    ratios
        .outer_iter()
        .flat_map(|layer| layer.outer_iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect::<Vec<_>>())
        .sum()
}

pub fn run_imitation(
    d_off_hat: &OccupancyTable,
    handle: &OccupancyHandle,
    k_on: usize,
    params: &ImitationParams,
) -> Result<ImitateResult> {
    if params.t_max == 0 {
        return invalid("t_max must be at least 1");
    }
    if let EtaRule::Fixed { eta } = params.eta {
        if !(eta > 0.0) || !eta.is_finite() {
            return invalid(format!("eta must be positive, got {eta}"));
        }
    }
    let (horizon, ns, na) = handle.dims();
    if d_off_hat.dims() != handle.dims() {
        return invalid("offline density and handle have inconsistent dimensions");
    }
    let floor = coverage_floor(k_on, horizon);
    let t_max = params.t_max as f64;
    let log_a = (na as f64).ln();

    let mut adversary = StochasticPolicy::uniform(horizon, ns, na);
    let mut cumulative = Array3::<f64>::zeros((horizon, ns, na));
    let mut largest_gain: f64 = 0.0;
    let mut per_round_mixtures = Vec::with_capacity(params.t_max);
    let mut inner_traces = Vec::with_capacity(params.t_max);
    let mut cap_hits = 0;

    for t in 0..params.t_max {
        let warm = if params.warm_start { per_round_mixtures.last() } else { None };
        let out = solve_mu_subproblem(&adversary, d_off_hat, handle, k_on, warm, &params.inner)?;
        if out.trace.stopped_by == StopReason::Cap {
            cap_hits += 1;
            log::warn!("imitation round {t}: inner solver stopped at phi = {:.3} without meeting the rule", out.trace.final_g);
        }
        let gains = ratio_table(d_off_hat, &out.mixture_table, floor);
        largest_gain = gains.iter().copied().fold(largest_gain, f64::max);
        cumulative += &gains;
        let eta = match params.eta {
            EtaRule::Fixed { eta } => eta,
            EtaRule::Adaptive if largest_gain > 0.0 => (log_a / (2.0 * t_max * largest_gain * largest_gain)).sqrt(),
            EtaRule::Adaptive => 0.0,
            EtaRule::PaperLiteral => (log_a / (2.0 * t_max)).sqrt() / (k_on * horizon) as f64,
        };
        adversary = ftrl_update(&cumulative, eta)?;
        per_round_mixtures.push(out.mixture);
        inner_traces.push(out.trace);
    }

    let mixture = PolicyMixture::average(&per_round_mixtures)?;
    let table = mixture_table(handle, &mixture)?;
    Ok(ImitateResult {
        coverage_certificate: coverage_certificate(d_off_hat, &table, floor),
        mixture,
        per_round_mixtures,
        ftrl_rounds: params.t_max,
        inner_traces,
        cap_hits,
    })
}
