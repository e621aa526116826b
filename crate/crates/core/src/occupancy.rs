//! Reward-agnostic occupancy estimation.
//!
//! Stage 1 of the pipeline walks forward through the horizon. For each step
//! `h` it computes an exploration mixture that covers the step-`h`
//! state-action pairs (as judged by the estimates built so far), samples `N`
//! truncated episodes with it and fits a thresholded empirical kernel `P̂_h`.
//! The resulting [`OccupancyHandle`] can then evaluate `d̂^π` for any policy by
//! running the forward recursion on the empirical kernels.
//!
//! The log-barrier Frank-Wolfe loop used here is shared with the all-steps
//! exploration in [`crate::explore`].

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use ndarray::{s, Array1, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Provenance;
use crate::error::{invalid, Error, Result};
use crate::mdp::{
    backward_induction, sample_trajectory, DeterministicPolicy, OccupancyTable, Policy, PolicyFingerprint,
    PolicyMixture, TabularMdp,
};
use crate::serde_util::{arr3, arr4, vec3, vec4};
use crate::PROB_TOL;

/// How the kernel-fitting threshold `ξ` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum XiRule {
    /// `max(1, ⌈xi_scale · ln(HSA/δ)⌉)`
    Desk { xi_scale: f64 },
    /// `c_xi · H³S³A³ · ln(HSA/δ)`
    PaperLiteral { c_xi: f64 },
}

impl Default for XiRule {
    fn default() -> Self {
        XiRule::Desk { xi_scale: 1.0 }
    }
}

impl XiRule {
    pub fn value(&self, horizon: usize, num_states: usize, num_actions: usize, delta: f64) -> f64 {
        let (h, s, a) = (horizon as f64, num_states as f64, num_actions as f64);
        let log_term = (h * s * a / delta).ln();
        match *self {
            XiRule::Desk { xi_scale } => (xi_scale * log_term).ceil().max(1.0),
            XiRule::PaperLiteral { c_xi } => c_xi * (h * s * a).powi(3) * log_term,
        }
    }
}

/// Per-step empirical transition kernels with count thresholding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelDocument", into = "KernelDocument")]
pub struct EmpiricalKernel {
    /// `[H, S, A, S]`; rows whose count is at most `ξ` are identically zero.
    p_hat: Array4<f64>,
    /// `N_h(s, a)`
    counts: Array3<u64>,
    /// Raw `(s, a, s')` counts behind `p_hat`.
    transitions: Array4<u64>,
    threshold_xi: f64,
    fitted: Vec<bool>,
}

impl EmpiricalKernel {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, threshold_xi: f64) -> Self {
        Self {
            p_hat: Array4::zeros((horizon, num_states, num_actions, num_states)),
            counts: Array3::zeros((horizon, num_states, num_actions)),
            transitions: Array4::zeros((horizon, num_states, num_actions, num_states)),
            threshold_xi,
            fitted: vec![false; horizon],
        }
    }

    pub fn p_hat(&self) -> &Array4<f64> {
        &self.p_hat
    }

    pub fn counts(&self) -> &Array3<u64> {
        &self.counts
    }

    pub fn threshold_xi(&self) -> f64 {
        self.threshold_xi
    }

    pub fn is_fitted(&self, h: usize) -> bool {
        self.fitted.get(h).copied().unwrap_or(false)
    }

    /// Install step `h` from raw `[S, A, S]` transition counts:
    /// `P̂_h(s'|s,a) = 1{N > ξ} · count(s,a,s') / max(N, 1)`.
    pub fn fit_step(&mut self, h: usize, transitions: &Array3<u64>) -> Result<()> {
        let (_, ns, na, _) = self.p_hat.dim();
        if h >= self.fitted.len() || transitions.dim() != (ns, na, ns) {
            return invalid(format!("cannot fit step {h} with counts of shape {:?}", transitions.dim()));
        }
        self.transitions.slice_mut(s![h, .., .., ..]).assign(transitions);
        self.refresh_step(h);
        self.fitted[h] = true;
        Ok(())
    }

    fn refresh_step(&mut self, h: usize) {
        let (_, ns, na, _) = self.p_hat.dim();
        for s in 0..ns {
            for a in 0..na {
                let n: u64 = self.transitions.slice(s![h, s, a, ..]).sum();
                self.counts[[h, s, a]] = n;
                let keep = n as f64 > self.threshold_xi;
                for s2 in 0..ns {
                    self.p_hat[[h, s, a, s2]] =
                        if keep { self.transitions[[h, s, a, s2]] as f64 / n.max(1) as f64 } else { 0.0 };
                }
            }
        }
    }

    /// Same raw counts, different threshold.
    pub fn with_threshold(&self, threshold_xi: f64) -> Self {
        let mut out = self.clone();
        out.threshold_xi = threshold_xi;
        for h in 0..out.fitted.len() {
            if out.fitted[h] {
                out.refresh_step(h);
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct KernelDocument {
    threshold_xi: f64,
    fitted: Vec<bool>,
    p_hat: Vec<Vec<Vec<Vec<f64>>>>,
    counts: Vec<Vec<Vec<u64>>>,
    transitions: Vec<Vec<Vec<Vec<u64>>>>,
}

impl TryFrom<KernelDocument> for EmpiricalKernel {
    type Error = Error;

    fn try_from(doc: KernelDocument) -> Result<Self> {
        let p_hat = arr4(&doc.p_hat, "p_hat")?;
        let counts = arr3(&doc.counts, "counts")?;
        let transitions = arr4(&doc.transitions, "transitions")?;
        let (h, s, a, _) = p_hat.dim();
        if counts.dim() != (h, s, a) || transitions.dim() != p_hat.dim() || doc.fitted.len() != h {
            return invalid("kernel document has inconsistent shapes");
        }
        Ok(Self { p_hat, counts, transitions, threshold_xi: doc.threshold_xi, fitted: doc.fitted })
    }
}

impl From<EmpiricalKernel> for KernelDocument {
    fn from(k: EmpiricalKernel) -> Self {
        KernelDocument {
            threshold_xi: k.threshold_xi,
            fitted: k.fitted,
            p_hat: vec4(&k.p_hat),
            counts: vec3(&k.counts),
            transitions: vec4(&k.transitions),
        }
    }
}

/// Deferred estimator `π ↦ d̂^π`, memoised per policy table.
#[derive(Serialize, Deserialize)]
#[serde(try_from = "HandleDocument", into = "HandleDocument")]
pub struct OccupancyHandle {
    d1_hat: Array1<f64>,
    kernels: EmpiricalKernel,
    cache: RwLock<HashMap<PolicyFingerprint, Arc<OccupancyTable>>>,
}

impl Clone for OccupancyHandle {
    fn clone(&self) -> Self {
        Self::new(self.d1_hat.clone(), self.kernels.clone()).expect("cloned handle was valid")
    }
}

impl std::fmt::Debug for OccupancyHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OccupancyHandle")
            .field("d1_hat", &self.d1_hat)
            .field("kernels", &self.kernels)
            .finish_non_exhaustive()
    }
}

impl OccupancyHandle {
    pub fn new(d1_hat: Array1<f64>, kernels: EmpiricalKernel) -> Result<Self> {
        let (_, ns, _, _) = kernels.p_hat.dim();
        if d1_hat.len() != ns {
            return invalid("d1_hat length does not match the kernel state count");
        }
        let total: f64 = d1_hat.sum();
        if d1_hat.iter().any(|&x| x < 0.0) || (total - 1.0).abs() > PROB_TOL {
            return invalid(format!("d1_hat is not a distribution (sums to {total})"));
        }
        Ok(Self { d1_hat, kernels, cache: RwLock::new(HashMap::new()) })
    }

    /// Handle whose kernels are the true transition kernels with no
    /// thresholding; its estimates coincide with exact occupancies.
    pub fn exact_surrogate(mdp: &TabularMdp) -> Self {
        let (h, s, a) = mdp.dims();
        let mut kernels = EmpiricalKernel::new(h, s, a, 0.0);
        kernels.p_hat.assign(mdp.kernel());
        kernels.fitted.fill(true);
        Self::new(mdp.init_dist().clone(), kernels).expect("MDP initial distribution is valid")
    }

    pub fn d1_hat(&self) -> &Array1<f64> {
        &self.d1_hat
    }

    pub fn kernels(&self) -> &EmpiricalKernel {
        &self.kernels
    }

    /// `(H, S, A)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.kernels.counts.dim()
    }

    pub fn horizon(&self) -> usize {
        self.dims().0
    }

    /// Kernels for every transition `h -> h+1` inside the horizon are in place.
    pub fn is_fully_fitted(&self) -> bool {
        (0..self.horizon().saturating_sub(1)).all(|h| self.kernels.is_fitted(h))
    }

    pub fn fit_step(&mut self, h: usize, transitions: &Array3<u64>) -> Result<()> {
        self.kernels.fit_step(h, transitions)?;
        self.cache.get_mut().expect("cache lock poisoned").clear();
        Ok(())
    }

    /// Same data, different threshold.
    pub fn with_threshold(&self, threshold_xi: f64) -> Self {
        Self::new(self.d1_hat.clone(), self.kernels.with_threshold(threshold_xi)).expect("valid handle")
    }

    /// `d̂^π` for all steps. Requires every kernel to be fitted; results are memoised.
    pub fn eval<P: Policy + ?Sized>(&self, policy: &P) -> Result<Arc<OccupancyTable>> {
        if !self.is_fully_fitted() {
            return Err(Error::State("occupancy handle is not fitted for every step".into()));
        }
        let key = policy.fingerprint();
        if let Some(hit) = self.cache.read().expect("cache lock poisoned").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let table = Arc::new(self.eval_through(policy, self.horizon() - 1)?);
        let mut cache = self.cache.write().expect("cache lock poisoned");
        Ok(Arc::clone(cache.entry(key).or_insert(table)))
    }

    /// `d̂^π` for steps `0..=last_step`; later layers are left at zero. Needs the
    /// kernels of steps `0..last_step`.
    pub fn eval_through<P: Policy + ?Sized>(&self, policy: &P, last_step: usize) -> Result<OccupancyTable> {
        let (horizon, ns, na) = self.dims();
        if policy.dims() != (horizon, ns, na) {
            return invalid(format!("policy dimensions {:?} do not match handle {:?}", policy.dims(), self.dims()));
        }
        if last_step >= horizon {
            return invalid(format!("step {last_step} is outside the horizon {horizon}"));
        }
        if let Some(h) = (0..last_step).find(|&h| !self.kernels.is_fitted(h)) {
            return Err(Error::State(format!("kernel for step {h} has not been fitted")));
        }
        let mut occ = OccupancyTable::zeros(horizon, ns, na);
        let mut state_mass = self.d1_hat.clone();
        for h in 0..=last_step {
            for s in 0..ns {
                for a in 0..na {
                    occ.d[[h, s, a]] = state_mass[s] * policy.action_prob(h, s, a);
                }
            }
            if h < last_step {
                state_mass.fill(0.0);
                for s in 0..ns {
                    for a in 0..na {
                        let w = occ.d[[h, s, a]];
                        if w == 0.0 {
                            continue;
                        }
                        for s2 in 0..ns {
                            state_mass[s2] += w * self.kernels.p_hat[[h, s, a, s2]];
                        }
                    }
                }
            }
        }
        Ok(occ)
    }

    /// `E_{π∼μ} d̂^π` through `last_step`, recomputed atom by atom.
    pub fn mixture_table_through(&self, mixture: &PolicyMixture, last_step: usize) -> Result<OccupancyTable> {
        let (h, s, a) = self.dims();
        let mut out = OccupancyTable::zeros(h, s, a);
        for atom in mixture.atoms() {
            let occ = self.eval_through(&atom.policy, last_step)?;
            out.d.scaled_add(atom.weight, &occ.d);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct HandleDocument {
    d1_hat: Vec<f64>,
    kernels: EmpiricalKernel,
}

impl TryFrom<HandleDocument> for OccupancyHandle {
    type Error = Error;

    fn try_from(doc: HandleDocument) -> Result<Self> {
        OccupancyHandle::new(Array1::from(doc.d1_hat), doc.kernels)
    }
}

impl From<OccupancyHandle> for HandleDocument {
    fn from(h: OccupancyHandle) -> Self {
        HandleDocument { d1_hat: h.d1_hat.to_vec(), kernels: h.kernels }
    }
}

/// `d̂^π` through the handle; fails with a state error until every step is fitted.
pub fn eval_occupancy<P: Policy + ?Sized>(handle: &OccupancyHandle, policy: &P) -> Result<Arc<OccupancyTable>> {
    handle.eval(policy)
}

/// Empirical initial-state frequencies from `n` length-1 episodes.
pub fn estimate_initial_occupancy<R: Rng + ?Sized>(env: &TabularMdp, n: usize, rng: &mut R) -> Result<Array1<f64>> {
    if n == 0 {
        return invalid("need at least one episode to estimate the initial distribution");
    }
    let (horizon, ns, na) = env.dims();
    let any = PolicyMixture::point_mass(DeterministicPolicy::first_action(horizon, ns, na));
    let mut counts = vec![0u64; ns];
    for _ in 0..n {
        let t = sample_trajectory(env, &any, rng, Some(1), Provenance::Prepare(horizon))?;
        counts[t.states()[0]] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Which part of the horizon a coverage objective sums over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoverageScope {
    /// A single step (0-based).
    Step(usize),
    AllSteps,
}

impl CoverageScope {
    fn steps(self, horizon: usize) -> std::ops::Range<usize> {
        match self {
            CoverageScope::Step(h) => h..h + 1,
            CoverageScope::AllSteps => 0..horizon,
        }
    }

    fn last_step(self, horizon: usize) -> usize {
        match self {
            CoverageScope::Step(h) => h,
            CoverageScope::AllSteps => horizon - 1,
        }
    }
}

/// `1 / (K^on · H)`, the floor added to every coverage denominator.
pub fn coverage_floor(k_on: usize, horizon: usize) -> f64 {
    1.0 / (k_on as f64 * horizon as f64)
}

/// `Σ_scope (floor + d̂^π) / (floor + E_μ d̂)`, recomputed from scratch.
pub fn g_objective(
    handle: &OccupancyHandle,
    policy: &DeterministicPolicy,
    mixture: &PolicyMixture,
    scope: CoverageScope,
    k_on: usize,
) -> Result<f64> {
    let horizon = handle.horizon();
    let last = scope.last_step(horizon);
    let d_pi = handle.eval_through(policy, last)?;
    let d_mix = handle.mixture_table_through(mixture, last)?;
    Ok(g_from_tables(&d_pi, &d_mix, scope, coverage_floor(k_on, horizon)))
}

fn g_from_tables(d_pi: &OccupancyTable, d_mix: &OccupancyTable, scope: CoverageScope, floor: f64) -> f64 {
    let (horizon, ns, na) = d_pi.dims();
    let mut g = 0.0;
    for h in scope.steps(horizon) {
        for s in 0..ns {
            for a in 0..na {
                g += (floor + d_pi.d[[h, s, a]]) / (floor + d_mix.d[[h, s, a]]);
            }
        }
    }
    g
}

fn log_barrier(d_mix: &OccupancyTable, scope: CoverageScope, floor: f64) -> f64 {
    let horizon = d_mix.dims().0;
    scope
        .steps(horizon)
        .map(|h| d_mix.d.slice(s![h, .., ..]).iter().map(|&m| (floor + m).ln()).sum::<f64>())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    Cap,
}

/// Diagnostics of one Frank-Wolfe run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FwTrace {
    /// Number of mixture updates applied.
    pub iterations: usize,
    pub final_g: f64,
    pub stopped_by: StopReason,
    /// Objective value before each update, plus the final one.
    pub objective: Vec<f64>,
}

/// Output of the log-barrier Frank-Wolfe loop.
#[derive(Clone, Debug)]
pub struct CoverageOutcome {
    pub mixture: PolicyMixture,
    pub trace: FwTrace,
    /// Running `E_μ d̂` maintained alongside the mixture.
    pub mixture_table: OccupancyTable,
    /// Search direction at the final iterate; the stopping certificate is
    /// `g(last_direction, mixture) ≤ 2n`.
    pub last_direction: DeterministicPolicy,
}

/// Default iteration cap `⌊50 · n · ln(K·H)⌋` with `n = SA` per step or `SAH` for all steps.
pub fn coverage_iteration_cap(handle: &OccupancyHandle, scope: CoverageScope, k_on: usize) -> usize {
    let (horizon, ns, na) = handle.dims();
    let cells = match scope {
        CoverageScope::Step(_) => ns * na,
        CoverageScope::AllSteps => ns * na * horizon,
    };
    (50.0 * cells as f64 * ((k_on * horizon) as f64).ln()).floor().max(0.0) as usize
}

/// Frank-Wolfe ascent on `μ ↦ Σ_scope ln(floor + E_μ d̂)`.
///
/// Each iteration solves the augmented-MDP planning problem with reward
/// `1 / (floor + E_μ d̂_h(s,a))` on the scoped steps, evaluates
/// `g = Σ (floor + d̂^dir) / (floor + E_μ d̂)` and exits once `g ≤ 2n`;
/// otherwise it moves by `α = (g/n − 1) / (g − 1)`.
pub fn coverage_frank_wolfe(
    handle: &OccupancyHandle,
    scope: CoverageScope,
    k_on: usize,
    cap: Option<usize>,
) -> Result<CoverageOutcome> {
    let (horizon, ns, na) = handle.dims();
    if k_on == 0 {
        return invalid("k_on must be positive");
    }
    let last = scope.last_step(horizon);
    if last >= horizon {
        return invalid(format!("step {last} is outside the horizon {horizon}"));
    }
    let floor = coverage_floor(k_on, horizon);
    let cells = (scope.steps(horizon).len() * ns * na) as f64;
    let cap = cap.unwrap_or_else(|| coverage_iteration_cap(handle, scope, k_on));

    let init = DeterministicPolicy::first_action(horizon, ns, na);
    let mut mixture_table = handle.eval_through(&init, last)?;
    let mut mixture = PolicyMixture::point_mass(init);
    let mut objective = Vec::new();
    let mut reward = Array3::<f64>::zeros((horizon, ns, na));

    let mut iterations = 0;
    loop {
        for h in scope.steps(horizon) {
            for s in 0..ns {
                for a in 0..na {
                    reward[[h, s, a]] = 1.0 / (floor + mixture_table.d[[h, s, a]]);
                }
            }
        }
        let (direction, _) = backward_induction(handle.kernels.p_hat.view(), reward.view());
        let d_dir = match scope {
            CoverageScope::AllSteps => (*handle.eval(&direction)?).clone(),
            CoverageScope::Step(_) => handle.eval_through(&direction, last)?,
        };
        let g = g_from_tables(&d_dir, &mixture_table, scope, floor);
        objective.push(log_barrier(&mixture_table, scope, floor));

        let stop = if g <= 2.0 * cells {
            Some(StopReason::Threshold)
        } else if iterations >= cap || g == 1.0 {
            Some(StopReason::Cap)
        } else {
            None
        };
        if let Some(stopped_by) = stop {
            return Ok(CoverageOutcome {
                mixture,
                trace: FwTrace { iterations, final_g: g, stopped_by, objective },
                mixture_table,
                last_direction: direction,
            });
        }

        let alpha = (g / cells - 1.0) / (g - 1.0);
        mixture_table.d *= 1.0 - alpha;
        mixture_table.d.scaled_add(alpha, &d_dir.d);
        mixture.step_towards(alpha, &direction);
        iterations += 1;
    }
}

/// Exploration mixture for step `h` (0-based): log-barrier Frank-Wolfe on the
/// step-`h` layer, using the kernels of steps `0..h`.
pub fn compute_step_exploration_policy(
    handle: &OccupancyHandle,
    h: usize,
    k_on: usize,
    cap: Option<usize>,
) -> Result<(PolicyMixture, FwTrace)> {
    let out = coverage_frank_wolfe(handle, CoverageScope::Step(h), k_on, cap)?;
    Ok((out.mixture, out.trace))
}

/// Sample `n` episodes truncated right after `s_{h+1}` and install the
/// thresholded kernel for step `h` (0-based) using the handle's `ξ`.
pub fn fit_step_kernel<R: Rng + ?Sized>(
    env: &TabularMdp,
    handle: &mut OccupancyHandle,
    mixture: &PolicyMixture,
    h: usize,
    n: usize,
    rng: &mut R,
) -> Result<()> {
    let (horizon, ns, na) = env.dims();
    if n == 0 {
        return invalid("need at least one episode to fit a kernel");
    }
    if h + 1 >= horizon {
        return invalid(format!("no transition out of step {h} inside horizon {horizon}"));
    }
    let mut transitions = Array3::<u64>::zeros((ns, na, ns));
    for _ in 0..n {
        let t = sample_trajectory(env, mixture, rng, Some(h + 2), Provenance::Prepare(h + 1))?;
        transitions[[t.states()[h], t.actions()[h], t.states()[h + 1]]] += 1;
    }
    handle.fit_step(h, &transitions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Params {
    /// Episode budget for this stage; `N = ⌊budget / H⌋` per step.
    pub k_on_prepare: usize,
    /// Online budget that sets the coverage floor `1/(K^on H)`.
    pub k_on: usize,
    pub threshold_xi: f64,
    pub step_cap: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub handle: OccupancyHandle,
    pub step_mixtures: Vec<PolicyMixture>,
    pub step_traces: Vec<FwTrace>,
    /// Episodes per step.
    pub n_per_step: usize,
    pub episodes_used: usize,
}

/// Stage 1: `N` initial-state episodes for `d̂_1`, then for each step
/// `h < H−1` an exploration mixture and `N` episodes to fit `P̂_h`.
/// Consumes `N·H` episodes.
pub fn run_stage1<R: Rng + ?Sized>(env: &TabularMdp, params: &Stage1Params, rng: &mut R) -> Result<Stage1Output> {
    let (horizon, ns, na) = env.dims();
    if params.k_on_prepare < horizon {
        return invalid(format!("stage-1 budget {} is smaller than the horizon {horizon}", params.k_on_prepare));
    }
    let n = params.k_on_prepare / horizon;
    let d1_hat = estimate_initial_occupancy(env, n, rng)?;
    let mut handle = OccupancyHandle::new(d1_hat, EmpiricalKernel::new(horizon, ns, na, params.threshold_xi))?;
    let mut step_mixtures = Vec::with_capacity(horizon.saturating_sub(1));
    let mut step_traces = Vec::with_capacity(horizon.saturating_sub(1));
    for h in 0..horizon.saturating_sub(1) {
        let (mixture, trace) = compute_step_exploration_policy(&handle, h, params.k_on, params.step_cap)?;
        fit_step_kernel(env, &mut handle, &mixture, h, n, rng)?;
        log::debug!("stage 1 step {h}: {} FW iterations, g = {:.3}", trace.iterations, trace.final_g);
        step_mixtures.push(mixture);
        step_traces.push(trace);
    }
    Ok(Stage1Output { handle, step_mixtures, step_traces, n_per_step: n, episodes_used: n * horizon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::random_mdp;
    use crate::mdp::{exact_occupancy, StochasticPolicy};
    use crate::seeding::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    fn fitted_handle(seed: u64, s: usize, a: usize, h: usize, budget: usize) -> (TabularMdp, OccupancyHandle) {
        let mut rng = rng_from_seed(seed);
        let mdp = random_mdp(&mut rng, s, a, h);
        let params = Stage1Params { k_on_prepare: budget, k_on: 3 * budget, threshold_xi: 2.0, step_cap: None };
        let out = run_stage1(&mdp, &params, &mut rng).unwrap();
        (mdp, out.handle)
    }

    #[test]
    fn point_mass_initial_distribution_is_exact() {
        let mut rng = rng_from_seed(1);
        let mdp = random_mdp(&mut rng, 3, 2, 2);
        let mdp = TabularMdp::new(mdp.kernel().clone(), mdp.reward().clone(), arr1(&[0.0, 1.0, 0.0])).unwrap();
        let d1 = estimate_initial_occupancy(&mdp, 500, &mut rng).unwrap();
        assert_eq!(d1.to_vec(), vec![0.0, 1.0, 0.0]);
        let single = estimate_initial_occupancy(&random_mdp(&mut rng, 4, 2, 2), 1, &mut rng).unwrap();
        assert_eq!(single.iter().filter(|&&x| x == 1.0).count(), 1);
        assert!(estimate_initial_occupancy(&mdp, 0, &mut rng).is_err());
    }

    #[test]
    fn exact_surrogate_matches_exact_occupancy() {
        let mut rng = rng_from_seed(2);
        let mdp = random_mdp(&mut rng, 3, 2, 4);
        let handle = OccupancyHandle::exact_surrogate(&mdp);
        let pi = StochasticPolicy::uniform(4, 3, 2);
        let est = handle.eval(&pi).unwrap();
        let exact = exact_occupancy(&mdp, &pi).unwrap();
        assert!(est.sup_distance(&exact) < 1e-9);
    }

    #[test]
    fn thresholded_rows_kill_later_layers() {
        let (_, handle) = fitted_handle(3, 3, 2, 3, 300);
        let dead = handle.with_threshold(1e12);
        let occ = dead.eval(&StochasticPolicy::uniform(3, 3, 2)).unwrap();
        assert_abs_diff_eq!(occ.layer_mass(0), 1.0, epsilon = 1e-12);
        assert_eq!(occ.layer_mass(1), 0.0);
        assert_eq!(occ.layer_mass(2), 0.0);
    }

    #[test]
    fn unfitted_handle_is_a_state_error() {
        let handle = OccupancyHandle::new(arr1(&[1.0, 0.0]), EmpiricalKernel::new(3, 2, 2, 1.0)).unwrap();
        let pi = DeterministicPolicy::first_action(3, 2, 2);
        assert!(matches!(handle.eval(&pi), Err(Error::State(_))));
        assert!(handle.eval_through(&pi, 0).is_ok());
    }

    #[test]
    fn kernel_rows_respect_threshold() {
        let (_, handle) = fitted_handle(4, 3, 2, 3, 600);
        let k = handle.kernels();
        for h in 0..2 {
            for s in 0..3 {
                for a in 0..2 {
                    let row: f64 = k.p_hat().slice(s![h, s, a, ..]).sum();
                    if k.counts()[[h, s, a]] as f64 > k.threshold_xi() {
                        assert_abs_diff_eq!(row, 1.0, epsilon = 1e-9);
                    } else {
                        assert_eq!(row, 0.0);
                    }
                }
            }
            assert_eq!(k.counts().slice(s![h, .., ..]).sum(), 200);
        }
    }

    #[test]
    fn xi_above_sample_count_zeroes_kernel() {
        let mut rng = rng_from_seed(5);
        let mdp = random_mdp(&mut rng, 3, 2, 2);
        let mut handle = OccupancyHandle::new(mdp.init_dist().clone(), EmpiricalKernel::new(2, 3, 2, 50.0)).unwrap();
        let mix = PolicyMixture::point_mass(DeterministicPolicy::first_action(2, 3, 2));
        fit_step_kernel(&mdp, &mut handle, &mix, 0, 50, &mut rng).unwrap();
        assert!(handle.kernels().p_hat().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn g_is_cell_count_at_point_mass() {
        let (_, handle) = fitted_handle(6, 3, 2, 3, 300);
        let pi = DeterministicPolicy::constant(3, 3, 2, 1).unwrap();
        let mix = PolicyMixture::point_mass(pi.clone());
        assert_abs_diff_eq!(g_objective(&handle, &pi, &mix, CoverageScope::Step(1), 100).unwrap(), 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g_objective(&handle, &pi, &mix, CoverageScope::AllSteps, 100).unwrap(), 18.0, epsilon = 1e-12);
    }

    #[test]
    fn stage1_budget_accounting() {
        let mut rng = rng_from_seed(7);
        let mdp = random_mdp(&mut rng, 2, 2, 1);
        let params = Stage1Params { k_on_prepare: 10, k_on: 30, threshold_xi: 1.0, step_cap: None };
        let out = run_stage1(&mdp, &params, &mut rng).unwrap();
        assert_eq!(out.episodes_used, 10);
        assert!(out.step_traces.is_empty());
        let occ = out.handle.eval(&DeterministicPolicy::first_action(1, 2, 2)).unwrap();
        assert_abs_diff_eq!(occ.layer_mass(0), 1.0, epsilon = 1e-12);

        let mdp = random_mdp(&mut rng, 3, 2, 3);
        let params = Stage1Params { k_on_prepare: 3, k_on: 9, threshold_xi: 1.0, step_cap: None };
        let out = run_stage1(&mdp, &params, &mut rng).unwrap();
        assert_eq!(out.n_per_step, 1);
        assert!(out.handle.is_fully_fitted());
        let bad = Stage1Params { k_on_prepare: 2, ..params };
        assert!(run_stage1(&mdp, &bad, &mut rng).is_err());
    }

    #[test]
    fn handle_json_round_trip() {
        let (_, handle) = fitted_handle(8, 3, 2, 3, 300);
        let text = serde_json::to_string(&handle).unwrap();
        let back: OccupancyHandle = serde_json::from_str(&text).unwrap();
        assert_eq!(back.kernels(), handle.kernels());
        assert_eq!(back.d1_hat(), handle.d1_hat());
    }
}
