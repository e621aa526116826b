//! Instance generators: random MDPs and a partial-coverage family where the
//! behavior policy never touches part of the optimal policy's support.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{
    exact_occupancy, mixture_occupancy, optimal_policy, DeterministicPolicy, MixtureAtom, PolicyMixture, TabularMdp,
};
use crate::offline_density::{concentrability_grid, ConcentrabilityReport};
use crate::seeding::rng_from_seed;

/// Flat-Dirichlet draw: normalised independent unit exponentials.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.into_iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

/// Random kernel rows and initial distribution (flat Dirichlet), rewards uniform on `[0, 1)`.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize, horizon: usize) -> TabularMdp {
    let mut kernel = Array4::zeros((horizon, num_states, num_actions, num_states));
    for h in 0..horizon {
        for s in 0..num_states {
            for a in 0..num_actions {
                for (s2, p) in random_simplex(rng, num_states).into_iter().enumerate() {
                    kernel[[h, s, a, s2]] = p;
                }
            }
        }
    }
    let reward = Array3::from_shape_simple_fn((horizon, num_states, num_actions), || rng.random::<f64>());
    let init = Array1::from(random_simplex(rng, num_states));
    TabularMdp::new(kernel, reward, init).expect("generated MDP is valid")
}

pub fn random_deterministic_policy<R: Rng + ?Sized>(
    rng: &mut R,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
) -> DeterministicPolicy {
    let actions = Array2::from_shape_simple_fn((horizon, num_states), || rng.random_range(0..num_actions));
    DeterministicPolicy::new(actions, num_actions).expect("actions are in range")
}

/// Mixture from weighted policies; identical policies are merged and
/// zero-weight entries dropped.
pub fn weighted_mixture(entries: Vec<(f64, DeterministicPolicy)>) -> Result<PolicyMixture> {
    let mut atoms: Vec<MixtureAtom> = Vec::new();
    for (weight, policy) in entries.into_iter().filter(|(w, _)| *w > 0.0) {
        match atoms.iter_mut().find(|a| a.policy == policy) {
            Some(a) => a.weight += weight,
            None => atoms.push(MixtureAtom { weight, policy }),
        }
    }
    PolicyMixture::new(atoms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Random,
    /// The last state is an absorbing branch entered with probability
    /// `sigma_target` at step 1; only its action 2 pays reward (1 per step)
    /// and the behavior mixture never plays it. Elsewhere the behavior plays
    /// the optimal action with probability `1/mismatch_c`.
    PartialCoverage { sigma_target: f64, mismatch_c: f64 },
}

/// Offline behavior for the random family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSpec {
    /// Point mass on the optimal policy.
    #[default]
    Expert,
    /// Uniform mixture of random deterministic policies.
    RandomPolicies { atoms: usize },
    /// Optimal policy with weight `expert_weight`, the rest split over random policies.
    ExpertMix { expert_weight: f64, atoms: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    #[serde(flatten)]
    pub family: Family,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Ignored by the partial-coverage family, which fixes its own behavior.
    #[serde(default)]
    pub behavior: BehaviorSpec,
    #[serde(default)]
    pub seed: u64,
}

impl InstanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return invalid("S, A and H must be positive");
        }
        match self.family {
            Family::Random => match self.behavior {
                BehaviorSpec::Expert => {}
                BehaviorSpec::RandomPolicies { atoms } if atoms >= 1 => {}
                BehaviorSpec::ExpertMix { expert_weight, atoms } if atoms >= 1 && (0.0..=1.0).contains(&expert_weight) => {}
                _ => return invalid(format!("invalid behavior description {:?}", self.behavior)),
            },
            Family::PartialCoverage { sigma_target, mismatch_c } => {
                if self.num_states < 2 || self.num_actions < 2 {
                    return invalid("partial-coverage family needs S >= 2 and A >= 2");
                }
                if !(0.0..=1.0).contains(&sigma_target) {
                    return invalid(format!("sigma_target must lie in [0, 1], got {sigma_target}"));
                }
                if sigma_target * self.horizon as f64 > 1.0 + 1e-12 {
                    return invalid(format!(
                        "sigma_target * H = {} exceeds 1; the uncovered branch cannot carry that much mass",
                        sigma_target * self.horizon as f64
                    ));
                }
                if !(mismatch_c >= 1.0) || !mismatch_c.is_finite() {
                    return invalid(format!("mismatch_c must be a finite number >= 1, got {mismatch_c}"));
                }
            }
        }
        Ok(())
    }

    /// JSON or TOML, chosen by extension (`.toml` is TOML, anything else JSON).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let spec: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?,
            _ => serde_json::from_str(&text)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Generate from the spec's own seed.
    pub fn generate(&self) -> Result<GeneratedInstance> {
        gen_instance(self, &mut rng_from_seed(self.seed))
    }

    /// `σ` values at which the instance metadata reports `C*(σ)`.
    pub fn sigma_grid(&self) -> Vec<f64> {
        let mut grid = match self.family {
            Family::Random => vec![0.0, 0.1, 0.2, 0.5, 1.0],
            Family::PartialCoverage { sigma_target: s, .. } => vec![0.0, s / 2.0, s, (2.0 * s).min(1.0), 1.0],
        };
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratedInstance {
    pub mdp: TabularMdp,
    pub behavior: PolicyMixture,
    pub optimal: DeterministicPolicy,
    pub meta: Vec<ConcentrabilityReport>,
    /// Optimal value collected in cells the behavior never visits.
    pub uncovered_reward_mass: f64,
}

pub fn gen_instance<R: Rng + ?Sized>(spec: &InstanceSpec, rng: &mut R) -> Result<GeneratedInstance> {
    spec.validate()?;
    let (ns, na, horizon) = (spec.num_states, spec.num_actions, spec.horizon);
    let (mdp, optimal, behavior, uncovered) = match spec.family {
        Family::Random => {
            let mdp = random_mdp(rng, ns, na, horizon);
            let optimal = optimal_policy(&mdp).policy;
            let behavior = match spec.behavior {
                BehaviorSpec::Expert => PolicyMixture::point_mass(optimal.clone()),
                BehaviorSpec::RandomPolicies { atoms } => {
                    let w = 1.0 / atoms as f64;
                    let entries = (0..atoms)
                        .map(|_| (w, random_deterministic_policy(rng, horizon, ns, na)))
                        .collect();
                    weighted_mixture(entries)?
                }
                BehaviorSpec::ExpertMix { expert_weight, atoms } => {
                    let w = (1.0 - expert_weight) / atoms as f64;
                    let mut entries = vec![(expert_weight, optimal.clone())];
                    entries.extend((0..atoms).map(|_| (w, random_deterministic_policy(rng, horizon, ns, na))));
                    weighted_mixture(entries)?
                }
            };
            (mdp, optimal, behavior, 0.0)
        }
        Family::PartialCoverage { sigma_target, mismatch_c } => {
            let mdp = partial_coverage_mdp(rng, ns, na, horizon, sigma_target);
            let optimal = optimal_policy(&mdp).policy;
            let hidden = ns - 1;
            let mut imitator = optimal.actions().clone();
            let mut anti = optimal.actions().mapv(|a| (a + 1) % na);
            for h in 0..horizon {
                if sigma_target > 0.0 {
                    imitator[[h, hidden]] = 0;
                }
                anti[[h, hidden]] = 0;
            }
            let imitator = DeterministicPolicy::new(imitator, na)?;
            let anti = DeterministicPolicy::new(anti, na)?;
            let behavior = weighted_mixture(vec![(1.0 / mismatch_c, imitator), (1.0 - 1.0 / mismatch_c, anti)])?;
            (mdp, optimal, behavior, sigma_target * horizon as f64)
        }
    };
    let d_star = exact_occupancy(&mdp, &optimal)?;
    let d_off = mixture_occupancy(&mdp, &behavior)?;
    let meta = concentrability_grid(&d_star, &d_off, &spec.sigma_grid())?;
    Ok(GeneratedInstance { mdp, behavior, optimal, meta, uncovered_reward_mass: uncovered })
}

/// States `0..S-1` form a random MDP among themselves carrying initial mass
/// `1 − σ`; state `S-1` is absorbing, starts with mass `σ` and pays 1 per step
/// for action index 1 only.
fn partial_coverage_mdp<R: Rng + ?Sized>(
    rng: &mut R,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    sigma: f64,
) -> TabularMdp {
    let hidden = num_states - 1;
    let mut kernel = Array4::zeros((horizon, num_states, num_actions, num_states));
    let mut reward = Array3::zeros((horizon, num_states, num_actions));
    for h in 0..horizon {
        for s in 0..hidden {
            for a in 0..num_actions {
                for (s2, p) in random_simplex(rng, hidden).into_iter().enumerate() {
                    kernel[[h, s, a, s2]] = p;
                }
                reward[[h, s, a]] = rng.random::<f64>();
            }
        }
        for a in 0..num_actions {
            kernel[[h, hidden, a, hidden]] = 1.0;
        }
        reward[[h, hidden, 1]] = 1.0;
    }
    let mut init = Array1::zeros(num_states);
    for (s, p) in random_simplex(rng, hidden).into_iter().enumerate() {
        init[s] = (1.0 - sigma) * p;
    }
    init[hidden] = sigma;
    TabularMdp::new(kernel, reward, init).expect("generated MDP is valid")
}
