//! Episodic finite-horizon MDPs: representation, exact dynamic programming,
//! exact occupancy recursion and seeded trajectory sampling.
//!
//! Indices are 0-based internally. Step `h` ranges over `0..H`, so the
//! "first step" of the usual 1-based notation is `h = 0` here. External file
//! formats convert to 1-based indices at the boundary.

use std::fmt;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Provenance, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::serde_util::{arr2, arr3, arr4, vec2, vec3, vec4};
use crate::PROB_TOL;

fn check_prob_row<'a>(row: impl IntoIterator<Item = &'a f64>, what: impl fmt::Display) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return invalid(format!("{what}: entry {p} is not a probability"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return invalid(format!("{what}: row sums to {sum}, expected 1"));
    }
    Ok(())
}

/// Episodic MDP with dense, step-dependent kernel and rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// `kernel[[h, s, a, s']]`
    kernel: Array4<f64>,
    /// `reward[[h, s, a]]`, in `[0, 1]`.
    reward: Array3<f64>,
    init_dist: Array1<f64>,
}

impl TabularMdp {
    /// Build and validate an MDP. Dimensions are read off the kernel `[H, S, A, S]`.
    pub fn new(kernel: Array4<f64>, reward: Array3<f64>, init_dist: Array1<f64>) -> Result<Self> {
        let (h, s, a, s2) = kernel.dim();
        if h == 0 || s == 0 || a == 0 {
            return invalid("S, A and H must all be positive");
        }
        if s2 != s {
            return invalid(format!("kernel next-state axis has {s2} entries, expected {s}"));
        }
        if reward.dim() != (h, s, a) {
            return invalid(format!("reward has shape {:?}, expected {:?}", reward.dim(), (h, s, a)));
        }
        if init_dist.len() != s {
            return invalid(format!("initial distribution has {} entries, expected {s}", init_dist.len()));
        }
        for hh in 0..h {
            for ss in 0..s {
                for aa in 0..a {
                    let row = kernel.slice(ndarray::s![hh, ss, aa, ..]);
                    check_prob_row(row.iter(), format_args!("P[h={hh}][s={ss}][a={aa}]"))?;
                    let r = reward[[hh, ss, aa]];
                    if !(0.0..=1.0).contains(&r) {
                        return invalid(format!("reward r[h={hh}][s={ss}][a={aa}] = {r} outside [0,1]"));
                    }
                }
            }
        }
        check_prob_row(init_dist.iter(), "rho")?;
        Ok(Self { num_states: s, num_actions: a, horizon: h, kernel, reward, init_dist })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn kernel(&self) -> &Array4<f64> {
        &self.kernel
    }

    pub fn reward(&self) -> &Array3<f64> {
        &self.reward
    }

    pub fn init_dist(&self) -> &Array1<f64> {
        &self.init_dist
    }

    /// `(H, S, A)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.horizon, self.num_states, self.num_actions)
    }

    /// Same dynamics, different reward table.
    pub fn with_reward(&self, reward: Array3<f64>) -> Result<Self> {
        Self::new(self.kernel.clone(), reward, self.init_dist.clone())
    }

    fn check_policy<P: Policy + ?Sized>(&self, policy: &P) -> Result<()> {
        if policy.dims() != self.dims() {
            return invalid(format!(
                "policy dimensions (H,S,A) = {:?} do not match MDP {:?}",
                policy.dims(),
                self.dims()
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MdpDocument {
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "A")]
    a: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "P")]
    p: Vec<Vec<Vec<Vec<f64>>>>,
    r: Vec<Vec<Vec<f64>>>,
    rho: Vec<f64>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let kernel = arr4(&doc.p, "P")?;
        let reward = arr3(&doc.r, "r")?;
        if kernel.dim() != (doc.h, doc.s, doc.a, doc.s) {
            return invalid(format!(
                "P has shape {:?}, header says H={}, S={}, A={}",
                kernel.dim(),
                doc.h,
                doc.s,
                doc.a
            ));
        }
        TabularMdp::new(kernel, reward, Array1::from(doc.rho))
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        MdpDocument {
            s: m.num_states,
            a: m.num_actions,
            h: m.horizon,
            p: vec4(&m.kernel),
            r: vec3(&m.reward),
            rho: m.init_dist.to_vec(),
        }
    }
}

/// Canonical identity of a policy table, used as a memo key.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PolicyFingerprint(Vec<u64>);

/// A (possibly randomised) Markov policy `π_h(a | s)`.
pub trait Policy: Send + Sync {
    /// `(H, S, A)`
    fn dims(&self) -> (usize, usize, usize);
    fn action_prob(&self, h: usize, s: usize, a: usize) -> f64;
    fn fingerprint(&self) -> PolicyFingerprint;
}

/// Deterministic Markov policy: one action per `(h, s)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PolicyDocument", into = "PolicyDocument")]
pub struct DeterministicPolicy {
    actions: Array2<usize>,
    num_actions: usize,
}

impl DeterministicPolicy {
    /// `actions[[h, s]]` must be `< num_actions`.
    pub fn new(actions: Array2<usize>, num_actions: usize) -> Result<Self> {
        if num_actions == 0 {
            return invalid("policy needs at least one action");
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= num_actions) {
            return invalid(format!("action index {bad} out of range for A={num_actions}"));
        }
        Ok(Self { actions, num_actions })
    }

    /// Every `(h, s)` plays `action`.
    pub fn constant(horizon: usize, num_states: usize, num_actions: usize, action: usize) -> Result<Self> {
        Self::new(Array2::from_elem((horizon, num_states), action), num_actions)
    }

    /// The all-first-action policy, used as the Frank-Wolfe starting atom.
    pub fn first_action(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self { actions: Array2::zeros((horizon, num_states)), num_actions }
    }

    pub fn action(&self, h: usize, s: usize) -> usize {
        self.actions[[h, s]]
    }

    pub fn actions(&self) -> &Array2<usize> {
        &self.actions
    }

    /// Enumerate all `A^(S*H)` deterministic policies, in lexicographic order of
    /// the flattened `(h, s)` table. Refuses to enumerate more than `limit`.
    pub fn enumerate(horizon: usize, num_states: usize, num_actions: usize, limit: usize) -> Result<Vec<Self>> {
        let cells = horizon * num_states;
        let count = (num_actions as f64).powi(cells as i32);
        if count > limit as f64 {
            return invalid(format!("{count} deterministic policies exceed the enumeration limit {limit}"));
        }
        let count = count as usize;
        let mut out = Vec::with_capacity(count);
        for mut code in 0..count {
            let mut actions = Array2::zeros((horizon, num_states));
            for cell in (0..cells).rev() {
                actions[[cell / num_states, cell % num_states]] = code % num_actions;
                code /= num_actions;
            }
            out.push(Self { actions, num_actions });
        }
        Ok(out)
    }
}

impl Policy for DeterministicPolicy {
    fn dims(&self) -> (usize, usize, usize) {
        let (h, s) = self.actions.dim();
        (h, s, self.num_actions)
    }

    fn action_prob(&self, h: usize, s: usize, a: usize) -> f64 {
        if self.actions[[h, s]] == a {
            1.0
        } else {
            0.0
        }
    }

    fn fingerprint(&self) -> PolicyFingerprint {
        let (h, s) = self.actions.dim();
        let mut key = Vec::with_capacity(h * s + 4);
        key.extend([0, h as u64, s as u64, self.num_actions as u64]);
        key.extend(self.actions.iter().map(|&a| a as u64));
        PolicyFingerprint(key)
    }
}

/// On-disk form of a deterministic policy; actions are 1-based.
#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "A")]
    a: usize,
    actions: Vec<Vec<usize>>,
}

impl TryFrom<PolicyDocument> for DeterministicPolicy {
    type Error = Error;

    fn try_from(doc: PolicyDocument) -> Result<Self> {
        let table = arr2(&doc.actions, "actions")?;
        if table.dim() != (doc.h, doc.s) {
            return invalid(format!("action table has shape {:?}, expected ({}, {})", table.dim(), doc.h, doc.s));
        }
        if table.iter().any(|&a| a == 0) {
            return invalid("policy file actions are 1-based; found 0");
        }
        DeterministicPolicy::new(table.mapv(|a| a - 1), doc.a)
    }
}

impl From<DeterministicPolicy> for PolicyDocument {
    fn from(p: DeterministicPolicy) -> Self {
        let (h, s) = p.actions.dim();
        PolicyDocument { h, s, a: p.num_actions, actions: vec2(&p.actions.mapv(|a| a + 1)) }
    }
}

/// Randomised Markov policy `probs[[h, s, a]] = π_h(a | s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticPolicy {
    probs: Array3<f64>,
}

impl StochasticPolicy {
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        let (h, s, a) = probs.dim();
        if h == 0 || s == 0 || a == 0 {
            return invalid("policy dimensions must be positive");
        }
        for hh in 0..h {
            for ss in 0..s {
                check_prob_row(probs.slice(ndarray::s![hh, ss, ..]).iter(), format_args!("pi[h={hh}][s={ss}]"))?;
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self { probs: Array3::from_elem((horizon, num_states, num_actions), 1.0 / num_actions as f64) }
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }
}

impl From<&DeterministicPolicy> for StochasticPolicy {
    fn from(p: &DeterministicPolicy) -> Self {
        let (h, s, a) = p.dims();
        Self { probs: Array3::from_shape_fn((h, s, a), |(hh, ss, aa)| p.action_prob(hh, ss, aa)) }
    }
}

impl Policy for StochasticPolicy {
    fn dims(&self) -> (usize, usize, usize) {
        self.probs.dim()
    }

    fn action_prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[[h, s, a]]
    }

    fn fingerprint(&self) -> PolicyFingerprint {
        let (h, s, a) = self.probs.dim();
        let mut key = Vec::with_capacity(h * s * a + 4);
        key.extend([1, h as u64, s as u64, a as u64]);
        key.extend(self.probs.iter().map(|p| p.to_bits()));
        PolicyFingerprint(key)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureAtom {
    pub weight: f64,
    pub policy: DeterministicPolicy,
}

/// Finitely supported distribution over deterministic policies. One atom is
/// drawn per episode and followed for the whole episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureAtom>", into = "Vec<MixtureAtom>")]
pub struct PolicyMixture {
    atoms: Vec<MixtureAtom>,
}

impl PolicyMixture {
    pub fn new(atoms: Vec<MixtureAtom>) -> Result<Self> {
        let Some(first) = atoms.first() else {
            return invalid("policy mixture must have at least one atom");
        };
        let dims = first.policy.dims();
        let mut total = 0.0;
        for atom in &atoms {
            if !(atom.weight >= 0.0) || !atom.weight.is_finite() {
                return invalid(format!("mixture weight {} is negative or not finite", atom.weight));
            }
            if atom.policy.dims() != dims {
                return invalid("mixture atoms have inconsistent dimensions");
            }
            total += atom.weight;
        }
        if (total - 1.0).abs() > PROB_TOL {
            return invalid(format!("mixture weights sum to {total}, expected 1"));
        }
        Ok(Self { atoms })
    }

    pub fn point_mass(policy: DeterministicPolicy) -> Self {
        Self { atoms: vec![MixtureAtom { weight: 1.0, policy }] }
    }

    pub fn atoms(&self) -> &[MixtureAtom] {
        &self.atoms
    }

    pub fn support_size(&self) -> usize {
        self.atoms.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.atoms[0].policy.dims()
    }

    /// Frank-Wolfe move `(1 - alpha) * self + alpha * δ_policy`. An atom equal
    /// to `policy` absorbs the new mass instead of being duplicated.
    pub fn step_towards(&mut self, alpha: f64, policy: &DeterministicPolicy) {
        for atom in &mut self.atoms {
            atom.weight *= 1.0 - alpha;
        }
        match self.atoms.iter_mut().find(|atom| atom.policy == *policy) {
            Some(atom) => atom.weight += alpha,
            None => self.atoms.push(MixtureAtom { weight: alpha, policy: policy.clone() }),
        }
    }

    /// Uniform average of several mixtures, merging identical atoms.
    pub fn average(mixtures: &[PolicyMixture]) -> Result<Self> {
        if mixtures.is_empty() {
            return invalid("cannot average zero mixtures");
        }
        let scale = 1.0 / mixtures.len() as f64;
        let mut atoms: Vec<MixtureAtom> = Vec::new();
        for mix in mixtures {
            for atom in &mix.atoms {
                let w = atom.weight * scale;
                match atoms.iter_mut().find(|a| a.policy == atom.policy) {
                    Some(existing) => existing.weight += w,
                    None => atoms.push(MixtureAtom { weight: w, policy: atom.policy.clone() }),
                }
            }
        }
        Self::new(atoms)
    }

    /// Draw one atom by weight.
    pub fn sample_atom<R: Rng + ?Sized>(&self, rng: &mut R) -> &DeterministicPolicy {
        let idx = sample_index(self.atoms.iter().map(|a| a.weight), rng.random::<f64>());
        &self.atoms[idx].policy
    }
}

impl TryFrom<Vec<MixtureAtom>> for PolicyMixture {
    type Error = Error;

    fn try_from(atoms: Vec<MixtureAtom>) -> Result<Self> {
        Self::new(atoms)
    }
}

impl From<PolicyMixture> for Vec<MixtureAtom> {
    fn from(m: PolicyMixture) -> Self {
        m.atoms
    }
}

/// Inverse-CDF draw from (possibly unnormalised by roundoff) weights. Falls back
/// to the last positive entry when `u` lands past the accumulated mass.
pub(crate) fn sample_index(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// State-action occupancy `d[[h, s, a]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyTable {
    pub d: Array3<f64>,
}

impl OccupancyTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self { d: Array3::zeros((horizon, num_states, num_actions)) }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.d.dim()
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.d[[h, s, a]]
    }

    /// Total mass at step `h`.
    pub fn layer_mass(&self, h: usize) -> f64 {
        self.d.index_axis(ndarray::Axis(0), h).sum()
    }

    /// Largest absolute entrywise difference.
    pub fn sup_distance(&self, other: &OccupancyTable) -> f64 {
        self.d
            .iter()
            .zip(other.d.iter())
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }
}

impl Serialize for OccupancyTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        vec3(&self.d).serialize(s)
    }
}

impl<'de> Deserialize<'de> for OccupancyTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        arr3(&v, "occupancy").map(|d| Self { d }).map_err(serde::de::Error::custom)
    }
}

/// Forward recursion `d_{h+1}(s') = Σ_{s,a} d_h(s,a) P_h(s'|s,a)`, scaled by `π_{h+1}(a'|s')`.
pub fn exact_occupancy<P: Policy + ?Sized>(mdp: &TabularMdp, policy: &P) -> Result<OccupancyTable> {
    mdp.check_policy(policy)?;
    let (horizon, ns, na) = mdp.dims();
    let mut occ = OccupancyTable::zeros(horizon, ns, na);
    let mut state_mass = mdp.init_dist.clone();
    for h in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                occ.d[[h, s, a]] = state_mass[s] * policy.action_prob(h, s, a);
            }
        }
        if h + 1 < horizon {
            state_mass.fill(0.0);
            for s in 0..ns {
                for a in 0..na {
                    let w = occ.d[[h, s, a]];
                    if w == 0.0 {
                        continue;
                    }
                    for s2 in 0..ns {
                        state_mass[s2] += w * mdp.kernel[[h, s, a, s2]];
                    }
                }
            }
        }
    }
    Ok(occ)
}

/// Weight-averaged exact occupancy of a mixture.
pub fn mixture_occupancy(mdp: &TabularMdp, mixture: &PolicyMixture) -> Result<OccupancyTable> {
    let (h, s, a) = mdp.dims();
    let mut out = OccupancyTable::zeros(h, s, a);
    for atom in mixture.atoms() {
        let occ = exact_occupancy(mdp, &atom.policy)?;
        out.d.scaled_add(atom.weight, &occ.d);
    }
    Ok(out)
}

/// Result of exact policy evaluation.
#[derive(Clone, Debug)]
pub struct PolicyValue {
    /// `⟨ρ, V_1⟩`
    pub v_init: f64,
    /// `v[[h, s]]` for `h` in `0..=H`; the last row is zero.
    pub v: Array2<f64>,
    pub q: Array3<f64>,
}

pub fn policy_value<P: Policy + ?Sized>(mdp: &TabularMdp, policy: &P) -> Result<PolicyValue> {
    mdp.check_policy(policy)?;
    let (horizon, ns, na) = mdp.dims();
    let mut v = Array2::<f64>::zeros((horizon + 1, ns));
    let mut q = Array3::<f64>::zeros((horizon, ns, na));
    for h in (0..horizon).rev() {
        for s in 0..ns {
            let mut vs = 0.0;
            for a in 0..na {
                let mut cont = 0.0;
                for s2 in 0..ns {
                    cont += mdp.kernel[[h, s, a, s2]] * v[[h + 1, s2]];
                }
                let qv = mdp.reward[[h, s, a]] + cont;
                q[[h, s, a]] = qv;
                vs += policy.action_prob(h, s, a) * qv;
            }
            v[[h, s]] = vs;
        }
    }
    let v_init = mdp.init_dist.iter().zip(v.row(0).iter()).map(|(p, x)| p * x).sum();
    Ok(PolicyValue { v_init, v, q })
}

/// Relative margin below which two action values count as tied.
pub const TIE_TOL: f64 = 1e-12;

/// `candidate` is strictly better than `incumbent` beyond roundoff; used for
/// every argmax so ties consistently go to the lowest action index.
pub fn beats(candidate: f64, incumbent: f64) -> bool {
    if incumbent == f64::NEG_INFINITY {
        return candidate > incumbent;
    }
    candidate > incumbent + TIE_TOL * incumbent.abs().max(1.0)
}

/// Backward induction on a kernel whose rows may sum to less than one; the
/// missing mass flows to an implicit absorbing zero-value state. With a
/// stochastic kernel this is ordinary finite-horizon DP.
///
/// Returns the greedy policy (ties to the lowest action index) and `V[[h, s]]`
/// for `h` in `0..=H`.
pub fn backward_induction(kernel: ArrayView4<f64>, reward: ArrayView3<f64>) -> (DeterministicPolicy, Array2<f64>) {
    let (horizon, ns, na) = reward.dim();
    let mut v = Array2::<f64>::zeros((horizon + 1, ns));
    let mut actions = Array2::<usize>::zeros((horizon, ns));
    for h in (0..horizon).rev() {
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..na {
                let mut qv = reward[[h, s, a]];
                if h + 1 < horizon {
                    for s2 in 0..ns {
                        qv += kernel[[h, s, a, s2]] * v[[h + 1, s2]];
                    }
                }
                if beats(qv, best) {
                    best = qv;
                    best_a = a;
                }
            }
            v[[h, s]] = best;
            actions[[h, s]] = best_a;
        }
    }
    (DeterministicPolicy { actions, num_actions: na }, v)
}

#[derive(Clone, Debug)]
pub struct OptimalSolution {
    pub policy: DeterministicPolicy,
    /// `v_star[[h, s]]`, `h` in `0..=H`.
    pub v_star: Array2<f64>,
    /// `⟨ρ, V*_1⟩`
    pub v_init: f64,
}

pub fn optimal_policy(mdp: &TabularMdp) -> OptimalSolution {
    let (policy, v_star) = backward_induction(mdp.kernel.view(), mdp.reward.view());
    let v_init = mdp.init_dist.iter().zip(v_star.row(0).iter()).map(|(p, x)| p * x).sum();
    OptimalSolution { policy, v_star, v_init }
}

/// An MDP over `S + 1` states whose last state is absorbing with zero reward.
#[derive(Clone, Debug)]
pub struct AugmentedMdp {
    /// `[H, S+1, A, S+1]`
    pub kernel: Array4<f64>,
    /// `[H, S+1, A]`
    pub reward: Array3<f64>,
}

impl AugmentedMdp {
    /// Lift a sub-stochastic kernel `[H, S, A, S]` and reward `[H, S, A]`: each
    /// row's deficit goes to the extra state, which then stays put.
    pub fn from_substochastic(kernel: ArrayView4<f64>, reward: ArrayView3<f64>) -> Self {
        let (horizon, ns, na) = reward.dim();
        let aug = ns;
        let mut k = Array4::<f64>::zeros((horizon, ns + 1, na, ns + 1));
        let mut r = Array3::<f64>::zeros((horizon, ns + 1, na));
        for h in 0..horizon {
            for a in 0..na {
                k[[h, aug, a, aug]] = 1.0;
                for s in 0..ns {
                    let mut mass = 0.0;
                    for s2 in 0..ns {
                        let p = kernel[[h, s, a, s2]];
                        k[[h, s, a, s2]] = p;
                        mass += p;
                    }
                    k[[h, s, a, aug]] = (1.0 - mass).max(0.0);
                    r[[h, s, a]] = reward[[h, s, a]];
                }
            }
        }
        Self { kernel: k, reward: r }
    }
}

/// Optimal deterministic policy of an augmented MDP, restricted to the
/// original states.
pub fn solve_augmented_mdp(mdp: &AugmentedMdp) -> Result<DeterministicPolicy> {
    let (horizon, ns1, na, ns1b) = mdp.kernel.dim();
    if ns1 < 2 || ns1b != ns1 || mdp.reward.dim() != (horizon, ns1, na) {
        return invalid("augmented kernel/reward shapes are inconsistent");
    }
    let aug = ns1 - 1;
    for h in 0..horizon {
        for a in 0..na {
            for s in 0..ns1 {
                check_prob_row(
                    mdp.kernel.slice(ndarray::s![h, s, a, ..]).iter(),
                    format_args!("augmented P[h={h}][s={s}][a={a}]"),
                )?;
            }
            if mdp.kernel[[h, aug, a, aug]] != 1.0 || mdp.reward[[h, aug, a]] != 0.0 {
                return invalid(format!("augmented state is not absorbing with zero reward at h={h}, a={a}"));
            }
        }
    }
    let (full, _) = backward_induction(mdp.kernel.view(), mdp.reward.view());
    let actions = full.actions.slice(ndarray::s![.., 0..aug]).to_owned();
    DeterministicPolicy::new(actions, na)
}

/// Roll one episode: an atom is drawn once, then `s_1 ~ ρ`, `a_h = π_h(s_h)`,
/// `s_{h+1} ~ P_h(·|s_h, a_h)`. The trajectory holds `min(H, truncate_at)` steps.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    mixture: &PolicyMixture,
    rng: &mut R,
    truncate_at: Option<usize>,
    provenance: Provenance,
) -> Result<Trajectory> {
    if mixture.atoms().is_empty() {
        return invalid("cannot sample from an empty mixture");
    }
    mdp.check_policy(&mixture.atoms()[0].policy)?;
    let len = truncate_at.map_or(mdp.horizon, |t| t.min(mdp.horizon));
    if len == 0 {
        return invalid("trajectory length must be at least 1");
    }
    let policy = mixture.sample_atom(rng);
    let mut states = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    let mut s = sample_index(mdp.init_dist.iter().copied(), rng.random::<f64>());
    for h in 0..len {
        let a = policy.action(h, s);
        states.push(s);
        actions.push(a);
        if h + 1 < len {
            let row = mdp.kernel.slice(ndarray::s![h, s, a, ..]);
            s = sample_index(row.iter().copied(), rng.random::<f64>());
        }
    }
    Trajectory::new(states, actions, provenance)
}
