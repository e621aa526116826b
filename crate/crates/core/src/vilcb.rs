//! Pessimistic model-based offline RL: two-fold subsampling followed by value
//! iteration with Bernstein-style lower confidence bounds.

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Provenance, TrajectoryDataset};
use crate::error::{invalid, Result};
use crate::mdp::{beats, DeterministicPolicy};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::serde_util::{arr2, arr3, vec2, vec3};

/// Trimming constant in `N^trim = N^aux − c·√(N^aux · ln(HS/δ))`.
pub const PAPER_TRIM_CONSTANT: f64 = 10.0;

/// One retained `(h, s, a, s')`; `next` is `None` at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub next: Option<usize>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrimmedDataset {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Transition>,
    /// `N^trim_h(s)`
    n_trim: Array2<u64>,
    /// Retained transitions per `(h, s, a)`.
    n_trim_sa: Array3<u64>,
    /// `N^main_h(s)`
    n_main: Array2<u64>,
    rng_seed: u64,
}

impl TrimmedDataset {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.horizon, self.num_states, self.num_actions)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn n_trim(&self) -> &Array2<u64> {
        &self.n_trim
    }

    pub fn n_trim_sa(&self) -> &Array3<u64> {
        &self.n_trim_sa
    }

    pub fn n_main(&self) -> &Array2<u64> {
        &self.n_main
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Writes `<stem>.csv` with one 1-based `(h, s, a, s')` row per transition
    /// and `<stem>.json` with the count tables.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
        for t in &self.transitions {
            w.serialize(TransitionRecord {
                h: t.h + 1,
                s: t.s + 1,
                a: t.a + 1,
                next: t.next.map(|x| x + 1),
                provenance: t.provenance.to_string(),
            })?;
        }
        w.flush()?;
        let sidecar = Sidecar {
            horizon: self.horizon,
            num_states: self.num_states,
            num_actions: self.num_actions,
            n_trim: vec2(&self.n_trim),
            n_trim_sa: vec3(&self.n_trim_sa),
            n_main: vec2(&self.n_main),
            rng_seed: self.rng_seed,
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let mut transitions = Vec::new();
        for rec in csv::Reader::from_path(stem.with_extension("csv"))?.deserialize() {
            let rec: TransitionRecord = rec?;
            if rec.h == 0 || rec.s == 0 || rec.a == 0 || rec.next == Some(0) {
                return invalid("transition indices are 1-based");
            }
            transitions.push(Transition {
                h: rec.h - 1,
                s: rec.s - 1,
                a: rec.a - 1,
                next: rec.next.map(|x| x - 1),
                provenance: rec.provenance.parse()?,
            });
        }
        let out = Self {
            horizon: sidecar.horizon,
            num_states: sidecar.num_states,
            num_actions: sidecar.num_actions,
            transitions,
            n_trim: arr2(&sidecar.n_trim, "n_trim")?,
            n_trim_sa: arr3(&sidecar.n_trim_sa, "n_trim_sa")?,
            n_main: arr2(&sidecar.n_main, "n_main")?,
            rng_seed: sidecar.rng_seed,
        };
        out.check()?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let (h, s, a) = self.dims();
        if self.n_trim.dim() != (h, s) || self.n_main.dim() != (h, s) || self.n_trim_sa.dim() != (h, s, a) {
            return invalid("trimmed dataset count tables have the wrong shape");
        }
        let mut sa = Array3::<u64>::zeros((h, s, a));
        for t in &self.transitions {
            if t.h >= h || t.s >= s || t.a >= a || t.next.is_some_and(|x| x >= s) {
                return invalid("transition index out of range");
            }
            sa[[t.h, t.s, t.a]] += 1;
        }
        if sa != self.n_trim_sa {
            return invalid("n_trim_sa does not match the transitions");
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TransitionRecord {
    h: usize,
    s: usize,
    a: usize,
    next: Option<usize>,
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    n_trim: Vec<Vec<u64>>,
    n_trim_sa: Vec<Vec<Vec<u64>>>,
    n_main: Vec<Vec<u64>>,
    rng_seed: u64,
}

/// `max(N − c·√(N · log_term), 0)`, rounded down.
pub fn trimmed_count(n_aux: u64, log_term: f64, c_trim: f64) -> u64 {
    let n = n_aux as f64;
    (n - c_trim * (n * log_term).sqrt()).max(0.0).floor() as u64
}

/// First half of the episodes is the main split, the rest auxiliary. For each
/// `(h, s)` keep `min(N^trim_h(s), N^main_h(s))` of main's step-`h` visits to
/// `s`, drawn without replacement.
pub fn two_fold_subsample<R: Rng + ?Sized>(
    dataset: &TrajectoryDataset,
    num_states: usize,
    num_actions: usize,
    delta: f64,
    c_trim: f64,
    rng: &mut R,
) -> Result<TrimmedDataset> {
    if dataset.len() < 2 {
        return invalid("two-fold subsampling needs at least two episodes");
    }
    if !(delta > 0.0 && delta < 1.0) || !(c_trim >= 0.0) {
        return invalid("delta must lie in (0, 1) and c_trim must be non-negative");
    }
    let horizon = dataset.horizon();
    let (main, aux) = dataset.episodes().split_at(dataset.len() / 2);
    let log_term = ((horizon * num_states) as f64 / delta).ln();

    let mut n_aux = Array2::<u64>::zeros((horizon, num_states));
    for t in aux {
        for (h, &s) in t.states().iter().enumerate() {
            if s >= num_states {
                return invalid(format!("state {s} out of range"));
            }
            n_aux[[h, s]] += 1;
        }
    }
    let mut visits: Vec<Vec<Vec<Transition>>> = vec![vec![Vec::new(); num_states]; horizon];
    for t in main {
        let (states, actions) = (t.states(), t.actions());
        for h in 0..t.len() {
            let (s, a) = (states[h], actions[h]);
            if s >= num_states || a >= num_actions {
                return invalid(format!("visit ({s}, {a}) out of range"));
            }
            let next = states.get(h + 1).copied();
            visits[h][s].push(Transition { h, s, a, next, provenance: t.provenance() });
        }
    }

    let rng_seed: u64 = rng.random();
    let mut n_trim = Array2::<u64>::zeros((horizon, num_states));
    let mut n_main = Array2::<u64>::zeros((horizon, num_states));
    let mut n_trim_sa = Array3::<u64>::zeros((horizon, num_states, num_actions));
    let mut transitions = Vec::new();
    for h in 0..horizon {
        for s in 0..num_states {
            let cell = &visits[h][s];
            n_main[[h, s]] = cell.len() as u64;
            n_trim[[h, s]] = trimmed_count(n_aux[[h, s]], log_term, c_trim);
            let keep = (n_trim[[h, s]] as usize).min(cell.len());
            if keep == 0 {
                continue;
            }
            let mut cell_rng = rng_from_seed(derive_seed(rng_seed, &[h as u64, s as u64]));
            let mut picked = rand::seq::index::sample(&mut cell_rng, cell.len(), keep).into_vec();
            picked.sort_unstable();
            for i in picked {
                let t = cell[i];
                n_trim_sa[[h, s, t.a]] += 1;
                transitions.push(t);
            }
        }
    }
    Ok(TrimmedDataset { horizon, num_states, num_actions, transitions, n_trim, n_trim_sa, n_main, rng_seed })
}

/// `P̂_h(s'|s,a)` from the retained transitions; rows without a successor
/// sample are uniform.
pub fn empirical_kernel_offline(trimmed: &TrimmedDataset) -> Array4<f64> {
    let (horizon, ns, na) = trimmed.dims();
    let mut counts = Array4::<f64>::zeros((horizon, ns, na, ns));
    for t in &trimmed.transitions {
        if let Some(next) = t.next {
            counts[[t.h, t.s, t.a, next]] += 1.0;
        }
    }
    for h in 0..horizon {
        for s in 0..ns {
            for a in 0..na {
                let mut row = counts.slice_mut(s![h, s, a, ..]);
                let n = row.sum();
                if n > 0.0 {
                    row /= n;
                } else {
                    row.fill(1.0 / ns as f64);
                }
            }
        }
    }
    counts
}

/// `min(√(c_b · L · Var / n) + c_b · H · L / n, H)`, and `H` when `n = 0`.
pub fn bernstein_bonus(n: u64, variance: f64, horizon: usize, c_b: f64, log_term: f64) -> Result<f64> {
    if variance < 0.0 || variance.is_nan() {
        return invalid(format!("variance must be non-negative, got {variance}"));
    }
    let h = horizon as f64;
    if n == 0 {
        return Ok(h);
    }
    let n = n as f64;
    Ok(((c_b * log_term * variance / n).sqrt() + c_b * h * log_term / n).min(h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PessimisticSolution {
    pub policy: DeterministicPolicy,
    /// `[H + 1, S]`, last row zero.
    pub v_hat: Array2<f64>,
    pub q_hat: Array3<f64>,
    pub bonuses: Array3<f64>,
}

/// Pessimistic value iteration on a given model: `Q̂_h = max(r_h + P̂_h V̂_{h+1} − b_h, 0)`.
pub fn vi_lcb_with_model(
    kernel: &Array4<f64>,
    counts: &Array3<u64>,
    reward: &Array3<f64>,
    c_b: f64,
    log_term: f64,
) -> Result<PessimisticSolution> {
    let (horizon, ns, na) = reward.dim();
    if kernel.dim() != (horizon, ns, na, ns) || counts.dim() != (horizon, ns, na) {
        return invalid("kernel, counts and reward have inconsistent shapes");
    }
    if reward.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return invalid("rewards must lie in [0, 1]");
    }
    let mut v_hat = Array2::<f64>::zeros((horizon + 1, ns));
    let mut q_hat = Array3::<f64>::zeros((horizon, ns, na));
    let mut bonuses = Array3::<f64>::zeros((horizon, ns, na));
    let mut actions = Array2::<usize>::zeros((horizon, ns));
    let hf = horizon as f64;
    for h in (0..horizon).rev() {
        for s in 0..ns {
            let mut best = 0;
            for a in 0..na {
                let (mut mean, mut second) = (0.0, 0.0);
                for s2 in 0..ns {
                    let p = kernel[[h, s, a, s2]];
                    let v = v_hat[[h + 1, s2]];
                    mean += p * v;
                    second += p * v * v;
                }
                let variance = (second - mean * mean).max(0.0);
                let b = bernstein_bonus(counts[[h, s, a]], variance, horizon, c_b, log_term)?;
                let q = (reward[[h, s, a]] + mean - b).max(0.0);
                assert!((0.0..=hf + 1e-9).contains(&q), "pessimistic Q out of range: {q}");
                bonuses[[h, s, a]] = b;
                q_hat[[h, s, a]] = q;
                if beats(q, q_hat[[h, s, best]]) {
                    best = a;
                }
            }
            actions[[h, s]] = best;
            v_hat[[h, s]] = q_hat[[h, s, best]];
        }
    }
    Ok(PessimisticSolution { policy: DeterministicPolicy::new(actions, na)?, v_hat, q_hat, bonuses })
}

/// VI-LCB on trimmed data with `log_term = ln(K_total / δ)`.
pub fn vi_lcb(
    trimmed: &TrimmedDataset,
    reward: &Array3<f64>,
    delta: f64,
    c_b: f64,
    k_total: usize,
) -> Result<PessimisticSolution> {
    if reward.dim() != trimmed.dims() {
        return invalid("reward shape does not match the dataset");
    }
    if !(delta > 0.0 && delta < 1.0) || k_total == 0 {
        return invalid("delta must lie in (0, 1) and K_total must be positive");
    }
    let log_term = (k_total as f64 / delta).ln();
    vi_lcb_with_model(&empirical_kernel_offline(trimmed), &trimmed.n_trim_sa, reward, c_b, log_term)
}
