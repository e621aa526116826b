//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 6 7`.

use std::time::Instant;

use hybrid_rl::config::HybridConfig;
use hybrid_rl::dataset::{sample_dataset, Provenance};
use hybrid_rl::explore::compute_mu_explore;
use hybrid_rl::imitate::run_imitation;
use hybrid_rl::instance::{gen_instance, random_deterministic_policy, random_mdp, random_simplex, BehaviorSpec, Family, InstanceSpec};
use hybrid_rl::mdp::{exact_occupancy, policy_value, solve_augmented_mdp, AugmentedMdp};
use hybrid_rl::occupancy::{coverage_floor, run_stage1, Stage1Params, StopReason};
use hybrid_rl::offline_density::{estimate_d_off, partial_concentrability, CutoffParams};
use hybrid_rl::pipeline::{hybrid_budget, run_hybrid, run_pure_offline, run_pure_online};
use hybrid_rl::seeding::rng_from_seed;
use hybrid_rl::vilcb::{two_fold_subsample, vi_lcb};
use hybrid_rl::{DeterministicPolicy, OccupancyTable};
use ndarray::{Array1, Array3, Array4};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Linear objective `Σ r·d^π` by forward recursion on an arbitrary kernel.
fn linear_value(kernel: &Array4<f64>, reward: &Array3<f64>, d1: &Array1<f64>, pi: &DeterministicPolicy) -> f64 {
    let (horizon, ns, _) = reward.dim();
    let mut mass = d1.clone();
    let mut total = 0.0;
    for h in 0..horizon {
        let mut next = Array1::zeros(ns);
        for s in 0..ns {
            let a = if s < pi.actions().ncols() { pi.action(h, s) } else { 0 };
            total += mass[s] * reward[[h, s, a]];
            for s2 in 0..ns {
                next[s2] += mass[s] * kernel[[h, s, a, s2]];
            }
        }
        mass = next;
    }
    total
}

fn c1_dp_oracle() -> Outcome {
    let (horizon, ns, na) = (2, 2, 2);
    let policies = DeterministicPolicy::enumerate(horizon, ns, na, 16).unwrap();
    let mut matches = 0;
    for seed in 0..50u64 {
        let mut rng = rng_from_seed(10_000 + seed);
        let mut kernel = Array4::zeros((horizon, ns, na, ns));
        for h in 0..horizon {
            for s in 0..ns {
                for a in 0..na {
                    let keep = rng.random_range(0.3..1.0);
                    for (s2, p) in random_simplex(&mut rng, ns).into_iter().enumerate() {
                        kernel[[h, s, a, s2]] = keep * p;
                    }
                }
            }
        }
        let floor = coverage_floor(100, horizon);
        let reward = Array3::from_shape_simple_fn((horizon, ns, na), || 1.0 / (floor + rng.random::<f64>()));
        let aug = AugmentedMdp::from_substochastic(kernel.view(), reward.view());
        let direction = solve_augmented_mdp(&aug).unwrap();

        let mut d1 = Array1::zeros(ns + 1);
        for (s, p) in random_simplex(&mut rng, ns).into_iter().enumerate() {
            d1[s] = p;
        }
        let mut best: Option<(f64, &DeterministicPolicy)> = None;
        for pi in &policies {
            let v = linear_value(&aug.kernel, &aug.reward, &d1, pi);
            if best.is_none_or(|(b, _)| v > b + 1e-12 * b.abs().max(1.0)) {
                best = Some((v, pi));
            }
        }
        if best.unwrap().1 == &direction {
            matches += 1;
        }
    }
    Outcome { pass: matches == 50, detail: format!("{matches}/50 instances match brute force") }
}

fn c2_occupancy_sandwich() -> Outcome {
    let (ns, na, horizon) = (4, 2, 3);
    let cfg = HybridConfig::default();
    let mut good = 0;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = rng_from_seed(20_000 + seed);
        let mdp = random_mdp(&mut rng, ns, na, horizon);
        let params = Stage1Params {
            k_on_prepare: 30_000,
            k_on: 90_000,
            threshold_xi: cfg.threshold_xi(horizon, ns, na),
            step_cap: None,
        };
        let handle = run_stage1(&mdp, &params, &mut rng).unwrap().handle;
        let mut ok = true;
        for _ in 0..20 {
            let pi = random_deterministic_policy(&mut rng, horizon, ns, na);
            let est = handle.eval(&pi).unwrap();
            let exact = exact_occupancy(&mdp, &pi).unwrap();
            for (&dh, &d) in est.d.iter().zip(exact.d.iter()) {
                let violation = (0.5 * dh - 0.05 - d).max(d - 2.0 * dh - 0.05);
                worst = worst.max(violation);
                if violation > 0.0 {
                    ok = false;
                }
            }
        }
        good += ok as usize;
    }
    Outcome { pass: good >= 18, detail: format!("{good}/20 seeds inside the sandwich (largest violation {worst:.4})") }
}

fn c3_explore_certificate() -> Outcome {
    let (ns, na, horizon) = (3, 2, 3);
    let policies = DeterministicPolicy::enumerate(horizon, ns, na, 512).unwrap();
    let mut good = 0;
    let mut worst = 0.0f64;
    let seeds = 10;
    for seed in 0..seeds {
        let mut rng = rng_from_seed(30_000 + seed);
        let mdp = random_mdp(&mut rng, ns, na, horizon);
        let k_on = 3000;
        let params = Stage1Params { k_on_prepare: 1000, k_on, threshold_xi: 2.0, step_cap: None };
        let handle = run_stage1(&mdp, &params, &mut rng).unwrap().handle;
        let res = compute_mu_explore(&handle, k_on, None).unwrap();
        if res.trace.stopped_by != StopReason::Threshold {
            continue;
        }
        let floor = coverage_floor(k_on, horizon);
        let mut mix = OccupancyTable::zeros(horizon, ns, na);
        for atom in res.mixture.atoms() {
            mix.d.scaled_add(atom.weight, &handle.eval(&atom.policy).unwrap().d);
        }
        let max_g = policies
            .iter()
            .map(|pi| {
                let d = handle.eval(pi).unwrap();
                d.d.iter().zip(mix.d.iter()).map(|(&x, &m)| x / (floor + m)).sum::<f64>()
            })
            .fold(0.0, f64::max);
        worst = worst.max(max_g);
        if max_g <= (2 * horizon * ns * na) as f64 + 1e-6 {
            good += 1;
        }
    }
    Outcome {
        pass: good == seeds,
        detail: format!("{good}/{seeds} threshold-stopped runs certified (largest max-ratio sum {worst:.3}, bound 36)"),
    }
}

fn c4_imitation_feasibility() -> Outcome {
    let (ns, na, horizon) = (3, 2, 3);
    let cfg = HybridConfig::default();
    let bound = 109.0 * (ns * horizon) as f64;
    let mut good = 0;
    let mut worst_cert = 0.0f64;
    let mut capped = 0;
    for seed in 0..20u64 {
        let spec = InstanceSpec {
            family: Family::Random,
            num_states: ns,
            num_actions: na,
            horizon,
            behavior: BehaviorSpec::RandomPolicies { atoms: 3 },
            seed: 40_000 + seed,
        };
        let mut rng = rng_from_seed(spec.seed);
        let inst = gen_instance(&spec, &mut rng).unwrap();
        let offline = sample_dataset(&inst.mdp, &inst.behavior, cfg.k_off, &mut rng, Provenance::Offline1).unwrap();
        let (off1, _) = offline.split_offline_halves();
        let (n, prepare, _, _) = hybrid_budget(cfg.k_on, horizon).unwrap();
        let cutoff = CutoffParams { k_off: cfg.k_off, n, k_on: cfg.k_on, delta: cfg.delta, c_off: cfg.c_off, mode: cfg.cutoff_mode };
        let d_off = estimate_d_off(&off1, ns, na, &cutoff).unwrap();
        let params = Stage1Params { k_on_prepare: prepare, k_on: cfg.k_on, threshold_xi: cfg.threshold_xi(horizon, ns, na), step_cap: None };
        let handle = run_stage1(&inst.mdp, &params, &mut rng).unwrap().handle;
        let res = run_imitation(&d_off.d_off_hat, &handle, cfg.k_on, &cfg.imitation_params(horizon, ns, na)).unwrap();
        let all_threshold = res.inner_traces.iter().all(|t| t.stopped_by == StopReason::Threshold);
        capped += res.cap_hits;
        worst_cert = worst_cert.max(res.coverage_certificate);
        if all_threshold && res.coverage_certificate <= bound {
            good += 1;
        }
    }
    Outcome {
        pass: good >= 19,
        detail: format!("{good}/20 seeds: all inner solves stopped by the rule and certificate <= {bound} (largest certificate {worst_cert:.2}, {capped} capped solves)"),
    }
}

fn c5_pessimism() -> Outcome {
    let (ns, na, horizon) = (4, 2, 3);
    let cfg = HybridConfig::default();
    let mut good = 0;
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..100u64 {
        let spec = InstanceSpec {
            family: Family::Random,
            num_states: ns,
            num_actions: na,
            horizon,
            behavior: BehaviorSpec::ExpertMix { expert_weight: 0.5, atoms: 2 },
            seed: 50_000 + seed,
        };
        let mut rng = rng_from_seed(spec.seed);
        let inst = gen_instance(&spec, &mut rng).unwrap();
        let data = sample_dataset(&inst.mdp, &inst.behavior, 4000, &mut rng, Provenance::Offline2).unwrap();
        let trimmed = two_fold_subsample(&data, ns, na, cfg.delta, cfg.c_trim, &mut rng).unwrap();
        let sol = vi_lcb(&trimmed, inst.mdp.reward(), cfg.delta, cfg.c_b, 4000).unwrap();
        let truth = policy_value(&inst.mdp, &sol.policy).unwrap();
        let excess = (0..ns).map(|s| sol.v_hat[[0, s]] - truth.v[[0, s]]).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(excess);
        if excess <= 1e-9 {
            good += 1;
        }
    }
    Outcome { pass: good >= 95, detail: format!("{good}/100 runs pessimistic (largest V-hat excess {worst:.4})") }
}

fn c6_hybrid_vs_offline() -> Outcome {
    let seeds = 20u64;
    let mut hybrid = Vec::new();
    let mut offline = Vec::new();
    let mut planted = 0.0;
    for seed in 0..seeds {
        let spec = InstanceSpec {
            family: Family::PartialCoverage { sigma_target: 0.2, mismatch_c: 2.0 },
            num_states: 4,
            num_actions: 2,
            horizon: 3,
            behavior: BehaviorSpec::Expert,
            seed: 60_000 + seed,
        };
        let mut rng = rng_from_seed(spec.seed);
        let inst = gen_instance(&spec, &mut rng).unwrap();
        assert!(inst.meta[0].c_star_sigma.is_infinite());
        planted = inst.uncovered_reward_mass;
        let cfg = HybridConfig { k_off: 2000, k_on: 2000, seed: spec.seed, ..HybridConfig::default() };
        let data = sample_dataset(&inst.mdp, &inst.behavior, cfg.k_off, &mut rng, Provenance::Offline1).unwrap();
        let reward = inst.mdp.reward().clone();
        hybrid.push(run_hybrid(&inst.mdp, &data, &reward, &cfg).unwrap().1.suboptimality_gap);
        offline.push(run_pure_offline(&inst.mdp, &data, &reward, &cfg).unwrap().1.suboptimality_gap);
    }
    let (mh, mo) = (median(hybrid), median(offline));
    Outcome {
        pass: mh <= 0.5 * mo && mo >= planted - 0.05,
        detail: format!("median gaps: hybrid {mh:.4}, pure offline {mo:.4}; planted uncovered mass {planted:.2}"),
    }
}

fn c7_hybrid_vs_online() -> Outcome {
    let seeds = 20u64;
    let mut hybrid = Vec::new();
    let mut online = Vec::new();
    for seed in 0..seeds {
        let spec = InstanceSpec {
            family: Family::Random,
            num_states: 4,
            num_actions: 2,
            horizon: 3,
            behavior: BehaviorSpec::Expert,
            seed: 70_000 + seed,
        };
        let mut rng = rng_from_seed(spec.seed);
        let inst = gen_instance(&spec, &mut rng).unwrap();
        let cfg = HybridConfig { k_off: 2000, k_on: 2000, seed: spec.seed, ..HybridConfig::default() };
        let data = sample_dataset(&inst.mdp, &inst.behavior, cfg.k_off, &mut rng, Provenance::Offline1).unwrap();
        let reward = inst.mdp.reward().clone();
        hybrid.push(run_hybrid(&inst.mdp, &data, &reward, &cfg).unwrap().1.suboptimality_gap);
        online.push(run_pure_online(&inst.mdp, &reward, 4000, &cfg).unwrap().1.suboptimality_gap);
    }
    let (mh, mo) = (median(hybrid), median(online));
    Outcome { pass: mh <= 1.2 * mo, detail: format!("median gaps: hybrid {mh:.4}, pure online {mo:.4}") }
}

fn brute_force_c_star(d_pi: &OccupancyTable, d_off: &OccupancyTable, sigma: f64) -> f64 {
    let horizon = d_pi.dims().0 as f64;
    let cells: Vec<(f64, f64)> = d_pi
        .d
        .iter()
        .zip(d_off.d.iter())
        .filter(|(&m, _)| m > 0.0)
        .map(|(&m, &o)| (m, if o > 0.0 { m / o } else { f64::INFINITY }))
        .collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << cells.len()) {
        let mut excluded = 0.0;
        let mut kept_max = 0.0f64;
        for (i, &(m, r)) in cells.iter().enumerate() {
            if mask & (1 << i) != 0 {
                excluded += m;
            } else {
                kept_max = kept_max.max(r);
            }
        }
        if excluded <= sigma * horizon + 1e-12 {
            best = best.min(kept_max);
        }
    }
    best
}

fn random_tables(rng: &mut impl Rng) -> (OccupancyTable, OccupancyTable) {
    let (horizon, ns, na) = (2, 3, 2);
    let mut d_pi = OccupancyTable::zeros(horizon, ns, na);
    let mut d_off = OccupancyTable::zeros(horizon, ns, na);
    for h in 0..horizon {
        let w = random_simplex(rng, ns * na);
        let o = random_simplex(rng, ns * na);
        for i in 0..ns * na {
            if rng.random_bool(0.8) {
                d_pi.d[[h, i / na, i % na]] = w[i];
            }
            if rng.random_bool(0.75) {
                d_off.d[[h, i / na, i % na]] = o[i];
            }
        }
    }
    (d_pi, d_off)
}

fn c8_concentrability_oracle() -> Outcome {
    let mut rng = rng_from_seed(80_000);
    let mut exact = 0;
    for _ in 0..100 {
        let (d_pi, d_off) = random_tables(&mut rng);
        let sigma = rng.random_range(0.0..0.6);
        let greedy = partial_concentrability(&d_pi, &d_off, sigma).unwrap().c_star_sigma;
        if greedy == brute_force_c_star(&d_pi, &d_off, sigma) {
            exact += 1;
        }
    }
    let mut monotone = 0;
    for _ in 0..50 {
        let (d_pi, d_off) = random_tables(&mut rng);
        let values: Vec<f64> = (0..10)
            .map(|i| partial_concentrability(&d_pi, &d_off, i as f64 / 9.0).unwrap().c_star_sigma)
            .collect();
        if values.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    Outcome {
        pass: exact == 100 && monotone == 50,
        detail: format!("{exact}/100 exact against brute force, {monotone}/50 monotone in sigma"),
    }
}

fn c9_determinism() -> Outcome {
    let spec = InstanceSpec {
        family: Family::PartialCoverage { sigma_target: 0.2, mismatch_c: 2.0 },
        num_states: 4,
        num_actions: 2,
        horizon: 3,
        behavior: BehaviorSpec::Expert,
        seed: 90_000,
    };
    let inst = spec.generate().unwrap();
    let cfg = HybridConfig { k_off: 600, k_on: 900, seed: 17, ..HybridConfig::default() };
    let run = || {
        let data = sample_dataset(&inst.mdp, &inst.behavior, cfg.k_off, &mut rng_from_seed(5), Provenance::Offline1).unwrap();
        let (_, report) = run_hybrid(&inst.mdp, &data, inst.mdp.reward(), &cfg).unwrap();
        report
    };
    let (a, b) = (run(), run());
    let (ja, jb) = (serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let identical = ja == jb;
    let balanced = a.episodes.online() == cfg.k_on && a.episodes.offline() == cfg.k_off;
    let clean = a.stage3.provenance_counts.iter().all(|(tag, _)| tag != "offline1")
        && a.stage3.provenance_counts.iter().map(|(_, n)| n).sum::<usize>()
            == a.episodes.offline2 + a.episodes.imitate + a.episodes.explore;
    Outcome {
        pass: identical && balanced && clean,
        detail: format!("byte-identical reports: {identical}, accounting balanced: {balanced}, no offline1 in stage 3: {clean}"),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "DP-oracle equivalence", c1_dp_oracle),
        (2, "occupancy sandwich", c2_occupancy_sandwich),
        (3, "explore certificate", c3_explore_certificate),
        (4, "imitation stopping feasibility", c4_imitation_feasibility),
        (5, "pessimism", c5_pessimism),
        (6, "hybrid beats pure offline under miscoverage", c6_hybrid_vs_offline),
        (7, "hybrid competitive with pure online on expert data", c7_hybrid_vs_online),
        (8, "concentrability oracle", c8_concentrability_oracle),
        (9, "determinism and accounting", c9_determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("acceptance {id} {verdict} [{name}] ({:.1}s): {}", start.elapsed().as_secs_f64(), outcome.detail);
        failures += (!outcome.pass) as usize;
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
