use hybrid_rl::config::HybridConfig;
use hybrid_rl::dataset::{sample_dataset, Provenance};
use hybrid_rl::instance::{gen_instance, BehaviorSpec, Family, InstanceSpec};
use hybrid_rl::mdp::{optimal_policy, policy_value};
use hybrid_rl::pipeline::{evaluate, run_hybrid, run_pure_offline, run_pure_online, Algorithm};
use hybrid_rl::seeding::rng_from_seed;
use hybrid_rl::DeterministicPolicy;
use ndarray::Array3;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn random_spec(seed: u64, behavior: BehaviorSpec) -> InstanceSpec {
    InstanceSpec { family: Family::Random, num_states: 4, num_actions: 2, horizon: 3, behavior, seed }
}

#[test]
fn pure_online_gap_is_small_and_does_not_grow_with_budget() {
    let mut at_6000 = Vec::new();
    let mut at_12000 = Vec::new();
    for seed in 0..20 {
        let inst = random_spec(100 + seed, BehaviorSpec::Expert).generate().unwrap();
        let cfg = HybridConfig { seed, ..HybridConfig::default() };
        let reward = inst.mdp.reward().clone();
        at_6000.push(run_pure_online(&inst.mdp, &reward, 6000, &cfg).unwrap().1.suboptimality_gap);
        at_12000.push(run_pure_online(&inst.mdp, &reward, 12000, &cfg).unwrap().1.suboptimality_gap);
    }
    let (m1, m2) = (median(at_6000), median(at_12000));
    assert!(m1 <= 0.25 * 3.0, "median gap {m1}");
    assert!(m2 <= m1 + 1e-9, "doubling the budget raised the median gap from {m1} to {m2}");
}

#[test]
fn pure_offline_on_expert_data_is_accurate() {
    let mut gaps = Vec::new();
    for seed in 0..20 {
        let spec = random_spec(200 + seed, BehaviorSpec::Expert);
        let mut rng = rng_from_seed(spec.seed);
        let inst = gen_instance(&spec, &mut rng).unwrap();
        let data = sample_dataset(&inst.mdp, &inst.behavior, 4000, &mut rng, Provenance::Offline1).unwrap();
        let cfg = HybridConfig { k_off: 4000, ..HybridConfig::default() };
        let (_, report) = run_pure_offline(&inst.mdp, &data, inst.mdp.reward(), &cfg).unwrap();
        assert_eq!(report.algorithm, Algorithm::PureOffline);
        assert_eq!(report.episodes.offline2, 4000);
        gaps.push(report.suboptimality_gap);
    }
    assert!(median(gaps) <= 0.25 * 3.0);
}

#[test]
fn uncovered_branch_bounds_the_offline_gap() {
    let spec = InstanceSpec {
        family: Family::PartialCoverage { sigma_target: 0.25, mismatch_c: 1.0 },
        num_states: 3,
        num_actions: 2,
        horizon: 4,
        behavior: BehaviorSpec::Expert,
        seed: 9,
    };
    let mut rng = rng_from_seed(spec.seed);
    let inst = gen_instance(&spec, &mut rng).unwrap();
    let data = sample_dataset(&inst.mdp, &inst.behavior, 1000, &mut rng, Provenance::Offline1).unwrap();
    let cfg = HybridConfig { k_off: 1000, ..HybridConfig::default() };
    let (_, report) = run_pure_offline(&inst.mdp, &data, inst.mdp.reward(), &cfg).unwrap();
    assert!(report.suboptimality_gap >= inst.uncovered_reward_mass - 1e-9);
}

#[test]
fn hybrid_report_is_consistent() {
    let spec = random_spec(300, BehaviorSpec::ExpertMix { expert_weight: 0.5, atoms: 2 });
    let mut rng = rng_from_seed(spec.seed);
    let inst = gen_instance(&spec, &mut rng).unwrap();
    let cfg = HybridConfig { k_off: 400, k_on: 601, seed: 4, ..HybridConfig::default() };
    let data = sample_dataset(&inst.mdp, &inst.behavior, cfg.k_off, &mut rng, Provenance::Offline1).unwrap();
    let (policy, report) = run_hybrid(&inst.mdp, &data, inst.mdp.reward(), &cfg).unwrap();

    assert_eq!(report.policy, policy);
    let truth = optimal_policy(&inst.mdp).v_init - policy_value(&inst.mdp, &policy).unwrap().v_init;
    assert!((report.suboptimality_gap - truth).abs() < 1e-12);
    assert!((evaluate(&inst.mdp, &policy).unwrap() - truth).abs() < 1e-12);
    assert!(report.suboptimality_gap >= -1e-9);

    let e = &report.episodes;
    assert_eq!((e.offline1, e.offline2), (200, 200));
    assert_eq!(e.prepare, 66 * 3);
    assert_eq!(e.imitate, 200);
    assert_eq!(e.online(), 601);
    assert!(report.stage3.provenance_counts.iter().all(|(tag, _)| tag != "offline1"));
    assert_eq!(report.stage3.k_total, 1001);
    assert!(report.stage1.is_some() && report.explore.is_some() && report.imitate.is_some());
}

#[test]
fn offline_data_never_changes_the_reward_free_stages() {
    let spec = random_spec(400, BehaviorSpec::RandomPolicies { atoms: 2 });
    let inst = spec.generate().unwrap();
    let cfg = HybridConfig { k_off: 100, k_on: 300, ..HybridConfig::default() };
    let data = sample_dataset(&inst.mdp, &inst.behavior, cfg.k_off, &mut rng_from_seed(1), Provenance::Offline1).unwrap();
    let a = run_hybrid(&inst.mdp, &data, inst.mdp.reward(), &cfg).unwrap().1;
    let other = Array3::from_elem(inst.mdp.reward().dim(), 0.5);
    let b = run_hybrid(&inst.mdp, &data, &other, &cfg).unwrap().1;
    assert_eq!(a.stage1, b.stage1);
    assert_eq!(a.explore, b.explore);
    assert_eq!(a.imitate, b.imitate);
}

#[test]
fn inputs_are_validated() {
    let inst = random_spec(500, BehaviorSpec::Expert).generate().unwrap();
    let cfg = HybridConfig { k_off: 10, k_on: 30, ..HybridConfig::default() };
    let data = sample_dataset(&inst.mdp, &inst.behavior, 9, &mut rng_from_seed(0), Provenance::Offline1).unwrap();
    assert!(run_hybrid(&inst.mdp, &data, inst.mdp.reward(), &cfg).is_err());
    let bad_reward = Array3::from_elem((3, 4, 2), 2.0);
    assert!(run_pure_online(&inst.mdp, &bad_reward, 100, &cfg).is_err());
    let wrong_shape = DeterministicPolicy::first_action(2, 4, 2);
    assert!(evaluate(&inst.mdp, &wrong_shape).is_err());
}
