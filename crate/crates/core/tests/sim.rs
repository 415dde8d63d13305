mod common;

use common::*;
use hierlqr::decomp::{build_auxiliary, HierarchicalPolicy};
use hierlqr::matlin::{Mat, SymMat};
use hierlqr::oracle::{analyze_policy, LinearGaussianPolicy, LqrInstance};
use hierlqr::sim::*;
use hierlqr::sysmodel::{generate_system, GlobalLqrSystem, SubpopulationPartition};

#[test]
fn identical_streams_reproduce_draws() {
    let inst = scalar_instance(0.5, 1.0, 1.0, 1.0, 1.0);
    let pol = policy(0.2, 0.5);
    let a = rollout(&inst, &pol, 500, RngStream::new(3, 7), Start::Stationary).unwrap();
    let b = rollout(&inst, &pol, 500, RngStream::new(3, 7), Start::Stationary).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
    let c = rollout(&inst, &pol, 500, RngStream::new(3, 8), Start::Stationary).unwrap();
    assert_ne!(a.costs, c.costs);
}

#[test]
fn trajectory_costs_are_instantaneous_costs() {
    let mut rng = rng(1);
    let inst = random_instance(&mut rng, 3, 2, 0.9);
    let pol = LinearGaussianPolicy::new(random_stable_gain(&mut rng, &inst, 0.3, 0.9), 0.3);
    let tr = rollout(&inst, &pol, 50, RngStream::new(1, 0), Start::State(vec![1.0, 0.0, -1.0])).unwrap();
    assert_eq!(tr.len(), 50);
    assert_eq!(tr.states[0], vec![1.0, 0.0, -1.0]);
    for t in 0..tr.len() {
        let c = inst.q.quad_form(&tr.states[t]) + inst.r.quad_form(&tr.actions[t]);
        assert!((c - tr.costs[t]).abs() <= 1e-12 * (1.0 + c));
    }
    let csv = tr.to_csv();
    assert!(csv.starts_with("t,x0,x1,x2,u0,u1,cost\n"));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn stationary_start_requires_stability() {
    let inst = scalar_instance(1.5, 1.0, 1.0, 1.0, 1.0);
    assert!(rollout(&inst, &policy(0.0, 0.1), 10, RngStream::new(0, 0), Start::Stationary).is_err());
    assert!(rollout(&inst, &policy(0.0, 0.1), 10, RngStream::new(0, 0), Start::State(vec![0.0])).is_ok());
}

#[test]
fn empirical_covariance_matches_stationary_covariance() {
    let mut rng = rng(2);
    let inst = random_instance(&mut rng, 2, 1, 0.8);
    let pol = LinearGaussianPolicy::new(random_stable_gain(&mut rng, &inst, 0.3, 0.8), 0.4);
    let an = analyze_policy(&inst, &pol).unwrap();
    let tr = rollout(&inst, &pol, 100_000, RngStream::new(2, 0), Start::Stationary).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let prods: Vec<f64> = tr.states.iter().map(|x| x[i] * x[j]).collect();
            let (mean, se) = batch_means(&prods, 50);
            let exact = an.sigma_k.as_mat()[(i, j)];
            assert!((mean - exact).abs() <= 3.0 * se, "Σ[{i},{j}] = {exact}, MC {mean} ± {se}");
        }
    }
}

#[test]
fn time_average_cost_matches_analytic_cost() {
    let mut rng = rng(3);
    for _ in 0..3 {
        let inst = random_instance(&mut rng, 3, 2, 0.9);
        let pol = LinearGaussianPolicy::new(random_stable_gain(&mut rng, &inst, 0.3, 0.9), 0.3);
        let c = analyze_policy(&inst, &pol).unwrap().cost;
        let est = ergodic_average(&inst, &pol, 100_000, RngStream::new(3, 1), Start::State(vec![0.0; 3])).unwrap();
        assert!(rel(est.mean_cost, c) <= 0.05, "{est:?} vs {c}");
        assert!(est.burn_in >= 100);
    }
}

#[test]
fn noiseless_limit_recovers_optimal_cost() {
    let eps = 1e-6;
    let inst = LqrInstance::new(
        Mat::from_rows(&[[0.9, 0.2], [0.0, 0.7]]),
        Mat::from_rows(&[[1.0], [0.5]]),
        SymMat::identity(2),
        SymMat::scalar(1.0),
        SymMat::identity(2).scale(eps),
    )
    .unwrap();
    let (_, k) = inst.optimal().unwrap();
    let pol = LinearGaussianPolicy::new(k, 0.0);
    let c = analyze_policy(&inst, &pol).unwrap().cost;
    let est = ergodic_average(&inst, &pol, 100_000, RngStream::new(4, 0), Start::Stationary).unwrap();
    assert!(c < 1e-5);
    assert!(rel(est.mean_cost, c) <= 0.05);
}

#[test]
fn burn_in_rule() {
    assert_eq!(burn_in(0.0), 100);
    assert_eq!(burn_in(0.5), 100);
    assert_eq!(burn_in(0.9375), 160);
    assert_eq!(burn_in(0.999), 10_000);
}

#[test]
fn hierarchical_rollout_with_zero_gains_and_negligible_noise_stays_at_rest() {
    let p = SubpopulationPartition::new(vec![2, 3], vec![1, 2], vec![1, 1]).unwrap();
    let base = generate_system(&p, 1, 1.0);
    let sys = GlobalLqrSystem::new(
        base.a().clone(),
        base.b().clone(),
        base.q().clone(),
        base.r().clone(),
        vec![SymMat::identity(1).scale(1e-300), SymMat::identity(2).scale(1e-300)],
        p.clone(),
    )
    .unwrap();
    let ens = build_auxiliary(&sys).unwrap();
    let policy = HierarchicalPolicy::zeros(&ens, 0.0, 0.0);
    let out = hierarchical_rollout(&sys, &ens, &policy, 50, RngStream::new(0, 0), None).unwrap();
    assert!(out.global.states.iter().flatten().all(|v| v.abs() < 1e-140));
    assert!(out.global.costs.iter().all(|c| *c < 1e-280));
    assert_eq!(out.tilde.len(), 2);
}

#[test]
fn hierarchical_rollout_transforms_are_consistent() {
    let p = SubpopulationPartition::new(vec![2, 3], vec![1, 1], vec![1, 1]).unwrap();
    let sys = generate_system(&p, 2, 1.0);
    let ens = build_auxiliary(&sys).unwrap();
    let policy = HierarchicalPolicy::zeros(&ens, 0.3, 0.3);
    let out = hierarchical_rollout(&sys, &ens, &policy, 200, RngStream::new(5, 0), None).unwrap();
    for t in 0..200 {
        let parts = out.mean_field.costs[t] + out.tilde.iter().map(|tr| tr.costs[t]).sum::<f64>();
        assert!((parts - out.global.costs[t]).abs() <= 1e-8 * (1.0 + out.global.costs[t]));
    }
    let again = hierarchical_rollout(&sys, &ens, &policy, 200, RngStream::new(5, 0), None).unwrap();
    assert_eq!(out, again);
}

#[test]
fn pathwise_coupling_on_random_systems() {
    let mut rng = rng(6);
    for seed in 0..10 {
        let p = random_partition(&mut rng, 3, 4, 2, 2);
        let sys = generate_system(&p, seed, 1.0);
        let ens = build_auxiliary(&sys).unwrap();
        let mut policy = HierarchicalPolicy::zeros(&ens, 0.2, 0.2);
        for (l, s) in ens.subsystems.iter().enumerate() {
            policy.tilde[l].k = random_stable_gain(&mut rng, &s.instance(), 0.2, 0.95);
        }
        policy.mean_field.k = random_stable_gain(&mut rng, &ens.mean_field.instance(), 0.2, 0.95);
        let x0 = gaussian_vec(&mut rng, p.total_state_dim());
        let cmp = pathwise_comparison(&sys, &ens, &policy, 100, RngStream::new(seed, 3), x0).unwrap();
        assert!(cmp.max_state_deviation <= 1e-10 * (1.0 + cmp.max_state_magnitude), "{cmp:?}");
    }
}

#[test]
fn long_run_global_cost_matches_composed_policy_cost() {
    let p = SubpopulationPartition::new(vec![2, 3], vec![1, 1], vec![1, 1]).unwrap();
    let sys = generate_system(&p, 3, 1.0);
    let ens = build_auxiliary(&sys).unwrap();
    let policy = HierarchicalPolicy::zeros(&ens, 0.0, 0.0);
    let g = policy.global_gain(&ens).unwrap();
    let c = hierlqr::decomp::global_policy_cost(&sys, &g).unwrap();
    let out = hierarchical_rollout(&sys, &ens, &policy, 101_000, RngStream::new(9, 0), None).unwrap();
    let mean = out.global.costs[1000..].iter().sum::<f64>() / 100_000.0;
    assert!(rel(mean, c) <= 0.05, "time average {mean} vs {c}");
    let r = hierarchical_closed_loop_radius(&sys, &ens, &policy).unwrap();
    assert!(r < 1.0);
}
