mod common;

use common::*;
use hierlqr::matlin::{dot, smat, svec, Mat};
use hierlqr::gtd::feature;
use hierlqr::oracle::*;
use hierlqr::sim::{correlated_normal, standard_normals, RngStream};

#[test]
fn scalar_cost_closed_form() {
    let inst = scalar_instance(0.9, 1.0, 1.0, 1.0, 1.0);
    let an = analyze_policy(&inst, &policy(0.4, 0.0)).unwrap();
    assert!((an.sigma_k.as_slice()[0] - 4.0 / 3.0).abs() < 1e-14);
    assert!((an.cost - 1.16 * 4.0 / 3.0).abs() < 1e-13);
    // Exploration adds σ²B Bᵀ to the noise and σ² Tr R to the cost.
    let an = analyze_policy(&inst, &policy(0.4, 0.5)).unwrap();
    let sigma = 1.25 / 0.75;
    assert!((an.cost - (1.16 * sigma + 0.25)).abs() < 1e-13);
}

#[test]
fn unstable_policy_is_rejected_with_radius() {
    let inst = scalar_instance(0.9, 1.0, 1.0, 1.0, 1.0);
    match analyze_policy(&inst, &policy(-0.2, 0.0)) {
        Err(hierlqr::Error::Unstable { rho }) => assert!((rho - 1.1).abs() < 1e-12),
        other => panic!("expected instability, got {other:?}"),
    }
}

#[test]
fn optimal_gain_has_zero_natural_gradient() {
    let mut rng = rng(1);
    for _ in 0..5 {
        let inst = random_instance(&mut rng, 3, 2, 1.05);
        let (_, k) = inst.optimal().unwrap();
        let an = analyze_policy(&inst, &LinearGaussianPolicy::new(k.clone(), 0.3)).unwrap();
        assert!(an.e_k.max_abs() <= 1e-7);
        let fd = gradient_fd_check(&inst, &LinearGaussianPolicy::new(k, 0.0), 1e-5).unwrap();
        assert!(fd.analytic_norm <= 1e-5 && fd.fd_norm <= 1e-5, "{fd:?}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let inst = scalar_instance(0.9, 1.0, 1.0, 1.0, 1.0);
    assert!(gradient_fd_check(&inst, &policy(0.4, 0.0), 1e-5).unwrap().max_rel_err <= 1e-4);
    let mut rng = rng(2);
    for _ in 0..10 {
        let inst = random_instance(&mut rng, 3, 2, 0.9);
        let k = random_stable_gain(&mut rng, &inst, 0.3, 0.95);
        let fd = gradient_fd_check(&inst, &LinearGaussianPolicy::new(k, 0.2), 1e-5).unwrap();
        assert!(fd.max_rel_err <= 1e-4, "{fd:?}");
    }
}

#[test]
fn gradient_is_twice_natural_gradient_times_covariance() {
    let mut rng = rng(3);
    let inst = random_instance(&mut rng, 3, 2, 0.9);
    let k = random_stable_gain(&mut rng, &inst, 0.3, 0.9);
    let an = analyze_policy(&inst, &LinearGaussianPolicy::new(k, 0.0)).unwrap();
    let expect = (&an.e_k * an.sigma_k.as_mat()).scale(2.0);
    assert!(an.grad.max_abs_diff(&expect) <= 1e-12 * (1.0 + expect.max_abs()));
}

#[test]
fn value_vector_scalar_example() {
    let inst = scalar_instance(0.5, 1.0, 1.0, 1.0, 1.0);
    let vv = value_vector(&inst, &policy(0.0, 0.0)).unwrap();
    let expect = [4.0 / 3.0, (2.0 / 3.0) * 2f64.sqrt(), 7.0 / 3.0];
    for (a, b) in vv.delta_star.iter().zip(expect) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn natural_gradient_is_recovered_from_the_value_vector() {
    let mut rng = rng(4);
    for _ in 0..5 {
        let inst = random_instance(&mut rng, 3, 2, 0.9);
        let k = random_stable_gain(&mut rng, &inst, 0.3, 0.95);
        let pol = LinearGaussianPolicy::new(k.clone(), 0.4);
        let an = analyze_policy(&inst, &pol).unwrap();
        let vv = value_vector(&inst, &pol).unwrap();
        let e = natural_gradient_from_delta(&smat(&vv.delta_star).unwrap(), 3, &k);
        assert!(e.max_abs_diff(&an.e_k) <= 1e-10 * (1.0 + an.e_k.max_abs()));
    }
}

#[test]
fn q_function_satisfies_bellman_by_monte_carlo() {
    let inst = scalar_instance(0.6, 0.8, 1.0, 0.5, 0.7);
    let pol = policy(0.3, 0.5);
    let an = analyze_policy(&inst, &pol).unwrap();
    let vv = value_vector(&inst, &pol).unwrap();
    let (x, u) = ([0.8], [-0.4]);
    let c = inst.q.quad_form(&x) + inst.r.quad_form(&u);
    let target = vv.q_value(&x, &u) - c + an.cost;
    let mut rng = RngStream::new(5, 0).rng();
    let n = 200_000;
    let (mut s, mut s2) = (0.0, 0.0);
    let mean_next = inst.a.mul_vec(&x)[0] + inst.b.as_slice()[0] * u[0];
    for _ in 0..n {
        let w = correlated_normal(&mut rng, &inst.phi.cholesky_psd())[0];
        let z = standard_normals(&mut rng, 1)[0];
        let xn = mean_next + w;
        let un = -pol.k.as_slice()[0] * xn + pol.sigma * z;
        let q = vv.q_value(&[xn], &[un]);
        s += q;
        s2 += q * q;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - target).abs() <= 3.0 * se, "E Q' = {mean} ± {se}, expected {target}");
}

#[test]
fn theta_matches_monte_carlo() {
    let inst = scalar_instance(0.5, 1.0, 1.0, 1.0, 1.0);
    let pol = policy(0.2, 0.5);
    let cs = critic_system(&inst, &pol).unwrap();
    let sb = cs.sigma_breve.cholesky_psd();
    let kb = &cs.k_breve;
    // Noise of v' given v: (w, −Kw + σz).
    let mut rng = RngStream::new(17, 0).rng();
    let n = 400_000;
    let m = 3;
    let mut sum = vec![0.0; m * m];
    let mut sum2 = vec![0.0; m * m];
    for _ in 0..n {
        let v = correlated_normal(&mut rng, &sb);
        let w = correlated_normal(&mut rng, &inst.phi.cholesky_psd())[0];
        let z = standard_normals(&mut rng, 1)[0];
        let mut vn = kb.mul_vec(&v);
        vn[0] += w;
        vn[1] += -pol.k.as_slice()[0] * w + pol.sigma * z;
        let phi = feature(&v);
        let phin = feature(&vn);
        for i in 0..m {
            for j in 0..m {
                let s = phi[i] * (phi[j] - phin[j]);
                sum[i * m + j] += s;
                sum2[i * m + j] += s * s;
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            let mean = sum[i * m + j] / n as f64;
            let se = ((sum2[i * m + j] / n as f64 - mean * mean) / n as f64).sqrt();
            let exact = cs.theta[(i, j)];
            assert!((mean - exact).abs() <= 3.0 * se + 1e-12, "Θ[{i},{j}] = {exact}, MC {mean} ± {se}");
        }
    }
}

#[test]
fn theta_is_invertible_and_saddle_residual_vanishes() {
    let mut rng = rng(6);
    for _ in 0..5 {
        let inst = random_instance(&mut rng, 2, 1, 0.9);
        let k = random_stable_gain(&mut rng, &inst, 0.3, 0.9);
        let pol = LinearGaussianPolicy::new(k, 0.5);
        let cs = critic_system(&inst, &pol).unwrap();
        assert!(cs.theta.min_singular_value() > 0.0);
        assert!(cs.omega_min_singular_value() > 0.0);
        let vv = value_vector(&inst, &pol).unwrap();
        let (r1, r2) = cs.saddle_residual(vv.cost, &vv.delta_star);
        let scale = cs.d_k.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(r1.abs() <= 1e-12 * vv.cost);
        assert!(r2.iter().all(|v| v.abs() <= 1e-6 * scale), "{r2:?}");
    }
    assert!(critic_system(&scalar_instance(0.5, 1.0, 1.0, 1.0, 1.0), &policy(0.2, 0.0)).is_err());
}

#[test]
fn gradient_domination_sandwich() {
    let mut rng = rng(7);
    for _ in 0..3 {
        let inst = random_instance(&mut rng, 3, 2, 0.95);
        let (_, ks) = inst.optimal().unwrap();
        let star = analyze_policy(&inst, &LinearGaussianPolicy::new(ks.clone(), 0.0)).unwrap();
        let at_star = dom_bounds(&inst, &LinearGaussianPolicy::new(ks, 0.0), &star).unwrap();
        assert!(at_star.lower.abs() <= 1e-7 && at_star.upper.abs() <= 1e-7 && at_star.gap.abs() <= 1e-7);
        for _ in 0..50 {
            let k = random_stable_gain(&mut rng, &inst, 0.5, 0.99);
            let b = dom_bounds(&inst, &LinearGaussianPolicy::new(k, 0.0), &star).unwrap();
            assert!(b.holds, "{b:?}");
        }
    }
}

#[test]
fn advantage_identity() {
    let inst = scalar_instance(0.9, 1.0, 1.0, 1.0, 1.0);
    let (k, kp) = (Mat::scalar(0.4), Mat::scalar(0.7));
    let same = advantage_identity_check(&inst, &k, &k, &[1.0], None).unwrap();
    assert_eq!(same.advantage_sum, 0.0);
    assert_eq!(same.p_difference, 0.0);
    let c = advantage_identity_check(&inst, &k, &kp, &[1.0], Some(200)).unwrap();
    assert!(c.residual <= 1e-8, "{c:?}");

    let mut rng = rng(8);
    let inst = random_instance(&mut rng, 3, 2, 0.9);
    let k = random_stable_gain(&mut rng, &inst, 0.3, 0.9);
    let kp = random_stable_gain(&mut rng, &inst, 0.3, 0.9);
    let x0 = gaussian_vec(&mut rng, 3);
    let c = advantage_identity_check(&inst, &k, &kp, &x0, None).unwrap();
    assert!(c.residual <= 1e-8 * (1.0 + c.p_difference.abs()), "{c:?}");
}

#[test]
fn advantage_is_bounded_below() {
    let mut rng = rng(9);
    let inst = random_instance(&mut rng, 3, 2, 0.9);
    let k = random_stable_gain(&mut rng, &inst, 0.3, 0.9);
    let an = analyze_policy(&inst, &LinearGaussianPolicy::new(k.clone(), 0.0)).unwrap();
    for _ in 0..50 {
        let kp = gaussian(&mut rng, 2, 3);
        let x = gaussian_vec(&mut rng, 3);
        let lb = advantage_lower_bound(&an, &x).unwrap();
        assert!(advantage(&an, &k, &kp, &x) >= lb - 1e-10 * (1.0 + lb.abs()));
    }
}

#[test]
fn covariance_and_value_matrix_bounds() {
    let mut rng = rng(10);
    let inst = random_instance(&mut rng, 3, 2, 0.9);
    let z = Mat::zeros(2, 3);
    let b = diagnostics_bound_mats(&inst, &LinearGaussianPolicy::new(z, 0.0)).unwrap();
    assert!(b.sigma_holds && b.p_holds);
    for _ in 0..50 {
        let k = random_stable_gain(&mut rng, &inst, 0.5, 0.99);
        let b = diagnostics_bound_mats(&inst, &LinearGaussianPolicy::new(k, 0.0)).unwrap();
        assert!(b.sigma_holds && b.p_holds, "{b:?}");
    }
    // Near the stability boundary.
    let inst = scalar_instance(1.2, 1.0, 1.0, 1.0, 1.0);
    let b = diagnostics_bound_mats(&inst, &policy(0.21, 0.0)).unwrap();
    assert!(b.sigma_holds && b.p_holds);
}

#[test]
fn stationary_covariance_dominates_noise() {
    let mut rng = rng(11);
    let inst = random_instance(&mut rng, 3, 2, 0.9);
    let k = random_stable_gain(&mut rng, &inst, 0.3, 0.9);
    let an = analyze_policy(&inst, &LinearGaussianPolicy::new(k, 0.3)).unwrap();
    assert!(an.sigma_k.sub(&an.phi_sigma).min_eigenvalue() >= -1e-12);
    assert!(an.p_k.min_eigenvalue() >= -1e-12);
    let c2 = dot(&svec(&an.p_k), &svec(&an.phi_sigma)) + 0.09 * inst.r.trace();
    assert!(rel(c2, an.cost) <= 1e-10);
}

#[test]
fn instance_json_uses_matrix_names() {
    let inst = scalar_instance(0.5, 1.0, 1.0, 1.0, 1.0);
    let text = serde_json::to_string(&inst).unwrap();
    for key in ["\"A\"", "\"B\"", "\"Q\"", "\"R\"", "\"Phi\""] {
        assert!(text.contains(key));
    }
    let back: LqrInstance = serde_json::from_str(&text).unwrap();
    assert_eq!(back, inst);
}
