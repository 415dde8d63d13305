mod common;

use common::*;
use hierlqr::matlin::*;
use hierlqr::oracle::{analyze_policy, LinearGaussianPolicy, LqrInstance};
use proptest::prelude::*;

fn sym_strategy(max_n: usize) -> impl Strategy<Value = SymMat> {
    (1..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(-10.0..10.0f64, n * n)
            .prop_map(move |v| SymMat::symmetrize(&Mat::new(n, n, v).unwrap()))
    })
}

proptest! {
    #[test]
    fn svec_smat_round_trip_is_exact(z in sym_strategy(6)) {
        let v = svec(&z);
        let back = smat(&v).unwrap();
        // x ↦ fl(√2·x) is not injective, so the vector side is the exact one.
        prop_assert_eq!(svec(&back), v);
        for i in 0..z.dim() {
            for j in 0..z.dim() {
                let (a, b) = (back.as_mat().row(i)[j], z.as_mat().row(i)[j]);
                if i == j {
                    prop_assert_eq!(a, b);
                } else {
                    prop_assert!((a - b).abs() <= f64::EPSILON * b.abs());
                }
            }
        }
    }

    #[test]
    fn svec_preserves_trace_inner_product(a in sym_strategy(5), seed in any::<u64>()) {
        let mut rng = rng(seed);
        let b = random_sym(&mut rng, a.dim());
        let lhs = dot(&svec(&a), &svec(&b));
        let rhs = (a.as_mat() * b.as_mat()).trace();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn lyapunov_residual_is_small(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = rng(seed);
        let f = gaussian(&mut rng, d, d);
        let f = f.scale(0.95 / spectral_radius(&f).unwrap());
        let w = random_pd(&mut rng, d, 0.1);
        let s = solve_lyapunov(&f, &w).unwrap();
        prop_assert!(lyapunov_residual(&f, &w, &s).max_abs() <= 1e-9 * (1.0 + s.max_abs()));
        prop_assert!(s.min_eigenvalue() >= w.min_eigenvalue() - 1e-9);
    }

    #[test]
    fn sym_kron_defining_identity(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = rng(seed);
        let a = gaussian(&mut rng, n, n);
        let b = gaussian(&mut rng, n, n);
        let x = random_sym(&mut rng, n);
        let lhs = sym_kron(&a, &b).unwrap().mul_vec(&svec(&x));
        let m = &(&(&a * x.as_mat()) * &b.transpose()) + &(&(&b * x.as_mat()) * &a.transpose());
        let rhs = svec(&SymMat::symmetrize(&m.scale(0.5)));
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }
}

#[test]
fn svec_smat_examples() {
    assert_eq!(svec(&SymMat::identity(2)), vec![1.0, 0.0, 1.0]);
    let z = SymMat::new(Mat::from_rows(&[[2.0, 3.0], [3.0, 4.0]])).unwrap();
    let v = svec(&z);
    assert_eq!(v, vec![2.0, 3.0 * 2f64.sqrt(), 4.0]);
    assert!(smat(&v).unwrap().max_abs_diff(&z) <= 1e-15);
    assert_eq!(smat(&[1.0, 0.0, 1.0]).unwrap(), SymMat::identity(2));
    assert!(smat(&[1.0, 2.0]).is_err());
}

#[test]
fn lyapunov_examples() {
    let phi = SymMat::new(Mat::from_rows(&[[2.0, 0.3], [0.3, 1.0]])).unwrap();
    assert_eq!(solve_lyapunov(&Mat::zeros(2, 2), &phi).unwrap(), phi);
    let s = solve_lyapunov(&Mat::scalar(0.5), &SymMat::scalar(1.0)).unwrap();
    assert!((s.as_slice()[0] - 4.0 / 3.0).abs() < 1e-14);
    let p = solve_bellman(&Mat::scalar(0.5), &SymMat::scalar(1.0)).unwrap();
    assert!((p.as_slice()[0] - 4.0 / 3.0).abs() < 1e-14);
    match solve_lyapunov(&Mat::scalar(1.2), &SymMat::scalar(1.0)) {
        Err(hierlqr::Error::Unstable { rho }) => assert!((rho - 1.2).abs() < 1e-12),
        other => panic!("expected instability, got {other:?}"),
    }
}

#[test]
fn lyapunov_large_dimension_matches_fixed_point() {
    let mut rng = rng(11);
    let d = 40;
    let f = gaussian(&mut rng, d, d);
    let f = f.scale(0.7 / spectral_radius(&f).unwrap());
    let w = random_pd(&mut rng, d, 0.5);
    let s = solve_lyapunov(&f, &w).unwrap();
    let mut it = w.as_mat().clone();
    for _ in 0..400 {
        it = w.as_mat() + &(&(&f * &it) * &f.transpose());
    }
    assert!(s.max_abs_diff(&it) <= 1e-9 * it.max_abs());
}

#[test]
fn dare_examples() {
    let one = SymMat::scalar(1.0);
    let sol = solve_dare(&Mat::scalar(0.0), &Mat::scalar(1.0), &one, &one).unwrap();
    assert!((sol.p.as_slice()[0] - 1.0).abs() < 1e-12);
    assert!(sol.k.as_slice()[0].abs() < 1e-12);

    let sol = solve_dare(&Mat::scalar(1.0), &Mat::scalar(1.0), &one, &one).unwrap();
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    assert!((sol.p.as_slice()[0] - golden).abs() < 1e-10);
    assert!((sol.k.as_slice()[0] - golden / (1.0 + golden)).abs() < 1e-10);
}

#[test]
fn dare_gain_is_stationary_on_random_system() {
    let mut rng = rng(5);
    for _ in 0..5 {
        let inst = random_instance(&mut rng, 3, 2, 1.1);
        let sol = solve_dare(&inst.a, &inst.b, &inst.q, &inst.r).unwrap();
        let an = analyze_policy(&inst, &LinearGaussianPolicy::new(sol.k.clone(), 0.0)).unwrap();
        assert!(an.e_k.max_abs() <= 1e-7, "E at K* = {}", an.e_k.max_abs());
        let (p, k) = inst.optimal().unwrap();
        assert!(p.max_abs_diff(&sol.p) <= 1e-10 * sol.p.max_abs());
        assert!(k.max_abs_diff(&sol.k) <= 1e-10);
    }
}

#[test]
fn dare_rejects_unstabilizable() {
    let inst = LqrInstance::new_unchecked(
        Mat::scalar(1.5),
        Mat::scalar(0.0),
        SymMat::scalar(1.0),
        SymMat::scalar(1.0),
        SymMat::scalar(1.0),
    );
    assert!(matches!(
        solve_dare(&inst.a, &inst.b, &inst.q, &inst.r),
        Err(hierlqr::Error::NotStabilizable { .. })
    ));
}

#[test]
fn spectral_radius_examples() {
    assert!((spectral_radius(&Mat::diag(&[0.5, -0.9])).unwrap() - 0.9).abs() < 1e-14);
    assert!(spectral_radius(&Mat::from_rows(&[[0.0, 1.0], [0.0, 0.0]])).unwrap() < 1e-12);
    // Rotation by 90 degrees scaled by 0.8 has complex eigenvalues of modulus 0.8.
    let rot = Mat::from_rows(&[[0.0, -0.8], [0.8, 0.0]]);
    assert!((spectral_radius(&rot).unwrap() - 0.8).abs() < 1e-12);
}

#[test]
fn spectral_radius_matches_gelfand_limit() {
    let mut rng = rng(3);
    let f = gaussian(&mut rng, 5, 5);
    let rho = spectral_radius(&f).unwrap();
    let mut p = Mat::identity(5);
    let k = 200;
    for _ in 0..k {
        p = (&p * &f).scale(1.0 / rho);
    }
    // ‖(F/ρ)^k‖^{1/k} → 1 from Gelfand's formula.
    let g = p.spectral_norm().powf(1.0 / k as f64);
    assert!((g - 1.0).abs() < 0.05, "normalized Gelfand estimate {g}");
}
