#![allow(dead_code)]

use hierlqr::matlin::{spectral_radius, Mat, SymMat};
use hierlqr::oracle::{LinearGaussianPolicy, LqrInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMat {
    SymMat::symmetrize(&gaussian(rng, n, n))
}

/// `GGᵀ/n + floor·I`.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> SymMat {
    let g = gaussian(rng, n, n);
    SymMat::symmetrize(&(&(&g * &g.transpose()).scale(1.0 / n as f64) + &Mat::identity(n).scale(floor)))
}

/// Random instance with `ρ(A) = rho`.
pub fn random_instance(rng: &mut ChaCha8Rng, d: usize, k: usize, rho: f64) -> LqrInstance {
    let a = gaussian(rng, d, d);
    let r0 = spectral_radius(&a).unwrap();
    let a = a.scale(rho / r0);
    let b = gaussian(rng, d, k);
    let q = random_pd(rng, d, 0.5);
    let r = random_pd(rng, k, 0.5);
    let phi = random_pd(rng, d, 0.5);
    LqrInstance::new(a, b, q, r, phi).unwrap()
}

/// Random gain with `ρ(A − BK) ≤ max_rho`, by rejection.
pub fn random_stable_gain(rng: &mut ChaCha8Rng, inst: &LqrInstance, scale: f64, max_rho: f64) -> Mat {
    loop {
        let k = gaussian(rng, inst.action_dim(), inst.state_dim()).scale(scale);
        if spectral_radius(&inst.closed_loop(&k).unwrap()).unwrap() <= max_rho {
            return k;
        }
    }
}

pub fn scalar_instance(a: f64, b: f64, q: f64, r: f64, phi: f64) -> LqrInstance {
    LqrInstance::new(Mat::scalar(a), Mat::scalar(b), SymMat::scalar(q), SymMat::scalar(r), SymMat::scalar(phi)).unwrap()
}

pub fn policy(k: f64, sigma: f64) -> LinearGaussianPolicy {
    LinearGaussianPolicy::new(Mat::scalar(k), sigma)
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Permutation matrix swapping agents `i` and `j` of subpopulation `l`, on
/// the stacked vector whose per-agent block sizes are `dims[l]`.
pub fn agent_swap(sizes: &[usize], dims: &[usize], l: usize, i: usize, j: usize) -> Mat {
    let total: usize = sizes.iter().zip(dims).map(|(n, d)| n * d).sum();
    let offset = |sub: usize, agent: usize| -> usize {
        sizes[..sub].iter().zip(&dims[..sub]).map(|(n, d)| n * d).sum::<usize>() + agent * dims[sub]
    };
    let mut perm: Vec<usize> = (0..total).collect();
    for c in 0..dims[l] {
        perm.swap(offset(l, i) + c, offset(l, j) + c);
    }
    Mat::from_fn(total, total, |r, c| if perm[r] == c { 1.0 } else { 0.0 })
}

/// Draws a random transposition `(l, i, j)` with `i ≠ j`, or `None` if every
/// subpopulation is a singleton.
pub fn random_transposition(rng: &mut ChaCha8Rng, sizes: &[usize]) -> Option<(usize, usize, usize)> {
    let subs: Vec<usize> = (0..sizes.len()).filter(|&l| sizes[l] > 1).collect();
    if subs.is_empty() {
        return None;
    }
    let l = subs[rng.random_range(0..subs.len())];
    let i = rng.random_range(0..sizes[l]);
    let mut j = rng.random_range(0..sizes[l] - 1);
    if j >= i {
        j += 1;
    }
    Some((l, i, j))
}

/// Random partition with `L ≤ max_l`, sizes `≤ max_n`, dims `≤ max_d`,
/// `≤ max_k`.
pub fn random_partition(rng: &mut ChaCha8Rng, max_l: usize, max_n: usize, max_d: usize, max_k: usize) -> hierlqr::sysmodel::SubpopulationPartition {
    let l = rng.random_range(1..=max_l);
    let sizes = (0..l).map(|_| rng.random_range(1..=max_n)).collect();
    let d = (0..l).map(|_| rng.random_range(1..=max_d)).collect();
    let k = (0..l).map(|_| rng.random_range(1..=max_k)).collect();
    hierlqr::sysmodel::SubpopulationPartition::new(sizes, d, k).unwrap()
}

/// `K* + εG` with ε halved from `scale` until `ρ(A − BK) ≤ max_rho`.
pub fn perturbed_optimal_gain(rng: &mut ChaCha8Rng, inst: &LqrInstance, scale: f64, max_rho: f64) -> Mat {
    let (_, ks) = inst.optimal().unwrap();
    let g = gaussian(rng, inst.action_dim(), inst.state_dim());
    let mut eps = scale;
    for _ in 0..60 {
        let k = &ks + &g.scale(eps);
        if spectral_radius(&inst.closed_loop(&k).unwrap()).unwrap() <= max_rho {
            return k;
        }
        eps *= 0.5;
    }
    ks
}
