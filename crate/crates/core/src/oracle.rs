//! Closed-form quantities of a single LQR instance under a linear-Gaussian
//! policy: stationary covariance, cost, policy gradient, value vector and the
//! linear system solved by the critic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlin::{solve_bellman, solve_dare, solve_lyapunov, spectral_radius, svec, sym_kron, Mat, SymMat};

/// Closed loops with spectral radius at or above `1 − STABILITY_MARGIN` are
/// treated as unstable.
pub const STABILITY_MARGIN: f64 = 1e-6;

/// `x_{t+1} = A x_t + B u_t + ε_t`, `ε_t ~ N(0, Φ)`, cost `xᵀQx + uᵀRu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrInstance {
    #[serde(rename = "A")]
    pub a: Mat,
    #[serde(rename = "B")]
    pub b: Mat,
    #[serde(rename = "Q")]
    pub q: SymMat,
    #[serde(rename = "R")]
    pub r: SymMat,
    #[serde(rename = "Phi")]
    pub phi: SymMat,
}

impl LqrInstance {
    /// Checks shapes, `Q ⪰ 0`, `R ≻ 0` and `Φ ≻ 0`.
    pub fn new(a: Mat, b: Mat, q: SymMat, r: SymMat, phi: SymMat) -> Result<Self> {
        let inst = LqrInstance::new_unchecked(a, b, q, r, phi);
        inst.check_shapes()?;
        let tol = |m: &SymMat| 1e-12 * m.max_abs().max(1.0);
        let q_min = inst.q.min_eigenvalue();
        if q_min < -tol(&inst.q) {
            return Err(Error::Assumption {
                matrix: "Q".into(),
                requirement: "positive semi-definite",
                min_eigenvalue: q_min,
            });
        }
        for (name, m) in [("R", &inst.r), ("Phi", &inst.phi)] {
            let ev = m.min_eigenvalue();
            if ev <= 0.0 {
                return Err(Error::Assumption {
                    matrix: name.into(),
                    requirement: "positive definite",
                    min_eigenvalue: ev,
                });
            }
        }
        Ok(inst)
    }

    /// No definiteness checks. Used for auxiliary systems that may be
    /// degenerate.
    pub fn new_unchecked(a: Mat, b: Mat, q: SymMat, r: SymMat, phi: SymMat) -> Self {
        LqrInstance { a, b, q, r, phi }
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.a.rows();
        let k = self.b.cols();
        if !self.a.is_square() || self.b.rows() != d || self.q.dim() != d || self.r.dim() != k || self.phi.dim() != d {
            return Err(Error::dim(
                "LqrInstance",
                format!(
                    "A {:?}, B {:?}, Q {}, R {}, Phi {}",
                    self.a.shape(),
                    self.b.shape(),
                    self.q.dim(),
                    self.r.dim(),
                    self.phi.dim()
                ),
            ));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.cols()
    }

    /// `A − BK`.
    pub fn closed_loop(&self, k: &Mat) -> Result<Mat> {
        if k.shape() != (self.action_dim(), self.state_dim()) {
            return Err(Error::dim("closed_loop", format!("gain has shape {:?}", k.shape())));
        }
        Ok(&self.a - &(&self.b * k))
    }

    /// `ρ(A − BK)`, erroring when it is not below `1 − STABILITY_MARGIN`.
    pub fn check_stable(&self, k: &Mat) -> Result<f64> {
        let rho = spectral_radius(&self.closed_loop(k)?)?;
        if !(rho < 1.0 - STABILITY_MARGIN) {
            return Err(Error::Unstable { rho });
        }
        Ok(rho)
    }

    /// Optimal gain and value matrix from the Riccati equation.
    pub fn optimal(&self) -> Result<(SymMat, Mat)> {
        self.check_shapes()?;
        let sol = solve_dare(&self.a, &self.b, &self.q, &self.r)?;
        Ok((sol.p, sol.k))
    }
}

/// `u = −Kx + σz`, `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianPolicy {
    #[serde(rename = "K")]
    pub k: Mat,
    pub sigma: f64,
}

impl LinearGaussianPolicy {
    pub fn new(k: Mat, sigma: f64) -> Self {
        assert!(sigma >= 0.0 && sigma.is_finite(), "exploration std must be finite and non-negative");
        LinearGaussianPolicy { k, sigma }
    }

    pub fn with_gain(&self, k: Mat) -> Self {
        LinearGaussianPolicy { k, sigma: self.sigma }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyAnalysis {
    /// Stationary state covariance.
    pub sigma_k: SymMat,
    pub p_k: SymMat,
    pub cost: f64,
    pub grad: Mat,
    /// Natural gradient direction `(R + BᵀP_KB)K − BᵀP_KA`.
    pub e_k: Mat,
    /// `Φ + σ²BBᵀ`.
    pub phi_sigma: SymMat,
    /// `R + BᵀP_KB`.
    pub gram: SymMat,
    pub rho: f64,
}

/// Relative agreement required between the two cost formulas.
pub const COST_FORMULA_TOL: f64 = 1e-8;

pub fn analyze_policy(inst: &LqrInstance, pol: &LinearGaussianPolicy) -> Result<PolicyAnalysis> {
    inst.check_shapes()?;
    let rho = inst.check_stable(&pol.k)?;
    let f = inst.closed_loop(&pol.k)?;
    let s2 = pol.sigma * pol.sigma;
    let bbt = SymMat::symmetrize(&(&inst.b * &inst.b.transpose()));
    let phi_sigma = inst.phi.add(&bbt.scale(s2));
    let sigma_k = solve_lyapunov(&f, &phi_sigma)?;
    let kt = pol.k.transpose();
    let m = inst.q.add(&SymMat::symmetrize(&(&kt * &(inst.r.as_mat() * &pol.k))));
    let p_k = solve_bellman(&f, &m)?;
    let noise_r = s2 * inst.r.trace();
    let cost_tr = m.inner(&sigma_k) + noise_r;
    let cost_p = p_k.inner(&phi_sigma) + noise_r;
    let scale = cost_tr.abs().max(cost_p.abs()).max(f64::MIN_POSITIVE);
    if (cost_tr - cost_p).abs() > COST_FORMULA_TOL * scale {
        return Err(Error::Numerical(format!(
            "cost formulas disagree: {cost_tr} vs {cost_p}"
        )));
    }
    let bt = inst.b.transpose();
    let btp = &bt * p_k.as_mat();
    let gram = inst.r.add(&SymMat::symmetrize(&(&btp * &inst.b)));
    let e_k = &(gram.as_mat() * &pol.k) - &(&btp * &inst.a);
    let grad = (&e_k * sigma_k.as_mat()).scale(2.0);
    Ok(PolicyAnalysis {
        sigma_k,
        p_k,
        cost: cost_tr,
        grad,
        e_k,
        phi_sigma,
        gram,
        rho,
    })
}

/// Ergodic cost alone.
pub fn cost(inst: &LqrInstance, pol: &LinearGaussianPolicy) -> Result<f64> {
    Ok(analyze_policy(inst, pol)?.cost)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdCheck {
    /// `max |fd − analytic| / max |analytic|` over entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub fd_norm: f64,
    /// Step actually used (halved once if the first step left the stable set).
    pub h: f64,
}

/// Central finite differences of the cost over every gain entry.
pub fn gradient_fd_check(inst: &LqrInstance, pol: &LinearGaussianPolicy, h: f64) -> Result<FdCheck> {
    let an = analyze_policy(inst, pol)?;
    let fd = match fd_gradient(inst, pol, h) {
        Ok(g) => (g, h),
        Err(Error::Unstable { .. }) => (fd_gradient(inst, pol, h / 2.0)?, h / 2.0),
        Err(e) => return Err(e),
    };
    let (g, h) = fd;
    let max_abs_err = g.max_abs_diff(&an.grad);
    let denom = an.grad.max_abs().max(f64::MIN_POSITIVE);
    Ok(FdCheck {
        max_rel_err: max_abs_err / denom,
        max_abs_err,
        analytic_norm: an.grad.frobenius_norm(),
        fd_norm: g.frobenius_norm(),
        h,
    })
}

fn fd_gradient(inst: &LqrInstance, pol: &LinearGaussianPolicy, h: f64) -> Result<Mat> {
    let (rows, cols) = pol.k.shape();
    let mut g = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut kp = pol.k.clone();
            kp[(i, j)] += h;
            let mut km = pol.k.clone();
            km[(i, j)] -= h;
            let cp = cost(inst, &pol.with_gain(kp))?;
            let cm = cost(inst, &pol.with_gain(km))?;
            g[(i, j)] = (cp - cm) / (2.0 * h);
        }
    }
    Ok(g)
}

/// Quadratic state-action value: `Q_K(x, u) = φ(x,u)ᵀδ* − noise − stationary`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueVector {
    /// `[[Q + AᵀPA, AᵀPB], [BᵀPA, R + BᵀPB]]`.
    pub delta: SymMat,
    pub delta_star: Vec<f64>,
    pub cost: f64,
    /// `σ² Tr(R + P_K BBᵀ)`.
    pub noise_offset: f64,
    /// `Tr(P_K Σ_K)`.
    pub stationary_offset: f64,
    pub p_k: SymMat,
    pub state_dim: usize,
}

impl ValueVector {
    pub fn q_value(&self, x: &[f64], u: &[f64]) -> f64 {
        let v: Vec<f64> = x.iter().chain(u).copied().collect();
        self.delta.quad_form(&v) - self.noise_offset - self.stationary_offset
    }

    /// `V_K(x) = xᵀP_Kx − Tr(P_KΣ_K)`.
    pub fn state_value(&self, x: &[f64]) -> f64 {
        self.p_k.quad_form(x) - self.stationary_offset
    }

    /// Natural gradient recovered from the value matrix: `Δ²²K − Δ²¹`.
    pub fn natural_gradient(&self, k: &Mat) -> Mat {
        natural_gradient_from_delta(&self.delta, self.state_dim, k)
    }
}

/// `Δ²²K − Δ²¹` for any symmetric `Δ` over `(x, u)`.
pub fn natural_gradient_from_delta(delta: &SymMat, d: usize, k: &Mat) -> Mat {
    let n = delta.dim();
    let kd = n - d;
    let d22 = delta.block(d, d, kd, kd);
    let d21 = delta.block(d, 0, kd, d);
    &(&d22 * k) - &d21
}

pub fn value_vector(inst: &LqrInstance, pol: &LinearGaussianPolicy) -> Result<ValueVector> {
    let an = analyze_policy(inst, pol)?;
    Ok(value_vector_from(inst, pol, &an))
}

pub fn value_vector_from(inst: &LqrInstance, pol: &LinearGaussianPolicy, an: &PolicyAnalysis) -> ValueVector {
    let d = inst.state_dim();
    let k = inst.action_dim();
    let at = inst.a.transpose();
    let p = an.p_k.as_mat();
    let d11 = inst.q.as_mat() + &(&at * &(p * &inst.a));
    let d12 = &at * &(p * &inst.b);
    let mut delta = Mat::zeros(d + k, d + k);
    delta.set_block(0, 0, &d11);
    delta.set_block(0, d, &d12);
    delta.set_block(d, 0, &d12.transpose());
    delta.set_block(d, d, an.gram.as_mat());
    let delta = SymMat::symmetrize(&delta);
    let bbt = &inst.b * &inst.b.transpose();
    let s2 = pol.sigma * pol.sigma;
    ValueVector {
        delta_star: svec(&delta),
        delta,
        cost: an.cost,
        noise_offset: s2 * (inst.r.trace() + p.inner(&bbt)),
        stationary_offset: an.p_k.inner(&an.sigma_k),
        p_k: an.p_k.clone(),
        state_dim: d,
    }
}

/// Stationary statistics of the pair `v = (x, u)` that define the critic's
/// linear system.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticSystem {
    /// `Θ_K = E[φ(v)(φ(v) − φ(v'))ᵀ]`.
    pub theta: Mat,
    /// `E[φ(v)] = svec(Σ̆)`.
    pub mean_feature: Vec<f64>,
    /// `E[c(v) φ(v)]`.
    pub d_k: Vec<f64>,
    /// Covariance of `v`.
    pub sigma_breve: SymMat,
    /// `v' = K̆ v + noise`.
    pub k_breve: Mat,
    pub cost: f64,
}

impl CriticSystem {
    /// `Ω_K = [[1, 0], [E φ, Θ_K]]`.
    pub fn omega(&self) -> Mat {
        let m = self.theta.rows();
        let mut o = Mat::zeros(m + 1, m + 1);
        o[(0, 0)] = 1.0;
        for i in 0..m {
            o[(i + 1, 0)] = self.mean_feature[i];
        }
        o.set_block(1, 1, &self.theta);
        o
    }

    /// Dual maximizer `ξ(γ) = (γ¹ − C(K), γ¹ E φ + Θ_K γ² − d_K)`; it vanishes
    /// at `γ = (C(K), δ*)`.
    pub fn saddle_residual(&self, gamma1: f64, gamma2: &[f64]) -> (f64, Vec<f64>) {
        let tg = self.theta.mul_vec(gamma2);
        let xi2 = (0..tg.len())
            .map(|i| gamma1 * self.mean_feature[i] + tg[i] - self.d_k[i])
            .collect();
        (gamma1 - self.cost, xi2)
    }

    /// Smallest singular value of `Ω_K`, the conditioning constant of the
    /// critic problem.
    pub fn omega_min_singular_value(&self) -> f64 {
        self.omega().min_singular_value()
    }
}

/// `Σ̆_K = [[Σ, −ΣKᵀ], [−KΣ, KΣKᵀ + σ²I]]`.
pub fn sigma_breve(an: &PolicyAnalysis, pol: &LinearGaussianPolicy) -> SymMat {
    let d = an.sigma_k.dim();
    let k = pol.k.rows();
    let s = an.sigma_k.as_mat();
    let ks = &pol.k * s;
    let mut m = Mat::zeros(d + k, d + k);
    m.set_block(0, 0, s);
    m.set_block(0, d, &ks.transpose().scale(-1.0));
    m.set_block(d, 0, &ks.scale(-1.0));
    let kskt = &(&ks * &pol.k.transpose()) + &Mat::identity(k).scale(pol.sigma * pol.sigma);
    m.set_block(d, d, &kskt);
    SymMat::symmetrize(&m)
}

/// `K̆ = [[A, B], [−KA, −KB]]`.
pub fn k_breve(inst: &LqrInstance, k: &Mat) -> Mat {
    let d = inst.state_dim();
    let m = inst.action_dim();
    let mut out = Mat::zeros(d + m, d + m);
    out.set_block(0, 0, &inst.a);
    out.set_block(0, d, &inst.b);
    out.set_block(d, 0, &(k * &inst.a).scale(-1.0));
    out.set_block(d, d, &(k * &inst.b).scale(-1.0));
    out
}

/// `Θ_K = 2 (Σ̆ ⊗_s Σ̆)(I − K̆ᵀ ⊗_s K̆ᵀ)`; the factor 2 is the fourth moment of
/// a Gaussian vector in the scaled-`svec` basis.
pub fn theta_matrix(inst: &LqrInstance, pol: &LinearGaussianPolicy) -> Result<Mat> {
    Ok(critic_system(inst, pol)?.theta)
}

pub fn critic_system(inst: &LqrInstance, pol: &LinearGaussianPolicy) -> Result<CriticSystem> {
    if pol.sigma <= 0.0 {
        return Err(Error::InvalidArgument(
            "exploration std must be positive: the state-action covariance is singular otherwise".into(),
        ));
    }
    let an = analyze_policy(inst, pol)?;
    Ok(critic_system_from(inst, pol, &an))
}

pub fn critic_system_from(inst: &LqrInstance, pol: &LinearGaussianPolicy, an: &PolicyAnalysis) -> CriticSystem {
    let sb = sigma_breve(an, pol);
    let kb = k_breve(inst, &pol.k);
    let kbt = kb.transpose();
    let ss = sym_kron(&sb, &sb).expect("square");
    let kk = sym_kron(&kbt, &kbt).expect("square");
    let n = ss.rows();
    let theta = (&ss * &(&Mat::identity(n) - &kk)).scale(2.0);
    let mean_feature = svec(&sb);
    let dmat = SymMat::block_diag(&[inst.q.clone(), inst.r.clone()]);
    let sds = SymMat::symmetrize(&(&(sb.as_mat() * dmat.as_mat()) * sb.as_mat()));
    let tr = sb.inner(&dmat);
    let d_k = svec(&sds)
        .into_iter()
        .zip(&mean_feature)
        .map(|(a, m)| 2.0 * a + tr * m)
        .collect();
    CriticSystem {
        theta,
        mean_feature,
        d_k,
        sigma_breve: sb,
        k_breve: kb,
        cost: an.cost,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomBounds {
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
    pub holds: bool,
}

/// Absolute slack allowed in the gradient-domination sandwich.
pub const DOM_SLACK: f64 = 1e-8;

/// `σ_min(Φ)/‖R+BᵀP_KB‖·Tr(EᵀE) ≤ C(K) − C(K*) ≤ ‖Σ_{K*}‖/σ_min(R)·Tr(EᵀE)`.
pub fn dom_bounds(inst: &LqrInstance, pol: &LinearGaussianPolicy, star: &PolicyAnalysis) -> Result<DomBounds> {
    let an = analyze_policy(inst, pol)?;
    let tee = an.e_k.inner(&an.e_k);
    let lower = inst.phi.min_eigenvalue() / an.gram.max_eigenvalue() * tee;
    let upper = star.sigma_k.max_eigenvalue() / inst.r.min_eigenvalue() * tee;
    let gap = an.cost - star.cost;
    Ok(DomBounds {
        lower,
        upper,
        gap,
        holds: lower <= gap + DOM_SLACK && gap <= upper + DOM_SLACK,
    })
}

/// `A_{K,K'}(x) = 2xᵀ(K'−K)ᵀE_Kx + xᵀ(K'−K)ᵀ(R+BᵀP_KB)(K'−K)x`.
pub fn advantage(an: &PolicyAnalysis, k: &Mat, k_prime: &Mat, x: &[f64]) -> f64 {
    let dk = k_prime - k;
    let dkx = dk.mul_vec(x);
    let ex = an.e_k.mul_vec(x);
    2.0 * crate::matlin::dot(&dkx, &ex) + an.gram.quad_form(&dkx)
}

/// `−xᵀE_Kᵀ(R+BᵀP_KB)⁻¹E_Kx`, a lower bound on every advantage at `x`.
pub fn advantage_lower_bound(an: &PolicyAnalysis, x: &[f64]) -> Result<f64> {
    let ex = an.e_k.mul_vec(x);
    let sol = an.gram.solve(&Mat::column(&ex))?;
    Ok(-crate::matlin::dot(&ex, sol.as_slice()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageCheck {
    pub advantage_sum: f64,
    /// `xᵀP_{K'}x − xᵀP_Kx`.
    pub p_difference: f64,
    pub residual: f64,
    pub horizon: usize,
    /// `‖P_{K'} − P_K‖·‖x'_T‖²`, which bounds the omitted tail.
    pub tail_bound: f64,
}

/// Horizon at which `ρ^T` falls below `1e-10`.
pub fn advantage_horizon(rho: f64) -> usize {
    if rho <= 0.0 {
        return 1;
    }
    ((1e-10f64).ln() / rho.ln()).ceil().max(1.0) as usize
}

/// Sums advantages along `x'_{t+1} = (A − BK')x'_t` from `x0` and compares
/// with `x0ᵀ(P_{K'} − P_K)x0`.
pub fn advantage_identity_check(inst: &LqrInstance, k: &Mat, k_prime: &Mat, x0: &[f64], horizon: Option<usize>) -> Result<AdvantageCheck> {
    if x0.len() != inst.state_dim() {
        return Err(Error::dim("advantage_identity_check", "x0 has wrong length"));
    }
    let an = analyze_policy(inst, &LinearGaussianPolicy::new(k.clone(), 0.0))?;
    let an_p = analyze_policy(inst, &LinearGaussianPolicy::new(k_prime.clone(), 0.0))?;
    let horizon = horizon.unwrap_or_else(|| advantage_horizon(an_p.rho));
    let f = inst.closed_loop(k_prime)?;
    let mut x = x0.to_vec();
    let mut sum = 0.0;
    for _ in 0..horizon {
        sum += advantage(&an, k, k_prime, &x);
        x = f.mul_vec(&x);
    }
    let dp = an_p.p_k.sub(&an.p_k);
    let p_difference = dp.quad_form(x0);
    let xt2 = crate::matlin::dot(&x, &x);
    Ok(AdvantageCheck {
        advantage_sum: sum,
        p_difference,
        residual: (sum - p_difference).abs(),
        horizon,
        tail_bound: dp.spectral_norm() * xt2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub sigma_norm: f64,
    /// `C(K)/σ_min(Q)`.
    pub sigma_bound: f64,
    pub sigma_holds: bool,
    pub p_norm: f64,
    /// `C(K)/σ_min(Φ)`.
    pub p_bound: f64,
    pub p_holds: bool,
}

/// `‖Σ_K‖ ≤ C(K)/σ_min(Q)` and `‖P_K‖ ≤ C(K)/σ_min(Φ)`.
pub fn diagnostics_bound_mats(inst: &LqrInstance, pol: &LinearGaussianPolicy) -> Result<BoundCheck> {
    let an = analyze_policy(inst, pol)?;
    let sigma_norm = an.sigma_k.max_eigenvalue();
    let p_norm = an.p_k.max_eigenvalue();
    let sigma_bound = an.cost / inst.q.min_eigenvalue();
    let p_bound = an.cost / inst.phi.min_eigenvalue();
    Ok(BoundCheck {
        sigma_norm,
        sigma_bound,
        sigma_holds: sigma_norm <= sigma_bound * (1.0 + 1e-12),
        p_norm,
        p_bound,
        p_holds: p_norm <= p_bound * (1.0 + 1e-12),
    })
}
