//! Projected primal-dual gradient temporal-difference evaluation of a
//! linear-Gaussian policy from one trajectory.
//!
//! The critic solves the saddle-point problem
//! `min_γ max_ξ (γ¹ − C)ξ¹ + ⟨γ¹E[φ] + Θγ² − d, ξ²⟩ − ½‖ξ‖²`
//! whose solution is `γ = (C(K), δ*_K)`, using one sample of `(φ, φ', c)` per
//! step and step sizes `α/√t`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlin::{dot, norm2, smat, svec_len, Mat};
use crate::oracle::{natural_gradient_from_delta, LinearGaussianPolicy, LqrInstance, ValueVector};
use crate::sim::{Chain, RngStream, Start};

/// `svec(vvᵀ)`, written directly from `v`.
pub fn feature(v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(svec_len(v.len()));
    feature_into(v, &mut out);
    out
}

fn feature_into(v: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let s = std::f64::consts::SQRT_2;
    for i in 0..v.len() {
        out.push(v[i] * v[i]);
        for j in i + 1..v.len() {
            out.push(s * v[i] * v[j]);
        }
    }
}

/// Radii of the primal set `{0 ≤ γ¹ ≤ Γ¹, ‖γ²‖ ≤ Γ²}` and the dual set
/// `{|ξ¹| ≤ Ξ¹, ‖ξ²‖ ≤ Ξ²}`. Infinite radii disable the projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Radii {
    pub gamma1: f64,
    pub gamma2: f64,
    pub xi1: f64,
    pub xi2: f64,
}

/// `Γ¹ = Ξ¹ = C(K₀)`,
/// `Γ² = ‖Q‖_F + ‖R‖_F + √d/σ_min(Φ)·(‖A‖_F² + ‖B‖_F²)·C(K₀)`,
/// `Ξ² = c·(1 + ‖K‖_F²)²·Γ²·σ_min(Q)⁻²·C(K₀)²`.
pub fn default_radii(inst: &LqrInstance, pol: &LinearGaussianPolicy, c_k0: f64, xi2_constant: f64) -> Radii {
    let d = inst.state_dim() as f64;
    let gamma2 = inst.q.frobenius_norm()
        + inst.r.frobenius_norm()
        + d.sqrt() / inst.phi.min_eigenvalue() * (inst.a.frobenius_norm().powi(2) + inst.b.frobenius_norm().powi(2)) * c_k0;
    let kf = pol.k.frobenius_norm().powi(2);
    let q_min = inst.q.min_eigenvalue();
    let xi2 = xi2_constant * (1.0 + kf).powi(2) * gamma2 / (q_min * q_min) * c_k0 * c_k0;
    Radii {
        gamma1: c_k0,
        gamma2,
        xi1: c_k0,
        xi2: if xi2.is_nan() { f64::INFINITY } else { xi2 },
    }
}

/// Whether `(C(K), δ*)` lies in the primal set.
pub fn primal_feasible(radii: &Radii, vv: &ValueVector) -> bool {
    vv.cost <= radii.gamma1 * (1.0 + 1e-12) && norm2(&vv.delta_star) <= radii.gamma2
}

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_XI2_CONSTANT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtdConfig {
    pub t_inner: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_xi2_constant")]
    pub xi2_constant: f64,
    /// Overrides the default radii.
    #[serde(default)]
    pub radii: Option<Radii>,
    /// Record a trace row every this many steps (0 disables the trace).
    #[serde(default)]
    pub trace_every: usize,
    /// Start at zero and discard this many transitions instead of drawing
    /// the start from the stationary covariance.
    #[serde(default)]
    pub burn_in: Option<usize>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_xi2_constant() -> f64 {
    DEFAULT_XI2_CONSTANT
}

impl GtdConfig {
    pub fn new(t_inner: usize) -> Self {
        GtdConfig {
            t_inner,
            alpha: DEFAULT_ALPHA,
            xi2_constant: DEFAULT_XI2_CONSTANT,
            radii: None,
            trace_every: 0,
            burn_in: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_inner == 0 {
            return Err(Error::InvalidArgument("t_inner must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.xi2_constant > 0.0) {
            return Err(Error::InvalidArgument("xi2_constant must be positive".into()));
        }
        if let Some(r) = &self.radii {
            if [r.gamma1, r.gamma2, r.xi1, r.xi2].iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidArgument("radii must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Primal and dual iterates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtdState {
    pub gamma1: f64,
    pub gamma2: Vec<f64>,
    pub xi1: f64,
    pub xi2: Vec<f64>,
}

impl GtdState {
    pub fn zeros(m: usize) -> Self {
        GtdState {
            gamma1: 0.0,
            gamma2: vec![0.0; m],
            xi1: 0.0,
            xi2: vec![0.0; m],
        }
    }

    /// Whether the state lies in both sets.
    pub fn within(&self, r: &Radii) -> bool {
        (0.0..=r.gamma1).contains(&self.gamma1)
            && norm2(&self.gamma2) <= r.gamma2 * (1.0 + 1e-12)
            && self.xi1.abs() <= r.xi1
            && norm2(&self.xi2) <= r.xi2 * (1.0 + 1e-12)
    }
}

/// Number of iterations at which each projection changed the iterate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionHits {
    pub gamma1: usize,
    pub gamma2: usize,
    pub xi1: usize,
    pub xi2: usize,
}

impl ProjectionHits {
    pub fn total(&self) -> usize {
        self.gamma1 + self.gamma2 + self.xi1 + self.xi2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub gamma1: f64,
    /// Relative error of the running average against the oracle.
    pub err_delta: Option<f64>,
    pub proj_hits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticDiagnostics {
    /// `‖δ̂ − δ*‖ / ‖δ*‖` when an oracle is supplied.
    pub delta_err: Option<f64>,
    /// `|Ĉ − C(K)| / C(K)` when an oracle is supplied.
    pub cost_err: Option<f64>,
    pub projection_hits: ProjectionHits,
    pub radii: Radii,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticOutput {
    pub c_hat: f64,
    pub delta_hat: Vec<f64>,
    /// `Δ̂²²K − Δ̂²¹` with `Δ̂ = smat(δ̂)`.
    pub e_hat: Mat,
    /// Averaged primal and dual iterates, usable as the next warm start.
    pub averaged: GtdState,
    pub diagnostics: CriticDiagnostics,
}

impl CriticOutput {
    /// Trace as CSV: `t, gamma1, err_delta, proj_hits`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("t,gamma1,err_delta,proj_hits\n");
        for r in &self.diagnostics.trace {
            let err = r.err_delta.map(|e| format!("{e:?}")).unwrap_or_default();
            writeln!(out, "{},{:?},{},{}", r.t, r.gamma1, err, r.proj_hits).unwrap();
        }
        out
    }
}

fn project_ball(v: &mut [f64], radius: f64) -> bool {
    let n = norm2(v);
    if n > radius {
        let s = radius / n;
        v.iter_mut().for_each(|x| *x *= s);
        true
    } else {
        false
    }
}

fn project(state: &mut GtdState, r: &Radii, hits: &mut ProjectionHits) {
    let g1 = state.gamma1.clamp(0.0, r.gamma1);
    if g1 != state.gamma1 {
        hits.gamma1 += 1;
        state.gamma1 = g1;
    }
    if project_ball(&mut state.gamma2, r.gamma2) {
        hits.gamma2 += 1;
    }
    let x1 = state.xi1.clamp(-r.xi1, r.xi1);
    if x1 != state.xi1 {
        hits.xi1 += 1;
        state.xi1 = x1;
    }
    if project_ball(&mut state.xi2, r.xi2) {
        hits.xi2 += 1;
    }
}

/// Evaluates `pol` on `inst` from one stationary trajectory of length
/// `cfg.t_inner`.
///
/// `c_k0` sets the default radii (the cost of the initial policy of the
/// surrounding training run). `init` replaces the zero initialization; it is
/// projected onto the sets first. `oracle` only feeds diagnostics.
pub fn gtd_evaluate(
    inst: &LqrInstance,
    pol: &LinearGaussianPolicy,
    cfg: &GtdConfig,
    c_k0: f64,
    stream: RngStream,
    init: Option<&GtdState>,
    oracle: Option<&ValueVector>,
) -> Result<CriticOutput> {
    cfg.validate()?;
    if pol.sigma <= 0.0 {
        return Err(Error::InvalidArgument(
            "exploration std must be positive for the critic to identify the value vector".into(),
        ));
    }
    let n = inst.state_dim() + inst.action_dim();
    let m = svec_len(n);
    let radii = cfg
        .radii
        .unwrap_or_else(|| default_radii(inst, pol, c_k0, cfg.xi2_constant));
    let mut hits = ProjectionHits::default();
    let mut s = match init {
        Some(st) => {
            if st.gamma2.len() != m || st.xi2.len() != m {
                return Err(Error::dim("gtd_evaluate", "warm start has wrong feature dimension"));
            }
            st.clone()
        }
        None => GtdState::zeros(m),
    };
    project(&mut s, &radii, &mut ProjectionHits::default());

    let mut chain = match cfg.burn_in {
        None => Chain::new(inst, pol, stream, Start::Stationary)?,
        Some(b) => {
            let mut c = Chain::new(inst, pol, stream, Start::State(vec![0.0; inst.state_dim()]))?;
            for _ in 0..b {
                c.advance();
            }
            c
        }
    };
    let mut phi = Vec::with_capacity(m);
    let mut phi_next = Vec::with_capacity(m);
    let mut v = vec![0.0; n];
    let d = inst.state_dim();
    let mut sum_w = 0.0;
    let mut avg = GtdState::zeros(m);
    let mut trace = Vec::new();
    let mut diff = vec![0.0; m];
    for t in 1..=cfg.t_inner {
        let tr = chain.advance();
        v[..d].copy_from_slice(&tr.x);
        v[d..].copy_from_slice(&tr.u);
        feature_into(&v, &mut phi);
        v[..d].copy_from_slice(&tr.x_next);
        v[d..].copy_from_slice(&tr.u_next);
        feature_into(&v, &mut phi_next);
        for i in 0..m {
            diff[i] = phi[i] - phi_next[i];
        }
        let c = tr.cost;
        let a = cfg.alpha / (t as f64).sqrt();
        let phi_xi2 = dot(&phi, &s.xi2);
        let diff_g2 = dot(&diff, &s.gamma2);

        let g1 = s.gamma1 - a * (s.xi1 + phi_xi2);
        let x1 = s.xi1 + a * (s.gamma1 - c - s.xi1);
        for i in 0..m {
            let g2 = s.gamma2[i] - a * phi_xi2 * diff[i];
            let x2 = s.xi2[i] + a * (s.gamma1 * phi[i] + phi[i] * diff_g2 - c * phi[i] - s.xi2[i]);
            s.gamma2[i] = g2;
            s.xi2[i] = x2;
        }
        s.gamma1 = g1;
        s.xi1 = x1;
        project(&mut s, &radii, &mut hits);
        if !(s.gamma1.is_finite() && s.xi1.is_finite()) {
            return Err(Error::Numerical(format!("critic iterates diverged at step {t}")));
        }

        sum_w += a;
        let w = a / sum_w;
        avg.gamma1 += w * (s.gamma1 - avg.gamma1);
        avg.xi1 += w * (s.xi1 - avg.xi1);
        for i in 0..m {
            avg.gamma2[i] += w * (s.gamma2[i] - avg.gamma2[i]);
            avg.xi2[i] += w * (s.xi2[i] - avg.xi2[i]);
        }
        if cfg.trace_every > 0 && (t % cfg.trace_every == 0 || t == cfg.t_inner) {
            trace.push(TraceRow {
                t,
                gamma1: avg.gamma1,
                err_delta: oracle.map(|o| relative_error(&avg.gamma2, &o.delta_star)),
                proj_hits: hits.total(),
            });
        }
    }

    let delta = smat(&avg.gamma2)?;
    let e_hat = natural_gradient_from_delta(&delta, d, &pol.k);
    Ok(CriticOutput {
        c_hat: avg.gamma1,
        delta_hat: avg.gamma2.clone(),
        e_hat,
        diagnostics: CriticDiagnostics {
            delta_err: oracle.map(|o| relative_error(&avg.gamma2, &o.delta_star)),
            cost_err: oracle.map(|o| (avg.gamma1 - o.cost).abs() / o.cost.abs().max(f64::MIN_POSITIVE)),
            projection_hits: hits,
            radii,
            trace,
        },
        averaged: avg,
    })
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    num / norm2(b).max(f64::MIN_POSITIVE)
}
