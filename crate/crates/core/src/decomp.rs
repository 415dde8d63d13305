//! Reduction of a partially-exchangeable system to `L` representative-agent
//! systems (deviations from the subpopulation means) plus one mean-field
//! system, the coordinate change between the two views, and the composition
//! of auxiliary gains into one global gain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlin::{solve_lyapunov, Mat, SymMat};
use crate::oracle::{analyze_policy, LinearGaussianPolicy, LqrInstance};
use crate::sysmodel::{default_exchangeability_tol, verify_partial_exchangeability, GlobalLqrSystem, SubpopulationPartition};

/// Representative blocks of a partially-exchangeable system.
///
/// `*_self[l]` is the block an agent of subpopulation `l` applies to itself;
/// `*_cross[l][k]` is the block it applies to any *other* agent of
/// subpopulation `k` (including `k = l`).
#[derive(Clone, Debug, PartialEq)]
pub struct ExchangeableBlocks {
    pub a_self: Vec<Mat>,
    pub a_cross: Vec<Vec<Mat>>,
    pub b_self: Vec<Mat>,
    pub b_cross: Vec<Vec<Mat>>,
    pub q_self: Vec<Mat>,
    pub q_cross: Vec<Vec<Mat>>,
    pub r_self: Vec<Mat>,
    pub r_cross: Vec<Vec<Mat>>,
}

/// Raw auxiliary matrices before validation.
#[derive(Clone, Debug)]
pub struct AuxiliaryMatrices {
    pub a_l: Vec<Mat>,
    pub b_l: Vec<Mat>,
    pub q_l: Vec<Mat>,
    pub r_l: Vec<Mat>,
    pub a_bar: Mat,
    pub b_bar: Mat,
    pub q_eff: Mat,
    pub r_eff: Mat,
}

fn tile_one(p: &SubpopulationPartition, row_dims: &[usize], col_dims: &[usize], selfs: &[Mat], cross: &[Vec<Mat>]) -> Mat {
    let offsets = |dims: &[usize]| -> Vec<Vec<usize>> {
        let mut off = 0;
        (0..p.num_subpopulations())
            .map(|l| {
                (0..p.size(l))
                    .map(|_| {
                        let o = off;
                        off += dims[l];
                        o
                    })
                    .collect()
            })
            .collect()
    };
    let ro = offsets(row_dims);
    let co = offsets(col_dims);
    let rows = p.agents().map(|(l, _)| row_dims[l]).sum();
    let cols = p.agents().map(|(l, _)| col_dims[l]).sum();
    let mut m = Mat::zeros(rows, cols);
    for (l, i) in p.agents() {
        for (k, j) in p.agents() {
            let block = if l == k && i == j { &selfs[l] } else { &cross[l][k] };
            m.set_block(ro[l][i], co[k][j], block);
        }
    }
    m
}

fn family(p: &SubpopulationPartition, selfs: &[Mat], cross: &[Vec<Mat>], symmetric: bool) -> (Vec<Mat>, Mat) {
    let n_sub = p.num_subpopulations();
    let local: Vec<Mat> = (0..n_sub).map(|l| &selfs[l] - &cross[l][l]).collect();
    let rows: Vec<Mat> = (0..n_sub)
        .map(|l| {
            let parts: Vec<Mat> = (0..n_sub)
                .map(|k| {
                    // Costs couple both sides of a pair, dynamics only the
                    // influencing side.
                    let w = if symmetric { p.size(l) * p.size(k) } else { p.size(k) };
                    cross[l][k].scale(w as f64)
                })
                .collect();
            Mat::hstack(&parts)
        })
        .collect();
    let stacked = Mat::vstack(&rows);
    let diag = if symmetric {
        let scaled: Vec<Mat> = local.iter().enumerate().map(|(l, m)| m.scale(p.size(l) as f64)).collect();
        Mat::block_diag(&scaled)
    } else {
        Mat::block_diag(&local)
    };
    (local, &diag + &stacked)
}

impl ExchangeableBlocks {
    /// Rebuilds the global `(A, B, Q, R)` from the representative blocks.
    pub fn tile(&self, p: &SubpopulationPartition) -> (Mat, Mat, Mat, Mat) {
        let d = p.state_dims();
        let k = p.action_dims();
        (
            tile_one(p, d, d, &self.a_self, &self.a_cross),
            tile_one(p, d, k, &self.b_self, &self.b_cross),
            tile_one(p, d, d, &self.q_self, &self.q_cross),
            tile_one(p, k, k, &self.r_self, &self.r_cross),
        )
    }

    /// `A_l = a^l − ā^{l,l}`, `Ā = diag(A_l) + [|N^k| ā^{l,k}]_{l,k}`, and the
    /// same for `B`; `Q_l = q^l − q̄^{l,l}`, `Q_eff = [|N^l||N^k| q̄^{l,k}] +
    /// diag(|N^l| Q_l)`, and the same for `R`.
    pub fn auxiliary_matrices(&self, p: &SubpopulationPartition) -> AuxiliaryMatrices {
        let (a_l, a_bar) = family(p, &self.a_self, &self.a_cross, false);
        let (b_l, b_bar) = family(p, &self.b_self, &self.b_cross, false);
        let (q_l, q_eff) = family(p, &self.q_self, &self.q_cross, true);
        let (r_l, r_eff) = family(p, &self.r_self, &self.r_cross, true);
        AuxiliaryMatrices {
            a_l,
            b_l,
            q_l,
            r_l,
            a_bar,
            b_bar,
            q_eff,
            r_eff,
        }
    }
}

/// Reads representative blocks off the first agents of each subpopulation.
/// Singleton subpopulations get zero self-cross blocks.
pub fn extract_blocks(sys: &GlobalLqrSystem) -> Result<ExchangeableBlocks> {
    let report = verify_partial_exchangeability(sys, default_exchangeability_tol(sys))?;
    if !report.holds {
        return Err(Error::NotExchangeable(Box::new(report)));
    }
    let p = sys.partition();
    let n_sub = p.num_subpopulations();
    let d = p.state_dims();
    let k = p.action_dims();
    let read = |m: &Mat, rows: &dyn Fn(usize, usize) -> usize, cols: &dyn Fn(usize, usize) -> usize, rd: &[usize], cd: &[usize]| {
        let selfs: Vec<Mat> = (0..n_sub).map(|l| m.block(rows(l, 0), cols(l, 0), rd[l], cd[l])).collect();
        let cross: Vec<Vec<Mat>> = (0..n_sub)
            .map(|l| {
                (0..n_sub)
                    .map(|j| {
                        if l != j {
                            m.block(rows(l, 0), cols(j, 0), rd[l], cd[j])
                        } else if p.size(l) > 1 {
                            m.block(rows(l, 0), cols(l, 1), rd[l], cd[l])
                        } else {
                            Mat::zeros(rd[l], cd[l])
                        }
                    })
                    .collect()
            })
            .collect();
        (selfs, cross)
    };
    let xs = |l: usize, i: usize| p.agent_state_offset(l, i);
    let us = |l: usize, i: usize| p.agent_action_offset(l, i);
    let (a_self, a_cross) = read(sys.a(), &xs, &xs, d, d);
    let (b_self, b_cross) = read(sys.b(), &xs, &us, d, k);
    let (q_self, q_cross) = read(sys.q(), &xs, &xs, d, d);
    let (r_self, r_cross) = read(sys.r(), &us, &us, k, k);
    Ok(ExchangeableBlocks {
        a_self,
        a_cross,
        b_self,
        b_cross,
        q_self,
        q_cross,
        r_self,
        r_cross,
    })
}

/// Decoupled dynamics of one representative agent's deviation from its
/// subpopulation mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxiliarySubsystem {
    #[serde(rename = "A_l")]
    pub a: Mat,
    #[serde(rename = "B_l")]
    pub b: Mat,
    #[serde(rename = "Q_l")]
    pub q: SymMat,
    #[serde(rename = "R_l")]
    pub r: SymMat,
    /// Marginal covariance of one agent's transformed noise.
    #[serde(rename = "Phi_l")]
    pub phi: SymMat,
    pub n_agents: usize,
}

impl AuxiliarySubsystem {
    /// A single agent has no deviation from its own mean: the state is
    /// identically zero and there is nothing to train.
    pub fn is_degenerate(&self) -> bool {
        self.n_agents == 1
    }

    pub fn instance(&self) -> LqrInstance {
        LqrInstance::new_unchecked(self.a.clone(), self.b.clone(), self.q.clone(), self.r.clone(), self.phi.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanFieldSystem {
    #[serde(rename = "A_bar")]
    pub a_bar: Mat,
    #[serde(rename = "B_bar")]
    pub b_bar: Mat,
    #[serde(rename = "Q_eff")]
    pub q_eff: SymMat,
    #[serde(rename = "R_eff")]
    pub r_eff: SymMat,
    #[serde(rename = "Phi_bar")]
    pub phi_bar: SymMat,
}

impl MeanFieldSystem {
    pub fn instance(&self) -> LqrInstance {
        LqrInstance::new_unchecked(
            self.a_bar.clone(),
            self.b_bar.clone(),
            self.q_eff.clone(),
            self.r_eff.clone(),
            self.phi_bar.clone(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxiliaryEnsemble {
    pub subsystems: Vec<AuxiliarySubsystem>,
    pub mean_field: MeanFieldSystem,
    pub partition: SubpopulationPartition,
}

impl AuxiliaryEnsemble {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: AuxiliaryEnsemble = serde_json::from_str(s)?;
        e.validate()?;
        Ok(e)
    }

    fn validate(&self) -> Result<()> {
        let p = &self.partition;
        if self.subsystems.len() != p.num_subpopulations() {
            return Err(Error::dim("AuxiliaryEnsemble", "one subsystem per subpopulation is required"));
        }
        for (l, s) in self.subsystems.iter().enumerate() {
            let (d, k) = (p.state_dim(l), p.action_dim(l));
            if s.a.shape() != (d, d) || s.b.shape() != (d, k) || s.q.dim() != d || s.r.dim() != k || s.phi.dim() != d {
                return Err(Error::dim("AuxiliaryEnsemble", format!("subsystem {l} does not match the partition")));
            }
            if s.n_agents != p.size(l) {
                return Err(Error::dim("AuxiliaryEnsemble", format!("subsystem {l} agent count differs")));
            }
        }
        let (d, k) = (p.mean_state_dim(), p.mean_action_dim());
        let m = &self.mean_field;
        if m.a_bar.shape() != (d, d) || m.b_bar.shape() != (d, k) || m.q_eff.dim() != d || m.r_eff.dim() != k || m.phi_bar.dim() != d {
            return Err(Error::dim("AuxiliaryEnsemble", "mean-field system does not match the partition"));
        }
        Ok(())
    }

    /// Subpopulations whose auxiliary system is trained (more than one agent).
    pub fn active_subsystems(&self) -> impl Iterator<Item = (usize, &AuxiliarySubsystem)> {
        self.subsystems.iter().enumerate().filter(|(_, s)| !s.is_degenerate())
    }
}

fn require_psd(name: String, m: &SymMat) -> Result<()> {
    let ev = m.min_eigenvalue();
    if ev < -1e-10 * m.max_abs().max(1.0) {
        return Err(Error::Assumption {
            matrix: name,
            requirement: "positive semi-definite",
            min_eigenvalue: ev,
        });
    }
    Ok(())
}

/// Assembles the auxiliary ensemble. Noise covariances are the exact
/// marginals of the transformed noise: `Φ_l = (1 − 1/|N^l|) W_l` and
/// `Φ̄ = diag(W_l / |N^l|)`.
pub fn build_auxiliary(sys: &GlobalLqrSystem) -> Result<AuxiliaryEnsemble> {
    let blocks = extract_blocks(sys)?;
    let p = sys.partition();
    let aux = blocks.auxiliary_matrices(p);
    let mut subsystems = Vec::with_capacity(p.num_subpopulations());
    for l in 0..p.num_subpopulations() {
        let n = p.size(l);
        let q = SymMat::symmetrize(&aux.q_l[l]);
        let r = SymMat::symmetrize(&aux.r_l[l]);
        if n > 1 {
            require_psd(format!("Q_{l}"), &q)?;
            require_psd(format!("R_{l}"), &r)?;
        }
        subsystems.push(AuxiliarySubsystem {
            a: aux.a_l[l].clone(),
            b: aux.b_l[l].clone(),
            q,
            r,
            phi: sys.w_noise()[l].scale(1.0 - 1.0 / n as f64),
            n_agents: n,
        });
    }
    let q_eff = SymMat::symmetrize(&aux.q_eff);
    let r_eff = SymMat::symmetrize(&aux.r_eff);
    require_psd("Q_eff".into(), &q_eff)?;
    require_psd("R_eff".into(), &r_eff)?;
    let phi_blocks: Vec<SymMat> = (0..p.num_subpopulations())
        .map(|l| sys.w_noise()[l].scale(1.0 / p.size(l) as f64))
        .collect();
    Ok(AuxiliaryEnsemble {
        subsystems,
        mean_field: MeanFieldSystem {
            a_bar: aux.a_bar,
            b_bar: aux.b_bar,
            q_eff,
            r_eff,
            phi_bar: SymMat::block_diag(&phi_blocks),
        },
        partition: p.clone(),
    })
}

/// Per-agent deviations from the subpopulation means plus the stacked means.
/// Agents appear in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateBundle {
    pub tilde_states: Vec<Vec<f64>>,
    pub bar_state: Vec<f64>,
    pub tilde_actions: Vec<Vec<f64>>,
    pub bar_action: Vec<f64>,
    pub partition: SubpopulationPartition,
}

/// Per-subpopulation means of a global vector laid out agent by agent.
fn split_means(v: &[f64], dims: &[usize], p: &SubpopulationPartition) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut bar = Vec::with_capacity(dims.iter().sum());
    let mut tilde = Vec::with_capacity(p.num_agents());
    let mut off = 0;
    for l in 0..p.num_subpopulations() {
        let (n, d) = (p.size(l), dims[l]);
        let chunk = &v[off..off + n * d];
        let mean: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|i| chunk[i * d + c]).sum::<f64>() / n as f64)
            .collect();
        for i in 0..n {
            tilde.push((0..d).map(|c| chunk[i * d + c] - mean[c]).collect());
        }
        bar.extend_from_slice(&mean);
        off += n * d;
    }
    (tilde, bar)
}

/// `x̄^l = mean of x^i over N^l`, `x̃^i = x^i − x̄^l`, likewise for `u`.
pub fn to_coordinates(p: &SubpopulationPartition, x: &[f64], u: &[f64]) -> Result<CoordinateBundle> {
    if x.len() != p.total_state_dim() || u.len() != p.total_action_dim() {
        return Err(Error::dim(
            "to_coordinates",
            format!("expected x of {} and u of {}", p.total_state_dim(), p.total_action_dim()),
        ));
    }
    let (tilde_states, bar_state) = split_means(x, p.state_dims(), p);
    let (tilde_actions, bar_action) = split_means(u, p.action_dims(), p);
    Ok(CoordinateBundle {
        tilde_states,
        bar_state,
        tilde_actions,
        bar_action,
        partition: p.clone(),
    })
}

/// Tolerance on subpopulation sums of tilde coordinates.
pub const ZERO_MEAN_TOL: f64 = 1e-8;

impl CoordinateBundle {
    fn check_side(&self, tilde: &[Vec<f64>], bar: &[f64], dims: &[usize], what: &str) -> Result<()> {
        let p = &self.partition;
        if tilde.len() != p.num_agents() || bar.len() != dims.iter().sum::<usize>() {
            return Err(Error::dim("CoordinateBundle", format!("{what} has wrong shape")));
        }
        let mut idx = 0;
        for l in 0..p.num_subpopulations() {
            let mut sum = vec![0.0; dims[l]];
            let mut scale: f64 = 1.0;
            for _ in 0..p.size(l) {
                let t = &tilde[idx];
                if t.len() != dims[l] {
                    return Err(Error::dim("CoordinateBundle", format!("{what} agent {idx} has wrong length")));
                }
                for (s, v) in sum.iter_mut().zip(t) {
                    *s += v;
                    scale = scale.max(v.abs());
                }
                idx += 1;
            }
            let dev = sum.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
            if dev > ZERO_MEAN_TOL * scale {
                return Err(Error::Consistency {
                    what: format!("{what} deviations of subpopulation {l} do not sum to zero"),
                    deviation: dev,
                });
            }
        }
        Ok(())
    }

    /// Shape and zero-mean checks.
    pub fn validate(&self) -> Result<()> {
        self.check_side(&self.tilde_states, &self.bar_state, self.partition.state_dims(), "state")?;
        self.check_side(&self.tilde_actions, &self.bar_action, self.partition.action_dims(), "action")
    }

    /// Deviation `x̃^i` and mean `x̄^l` of agent `i` of subpopulation `l`.
    pub fn agent_index(&self, l: usize, i: usize) -> usize {
        self.partition.sizes()[..l].iter().sum::<usize>() + i
    }
}

fn join(tilde: &[Vec<f64>], bar: &[f64], dims: &[usize], p: &SubpopulationPartition) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.agents().map(|(l, _)| dims[l]).sum());
    let mut bar_off = 0;
    let mut idx = 0;
    for l in 0..p.num_subpopulations() {
        let mean = &bar[bar_off..bar_off + dims[l]];
        for _ in 0..p.size(l) {
            out.extend(tilde[idx].iter().zip(mean).map(|(t, m)| t + m));
            idx += 1;
        }
        bar_off += dims[l];
    }
    out
}

/// `x^i = x̃^i + x̄^l`, likewise for `u`.
pub fn recover_coordinates(bundle: &CoordinateBundle) -> Result<(Vec<f64>, Vec<f64>)> {
    bundle.validate()?;
    let p = &bundle.partition;
    Ok((
        join(&bundle.tilde_states, &bundle.bar_state, p.state_dims(), p),
        join(&bundle.tilde_actions, &bundle.bar_action, p.action_dims(), p),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryCosts {
    pub c_bar: f64,
    pub c_tilde: Vec<f64>,
}

impl AuxiliaryCosts {
    pub fn total(&self) -> f64 {
        self.c_bar + self.c_tilde.iter().sum::<f64>()
    }
}

/// Relative tolerance between the two forms of each subpopulation cost.
pub const COST_FORM_TOL: f64 = 1e-8;

/// `c̃^l = Σ_{i∈N^l} x̃ᵢᵀQ_l x̃ᵢ + ũᵢᵀR_l ũᵢ` and `c̄ = x̄ᵀQ_eff x̄ + ūᵀR_eff ū`.
///
/// With a global system, each `c̃^l` is also computed as the drop in global
/// cost when every agent of `N^l` is replaced by the subpopulation mean, and
/// the two forms must agree.
pub fn auxiliary_costs(ens: &AuxiliaryEnsemble, bundle: &CoordinateBundle, global: Option<&GlobalLqrSystem>) -> Result<AuxiliaryCosts> {
    let p = &ens.partition;
    if &bundle.partition != p {
        return Err(Error::dim("auxiliary_costs", "bundle partition differs from ensemble"));
    }
    bundle.validate()?;
    let mf = &ens.mean_field;
    let c_bar = mf.q_eff.quad_form(&bundle.bar_state) + mf.r_eff.quad_form(&bundle.bar_action);
    let mut c_tilde = vec![0.0; p.num_subpopulations()];
    for (idx, (l, _)) in p.agents().enumerate() {
        let s = &ens.subsystems[l];
        c_tilde[l] += s.q.quad_form(&bundle.tilde_states[idx]) + s.r.quad_form(&bundle.tilde_actions[idx]);
    }
    if let Some(sys) = global {
        if sys.partition() != p {
            return Err(Error::dim("auxiliary_costs", "global system partition differs from ensemble"));
        }
        let (x, u) = recover_coordinates(bundle)?;
        let c_gt = sys.global_cost(&x, &u)?;
        for l in 0..p.num_subpopulations() {
            let (xb, ub) = replace_with_mean(bundle, &x, &u, l);
            let alt = c_gt - sys.global_cost(&xb, &ub)?;
            let scale = c_gt.abs().max(c_tilde[l].abs()).max(f64::MIN_POSITIVE);
            let dev = (alt - c_tilde[l]).abs() / scale;
            if dev > COST_FORM_TOL {
                return Err(Error::Integrity {
                    what: format!("subpopulation {l} cost forms disagree ({} vs {alt})", c_tilde[l]),
                    deviation: dev,
                });
            }
        }
    }
    Ok(AuxiliaryCosts { c_bar, c_tilde })
}

/// `(x̆^l, ŭ^l)`: every agent of `N^l` replaced by the subpopulation mean.
fn replace_with_mean(bundle: &CoordinateBundle, x: &[f64], u: &[f64], l: usize) -> (Vec<f64>, Vec<f64>) {
    let p = &bundle.partition;
    let mut xb = x.to_vec();
    let mut ub = u.to_vec();
    let (d, k) = (p.state_dim(l), p.action_dim(l));
    let xm = &bundle.bar_state[p.mean_state_offset(l)..][..d];
    let um = &bundle.bar_action[p.mean_action_offset(l)..][..k];
    for i in 0..p.size(l) {
        xb[p.agent_state_offset(l, i)..][..d].copy_from_slice(xm);
        ub[p.agent_action_offset(l, i)..][..k].copy_from_slice(um);
    }
    (xb, ub)
}

/// Gains for every auxiliary system. Entries for degenerate subpopulations
/// are carried but have no effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchicalPolicy {
    pub tilde: Vec<LinearGaussianPolicy>,
    pub mean_field: LinearGaussianPolicy,
}

impl HierarchicalPolicy {
    /// All-zero gains with the given exploration levels.
    pub fn zeros(ens: &AuxiliaryEnsemble, sigma_tilde: f64, sigma_bar: f64) -> Self {
        let p = &ens.partition;
        HierarchicalPolicy {
            tilde: (0..p.num_subpopulations())
                .map(|l| LinearGaussianPolicy::new(Mat::zeros(p.action_dim(l), p.state_dim(l)), sigma_tilde))
                .collect(),
            mean_field: LinearGaussianPolicy::new(Mat::zeros(p.mean_action_dim(), p.mean_state_dim()), sigma_bar),
        }
    }

    pub fn gains(&self) -> Vec<Mat> {
        self.tilde.iter().map(|p| p.k.clone()).collect()
    }

    /// Deterministic global gain of this policy.
    pub fn global_gain(&self, ens: &AuxiliaryEnsemble) -> Result<Mat> {
        compose_global_policy(ens, &self.gains(), &self.mean_field.k)
    }
}

/// Global gain `G` with `u = −Gx` equivalent to
/// `u^i = −K_l (x^i − x̄^l) − (K̄ x̄)^l` for every agent `i ∈ N^l`.
pub fn compose_global_policy(ens: &AuxiliaryEnsemble, gains: &[Mat], k_bar: &Mat) -> Result<Mat> {
    let p = &ens.partition;
    if gains.len() != p.num_subpopulations() {
        return Err(Error::dim("compose_global_policy", "one gain per subpopulation is required"));
    }
    for (l, g) in gains.iter().enumerate() {
        if g.shape() != (p.action_dim(l), p.state_dim(l)) {
            return Err(Error::dim("compose_global_policy", format!("gain {l} has shape {:?}", g.shape())));
        }
    }
    if k_bar.shape() != (p.mean_action_dim(), p.mean_state_dim()) {
        return Err(Error::dim("compose_global_policy", "mean-field gain has wrong shape"));
    }
    let mut g = Mat::zeros(p.total_action_dim(), p.total_state_dim());
    for (l, i) in p.agents() {
        let row = p.agent_action_offset(l, i);
        let (kl, dl) = (p.action_dim(l), p.state_dim(l));
        let own = &gains[l];
        let shared = own.scale(-1.0 / p.size(l) as f64);
        for j in 0..p.size(l) {
            let col = p.agent_state_offset(l, j);
            let mut block = g.block(row, col, kl, dl);
            block = &block + &shared;
            if j == i {
                block = &block + own;
            }
            g.set_block(row, col, &block);
        }
        for k in 0..p.num_subpopulations() {
            let kb = k_bar
                .block(p.mean_action_offset(l), p.mean_state_offset(k), kl, p.state_dim(k))
                .scale(1.0 / p.size(k) as f64);
            for j in 0..p.size(k) {
                let col = p.agent_state_offset(k, j);
                let block = &g.block(row, col, kl, p.state_dim(k)) + &kb;
                g.set_block(row, col, &block);
            }
        }
    }
    Ok(g)
}

/// Ergodic cost of the noiseless global feedback `u = −Gx` under the
/// system's process noise.
pub fn global_policy_cost(sys: &GlobalLqrSystem, g: &Mat) -> Result<f64> {
    let f = sys.a() - &(sys.b() * g);
    let sigma = solve_lyapunov(&f, &sys.noise_covariance())?;
    let m = sys.q().as_mat() + &(&g.transpose() * &(sys.r().as_mat() * g));
    Ok(m.inner(&sigma))
}

/// Per-system ergodic costs of a hierarchical policy: `|N^l|·C̃_l(K_l)` for
/// each subpopulation (zero when degenerate) and `C̄(K̄)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposedCost {
    pub tilde: Vec<f64>,
    pub mean_field: f64,
}

impl DecomposedCost {
    pub fn total(&self) -> f64 {
        self.mean_field + self.tilde.iter().sum::<f64>()
    }
}

pub fn decomposed_cost(ens: &AuxiliaryEnsemble, policy: &HierarchicalPolicy) -> Result<DecomposedCost> {
    if policy.tilde.len() != ens.subsystems.len() {
        return Err(Error::dim("decomposed_cost", "one policy per subpopulation is required"));
    }
    let mut tilde = Vec::with_capacity(ens.subsystems.len());
    for (s, pol) in ens.subsystems.iter().zip(&policy.tilde) {
        if s.is_degenerate() {
            tilde.push(0.0);
        } else {
            tilde.push(s.n_agents as f64 * analyze_policy(&s.instance(), pol)?.cost);
        }
    }
    let mean_field = analyze_policy(&ens.mean_field.instance(), &policy.mean_field)?.cost;
    Ok(DecomposedCost { tilde, mean_field })
}
