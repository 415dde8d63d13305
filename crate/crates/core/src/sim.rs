//! Seeded rollouts of single LQR chains and of the global system under a
//! hierarchical policy.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decomp::{auxiliary_costs, to_coordinates, AuxiliaryEnsemble, CoordinateBundle, HierarchicalPolicy};
use crate::error::{Error, Result};
use crate::matlin::{spectral_radius, Mat, SymMat};
use crate::oracle::{analyze_policy, LinearGaussianPolicy, LqrInstance};
use crate::sysmodel::GlobalLqrSystem;

/// A `(seed, stream)` pair naming an independent ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Same seed, another stream id.
    pub fn with_stream(&self, stream: u64) -> Self {
        RngStream { seed: self.seed, stream }
    }
}

pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `L z` with `z ~ N(0, I)`, i.e. a draw from `N(0, LLᵀ)`.
pub fn correlated_normal(rng: &mut ChaCha8Rng, factor: &Mat) -> Vec<f64> {
    let z = standard_normals(rng, factor.cols());
    factor.mul_vec(&z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
}

impl Trajectory {
    pub fn with_capacity(t: usize) -> Self {
        Trajectory {
            states: Vec::with_capacity(t),
            actions: Vec::with_capacity(t),
            costs: Vec::with_capacity(t),
        }
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, u: Vec<f64>, c: f64) {
        self.states.push(x);
        self.actions.push(u);
        self.costs.push(c);
    }

    pub fn mean_cost(&self) -> f64 {
        self.costs.iter().sum::<f64>() / self.costs.len().max(1) as f64
    }

    /// Columns `t, x0.., u0.., cost`.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, Vec::len);
        let k = self.actions.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 0..d {
            write!(out, ",x{i}").unwrap();
        }
        for i in 0..k {
            write!(out, ",u{i}").unwrap();
        }
        out.push_str(",cost\n");
        for t in 0..self.len() {
            write!(out, "{t}").unwrap();
            for v in self.states[t].iter().chain(&self.actions[t]) {
                write!(out, ",{v:?}").unwrap();
            }
            writeln!(out, ",{:?}", self.costs[t]).unwrap();
        }
        out
    }
}

/// Initial state of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub enum Start {
    /// Draw `x_0 ~ N(0, Σ_K)`.
    Stationary,
    State(Vec<f64>),
}

/// `x_{t+1} = Ax_t + Bu_t + w_t`, `u_t = −Kx_t + σz_t`, advanced one
/// transition at a time. Each step draws `z_t` and then `w_t`.
pub struct Chain<'a> {
    inst: &'a LqrInstance,
    pol: &'a LinearGaussianPolicy,
    noise_factor: Mat,
    rng: ChaCha8Rng,
    x: Vec<f64>,
    u: Vec<f64>,
}

/// One observed transition `(x_t, u_t, c_t, x_{t+1}, u_{t+1})`.
#[derive(Clone, Debug)]
pub struct Transition {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub cost: f64,
    pub x_next: Vec<f64>,
    pub u_next: Vec<f64>,
}

impl<'a> Chain<'a> {
    pub fn new(inst: &'a LqrInstance, pol: &'a LinearGaussianPolicy, stream: RngStream, start: Start) -> Result<Self> {
        let d = inst.state_dim();
        let mut rng = stream.rng();
        let x = match start {
            Start::Stationary => {
                let an = analyze_policy(inst, pol)?;
                correlated_normal(&mut rng, &an.sigma_k.cholesky_psd())
            }
            Start::State(x) => {
                if x.len() != d {
                    return Err(Error::dim("Chain::new", format!("x0 has {} entries, expected {d}", x.len())));
                }
                x
            }
        };
        if pol.k.shape() != (inst.action_dim(), d) {
            return Err(Error::dim("Chain::new", "gain does not match instance"));
        }
        let mut chain = Chain {
            inst,
            pol,
            noise_factor: inst.phi.cholesky_psd(),
            rng,
            x,
            u: Vec::new(),
        };
        chain.u = chain.act();
        Ok(chain)
    }

    fn act(&mut self) -> Vec<f64> {
        let z = standard_normals(&mut self.rng, self.inst.action_dim());
        self.pol
            .k
            .mul_vec(&self.x)
            .into_iter()
            .zip(z)
            .map(|(kx, z)| -kx + self.pol.sigma * z)
            .collect()
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn action(&self) -> &[f64] {
        &self.u
    }

    /// Advances one step, returning the transition just taken.
    pub fn advance(&mut self) -> Transition {
        let cost = self.inst.q.quad_form(&self.x) + self.inst.r.quad_form(&self.u);
        let w = correlated_normal(&mut self.rng, &self.noise_factor);
        let ax = self.inst.a.mul_vec(&self.x);
        let bu = self.inst.b.mul_vec(&self.u);
        let next: Vec<f64> = (0..ax.len()).map(|i| ax[i] + bu[i] + w[i]).collect();
        let x = std::mem::replace(&mut self.x, next);
        let u_next = self.act();
        let u = std::mem::replace(&mut self.u, u_next.clone());
        Transition {
            x,
            u,
            cost,
            x_next: self.x.clone(),
            u_next,
        }
    }
}

/// `T` steps of the chain. Costs are the instantaneous `xᵀQx + uᵀRu`.
pub fn rollout(inst: &LqrInstance, pol: &LinearGaussianPolicy, t: usize, stream: RngStream, start: Start) -> Result<Trajectory> {
    if t == 0 {
        return Err(Error::InvalidArgument("rollout length must be positive".into()));
    }
    let mut chain = Chain::new(inst, pol, stream, start)?;
    let mut traj = Trajectory::with_capacity(t);
    for _ in 0..t {
        let tr = chain.advance();
        traj.push(tr.x, tr.u, tr.cost);
    }
    Ok(traj)
}

/// Burn-in for chains not started from stationarity: `max(100, ⌈10/(1−ρ)⌉)`.
pub fn burn_in(rho: f64) -> usize {
    let geometric = (10.0 / (1.0 - rho)).ceil();
    if geometric.is_finite() {
        100.max(geometric as usize)
    } else {
        usize::MAX
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicEstimate {
    pub mean_cost: f64,
    /// Standard error from batch means (20 batches).
    pub std_error: f64,
    pub burn_in: usize,
    pub steps: usize,
}

/// Time-average cost over `t` steps after burn-in (none for a stationary
/// start).
pub fn ergodic_average(inst: &LqrInstance, pol: &LinearGaussianPolicy, t: usize, stream: RngStream, start: Start) -> Result<ErgodicEstimate> {
    let burn = match start {
        Start::Stationary => 0,
        Start::State(_) => burn_in(inst.check_stable(&pol.k)?),
    };
    let mut chain = Chain::new(inst, pol, stream, start)?;
    for _ in 0..burn {
        chain.advance();
    }
    let costs: Vec<f64> = (0..t).map(|_| chain.advance().cost).collect();
    let (mean_cost, std_error) = batch_means(&costs, 20);
    Ok(ErgodicEstimate {
        mean_cost,
        std_error,
        burn_in: burn,
        steps: t,
    })
}

/// Mean and batch-means standard error of a correlated sequence.
pub fn batch_means(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
    let size = n / batches.max(1);
    if size == 0 || batches < 2 {
        return (mean, f64::NAN);
    }
    let bm: Vec<f64> = (0..batches)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let bmean = bm.iter().sum::<f64>() / batches as f64;
    let var = bm.iter().map(|m| (m - bmean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalRollout {
    pub global: Trajectory,
    /// One trajectory per subpopulation: the stacked deviations of its
    /// agents, with cost `c̃^l`.
    pub tilde: Vec<Trajectory>,
    /// Mean-field states `x̄`, actions `ū` and cost `c̄`.
    pub mean_field: Trajectory,
}

/// Relative tolerance of the per-step cost decomposition.
pub const STEP_COST_TOL: f64 = 1e-8;

fn check_policy_shapes(ens: &AuxiliaryEnsemble, policy: &HierarchicalPolicy) -> Result<()> {
    let p = &ens.partition;
    if policy.tilde.len() != p.num_subpopulations() {
        return Err(Error::dim("hierarchical policy", "one policy per subpopulation is required"));
    }
    for (l, pol) in policy.tilde.iter().enumerate() {
        if pol.k.shape() != (p.action_dim(l), p.state_dim(l)) {
            return Err(Error::dim("hierarchical policy", format!("gain {l} has wrong shape")));
        }
    }
    if policy.mean_field.k.shape() != (p.mean_action_dim(), p.mean_state_dim()) {
        return Err(Error::dim("hierarchical policy", "mean-field gain has wrong shape"));
    }
    Ok(())
}

/// Tilde and mean-field actions for the current coordinates. Tilde
/// exploration noise is re-centred to zero mean within each subpopulation.
fn hierarchical_actions(ens: &AuxiliaryEnsemble, policy: &HierarchicalPolicy, bundle: &mut CoordinateBundle, rng: &mut ChaCha8Rng) {
    let p = &ens.partition;
    let mut idx = 0;
    for l in 0..p.num_subpopulations() {
        let pol = &policy.tilde[l];
        let n = p.size(l);
        let k = p.action_dim(l);
        let noise: Vec<Vec<f64>> = (0..n).map(|_| standard_normals(rng, k)).collect();
        let mut mean = vec![0.0; k];
        for z in &noise {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v / n as f64;
            }
        }
        for z in &noise {
            let kx = pol.k.mul_vec(&bundle.tilde_states[idx]);
            bundle.tilde_actions[idx] = (0..k).map(|c| -kx[c] + pol.sigma * (z[c] - mean[c])).collect();
            idx += 1;
        }
    }
    let z = standard_normals(rng, p.mean_action_dim());
    let kx = policy.mean_field.k.mul_vec(&bundle.bar_state);
    bundle.bar_action = kx
        .iter()
        .zip(z)
        .map(|(kx, z)| -kx + policy.mean_field.sigma * z)
        .collect();
    // Recompute tilde means exactly so the bundle stays consistent.
    let mut idx = 0;
    for l in 0..p.num_subpopulations() {
        let n = p.size(l);
        let k = p.action_dim(l);
        let mut mean = vec![0.0; k];
        for a in &bundle.tilde_actions[idx..idx + n] {
            for (m, v) in mean.iter_mut().zip(a) {
                *m += v / n as f64;
            }
        }
        for a in &mut bundle.tilde_actions[idx..idx + n] {
            for (v, m) in a.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        idx += n;
    }
}

fn global_noise_factors(sys: &GlobalLqrSystem) -> Vec<Mat> {
    sys.w_noise().iter().map(SymMat::cholesky_psd).collect()
}

fn draw_global_noise(sys: &GlobalLqrSystem, factors: &[Mat], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w = Vec::with_capacity(sys.partition().total_state_dim());
    for (l, _) in sys.partition().agents() {
        w.extend(correlated_normal(rng, &factors[l]));
    }
    w
}

/// Simulates the global recursion with actions chosen in auxiliary
/// coordinates. Every step checks `c_gt = c̄ + Σ_l c̃^l`.
pub fn hierarchical_rollout(
    sys: &GlobalLqrSystem,
    ens: &AuxiliaryEnsemble,
    policy: &HierarchicalPolicy,
    t: usize,
    stream: RngStream,
    x0: Option<Vec<f64>>,
) -> Result<HierarchicalRollout> {
    let p = sys.partition();
    if &ens.partition != p {
        return Err(Error::dim("hierarchical_rollout", "ensemble partition differs from system"));
    }
    check_policy_shapes(ens, policy)?;
    let mut x = x0.unwrap_or_else(|| vec![0.0; p.total_state_dim()]);
    if x.len() != p.total_state_dim() {
        return Err(Error::dim("hierarchical_rollout", "x0 has wrong length"));
    }
    let mut rng = stream.rng();
    let factors = global_noise_factors(sys);
    let mut global = Trajectory::with_capacity(t);
    let mut tilde: Vec<Trajectory> = (0..p.num_subpopulations()).map(|_| Trajectory::with_capacity(t)).collect();
    let mut mean_field = Trajectory::with_capacity(t);
    for step in 0..t {
        let mut bundle = to_coordinates(p, &x, &vec![0.0; p.total_action_dim()])?;
        hierarchical_actions(ens, policy, &mut bundle, &mut rng);
        let (_, u) = crate::decomp::recover_coordinates(&bundle)?;
        // Re-derive coordinates of the applied action so both views describe
        // the same (x, u).
        let bundle = to_coordinates(p, &x, &u)?;
        let c_gt = sys.global_cost(&x, &u)?;
        let costs = auxiliary_costs(ens, &bundle, Some(sys))?;
        let total = costs.total();
        let dev = (c_gt - total).abs() / c_gt.abs().max(total.abs()).max(f64::MIN_POSITIVE);
        if dev > STEP_COST_TOL {
            return Err(Error::Integrity {
                what: format!("cost decomposition at step {step}"),
                deviation: dev,
            });
        }
        let mut idx = 0;
        for l in 0..p.num_subpopulations() {
            let n = p.size(l);
            let xs: Vec<f64> = bundle.tilde_states[idx..idx + n].concat();
            let us: Vec<f64> = bundle.tilde_actions[idx..idx + n].concat();
            tilde[l].push(xs, us, costs.c_tilde[l]);
            idx += n;
        }
        mean_field.push(bundle.bar_state.clone(), bundle.bar_action.clone(), costs.c_bar);
        let w = draw_global_noise(sys, &factors, &mut rng);
        let mut next = sys.step(&x, &u);
        for (n, w) in next.iter_mut().zip(w) {
            *n += w;
        }
        global.push(std::mem::replace(&mut x, next), u, c_gt);
    }
    Ok(HierarchicalRollout {
        global,
        tilde,
        mean_field,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathwiseComparison {
    /// Largest deviation between transformed global states and the
    /// auxiliary recursions, over all agents and steps.
    pub max_state_deviation: f64,
    /// Largest absolute state entry seen, for scale.
    pub max_state_magnitude: f64,
    pub steps: usize,
}

/// Runs the global recursion and the decoupled auxiliary recursions on one
/// shared noise realization and compares them in auxiliary coordinates.
/// Actions are the deterministic hierarchical feedback plus shared,
/// re-centred exploration noise.
pub fn pathwise_comparison(
    sys: &GlobalLqrSystem,
    ens: &AuxiliaryEnsemble,
    policy: &HierarchicalPolicy,
    t: usize,
    stream: RngStream,
    x0: Vec<f64>,
) -> Result<PathwiseComparison> {
    let p = sys.partition();
    check_policy_shapes(ens, policy)?;
    if x0.len() != p.total_state_dim() {
        return Err(Error::dim("pathwise_comparison", "x0 has wrong length"));
    }
    let zeros_u = vec![0.0; p.total_action_dim()];
    let mut rng = stream.rng();
    let factors = global_noise_factors(sys);
    let mut x = x0;
    let mut aux = to_coordinates(p, &x, &zeros_u)?;
    let mut max_dev: f64 = 0.0;
    let mut max_mag: f64 = 0.0;
    for _ in 0..t {
        // Actions from the auxiliary view.
        hierarchical_actions(ens, policy, &mut aux, &mut rng);
        let (_, u) = crate::decomp::recover_coordinates(&aux)?;
        let w = draw_global_noise(sys, &factors, &mut rng);
        let wc = to_coordinates(p, &w, &zeros_u)?;

        let mut next = sys.step(&x, &u);
        for (n, w) in next.iter_mut().zip(&w) {
            *n += w;
        }
        x = next;

        let mut idx = 0;
        let mut next_aux = aux.clone();
        for l in 0..p.num_subpopulations() {
            let s = &ens.subsystems[l];
            for _ in 0..p.size(l) {
                let ax = s.a.mul_vec(&aux.tilde_states[idx]);
                let bu = s.b.mul_vec(&aux.tilde_actions[idx]);
                next_aux.tilde_states[idx] = (0..ax.len()).map(|c| ax[c] + bu[c] + wc.tilde_states[idx][c]).collect();
                idx += 1;
            }
        }
        let mf = &ens.mean_field;
        let ax = mf.a_bar.mul_vec(&aux.bar_state);
        let bu = mf.b_bar.mul_vec(&aux.bar_action);
        next_aux.bar_state = (0..ax.len()).map(|c| ax[c] + bu[c] + wc.bar_state[c]).collect();
        aux = next_aux;

        let truth = to_coordinates(p, &x, &zeros_u)?;
        for (a, b) in truth.tilde_states.iter().flatten().zip(aux.tilde_states.iter().flatten()) {
            max_dev = max_dev.max((a - b).abs());
        }
        for (a, b) in truth.bar_state.iter().zip(&aux.bar_state) {
            max_dev = max_dev.max((a - b).abs());
        }
        max_mag = x.iter().fold(max_mag, |m, v| m.max(v.abs()));
    }
    Ok(PathwiseComparison {
        max_state_deviation: max_dev,
        max_state_magnitude: max_mag,
        steps: t,
    })
}

/// Spectral radius of the global closed loop under a hierarchical policy.
pub fn hierarchical_closed_loop_radius(sys: &GlobalLqrSystem, ens: &AuxiliaryEnsemble, policy: &HierarchicalPolicy) -> Result<f64> {
    let g = policy.global_gain(ens)?;
    spectral_radius(&(sys.a() - &(sys.b() * &g)))
}
