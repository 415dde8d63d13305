//! Natural policy gradient actor and the hierarchical actor-critic trainer.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decomp::{compose_global_policy, global_policy_cost, AuxiliaryEnsemble, HierarchicalPolicy};
use crate::error::{Error, Result};
use crate::gtd::{gtd_evaluate, GtdConfig, GtdState};
use crate::matlin::Mat;
use crate::oracle::{analyze_policy, value_vector_from, LinearGaussianPolicy, LqrInstance, PolicyAnalysis};
use crate::sim::{RngStream, Start};
use crate::sysmodel::GlobalLqrSystem;

/// `[‖R‖ + ‖B‖²·C(K₀)/σ_min(Φ)]⁻¹`, the largest step with guaranteed
/// monotone decrease.
pub fn default_stepsize(inst: &LqrInstance, c_k0: f64) -> f64 {
    let b = inst.b.spectral_norm();
    1.0 / (inst.r.max_eigenvalue() + b * b * c_k0 / inst.phi.min_eigenvalue())
}

/// `K − η Ê`.
pub fn natural_step(k: &Mat, e_hat: &Mat, eta: f64) -> Result<Mat> {
    if k.shape() != e_hat.shape() {
        return Err(Error::dim("natural_step", format!("K {:?} vs E {:?}", k.shape(), e_hat.shape())));
    }
    Ok(k - &e_hat.scale(eta))
}

/// Per-step contraction `1 − η σ_min(Φ) σ_min(R) / ‖Σ_{K*}‖` of the
/// suboptimality gap under exact natural gradients.
pub fn contraction_factor(inst: &LqrInstance, eta: f64, star: &PolicyAnalysis) -> f64 {
    1.0 - eta * inst.phi.min_eigenvalue() * inst.r.min_eigenvalue() / star.sigma_k.max_eigenvalue()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Critic is the GTD estimate from simulated data.
    ModelFree,
    /// Critic is the exact natural gradient.
    OracleGradient,
}

/// How `C(K₀)`, used by the step size and the critic radii, is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSource {
    Oracle,
    /// Time average of a `10⁵`-step rollout started at zero after a
    /// 1000-step burn-in. Critics then also start from zero with the same
    /// burn-in instead of a stationary draw.
    Rollout,
}

/// Steps used by the rollout estimate of `C(K₀)`.
pub const ROLLOUT_COST_STEPS: usize = 100_000;
const ROLLOUT_BURN_IN: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_outer: usize,
    pub mode: Mode,
    pub gtd: GtdConfig,
    /// Exploration std per system (tilde systems in order, then the mean
    /// field). A single value applies to every system.
    pub sigma_explore: Vec<f64>,
    /// Step sizes per system, replacing the default.
    #[serde(default)]
    pub eta_override: Option<Vec<f64>>,
    pub seed: u64,
    /// Start each critic run from the previous run's averaged iterates.
    #[serde(default = "yes")]
    pub warm_start: bool,
    #[serde(default = "oracle_source")]
    pub cost_source: CostSource,
    /// Worker threads for the independent systems; 0 uses one per system.
    #[serde(default)]
    pub threads: usize,
    /// Record wall-clock time per iteration; when off the column is zero so
    /// outputs are byte-reproducible.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
}

fn yes() -> bool {
    true
}

fn oracle_source() -> CostSource {
    CostSource::Oracle
}

impl TrainConfig {
    pub fn oracle(n_outer: usize) -> Self {
        TrainConfig {
            n_outer,
            mode: Mode::OracleGradient,
            gtd: GtdConfig::new(1),
            sigma_explore: vec![0.0],
            eta_override: None,
            seed: 0,
            warm_start: true,
            cost_source: CostSource::Oracle,
            threads: 0,
            record_wall_time: true,
        }
    }

    pub fn model_free(n_outer: usize, t_inner: usize, sigma: f64, seed: u64) -> Self {
        TrainConfig {
            n_outer,
            mode: Mode::ModelFree,
            gtd: GtdConfig::new(t_inner),
            sigma_explore: vec![sigma],
            eta_override: None,
            seed,
            warm_start: true,
            cost_source: CostSource::Oracle,
            threads: 0,
            record_wall_time: true,
        }
    }

    fn sigma(&self, system: usize) -> f64 {
        if self.sigma_explore.len() == 1 {
            self.sigma_explore[0]
        } else {
            self.sigma_explore[system]
        }
    }

    /// Checks the configuration for a run over `systems` independent systems.
    pub fn validate(&self, systems: usize) -> Result<()> {
        if self.n_outer == 0 {
            return Err(Error::InvalidArgument("n_outer must be at least 1".into()));
        }
        if self.sigma_explore.len() != 1 && self.sigma_explore.len() != systems {
            return Err(Error::InvalidArgument(format!(
                "sigma_explore needs 1 or {systems} entries, got {}",
                self.sigma_explore.len()
            )));
        }
        for &s in &self.sigma_explore {
            if !(s >= 0.0 && s.is_finite()) || (self.mode == Mode::ModelFree && s <= 0.0) {
                return Err(Error::InvalidArgument(format!("invalid exploration std {s}")));
            }
        }
        if let Some(etas) = &self.eta_override {
            if etas.len() != systems && etas.len() != 1 {
                return Err(Error::InvalidArgument(format!("eta_override needs 1 or {systems} entries")));
            }
            if etas.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                return Err(Error::InvalidArgument("step sizes must be finite and non-negative".into()));
            }
        }
        if self.mode == Mode::ModelFree {
            self.gtd.validate()?;
        }
        Ok(())
    }

    fn eta_override(&self, system: usize) -> Option<f64> {
        self.eta_override
            .as_ref()
            .map(|e| if e.len() == 1 { e[0] } else { e[system] })
    }
}

/// One actor iteration of one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: Mat,
    /// Ergodic cost of the deterministic gain.
    pub cost: f64,
    pub gap: f64,
    /// `‖Ê − E_K‖_F` of the critic that produced the next step.
    pub critic_err: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemHistory {
    pub id: String,
    /// Multiplicity of this system's gap in the total (`|N^l|` for a tilde
    /// system, 1 otherwise).
    pub weight: f64,
    pub eta: f64,
    pub sigma: f64,
    pub c_k0: f64,
    pub c_k0_source: CostSource,
    pub c_star: f64,
    /// Exact-gradient contraction factor at this step size.
    pub contraction: f64,
    pub records: Vec<IterRecord>,
}

impl SystemHistory {
    pub fn final_gap(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.gap)
    }

    pub fn initial_gap(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.gap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionCheck {
    pub n: usize,
    pub composed: f64,
    pub sum_of_parts: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub systems: Vec<SystemHistory>,
    pub composition: Vec<CompositionCheck>,
}

impl TrainHistory {
    /// Weighted sum of per-system gaps at iteration `n`.
    pub fn total_gap(&self, n: usize) -> f64 {
        self.systems.iter().map(|s| s.weight * s.records[n].gap).sum()
    }

    /// Completed actor steps common to every system.
    pub fn iterations(&self) -> usize {
        self.systems.iter().map(|s| s.records.len()).min().unwrap_or(0).saturating_sub(1)
    }

    fn recorded(&self) -> bool {
        !self.systems.is_empty() && self.systems.iter().all(|s| !s.records.is_empty())
    }

    /// `max_s 1/(1 − contraction_s)`: iterations per e-fold of the slowest
    /// system.
    pub fn constant_m(&self) -> f64 {
        self.systems
            .iter()
            .map(|s| 1.0 / (1.0 - s.contraction))
            .fold(0.0, f64::max)
    }

    /// Columns `n, system_id, cost, gap, critic_err, eta, wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,system_id,cost,gap,critic_err,eta,wall_ms\n");
        for s in &self.systems {
            for r in &s.records {
                let ce = r.critic_err.map(|e| format!("{e:?}")).unwrap_or_default();
                writeln!(out, "{},{},{:?},{:?},{},{:?},{:?}", r.n, s.id, r.cost, r.gap, ce, s.eta, r.wall_ms).unwrap();
            }
        }
        out
    }

    pub fn summary(&self) -> TrainSummary {
        let (n, ok) = (self.iterations(), self.recorded());
        TrainSummary {
            iterations: n,
            initial_total_gap: if ok { self.total_gap(0) } else { f64::NAN },
            final_total_gap: if ok { self.total_gap(n) } else { f64::NAN },
            final_gaps: self.systems.iter().map(|s| (s.id.clone(), s.final_gap())).collect(),
            constant_m: self.constant_m(),
            c_k0_sources: self.systems.iter().map(|s| (s.id.clone(), s.c_k0_source)).collect(),
            composition: self.composition.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub initial_total_gap: f64,
    pub final_total_gap: f64,
    pub final_gaps: Vec<(String, f64)>,
    /// Iterations per e-fold of the total gap under exact gradients.
    pub constant_m: f64,
    pub c_k0_sources: Vec<(String, CostSource)>,
    pub composition: Vec<CompositionCheck>,
}

/// Training stopped early; carries everything recorded so far.
#[derive(Debug)]
pub struct TrainAbort {
    pub history: TrainHistory,
    pub system: String,
    pub iteration: usize,
    pub error: Error,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training of {} stopped at iteration {}: {}", self.system, self.iteration, self.error)
    }
}

impl std::error::Error for TrainAbort {}

/// Absolute slack on the monotonicity and contraction checks.
pub const CONTRACTION_SLACK: f64 = 1e-9;

struct SingleRun {
    history: SystemHistory,
    failure: Option<(usize, Error)>,
}

fn run_system(id: String, weight: f64, inst: &LqrInstance, k0: &Mat, cfg: &TrainConfig, index: usize) -> SingleRun {
    let sigma = cfg.sigma(index);
    let mut history = SystemHistory {
        id,
        weight,
        eta: f64::NAN,
        sigma,
        c_k0: f64::NAN,
        c_k0_source: cfg.cost_source,
        c_star: f64::NAN,
        contraction: f64::NAN,
        records: Vec::with_capacity(cfg.n_outer + 1),
    };
    let fail = |history: SystemHistory, n: usize, e: Error| SingleRun {
        history,
        failure: Some((n, e)),
    };

    let setup = (|| -> Result<(LinearGaussianPolicy, PolicyAnalysis, PolicyAnalysis, Mat, f64)> {
        let pol0 = LinearGaussianPolicy::new(k0.clone(), sigma);
        let an0 = analyze_policy(inst, &pol0)?;
        let (_, k_star) = inst.optimal()?;
        let star = analyze_policy(inst, &pol0.with_gain(k_star.clone()))?;
        let c_k0 = match cfg.cost_source {
            CostSource::Oracle => an0.cost,
            CostSource::Rollout => {
                let stream = RngStream::new(cfg.seed, cost_stream(index));
                rollout_cost(inst, &pol0, stream)?
            }
        };
        Ok((pol0, an0, star, k_star, c_k0))
    })();
    let (pol0, an0, star, k_star, c_k0) = match setup {
        Ok(v) => v,
        Err(e) => return fail(history, 0, e),
    };
    let eta = cfg.eta_override(index).unwrap_or_else(|| default_stepsize(inst, c_k0));
    history.eta = eta;
    history.c_k0 = c_k0;
    history.contraction = contraction_factor(inst, eta, &star);
    // Reported costs are those of the deterministic gain.
    let det_cost = |k: &Mat| analyze_policy(inst, &LinearGaussianPolicy::new(k.clone(), 0.0)).map(|a| a.cost);
    let c_star = match det_cost(&k_star) {
        Ok(c) => c,
        Err(e) => return fail(history, 0, e),
    };
    history.c_star = c_star;

    let mut gtd_cfg = cfg.gtd.clone();
    if cfg.cost_source == CostSource::Rollout && gtd_cfg.burn_in.is_none() {
        gtd_cfg.burn_in = Some(ROLLOUT_BURN_IN);
    }
    let mut k = k0.clone();
    let mut an = an0;
    let mut warm: Option<GtdState> = None;
    let mut start = Instant::now();
    for n in 0..=cfg.n_outer {
        let cost = match det_cost(&k) {
            Ok(c) => c,
            Err(e) => return fail(history, n, e),
        };
        history.records.push(IterRecord {
            n,
            k: k.clone(),
            cost,
            gap: cost - c_star,
            critic_err: None,
            wall_ms: 0.0,
        });
        if n == cfg.n_outer {
            break;
        }
        let pol = pol0.with_gain(k.clone());
        let (e_hat, critic_err) = match cfg.mode {
            Mode::OracleGradient => (an.e_k.clone(), None),
            Mode::ModelFree => {
                let vv = value_vector_from(inst, &pol, &an);
                let stream = RngStream::new(cfg.seed, critic_stream(index, n));
                let init = if cfg.warm_start { warm.as_ref() } else { None };
                match gtd_evaluate(inst, &pol, &gtd_cfg, c_k0, stream, init, Some(&vv)) {
                    Ok(out) => {
                        let err = (&out.e_hat - &an.e_k).frobenius_norm();
                        warm = Some(out.averaged);
                        (out.e_hat, Some(err))
                    }
                    Err(e) => return fail(history, n, e),
                }
            }
        };
        let next = match natural_step(&k, &e_hat, eta) {
            Ok(m) => m,
            Err(e) => return fail(history, n, e),
        };
        let next_an = match analyze_policy(inst, &pol.with_gain(next.clone())) {
            Ok(a) => a,
            Err(e) => {
                let last = history.records.last_mut().expect("pushed above");
                last.critic_err = critic_err;
                return fail(history, n + 1, e);
            }
        };
        if cfg.mode == Mode::OracleGradient {
            if next_an.cost > an.cost + CONTRACTION_SLACK {
                return fail(
                    history,
                    n + 1,
                    Error::Numerical(format!("cost increased from {} to {} under an exact step", an.cost, next_an.cost)),
                );
            }
            let bound = history.contraction * (an.cost - star.cost) + CONTRACTION_SLACK;
            if next_an.cost - star.cost > bound {
                return fail(
                    history,
                    n + 1,
                    Error::Numerical(format!(
                        "gap {} exceeds the contraction bound {bound}",
                        next_an.cost - star.cost
                    )),
                );
            }
        }
        let last = history.records.last_mut().expect("pushed above");
        last.critic_err = critic_err;
        if cfg.record_wall_time {
            last.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            start = Instant::now();
        }
        k = next;
        an = next_an;
    }
    SingleRun { history, failure: None }
}

fn cost_stream(system: usize) -> u64 {
    (system as u64) << 32
}

fn critic_stream(system: usize, n: usize) -> u64 {
    ((system as u64) << 32) | (n as u64 + 1)
}

fn rollout_cost(inst: &LqrInstance, pol: &LinearGaussianPolicy, stream: RngStream) -> Result<f64> {
    let total = ROLLOUT_BURN_IN + ROLLOUT_COST_STEPS;
    let traj = crate::sim::rollout(inst, pol, total, stream, Start::State(vec![0.0; inst.state_dim()]))?;
    Ok(traj.costs[ROLLOUT_BURN_IN..].iter().sum::<f64>() / ROLLOUT_COST_STEPS as f64)
}

/// Actor-critic on one LQR instance.
pub fn train_single(inst: &LqrInstance, k0: &Mat, cfg: &TrainConfig) -> Result<TrainHistory, Box<TrainAbort>> {
    if let Err(e) = cfg.validate(1) {
        return Err(Box::new(TrainAbort {
            history: TrainHistory::default(),
            system: "single".into(),
            iteration: 0,
            error: e,
        }));
    }
    let run = run_system("single".into(), 1.0, inst, k0, cfg, 0);
    let history = TrainHistory {
        systems: vec![run.history],
        composition: Vec::new(),
    };
    match run.failure {
        None => Ok(history),
        Some((iteration, error)) => Err(Box::new(TrainAbort {
            system: "single".into(),
            history,
            iteration,
            error,
        })),
    }
}


/// Relative tolerance between the composed global cost and the sum of
/// auxiliary costs.
pub const COMPOSITION_TOL: f64 = 1e-6;

/// Trains every non-degenerate tilde system and the mean-field system
/// independently. Systems are indexed `0..L` (tilde) and `L` (mean field)
/// for per-system configuration and random streams.
pub fn train_hierarchical(
    sys: &GlobalLqrSystem,
    ens: &AuxiliaryEnsemble,
    k0: &HierarchicalPolicy,
    cfg: &TrainConfig,
) -> Result<TrainHistory, Box<TrainAbort>> {
    let l_count = ens.subsystems.len();
    let abort = |history: TrainHistory, system: &str, iteration: usize, error: Error| {
        Box::new(TrainAbort {
            history,
            system: system.into(),
            iteration,
            error,
        })
    };
    if let Err(e) = cfg.validate(l_count + 1) {
        return Err(abort(TrainHistory::default(), "config", 0, e));
    }
    if k0.tilde.len() != l_count {
        return Err(abort(
            TrainHistory::default(),
            "config",
            0,
            Error::dim("train_hierarchical", "one initial gain per subpopulation is required"),
        ));
    }

    struct Job {
        id: String,
        weight: f64,
        inst: LqrInstance,
        k0: Mat,
        index: usize,
    }
    let mut jobs: Vec<Job> = ens
        .active_subsystems()
        .map(|(l, s)| Job {
            id: format!("tilde{l}"),
            weight: s.n_agents as f64,
            inst: s.instance(),
            k0: k0.tilde[l].k.clone(),
            index: l,
        })
        .collect();
    jobs.push(Job {
        id: "mean".into(),
        weight: 1.0,
        inst: ens.mean_field.instance(),
        k0: k0.mean_field.k.clone(),
        index: l_count,
    });

    let workers = if cfg.threads > 0 { cfg.threads.min(jobs.len()) } else { jobs.len() };
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: std::sync::Mutex<Vec<Option<SingleRun>>> = std::sync::Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(job) = jobs.get(j) else { break };
                let run = run_system(job.id.clone(), job.weight, &job.inst, &job.k0, cfg, job.index);
                results.lock().expect("no worker panics while holding the lock")[j] = Some(run);
            });
        }
    });
    let runs = results.into_inner().expect("no worker panicked");
    let runs: Vec<SingleRun> = runs.into_iter().map(|r| r.expect("every job ran")).collect();

    let mut failure = None;
    let mut history = TrainHistory::default();
    for (job, run) in jobs.iter_mut().zip(runs) {
        if failure.is_none() {
            if let Some((n, e)) = run.failure {
                failure = Some((job.id.clone(), n, e));
            }
        }
        history.systems.push(run.history);
    }
    if let Some((system, n, e)) = failure {
        return Err(abort(history, &system, n, e));
    }

    for n in [0, cfg.n_outer] {
        let policy = policy_at(k0, &history, n);
        let check = (|| -> Result<CompositionCheck> {
            let g = compose_global_policy(ens, &policy.gains(), &policy.mean_field.k)?;
            let composed = global_policy_cost(sys, &g)?;
            let sum_of_parts: f64 = history.systems.iter().map(|s| s.weight * s.records[n].cost).sum();
            let rel_err = (composed - sum_of_parts).abs() / composed.abs().max(f64::MIN_POSITIVE);
            Ok(CompositionCheck {
                n,
                composed,
                sum_of_parts,
                rel_err,
            })
        })();
        match check {
            Ok(c) if c.rel_err <= COMPOSITION_TOL => history.composition.push(c),
            Ok(c) => {
                let dev = c.rel_err;
                history.composition.push(c);
                return Err(abort(
                    history,
                    "composition",
                    n,
                    Error::Integrity {
                        what: "composed global cost differs from the sum of auxiliary costs".into(),
                        deviation: dev,
                    },
                ));
            }
            Err(e) => return Err(abort(history, "composition", n, e)),
        }
    }
    Ok(history)
}

/// Hierarchical policy at iteration `n` of a history (degenerate systems keep
/// their initial gains).
pub fn policy_at(k0: &HierarchicalPolicy, history: &TrainHistory, n: usize) -> HierarchicalPolicy {
    let mut policy = k0.clone();
    for s in &history.systems {
        let k = s.records[n.min(s.records.len() - 1)].k.clone();
        if s.id == "mean" {
            policy.mean_field.k = k;
        } else if let Some(l) = s.id.strip_prefix("tilde").and_then(|l| l.parse::<usize>().ok()) {
            policy.tilde[l].k = k;
        }
    }
    policy
}
