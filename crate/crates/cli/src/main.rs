mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hierlqr::decomp::{build_auxiliary, decomposed_cost, global_policy_cost, AuxiliaryEnsemble, HierarchicalPolicy};
use hierlqr::matlin::Mat;
use hierlqr::npg::{train_hierarchical, Mode, TrainHistory};
use hierlqr::oracle::{analyze_policy, LinearGaussianPolicy, LqrInstance};
use hierlqr::sysmodel::{default_exchangeability_tol, verify_partial_exchangeability, GlobalLqrSystem};
use hierlqr::Error;
use serde_json::json;

use config::{load_system, read, ExperimentConfig, GeneratorSpec};
use output::{gap_plot, write_atomic};

#[derive(Debug)]
pub enum CliError {
    /// Verification ran and found a violation.
    Verification(String),
    Schema(String),
    Unstable(String),
    Io(String),
    Compute(Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) | CliError::Compute(_) => 1,
            CliError::Schema(_) => 2,
            CliError::Unstable(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Schema(m) => write!(f, "invalid configuration: {m}"),
            CliError::Unstable(m) => write!(f, "training aborted: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Compute(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "hierlqr", version, about = "Hierarchical mean-field multi-agent LQR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random partially-exchangeable system.
    Generate(GenerateArgs),
    /// Check partial exchangeability of a system file.
    Verify {
        system: PathBuf,
        /// Absolute tolerance; defaults to a multiple of the largest entry.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Build the auxiliary ensemble of a system file.
    Decompose {
        system: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze a policy with the model-based oracle.
    Eval(EvalArgs),
    /// Run the hierarchical actor-critic from an experiment config.
    Train(TrainArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator spec JSON (sizes, state_dims, action_dims, seed, scale).
    #[arg(long, conflicts_with_all = ["sizes", "state_dims", "action_dims"])]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    state_dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    action_dims: Vec<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["instance", "system"]))]
struct EvalArgs {
    /// Single LQR instance JSON (A, B, Q, R, Phi).
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Global system JSON; every auxiliary system is evaluated.
    #[arg(long)]
    system: Option<PathBuf>,
    /// Gain matrix JSON for an instance.
    #[arg(long, requires = "instance", conflicts_with = "optimal")]
    gain: Option<PathBuf>,
    /// Hierarchical policy JSON for a system.
    #[arg(long, requires = "system", conflicts_with = "optimal")]
    policy: Option<PathBuf>,
    /// Evaluate the optimal gain(s).
    #[arg(long)]
    optimal: bool,
    /// Exploration std applied to every evaluated policy.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Oracle,
    ModelFree,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    emit_plot: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Verify { system, tol } => verify(&system, tol),
        Command::Decompose { system, out } => decompose(&system, out.as_deref()),
        Command::Eval(a) => eval(a),
        Command::Train(a) => train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hierlqr: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Prints to stdout; a closed pipe is not an error.
fn print(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{text}").and_then(|_| stdout.flush());
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, text),
        None => {
            print(text);
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable value")
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut spec = match &a.config {
        Some(p) => serde_json::from_str::<GeneratorSpec>(&read(p)?).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?,
        None => GeneratorSpec {
            sizes: a.sizes,
            state_dims: a.state_dims,
            action_dims: a.action_dims,
            seed: 0,
            scale: 1.0,
        },
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.scale {
        spec.scale = s;
    }
    let sys = spec.generate()?;
    emit(a.out.as_deref(), &sys.to_json().map_err(CliError::Compute)?)
}

fn verify(path: &Path, tol: Option<f64>) -> Result<(), CliError> {
    let sys = load_system(path)?;
    let tol = tol.unwrap_or_else(|| default_exchangeability_tol(&sys));
    let report = verify_partial_exchangeability(&sys, tol).map_err(CliError::Compute)?;
    print(&to_json(&report));
    if report.holds {
        Ok(())
    } else {
        Err(CliError::Verification(report.summary()))
    }
}

fn ensemble(sys: &GlobalLqrSystem) -> Result<AuxiliaryEnsemble, CliError> {
    build_auxiliary(sys).map_err(|e| match e {
        Error::NotExchangeable(r) => {
            print(&to_json(&*r));
            CliError::Verification(r.summary())
        }
        e => CliError::Compute(e),
    })
}

fn decompose(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ens = ensemble(&load_system(path)?)?;
    emit(out, &ens.to_json().map_err(CliError::Compute)?)
}

fn evaluate(inst: &LqrInstance, pol: &LinearGaussianPolicy) -> Result<serde_json::Value, CliError> {
    let an = analyze_policy(inst, pol).map_err(unstable)?;
    let c_star = optimal_cost(inst, pol.sigma)?;
    Ok(json!({
        "cost": an.cost,
        "optimal_cost": c_star,
        "gap": an.cost - c_star,
        "E_norm": an.e_k.frobenius_norm(),
        "grad_norm": an.grad.frobenius_norm(),
        "rho": an.rho,
    }))
}

fn optimal_cost(inst: &LqrInstance, sigma: f64) -> Result<f64, CliError> {
    let (_, ks) = inst.optimal().map_err(CliError::Compute)?;
    Ok(analyze_policy(inst, &LinearGaussianPolicy::new(ks, sigma)).map_err(CliError::Compute)?.cost)
}

fn unstable(e: Error) -> CliError {
    match e {
        Error::Unstable { .. } => CliError::Unstable(e.to_string()),
        e => CliError::Compute(e),
    }
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let value = if let Some(path) = &a.instance {
        let inst: LqrInstance = serde_json::from_str(&read(path)?).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        let k = if a.optimal {
            inst.optimal().map_err(CliError::Compute)?.1
        } else if let Some(g) = &a.gain {
            serde_json::from_str::<Mat>(&read(g)?).map_err(|e| CliError::Schema(format!("{}: {e}", g.display())))?
        } else {
            Mat::zeros(inst.action_dim(), inst.state_dim())
        };
        evaluate(&inst, &LinearGaussianPolicy::new(k, a.sigma))?
    } else {
        let path = a.system.as_deref().expect("clap enforces a target");
        let sys = load_system(path)?;
        let ens = ensemble(&sys)?;
        let mut policy = if let Some(p) = &a.policy {
            serde_json::from_str::<HierarchicalPolicy>(&read(p)?).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?
        } else {
            HierarchicalPolicy::zeros(&ens, a.sigma, a.sigma)
        };
        if a.optimal {
            for (l, s) in ens.active_subsystems() {
                policy.tilde[l].k = s.instance().optimal().map_err(CliError::Compute)?.1;
            }
            policy.mean_field.k = ens.mean_field.instance().optimal().map_err(CliError::Compute)?.1;
        }
        if policy.tilde.len() != ens.subsystems.len() {
            return Err(CliError::Schema("policy needs one tilde entry per subpopulation".into()));
        }
        let mut systems = Vec::new();
        let mut total_gap = 0.0;
        for (l, s) in ens.active_subsystems() {
            let mut v = evaluate(&s.instance(), &policy.tilde[l])?;
            total_gap += s.n_agents as f64 * v["gap"].as_f64().unwrap_or(f64::NAN);
            v["id"] = json!(format!("tilde{l}"));
            v["weight"] = json!(s.n_agents);
            systems.push(v);
        }
        let mut v = evaluate(&ens.mean_field.instance(), &policy.mean_field)?;
        total_gap += v["gap"].as_f64().unwrap_or(f64::NAN);
        v["id"] = json!("mean");
        v["weight"] = json!(1);
        systems.push(v);
        let parts = decomposed_cost(&ens, &policy).map_err(unstable)?.total();
        let mut out = json!({ "systems": systems, "total_cost": parts, "total_gap": total_gap });
        let deterministic = policy.mean_field.sigma == 0.0 && policy.tilde.iter().all(|p| p.sigma == 0.0);
        if deterministic {
            let g = policy.global_gain(&ens).map_err(CliError::Compute)?;
            out["global_cost"] = json!(global_policy_cost(&sys, &g).map_err(unstable)?);
        }
        out
    };
    print(&to_json(&value));
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::Oracle => Mode::OracleGradient,
            ModeArg::ModelFree => Mode::ModelFree,
        };
    }
    cfg.emit_plot |= a.emit_plot;
    if let Some(cap) = thread_cap()? {
        cfg.train.threads = if cfg.train.threads == 0 { cap } else { cfg.train.threads.min(cap) };
    }
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_dir = a.out.or_else(|| cfg.out_dir.as_ref().map(|d| base.join(d))).unwrap_or_else(|| PathBuf::from("hierlqr-out"));

    let sys = cfg.system(&base)?;
    let ens = ensemble(&sys)?;
    cfg.train.validate(ens.subsystems.len() + 1).map_err(|e| CliError::Schema(e.to_string()))?;
    let k0 = cfg.initial_policy(&ens, &base)?;

    let result = train_hierarchical(&sys, &ens, &k0, &cfg.train);
    let (history, failure) = match result {
        Ok(h) => (h, None),
        Err(abort) => {
            let abort = *abort;
            let msg = format!("{} at iteration {}: {}", abort.system, abort.iteration, abort.error);
            let err = match abort.error {
                Error::Unstable { .. } => CliError::Unstable(msg.clone()),
                e => CliError::Compute(e),
            };
            (abort.history, Some((msg, err)))
        }
    };
    write_outputs(&out_dir, &cfg, &history, failure.as_ref().map(|(m, _)| m.as_str()))?;
    match failure {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("HIERLQR_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Schema(format!("HIERLQR_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, history: &TrainHistory, failure: Option<&str>) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_atomic(&dir.join("history.csv"), &history.to_csv())?;
    let summary = json!({
        "status": if failure.is_some() { "aborted" } else { "completed" },
        "error": failure,
        "summary": history.summary(),
        "config": cfg,
    });
    write_atomic(&dir.join("summary.json"), &to_json(&summary))?;
    if cfg.emit_plot {
        write_atomic(&dir.join("gap.svg"), &gap_plot(history))?;
    }
    Ok(())
}
