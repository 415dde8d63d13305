use std::path::{Path, PathBuf};

use hierlqr::decomp::{AuxiliaryEnsemble, HierarchicalPolicy};
use hierlqr::npg::TrainConfig;
use hierlqr::sysmodel::{generate_system, GlobalLqrSystem, SubpopulationPartition};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Partition and seed for the random system generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub sizes: Vec<usize>,
    pub state_dims: Vec<usize>,
    pub action_dims: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<GlobalLqrSystem, CliError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(CliError::Schema(format!("scale must be positive, got {}", self.scale)));
        }
        let p = SubpopulationPartition::new(self.sizes.clone(), self.state_dims.clone(), self.action_dims.clone())
            .map_err(|e| CliError::Schema(e.to_string()))?;
        Ok(generate_system(&p, self.seed, self.scale))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSource {
    /// Path to a system JSON file, relative to the config file.
    File(PathBuf),
    Inline(Box<GlobalLqrSystem>),
    Generate(GeneratorSpec),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialPolicy {
    #[default]
    Zero,
    /// Optimal gain of every auxiliary system.
    Optimal,
    /// Path to a hierarchical policy JSON file, relative to the config file.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSource,
    pub train: TrainConfig,
    #[serde(default)]
    pub initial_policy: InitialPolicy,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub emit_plot: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn system(&self, base: &Path) -> Result<GlobalLqrSystem, CliError> {
        match &self.system {
            SystemSource::File(p) => load_system(&base.join(p)),
            SystemSource::Inline(s) => Ok((**s).clone()),
            SystemSource::Generate(g) => g.generate(),
        }
    }

    pub fn initial_policy(&self, ens: &AuxiliaryEnsemble, base: &Path) -> Result<HierarchicalPolicy, CliError> {
        let sigma = |i: usize| {
            let s = &self.train.sigma_explore;
            if s.len() == 1 { s[0] } else { s.get(i).copied().unwrap_or(0.0) }
        };
        let l = ens.subsystems.len();
        let mut policy = match &self.initial_policy {
            InitialPolicy::Zero => HierarchicalPolicy::zeros(ens, 0.0, 0.0),
            InitialPolicy::Optimal => {
                let mut p = HierarchicalPolicy::zeros(ens, 0.0, 0.0);
                for (i, s) in ens.active_subsystems() {
                    p.tilde[i].k = s.instance().optimal().map_err(CliError::Compute)?.1;
                }
                p.mean_field.k = ens.mean_field.instance().optimal().map_err(CliError::Compute)?.1;
                p
            }
            InitialPolicy::File(p) => {
                let path = base.join(p);
                let text = read(&path)?;
                serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?
            }
        };
        for (i, t) in policy.tilde.iter_mut().enumerate() {
            t.sigma = sigma(i);
        }
        policy.mean_field.sigma = sigma(l);
        Ok(policy)
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_system(path: &Path) -> Result<GlobalLqrSystem, CliError> {
    let text = read(path)?;
    GlobalLqrSystem::from_json(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}
