//! Environments and policies the service can build sessions and explorers
//! from.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cftraj::gridworld::{default_four_rooms, EnvConfig, GridSpec, FOUR_ROOMS};
use cftraj::policy::{ExplorationOracle, PolicyFile, TabularPolicy};
use serde::Serialize;

use crate::store::StoreError;

pub struct PolicyArtifact {
    pub id: String,
    pub policy: TabularPolicy,
    pub spec: GridSpec,
    pub train_env: String,
}

#[derive(Default)]
pub struct Artifacts {
    envs: BTreeMap<String, EnvConfig>,
    policies: BTreeMap<String, PolicyArtifact>,
    oracles: BTreeMap<String, ExplorationOracle>,
}

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("policy {policy}: {message}")]
    Policy { policy: String, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Serialize)]
pub struct EnvSummary {
    pub id: String,
    pub layout_id: String,
    pub horizon: usize,
    pub start_states: usize,
}

#[derive(Debug, Serialize)]
pub struct PolicySummary {
    pub id: String,
    pub layout_id: String,
    pub train_env: String,
}

impl Artifacts {
    /// The default four-rooms layout with one environment per start room.
    pub fn builtin() -> Self {
        let mut a = Artifacts::default();
        let spec = default_four_rooms();
        for room in FOUR_ROOMS {
            a.add_env(EnvConfig::new(spec.clone(), room).expect("default rooms exist"));
        }
        a
    }

    pub fn add_env(&mut self, env: EnvConfig) {
        self.oracles.entry(env.spec.id().to_owned()).or_insert_with(|| ExplorationOracle::new(&env.spec));
        self.envs.insert(env.id.clone(), env);
    }

    /// Registers a saved policy. Its training environment must already be
    /// known and share the policy's layout.
    pub fn add_policy(&mut self, file: PolicyFile) -> Result<String, ArtifactError> {
        let id = file.policy_id.clone();
        let err = |message: String| ArtifactError::Policy { policy: id.clone(), message };
        let train_env = file.metadata.train_env.clone().ok_or_else(|| err("no training environment recorded".into()))?;
        let (policy, spec) = file.into_policy().map_err(|e| err(e.to_string()))?;
        let env = self.envs.get(&train_env).ok_or_else(|| err(format!("unknown training environment `{train_env}`")))?;
        if env.spec != spec {
            return Err(err(format!("layout differs from `{train_env}`")));
        }
        self.policies.insert(id.clone(), PolicyArtifact { id: id.clone(), policy, spec, train_env });
        Ok(id)
    }

    /// Loads every `*.json` file in `<dir>/envs` and then `<dir>/policies`
    /// (missing directories are fine).
    pub fn load_dir(&mut self, dir: &Path) -> Result<(), ArtifactError> {
        for path in json_files(&dir.join("envs"))? {
            let text = fs::read_to_string(&path).map_err(|e| StoreError::Io { path: path.clone(), source: e })?;
            let env: EnvConfig =
                serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })?;
            self.add_env(env);
        }
        for path in json_files(&dir.join("policies"))? {
            let text = fs::read_to_string(&path).map_err(|e| StoreError::Io { path: path.clone(), source: e })?;
            let file = PolicyFile::from_json(&text).map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })?;
            self.add_policy(file)?;
        }
        Ok(())
    }

    pub fn env(&self, id: &str) -> Option<&EnvConfig> {
        self.envs.get(id)
    }

    pub fn policy(&self, id: &str) -> Option<&PolicyArtifact> {
        self.policies.get(id)
    }

    pub fn oracle(&self, layout_id: &str) -> Option<&ExplorationOracle> {
        self.oracles.get(layout_id)
    }

    pub fn env_summaries(&self) -> Vec<EnvSummary> {
        self.envs
            .values()
            .map(|e| EnvSummary {
                id: e.id.clone(),
                layout_id: e.spec.id().to_owned(),
                horizon: e.horizon,
                start_states: e.start.support().len(),
            })
            .collect()
    }

    pub fn policy_summaries(&self) -> Vec<PolicySummary> {
        self.policies
            .values()
            .map(|p| PolicySummary { id: p.id.clone(), layout_id: p.spec.id().to_owned(), train_env: p.train_env.clone() })
            .collect()
    }
}

fn json_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, StoreError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(StoreError::Io { path: dir.into(), source: e }),
    };
    let mut out: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
    out.sort();
    Ok(out)
}
