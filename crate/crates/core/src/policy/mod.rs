//! Policies: the tabular softmax policy being explained, scripted
//! distractors, and the exploration oracle.

mod file;
mod oracle;
mod scripted;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gridworld::{Action, AgentState, GridError, GridSpec};

pub use file::{PolicyFile, POLICY_FORMAT, POLICY_VERSION};
pub use oracle::ExplorationOracle;
pub use scripted::{ScriptedKind, ScriptedPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("state {0} is not covered by the policy's state indexer")]
    UnknownState(AgentState),
    #[error("exploration path of length {len} exceeds cap {cap}")]
    CapExceeded { len: usize, cap: usize },
    #[error("scripted policy check failed: {0}")]
    ScriptCheck(String),
    #[error("policy file: {0}")]
    File(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type ActionProbs = [f64; Action::COUNT];

/// Anything that maps states to action distributions.
pub trait Policy: Sync {
    fn action_distribution(&self, state: &AgentState) -> Result<ActionProbs, PolicyError>;

    /// Inverse-CDF draw over the fixed action order. Consumes exactly one
    /// uniform variate.
    fn sample_action(&self, state: &AgentState, rng: &mut dyn rand::RngCore) -> Result<Action, PolicyError> {
        let p = self.action_distribution(state)?;
        Ok(sample_from(&p, rng.random::<f64>()))
    }
}

pub(crate) fn sample_from(p: &ActionProbs, u: f64) -> Action {
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Action::ALL[i];
        }
    }
    let last = p.iter().rposition(|x| *x > 0.0).unwrap_or(Action::COUNT - 1);
    Action::ALL[last]
}

/// Entropy in nats of an action distribution.
pub fn entropy_of(p: &ActionProbs) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Indices of the maximal entries.
pub fn argmax_set(p: &ActionProbs) -> Vec<usize> {
    let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..p.len()).filter(|i| p[*i] == m).collect()
}

/// Bijection between the open states of one layout and `0..len`.
///
/// Open cells are numbered in row-major order; each cell owns four
/// consecutive indices, one per heading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateIndexer {
    width: usize,
    height: usize,
    cell_slot: Vec<Option<u32>>,
    len: usize,
}

impl StateIndexer {
    pub fn new(spec: &GridSpec) -> Self {
        let mut cell_slot = vec![None; spec.width() * spec.height()];
        let mut n = 0u32;
        for c in spec.open_cells() {
            cell_slot[c.y * spec.width() + c.x] = Some(n);
            n += 1;
        }
        StateIndexer { width: spec.width(), height: spec.height(), cell_slot, len: n as usize * 4 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self, s: &AgentState) -> Option<usize> {
        if s.x >= self.width || s.y >= self.height {
            return None;
        }
        self.cell_slot[s.y * self.width + s.x].map(|slot| slot as usize * 4 + s.dir.index())
    }

    pub fn matches(&self, spec: &GridSpec) -> bool {
        *self == StateIndexer::new(spec)
    }
}

/// Softmax policy over a logits table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    indexer: StateIndexer,
    logits: Vec<ActionProbs>,
}

impl TabularPolicy {
    /// All-zero logits: uniform everywhere.
    pub fn uniform(spec: &GridSpec) -> Self {
        let indexer = StateIndexer::new(spec);
        let logits = vec![[0.0; 3]; indexer.len()];
        TabularPolicy { indexer, logits }
    }

    pub fn from_logits(spec: &GridSpec, logits: Vec<ActionProbs>) -> Result<Self, PolicyError> {
        let indexer = StateIndexer::new(spec);
        if logits.len() != indexer.len() {
            return Err(PolicyError::File(format!("logits table has {} rows, layout needs {}", logits.len(), indexer.len())));
        }
        if logits.iter().flatten().any(|z| !z.is_finite()) {
            return Err(PolicyError::File("non-finite logit".into()));
        }
        Ok(TabularPolicy { indexer, logits })
    }

    pub fn indexer(&self) -> &StateIndexer {
        &self.indexer
    }

    pub fn index(&self, s: &AgentState) -> Result<usize, PolicyError> {
        self.indexer.index(s).ok_or(PolicyError::UnknownState(*s))
    }

    pub fn logits(&self) -> &[ActionProbs] {
        &self.logits
    }

    pub fn logits_at(&self, s: &AgentState) -> Result<&ActionProbs, PolicyError> {
        Ok(&self.logits[self.index(s)?])
    }

    pub fn logits_at_mut(&mut self, s: &AgentState) -> Result<&mut ActionProbs, PolicyError> {
        let i = self.index(s)?;
        Ok(&mut self.logits[i])
    }

    pub fn probs_at_index(&self, i: usize) -> ActionProbs {
        softmax(&self.logits[i])
    }

    pub fn entropy(&self, s: &AgentState) -> Result<f64, PolicyError> {
        Ok(entropy_of(&self.action_distribution(s)?))
    }

    /// Content hash, stable across runs and platforms.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.indexer.width as u64).to_le_bytes());
        h.update((self.indexer.height as u64).to_le_bytes());
        for slot in &self.indexer.cell_slot {
            h.update([slot.is_some() as u8]);
        }
        for z in self.logits.iter().flatten() {
            h.update(z.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn id(&self) -> String {
        format!("pol-{}", self.fingerprint())
    }
}

impl Policy for TabularPolicy {
    fn action_distribution(&self, state: &AgentState) -> Result<ActionProbs, PolicyError> {
        Ok(softmax(self.logits_at(state)?))
    }
}

pub fn softmax(z: &ActionProbs) -> ActionProbs {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyMeta {
    pub seed: Option<u64>,
    pub training_config: Option<serde_json::Value>,
    /// Id of the environment the policy was trained in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_env: Option<String>,
}
