use serde::{Deserialize, Serialize};

use crate::gridworld::GridSpec;

use super::{ActionProbs, PolicyError, PolicyMeta, TabularPolicy};

pub const POLICY_FORMAT: &str = "cftraj.policy";
pub const POLICY_VERSION: u32 = 1;

/// On-disk policy record.
///
/// The indexer is described by its scheme name plus the full layout, which
/// is enough to rebuild the exact state numbering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub format: String,
    pub version: u32,
    pub policy_id: String,
    pub layout_id: String,
    pub indexer: IndexerDescription,
    pub logits: Vec<ActionProbs>,
    pub metadata: PolicyMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexerDescription {
    /// Always `open-cells-row-major-x4`.
    pub scheme: String,
    pub width: usize,
    pub height: usize,
    pub states: usize,
    pub layout: String,
}

const SCHEME: &str = "open-cells-row-major-x4";

impl PolicyFile {
    pub fn new(policy: &TabularPolicy, spec: &GridSpec, metadata: PolicyMeta) -> Self {
        PolicyFile {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            policy_id: policy.id(),
            layout_id: spec.id().into(),
            indexer: IndexerDescription {
                scheme: SCHEME.into(),
                width: spec.width(),
                height: spec.height(),
                states: policy.indexer().len(),
                layout: spec.to_layout_text(),
            },
            logits: policy.logits().to_vec(),
            metadata,
        }
    }

    pub fn spec(&self) -> Result<GridSpec, PolicyError> {
        Ok(GridSpec::from_layout_text(&self.layout_id, &self.indexer.layout)?)
    }

    /// Rebuilds the policy and its layout, checking every header field.
    pub fn into_policy(self) -> Result<(TabularPolicy, GridSpec), PolicyError> {
        if self.format != POLICY_FORMAT {
            return Err(PolicyError::File(format!("unexpected format `{}`", self.format)));
        }
        if self.version != POLICY_VERSION {
            return Err(PolicyError::File(format!("unsupported version {}", self.version)));
        }
        if self.indexer.scheme != SCHEME {
            return Err(PolicyError::File(format!("unknown indexer scheme `{}`", self.indexer.scheme)));
        }
        let spec = self.spec()?;
        if spec.width() != self.indexer.width || spec.height() != self.indexer.height {
            return Err(PolicyError::File("indexer dimensions disagree with layout".into()));
        }
        let policy = TabularPolicy::from_logits(&spec, self.logits)?;
        if policy.indexer().len() != self.indexer.states {
            return Err(PolicyError::File("indexer state count disagrees with layout".into()));
        }
        if policy.id() != self.policy_id {
            return Err(PolicyError::File(format!("policy id {} does not match content", self.policy_id)));
        }
        Ok((policy, spec))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(text).map_err(|e| PolicyError::File(e.to_string()))
    }
}
