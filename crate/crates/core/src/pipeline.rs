//! The end-to-end setup shared by the surrogate comparison, the study
//! builder and the CLI: layout, train/test environments, the trained
//! behavioral policy and the exploration oracle.

use serde::{Deserialize, Serialize};

use crate::gridworld::{apply_shift, build_four_rooms, AgentState, DoorOffsets, EnvConfig, GridError, ShiftEdit, BOTTOM_RIGHT, TOP_LEFT};
use crate::policy::{ExplorationOracle, PolicyError, TabularPolicy};
use crate::rng;
use crate::selection::{build_explanation_set, Condition, ExplanationSource, SelectionError, DEFAULT_EXPLANATIONS};
use crate::surrogate::ClonerConfig;
use crate::training::{train_a2c, TrainConfig, TrainingError, TrainingLog};
use crate::trajectory::{collect, TrajectoryError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Side length of the square four-rooms layout (odd, at least 9).
    pub size: usize,
    pub train_room: String,
    pub test_room: String,
    pub horizon: usize,
    pub training: TrainConfig,
    /// Rollouts of the trained policy offered to the random and critical
    /// selectors.
    pub dataset_episodes: usize,
    pub explanations: usize,
    pub show_full: bool,
    pub conditions: Vec<Condition>,
    pub cloner: ClonerConfig,
    /// Task-2 style contexts per seed for the success-prediction metric.
    pub prediction_contexts: usize,
    /// Rollouts of the cloner per prediction.
    pub prediction_rollouts: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            size: 13,
            train_room: TOP_LEFT.into(),
            test_room: BOTTOM_RIGHT.into(),
            horizon: crate::gridworld::DEFAULT_HORIZON,
            training: TrainConfig::default(),
            dataset_episodes: 100,
            explanations: DEFAULT_EXPLANATIONS,
            show_full: false,
            conditions: Condition::ALL.to_vec(),
            cloner: ClonerConfig::default(),
            prediction_contexts: 20,
            prediction_rollouts: 21,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.conditions.is_empty() {
            return bad("at least one condition is required");
        }
        if self.explanations == 0 {
            return bad("explanation count must be positive");
        }
        if self.dataset_episodes < self.explanations {
            return bad("dataset must hold at least as many rollouts as explanations");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.prediction_rollouts == 0 {
            return bad("prediction rollouts must be positive");
        }
        self.cloner.validate().map_err(PipelineError::Config)?;
        self.training.validate()?;
        Ok(())
    }
}

/// A resolved pipeline: environments plus the trained policy.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub train_env: EnvConfig,
    pub test_env: EnvConfig,
    pub policy: TabularPolicy,
    pub policy_id: String,
    pub oracle: ExplorationOracle,
    pub training_log: TrainingLog,
}

impl Pipeline {
    /// Builds both environments and trains the behavioral policy.
    pub fn build(config: &PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let (train_env, test_env) = environments(config)?;
        let out = train_a2c(&train_env, &config.training)?;
        Ok(Self::from_parts(config.clone(), train_env, test_env, out.policy, out.log))
    }

    /// Reuses an already trained policy.
    pub fn from_parts(
        config: PipelineConfig,
        train_env: EnvConfig,
        test_env: EnvConfig,
        policy: TabularPolicy,
        training_log: TrainingLog,
    ) -> Self {
        let oracle = ExplorationOracle::new(&train_env.spec);
        let policy_id = policy.id();
        Pipeline { config, train_env, test_env, policy, policy_id, oracle, training_log }
    }

    /// Displayed start states of `count` explanation items under
    /// `condition`, drawn from as many independent explanation sets as it
    /// takes. Set `i` uses the streams a surrogate seed of `seed + i` would.
    pub fn displayed_starts(&self, condition: Condition, count: usize, seed: u64) -> Result<Vec<AgentState>, PipelineError> {
        let per_set = self.config.explanations;
        let mut out = Vec::with_capacity(count);
        let mut i = 0u64;
        while out.len() < count {
            let s = seed.wrapping_add(i);
            let dataset = match condition {
                Condition::CounterfactualStates => None,
                _ => Some(collect(&self.policy, &self.policy_id, &self.train_env, self.config.dataset_episodes, &mut rng::stream(s, 0))?),
            };
            let src = ExplanationSource {
                policy: &self.policy,
                policy_id: &self.policy_id,
                dataset: dataset.as_ref(),
                oracle: &self.oracle,
                env: &self.train_env,
            };
            let set = build_explanation_set(condition, &src, per_set, false, &mut rng::stream(s, 1))?;
            out.extend(set.items.iter().map(|it| it.displayed_start_state()).take(count - out.len()));
            i += 1;
        }
        Ok(out)
    }
}

/// Train env (starts in the train room) and the start-region shifted test
/// env (starts in the test room).
pub fn environments(config: &PipelineConfig) -> Result<(EnvConfig, EnvConfig), PipelineError> {
    let spec = build_four_rooms(config.size, DoorOffsets::centered(config.size))?;
    let train = EnvConfig::new(spec, &config.train_room)?.with_horizon(config.horizon);
    let test = apply_shift(&train, &ShiftEdit::StartRegion { room: config.test_room.clone() })?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_condition_is_rejected() {
        let e = serde_json::from_str::<PipelineConfig>(r#"{"conditions": ["random", "saliency"]}"#);
        assert!(e.is_err());
        let e = serde_json::from_str::<PipelineConfig>(r#"{"explanation": 3}"#);
        assert!(e.is_err());
    }

    #[test]
    fn environments_differ_only_in_start() {
        let (train, test) = environments(&PipelineConfig::default()).unwrap();
        assert_eq!(train.spec, test.spec);
        assert_ne!(train.start, test.start);
        let far = train.spec.room(BOTTOM_RIGHT).unwrap();
        assert!(test.start.support().iter().all(|s| far.contains(s.cell())));
    }
}
