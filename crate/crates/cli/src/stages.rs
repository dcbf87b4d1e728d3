//! Stage functions shared by the single-stage subcommands and `pipeline`.
//! Each stage derives its random streams from one seed the same way, so a
//! pipeline run and a hand-chained run with the same seeds produce the same
//! bytes.

use std::fs;
use std::path::Path;

use cftraj::divergence::{exact_kl, mc_trajectory_kl, start_state_kl, Categorical, KLReport};
use cftraj::gridworld::{AgentState, EnvConfig, GridSpec, StartDistribution};
use cftraj::pipeline::{environments, Pipeline, PipelineConfig};
use cftraj::policy::{ExplorationOracle, PolicyFile, PolicyMeta, TabularPolicy};
use cftraj::rng;
use cftraj::selection::{build_explanation_set, Condition, ExplanationSet, ExplanationSource};
use cftraj::study::{build_task1_session, build_task2_session, StudyContext, StudySession, Task};
use cftraj::surrogate::{compare_on, SurrogateReport};
use cftraj::training::{train_a2c, TrainConfig, TrainingLog};
use cftraj::trajectory::{collect, RolloutDataset, Trajectory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Stream indices under the run seed.
const DATASET_STREAM: u64 = 0;
const SELECTION_STREAM: u64 = 1;
const DIVERGENCE_STREAM: u64 = 5;

/// Where a run takes place: layout size, rooms and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub size: usize,
    pub train_room: String,
    pub test_room: String,
    pub horizon: usize,
}

impl Setting {
    pub fn of(cfg: &PipelineConfig) -> Self {
        Setting { size: cfg.size, train_room: cfg.train_room.clone(), test_room: cfg.test_room.clone(), horizon: cfg.horizon }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            size: self.size,
            train_room: self.train_room.clone(),
            test_room: self.test_room.clone(),
            horizon: self.horizon,
            ..PipelineConfig::default()
        }
    }

    pub fn envs(&self) -> Result<(EnvConfig, EnvConfig), CliError> {
        Ok(environments(&self.pipeline_config())?)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(path, e))
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes") + "\n"
}

pub struct Trained {
    pub file: PolicyFile,
    pub log: TrainingLog,
}

pub fn train(setting: &Setting, cfg: &TrainConfig) -> Result<Trained, CliError> {
    let (env, _) = setting.envs()?;
    let out = train_a2c(&env, cfg)?;
    let meta = PolicyMeta {
        seed: Some(cfg.seed),
        training_config: Some(serde_json::to_value(cfg).expect("config serializes")),
        train_env: Some(env.id.clone()),
    };
    Ok(Trained { file: PolicyFile::new(&out.policy, &env.spec, meta), log: out.log })
}

/// A policy file with its layout and training environment resolved.
pub struct Loaded {
    pub policy: TabularPolicy,
    pub policy_id: String,
    pub spec: GridSpec,
    pub train_env: EnvConfig,
    pub test_env: EnvConfig,
    pub oracle: ExplorationOracle,
}

/// Loads `path`; `setting` supplies rooms and horizon. The policy's layout
/// must match the setting's.
pub fn load_policy(path: &Path, setting: &Setting) -> Result<Loaded, CliError> {
    let file: PolicyFile = read_json(path)?;
    let (policy, spec) = file.into_policy().map_err(|e| CliError::input(path, e))?;
    let (train_env, test_env) = setting.envs()?;
    if train_env.spec != spec {
        return Err(CliError::input(path, format!("policy layout `{}` does not match a {0}x{0} four-rooms layout", spec.id())));
    }
    let policy_id = policy.id();
    let oracle = ExplorationOracle::new(&spec);
    Ok(Loaded { policy, policy_id, spec, train_env, test_env, oracle })
}

pub fn rollout(l: &Loaded, env: &EnvConfig, episodes: usize, seed: u64) -> Result<RolloutDataset, CliError> {
    Ok(collect(&l.policy, &l.policy_id, env, episodes, &mut rng::stream(seed, DATASET_STREAM))?)
}

pub fn explain(
    l: &Loaded,
    condition: Condition,
    dataset: Option<&RolloutDataset>,
    n: usize,
    show_full: bool,
    seed: u64,
) -> Result<ExplanationSet, CliError> {
    let src = ExplanationSource { policy: &l.policy, policy_id: &l.policy_id, dataset, oracle: &l.oracle, env: &l.train_env };
    Ok(build_explanation_set(condition, &src, n, show_full, &mut rng::stream(seed, SELECTION_STREAM))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorArg {
    ExactCategorical,
    SmoothedEmpirical,
    MonteCarloTrajectory,
}

/// `d` projected onto `support`, mixed with `epsilon` mass per state so
/// disjoint start rooms give a finite divergence.
fn on_support(d: &StartDistribution, support: &[AgentState], epsilon: f64) -> Result<Categorical, CliError> {
    let z = 1.0 + epsilon * support.len() as f64;
    Ok(Categorical::new(support.to_vec(), support.iter().map(|s| (d.prob(s) + epsilon) / z).collect())?)
}

/// Test-env start distribution against either the explanation set's
/// displayed starts or the train-env start distribution.
pub fn divergence(
    l: &Loaded,
    estimator: EstimatorArg,
    explanations: Option<&ExplanationSet>,
    samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<KLReport, CliError> {
    let support = l.spec.all_states();
    let mut r = rng::stream(seed, DIVERGENCE_STREAM);
    match estimator {
        EstimatorArg::ExactCategorical => {
            if explanations.is_some() {
                return Err(CliError::usage("the exact estimator compares start distributions; drop --explanations"));
            }
            let mut report =
                exact_kl(&on_support(&l.test_env.start, &support, epsilon)?, &on_support(&l.train_env.start, &support, epsilon)?)?;
            report.epsilon = Some(epsilon);
            Ok(report)
        }
        EstimatorArg::SmoothedEmpirical => {
            let test: Vec<AgentState> = (0..samples).map(|_| l.test_env.start.sample(&mut r)).collect();
            let expl: Vec<AgentState> = match explanations {
                Some(set) => set.items.iter().map(|it| it.displayed_start_state()).collect(),
                None => (0..samples).map(|_| l.train_env.start.sample(&mut r)).collect(),
            };
            Ok(start_state_kl(&test, &expl, &support, epsilon)?)
        }
        EstimatorArg::MonteCarloTrajectory => {
            let expl_start = match explanations {
                Some(set) => StartDistribution::uniform(set.items.iter().map(|it| it.displayed_start_state()))?,
                None => l.train_env.start.clone(),
            };
            let trajs: Vec<Trajectory> = collect(&l.policy, &l.policy_id, &l.test_env, samples, &mut r)?.trajectories;
            Ok(mc_trajectory_kl(&trajs, &l.test_env.start, &expl_start, &l.policy, &l.spec)?)
        }
    }
}

pub fn surrogate(l: &Loaded, config: &PipelineConfig, seeds: &[u64]) -> Result<SurrogateReport, CliError> {
    let p = Pipeline::from_parts(config.clone(), l.train_env.clone(), l.test_env.clone(), l.policy.clone(), empty_log(config));
    Ok(compare_on(&p, seeds)?)
}

fn empty_log(config: &PipelineConfig) -> TrainingLog {
    TrainingLog { config: config.training.clone(), env_id: String::new(), records: vec![], episodes_run: 0, final_success_rate: None }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSizes {
    pub dataset_episodes: usize,
    pub explanations: usize,
    pub questions: usize,
}

pub fn study_build(l: &Loaded, task: Task, condition: Condition, sizes: SessionSizes, seed: u64) -> Result<StudySession, CliError> {
    let ctx = StudyContext {
        policy: &l.policy,
        policy_id: &l.policy_id,
        policy_label: &l.train_env.id,
        train_env: &l.train_env,
        test_env: &l.test_env,
        oracle: &l.oracle,
        dataset_episodes: sizes.dataset_episodes,
        explanations: sizes.explanations,
        questions: sizes.questions,
    };
    Ok(match task {
        Task::BehaviorUnderstanding => build_task1_session(&ctx, condition, seed)?,
        Task::PerformanceEvaluation => build_task2_session(&ctx, condition, seed)?,
    })
}
