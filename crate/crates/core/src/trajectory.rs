//! Rollouts, segment-tagged trajectories and exact trajectory probabilities.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, AgentState, EnvConfig, GridSpec, StartDistribution};
use crate::policy::{Policy, PolicyError};
use crate::rng;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("step {index} is not consistent with the dynamics")]
    Inconsistent { index: usize },
    #[error("segments do not partition the steps: {0}")]
    Segments(String),
    #[error("outcome {outcome:?} disagrees with final state {final_state}")]
    Outcome { outcome: Outcome, final_state: AgentState },
    #[error("dataset mixes ids: {0}")]
    MixedDataset(String),
    #[error("dataset line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentTag {
    Behavior,
    Exploration,
}

/// Half-open step range `[start, end)` with a tag. Empty segments are
/// allowed and mark boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tag: SegmentTag,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: AgentState,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub policy_id: String,
    pub env_id: String,
    pub seed: u64,
    pub stream: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pause_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retries: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub steps: Vec<Step>,
    pub final_state: AgentState,
    pub segments: Vec<Segment>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn start_state(&self) -> AgentState {
        self.state_at(0)
    }

    /// State before step `i`; `i == len` gives the final state.
    pub fn state_at(&self, i: usize) -> AgentState {
        self.steps.get(i).map(|s| s.state).unwrap_or(self.final_state)
    }

    /// Tag of the segment containing step `i` (the last non-empty segment
    /// for `i == len`).
    pub fn tag_at(&self, i: usize) -> Option<SegmentTag> {
        self.segments
            .iter()
            .find(|s| s.start <= i && i < s.end)
            .or_else(|| self.segments.iter().rev().find(|s| s.end == i && s.start < s.end))
            .or_else(|| self.segments.last())
            .map(|s| s.tag)
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Start of the final Behavior segment.
    pub fn final_behavior_start(&self) -> usize {
        self.segments.iter().rev().find(|s| s.tag == SegmentTag::Behavior).map(|s| s.start).unwrap_or(0)
    }

    /// Copy with identifying metadata stripped, for participant payloads.
    pub fn anonymized(&self) -> Trajectory {
        Trajectory { meta: TrajectoryMeta::default(), ..self.clone() }
    }

    /// Checks dynamics consistency, the segment partition and the outcome
    /// flag against `spec`.
    pub fn validate(&self, spec: &GridSpec) -> Result<(), TrajectoryError> {
        for (i, step) in self.steps.iter().enumerate() {
            if !spec.is_valid_state(&step.state) {
                return Err(TrajectoryError::Inconsistent { index: i });
            }
            let next = self.state_at(i + 1);
            if spec.step(&step.state, step.action).0 != next {
                return Err(TrajectoryError::Inconsistent { index: i });
            }
        }
        if !spec.is_valid_state(&self.final_state) {
            return Err(TrajectoryError::Inconsistent { index: self.len() });
        }
        let mut cursor = 0;
        for seg in &self.segments {
            if seg.start != cursor || seg.end < seg.start {
                return Err(TrajectoryError::Segments(format!("{seg:?} does not start at {cursor}")));
            }
            cursor = seg.end;
        }
        if cursor != self.len() {
            return Err(TrajectoryError::Segments(format!("segments end at {cursor}, trajectory has {}", self.len())));
        }
        let at_goal = self.final_state.cell() == spec.goal();
        if at_goal != (self.outcome == Outcome::Success) {
            return Err(TrajectoryError::Outcome { outcome: self.outcome, final_state: self.final_state });
        }
        Ok(())
    }
}

/// Runs `policy` from `start` for at most `max_steps`, stopping at the goal.
/// A start on the goal cell terminates immediately.
pub(crate) fn run_policy(
    policy: &dyn Policy,
    env: &EnvConfig,
    start: AgentState,
    max_steps: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<(Vec<Step>, AgentState), PolicyError> {
    let mut steps = Vec::new();
    let mut s = start;
    if s.cell() == env.spec.goal() {
        return Ok((steps, s));
    }
    for _ in 0..max_steps {
        let a = policy.sample_action(&s, rng)?;
        let (next, reward, done) = env.step(&s, a);
        steps.push(Step { state: s, action: a, reward });
        s = next;
        if done {
            break;
        }
    }
    Ok((steps, s))
}

pub(crate) fn outcome_of(spec: &GridSpec, final_state: &AgentState) -> Outcome {
    if final_state.cell() == spec.goal() {
        Outcome::Success
    } else {
        Outcome::Timeout
    }
}

/// One episode of `policy` from `start` up to the env horizon.
pub fn rollout(
    policy: &dyn Policy,
    policy_id: &str,
    env: &EnvConfig,
    start: AgentState,
    rng: &mut dyn rand::RngCore,
) -> Result<Trajectory, TrajectoryError> {
    rollout_for(policy, policy_id, env, start, env.horizon, rng)
}

pub(crate) fn rollout_for(
    policy: &dyn Policy,
    policy_id: &str,
    env: &EnvConfig,
    start: AgentState,
    max_steps: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Trajectory, TrajectoryError> {
    let (steps, final_state) = run_policy(policy, env, start, max_steps, rng)?;
    let n = steps.len();
    Ok(Trajectory {
        meta: TrajectoryMeta { policy_id: policy_id.into(), env_id: env.id.clone(), ..Default::default() },
        steps,
        outcome: outcome_of(&env.spec, &final_state),
        final_state,
        segments: vec![Segment { tag: SegmentTag::Behavior, start: 0, end: n }],
    })
}

/// Rollouts sharing one environment and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutDataset {
    pub env_id: String,
    pub policy_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        let n = self.trajectories.iter().filter(|t| t.outcome == Outcome::Success).count();
        n as f64 / self.len().max(1) as f64
    }

    /// One JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TrajectoryError> {
        for t in &self.trajectories {
            let rec = DatasetRecord { version: DATASET_VERSION, trajectory: t.clone() };
            serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<RolloutDataset, TrajectoryError> {
        let mut trajectories = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord =
                serde_json::from_str(&line).map_err(|e| TrajectoryError::Format { line: i + 1, message: e.to_string() })?;
            if rec.version != DATASET_VERSION {
                return Err(TrajectoryError::Format { line: i + 1, message: format!("unsupported version {}", rec.version) });
            }
            trajectories.push(rec.trajectory);
        }
        RolloutDataset::from_trajectories(trajectories)
    }

    pub fn from_trajectories(trajectories: Vec<Trajectory>) -> Result<RolloutDataset, TrajectoryError> {
        let (env_id, policy_id) = trajectories.first().map(|t| (t.meta.env_id.clone(), t.meta.policy_id.clone())).unwrap_or_default();
        if let Some(t) = trajectories.iter().find(|t| t.meta.env_id != env_id || t.meta.policy_id != policy_id) {
            return Err(TrajectoryError::MixedDataset(format!("{}/{} vs {}/{}", env_id, policy_id, t.meta.env_id, t.meta.policy_id)));
        }
        Ok(RolloutDataset { env_id, policy_id, trajectories })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    version: u32,
    #[serde(flatten)]
    trajectory: Trajectory,
}

/// `n` rollouts from the env start distribution. Episode `i` draws from
/// stream `i` of a base seed taken from `rng`, so the result does not
/// depend on how the episodes are scheduled.
pub fn collect<P: Policy>(
    policy: &P,
    policy_id: &str,
    env: &EnvConfig,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<RolloutDataset, TrajectoryError> {
    let base = rng.next_u64();
    let trajectories = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(base, i);
            let start = env.start.sample(&mut r);
            let mut t = rollout(policy, policy_id, env, start, &mut r)?;
            t.meta.seed = base;
            t.meta.stream = i;
            Ok(t)
        })
        .collect::<Result<Vec<_>, TrajectoryError>>()?;
    Ok(RolloutDataset { env_id: env.id.clone(), policy_id: policy_id.into(), trajectories })
}

/// `log p(tau)` under a start distribution, a policy and deterministic
/// dynamics. Matching transitions contribute 0 nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProb {
    pub value: f64,
    /// The first state has zero start probability; `value` is `-inf`.
    pub outside_start_support: bool,
}

pub fn trajectory_log_prob(
    traj: &Trajectory,
    policy: &dyn Policy,
    start: &StartDistribution,
    spec: &GridSpec,
) -> Result<LogProb, TrajectoryError> {
    for (i, step) in traj.steps.iter().enumerate() {
        if spec.step(&step.state, step.action).0 != traj.state_at(i + 1) {
            return Err(TrajectoryError::Inconsistent { index: i });
        }
    }
    let p0 = start.prob(&traj.start_state());
    if p0 <= 0.0 {
        return Ok(LogProb { value: f64::NEG_INFINITY, outside_start_support: true });
    }
    let mut lp = p0.ln();
    for step in &traj.steps {
        let p = policy.action_distribution(&step.state)?;
        lp += p[step.action.index()].ln();
    }
    Ok(LogProb { value: lp, outside_start_support: false })
}
