//! Explanation selection: random rollouts, critical (lowest-entropy) states,
//! and counterfactual states reached by the exploration oracle.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{shortest_action_path, AgentState, EnvConfig, GridError};
use crate::policy::{ExplorationOracle, Policy, PolicyError, TabularPolicy};
use crate::rng;
use crate::trajectory::{outcome_of, run_policy, RolloutDataset, Segment, SegmentTag, Step, Trajectory, TrajectoryError, TrajectoryMeta};

pub const EXPLANATION_VERSION: u32 = 1;
pub const DEFAULT_EXPLANATIONS: usize = 10;
/// Fresh (pause, target) draws tried before giving up.
pub const MAX_SPLICE_RETRIES: u32 = 32;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("need {need} distinct trajectories, dataset has {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("no exploration target fits the remaining horizon after {retries} retries")]
    HorizonExhausted { retries: u32 },
    #[error("condition {0:?} needs a rollout dataset")]
    MissingDataset(Condition),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "random")]
    RandomStates,
    #[serde(rename = "critical")]
    CriticalStates,
    #[serde(rename = "counterfactual")]
    CounterfactualStates,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::RandomStates, Condition::CriticalStates, Condition::CounterfactualStates];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::RandomStates => "random",
            Condition::CriticalStates => "critical",
            Condition::CounterfactualStates => "counterfactual",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown condition `{s}` (expected random|critical|counterfactual)"))
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationItem {
    pub trajectory: Trajectory,
    /// First step shown to the viewer.
    pub display_start: usize,
    /// Critical step index, for the critical-states condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_entropy: Option<f64>,
}

impl ExplanationItem {
    pub fn displayed_start_state(&self) -> crate::gridworld::AgentState {
        self.trajectory.state_at(self.display_start)
    }

    /// Steps the viewer can see that the behavioral policy produced.
    pub fn visible_behavior_steps(&self) -> impl Iterator<Item = &Step> + '_ {
        let t = &self.trajectory;
        t.steps.iter().enumerate().skip(self.display_start).filter(move |(i, _)| t.tag_at(*i) == Some(SegmentTag::Behavior)).map(|(_, s)| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSet {
    pub version: u32,
    pub condition: Condition,
    pub show_full: bool,
    pub items: Vec<ExplanationItem>,
}

impl ExplanationSet {
    pub fn count(&self) -> usize {
        self.items.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("explanation set serializes")
    }
}

fn whole(trajectory: Trajectory) -> ExplanationItem {
    ExplanationItem { trajectory, display_start: 0, annotation: None, annotation_entropy: None }
}

/// `n` distinct trajectories drawn uniformly without replacement, in draw
/// order.
pub fn select_random<R: rand::Rng + ?Sized>(dataset: &RolloutDataset, n: usize, rng: &mut R) -> Result<ExplanationSet, SelectionError> {
    if dataset.len() < n {
        return Err(SelectionError::InsufficientData { need: n, have: dataset.len() });
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let (chosen, _) = idx.partial_shuffle(rng, n);
    let items = chosen.iter().map(|i| whole(dataset.trajectories[*i].clone())).collect();
    Ok(ExplanationSet { version: EXPLANATION_VERSION, condition: Condition::RandomStates, show_full: false, items })
}

/// Trajectories containing the lowest-entropy states of `policy` over the
/// dataset. State occurrences are ranked by ascending entropy (ties by
/// trajectory, then step index); an occurrence whose trajectory was already
/// picked is skipped in favour of the next lowest.
pub fn select_critical(dataset: &RolloutDataset, policy: &TabularPolicy, n: usize) -> Result<ExplanationSet, SelectionError> {
    let mut ranked = Vec::new();
    for (ti, t) in dataset.trajectories.iter().enumerate() {
        for (si, step) in t.steps.iter().enumerate() {
            ranked.push((policy.entropy(&step.state)?, ti, si));
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; dataset.len()];
    let mut items = Vec::with_capacity(n);
    for (h, ti, si) in ranked {
        if items.len() == n {
            break;
        }
        if std::mem::replace(&mut taken[ti], true) {
            continue;
        }
        items.push(ExplanationItem {
            trajectory: dataset.trajectories[ti].clone(),
            display_start: 0,
            annotation: Some(si),
            annotation_entropy: Some(h),
        });
    }
    if items.len() < n {
        return Err(SelectionError::InsufficientData { need: n, have: items.len() });
    }
    Ok(ExplanationSet { version: EXPLANATION_VERSION, condition: Condition::CriticalStates, show_full: false, items })
}

/// Splices an oracle excursion into a behavioral rollout.
///
/// 1. roll out the policy from the env start distribution;
/// 2. pause at a step index `t` drawn uniformly over the rollout;
/// 3. let the oracle walk to a uniformly drawn target (`k` actions);
/// 4. continue with the policy for the remaining `T - t - k` steps.
///
/// When `t + k >= T` a fresh pause index and target are drawn from the same
/// rollout, at most [`MAX_SPLICE_RETRIES`] times. The oracle walk does not terminate on the
/// goal cell; only behavior steps can end the episode.
pub fn generate_counterfactual(
    policy: &dyn Policy,
    policy_id: &str,
    oracle: &ExplorationOracle,
    env: &EnvConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<Trajectory, SelectionError> {
    let horizon = env.horizon;
    let s0 = env.start.sample(rng);
    let (prefix, prefix_end) = run_policy(policy, env, s0, horizon, rng)?;
    let draw_pause = |rng: &mut dyn rand::RngCore| {
        let t = if prefix.is_empty() { 0 } else { rand::Rng::random_range(rng, 0..prefix.len()) };
        (t, prefix.get(t).map(|s| s.state).unwrap_or(prefix_end))
    };

    let mut retries = 0;
    let (t, pause, target, path) = loop {
        let (t, pause) = draw_pause(rng);
        let (target, path) = oracle.explore(&env.spec, pause, rng)?;
        if t + path.len() < horizon {
            break (t, pause, target, path);
        }
        retries += 1;
        if retries > MAX_SPLICE_RETRIES {
            return Err(SelectionError::HorizonExhausted { retries: retries - 1 });
        }
    };
    let k = path.len();

    let mut steps: Vec<Step> = prefix[..t].to_vec();
    let mut s = pause;
    for a in &path {
        steps.push(Step { state: s, action: *a, reward: 0.0 });
        s = env.spec.step(&s, *a).0;
    }
    debug_assert_eq!(s, target);
    let (tail, final_state) = run_policy(policy, env, target, horizon - t - k, rng)?;
    steps.extend(tail);
    let n = steps.len();
    Ok(Trajectory {
        meta: TrajectoryMeta {
            policy_id: policy_id.into(),
            env_id: env.id.clone(),
            pause_index: Some(t),
            exploration_len: Some(k),
            retries: Some(retries),
            ..Default::default()
        },
        steps,
        outcome: outcome_of(&env.spec, &final_state),
        final_state,
        segments: vec![
            Segment { tag: SegmentTag::Behavior, start: 0, end: t },
            Segment { tag: SegmentTag::Exploration, start: t, end: t + k },
            Segment { tag: SegmentTag::Behavior, start: t + k, end: n },
        ],
    })
}

/// Interactive counterpart of [`generate_counterfactual`]: walk the shortest
/// path from `from` to `target` (tagged Exploration), then let the policy act
/// for up to a full horizon (tagged Behavior).
pub fn probe(
    policy: &dyn Policy,
    policy_id: &str,
    env: &EnvConfig,
    from: AgentState,
    target: AgentState,
    rng: &mut dyn rand::RngCore,
) -> Result<Trajectory, SelectionError> {
    let path = shortest_action_path(&env.spec, from, target)?;
    let mut steps = Vec::with_capacity(path.len() + env.horizon);
    let mut s = from;
    for a in &path {
        steps.push(Step { state: s, action: *a, reward: 0.0 });
        s = env.spec.step(&s, *a).0;
    }
    let k = steps.len();
    let (tail, final_state) = run_policy(policy, env, target, env.horizon, rng)?;
    steps.extend(tail);
    let n = steps.len();
    Ok(Trajectory {
        meta: TrajectoryMeta {
            policy_id: policy_id.into(),
            env_id: env.id.clone(),
            pause_index: Some(0),
            exploration_len: Some(k),
            ..Default::default()
        },
        steps,
        outcome: outcome_of(&env.spec, &final_state),
        final_state,
        segments: vec![Segment { tag: SegmentTag::Exploration, start: 0, end: k }, Segment { tag: SegmentTag::Behavior, start: k, end: n }],
    })
}

/// Everything a selector might need.
pub struct ExplanationSource<'a> {
    pub policy: &'a TabularPolicy,
    pub policy_id: &'a str,
    pub dataset: Option<&'a RolloutDataset>,
    pub oracle: &'a ExplorationOracle,
    pub env: &'a EnvConfig,
}

/// Dispatches to the selector for `condition`. Counterfactual items are
/// generated from per-item streams of one seed drawn from `rng`, so item
/// order is fixed regardless of scheduling.
pub fn build_explanation_set(
    condition: Condition,
    source: &ExplanationSource<'_>,
    n: usize,
    show_full: bool,
    rng: &mut dyn rand::RngCore,
) -> Result<ExplanationSet, SelectionError> {
    match condition {
        Condition::RandomStates => {
            let d = source.dataset.ok_or(SelectionError::MissingDataset(condition))?;
            select_random(d, n, rng)
        }
        Condition::CriticalStates => {
            let d = source.dataset.ok_or(SelectionError::MissingDataset(condition))?;
            select_critical(d, source.policy, n)
        }
        Condition::CounterfactualStates => {
            let base = rng.next_u64();
            let items = (0..n as u64)
                .into_par_iter()
                .map(|i| {
                    let mut r = rng::stream(base, i);
                    let mut t = generate_counterfactual(source.policy, source.policy_id, source.oracle, source.env, &mut r)?;
                    t.meta.seed = base;
                    t.meta.stream = i;
                    let display_start = if show_full { 0 } else { t.final_behavior_start() };
                    Ok(ExplanationItem { trajectory: t, display_start, annotation: None, annotation_entropy: None })
                })
                .collect::<Result<Vec<_>, SelectionError>>()?;
            Ok(ExplanationSet { version: EXPLANATION_VERSION, condition, show_full, items })
        }
    }
}
