//! A behavior-cloning stand-in for a study participant: it fits a tabular
//! policy to what the explanations show, then is scored on the behavioral
//! policy's test-time behavior.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{reachable_states, AgentState, EnvConfig, GridSpec};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError};
use crate::policy::{argmax_set, Policy, PolicyError, TabularPolicy};
use crate::rng;
use crate::selection::{build_explanation_set, Condition, ExplanationSet, ExplanationSource, SelectionError};
use crate::study::{label_from_frequency, success_frequency, ttest_onesided, Verdict, LABEL_ROLLOUTS};
use crate::trajectory::{collect, run_policy, TrajectoryError};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("need at least two seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("explanation set is empty")]
    NoExplanations,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClonerConfig {
    /// Laplace prior added to every action count.
    pub alpha: f64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
}

impl Default for ClonerConfig {
    fn default() -> Self {
        ClonerConfig { alpha: 1.0, eval_episodes: 50, eval_seed: 0 }
    }
}

impl ClonerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err("cloner smoothing must be positive".into());
        }
        if self.eval_episodes == 0 {
            return Err("cloner evaluation needs at least one episode".into());
        }
        Ok(())
    }
}

/// Per-state action counts over the behavior steps the viewer can see.
pub fn visible_counts(explanations: &ExplanationSet) -> BTreeMap<AgentState, [usize; 3]> {
    let mut counts: BTreeMap<AgentState, [usize; 3]> = BTreeMap::new();
    for item in &explanations.items {
        for step in item.visible_behavior_steps() {
            counts.entry(step.state).or_default()[step.action.index()] += 1;
        }
    }
    counts
}

/// Closed-form smoothed behavior cloning:
/// `pi'(a|s) = (n(s,a) + alpha) / (n(s) + 3 alpha)`, stored as log-probs.
pub fn clone_policy(explanations: &ExplanationSet, spec: &GridSpec, alpha: f64) -> Result<TabularPolicy, SurrogateError> {
    if explanations.items.is_empty() {
        return Err(SurrogateError::NoExplanations);
    }
    let mut policy = TabularPolicy::uniform(spec);
    for (s, c) in visible_counts(explanations) {
        let n: usize = c.iter().sum();
        let z = policy.logits_at_mut(&s)?;
        for a in 0..3 {
            z[a] = ((c[a] as f64 + alpha) / (n as f64 + 3.0 * alpha)).ln();
        }
    }
    Ok(policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClonerScore {
    pub agreement: f64,
    pub nll: f64,
    pub steps: usize,
}

/// Expected argmax match under uniform tie-breaking on the cloner side:
/// `|A' n A| / |A'|`, with `A'` the cloner's argmax set and `A` the
/// behavioral policy's.
pub fn argmax_agreement(cloner: &[f64; 3], target: &[f64; 3]) -> f64 {
    let a = argmax_set(cloner);
    let b = argmax_set(target);
    a.iter().filter(|i| b.contains(i)).count() as f64 / a.len() as f64
}

/// Rolls out `behavior` in `env` for `n` episodes and scores the cloner on
/// every visited step: argmax agreement and the negative log-likelihood of
/// the action actually taken.
pub fn evaluate_cloner(
    cloner: &TabularPolicy,
    behavior: &TabularPolicy,
    env: &EnvConfig,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<ClonerScore, SurrogateError> {
    let (mut agree, mut nll, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..n {
        let s0 = env.start.sample(rng);
        let (traj, _) = run_policy(behavior, env, s0, env.horizon, rng)?;
        for step in traj {
            let p = cloner.action_distribution(&step.state)?;
            agree += argmax_agreement(&p, &behavior.action_distribution(&step.state)?);
            nll -= p[step.action.index()].ln();
            steps += 1;
        }
    }
    let d = steps.max(1) as f64;
    Ok(ClonerScore { agreement: agree / d, nll: nll / d, steps })
}

/// Strict majority outcome of `n` rollouts of `policy` from `context`.
pub fn predict_success(
    policy: &dyn Policy,
    env: &EnvConfig,
    context: AgentState,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Verdict, SurrogateError> {
    Ok(label_from_frequency(success_frequency(policy, env, context, n, rng)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub agreement: f64,
    pub nll: f64,
    pub prediction_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub mean_agreement: f64,
    pub mean_nll: f64,
    pub mean_prediction_accuracy: f64,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTest {
    pub metric: String,
    pub baseline: Condition,
    /// One-sided p-value that the counterfactual condition is better.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub version: u32,
    pub policy_id: String,
    pub test_env_id: String,
    pub seeds: Vec<u64>,
    pub conditions: Vec<ConditionResult>,
    pub tests: Vec<SurrogateTest>,
}

impl SurrogateReport {
    pub fn condition(&self, c: Condition) -> Option<&ConditionResult> {
        self.conditions.iter().find(|r| r.condition == c)
    }

    pub fn p_value(&self, metric: &str, baseline: Condition) -> Option<f64> {
        self.tests.iter().find(|t| t.metric == metric && t.baseline == baseline).map(|t| t.p_value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Task-2 style contexts: reachable non-goal states drawn uniformly, each
/// labeled by the behavioral policy's majority outcome.
fn prediction_contexts(p: &Pipeline, seed: u64) -> Result<Vec<(AgentState, Verdict)>, SurrogateError> {
    let spec = &p.test_env.spec;
    let pool: Vec<AgentState> = reachable_states(spec, &spec.all_states()).into_iter().filter(|s| s.cell() != spec.goal()).collect();
    let mut r = rng::stream(seed, 3);
    (0..p.config.prediction_contexts)
        .map(|_| {
            let s = pool[rand::Rng::random_range(&mut r, 0..pool.len())];
            let f = success_frequency(&p.policy, &p.test_env, s, LABEL_ROLLOUTS, &mut r)?;
            Ok((s, label_from_frequency(f)))
        })
        .collect()
}

/// Clones from one explanation set and scores it. Evaluation streams depend
/// only on the seed, so every condition is scored on the same test rollouts.
pub fn score_explanations(
    p: &Pipeline,
    set: &ExplanationSet,
    contexts: &[(AgentState, Verdict)],
    seed: u64,
) -> Result<SeedResult, SurrogateError> {
    let cloner = clone_policy(set, &p.train_env.spec, p.config.cloner.alpha)?;
    let mut eval_rng = rng::stream(seed ^ p.config.cloner.eval_seed, 2);
    let sc = evaluate_cloner(&cloner, &p.policy, &p.test_env, p.config.cloner.eval_episodes, &mut eval_rng)?;
    let mut pred_rng = rng::stream(seed, 4);
    let mut right = 0;
    for (s, truth) in contexts {
        if predict_success(&cloner, &p.test_env, *s, p.config.prediction_rollouts, &mut pred_rng)? == *truth {
            right += 1;
        }
    }
    Ok(SeedResult { seed, agreement: sc.agreement, nll: sc.nll, prediction_accuracy: right as f64 / contexts.len().max(1) as f64 })
}

/// Builds one explanation set per condition for `seed`. Conditions share the
/// dataset and the selection stream.
pub fn explanation_sets(p: &Pipeline, seed: u64) -> Result<Vec<(Condition, ExplanationSet)>, SurrogateError> {
    let dataset = collect(&p.policy, &p.policy_id, &p.train_env, p.config.dataset_episodes, &mut rng::stream(seed, 0))?;
    let src =
        ExplanationSource { policy: &p.policy, policy_id: &p.policy_id, dataset: Some(&dataset), oracle: &p.oracle, env: &p.train_env };
    p.config
        .conditions
        .iter()
        .map(|c| {
            let set = build_explanation_set(*c, &src, p.config.explanations, p.config.show_full, &mut rng::stream(seed, 1))?;
            Ok((*c, set))
        })
        .collect()
}

/// Scores explanation sets supplied by the caller: `sets[i]` holds the
/// per-condition sets for `seeds[i]`.
pub fn compare_explanation_sets(
    p: &Pipeline,
    seeds: &[u64],
    sets: &[Vec<(Condition, ExplanationSet)>],
) -> Result<SurrogateReport, SurrogateError> {
    if seeds.len() < 2 {
        return Err(SurrogateError::TooFewSeeds(seeds.len()));
    }
    let per_seed: Vec<Vec<(Condition, SeedResult)>> = seeds
        .par_iter()
        .zip(sets.par_iter())
        .map(|(seed, conds)| {
            let contexts = prediction_contexts(p, *seed)?;
            conds.iter().map(|(c, set)| Ok((*c, score_explanations(p, set, &contexts, *seed)?))).collect::<Result<Vec<_>, SurrogateError>>()
        })
        .collect::<Result<_, _>>()?;

    let mut by_cond: BTreeMap<Condition, Vec<SeedResult>> = BTreeMap::new();
    for row in per_seed {
        for (c, r) in row {
            by_cond.entry(c).or_default().push(r);
        }
    }
    let mean = |v: &[SeedResult], f: fn(&SeedResult) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let conditions: Vec<ConditionResult> = by_cond
        .iter()
        .map(|(c, v)| ConditionResult {
            condition: *c,
            mean_agreement: mean(v, |r| r.agreement),
            mean_nll: mean(v, |r| r.nll),
            mean_prediction_accuracy: mean(v, |r| r.prediction_accuracy),
            per_seed: v.clone(),
        })
        .collect();

    let mut tests = Vec::new();
    if let Some(cf) = by_cond.get(&Condition::CounterfactualStates) {
        for (c, base) in &by_cond {
            if *c == Condition::CounterfactualStates {
                continue;
            }
            let col = |v: &[SeedResult], f: fn(&SeedResult) -> f64| v.iter().map(f).collect::<Vec<_>>();
            let metrics: [Metric; 3] = [
                ("agreement", |r| r.agreement),
                // lower is better
                ("nll", |r| -r.nll),
                ("prediction_accuracy", |r| r.prediction_accuracy),
            ];
            for (name, f) in metrics {
                let p_value = ttest_onesided(&col(cf, f), &col(base, f)).map_err(|_| SurrogateError::TooFewSeeds(seeds.len()))?;
                tests.push(SurrogateTest { metric: name.into(), baseline: *c, p_value });
            }
        }
    }
    Ok(SurrogateReport {
        version: REPORT_VERSION,
        policy_id: p.policy_id.clone(),
        test_env_id: p.test_env.id.clone(),
        seeds: seeds.to_vec(),
        conditions,
        tests,
    })
}

/// Runs every condition on every seed of an already built pipeline.
type Metric = (&'static str, fn(&SeedResult) -> f64);

pub fn compare_on(p: &Pipeline, seeds: &[u64]) -> Result<SurrogateReport, SurrogateError> {
    if seeds.len() < 2 {
        return Err(SurrogateError::TooFewSeeds(seeds.len()));
    }
    let sets = seeds.par_iter().map(|s| explanation_sets(p, *s)).collect::<Result<Vec<_>, _>>()?;
    compare_explanation_sets(p, seeds, &sets)
}

/// Trains the behavioral policy once for `config`, then compares conditions
/// across `seeds`.
pub fn compare_conditions(config: &PipelineConfig, seeds: &[u64]) -> Result<SurrogateReport, SurrogateError> {
    if seeds.len() < 2 {
        return Err(SurrogateError::TooFewSeeds(seeds.len()));
    }
    compare_on(&Pipeline::build(config)?, seeds)
}
