//! Tabular one-step advantage actor-critic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, AgentState, EnvConfig};
use crate::policy::{Policy, PolicyError, StateIndexer, TabularPolicy};
use crate::rng;
use crate::trajectory::run_policy;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training diverged at episode {episode}: non-finite parameters")]
    Diverged { episode: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    pub seed: u64,
    pub success_threshold: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 20_000,
            gamma: 0.95,
            actor_lr: 0.1,
            critic_lr: 0.1,
            entropy_coef: 0.01,
            seed: 0,
            success_threshold: 0.9,
            eval_every: 500,
            eval_episodes: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("step sizes must be positive");
        }
        if self.entropy_coef.is_nan() || self.entropy_coef < 0.0 {
            return bad("entropy bonus must be non-negative");
        }
        if !(self.success_threshold > 0.0 && self.success_threshold <= 1.0) {
            return bad("success threshold must lie in (0, 1]");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("evaluation interval and size must be positive");
        }
        Ok(())
    }
}

/// State-value table for the critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(indexer: &StateIndexer) -> Self {
        ValueTable { values: vec![0.0; indexer.len()] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config: TrainConfig,
    pub env_id: String,
    pub records: Vec<LogRecord>,
    pub episodes_run: usize,
    pub final_success_rate: Option<f64>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("log record serializes") + "\n").collect()
    }
}

/// Single transition fed to [`a2c_update`].
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub state: AgentState,
    pub action: Action,
    pub reward: f64,
    pub next: AgentState,
    pub done: bool,
}

/// One actor-critic update. Returns the advantage used.
///
/// `A = r + gamma * V(s') * (1 - done) - V(s)`; the critic moves by
/// `critic_lr * A` and the logits by
/// `actor_lr * (A * grad log pi(a|s) + entropy_coef * grad H(pi(.|s)))`.
pub fn a2c_update(
    policy: &mut TabularPolicy,
    values: &mut ValueTable,
    cfg: &TrainConfig,
    t: &Transition,
    update_actor: bool,
) -> Result<f64, PolicyError> {
    let si = policy.index(&t.state)?;
    let ni = policy.index(&t.next)?;
    let bootstrap = if t.done { 0.0 } else { cfg.gamma * values.values[ni] };
    let adv = t.reward + bootstrap - values.values[si];
    values.values[si] += cfg.critic_lr * adv;
    if update_actor {
        let p = policy.probs_at_index(si);
        let h: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        let z = policy.logits_at_mut(&t.state)?;
        for j in 0..Action::COUNT {
            let onehot = if j == t.action.index() { 1.0 } else { 0.0 };
            let grad_logp = onehot - p[j];
            let grad_h = -p[j] * (p[j].ln() + h);
            z[j] += cfg.actor_lr * (adv * grad_logp + cfg.entropy_coef * grad_h);
        }
    }
    Ok(adv)
}

/// Fraction of `n` rollouts from the env start distribution that reach the
/// goal within the horizon.
pub fn evaluate_success_rate(policy: &dyn Policy, env: &EnvConfig, n: usize, rng: &mut dyn rand::RngCore) -> Result<f64, PolicyError> {
    let mut wins = 0;
    for _ in 0..n {
        let start = env.start.sample(rng);
        let (_, last) = run_policy(policy, env, start, env.horizon, rng)?;
        if last.cell() == env.spec.goal() {
            wins += 1;
        }
    }
    Ok(wins as f64 / n.max(1) as f64)
}

pub struct TrainOutput {
    pub policy: TabularPolicy,
    pub values: ValueTable,
    pub log: TrainingLog,
}

/// Trains a softmax policy from all-zero logits with online one-step A2C.
/// Stops early once a checkpoint evaluation reaches the success threshold.
pub fn train_a2c(env: &EnvConfig, cfg: &TrainConfig) -> Result<TrainOutput, TrainingError> {
    cfg.validate()?;
    let mut policy = TabularPolicy::uniform(&env.spec);
    let mut values = ValueTable::zeros(policy.indexer());
    let mut rng = rng::stream(cfg.seed, 0);
    let mut records = Vec::new();
    let mut final_rate = None;
    let mut run = 0;
    for episode in 0..cfg.episodes {
        let mut s = env.start.sample(&mut rng);
        let mut ret = 0.0;
        let mut discount = 1.0;
        if s.cell() != env.spec.goal() {
            for _ in 0..env.horizon {
                let a = policy.sample_action(&s, &mut rng)?;
                let (next, reward, done) = env.step(&s, a);
                let tr = Transition { state: s, action: a, reward, next, done };
                a2c_update(&mut policy, &mut values, cfg, &tr, true)?;
                ret += discount * reward;
                discount *= cfg.gamma;
                s = next;
                if done {
                    break;
                }
            }
        }
        run = episode + 1;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&values.values) || !policy.logits().iter().all(|z| finite(z)) {
            return Err(TrainingError::Diverged { episode });
        }
        let mut rec = LogRecord { episode, ret, success_rate: None };
        if run % cfg.eval_every == 0 {
            let mut eval_rng = rng::stream(cfg.seed, 1 + (run / cfg.eval_every) as u64);
            let rate = evaluate_success_rate(&policy, env, cfg.eval_episodes, &mut eval_rng)?;
            rec.success_rate = Some(rate);
            final_rate = Some(rate);
            records.push(rec);
            if rate >= cfg.success_threshold {
                break;
            }
        } else {
            records.push(rec);
        }
    }
    let log = TrainingLog { config: cfg.clone(), env_id: env.id.clone(), records, episodes_run: run, final_success_rate: final_rate };
    Ok(TrainOutput { policy, values, log })
}
