//! KL divergence between test-time and explanation visitation, its
//! start-state reduction, and estimators.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::gridworld::{AgentState, GridSpec, StartDistribution};
use crate::policy::Policy;
use crate::trajectory::{trajectory_log_prob, Trajectory, TrajectoryError};

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("support is empty")]
    EmptySupport,
    #[error("supports differ")]
    SupportMismatch,
    #[error("sample contains a state outside the support and smoothing is zero")]
    OutsideSupport,
    #[error("smoothing must be finite and non-negative, got {0}")]
    BadEpsilon(f64),
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("no usable samples")]
    NoSamples,
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// A distribution over an ordered support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical<L = AgentState> {
    support: Vec<L>,
    probs: Vec<f64>,
}

impl<L: Clone + PartialEq> Categorical<L> {
    pub fn new(support: Vec<L>, probs: Vec<f64>) -> Result<Self, DivergenceError> {
        if support.is_empty() {
            return Err(DivergenceError::EmptySupport);
        }
        if support.len() != probs.len() {
            return Err(DivergenceError::Invalid("support and probabilities differ in length".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DivergenceError::Invalid("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DivergenceError::Invalid(format!("probabilities sum to {total}")));
        }
        Ok(Categorical { support, probs })
    }

    pub fn uniform(support: Vec<L>) -> Result<Self, DivergenceError> {
        let n = support.len();
        if n == 0 {
            return Err(DivergenceError::EmptySupport);
        }
        Ok(Categorical { support, probs: vec![1.0 / n as f64; n] })
    }

    pub fn support(&self) -> &[L] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl From<&StartDistribution> for Categorical<AgentState> {
    fn from(d: &StartDistribution) -> Self {
        Categorical { support: d.support().to_vec(), probs: d.probs().to_vec() }
    }
}

/// Smoothed empirical distribution: `(count + eps) / (N + eps * |support|)`.
pub fn empirical_distribution<L: Clone + Eq + Hash>(samples: &[L], support: &[L], epsilon: f64) -> Result<Categorical<L>, DivergenceError> {
    if support.is_empty() {
        return Err(DivergenceError::EmptySupport);
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(DivergenceError::BadEpsilon(epsilon));
    }
    let pos: HashMap<&L, usize> = support.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let mut counts = vec![0usize; support.len()];
    let mut used = 0usize;
    for s in samples {
        match pos.get(s) {
            Some(&i) => {
                counts[i] += 1;
                used += 1;
            }
            None if epsilon == 0.0 => return Err(DivergenceError::OutsideSupport),
            None => {}
        }
    }
    let denom = used as f64 + epsilon * support.len() as f64;
    if denom == 0.0 {
        return Err(DivergenceError::NoSamples);
    }
    let probs = counts.iter().map(|c| (*c as f64 + epsilon) / denom).collect();
    Ok(Categorical { support: support.to_vec(), probs })
}

/// `sum p ln(p/q)` in nats. Returns `f64::INFINITY` when `p` puts mass where
/// `q` has none.
pub fn kl<L: PartialEq>(p: &Categorical<L>, q: &Categorical<L>) -> Result<f64, DivergenceError> {
    if p.support != q.support {
        return Err(DivergenceError::SupportMismatch);
    }
    let mut total = 0.0;
    for (pi, qi) in p.probs.iter().zip(&q.probs) {
        if *pi == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    // rounding can leave tiny negatives for identical inputs
    Ok(total.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    ExactCategorical,
    SmoothedEmpirical,
    MonteCarloTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLReport {
    /// Nats; `null` on the wire for an infinite divergence.
    #[serde(serialize_with = "ser_nats", deserialize_with = "de_nats")]
    pub value: f64,
    pub estimator: Estimator,
    pub sample_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub standard_error: Option<f64>,
    /// Samples dropped because their log-ratio was not finite.
    #[serde(default)]
    pub excluded: usize,
}

fn ser_nats<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_nats<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// Exact KL between two known categoricals.
pub fn exact_kl<L: PartialEq>(p: &Categorical<L>, q: &Categorical<L>) -> Result<KLReport, DivergenceError> {
    Ok(KLReport {
        value: kl(p, q)?,
        estimator: Estimator::ExactCategorical,
        sample_sizes: vec![],
        epsilon: None,
        standard_error: None,
        excluded: 0,
    })
}

/// `KL(test || expl)` between smoothed empirical start-state distributions.
pub fn start_state_kl(
    test_starts: &[AgentState],
    expl_starts: &[AgentState],
    support: &[AgentState],
    epsilon: f64,
) -> Result<KLReport, DivergenceError> {
    let p = empirical_distribution(test_starts, support, epsilon)?;
    let q = empirical_distribution(expl_starts, support, epsilon)?;
    Ok(KLReport {
        value: kl(&p, &q)?,
        estimator: Estimator::SmoothedEmpirical,
        sample_sizes: vec![test_starts.len(), expl_starts.len()],
        epsilon: Some(epsilon),
        standard_error: None,
        excluded: 0,
    })
}

/// How far a sample of states is from covering `support` evenly:
/// `KL(empirical || uniform)`, zero exactly when every state is hit equally
/// often.
pub fn coverage_kl(samples: &[AgentState], support: &[AgentState], epsilon: f64) -> Result<KLReport, DivergenceError> {
    let p = empirical_distribution(samples, support, epsilon)?;
    let q = Categorical::uniform(support.to_vec())?;
    Ok(KLReport {
        value: kl(&p, &q)?,
        estimator: Estimator::SmoothedEmpirical,
        sample_sizes: vec![samples.len()],
        epsilon: Some(epsilon),
        standard_error: None,
        excluded: 0,
    })
}

/// `log p(tau) - log q(tau)` for two start distributions sharing a policy and
/// dynamics. Policy and transition factors cancel, so this equals the start
/// log-ratio. Infinite when either start distribution misses `tau`'s first
/// state (`+inf` if only `q` does, `-inf` if only `p` does, NaN if both).
pub fn trajectory_log_ratio(
    traj: &Trajectory,
    start_p: &StartDistribution,
    start_q: &StartDistribution,
    policy: &dyn Policy,
    spec: &GridSpec,
) -> Result<f64, DivergenceError> {
    let lp = trajectory_log_prob(traj, policy, start_p, spec)?.value;
    let lq = trajectory_log_prob(traj, policy, start_q, spec)?.value;
    Ok(lp - lq)
}

/// Monte-Carlo `KL(p_test || p_expl)` over trajectories sampled from the test
/// distribution: the mean log-ratio with its standard error.
pub fn mc_trajectory_kl(
    test_trajs: &[Trajectory],
    start_test: &StartDistribution,
    start_expl: &StartDistribution,
    policy: &dyn Policy,
    spec: &GridSpec,
) -> Result<KLReport, DivergenceError> {
    let mut vals = Vec::with_capacity(test_trajs.len());
    let mut excluded = 0;
    for t in test_trajs {
        let r = trajectory_log_ratio(t, start_test, start_expl, policy, spec)?;
        if r.is_finite() {
            vals.push(r);
        } else {
            excluded += 1;
        }
    }
    if vals.is_empty() {
        return Err(DivergenceError::NoSamples);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let se = if vals.len() > 1 {
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(KLReport {
        value: mean,
        estimator: Estimator::MonteCarloTrajectory,
        sample_sizes: vec![test_trajs.len()],
        epsilon: None,
        standard_error: Some(se),
        excluded,
    })
}
