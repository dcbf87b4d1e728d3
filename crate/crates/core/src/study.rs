//! The two evaluation tasks: picking the behavioral policy's continuation
//! (behavior understanding) and predicting success from a state
//! (performance evaluation). Building, participant payloads, scoring and the
//! significance test.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::gridworld::{AgentState, EnvConfig, StartDistribution};
use crate::policy::{ExplorationOracle, Policy, PolicyError, ScriptedPolicy, TabularPolicy};
use crate::rng;
use crate::selection::{build_explanation_set, Condition, ExplanationSet, ExplanationSource, SelectionError};
use crate::trajectory::{collect, rollout_for, run_policy, Outcome, Trajectory, TrajectoryError};

pub const SESSION_VERSION: u32 = 1;
pub const RESPONSE_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_QUESTIONS: usize = 10;
pub const CONTEXT_PREFIX_LEN: usize = 3;
pub const LABEL_ROLLOUTS: usize = 100;
pub const AMBIGUITY_BAND: (f64, f64) = (0.4, 0.6);
const MAX_RESAMPLES: usize = 50;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("continuations kept colliding after {0} resamples")]
    ContinuationCollision(usize),
    #[error("no unambiguous context found in room `{room}`")]
    StratificationFailure { room: String },
    #[error("response log is for session `{found}`, expected `{expected}`")]
    SessionMismatch { expected: String, found: String },
    #[error("question {question} out of range (session has {count})")]
    QuestionOutOfRange { question: usize, count: usize },
    #[error("choice {choice} out of range for question {question} ({count} choices)")]
    ChoiceOutOfRange { question: usize, choice: usize, count: usize },
    #[error("t-test needs at least two observations per sample")]
    TooFewSamples,
    #[error("invalid study config: {0}")]
    Config(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    BehaviorUnderstanding,
    PerformanceEvaluation,
}

impl Task {
    pub fn number(self) -> u8 {
        match self {
            Task::BehaviorUnderstanding => 1,
            Task::PerformanceEvaluation => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Task> {
        match n {
            1 => Some(Task::BehaviorUnderstanding),
            2 => Some(Task::PerformanceEvaluation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Success,
    Failure,
}

impl From<Outcome> for Verdict {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Success => Verdict::Success,
            Outcome::Timeout => Verdict::Failure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Question {
    BehaviorUnderstanding {
        context: Trajectory,
        choices: Vec<Trajectory>,
    },
    PerformanceEvaluation {
        context: AgentState,
        room: String,
        choices: Vec<Verdict>,
        /// Fraction of labeling rollouts that succeeded.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        success_rate: Option<f64>,
    },
}

impl Question {
    pub fn choice_count(&self) -> usize {
        match self {
            Question::BehaviorUnderstanding { choices, .. } => choices.len(),
            Question::PerformanceEvaluation { choices, .. } => choices.len(),
        }
    }

    fn anonymized(&self) -> Question {
        match self {
            Question::BehaviorUnderstanding { context, choices } => Question::BehaviorUnderstanding {
                context: context.anonymized(),
                choices: choices.iter().map(Trajectory::anonymized).collect(),
            },
            Question::PerformanceEvaluation { context, room, choices, .. } => {
                Question::PerformanceEvaluation { context: *context, room: room.clone(), choices: choices.clone(), success_rate: None }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub policy_id: String,
    /// Which behavioral policy the session shows, e.g. "top-left".
    pub policy_label: String,
    pub train_env_id: String,
    pub test_env_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_prefix_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_rollouts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguity_band: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySession {
    pub version: u32,
    pub session_id: String,
    pub task: Task,
    pub condition: Condition,
    pub build_seed: u64,
    pub meta: SessionMeta,
    pub explanation: ExplanationSet,
    pub questions: Vec<Question>,
    pub answer_key: Vec<usize>,
}

/// What a participant receives: no answer key, no policy ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantPayload {
    pub version: u32,
    pub session_id: String,
    pub task: Task,
    pub condition: Condition,
    pub explanation: ExplanationSet,
    pub questions: Vec<Question>,
}

impl StudySession {
    pub fn participant_payload(&self) -> ParticipantPayload {
        let mut explanation = self.explanation.clone();
        for it in &mut explanation.items {
            it.trajectory = it.trajectory.anonymized();
        }
        ParticipantPayload {
            version: SESSION_VERSION,
            session_id: self.session_id.clone(),
            task: self.task,
            condition: self.condition,
            explanation,
            questions: self.questions.iter().map(Question::anonymized).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session serializes")
    }

    fn content_id(&mut self) {
        self.session_id.clear();
        let digest = Sha256::digest(serde_json::to_vec(self).expect("session serializes"));
        self.session_id = format!("s-{}", hex(&digest[..8]));
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Inputs shared by both task builders.
pub struct StudyContext<'a> {
    pub policy: &'a TabularPolicy,
    pub policy_id: &'a str,
    pub policy_label: &'a str,
    pub train_env: &'a EnvConfig,
    pub test_env: &'a EnvConfig,
    pub oracle: &'a ExplorationOracle,
    /// Rollouts collected for the random and critical selectors.
    pub dataset_episodes: usize,
    pub explanations: usize,
    pub questions: usize,
}

impl StudyContext<'_> {
    fn explanation(&self, condition: Condition, seed: u64) -> Result<ExplanationSet, StudyError> {
        let dataset = match condition {
            Condition::CounterfactualStates => None,
            _ => Some(collect(self.policy, self.policy_id, self.train_env, self.dataset_episodes, &mut rng::stream(seed, 0))?),
        };
        let src = ExplanationSource {
            policy: self.policy,
            policy_id: self.policy_id,
            dataset: dataset.as_ref(),
            oracle: self.oracle,
            env: self.train_env,
        };
        Ok(build_explanation_set(condition, &src, self.explanations, false, &mut rng::stream(seed, 1))?)
    }

    fn meta(&self) -> SessionMeta {
        SessionMeta {
            policy_id: self.policy_id.into(),
            policy_label: self.policy_label.into(),
            train_env_id: self.train_env.id.clone(),
            test_env_id: self.test_env.id.clone(),
            context_prefix_len: None,
            label_rollouts: None,
            ambiguity_band: None,
        }
    }
}

fn same_path(a: &Trajectory, b: &Trajectory) -> bool {
    a.steps == b.steps && a.final_state == b.final_state
}

/// Behavior-understanding session: each question shows a short context in
/// the test env, then the behavioral policy's continuation alongside the
/// navigator's and the failure policy's, in shuffled order.
pub fn build_task1_session(ctx: &StudyContext<'_>, condition: Condition, seed: u64) -> Result<StudySession, StudyError> {
    let explanation = ctx.explanation(condition, seed)?;
    let env = ctx.test_env;
    let nav = ScriptedPolicy::navigator(&env.spec);
    let fail = ScriptedPolicy::failure(&env.spec);
    let mut questions = Vec::with_capacity(ctx.questions);
    let mut answer_key = Vec::with_capacity(ctx.questions);
    for q in 0..ctx.questions {
        let mut attempt = 0;
        let (question, key) = loop {
            if attempt == MAX_RESAMPLES {
                return Err(StudyError::ContinuationCollision(attempt));
            }
            let mut rng = rng::stream(seed, 1000 + (q * MAX_RESAMPLES + attempt) as u64);
            attempt += 1;
            let s0 = env.start.sample(&mut rng);
            let context = rollout_for(ctx.policy, ctx.policy_id, env, s0, CONTEXT_PREFIX_LEN, &mut rng)?;
            if context.outcome == Outcome::Success {
                continue;
            }
            let from = context.final_state;
            let rest = env.horizon.saturating_sub(context.len());
            let theta = rollout_for(ctx.policy, ctx.policy_id, env, from, rest, &mut rng)?;
            let navigator = rollout_for(&nav, nav.name(), env, from, rest, &mut rng)?;
            let failure = rollout_for(&fail, fail.name(), env, from, rest, &mut rng)?;
            if same_path(&theta, &navigator) || same_path(&theta, &failure) || same_path(&navigator, &failure) {
                continue;
            }
            let mut choices = vec![(true, theta), (false, navigator), (false, failure)];
            choices.shuffle(&mut rng);
            let key = choices.iter().position(|c| c.0).expect("theta is among the choices");
            let choices = choices.into_iter().map(|c| c.1).collect();
            break (Question::BehaviorUnderstanding { context, choices }, key);
        };
        questions.push(question);
        answer_key.push(key);
    }
    let mut session = StudySession {
        version: SESSION_VERSION,
        session_id: String::new(),
        task: Task::BehaviorUnderstanding,
        condition,
        build_seed: seed,
        meta: SessionMeta { context_prefix_len: Some(CONTEXT_PREFIX_LEN), ..ctx.meta() },
        explanation,
        questions,
        answer_key,
    };
    session.content_id();
    Ok(session)
}

/// Success frequency of `policy` from `state` over `n` rollouts.
pub fn success_frequency(
    policy: &dyn Policy,
    env: &EnvConfig,
    state: AgentState,
    n: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<f64, PolicyError> {
    let mut wins = 0;
    for _ in 0..n {
        let (_, last) = run_policy(policy, env, state, env.horizon, rng)?;
        if last.cell() == env.spec.goal() {
            wins += 1;
        }
    }
    Ok(wins as f64 / n.max(1) as f64)
}

/// Majority-vote label; ties go to Failure.
pub fn label_from_frequency(freq: f64) -> Verdict {
    if freq > 0.5 {
        Verdict::Success
    } else {
        Verdict::Failure
    }
}

pub fn in_ambiguity_band(freq: f64) -> bool {
    freq >= AMBIGUITY_BAND.0 && freq <= AMBIGUITY_BAND.1
}

/// How many contexts each room gets: an even split with the remainder going
/// to the first rooms in order.
pub fn room_quota(rooms: usize, questions: usize) -> Vec<usize> {
    (0..rooms).map(|i| questions / rooms + usize::from(i < questions % rooms)).collect()
}

/// Performance-evaluation session: contexts stratified across the rooms of
/// the test layout, each labeled by the majority outcome of
/// [`LABEL_ROLLOUTS`] rollouts of the behavioral policy. Contexts whose
/// success frequency falls inside [`AMBIGUITY_BAND`] are redrawn.
pub fn build_task2_session(ctx: &StudyContext<'_>, condition: Condition, seed: u64) -> Result<StudySession, StudyError> {
    let explanation = ctx.explanation(condition, seed)?;
    let env = ctx.test_env;
    let rooms = env.spec.rooms();
    let quota = room_quota(rooms.len(), ctx.questions);
    let mut questions = Vec::with_capacity(ctx.questions);
    let mut answer_key = Vec::with_capacity(ctx.questions);
    for (ri, room) in rooms.iter().enumerate() {
        let starts =
            StartDistribution::room(&env.spec, &room.id).map_err(|_| StudyError::StratificationFailure { room: room.id.clone() })?;
        let mut pick = rng::stream(seed, 2000 + ri as u64);
        for _ in 0..quota[ri] {
            let mut found = None;
            for _ in 0..MAX_RESAMPLES {
                let s = starts.support()[pick.random_range(0..starts.support().len())];
                let freq = success_frequency(ctx.policy, env, s, LABEL_ROLLOUTS, &mut pick)?;
                if !in_ambiguity_band(freq) {
                    found = Some((s, freq));
                    break;
                }
            }
            let (s, freq) = found.ok_or_else(|| StudyError::StratificationFailure { room: room.id.clone() })?;
            let label = label_from_frequency(freq);
            let choices = vec![Verdict::Success, Verdict::Failure];
            answer_key.push(choices.iter().position(|v| *v == label).expect("both verdicts offered"));
            questions.push(Question::PerformanceEvaluation { context: s, room: room.id.clone(), choices, success_rate: Some(freq) });
        }
    }
    // interleave rooms so question order does not reveal the room
    let mut order: Vec<usize> = (0..questions.len()).collect();
    order.shuffle(&mut rng::stream(seed, 3000));
    let questions = order.iter().map(|i| questions[*i].clone()).collect();
    let answer_key = order.iter().map(|i| answer_key[*i]).collect();
    let mut session = StudySession {
        version: SESSION_VERSION,
        session_id: String::new(),
        task: Task::PerformanceEvaluation,
        condition,
        build_seed: seed,
        meta: SessionMeta { label_rollouts: Some(LABEL_ROLLOUTS), ambiguity_band: Some(AMBIGUITY_BAND), ..ctx.meta() },
        explanation,
        questions,
        answer_key,
    };
    session.content_id();
    Ok(session)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub question: usize,
    pub choice: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseLog {
    pub version: u32,
    pub session_id: String,
    pub participant_id: String,
    pub responses: Vec<Response>,
}

impl ResponseLog {
    pub fn new(session_id: impl Into<String>, participant_id: impl Into<String>) -> Self {
        ResponseLog { version: RESPONSE_VERSION, session_id: session_id.into(), participant_id: participant_id.into(), responses: vec![] }
    }

    /// Latest answer per question (last write wins).
    pub fn latest(&self) -> BTreeMap<usize, usize> {
        self.responses.iter().map(|r| (r.question, r.choice)).collect()
    }
}

/// Checks a response against the session's question and choice bounds.
pub fn check_response(session: &StudySession, r: &Response) -> Result<(), StudyError> {
    let q =
        session.questions.get(r.question).ok_or(StudyError::QuestionOutOfRange { question: r.question, count: session.questions.len() })?;
    if r.choice >= q.choice_count() {
        return Err(StudyError::ChoiceOutOfRange { question: r.question, choice: r.choice, count: q.choice_count() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session_id: String,
    pub participant_id: String,
    pub condition: Condition,
    pub task: Task,
    /// Accuracy over answered questions.
    pub accuracy: f64,
    pub answered: usize,
    pub total: usize,
    pub complete: bool,
}

pub fn score(session: &StudySession, responses: &ResponseLog) -> Result<SessionScore, StudyError> {
    if responses.session_id != session.session_id {
        return Err(StudyError::SessionMismatch { expected: session.session_id.clone(), found: responses.session_id.clone() });
    }
    for r in &responses.responses {
        check_response(session, r)?;
    }
    let latest = responses.latest();
    let correct = latest.iter().filter(|(q, c)| session.answer_key[**q] == **c).count();
    let answered = latest.len();
    Ok(SessionScore {
        session_id: session.session_id.clone(),
        participant_id: responses.participant_id.clone(),
        condition: session.condition,
        task: session.task,
        accuracy: if answered == 0 { 0.0 } else { correct as f64 / answered as f64 },
        answered,
        total: session.questions.len(),
        complete: answered == session.questions.len(),
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's one-sided test of `mean(a) > mean(b)`. Returns the p-value.
///
/// When both samples have zero variance the statistic is undefined: equal
/// means give 0.5, otherwise the limit (1, or the smallest positive float).
pub fn ttest_onesided(a: &[f64], b: &[f64]) -> Result<f64, StudyError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StudyError::TooFewSamples);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            0.5
        } else if ma > mb {
            f64::MIN_POSITIVE
        } else {
            1.0
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Ok(dist.sf(t).max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub mean_accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub greater: Condition,
    pub than: Condition,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub version: u32,
    pub sessions: Vec<SessionScore>,
    pub conditions: Vec<ConditionSummary>,
    pub comparisons: Vec<Comparison>,
}

/// One-sided tests for every ordered pair of conditions with at least two
/// observations each.
pub fn pairwise_tests(groups: &BTreeMap<Condition, Vec<f64>>) -> Vec<Comparison> {
    let mut out = Vec::new();
    for (ca, a) in groups {
        for (cb, b) in groups {
            if ca == cb {
                continue;
            }
            if let Ok(p) = ttest_onesided(a, b) {
                out.push(Comparison { greater: *ca, than: *cb, p_value: p });
            }
        }
    }
    out
}

/// Scores every (session, responses) pair and summarizes by condition.
pub fn aggregate_report(entries: &[(StudySession, ResponseLog)]) -> Result<ScoreReport, StudyError> {
    let sessions = entries.iter().map(|(s, r)| score(s, r)).collect::<Result<Vec<_>, _>>()?;
    let mut groups: BTreeMap<Condition, Vec<f64>> = BTreeMap::new();
    for s in &sessions {
        groups.entry(s.condition).or_default().push(s.accuracy);
    }
    let conditions = groups
        .iter()
        .map(|(c, v)| ConditionSummary { condition: *c, mean_accuracy: v.iter().sum::<f64>() / v.len() as f64, n: v.len() })
        .collect();
    Ok(ScoreReport { version: REPORT_VERSION, comparisons: pairwise_tests(&groups), sessions, conditions })
}

impl ScoreReport {
    /// Plain-text table: one row per condition, then the significance tests.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<16} {:>9} {:>5}", "Condition", "Accuracy", "n").unwrap();
        for c in &self.conditions {
            writeln!(out, "{:<16} {:>9.4} {:>5}", c.condition.as_str(), c.mean_accuracy, c.n).unwrap();
        }
        if !self.comparisons.is_empty() {
            writeln!(out).unwrap();
            for c in &self.comparisons {
                let mark = if c.p_value < 0.05 { " *" } else { "" };
                writeln!(out, "{} > {}: p = {:.4}{}", c.greater, c.than, c.p_value, mark).unwrap();
            }
        }
        out
    }
}
