use crate::gridworld::{shortest_path_where, Action, AgentState, EnvConfig, GridSpec};

use super::{ActionProbs, Policy, PolicyError, StateIndexer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptedKind {
    /// Shortest path to the goal from wherever it stands.
    OptimalNavigator,
    /// Runs straight until blocked, then turns right. Never steps onto the
    /// goal, so it fails from every start.
    DistinctFailure,
}

/// Hand-written distractor policy for the behavior-understanding task.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    kind: ScriptedKind,
    spec: GridSpec,
    indexer: StateIndexer,
    // Navigator: first action of the shortest path, per state.
    plan: Vec<Action>,
}

impl ScriptedPolicy {
    pub fn navigator(spec: &GridSpec) -> Self {
        let indexer = StateIndexer::new(spec);
        let goal = spec.goal();
        let mut plan = vec![Action::TurnLeft; indexer.len()];
        for s in spec.all_states() {
            let i = indexer.index(&s).expect("open state");
            plan[i] = match shortest_path_where(spec, s, |t| t.cell() == goal) {
                Some((_, path)) if !path.is_empty() => path[0],
                // at the goal already (or cut off): no-op convention
                _ => Action::TurnLeft,
            };
        }
        ScriptedPolicy { kind: ScriptedKind::OptimalNavigator, spec: spec.clone(), indexer, plan }
    }

    pub fn failure(spec: &GridSpec) -> Self {
        ScriptedPolicy { kind: ScriptedKind::DistinctFailure, spec: spec.clone(), indexer: StateIndexer::new(spec), plan: Vec::new() }
    }

    pub fn kind(&self) -> ScriptedKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ScriptedKind::OptimalNavigator => "scripted-navigator",
            ScriptedKind::DistinctFailure => "scripted-failure",
        }
    }

    pub fn act(&self, state: &AgentState) -> Result<Action, PolicyError> {
        let i = self.indexer.index(state).ok_or(PolicyError::UnknownState(*state))?;
        Ok(match self.kind {
            ScriptedKind::OptimalNavigator => self.plan[i],
            ScriptedKind::DistinctFailure => match self.spec.ahead(state) {
                Some(c) if !self.spec.is_wall(c) && c != self.spec.goal() => Action::Forward,
                _ => Action::TurnRight,
            },
        })
    }

    /// Build-time behavioral checks: the navigator reaches the goal from
    /// every open state within the horizon, the failure policy never does.
    pub fn verify(&self, env: &EnvConfig) -> Result<(), PolicyError> {
        for start in env.spec.all_states() {
            let mut s = start;
            let mut reached = s.cell() == env.spec.goal();
            for _ in 0..env.horizon {
                if reached {
                    break;
                }
                let (n, at_goal) = env.spec.step(&s, self.act(&s)?);
                s = n;
                reached = at_goal;
            }
            match (self.kind, reached) {
                (ScriptedKind::OptimalNavigator, false) => {
                    return Err(PolicyError::ScriptCheck(format!("navigator misses the goal from {start}")))
                }
                (ScriptedKind::DistinctFailure, true) if start.cell() != env.spec.goal() => {
                    return Err(PolicyError::ScriptCheck(format!("failure policy reaches the goal from {start}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl Policy for ScriptedPolicy {
    fn action_distribution(&self, state: &AgentState) -> Result<ActionProbs, PolicyError> {
        let mut p = [0.0; 3];
        p[self.act(state)?.index()] = 1.0;
        Ok(p)
    }
}
