use rand::Rng;

use crate::gridworld::{reachable_states, shortest_action_path, Action, AgentState, GridSpec};

use super::PolicyError;

/// Hard-coded exploration policy: pick a target uniformly from the support
/// and walk the shortest path to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationOracle {
    support: Vec<AgentState>,
    cap: usize,
}

impl ExplorationOracle {
    /// Support = every reachable state; cap = 4 * (width + height).
    pub fn new(spec: &GridSpec) -> Self {
        let support = reachable_states(spec, &spec.all_states()).into_iter().collect();
        ExplorationOracle { support, cap: 4 * (spec.width() + spec.height()) }
    }

    pub fn with_support(spec: &GridSpec, support: Vec<AgentState>) -> Result<Self, PolicyError> {
        let reachable = reachable_states(spec, &spec.all_states());
        if support.is_empty() {
            return Err(PolicyError::File("empty oracle support".into()));
        }
        if let Some(s) = support.iter().find(|s| !reachable.contains(s)) {
            return Err(PolicyError::UnknownState(*s));
        }
        Ok(ExplorationOracle { support, cap: 4 * (spec.width() + spec.height()) })
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn support(&self) -> &[AgentState] {
        &self.support
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Samples a target and returns it with the action path from `pause`.
    pub fn explore<R: Rng + ?Sized>(
        &self,
        spec: &GridSpec,
        pause: AgentState,
        rng: &mut R,
    ) -> Result<(AgentState, Vec<Action>), PolicyError> {
        if !spec.is_valid_state(&pause) {
            return Err(PolicyError::UnknownState(pause));
        }
        let target = self.support[rng.random_range(0..self.support.len())];
        let path = shortest_action_path(spec, pause, target)?;
        if path.len() > self.cap {
            return Err(PolicyError::CapExceeded { len: path.len(), cap: self.cap });
        }
        Ok((target, path))
    }
}
