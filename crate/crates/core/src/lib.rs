//! Counterfactual-trajectory explanations for a tabular gridworld policy.
//!
//! The crate covers the whole loop: a deterministic four-rooms world,
//! training a softmax actor-critic policy, selecting explanation
//! trajectories (random, critical-state or counterfactual), measuring how
//! well an explanation set covers the test-time start distribution, a
//! behavior-cloning surrogate user, and the two study tasks.
//!
//! ```
//! use cftraj::gridworld::{default_four_rooms, AgentState, Dir, EnvConfig, TOP_LEFT};
//! use cftraj::policy::ScriptedPolicy;
//! use cftraj::rng::seeded;
//! use cftraj::trajectory::{rollout, Outcome};
//!
//! let env = EnvConfig::new(default_four_rooms(), TOP_LEFT).unwrap();
//! let nav = ScriptedPolicy::navigator(&env.spec);
//! let t = rollout(&nav, "navigator", &env, AgentState::new(5, 5, Dir::S), &mut seeded(0)).unwrap();
//! assert_eq!(t.outcome, Outcome::Success);
//! ```

pub mod divergence;
pub mod gridworld;
pub mod pipeline;
pub mod policy;
pub mod render;
pub mod rng;
pub mod selection;
pub mod study;
pub mod surrogate;
pub mod training;
pub mod trajectory;

pub use divergence::DivergenceError;
pub use gridworld::GridError;
pub use pipeline::PipelineError;
pub use policy::PolicyError;
pub use render::RenderError;
pub use selection::SelectionError;
pub use study::StudyError;
pub use surrogate::SurrogateError;
pub use training::TrainingError;
pub use trajectory::TrajectoryError;

/// Any error the library can produce.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gridworld.md")]
    mod gridworld {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
    #[doc = include_str!("../../../book/src/divergence.md")]
    mod divergence {}
    #[doc = include_str!("../../../book/src/surrogate.md")]
    mod surrogate {}
    #[doc = include_str!("../../../book/src/study.md")]
    mod study {}
}
