//! Desk-scale closed-loop simulator.

pub mod closed_loop;
pub mod performance;
pub mod planner;
pub mod predictor;
pub mod scenario;

/// History frames per agent, ending at the current frame.
pub const HISTORY_STEPS: usize = 15;
/// Replanning steps per episode.
pub const EPISODE_STEPS: usize = 30;
/// Lane spacing in metres.
pub const LANE_WIDTH: f64 = 3.5;

pub use closed_loop::{run_closed_loop, run_episode, EpisodeResult, Failure, LoopConfig, LoopOutput};
pub use performance::driving_performance;
pub use planner::{frenet_plan, FrenetCandidate, FrenetState, PlannerConfig, Reference};
pub use predictor::{predict, PredictContext, PredictorKind};
pub use scenario::{generate_scenario, generate_scenario_with, GeneratorConfig, FUTURE_STEPS};
