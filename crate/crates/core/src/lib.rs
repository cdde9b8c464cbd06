//! Adaptive parallel Monte Carlo Tree Search for test-time compute scaling,
//! driven by a deterministic discrete-event serving simulator.
//!
//! The search core ([`search_tree`], [`scoring`], [`beam`]) is generic over the
//! [`Scalar`] type; the `*64` aliases below fix it to `f64`.

// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod beam;
pub mod experiment;
pub mod metrics;
pub mod scalar;
pub mod scheduler;
pub mod scoring;
pub mod search_tree;
pub mod simulator;

pub use backend::{
    make_workload, service_time, CostModel, Difficulty, Mixture, StepCandidate, StepGenerator, StepRef,
    SyntheticProblemSpec, WorkloadProfile,
};
pub use beam::{BeamConfig, BeamOutcome, BeamSearch, PartialTrajectory};
pub use experiment::{ExperimentConfig, Preset};
pub use metrics::{percentile, summarize, RequestExit, RequestRecord, SummaryStats};
pub use scalar::Scalar;
pub use scheduler::{Job, SchedulerConfig, SchedulerState};
pub use scoring::{AggregationScheme, ExitDecision, ExitKind, FutilityBound, ScoringConfig};
pub use search_tree::{NodeId, Rollout, SearchTree, SelectionParams, StepNode, Trajectory};
pub use simulator::{run, run_serial_mcts, RunOutput, SearchConfig, SimConfig, SystemKind};

pub type SearchTree64 = SearchTree<f64>;
pub type StepNode64 = StepNode<f64>;
pub type Trajectory64 = Trajectory<f64>;
pub type ScoringConfig64 = ScoringConfig<f64>;
pub type SelectionParams64 = SelectionParams<f64>;
pub type StepCandidate64 = StepCandidate<f64>;
pub type SimConfig64 = SimConfig<f64>;
