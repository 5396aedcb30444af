//! Joint neural-architecture and multi-FPGA pipeline co-exploration.
//!
//! The crate searches a chain-network architecture space and a hardware
//! design space together: candidate networks are mapped onto pipelines of
//! FPGA devices by an exact partition/assignment optimizer, scored by a
//! roofline latency model against a throughput target, and steered by a
//! two-level reinforcement-learning loop — a fast level that tunes
//! candidates for pipeline utilization alone, and a slow level that
//! trades accuracy against pipeline efficiency and accumulates the
//! non-dominated designs in a Pareto archive.
//!
//! Modules:
//! - [`model`]: networks, layers, search spaces, and FPGA device pools.
//! - [`perf`]: latency models and pipeline plan evaluation.
//! - [`partition`]: exact pipeline partition/assignment optimization.
//! - [`controller`]: the regroupable recurrent policy and REINFORCE.
//! - [`eval`]: accuracy surrogate, external evaluator, and cache.
//! - [`search`]: the two-level engine and the Pareto archive.

pub mod controller;
pub mod eval;
pub mod model;
pub mod partition;
pub mod perf;
pub mod search;

pub use controller::{
    BaselineState, ControllerError, ControllerState, GroupingMode, GroupingPlan, Snapshot,
    Trajectory, UpdateRule,
};
pub use eval::{
    surrogate_accuracy, surrogate_from_counts, AccuracyCache, AccuracyEvaluator, AccuracySource,
    EvalError, ExternalEvaluator, SurrogateParams, DEFAULT_EVAL_TIMEOUT,
};
pub use model::{
    ChildNetwork, DecisionKind, DepthRange, FpgaPool, FpgaSpec, LayerKind, LayerSpec, ModelError,
    PoolEntry, SearchSpace, SpaceKind, StrideMode, TensorShape,
};
pub use partition::{
    brute_force_optimize, enumerate_partitions, optimize, Assignment, DeviceRef, OptimizeError,
    Partition, PipelinePlan,
};
pub use perf::{
    evaluate_plan, LatencyModel, LatencyTable, MemoryCounting, PerfModelParams, PlanError,
    PlanEval, RooflineModel, StageEval,
};
pub use search::{
    combined_reward, fast_explore, hypervolume_of, run_search, stage_reward, ChildRecord,
    DesignPoint, EngineState, EpisodeReport, FastExploreOutcome, FastExploreParams, ParetoArchive,
    SearchConfig, SearchEngine, SearchError, SearchOutcome,
};
