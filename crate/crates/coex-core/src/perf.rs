//! Pipeline performance model.
//!
//! Latency is pluggable through [`LatencyModel`] so the optimizer and its
//! tests can swap the default roofline estimate for fixed tables. Stage
//! latency is always the sum of member-layer latencies plus a per-stage
//! overhead; [`evaluate_plan`] turns stage latencies into utilizations
//! against a throughput target and aggregates them into a [`PlanEval`].

use crate::model::{ChildNetwork, FpgaPool, FpgaSpec, ModelError, TensorShape};
use crate::partition::{Assignment, Partition};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Errors raised when checking a plan against a network and a pool.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How data movement of a layer is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryCounting {
    /// Input activations + output activations + weights, at the network's
    /// numeric precision.
    #[default]
    InOutWeights,
}

/// Parameters of the roofline latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfModelParams {
    /// Fixed cost added once per pipeline stage, in seconds.
    pub stage_overhead_sec: f64,
    pub memory_counting: MemoryCounting,
}

impl Default for PerfModelParams {
    fn default() -> Self {
        Self {
            stage_overhead_sec: 0.0,
            memory_counting: MemoryCounting::InOutWeights,
        }
    }
}

/// Per-layer latency estimate on a device. Implementations must be pure:
/// the same arguments must always produce the same value, and latencies
/// must be nonnegative.
pub trait LatencyModel {
    fn layer_latency(
        &self,
        net: &ChildNetwork,
        layer: usize,
        input: TensorShape,
        device: &FpgaSpec,
    ) -> f64;

    /// Fixed cost added once per stage, in seconds.
    fn stage_overhead(&self) -> f64 {
        0.0
    }

    /// Latency of the stage covering `layers` (half-open layer range):
    /// member latencies summed in layer order, plus the stage overhead.
    fn stage_latency(
        &self,
        net: &ChildNetwork,
        layers: std::ops::Range<usize>,
        shapes: &[TensorShape],
        device: &FpgaSpec,
    ) -> f64 {
        let mut sum = 0.0;
        for l in layers {
            let input = if l == 0 { net.input } else { shapes[l - 1] };
            sum += self.layer_latency(net, l, input, device);
        }
        sum + self.stage_overhead()
    }
}

/// Roofline estimate: a layer takes the slower of its compute time
/// (MACs over peak MAC throughput) and its memory time (bytes moved over
/// link bandwidth).
#[derive(Debug, Clone, Copy, Default)]
pub struct RooflineModel {
    pub params: PerfModelParams,
}

impl RooflineModel {
    pub fn new(params: PerfModelParams) -> Self {
        Self { params }
    }
}

impl LatencyModel for RooflineModel {
    fn layer_latency(
        &self,
        net: &ChildNetwork,
        layer: usize,
        input: TensorShape,
        device: &FpgaSpec,
    ) -> f64 {
        let spec = &net.layers[layer];
        let output = spec.output_shape(input);
        let macs = spec.mac_count(input, output) as f64;
        let compute = macs / device.peak_macs_per_sec();
        let elements = match self.params.memory_counting {
            MemoryCounting::InOutWeights => {
                input.elements() + output.elements() + spec.param_count(input.channels)
            }
        };
        let bytes = elements as f64 * net.precision_bits as f64 / 8.0;
        let memory = bytes / device.link_bytes_per_sec;
        compute.max(memory)
    }

    fn stage_overhead(&self) -> f64 {
        self.params.stage_overhead_sec
    }
}

/// Fixed latency table keyed by layer index and, optionally, device name.
/// Intended for tests and the optimizer verification harness.
#[derive(Debug, Clone, Default)]
pub struct LatencyTable {
    by_layer_device: HashMap<(usize, String), f64>,
    by_layer: Vec<f64>,
    pub stage_overhead_sec: f64,
}

impl LatencyTable {
    /// Device-independent table: `per_layer[i]` is layer i's latency.
    pub fn per_layer(per_layer: Vec<f64>) -> Self {
        Self {
            by_layer: per_layer,
            ..Self::default()
        }
    }

    /// Set the latency of one (layer, device) pair.
    pub fn set(&mut self, layer: usize, device: &str, seconds: f64) {
        self.by_layer_device.insert((layer, device.to_string()), seconds);
    }

    pub fn with_overhead(mut self, seconds: f64) -> Self {
        self.stage_overhead_sec = seconds;
        self
    }
}

impl LatencyModel for LatencyTable {
    fn layer_latency(
        &self,
        _net: &ChildNetwork,
        layer: usize,
        _input: TensorShape,
        device: &FpgaSpec,
    ) -> f64 {
        if let Some(&s) = self.by_layer_device.get(&(layer, device.name.clone())) {
            return s;
        }
        match self.by_layer.get(layer) {
            Some(&s) => s,
            None => panic!("latency table has no entry for layer {layer} on {}", device.name),
        }
    }

    fn stage_overhead(&self) -> f64 {
        self.stage_overhead_sec
    }
}

/// Evaluation of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    pub stage: usize,
    pub device: String,
    pub unit: u32,
    pub latency_sec: f64,
    /// Stage latency times the throughput target.
    pub utilization: f64,
}

/// Evaluation of a complete pipeline plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEval {
    pub stages: Vec<StageEval>,
    /// Mean utilization over the stages the plan uses.
    pub avg_utilization: f64,
    /// True when every stage utilization is at most 1.
    pub feasible: bool,
    /// Inverse of the slowest stage latency.
    pub throughput_fps: f64,
}

/// Evaluate a (partition, assignment) pair for `net` against a throughput
/// target of `ts_fps` frames per second. `ts_fps` must be positive.
pub fn evaluate_plan(
    net: &ChildNetwork,
    partition: &Partition,
    assignment: &Assignment,
    pool: &FpgaPool,
    ts_fps: f64,
    model: &dyn LatencyModel,
) -> Result<PlanEval, PlanError> {
    debug_assert!(ts_fps > 0.0, "throughput target must be positive");
    partition.check_covers(net.depth()).map_err(PlanError::InvalidPartition)?;
    let stages = partition.num_stages();
    if assignment.devices.len() != stages {
        return Err(PlanError::InvalidAssignment(format!(
            "{} devices assigned to {} stages",
            assignment.devices.len(),
            stages
        )));
    }
    let mut used: Vec<(&str, u32)> = Vec::with_capacity(stages);
    for dev in &assignment.devices {
        let entry = pool.find(&dev.spec).ok_or_else(|| {
            PlanError::InvalidAssignment(format!("device {} not in pool", dev.spec))
        })?;
        if dev.unit >= entry.count {
            return Err(PlanError::InvalidAssignment(format!(
                "unit {} of {} exceeds available count {}",
                dev.unit, dev.spec, entry.count
            )));
        }
        let id = (dev.spec.as_str(), dev.unit);
        if used.contains(&id) {
            return Err(PlanError::InvalidAssignment(format!(
                "unit {} of {} assigned twice",
                dev.unit, dev.spec
            )));
        }
        used.push(id);
    }

    let shapes = net.derive_shapes()?;
    let mut evals = Vec::with_capacity(stages);
    let mut util_sum = 0.0;
    let mut max_latency = 0.0f64;
    let mut feasible = true;
    for (i, range) in partition.stage_ranges().enumerate() {
        let dev = &assignment.devices[i];
        let spec = &pool.find(&dev.spec).unwrap().spec;
        let latency = model.stage_latency(net, range, &shapes, spec);
        let utilization = latency * ts_fps;
        if utilization > 1.0 {
            feasible = false;
        }
        util_sum += utilization;
        max_latency = max_latency.max(latency);
        evals.push(StageEval {
            stage: i,
            device: dev.spec.clone(),
            unit: dev.unit,
            latency_sec: latency,
            utilization,
        });
    }
    Ok(PlanEval {
        stages: evals,
        avg_utilization: util_sum / stages as f64,
        feasible,
        throughput_fps: 1.0 / max_latency,
    })
}
