//! Contiguous layer partitioning and device assignment.
//!
//! [`optimize`] searches every contiguous partition of a network into at
//! most pool-size stages, crossed with every way of assigning distinct
//! physical devices to stages, and returns the feasible plan with maximum
//! average utilization. Units of the same device model are interchangeable,
//! so assignments enumerate device models with multiplicities rather than
//! permuting physical units. [`brute_force_optimize`] is the independent
//! reference implementation used to verify the optimizer on small
//! instances.

use crate::model::{ChildNetwork, FpgaPool};
use crate::perf::{evaluate_plan, LatencyModel, PlanError, PlanEval};
use serde::{Deserialize, Serialize};

/// Errors raised by plan optimization.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimizeError {
    /// No (partition, assignment) pair meets the throughput target.
    #[error("no feasible plan for the requested throughput target")]
    NoFeasiblePlan,
    /// Instance exceeds the brute-force guard (depth 12, pool size 4).
    #[error("instance too large for brute force: depth {depth}, pool units {units}")]
    InstanceTooLarge { depth: usize, units: u32 },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// A contiguous partition of layers `0..n` into pipeline stages, stored as
/// strictly increasing end-exclusive stage boundaries; the last boundary
/// equals the layer count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    stage_ends: Vec<usize>,
}

impl Partition {
    /// Build from end-exclusive boundaries. Rejects empty boundary lists
    /// and boundaries that are not strictly increasing or start at zero.
    pub fn new(stage_ends: Vec<usize>) -> Result<Self, String> {
        if stage_ends.is_empty() {
            return Err("partition has no stages".into());
        }
        if stage_ends[0] == 0 {
            return Err("first stage is empty".into());
        }
        if stage_ends.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("stage ends {stage_ends:?} are not strictly increasing"));
        }
        Ok(Self { stage_ends })
    }

    /// The trivial single-stage partition of `n` layers.
    pub fn single(n: usize) -> Self {
        Self { stage_ends: vec![n] }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_ends.len()
    }

    pub fn stage_ends(&self) -> &[usize] {
        &self.stage_ends
    }

    /// Half-open layer ranges of each stage, in order.
    pub fn stage_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.stage_ends.len()).map(move |i| {
            let start = if i == 0 { 0 } else { self.stage_ends[i - 1] };
            start..self.stage_ends[i]
        })
    }

    /// Index of the stage containing `layer`.
    pub fn stage_of(&self, layer: usize) -> usize {
        self.stage_ends.partition_point(|&end| end <= layer)
    }

    /// Check that the partition covers exactly `depth` layers.
    pub fn check_covers(&self, depth: usize) -> Result<(), String> {
        match self.stage_ends.last() {
            Some(&last) if last == depth => Ok(()),
            Some(&last) => Err(format!("partition covers {last} of {depth} layers")),
            None => Err("partition has no stages".into()),
        }
    }
}

/// One assigned physical device: a pool device model plus a unit index
/// below that model's available count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceRef {
    pub spec: String,
    pub unit: u32,
}

impl DeviceRef {
    pub fn new(spec: &str, unit: u32) -> Self {
        Self {
            spec: spec.into(),
            unit,
        }
    }
}

/// Per-stage device assignment, parallel to a partition's stages.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment {
    pub devices: Vec<DeviceRef>,
}

impl Assignment {
    pub fn new(devices: Vec<DeviceRef>) -> Self {
        Self { devices }
    }
}

/// A partition, its device assignment, and the resulting evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub partition: Partition,
    pub assignment: Assignment,
    pub eval: PlanEval,
}

/// Every contiguous partition of `n` layers into 1..=`max_stages` stages.
/// The result has sum over m of C(n-1, m-1) entries.
pub fn enumerate_partitions(n: usize, max_stages: usize) -> Vec<Partition> {
    let mut out = Vec::new();
    if n == 0 || max_stages == 0 {
        return out;
    }
    let mut ends = Vec::new();
    fn extend(ends: &mut Vec<usize>, start: usize, n: usize, left: usize, out: &mut Vec<Partition>) {
        for end in start + 1..=n {
            ends.push(end);
            if end == n {
                out.push(Partition {
                    stage_ends: ends.clone(),
                });
            } else if left > 1 {
                extend(ends, end, n, left - 1, out);
            }
            ends.pop();
        }
    }
    extend(&mut ends, 0, n, max_stages, &mut out);
    out
}

/// Candidate ordering shared by the optimizer and the brute-force
/// reference: higher average utilization wins; ties prefer fewer stages,
/// then lexicographically smaller stage boundaries, then lexicographically
/// smaller device-name sequences.
fn candidate_beats(
    avg: f64,
    ends: &[usize],
    names: &[&str],
    best: Option<&(f64, Vec<usize>, Vec<String>)>,
) -> bool {
    match best {
        None => true,
        Some((b_avg, b_ends, b_names)) => {
            if avg != *b_avg {
                return avg > *b_avg;
            }
            if ends.len() != b_ends.len() {
                return ends.len() < b_ends.len();
            }
            if ends != b_ends.as_slice() {
                return ends < b_ends.as_slice();
            }
            names.iter().copied().lt(b_names.iter().map(String::as_str))
        }
    }
}

/// Assign canonical unit indices to a per-stage device-model sequence:
/// units of each model are numbered in stage order.
fn canonical_assignment(names: &[&str]) -> Assignment {
    let devices = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let unit = names[..i].iter().filter(|&&m| m == *name).count() as u32;
            DeviceRef::new(name, unit)
        })
        .collect();
    Assignment::new(devices)
}

/// Find the feasible (partition, assignment) pair with maximum average
/// utilization for `net` on `pool` at `ts_fps`. Exact: enumerates all
/// contiguous partitions into at most pool-size stages with memoized stage
/// latencies, pruning stage extensions that no available device can hold.
pub fn optimize(
    net: &ChildNetwork,
    pool: &FpgaPool,
    ts_fps: f64,
    model: &dyn LatencyModel,
) -> Result<PipelinePlan, OptimizeError> {
    let n = net.depth();
    if n == 0 {
        return Err(OptimizeError::NoFeasiblePlan);
    }
    let shapes = net.derive_shapes().map_err(PlanError::from)?;

    // Device models sorted by name so index order equals name order.
    let mut entries: Vec<_> = pool.devices.iter().filter(|e| e.count > 0).collect();
    entries.sort_by(|a, b| a.spec.name.cmp(&b.spec.name));
    if entries.is_empty() {
        return Err(OptimizeError::NoFeasiblePlan);
    }

    // layer_lat[s][l]: latency of layer l on device model s.
    let layer_lat: Vec<Vec<f64>> = entries
        .iter()
        .map(|e| {
            (0..n)
                .map(|l| {
                    let input = if l == 0 { net.input } else { shapes[l - 1] };
                    model.layer_latency(net, l, input, &e.spec)
                })
                .collect()
        })
        .collect();

    // stage_util[s][i][j]: utilization of layers i..j on model s, built by
    // the same left-to-right summation evaluate_plan uses.
    let overhead = model.stage_overhead();
    let stage_util: Vec<Vec<Vec<f64>>> = layer_lat
        .iter()
        .map(|lats| {
            (0..n)
                .map(|i| {
                    let mut row = Vec::with_capacity(n - i);
                    let mut sum = 0.0;
                    for l in i..n {
                        sum += lats[l];
                        row.push((sum + overhead) * ts_fps);
                    }
                    row
                })
                .collect()
        })
        .collect();

    struct Search<'a> {
        n: usize,
        stage_util: &'a [Vec<Vec<f64>>],
        names: Vec<&'a str>,
        avail: Vec<u32>,
        ends: Vec<usize>,
        devices: Vec<usize>,
        utils: Vec<f64>,
        best: Option<(f64, Vec<usize>, Vec<String>)>,
    }

    impl Search<'_> {
        fn run(&mut self, start: usize) {
            if start == self.n {
                let m = self.utils.len();
                let mut sum = 0.0;
                for &u in &self.utils {
                    sum += u;
                }
                let avg = sum / m as f64;
                let names: Vec<&str> = self.devices.iter().map(|&s| self.names[s]).collect();
                if candidate_beats(avg, &self.ends, &names, self.best.as_ref()) {
                    self.best = Some((
                        avg,
                        self.ends.clone(),
                        names.into_iter().map(String::from).collect(),
                    ));
                }
                return;
            }
            if self.avail.iter().all(|&c| c == 0) {
                return;
            }
            for end in start + 1..=self.n {
                let mut any_fits = false;
                for s in 0..self.names.len() {
                    if self.avail[s] == 0 {
                        continue;
                    }
                    let util = self.stage_util[s][start][end - start - 1];
                    if util <= 1.0 {
                        any_fits = true;
                        self.avail[s] -= 1;
                        self.ends.push(end);
                        self.devices.push(s);
                        self.utils.push(util);
                        self.run(end);
                        self.utils.pop();
                        self.devices.pop();
                        self.ends.pop();
                        self.avail[s] += 1;
                    }
                }
                // Latencies only grow as a stage extends, so once no
                // available model can hold layers start..end none can hold
                // a longer stage either.
                if !any_fits {
                    break;
                }
            }
        }
    }

    let mut search = Search {
        n,
        stage_util: &stage_util,
        names: entries.iter().map(|e| e.spec.name.as_str()).collect(),
        avail: entries.iter().map(|e| e.count).collect(),
        ends: Vec::new(),
        devices: Vec::new(),
        utils: Vec::new(),
        best: None,
    };
    search.run(0);

    let (avg, ends, names) = search.best.ok_or(OptimizeError::NoFeasiblePlan)?;
    let partition = Partition { stage_ends: ends };
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let assignment = canonical_assignment(&name_refs);
    let eval = evaluate_plan(net, &partition, &assignment, pool, ts_fps, model)?;
    debug_assert_eq!(eval.avg_utilization, avg);
    debug_assert!(eval.feasible);
    Ok(PipelinePlan {
        partition,
        assignment,
        eval,
    })
}

/// Exhaustive reference optimizer: every partition from
/// [`enumerate_partitions`] crossed with every injective device
/// assignment, filtered through [`evaluate_plan`]. Guarded to depth 12 and
/// 4 pool units.
pub fn brute_force_optimize(
    net: &ChildNetwork,
    pool: &FpgaPool,
    ts_fps: f64,
    model: &dyn LatencyModel,
) -> Result<PipelinePlan, OptimizeError> {
    let n = net.depth();
    let units = pool.total_units();
    if n > 12 || units > 4 {
        return Err(OptimizeError::InstanceTooLarge { depth: n, units });
    }
    if n == 0 {
        return Err(OptimizeError::NoFeasiblePlan);
    }

    let mut entries: Vec<_> = pool.devices.iter().filter(|e| e.count > 0).collect();
    entries.sort_by(|a, b| a.spec.name.cmp(&b.spec.name));

    fn assignments<'a>(
        stages: usize,
        entries: &[&'a crate::model::PoolEntry],
        avail: &mut Vec<u32>,
        current: &mut Vec<&'a str>,
        out: &mut Vec<Vec<&'a str>>,
    ) {
        if current.len() == stages {
            out.push(current.clone());
            return;
        }
        for (i, e) in entries.iter().enumerate() {
            if avail[i] > 0 {
                avail[i] -= 1;
                current.push(e.spec.name.as_str());
                assignments(stages, entries, avail, current, out);
                current.pop();
                avail[i] += 1;
            }
        }
    }

    let mut best: Option<(f64, Vec<usize>, Vec<String>)> = None;
    let mut best_plan: Option<PipelinePlan> = None;
    for partition in enumerate_partitions(n, units.min(n as u32) as usize) {
        let stages = partition.num_stages();
        let mut avail: Vec<u32> = entries.iter().map(|e| e.count).collect();
        let mut seqs = Vec::new();
        assignments(stages, &entries, &mut avail, &mut Vec::new(), &mut seqs);
        for names in seqs {
            let assignment = canonical_assignment(&names);
            let eval = evaluate_plan(net, &partition, &assignment, pool, ts_fps, model)?;
            if !eval.feasible {
                continue;
            }
            if candidate_beats(eval.avg_utilization, partition.stage_ends(), &names, best.as_ref())
            {
                best = Some((
                    eval.avg_utilization,
                    partition.stage_ends().to_vec(),
                    names.iter().map(|s| s.to_string()).collect(),
                ));
                best_plan = Some(PipelinePlan {
                    partition: partition.clone(),
                    assignment,
                    eval,
                });
            }
        }
    }
    best_plan.ok_or(OptimizeError::NoFeasiblePlan)
}
