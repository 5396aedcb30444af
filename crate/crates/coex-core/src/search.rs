//! Two-level search engine.
//!
//! The slow level samples candidate networks from a fused controller and
//! rewards them by a convex combination of accuracy and pipeline
//! efficiency. Each candidate first passes through fast exploration: the
//! controller regroups per pipeline stage and runs a short REINFORCE loop
//! on hardware utilization alone, refining the candidate into the best
//! pipeline-fitting variant before the expensive accuracy evaluation.
//! Non-dominated (accuracy, efficiency) designs accumulate in a Pareto
//! archive.

use crate::controller::{
    BaselineState, ControllerError, ControllerState, Snapshot, Trajectory,
};
use crate::eval::{AccuracyEvaluator, EvalError};
use crate::model::{ChildNetwork, FpgaPool, ModelError, SearchSpace};
use crate::partition::{optimize, OptimizeError, PipelinePlan};
use crate::perf::{LatencyModel, PerfModelParams, PlanError, RooflineModel};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Errors raised by the search engine.
#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Reward for one pipeline stage at utilization `u`: rise linearly to the
/// ideal fully-used stage, fall linearly through the overloaded band, and
/// bottom out at -1 beyond twice the budget.
pub fn stage_reward(u: f64) -> f64 {
    if u <= 1.0 {
        u
    } else if u <= 2.0 {
        1.0 - u
    } else {
        -1.0
    }
}

/// Slow-level reward: `beta * accuracy + (1 - beta) * efficiency`.
pub fn combined_reward(accuracy: f64, efficiency: f64, beta: f64) -> f64 {
    beta * accuracy + (1.0 - beta) * efficiency
}

/// Knobs of the two-level search loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Pipeline throughput target in frames per second.
    pub ts_fps: f64,
    /// Weight of accuracy versus efficiency in the slow-level reward.
    pub beta: f64,
    pub episodes: usize,
    pub children_per_episode: usize,
    /// Fast-exploration sampling trials per child.
    pub fe_trials: usize,
    /// Trials accumulated per fast-exploration policy update.
    pub fe_minibatch: usize,
    pub lr: f64,
    pub baseline_decay: f64,
    /// Slow-level reward assigned when no feasible pipeline exists.
    pub infeasible_reward: f64,
    pub hidden_size: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            ts_fps: 30.0,
            beta: 0.5,
            episodes: 100,
            children_per_episode: 4,
            fe_trials: 8,
            fe_minibatch: 1,
            lr: 0.0006,
            baseline_decay: 0.95,
            infeasible_reward: -1.0,
            hidden_size: 64,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.ts_fps > 0.0 && self.ts_fps.is_finite()) {
            return Err(format!("ts_fps {} must be positive and finite", self.ts_fps));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("beta {} must be in [0, 1]", self.beta));
        }
        if self.children_per_episode == 0 {
            return Err("children_per_episode must be positive".into());
        }
        if self.fe_minibatch == 0 {
            return Err("fe_minibatch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr {} must be positive and finite", self.lr));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(format!("baseline_decay {} must be in [0, 1)", self.baseline_decay));
        }
        if !self.infeasible_reward.is_finite() {
            return Err("infeasible_reward must be finite".into());
        }
        if self.hidden_size == 0 {
            return Err("hidden_size must be positive".into());
        }
        Ok(())
    }
}

/// Parameters of one fast-exploration run.
#[derive(Debug, Clone, Copy)]
pub struct FastExploreParams {
    pub ts_fps: f64,
    pub trials: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub baseline_decay: f64,
}

/// Result of fast exploration: the refined network and its own optimal
/// pipeline plan.
#[derive(Debug, Clone, PartialEq)]
pub struct FastExploreOutcome {
    pub net: ChildNetwork,
    pub plan: PipelinePlan,
}

/// Refine `seed` by hardware-only local search. The seed's optimal plan
/// fixes the stage structure; the controller regroups per stage and runs
/// `trials` REINFORCE steps on per-stage utilization rewards, all
/// candidates being scored on the fixed plan. The best feasible candidate
/// seen (the seed included) is re-optimized and returned.
///
/// The controller's parameters are left mutated; callers that need the
/// original policy back must snapshot before and restore after.
pub fn fast_explore<M: LatencyModel, R: Rng>(
    controller: &mut ControllerState,
    seed: &ChildNetwork,
    pool: &FpgaPool,
    model: &M,
    params: &FastExploreParams,
    rng: &mut R,
) -> Result<FastExploreOutcome, SearchError> {
    let seed_plan = optimize(seed, pool, params.ts_fps, model)?;
    let grouping = controller.regroup(&seed_plan.partition)?;
    let mut baseline = BaselineState::new(grouping.n_groups(), params.baseline_decay);

    let mut best_net = seed.clone();
    let mut best_avg = seed_plan.eval.avg_utilization;
    let mut pending: Vec<(Trajectory, Vec<f64>)> = Vec::new();

    for _ in 0..params.trials {
        let (cand, traj) = controller.sample(&grouping, rng);
        let eval = crate::perf::evaluate_plan(
            &cand,
            &seed_plan.partition,
            &seed_plan.assignment,
            pool,
            params.ts_fps,
            model,
        )?;
        let rewards: Vec<f64> = eval.stages.iter().map(|s| stage_reward(s.utilization)).collect();
        if eval.feasible && eval.avg_utilization > best_avg {
            best_avg = eval.avg_utilization;
            best_net = cand;
        }
        pending.push((traj, rewards));
        if pending.len() >= params.minibatch {
            let batch: Vec<(&Trajectory, &[f64])> =
                pending.iter().map(|(t, r)| (t, r.as_slice())).collect();
            controller.reinforce_step(&grouping, &batch, &mut baseline, params.lr)?;
            pending.clear();
        }
    }
    if !pending.is_empty() {
        let batch: Vec<(&Trajectory, &[f64])> =
            pending.iter().map(|(t, r)| (t, r.as_slice())).collect();
        controller.reinforce_step(&grouping, &batch, &mut baseline, params.lr)?;
    }

    let plan = if best_net == *seed {
        seed_plan
    } else {
        optimize(&best_net, pool, params.ts_fps, model)?
    };
    Ok(FastExploreOutcome { net: best_net, plan })
}

/// One archived design: a network, its optimal pipeline, and both
/// objective values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub net: ChildNetwork,
    pub plan: PipelinePlan,
    pub accuracy: f64,
    pub efficiency: f64,
}

impl DesignPoint {
    pub fn key(&self) -> String {
        self.net.canonical_key()
    }

    /// True when `self` is at least as good in both objectives and
    /// strictly better in one.
    fn dominates(&self, other: &DesignPoint) -> bool {
        self.accuracy >= other.accuracy
            && self.efficiency >= other.efficiency
            && (self.accuracy > other.accuracy || self.efficiency > other.efficiency)
    }
}

/// Archive of non-dominated (accuracy, efficiency) designs, kept in
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    points: Vec<DesignPoint>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[DesignPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Insert `point` unless an archived design dominates it or shares
    /// its network; dominated incumbents are evicted. Returns whether the
    /// point was added.
    pub fn insert(&mut self, point: DesignPoint) -> bool {
        let key = point.key();
        if self
            .points
            .iter()
            .any(|p| p.dominates(&point) || p.key() == key)
        {
            return false;
        }
        self.points.retain(|p| !point.dominates(p));
        self.points.push(point);
        true
    }

    /// Highest-accuracy design; efficiency, then canonical key, break
    /// ties.
    pub fn opt_sw(&self) -> Option<&DesignPoint> {
        self.points.iter().min_by(|a, b| {
            b.accuracy
                .partial_cmp(&a.accuracy)
                .expect("finite objectives")
                .then(b.efficiency.partial_cmp(&a.efficiency).expect("finite objectives"))
                .then_with(|| a.key().cmp(&b.key()))
        })
    }

    /// Highest-efficiency design; accuracy, then canonical key, break
    /// ties.
    pub fn opt_hw(&self) -> Option<&DesignPoint> {
        self.points.iter().min_by(|a, b| {
            b.efficiency
                .partial_cmp(&a.efficiency)
                .expect("finite objectives")
                .then(b.accuracy.partial_cmp(&a.accuracy).expect("finite objectives"))
                .then_with(|| a.key().cmp(&b.key()))
        })
    }

    /// Area dominated by the archive in the unit square, measured from
    /// the origin.
    pub fn hypervolume(&self) -> f64 {
        hypervolume_of(
            &self
                .points
                .iter()
                .map(|p| (p.accuracy, p.efficiency))
                .collect::<Vec<_>>(),
        )
    }
}

/// Hypervolume of arbitrary (accuracy, efficiency) points against the
/// reference point (0, 0). Dominated and duplicate points contribute
/// nothing.
pub fn hypervolume_of(points: &[(f64, f64)]) -> f64 {
    let mut front: Vec<(f64, f64)> = Vec::new();
    for &(a, e) in points {
        if front.iter().any(|&(fa, fe)| fa >= a && fe >= e) {
            continue;
        }
        front.retain(|&(fa, fe)| !(a >= fa && e >= fe));
        front.push((a, e));
    }
    // Sweep by efficiency ascending: accuracy is then descending, and
    // each point rules the efficiency band down to its predecessor.
    front.sort_by(|x, y| x.1.partial_cmp(&y.1).expect("finite objectives"));
    let mut hv = 0.0;
    let mut prev_eff = 0.0;
    for &(a, e) in &front {
        hv += a * (e - prev_eff);
        prev_eff = e;
    }
    hv
}

/// Per-child log record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRecord {
    pub seed_key: String,
    pub refined_key: Option<String>,
    pub feasible: bool,
    pub accuracy: Option<f64>,
    pub efficiency: Option<f64>,
    pub reward: f64,
    pub archived: bool,
}

/// Outcome of one slow-exploration episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode: usize,
    /// Whether the controller was bitwise restored to its pre-episode
    /// snapshot after fast exploration.
    pub snapshot_consistent: bool,
    pub children: Vec<ChildRecord>,
    pub archive_len: usize,
}

/// Resumable engine state: the RNG position, controller snapshot bytes,
/// slow-level baseline, archive, and episode counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub episode: usize,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u64,
    pub controller: Vec<u8>,
    pub baseline_value: f64,
    pub archive: ParetoArchive,
}

/// The co-exploration engine. Construction fuses the controller once; all
/// slow-level sampling and updates run through the fused policy, while
/// fast exploration temporarily regroups (and is snapshot-isolated).
#[derive(Debug)]
pub struct SearchEngine {
    config: SearchConfig,
    pool: FpgaPool,
    model: RooflineModel,
    controller: ControllerState,
    fused: crate::controller::GroupingPlan,
    evaluator: AccuracyEvaluator,
    rng: ChaCha20Rng,
    baseline: BaselineState,
    archive: ParetoArchive,
    episode: usize,
}

impl SearchEngine {
    /// The slow-level RNG runs on its own stream so controller
    /// initialization draws never overlap search draws.
    const RNG_STREAM: u64 = 1;

    pub fn new(
        space: SearchSpace,
        pool: FpgaPool,
        perf: PerfModelParams,
        config: SearchConfig,
        evaluator: AccuracyEvaluator,
    ) -> Result<Self, SearchError> {
        config.validate().map_err(SearchError::Config)?;
        space.validate()?;
        pool.validate()?;
        let depth = space.depth.max;
        let mut controller =
            ControllerState::new(space, depth, config.hidden_size, config.seed)?;
        let fused = controller.fuse();
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        rng.set_stream(Self::RNG_STREAM);
        let baseline = BaselineState::new(1, config.baseline_decay);
        Ok(Self {
            config,
            pool,
            model: RooflineModel::new(perf),
            controller,
            fused,
            evaluator,
            rng,
            baseline,
            archive: ParetoArchive::new(),
            episode: 0,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }

    pub fn archive(&self) -> &ParetoArchive {
        &self.archive
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn evaluator(&self) -> &AccuracyEvaluator {
        &self.evaluator
    }

    fn fe_params(&self) -> FastExploreParams {
        FastExploreParams {
            ts_fps: self.config.ts_fps,
            trials: self.config.fe_trials,
            minibatch: self.config.fe_minibatch,
            lr: self.config.lr,
            baseline_decay: self.config.baseline_decay,
        }
    }

    /// Run one episode: sample children from the fused policy, refine
    /// each by snapshot-isolated fast exploration, then reward each
    /// child's seed trajectory with the combined objective (or the
    /// infeasible penalty) and update the fused policy per child.
    pub fn run_episode(&mut self) -> Result<EpisodeReport, SearchError> {
        let snap = self.controller.snapshot();
        let children: Vec<(ChildNetwork, Trajectory)> = (0..self.config.children_per_episode)
            .map(|_| self.controller.sample(&self.fused, &mut self.rng))
            .collect();

        let fe_params = self.fe_params();
        let mut refined: Vec<Option<FastExploreOutcome>> = Vec::new();
        for (net, _) in &children {
            self.controller.restore(&snap).expect("snapshot from this controller");
            match fast_explore(
                &mut self.controller,
                net,
                &self.pool,
                &self.model,
                &fe_params,
                &mut self.rng,
            ) {
                Ok(out) => refined.push(Some(out)),
                Err(SearchError::Optimize(OptimizeError::NoFeasiblePlan)) => refined.push(None),
                Err(e) => return Err(e),
            }
        }
        self.controller.restore(&snap).expect("snapshot from this controller");
        let snapshot_consistent = self.controller.matches_snapshot(&snap);

        let mut records = Vec::with_capacity(children.len());
        for ((_seed_net, traj), fe) in children.iter().zip(&refined) {
            let record = match fe {
                Some(out) => {
                    let accuracy = self.evaluator.accuracy(&out.net, &mut self.rng)?;
                    let efficiency = out.plan.eval.avg_utilization;
                    let reward = combined_reward(accuracy, efficiency, self.config.beta);
                    let archived = self.archive.insert(DesignPoint {
                        net: out.net.clone(),
                        plan: out.plan.clone(),
                        accuracy,
                        efficiency,
                    });
                    ChildRecord {
                        seed_key: _seed_net.canonical_key(),
                        refined_key: Some(out.net.canonical_key()),
                        feasible: true,
                        accuracy: Some(accuracy),
                        efficiency: Some(efficiency),
                        reward,
                        archived,
                    }
                }
                None => ChildRecord {
                    seed_key: _seed_net.canonical_key(),
                    refined_key: None,
                    feasible: false,
                    accuracy: None,
                    efficiency: None,
                    reward: self.config.infeasible_reward,
                    archived: false,
                },
            };
            self.controller.reinforce_step(
                &self.fused,
                &[(traj, &[record.reward])],
                &mut self.baseline,
                self.config.lr,
            )?;
            records.push(record);
        }

        let report = EpisodeReport {
            episode: self.episode,
            snapshot_consistent,
            children: records,
            archive_len: self.archive.len(),
        };
        self.episode += 1;
        Ok(report)
    }

    /// Capture everything needed to resume this engine later.
    pub fn state(&self) -> EngineState {
        let word_pos = self.rng.get_word_pos();
        debug_assert!(word_pos <= u64::MAX as u128);
        EngineState {
            episode: self.episode,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: word_pos as u64,
            controller: self.controller.snapshot().to_bytes(),
            baseline_value: self.baseline.value(0),
            archive: self.archive.clone(),
        }
    }

    /// Rewind this engine to a captured state. The engine must have been
    /// constructed with the same space, pool, and configuration.
    pub fn restore_state(&mut self, state: &EngineState) -> Result<(), SearchError> {
        let snap = Snapshot::from_bytes(&state.controller)?;
        self.controller.restore(&snap)?;
        let mut rng = ChaCha20Rng::from_seed(state.rng_seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(state.rng_word_pos as u128);
        self.rng = rng;
        self.baseline =
            BaselineState::with_values(vec![state.baseline_value], self.config.baseline_decay);
        self.archive = state.archive.clone();
        self.episode = state.episode;
        Ok(())
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub archive: ParetoArchive,
    pub reports: Vec<EpisodeReport>,
}

/// Construct an engine and run the configured number of episodes.
pub fn run_search(
    space: SearchSpace,
    pool: FpgaPool,
    perf: PerfModelParams,
    config: SearchConfig,
    evaluator: AccuracyEvaluator,
) -> Result<SearchOutcome, SearchError> {
    let episodes = config.episodes;
    let mut engine = SearchEngine::new(space, pool, perf, config, evaluator)?;
    let mut reports = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        reports.push(engine.run_episode()?);
    }
    Ok(SearchOutcome {
        archive: engine.archive.clone(),
        reports,
    })
}
