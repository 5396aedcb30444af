//! Reconfigurable recurrent controller.
//!
//! One recurrent cell exists per network layer. Cells regroup into stage
//! policies: every cell in a group shares one parameter vector (the
//! element-wise mean of its members at regroup time), and the group runs
//! as a single recurrent sequence across its member layers' decisions.
//! Fusing is the one-group special case used by the slow exploration
//! level. Policy gradients are computed analytically by backpropagation
//! through the tanh recurrence and updated with REINFORCE.

use crate::model::{ChildNetwork, DecisionKind, ModelError, SearchSpace};
use crate::partition::Partition;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::ops::Range;

/// Errors raised by controller operations.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ControllerError {
    #[error("incompatible trajectory: {0}")]
    IncompatibleTrajectory(String),
    #[error("incompatible grouping: {0}")]
    IncompatibleGrouping(String),
    #[error("snapshot mismatch: {0}")]
    SnapshotMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Offsets of each parameter block inside a cell's flat vector.
#[derive(Debug, Clone, PartialEq)]
struct ParamLayout {
    hidden: usize,
    kinds: Vec<DecisionKind>,
    widths: Vec<usize>,
    w_hh: Range<usize>,
    b_h: Range<usize>,
    emb: Vec<Range<usize>>,
    head_w: Vec<Range<usize>>,
    head_b: Vec<Range<usize>>,
    total: usize,
}

impl ParamLayout {
    fn new(hidden: usize, kinds: Vec<DecisionKind>, widths: Vec<usize>) -> Self {
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let w_hh = take(hidden * hidden);
        let b_h = take(hidden);
        let mut emb = Vec::new();
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for &w in &widths {
            emb.push(take(w * hidden));
            head_w.push(take(w * hidden));
            head_b.push(take(w));
        }
        Self {
            hidden,
            kinds,
            widths,
            w_hh,
            b_h,
            emb,
            head_w,
            head_b,
            total: at,
        }
    }
}

/// One cell's learnable state: parameters plus ADAM moments.
#[derive(Debug, Clone, PartialEq)]
struct Cell {
    params: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
}

impl Cell {
    fn zeroed(total: usize) -> Self {
        Self {
            params: vec![0.0; total],
            adam_m: vec![0.0; total],
            adam_v: vec![0.0; total],
            adam_t: 0,
        }
    }
}

/// Gradient ascent rule applied by [`ControllerState::reinforce_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient ascent.
    Sgd,
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How cells are currently grouped into policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingMode {
    /// One group per pipeline stage.
    PerStage,
    /// A single group over every layer.
    Fused,
}

/// Assignment of layers to policy groups. Produced by
/// [`ControllerState::regroup`] and [`ControllerState::fuse`]; groups
/// always cover contiguous layer ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingPlan {
    mode: GroupingMode,
    layer_group: Vec<usize>,
    n_groups: usize,
}

impl GroupingPlan {
    pub fn mode(&self) -> GroupingMode {
        self.mode
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    /// Group index of each layer, nondecreasing.
    pub fn layer_groups(&self) -> &[usize] {
        &self.layer_group
    }

    /// Layers of group `g`, as a contiguous range.
    fn members(&self, g: usize) -> Range<usize> {
        let start = self.layer_group.partition_point(|&x| x < g);
        let end = self.layer_group.partition_point(|&x| x <= g);
        start..end
    }
}

/// One sampled decision sequence: per-decision choice indices and
/// log-probabilities, with the group each decision belonged to. Decisions
/// are ordered layer by layer, decision kinds in prediction order within
/// a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub decisions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub group_of: Vec<usize>,
}

impl Trajectory {
    /// Sum of log-probabilities over decisions attributed to group `g`.
    pub fn group_log_prob(&self, g: usize) -> f64 {
        self.log_probs
            .iter()
            .zip(&self.group_of)
            .filter(|&(_, &og)| og == g)
            .map(|(&lp, _)| lp)
            .sum()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Exponential-moving-average reward baseline, one slot per group.
/// A decay of 0 keeps the latest reward only.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub decay: f64,
    values: Vec<f64>,
}

impl BaselineState {
    /// Baselines start at zero.
    pub fn new(n_groups: usize, decay: f64) -> Self {
        Self {
            decay,
            values: vec![0.0; n_groups],
        }
    }

    /// Rebuild a baseline from previously saved values.
    pub fn with_values(values: Vec<f64>, decay: f64) -> Self {
        Self { decay, values }
    }

    pub fn value(&self, g: usize) -> f64 {
        self.values[g]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn update(&mut self, g: usize, reward: f64) {
        self.values[g] = self.decay * self.values[g] + (1.0 - self.decay) * reward;
    }
}

/// Full copy of every cell's parameters and optimizer state. Restoring a
/// snapshot reproduces the controller bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    hidden: u32,
    widths: Vec<u32>,
    cells: Vec<Cell>,
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"COEXSNP1";

impl Snapshot {
    /// Serialize to a flat binary container: a shape header followed by
    /// little-endian f64 arrays.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&self.hidden.to_le_bytes());
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.cells.len() as u32).to_le_bytes());
        let total = self.cells.first().map_or(0, |c| c.params.len()) as u64;
        out.extend_from_slice(&total.to_le_bytes());
        for cell in &self.cells {
            out.extend_from_slice(&cell.adam_t.to_le_bytes());
            for arr in [&cell.params, &cell.adam_m, &cell.adam_v] {
                for v in arr {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ControllerError> {
        let bad = |msg: &str| ControllerError::SnapshotMismatch(msg.into());
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ControllerError> {
            if at + n > bytes.len() {
                return Err(bad("truncated snapshot"));
            }
            let s = &bytes[at..at + n];
            at += n;
            Ok(s)
        };
        if take(8)? != SNAPSHOT_MAGIC {
            return Err(bad("bad snapshot magic"));
        }
        let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let hidden = u32_of(take(4)?);
        let n_kinds = u32_of(take(4)?) as usize;
        let mut widths = Vec::with_capacity(n_kinds);
        for _ in 0..n_kinds {
            widths.push(u32_of(take(4)?));
        }
        let n_cells = u32_of(take(4)?) as usize;
        let total = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut cells = Vec::with_capacity(n_cells);
        for _ in 0..n_cells {
            let adam_t = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let mut arrays = [const { Vec::new() }; 3];
            for arr in &mut arrays {
                arr.reserve(total);
                for _ in 0..total {
                    arr.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
                }
            }
            let [params, adam_m, adam_v] = arrays;
            cells.push(Cell {
                params,
                adam_m,
                adam_v,
                adam_t,
            });
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes after snapshot"));
        }
        Ok(Self {
            hidden,
            widths,
            cells,
        })
    }
}

/// Decision source for a forward pass.
enum Draw<'a, R: Rng> {
    Sample(&'a mut R),
    Replay(&'a [usize]),
}

/// The controller: per-layer cells plus the update rule.
#[derive(Debug, Clone)]
pub struct ControllerState {
    space: SearchSpace,
    depth: usize,
    layout: ParamLayout,
    cells: Vec<Cell>,
    pub update_rule: UpdateRule,
}

impl ControllerState {
    /// Create `depth` independently initialized cells for `space`.
    /// Initialization is uniform in (-0.1, 0.1), deterministic in `seed`.
    pub fn new(
        space: SearchSpace,
        depth: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self, ControllerError> {
        space.validate()?;
        assert!(depth >= 1, "controller needs at least one layer");
        assert!(hidden >= 1, "hidden width must be positive");
        let kinds = space.decision_kinds();
        let widths: Vec<usize> = kinds.iter().map(|&k| space.choices(k).len()).collect();
        let layout = ParamLayout::new(hidden, kinds, widths);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cells = (0..depth)
            .map(|_| {
                let mut cell = Cell::zeroed(layout.total);
                for p in &mut cell.params {
                    *p = rng.random_range(-0.1..0.1);
                }
                cell
            })
            .collect();
        Ok(Self {
            space,
            depth,
            layout,
            cells,
            update_rule: UpdateRule::default(),
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn hidden(&self) -> usize {
        self.layout.hidden
    }

    /// Length of one cell's flat parameter vector.
    pub fn param_len(&self) -> usize {
        self.layout.total
    }

    /// Number of decisions in one trajectory.
    pub fn decisions_per_net(&self) -> usize {
        self.depth * self.layout.kinds.len()
    }

    /// Group cells per stage of `partition`; each group's working
    /// parameters (and optimizer moments) become the element-wise mean of
    /// its members'.
    pub fn regroup(&mut self, partition: &Partition) -> Result<GroupingPlan, ControllerError> {
        partition
            .check_covers(self.depth)
            .map_err(ControllerError::IncompatibleGrouping)?;
        let mut layer_group = vec![0; self.depth];
        for (g, range) in partition.stage_ranges().enumerate() {
            for l in range {
                layer_group[l] = g;
            }
        }
        let plan = GroupingPlan {
            mode: GroupingMode::PerStage,
            layer_group,
            n_groups: partition.num_stages(),
        };
        self.share_group_state(&plan);
        Ok(plan)
    }

    /// Merge all cells into one policy (mean parameters) covering every
    /// layer as a single recurrent sequence.
    pub fn fuse(&mut self) -> GroupingPlan {
        let plan = GroupingPlan {
            mode: GroupingMode::Fused,
            layer_group: vec![0; self.depth],
            n_groups: 1,
        };
        self.share_group_state(&plan);
        plan
    }

    /// Write each group's mean state into all its member cells. Members
    /// that are already bitwise identical are left untouched, so the mean
    /// of equal cells is exactly the shared value.
    fn share_group_state(&mut self, plan: &GroupingPlan) {
        for g in 0..plan.n_groups {
            let members = plan.members(g);
            if members.len() <= 1 {
                continue;
            }
            let first = members.start;
            if self.cells[members.clone()]
                .iter()
                .all(|c| *c == self.cells[first])
            {
                continue;
            }
            let n = members.len() as f64;
            let mut mean = Cell::zeroed(self.layout.total);
            for c in &self.cells[members.clone()] {
                for (acc, &v) in mean.params.iter_mut().zip(&c.params) {
                    *acc += v;
                }
                for (acc, &v) in mean.adam_m.iter_mut().zip(&c.adam_m) {
                    *acc += v;
                }
                for (acc, &v) in mean.adam_v.iter_mut().zip(&c.adam_v) {
                    *acc += v;
                }
                mean.adam_t = mean.adam_t.max(c.adam_t);
            }
            for arr in [&mut mean.params, &mut mean.adam_m, &mut mean.adam_v] {
                for v in arr.iter_mut() {
                    *v /= n;
                }
            }
            for l in members {
                self.cells[l] = mean.clone();
            }
        }
    }

    fn check_grouping(&self, plan: &GroupingPlan) -> Result<(), ControllerError> {
        if plan.layer_group.len() != self.depth {
            return Err(ControllerError::IncompatibleGrouping(format!(
                "grouping covers {} layers, controller has {}",
                plan.layer_group.len(),
                self.depth
            )));
        }
        Ok(())
    }

    /// Shared parameter vector of group `g` (its first member's).
    pub fn group_params(&self, plan: &GroupingPlan, g: usize) -> &[f64] {
        &self.cells[plan.members(g).start].params
    }

    /// Add `delta` to one shared parameter coordinate of group `g`,
    /// applied to every member cell.
    pub fn perturb_group_param(&mut self, plan: &GroupingPlan, g: usize, index: usize, delta: f64) {
        for l in plan.members(g) {
            self.cells[l].params[index] += delta;
        }
    }

    /// Draw a network from the grouped policy. Within a group, decisions
    /// are drawn sequentially and each step is conditioned on the previous
    /// decision's embedding; the hidden state resets at group boundaries.
    pub fn sample<R: Rng>(&self, plan: &GroupingPlan, rng: &mut R) -> (ChildNetwork, Trajectory) {
        self.check_grouping(plan).expect("grouping matches controller");
        let (traj, _) = self.forward(plan, &mut Draw::Sample(rng), false);
        let net = self.net_of(&traj.decisions);
        (net, traj)
    }

    /// Recompute the trajectory (with log-probabilities) for a fixed
    /// decision sequence under the current parameters.
    pub fn replay(
        &self,
        plan: &GroupingPlan,
        decisions: &[usize],
    ) -> Result<Trajectory, ControllerError> {
        self.check_grouping(plan)?;
        self.check_decisions(decisions)?;
        let (traj, _) = self.forward::<ChaCha20Rng>(plan, &mut Draw::Replay(decisions), false);
        Ok(traj)
    }

    /// Per-group log-probability of a trajectory's decisions and its
    /// analytic gradient with respect to each group's shared parameters.
    pub fn log_prob_and_grad(
        &self,
        plan: &GroupingPlan,
        traj: &Trajectory,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), ControllerError> {
        self.check_grouping(plan)?;
        self.check_decisions(&traj.decisions)?;
        let (replayed, grads) =
            self.forward::<ChaCha20Rng>(plan, &mut Draw::Replay(&traj.decisions), true);
        let log_probs = (0..plan.n_groups)
            .map(|g| replayed.group_log_prob(g))
            .collect();
        Ok((log_probs, grads.expect("gradients requested")))
    }

    fn check_decisions(&self, decisions: &[usize]) -> Result<(), ControllerError> {
        let expect = self.decisions_per_net();
        if decisions.len() != expect {
            return Err(ControllerError::IncompatibleTrajectory(format!(
                "{} decisions, expected {}",
                decisions.len(),
                expect
            )));
        }
        let k = self.layout.kinds.len();
        for (i, &d) in decisions.iter().enumerate() {
            let width = self.layout.widths[i % k];
            if d >= width {
                return Err(ControllerError::IncompatibleTrajectory(format!(
                    "decision {i} index {d} out of range {width}"
                )));
            }
        }
        Ok(())
    }

    /// Decision indices that reproduce `net` in this controller's space.
    pub fn decisions_of(&self, net: &ChildNetwork) -> Result<Vec<usize>, ControllerError> {
        if net.depth() != self.depth {
            return Err(ControllerError::IncompatibleTrajectory(format!(
                "network depth {} does not match controller depth {}",
                net.depth(),
                self.depth
            )));
        }
        let mut out = Vec::with_capacity(self.decisions_per_net());
        for (l, layer) in net.layers.iter().enumerate() {
            for &kind in &self.layout.kinds {
                let value = match kind {
                    DecisionKind::Filter => layer.filters,
                    DecisionKind::Kernel => layer.kernel,
                    DecisionKind::Stride => layer.stride,
                    DecisionKind::Expansion => layer.expansion,
                };
                let idx = self
                    .space
                    .choices(kind)
                    .iter()
                    .position(|&c| c == value)
                    .ok_or_else(|| {
                        ControllerError::IncompatibleTrajectory(format!(
                            "layer {l} {kind:?} value {value} not in space"
                        ))
                    })?;
                out.push(idx);
            }
        }
        Ok(out)
    }

    /// Network built from one decision index per (layer, kind).
    pub fn net_of(&self, decisions: &[usize]) -> ChildNetwork {
        let k = self.layout.kinds.len();
        let layers = (0..self.depth)
            .map(|l| self.space.layer_from_choices(&decisions[l * k..(l + 1) * k]))
            .collect();
        let mut net = ChildNetwork::new(self.space.input, layers);
        net.precision_bits = self.space.precision_bits;
        net
    }

    /// Forward pass over all groups; optionally accumulates per-group
    /// gradients by backpropagation through time.
    fn forward<R: Rng>(
        &self,
        plan: &GroupingPlan,
        draw: &mut Draw<'_, R>,
        want_grad: bool,
    ) -> (Trajectory, Option<Vec<Vec<f64>>>) {
        let k = self.layout.kinds.len();
        let n_dec = self.decisions_per_net();
        let mut decisions = vec![0usize; n_dec];
        let mut log_probs = vec![0.0f64; n_dec];
        let mut group_of = vec![0usize; n_dec];
        let mut grads = if want_grad {
            Some(vec![vec![0.0; self.layout.total]; plan.n_groups])
        } else {
            None
        };

        for g in 0..plan.n_groups {
            let members = plan.members(g);
            let params = &self.cells[members.start].params;
            let steps: Vec<(usize, usize)> = members
                .clone()
                .flat_map(|l| (0..k).map(move |j| (l, j)))
                .collect();
            let record = self.run_group(params, &steps, draw, &mut decisions, &mut log_probs);
            for &(l, j) in &steps {
                group_of[l * k + j] = g;
            }
            if let Some(grads) = grads.as_mut() {
                self.backward_group(params, &steps, &decisions, &record, &mut grads[g]);
            }
        }
        (
            Trajectory {
                decisions,
                log_probs,
                group_of,
            },
            grads,
        )
    }

    /// Run one group's recurrent sequence. Returns per-step hidden states
    /// and probabilities for the backward pass.
    fn run_group<R: Rng>(
        &self,
        params: &[f64],
        steps: &[(usize, usize)],
        draw: &mut Draw<'_, R>,
        decisions: &mut [usize],
        log_probs: &mut [f64],
    ) -> Vec<(Vec<f64>, Vec<f64>)> {
        let lay = &self.layout;
        let h = lay.hidden;
        let k = lay.kinds.len();
        let w_hh = &params[lay.w_hh.clone()];
        let b_h = &params[lay.b_h.clone()];
        let mut hidden = vec![0.0f64; h];
        let mut first = true;
        let mut prev: (usize, usize) = (0, 0);
        let mut record = Vec::with_capacity(steps.len());

        for &(l, j) in steps {
            // pre = W_hh * hidden + b_h + embedding of previous decision.
            let mut pre = b_h.to_vec();
            for i in 0..h {
                let row = &w_hh[i * h..(i + 1) * h];
                let mut acc = 0.0;
                for (w, x) in row.iter().zip(&hidden) {
                    acc += w * x;
                }
                pre[i] += acc;
            }
            if !first {
                let (pk, pc) = prev;
                let emb = &params[lay.emb[pk].clone()];
                for i in 0..h {
                    pre[i] += emb[pc * h + i];
                }
            }
            for v in pre.iter_mut() {
                *v = v.tanh();
            }
            hidden = pre;

            let width = lay.widths[j];
            let head_w = &params[lay.head_w[j].clone()];
            let head_b = &params[lay.head_b[j].clone()];
            let mut logits = vec![0.0f64; width];
            for (c, logit) in logits.iter_mut().enumerate() {
                let row = &head_w[c * h..(c + 1) * h];
                let mut acc = head_b[c];
                for (w, x) in row.iter().zip(&hidden) {
                    acc += w * x;
                }
                *logit = acc;
            }
            let log_p = log_softmax(&logits);
            let d = l * k + j;
            let choice = match draw {
                Draw::Sample(rng) => {
                    let u: f64 = rng.random();
                    let mut cum = 0.0;
                    let mut pick = width - 1;
                    for (c, lp) in log_p.iter().enumerate() {
                        cum += lp.exp();
                        if u < cum {
                            pick = c;
                            break;
                        }
                    }
                    pick
                }
                Draw::Replay(given) => given[d],
            };
            decisions[d] = choice;
            log_probs[d] = log_p[choice];
            record.push((hidden.clone(), log_p.iter().map(|lp| lp.exp()).collect()));
            prev = (j, choice);
            first = false;
        }
        record
    }

    /// Backpropagate d(sum of log-probs)/d(params) for one group.
    fn backward_group(
        &self,
        params: &[f64],
        steps: &[(usize, usize)],
        decisions: &[usize],
        record: &[(Vec<f64>, Vec<f64>)],
        grad: &mut [f64],
    ) {
        let lay = &self.layout;
        let h = lay.hidden;
        let k = lay.kinds.len();
        let w_hh = &params[lay.w_hh.clone()];
        let mut dh_carry = vec![0.0f64; h];

        for (t, &(l, j)) in steps.iter().enumerate().rev() {
            let (hidden, probs) = &record[t];
            let d = l * k + j;
            let choice = decisions[d];
            let width = lay.widths[j];
            let head_w = &params[lay.head_w[j].clone()];

            // d log p[choice] / d logits = onehot - p.
            let mut dh = dh_carry;
            for c in 0..width {
                let dlogit = if c == choice { 1.0 - probs[c] } else { -probs[c] };
                grad[lay.head_b[j].start + c] += dlogit;
                let wrow = &head_w[c * h..(c + 1) * h];
                let grow = &mut grad[lay.head_w[j].start + c * h..lay.head_w[j].start + (c + 1) * h];
                for i in 0..h {
                    grow[i] += dlogit * hidden[i];
                    dh[i] += dlogit * wrow[i];
                }
            }

            // Through tanh.
            let mut dpre = vec![0.0f64; h];
            for i in 0..h {
                dpre[i] = dh[i] * (1.0 - hidden[i] * hidden[i]);
            }

            let h_prev: &[f64] = if t == 0 { &[] } else { &record[t - 1].0 };
            for i in 0..h {
                grad[lay.b_h.start + i] += dpre[i];
                if t > 0 {
                    let grow = &mut grad[lay.w_hh.start + i * h..lay.w_hh.start + (i + 1) * h];
                    for (gw, &x) in grow.iter_mut().zip(h_prev) {
                        *gw += dpre[i] * x;
                    }
                }
            }

            // Input embedding of the previous decision.
            if t > 0 {
                let (_, pj) = steps[t - 1];
                let (pl, _) = steps[t - 1];
                let pd = pl * k + pj;
                let pchoice = decisions[pd];
                let base = lay.emb[pj].start + pchoice * h;
                for i in 0..h {
                    grad[base + i] += dpre[i];
                }
            }

            // Carry into the previous step's hidden state.
            let mut carry = vec![0.0f64; h];
            if t > 0 {
                for i in 0..h {
                    let row = &w_hh[i * h..(i + 1) * h];
                    for (c, &w) in carry.iter_mut().zip(row) {
                        *c += dpre[i] * w;
                    }
                }
            }
            dh_carry = carry;
        }
    }

    /// One REINFORCE ascent step per group on a batch of
    /// (trajectory, per-group reward) pairs. Advantages use the baseline
    /// value current when each trajectory is processed; the baseline is
    /// updated from each reward after use.
    pub fn reinforce_step(
        &mut self,
        plan: &GroupingPlan,
        batch: &[(&Trajectory, &[f64])],
        baseline: &mut BaselineState,
        lr: f64,
    ) -> Result<(), ControllerError> {
        self.check_grouping(plan)?;
        if baseline.values.len() != plan.n_groups {
            return Err(ControllerError::IncompatibleGrouping(format!(
                "baseline has {} groups, grouping has {}",
                baseline.values.len(),
                plan.n_groups
            )));
        }
        let mut acc = vec![vec![0.0f64; self.layout.total]; plan.n_groups];
        for &(traj, rewards) in batch {
            if rewards.len() != plan.n_groups {
                return Err(ControllerError::IncompatibleGrouping(format!(
                    "{} rewards for {} groups",
                    rewards.len(),
                    plan.n_groups
                )));
            }
            let (_, grads) = self.log_prob_and_grad(plan, traj)?;
            for g in 0..plan.n_groups {
                let advantage = rewards[g] - baseline.value(g);
                for (a, &dg) in acc[g].iter_mut().zip(&grads[g]) {
                    *a += advantage * dg;
                }
                baseline.update(g, rewards[g]);
            }
        }
        for (g, grad) in acc.iter().enumerate() {
            self.apply_group_step(plan, g, grad, lr);
        }
        Ok(())
    }

    fn apply_group_step(&mut self, plan: &GroupingPlan, g: usize, grad: &[f64], lr: f64) {
        let members = plan.members(g);
        let mut cell = self.cells[members.start].clone();
        match self.update_rule {
            UpdateRule::Sgd => {
                for (p, &dg) in cell.params.iter_mut().zip(grad) {
                    *p += lr * dg;
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                cell.adam_t += 1;
                let t = cell.adam_t as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..cell.params.len() {
                    let gi = grad[i];
                    cell.adam_m[i] = beta1 * cell.adam_m[i] + (1.0 - beta1) * gi;
                    cell.adam_v[i] = beta2 * cell.adam_v[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = cell.adam_m[i] / bc1;
                    let v_hat = cell.adam_v[i] / bc2;
                    cell.params[i] += lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        for l in members {
            self.cells[l] = cell.clone();
        }
    }

    /// Copy every cell's parameters and optimizer state.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            hidden: self.layout.hidden as u32,
            widths: self.layout.widths.iter().map(|&w| w as u32).collect(),
            cells: self.cells.clone(),
        }
    }

    /// Restore a snapshot taken from a controller of the same shape.
    pub fn restore(&mut self, snap: &Snapshot) -> Result<(), ControllerError> {
        let widths: Vec<u32> = self.layout.widths.iter().map(|&w| w as u32).collect();
        if snap.hidden as usize != self.layout.hidden
            || snap.widths != widths
            || snap.cells.len() != self.depth
            || snap.cells.iter().any(|c| c.params.len() != self.layout.total)
        {
            return Err(ControllerError::SnapshotMismatch(
                "snapshot shape does not match controller".into(),
            ));
        }
        self.cells = snap.cells.clone();
        Ok(())
    }

    /// True when current parameters and optimizer state equal `snap`
    /// bitwise.
    pub fn matches_snapshot(&self, snap: &Snapshot) -> bool {
        self.cells == snap.cells
    }
}

/// Numerically stable log-softmax.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Joint and per-stage factored sizes of a search space at a fixed depth.
/// With no partition every layer counts as its own stage. The joint size
/// is the product of stage sizes; the factored view is the per-stage list
/// whose sum is the cost of exploring stages independently.
pub fn space_size(
    space: &SearchSpace,
    depth: usize,
    partition: Option<&Partition>,
) -> (u128, Vec<u128>) {
    assert!(depth >= 1, "depth must be positive");
    let per_layer = space.per_layer_size();
    let stage_sizes: Vec<u128> = match partition {
        None => vec![per_layer; depth],
        Some(p) => {
            p.check_covers(depth).expect("partition covers depth");
            p.stage_ranges()
                .map(|r| {
                    per_layer
                        .checked_pow(r.len() as u32)
                        .unwrap_or(u128::MAX)
                })
                .collect()
        }
    };
    let joint = stage_sizes
        .iter()
        .try_fold(1u128, |acc, &s| acc.checked_mul(s))
        .unwrap_or(u128::MAX);
    (joint, stage_sizes)
}
