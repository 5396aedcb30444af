//! Acceptance suite: the release gates of the co-exploration engine.
//!
//! Each test checks one gate end to end — closed-form reward shapes, the
//! exactness of the pipeline optimizer against an exhaustive reference,
//! policy-gradient correctness, search effectiveness on an enumerable
//! benchmark, the analysis commands' qualitative claims, and artifact
//! determinism — and prints a single timed PASS line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use coex_core::controller::{space_size, ControllerState};
use coex_core::eval::{
    surrogate_from_counts, AccuracyCache, AccuracyEvaluator, AccuracySource, SurrogateParams,
};
use coex_core::model::{
    ChildNetwork, DepthRange, FpgaPool, FpgaSpec, LayerSpec, PoolEntry, SearchSpace, SpaceKind,
    StrideMode, TensorShape,
};
use coex_core::partition::{brute_force_optimize, optimize, OptimizeError, Partition};
use coex_core::perf::{LatencyTable, PerfModelParams, RooflineModel};
use coex_core::search::{
    combined_reward, hypervolume_of, stage_reward, SearchConfig, SearchEngine,
};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

fn pass(name: &str, start: Instant, budget_secs: f64) {
    let elapsed = start.elapsed().as_secs_f64();
    println!("PASS  {name}  [{elapsed:.2}s]");
    assert!(
        elapsed < budget_secs,
        "{name}: took {elapsed:.2}s, budget {budget_secs}s"
    );
}

/// A mid-range FPGA model: 74K logic cells, 4.9Mb on-chip memory, 150 DSP
/// slices at 100 MHz, 2.1 GB/s serial links.
fn bench_device() -> FpgaSpec {
    FpgaSpec {
        name: "xc7z015".into(),
        logic_cells: 74_000,
        onchip_memory_bits: 4_900_000,
        dsp_slices: 150,
        clock_hz: 1.0e8,
        link_bytes_per_sec: 2.1e9,
        macs_per_dsp_per_cycle: 1,
    }
}

fn bench_pool() -> FpgaPool {
    FpgaPool::new(vec![PoolEntry { spec: bench_device(), count: 3 }])
}

/// The enumerable four-layer benchmark: 16 choices per layer, 65,536
/// networks in total — small enough to compute the true Pareto frontier
/// exhaustively, large enough that random search cannot cover it.
fn bench_space() -> SearchSpace {
    SearchSpace {
        kind: SpaceKind::ConvChain,
        input: TensorShape::new(32, 32, 3),
        depth: DepthRange::fixed(4),
        filter_choices: vec![24, 36, 48, 64],
        kernel_choices: vec![3, 5],
        stride_choices: vec![1, 2],
        expansion_choices: vec![],
        stride_mode: StrideMode::Predicted,
        precision_bits: 16,
    }
}

const BENCH_TS_FPS: f64 = 100.0;

fn bench_search_config(seed: u64) -> SearchConfig {
    SearchConfig {
        ts_fps: BENCH_TS_FPS,
        beta: 0.7,
        episodes: 200,
        children_per_episode: 4,
        fe_trials: 16,
        fe_minibatch: 1,
        lr: 0.005,
        baseline_decay: 0.9,
        infeasible_reward: -1.0,
        hidden_size: 16,
        seed,
    }
}

#[test]
fn c01_stage_reward_matches_the_three_branch_form_on_a_dense_grid() {
    let start = Instant::now();
    for i in 0..=300 {
        let u = i as f64 / 100.0;
        let expected = if u <= 1.0 {
            u
        } else if u <= 2.0 {
            1.0 - u
        } else {
            -1.0
        };
        assert_eq!(stage_reward(u), expected, "stage reward deviates at u = {u}");
    }
    pass("stage reward matches its three-branch closed form on a 301-point grid", start, 1.0);
}

#[test]
fn c02_combined_reward_is_the_convex_blend_and_symmetric_at_half() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let a: f64 = rng.random();
        let u: f64 = rng.random();
        let beta: f64 = rng.random();
        let blend = beta * a + (1.0 - beta) * u;
        assert!(
            (combined_reward(a, u, beta) - blend).abs() <= 1e-12,
            "combined reward deviates at a={a} u={u} beta={beta}"
        );
        assert!(
            (combined_reward(a, u, 0.5) - combined_reward(u, a, 0.5)).abs() <= 1e-12,
            "combined reward is asymmetric at beta = 0.5 for a={a} u={u}"
        );
    }
    pass("combined reward blends objectives exactly and is symmetric at beta 0.5", start, 1.0);
}

#[test]
fn c03_partition_optimizer_matches_the_exhaustive_reference() {
    let start = Instant::now();
    let device = |name: &str, dsp: u64| FpgaSpec {
        name: name.into(),
        logic_cells: 74_000,
        onchip_memory_bits: 4_900_000,
        dsp_slices: dsp,
        clock_hz: 1.0e8,
        link_bytes_per_sec: 2.1e9,
        macs_per_dsp_per_cycle: 1,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut feasible = 0usize;
    let mut infeasible = 0usize;
    for case in 0..200 {
        let depth = rng.random_range(1..=8);
        let n_models = rng.random_range(1..=2usize);
        let mut remaining = 3u32;
        let mut entries = Vec::new();
        for (i, name) in ["alpha", "bravo"].iter().enumerate().take(n_models) {
            let max = remaining - (n_models as u32 - 1 - i as u32);
            let count = rng.random_range(1..=max);
            remaining -= count;
            entries.push(PoolEntry { spec: device(name, 100 + 40 * i as u64), count });
        }
        let pool = FpgaPool::new(entries);
        let mut table = LatencyTable::default();
        for l in 0..depth {
            for e in &pool.devices {
                table.set(l, &e.spec.name, rng.random_range(0.001..0.012));
            }
        }
        let ts = *[40.0, 80.0, 150.0, 300.0].choose(&mut rng).unwrap();
        let net = ChildNetwork::new(
            TensorShape::new(32, 32, 3),
            (0..depth).map(|_| LayerSpec::conv(8, 3, 1)).collect(),
        );

        match (optimize(&net, &pool, ts, &table), brute_force_optimize(&net, &pool, ts, &table)) {
            (Ok(fast), Ok(slow)) => {
                feasible += 1;
                assert_eq!(
                    fast.eval.avg_utilization, slow.eval.avg_utilization,
                    "case {case}: achieved utilization differs from the exhaustive reference"
                );
                assert_eq!(fast, slow, "case {case}: plans differ");
                for s in &fast.eval.stages {
                    assert!(
                        s.utilization <= 1.0 + 1e-9,
                        "case {case}: stage {} exceeds the throughput budget: {}",
                        s.stage,
                        s.utilization
                    );
                }
            }
            (Err(OptimizeError::NoFeasiblePlan), Err(OptimizeError::NoFeasiblePlan)) => {
                infeasible += 1;
            }
            (a, b) => panic!("case {case}: feasibility verdicts diverge: {a:?} versus {b:?}"),
        }
    }
    assert!(feasible >= 50, "only {feasible}/200 instances feasible; generator too harsh");
    assert!(infeasible >= 20, "only {infeasible}/200 instances infeasible; generator too soft");
    pass(
        "pipeline optimizer matches the exhaustive reference on 200 random instances",
        start,
        60.0,
    );
}

#[test]
fn c04_policy_gradient_matches_central_finite_differences() {
    let start = Instant::now();
    let h = 1e-4;
    let mut checked = 0usize;
    let mut close = 0usize;
    for t in 0..20u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(400 + t);
        let mbconv = t % 4 == 3;
        let space = SearchSpace {
            kind: if mbconv { SpaceKind::MBConvChain } else { SpaceKind::ConvChain },
            input: TensorShape::new(16, 16, 3),
            depth: DepthRange::fixed(2 + (t as usize % 3)),
            filter_choices: match t % 3 {
                0 => vec![8, 16],
                1 => vec![8, 16, 24],
                _ => vec![8, 16, 24, 32],
            },
            kernel_choices: if t % 2 == 0 { vec![3] } else { vec![3, 5] },
            stride_choices: if t % 2 == 0 { vec![1] } else { vec![1, 2] },
            expansion_choices: if mbconv { vec![3, 6] } else { vec![] },
            stride_mode: if t % 2 == 0 { StrideMode::Fixed1 } else { StrideMode::Predicted },
            precision_bits: 16,
        };
        let depth = space.depth.max;
        let hidden = 4 + (t as usize % 3);
        let mut ctrl = ControllerState::new(space, depth, hidden, 40 + t).unwrap();

        // Move parameters off their initialization with a few policy
        // updates on randomly rewarded samples.
        let fused = ctrl.fuse();
        let mut baseline = coex_core::controller::BaselineState::new(1, 0.9);
        for _ in 0..(t % 3) {
            let (_, traj) = ctrl.sample(&fused, &mut rng);
            let reward = rng.random_range(-1.0..1.0);
            ctrl.reinforce_step(&fused, &[(&traj, &[reward][..])], &mut baseline, 0.05).unwrap();
        }

        let plan = if t % 2 == 0 {
            ctrl.fuse()
        } else {
            let cut = 1 + (t as usize % (depth - 1).max(1));
            ctrl.regroup(&Partition::new(vec![cut.min(depth - 1), depth]).unwrap()).unwrap()
        };
        let (_, traj) = ctrl.sample(&plan, &mut rng);
        let (_, grads) = ctrl.log_prob_and_grad(&plan, &traj).unwrap();

        for g in 0..plan.n_groups() {
            for i in 0..ctrl.param_len() {
                ctrl.perturb_group_param(&plan, g, i, h);
                let up = ctrl.replay(&plan, &traj.decisions).unwrap().group_log_prob(g);
                ctrl.perturb_group_param(&plan, g, i, -2.0 * h);
                let down = ctrl.replay(&plan, &traj.decisions).unwrap().group_log_prob(g);
                ctrl.perturb_group_param(&plan, g, i, h);
                let fd = (up - down) / (2.0 * h);
                let an = grads[g][i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                checked += 1;
                if ((fd - an) / denom).abs() <= 1e-4 {
                    close += 1;
                }
            }
        }
    }
    assert!(checked >= 2_000, "only {checked} coordinates checked");
    assert!(
        close as f64 >= 0.95 * checked as f64,
        "{close}/{checked} gradient coordinates within tolerance"
    );
    pass(
        "analytic policy gradient matches central finite differences on 20 random states",
        start,
        30.0,
    );
}

#[test]
fn c05_sampling_distribution_normalizes_over_an_enumerable_space() {
    let start = Instant::now();
    let space = SearchSpace {
        kind: SpaceKind::ConvChain,
        input: TensorShape::new(16, 16, 3),
        depth: DepthRange::fixed(3),
        filter_choices: vec![8, 16, 24, 32],
        kernel_choices: vec![3, 5],
        stride_choices: vec![1],
        expansion_choices: vec![],
        stride_mode: StrideMode::Fixed1,
        precision_bits: 16,
    };
    let mut ctrl = ControllerState::new(space.clone(), 3, 8, 5).unwrap();

    // A freshly initialized policy is near-uniform; walk it away first so
    // normalization is checked on a non-trivial distribution.
    let mut rng = ChaCha20Rng::seed_from_u64(55);
    let fused = ctrl.fuse();
    let mut baseline = coex_core::controller::BaselineState::new(1, 0.9);
    for _ in 0..5 {
        let (_, traj) = ctrl.sample(&fused, &mut rng);
        let reward = rng.random_range(-1.0..1.0);
        ctrl.reinforce_step(&fused, &[(&traj, &[reward][..])], &mut baseline, 0.1).unwrap();
    }

    for plan in [ctrl.fuse(), ctrl.regroup(&Partition::new(vec![1, 3]).unwrap()).unwrap()] {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for net in space.enumerate_depth(3) {
            let decisions = ctrl.decisions_of(&net).unwrap();
            let traj = ctrl.replay(&plan, &decisions).unwrap();
            total += traj.total_log_prob().exp();
            count += 1;
        }
        assert!(count <= 1024, "space too large for exhaustive normalization: {count}");
        assert_eq!(count, 512);
        assert!(
            (total - 1.0).abs() <= 1e-9,
            "probabilities sum to {total} over {count} networks"
        );
    }
    pass(
        "sampled log-probabilities normalize to one over a 512-network space",
        start,
        10.0,
    );
}

#[test]
fn c06_search_reaches_the_true_frontier_and_beats_random_search() {
    let start = Instant::now();
    let space = bench_space();
    let pool = bench_pool();
    let model = RooflineModel::new(PerfModelParams::default());
    let surrogate = SurrogateParams::default();

    // True Pareto frontier by exhaustive enumeration of all 65,536
    // networks, each with its exactly optimized pipeline.
    let mut truth: Vec<(f64, f64)> = Vec::new();
    for net in space.enumerate_depth(4) {
        match optimize(&net, &pool, BENCH_TS_FPS, &model) {
            Ok(plan) => {
                let acc = surrogate_from_counts(net.count_params(), net.depth(), &surrogate);
                truth.push((acc, plan.eval.avg_utilization));
            }
            Err(OptimizeError::NoFeasiblePlan) => {}
            Err(e) => panic!("optimizer failed during enumeration: {e}"),
        }
    }
    let hv_true = hypervolume_of(&truth);
    assert!(hv_true > 0.0);

    let seeds = 10u64;
    let mut reached = 0usize;
    let mut beat_random = 0usize;
    for seed in 0..seeds {
        let cfg = bench_search_config(seed);
        let budget = cfg.episodes * cfg.children_per_episode;
        let evaluator = AccuracyEvaluator::new(
            AccuracySource::Surrogate(surrogate.clone()),
            AccuracyCache::in_memory(),
        );
        let mut engine =
            SearchEngine::new(space.clone(), pool.clone(), PerfModelParams::default(), cfg, evaluator)
                .unwrap();
        for _ in 0..engine.config().episodes {
            engine.run_episode().unwrap();
        }
        let hv_search = engine.archive().hypervolume();

        // Pure random search with the same child-evaluation budget.
        let mut rng = ChaCha20Rng::seed_from_u64(9_000 + seed);
        let mut random_points = Vec::with_capacity(budget);
        for _ in 0..budget {
            let net = space.sample_uniform(&mut rng);
            match optimize(&net, &pool, BENCH_TS_FPS, &model) {
                Ok(plan) => {
                    let acc = surrogate_from_counts(net.count_params(), net.depth(), &surrogate);
                    random_points.push((acc, plan.eval.avg_utilization));
                }
                Err(OptimizeError::NoFeasiblePlan) => {}
                Err(e) => panic!("optimizer failed on a random sample: {e}"),
            }
        }
        let hv_random = hypervolume_of(&random_points);

        if hv_search >= 0.95 * hv_true {
            reached += 1;
        }
        if hv_search > hv_random {
            beat_random += 1;
        }
        println!(
            "  seed {seed}: search {hv_search:.6}, random {hv_random:.6}, true {hv_true:.6} \
             ({:.1}% of true)",
            100.0 * hv_search / hv_true
        );
    }
    assert!(
        reached >= 8,
        "search reached 95% of the true hypervolume in only {reached}/{seeds} seeds"
    );
    assert!(
        beat_random >= 8,
        "search beat equal-budget random search in only {beat_random}/{seeds} seeds"
    );
    pass(
        "200-episode search reaches 95% of the true frontier and beats random search",
        start,
        300.0,
    );
}

#[test]
fn c07_per_stage_factorization_collapses_the_joint_space() {
    let start = Instant::now();
    // 250 x 2 x 2 = 1000 layer-level choices; three layers, one per stage.
    let space = SearchSpace {
        kind: SpaceKind::ConvChain,
        input: TensorShape::new(32, 32, 3),
        depth: DepthRange::fixed(3),
        filter_choices: (1..=250).collect(),
        kernel_choices: vec![3, 5],
        stride_choices: vec![1, 2],
        expansion_choices: vec![],
        stride_mode: StrideMode::Predicted,
        precision_bits: 16,
    };
    space.validate().unwrap();
    assert_eq!(space.per_layer_size(), 1000);

    let (joint, per_stage) = space_size(&space, 3, None);
    assert_eq!(joint, 1_000_000_000u128);
    assert_eq!(per_stage, vec![1_000u128; 3]);

    let partition = Partition::new(vec![1, 2, 3]).unwrap();
    let (joint_partitioned, per_stage) = space_size(&space, 3, Some(&partition));
    assert_eq!(joint_partitioned, 1_000_000_000u128);
    assert_eq!(per_stage, vec![1_000u128; 3]);
    assert_eq!(per_stage.iter().sum::<u128>(), 3_000u128);
    pass(
        "grouping shrinks a billion-network joint space to three thousand stage choices",
        start,
        1.0,
    );
}

#[test]
fn c08_validity_fraction_never_increases_with_the_throughput_target() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("validity.toml");
    std::fs::write(
        &config_path,
        r#"
schema_version = 1

[search_space]
kind = "conv_chain"
depth = { min = 4, max = 14 }
filter_choices = [24, 36, 48, 64]
kernel_choices = [1, 3, 5, 7]
stride_choices = [1, 2]
stride_mode = "predicted"

[search_space.input]
height = 32
width = 32
channels = 3

[[pool.devices]]
name = "xc7z015"
logic_cells = 74000
onchip_memory_bits = 4900000
dsp_slices = 150
clock_hz = 1.0e8
link_bytes_per_sec = 2.1e9
count = 3

[search]
ts_fps = 35.0
"#,
    )
    .unwrap();

    let out = dir.path().join("out");
    coex_cli::commands::cmd_analyze_validity(&coex_cli::commands::ValidityArgs {
        config: config_path,
        fps_list: vec![20.0, 35.0, 60.0, 100.0],
        samples: 10_000,
        seed: Some(8),
        out: out.clone(),
    })
    .unwrap();

    let text = std::fs::read_to_string(out.join("validity.csv")).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            (f[0].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![20.0, 35.0, 60.0, 100.0]);
    for w in rows.windows(2) {
        assert!(
            w[0].1 >= w[1].1,
            "validity increased from {} at {} fps to {} at {} fps",
            w[0].1,
            w[0].0,
            w[1].1,
            w[1].0
        );
    }
    assert!(
        rows[0].1 > rows[3].1,
        "validity did not strictly fall across the target range: {rows:?}"
    );
    pass(
        "feasible fraction of 10,000 sampled networks never rises with the fps target",
        start,
        120.0,
    );
}

#[test]
fn c09_near_equal_parameter_networks_span_a_wide_efficiency_range() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("size-eff.toml");
    std::fs::write(
        &config_path,
        r#"
schema_version = 1

[search_space]
kind = "conv_chain"
depth = { min = 4, max = 4 }
filter_choices = [24, 36, 48, 64]
kernel_choices = [3, 5]
stride_choices = [1, 2]
stride_mode = "predicted"

[search_space.input]
height = 32
width = 32
channels = 3

[[pool.devices]]
name = "xc7z015"
logic_cells = 74000
onchip_memory_bits = 4900000
dsp_slices = 150
clock_hz = 1.0e8
link_bytes_per_sec = 2.1e9
count = 3

[search]
ts_fps = 35.0
"#,
    )
    .unwrap();

    let out = dir.path().join("out");
    coex_cli::commands::cmd_analyze_size_eff(&coex_cli::commands::SizeEffArgs {
        config: config_path,
        out: out.clone(),
    })
    .unwrap();

    let mut reader = csv::Reader::from_path(out.join("size_eff.csv")).unwrap();
    let mut rows: Vec<(u64, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.unwrap();
        if &record[3] == "true" {
            rows.push((record[1].parse().unwrap(), record[4].parse().unwrap()));
        }
    }
    assert_eq!(rows.len(), 65_536, "expected every benchmark network to be feasible");

    // Scan parameter bands of at most 1% relative width for the widest
    // efficiency spread (two-pointer over rows sorted by parameter count).
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best_spread = 0.0f64;
    let mut hi = 0usize;
    for lo in 0..rows.len() {
        hi = hi.max(lo + 1);
        while hi < rows.len() && rows[hi].0 as f64 <= rows[lo].0 as f64 * 1.01 {
            hi += 1;
        }
        let band = &rows[lo..hi];
        let min = band.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        let max = band.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        best_spread = best_spread.max(max - min);
        if best_spread >= 0.30 {
            break;
        }
    }
    assert!(
        best_spread >= 0.30,
        "no 1%-wide parameter band spans 30 efficiency points (best spread {best_spread:.3})"
    );
    pass(
        "a 1%-wide parameter band spans over 30 percentage points of efficiency",
        start,
        300.0,
    );
}

#[test]
fn c10_episode_updates_start_from_clean_snapshots_and_runs_are_byte_reproducible() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        r#"
schema_version = 1

[search_space]
kind = "conv_chain"
depth = { min = 4, max = 4 }
filter_choices = [24, 36, 48, 64]
kernel_choices = [3, 5]
stride_choices = [1, 2]
stride_mode = "predicted"

[search_space.input]
height = 32
width = 32
channels = 3

[[pool.devices]]
name = "xc7z015"
logic_cells = 74000
onchip_memory_bits = 4900000
dsp_slices = 150
clock_hz = 1.0e8
link_bytes_per_sec = 2.1e9
count = 3

[search]
ts_fps = 100.0
episodes = 30
children_per_episode = 2
fe_trials = 4
lr = 0.02
hidden_size = 16
seed = 10
"#,
    )
    .unwrap();

    for sub in ["a", "b"] {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_coex"))
            .env("COEX_LOG_LEVEL", "warn")
            .args(["run", "--config"])
            .arg(&config_path)
            .arg("--out")
            .arg(dir.path().join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }

    let log_a = std::fs::read(dir.path().join("a/log.jsonl")).unwrap();
    let log_b = std::fs::read(dir.path().join("b/log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "episode logs differ between identical runs");
    let archive_a = std::fs::read(dir.path().join("a/archive.json")).unwrap();
    let archive_b = std::fs::read(dir.path().join("b/archive.json")).unwrap();
    assert_eq!(archive_a, archive_b, "archives differ between identical runs");

    let mut episodes = 0usize;
    for line in String::from_utf8(log_a).unwrap().lines() {
        let report: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(
            report["snapshot_consistent"], serde_json::Value::Bool(true),
            "episode {} applied its policy updates to a dirty controller",
            report["episode"]
        );
        episodes += 1;
    }
    assert_eq!(episodes, 30);
    pass(
        "policy updates start from clean snapshots and identical runs are byte-identical",
        start,
        120.0,
    );
}
