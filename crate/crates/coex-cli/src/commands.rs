//! Command implementations: the search run (with checkpoint/resume and
//! deterministic artifacts), the two analysis commands, and the
//! partitioner verification harness.

use crate::config::{EvaluatorConfig, RunConfig, SCHEMA_VERSION};
use crate::CliError;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use coex_core::eval::{AccuracyCache, AccuracyEvaluator, AccuracySource, ExternalEvaluator};
use coex_core::model::{ChildNetwork, FpgaPool, FpgaSpec, LayerSpec, PoolEntry, TensorShape};
use coex_core::partition::{brute_force_optimize, optimize, OptimizeError};
use coex_core::perf::{LatencyTable, RooflineModel};
use coex_core::search::{EngineState, EpisodeReport, ParetoArchive, SearchEngine};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Duration;

/// Arguments of `coex run`.
#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Stop once this many episodes exist (checkpoint and exit).
    pub stop_after: Option<usize>,
}

/// Arguments of `coex analyze-validity`.
#[derive(Debug, Clone)]
pub struct ValidityArgs {
    pub config: PathBuf,
    pub fps_list: Vec<f64>,
    pub samples: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Arguments of `coex analyze-size-eff`.
#[derive(Debug, Clone)]
pub struct SizeEffArgs {
    pub config: PathBuf,
    pub out: PathBuf,
}

/// Arguments of `coex verify-partitioner`.
#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub trials: usize,
    pub seed: u64,
}

fn build_evaluator(cfg: &RunConfig, out: &Path) -> Result<AccuracyEvaluator, CliError> {
    let cache = match cfg.evaluator.cache_path() {
        Some(p) => {
            let path = if p.is_relative() { out.join(p) } else { p.to_path_buf() };
            AccuracyCache::open(&path)
                .map_err(|e| CliError::Evaluator(format!("cache {}: {e}", path.display())))?
        }
        None => AccuracyCache::in_memory(),
    };
    let source = match &cfg.evaluator {
        EvaluatorConfig::Surrogate { params, .. } => AccuracySource::Surrogate(params.clone()),
        EvaluatorConfig::External { command, args, timeout_secs, .. } => {
            let ev = ExternalEvaluator::spawn(
                command,
                args,
                Duration::from_secs_f64(*timeout_secs),
            )
            .map_err(|e| CliError::Evaluator(e.to_string()))?;
            AccuracySource::External(ev)
        }
        EvaluatorConfig::CacheOnly { .. } => AccuracySource::CacheOnly,
    };
    Ok(AccuracyEvaluator::new(source, cache))
}

/// On-disk checkpoint: engine state plus the config it belongs to.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    config: RunConfig,
    episode: usize,
    rng_seed_b64: String,
    rng_stream: u64,
    rng_word_pos: u64,
    controller_b64: String,
    baseline_value: f64,
    archive: ParetoArchive,
}

impl CheckpointFile {
    fn from_state(cfg: &RunConfig, state: &EngineState) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config: cfg.clone(),
            episode: state.episode,
            rng_seed_b64: BASE64.encode(state.rng_seed),
            rng_stream: state.rng_stream,
            rng_word_pos: state.rng_word_pos,
            controller_b64: BASE64.encode(&state.controller),
            baseline_value: state.baseline_value,
            archive: state.archive.clone(),
        }
    }

    fn to_state(&self) -> Result<EngineState, CliError> {
        let corrupt = |what: &str| CliError::Config(format!("corrupt checkpoint: {what}"));
        let seed: [u8; 32] = BASE64
            .decode(&self.rng_seed_b64)
            .map_err(|_| corrupt("rng seed"))?
            .try_into()
            .map_err(|_| corrupt("rng seed length"))?;
        let controller = BASE64
            .decode(&self.controller_b64)
            .map_err(|_| corrupt("controller bytes"))?;
        Ok(EngineState {
            episode: self.episode,
            rng_seed: seed,
            rng_stream: self.rng_stream,
            rng_word_pos: self.rng_word_pos,
            controller,
            baseline_value: self.baseline_value,
            archive: self.archive.clone(),
        })
    }
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_checkpoint(path: &Path, cfg: &RunConfig, state: &EngineState) -> Result<(), CliError> {
    let file = CheckpointFile::from_state(cfg, state);
    let mut text = serde_json::to_string(&file).expect("checkpoint serializes");
    text.push('\n');
    write_atomically(path, text.as_bytes())
}

/// Keep only the log lines for episodes before `resume_episode`,
/// preserving their exact bytes.
fn truncate_log(text: &str, resume_episode: usize) -> String {
    #[derive(Deserialize)]
    struct EpisodeOnly {
        episode: usize,
    }
    let mut kept = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EpisodeOnly>(line) {
            Ok(e) if e.episode < resume_episode => {
                kept.push_str(line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    kept
}

fn write_pareto_csv(path: &Path, archive: &ParetoArchive) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Row<'a> {
        key: &'a str,
        accuracy: f64,
        efficiency: f64,
        stages: usize,
        throughput_fps: f64,
    }
    let mut points: Vec<_> = archive.points().iter().collect();
    points.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .expect("finite accuracy")
            .then(b.efficiency.partial_cmp(&a.efficiency).expect("finite efficiency"))
            .then_with(|| a.key().cmp(&b.key()))
    });
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| CliError::Other(e.into()))?;
    for p in points {
        let key = p.key();
        w.serialize(Row {
            key: &key,
            accuracy: p.accuracy,
            efficiency: p.efficiency,
            stages: p.plan.partition.num_stages(),
            throughput_fps: p.plan.eval.throughput_fps,
        })
        .map_err(|e| CliError::Other(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Run (or resume) the co-exploration search, producing `log.jsonl`,
/// `checkpoint.json`, and on completion `archive.json` and `pareto.csv`
/// in the output directory.
pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.search.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;

    let evaluator = build_evaluator(&cfg, &args.out)?;
    let mut engine = SearchEngine::new(
        cfg.search_space.clone(),
        cfg.build_pool(),
        cfg.perf_model,
        cfg.search.clone(),
        evaluator,
    )?;

    let log_path = args.out.join("log.jsonl");
    let ckpt_path = args.out.join("checkpoint.json");

    if ckpt_path.exists() {
        let text = std::fs::read_to_string(&ckpt_path)?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("corrupt checkpoint: {e}")))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "checkpoint schema_version {} is not supported",
                file.schema_version
            )));
        }
        if file.config != cfg {
            return Err(CliError::Config(
                "checkpoint was written for a different configuration; \
                 use a fresh output directory"
                    .into(),
            ));
        }
        engine.restore_state(&file.to_state()?)?;
        let existing = std::fs::read_to_string(&log_path).unwrap_or_default();
        std::fs::write(&log_path, truncate_log(&existing, engine.episode()))?;
        log::info!("resumed from checkpoint at episode {}", engine.episode());
    }

    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let target = cfg.search.episodes;
    let stop = args.stop_after.map_or(target, |k| k.min(target));
    while engine.episode() < stop {
        let report: EpisodeReport = engine.run_episode()?;
        let line = serde_json::to_string(&report).expect("report serializes");
        writeln!(log_file, "{line}")?;
        log_file.flush()?;
        log::info!(
            "episode {}/{target}: archive holds {} designs",
            report.episode + 1,
            report.archive_len
        );
        if cfg.checkpoint_every > 0 && engine.episode() % cfg.checkpoint_every == 0 {
            write_checkpoint(&ckpt_path, &cfg, &engine.state())?;
        }
    }
    write_checkpoint(&ckpt_path, &cfg, &engine.state())?;

    if engine.episode() >= target {
        let archive = engine.archive();
        let mut text = serde_json::to_string_pretty(archive).expect("archive serializes");
        text.push('\n');
        write_atomically(&args.out.join("archive.json"), text.as_bytes())?;
        write_pareto_csv(&args.out.join("pareto.csv"), archive)?;
        if let (Some(sw), Some(hw)) = (archive.opt_sw(), archive.opt_hw()) {
            log::info!(
                "best accuracy {:.4} at efficiency {:.4}; best efficiency {:.4} at accuracy {:.4}",
                sw.accuracy,
                sw.efficiency,
                hw.efficiency,
                hw.accuracy
            );
        }
        log::info!(
            "finished {target} episodes: {} non-dominated designs, hypervolume {:.6}",
            archive.len(),
            archive.hypervolume()
        );
    } else {
        log::info!("stopped after episode {} (checkpoint written)", engine.episode());
    }
    Ok(())
}

/// Estimate, per throughput target, the fraction of uniformly sampled
/// networks that admit any feasible pipeline. Writes `validity.csv`.
pub fn cmd_analyze_validity(args: &ValidityArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.search.seed = seed;
    }
    cfg.validate()?;
    if args.fps_list.is_empty() {
        return Err(CliError::Config("fps list is empty".into()));
    }
    if args.fps_list.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(CliError::Config("fps values must be positive and finite".into()));
    }
    if args.samples == 0 {
        return Err(CliError::Config("samples must be positive".into()));
    }
    std::fs::create_dir_all(&args.out)?;

    let pool = cfg.build_pool();
    let model = RooflineModel::new(cfg.perf_model);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.search.seed);
    let nets: Vec<ChildNetwork> = (0..args.samples)
        .map(|_| cfg.search_space.sample_uniform(&mut rng))
        .collect();

    let mut fps_list = args.fps_list.clone();
    fps_list.sort_by(|a, b| a.partial_cmp(b).expect("finite fps"));
    fps_list.dedup();

    #[derive(Serialize)]
    struct Row {
        ts_fps: f64,
        samples: usize,
        feasible: usize,
        validity: f64,
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(args.out.join("validity.csv"))
        .map_err(|e| CliError::Other(e.into()))?;
    for &fps in &fps_list {
        let mut feasible = 0usize;
        for net in &nets {
            match optimize(net, &pool, fps, &model) {
                Ok(_) => feasible += 1,
                Err(OptimizeError::NoFeasiblePlan) => {}
                Err(e) => return Err(CliError::Other(e.into())),
            }
        }
        let validity = feasible as f64 / args.samples as f64;
        log::info!(
            "target {fps} fps: {feasible}/{} sampled networks feasible ({:.2}%)",
            args.samples,
            100.0 * validity
        );
        w.serialize(Row {
            ts_fps: fps,
            samples: args.samples,
            feasible,
            validity,
        })
        .map_err(|e| CliError::Other(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Maximum number of networks `analyze-size-eff` will enumerate.
pub const SIZE_EFF_LIMIT: u128 = 100_000;

/// Enumerate the whole space and relate parameter count to the best
/// achievable pipeline efficiency. Writes `size_eff.csv` sorted by
/// network key.
pub fn cmd_analyze_size_eff(args: &SizeEffArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;

    let space = &cfg.search_space;
    let per_layer = space.per_layer_size();
    let total: u128 = (space.depth.min..=space.depth.max)
        .map(|d| per_layer.checked_pow(d as u32).unwrap_or(u128::MAX))
        .fold(0u128, |acc, s| acc.saturating_add(s));
    if total > SIZE_EFF_LIMIT {
        return Err(CliError::Config(format!(
            "space holds {total} networks, beyond the exhaustive limit {SIZE_EFF_LIMIT}"
        )));
    }

    let pool = cfg.build_pool();
    let model = RooflineModel::new(cfg.perf_model);

    #[derive(Serialize)]
    struct Row {
        key: String,
        params: u64,
        macs: u64,
        feasible: bool,
        efficiency: Option<f64>,
    }
    let mut rows = Vec::new();
    for depth in space.depth.min..=space.depth.max {
        for net in space.enumerate_depth(depth) {
            let macs = net.count_macs().map_err(|e| CliError::Config(e.to_string()))?;
            let (feasible, efficiency) = match optimize(&net, &pool, cfg.search.ts_fps, &model) {
                Ok(plan) => (true, Some(plan.eval.avg_utilization)),
                Err(OptimizeError::NoFeasiblePlan) => (false, None),
                Err(e) => return Err(CliError::Other(e.into())),
            };
            rows.push(Row {
                key: net.canonical_key(),
                params: net.count_params(),
                macs,
                feasible,
                efficiency,
            });
        }
    }
    rows.sort_by(|a, b| a.key.cmp(&b.key));

    let feasible = rows.iter().filter(|r| r.feasible).count();
    log::info!(
        "enumerated {} networks at {} fps: {feasible} feasible",
        rows.len(),
        cfg.search.ts_fps
    );
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(args.out.join("size_eff.csv"))
        .map_err(|e| CliError::Other(e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Other(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Environment variable that injects an artificial defect into the
/// verification harness, proving that it detects optimizer deviations.
pub const VERIFY_PERTURB_ENV: &str = "COEX_VERIFY_PERTURB";

/// Cross-check the production optimizer against the exhaustive reference
/// on random instances. Exits nonzero on any disagreement.
pub fn cmd_verify_partitioner(args: &VerifyArgs) -> Result<(), CliError> {
    if args.trials == 0 {
        return Err(CliError::Config("trials must be positive".into()));
    }
    let perturb = std::env::var(VERIFY_PERTURB_ENV)
        .map(|v| !v.is_empty() && v != "0")
        .unwrap_or(false);
    if perturb {
        log::warn!("{VERIFY_PERTURB_ENV} is set: injecting an artificial optimizer defect");
    }

    let device = |name: &str, dsp: u64| FpgaSpec {
        name: name.to_string(),
        logic_cells: 74_000,
        onchip_memory_bits: 4_900_000,
        dsp_slices: dsp,
        clock_hz: 1.0e8,
        link_bytes_per_sec: 2.1e9,
        macs_per_dsp_per_cycle: 1,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut feasible = 0usize;
    let mut infeasible = 0usize;
    for case in 0..args.trials {
        let depth = rng.random_range(1..=8);
        let n_models = rng.random_range(1..=2);
        let mut entries = Vec::new();
        let mut remaining = 4u32;
        for (i, name) in ["alpha", "bravo"].iter().enumerate().take(n_models) {
            let max = remaining - (n_models as u32 - 1 - i as u32);
            let count = rng.random_range(1..=max.min(3));
            remaining -= count;
            entries.push(PoolEntry {
                spec: device(name, 100 + 50 * i as u64),
                count,
            });
        }
        let pool = FpgaPool::new(entries);
        let mut table = LatencyTable::default();
        for l in 0..depth {
            for e in &pool.devices {
                table.set(l, &e.spec.name, rng.random_range(0.001..0.010));
            }
        }
        let ts = *[50.0, 100.0, 200.0, 400.0].choose(&mut rng).unwrap();
        let net = ChildNetwork::new(
            TensorShape::new(32, 32, 3),
            (0..depth).map(|_| LayerSpec::conv(8, 3, 1)).collect(),
        );

        let fast = optimize(&net, &pool, ts, &table);
        let slow = brute_force_optimize(&net, &pool, ts, &table);
        match (fast, slow) {
            (Ok(mut a), Ok(b)) => {
                feasible += 1;
                if perturb {
                    a.eval.avg_utilization += 1e-9;
                }
                if a != b {
                    return Err(CliError::Other(anyhow::anyhow!(
                        "case {case}: optimizer disagrees with the exhaustive reference\n\
                         optimizer: {a:?}\nreference: {b:?}"
                    )));
                }
            }
            (Err(OptimizeError::NoFeasiblePlan), Err(OptimizeError::NoFeasiblePlan)) => {
                infeasible += 1;
            }
            (a, b) => {
                return Err(CliError::Other(anyhow::anyhow!(
                    "case {case}: feasibility verdicts diverge: {a:?} versus {b:?}"
                )));
            }
        }
    }
    println!(
        "verified {} random instances ({feasible} feasible, {infeasible} infeasible): \
         optimizer matches the exhaustive reference exactly",
        args.trials
    );
    Ok(())
}
