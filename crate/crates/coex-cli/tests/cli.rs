//! End-to-end tests of the `coex` binary: exit codes, artifact
//! determinism, checkpoint/resume fidelity, the analysis commands, and
//! the external evaluator protocol (driven through the stub evaluator).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coex() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coex"));
    c.env("COEX_LOG_LEVEL", "warn");
    c
}

fn stub_path() -> &'static str {
    env!("CARGO_BIN_EXE_coex-stub-evaluator")
}

fn base_config(extra: &str) -> String {
    format!(
        r#"
schema_version = 1

[search_space]
kind = "conv_chain"
depth = {{ min = 2, max = 2 }}
filter_choices = [8, 16]
kernel_choices = [3, 5]
stride_mode = "fixed1"

[search_space.input]
height = 16
width = 16
channels = 3

[[pool.devices]]
name = "dev"
logic_cells = 74000
onchip_memory_bits = 4900000
dsp_slices = 100
clock_hz = 1.0e8
link_bytes_per_sec = 1.0e15
count = 2

[search]
ts_fps = 9000.0
episodes = 3
children_per_episode = 2
fe_trials = 2
lr = 0.05
hidden_size = 8
seed = 11

{extra}
"#
    )
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn run_produces_identical_artifacts_for_identical_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(""));
    for sub in ["a", "b"] {
        let out = coex()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert_success(&out);
    }
    for name in ["log.jsonl", "archive.json", "pareto.csv", "checkpoint.json"] {
        assert_eq!(
            read(&dir.path().join("a").join(name)),
            read(&dir.path().join("b").join(name)),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn seed_override_changes_the_search_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(""));
    for (sub, seed) in [("a", "11"), ("b", "12")] {
        let out = coex()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--out"])
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert_success(&out);
    }
    assert_ne!(
        read(&dir.path().join("a/log.jsonl")),
        read(&dir.path().join("b/log.jsonl")),
        "different seeds produced identical traces"
    );
}

#[test]
fn config_problems_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = coex()
        .args(["run", "--config"])
        .arg(dir.path().join("nope.toml"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let cases = [
        ("malformed", "this is not toml [".to_string()),
        ("unknown-key", format!("{}\nwarp = 1\n", base_config(""))),
        (
            "bad-schema",
            base_config("").replace("schema_version = 1", "schema_version = 99"),
        ),
        (
            "bad-beta",
            base_config("").replace("lr = 0.05", "lr = 0.05\nbeta = 7.0"),
        ),
    ];
    for (name, text) in cases {
        let path = dir.path().join(format!("{name}.toml"));
        std::fs::write(&path, text).unwrap();
        let out = coex()
            .args(["run", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(dir.path().join("out"))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "{name} did not exit 2");
    }
}

#[test]
fn interrupted_run_resumes_to_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &base_config("").replace("schema_version = 1", "schema_version = 1\ncheckpoint_every = 2"),
    );

    let full = coex()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("full"))
        .output()
        .unwrap();
    assert_success(&full);

    let part = coex()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--stop-after", "2", "--out"])
        .arg(dir.path().join("split"))
        .output()
        .unwrap();
    assert_success(&part);
    assert!(dir.path().join("split/checkpoint.json").exists());
    assert!(!dir.path().join("split/archive.json").exists());

    let resume = coex()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("split"))
        .output()
        .unwrap();
    assert_success(&resume);

    for name in ["log.jsonl", "archive.json", "pareto.csv"] {
        assert_eq!(
            read(&dir.path().join("full").join(name)),
            read(&dir.path().join("split").join(name)),
            "{name} differs between uninterrupted and resumed runs"
        );
    }
}

#[test]
fn resume_rejects_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(""));
    let out_dir = dir.path().join("out");
    let first = coex()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--stop-after", "1", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_success(&first);

    // Same output directory, different seed: the checkpoint must refuse.
    let clash = coex()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "99", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(clash.status.code(), Some(2));
}

#[test]
fn analyze_validity_writes_sorted_non_increasing_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(""));
    let out = coex()
        .args(["analyze-validity", "--config"])
        .arg(&cfg)
        .args(["--fps-list", "20000,500,9000", "--samples", "300", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_success(&out);

    let text = String::from_utf8(read(&dir.path().join("out/validity.csv"))).unwrap();
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        rows.push((
            fields[0].parse::<f64>().unwrap(),
            fields[3].parse::<f64>().unwrap(),
        ));
    }
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0].0 < w[1].0), "fps not sorted: {rows:?}");
    assert!(
        rows.windows(2).all(|w| w[0].1 >= w[1].1),
        "validity increased with a harder target: {rows:?}"
    );
    // At 500 fps everything fits; everything is a 2-layer toy network.
    assert_eq!(rows[0].1, 1.0);
}

#[test]
fn analyze_size_eff_enumerates_the_space() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(""));
    let out = coex()
        .args(["analyze-size-eff", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_success(&out);
    let text = String::from_utf8(read(&dir.path().join("out/size_eff.csv"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Header plus 16 networks (2 filters x 2 kernels per layer, 2 layers).
    assert_eq!(lines.len(), 1 + 16);
    assert_eq!(lines[0], "key,params,macs,feasible,efficiency");
    let keys: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted, "rows not sorted by key");
}

#[test]
fn verify_partitioner_passes_and_detects_injected_defects() {
    let ok = coex()
        .args(["verify-partitioner", "--trials", "60", "--seed", "3"])
        .output()
        .unwrap();
    assert_success(&ok);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("verified 60 random instances"), "{stdout}");

    let broken = coex()
        .args(["verify-partitioner", "--trials", "60", "--seed", "3"])
        .env("COEX_VERIFY_PERTURB", "1")
        .output()
        .unwrap();
    assert_eq!(broken.status.code(), Some(1), "injected defect not detected");
}

#[test]
fn external_evaluator_matches_the_surrogate_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let surrogate_cfg = write_config(dir.path(), &base_config(""));
    let out = coex()
        .args(["run", "--config"])
        .arg(&surrogate_cfg)
        .arg("--out")
        .arg(dir.path().join("surrogate"))
        .output()
        .unwrap();
    assert_success(&out);

    // The stub evaluator computes the same surrogate out of process.
    let external = base_config(&format!(
        "[evaluator.external]\ncommand = \"{}\"\ntimeout_secs = 30.0\n",
        stub_path()
    ));
    let external_cfg = dir.path().join("external.toml");
    std::fs::write(&external_cfg, external).unwrap();
    let out = coex()
        .args(["run", "--config"])
        .arg(&external_cfg)
        .arg("--out")
        .arg(dir.path().join("external"))
        .output()
        .unwrap();
    assert_success(&out);

    assert_eq!(
        read(&dir.path().join("surrogate/archive.json")),
        read(&dir.path().join("external/archive.json")),
        "external evaluator produced different accuracies than the surrogate"
    );
}

#[test]
fn evaluator_failures_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("missing-cmd", "command = \"definitely-not-a-binary\"".to_string()),
        ("garbage", format!("command = \"{}\"\nargs = [\"--garbage\"]", stub_path())),
        ("bad-id", format!("command = \"{}\"\nargs = [\"--bad-id\"]", stub_path())),
        (
            "out-of-range",
            format!("command = \"{}\"\nargs = [\"--out-of-range\"]", stub_path()),
        ),
        (
            "dies",
            format!("command = \"{}\"\nargs = [\"--die-after\", \"0\"]", stub_path()),
        ),
        (
            "timeout",
            format!(
                "command = \"{}\"\nargs = [\"--delay-ms\", \"5000\"]\ntimeout_secs = 0.3",
                stub_path()
            ),
        ),
    ];
    for (name, evaluator) in cases {
        let text = base_config(&format!("[evaluator.external]\n{evaluator}\n"));
        let path = dir.path().join(format!("{name}.toml"));
        std::fs::write(&path, text).unwrap();
        let out = coex()
            .args(["run", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(3),
            "{name}: expected exit 3, got {:?}\n{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn cache_only_mode_replays_a_previous_run_without_an_evaluator() {
    let dir = tempfile::tempdir().unwrap();
    // First run records accuracies into a cache file.
    let caching = base_config("[evaluator.surrogate]\ncache_path = \"acc.jsonl\"\n");
    let caching_cfg = dir.path().join("caching.toml");
    std::fs::write(&caching_cfg, &caching).unwrap();
    let out_dir = dir.path().join("out");
    let first = coex()
        .args(["run", "--config"])
        .arg(&caching_cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_success(&first);
    assert!(out_dir.join("acc.jsonl").exists());

    // Cache-only replay in a fresh directory, reusing the cache file.
    let cache_abs = out_dir.join("acc.jsonl");
    let replay = base_config(&format!(
        "[evaluator.cache_only]\ncache_path = \"{}\"\n",
        cache_abs.display()
    ));
    let replay_cfg = dir.path().join("replay.toml");
    std::fs::write(&replay_cfg, replay).unwrap();
    let second = coex()
        .args(["run", "--config"])
        .arg(&replay_cfg)
        .arg("--out")
        .arg(dir.path().join("replay"))
        .output()
        .unwrap();
    assert_success(&second);
    assert_eq!(
        read(&out_dir.join("archive.json")),
        read(&dir.path().join("replay/archive.json"))
    );
}
