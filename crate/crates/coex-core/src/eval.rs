//! Accuracy evaluation: a fast analytic surrogate, an optional external
//! evaluator process speaking a JSON-lines protocol, and a persistent
//! keyed cache so no network is ever scored twice.

use crate::model::ChildNetwork;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

/// Errors raised while producing an accuracy estimate.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluator unavailable: {0}")]
    EvaluatorUnavailable(String),
    #[error("accuracy not cached for {0}")]
    CacheMiss(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("evaluator timed out after {0:.0} seconds")]
    Timeout(f64),
    #[error("cache io: {0}")]
    CacheIo(#[from] std::io::Error),
}

/// Parameters of the analytic accuracy surrogate. Accuracy saturates in
/// the parameter count and is discounted linearly beyond a depth knee:
/// `a_max * (1 - exp(-params/p0)) * max(0, 1 - depth_penalty * max(0, depth - knee))`,
/// plus optional Gaussian noise, clipped to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateParams {
    pub a_max: f64,
    pub p0: f64,
    pub depth_penalty: f64,
    pub depth_knee: u32,
    pub noise_std: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            a_max: 0.9,
            p0: 3e5,
            depth_penalty: 0.004,
            depth_knee: 12,
            noise_std: 0.0,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.a_max > 0.0 && self.a_max <= 1.0) {
            return Err(format!("a_max {} must be in (0, 1]", self.a_max));
        }
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return Err(format!("p0 {} must be positive and finite", self.p0));
        }
        if !(self.depth_penalty >= 0.0 && self.depth_penalty.is_finite()) {
            return Err(format!("depth_penalty {} must be nonnegative", self.depth_penalty));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(format!("noise_std {} must be nonnegative", self.noise_std));
        }
        Ok(())
    }
}

/// Noise-free surrogate value from a parameter count and depth.
pub fn surrogate_from_counts(param_count: u64, depth: usize, p: &SurrogateParams) -> f64 {
    let capacity = 1.0 - (-(param_count as f64) / p.p0).exp();
    let over = (depth as f64 - p.depth_knee as f64).max(0.0);
    let depth_factor = (1.0 - p.depth_penalty * over).max(0.0);
    (p.a_max * capacity * depth_factor).clamp(0.0, 1.0)
}

/// Surrogate accuracy of a network. Draws from `rng` only when
/// `noise_std` is positive, so noise-free configurations leave the
/// caller's stream untouched.
pub fn surrogate_accuracy<R: Rng>(net: &ChildNetwork, p: &SurrogateParams, rng: &mut R) -> f64 {
    let base = surrogate_from_counts(net.count_params(), net.depth(), p);
    if p.noise_std > 0.0 {
        let noise = Normal::new(0.0, p.noise_std).expect("valid noise std").sample(rng);
        (base + noise).clamp(0.0, 1.0)
    } else {
        base
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    accuracy: f64,
}

/// Append-only JSONL accuracy cache keyed by canonical network keys.
/// Reloading replays the log in order, so the last entry for a key wins.
#[derive(Debug)]
pub struct AccuracyCache {
    map: HashMap<String, f64>,
    file: Option<(PathBuf, File)>,
}

impl AccuracyCache {
    /// Cache with no backing file.
    pub fn in_memory() -> Self {
        Self {
            map: HashMap::new(),
            file: None,
        }
    }

    /// Open (or create) a file-backed cache and replay its entries.
    pub fn open(path: &Path) -> Result<Self, EvalError> {
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line).map_err(|e| {
                    EvalError::Protocol(format!("cache line {}: {e}", n + 1))
                })?;
                map.insert(entry.key, entry.accuracy);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            map,
            file: Some((path.to_path_buf(), file)),
        })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.map.get(key).copied()
    }

    /// Record `accuracy` for `key`, appending to the backing file when
    /// one is attached.
    pub fn put(&mut self, key: &str, accuracy: f64) -> Result<(), EvalError> {
        self.map.insert(key.to_string(), accuracy);
        if let Some((_, file)) = &mut self.file {
            let line = serde_json::to_string(&CacheLine {
                key: key.to_string(),
                accuracy,
            })
            .expect("cache line serializes");
            writeln!(file, "{line}")?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// JSON-lines request sent to an external evaluator. Layers are
/// `[filters, kernel, stride, expansion]` in network order.
#[derive(Serialize, Deserialize)]
struct EvalRequest {
    id: u64,
    input: [u32; 3],
    layers: Vec<[u32; 4]>,
}

#[derive(Serialize, Deserialize)]
struct EvalResponse {
    id: u64,
    accuracy: f64,
}

/// Serialize one evaluation request line (no trailing newline).
pub fn format_request(id: u64, net: &ChildNetwork) -> String {
    let req = EvalRequest {
        id,
        input: [net.input.height, net.input.width, net.input.channels],
        layers: net
            .layers
            .iter()
            .map(|l| [l.filters, l.kernel, l.stride, l.expansion])
            .collect(),
    };
    serde_json::to_string(&req).expect("request serializes")
}

/// Parse one response line, checking the id echo and the accuracy range.
pub fn parse_response(line: &str, expect_id: u64) -> Result<f64, EvalError> {
    let resp: EvalResponse = serde_json::from_str(line)
        .map_err(|e| EvalError::Protocol(format!("bad response line: {e}")))?;
    if resp.id != expect_id {
        return Err(EvalError::Protocol(format!(
            "response id {} does not match request id {expect_id}",
            resp.id
        )));
    }
    if !(resp.accuracy >= 0.0 && resp.accuracy <= 1.0) {
        return Err(EvalError::Protocol(format!(
            "accuracy {} outside [0, 1]",
            resp.accuracy
        )));
    }
    Ok(resp.accuracy)
}

/// Evaluator child processes get a day per network before we give up.
pub const DEFAULT_EVAL_TIMEOUT: Duration = Duration::from_secs(86_400);

/// Handle to a spawned evaluator process. Requests are written to its
/// stdin one JSON line at a time; a reader thread forwards stdout lines
/// so responses can be awaited with a timeout. At most one request is in
/// flight. Dropping the handle kills the child.
pub struct ExternalEvaluator {
    child: Child,
    stdin: std::process::ChildStdin,
    lines: mpsc::Receiver<std::io::Result<String>>,
    timeout: Duration,
    next_id: u64,
}

impl std::fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEvaluator")
            .field("pid", &self.child.id())
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ExternalEvaluator {
    /// Spawn `command args...` with piped stdio.
    pub fn spawn(command: &str, args: &[String], timeout: Duration) -> Result<Self, EvalError> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EvalError::EvaluatorUnavailable(format!("spawn {command}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            timeout,
            next_id: 0,
        })
    }

    /// Send one network and await its accuracy.
    pub fn evaluate(&mut self, net: &ChildNetwork) -> Result<f64, EvalError> {
        self.next_id += 1;
        let id = self.next_id;
        let line = format_request(id, net);
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| EvalError::EvaluatorUnavailable(format!("write request: {e}")))?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(response)) => parse_response(&response, id),
            Ok(Err(e)) => Err(EvalError::EvaluatorUnavailable(format!("read response: {e}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                Err(EvalError::Timeout(self.timeout.as_secs_f64()))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(EvalError::EvaluatorUnavailable(
                "evaluator closed its output".into(),
            )),
        }
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Where accuracies come from when the cache misses.
#[derive(Debug)]
pub enum AccuracySource {
    Surrogate(SurrogateParams),
    External(ExternalEvaluator),
    /// Every network must already be cached.
    CacheOnly,
}

/// Cache-fronted accuracy evaluation.
#[derive(Debug)]
pub struct AccuracyEvaluator {
    source: AccuracySource,
    cache: AccuracyCache,
}

impl AccuracyEvaluator {
    pub fn new(source: AccuracySource, cache: AccuracyCache) -> Self {
        Self { source, cache }
    }

    pub fn cache(&self) -> &AccuracyCache {
        &self.cache
    }

    /// Accuracy of `net`, from the cache when present. Cache hits never
    /// touch `rng`; surrogate noise (when configured) is drawn from it.
    pub fn accuracy<R: Rng>(&mut self, net: &ChildNetwork, rng: &mut R) -> Result<f64, EvalError> {
        let key = net.canonical_key();
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let value = match &mut self.source {
            AccuracySource::Surrogate(p) => surrogate_accuracy(net, p, rng),
            AccuracySource::External(ev) => ev.evaluate(net)?,
            AccuracySource::CacheOnly => return Err(EvalError::CacheMiss(key)),
        };
        self.cache.put(&key, value)?;
        Ok(value)
    }
}
