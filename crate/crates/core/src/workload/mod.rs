//! A memhog-like toy workload that checkpoints cooperatively.
//!
//! Each workload is a tree of real OS processes: one root and
//! `process_count - 1` children. Every process fills its share of the memory
//! footprint from a recorded seed and prints a counter once per tick. The
//! supervisor drives it over a local stream socket (see [`protocol`]).

mod handle;
pub mod protocol;
pub mod runtime;

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use handle::{
    spawn_workload, workload_resume, workload_snapshot, ExitCallback, LogBook, LogSink, SpawnCallback,
    SpawnOptions, WorkloadHandle,
};

/// Name of the executable token at the head of a workload command line.
pub const WORKLOAD_COMMAND: &str = "memhog";
/// File written by the root process next to the per-process state files.
pub const TREE_FILE: &str = "workload.tree";
/// Directory holding `<vpid>.snap` files.
pub const STATE_DIR: &str = "state";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub process_count: u32,
    #[serde(default)]
    pub memory_footprint_bytes: u64,
    #[serde(default = "default_tick_ms")]
    pub tick_interval_ms: u64,
    #[serde(default)]
    pub exposed_ports: u32,
    #[serde(default = "default_label")]
    pub label: String,
    /// Simulated time each process spends serializing or deserializing.
    #[serde(default)]
    pub state_io_latency_ms: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_tick_ms() -> u64 {
    1000
}

fn default_label() -> String {
    "memhog".to_string()
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            process_count: 1,
            memory_footprint_bytes: 0,
            tick_interval_ms: default_tick_ms(),
            exposed_ports: 0,
            label: default_label(),
            state_io_latency_ms: 0,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.process_count == 0 {
            return Err(WorkloadError::InvalidSpec("process_count must be >= 1".into()));
        }
        if self.tick_interval_ms == 0 {
            return Err(WorkloadError::InvalidSpec("tick_interval must be > 0".into()));
        }
        Ok(())
    }

    pub fn tick_interval(&self) -> Duration {
        Duration::from_millis(self.tick_interval_ms)
    }

    /// Bytes of memory filled by each process.
    pub fn per_process_bytes(&self) -> u64 {
        self.memory_footprint_bytes / u64::from(self.process_count.max(1))
    }

    /// Seed of the process at `index` in tree order.
    pub fn process_seed(&self, index: u32) -> u64 {
        // splitmix64 step so neighbouring indices get unrelated streams
        let mut z = self
            .seed
            .wrapping_add(u64::from(index).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Command-line form stored as `app_command` in the Start Option Config.
    pub fn to_command(&self) -> Vec<String> {
        vec![
            WORKLOAD_COMMAND.to_string(),
            "--processes".into(),
            self.process_count.to_string(),
            "--footprint".into(),
            self.memory_footprint_bytes.to_string(),
            "--tick-ms".into(),
            self.tick_interval_ms.to_string(),
            "--ports".into(),
            self.exposed_ports.to_string(),
            "--label".into(),
            self.label.clone(),
            "--io-latency-ms".into(),
            self.state_io_latency_ms.to_string(),
            "--seed".into(),
            self.seed.to_string(),
        ]
    }

    pub fn from_command(argv: &[String]) -> Result<Self, WorkloadError> {
        let bad = |m: String| WorkloadError::InvalidSpec(m);
        let mut it = argv.iter();
        match it.next() {
            Some(cmd) if cmd == WORKLOAD_COMMAND => {}
            other => return Err(bad(format!("unsupported app command {other:?}"))),
        }
        let mut spec = WorkloadSpec::default();
        while let Some(flag) = it.next() {
            let value = it
                .next()
                .ok_or_else(|| bad(format!("flag {flag} needs a value")))?;
            let num = |v: &String| {
                v.parse::<u64>()
                    .map_err(|_| bad(format!("flag {flag}: `{v}` is not a number")))
            };
            match flag.as_str() {
                "--processes" => spec.process_count = num(value)? as u32,
                "--footprint" => spec.memory_footprint_bytes = num(value)?,
                "--tick-ms" => spec.tick_interval_ms = num(value)?,
                "--ports" => spec.exposed_ports = num(value)? as u32,
                "--label" => spec.label = value.clone(),
                "--io-latency-ms" => spec.state_io_latency_ms = num(value)?,
                "--seed" => spec.seed = num(value)?,
                other => return Err(bad(format!("unknown flag {other}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Serialized state of one process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessState {
    pub vpid: u32,
    pub index: u32,
    pub counter: u64,
    pub seed: u64,
    pub buffer_len: u64,
    pub digest: String,
}

/// Serialized state of a whole workload tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadState {
    pub spec: WorkloadSpec,
    /// In tree order; the root is first.
    pub processes: Vec<ProcessState>,
    /// Parent/child virtual-PID edges.
    pub edges: Vec<(u32, u32)>,
}

impl WorkloadState {
    pub fn root_vpid(&self) -> u32 {
        self.processes[0].vpid
    }

    pub fn vpids(&self) -> Vec<u32> {
        self.processes.iter().map(|p| p.vpid).collect()
    }

    pub fn counters(&self) -> Vec<(u32, u64)> {
        self.processes.iter().map(|p| (p.vpid, p.counter)).collect()
    }

    /// Files a snapshot of this state consists of, relative to its directory.
    pub fn relative_files(&self) -> Vec<PathBuf> {
        let mut files = vec![PathBuf::from(TREE_FILE)];
        files.extend(self.processes.iter().map(|p| snap_relative(p.vpid)));
        files
    }

    /// Load the state recorded in a snapshot directory.
    pub fn load(dir: &Path) -> Result<Self, WorkloadError> {
        let corrupt = |m: String| WorkloadError::CorruptSnapshot(m);
        let tree = std::fs::read(dir.join(TREE_FILE))
            .map_err(|e| corrupt(format!("{}: {e}", TREE_FILE)))?;
        let state: WorkloadState =
            serde_json::from_slice(&tree).map_err(|e| corrupt(format!("{TREE_FILE}: {e}")))?;
        if state.processes.len() != state.spec.process_count as usize {
            return Err(corrupt("process count does not match spec".into()));
        }
        for p in &state.processes {
            let path = dir.join(snap_relative(p.vpid));
            let bytes =
                std::fs::read(&path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
            let on_disk: ProcessState = serde_json::from_slice(&bytes)
                .map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
            if &on_disk != p {
                return Err(corrupt(format!(
                    "state file for pid {} disagrees with tree",
                    p.vpid
                )));
            }
        }
        Ok(state)
    }
}

pub fn snap_relative(vpid: u32) -> PathBuf {
    Path::new(STATE_DIR).join(format!("{vpid}.snap"))
}

/// Program (plus leading arguments) that runs a workload process when invoked
/// with `--role ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Launcher {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Launcher {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Launcher {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn with_args(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Launcher {
            program: program.into(),
            args,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("spawn failure: {0}")]
    SpawnFailure(String),
    #[error("snapshot refused: {0}")]
    SnapshotRefused(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("pid unavailable: {0}")]
    PidUnavailable(String),
    #[error("workload is not running")]
    NotRunning,
    #[error("workload protocol error: {0}")]
    Protocol(String),
}
