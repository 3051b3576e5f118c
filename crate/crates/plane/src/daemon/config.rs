//! Daemon configuration file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use liquid_core::engine::{ForkCostMode, PidSpaceParams};
use liquid_core::workload::WorkloadSpec;
use liquid_core::FaultPolicy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIR_ENV: &str = "LIQUIDD_STATE_DIR";
pub const ADDR_FILE: &str = "liquidd.addr";
pub const LOG_FILE: &str = "liquidd.log";
pub const IPC_FILE: &str = "liquidd.ipc";

/// Simulated container startup cost: `base + per_port * exposed_ports`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartupDelayModel {
    #[serde(default = "default_base")]
    pub base_seconds: f64,
    #[serde(default = "default_per_port")]
    pub per_port_seconds: f64,
}

fn default_base() -> f64 {
    0.5
}

fn default_per_port() -> f64 {
    0.05
}

impl Default for StartupDelayModel {
    fn default() -> Self {
        StartupDelayModel {
            base_seconds: default_base(),
            per_port_seconds: default_per_port(),
        }
    }
}

impl StartupDelayModel {
    pub fn delay(&self, ports: u32) -> Duration {
        Duration::from_secs_f64(self.base_seconds + self.per_port_seconds * f64::from(ports))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaemonConfig {
    pub state_dir: PathBuf,
    #[serde(default = "default_listen")]
    pub listen_address: String,
    /// Defaults to `<state_dir>/liquidd.ipc`.
    #[serde(default)]
    pub ipc_socket_path: Option<PathBuf>,
    pub shared_dir: PathBuf,
    #[serde(default)]
    pub startup_delay_model: StartupDelayModel,
    /// Ports the simulated container exposes; drives the startup delay.
    #[serde(default)]
    pub exposed_ports: u32,
    #[serde(default)]
    pub fault_policy: FaultPolicy,
    #[serde(default)]
    pub pid_space: PidSpaceParams,
    #[serde(default = "default_fork_cost_ms")]
    pub fork_cost_ms: f64,
    #[serde(default)]
    pub fork_cost_mode: ForkCostMode,
    /// Commands run in order after every completed checkpoint.
    #[serde(default)]
    pub post_checkpoint_hooks: Vec<Vec<String>>,
    /// How long a restore waits for the bundle marker; absent waits forever.
    #[serde(default)]
    pub restore_await_timeout_ms: Option<u64>,
    #[serde(default = "default_correlation_ms")]
    pub correlation_timeout_ms: u64,
    /// Workload used when neither the request nor the start option names one.
    #[serde(default)]
    pub workload: Option<WorkloadSpec>,
    /// Enables `POST /fault` and `POST /debug/*` for fault injection.
    #[serde(default)]
    pub debug_api: bool,
    /// Bound on automatic restarts that fail back to back.
    #[serde(default = "default_restart_limit")]
    pub consecutive_failure_limit: u32,
}

fn default_listen() -> String {
    "127.0.0.1:0".into()
}

fn default_fork_cost_ms() -> f64 {
    1.0
}

fn default_correlation_ms() -> u64 {
    60_000
}

fn default_restart_limit() -> u32 {
    5
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl DaemonConfig {
    pub fn new(state_dir: impl Into<PathBuf>, shared_dir: impl Into<PathBuf>) -> Self {
        DaemonConfig {
            state_dir: state_dir.into(),
            listen_address: default_listen(),
            ipc_socket_path: None,
            shared_dir: shared_dir.into(),
            startup_delay_model: StartupDelayModel::default(),
            exposed_ports: 0,
            fault_policy: FaultPolicy::default(),
            pid_space: PidSpaceParams::default(),
            fork_cost_ms: default_fork_cost_ms(),
            fork_cost_mode: ForkCostMode::default(),
            post_checkpoint_hooks: Vec::new(),
            restore_await_timeout_ms: None,
            correlation_timeout_ms: default_correlation_ms(),
            workload: None,
            debug_api: false,
            consecutive_failure_limit: default_restart_limit(),
        }
    }

    /// Load from a file, then apply the state directory override.
    pub fn load(path: &Path, state_dir_override: Option<PathBuf>) -> Result<Self, ConfigError> {
        let raw = std::fs::read(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: DaemonConfig =
            serde_json::from_slice(&raw).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        if let Some(dir) = state_dir_override {
            cfg.state_dir = dir;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.startup_delay_model;
        if !(m.base_seconds >= 0.0 && m.per_port_seconds >= 0.0) {
            return Err(ConfigError::Invalid(
                "startup delay parameters must be non-negative".into(),
            ));
        }
        if !(self.fork_cost_ms >= 0.0 && self.fork_cost_ms.is_finite()) {
            return Err(ConfigError::Invalid("fork_cost_ms must be non-negative".into()));
        }
        self.fault_policy.validate().map_err(ConfigError::Invalid)?;
        if let Some(w) = &self.workload {
            w.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn ipc_path(&self) -> PathBuf {
        self.ipc_socket_path
            .clone()
            .unwrap_or_else(|| self.state_dir.join(IPC_FILE))
    }

    pub fn startup_delay(&self) -> Duration {
        self.startup_delay_model.delay(self.exposed_ports)
    }

    pub fn fork_cost(&self) -> Duration {
        Duration::from_secs_f64(self.fork_cost_ms / 1000.0)
    }

    pub fn restore_await_timeout(&self) -> Option<Duration> {
        self.restore_await_timeout_ms.map(Duration::from_millis)
    }

    pub fn correlation_timeout(&self) -> Duration {
        Duration::from_millis(self.correlation_timeout_ms)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}
