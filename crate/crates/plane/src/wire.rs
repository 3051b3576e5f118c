//! Request and response bodies of the control API and the IPC channel.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use liquid_core::lifecycle::ExitPhase;
use liquid_core::workload::WorkloadSpec;
use liquid_core::{ExitReport, ServiceState, StartOptionConfig, StartupMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    /// Absent: follow the persisted start option (standby counts as a fresh start).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<StartupMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub app_command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_location: Option<PathBuf>,
    /// Overrides the daemon's restore await timeout for this request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub await_timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRequest {
    /// Bundle destination; relative paths resolve under the shared directory.
    pub image_dir: PathBuf,
    #[serde(default)]
    pub leave_running: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRequest {
    pub exit_code: u8,
}

/// Body of every `/run` and `/checkpoint` response, success or failure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpResponse {
    #[serde(default)]
    pub op_id: String,
    /// `running`, `standby`, `checkpointed`, `failed` or `rejected`.
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_state: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<StartupMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    /// When the operation measured its own completion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<DateTime<Utc>>,
    /// Internally measured operation duration.
    #[serde(default)]
    pub duration_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    /// Whether the service kept running after a failed checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_continues: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_report: Option<ExitReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_config: Option<StartOptionConfig>,

    // Run specifics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vpids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial_counters: Vec<(u32, u64)>,
    #[serde(default)]
    pub fork_iterations: u64,
    #[serde(default)]
    pub direct_writes: u64,
    #[serde(default)]
    pub simulated_fork_seconds: f64,
    /// Fork time added to the restore cost without being slept.
    #[serde(default)]
    pub accounted_fork_seconds: f64,

    // Checkpoint specifics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_location: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_duration_seconds: f64,
    #[serde(default)]
    pub hooks_duration_seconds: f64,
    #[serde(default)]
    pub fault_decision_seconds: f64,
    #[serde(default)]
    pub fault_log_lines: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counters: Vec<(u32, u64)>,
}

impl OpResponse {
    pub fn rejected(kind: &str, detail: impl Into<String>) -> Self {
        OpResponse {
            outcome: "rejected".into(),
            error: Some(detail.into()),
            error_kind: Some(kind.into()),
            ..OpResponse::default()
        }
    }
}

/// Daemon-side record of the most recent restore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationSummary {
    pub bundle_location: PathBuf,
    pub restore_seconds: f64,
    /// From the bundle's creation to the restored service running.
    pub migration_seconds: f64,
    pub fork_iterations: u64,
    pub direct_writes: u64,
    pub completed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterView {
    /// Counters each process reported when it came up.
    pub initial: BTreeMap<u32, u64>,
    /// First counter each process logged.
    pub first_logged: BTreeMap<u32, u64>,
    pub last_logged: BTreeMap<u32, u64>,
    pub discontinuities: u64,
    pub log_lines: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaemonStatus {
    pub service_state: ServiceState,
    pub phase: ExitPhase,
    pub current_config: StartOptionConfig,
    pub daemon_start_time: DateTime<Utc>,
    pub daemon_pid: u32,
    pub service_restart_count: u64,
    #[serde(default)]
    pub service_pid: Option<u32>,
    #[serde(default)]
    pub service_vpids: Vec<u32>,
    #[serde(default)]
    pub last_migration: Option<MigrationSummary>,
    #[serde(default)]
    pub latest_bundle: Option<PathBuf>,
    #[serde(default)]
    pub counters: Option<CounterView>,
    #[serde(default)]
    pub op_in_flight: Option<String>,
    pub state_dir: PathBuf,
    pub shared_dir: PathBuf,
    #[serde(default)]
    pub config_path: Option<PathBuf>,
    pub exits_observed: u64,
}

impl DaemonStatus {
    pub fn state_name(&self) -> &'static str {
        self.service_state.name()
    }
}

/// One line on the IPC socket, written once per finished operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub op_id: String,
    pub outcome: String,
    pub duration_seconds: f64,
}
