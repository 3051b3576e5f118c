//! Wire formats spoken by workload processes: control commands from the
//! supervisor, the tick log stream, and the root/child pipe protocol.

use serde::{Deserialize, Serialize};

use super::{ProcessState, WorkloadState};

/// Commands sent by the supervisor over the control socket, one JSON per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum ControlCommand {
    /// Serialize every process into `out_dir` and pause. The tree stays alive
    /// until `commit` (terminate) or `abort` (resume ticking).
    Checkpoint { out_dir: String },
    Commit,
    Abort,
    /// Terminate the whole tree with the given exit code.
    Exit { code: u8 },
    Status,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Machine-readable error class: `busy`, `storage`, `corrupt`, `protocol`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<WorkloadState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counters: Option<Vec<(u32, u64)>>,
}

impl ControlResponse {
    pub fn ok() -> Self {
        ControlResponse {
            ok: true,
            error: None,
            error_kind: None,
            state: None,
            counters: None,
        }
    }

    pub fn err(kind: &str, detail: impl Into<String>) -> Self {
        ControlResponse {
            ok: false,
            error: Some(detail.into()),
            error_kind: Some(kind.to_string()),
            state: None,
            counters: None,
        }
    }
}

/// One tick of one workload process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: String,
    pub pid: u32,
    pub label: String,
    pub counter: u64,
    pub level: String,
}

/// Messages a child writes to the root besides log records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum ChildReply {
    Ready { vpid: u32, counter: u64 },
    Dumped { state: ProcessState },
    Failed { vpid: u32, kind: String, detail: String },
}

/// One line on a child's stdout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChildLine {
    Reply(ChildReply),
    Log(LogRecord),
}

/// Commands the root writes to a child's stdin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ChildCommand {
    Dump { out_dir: String },
    Resume,
    Commit,
    Exit { code: u8 },
}
