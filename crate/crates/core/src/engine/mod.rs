//! Stop-and-copy checkpoint/restore of workload trees.

pub mod bundle;
pub mod pid_space;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitStatus;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{
    await_bundle, verify_bundle, BundleUnavailableTimeout, BundleVerdict, CheckpointBundle,
    Manifest, COMPLETE_MARKER, MANIFEST_FILE,
};
pub use pid_space::{PidError, PidSpaceParams, ReservationCost, VirtualPidSpace};

use crate::storage;
use crate::workload::{
    self, Launcher, SpawnOptions, WorkloadError, WorkloadHandle, WorkloadSpec, WorkloadState,
};

/// How the simulated per-fork cost is paid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForkCostMode {
    /// Sleep for `fork_iterations * fork_cost` during restore.
    #[default]
    Sleep,
    /// Only account the cost in the restore report.
    Account,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub launcher: Launcher,
    /// Simulated cost of one fork-and-kill iteration.
    pub fork_cost: Duration,
    pub fork_cost_mode: ForkCostMode,
    pub await_poll: Duration,
    /// Directory for control sockets.
    pub socket_dir: PathBuf,
}

impl EngineConfig {
    pub fn new(launcher: Launcher, socket_dir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            launcher,
            fork_cost: Duration::from_millis(1),
            fork_cost_mode: ForkCostMode::Sleep,
            await_poll: bundle::DEFAULT_AWAIT_POLL,
            socket_dir: socket_dir.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("workload is not running")]
    NotRunning,
    #[error("snapshot refused: {0}")]
    SnapshotRefused(String),
    #[error("storage failure: {detail}")]
    StorageFailure {
        detail: String,
        /// The workload was not terminated and keeps running.
        service_continues: bool,
    },
    #[error("workload died during checkpoint")]
    ServiceDied { status: Option<ExitStatus> },
    #[error("destination {0} already holds a bundle")]
    BundleExists(PathBuf),
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error(transparent)]
    BundleUnavailableTimeout(#[from] BundleUnavailableTimeout),
    #[error("pid conflict: {0}")]
    PidConflict(String),
    #[error(transparent)]
    Workload(WorkloadError),
}

impl EngineError {
    /// Whether the workload survived the failed operation.
    pub fn service_continues(&self) -> bool {
        match self {
            EngineError::SnapshotRefused(_) | EngineError::BundleExists(_) => true,
            EngineError::StorageFailure {
                service_continues, ..
            } => *service_continues,
            _ => false,
        }
    }
}

#[derive(Debug)]
pub struct CheckpointOutcome {
    pub bundle: CheckpointBundle,
    pub state: WorkloadState,
    pub exit_status: ExitStatus,
}

#[derive(Debug)]
pub struct RestoreOutcome {
    pub handle: WorkloadHandle,
    pub state: WorkloadState,
    pub cost: ReservationCost,
    /// `fork_iterations * fork_cost`, slept or accounted per the config.
    pub simulated_fork_time: Duration,
}

pub struct Engine {
    config: EngineConfig,
    sockets: AtomicU64,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Engine {
            config,
            sockets: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn socket_path(&self) -> PathBuf {
        let n = self.sockets.fetch_add(1, Ordering::Relaxed);
        self.config
            .socket_dir
            .join(format!("wl-{}-{n}.sock", std::process::id()))
    }

    /// Start a fresh tree, taking its PIDs from `space`.
    pub fn spawn(
        &self,
        spec: &WorkloadSpec,
        space: &mut VirtualPidSpace,
        opts: SpawnOptions,
    ) -> Result<WorkloadHandle, EngineError> {
        spec.validate().map_err(EngineError::Workload)?;
        let mut vpids = Vec::new();
        for _ in 0..spec.process_count {
            match space.allocate() {
                Ok(p) => vpids.push(p),
                Err(e) => {
                    vpids.iter().for_each(|p| space.release(*p));
                    return Err(EngineError::PidConflict(e.to_string()));
                }
            }
        }
        self.spawn_with_pids(spec, &vpids, opts).inspect_err(|_| {
            vpids.iter().for_each(|p| space.release(*p));
        })
    }

    /// Start a fresh tree with explicit PIDs (root first).
    pub fn spawn_with_pids(
        &self,
        spec: &WorkloadSpec,
        vpids: &[u32],
        opts: SpawnOptions,
    ) -> Result<WorkloadHandle, EngineError> {
        workload::spawn_workload(&self.config.launcher, spec, &self.socket_path(), vpids, opts)
            .map_err(EngineError::Workload)
    }

    /// Stop-and-copy checkpoint of `handle` into `dest_dir`. Failures before
    /// the tree is terminated leave it running and remove every partial file.
    pub fn checkpoint(
        &self,
        handle: &WorkloadHandle,
        dest_dir: &Path,
        app_command: &[String],
    ) -> Result<CheckpointOutcome, EngineError> {
        if !handle.is_running() {
            return Err(EngineError::NotRunning);
        }
        if dest_dir.join(MANIFEST_FILE).exists() || dest_dir.join(COMPLETE_MARKER).exists() {
            return Err(EngineError::BundleExists(dest_dir.to_path_buf()));
        }
        let created_dir = !dest_dir.exists();
        if let Err(e) = std::fs::create_dir_all(dest_dir) {
            return Err(EngineError::StorageFailure {
                detail: format!("{}: {e}", dest_dir.display()),
                service_continues: true,
            });
        }

        let state = match handle.prepare_snapshot(dest_dir) {
            Ok(s) => s,
            Err(e) => {
                bundle::discard(dest_dir, created_dir);
                return Err(match e {
                    WorkloadError::SnapshotRefused(m) => EngineError::SnapshotRefused(m),
                    WorkloadError::StorageFailure(detail) => EngineError::StorageFailure {
                        detail,
                        service_continues: true,
                    },
                    WorkloadError::NotRunning => EngineError::ServiceDied {
                        status: handle.wait_exit(Duration::from_secs(10)),
                    },
                    other => EngineError::Workload(other),
                });
            }
        };

        let manifest = match build_manifest(dest_dir, &state, app_command) {
            Ok(m) => m,
            Err(detail) => {
                let _ = handle.abort_snapshot();
                bundle::discard(dest_dir, created_dir);
                return Err(EngineError::StorageFailure {
                    detail,
                    service_continues: handle.is_running(),
                });
            }
        };

        let exit_status = match handle.commit_snapshot() {
            Ok(s) => s,
            Err(_) => {
                bundle::discard(dest_dir, created_dir);
                return Err(EngineError::ServiceDied {
                    status: handle.wait_exit(Duration::from_secs(10)),
                });
            }
        };

        if let Err(e) = storage::write_file(&dest_dir.join(COMPLETE_MARKER), b"") {
            bundle::discard(dest_dir, created_dir);
            return Err(EngineError::StorageFailure {
                detail: format!("completion marker: {e}"),
                service_continues: false,
            });
        }

        Ok(CheckpointOutcome {
            bundle: CheckpointBundle {
                location: dest_dir.to_path_buf(),
                manifest,
            },
            state,
            exit_status,
        })
    }

    /// Restore the bundle at `location`, reproducing every original PID in
    /// `space`. Blocks until the bundle is complete (`None` waits forever).
    pub fn restore(
        &self,
        location: &Path,
        space: &mut VirtualPidSpace,
        wait_timeout: Option<Duration>,
        opts: SpawnOptions,
    ) -> Result<RestoreOutcome, EngineError> {
        await_bundle(location, wait_timeout, self.config.await_poll)?;
        let manifest = match verify_bundle(location) {
            BundleVerdict::Ok(m) => m,
            BundleVerdict::Corrupt(detail) => return Err(EngineError::CorruptBundle(detail)),
        };
        let state = WorkloadState::load(location)
            .map_err(|e| EngineError::CorruptBundle(e.to_string()))?;
        if state.vpids() != manifest.vpids() {
            return Err(EngineError::CorruptBundle(
                "manifest and process tree disagree".into(),
            ));
        }

        for pid in manifest.vpids() {
            if !space.is_free(pid) {
                return Err(EngineError::PidConflict(format!(
                    "pid {pid} is not available in the destination namespace"
                )));
            }
        }

        let mut cost = ReservationCost::default();
        let mut assigned = BTreeMap::new();
        let release = |space: &mut VirtualPidSpace, assigned: &BTreeMap<u32, u32>| {
            assigned.values().for_each(|p| space.release(*p));
        };
        for target in manifest.vpids() {
            let step = space.reserve_pid(target).and_then(|c| {
                let got = space.allocate()?;
                Ok((c, got))
            });
            match step {
                Ok((c, got)) if got == target => {
                    cost += c;
                    assigned.insert(target, got);
                }
                Ok((_, got)) => {
                    space.release(got);
                    release(space, &assigned);
                    return Err(EngineError::PidConflict(format!(
                        "reserved {target} but allocation yielded {got}"
                    )));
                }
                Err(e) => {
                    release(space, &assigned);
                    return Err(EngineError::PidConflict(e.to_string()));
                }
            }
        }

        let simulated_fork_time = self
            .config
            .fork_cost
            .saturating_mul(cost.fork_iterations.min(u64::from(u32::MAX)) as u32);
        if self.config.fork_cost_mode == ForkCostMode::Sleep && !simulated_fork_time.is_zero() {
            std::thread::sleep(simulated_fork_time);
        }

        match workload::workload_resume(
            &self.config.launcher,
            &state,
            location,
            &assigned,
            &self.socket_path(),
            opts,
        ) {
            Ok(handle) => Ok(RestoreOutcome {
                handle,
                state,
                cost,
                simulated_fork_time,
            }),
            Err(e) => {
                release(space, &assigned);
                Err(match e {
                    WorkloadError::CorruptSnapshot(d) => EngineError::CorruptBundle(d),
                    WorkloadError::PidUnavailable(d) => EngineError::PidConflict(d),
                    other => EngineError::Workload(other),
                })
            }
        }
    }
}

fn build_manifest(
    dir: &Path,
    state: &WorkloadState,
    app_command: &[String],
) -> Result<Manifest, String> {
    let mut files = Vec::new();
    for rel in state.relative_files() {
        let rel = rel.to_string_lossy().into_owned();
        files.push(bundle::file_entry(dir, &rel).map_err(|e| format!("{rel}: {e}"))?);
    }
    let root = state.root_vpid();
    let processes = state
        .processes
        .iter()
        .map(|p| bundle::ManifestProcess {
            vpid: p.vpid,
            parent: state
                .edges
                .iter()
                .find(|(_, child)| *child == p.vpid)
                .map(|(parent, _)| *parent)
                .filter(|_| p.vpid != root),
            state_file: workload::snap_relative(p.vpid).to_string_lossy().into_owned(),
        })
        .collect();
    let manifest = Manifest {
        app_command: app_command.to_vec(),
        label: state.spec.label.clone(),
        created_at: Utc::now(),
        processes,
        files,
        bundle_digest: String::new(),
    }
    .seal();
    let bytes = serde_json::to_vec_pretty(&manifest).expect("serializable");
    storage::write_file(&dir.join(MANIFEST_FILE), &bytes)
        .map_err(|e| format!("manifest: {e}"))?;
    Ok(manifest)
}
