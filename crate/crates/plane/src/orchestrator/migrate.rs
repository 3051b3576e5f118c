//! Stop-and-copy migration of a service between two daemons.
//!
//! Cold: checkpoint, transfer, boot the destination, restore.
//! Warm: the destination boots while the checkpoint and transfer run; the
//! restore is issued once the bundle is in place.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use super::client::{Client, ClientError};
use super::launch::{self, DaemonProcess, LaunchError};
use crate::daemon::DaemonConfig;
use crate::wire::{CheckpointRequest, OpResponse, RunRequest};
use liquid_core::StartupMode;

/// Directory under the shared directory where bundles wait out the transfer.
pub const OUTGOING_DIR: &str = ".outgoing";

pub enum Destination {
    /// Boot a new daemon from this config.
    Launch {
        liquidd: PathBuf,
        config: Box<DaemonConfig>,
        ready_timeout: Duration,
    },
    /// Use a daemon that is already serving.
    Existing(Client),
}

pub struct MigrationPlan {
    pub source: Client,
    pub destination: Destination,
    pub shared_dir: PathBuf,
    /// Bundle directory name, relative to the shared directory.
    pub bundle_name: String,
    pub warm: bool,
    pub transfer_delay: Duration,
    /// Wait this long for every restored process to log, then compare counters.
    pub continuity_timeout: Option<Duration>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Continuity {
    pub ok: bool,
    pub detail: String,
    pub snapshot: BTreeMap<u32, u64>,
    pub restored_initial: BTreeMap<u32, u64>,
    pub first_logged: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MigrationReport {
    pub warm: bool,
    pub bundle_location: PathBuf,
    pub checkpoint_seconds: f64,
    pub transfer_seconds: f64,
    /// Destination boot, spawn to ready; zero for an existing daemon.
    pub destination_startup_seconds: f64,
    pub restore_seconds: f64,
    /// Restore plus accounted fork time when the destination only accounts it.
    pub restore_seconds_with_forks: f64,
    /// From the checkpoint request to the restored service running.
    pub total_seconds: f64,
    pub fork_iterations: u64,
    pub direct_writes: u64,
    /// Log lines the source's fault decision examined.
    pub fault_log_lines: usize,
    pub fault_decision_seconds: f64,
    pub continuity: Option<Continuity>,
}

#[derive(Debug, Error)]
pub enum MigrationError {
    #[error("source checkpoint failed ({status}): {detail}")]
    Checkpoint { status: u16, detail: String, response: Box<OpResponse> },
    #[error("destination restore failed ({status}): {detail}")]
    Restore { status: u16, detail: String, response: Box<OpResponse> },
    #[error("transfer of {path}: {source}")]
    Transfer { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

fn describe(r: &OpResponse) -> String {
    format!(
        "{}: {}",
        r.error_kind.as_deref().unwrap_or(&r.outcome),
        r.error.as_deref().unwrap_or("")
    )
}

/// Run the migration. Returns the destination daemon when this call booted it.
pub fn migrate(plan: MigrationPlan) -> Result<(MigrationReport, Option<DaemonProcess>), MigrationError> {
    let t0 = Instant::now();
    let staged = plan.transfer_delay > Duration::ZERO;
    let stage_rel = if staged {
        Path::new(OUTGOING_DIR).join(&plan.bundle_name)
    } else {
        PathBuf::from(&plan.bundle_name)
    };
    let final_path = plan.shared_dir.join(&plan.bundle_name);

    let mut booting = None;
    let mut existing = None;
    let mut launch_args = None;
    match plan.destination {
        Destination::Existing(c) => existing = Some(c),
        Destination::Launch {
            liquidd,
            config,
            ready_timeout,
        } => {
            if plan.warm {
                let booted = launch::spawn_config(&liquidd, &config)?;
                booting = Some(thread::spawn(move || booted.wait_ready(ready_timeout)));
            } else {
                launch_args = Some((liquidd, config, ready_timeout));
            }
        }
    }

    let ckpt = plan.source.checkpoint(&CheckpointRequest {
        image_dir: stage_rel.clone(),
        leave_running: false,
    })?;
    if !ckpt.ok() {
        if let Some(h) = booting {
            drop(h.join());
        }
        return Err(MigrationError::Checkpoint {
            status: ckpt.status,
            detail: describe(&ckpt.value),
            response: Box::new(ckpt.value),
        });
    }
    let checkpoint_seconds = ckpt.elapsed.as_secs_f64();

    let t_transfer = Instant::now();
    if staged {
        thread::sleep(plan.transfer_delay);
        if let Some(parent) = final_path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| MigrationError::Transfer {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::rename(plan.shared_dir.join(&stage_rel), &final_path).map_err(|source| {
            MigrationError::Transfer {
                path: final_path.clone(),
                source,
            }
        })?;
    }
    let transfer_seconds = t_transfer.elapsed().as_secs_f64();

    let dest_proc = if let Some(h) = booting {
        Some(h.join().expect("boot waiter panicked")?)
    } else if let Some((liquidd, config, timeout)) = launch_args {
        Some(launch::launch(&liquidd, &config, timeout)?)
    } else {
        None
    };
    let (client, startup) = match (&dest_proc, existing) {
        (Some(d), _) => (d.client.clone(), d.startup),
        (None, Some(c)) => (c, Duration::ZERO),
        (None, None) => unreachable!("destination is either launched or existing"),
    };

    let restore = client.run(&RunRequest {
        mode: Some(StartupMode::Restore),
        bundle_location: Some(PathBuf::from(&plan.bundle_name)),
        ..RunRequest::default()
    })?;
    let total_seconds = t0.elapsed().as_secs_f64();
    if !restore.ok() {
        return Err(MigrationError::Restore {
            status: restore.status,
            detail: describe(&restore.value),
            response: Box::new(restore.value),
        });
    }
    let r = &restore.value;
    let restore_seconds = restore.elapsed.as_secs_f64();
    let continuity = match plan.continuity_timeout {
        Some(t) => Some(check_continuity(&ckpt.value.counters, &r.initial_counters, &client, t)?),
        None => None,
    };
    let report = MigrationReport {
        warm: plan.warm,
        bundle_location: final_path,
        checkpoint_seconds,
        transfer_seconds,
        destination_startup_seconds: startup.as_secs_f64(),
        restore_seconds,
        restore_seconds_with_forks: restore_seconds + r.accounted_fork_seconds,
        total_seconds,
        fork_iterations: r.fork_iterations,
        direct_writes: r.direct_writes,
        fault_log_lines: ckpt.value.fault_log_lines,
        fault_decision_seconds: ckpt.value.fault_decision_seconds,
        continuity,
    };
    Ok((report, dest_proc))
}

/// Compare saved counters with what the restored service reports and logs.
pub fn check_continuity(
    snapshot: &[(u32, u64)],
    restored_initial: &[(u32, u64)],
    dest: &Client,
    timeout: Duration,
) -> Result<Continuity, ClientError> {
    let snapshot: BTreeMap<u32, u64> = snapshot.iter().copied().collect();
    let restored: BTreeMap<u32, u64> = restored_initial.iter().copied().collect();
    let mut c = Continuity {
        ok: false,
        snapshot: snapshot.clone(),
        restored_initial: restored.clone(),
        ..Continuity::default()
    };
    if snapshot.is_empty() {
        c.detail = "checkpoint reported no counters".into();
        return Ok(c);
    }
    if restored != snapshot {
        c.detail = "restored counters differ from the snapshot".into();
        return Ok(c);
    }
    let status = dest.wait_status(timeout, |s| {
        s.counters
            .as_ref()
            .map(|v| snapshot.keys().all(|k| v.first_logged.contains_key(k)))
            .unwrap_or(false)
    })?;
    let view = status.counters.unwrap_or_default();
    c.first_logged = view.first_logged.clone();
    let missing: Vec<u32> = snapshot
        .keys()
        .filter(|k| !view.first_logged.contains_key(k))
        .copied()
        .collect();
    if !missing.is_empty() {
        c.detail = format!("no log line within {timeout:?} from {missing:?}");
        return Ok(c);
    }
    let jumps: Vec<(u32, u64, u64)> = snapshot
        .iter()
        .filter(|(k, v)| view.first_logged[k] != **v + 1)
        .map(|(k, v)| (*k, *v, view.first_logged[k]))
        .collect();
    if !jumps.is_empty() {
        c.detail = format!("first logged counter is not snapshot+1: {jumps:?}");
        return Ok(c);
    }
    if view.discontinuities != 0 {
        c.detail = format!("{} discontinuities in restored logs", view.discontinuities);
        return Ok(c);
    }
    c.ok = true;
    c.detail = "continuous".into();
    Ok(c)
}
