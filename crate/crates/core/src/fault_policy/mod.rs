//! The self-feedback fault handler: turns an [`ExitReport`] plus the service's
//! structured logs into the next [`StartOptionConfig`].

pub mod complexity;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifecycle::{ExitReport, StartupMode};
use crate::start_option::{self, StartOptionConfig};

/// Hook output beyond this many bytes is rejected.
pub const MAX_HOOK_OUTPUT: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    BuiltinDefault,
    ExternalHook,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPolicy {
    #[serde(default)]
    pub kind: PolicyKind,
    #[serde(default)]
    pub hook_command: Vec<String>,
    #[serde(default = "default_hook_timeout_ms")]
    pub hook_timeout_ms: u64,
    #[serde(default = "default_log_window")]
    pub log_window: usize,
}

fn default_hook_timeout_ms() -> u64 {
    5000
}

fn default_log_window() -> usize {
    2000
}

impl Default for FaultPolicy {
    fn default() -> Self {
        FaultPolicy {
            kind: PolicyKind::BuiltinDefault,
            hook_command: Vec::new(),
            hook_timeout_ms: default_hook_timeout_ms(),
            log_window: default_log_window(),
        }
    }
}

impl FaultPolicy {
    pub fn hook(command: Vec<String>) -> Self {
        FaultPolicy {
            kind: PolicyKind::ExternalHook,
            hook_command: command,
            ..FaultPolicy::default()
        }
    }

    pub fn hook_timeout(&self) -> Duration {
        Duration::from_millis(self.hook_timeout_ms)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kind == PolicyKind::ExternalHook && self.hook_command.is_empty() {
            return Err("external hook policy needs a hook_command".into());
        }
        Ok(())
    }
}

/// Start mode chosen purely from an exit code:
/// `0` restores, `128..=159` (signal exits) stands by, anything else starts
/// from scratch.
pub fn mode_for_exit_code(exit_code: u8) -> StartupMode {
    match exit_code {
        0 => StartupMode::Restore,
        128..=159 => StartupMode::Standby,
        _ => StartupMode::FromScratch,
    }
}

/// The built-in decision. `latest_bundle` is the most recent checkpoint the
/// supervisor knows of; a restore decision without any bundle degrades to
/// standby.
pub fn default_decision(
    report: &ExitReport,
    prior: &StartOptionConfig,
    latest_bundle: Option<&Path>,
) -> StartOptionConfig {
    let app_command = prior.app_command.clone();
    match mode_for_exit_code(report.exit_code) {
        StartupMode::Restore => {
            let bundle = latest_bundle
                .map(Path::to_path_buf)
                .or_else(|| prior.checkpoint_location.clone());
            match bundle {
                Some(loc) => StartOptionConfig::new(
                    StartupMode::Restore,
                    app_command,
                    "exit-code-0:restore",
                )
                .with_checkpoint(loc),
                None => {
                    let mut c = StartOptionConfig::new(
                        StartupMode::Standby,
                        app_command,
                        "exit-code-0:no-checkpoint:standby",
                    );
                    c.checkpoint_location = None;
                    c
                }
            }
        }
        StartupMode::Standby => {
            let mut c = StartOptionConfig::new(
                StartupMode::Standby,
                app_command,
                format!("signal-exit-{}:standby", report.exit_code),
            );
            c.checkpoint_location = latest_bundle.map(Path::to_path_buf);
            c
        }
        StartupMode::FromScratch => StartOptionConfig::new(
            StartupMode::FromScratch,
            app_command,
            format!("exit-code-{}:from_scratch", report.exit_code),
        ),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HookError {
    #[error("hook timed out after {0:?}")]
    Timeout(Duration),
    #[error("hook crashed: {0}")]
    Crashed(String),
    #[error("hook output invalid: {0}")]
    OutputInvalid(String),
}

/// Document written to the hook's standard input.
#[derive(Debug, Serialize, Deserialize)]
pub struct HookInput {
    pub exit_report: ExitReport,
    pub logs: Vec<serde_json::Value>,
    /// Newest complete bundle, the only valid target of a restore decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latest_checkpoint: Option<PathBuf>,
}

impl HookInput {
    pub fn new(
        report: &ExitReport,
        log_lines: &[String],
        window: usize,
        latest_checkpoint: Option<PathBuf>,
    ) -> Self {
        let start = log_lines.len().saturating_sub(window);
        let logs = log_lines[start..]
            .iter()
            .map(|l| {
                serde_json::from_str(l).unwrap_or_else(|_| serde_json::Value::String(l.clone()))
            })
            .collect();
        // The window travels in `logs`; the report's own tail would repeat it.
        let mut exit_report = report.clone();
        exit_report.log_tail.clear();
        HookInput {
            exit_report,
            logs,
            latest_checkpoint,
        }
    }
}

fn hook_prior(prior: &StartOptionConfig, latest_bundle: Option<&Path>) -> StartOptionConfig {
    let mut p = prior.clone();
    if let Some(b) = latest_bundle {
        p.checkpoint_location = Some(b.to_path_buf());
    }
    p
}

/// Run the external hook and parse its decision. `prior` supplies the
/// app command when the hook leaves it out, and its checkpoint location is
/// offered to the hook.
pub fn run_hook(
    policy: &FaultPolicy,
    report: &ExitReport,
    log_lines: &[String],
    prior: &StartOptionConfig,
) -> Result<StartOptionConfig, HookError> {
    let Some((program, args)) = policy.hook_command.split_first() else {
        return Err(HookError::Crashed("no hook command configured".into()));
    };
    let input = serde_json::to_vec(&HookInput::new(
        report,
        log_lines,
        policy.log_window,
        prior.checkpoint_location.clone(),
    ))
        .expect("serializable");
    let timeout = policy.hook_timeout();
    let deadline = Instant::now() + timeout;

    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| HookError::Crashed(format!("spawn {program}: {e}")))?;
    let pid = child.id();
    let mut stdin = child.stdin.take().expect("piped");
    let mut stdout = child.stdout.take().expect("piped");

    thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let (out_tx, out_rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = Vec::new();
        let res = (&mut stdout)
            .take(MAX_HOOK_OUTPUT as u64 + 1)
            .read_to_end(&mut buf);
        // Keep draining so an oversized writer is not blocked on the pipe.
        let _ = std::io::copy(&mut stdout, &mut std::io::sink());
        let _ = out_tx.send(res.map(|_| buf));
    });
    let (exit_tx, exit_rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = exit_tx.send(child.wait());
    });

    let remaining = || deadline.saturating_duration_since(Instant::now());
    let status = match exit_rx.recv_timeout(remaining()) {
        Ok(Ok(status)) => status,
        Ok(Err(e)) => return Err(HookError::Crashed(e.to_string())),
        Err(_) => {
            // SAFETY: kill(2) on our own unreaped child.
            unsafe {
                libc::kill(pid as libc::pid_t, libc::SIGKILL);
            }
            let _ = exit_rx.recv_timeout(Duration::from_millis(500));
            return Err(HookError::Timeout(timeout));
        }
    };
    if !status.success() {
        return Err(HookError::Crashed(format!("hook exited with {status}")));
    }
    let output = match out_rx.recv_timeout(remaining().max(Duration::from_millis(100))) {
        Ok(Ok(buf)) => buf,
        Ok(Err(e)) => return Err(HookError::OutputInvalid(e.to_string())),
        Err(_) => return Err(HookError::Timeout(timeout)),
    };
    if output.len() > MAX_HOOK_OUTPUT {
        return Err(HookError::OutputInvalid(format!(
            "output exceeds {MAX_HOOK_OUTPUT} bytes"
        )));
    }
    let mut decision: StartOptionConfig = serde_json::from_slice(&output)
        .map_err(|e| HookError::OutputInvalid(e.to_string()))?;
    decision
        .validate()
        .map_err(|e| HookError::OutputInvalid(e.to_string()))?;
    if decision.app_command.is_empty() {
        decision.app_command = prior.app_command.clone();
    }
    if decision.reason.is_empty() {
        decision.reason = "hook".into();
    }
    Ok(decision)
}

/// Outcome of [`decide_and_persist`].
#[derive(Debug, Clone)]
pub struct Decision {
    /// The decision, as persisted when persistence succeeded.
    pub config: StartOptionConfig,
    /// Wall time of deciding and persisting (`fault_decision_seconds`).
    pub elapsed: Duration,
    pub hook_failure: Option<String>,
    pub storage_failure: Option<String>,
}

/// Decide how the service restarts and persist the decision at
/// `config_location`.
pub fn decide_and_persist(
    policy: &FaultPolicy,
    report: &ExitReport,
    log_lines: &[String],
    prior: &StartOptionConfig,
    latest_bundle: Option<&Path>,
    config_location: &Path,
) -> Decision {
    let started = Instant::now();
    let mut hook_failure = None;
    let mut config = match policy.kind {
        PolicyKind::BuiltinDefault => default_decision(report, prior, latest_bundle),
        PolicyKind::ExternalHook => match run_hook(policy, report, log_lines, &hook_prior(prior, latest_bundle)) {
            Ok(c) => c,
            Err(e) => {
                hook_failure = Some(e.to_string());
                let mut c = StartOptionConfig::standby(format!("hook-failure:{e}"));
                c.app_command = prior.app_command.clone();
                c
            }
        },
    };
    config.generation = prior.generation;
    let mut storage_failure = None;
    match start_option::write_start_option(&config, config_location) {
        Ok(written) => config = written,
        Err(e) => {
            config.generation = prior.generation + 1;
            storage_failure = Some(e.to_string());
        }
    }
    Decision {
        config,
        elapsed: started.elapsed(),
        hook_failure,
        storage_failure,
    }
}

/// Resolve a RESTORE decision's bundle path.
pub fn restore_location(config: &StartOptionConfig) -> Option<PathBuf> {
    match config.mode {
        StartupMode::Restore => config.checkpoint_location.clone(),
        _ => None,
    }
}
