//! Fault injection against a running daemon, with the expected reaction of
//! each supported (fault, phase) cell checked against what the daemon did.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use liquid_core::engine::bundle::{COMPLETE_MARKER, MANIFEST_FILE};
use liquid_core::fault_policy::mode_for_exit_code;
use liquid_core::lifecycle::ExitPhase;
use liquid_core::start_option::{read_start_option, START_OPTION_FILE};
use liquid_core::storage::QUOTA_FILE;
use liquid_core::workload::WorkloadSpec;
use liquid_core::StartupMode;
use serde::Serialize;
use thiserror::Error;

use super::client::{Client, ClientError, Timed};
use super::launch::{self, DaemonProcess, LaunchError};
use crate::wire::{CheckpointRequest, DaemonStatus, OpResponse, RunRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    Signal(u8),
    AppExit(u8),
    CorruptBundle,
    StorageExceed,
    NetworkUnreachable,
    HardKillDaemon,
}

impl FaultKind {
    pub fn name(&self) -> String {
        match self {
            FaultKind::Signal(s) => format!("SIGNAL({s})"),
            FaultKind::AppExit(c) => format!("APP_EXIT({c})"),
            FaultKind::CorruptBundle => "CORRUPT_BUNDLE".into(),
            FaultKind::StorageExceed => "STORAGE_EXCEED".into(),
            FaultKind::NetworkUnreachable => "NETWORK_UNREACHABLE".into(),
            FaultKind::HardKillDaemon => "HARD_KILL".into(),
        }
    }
}

/// Accepts `SIGNAL(n)`, `SIGKILL`, `SIGTERM`, `MEMORY_EXCEED`, `APP_EXIT(n)`,
/// `CORRUPT_BUNDLE`, `STORAGE_EXCEED`, `NETWORK_UNREACHABLE`, `HARD_KILL`.
impl FromStr for FaultKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let up = s.trim().to_ascii_uppercase();
        let arg = |prefix: &str| -> Option<Result<u8, String>> {
            let rest = up.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(rest.trim().parse::<u8>().map_err(|e| format!("{s}: {e}")))
        };
        if let Some(n) = arg("SIGNAL") {
            return n.map(FaultKind::Signal);
        }
        if let Some(n) = arg("APP_EXIT") {
            return n.map(FaultKind::AppExit);
        }
        Ok(match up.as_str() {
            "SIGKILL" | "MEMORY_EXCEED" | "OOM" => FaultKind::Signal(libc::SIGKILL as u8),
            "SIGTERM" => FaultKind::Signal(libc::SIGTERM as u8),
            "SIGINT" => FaultKind::Signal(libc::SIGINT as u8),
            "SIGSEGV" => FaultKind::Signal(libc::SIGSEGV as u8),
            "CORRUPT_BUNDLE" => FaultKind::CorruptBundle,
            "STORAGE_EXCEED" => FaultKind::StorageExceed,
            "NETWORK_UNREACHABLE" => FaultKind::NetworkUnreachable,
            "HARD_KILL" | "HARD_KILL_DAEMON" => FaultKind::HardKillDaemon,
            _ => return Err(format!("unknown fault {s:?}")),
        })
    }
}

pub fn phase_name(p: ExitPhase) -> &'static str {
    match p {
        ExitPhase::Normal => "normal",
        ExitPhase::Checkpoint => "checkpoint",
        ExitPhase::Restore => "restore",
    }
}

pub fn parse_phase(s: &str) -> Result<ExitPhase, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "normal" => Ok(ExitPhase::Normal),
        "checkpoint" => Ok(ExitPhase::Checkpoint),
        "restore" => Ok(ExitPhase::Restore),
        other => Err(format!("unknown phase {other:?}")),
    }
}

/// What the daemon must do after an injection.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "expect", rename_all = "snake_case")]
pub enum Expectation {
    /// The fault decision selects this mode.
    NextMode { mode: StartupMode },
    /// The checkpoint is abandoned and the decision selects this mode.
    CheckpointLost { mode: StartupMode },
    /// The checkpoint fails and the service keeps running.
    ServiceContinues,
    /// The restore waits for the bundle, then succeeds.
    BlockedUntilComplete,
    /// After a restart the daemon applies whatever was persisted.
    ResumePersisted,
}

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("{fault} in phase {phase} is not a modeled cell")]
    NotModeled { fault: String, phase: String },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("could not hit phase {0} after {1} attempts")]
    PhaseMissed(String, u32),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Launch(#[from] LaunchError),
}

/// The populated cells of the fault matrix.
pub fn expectation(kind: FaultKind, phase: ExitPhase) -> Result<Expectation, InjectError> {
    let not_modeled = || InjectError::NotModeled {
        fault: kind.name(),
        phase: phase_name(phase).into(),
    };
    Ok(match (kind, phase) {
        (FaultKind::Signal(s), ExitPhase::Normal) if (1..32).contains(&s) => Expectation::NextMode {
            mode: mode_for_exit_code(128 + s),
        },
        (FaultKind::Signal(s), ExitPhase::Checkpoint) if (1..32).contains(&s) => {
            Expectation::CheckpointLost {
                mode: mode_for_exit_code(128 + s),
            }
        }
        // A failed restore is recorded with a fixed non-signal code.
        (FaultKind::Signal(s), ExitPhase::Restore) if (1..32).contains(&s) => Expectation::NextMode {
            mode: StartupMode::FromScratch,
        },
        (FaultKind::AppExit(c), ExitPhase::Normal)
            if mode_for_exit_code(c) == StartupMode::FromScratch =>
        {
            Expectation::NextMode {
                mode: StartupMode::FromScratch,
            }
        }
        (FaultKind::CorruptBundle, ExitPhase::Restore) => Expectation::NextMode {
            mode: StartupMode::FromScratch,
        },
        (FaultKind::StorageExceed, ExitPhase::Checkpoint) => Expectation::ServiceContinues,
        (FaultKind::NetworkUnreachable, ExitPhase::Restore) => Expectation::BlockedUntilComplete,
        (FaultKind::HardKillDaemon, _) => Expectation::ResumePersisted,
        _ => return Err(not_modeled()),
    })
}

#[derive(Debug, Serialize)]
pub struct InjectionResult {
    pub fault: String,
    pub phase: String,
    pub expectation: Expectation,
    pub passed: bool,
    pub observed_state: String,
    pub observed_mode: Option<StartupMode>,
    pub observed_reason: Option<String>,
    pub http_status: Option<u16>,
    pub service_continues: Option<bool>,
    pub blocked_seconds: Option<f64>,
    /// Address of the daemon after the injection; changes on a hard kill.
    pub address: String,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub relaunched: Option<DaemonProcess>,
}

pub struct Injector {
    pub client: Client,
    /// Needed only to relaunch after a hard kill.
    pub liquidd: Option<PathBuf>,
    /// Service started whenever a cell needs a running service.
    pub workload: WorkloadSpec,
    pub settle_timeout: Duration,
    /// How long a restore must stay blocked on an incomplete bundle.
    pub block_window: Duration,
    pub ready_timeout: Duration,
    seq: AtomicU64,
}

const PHASE_ATTEMPTS: u32 = 5;

impl Injector {
    pub fn new(client: Client, workload: WorkloadSpec) -> Self {
        Injector {
            client,
            liquidd: None,
            workload,
            settle_timeout: Duration::from_secs(30),
            block_window: Duration::from_millis(1500),
            ready_timeout: Duration::from_secs(60),
            seq: AtomicU64::new(0),
        }
    }

    fn name(&self, what: &str) -> String {
        let n = self.seq.fetch_add(1, Ordering::Relaxed);
        format!("inject-{}-{what}-{n}", std::process::id())
    }

    pub fn inject(&mut self, kind: FaultKind, phase: ExitPhase) -> Result<InjectionResult, InjectError> {
        let expect = expectation(kind, phase)?;
        let mut res = InjectionResult {
            fault: kind.name(),
            phase: phase_name(phase).into(),
            expectation: expect.clone(),
            passed: false,
            observed_state: String::new(),
            observed_mode: None,
            observed_reason: None,
            http_status: None,
            service_continues: None,
            blocked_seconds: None,
            address: self.client.base().to_string(),
            notes: Vec::new(),
            relaunched: None,
        };
        if kind == FaultKind::Signal(libc::SIGKILL as u8) {
            res.notes.push("memory exhaustion is modeled as SIGKILL".into());
        }
        match (kind, phase) {
            (FaultKind::Signal(sig), ExitPhase::Normal) => self.signal_running(sig, &mut res)?,
            (FaultKind::Signal(sig), ExitPhase::Checkpoint) => self.signal_checkpoint(sig, &mut res)?,
            (FaultKind::Signal(sig), ExitPhase::Restore) => self.signal_restore(sig, &mut res)?,
            (FaultKind::AppExit(code), _) => self.app_exit(code, &mut res)?,
            (FaultKind::CorruptBundle, _) => self.corrupt_bundle(&mut res)?,
            (FaultKind::StorageExceed, _) => self.storage_exceed(&mut res)?,
            (FaultKind::NetworkUnreachable, _) => self.network_unreachable(&mut res)?,
            (FaultKind::HardKillDaemon, _) => self.hard_kill(phase, &mut res)?,
        }
        Ok(res)
    }

    fn ensure_running(&self) -> Result<DaemonStatus, InjectError> {
        let s = self.client.status()?;
        if s.state_name() == "running" {
            return Ok(s);
        }
        let r = self.client.run(&RunRequest {
            mode: Some(StartupMode::FromScratch),
            workload: Some(self.workload.clone()),
            ..RunRequest::default()
        })?;
        if !r.ok() {
            return Err(InjectError::Setup(format!("start failed: {:?}", r.value.error)));
        }
        Ok(self.client.status()?)
    }

    /// Checkpoint the running service into `name`; the service stops.
    fn make_bundle(&self, name: &str) -> Result<PathBuf, InjectError> {
        self.ensure_running()?;
        let r = self.client.checkpoint(&CheckpointRequest {
            image_dir: name.into(),
            leave_running: false,
        })?;
        if !r.ok() {
            return Err(InjectError::Setup(format!("checkpoint failed: {:?}", r.value.error)));
        }
        r.value
            .bundle_location
            .ok_or_else(|| InjectError::Setup("checkpoint returned no location".into()))
    }

    /// Wait for the fault decision that follows an exit to be applied.
    fn settle(&self, before: &DaemonStatus) -> Result<DaemonStatus, InjectError> {
        let gen = before.current_config.generation;
        let exits = before.exits_observed;
        Ok(self.client.wait_status(self.settle_timeout, |s| {
            s.exits_observed > exits
                && s.current_config.generation > gen
                && matches!(s.state_name(), "running" | "standby")
        })?)
    }

    fn observe(&self, res: &mut InjectionResult, s: &DaemonStatus) {
        res.observed_state = s.state_name().into();
        res.observed_mode = Some(s.current_config.mode);
        res.observed_reason = Some(s.current_config.reason.clone());
    }

    fn observe_response(res: &mut InjectionResult, r: &Timed<OpResponse>) {
        res.http_status = Some(r.status);
        res.service_continues = r.value.service_continues;
    }

    fn wait_phase(&self, state: &str, old_pid: Option<u32>) -> Result<Option<DaemonStatus>, InjectError> {
        let deadline = Instant::now() + Duration::from_secs(10);
        while Instant::now() < deadline {
            let s = self.client.status()?;
            if s.state_name() == state && s.service_pid.is_some() && s.service_pid != old_pid {
                return Ok(Some(s));
            }
            thread::sleep(Duration::from_micros(500));
        }
        Ok(None)
    }

    fn signal_running(&self, sig: u8, res: &mut InjectionResult) -> Result<(), InjectError> {
        let before = self.ensure_running()?;
        let pid = before
            .service_pid
            .ok_or_else(|| InjectError::Setup("running service has no pid".into()))?;
        send_signal(pid, sig);
        let after = self.settle(&before)?;
        self.observe(res, &after);
        let want = match res.expectation {
            Expectation::NextMode { mode } => mode,
            _ => unreachable!(),
        };
        res.passed = after.current_config.mode == want && state_matches(want, after.state_name());
        Ok(())
    }

    fn signal_checkpoint(&self, sig: u8, res: &mut InjectionResult) -> Result<(), InjectError> {
        let want = match res.expectation {
            Expectation::CheckpointLost { mode } => mode,
            _ => unreachable!(),
        };
        for attempt in 1..=PHASE_ATTEMPTS {
            let before = self.ensure_running()?;
            let name = self.name("ckpt-signal");
            let client = self.client.clone();
            let req = CheckpointRequest {
                image_dir: name.clone().into(),
                leave_running: false,
            };
            let op = thread::spawn(move || client.checkpoint(&req));
            let hit = self.wait_phase("checkpointing", None)?;
            if let Some(s) = &hit {
                send_signal(s.service_pid.expect("checked"), sig);
            }
            let r = op.join().expect("checkpoint thread panicked")?;
            if hit.is_none() || r.ok() {
                res.notes.push(format!("attempt {attempt}: checkpoint finished before the signal"));
                continue;
            }
            Self::observe_response(res, &r);
            let after = self.settle(&before)?;
            self.observe(res, &after);
            let bundle = after.shared_dir.join(&name);
            let incomplete = !bundle.join(COMPLETE_MARKER).exists();
            if !incomplete {
                res.notes.push("bundle marker present after a failed checkpoint".into());
            }
            res.passed = r.value.service_continues == Some(false)
                && incomplete
                && after.current_config.mode == want
                && state_matches(want, after.state_name());
            return Ok(());
        }
        Err(InjectError::PhaseMissed("checkpoint".into(), PHASE_ATTEMPTS))
    }

    fn signal_restore(&self, sig: u8, res: &mut InjectionResult) -> Result<(), InjectError> {
        for attempt in 1..=PHASE_ATTEMPTS {
            let bundle = self.make_bundle(&self.name("restore-signal"))?;
            let before = self.client.status()?;
            let client = self.client.clone();
            let req = RunRequest {
                mode: Some(StartupMode::Restore),
                bundle_location: Some(bundle),
                ..RunRequest::default()
            };
            let op = thread::spawn(move || client.run(&req));
            let hit = self.wait_phase("restoring", before.service_pid)?;
            if let Some(s) = &hit {
                send_signal(s.service_pid.expect("checked"), sig);
            }
            let r = op.join().expect("restore thread panicked")?;
            if hit.is_none() || r.ok() {
                res.notes.push(format!("attempt {attempt}: restore finished before the signal"));
                continue;
            }
            Self::observe_response(res, &r);
            let after = self.settle(&before)?;
            self.observe(res, &after);
            res.passed = after.current_config.mode == StartupMode::FromScratch
                && after.state_name() == "running";
            return Ok(());
        }
        Err(InjectError::PhaseMissed("restore".into(), PHASE_ATTEMPTS))
    }

    fn app_exit(&self, code: u8, res: &mut InjectionResult) -> Result<(), InjectError> {
        let before = self.ensure_running()?;
        let r = self.client.fault(code)?;
        res.http_status = Some(r.status);
        if !r.ok() {
            return Err(InjectError::Setup(format!(
                "exit injection refused ({}); is the debug API enabled? {}",
                r.status, r.value
            )));
        }
        let after = self.settle(&before)?;
        self.observe(res, &after);
        res.passed = after.current_config.mode == StartupMode::FromScratch
            && after.state_name() == "running"
            && after.current_config.reason == format!("exit-code-{code}:from_scratch");
        Ok(())
    }

    fn corrupt_bundle(&self, res: &mut InjectionResult) -> Result<(), InjectError> {
        let bundle = self.make_bundle(&self.name("corrupt"))?;
        let victim = first_state_file(&bundle)
            .ok_or_else(|| InjectError::Setup("bundle has no state file".into()))?;
        flip_byte(&victim).map_err(|e| InjectError::Setup(format!("{}: {e}", victim.display())))?;
        res.notes.push(format!("flipped a byte of {}", victim.display()));
        let before = self.client.status()?;
        let r = self.client.run(&RunRequest {
            mode: Some(StartupMode::Restore),
            bundle_location: Some(bundle),
            ..RunRequest::default()
        })?;
        Self::observe_response(res, &r);
        let after = self.settle(&before)?;
        self.observe(res, &after);
        res.passed = !r.ok()
            && after.current_config.mode == StartupMode::FromScratch
            && after.state_name() == "running";
        Ok(())
    }

    fn storage_exceed(&self, res: &mut InjectionResult) -> Result<(), InjectError> {
        let before = self.ensure_running()?;
        let root = before.shared_dir.join(self.name("quota"));
        std::fs::create_dir_all(&root)
            .and_then(|_| std::fs::write(root.join(QUOTA_FILE), "64"))
            .map_err(|e| InjectError::Setup(format!("{}: {e}", root.display())))?;
        let rel = root
            .strip_prefix(&before.shared_dir)
            .expect("under shared dir")
            .join("bundle");
        let r = self.client.checkpoint(&CheckpointRequest {
            image_dir: rel,
            leave_running: false,
        });
        let _ = std::fs::remove_file(root.join(QUOTA_FILE));
        let r = r?;
        Self::observe_response(res, &r);
        let after = self.client.status()?;
        self.observe(res, &after);
        let leftover = root.join("bundle").join(COMPLETE_MARKER).exists();
        res.passed = !r.ok()
            && r.value.service_continues == Some(true)
            && after.state_name() == "running"
            && after.service_pid == before.service_pid
            && after.current_config.generation == before.current_config.generation
            && !leftover;
        Ok(())
    }

    fn network_unreachable(&self, res: &mut InjectionResult) -> Result<(), InjectError> {
        let src = self.make_bundle(&self.name("net-src"))?;
        let status = self.client.status()?;
        let dst = status.shared_dir.join(self.name("net"));
        copy_without_marker(&src, &dst).map_err(|e| InjectError::Setup(format!("{}: {e}", dst.display())))?;
        let client = self.client.clone();
        let req = RunRequest {
            mode: Some(StartupMode::Restore),
            bundle_location: Some(dst.clone()),
            await_timeout_ms: Some(600_000),
            ..RunRequest::default()
        };
        let t = Instant::now();
        let op = thread::spawn(move || client.run(&req));
        let mut stayed_blocked = true;
        while t.elapsed() < self.block_window {
            let s = self.client.status()?;
            if op.is_finished() || (s.state_name() != "restoring" && s.state_name() != "standby") {
                stayed_blocked = false;
                break;
            }
            thread::sleep(Duration::from_millis(20));
        }
        std::fs::write(dst.join(COMPLETE_MARKER), b"")
            .map_err(|e| InjectError::Setup(format!("marker: {e}")))?;
        let blocked = t.elapsed();
        let r = op.join().expect("restore thread panicked")?;
        res.blocked_seconds = Some(blocked.as_secs_f64());
        Self::observe_response(res, &r);
        let after = self.client.status()?;
        self.observe(res, &after);
        if !stayed_blocked {
            res.notes.push("restore returned before the bundle was complete".into());
        }
        res.passed = stayed_blocked && r.ok() && after.state_name() == "running";
        Ok(())
    }

    fn hard_kill(&mut self, phase: ExitPhase, res: &mut InjectionResult) -> Result<(), InjectError> {
        let liquidd = self
            .liquidd
            .clone()
            .ok_or_else(|| InjectError::Setup("hard kill needs the liquidd binary".into()))?;
        let mut op = None;
        let before = match phase {
            ExitPhase::Normal => self.ensure_running()?,
            ExitPhase::Checkpoint => {
                self.ensure_running()?;
                let client = self.client.clone();
                let req = CheckpointRequest {
                    image_dir: self.name("kill-ckpt").into(),
                    leave_running: false,
                };
                op = Some(thread::spawn(move || client.checkpoint(&req).map(|_| ())));
                self.wait_phase("checkpointing", None)?
                    .ok_or_else(|| InjectError::PhaseMissed("checkpoint".into(), 1))?
            }
            ExitPhase::Restore => {
                let bundle = self.make_bundle(&self.name("kill-restore"))?;
                let client = self.client.clone();
                let req = RunRequest {
                    mode: Some(StartupMode::Restore),
                    bundle_location: Some(bundle),
                    ..RunRequest::default()
                };
                op = Some(thread::spawn(move || client.run(&req).map(|_| ())));
                self.wait_phase("restoring", None)?
                    .ok_or_else(|| InjectError::PhaseMissed("restore".into(), 1))?
            }
        };
        let config_path = before
            .config_path
            .clone()
            .ok_or_else(|| InjectError::Setup("daemon did not report its config path".into()))?;
        send_signal(before.daemon_pid, libc::SIGKILL as u8);
        if !launch::wait_pid_gone(before.daemon_pid, Duration::from_secs(10)) {
            return Err(InjectError::Setup("daemon survived SIGKILL".into()));
        }
        if let Some(op) = op {
            let _ = op.join();
        }
        let persisted = read_start_option(&before.state_dir.join(START_OPTION_FILE))
            .unwrap_or_else(|m| m.fallback);
        let want_running = persisted.mode != StartupMode::Standby;
        res.notes.push(format!(
            "persisted {} generation {}",
            persisted.mode.as_str(),
            persisted.generation
        ));
        let d = launch::spawn(&liquidd, &config_path, &before.state_dir)?.wait_ready(self.ready_timeout)?;
        self.client = d.client.clone();
        res.address = d.addr.clone();
        let after = self.client.wait_status(self.settle_timeout, |s| {
            if want_running {
                s.state_name() == "running"
            } else {
                s.state_name() == "standby" && s.op_in_flight.is_none()
            }
        })?;
        self.observe(res, &after);
        let orphan_gone = before
            .service_pid
            .map(|p| launch::wait_pid_gone(p, Duration::from_secs(5)))
            .unwrap_or(true);
        if !orphan_gone {
            res.notes.push("old service tree outlived its daemon".into());
        }
        res.passed = after.daemon_pid != before.daemon_pid
            && after.state_name() == if want_running { "running" } else { "standby" }
            && orphan_gone;
        res.relaunched = Some(d);
        Ok(())
    }
}

fn state_matches(mode: StartupMode, state: &str) -> bool {
    match mode {
        StartupMode::Standby => state == "standby",
        StartupMode::FromScratch | StartupMode::Restore => state == "running",
    }
}

fn send_signal(pid: u32, sig: u8) {
    unsafe {
        libc::kill(pid as i32, sig as i32);
    }
}

fn first_state_file(bundle: &Path) -> Option<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![bundle.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).ok()?.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().map(|n| n != MANIFEST_FILE && n != COMPLETE_MARKER) == Some(true) {
                files.push(p);
            }
        }
    }
    files.sort();
    files.into_iter().next()
}

fn flip_byte(path: &Path) -> std::io::Result<()> {
    let mut bytes = std::fs::read(path)?;
    let i = bytes.len() / 2;
    match bytes.get_mut(i) {
        Some(b) => *b ^= 0x01,
        None => bytes.push(b'x'),
    }
    std::fs::write(path, bytes)
}

fn copy_without_marker(src: &Path, dst: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dst)?;
    for e in std::fs::read_dir(src)? {
        let e = e?;
        let to = dst.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_without_marker(&e.path(), &to)?;
        } else if e.file_name() != COMPLETE_MARKER {
            std::fs::copy(e.path(), to)?;
        }
    }
    Ok(())
}
