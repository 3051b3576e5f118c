//! Owner of the service lifecycle. One service per daemon; the daemon never
//! restarts itself to restart the service.

use std::path::{Component, Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, TryLockError, Weak};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use liquid_core::engine::{Engine, EngineConfig, EngineError};
use liquid_core::fault_policy::{self, Decision};
use liquid_core::lifecycle::{self, ExitPhase, LifecycleEvent};
use liquid_core::start_option::{self, StartOptionConfig, START_OPTION_FILE};
use liquid_core::workload::{Launcher, LogBook, SpawnOptions, WorkloadHandle, WorkloadSpec};
use liquid_core::{ExitReport, ServiceState, StartupMode, VirtualPidSpace};

use super::config::DaemonConfig;
use super::ipc;
use super::metrics::{self, Metrics};
use crate::wire::{
    CheckpointRequest, CompletionRecord, CounterView, DaemonStatus, MigrationSummary, OpResponse,
    RunRequest,
};

/// Exit code recorded when a restore fails, whatever the cause.
pub const RESTORE_FAILURE_CODE: u8 = 3;
/// Exit code recorded when a fresh start fails before the service runs.
pub const START_FAILURE_CODE: u8 = 1;

const HOOK_TIMEOUT: Duration = Duration::from_secs(30);

/// Result of a mutating operation, ready to become an HTTP response.
#[derive(Debug, Clone)]
pub struct OpResult {
    pub http_status: u16,
    pub body: OpResponse,
    /// A completion record was written for this operation.
    pub signalled: bool,
}

impl OpResult {
    fn rejected(status: u16, kind: &str, detail: impl Into<String>) -> Self {
        OpResult {
            http_status: status,
            body: OpResponse::rejected(kind, detail),
            signalled: false,
        }
    }
}

struct Inner {
    handle: Option<WorkloadHandle>,
    /// Identifies the current service instance in exit events.
    token: u64,
    space: VirtualPidSpace,
    /// Last persisted (or loaded) start option, with the running command.
    config: StartOptionConfig,
    latest_bundle: Option<PathBuf>,
    starts: u64,
}

struct StatusCell {
    service_state: ServiceState,
    phase: ExitPhase,
    current_config: StartOptionConfig,
    restart_count: u64,
    service_pid: Option<u32>,
    service_vpids: Vec<u32>,
    last_migration: Option<MigrationSummary>,
    latest_bundle: Option<PathBuf>,
    op_in_flight: Option<String>,
    logs: Option<Arc<LogBook>>,
    initial_counters: Vec<(u32, u64)>,
}

enum Event {
    Exited { token: u64, status: ExitStatus },
}

struct StartInfo {
    vpids: Vec<u32>,
    initial_counters: Vec<(u32, u64)>,
    fork_iterations: u64,
    direct_writes: u64,
    simulated_fork: Duration,
    /// Part of `simulated_fork` that was accounted rather than slept.
    accounted_fork: Duration,
}

pub struct Supervisor {
    cfg: DaemonConfig,
    config_path: Option<PathBuf>,
    engine: Engine,
    op: Mutex<Inner>,
    status: RwLock<StatusCell>,
    metrics: Metrics,
    events: Sender<Event>,
    start_time: DateTime<Utc>,
    op_seq: AtomicU64,
    drop_next_completion: AtomicBool,
    exits: AtomicU64,
    this: Weak<Supervisor>,
}

impl Supervisor {
    pub fn new(
        cfg: DaemonConfig,
        config_path: Option<PathBuf>,
        launcher: Launcher,
        start_time: DateTime<Utc>,
    ) -> Result<Arc<Self>, String> {
        let space = VirtualPidSpace::new(cfg.pid_space).map_err(|e| e.to_string())?;
        let socket_dir = cfg.state_dir.join("run");
        std::fs::create_dir_all(&socket_dir)
            .map_err(|e| format!("{}: {e}", socket_dir.display()))?;
        let mut ecfg = EngineConfig::new(launcher, socket_dir);
        ecfg.fork_cost = cfg.fork_cost();
        ecfg.fork_cost_mode = cfg.fork_cost_mode;
        let (tx, rx) = mpsc::channel();
        let initial = StartOptionConfig::standby_default();
        let sup = Arc::new_cyclic(|this| Supervisor {
            engine: Engine::new(ecfg),
            op: Mutex::new(Inner {
                handle: None,
                token: 0,
                space,
                config: initial.clone(),
                latest_bundle: None,
                starts: 0,
            }),
            status: RwLock::new(StatusCell {
                service_state: ServiceState::Standby,
                phase: ExitPhase::Normal,
                current_config: initial,
                restart_count: 0,
                service_pid: None,
                service_vpids: Vec::new(),
                last_migration: None,
                latest_bundle: None,
                op_in_flight: None,
                logs: None,
                initial_counters: Vec::new(),
            }),
            metrics: Metrics::default(),
            events: tx,
            start_time,
            op_seq: AtomicU64::new(0),
            drop_next_completion: AtomicBool::new(false),
            exits: AtomicU64::new(0),
            cfg,
            config_path,
            this: this.clone(),
        });
        let weak = Arc::downgrade(&sup);
        thread::Builder::new()
            .name("supervise".into())
            .spawn(move || supervise_loop(weak, rx))
            .map_err(|e| e.to_string())?;
        Ok(sup)
    }

    pub fn config(&self) -> &DaemonConfig {
        &self.cfg
    }

    pub fn start_option_path(&self) -> PathBuf {
        self.cfg.state_dir.join(START_OPTION_FILE)
    }

    pub fn next_op_id(&self) -> String {
        let n = self.op_seq.fetch_add(1, Ordering::Relaxed) + 1;
        format!("op-{}-{n}", std::process::id())
    }

    /// Skip the next completion record (fault injection).
    pub fn drop_next_completion(&self) {
        self.drop_next_completion.store(true, Ordering::SeqCst);
    }

    pub fn metrics_text(&self) -> String {
        let restarts = self.status.read().unwrap().restart_count as f64;
        self.metrics.render(&[
            ("service_restart_count", restarts),
            ("daemon_start_time_seconds", self.start_time.timestamp() as f64),
        ])
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    /// Snapshot of the daemon; never waits on the operation lock.
    pub fn status(&self) -> DaemonStatus {
        let st = self.status.read().unwrap();
        let counters = st.logs.as_ref().map(|logs| CounterView {
            initial: st.initial_counters.iter().copied().collect(),
            first_logged: logs.first_counters(),
            last_logged: logs.last_counters(),
            discontinuities: logs.discontinuities(),
            log_lines: logs.total_lines(),
        });
        DaemonStatus {
            service_state: st.service_state.clone(),
            phase: st.phase,
            current_config: st.current_config.clone(),
            daemon_start_time: self.start_time,
            daemon_pid: std::process::id(),
            service_restart_count: st.restart_count,
            service_pid: st.service_pid,
            service_vpids: st.service_vpids.clone(),
            last_migration: st.last_migration.clone(),
            latest_bundle: st.latest_bundle.clone(),
            counters,
            op_in_flight: st.op_in_flight.clone(),
            state_dir: self.cfg.state_dir.clone(),
            shared_dir: self.cfg.shared_dir.clone(),
            config_path: self.config_path.clone(),
            exits_observed: self.exits.load(Ordering::SeqCst),
        }
    }

    fn set_status(&self, f: impl FnOnce(&mut StatusCell)) {
        f(&mut self.status.write().unwrap());
    }

    fn transition(&self, event: LifecycleEvent) {
        let mut st = self.status.write().unwrap();
        match lifecycle::transition(&st.service_state, &event) {
            Ok(next) => {
                tracing::info!(from = st.service_state.name(), to = next.name(), "transition");
                st.service_state = next;
            }
            Err(e) => tracing::warn!(error = %e, "ignored lifecycle event"),
        }
    }

    fn try_op(&self) -> Option<MutexGuard<'_, Inner>> {
        match self.op.try_lock() {
            Ok(g) => Some(g),
            Err(TryLockError::Poisoned(p)) => Some(p.into_inner()),
            Err(TryLockError::WouldBlock) => None,
        }
    }

    fn lock_op(&self) -> MutexGuard<'_, Inner> {
        self.op.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn spawn_opts(&self, token: u64) -> SpawnOptions {
        let events = self.events.clone();
        let this = self.this.clone();
        SpawnOptions {
            log_tail: self.cfg.fault_policy.log_window.max(1),
            on_exit: Some(Box::new(move |status| {
                let _ = events.send(Event::Exited { token, status });
            })),
            on_spawn: Some(Box::new(move |pid| {
                if let Some(sup) = this.upgrade() {
                    sup.set_status(|s| s.service_pid = Some(pid));
                }
            })),
            ..SpawnOptions::default()
        }
    }

    fn install(&self, inner: &mut Inner, handle: WorkloadHandle, command: Vec<String>) {
        inner.config.app_command = command;
        let logs = handle.logs();
        let vpids = handle.vpids().to_vec();
        let initial = handle.initial_counters().to_vec();
        let pid = handle.os_pid();
        inner.handle = Some(handle);
        self.set_status(|s| {
            s.service_pid = Some(pid);
            s.service_vpids = vpids;
            s.logs = Some(logs);
            s.initial_counters = initial;
            s.phase = ExitPhase::Normal;
        });
        self.transition(LifecycleEvent::BecameRunning);
    }

    /// Forget the current service after it exited; returns its log tail.
    fn retire(&self, inner: &mut Inner) -> Vec<String> {
        inner.token += 1;
        let Some(handle) = inner.handle.take() else {
            return Vec::new();
        };
        for p in handle.vpids() {
            inner.space.release(*p);
        }
        self.set_status(|s| {
            s.service_pid = None;
            s.service_vpids.clear();
        });
        handle.logs().tail()
    }

    fn count_start(&self, inner: &mut Inner) {
        inner.starts += 1;
        let restarts = inner.starts.saturating_sub(1);
        self.set_status(|s| s.restart_count = restarts);
    }

    fn start_fresh(&self, inner: &mut Inner, spec: &WorkloadSpec) -> Result<StartInfo, ExitReport> {
        self.count_start(inner);
        inner.token += 1;
        let t = Instant::now();
        match self.engine.spawn(spec, &mut inner.space, self.spawn_opts(inner.token)) {
            Ok(handle) => {
                self.metrics.observe(metrics::START, t.elapsed());
                let info = StartInfo {
                    vpids: handle.vpids().to_vec(),
                    initial_counters: handle.initial_counters().to_vec(),
                    fork_iterations: 0,
                    direct_writes: 0,
                    simulated_fork: Duration::ZERO,
                    accounted_fork: Duration::ZERO,
                };
                self.install(inner, handle, spec.to_command());
                Ok(info)
            }
            Err(e) => {
                tracing::warn!(error = %e, "fresh start failed");
                self.set_status(|s| s.service_pid = None);
                Err(ExitReport::exited(START_FAILURE_CODE, ExitPhase::Normal)
                    .with_log_tail([format!("start failed: {e}")], self.window()))
            }
        }
    }

    fn start_restore(
        &self,
        inner: &mut Inner,
        location: &Path,
        await_timeout: Option<Duration>,
    ) -> Result<StartInfo, (ExitReport, EngineError)> {
        self.count_start(inner);
        inner.token += 1;
        self.set_status(|s| s.phase = ExitPhase::Restore);
        let t = Instant::now();
        let res = self.engine.restore(
            location,
            &mut inner.space,
            await_timeout,
            self.spawn_opts(inner.token),
        );
        match res {
            Ok(out) => {
                let wall = t.elapsed();
                let restore_time = wall + self.accounted_fork_time(out.simulated_fork_time);
                self.metrics.observe(metrics::RESTORE, restore_time);
                self.metrics.add(metrics::FORK_ITERATIONS, out.cost.fork_iterations);
                self.metrics.add(metrics::DIRECT_WRITES, out.cost.direct_writes);
                let migration = liquid_core::engine::bundle::read_manifest(location)
                    .ok()
                    .and_then(|m| (Utc::now() - m.created_at).to_std().ok())
                    .unwrap_or(restore_time);
                self.metrics.observe(metrics::MIGRATION, migration);
                let summary = MigrationSummary {
                    bundle_location: location.to_path_buf(),
                    restore_seconds: restore_time.as_secs_f64(),
                    migration_seconds: migration.as_secs_f64(),
                    fork_iterations: out.cost.fork_iterations,
                    direct_writes: out.cost.direct_writes,
                    completed_at: Utc::now(),
                };
                inner.latest_bundle = Some(location.to_path_buf());
                self.set_status(|s| {
                    s.last_migration = Some(summary);
                    s.latest_bundle = Some(location.to_path_buf());
                });
                let info = StartInfo {
                    vpids: out.handle.vpids().to_vec(),
                    initial_counters: out.handle.initial_counters().to_vec(),
                    fork_iterations: out.cost.fork_iterations,
                    direct_writes: out.cost.direct_writes,
                    simulated_fork: out.simulated_fork_time,
                    accounted_fork: self.accounted_fork_time(out.simulated_fork_time),
                };
                self.install(inner, out.handle, out.state.spec.to_command());
                Ok(info)
            }
            Err(e) => {
                tracing::warn!(error = %e, bundle = %location.display(), "restore failed");
                self.set_status(|s| s.service_pid = None);
                let report = ExitReport::exited(RESTORE_FAILURE_CODE, ExitPhase::Restore)
                    .with_log_tail([format!("restore failed: {e}")], self.window());
                Err((report, e))
            }
        }
    }

    /// Fork time that was accounted rather than slept.
    fn accounted_fork_time(&self, simulated: Duration) -> Duration {
        match self.cfg.fork_cost_mode {
            liquid_core::engine::ForkCostMode::Account => simulated,
            liquid_core::engine::ForkCostMode::Sleep => Duration::ZERO,
        }
    }

    fn window(&self) -> usize {
        self.cfg.fault_policy.log_window.max(1)
    }

    fn spec_for(&self, command: &[String]) -> Option<WorkloadSpec> {
        WorkloadSpec::from_command(command)
            .ok()
            .or_else(|| self.cfg.workload.clone())
    }

    fn persist_quiet(&self, inner: &mut Inner, cfg: StartOptionConfig) {
        match start_option::write_start_option(&cfg, &self.start_option_path()) {
            Ok(written) => inner.config = written,
            Err(e) => {
                tracing::error!(error = %e, "persisting start option");
                inner.config = cfg;
            }
        }
        let current = inner.config.clone();
        self.set_status(|s| s.current_config = current);
    }

    /// Record an exit, decide how to continue, persist, and act on it.
    /// Failed restarts feed back into the loop.
    fn fault_loop(&self, inner: &mut Inner, first: ExitReport) -> Decision {
        let mut report = first;
        let mut failures = 0u32;
        loop {
            self.exits.fetch_add(1, Ordering::SeqCst);
            self.metrics.add(metrics::EXITS, 1);
            tracing::info!(summary = %report.summary(), "service exited");
            self.transition(LifecycleEvent::Exited(report.clone()));
            let window = self.window();
            let logs = report.log_tail.clone();
            let decision = fault_policy::decide_and_persist(
                &self.cfg.fault_policy,
                &report,
                &logs[logs.len().saturating_sub(window)..],
                &inner.config,
                inner.latest_bundle.as_deref(),
                &self.start_option_path(),
            );
            self.metrics.observe(metrics::FAULT_DECISION, decision.elapsed);
            if let Some(f) = &decision.hook_failure {
                tracing::warn!(failure = %f, "fault hook failed; standing by");
            }
            if let Some(f) = &decision.storage_failure {
                tracing::error!(failure = %f, "start option not persisted");
            }
            inner.config = decision.config.clone();
            let current = inner.config.clone();
            self.set_status(|s| s.current_config = current);
            tracing::info!(mode = %decision.config.mode.as_str(), reason = %decision.config.reason, generation = decision.config.generation, "fault decision");

            let mode = decision.config.mode;
            let outcome = match mode {
                StartupMode::Standby => None,
                StartupMode::FromScratch => match self.spec_for(&decision.config.app_command) {
                    Some(spec) => {
                        self.transition(LifecycleEvent::RestartDecided(mode));
                        self.start_fresh(inner, &spec).err()
                    }
                    None => {
                        tracing::warn!("no workload to restart; standing by");
                        self.transition(LifecycleEvent::RestartDecided(StartupMode::Standby));
                        return decision;
                    }
                },
                StartupMode::Restore => {
                    self.transition(LifecycleEvent::RestartDecided(mode));
                    let loc = decision
                        .config
                        .checkpoint_location
                        .clone()
                        .expect("validated restore carries a location");
                    self.start_restore(inner, &loc, self.cfg.restore_await_timeout())
                        .err()
                        .map(|(r, _)| r)
                }
            };
            match outcome {
                None => {
                    if mode == StartupMode::Standby {
                        self.transition(LifecycleEvent::RestartDecided(mode));
                    }
                    return decision;
                }
                Some(next) => {
                    failures += 1;
                    if failures >= self.cfg.consecutive_failure_limit.max(1) {
                        tracing::error!(failures, "restart limit reached; standing by");
                        self.transition(LifecycleEvent::Exited(next));
                        let mut standby = StartOptionConfig::standby("restart-limit");
                        standby.app_command = inner.config.app_command.clone();
                        standby.generation = inner.config.generation;
                        self.persist_quiet(inner, standby);
                        self.transition(LifecycleEvent::RestartDecided(StartupMode::Standby));
                        return decision;
                    }
                    report = next;
                }
            }
        }
    }

    fn on_exit_event(&self, token: u64, status: ExitStatus) {
        let mut inner = self.lock_op();
        if inner.token != token || inner.handle.is_none() {
            return;
        }
        let tail = self.retire(&mut inner);
        let report = ExitReport::from_status(status, ExitPhase::Normal).with_log_tail(tail, self.window());
        self.fault_loop(&mut inner, report);
    }

    /// Act on the persisted start option once at boot.
    pub fn boot_from_persisted(&self) {
        let mut inner = self.lock_op();
        let path = self.start_option_path();
        let cfg = match start_option::read_start_option(&path) {
            Ok(c) => c,
            Err(m) => {
                tracing::warn!(detail = %m.detail, "start option malformed; standing by");
                m.fallback
            }
        };
        inner.latest_bundle = cfg.checkpoint_location.clone();
        inner.config = cfg.clone();
        self.set_status(|s| {
            s.current_config = cfg.clone();
            s.latest_bundle = cfg.checkpoint_location.clone();
        });
        tracing::info!(mode = cfg.mode.as_str(), generation = cfg.generation, "boot");
        let failure = match cfg.mode {
            StartupMode::Standby => None,
            StartupMode::FromScratch => match self.spec_for(&cfg.app_command) {
                Some(spec) => {
                    self.transition(LifecycleEvent::StartRequested);
                    self.start_fresh(&mut inner, &spec).err()
                }
                None => {
                    tracing::warn!("persisted start has no workload; standing by");
                    None
                }
            },
            StartupMode::Restore => {
                let loc = cfg.checkpoint_location.clone().expect("validated");
                self.transition(LifecycleEvent::RestoreRequested);
                self.start_restore(&mut inner, &loc, self.cfg.restore_await_timeout())
                    .err()
                    .map(|(r, _)| r)
            }
        };
        if let Some(report) = failure {
            self.fault_loop(&mut inner, report);
        }
    }

    fn resolve_shared(&self, p: &Path) -> Result<PathBuf, String> {
        if p.components().any(|c| matches!(c, Component::ParentDir)) {
            return Err(format!("{} escapes the shared directory", p.display()));
        }
        let full = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.cfg.shared_dir.join(p)
        };
        if !full.starts_with(&self.cfg.shared_dir) {
            return Err(format!("{} is outside the shared directory", p.display()));
        }
        Ok(full)
    }

    fn finish(&self, op_id: &str, started: Instant, started_at: DateTime<Utc>, mut result: OpResult) -> OpResult {
        let duration = started.elapsed();
        result.body.op_id = op_id.to_string();
        result.body.started_at = Some(started_at);
        result.body.duration_seconds = duration.as_secs_f64();
        result.body.completed_at = Some(Utc::now());
        result.body.service_state = Some(self.status.read().unwrap().service_state.name().into());
        self.set_status(|s| s.op_in_flight = None);
        let rec = CompletionRecord {
            op_id: op_id.to_string(),
            outcome: result.body.outcome.clone(),
            duration_seconds: duration.as_secs_f64(),
        };
        if self.drop_next_completion.swap(false, Ordering::SeqCst) {
            tracing::warn!(op_id, "completion record dropped");
        } else if let Err(e) = ipc::signal_completion(&self.cfg.ipc_path(), &rec) {
            tracing::error!(error = %e, op_id, "writing completion record");
        }
        result.signalled = true;
        result
    }

    /// `POST /run`.
    pub fn run_op(&self, op_id: &str, req: &RunRequest) -> OpResult {
        let Some(mut inner) = self.try_op() else {
            return OpResult::rejected(409, "busy", "another operation is in flight");
        };
        let state = self.status.read().unwrap().service_state.clone();
        if !matches!(state, ServiceState::Standby | ServiceState::Exited { .. }) {
            return OpResult::rejected(409, "running", format!("service is {}", state.name()));
        }
        let mode = match req.mode {
            Some(m) => m,
            None => match inner.config.mode {
                StartupMode::Standby => StartupMode::FromScratch,
                m => m,
            },
        };
        let started = Instant::now();
        let started_at = Utc::now();
        self.set_status(|s| s.op_in_flight = Some(format!("run:{}", mode.as_str())));
        let result = match mode {
            StartupMode::Standby => OpResult {
                http_status: 200,
                body: OpResponse {
                    outcome: "standby".into(),
                    mode: Some(mode),
                    ..OpResponse::default()
                },
                signalled: false,
            },
            StartupMode::FromScratch => {
                let spec = req
                    .workload
                    .clone()
                    .or_else(|| WorkloadSpec::from_command(&req.app_command).ok())
                    .or_else(|| self.spec_for(&inner.config.app_command));
                let Some(spec) = spec else {
                    self.set_status(|s| s.op_in_flight = None);
                    return OpResult::rejected(422, "invalid", "no workload to start");
                };
                if let Err(e) = spec.validate() {
                    self.set_status(|s| s.op_in_flight = None);
                    return OpResult::rejected(422, "invalid", e.to_string());
                }
                self.transition(LifecycleEvent::StartRequested);
                match self.start_fresh(&mut inner, &spec) {
                    Ok(info) => ok_run(mode, info),
                    Err(report) => {
                        let d = self.fault_loop(&mut inner, report.clone());
                        failed_run(mode, "start", &report, d.config)
                    }
                }
            }
            StartupMode::Restore => {
                let loc = match &req.bundle_location {
                    Some(p) => match self.resolve_shared(p) {
                        Ok(p) => Some(p),
                        Err(e) => {
                            self.set_status(|s| s.op_in_flight = None);
                            return OpResult::rejected(422, "invalid", e);
                        }
                    },
                    None => inner
                        .latest_bundle
                        .clone()
                        .or_else(|| inner.config.checkpoint_location.clone()),
                };
                let Some(loc) = loc else {
                    self.set_status(|s| s.op_in_flight = None);
                    return OpResult::rejected(422, "invalid", "restore needs a bundle location");
                };
                let wait = req
                    .await_timeout_ms
                    .map(Duration::from_millis)
                    .or(self.cfg.restore_await_timeout());
                self.transition(LifecycleEvent::RestoreRequested);
                match self.start_restore(&mut inner, &loc, wait) {
                    Ok(info) => ok_run(mode, info),
                    Err((report, e)) => {
                        let d = self.fault_loop(&mut inner, report.clone());
                        let mut r = failed_run(mode, engine_kind(&e), &report, d.config);
                        r.body.error = Some(e.to_string());
                        r
                    }
                }
            }
        };
        drop(inner);
        self.finish(op_id, started, started_at, result)
    }

    /// `POST /checkpoint`.
    pub fn checkpoint_op(&self, op_id: &str, req: &CheckpointRequest) -> OpResult {
        if req.leave_running {
            return OpResult::rejected(422, "invalid", "checkpoints always stop the service");
        }
        let dest = match self.resolve_shared(&req.image_dir) {
            Ok(d) => d,
            Err(e) => return OpResult::rejected(422, "invalid", e),
        };
        let Some(mut inner) = self.try_op() else {
            return OpResult::rejected(409, "busy", "another operation is in flight");
        };
        let running = inner.handle.as_ref().map(|h| h.is_running()).unwrap_or(false);
        if !running || !self.status.read().unwrap().service_state.is_running() {
            return OpResult::rejected(409, "not_running", "service is not running");
        }
        let started = Instant::now();
        let started_at = Utc::now();
        self.set_status(|s| {
            s.op_in_flight = Some("checkpoint".into());
            s.phase = ExitPhase::Checkpoint;
        });
        self.transition(LifecycleEvent::CheckpointRequested);
        let command = inner.config.app_command.clone();
        let res = {
            let handle = inner.handle.as_ref().expect("checked above");
            self.engine.checkpoint(handle, &dest, &command)
        };
        let result = match res {
            Ok(out) => {
                let ckpt = started.elapsed();
                self.metrics.observe(metrics::CHECKPOINT, ckpt);
                inner.latest_bundle = Some(dest.clone());
                self.set_status(|s| s.latest_bundle = Some(dest.clone()));
                let tail = self.retire(&mut inner);
                let report = ExitReport::from_status(out.exit_status, ExitPhase::Checkpoint)
                    .with_log_tail(tail, self.window());
                let fault_log_lines = report.log_tail.len();
                let hooks = self.run_post_checkpoint_hooks(&report, &dest);
                let decision = self.fault_loop(&mut inner, report.clone());
                OpResult {
                    http_status: 200,
                    body: OpResponse {
                        outcome: "checkpointed".into(),
                        bundle_location: Some(dest),
                        checkpoint_duration_seconds: ckpt.as_secs_f64(),
                        hooks_duration_seconds: hooks.as_secs_f64(),
                        fault_decision_seconds: decision.elapsed.as_secs_f64(),
                        fault_log_lines,
                        counters: out.state.counters(),
                        exit_report: Some(strip_tail(report)),
                        next_config: Some(decision.config),
                        ..OpResponse::default()
                    },
                    signalled: false,
                }
            }
            Err(e) => {
                self.metrics.add(metrics::CHECKPOINT_FAILURES, 1);
                let alive = inner.handle.as_ref().map(|h| h.is_running()).unwrap_or(false);
                if e.service_continues() && alive {
                    tracing::warn!(error = %e, "checkpoint aborted; service continues");
                    self.set_status(|s| s.phase = ExitPhase::Normal);
                    self.transition(LifecycleEvent::CheckpointAborted);
                    OpResult {
                        http_status: 500,
                        body: OpResponse {
                            outcome: "failed".into(),
                            error: Some(e.to_string()),
                            error_kind: Some(engine_kind(&e).into()),
                            service_continues: Some(true),
                            ..OpResponse::default()
                        },
                        signalled: false,
                    }
                } else {
                    tracing::warn!(error = %e, "service lost during checkpoint");
                    let status = inner
                        .handle
                        .as_ref()
                        .and_then(|h| h.wait_exit(Duration::from_secs(10)));
                    let tail = self.retire(&mut inner);
                    let report = match status {
                        Some(s) => ExitReport::from_status(s, ExitPhase::Checkpoint),
                        None => ExitReport::signaled(9, ExitPhase::Checkpoint).expect("valid"),
                    }
                    .with_log_tail(tail, self.window());
                    let decision = self.fault_loop(&mut inner, report.clone());
                    OpResult {
                        http_status: 500,
                        body: OpResponse {
                            outcome: "failed".into(),
                            error: Some(e.to_string()),
                            error_kind: Some(engine_kind(&e).into()),
                            service_continues: Some(false),
                            exit_report: Some(strip_tail(report)),
                            next_config: Some(decision.config),
                            ..OpResponse::default()
                        },
                        signalled: false,
                    }
                }
            }
        };
        drop(inner);
        self.finish(op_id, started, started_at, result)
    }

    /// Run the configured shutdown commands in order. Failures are logged.
    fn run_post_checkpoint_hooks(&self, report: &ExitReport, bundle: &Path) -> Duration {
        let t = Instant::now();
        if self.cfg.post_checkpoint_hooks.is_empty() {
            return Duration::ZERO;
        }
        let report_json = serde_json::to_string(&strip_tail(report.clone())).expect("serializable");
        for hook in &self.cfg.post_checkpoint_hooks {
            let Some((program, args)) = hook.split_first() else {
                continue;
            };
            let spawned = Command::new(program)
                .args(args)
                .env("LIQUID_EXIT_REPORT", &report_json)
                .env("LIQUID_BUNDLE_LOCATION", bundle)
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn();
            let mut child = match spawned {
                Ok(c) => c,
                Err(e) => {
                    tracing::warn!(hook = %program, error = %e, "post-checkpoint hook failed to start");
                    continue;
                }
            };
            let deadline = Instant::now() + HOOK_TIMEOUT;
            loop {
                match child.try_wait() {
                    Ok(Some(s)) if s.success() => break,
                    Ok(Some(s)) => {
                        tracing::warn!(hook = %program, status = %s, "post-checkpoint hook failed");
                        break;
                    }
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(2)),
                    Ok(None) | Err(_) => {
                        let _ = child.kill();
                        let _ = child.wait();
                        tracing::warn!(hook = %program, "post-checkpoint hook timed out");
                        break;
                    }
                }
            }
        }
        let d = t.elapsed();
        self.metrics.observe(metrics::HOOKS, d);
        d
    }

    /// Force the running service to exit with `code` (fault injection).
    pub fn inject_exit(&self, code: u8) -> Result<(), (u16, String)> {
        let inner = self.try_op().ok_or((409, "another operation is in flight".to_string()))?;
        let handle = inner
            .handle
            .as_ref()
            .filter(|h| h.is_running())
            .ok_or((409, "service is not running".to_string()))?;
        handle
            .force_exit(code)
            .map(|_| ())
            .map_err(|e| (500, e.to_string()))
    }

    /// Stop the service; used on daemon shutdown.
    pub fn shutdown(&self) {
        if let Some(mut inner) = self.try_op() {
            if let Some(h) = inner.handle.take() {
                h.terminate();
            }
        }
    }
}

fn strip_tail(mut r: ExitReport) -> ExitReport {
    r.log_tail.clear();
    r
}

fn ok_run(mode: StartupMode, info: StartInfo) -> OpResult {
    OpResult {
        http_status: 200,
        body: OpResponse {
            outcome: "running".into(),
            mode: Some(mode),
            vpids: info.vpids,
            initial_counters: info.initial_counters,
            fork_iterations: info.fork_iterations,
            direct_writes: info.direct_writes,
            simulated_fork_seconds: info.simulated_fork.as_secs_f64(),
            accounted_fork_seconds: info.accounted_fork.as_secs_f64(),
            ..OpResponse::default()
        },
        signalled: false,
    }
}

fn failed_run(mode: StartupMode, kind: &str, report: &ExitReport, next: StartOptionConfig) -> OpResult {
    OpResult {
        http_status: 500,
        body: OpResponse {
            outcome: "failed".into(),
            mode: Some(mode),
            error: Some(report.log_tail.join("; ")),
            error_kind: Some(kind.into()),
            exit_report: Some(report.clone()),
            next_config: Some(next),
            ..OpResponse::default()
        },
        signalled: false,
    }
}

fn engine_kind(e: &EngineError) -> &'static str {
    match e {
        EngineError::NotRunning => "not_running",
        EngineError::SnapshotRefused(_) => "snapshot_refused",
        EngineError::StorageFailure { .. } => "storage_failure",
        EngineError::ServiceDied { .. } => "service_died",
        EngineError::BundleExists(_) => "bundle_exists",
        EngineError::CorruptBundle(_) => "corrupt_bundle",
        EngineError::BundleUnavailableTimeout(_) => "bundle_unavailable_timeout",
        EngineError::PidConflict(_) => "pid_conflict",
        EngineError::Workload(_) => "workload",
    }
}

fn supervise_loop(sup: Weak<Supervisor>, rx: Receiver<Event>) {
    for ev in rx {
        let Some(sup) = sup.upgrade() else { return };
        match ev {
            Event::Exited { token, status } => sup.on_exit_event(token, status),
        }
    }
}
