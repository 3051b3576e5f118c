use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{ControlCommand, ControlResponse, LogRecord};
use super::{Launcher, WorkloadError, WorkloadSpec, WorkloadState};
use crate::lifecycle::DEFAULT_LOG_TAIL;

/// Invoked once, from a background thread, when the root process exits.
pub type ExitCallback = Box<dyn FnOnce(ExitStatus) + Send>;
/// Receives the root's OS pid as soon as it is spawned.
pub type SpawnCallback = Box<dyn FnOnce(u32) + Send>;
/// Receives every raw log line of the workload.
pub type LogSink = Arc<dyn Fn(&str) + Send + Sync>;

pub struct SpawnOptions {
    pub ready_timeout: Duration,
    pub log_tail: usize,
    pub on_exit: Option<ExitCallback>,
    pub on_spawn: Option<SpawnCallback>,
    pub log_sink: Option<LogSink>,
}

impl Default for SpawnOptions {
    fn default() -> Self {
        SpawnOptions {
            ready_timeout: Duration::from_secs(60),
            log_tail: DEFAULT_LOG_TAIL,
            on_exit: None,
            on_spawn: None,
            log_sink: None,
        }
    }
}

#[derive(Debug, Default)]
struct LogBookInner {
    tail: VecDeque<String>,
    bound: usize,
    first: BTreeMap<u32, u64>,
    last: BTreeMap<u32, u64>,
    /// Lines whose counter was not exactly one past the previous one.
    discontinuities: u64,
    total: u64,
}

/// Bounded tail of the workload's log stream plus per-process counters.
#[derive(Debug)]
pub struct LogBook {
    inner: Mutex<LogBookInner>,
}

impl LogBook {
    pub fn new(bound: usize) -> Self {
        LogBook {
            inner: Mutex::new(LogBookInner {
                bound,
                ..LogBookInner::default()
            }),
        }
    }

    pub fn push(&self, line: &str) {
        let mut inner = self.inner.lock().unwrap();
        if let Ok(rec) = serde_json::from_str::<LogRecord>(line) {
            inner.first.entry(rec.pid).or_insert(rec.counter);
            if let Some(prev) = inner.last.insert(rec.pid, rec.counter) {
                if rec.counter != prev + 1 {
                    inner.discontinuities += 1;
                }
            }
        }
        inner.total += 1;
        if inner.tail.len() == inner.bound {
            inner.tail.pop_front();
        }
        if inner.bound > 0 {
            inner.tail.push_back(line.to_string());
        }
    }

    pub fn tail(&self) -> Vec<String> {
        self.inner.lock().unwrap().tail.iter().cloned().collect()
    }

    /// First counter logged by each process since this handle was created.
    pub fn first_counters(&self) -> BTreeMap<u32, u64> {
        self.inner.lock().unwrap().first.clone()
    }

    pub fn last_counters(&self) -> BTreeMap<u32, u64> {
        self.inner.lock().unwrap().last.clone()
    }

    pub fn discontinuities(&self) -> u64 {
        self.inner.lock().unwrap().discontinuities
    }

    pub fn total_lines(&self) -> u64 {
        self.inner.lock().unwrap().total
    }
}

#[derive(Default)]
struct ExitCell {
    status: Mutex<Option<ExitStatus>>,
    cond: Condvar,
}

impl ExitCell {
    fn set(&self, status: ExitStatus) {
        *self.status.lock().unwrap() = Some(status);
        self.cond.notify_all();
    }

    fn get(&self) -> Option<ExitStatus> {
        *self.status.lock().unwrap()
    }

    fn wait(&self, timeout: Duration) -> Option<ExitStatus> {
        let guard = self.status.lock().unwrap();
        let (guard, _) = self
            .cond
            .wait_timeout_while(guard, timeout, |s| s.is_none())
            .unwrap();
        *guard
    }
}

struct Control {
    reader: BufReader<UnixStream>,
    writer: UnixStream,
}

/// A running workload tree owned by one supervisor.
pub struct WorkloadHandle {
    spec: WorkloadSpec,
    vpids: Vec<u32>,
    os_pid: u32,
    control: Mutex<Option<Control>>,
    exit: Arc<ExitCell>,
    logs: Arc<LogBook>,
    initial_counters: Vec<(u32, u64)>,
    paused: Mutex<bool>,
}

impl std::fmt::Debug for WorkloadHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkloadHandle")
            .field("label", &self.spec.label)
            .field("vpids", &self.vpids)
            .field("os_pid", &self.os_pid)
            .finish()
    }
}

impl WorkloadHandle {
    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    /// Virtual PIDs in tree order, root first.
    pub fn vpids(&self) -> &[u32] {
        &self.vpids
    }

    /// Parent/child virtual-PID edges.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        self.vpids[1..].iter().map(|c| (self.vpids[0], *c)).collect()
    }

    /// OS process id of the root process.
    pub fn os_pid(&self) -> u32 {
        self.os_pid
    }

    /// Counters reported when the tree came up.
    pub fn initial_counters(&self) -> &[(u32, u64)] {
        &self.initial_counters
    }

    pub fn logs(&self) -> Arc<LogBook> {
        self.logs.clone()
    }

    pub fn is_running(&self) -> bool {
        self.exit.get().is_none()
    }

    pub fn exit_status(&self) -> Option<ExitStatus> {
        self.exit.get()
    }

    pub fn wait_exit(&self, timeout: Duration) -> Option<ExitStatus> {
        self.exit.wait(timeout)
    }

    /// Deliver `signal` to the root process.
    pub fn signal(&self, signal: i32) -> std::io::Result<()> {
        if !self.is_running() {
            return Err(std::io::Error::other("workload already exited"));
        }
        // SAFETY: plain kill(2) on a pid we spawned and have not reaped.
        let rc = unsafe { libc::kill(self.os_pid as libc::pid_t, signal) };
        if rc == 0 {
            Ok(())
        } else {
            Err(std::io::Error::last_os_error())
        }
    }

    /// Kill the tree without ceremony and wait for it.
    pub fn terminate(&self) {
        if self.signal(libc::SIGKILL).is_ok() {
            self.wait_exit(Duration::from_secs(10));
        }
    }

    fn request(&self, cmd: &ControlCommand) -> Result<ControlResponse, WorkloadError> {
        let mut guard = self.control.lock().unwrap();
        let Some(control) = guard.as_mut() else {
            return Err(WorkloadError::NotRunning);
        };
        let mut line = serde_json::to_vec(cmd).expect("serializable");
        line.push(b'\n');
        let lost = |_| WorkloadError::NotRunning;
        control.writer.write_all(&line).map_err(lost)?;
        control.writer.flush().map_err(lost)?;
        let mut reply = String::new();
        match control.reader.read_line(&mut reply) {
            Ok(0) | Err(_) => {
                *guard = None;
                Err(WorkloadError::NotRunning)
            }
            Ok(_) => serde_json::from_str(&reply)
                .map_err(|e| WorkloadError::Protocol(format!("bad response `{}`: {e}", reply.trim()))),
        }
    }

    /// Ask every process to serialize into `out_dir` and pause. The tree keeps
    /// running (paused) until [`commit_snapshot`](Self::commit_snapshot) or
    /// [`abort_snapshot`](Self::abort_snapshot).
    pub fn prepare_snapshot(&self, out_dir: &Path) -> Result<WorkloadState, WorkloadError> {
        if !self.is_running() {
            return Err(WorkloadError::SnapshotRefused("no running tree".into()));
        }
        let resp = self.request(&ControlCommand::Checkpoint {
            out_dir: out_dir.to_string_lossy().into_owned(),
        })?;
        if resp.ok {
            *self.paused.lock().unwrap() = true;
            return resp
                .state
                .ok_or_else(|| WorkloadError::Protocol("checkpoint reply without state".into()));
        }
        let detail = resp.error.unwrap_or_default();
        Err(match resp.error_kind.as_deref() {
            Some("busy") => WorkloadError::SnapshotRefused(detail),
            Some("storage") | Some("timeout") => WorkloadError::StorageFailure(detail),
            _ => WorkloadError::Protocol(detail),
        })
    }

    /// Terminate the paused tree; returns the root's exit status.
    pub fn commit_snapshot(&self) -> Result<ExitStatus, WorkloadError> {
        if !*self.paused.lock().unwrap() {
            return Err(WorkloadError::Protocol("no prepared snapshot".into()));
        }
        // The root may die before its reply is read.
        let _ = self.request(&ControlCommand::Commit);
        self.wait_exit(Duration::from_secs(30))
            .ok_or_else(|| WorkloadError::Protocol("tree did not exit after commit".into()))
    }

    /// Discard the prepared snapshot and resume ticking.
    pub fn abort_snapshot(&self) -> Result<(), WorkloadError> {
        let resp = self.request(&ControlCommand::Abort)?;
        *self.paused.lock().unwrap() = false;
        if resp.ok {
            Ok(())
        } else {
            Err(WorkloadError::Protocol(resp.error.unwrap_or_default()))
        }
    }

    /// Make the whole tree exit with `code`.
    pub fn force_exit(&self, code: u8) -> Result<ExitStatus, WorkloadError> {
        let _ = self.request(&ControlCommand::Exit { code });
        self.wait_exit(Duration::from_secs(30))
            .ok_or(WorkloadError::NotRunning)
    }

    /// Current counters as reported by the root.
    pub fn counters(&self) -> Result<Vec<(u32, u64)>, WorkloadError> {
        let resp = self.request(&ControlCommand::Status)?;
        resp.counters
            .ok_or_else(|| WorkloadError::Protocol("status without counters".into()))
    }
}

impl Drop for WorkloadHandle {
    fn drop(&mut self) {
        if self.is_running() {
            self.terminate();
        }
    }
}

fn launch(
    launcher: &Launcher,
    spec: &WorkloadSpec,
    control_path: &Path,
    vpids: &[u32],
    resume: Option<&Path>,
    opts: SpawnOptions,
) -> Result<WorkloadHandle, WorkloadError> {
    let fail = |m: String| WorkloadError::SpawnFailure(m);
    let _ = std::fs::remove_file(control_path);
    let listener = UnixListener::bind(control_path)
        .map_err(|e| fail(format!("binding {}: {e}", control_path.display())))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| fail(e.to_string()))?;

    let vpid_list = vpids
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let mut cmd = Command::new(&launcher.program);
    cmd.args(&launcher.args)
        .arg("--role")
        .arg("root")
        .arg("--spec")
        .arg(serde_json::to_string(spec).expect("serializable"))
        .arg("--control")
        .arg(control_path)
        .arg("--vpids")
        .arg(vpid_list);
    if let Some(dir) = resume {
        cmd.arg("--resume").arg(dir);
    }
    cmd.stdin(Stdio::null()).stdout(Stdio::piped());
    let mut child = cmd
        .spawn()
        .map_err(|e| fail(format!("{}: {e}", launcher.program.display())))?;
    let os_pid = child.id();
    if let Some(cb) = opts.on_spawn {
        cb(os_pid);
    }

    let logs = Arc::new(LogBook::new(opts.log_tail));
    let stdout = child.stdout.take().expect("piped");
    let log_thread = {
        let logs = logs.clone();
        let sink = opts.log_sink.clone();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                logs.push(&line);
                if let Some(sink) = &sink {
                    sink(&line);
                }
            }
        })
    };

    let teardown = |child: &mut std::process::Child| {
        let _ = child.kill();
        let _ = child.wait();
        let _ = std::fs::remove_file(control_path);
    };

    let deadline = Instant::now() + opts.ready_timeout;
    let stream = loop {
        match listener.accept() {
            Ok((s, _)) => break s,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if let Ok(Some(status)) = child.try_wait() {
                    let _ = std::fs::remove_file(control_path);
                    return Err(fail(format!("root exited before connecting: {status}")));
                }
                if Instant::now() > deadline {
                    teardown(&mut child);
                    return Err(fail("root never connected".into()));
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => {
                teardown(&mut child);
                return Err(fail(e.to_string()));
            }
        }
    };
    let _ = std::fs::remove_file(control_path);
    stream
        .set_nonblocking(false)
        .map_err(|e| fail(e.to_string()))?;
    stream
        .set_read_timeout(Some(opts.ready_timeout))
        .map_err(|e| fail(e.to_string()))?;

    let writer = stream.try_clone().map_err(|e| fail(e.to_string()))?;
    let mut reader = BufReader::new(stream);
    let mut hello = String::new();
    let hello: ControlResponse = match reader.read_line(&mut hello) {
        Ok(n) if n > 0 => serde_json::from_str(&hello)
            .map_err(|e| fail(format!("bad hello `{}`: {e}", hello.trim())))?,
        _ => {
            teardown(&mut child);
            return Err(fail("root closed control channel during startup".into()));
        }
    };
    if !hello.ok {
        teardown(&mut child);
        let detail = hello.error.unwrap_or_default();
        return Err(match hello.error_kind.as_deref() {
            Some("corrupt") => WorkloadError::CorruptSnapshot(detail),
            _ => WorkloadError::SpawnFailure(detail),
        });
    }
    // Commands after startup may legitimately take long (state I/O latency).
    let _ = reader.get_ref().set_read_timeout(Some(Duration::from_secs(120)));

    let exit = Arc::new(ExitCell::default());
    {
        let exit = exit.clone();
        let on_exit = opts.on_exit;
        thread::spawn(move || {
            let status = child.wait().expect("wait on spawned child");
            let _ = log_thread.join();
            exit.set(status);
            if let Some(cb) = on_exit {
                cb(status);
            }
        });
    }

    Ok(WorkloadHandle {
        spec: spec.clone(),
        vpids: vpids.to_vec(),
        os_pid,
        control: Mutex::new(Some(Control { reader, writer })),
        exit,
        logs,
        initial_counters: hello.counters.unwrap_or_default(),
        paused: Mutex::new(false),
    })
}

/// Start a fresh workload tree whose processes carry `vpids` (root first).
pub fn spawn_workload(
    launcher: &Launcher,
    spec: &WorkloadSpec,
    control_channel: &Path,
    vpids: &[u32],
    opts: SpawnOptions,
) -> Result<WorkloadHandle, WorkloadError> {
    spec.validate()
        .map_err(|e| WorkloadError::SpawnFailure(e.to_string()))?;
    if vpids.len() != spec.process_count as usize {
        return Err(WorkloadError::SpawnFailure(format!(
            "{} pids given for {} processes",
            vpids.len(),
            spec.process_count
        )));
    }
    launch(launcher, spec, control_channel, vpids, None, opts)
}

/// Serialize the tree into `out_dir` and terminate it (stop-and-copy).
pub fn workload_snapshot(
    handle: &WorkloadHandle,
    out_dir: &Path,
) -> Result<WorkloadState, WorkloadError> {
    let state = handle.prepare_snapshot(out_dir)?;
    handle.commit_snapshot()?;
    Ok(state)
}

/// Respawn a tree from the snapshot in `in_dir`. Every original virtual PID
/// must appear in `pid_assignments`.
pub fn workload_resume(
    launcher: &Launcher,
    state: &WorkloadState,
    in_dir: &Path,
    pid_assignments: &BTreeMap<u32, u32>,
    control_channel: &Path,
    opts: SpawnOptions,
) -> Result<WorkloadHandle, WorkloadError> {
    let mut vpids = Vec::with_capacity(state.processes.len());
    for p in &state.processes {
        match pid_assignments.get(&p.vpid) {
            Some(v) => vpids.push(*v),
            None => {
                return Err(WorkloadError::PidUnavailable(format!(
                    "no pid assigned for original pid {}",
                    p.vpid
                )))
            }
        }
    }
    let on_disk = WorkloadState::load(in_dir)?;
    if &on_disk != state {
        return Err(WorkloadError::CorruptSnapshot(
            "snapshot directory does not match the expected state".into(),
        ));
    }
    launch(launcher, &state.spec, control_channel, &vpids, Some(in_dir), opts)
}
