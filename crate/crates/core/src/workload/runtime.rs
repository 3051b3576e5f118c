//! Code that runs inside workload processes.
//!
//! A launcher program calls [`main`] with its command line. The root process
//! (`--role root`) connects to the supervisor's control socket, spawns the
//! children (`--role child`) by re-executing the same program, and forwards
//! their log lines to its own stdout.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::protocol::{
    ChildCommand, ChildLine, ChildReply, ControlCommand, ControlResponse, LogRecord,
};
use super::{snap_relative, ProcessState, WorkloadSpec, WorkloadState, STATE_DIR, TREE_FILE};
use crate::storage;

const REPLY_TIMEOUT: Duration = Duration::from_secs(60);

static STDOUT: Mutex<()> = Mutex::new(());

fn emit(line: &str) {
    let _guard = STDOUT.lock().unwrap_or_else(|e| e.into_inner());
    let mut out = io::stdout().lock();
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    let _ = out.write_all(&buf);
    let _ = out.flush();
}

fn emit_json<T: serde::Serialize>(value: &T) {
    emit(&serde_json::to_string(value).expect("serializable"));
}

fn terminate_by_signal(sig: i32) -> ! {
    let _ = io::stdout().flush();
    // SAFETY: raise only delivers a signal to the calling thread.
    unsafe {
        libc::signal(sig, libc::SIG_DFL);
        libc::raise(sig);
    }
    std::process::exit(128 + sig)
}

/// Fill a buffer deterministically from `seed`; returns it with its digest.
pub fn fill_buffer(seed: u64, len: u64) -> (Vec<u8>, String) {
    let mut buf = vec![0u8; len as usize];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    let digest = storage::digest64(&buf);
    (buf, digest)
}

struct Proc {
    vpid: u32,
    index: u32,
    label: String,
    counter: u64,
    seed: u64,
    digest: String,
    _buffer: Vec<u8>,
    spec: WorkloadSpec,
}

impl Proc {
    fn fresh(spec: &WorkloadSpec, vpid: u32, index: u32) -> Self {
        let seed = spec.process_seed(index);
        let (buffer, digest) = fill_buffer(seed, spec.per_process_bytes());
        Proc {
            vpid,
            index,
            label: spec.label.clone(),
            counter: 0,
            seed,
            digest,
            _buffer: buffer,
            spec: spec.clone(),
        }
    }

    /// Rebuild from a snapshot file, verifying the refilled buffer's digest.
    fn resumed(spec: &WorkloadSpec, vpid: u32, snap: &Path) -> Result<Self, String> {
        thread::sleep(Duration::from_millis(spec.state_io_latency_ms));
        let bytes = std::fs::read(snap).map_err(|e| format!("{}: {e}", snap.display()))?;
        let saved: ProcessState =
            serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", snap.display()))?;
        let (buffer, digest) = fill_buffer(saved.seed, saved.buffer_len);
        if digest != saved.digest {
            return Err(format!(
                "digest mismatch for pid {}: expected {}, refilled {}",
                saved.vpid, saved.digest, digest
            ));
        }
        Ok(Proc {
            vpid,
            index: saved.index,
            label: spec.label.clone(),
            counter: saved.counter,
            seed: saved.seed,
            digest,
            _buffer: buffer,
            spec: spec.clone(),
        })
    }

    fn tick(&mut self) {
        self.counter += 1;
        emit_json(&LogRecord {
            ts: chrono::Utc::now().to_rfc3339(),
            pid: self.vpid,
            label: self.label.clone(),
            counter: self.counter,
            level: "info".into(),
        });
    }

    fn state(&self) -> ProcessState {
        ProcessState {
            vpid: self.vpid,
            index: self.index,
            counter: self.counter,
            seed: self.seed,
            buffer_len: self._buffer.len() as u64,
            digest: self.digest.clone(),
        }
    }

    fn dump(&self, out_dir: &Path) -> io::Result<ProcessState> {
        thread::sleep(Duration::from_millis(self.spec.state_io_latency_ms));
        let state = self.state();
        let bytes = serde_json::to_vec(&state).expect("serializable");
        storage::write_file(&out_dir.join(snap_relative(self.vpid)), &bytes)?;
        Ok(state)
    }
}

#[derive(Debug, Default)]
struct Args {
    role: String,
    spec: Option<WorkloadSpec>,
    control: Option<PathBuf>,
    vpids: Vec<u32>,
    vpid: u32,
    index: u32,
    resume: Option<PathBuf>,
    orig_vpid: Option<u32>,
    /// Arguments preceding `--role`, reused to launch children.
    prefix: Vec<String>,
    program: PathBuf,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    let role_at = argv
        .iter()
        .position(|a| a == "--role")
        .ok_or("missing --role")?;
    let mut args = Args {
        prefix: argv[1..role_at].to_vec(),
        program: std::env::current_exe().map_err(|e| e.to_string())?,
        ..Args::default()
    };
    let mut it = argv[role_at..].iter();
    while let Some(flag) = it.next() {
        let v = it.next().ok_or_else(|| format!("{flag} needs a value"))?;
        let num = |v: &String| v.parse::<u32>().map_err(|e| format!("{flag}: {e}"));
        match flag.as_str() {
            "--role" => args.role = v.clone(),
            "--spec" => args.spec = Some(serde_json::from_str(v).map_err(|e| e.to_string())?),
            "--control" => args.control = Some(PathBuf::from(v)),
            "--vpids" => {
                args.vpids = v
                    .split(',')
                    .map(|s| s.parse::<u32>().map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            "--vpid" => args.vpid = num(v)?,
            "--index" => args.index = num(v)?,
            "--resume" => args.resume = Some(PathBuf::from(v)),
            "--orig-vpid" => args.orig_vpid = Some(num(v)?),
            other => return Err(format!("unknown flag {other}")),
        }
    }
    Ok(args)
}

/// Entry point for workload processes. Returns the exit code.
pub fn main(argv: Vec<String>) -> i32 {
    // The Rust runtime's stack-overflow handler survives a SIGSEGV or SIGBUS
    // sent with kill(2). Workloads must die from them like any program.
    unsafe {
        libc::signal(libc::SIGSEGV, libc::SIG_DFL);
        libc::signal(libc::SIGBUS, libc::SIG_DFL);
    }
    let args = match parse_args(&argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("workload: {e}");
            return 2;
        }
    };
    let Some(spec) = args.spec.clone() else {
        eprintln!("workload: missing --spec");
        return 2;
    };
    match args.role.as_str() {
        "root" => run_root(args, spec),
        "child" => run_child(args, spec),
        other => {
            eprintln!("workload: unknown role {other}");
            2
        }
    }
}

enum ChildEvent {
    Cmd(ChildCommand),
    Eof,
}

fn run_child(args: Args, spec: WorkloadSpec) -> i32 {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if let Ok(cmd) = serde_json::from_str::<ChildCommand>(&line) {
                if tx.send(ChildEvent::Cmd(cmd)).is_err() {
                    return;
                }
            }
        }
        let _ = tx.send(ChildEvent::Eof);
    });

    let mut proc = match (&args.resume, args.orig_vpid) {
        (Some(dir), Some(orig)) => {
            match Proc::resumed(&spec, args.vpid, &dir.join(snap_relative(orig))) {
                Ok(p) => p,
                Err(detail) => {
                    emit_json(&ChildReply::Failed {
                        vpid: args.vpid,
                        kind: "corrupt".into(),
                        detail,
                    });
                    return 1;
                }
            }
        }
        _ => Proc::fresh(&spec, args.vpid, args.index),
    };
    emit_json(&ChildReply::Ready {
        vpid: proc.vpid,
        counter: proc.counter,
    });

    let tick = spec.tick_interval();
    loop {
        proc.tick();
        let deadline = Instant::now() + tick;
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) | Ok(ChildEvent::Eof) => return 1,
                Ok(ChildEvent::Cmd(ChildCommand::Dump { out_dir })) => {
                    match proc.dump(Path::new(&out_dir)) {
                        Ok(state) => emit_json(&ChildReply::Dumped { state }),
                        Err(e) => emit_json(&ChildReply::Failed {
                            vpid: proc.vpid,
                            kind: "storage".into(),
                            detail: e.to_string(),
                        }),
                    }
                    // Paused until the root decides.
                    match rx.recv() {
                        Ok(ChildEvent::Cmd(ChildCommand::Commit)) => {
                            terminate_by_signal(libc::SIGTERM)
                        }
                        Ok(ChildEvent::Cmd(ChildCommand::Resume)) => {}
                        Ok(ChildEvent::Cmd(ChildCommand::Exit { code })) => return i32::from(code),
                        _ => return 1,
                    }
                }
                Ok(ChildEvent::Cmd(ChildCommand::Exit { code })) => return i32::from(code),
                Ok(ChildEvent::Cmd(_)) => {}
            }
        }
    }
}

enum RootEvent {
    Control(ControlCommand),
    ControlClosed,
    Child(ChildReply),
    ChildGone(usize),
}

struct ChildProc {
    child: Child,
    stdin: ChildStdin,
    vpid: u32,
}

impl ChildProc {
    fn send(&mut self, cmd: &ChildCommand) {
        let mut line = serde_json::to_vec(cmd).expect("serializable");
        line.push(b'\n');
        let _ = self.stdin.write_all(&line);
        let _ = self.stdin.flush();
    }
}

struct Root {
    proc: Proc,
    children: Vec<ChildProc>,
    rx: Receiver<RootEvent>,
    control: UnixStream,
    /// Last counter seen per child, from forwarded log lines.
    last_counters: std::sync::Arc<Mutex<BTreeMap<u32, u64>>>,
    expect_exit: bool,
}

fn run_root(args: Args, spec: WorkloadSpec) -> i32 {
    let Some(control_path) = args.control.clone() else {
        eprintln!("workload: root needs --control");
        return 2;
    };
    let control = match UnixStream::connect(&control_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("workload: cannot connect control socket: {e}");
            return 2;
        }
    };
    if args.vpids.len() != spec.process_count as usize {
        eprintln!("workload: --vpids must list {} pids", spec.process_count);
        return 2;
    }

    // Original pids, in tree order, when resuming.
    let resume_state = match &args.resume {
        Some(dir) => match WorkloadState::load(dir) {
            Ok(s) => Some(s),
            Err(e) => {
                hello_error(&control, "corrupt", e.to_string());
                return 1;
            }
        },
        None => None,
    };

    let (tx, rx) = mpsc::channel();
    let last_counters = std::sync::Arc::new(Mutex::new(BTreeMap::new()));
    let mut children = Vec::new();
    for index in 1..spec.process_count {
        let vpid = args.vpids[index as usize];
        let mut cmd = Command::new(&args.program);
        cmd.args(&args.prefix)
            .arg("--role")
            .arg("child")
            .arg("--spec")
            .arg(serde_json::to_string(&spec).expect("serializable"))
            .arg("--vpid")
            .arg(vpid.to_string())
            .arg("--index")
            .arg(index.to_string());
        if let (Some(dir), Some(state)) = (&args.resume, &resume_state) {
            cmd.arg("--resume")
                .arg(dir)
                .arg("--orig-vpid")
                .arg(state.processes[index as usize].vpid.to_string());
        }
        cmd.stdin(Stdio::piped()).stdout(Stdio::piped());
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                for c in &mut children {
                    kill_child(c);
                }
                hello_error(&control, "spawn", format!("spawning child {index}: {e}"));
                return 1;
            }
        };
        let stdout = child.stdout.take().expect("piped");
        let stdin = child.stdin.take().expect("piped");
        let tx = tx.clone();
        let slot = children.len();
        let counters = last_counters.clone();
        thread::spawn(move || forward_child(stdout, slot, tx, counters));
        children.push(ChildProc { child, stdin, vpid });
    }

    let proc = match (&args.resume, &resume_state) {
        (Some(dir), Some(state)) => {
            match Proc::resumed(&spec, args.vpids[0], &dir.join(snap_relative(state.processes[0].vpid))) {
                Ok(p) => p,
                Err(e) => {
                    for c in &mut children {
                        kill_child(c);
                    }
                    hello_error(&control, "corrupt", e);
                    return 1;
                }
            }
        }
        _ => Proc::fresh(&spec, args.vpids[0], 0),
    };

    let mut root = Root {
        proc,
        children,
        rx,
        control,
        last_counters,
        expect_exit: false,
    };

    // Wait for every child to come up before greeting the supervisor.
    // Counters as of startup, before any child ticks.
    let mut ready = BTreeMap::new();
    let deadline = Instant::now() + REPLY_TIMEOUT;
    while ready.len() < root.children.len() {
        let wait = deadline.saturating_duration_since(Instant::now());
        match root.rx.recv_timeout(wait) {
            Ok(RootEvent::Child(ChildReply::Ready { vpid, counter })) => {
                ready.insert(vpid, counter);
            }
            Ok(RootEvent::Child(ChildReply::Failed { kind, detail, .. })) => {
                root.kill_children();
                hello_error(&root.control, &kind, detail);
                return 1;
            }
            Ok(RootEvent::ChildGone(i)) => {
                root.kill_children();
                hello_error(&root.control, "spawn", format!("child {i} exited during startup"));
                return 1;
            }
            Ok(_) => {}
            Err(_) => {
                root.kill_children();
                hello_error(&root.control, "spawn", "children did not report ready");
                return 1;
            }
        }
    }

    let mut hello = ControlResponse::ok();
    let mut initial = vec![(root.proc.vpid, root.proc.counter)];
    initial.extend(root.children.iter().map(|c| (c.vpid, ready[&c.vpid])));
    hello.counters = Some(initial);
    if root.respond(&hello).is_err() {
        root.kill_children();
        return 1;
    }

    let reader = match root.control.try_clone() {
        Ok(s) => s,
        Err(_) => {
            root.kill_children();
            return 1;
        }
    };
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let Ok(line) = line else { break };
            match serde_json::from_str::<ControlCommand>(&line) {
                Ok(cmd) => {
                    if tx.send(RootEvent::Control(cmd)).is_err() {
                        return;
                    }
                }
                Err(e) => eprintln!("workload: bad control command: {e}"),
            }
        }
        let _ = tx.send(RootEvent::ControlClosed);
    });

    root.run()
}

fn hello_error(control: &UnixStream, kind: &str, detail: impl Into<String>) {
    let mut w = control;
    let mut line = serde_json::to_vec(&ControlResponse::err(kind, detail)).expect("serializable");
    line.push(b'\n');
    let _ = w.write_all(&line);
}

fn kill_child(c: &mut ChildProc) {
    let _ = c.child.kill();
    let _ = c.child.wait();
}

fn forward_child(
    stdout: std::process::ChildStdout,
    slot: usize,
    tx: Sender<RootEvent>,
    counters: std::sync::Arc<Mutex<BTreeMap<u32, u64>>>,
) {
    for line in BufReader::new(stdout).lines() {
        let Ok(line) = line else { break };
        match serde_json::from_str::<ChildLine>(&line) {
            Ok(ChildLine::Log(rec)) => {
                counters.lock().unwrap().insert(rec.pid, rec.counter);
                emit(&line);
            }
            Ok(ChildLine::Reply(reply)) => {
                if tx.send(RootEvent::Child(reply)).is_err() {
                    return;
                }
            }
            Err(_) => emit(&line),
        }
    }
    let _ = tx.send(RootEvent::ChildGone(slot));
}

impl Root {
    fn respond(&mut self, resp: &ControlResponse) -> io::Result<()> {
        let mut line = serde_json::to_vec(resp).expect("serializable");
        line.push(b'\n');
        self.control.write_all(&line)?;
        self.control.flush()
    }

    fn counters(&self) -> Vec<(u32, u64)> {
        let map = self.last_counters.lock().unwrap();
        let mut out = vec![(self.proc.vpid, self.proc.counter)];
        out.extend(self.children.iter().map(|c| (c.vpid, map.get(&c.vpid).copied().unwrap_or(0))));
        out
    }

    fn kill_children(&mut self) {
        for c in &mut self.children {
            kill_child(c);
        }
    }

    fn broadcast(&mut self, cmd: &ChildCommand) {
        for c in &mut self.children {
            c.send(cmd);
        }
    }

    fn edges(&self) -> Vec<(u32, u32)> {
        self.children.iter().map(|c| (self.proc.vpid, c.vpid)).collect()
    }

    /// A child died outside of a commit: take the tree down with it.
    fn child_died(&mut self, slot: usize) -> i32 {
        use std::os::unix::process::ExitStatusExt;
        let status = self.children[slot].child.wait().ok();
        for (i, c) in self.children.iter_mut().enumerate() {
            if i != slot {
                kill_child(c);
            }
        }
        match status {
            Some(s) if s.signal().is_some() => terminate_by_signal(s.signal().unwrap()),
            Some(s) => s.code().unwrap_or(1).max(1),
            None => 1,
        }
    }

    fn run(mut self) -> i32 {
        let tick = self.proc.spec.tick_interval();
        loop {
            self.proc.tick();
            let deadline = Instant::now() + tick;
            loop {
                let wait = deadline.saturating_duration_since(Instant::now());
                let event = match self.rx.recv_timeout(wait) {
                    Err(RecvTimeoutError::Timeout) => break,
                    Err(RecvTimeoutError::Disconnected) => return 1,
                    Ok(e) => e,
                };
                if let Some(code) = self.handle(event) {
                    return code;
                }
            }
        }
    }

    /// Handle one event while ticking. `Some(code)` ends the process.
    fn handle(&mut self, event: RootEvent) -> Option<i32> {
        match event {
            RootEvent::ControlClosed => {
                self.kill_children();
                Some(1)
            }
            RootEvent::ChildGone(slot) => {
                if self.expect_exit {
                    None
                } else {
                    Some(self.child_died(slot))
                }
            }
            RootEvent::Child(_) => None,
            RootEvent::Control(cmd) => match cmd {
                ControlCommand::Status => {
                    let mut r = ControlResponse::ok();
                    r.counters = Some(self.counters());
                    let _ = self.respond(&r);
                    None
                }
                ControlCommand::Commit | ControlCommand::Abort => {
                    let _ = self.respond(&ControlResponse::err("protocol", "no checkpoint in progress"));
                    None
                }
                ControlCommand::Exit { code } => Some(self.exit_tree(code)),
                ControlCommand::Checkpoint { out_dir } => self.checkpoint(PathBuf::from(out_dir)),
            },
        }
    }

    fn exit_tree(&mut self, code: u8) -> i32 {
        self.expect_exit = true;
        self.broadcast(&ChildCommand::Exit { code });
        for c in &mut self.children {
            let _ = c.child.wait();
        }
        let _ = self.respond(&ControlResponse::ok());
        i32::from(code)
    }

    fn checkpoint(&mut self, out_dir: PathBuf) -> Option<i32> {
        let state_dir = out_dir.join(STATE_DIR);
        if let Err(e) = std::fs::create_dir_all(&state_dir) {
            let _ = self.respond(&ControlResponse::err("storage", format!("{}: {e}", state_dir.display())));
            return None;
        }
        self.broadcast(&ChildCommand::Dump {
            out_dir: out_dir.to_string_lossy().into_owned(),
        });
        let mut failure: Option<(String, String)> = None;
        let mut states = BTreeMap::new();
        match self.proc.dump(&out_dir) {
            Ok(s) => {
                states.insert(s.vpid, s);
            }
            Err(e) => failure = Some(("storage".into(), e.to_string())),
        }

        let mut pending = self.children.len();
        let deadline = Instant::now() + REPLY_TIMEOUT;
        while pending > 0 {
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(wait) {
                Ok(RootEvent::Child(ChildReply::Dumped { state })) => {
                    states.insert(state.vpid, state);
                    pending -= 1;
                }
                Ok(RootEvent::Child(ChildReply::Failed { kind, detail, .. })) => {
                    failure.get_or_insert((kind, detail));
                    pending -= 1;
                }
                Ok(RootEvent::ChildGone(slot)) => return Some(self.child_died(slot)),
                Ok(RootEvent::ControlClosed) => {
                    self.kill_children();
                    return Some(1);
                }
                Ok(RootEvent::Control(_)) => {
                    let _ = self.respond(&ControlResponse::err("busy", "checkpoint in progress"));
                }
                Ok(RootEvent::Child(ChildReply::Ready { .. })) => {}
                Err(_) => {
                    failure.get_or_insert(("timeout".into(), "children did not dump in time".into()));
                    break;
                }
            }
        }

        let mut snapshot = None;
        if failure.is_none() {
            let mut processes = vec![states.remove(&self.proc.vpid).expect("root state")];
            for c in &self.children {
                processes.push(states.remove(&c.vpid).expect("child state"));
            }
            let state = WorkloadState {
                spec: self.proc.spec.clone(),
                processes,
                edges: self.edges(),
            };
            let bytes = serde_json::to_vec_pretty(&state).expect("serializable");
            match storage::write_file(&out_dir.join(TREE_FILE), &bytes) {
                Ok(()) => snapshot = Some(state),
                Err(e) => failure = Some(("storage".into(), e.to_string())),
            }
        }

        let Some(state) = snapshot else {
            self.discard(&out_dir);
            self.broadcast(&ChildCommand::Resume);
            let (kind, detail) = failure.expect("failure recorded");
            let _ = self.respond(&ControlResponse::err(&kind, detail));
            return None;
        };

        let mut resp = ControlResponse::ok();
        resp.state = Some(state);
        if self.respond(&resp).is_err() {
            self.discard(&out_dir);
            self.kill_children();
            return Some(1);
        }
        self.await_decision(&out_dir)
    }

    fn discard(&self, out_dir: &Path) {
        let mut vpids = vec![self.proc.vpid];
        vpids.extend(self.children.iter().map(|c| c.vpid));
        for v in vpids {
            let _ = std::fs::remove_file(out_dir.join(snap_relative(v)));
        }
        let _ = std::fs::remove_file(out_dir.join(TREE_FILE));
        let _ = std::fs::remove_dir(out_dir.join(STATE_DIR));
    }

    /// Paused after a successful dump: no ticks until commit or abort.
    fn await_decision(&mut self, out_dir: &Path) -> Option<i32> {
        loop {
            let event = match self.rx.recv() {
                Ok(e) => e,
                Err(_) => return Some(1),
            };
            match event {
                RootEvent::Control(ControlCommand::Commit) => {
                    self.expect_exit = true;
                    self.broadcast(&ChildCommand::Commit);
                    for c in &mut self.children {
                        let _ = c.child.wait();
                    }
                    let _ = self.respond(&ControlResponse::ok());
                    terminate_by_signal(libc::SIGTERM);
                }
                RootEvent::Control(ControlCommand::Abort) => {
                    self.discard(out_dir);
                    self.broadcast(&ChildCommand::Resume);
                    let _ = self.respond(&ControlResponse::ok());
                    return None;
                }
                RootEvent::Control(ControlCommand::Exit { code }) => return Some(self.exit_tree(code)),
                RootEvent::Control(ControlCommand::Status) => {
                    let mut r = ControlResponse::ok();
                    r.counters = Some(self.counters());
                    let _ = self.respond(&r);
                }
                RootEvent::Control(_) => {
                    let _ = self.respond(&ControlResponse::err("busy", "awaiting commit or abort"));
                }
                RootEvent::ControlClosed => {
                    self.kill_children();
                    return Some(1);
                }
                RootEvent::ChildGone(slot) => return Some(self.child_died(slot)),
                RootEvent::Child(_) => {}
            }
        }
    }
}
