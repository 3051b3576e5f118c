//! Benchmark scenarios: destination startup versus exposed ports, restore
//! cost versus process count, and fault-hook overhead versus hook complexity.

use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use liquid_core::engine::{Engine, EngineConfig, ForkCostMode};
use liquid_core::engine::PidSpaceParams;
use liquid_core::fault_policy::complexity::Complexity;
use liquid_core::fault_policy::FaultPolicy;
use liquid_core::workload::{Launcher, SpawnOptions, WorkloadSpec};
use liquid_core::{StartupMode, VirtualPidSpace};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::client::{Client, ClientError};
use super::launch::{self, LaunchError};
use super::migrate::{self, Destination, MigrationError, MigrationPlan};
use super::report::Table;
use crate::daemon::config::StartupDelayModel;
use crate::daemon::DaemonConfig;
use crate::wire::RunRequest;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Migration(#[from] MigrationError),
    #[error("{0}")]
    Run(String),
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Binaries and scratch space a benchmark needs.
#[derive(Debug, Clone)]
pub struct BenchEnv {
    pub liquidd: PathBuf,
    /// Used as the fault hook by the complexity scenario.
    pub liquidctl: PathBuf,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variable", rename_all = "snake_case")]
pub enum Scenario {
    Ports(PortsScenario),
    ProcessCount(ProcessScenario),
    HandlerComplexity(HandlerScenario),
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let raw = std::fs::read(path).map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&raw).map_err(|e| BenchError::Scenario(format!("{}: {e}", path.display())))
    }

    pub fn repetitions(&self) -> usize {
        match self {
            Scenario::Ports(s) => s.repetitions,
            Scenario::ProcessCount(s) => s.repetitions,
            Scenario::HandlerComplexity(s) => s.repetitions,
        }
    }
}

fn default_reps() -> usize {
    30
}

fn small_workload() -> WorkloadSpec {
    WorkloadSpec {
        process_count: 4,
        memory_footprint_bytes: 256 * 1024,
        tick_interval_ms: 20,
        label: "bench".into(),
        ..WorkloadSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortsScenario {
    #[serde(default = "default_ports")]
    pub values: Vec<u32>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_transfer")]
    pub transfer_delay_seconds: f64,
    #[serde(default)]
    pub startup_delay_model: StartupDelayModel,
    #[serde(default = "small_workload")]
    pub workload: WorkloadSpec,
    /// Run the port levels concurrently.
    #[serde(default = "yes")]
    pub parallel: bool,
}

fn default_ports() -> Vec<u32> {
    vec![0, 10, 50]
}

fn default_transfer() -> f64 {
    3.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessScenario {
    #[serde(default = "default_process_counts")]
    pub values: Vec<u32>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pid_max")]
    pub pid_max: u32,
    #[serde(default = "default_fork_ms")]
    pub fork_cost_ms: f64,
    /// Split evenly across the processes.
    #[serde(default = "default_total_memory")]
    pub total_memory_bytes: u64,
    #[serde(default = "default_io_latency")]
    pub state_io_latency_ms: u64,
}

fn default_process_counts() -> Vec<u32> {
    vec![2, 4, 8, 16]
}

fn default_pid_max() -> u32 {
    32768
}

fn default_fork_ms() -> f64 {
    1.0
}

fn default_total_memory() -> u64 {
    8 * 1024 * 1024
}

fn default_io_latency() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandlerScenario {
    /// `baseline` (built-in logic) or a hook complexity: `o1`, `on`, `on2`, `on3`.
    #[serde(default = "default_handlers")]
    pub values: Vec<String>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_window")]
    pub log_window: usize,
    #[serde(default = "chatty_workload")]
    pub workload: WorkloadSpec,
}

fn default_handlers() -> Vec<String> {
    ["baseline", "o1", "on", "on2", "on3"].map(String::from).to_vec()
}

fn default_window() -> usize {
    2000
}

fn chatty_workload() -> WorkloadSpec {
    WorkloadSpec {
        process_count: 4,
        memory_footprint_bytes: 256 * 1024,
        tick_interval_ms: 2,
        label: "bench".into(),
        ..WorkloadSpec::default()
    }
}

pub const BASELINE: &str = "baseline";

pub fn run(env: &BenchEnv, scenario: &Scenario) -> Result<Table, BenchError> {
    if scenario.repetitions() == 0 {
        return Err(BenchError::Scenario("repetitions must be positive".into()));
    }
    std::fs::create_dir_all(&env.work_dir).map_err(|source| BenchError::Io {
        path: env.work_dir.clone(),
        source,
    })?;
    match scenario {
        Scenario::Ports(s) => ports(env, s),
        Scenario::ProcessCount(s) => process_count(env, s),
        Scenario::HandlerComplexity(s) => handler_complexity(env, s),
    }
}

fn bench_daemon(state_dir: PathBuf, shared: &Path) -> DaemonConfig {
    let mut cfg = DaemonConfig::new(state_dir, shared);
    // Destination namespaces never collide here; skip reservation cost.
    cfg.pid_space.privileged = true;
    cfg
}

fn start_service(client: &Client, workload: &WorkloadSpec) -> Result<(), BenchError> {
    let r = client.run(&RunRequest {
        mode: Some(StartupMode::FromScratch),
        workload: Some(workload.clone()),
        ..RunRequest::default()
    })?;
    if !r.ok() {
        return Err(BenchError::Run(format!("start failed: {:?}", r.value.error)));
    }
    Ok(())
}

const READY: Duration = Duration::from_secs(120);

// ---------------------------------------------------------------- ports

fn ports(env: &BenchEnv, s: &PortsScenario) -> Result<Table, BenchError> {
    if s.values.is_empty() {
        return Err(BenchError::Scenario("no port levels".into()));
    }
    let levels: Vec<Result<Vec<(usize, &'static str, f64)>, BenchError>> = if s.parallel {
        thread::scope(|scope| {
            let hs: Vec<_> = s
                .values
                .iter()
                .map(|&p| scope.spawn(move || ports_level(env, s, p)))
                .collect();
            hs.into_iter().map(|h| h.join().expect("level thread panicked")).collect()
        })
    } else {
        s.values.iter().map(|&p| ports_level(env, s, p)).collect()
    };
    let mut t = Table::new("ports");
    for (p, level) in s.values.iter().zip(levels) {
        for (rep, series, secs) in level? {
            t.push(p, series, rep, secs);
        }
    }
    t.notes.push(format!(
        "startup delay {} + {} x ports s, transfer delay {} s, {} repetitions",
        s.startup_delay_model.base_seconds,
        s.startup_delay_model.per_port_seconds,
        s.transfer_delay_seconds,
        s.repetitions
    ));
    ports_checks(&mut t, s);
    Ok(t)
}

fn ports_level(env: &BenchEnv, s: &PortsScenario, ports: u32) -> Result<Vec<(usize, &'static str, f64)>, BenchError> {
    let base = env.work_dir.join(format!("ports-{ports}"));
    let shared = base.join("shared");
    let mut src_cfg = bench_daemon(base.join("source"), &shared);
    src_cfg.startup_delay_model = StartupDelayModel {
        base_seconds: 0.0,
        per_port_seconds: 0.0,
    };
    let source = launch::launch(&env.liquidd, &src_cfg, READY)?;
    let mut out = Vec::new();
    for rep in 0..s.repetitions {
        let order: [bool; 2] = if rep % 2 == 0 { [false, true] } else { [true, false] };
        for warm in order {
            start_service(&source.client, &s.workload)?;
            let series = if warm { "warm" } else { "cold" };
            let mut dst = bench_daemon(base.join(format!("dest-{rep}-{series}")), &shared);
            dst.startup_delay_model = s.startup_delay_model;
            dst.exposed_ports = ports;
            let (report, dest) = migrate::migrate(MigrationPlan {
                source: source.client.clone(),
                destination: Destination::Launch {
                    liquidd: env.liquidd.clone(),
                    config: Box::new(dst),
                    ready_timeout: READY,
                },
                shared_dir: shared.clone(),
                bundle_name: format!("b-{rep}-{series}"),
                warm,
                transfer_delay: Duration::from_secs_f64(s.transfer_delay_seconds),
                continuity_timeout: None,
            })?;
            drop(dest);
            out.push((rep, series, report.total_seconds));
        }
    }
    Ok(out)
}

fn ports_checks(t: &mut Table, s: &PortsScenario) {
    let per_port = s.startup_delay_model.per_port_seconds;
    let mut cold_ok = true;
    let mut detail = Vec::new();
    for (i, &a) in s.values.iter().enumerate() {
        for &b in &s.values[i + 1..] {
            let (Some(ma), Some(mb)) = (t.mean(&a.to_string(), "cold"), t.mean(&b.to_string(), "cold")) else {
                continue;
            };
            let want = per_port * (b as f64 - a as f64);
            let got = mb - ma;
            cold_ok &= (got - want).abs() <= 0.15;
            detail.push(format!("{a}->{b}: {got:+.3} s (model {want:+.3})"));
        }
    }
    t.check("cold_total_tracks_startup_model", cold_ok, detail.join("; "));

    let warm: Vec<f64> = s.values.iter().filter_map(|p| t.mean(&p.to_string(), "warm")).collect();
    let spread = spread(&warm);
    t.check("warm_total_flat", spread < 0.2, format!("max-min of warm means {spread:.3} s"));

    if let Some(&top) = s.values.iter().max() {
        let cold = t.series(&top.to_string(), "cold");
        let warm = t.series(&top.to_string(), "warm");
        let n = cold.len().min(warm.len());
        let wins = cold.iter().zip(&warm).filter(|(c, w)| w < c).count();
        let need = n - n / 30;
        t.check(
            "warm_beats_cold_at_max_ports",
            n > 0 && wins >= need,
            format!("{wins}/{n} at ports={top} (need {need})"),
        );
    }
}

fn spread(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if xs.is_empty() {
        0.0
    } else {
        max - min
    }
}

// --------------------------------------------------------- process count

fn process_count(env: &BenchEnv, s: &ProcessScenario) -> Result<Table, BenchError> {
    let base = env.work_dir.join("process-count");
    let sockets = base.join("run");
    std::fs::create_dir_all(&sockets).map_err(|source| BenchError::Io {
        path: sockets.clone(),
        source,
    })?;
    let mut ecfg = EngineConfig::new(Launcher::with_args(&env.liquidd, vec!["workload".into()]), &sockets);
    ecfg.fork_cost = Duration::from_secs_f64(s.fork_cost_ms / 1000.0);
    ecfg.fork_cost_mode = ForkCostMode::Account;
    let engine = Engine::new(ecfg);
    let params = |privileged| PidSpaceParams {
        pid_max: s.pid_max,
        privileged,
        ..PidSpaceParams::default()
    };
    let reserved = params(false).reserved_low;
    let mut rng = StdRng::seed_from_u64(s.seed);
    let mut t = Table::new("processes");
    for rep in 0..s.repetitions {
        for &k in &s.values {
            if k == 0 || k >= s.pid_max - reserved {
                return Err(BenchError::Scenario(format!("process count {k} out of range")));
            }
            let vpids: Vec<u32> = rand::seq::index::sample(&mut rng, (s.pid_max - reserved - 1) as usize, k as usize)
                .into_iter()
                .map(|i| reserved + 1 + i as u32)
                .collect();
            let spec = WorkloadSpec {
                process_count: k,
                memory_footprint_bytes: s.total_memory_bytes,
                tick_interval_ms: 100,
                state_io_latency_ms: s.state_io_latency_ms,
                label: "bench".into(),
                seed: s.seed ^ rep as u64,
                ..WorkloadSpec::default()
            };
            let handle = engine
                .spawn_with_pids(&spec, &vpids, SpawnOptions::default())
                .map_err(|e| BenchError::Run(format!("spawn: {e}")))?;
            let bundle = base.join(format!("b-{rep}-{k}"));
            engine
                .checkpoint(&handle, &bundle, &spec.to_command())
                .map_err(|e| BenchError::Run(format!("checkpoint: {e}")))?;
            drop(handle);
            let order = if rep % 2 == 0 { [false, true] } else { [true, false] };
            for privileged in order {
                let mut space = VirtualPidSpace::new(params(privileged)).map_err(|e| BenchError::Run(e.to_string()))?;
                let t0 = Instant::now();
                let out = engine
                    .restore(&bundle, &mut space, Some(Duration::ZERO), SpawnOptions::default())
                    .map_err(|e| BenchError::Run(format!("restore: {e}")))?;
                let secs = (t0.elapsed() + out.simulated_fork_time).as_secs_f64();
                out.handle.terminate();
                let series = if privileged { "privileged" } else { "unprivileged" };
                t.push(k, series, rep, secs);
            }
            let _ = std::fs::remove_dir_all(&bundle);
        }
    }
    t.notes.push(format!(
        "fork cost {} ms accounted per iteration, random target pids below {}, {} repetitions",
        s.fork_cost_ms, s.pid_max, s.repetitions
    ));
    let un: Vec<f64> = s.values.iter().filter_map(|k| t.mean(&k.to_string(), "unprivileged")).collect();
    let increasing = un.windows(2).all(|w| w[1] > w[0]);
    t.check(
        "unprivileged_strictly_increasing",
        increasing,
        format!("means {}", fmt_list(&un)),
    );
    let pr: Vec<f64> = s.values.iter().filter_map(|k| t.mean(&k.to_string(), "privileged")).collect();
    let ratio = match (pr.first(), pr.last()) {
        (Some(a), Some(b)) if *a > 0.0 && *b > 0.0 => (b / a).max(a / b),
        _ => f64::INFINITY,
    };
    t.check(
        "privileged_within_2x",
        ratio < 2.0,
        format!("means {}; last/first ratio {ratio:.3}", fmt_list(&pr)),
    );
    Ok(t)
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

// ---------------------------------------------------- handler complexity

fn hook_policy(env: &BenchEnv, value: &str, window: usize) -> Result<FaultPolicy, BenchError> {
    let mut p = if value == BASELINE {
        FaultPolicy::default()
    } else {
        let c: Complexity = value.parse().map_err(BenchError::Scenario)?;
        FaultPolicy::hook(vec![
            env.liquidctl.display().to_string(),
            "hook".into(),
            "--complexity".into(),
            c.as_str().into(),
        ])
    };
    p.log_window = window;
    p.hook_timeout_ms = 60_000;
    Ok(p)
}

fn handler_complexity(env: &BenchEnv, s: &HandlerScenario) -> Result<Table, BenchError> {
    if s.values.is_empty() {
        return Err(BenchError::Scenario("no handler values".into()));
    }
    let mut t = Table::new("handler");
    let mut short_windows = Vec::new();
    // One pair at a time: idle workloads of other pairs would compete with
    // the hook for CPU and inflate the expensive kernels.
    for v in &s.values {
        let base = env.work_dir.join(format!("handler-{v}"));
        let shared = base.join("shared");
        let policy = hook_policy(env, v, s.log_window)?;
        let node = |name: &str| {
            let mut cfg = bench_daemon(base.join(name), &shared);
            cfg.startup_delay_model = StartupDelayModel {
                base_seconds: 0.0,
                per_port_seconds: 0.0,
            };
            cfg.fault_policy = policy.clone();
            launch::spawn_config(&env.liquidd, &cfg)
        };
        let (a, b) = (node("a")?, node("b")?);
        let nodes = [a.wait_ready(READY)?, b.wait_ready(READY)?];
        start_service(&nodes[0].client, &s.workload)?;
        let mut active = 0;
        for rep in 0..s.repetitions {
            let src = &nodes[active];
            let dst = &nodes[1 - active];
            let want = s.log_window as u64;
            let st = src.client.wait_status(Duration::from_secs(60), |st| {
                st.counters.as_ref().map(|c| c.log_lines >= want).unwrap_or(false)
            })?;
            if st.counters.map(|c| c.log_lines).unwrap_or(0) < want {
                return Err(BenchError::Run(format!("{v}: source never logged {want} lines")));
            }
            let (report, _) = migrate::migrate(MigrationPlan {
                source: src.client.clone(),
                destination: Destination::Existing(dst.client.clone()),
                shared_dir: shared.clone(),
                bundle_name: format!("b-{rep}"),
                warm: false,
                transfer_delay: Duration::ZERO,
                continuity_timeout: None,
            })?;
            if report.fault_log_lines != s.log_window {
                short_windows.push(format!("{v}#{rep}:{}", report.fault_log_lines));
            }
            t.push(v, "migration", rep, report.checkpoint_seconds + report.restore_seconds);
            t.push(v, "decision", rep, report.fault_decision_seconds);
            active = 1 - active;
        }
    }
    t.notes.push(format!(
        "log window {} lines, ping-pong migrations, {} repetitions",
        s.log_window, s.repetitions
    ));
    t.check(
        "full_log_window",
        short_windows.is_empty(),
        if short_windows.is_empty() {
            format!("every decision saw {} lines", s.log_window)
        } else {
            format!("short windows: {}", short_windows.join(", "))
        },
    );
    if let Some(base) = t.mean(BASELINE, "migration") {
        let mut overheads = Vec::new();
        let mut means = Vec::new();
        for v in s.values.iter().filter(|v| v.as_str() != BASELINE) {
            if let Some(m) = t.mean(v, "migration") {
                overheads.push(format!("{v} {:+.3}", m - base));
                means.push(m);
            }
        }
        let worst = means.iter().map(|m| m - base).fold(f64::NEG_INFINITY, f64::max);
        t.check(
            "hook_overhead_at_most_0.5s",
            means.is_empty() || worst <= 0.5,
            format!("overhead vs baseline: {}", overheads.join(", ")),
        );
        let sp = spread(&means);
        t.check(
            "hook_spread_at_most_0.2s",
            sp <= 0.2,
            format!("max-min across complexities {sp:.3} s"),
        );
    }
    Ok(t)
}
