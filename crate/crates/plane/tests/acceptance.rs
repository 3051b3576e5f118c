//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `LIQUID_ACCEPTANCE_REPS` lowers the repetition count of the timing
//! criteria; `LIQUID_ACCEPTANCE_ONLY` selects criteria by name (comma list).

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use liquid_core::engine::PidSpaceParams;
use liquid_core::fault_policy::{default_decision, mode_for_exit_code};
use liquid_core::lifecycle::ExitPhase;
use liquid_core::workload::WorkloadSpec;
use liquid_core::{ExitReport, StartOptionConfig, StartupMode, VirtualPidSpace};
use liquid_plane::daemon::config::StartupDelayModel;
use liquid_plane::orchestrator::bench::{
    self, BenchEnv, HandlerScenario, PortsScenario, ProcessScenario, Scenario,
};
use liquid_plane::orchestrator::client::Client;
use liquid_plane::orchestrator::inject::{FaultKind, Injector};
use liquid_plane::orchestrator::migrate::{self, Destination, MigrationPlan};
use liquid_plane::orchestrator::report::Table;
use liquid_plane::wire::{CheckpointRequest, DaemonStatus, RunRequest};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, Duration, fn(&Ctx) -> Outcome);

struct Ctx {
    reps: usize,
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let reps = std::env::var("LIQUID_ACCEPTANCE_REPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(30);
    let only: Option<BTreeSet<String>> = std::env::var("LIQUID_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let ctx = Ctx { reps };
    println!("acceptance: {reps} repetitions for timing criteria");

    let criteria: [Criterion; 8] = [
        ("default_fault_logic", Duration::from_secs(1), default_fault_logic),
        ("fault_matrix", Duration::from_secs(300), fault_matrix),
        ("pid_reservation", Duration::from_secs(180), pid_reservation),
        ("warm_restoration", Duration::from_secs(1800), warm_restoration),
        ("hook_overhead", Duration::from_secs(1200), hook_overhead),
        ("synchrony", Duration::from_secs(300), synchrony),
        ("restart_without_recreation", Duration::from_secs(300), restart_without_recreation),
        ("state_continuity", Duration::from_secs(600), state_continuity),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(name)) {
            continue;
        }
        let t = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(|| f(&ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("aborted: {msg}"))
        });
        let took = t.elapsed();
        let in_budget = took <= budget;
        let passed = res.passed && in_budget;
        if !passed {
            failed += 1;
        }
        let budget_note = if in_budget {
            String::new()
        } else {
            format!(" [over budget {budget:?}]")
        };
        println!(
            "{} {name} ({:.1}s): {}{budget_note}",
            if passed { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            res.detail
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
}

// ------------------------------------------------------------------ helpers

fn settle(c: &Client, before: &DaemonStatus) -> DaemonStatus {
    c.wait_status(Duration::from_secs(30), |s| {
        s.exits_observed > before.exits_observed
            && s.current_config.generation > before.current_config.generation
            && matches!(s.state_name(), "running" | "standby")
    })
    .expect("status")
}

fn run_fresh(c: &Client, spec: &WorkloadSpec) {
    let r = c
        .run(&RunRequest {
            mode: Some(StartupMode::FromScratch),
            workload: Some(spec.clone()),
            ..RunRequest::default()
        })
        .expect("run");
    assert_eq!(r.status, 200, "start failed: {:?}", r.value);
}

fn env(dir: &Path) -> BenchEnv {
    BenchEnv {
        liquidd: liquidd(),
        liquidctl: liquidctl(),
        work_dir: dir.to_path_buf(),
    }
}

fn checks(t: &Table) -> String {
    let mut parts: Vec<String> = t
        .checks
        .iter()
        .map(|c| format!("{} {}: {}", if c.passed { "ok" } else { "FAILED" }, c.name, c.detail))
        .collect();
    parts.extend(t.rows().iter().map(|r| {
        format!("{}/{} mean {:.4}s", r.value, r.series, r.summary.mean)
    }));
    parts.join(" | ")
}

// ------------------------------------------------------ default fault logic

fn default_fault_logic(_: &Ctx) -> Outcome {
    let oracle = |code: u8| {
        if code == 0 {
            StartupMode::Restore
        } else if (128..=159).contains(&code) {
            StartupMode::Standby
        } else {
            StartupMode::FromScratch
        }
    };
    let prior = StartOptionConfig::new(StartupMode::FromScratch, vec!["svc".into()], "prior");
    let bundle = Path::new("/shared/bundle");
    let mut mismatches = Vec::new();
    for code in 0..=255u8 {
        let d = default_decision(&ExitReport::exited(code, ExitPhase::Normal), &prior, Some(bundle));
        if d.mode != oracle(code) || mode_for_exit_code(code) != oracle(code) {
            mismatches.push(code);
        }
        if d.mode == StartupMode::Restore && d.checkpoint_location.as_deref() != Some(bundle) {
            mismatches.push(code);
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("256 exit codes checked, mismatches {mismatches:?}"),
    )
}

// ------------------------------------------------------------ fault matrix

fn fault_matrix(_: &Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "node");
    cfg.startup_delay_model.base_seconds = 0.1;
    let first = boot(&cfg);
    let mut inj = Injector::new(
        first.client.clone(),
        WorkloadSpec {
            state_io_latency_ms: 300,
            ..workload(2)
        },
    );
    inj.liquidd = Some(liquidd());
    inj.block_window = Duration::from_millis(1000);
    let signals = [9u8, 15, 2, 6, 11, 1, 3, 10, 12, 14];
    let exits = [1u8, 2, 3, 7, 42, 64, 100, 127, 200, 255];
    let phases = [ExitPhase::Normal, ExitPhase::Checkpoint, ExitPhase::Restore];
    type Cell = (&'static str, Box<dyn Fn(usize) -> (FaultKind, ExitPhase)>);
    let cells: Vec<Cell> = vec![
        ("signal/normal", Box::new(move |i| (FaultKind::Signal(signals[i]), ExitPhase::Normal))),
        ("signal/checkpoint", Box::new(move |i| (FaultKind::Signal(signals[i]), ExitPhase::Checkpoint))),
        ("signal/restore", Box::new(move |i| (FaultKind::Signal(signals[i]), ExitPhase::Restore))),
        ("app-exit/normal", Box::new(move |i| (FaultKind::AppExit(exits[i]), ExitPhase::Normal))),
        ("corrupt-bundle/restore", Box::new(|_| (FaultKind::CorruptBundle, ExitPhase::Restore))),
        ("storage-exceed/checkpoint", Box::new(|_| (FaultKind::StorageExceed, ExitPhase::Checkpoint))),
        ("unreachable-storage/restore", Box::new(|_| (FaultKind::NetworkUnreachable, ExitPhase::Restore))),
        ("daemon-kill/any", Box::new(move |i| (FaultKind::HardKillDaemon, phases[i % 3]))),
    ];
    let mut relaunched = Vec::new();
    let mut summary = Vec::new();
    let mut all = true;
    for (name, make) in &cells {
        let mut ok = 0;
        let mut first_failure = None;
        for i in 0..10 {
            let (k, p) = make(i);
            match inj.inject(k, p) {
                Ok(mut r) => {
                    relaunched.extend(r.relaunched.take());
                    if r.passed {
                        ok += 1;
                    } else if first_failure.is_none() {
                        first_failure = Some(format!("{r:?}"));
                    }
                }
                Err(e) => {
                    if first_failure.is_none() {
                        first_failure = Some(e.to_string());
                    }
                }
            }
        }
        all &= ok == 10;
        summary.push(match first_failure {
            None => format!("{name} {ok}/10"),
            Some(f) => format!("{name} {ok}/10 (first failure: {f})"),
        });
    }
    drop(relaunched);
    drop(first);
    outcome(all, summary.join(", "))
}

// ---------------------------------------------------------- pid reservation

/// Literal fork loop: each fork takes the next free pid after `last`,
/// wrapping past `pid_max` to `low`, until the next one would be `target`.
fn step_oracle(pid_max: u32, low: u32, mut last: u32, used: &mut BTreeSet<u32>, target: u32) -> u64 {
    let next_free = |from: u32, used: &BTreeSet<u32>| {
        let mut p = from;
        loop {
            p = if p + 1 >= pid_max { low } else { p + 1 };
            if !used.contains(&p) {
                return p;
            }
        }
    };
    let mut forks = 0;
    loop {
        let p = next_free(last, used);
        if p == target {
            break;
        }
        forks += 1;
        last = p;
    }
    used.insert(target);
    forks
}

fn pid_reservation(ctx: &Ctx) -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut mismatches = 0;
    let mut privileged_bad = 0;
    for _ in 0..1000 {
        let pid_max = if rng.gen_bool(0.5) { 32768 } else { rng.gen_range(1000..5000) };
        let low = 300;
        let busy: BTreeSet<u32> = (0..rng.gen_range(0..50)).map(|_| rng.gen_range(low..pid_max)).collect();
        let last = rng.gen_range(low..pid_max);
        let target = loop {
            let t = rng.gen_range(low..pid_max);
            if !busy.contains(&t) {
                break t;
            }
        };
        let params = |privileged| PidSpaceParams {
            pid_max,
            reserved_low: low,
            initial_last_pid: last,
            privileged,
        };
        let mut un = VirtualPidSpace::new(params(false)).unwrap().with_in_use(busy.iter().copied()).unwrap();
        let cost = un.reserve_pid(target).unwrap();
        let got = un.allocate().unwrap();
        let mut used = busy.clone();
        let want = step_oracle(pid_max, low, last, &mut used, target);
        if cost.fork_iterations != want || cost.direct_writes != 0 || got != target {
            mismatches += 1;
        }
        let mut pr = VirtualPidSpace::new(params(true)).unwrap().with_in_use(busy.iter().copied()).unwrap();
        let c = pr.reserve_pid(target).unwrap();
        if (c.direct_writes, c.fork_iterations) != (1, 0) || pr.allocate().unwrap() != target {
            privileged_bad += 1;
        }
    }
    let oracle_ok = mismatches == 0 && privileged_bad == 0;

    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::ProcessCount(ProcessScenario {
        values: vec![2, 4, 8, 16],
        repetitions: ctx.reps,
        seed: 5,
        pid_max: 32768,
        fork_cost_ms: 1.0,
        total_memory_bytes: 8 << 20,
        state_io_latency_ms: 50,
    });
    let t = bench::run(&env(dir.path()), &scenario).expect("process-count bench");
    outcome(
        oracle_ok && t.all_passed(),
        format!(
            "1000 reservations: {mismatches} oracle mismatches, {privileged_bad} privileged anomalies | {}",
            checks(&t)
        ),
    )
}

// ---------------------------------------------------------- warm restoration

fn warm_restoration(ctx: &Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::Ports(PortsScenario {
        values: vec![0, 10, 50],
        repetitions: ctx.reps,
        transfer_delay_seconds: 3.0,
        startup_delay_model: StartupDelayModel {
            base_seconds: 0.5,
            per_port_seconds: 0.05,
        },
        workload: workload(2),
        parallel: true,
    });
    let t = bench::run(&env(dir.path()), &scenario).expect("ports bench");
    outcome(t.all_passed(), checks(&t))
}

// ------------------------------------------------------------- hook overhead

fn hook_overhead(ctx: &Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::HandlerComplexity(HandlerScenario {
        values: ["baseline", "o1", "on", "on2", "on3"].map(String::from).to_vec(),
        repetitions: ctx.reps,
        log_window: 2000,
        workload: WorkloadSpec {
            process_count: 4,
            memory_footprint_bytes: 256 * 1024,
            tick_interval_ms: 2,
            label: "bench".into(),
            ..WorkloadSpec::default()
        },
    });
    let t = bench::run(&env(dir.path()), &scenario).expect("handler bench");
    outcome(t.all_passed(), checks(&t))
}

// ----------------------------------------------------------------- synchrony

fn synchrony(_: &Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "node"));
    let spec = workload(2);
    let mut rng = StdRng::seed_from_u64(6);
    let mut ok_responses = 0;
    let mut violations = Vec::new();
    let mut latest: Option<std::path::PathBuf> = None;
    for i in 0..50 {
        let r = match rng.gen_range(0..3) {
            0 => d.client.run(&RunRequest {
                mode: Some(StartupMode::FromScratch),
                workload: Some(spec.clone()),
                ..RunRequest::default()
            }),
            1 => d.client.checkpoint(&CheckpointRequest {
                image_dir: format!("sync-{i}").into(),
                leave_running: false,
            }),
            _ => d.client.run(&RunRequest {
                mode: Some(StartupMode::Restore),
                bundle_location: latest.clone().or_else(|| Some("missing".into())),
                await_timeout_ms: Some(0),
                ..RunRequest::default()
            }),
        }
        .expect("request");
        if let Some(b) = &r.value.bundle_location {
            latest = Some(b.clone());
        }
        if !r.ok() {
            continue;
        }
        ok_responses += 1;
        match r.value.completed_at {
            Some(done) if r.received_at >= done && r.sent_at <= r.value.started_at.unwrap_or(done) => {}
            other => violations.push(format!("op {i}: received {} completed {:?}", r.received_at, other)),
        }
    }
    outcome(
        violations.is_empty() && ok_responses >= 10,
        format!("{ok_responses} 2xx responses of 50 operations, {} violations {violations:?}", violations.len()),
    )
}

// ------------------------------------------------ restart without recreation

fn os_children(ppid: u32) -> Vec<u32> {
    let mut out = Vec::new();
    for e in std::fs::read_dir("/proc").unwrap().flatten() {
        let Some(pid) = e.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        if let Ok(stat) = std::fs::read_to_string(format!("/proc/{pid}/stat")) {
            if let Some((_, rest)) = stat.rsplit_once(')') {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.get(1).and_then(|p| p.parse::<u32>().ok()) == Some(ppid) {
                    out.push(pid);
                }
            }
        }
    }
    out
}

fn restart_without_recreation(_: &Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "node"));
    let spec = workload(3);
    run_fresh(&d.client, &spec);
    let initial = d.client.status().unwrap();
    let mut problems = Vec::new();
    let causes = ["app-exit", "sigkill", "child-crash", "sigterm", "exit-zero"];
    for i in 0..20 {
        let cause = causes[i % causes.len()];
        let before = d.client.status().unwrap();
        let pid = before.service_pid.expect("service pid");
        match cause {
            "app-exit" => {
                d.client.fault([1u8, 17, 99, 250][i % 4]).unwrap();
            }
            "sigkill" => unsafe {
                libc::kill(pid as i32, libc::SIGKILL);
            },
            "sigterm" => unsafe {
                libc::kill(pid as i32, libc::SIGTERM);
            },
            "child-crash" => {
                let kids = os_children(pid);
                assert!(!kids.is_empty(), "service has no child processes");
                unsafe {
                    libc::kill(kids[0] as i32, libc::SIGKILL);
                }
            }
            _ => {
                d.client.fault(0).unwrap();
            }
        }
        let after = settle(&d.client, &before);
        std::thread::sleep(Duration::from_millis(100));
        let later = d.client.status().unwrap();
        let gens = later.current_config.generation - before.current_config.generation;
        if gens != 1 || later.exits_observed != before.exits_observed + 1 {
            problems.push(format!("exit {i} ({cause}): {gens} generations"));
        }
        if after.state_name() == "standby" {
            run_fresh(&d.client, &spec);
        }
    }
    let fin = d.client.status().unwrap();
    let same_pid = fin.daemon_pid == initial.daemon_pid && Some(fin.daemon_pid) == d.pid();
    let same_start = fin.daemon_start_time == initial.daemon_start_time;
    let restarts_ok = fin.service_restart_count == 20;
    outcome(
        same_pid && same_start && restarts_ok && problems.is_empty(),
        format!(
            "daemon pid unchanged {same_pid}, start time unchanged {same_start}, restart count {}, exits {}, problems {problems:?}",
            fin.service_restart_count, fin.exits_observed
        ),
    )
}

// ----------------------------------------------------------- state continuity

fn state_continuity(_: &Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let nodes = [boot(&config(dir.path(), "a")), boot(&config(dir.path(), "b"))];
    run_fresh(&nodes[0].client, &workload(4));
    let mut ok = 0;
    let mut failures = Vec::new();
    for i in 0..30 {
        let (src, dst) = (&nodes[i % 2], &nodes[1 - i % 2]);
        std::thread::sleep(Duration::from_millis(60));
        let res = migrate::migrate(MigrationPlan {
            source: src.client.clone(),
            destination: Destination::Existing(dst.client.clone()),
            shared_dir: dir.path().join("shared"),
            bundle_name: format!("cont-{i}"),
            warm: false,
            transfer_delay: Duration::ZERO,
            continuity_timeout: Some(Duration::from_secs(10)),
        });
        match res {
            Ok((r, _)) => {
                let c = r.continuity.expect("checked");
                if c.ok && c.snapshot.len() == 4 {
                    ok += 1;
                } else {
                    failures.push(format!("{i}: {}", c.detail));
                }
            }
            Err(e) => failures.push(format!("{i}: {e}")),
        }
    }
    outcome(ok == 30, format!("{ok}/30 migrations continuous {failures:?}"))
}
