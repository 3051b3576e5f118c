mod common;

use std::io::Write;
use std::process::{Command, Stdio};
use std::time::Duration;

use common::*;
use liquid_core::lifecycle::ExitPhase;
use liquid_core::workload::WorkloadSpec;
use liquid_core::{ExitReport, StartOptionConfig, StartupMode};
use liquid_plane::orchestrator::bench::{self, BenchEnv, ProcessScenario, Scenario};
use liquid_plane::orchestrator::inject::{expectation, FaultKind, InjectError, Injector};
use liquid_plane::orchestrator::migrate::{self, Destination, MigrationPlan};

fn plan(src: &liquid_plane::orchestrator::client::Client, root: &std::path::Path, name: &str) -> MigrationPlan {
    MigrationPlan {
        source: src.clone(),
        destination: Destination::Launch {
            liquidd: liquidd(),
            config: Box::new(config(root, &format!("dest-{name}"))),
            ready_timeout: READY,
        },
        shared_dir: root.join("shared"),
        bundle_name: name.into(),
        warm: false,
        transfer_delay: Duration::ZERO,
        continuity_timeout: Some(Duration::from_secs(10)),
    }
}

#[test]
fn cold_migration_continues_counters() {
    let dir = tempfile::tempdir().unwrap();
    let src = boot(&config(dir.path(), "src"));
    start(&src.client, &workload(4));
    std::thread::sleep(Duration::from_millis(200));
    let (report, dest) = migrate::migrate(plan(&src.client, dir.path(), "m1")).unwrap();
    let dest = dest.unwrap();
    let c = report.continuity.unwrap();
    assert!(c.ok, "{}", c.detail);
    assert_eq!(c.snapshot.len(), 4);
    assert!(c.snapshot.values().all(|&v| v > 0));
    assert_eq!(src.client.status().unwrap().state_name(), "standby");
    assert_eq!(dest.client.status().unwrap().state_name(), "running");
    assert!(report.total_seconds >= report.checkpoint_seconds + report.restore_seconds);
}

#[test]
fn warm_migration_overlaps_boot_with_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let src = boot(&config(dir.path(), "src"));
    let mut p = plan(&src.client, dir.path(), "w1");
    if let Destination::Launch { config, .. } = &mut p.destination {
        config.startup_delay_model.base_seconds = 0.6;
    }
    p.transfer_delay = Duration::from_millis(600);
    p.warm = true;
    start(&src.client, &workload(2));
    let (warm, _d) = migrate::migrate(p).unwrap();
    assert!(warm.continuity.unwrap().ok);

    start(&src.client, &workload(2));
    let mut p = plan(&src.client, dir.path(), "c1");
    if let Destination::Launch { config, .. } = &mut p.destination {
        config.startup_delay_model.base_seconds = 0.6;
    }
    p.transfer_delay = Duration::from_millis(600);
    let (cold, _d) = migrate::migrate(p).unwrap();
    assert!(cold.total_seconds >= 1.2, "{cold:?}");
    assert!(warm.total_seconds < cold.total_seconds - 0.4, "warm {} cold {}", warm.total_seconds, cold.total_seconds);
    assert!(!dir.path().join("shared/.outgoing/c1").exists());
}

fn injector(d: &liquid_plane::orchestrator::launch::DaemonProcess) -> Injector {
    let mut inj = Injector::new(
        d.client.clone(),
        WorkloadSpec {
            state_io_latency_ms: 300,
            ..workload(2)
        },
    );
    inj.liquidd = Some(liquidd());
    inj.block_window = Duration::from_millis(600);
    inj
}

#[test]
fn every_modeled_cell_behaves_once() {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "a"));
    let mut inj = injector(&d);
    let cells = [
        (FaultKind::Signal(9), ExitPhase::Normal),
        (FaultKind::Signal(15), ExitPhase::Checkpoint),
        (FaultKind::Signal(9), ExitPhase::Restore),
        (FaultKind::AppExit(2), ExitPhase::Normal),
        (FaultKind::CorruptBundle, ExitPhase::Restore),
        (FaultKind::StorageExceed, ExitPhase::Checkpoint),
        (FaultKind::NetworkUnreachable, ExitPhase::Restore),
    ];
    for (k, p) in cells {
        let r = inj.inject(k, p).unwrap();
        assert!(r.passed, "{k:?}/{p:?}: {r:?}");
    }
}

#[test]
fn hard_kill_resumes_from_persisted_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "a"));
    let mut inj = injector(&d);
    let mut relaunched = Vec::new();
    for phase in [ExitPhase::Normal, ExitPhase::Checkpoint, ExitPhase::Restore] {
        let mut r = inj.inject(FaultKind::HardKillDaemon, phase).unwrap();
        assert!(r.passed, "{phase:?}: {r:?}");
        relaunched.extend(r.relaunched.take());
    }
    drop(d);
}

#[test]
fn unmodeled_cells_are_rejected() {
    for (k, p) in [
        (FaultKind::CorruptBundle, ExitPhase::Normal),
        (FaultKind::StorageExceed, ExitPhase::Restore),
        (FaultKind::AppExit(0), ExitPhase::Normal),
        (FaultKind::AppExit(130), ExitPhase::Normal),
        (FaultKind::AppExit(3), ExitPhase::Checkpoint),
    ] {
        assert!(matches!(expectation(k, p), Err(InjectError::NotModeled { .. })), "{k:?}/{p:?}");
    }
    assert_eq!("memory_exceed".parse::<FaultKind>().unwrap(), FaultKind::Signal(9));
    assert_eq!("APP_EXIT(7)".parse::<FaultKind>().unwrap(), FaultKind::AppExit(7));
    assert!("SIGNAL(x)".parse::<FaultKind>().is_err());
}

#[test]
fn hook_subcommand_applies_default_logic() {
    let input = serde_json::json!({
        "exit_report": ExitReport::exited(0, ExitPhase::Normal),
        "logs": (0..50).map(|i| format!("line {i}")).collect::<Vec<_>>(),
        "latest_checkpoint": "/shared/b7",
    });
    for c in ["o1", "on", "on2", "on3"] {
        let mut child = Command::new(liquidctl())
            .args(["hook", "--complexity", c])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(input.to_string().as_bytes()).unwrap();
        let out = child.wait_with_output().unwrap();
        assert!(out.status.success());
        let d: StartOptionConfig = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(d.mode, StartupMode::Restore);
        assert_eq!(d.checkpoint_location.as_deref(), Some(std::path::Path::new("/shared/b7")));
    }
}

#[test]
fn daemon_with_hook_policy_uses_liquidctl() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "a");
    cfg.fault_policy = liquid_core::FaultPolicy::hook(vec![
        liquidctl().display().to_string(),
        "hook".into(),
        "--complexity".into(),
        "on2".into(),
    ]);
    let d = boot(&cfg);
    start(&d.client, &workload(1));
    let before = d.client.status().unwrap();
    d.client.fault(5).unwrap();
    let s = d
        .client
        .wait_status(Duration::from_secs(10), |s| {
            s.current_config.generation > before.current_config.generation && s.state_name() == "running"
        })
        .unwrap();
    assert_eq!(s.current_config.mode, StartupMode::FromScratch);
    assert_eq!(s.current_config.reason, "exit-code-5:from_scratch");
}

#[test]
fn liquidctl_migrate_and_inject_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let src = boot(&config(dir.path(), "src"));
    start(&src.client, &workload(2));
    let dest_cfg = config(dir.path(), "dst");
    let cfg_path = dir.path().join("dst.json");
    std::fs::write(&cfg_path, dest_cfg.to_json()).unwrap();
    let out = Command::new(liquidctl())
        .args(["migrate", "--source", &src.addr, "--dest-config"])
        .arg(&cfg_path)
        .args(["--cold", "--transfer-delay", "0.2", "--bundle", "cli1", "--verify-continuity", "--liquidd"])
        .arg(liquidd())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["continuity"]["ok"], true);
    let dest_addr = v["destination"].as_str().unwrap().to_string();
    let dest = liquid_plane::orchestrator::client::Client::new(&dest_addr);
    let st = dest.status().unwrap();
    assert_eq!(st.state_name(), "running");

    let inj = Command::new(liquidctl())
        .args(["inject", "--target", &dest_addr, "--fault", "SIGKILL", "--phase", "normal"])
        .output()
        .unwrap();
    assert!(inj.status.success(), "{}", String::from_utf8_lossy(&inj.stdout));
    let bad = Command::new(liquidctl())
        .args(["inject", "--target", &dest_addr, "--fault", "CORRUPT_BUNDLE", "--phase", "normal"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    unsafe {
        libc::kill(st.daemon_pid as i32, libc::SIGTERM);
    }
}

#[test]
fn small_process_count_bench_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let env = BenchEnv {
        liquidd: liquidd(),
        liquidctl: liquidctl(),
        work_dir: dir.path().join("work"),
    };
    let s = Scenario::ProcessCount(ProcessScenario {
        values: vec![2, 4],
        repetitions: 2,
        seed: 3,
        pid_max: 32768,
        fork_cost_ms: 1.0,
        total_memory_bytes: 1 << 20,
        state_io_latency_ms: 10,
    });
    let t = bench::run(&env, &s).unwrap();
    assert_eq!(t.samples.len(), 8);
    let files = t.write(&dir.path().join("out")).unwrap();
    assert_eq!(files.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert!(csv.contains("\n2,unprivileged,2,"), "{csv}");
    assert!(csv.contains("\n4,privileged,2,"), "{csv}");
}
