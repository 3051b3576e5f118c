mod common;

use std::thread;
use std::time::{Duration, Instant};

use common::*;
use liquid_core::engine::bundle::COMPLETE_MARKER;
use liquid_core::start_option::{read_start_option, write_start_option, START_OPTION_FILE};
use liquid_core::{StartOptionConfig, StartupMode};
use liquid_plane::orchestrator::client::Client;
use liquid_plane::wire::{CheckpointRequest, RunRequest};

fn raw_post(client: &Client, path: &str, body: &str) -> (u16, String) {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let mut r = agent
        .post(&format!("{}{path}", client.base()))
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
}

#[test]
fn boots_in_standby_and_reports_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "a"));
    let s = d.client.status().unwrap();
    assert_eq!(s.state_name(), "standby");
    assert_eq!(Some(s.daemon_pid), d.pid());
    assert_eq!(s.service_restart_count, 0);
    assert_eq!(s.current_config.mode, StartupMode::Standby);
    let m = d.client.metrics().unwrap();
    assert!(m.contains("liquidd_service_restart_count 0"), "{m}");
}

#[test]
fn malformed_bodies_are_rejected_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "a"));
    let (code, body) = raw_post(&d.client, "/run", "{\"mode\": \"sideways\"}");
    assert_eq!(code, 422, "{body}");
    let (code, _) = raw_post(&d.client, "/checkpoint", "not json");
    assert_eq!(code, 422);
    let (code, _) = raw_post(&d.client, "/run", "{\"mode\":\"restore\"}");
    assert_eq!(code, 422, "restore needs a bundle");
    let s = d.client.status().unwrap();
    assert_eq!(s.state_name(), "standby");
    assert_eq!(s.current_config.generation, 0);
}

#[test]
fn run_checkpoint_restore_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "a"));
    let r = start(&d.client, &workload(3));
    assert_eq!(r.vpids.len(), 3);
    thread::sleep(Duration::from_millis(150));
    let c = d
        .client
        .checkpoint(&CheckpointRequest {
            image_dir: "b1".into(),
            leave_running: false,
        })
        .unwrap();
    assert_eq!(c.status, 200, "{:?}", c.value);
    let loc = c.value.bundle_location.clone().unwrap();
    assert!(loc.join(COMPLETE_MARKER).exists());
    let next = c.value.next_config.clone().unwrap();
    assert_eq!(next.mode, StartupMode::Standby);
    assert_eq!(next.checkpoint_location.as_deref(), Some(loc.as_path()));
    assert_eq!(read_start_option(&dir.path().join("a").join(START_OPTION_FILE)).unwrap(), next);

    let r = d
        .client
        .run(&RunRequest {
            mode: Some(StartupMode::Restore),
            bundle_location: Some("b1".into()),
            ..RunRequest::default()
        })
        .unwrap();
    assert_eq!(r.status, 200, "{:?}", r.value);
    assert_eq!(r.value.initial_counters, c.value.counters);
    assert_eq!(r.value.direct_writes, 3);
    let s = d.client.status().unwrap();
    assert_eq!(s.state_name(), "running");
    assert_eq!(s.service_restart_count, 1);
    assert!(s.last_migration.is_some());
}

#[test]
fn status_is_served_while_an_operation_blocks_and_conflicts_get_409() {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "a"));
    let pending = dir.path().join("shared").join("pending");
    std::fs::create_dir_all(&pending).unwrap();
    let client = d.client.clone();
    let op = thread::spawn(move || {
        client.run(&RunRequest {
            mode: Some(StartupMode::Restore),
            bundle_location: Some("pending".into()),
            await_timeout_ms: Some(1500),
            ..RunRequest::default()
        })
    });
    let s = d
        .client
        .wait_status(Duration::from_secs(5), |s| s.state_name() == "restoring")
        .unwrap();
    assert_eq!(s.state_name(), "restoring");
    assert!(s.op_in_flight.is_some());
    let t = Instant::now();
    for _ in 0..20 {
        d.client.status().unwrap();
    }
    assert!(t.elapsed() < Duration::from_millis(500), "status blocked: {:?}", t.elapsed());
    let conflict = d
        .client
        .checkpoint(&CheckpointRequest {
            image_dir: "x".into(),
            leave_running: false,
        })
        .unwrap();
    assert_eq!(conflict.status, 409);
    let r = op.join().unwrap().unwrap();
    assert_eq!(r.status, 500);
    assert_eq!(r.value.error_kind.as_deref(), Some("bundle_unavailable_timeout"));
}

#[test]
fn lost_completion_record_fails_the_request() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "a");
    cfg.correlation_timeout_ms = 300;
    let d = boot(&cfg);
    d.client.drop_next_completion().unwrap();
    let r = d
        .client
        .run(&RunRequest {
            mode: Some(StartupMode::FromScratch),
            workload: Some(workload(1)),
            ..RunRequest::default()
        })
        .unwrap();
    assert_eq!(r.status, 500);
    assert_eq!(r.value.error_kind.as_deref(), Some("completion_timeout"));
    // The next operation is correlated normally.
    let c = d
        .client
        .checkpoint(&CheckpointRequest {
            image_dir: "b".into(),
            leave_running: false,
        })
        .unwrap();
    assert_eq!(c.status, 200, "{:?}", c.value);
}

#[test]
fn debug_endpoints_are_absent_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "a");
    cfg.debug_api = false;
    let d = boot(&cfg);
    let (code, _) = raw_post(&d.client, "/fault", "{\"exit_code\":1}");
    assert_eq!(code, 404);
}

#[test]
fn post_checkpoint_hooks_see_the_report_and_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hook.out");
    let mut cfg = config(dir.path(), "a");
    cfg.post_checkpoint_hooks = vec![vec![
        "sh".into(),
        "-c".into(),
        format!(
            "printf '%s\\n%s\\n' \"$LIQUID_BUNDLE_LOCATION\" \"$LIQUID_EXIT_REPORT\" > {}",
            out.display()
        ),
    ]];
    let d = boot(&cfg);
    start(&d.client, &workload(1));
    let c = d
        .client
        .checkpoint(&CheckpointRequest {
            image_dir: "hb".into(),
            leave_running: false,
        })
        .unwrap();
    assert_eq!(c.status, 200);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), c.value.bundle_location.unwrap().to_str().unwrap());
    let report: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(report["exit_code"], 143);
    assert_eq!(report["phase"], "checkpoint");
}

#[test]
fn paths_outside_the_shared_directory_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = boot(&config(dir.path(), "a"));
    start(&d.client, &workload(1));
    let c = d
        .client
        .checkpoint(&CheckpointRequest {
            image_dir: "../escape".into(),
            leave_running: false,
        })
        .unwrap();
    assert!(c.status == 400 || c.status == 422, "{}", c.status);
    assert_eq!(d.client.status().unwrap().state_name(), "running");
}

#[test]
fn boots_into_the_persisted_start_option() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a");
    std::fs::create_dir_all(&cfg.state_dir).unwrap();
    let persisted = StartOptionConfig::new(StartupMode::FromScratch, workload(2).to_command(), "seeded");
    write_start_option(&persisted, &cfg.state_dir.join(START_OPTION_FILE)).unwrap();
    let d = boot(&cfg);
    let s = d
        .client
        .wait_status(Duration::from_secs(10), |s| s.state_name() == "running")
        .unwrap();
    assert_eq!(s.state_name(), "running");
    assert_eq!(s.service_vpids.len(), 2);
    assert_eq!(s.current_config.reason, "seeded");
}

#[test]
fn malformed_persisted_config_falls_back_to_standby() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a");
    std::fs::create_dir_all(&cfg.state_dir).unwrap();
    std::fs::write(cfg.state_dir.join(START_OPTION_FILE), b"{ not json").unwrap();
    let d = boot(&cfg);
    let s = d
        .client
        .wait_status(Duration::from_secs(10), |s| s.current_config.reason != "default")
        .unwrap();
    assert_eq!(s.state_name(), "standby");
    assert_eq!(s.current_config.mode, StartupMode::Standby);
}

#[test]
fn unwritable_state_dir_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"").unwrap();
    let cfg = config(dir.path(), "x");
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let st = std::process::Command::new(liquidd())
        .arg("--config")
        .arg(&cfg_path)
        .env("LIQUIDD_STATE_DIR", blocker.join("sub"))
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}
