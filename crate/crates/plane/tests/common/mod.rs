#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use liquid_core::workload::WorkloadSpec;
use liquid_core::StartupMode;
use liquid_plane::daemon::config::StartupDelayModel;
use liquid_plane::daemon::DaemonConfig;
use liquid_plane::orchestrator::client::Client;
use liquid_plane::orchestrator::launch::{self, DaemonProcess};
use liquid_plane::wire::{OpResponse, RunRequest};

pub fn liquidd() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_liquidd"))
}

pub fn liquidctl() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_liquidctl"))
}

pub const READY: Duration = Duration::from_secs(60);

/// A quick-booting daemon config rooted at `root/<name>`, sharing `root/shared`.
pub fn config(root: &Path, name: &str) -> DaemonConfig {
    let mut c = DaemonConfig::new(root.join(name), root.join("shared"));
    c.startup_delay_model = StartupDelayModel {
        base_seconds: 0.0,
        per_port_seconds: 0.0,
    };
    c.pid_space.privileged = true;
    c.debug_api = true;
    c
}

pub fn boot(cfg: &DaemonConfig) -> DaemonProcess {
    launch::launch(&liquidd(), cfg, READY).expect("daemon boots")
}

pub fn workload(n: u32) -> WorkloadSpec {
    WorkloadSpec {
        process_count: n,
        memory_footprint_bytes: 64 * 1024 * n as u64,
        tick_interval_ms: 20,
        label: "itest".into(),
        seed: 11,
        ..WorkloadSpec::default()
    }
}

pub fn start(client: &Client, spec: &WorkloadSpec) -> OpResponse {
    let r = client
        .run(&RunRequest {
            mode: Some(StartupMode::FromScratch),
            workload: Some(spec.clone()),
            ..RunRequest::default()
        })
        .expect("run request");
    assert_eq!(r.status, 200, "{:?}", r.value);
    r.value
}
