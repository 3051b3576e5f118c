#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use liquid_core::workload::{Launcher, SpawnOptions, WorkloadHandle, WorkloadSpec};

pub fn launcher() -> Launcher {
    Launcher::new(env!("CARGO_BIN_EXE_liquid-workload"))
}

pub fn spec(processes: u32) -> WorkloadSpec {
    WorkloadSpec {
        process_count: processes,
        memory_footprint_bytes: 256 * 1024 * u64::from(processes),
        tick_interval_ms: 20,
        label: "itest".into(),
        seed: 7,
        ..WorkloadSpec::default()
    }
}

pub fn opts() -> SpawnOptions {
    SpawnOptions {
        ready_timeout: Duration::from_secs(30),
        ..SpawnOptions::default()
    }
}

/// OS pids whose parent is `ppid`, read from /proc.
pub fn os_children(ppid: u32) -> Vec<u32> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<u32>() else {
            continue;
        };
        let Ok(stat) = std::fs::read_to_string(entry.path().join("stat")) else {
            continue;
        };
        // Field 4 follows the parenthesised command name.
        let Some(rest) = stat.rsplit_once(')').map(|(_, r)| r) else {
            continue;
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() > 2 && fields[0] != "Z" && fields[1].parse::<u32>().ok() == Some(ppid) {
            out.push(pid);
        }
    }
    out.sort_unstable();
    out
}

/// Wait until every process has logged at least `min` ticks.
pub fn wait_for_ticks(h: &WorkloadHandle, min: u64) {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let last = h.logs().last_counters();
        if last.len() == h.vpids().len() && last.values().all(|&c| c >= min) {
            return;
        }
        assert!(Instant::now() < deadline, "ticks never reached {min}: {last:?}");
        std::thread::sleep(Duration::from_millis(10));
    }
}

pub fn sock(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.sock"))
}
