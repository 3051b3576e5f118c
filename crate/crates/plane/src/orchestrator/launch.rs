//! Starting, stopping and hard-killing daemon processes.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::client::Client;
use crate::daemon::config::{ADDR_FILE, STATE_DIR_ENV};
use crate::daemon::DaemonConfig;

const CONFIG_FILE: &str = "liquidd.json";
const STDERR_FILE: &str = "liquidd.stderr";

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("writing daemon config {path}: {source}")]
    Config { path: PathBuf, source: std::io::Error },
    #[error("spawning {bin}: {source}")]
    Spawn { bin: PathBuf, source: std::io::Error },
    #[error("daemon exited during boot with {status}: {stderr}")]
    Exited {
        status: std::process::ExitStatus,
        stderr: String,
    },
    #[error("daemon not ready within {0:?}")]
    Timeout(Duration),
}

/// Locate `liquidd`: explicit path, `LIQUIDD_BIN`, then next to this executable.
pub fn find_liquidd(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("LIQUIDD_BIN") {
        return PathBuf::from(p);
    }
    std::env::current_exe()
        .ok()
        .and_then(|exe| exe.parent().map(|d| d.join("liquidd")))
        .filter(|p| p.exists())
        .unwrap_or_else(|| PathBuf::from("liquidd"))
}

/// Write `cfg` into its state directory and return the file's path.
pub fn write_config(cfg: &DaemonConfig) -> Result<PathBuf, LaunchError> {
    let path = cfg.state_dir.join(CONFIG_FILE);
    std::fs::create_dir_all(&cfg.state_dir)
        .and_then(|_| std::fs::write(&path, cfg.to_json()))
        .map_err(|source| LaunchError::Config {
            path: path.clone(),
            source,
        })?;
    Ok(path)
}

/// A daemon that has been spawned but may still be booting.
#[derive(Debug)]
pub struct Booting {
    child: Child,
    state_dir: PathBuf,
    config_path: PathBuf,
    spawned: Instant,
}

impl Booting {
    /// Block until the daemon publishes its address.
    pub fn wait_ready(mut self, timeout: Duration) -> Result<DaemonProcess, LaunchError> {
        let addr_file = self.state_dir.join(ADDR_FILE);
        let deadline = self.spawned + timeout;
        loop {
            if let Ok(addr) = std::fs::read_to_string(&addr_file) {
                let addr = addr.trim().to_string();
                if !addr.is_empty() {
                    return Ok(DaemonProcess {
                        client: Client::new(&addr),
                        addr,
                        startup: self.spawned.elapsed(),
                        state_dir: self.state_dir.clone(),
                        config_path: self.config_path.clone(),
                        child: Some(self.child),
                    });
                }
            }
            if let Ok(Some(st)) = self.child.try_wait() {
                let stderr = std::fs::read_to_string(self.state_dir.join(STDERR_FILE)).unwrap_or_default();
                return Err(LaunchError::Exited {
                    status: st,
                    stderr: stderr.trim().to_string(),
                });
            }
            if Instant::now() >= deadline {
                let _ = self.child.kill();
                let _ = self.child.wait();
                return Err(LaunchError::Timeout(timeout));
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }
}

/// Spawn `liquidd --config <path>` with its state directory pinned.
pub fn spawn(liquidd: &Path, config_path: &Path, state_dir: &Path) -> Result<Booting, LaunchError> {
    let _ = std::fs::remove_file(state_dir.join(ADDR_FILE));
    std::fs::create_dir_all(state_dir).map_err(|source| LaunchError::Config {
        path: state_dir.to_path_buf(),
        source,
    })?;
    // A file, not our stderr: a detached daemon must not hold our pipes open.
    let stderr_path = state_dir.join(STDERR_FILE);
    let stderr = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&stderr_path)
        .map_err(|source| LaunchError::Config {
            path: stderr_path,
            source,
        })?;
    let spawned = Instant::now();
    let child = Command::new(liquidd)
        .arg("--config")
        .arg(config_path)
        .env(STATE_DIR_ENV, state_dir)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(stderr)
        .spawn()
        .map_err(|source| LaunchError::Spawn {
            bin: liquidd.to_path_buf(),
            source,
        })?;
    Ok(Booting {
        child,
        state_dir: state_dir.to_path_buf(),
        config_path: config_path.to_path_buf(),
        spawned,
    })
}

/// Write the config and spawn a daemon for it.
pub fn spawn_config(liquidd: &Path, cfg: &DaemonConfig) -> Result<Booting, LaunchError> {
    let path = write_config(cfg)?;
    spawn(liquidd, &path, &cfg.state_dir)
}

/// Launch and wait for readiness.
pub fn launch(liquidd: &Path, cfg: &DaemonConfig, timeout: Duration) -> Result<DaemonProcess, LaunchError> {
    spawn_config(liquidd, cfg)?.wait_ready(timeout)
}

/// A ready daemon. Dropping it stops the daemon unless it was detached.
#[derive(Debug)]
pub struct DaemonProcess {
    pub addr: String,
    pub client: Client,
    /// Spawn to address publication.
    pub startup: Duration,
    pub state_dir: PathBuf,
    pub config_path: PathBuf,
    child: Option<Child>,
}

impl DaemonProcess {
    pub fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(|c| c.id())
    }

    /// Graceful stop: SIGTERM, then SIGKILL after `grace`.
    pub fn stop(&mut self, grace: Duration) {
        let Some(mut child) = self.child.take() else { return };
        unsafe {
            libc::kill(child.id() as i32, libc::SIGTERM);
        }
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if let Ok(Some(_)) = child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        let _ = child.kill();
        let _ = child.wait();
    }

    /// SIGKILL and reap.
    pub fn kill_hard(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    /// Leave the daemon running after this handle goes away.
    pub fn detach(mut self) -> String {
        self.child = None;
        self.addr.clone()
    }
}

impl Drop for DaemonProcess {
    fn drop(&mut self) {
        self.stop(Duration::from_secs(5));
    }
}

/// True while `pid` names a live, non-zombie process.
pub fn pid_alive(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => stat
            .rsplit_once(')')
            .map(|(_, rest)| !rest.trim_start().starts_with('Z'))
            .unwrap_or(false),
        Err(_) => false,
    }
}

/// Wait until `pid` is gone or a zombie.
pub fn wait_pid_gone(pid: u32, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if !pid_alive(pid) {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    !pid_alive(pid)
}
