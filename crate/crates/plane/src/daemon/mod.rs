//! The supervisor daemon: a long-lived process owning one service.

pub mod api;
pub mod config;
pub mod ipc;
pub mod logging;
pub mod metrics;
pub mod supervisor;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use chrono::Utc;
use liquid_core::storage;
use liquid_core::workload::Launcher;
use thiserror::Error;

pub use config::DaemonConfig;
pub use supervisor::Supervisor;

#[derive(Debug, Error)]
pub enum BootError {
    #[error("state directory {path} is not writable: {detail}")]
    StateDirUnwritable { path: PathBuf, detail: String },
    #[error("binding {what}: {detail}")]
    BindFailure { what: String, detail: String },
    #[error("{0}")]
    Other(String),
}

impl BootError {
    pub fn exit_code(&self) -> u8 {
        match self {
            BootError::StateDirUnwritable { .. } => 3,
            BootError::BindFailure { .. } => 4,
            BootError::Other(_) => 1,
        }
    }
}

/// Create the state directory and prove it is writable.
pub fn prepare_state_dir(dir: &Path) -> Result<(), BootError> {
    let fail = |detail: String| BootError::StateDirUnwritable {
        path: dir.to_path_buf(),
        detail,
    };
    std::fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
    let probe = dir.join(format!(".probe.{}", std::process::id()));
    std::fs::write(&probe, b"").map_err(|e| fail(e.to_string()))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

/// Launcher that re-executes the current binary's hidden workload entry.
pub fn self_launcher() -> std::io::Result<Launcher> {
    Ok(Launcher::with_args(
        std::env::current_exe()?,
        vec!["workload".into()],
    ))
}

/// Boot and serve until SIGTERM or SIGINT.
pub async fn serve(
    cfg: DaemonConfig,
    config_path: Option<PathBuf>,
    launcher: Launcher,
) -> Result<(), BootError> {
    let start_time = Utc::now();
    prepare_state_dir(&cfg.state_dir)?;
    std::fs::create_dir_all(&cfg.shared_dir).map_err(|e| BootError::Other(format!(
        "shared directory {}: {e}",
        cfg.shared_dir.display()
    )))?;
    let _ = std::fs::remove_file(cfg.state_dir.join(config::ADDR_FILE));

    let delay = cfg.startup_delay();
    tracing::info!(delay_seconds = delay.as_secs_f64(), ports = cfg.exposed_ports, "simulated container startup");
    tokio::time::sleep(delay).await;

    let ipc_path = cfg.ipc_path();
    let ipc_listener = ipc::bind(&ipc_path).map_err(|e| BootError::BindFailure {
        what: ipc_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let http = tokio::net::TcpListener::bind(&cfg.listen_address)
        .await
        .map_err(|e| BootError::BindFailure {
            what: cfg.listen_address.clone(),
            detail: e.to_string(),
        })?;
    let addr: SocketAddr = http.local_addr().map_err(|e| BootError::Other(e.to_string()))?;

    let pending = ipc::Pending::default();
    tokio::spawn(ipc::listen(ipc_listener, ipc_path, pending.clone()));
    let sup = Supervisor::new(cfg.clone(), config_path, launcher, start_time).map_err(BootError::Other)?;

    storage::atomic_replace(&cfg.state_dir.join(config::ADDR_FILE), addr.to_string().as_bytes())
        .map_err(|e| BootError::StateDirUnwritable {
            path: cfg.state_dir.clone(),
            detail: e.to_string(),
        })?;
    tracing::info!(%addr, pid = std::process::id(), "listening");

    {
        let sup = sup.clone();
        tokio::task::spawn_blocking(move || sup.boot_from_persisted());
    }

    let app = api::router(api::AppState {
        sup: sup.clone(),
        pending,
    });
    axum::serve(http, app)
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| BootError::Other(e.to_string()))?;
    tracing::info!("shutting down");
    let s = sup.clone();
    let _ = tokio::task::spawn_blocking(move || s.shutdown()).await;
    Ok(())
}

async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("signal handler");
    let mut int = signal(SignalKind::interrupt()).expect("signal handler");
    tokio::select! {
        _ = term.recv() => {}
        _ = int.recv() => {}
    }
}
