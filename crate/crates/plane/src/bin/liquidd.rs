use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use liquid_plane::daemon::{self, config, DaemonConfig};

/// Supervisor daemon owning one liquid service.
#[derive(Debug, Parser)]
#[command(name = "liquidd", version)]
struct Cli {
    /// Daemon configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    if argv.get(1).map(String::as_str) == Some("workload") {
        let code = liquid_core::workload::runtime::main(argv);
        return ExitCode::from(code.clamp(0, 255) as u8);
    }
    let cli = Cli::parse();
    let state_override = std::env::var_os(config::STATE_DIR_ENV).map(PathBuf::from);
    let cfg = match DaemonConfig::load(&cli.config, state_override) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("liquidd: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = daemon::prepare_state_dir(&cfg.state_dir) {
        eprintln!("liquidd: {e}");
        return ExitCode::from(e.exit_code());
    }
    if let Err(e) = daemon::logging::init(&cfg.state_dir.join(config::LOG_FILE)) {
        eprintln!("liquidd: log file: {e}");
        return ExitCode::from(3);
    }
    let launcher = match daemon::self_launcher() {
        Ok(l) => l,
        Err(e) => {
            eprintln!("liquidd: {e}");
            return ExitCode::from(1);
        }
    };
    let config_path = std::fs::canonicalize(&cli.config).unwrap_or(cli.config);
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("liquidd: runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(daemon::serve(cfg, Some(config_path), launcher)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "boot failed");
            eprintln!("liquidd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
