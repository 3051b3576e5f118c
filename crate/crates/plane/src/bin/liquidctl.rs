use std::hint::black_box;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use liquid_core::fault_policy::complexity::{self, Complexity};
use liquid_core::fault_policy::{default_decision, HookInput};
use liquid_core::workload::WorkloadSpec;
use liquid_core::StartOptionConfig;
use liquid_plane::daemon::DaemonConfig;
use liquid_plane::orchestrator::bench::{self, BenchEnv, Scenario};
use liquid_plane::orchestrator::client::Client;
use liquid_plane::orchestrator::inject::{self, FaultKind, Injector};
use liquid_plane::orchestrator::launch;
use liquid_plane::orchestrator::migrate::{self, Destination, MigrationPlan};

/// Orchestrator for liquid services: migration, fault injection, benchmarks.
#[derive(Debug, Parser)]
#[command(name = "liquidctl", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Move a running service from one daemon to another.
    Migrate(MigrateArgs),
    /// Inject a fault and check the daemon's reaction.
    Inject(InjectArgs),
    /// Run a benchmark scenario and write its tables.
    Bench(BenchArgs),
    /// Fault hook: read a hook input on stdin, analyze the log window, print a decision.
    Hook(HookArgs),
    /// Print a daemon's status.
    Status {
        #[arg(long)]
        target: String,
    },
}

#[derive(Debug, Args)]
struct MigrateArgs {
    /// Source daemon address.
    #[arg(long)]
    source: String,
    /// Boot the destination from this daemon config.
    #[arg(long, conflicts_with = "dest")]
    dest_config: Option<PathBuf>,
    /// Address of an already running destination daemon.
    #[arg(long)]
    dest: Option<String>,
    /// Shared bundle directory; defaults to the source's.
    #[arg(long)]
    shared_dir: Option<PathBuf>,
    /// Boot the destination while the checkpoint and transfer run.
    #[arg(long, conflicts_with = "cold")]
    warm: bool,
    #[arg(long)]
    cold: bool,
    /// Override the destination's exposed port count.
    #[arg(long)]
    ports: Option<u32>,
    /// Simulated transfer time in seconds.
    #[arg(long, default_value_t = 0.0)]
    transfer_delay: f64,
    /// Bundle directory name under the shared directory.
    #[arg(long)]
    bundle: Option<String>,
    /// Check that restored counters continue the checkpointed ones.
    #[arg(long)]
    verify_continuity: bool,
    #[arg(long)]
    liquidd: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InjectArgs {
    #[arg(long)]
    target: String,
    /// SIGNAL(n), SIGKILL, MEMORY_EXCEED, APP_EXIT(n), CORRUPT_BUNDLE,
    /// STORAGE_EXCEED, NETWORK_UNREACHABLE or HARD_KILL.
    #[arg(long)]
    fault: String,
    /// normal, checkpoint or restore.
    #[arg(long)]
    phase: String,
    #[arg(long, default_value_t = 1)]
    count: u32,
    /// Workload started when the cell needs a running service (JSON file).
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    liquidd: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scratch space for daemons and bundles; defaults to `<out>/work`.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    liquidd: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HookArgs {
    /// o1, on, on2 or on3.
    #[arg(long)]
    complexity: Complexity,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Migrate(a) => cmd_migrate(a),
        Cmd::Inject(a) => cmd_inject(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Hook(a) => cmd_hook(a),
        Cmd::Status { target } => Client::new(&target)
            .status()
            .map(|s| {
                println!("{}", serde_json::to_string_pretty(&s).expect("serializable"));
                true
            })
            .map_err(|e| e.to_string()),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("liquidctl: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn cmd_migrate(a: MigrateArgs) -> Result<bool, String> {
    let source = Client::new(&a.source);
    let shared_dir = match a.shared_dir {
        Some(d) => d,
        None => source.status().map_err(|e| e.to_string())?.shared_dir,
    };
    let destination = match (a.dest_config, a.dest) {
        (Some(path), None) => {
            let mut cfg = DaemonConfig::load(&path, None).map_err(|e| e.to_string())?;
            if let Some(p) = a.ports {
                cfg.exposed_ports = p;
            }
            Destination::Launch {
                liquidd: launch::find_liquidd(a.liquidd.as_deref()),
                config: Box::new(cfg),
                ready_timeout: Duration::from_secs(300),
            }
        }
        (None, Some(addr)) => Destination::Existing(Client::new(&addr)),
        _ => return Err("exactly one of --dest-config and --dest is required".into()),
    };
    let bundle_name = a.bundle.unwrap_or_else(|| {
        format!("bundle-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"))
    });
    let (report, dest) = migrate::migrate(MigrationPlan {
        source,
        destination,
        shared_dir,
        bundle_name,
        warm: a.warm && !a.cold,
        transfer_delay: Duration::from_secs_f64(a.transfer_delay.max(0.0)),
        continuity_timeout: a.verify_continuity.then(|| Duration::from_secs(30)),
    })
    .map_err(|e| e.to_string())?;
    let dest_addr = dest.map(|d| d.detach());
    print_json(&serde_json::json!({ "report": report, "destination": dest_addr }));
    Ok(report.continuity.as_ref().map(|c| c.ok).unwrap_or(true))
}

fn default_inject_workload() -> WorkloadSpec {
    WorkloadSpec {
        process_count: 2,
        memory_footprint_bytes: 256 * 1024,
        tick_interval_ms: 20,
        state_io_latency_ms: 300,
        label: "inject".into(),
        ..WorkloadSpec::default()
    }
}

fn cmd_inject(a: InjectArgs) -> Result<bool, String> {
    let kind: FaultKind = a.fault.parse()?;
    let phase = inject::parse_phase(&a.phase)?;
    inject::expectation(kind, phase).map_err(|e| e.to_string())?;
    let workload = match a.workload {
        Some(p) => {
            let raw = std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_slice(&raw).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => default_inject_workload(),
    };
    let mut inj = Injector::new(Client::new(&a.target), workload);
    inj.liquidd = Some(launch::find_liquidd(a.liquidd.as_deref()));
    let mut all = true;
    for _ in 0..a.count.max(1) {
        let mut r = inj.inject(kind, phase).map_err(|e| e.to_string())?;
        if let Some(d) = r.relaunched.take() {
            d.detach();
        }
        all &= r.passed;
        println!("{}", serde_json::to_string(&r).expect("serializable"));
    }
    Ok(all)
}

fn cmd_bench(a: BenchArgs) -> Result<bool, String> {
    let scenario = Scenario::load(&a.scenario).map_err(|e| e.to_string())?;
    let liquidd = launch::find_liquidd(a.liquidd.as_deref());
    let liquidctl = std::env::current_exe().map_err(|e| e.to_string())?;
    let env = BenchEnv {
        liquidd,
        liquidctl,
        work_dir: a.work_dir.unwrap_or_else(|| a.out.join("work")),
    };
    let table = bench::run(&env, &scenario).map_err(|e| e.to_string())?;
    table.write(&a.out).map_err(|e| e.to_string())?;
    print!("{}", table.text().map_err(|e| e.to_string())?);
    Ok(table.all_passed())
}

fn cmd_hook(a: HookArgs) -> Result<bool, String> {
    let mut raw = Vec::new();
    std::io::stdin().read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let input: HookInput = serde_json::from_slice(&raw).map_err(|e| format!("hook input: {e}"))?;
    let lines: Vec<String> = input
        .logs
        .iter()
        .map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .collect();
    let lens = complexity::line_lengths(&lines);
    black_box(complexity::analyze(a.complexity, black_box(&lens)));
    let mut prior = StartOptionConfig::standby_default();
    prior.checkpoint_location = input.latest_checkpoint.clone();
    let decision = default_decision(&input.exit_report, &prior, input.latest_checkpoint.as_deref());
    println!("{}", serde_json::to_string(&decision).expect("serializable"));
    Ok(true)
}
