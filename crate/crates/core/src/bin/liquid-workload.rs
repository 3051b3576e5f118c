//! Standalone launcher for workload processes.

fn main() {
    std::process::exit(liquid_core::workload::runtime::main(std::env::args().collect()));
}
