//! Out-of-process drivers: migration, fault injection and benchmarks.

pub mod client;
pub mod launch;
pub mod migrate;
pub mod inject;
pub mod report;
pub mod stats;
pub mod bench;
