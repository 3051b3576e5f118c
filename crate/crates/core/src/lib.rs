//! Core of the liquid service control plane.
//!
//! * [`lifecycle`]: startup modes, exit reports and the service state machine.
//! * [`start_option`]: the persisted decision of how the service starts next.
//! * [`workload`]: a cooperative multi-process toy workload.
//! * [`engine`]: checkpoint/restore of workload trees with virtual PID
//!   reservation and integrity-checked bundles.
//! * [`fault_policy`]: turns an exit report into the next start option.

pub mod engine;
pub mod fault_policy;
pub mod lifecycle;
pub mod start_option;
pub mod storage;
pub mod workload;

pub use engine::{CheckpointBundle, ReservationCost, VirtualPidSpace};
pub use fault_policy::FaultPolicy;
pub use lifecycle::{ExitPhase, ExitReport, LifecycleEvent, ServiceState, StartupMode};
pub use start_option::StartOptionConfig;
pub use workload::{WorkloadHandle, WorkloadSpec, WorkloadState};
