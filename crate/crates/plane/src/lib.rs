//! Control plane for liquid services: the supervisor daemon (`liquidd`) and
//! the migration orchestrator (`liquidctl`).

pub mod daemon;
pub mod orchestrator;
pub mod wire;
