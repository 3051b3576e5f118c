//! Service lifecycle: startup modes, exit reports and the state machine the
//! daemon drives the supervised service through.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on the number of log lines carried in an [`ExitReport`].
pub const DEFAULT_LOG_TAIL: usize = 2000;

/// How the service is brought up on its next start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartupMode {
    FromScratch,
    Restore,
    Standby,
}

impl StartupMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StartupMode::FromScratch => "from_scratch",
            StartupMode::Restore => "restore",
            StartupMode::Standby => "standby",
        }
    }
}

impl fmt::Display for StartupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StartupMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "from_scratch" | "from-scratch" => Ok(StartupMode::FromScratch),
            "restore" => Ok(StartupMode::Restore),
            "standby" => Ok(StartupMode::Standby),
            other => Err(format!("unknown startup mode `{other}`")),
        }
    }
}

/// Which operation the service was in when it terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitPhase {
    Normal,
    Checkpoint,
    Restore,
}

impl fmt::Display for ExitPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExitPhase::Normal => "normal",
            ExitPhase::Checkpoint => "checkpoint",
            ExitPhase::Restore => "restore",
        })
    }
}

impl std::str::FromStr for ExitPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(ExitPhase::Normal),
            "checkpoint" => Ok(ExitPhase::Checkpoint),
            "restore" => Ok(ExitPhase::Restore),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExitReportError {
    #[error("signal {signal} must be encoded as exit code {}, got {exit_code}", 128 + *signal as u32)]
    SignalCodeMismatch { signal: u8, exit_code: u8 },
    #[error("signal number {0} does not fit the 128+n exit code encoding")]
    SignalOutOfRange(u8),
}

/// How the service terminated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitReport {
    pub exit_code: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<u8>,
    pub phase: ExitPhase,
    #[serde(default)]
    pub log_tail: Vec<String>,
    pub occurred_at: DateTime<Utc>,
}

impl ExitReport {
    /// A plain exit with `exit_code`.
    pub fn exited(exit_code: u8, phase: ExitPhase) -> Self {
        ExitReport {
            exit_code,
            signal: None,
            phase,
            log_tail: Vec::new(),
            occurred_at: Utc::now(),
        }
    }

    /// Termination by `signal`, encoded as exit code `128 + signal`.
    pub fn signaled(signal: u8, phase: ExitPhase) -> Result<Self, ExitReportError> {
        if signal == 0 || signal > 127 {
            return Err(ExitReportError::SignalOutOfRange(signal));
        }
        Ok(ExitReport {
            exit_code: 128 + signal,
            signal: Some(signal),
            phase,
            log_tail: Vec::new(),
            occurred_at: Utc::now(),
        })
    }

    /// Build a report from an OS exit status.
    #[cfg(unix)]
    pub fn from_status(status: std::process::ExitStatus, phase: ExitPhase) -> Self {
        use std::os::unix::process::ExitStatusExt;
        match (status.code(), status.signal()) {
            (Some(code), _) => ExitReport::exited((code & 0xff) as u8, phase),
            (None, Some(sig)) if (1..=127).contains(&sig) => {
                ExitReport::signaled(sig as u8, phase).expect("signal range checked")
            }
            _ => ExitReport::exited(255, phase),
        }
    }

    /// Attach the last `bound` lines of `lines`.
    pub fn with_log_tail<I>(mut self, lines: I, bound: usize) -> Self
    where
        I: IntoIterator<Item = String>,
    {
        let mut tail: Vec<String> = lines.into_iter().collect();
        if tail.len() > bound {
            tail.drain(..tail.len() - bound);
        }
        self.log_tail = tail;
        self
    }

    pub fn validate(&self, log_bound: usize) -> Result<(), ExitReportError> {
        if let Some(sig) = self.signal {
            if sig == 0 || sig > 127 {
                return Err(ExitReportError::SignalOutOfRange(sig));
            }
            if self.exit_code != 128 + sig {
                return Err(ExitReportError::SignalCodeMismatch {
                    signal: sig,
                    exit_code: self.exit_code,
                });
            }
        }
        debug_assert!(self.log_tail.len() <= log_bound);
        Ok(())
    }

    /// One-line human summary, used in error responses.
    pub fn summary(&self) -> String {
        match self.signal {
            Some(sig) => format!(
                "service terminated by signal {sig} (exit code {}) during {} phase",
                self.exit_code, self.phase
            ),
            None => format!(
                "service exited with code {} during {} phase",
                self.exit_code, self.phase
            ),
        }
    }
}

/// Lifecycle state of the supervised service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ServiceState {
    Standby,
    Starting,
    Running,
    Checkpointing,
    Restoring,
    Exited { report: Box<ExitReport> },
}

impl ServiceState {
    pub fn name(&self) -> &'static str {
        match self {
            ServiceState::Standby => "standby",
            ServiceState::Starting => "starting",
            ServiceState::Running => "running",
            ServiceState::Checkpointing => "checkpointing",
            ServiceState::Restoring => "restoring",
            ServiceState::Exited { .. } => "exited",
        }
    }

    pub fn is_running(&self) -> bool {
        matches!(self, ServiceState::Running)
    }
}

impl fmt::Display for ServiceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inputs that move the lifecycle state machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LifecycleEvent {
    StartRequested,
    RestoreRequested,
    BecameRunning,
    CheckpointRequested,
    CheckpointAborted,
    Exited(ExitReport),
    RestartDecided(StartupMode),
}

impl LifecycleEvent {
    pub fn name(&self) -> &'static str {
        match self {
            LifecycleEvent::StartRequested => "start_requested",
            LifecycleEvent::RestoreRequested => "restore_requested",
            LifecycleEvent::BecameRunning => "became_running",
            LifecycleEvent::CheckpointRequested => "checkpoint_requested",
            LifecycleEvent::CheckpointAborted => "checkpoint_aborted",
            LifecycleEvent::Exited(_) => "exited",
            LifecycleEvent::RestartDecided(_) => "restart_decided",
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("illegal lifecycle transition: {event} in state {from}")]
pub struct IllegalTransition {
    pub from: &'static str,
    pub event: &'static str,
}

/// Successor of `current` under `event`. Pure; illegal pairs are rejected and
/// the caller keeps its current state.
pub fn transition(
    current: &ServiceState,
    event: &LifecycleEvent,
) -> Result<ServiceState, IllegalTransition> {
    use LifecycleEvent as E;
    use ServiceState as S;

    let next = match (current, event) {
        (S::Standby, E::StartRequested) => S::Starting,
        (S::Standby, E::RestoreRequested) => S::Restoring,
        (S::Starting, E::BecameRunning) | (S::Restoring, E::BecameRunning) => S::Running,
        (S::Running, E::CheckpointRequested) => S::Checkpointing,
        (S::Checkpointing, E::CheckpointAborted) => S::Running,
        (S::Starting | S::Restoring | S::Running | S::Checkpointing, E::Exited(report)) => {
            S::Exited {
                report: Box::new(report.clone()),
            }
        }
        (S::Exited { .. }, E::RestartDecided(mode)) => match mode {
            StartupMode::Standby => S::Standby,
            StartupMode::FromScratch => S::Starting,
            StartupMode::Restore => S::Restoring,
        },
        _ => {
            return Err(IllegalTransition {
                from: current.name(),
                event: event.name(),
            })
        }
    };
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(code: u8) -> ExitReport {
        ExitReport::exited(code, ExitPhase::Normal)
    }

    fn all_states() -> Vec<ServiceState> {
        vec![
            ServiceState::Standby,
            ServiceState::Starting,
            ServiceState::Running,
            ServiceState::Checkpointing,
            ServiceState::Restoring,
            ServiceState::Exited {
                report: Box::new(report(1)),
            },
        ]
    }

    fn all_events() -> Vec<LifecycleEvent> {
        vec![
            LifecycleEvent::StartRequested,
            LifecycleEvent::RestoreRequested,
            LifecycleEvent::BecameRunning,
            LifecycleEvent::CheckpointRequested,
            LifecycleEvent::CheckpointAborted,
            LifecycleEvent::Exited(report(3)),
            LifecycleEvent::RestartDecided(StartupMode::FromScratch),
            LifecycleEvent::RestartDecided(StartupMode::Restore),
            LifecycleEvent::RestartDecided(StartupMode::Standby),
        ]
    }

    #[test]
    fn standby_restore_requested_goes_restoring() {
        let next = transition(&ServiceState::Standby, &LifecycleEvent::RestoreRequested);
        assert_eq!(next, Ok(ServiceState::Restoring));
    }

    #[test]
    fn aborted_checkpoint_resumes_running() {
        let next = transition(&ServiceState::Checkpointing, &LifecycleEvent::CheckpointAborted);
        assert_eq!(next, Ok(ServiceState::Running));
    }

    #[test]
    fn start_while_running_is_illegal() {
        let err = transition(&ServiceState::Running, &LifecycleEvent::StartRequested).unwrap_err();
        assert_eq!(err.from, "running");
        assert_eq!(err.event, "start_requested");
    }

    #[test]
    fn exited_carries_report() {
        let r = report(7);
        let next = transition(&ServiceState::Running, &LifecycleEvent::Exited(r.clone())).unwrap();
        assert_eq!(next, ServiceState::Exited { report: Box::new(r) });
    }

    #[test]
    fn transition_table_matches_declared_edges() {
        // (from, event) pairs that must succeed; everything else must fail.
        let legal: &[(&str, &str, &str)] = &[
            ("standby", "start_requested", "starting"),
            ("standby", "restore_requested", "restoring"),
            ("starting", "became_running", "running"),
            ("starting", "exited", "exited"),
            ("restoring", "became_running", "running"),
            ("restoring", "exited", "exited"),
            ("running", "checkpoint_requested", "checkpointing"),
            ("running", "exited", "exited"),
            ("checkpointing", "exited", "exited"),
            ("checkpointing", "checkpoint_aborted", "running"),
            ("exited", "restart_decided", "*"),
        ];
        let mut seen = 0;
        for s in all_states() {
            for e in all_events() {
                let expect = legal
                    .iter()
                    .find(|(from, ev, _)| *from == s.name() && *ev == e.name());
                match (transition(&s, &e), expect) {
                    (Ok(next), Some((_, _, to))) => {
                        seen += 1;
                        if *to != "*" {
                            assert_eq!(next.name(), *to, "{s} --{}-->", e.name());
                        }
                    }
                    (Err(_), None) => {}
                    (got, want) => panic!("{s} --{}--> {got:?}, expected {want:?}", e.name()),
                }
            }
        }
        // 10 single edges plus three restart modes out of EXITED.
        assert_eq!(seen, 13);
    }

    #[test]
    fn restart_decisions_map_to_mode_states() {
        let exited = ServiceState::Exited {
            report: Box::new(report(0)),
        };
        let go = |m| transition(&exited, &LifecycleEvent::RestartDecided(m)).unwrap();
        assert_eq!(go(StartupMode::Standby), ServiceState::Standby);
        assert_eq!(go(StartupMode::FromScratch), ServiceState::Starting);
        assert_eq!(go(StartupMode::Restore), ServiceState::Restoring);
    }

    #[test]
    fn exited_never_reaches_running_directly() {
        // Breadth-first search from EXITED, forbidding STARTING and RESTORING.
        let mut frontier = vec![ServiceState::Exited {
            report: Box::new(report(1)),
        }];
        let mut visited: Vec<&'static str> = vec!["exited"];
        while let Some(s) = frontier.pop() {
            for e in all_events() {
                if let Ok(next) = transition(&s, &e) {
                    assert_ne!(next.name(), "running", "EXITED reached RUNNING via {}", s);
                    if matches!(next, ServiceState::Starting | ServiceState::Restoring) {
                        continue;
                    }
                    if !visited.contains(&next.name()) {
                        visited.push(next.name());
                        frontier.push(next);
                    }
                }
            }
        }
    }

    #[test]
    fn signal_encoding() {
        let r = ExitReport::signaled(15, ExitPhase::Checkpoint).unwrap();
        assert_eq!(r.exit_code, 143);
        assert!(r.validate(DEFAULT_LOG_TAIL).is_ok());
        let bad = ExitReport {
            exit_code: 1,
            signal: Some(9),
            ..ExitReport::exited(1, ExitPhase::Normal)
        };
        assert!(matches!(
            bad.validate(DEFAULT_LOG_TAIL),
            Err(ExitReportError::SignalCodeMismatch { .. })
        ));
        assert!(ExitReport::signaled(200, ExitPhase::Normal).is_err());
    }

    #[test]
    fn log_tail_is_bounded() {
        let lines = (0..2500).map(|i| format!("line {i}"));
        let r = ExitReport::exited(0, ExitPhase::Normal).with_log_tail(lines, DEFAULT_LOG_TAIL);
        assert_eq!(r.log_tail.len(), DEFAULT_LOG_TAIL);
        assert_eq!(r.log_tail[0], "line 500");
    }

    #[cfg(unix)]
    #[test]
    fn report_from_os_status() {
        use std::os::unix::process::ExitStatusExt;
        let r = ExitReport::from_status(std::process::ExitStatus::from_raw(9), ExitPhase::Normal);
        assert_eq!((r.exit_code, r.signal), (137, Some(9)));
        let r = ExitReport::from_status(
            std::process::ExitStatus::from_raw(3 << 8),
            ExitPhase::Normal,
        );
        assert_eq!((r.exit_code, r.signal), (3, None));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn state_strategy() -> impl Strategy<Value = ServiceState> {
            (0usize..6).prop_map(|i| all_states().swap_remove(i))
        }

        fn event_strategy() -> impl Strategy<Value = LifecycleEvent> {
            (0usize..9).prop_map(|i| all_events().swap_remove(i))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(10_000))]
            #[test]
            fn transition_is_deterministic(s in state_strategy(), e in event_strategy()) {
                prop_assert_eq!(transition(&s, &e), transition(&s.clone(), &e.clone()));
            }
        }
    }
}
