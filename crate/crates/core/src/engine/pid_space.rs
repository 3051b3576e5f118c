//! Virtual PID namespace with `ns_last_pid` semantics.
//!
//! The next allocation takes the first free PID after `last_pid`, wrapping
//! from `pid_max - 1` to `reserved_low`. A reservation positions `last_pid` so
//! that the next allocation yields a chosen PID: one direct write when the
//! space is privileged, otherwise a fork-and-kill loop that advances
//! `last_pid` one allocation at a time.

use std::collections::BTreeSet;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PID_MAX: u32 = 32768;
/// PIDs below this are skipped after a wraparound.
pub const DEFAULT_RESERVED_LOW: u32 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationKind {
    Write,
    Fork,
}

/// One entry of the allocation log. A fork-and-kill loop is recorded as a
/// single entry with `count` forks ending at `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationEntry {
    pub kind: AllocationKind,
    pub value: u32,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationCost {
    pub direct_writes: u64,
    pub fork_iterations: u64,
}

impl Add for ReservationCost {
    type Output = ReservationCost;

    fn add(self, rhs: ReservationCost) -> ReservationCost {
        ReservationCost {
            direct_writes: self.direct_writes + rhs.direct_writes,
            fork_iterations: self.fork_iterations + rhs.fork_iterations,
        }
    }
}

impl AddAssign for ReservationCost {
    fn add_assign(&mut self, rhs: ReservationCost) {
        *self = *self + rhs;
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PidError {
    #[error("pid {0} is already in use")]
    TargetInUse(u32),
    #[error("pid {pid} outside (0, {pid_max})")]
    OutOfRange { pid: u32, pid_max: u32 },
    #[error("pid {target} cannot be reached from last_pid {last_pid} without privilege")]
    Unreachable { target: u32, last_pid: u32 },
    #[error("no free pid left")]
    Exhausted,
    #[error("invalid pid space: {0}")]
    Invalid(String),
}

/// Construction parameters; also the serialized form in daemon configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PidSpaceParams {
    #[serde(default = "default_pid_max")]
    pub pid_max: u32,
    #[serde(default = "default_reserved_low")]
    pub reserved_low: u32,
    #[serde(default = "default_reserved_low")]
    pub initial_last_pid: u32,
    #[serde(default)]
    pub privileged: bool,
}

fn default_pid_max() -> u32 {
    DEFAULT_PID_MAX
}

fn default_reserved_low() -> u32 {
    DEFAULT_RESERVED_LOW
}

impl Default for PidSpaceParams {
    fn default() -> Self {
        PidSpaceParams {
            pid_max: DEFAULT_PID_MAX,
            reserved_low: DEFAULT_RESERVED_LOW,
            initial_last_pid: DEFAULT_RESERVED_LOW,
            privileged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualPidSpace {
    last_pid: u32,
    pid_max: u32,
    reserved_low: u32,
    in_use: BTreeSet<u32>,
    privileged: bool,
    allocation_log: Vec<AllocationEntry>,
}

impl VirtualPidSpace {
    pub fn new(params: PidSpaceParams) -> Result<Self, PidError> {
        let PidSpaceParams {
            pid_max,
            reserved_low,
            initial_last_pid,
            privileged,
        } = params;
        if pid_max < 3 || reserved_low == 0 || reserved_low >= pid_max {
            return Err(PidError::Invalid(format!(
                "need 0 < reserved_low ({reserved_low}) < pid_max ({pid_max})"
            )));
        }
        if initial_last_pid >= pid_max {
            return Err(PidError::Invalid(format!(
                "last_pid {initial_last_pid} must be below pid_max {pid_max}"
            )));
        }
        Ok(VirtualPidSpace {
            last_pid: initial_last_pid,
            pid_max,
            reserved_low,
            in_use: BTreeSet::new(),
            privileged,
            allocation_log: Vec::new(),
        })
    }

    pub fn with_in_use<I: IntoIterator<Item = u32>>(mut self, pids: I) -> Result<Self, PidError> {
        for p in pids {
            self.check_range(p)?;
            self.in_use.insert(p);
        }
        Ok(self)
    }

    pub fn last_pid(&self) -> u32 {
        self.last_pid
    }

    pub fn pid_max(&self) -> u32 {
        self.pid_max
    }

    pub fn reserved_low(&self) -> u32 {
        self.reserved_low
    }

    pub fn privileged(&self) -> bool {
        self.privileged
    }

    pub fn in_use(&self) -> &BTreeSet<u32> {
        &self.in_use
    }

    pub fn allocation_log(&self) -> &[AllocationEntry] {
        &self.allocation_log
    }

    pub fn is_free(&self, pid: u32) -> bool {
        pid > 0 && pid < self.pid_max && !self.in_use.contains(&pid)
    }

    fn check_range(&self, pid: u32) -> Result<(), PidError> {
        if pid == 0 || pid >= self.pid_max {
            return Err(PidError::OutOfRange {
                pid,
                pid_max: self.pid_max,
            });
        }
        Ok(())
    }

    fn successor(&self, pid: u32) -> u32 {
        if pid + 1 >= self.pid_max {
            self.reserved_low
        } else {
            pid + 1
        }
    }

    /// The PID the next allocation would return.
    pub fn peek_next(&self) -> Option<u32> {
        let mut p = self.last_pid;
        for _ in 0..self.pid_max {
            p = self.successor(p);
            if !self.in_use.contains(&p) {
                return Some(p);
            }
        }
        None
    }

    /// Allocate the next PID (a fork that keeps its child).
    pub fn allocate(&mut self) -> Result<u32, PidError> {
        let pid = self.peek_next().ok_or(PidError::Exhausted)?;
        self.last_pid = pid;
        self.in_use.insert(pid);
        self.allocation_log.push(AllocationEntry {
            kind: AllocationKind::Fork,
            value: pid,
            count: 1,
        });
        Ok(pid)
    }

    pub fn release(&mut self, pid: u32) {
        self.in_use.remove(&pid);
    }

    /// Free PIDs in the half-open numeric range `[lo, hi)`.
    fn free_in(&self, lo: u32, hi: u32) -> u64 {
        if lo >= hi {
            return 0;
        }
        let used = self.in_use.range(lo..hi).count() as u64;
        u64::from(hi - lo) - used
    }

    /// Highest free PID in `[lo, hi)`.
    fn last_free_in(&self, lo: u32, hi: u32) -> Option<u32> {
        (lo..hi).rev().find(|p| !self.in_use.contains(p))
    }

    /// Position `last_pid` so that the next allocation yields `target`.
    pub fn reserve_pid(&mut self, target: u32) -> Result<ReservationCost, PidError> {
        self.check_range(target)?;
        if self.in_use.contains(&target) {
            return Err(PidError::TargetInUse(target));
        }
        if self.privileged {
            self.last_pid = target - 1;
            self.allocation_log.push(AllocationEntry {
                kind: AllocationKind::Write,
                value: target - 1,
                count: 1,
            });
            return Ok(ReservationCost {
                direct_writes: 1,
                fork_iterations: 0,
            });
        }

        // Forks visit the free PIDs strictly between last_pid and target in
        // allocation order: (last, target) directly, or (last, pid_max) then
        // [reserved_low, target) across a wraparound.
        let last = self.last_pid;
        let (forks, final_last) = if target > last {
            let n = self.free_in(last + 1, target);
            (n, self.last_free_in(last + 1, target))
        } else if target >= self.reserved_low {
            let head = self.free_in(last + 1, self.pid_max);
            let tail = self.free_in(self.reserved_low, target);
            let end = self
                .last_free_in(self.reserved_low, target)
                .or_else(|| self.last_free_in(last + 1, self.pid_max));
            (head + tail, end)
        } else {
            return Err(PidError::Unreachable {
                target,
                last_pid: last,
            });
        };

        if forks > 0 {
            self.last_pid = final_last.expect("a fork landed somewhere");
            self.allocation_log.push(AllocationEntry {
                kind: AllocationKind::Fork,
                value: self.last_pid,
                count: forks,
            });
        }
        Ok(ReservationCost {
            direct_writes: 0,
            fork_iterations: forks,
        })
    }
}
