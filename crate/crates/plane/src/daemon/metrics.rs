//! Line-oriented `name value` metrics.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::Mutex;
use std::time::Duration;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Summary {
    count: u64,
    sum: f64,
    last: f64,
}

#[derive(Debug, Default)]
struct Inner {
    summaries: BTreeMap<&'static str, Summary>,
    counters: BTreeMap<&'static str, u64>,
}

#[derive(Debug, Default)]
pub struct Metrics {
    inner: Mutex<Inner>,
}

pub const FAULT_DECISION: &str = "fault_decision_seconds";
pub const CHECKPOINT: &str = "checkpoint_duration_seconds";
pub const RESTORE: &str = "restore_duration_seconds";
pub const MIGRATION: &str = "migration_duration_seconds";
pub const START: &str = "start_duration_seconds";
pub const HOOKS: &str = "post_checkpoint_hook_seconds";
pub const FORK_ITERATIONS: &str = "fork_iterations_total";
pub const DIRECT_WRITES: &str = "direct_writes_total";
pub const EXITS: &str = "service_exits_total";
pub const CHECKPOINT_FAILURES: &str = "checkpoint_failures_total";

impl Metrics {
    pub fn observe(&self, name: &'static str, d: Duration) {
        let mut g = self.inner.lock().unwrap();
        let s = g.summaries.entry(name).or_default();
        s.count += 1;
        s.sum += d.as_secs_f64();
        s.last = d.as_secs_f64();
    }

    pub fn add(&self, name: &'static str, n: u64) {
        *self.inner.lock().unwrap().counters.entry(name).or_default() += n;
    }

    pub fn count(&self, name: &'static str) -> u64 {
        let g = self.inner.lock().unwrap();
        g.summaries
            .get(name)
            .map(|s| s.count)
            .or_else(|| g.counters.get(name).copied())
            .unwrap_or(0)
    }

    /// Render every metric plus the given gauges.
    pub fn render(&self, gauges: &[(&str, f64)]) -> String {
        let g = self.inner.lock().unwrap();
        let mut out = String::new();
        for (name, v) in gauges {
            let _ = writeln!(out, "liquidd_{name} {v}");
        }
        for name in [FAULT_DECISION, CHECKPOINT, RESTORE, MIGRATION, START, HOOKS] {
            let s = g.summaries.get(name).copied().unwrap_or_default();
            let _ = writeln!(out, "liquidd_{name}_count {}", s.count);
            let _ = writeln!(out, "liquidd_{name}_sum {:.6}", s.sum);
            let _ = writeln!(out, "liquidd_{name}_last {:.6}", s.last);
        }
        for name in [FORK_ITERATIONS, DIRECT_WRITES, EXITS, CHECKPOINT_FAILURES] {
            let _ = writeln!(out, "liquidd_{name} {}", g.counters.get(name).copied().unwrap_or(0));
        }
        out
    }
}

/// Parse rendered metrics back into a map.
pub fn parse(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.split_once(' ')?;
            Some((k.to_string(), v.trim().parse().ok()?))
        })
        .collect()
}
