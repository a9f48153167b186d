//! Runs a parsed trace through a fresh monitor.

use crate::memdom::MemdomCounters;
use crate::monitor::{Decision, Mode, Monitor, MonitorConfig};
use crate::policy::Policy;
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayOptions {
    pub mode: Mode,
    pub fast_path: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            mode: Mode::Enforce,
            fast_path: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayResult {
    pub decisions: Vec<Decision>,
    pub memdom: MemdomCounters,
    /// Longest stack-hash ring seen at any point during the run.
    pub max_log_len: usize,
}

pub fn replay(policy: &Policy, trace: &Trace, opts: ReplayOptions) -> ReplayResult {
    replay_with(policy, trace, opts, |_, _| {})
}

/// Like [`replay`], calling `hook` with the monitor state after every event.
pub fn replay_with<F>(
    policy: &Policy,
    trace: &Trace,
    opts: ReplayOptions,
    mut hook: F,
) -> ReplayResult
where
    F: FnMut(&Monitor, &Decision),
{
    let config = MonitorConfig {
        mode: opts.mode,
        fast_path: opts.fast_path,
        ..MonitorConfig::default()
    };
    let mut monitor = Monitor::new(policy, trace.header.fs_model(), config);
    monitor.spawn_root(trace.header.initial_pid);
    let mut decisions = Vec::with_capacity(trace.events.len());
    let mut max_log_len = 0;
    for ev in &trace.events {
        let d = monitor.step(ev);
        max_log_len = max_log_len.max(monitor.table().max_log_len());
        hook(&monitor, &d);
        decisions.push(d);
    }
    ReplayResult {
        decisions,
        memdom: monitor.table().memdom_totals(),
        max_log_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::{Event, EventKind, Verdict};
    use crate::policy::{parse_policy, AccessPriv};
    use crate::stack::CallStack;
    use crate::trace::TraceHeader;

    #[test]
    fn root_is_tracked_before_register() {
        let policy = parse_policy("m.f /a r\n").unwrap();
        let trace = Trace {
            header: TraceHeader::new(7),
            events: vec![
                Event::new(
                    1,
                    7,
                    EventKind::Open {
                        path: "/a".into(),
                        privs: AccessPriv::Read,
                    },
                ),
                Event::new(2, 7, EventKind::RuntimeRegister),
                Event::new(
                    3,
                    7,
                    EventKind::Open {
                        path: "/a".into(),
                        privs: AccessPriv::Read,
                    },
                )
                .with_stack(CallStack::from_names(["m.g"]).unwrap()),
            ],
        };
        let r = replay(&policy, &trace, ReplayOptions::default());
        // native process: the union of function privileges covers /a
        assert_eq!(r.decisions[0].verdict, Verdict::Allow);
        assert!(!r.decisions[0].registered);
        // registered: m.g is not ruled
        assert!(r.decisions[2].is_denied());
    }
}
