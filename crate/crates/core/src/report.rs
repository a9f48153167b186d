//! JSON replay report. Field order and map ordering are fixed so two runs over
//! the same inputs produce identical bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::acl::{DenyReason, Route};
use crate::monitor::{Decision, Mode, Pid, Verdict};
use crate::policy::{AccessPriv, Rule};
use crate::replay::{ReplayOptions, ReplayResult};
use crate::stack::{canonical_hash, StackHash};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub events: usize,
    pub allow: usize,
    /// Enforced denials by reason.
    pub deny: BTreeMap<String, usize>,
    /// Denials complain mode let through, by reason.
    pub would_deny: BTreeMap<String, usize>,
    pub rejected: usize,
    pub fast_path_hits: usize,
    pub inspections: usize,
    pub domain_faults: u64,
    pub priv_changes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub seq: u64,
    pub pid: Pid,
    /// `allow`, `deny` or `rejected`.
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub would_deny: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<Route>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<String>,
    #[serde(default, rename = "priv", skip_serializing_if = "Option::is_none")]
    pub privs: Option<AccessPriv>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack_hash: Option<StackHash>,
}

impl DecisionRecord {
    fn from_decision(d: &Decision) -> Self {
        let (verdict, reason) = match &d.verdict {
            Verdict::Allow => ("allow", None),
            Verdict::Deny(r) => ("deny", Some(r.to_string())),
            Verdict::Rejected(e) => ("rejected", Some(e.to_string())),
        };
        DecisionRecord {
            seq: d.seq,
            pid: d.pid,
            verdict: verdict.to_string(),
            reason,
            would_deny: d.would_deny.map(|r| r.to_string()),
            route: d.route,
            resource: d.request.as_ref().map(|r| r.resource.to_string()),
            privs: d.request.as_ref().map(|r| r.privs),
            stack_hash: d
                .stack
                .as_ref()
                .filter(|s| !s.is_empty())
                .map(canonical_hash),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub mode: Mode,
    pub fast_path: bool,
    pub summary: Summary,
    pub decisions: Vec<DecisionRecord>,
    /// Policy lines suggested by complain mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suggestions: Vec<String>,
}

fn bump(map: &mut BTreeMap<String, usize>, r: DenyReason) {
    *map.entry(r.to_string()).or_default() += 1;
}

pub fn summarize(result: &ReplayResult) -> Summary {
    let mut s = Summary {
        events: result.decisions.len(),
        allow: 0,
        deny: BTreeMap::new(),
        would_deny: BTreeMap::new(),
        rejected: 0,
        fast_path_hits: 0,
        inspections: 0,
        domain_faults: result.memdom.faults,
        priv_changes: result.memdom.priv_changes,
    };
    for d in &result.decisions {
        match d.verdict {
            Verdict::Allow => s.allow += 1,
            Verdict::Deny(r) => bump(&mut s.deny, r),
            Verdict::Rejected(_) => s.rejected += 1,
        }
        if let Some(r) = d.would_deny {
            bump(&mut s.would_deny, r);
        }
        s.fast_path_hits += d.fast_path() as usize;
        s.inspections += d.inspected() as usize;
    }
    s
}

pub fn build_report(result: &ReplayResult, opts: ReplayOptions, suggestions: &[Rule]) -> Report {
    Report {
        version: REPORT_VERSION,
        mode: opts.mode,
        fast_path: opts.fast_path,
        summary: summarize(result),
        decisions: result
            .decisions
            .iter()
            .map(DecisionRecord::from_decision)
            .collect(),
        suggestions: suggestions.iter().map(Rule::to_string).collect(),
    }
}

pub fn render_report(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::parse_policy;
    use crate::replay::replay;
    use crate::trace::parse_trace;

    const TRACE: &str = r#"{"version":1,"initial_pid":1}
{"seq":1,"pid":1,"kind":"register"}
{"seq":2,"pid":1,"kind":"open","path":"/a","priv":"r","stack":["m.f"]}
{"seq":3,"pid":1,"kind":"open","path":"/a","priv":"w","stack":["m.f"]}
{"seq":4,"pid":2,"kind":"open","path":"/a","priv":"r"}
"#;

    #[test]
    fn summary_counts() {
        let policy = parse_policy("m.f /a r\n").unwrap();
        let trace = parse_trace(TRACE).unwrap();
        let opts = ReplayOptions::default();
        let r = replay(&policy, &trace, opts);
        let s = summarize(&r);
        assert_eq!(s.events, 4);
        assert_eq!(s.allow, 2);
        assert_eq!(s.deny.get("ProcessDenied"), Some(&1));
        assert_eq!(s.rejected, 1);
        assert_eq!(s.inspections, 1);

        let a = render_report(&build_report(&r, opts, &[]));
        let b = render_report(&build_report(&replay(&policy, &trace, opts), opts, &[]));
        assert_eq!(a, b);
        let back: Report = serde_json::from_str(&a).unwrap();
        assert_eq!(back.summary, s);
    }
}
