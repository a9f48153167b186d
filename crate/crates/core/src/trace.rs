//! Version-1 trace files: line-delimited JSON, a header object followed by one
//! event object per line.
//!
//! ```text
//! {"version":1,"initial_pid":100,"symlinks":{"/tmp/k":"/app/private.key"}}
//! {"seq":1,"pid":100,"kind":"register"}
//! {"seq":2,"pid":100,"kind":"open","path":"/app/photo.jpg","priv":"r","stack":["tweepy.upload","app.main"]}
//! {"seq":3,"pid":100,"kind":"connect","proto":"tcp","dest":"10.1.2.3","stack":["tweepy.upload"],"recv_hash":"<64 hex>"}
//! {"seq":4,"pid":100,"kind":"fork","child_pid":101}
//! {"seq":5,"pid":101,"kind":"exec","path":"/bin/sh"}
//! ```
//!
//! Structural problems (bad JSON, unknown or missing fields, a non-increasing
//! `seq`) are [`TraceError`]s. Semantic problems such as an IPv6 destination
//! or an unknown pid are left for the monitor, which rejects the event.

use std::collections::BTreeMap;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::{Event, EventKind, FsModel, Pid};
use crate::policy::{validate_fs_path, AccessPriv, Protocol};
use crate::stack::{CallStack, StackHash};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {reason}")]
pub struct TraceError {
    pub line: usize,
    pub reason: String,
}

fn err(line: usize, reason: impl Into<String>) -> TraceError {
    TraceError {
        line,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub version: u32,
    pub initial_pid: Pid,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub symlinks: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub live_fs: bool,
}

impl TraceHeader {
    pub fn new(initial_pid: Pid) -> Self {
        TraceHeader {
            version: TRACE_VERSION,
            initial_pid,
            symlinks: BTreeMap::new(),
            live_fs: false,
        }
    }

    pub fn fs_model(&self) -> FsModel {
        FsModel {
            symlinks: self.symlinks.clone(),
            live: self.live_fs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Open,
    Connect,
    Bind,
    Fork,
    Exec,
    Register,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    seq: u64,
    pid: Pid,
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, rename = "priv", skip_serializing_if = "Option::is_none")]
    privs: Option<AccessPriv>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    proto: Option<Protocol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    child_pid: Option<Pid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stack: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recv_hash: Option<String>,
}

impl RawEvent {
    fn from_event(ev: &Event) -> Self {
        let mut raw = RawEvent {
            seq: ev.seq,
            pid: ev.pid,
            kind: RawKind::Register,
            path: None,
            privs: None,
            proto: None,
            dest: None,
            child_pid: None,
            stack: ev
                .stack
                .as_ref()
                .map(|s| s.names().map(str::to_string).collect()),
            recv_hash: ev.recv_hash.map(|h| h.to_hex()),
        };
        match &ev.kind {
            EventKind::Open { path, privs } => {
                raw.kind = RawKind::Open;
                raw.path = Some(path.clone());
                raw.privs = Some(*privs);
            }
            EventKind::Connect { proto, dest } | EventKind::Bind { proto, dest } => {
                raw.kind = if matches!(ev.kind, EventKind::Connect { .. }) {
                    RawKind::Connect
                } else {
                    RawKind::Bind
                };
                raw.proto = Some(*proto);
                raw.dest = Some(dest.to_string());
            }
            EventKind::Fork { child_pid } => {
                raw.kind = RawKind::Fork;
                raw.child_pid = Some(*child_pid);
            }
            EventKind::Exec { path } => {
                raw.kind = RawKind::Exec;
                raw.path = Some(path.clone());
            }
            EventKind::RuntimeRegister => {}
        }
        raw
    }

    fn into_event(self, line: usize) -> Result<Event, TraceError> {
        let RawEvent {
            seq,
            pid,
            kind,
            path,
            privs,
            proto,
            dest,
            child_pid,
            stack,
            recv_hash,
        } = self;
        let unexpected = |name: &str, present: bool| -> Result<(), TraceError> {
            if present {
                Err(err(
                    line,
                    format!("field `{name}` not allowed for this kind"),
                ))
            } else {
                Ok(())
            }
        };
        let need = |name: &str| err(line, format!("missing field `{name}`"));

        let kind = match kind {
            RawKind::Open => {
                unexpected("proto", proto.is_some())?;
                unexpected("dest", dest.is_some())?;
                unexpected("child_pid", child_pid.is_some())?;
                EventKind::Open {
                    path: path.ok_or_else(|| need("path"))?,
                    privs: privs.ok_or_else(|| need("priv"))?,
                }
            }
            RawKind::Exec => {
                unexpected("priv", privs.is_some())?;
                unexpected("proto", proto.is_some())?;
                unexpected("dest", dest.is_some())?;
                unexpected("child_pid", child_pid.is_some())?;
                EventKind::Exec {
                    path: path.ok_or_else(|| need("path"))?,
                }
            }
            RawKind::Connect | RawKind::Bind => {
                unexpected("path", path.is_some())?;
                unexpected("priv", privs.is_some())?;
                unexpected("child_pid", child_pid.is_some())?;
                let proto = proto.ok_or_else(|| need("proto"))?;
                let dest_text = dest.ok_or_else(|| need("dest"))?;
                let dest: IpAddr = dest_text
                    .parse()
                    .map_err(|_| err(line, format!("invalid IP address `{dest_text}`")))?;
                if kind == RawKind::Connect {
                    EventKind::Connect { proto, dest }
                } else {
                    EventKind::Bind { proto, dest }
                }
            }
            RawKind::Fork | RawKind::Register => {
                unexpected("path", path.is_some())?;
                unexpected("priv", privs.is_some())?;
                unexpected("proto", proto.is_some())?;
                unexpected("dest", dest.is_some())?;
                if kind == RawKind::Fork {
                    EventKind::Fork {
                        child_pid: child_pid.ok_or_else(|| need("child_pid"))?,
                    }
                } else {
                    unexpected("child_pid", child_pid.is_some())?;
                    EventKind::RuntimeRegister
                }
            }
        };
        let stack = stack
            .map(|names| CallStack::from_names(names).map_err(|e| err(line, e.to_string())))
            .transpose()?;
        let recv_hash = recv_hash
            .map(|h| h.parse::<StackHash>().map_err(|e| err(line, e.to_string())))
            .transpose()?;
        Ok(Event {
            seq,
            pid,
            kind,
            stack,
            recv_hash,
        })
    }
}

/// Parses a complete trace. Blank lines are ignored.
pub fn parse_trace(text: &str) -> Result<Trace, TraceError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or_else(|| err(1, "missing header"))?;
    let header: TraceHeader =
        serde_json::from_str(htext).map_err(|e| err(hline, format!("invalid header: {e}")))?;
    if header.version != TRACE_VERSION {
        return Err(err(
            hline,
            format!("unsupported trace version {}", header.version),
        ));
    }
    for (link, target) in &header.symlinks {
        validate_fs_path(link.trim_end_matches('/'))
            .map_err(|r| err(hline, format!("symlink `{link}`: {r}")))?;
        if target.is_empty() {
            return Err(err(hline, format!("symlink `{link}` has an empty target")));
        }
    }

    let mut events = Vec::new();
    let mut last_seq: Option<u64> = None;
    for (line, l) in lines {
        let raw: RawEvent =
            serde_json::from_str(l).map_err(|e| err(line, format!("invalid event: {e}")))?;
        if last_seq.is_some_and(|s| raw.seq <= s) {
            return Err(err(line, format!("seq {} is not increasing", raw.seq)));
        }
        last_seq = Some(raw.seq);
        events.push(raw.into_event(line)?);
    }
    Ok(Trace { header, events })
}

/// Renders a trace in the version-1 format, newline-terminated.
pub fn write_trace(trace: &Trace) -> String {
    let mut out = serde_json::to_string(&trace.header).expect("header serializes");
    out.push('\n');
    for ev in &trace.events {
        out.push_str(&serde_json::to_string(&RawEvent::from_event(ev)).expect("event serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::canonical_hash;

    const SAMPLE: &str = r#"{"version":1,"initial_pid":100,"symlinks":{"/tmp/k":"/app/private.key"}}
{"seq":1,"pid":100,"kind":"register"}
{"seq":2,"pid":100,"kind":"open","path":"/app/photo.jpg","priv":"r","stack":["tweepy.upload","app.main"]}
{"seq":3,"pid":100,"kind":"connect","proto":"tcp","dest":"10.1.2.3","stack":["tweepy.upload"],"recv_hash":"a88d64c2e217cabb6e9fa5a726110be5b65d9b2f79f03faee28f266764486f57"}
{"seq":4,"pid":100,"kind":"fork","child_pid":101}
{"seq":5,"pid":101,"kind":"exec","path":"/bin/sh"}
{"seq":7,"pid":100,"kind":"bind","proto":"udp","dest":"0.0.0.0"}
"#;

    #[test]
    fn parses_sample() {
        let t = parse_trace(SAMPLE).unwrap();
        assert_eq!(t.header.initial_pid, 100);
        assert_eq!(t.events.len(), 6);
        assert_eq!(t.events[0].kind, EventKind::RuntimeRegister);
        assert_eq!(t.events[3].kind, EventKind::Fork { child_pid: 101 });
        let h = canonical_hash(&CallStack::from_names(["m.f"]).unwrap());
        assert_eq!(t.events[2].recv_hash, Some(h));
    }

    #[test]
    fn write_is_byte_identical_for_canonical_input() {
        let t = parse_trace(SAMPLE).unwrap();
        assert_eq!(write_trace(&t), SAMPLE);
    }

    #[test]
    fn rejects_structural_errors() {
        let head = "{\"version\":1,\"initial_pid\":1}\n";
        let cases = [
            ("", 1),
            ("{\"version\":2,\"initial_pid\":1}\n", 1),
            ("{\"version\":1}\n", 1),
            (&*format!("{head}not json\n"), 2),
            (&*format!("{head}{{\"seq\":1,\"pid\":1,\"kind\":\"open\",\"path\":\"/a\"}}\n"), 2),
            (&*format!("{head}{{\"seq\":1,\"pid\":1,\"kind\":\"fork\"}}\n"), 2),
            (&*format!("{head}{{\"seq\":1,\"pid\":1,\"kind\":\"register\",\"path\":\"/a\"}}\n"), 2),
            (&*format!("{head}{{\"seq\":1,\"pid\":1,\"kind\":\"connect\",\"proto\":\"tcp\",\"dest\":\"host\"}}\n"), 2),
            (&*format!("{head}{{\"seq\":1,\"pid\":1,\"kind\":\"register\",\"bogus\":1}}\n"), 2),
            (&*format!("{head}{{\"seq\":1,\"pid\":1,\"kind\":\"register\",\"stack\":[\"nodot\"]}}\n"), 2),
            (&*format!("{head}{{\"seq\":1,\"pid\":1,\"kind\":\"register\",\"recv_hash\":\"ab\"}}\n"), 2),
            (&*format!("{head}{{\"seq\":2,\"pid\":1,\"kind\":\"register\"}}\n{{\"seq\":2,\"pid\":1,\"kind\":\"register\"}}\n"), 3),
        ];
        for (text, line) in cases {
            let e = parse_trace(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
    }

    #[test]
    fn ipv6_passes_schema() {
        let text = "{\"version\":1,\"initial_pid\":1}\n{\"seq\":1,\"pid\":1,\"kind\":\"connect\",\"proto\":\"tcp\",\"dest\":\"::1\"}\n";
        let t = parse_trace(text).unwrap();
        assert!(matches!(
            t.events[0].kind,
            EventKind::Connect {
                dest: IpAddr::V6(_),
                ..
            }
        ));
    }
}
