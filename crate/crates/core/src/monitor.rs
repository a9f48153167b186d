//! The reference monitor: turns syscall-level events into decisions.
//!
//! File opens and execs are resolved through the symlink model and checked
//! with the full access pipeline; connects and binds additionally require a
//! whitelisted destination for the requesting function. Forks copy the
//! parent's enforcement state and address-space model into the child. The
//! upcall that fetches the runtime stack is modeled by handing the event's
//! recorded stack to the check.

use std::collections::{BTreeMap, VecDeque};
use std::net::{IpAddr, Ipv4Addr};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acl::{
    AccessOutcome, AccessRequest, AccessVerdict, DenyReason, ProcessAcl, Resource, Route,
    StackUnavailable,
};
use crate::memdom::{
    fork_address_space, AccessKind, AddressSpaceModel, BlockHandle, MemdomCounters,
    DEFAULT_PAGE_CAP, MAIN_RUNTIME, STACK_INSPECTOR,
};
use crate::policy::{validate_fs_path, AccessPriv, FunctionId, Policy, Protocol, ResourcePattern};
use crate::stack::{CallStack, Inspection, StackHash};

pub type Pid = u32;

/// Longest symlink chain followed before giving up.
pub const MAX_SYMLINK_FOLLOWS: usize = 40;

/// Bytes modeled for one runtime frame record in the stack domain.
pub const FRAME_RECORD_BYTES: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Open {
        path: String,
        privs: AccessPriv,
    },
    Connect {
        proto: Protocol,
        dest: IpAddr,
    },
    Bind {
        proto: Protocol,
        dest: IpAddr,
    },
    Fork {
        child_pid: Pid,
    },
    Exec {
        path: String,
    },
    /// The process announces itself as a language runtime that can answer
    /// stack upcalls.
    RuntimeRegister,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Open { .. } => "open",
            EventKind::Connect { .. } => "connect",
            EventKind::Bind { .. } => "bind",
            EventKind::Fork { .. } => "fork",
            EventKind::Exec { .. } => "exec",
            EventKind::RuntimeRegister => "register",
        }
    }

    /// Open, connect, bind and exec request a resource; the rest do not.
    pub fn is_resource_request(&self) -> bool {
        !matches!(self, EventKind::Fork { .. } | EventKind::RuntimeRegister)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub pid: Pid,
    pub kind: EventKind,
    pub stack: Option<CallStack>,
    pub recv_hash: Option<StackHash>,
}

impl Event {
    pub fn new(seq: u64, pid: Pid, kind: EventKind) -> Self {
        Event {
            seq,
            pid,
            kind,
            stack: None,
            recv_hash: None,
        }
    }

    pub fn with_stack(mut self, stack: CallStack) -> Self {
        self.stack = Some(stack);
        self
    }

    pub fn with_hash(mut self, hash: StackHash) -> Self {
        self.recv_hash = Some(hash);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum EventError {
    #[error("unknown pid {0}")]
    UnknownPid(Pid),
    #[error("malformed event: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Deny(DenyReason),
    /// The event could not be evaluated; it is treated as a denial.
    Rejected(EventError),
}

impl Verdict {
    pub fn is_allow(&self) -> bool {
        *self == Verdict::Allow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Enforce,
    Complain,
}

/// The monitor's answer for one event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub seq: u64,
    pub pid: Pid,
    /// Effective verdict; in complain mode denials surface as `Allow`.
    pub verdict: Verdict,
    /// The denial complain mode suppressed.
    pub would_deny: Option<DenyReason>,
    pub route: Option<Route>,
    /// Canonical request, for resource-requesting events.
    pub request: Option<AccessRequest>,
    /// Stack attached to the event, kept as provenance.
    pub stack: Option<CallStack>,
    /// Whether the process was a registered runtime when the event arrived.
    pub registered: bool,
    pub inspection: Option<Inspection>,
}

impl Decision {
    fn bare(ev: &Event, verdict: Verdict) -> Self {
        Decision {
            seq: ev.seq,
            pid: ev.pid,
            verdict,
            would_deny: None,
            route: None,
            request: None,
            stack: ev.stack.clone(),
            registered: false,
            inspection: None,
        }
    }

    pub fn fast_path(&self) -> bool {
        self.route == Some(Route::FastPath)
    }

    pub fn inspected(&self) -> bool {
        self.route == Some(Route::Inspected)
    }

    /// The denial this decision stands for, enforced or not.
    pub fn denial(&self) -> Option<DenyReason> {
        match self.verdict {
            Verdict::Deny(r) => Some(r),
            _ => self.would_deny,
        }
    }

    pub fn is_denied(&self) -> bool {
        !matches!(self.verdict, Verdict::Allow)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("path `{0}` is not absolute")]
    NotAbsolute(String),
    #[error("too many levels of symbolic links resolving `{0}`")]
    SymlinkLoop(String),
}

/// Filesystem view used for symlink resolution: either the links recorded
/// in a trace header or the live filesystem.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FsModel {
    pub symlinks: BTreeMap<String, String>,
    pub live: bool,
}

impl FsModel {
    pub fn with_symlinks(symlinks: BTreeMap<String, String>) -> Self {
        FsModel {
            symlinks,
            live: false,
        }
    }

    fn link_target(&self, path: &str) -> Option<String> {
        if self.live {
            std::fs::read_link(path)
                .ok()
                .map(|t| t.to_string_lossy().into_owned())
        } else {
            self.symlinks.get(path).cloned()
        }
    }
}

fn components(path: &str) -> impl DoubleEndedIterator<Item = &str> {
    path.split('/').filter(|c| !c.is_empty())
}

/// Resolves every symlink along `path` and normalizes `.` and `..`.
/// Components that are not links pass through unchanged.
pub fn resolve_path(fs: &FsModel, path: &str) -> Result<String, ResolveError> {
    if !path.starts_with('/') {
        return Err(ResolveError::NotAbsolute(path.to_string()));
    }
    let mut pending: VecDeque<String> = components(path).map(str::to_string).collect();
    let mut resolved: Vec<String> = Vec::new();
    let mut follows = 0;
    while let Some(comp) = pending.pop_front() {
        match comp.as_str() {
            "." => continue,
            ".." => {
                resolved.pop();
                continue;
            }
            _ => {}
        }
        resolved.push(comp);
        let current = format!("/{}", resolved.join("/"));
        if let Some(target) = fs.link_target(&current) {
            follows += 1;
            if follows > MAX_SYMLINK_FOLLOWS {
                return Err(ResolveError::SymlinkLoop(path.to_string()));
            }
            resolved.pop();
            if target.starts_with('/') {
                resolved.clear();
            }
            for c in components(&target).rev() {
                pending.push_front(c.to_string());
            }
        }
    }
    Ok(format!("/{}", resolved.join("/")))
}

/// Network check: the usual access pipeline over a destination resource,
/// with denials relabeled when the requesting function holds destination
/// rules but none covers this address.
pub fn verify_network_dest(
    acl: &mut ProcessAcl,
    stack: Option<&CallStack>,
    proto: Protocol,
    dest: Ipv4Addr,
    recv_hash: Option<&StackHash>,
) -> AccessOutcome {
    let req = AccessRequest::new(Resource::net(proto, dest), AccessPriv::ReadWrite);
    let mut outcome = acl.check_access(&req, recv_hash, || {
        stack
            .filter(|s| !s.is_empty())
            .cloned()
            .ok_or(StackUnavailable)
    });
    if let AccessVerdict::Deny(DenyReason::ProcessDenied | DenyReason::FunctionDenied) =
        outcome.verdict
    {
        if innermost_lacks_destination(acl, stack, &req) {
            outcome.verdict = AccessVerdict::Deny(DenyReason::DestinationNotWhitelisted);
        }
    }
    outcome
}

fn innermost_lacks_destination(
    acl: &ProcessAcl,
    stack: Option<&CallStack>,
    req: &AccessRequest,
) -> bool {
    let Some(frame) = stack.and_then(CallStack::innermost) else {
        return false;
    };
    let Some(grants) = acl.function_acl.rule(&frame.func) else {
        return false;
    };
    let mut dests = grants
        .iter()
        .filter(|g| matches!(g.resource, ResourcePattern::NetDest { .. }))
        .peekable();
    dests.peek().is_some() && !dests.any(|g| crate::acl::match_resource(&req.resource, &g.resource))
}

/// Everything the monitor tracks for one process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessEntry {
    pub acl: ProcessAcl,
    pub space: AddressSpaceModel,
    pub registered: bool,
    /// Frame records the runtime holds in its stack domain, outermost first.
    frames: Vec<(FunctionId, BlockHandle)>,
}

impl ProcessEntry {
    fn new(acl: ProcessAcl, page_cap: usize) -> Self {
        ProcessEntry {
            acl,
            space: AddressSpaceModel::new(page_cap),
            registered: false,
            frames: Vec::new(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Mirrors the runtime's frame creation and deletion for the new stack.
    fn sync_frames(&mut self, stack: &CallStack) {
        let wanted: Vec<&FunctionId> = stack.frames().iter().rev().map(|f| &f.func).collect();
        let keep = self
            .frames
            .iter()
            .zip(&wanted)
            .take_while(|((have, _), want)| have == **want)
            .count();
        while self.frames.len() > keep {
            let (_, handle) = self.frames.pop().expect("len checked");
            let _ = self.space.memdom_free(handle);
        }
        for func in &wanted[keep..] {
            match self.space.memdom_alloc(FRAME_RECORD_BYTES) {
                Ok(handle) => self.frames.push(((*func).clone(), handle)),
                Err(_) => break,
            }
        }
    }

    /// The stack inspector reads every frame record while answering an upcall.
    fn inspector_reads(&mut self) {
        let _ = self.space.switch_to(STACK_INSPECTOR);
        for (_, handle) in &self.frames {
            let _ = self.space.access(
                STACK_INSPECTOR,
                handle.page,
                handle.offset,
                AccessKind::Read,
            );
        }
        let _ = self.space.switch_to(MAIN_RUNTIME);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessTable {
    template: ProcessAcl,
    page_cap: usize,
    entries: BTreeMap<Pid, ProcessEntry>,
}

impl ProcessTable {
    pub fn new(template: ProcessAcl, page_cap: usize) -> Self {
        ProcessTable {
            template,
            page_cap,
            entries: BTreeMap::new(),
        }
    }

    /// Tracks the initial process with the policy's ACL.
    pub fn spawn_root(&mut self, pid: Pid) {
        self.entries
            .entry(pid)
            .or_insert_with(|| ProcessEntry::new(self.template.clone(), self.page_cap));
    }

    pub fn get(&self, pid: Pid) -> Option<&ProcessEntry> {
        self.entries.get(&pid)
    }

    pub fn get_mut(&mut self, pid: Pid) -> Option<&mut ProcessEntry> {
        self.entries.get_mut(&pid)
    }

    pub fn pids(&self) -> impl Iterator<Item = Pid> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Longest stack-hash ring across all processes.
    pub fn max_log_len(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.acl.hash_log.max_len())
            .max()
            .unwrap_or(0)
    }

    pub fn memdom_totals(&self) -> MemdomCounters {
        let mut total = MemdomCounters::default();
        for e in self.entries.values() {
            let c = e.space.counters();
            total.priv_changes += c.priv_changes;
            total.faults += c.faults;
            total.allocs += c.allocs;
            total.frees += c.frees;
        }
        total
    }

    /// Child inherits the parent's ACL (hash log included) and a copy of
    /// its address space with stack-domain writes revoked.
    pub fn register_child(&mut self, parent: Pid, child: Pid) -> Result<(), EventError> {
        if self.entries.contains_key(&child) {
            return Err(EventError::Malformed(format!(
                "child pid {child} already tracked"
            )));
        }
        let p = self
            .entries
            .get(&parent)
            .ok_or(EventError::UnknownPid(parent))?;
        let entry = ProcessEntry {
            acl: p.acl.clone(),
            space: fork_address_space(&p.space),
            registered: false,
            frames: p.frames.clone(),
        };
        self.entries.insert(child, entry);
        Ok(())
    }
}

fn file_request(fs: &FsModel, path: &str, privs: AccessPriv) -> Result<AccessRequest, EventError> {
    let canonical = resolve_path(fs, path).map_err(|e| EventError::Malformed(e.to_string()))?;
    validate_fs_path(&canonical)
        .map_err(|reason| EventError::Malformed(format!("path `{canonical}`: {reason}")))?;
    Ok(AccessRequest::new(Resource::file(canonical), privs))
}

fn ipv4_dest(dest: IpAddr, proto: Protocol) -> Result<Ipv4Addr, EventError> {
    if proto == Protocol::Unix {
        return Err(EventError::Malformed(
            "unix sockets have no IPv4 destination".into(),
        ));
    }
    match dest {
        IpAddr::V4(a) => Ok(a),
        IpAddr::V6(a) => Err(EventError::Malformed(format!(
            "IPv6 destination {a} is not supported"
        ))),
    }
}

/// Evaluates one event against the process table.
pub fn handle_event(
    state: &mut ProcessTable,
    fs: &FsModel,
    ev: &Event,
    mode: Mode,
) -> Result<Decision, EventError> {
    match &ev.kind {
        EventKind::RuntimeRegister => {
            if state.is_empty() {
                state.spawn_root(ev.pid);
            }
            let entry = state
                .get_mut(ev.pid)
                .ok_or(EventError::UnknownPid(ev.pid))?;
            entry.registered = true;
            let mut d = Decision::bare(ev, Verdict::Allow);
            d.registered = true;
            Ok(d)
        }
        EventKind::Fork { child_pid } => {
            state.register_child(ev.pid, *child_pid)?;
            let mut d = Decision::bare(ev, Verdict::Allow);
            d.registered = state.get(ev.pid).is_some_and(|e| e.registered);
            Ok(d)
        }
        kind => {
            let entry = state
                .get_mut(ev.pid)
                .ok_or(EventError::UnknownPid(ev.pid))?;
            let (req, network) = match kind {
                EventKind::Open { path, privs } => (file_request(fs, path, *privs)?, None),
                EventKind::Exec { path } => (file_request(fs, path, AccessPriv::Read)?, None),
                EventKind::Connect { proto, dest } | EventKind::Bind { proto, dest } => {
                    let addr = ipv4_dest(*dest, *proto)?;
                    (
                        AccessRequest::new(Resource::net(*proto, addr), AccessPriv::ReadWrite),
                        Some((*proto, addr)),
                    )
                }
                EventKind::Fork { .. } | EventKind::RuntimeRegister => unreachable!(),
            };
            let registered = entry.registered;
            let outcome = if registered {
                if let Some(stack) = &ev.stack {
                    entry.sync_frames(stack);
                }
                let outcome = match network {
                    Some((proto, addr)) => verify_network_dest(
                        &mut entry.acl,
                        ev.stack.as_ref(),
                        proto,
                        addr,
                        ev.recv_hash.as_ref(),
                    ),
                    None => entry.acl.check_access(&req, ev.recv_hash.as_ref(), || {
                        ev.stack
                            .as_ref()
                            .filter(|s| !s.is_empty())
                            .cloned()
                            .ok_or(StackUnavailable)
                    }),
                };
                if outcome.route == Route::Inspected {
                    entry.inspector_reads();
                }
                outcome
            } else {
                entry.acl.check_process_level(&req)
            };

            if matches!(kind, EventKind::Exec { .. }) && outcome.verdict.is_allow() {
                // new program image: not a runtime until it registers again
                entry.registered = false;
                entry.frames.clear();
                let counters = entry.space.counters();
                entry.space = AddressSpaceModel::new(entry.space.page_cap());
                entry.space.restore_counters(counters);
            }

            let (verdict, would_deny) = match (outcome.verdict, mode) {
                (AccessVerdict::Allow, _) => (Verdict::Allow, None),
                (AccessVerdict::Deny(r), Mode::Enforce) => (Verdict::Deny(r), None),
                (AccessVerdict::Deny(r), Mode::Complain) => (Verdict::Allow, Some(r)),
            };
            Ok(Decision {
                seq: ev.seq,
                pid: ev.pid,
                verdict,
                would_deny,
                route: Some(outcome.route),
                request: Some(req),
                stack: ev.stack.clone(),
                registered,
                inspection: outcome.inspection,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorConfig {
    pub mode: Mode,
    pub fast_path: bool,
    pub page_cap: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            mode: Mode::Enforce,
            fast_path: true,
            page_cap: DEFAULT_PAGE_CAP,
        }
    }
}

/// Event loop state for one replay.
#[derive(Debug, Clone)]
pub struct Monitor {
    table: ProcessTable,
    fs: FsModel,
    config: MonitorConfig,
}

impl Monitor {
    pub fn new(policy: &Policy, fs: FsModel, config: MonitorConfig) -> Self {
        let template = ProcessAcl::from_policy(policy).with_stack_logging(config.fast_path);
        Monitor {
            table: ProcessTable::new(template, config.page_cap),
            fs,
            config,
        }
    }

    pub fn spawn_root(&mut self, pid: Pid) {
        self.table.spawn_root(pid);
    }

    pub fn config(&self) -> MonitorConfig {
        self.config
    }

    pub fn table(&self) -> &ProcessTable {
        &self.table
    }

    pub fn fs(&self) -> &FsModel {
        &self.fs
    }

    /// Always yields a decision; events that cannot be evaluated are rejected.
    pub fn step(&mut self, ev: &Event) -> Decision {
        match handle_event(&mut self.table, &self.fs, ev, self.config.mode) {
            Ok(d) => d,
            Err(e) => Decision::bare(ev, Verdict::Rejected(e)),
        }
    }
}
