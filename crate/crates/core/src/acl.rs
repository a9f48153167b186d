//! Per-process enforcement state and the access check: default rules first,
//! then process-level default-deny, then the stack-hash log, and finally a
//! full call-stack inspection.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::policy::{AccessPriv, FunctionId, Policy, Protocol, ResourcePattern, Subject};
use crate::stack::{canonical_hash, inspect, CallStack, Inspection, StackHash};

/// Number of stack hashes kept per (resource, privilege).
pub const HASH_LOG_CAPACITY: usize = 16;

/// A concrete resource named by a request.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Resource {
    /// Canonical absolute path, symlinks already resolved.
    File {
        path: String,
    },
    Net {
        proto: Protocol,
        addr: Ipv4Addr,
    },
}

impl Resource {
    pub fn file(path: impl Into<String>) -> Self {
        Resource::File { path: path.into() }
    }

    pub fn net(proto: Protocol, addr: Ipv4Addr) -> Self {
        Resource::Net { proto, addr }
    }

    /// The narrowest pattern that matches this resource.
    pub fn exact_pattern(&self) -> ResourcePattern {
        match self {
            Resource::File { path } => ResourcePattern::FsPath {
                path: path.clone(),
                recursive: path.ends_with('/'),
            },
            Resource::Net { proto, addr } => ResourcePattern::NetDest {
                prefix: crate::policy::Ipv4Prefix::host(*addr),
                proto: Some(*proto),
            },
        }
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::File { path } => f.write_str(path),
            Resource::Net { proto, addr } => write!(f, "{proto}:{addr}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccessRequest {
    pub resource: Resource,
    #[serde(rename = "priv")]
    pub privs: AccessPriv,
}

impl AccessRequest {
    pub fn new(resource: Resource, privs: AccessPriv) -> Self {
        AccessRequest { resource, privs }
    }
}

/// One granted (pattern, privilege) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub resource: ResourcePattern,
    pub privs: AccessPriv,
}

/// Whether a concrete resource falls under a rule pattern.
pub fn match_resource(concrete: &Resource, pattern: &ResourcePattern) -> bool {
    match (concrete, pattern) {
        (
            Resource::File { path },
            ResourcePattern::FsPath {
                path: pat,
                recursive,
            },
        ) => {
            if *recursive {
                path.starts_with(pat.as_str()) || path.as_str() == pat.trim_end_matches('/')
            } else {
                path == pat
            }
        }
        (
            Resource::Net { proto, addr },
            ResourcePattern::NetDest {
                prefix,
                proto: want,
            },
        ) => prefix.contains(*addr) && want.is_none_or(|w| w == *proto),
        (Resource::Net { proto, .. }, ResourcePattern::NetProto(want)) => proto == want,
        _ => false,
    }
}

/// True if any grant matches the request's resource with enough privilege.
pub fn has_privs(grants: &[Grant], req: &AccessRequest) -> bool {
    grants
        .iter()
        .any(|g| g.privs.covers(req.privs) && match_resource(&req.resource, &g.resource))
}

/// Function-level ACL built from a policy's non-default rules.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FunctionAcl {
    entries: BTreeMap<FunctionId, Vec<Grant>>,
}

impl FunctionAcl {
    pub fn from_policy(policy: &Policy) -> Self {
        let mut entries: BTreeMap<FunctionId, Vec<Grant>> = BTreeMap::new();
        for rule in &policy.rules {
            if let Subject::Function(id) = &rule.subject {
                entries.entry(id.clone()).or_default().push(Grant {
                    resource: rule.resource.clone(),
                    privs: rule.privs,
                });
            }
        }
        FunctionAcl { entries }
    }

    /// The function's entry, or `None` if the policy never names it.
    pub fn rule(&self, func: &FunctionId) -> Option<&[Grant]> {
        self.entries.get(func).map(Vec::as_slice)
    }

    pub fn functions(&self) -> impl Iterator<Item = &FunctionId> {
        self.entries.keys()
    }

    /// Union over all functions: does the process as a whole hold the privilege?
    pub fn process_grants(&self, req: &AccessRequest) -> bool {
        self.entries.values().any(|g| has_privs(g, req))
    }
}

/// Application-wide rules from `default` subjects.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DefaultAcl {
    entries: Vec<Grant>,
}

impl DefaultAcl {
    pub fn from_policy(policy: &Policy) -> Self {
        let entries = policy
            .rules
            .iter()
            .filter(|r| r.subject == Subject::Default)
            .map(|r| Grant {
                resource: r.resource.clone(),
                privs: r.privs,
            })
            .collect();
        DefaultAcl { entries }
    }

    pub fn entries(&self) -> &[Grant] {
        &self.entries
    }
}

pub fn is_default_access(req: &AccessRequest, dacl: &DefaultAcl) -> bool {
    has_privs(&dacl.entries, req)
}

/// Key of the stack-hash log. Including the privilege keeps a hash logged
/// for a read grant from unlocking a write.
pub type LogKey = (Resource, AccessPriv);

/// Bounded FIFO of authorized stack hashes per (resource, privilege).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StackHashLog {
    per_key: BTreeMap<LogKey, VecDeque<StackHash>>,
}

impl StackHashLog {
    pub fn contains(&self, req: &AccessRequest, hash: &StackHash) -> bool {
        self.per_key
            .get(&(req.resource.clone(), req.privs))
            .is_some_and(|ring| ring.contains(hash))
    }

    /// Logs a hash; an already-present hash keeps its position.
    pub fn record(&mut self, req: &AccessRequest, hash: StackHash) {
        let ring = self
            .per_key
            .entry((req.resource.clone(), req.privs))
            .or_default();
        if ring.contains(&hash) {
            return;
        }
        if ring.len() == HASH_LOG_CAPACITY {
            ring.pop_front();
        }
        ring.push_back(hash);
    }

    pub fn entries(&self, req: &AccessRequest) -> Vec<StackHash> {
        self.per_key
            .get(&(req.resource.clone(), req.privs))
            .map(|r| r.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Length of the longest ring.
    pub fn max_len(&self) -> usize {
        self.per_key.values().map(VecDeque::len).max().unwrap_or(0)
    }

    pub fn keys(&self) -> usize {
        self.per_key.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DenyReason {
    ProcessDenied,
    FunctionDenied,
    DestinationNotWhitelisted,
    NoProvenance,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DenyReason::ProcessDenied => "ProcessDenied",
            DenyReason::FunctionDenied => "FunctionDenied",
            DenyReason::DestinationNotWhitelisted => "DestinationNotWhitelisted",
            DenyReason::NoProvenance => "NoProvenance",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessVerdict {
    Allow,
    Deny(DenyReason),
}

impl AccessVerdict {
    pub fn is_allow(self) -> bool {
        self == AccessVerdict::Allow
    }
}

/// Which step of the check produced the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Default,
    ProcessLevel,
    FastPath,
    Inspected,
    NoProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessOutcome {
    pub verdict: AccessVerdict,
    pub route: Route,
    /// Set when the stack was fetched and walked.
    pub inspection: Option<Inspection>,
}

/// Returned by a stack source that cannot supply the current stack.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("call stack unavailable")]
pub struct StackUnavailable;

/// Enforcement state of one process.
///
/// Process identity lives in the process table rather than here, so a forked
/// child's state compares equal to its parent's.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessAcl {
    pub function_acl: FunctionAcl,
    pub default_acl: DefaultAcl,
    pub hash_log: StackHashLog,
    /// When false, received hashes are ignored and nothing is logged.
    pub stack_logging: bool,
}

impl ProcessAcl {
    pub fn from_policy(policy: &Policy) -> Self {
        ProcessAcl {
            function_acl: FunctionAcl::from_policy(policy),
            default_acl: DefaultAcl::from_policy(policy),
            hash_log: StackHashLog::default(),
            stack_logging: true,
        }
    }

    pub fn with_stack_logging(mut self, enabled: bool) -> Self {
        self.stack_logging = enabled;
        self
    }

    /// Full check for a request from a registered runtime.
    ///
    /// `stack_source` models the upcall to the runtime and is only invoked
    /// when neither a default rule nor the hash log settles the request.
    pub fn check_access<F>(
        &mut self,
        req: &AccessRequest,
        recv_hash: Option<&StackHash>,
        stack_source: F,
    ) -> AccessOutcome
    where
        F: FnOnce() -> Result<CallStack, StackUnavailable>,
    {
        if is_default_access(req, &self.default_acl) {
            return AccessOutcome {
                verdict: AccessVerdict::Allow,
                route: Route::Default,
                inspection: None,
            };
        }
        if !self.function_acl.process_grants(req) {
            return AccessOutcome {
                verdict: AccessVerdict::Deny(DenyReason::ProcessDenied),
                route: Route::ProcessLevel,
                inspection: None,
            };
        }
        if self.stack_logging {
            if let Some(hash) = recv_hash {
                if self.hash_log.contains(req, hash) {
                    return AccessOutcome {
                        verdict: AccessVerdict::Allow,
                        route: Route::FastPath,
                        inspection: None,
                    };
                }
            }
        }
        let stack = match stack_source() {
            Ok(stack) => stack,
            Err(StackUnavailable) => {
                return AccessOutcome {
                    verdict: AccessVerdict::Deny(DenyReason::NoProvenance),
                    route: Route::NoProvenance,
                    inspection: None,
                }
            }
        };
        let inspection = inspect(&stack, req, &self.function_acl);
        let verdict = if inspection.is_granted() {
            if self.stack_logging {
                self.hash_log.record(req, canonical_hash(&stack));
            }
            AccessVerdict::Allow
        } else {
            AccessVerdict::Deny(DenyReason::FunctionDenied)
        };
        AccessOutcome {
            verdict,
            route: Route::Inspected,
            inspection: Some(inspection),
        }
    }

    /// Process-granularity check for code that cannot supply a stack, such
    /// as a native child process: defaults, then the union of all function
    /// privileges.
    pub fn check_process_level(&self, req: &AccessRequest) -> AccessOutcome {
        let (verdict, route) = if is_default_access(req, &self.default_acl) {
            (AccessVerdict::Allow, Route::Default)
        } else if self.function_acl.process_grants(req) {
            (AccessVerdict::Allow, Route::ProcessLevel)
        } else {
            (
                AccessVerdict::Deny(DenyReason::ProcessDenied),
                Route::ProcessLevel,
            )
        };
        AccessOutcome {
            verdict,
            route,
            inspection: None,
        }
    }
}
