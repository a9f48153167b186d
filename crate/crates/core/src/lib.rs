//! Function-granular mandatory access control for interpreted runtimes.
//!
//! A policy grants file and network privileges to individual functions. At
//! each resource request the monitor walks the caller's stack and allows the
//! request only when every ruled frame on it holds the privilege. Verified
//! stacks are cached by hash so repeated requests skip the walk.

pub mod acl;
pub mod complain;
pub mod memdom;
pub mod monitor;
pub mod policy;
pub mod replay;
pub mod report;
pub mod stack;
pub mod trace;
pub mod tracegen;

pub use acl::{AccessRequest, AccessVerdict, DenyReason, ProcessAcl, Resource, Route};
pub use monitor::{Decision, Event, EventKind, Mode, Monitor, MonitorConfig, Verdict};
pub use policy::{parse_policy, serialize_policy, AccessPriv, FunctionId, Policy, Rule};
pub use stack::{canonical_hash, inspect_stack, CallStack, StackHash};
