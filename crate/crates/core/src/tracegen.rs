//! Seeded synthetic policies and traces for differential and counter tests.
//!
//! Generated traces keep to a shape where the stack-hash log can absorb every
//! repeated request: the root process registers once and always sends an
//! honest hash, no (resource, privilege) pair sees more distinct granted
//! stacks than the log holds, and a triple that will be denied is only
//! requested once. Forked children stay native.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::net::{IpAddr, Ipv4Addr};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acl::{AccessRequest, ProcessAcl, Resource, StackUnavailable, HASH_LOG_CAPACITY};
use crate::monitor::{resolve_path, Event, EventKind, FsModel, Pid};
use crate::policy::{
    AccessPriv, FunctionId, Ipv4Prefix, Policy, Protocol, ResourcePattern, Rule, Subject,
};
use crate::stack::{canonical_hash, CallStack, Frame};
use crate::trace::{Trace, TraceHeader};

pub const ROOT_PID: Pid = 100;

const MODULES: [&str; 3] = ["app", "lib", "net"];
const FUNCS: [&str; 3] = ["load", "send", "main"];
const FILES: [&str; 6] = [
    "/data/a.txt",
    "/data/b.txt",
    "/data/c.txt",
    "/srv/www/index.html",
    "/srv/www/style.css",
    "/etc/passwd",
];
const EXECS: [&str; 3] = ["/bin/ls", "/bin/sh", "/usr/bin/curl"];

fn universe() -> Vec<FunctionId> {
    MODULES
        .iter()
        .flat_map(|m| {
            FUNCS
                .iter()
                .map(move |f| FunctionId::new(format!("{m}.{f}")).unwrap())
        })
        .collect()
}

fn dests() -> Vec<Ipv4Addr> {
    vec![
        Ipv4Addr::new(10, 0, 0, 1),
        Ipv4Addr::new(10, 0, 0, 2),
        Ipv4Addr::new(10, 9, 8, 7),
        Ipv4Addr::new(192, 168, 1, 5),
        Ipv4Addr::new(8, 8, 8, 8),
    ]
}

fn symlinks() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("/tmp/link".to_string(), "/data/a.txt".to_string()),
        ("/var/www".to_string(), "../srv/www".to_string()),
    ])
}

/// A random policy over the generator's function, file and address pools.
pub fn random_policy(seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let funcs = universe();
    let mut rules: Vec<Rule> = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |rules: &mut Vec<Rule>, rule: Rule| {
        if seen.insert((rule.subject.clone(), rule.resource.clone())) {
            rules.push(rule);
        }
    };
    for f in &funcs {
        // leave a few functions unruled
        if rng.gen_bool(0.2) {
            continue;
        }
        for _ in 0..rng.gen_range(1..=4) {
            let privs = if rng.gen_bool(0.5) {
                AccessPriv::Read
            } else {
                AccessPriv::ReadWrite
            };
            let resource = match rng.gen_range(0..4) {
                0 | 1 => ResourcePattern::fs(FILES.choose(&mut rng).unwrap()).unwrap(),
                2 => ResourcePattern::fs(if rng.gen_bool(0.5) {
                    "/srv/www/"
                } else {
                    "/data/"
                })
                .unwrap(),
                _ => {
                    let prefix = if rng.gen_bool(0.5) {
                        Ipv4Prefix::new(Ipv4Addr::new(10, 0, 0, 0), 24).unwrap()
                    } else {
                        Ipv4Prefix::host(*dests().choose(&mut rng).unwrap())
                    };
                    let proto = [None, Some(Protocol::Tcp), Some(Protocol::Udp)]
                        .choose(&mut rng)
                        .copied()
                        .unwrap();
                    ResourcePattern::NetDest { prefix, proto }
                }
            };
            push(
                &mut rules,
                Rule::new(Subject::Function(f.clone()), resource, privs),
            );
        }
    }
    if rng.gen_bool(0.7) {
        push(
            &mut rules,
            Rule::new(
                Subject::Default,
                ResourcePattern::fs("/etc/passwd").unwrap(),
                AccessPriv::Read,
            ),
        );
    }
    Policy::new(rules)
}

fn random_stack(rng: &mut impl Rng, funcs: &[FunctionId]) -> CallStack {
    let len = rng.gen_range(1..=5);
    CallStack::new(
        (0..len)
            .map(|_| Frame::new(funcs.choose(rng).unwrap().clone()))
            .collect(),
    )
}

struct Planner {
    oracle: ProcessAcl,
    /// Call paths the simulated program uses; most requests reuse one.
    pool: Vec<CallStack>,
    fs: FsModel,
    granted_stacks: HashMap<AccessRequest, HashSet<CallStack>>,
    denied: HashSet<(AccessRequest, CallStack)>,
    fresh: u64,
}

impl Planner {
    fn allowed(&mut self, req: &AccessRequest, stack: &CallStack) -> bool {
        self.oracle
            .check_access(req, None, || Ok::<_, StackUnavailable>(stack.clone()))
            .verdict
            .is_allow()
    }

    fn canonical(&self, kind: &EventKind) -> AccessRequest {
        match kind {
            EventKind::Open { path, privs } => AccessRequest::new(
                Resource::file(resolve_path(&self.fs, path).unwrap()),
                *privs,
            ),
            EventKind::Connect {
                proto,
                dest: IpAddr::V4(a),
            } => AccessRequest::new(Resource::net(*proto, *a), AccessPriv::ReadWrite),
            _ => unreachable!("planner only handles opens and IPv4 connects"),
        }
    }

    /// A stack for `req` that keeps the trace within the generator's shape.
    fn pick_stack(
        &mut self,
        rng: &mut impl Rng,
        funcs: &[FunctionId],
        req: &AccessRequest,
    ) -> CallStack {
        for _ in 0..8 {
            let stack = if rng.gen_bool(0.9) {
                self.pool.choose(rng).unwrap().clone()
            } else {
                random_stack(rng, funcs)
            };
            let known = self
                .granted_stacks
                .get(req)
                .is_some_and(|s| s.contains(&stack));
            if known {
                return stack;
            }
            if self.allowed(req, &stack) {
                let set = self.granted_stacks.entry(req.clone()).or_default();
                if set.len() < HASH_LOG_CAPACITY {
                    set.insert(stack.clone());
                    return stack;
                }
            } else if self.denied.insert((req.clone(), stack.clone())) {
                return stack;
            }
        }
        // a never-seen unruled innermost frame: denied once, never repeated
        self.fresh += 1;
        let mut stack = CallStack::from_names([format!("adv.f{}", self.fresh)]).unwrap();
        stack.push_outer(Frame::new(funcs[0].clone()));
        let ok = self.allowed(req, &stack);
        let key = (req.clone(), stack.clone());
        if ok {
            self.granted_stacks
                .entry(req.clone())
                .or_default()
                .insert(stack.clone());
        } else {
            self.denied.insert(key);
        }
        stack
    }
}

/// A trace of `len` events against `policy`, reproducible from `seed`.
pub fn random_trace(seed: u64, policy: &Policy, len: usize) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7ace);
    let mut header = TraceHeader::new(ROOT_PID);
    header.symlinks = symlinks();
    let funcs = universe();
    let pool = (0..48).map(|_| random_stack(&mut rng, &funcs)).collect();
    let mut planner = Planner {
        oracle: ProcessAcl::from_policy(policy).with_stack_logging(false),
        pool,
        fs: header.fs_model(),
        granted_stacks: HashMap::new(),
        denied: HashSet::new(),
        fresh: 0,
    };
    let dests = dests();
    let paths: Vec<&str> = FILES
        .iter()
        .copied()
        .chain(["/tmp/link", "/var/www/index.html", "/data/../data/b.txt"])
        .collect();

    let mut events = Vec::with_capacity(len);
    let mut children: Vec<Pid> = Vec::new();
    let mut next_pid = ROOT_PID + 1;
    let mut seq = 0u64;
    let mut next_seq = || {
        seq += 1;
        seq
    };
    events.push(Event::new(next_seq(), ROOT_PID, EventKind::RuntimeRegister));

    while events.len() < len {
        let roll = rng.gen_range(0..100);
        let ev = match roll {
            0..=59 => {
                let privs = if rng.gen_bool(0.6) {
                    AccessPriv::Read
                } else {
                    AccessPriv::ReadWrite
                };
                let kind = EventKind::Open {
                    path: paths.choose(&mut rng).unwrap().to_string(),
                    privs,
                };
                let req = planner.canonical(&kind);
                let stack = planner.pick_stack(&mut rng, &funcs, &req);
                let h = canonical_hash(&stack);
                Event::new(next_seq(), ROOT_PID, kind)
                    .with_stack(stack)
                    .with_hash(h)
            }
            60..=79 => {
                let proto = if rng.gen_bool(0.7) {
                    Protocol::Tcp
                } else {
                    Protocol::Udp
                };
                let kind = EventKind::Connect {
                    proto,
                    dest: IpAddr::V4(*dests.choose(&mut rng).unwrap()),
                };
                let req = planner.canonical(&kind);
                let stack = planner.pick_stack(&mut rng, &funcs, &req);
                let h = canonical_hash(&stack);
                Event::new(next_seq(), ROOT_PID, kind)
                    .with_stack(stack)
                    .with_hash(h)
            }
            80..=81 => {
                // registered process without provenance
                Event::new(
                    next_seq(),
                    ROOT_PID,
                    EventKind::Open {
                        path: paths.choose(&mut rng).unwrap().to_string(),
                        privs: AccessPriv::Read,
                    },
                )
            }
            82..=85 if children.len() < 32 => {
                let child = next_pid;
                next_pid += 1;
                children.push(child);
                Event::new(next_seq(), ROOT_PID, EventKind::Fork { child_pid: child })
            }
            86..=99 if !children.is_empty() => {
                let pid = *children.choose(&mut rng).unwrap();
                let kind = if rng.gen_bool(0.3) {
                    EventKind::Exec {
                        path: EXECS.choose(&mut rng).unwrap().to_string(),
                    }
                } else {
                    EventKind::Open {
                        path: paths.choose(&mut rng).unwrap().to_string(),
                        privs: AccessPriv::Read,
                    }
                };
                Event::new(next_seq(), pid, kind)
            }
            _ => continue,
        };
        events.push(ev);
    }
    Trace { header, events }
}

fn open_event(seq: u64, path: &str, stack: CallStack) -> Event {
    let h = canonical_hash(&stack);
    Event::new(
        seq,
        ROOT_PID,
        EventKind::Open {
            path: path.to_string(),
            privs: AccessPriv::Read,
        },
    )
    .with_stack(stack)
    .with_hash(h)
}

/// `distinct` different granted stacks for one resource, then the first again.
pub fn eviction_trace(distinct: usize) -> (Policy, Trace) {
    let policy: Policy = "app.read /data/x r\n".parse().expect("valid policy");
    let mut events = vec![Event::new(1, ROOT_PID, EventKind::RuntimeRegister)];
    let stack_n = |i: usize| {
        CallStack::from_names(
            std::iter::once("app.read".to_string()).chain((0..=i).map(|k| format!("caller.f{k}"))),
        )
        .unwrap()
    };
    for i in 0..distinct {
        events.push(open_event(2 + i as u64, "/data/x", stack_n(i)));
    }
    events.push(open_event(2 + distinct as u64, "/data/x", stack_n(0)));
    (
        policy,
        Trace {
            header: TraceHeader::new(ROOT_PID),
            events,
        },
    )
}

/// The same permitted request `iterations` times from the same stack.
pub fn repeated_request_trace(iterations: usize) -> (Policy, Trace) {
    let policy: Policy = "app.read /data/x r\n".parse().expect("valid policy");
    let stack = CallStack::from_names(["app.read", "app.loop", "app.main"]).unwrap();
    let mut events = vec![Event::new(1, ROOT_PID, EventKind::RuntimeRegister)];
    for i in 0..iterations {
        events.push(open_event(2 + i as u64, "/data/x", stack.clone()));
    }
    (
        policy,
        Trace {
            header: TraceHeader::new(ROOT_PID),
            events,
        },
    )
}

/// Distinct (request, stack) pairs in a replay; decisions without both are skipped.
pub fn distinct_triples(decisions: &[crate::monitor::Decision]) -> usize {
    decisions
        .iter()
        .filter_map(|d| Some((d.request.clone()?, d.stack.clone()?)))
        .filter(|(_, s)| !s.is_empty())
        .collect::<BTreeSet<_>>()
        .len()
}
