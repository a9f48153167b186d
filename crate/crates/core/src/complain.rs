//! Rule suggestions from a complain-mode run.
//!
//! Granting a rule to a function also makes that function "ruled" for every
//! other resource, which can turn a previously allowed request into a denial
//! when the function shows up as an outer frame. The suggestions are
//! therefore computed as a closure: every recorded request is re-evaluated
//! against the policy plus the suggestions so far, and rules are added until
//! all of them pass.

use std::collections::HashMap;

use crate::acl::{AccessRequest, ProcessAcl};
use crate::monitor::Decision;
use crate::policy::{Policy, Rule, Subject};
use crate::stack::{inspect, CallStack, Inspection};

#[derive(Clone, Copy)]
enum Check<'a> {
    /// Native process: defaults and the union of function privileges.
    ProcessLevel,
    /// Registered runtime with a stack to inspect.
    Stack(&'a CallStack),
    /// Registered runtime that sent no stack: only defaults can allow it.
    DefaultOnly,
}

struct Recorded<'a> {
    req: &'a AccessRequest,
    check: Check<'a>,
}

fn allowed(acl: &ProcessAcl, r: &Recorded<'_>) -> bool {
    let default = crate::acl::is_default_access(r.req, &acl.default_acl);
    match r.check {
        Check::ProcessLevel => acl.check_process_level(r.req).verdict.is_allow(),
        Check::DefaultOnly => default,
        Check::Stack(stack) => {
            default
                || (acl.function_acl.process_grants(r.req)
                    && inspect(stack, r.req, &acl.function_acl).is_granted())
        }
    }
}

/// Rules that, merged into `policy`, allow every request recorded in
/// `decisions`. Suggestions are deduplicated and ordered by first need.
pub fn complain_report(policy: &Policy, decisions: &[Decision]) -> Vec<Rule> {
    let recorded: Vec<Recorded<'_>> = decisions
        .iter()
        .filter_map(|d| {
            let req = d.request.as_ref()?;
            let check = match d.stack.as_ref().filter(|s| !s.is_empty()) {
                _ if !d.registered => Check::ProcessLevel,
                Some(stack) => Check::Stack(stack),
                None => Check::DefaultOnly,
            };
            Some(Recorded { req, check })
        })
        .collect();

    // only decisions that were (or would have been) denied start the search
    if !decisions.iter().any(|d| d.denial().is_some()) {
        return Vec::new();
    }

    let mut suggestions: Vec<Rule> = Vec::new();
    let mut index: HashMap<(Subject, crate::policy::ResourcePattern), usize> = HashMap::new();
    let mut add = |suggestions: &mut Vec<Rule>, rule: Rule| -> bool {
        let key = (rule.subject.clone(), rule.resource.clone());
        match index.get(&key) {
            Some(&i) if suggestions[i].privs >= rule.privs => false,
            Some(&i) => {
                suggestions[i].privs = rule.privs;
                true
            }
            None => {
                index.insert(key, suggestions.len());
                suggestions.push(rule);
                true
            }
        }
    };

    loop {
        let mut acl = ProcessAcl::from_policy(&policy.merged_with(&suggestions));
        let mut changed = false;
        for r in &recorded {
            if allowed(&acl, r) {
                continue;
            }
            let pattern = r.req.resource.exact_pattern();
            let mut fixes = Vec::new();
            match r.check {
                Check::ProcessLevel | Check::DefaultOnly => {
                    fixes.push(Rule::new(Subject::Default, pattern, r.req.privs))
                }
                Check::Stack(stack) => {
                    // the innermost frame, then outer frames that hold rules
                    // but lack this privilege
                    for (i, frame) in stack.frames().iter().enumerate() {
                        let lacking = match acl.function_acl.rule(&frame.func) {
                            Some(grants) => !crate::acl::has_privs(grants, r.req),
                            None => i == 0,
                        };
                        if lacking {
                            fixes.push(Rule::new(
                                Subject::Function(frame.func.clone()),
                                pattern.clone(),
                                r.req.privs,
                            ));
                        }
                    }
                    if fixes.is_empty() {
                        // the stack passes; only the process-level check failed
                        let inner = stack.innermost().expect("non-empty").func.clone();
                        fixes.push(Rule::new(
                            Subject::Function(inner),
                            pattern.clone(),
                            r.req.privs,
                        ));
                    }
                }
            }
            let mut added = false;
            for fix in fixes {
                added |= add(&mut suggestions, fix);
            }
            if added {
                changed = true;
                acl = ProcessAcl::from_policy(&policy.merged_with(&suggestions));
            }
        }
        if !changed {
            break;
        }
    }
    debug_assert!({
        let acl = ProcessAcl::from_policy(&policy.merged_with(&suggestions));
        recorded.iter().all(|r| allowed(&acl, r))
    });
    suggestions
}

/// True when the inspection result is consistent with the ACL: a refusal
/// names a ruled frame that really lacks the privilege.
pub fn refusal_is_justified(
    acl: &crate::acl::FunctionAcl,
    stack: &CallStack,
    req: &AccessRequest,
    inspection: Inspection,
) -> bool {
    match inspection {
        Inspection::Granted => false,
        Inspection::EmptyStack => stack.is_empty(),
        Inspection::UnruledInnermost => stack
            .innermost()
            .is_some_and(|f| acl.rule(&f.func).is_none()),
        Inspection::Refused { frame } => stack
            .frames()
            .get(frame)
            .and_then(|f| acl.rule(&f.func))
            .is_some_and(|g| !crate::acl::has_privs(g, req)),
    }
}
