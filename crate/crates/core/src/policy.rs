//! Policy language: rule types, the line-oriented parser and serializer, and
//! policy-template generation.
//!
//! A policy file holds one rule per line. Tokens are separated by whitespace
//! and `#` starts a comment that runs to the end of the line:
//!
//! ```text
//! # subject                 resource             privs
//! camera.recognize_face     /app/face.jpg        r
//! default                   /etc/ssl/certs/      r
//! tweepy.upload             network 10.0.0.0/8   tcp
//! default                   network udp
//! ```
//!
//! File rules end in `r` (read-only) or `w` (read-write). A path ending in `/`
//! covers every file beneath it. Network rules carry no privilege token; the
//! optional trailing protocol restricts a destination rule to one socket type.
//! A rule of the form `network <proto>` with no address is only accepted for the
//! `default` subject.

use std::collections::HashSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The subject token reserved for application-wide rules.
pub const DEFAULT_SUBJECT: &str = "default";

/// Shipped baseline of resources every monitored interpreter needs.
pub const SHIPPED_BASELINE: &str = include_str!("../data/baseline.txt");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("line {line}: syntax error: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate rule for `{subject} {resource}`")]
    DuplicateRule {
        line: usize,
        subject: String,
        resource: String,
    },
    #[error("line {line}: invalid path `{path}`: {reason}")]
    InvalidPath {
        line: usize,
        path: String,
        reason: &'static str,
    },
    #[error("line {line}: invalid network prefix `{prefix}`: {reason}")]
    InvalidPrefix {
        line: usize,
        prefix: String,
        reason: &'static str,
    },
    #[error("line {line}: domain name `{name}` not supported, use an IPv4 prefix")]
    DomainName { line: usize, name: String },
}

impl PolicyError {
    /// 1-based line the error refers to.
    pub fn line(&self) -> usize {
        match self {
            PolicyError::Syntax { line, .. }
            | PolicyError::DuplicateRule { line, .. }
            | PolicyError::InvalidPath { line, .. }
            | PolicyError::InvalidPrefix { line, .. }
            | PolicyError::DomainName { line, .. } => *line,
        }
    }
}

/// Access privilege. `ReadWrite` dominates `Read`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessPriv {
    #[serde(rename = "r")]
    Read,
    #[serde(rename = "w")]
    ReadWrite,
}

impl AccessPriv {
    pub fn token(self) -> &'static str {
        match self {
            AccessPriv::Read => "r",
            AccessPriv::ReadWrite => "w",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "r" => Some(AccessPriv::Read),
            "w" => Some(AccessPriv::ReadWrite),
            _ => None,
        }
    }

    /// True if holding `self` is enough to perform `requested`.
    pub fn covers(self, requested: AccessPriv) -> bool {
        self >= requested
    }
}

impl fmt::Display for AccessPriv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid function id `{0}`: expected `<module>.<function>` without whitespace")]
pub struct InvalidFunctionId(pub String);

/// Module-qualified function name, e.g. `tweepy.upload`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FunctionId(String);

impl FunctionId {
    pub fn new(name: impl Into<String>) -> Result<Self, InvalidFunctionId> {
        let name = name.into();
        let ok = !name.is_empty()
            && !name.chars().any(|c| c.is_whitespace() || c == '#')
            && name.contains('.')
            && name.split('.').all(|seg| !seg.is_empty());
        if ok {
            Ok(FunctionId(name))
        } else {
            Err(InvalidFunctionId(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Everything before the last `.`.
    pub fn module(&self) -> &str {
        self.0.rsplit_once('.').map(|(m, _)| m).unwrap_or("")
    }

    /// The segment after the last `.`.
    pub fn function(&self) -> &str {
        self.0.rsplit_once('.').map(|(_, f)| f).unwrap_or(&self.0)
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for FunctionId {
    type Err = InvalidFunctionId;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FunctionId::new(s)
    }
}

impl TryFrom<String> for FunctionId {
    type Error = InvalidFunctionId;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        FunctionId::new(s)
    }
}

impl From<FunctionId> for String {
    fn from(id: FunctionId) -> String {
        id.0
    }
}

/// Socket families a network rule can name.
///
/// `Unix` exists so the baseline can list unix-domain sockets; connect and
/// bind events in a trace always carry an IPv4 destination and never use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
    Raw,
    Unix,
}

impl Protocol {
    pub fn token(self) -> &'static str {
        match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
            Protocol::Raw => "raw",
            Protocol::Unix => "unix",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "tcp" => Some(Protocol::Tcp),
            "udp" => Some(Protocol::Udp),
            "raw" => Some(Protocol::Raw),
            "unix" => Some(Protocol::Unix),
            _ => None,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// An IPv4 network prefix with all host bits cleared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ipv4Prefix {
    addr: Ipv4Addr,
    len: u8,
}

impl Ipv4Prefix {
    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, &'static str> {
        if len > 32 {
            return Err("prefix length must be in 0..=32");
        }
        if u32::from(addr) & !Self::mask(len) != 0 {
            return Err("host bits below the prefix length must be zero");
        }
        Ok(Ipv4Prefix { addr, len })
    }

    /// The /32 prefix holding exactly `addr`.
    pub fn host(addr: Ipv4Addr) -> Self {
        Ipv4Prefix { addr, len: 32 }
    }

    fn mask(len: u8) -> u32 {
        if len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(len))
        }
    }

    pub fn addr(&self) -> Ipv4Addr {
        self.addr
    }

    pub fn prefix_len(&self) -> u8 {
        self.len
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & Self::mask(self.len) == u32::from(self.addr)
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.len)
    }
}

/// The resource operand of a rule.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourcePattern {
    /// Absolute normalized path. When `recursive` is set the path ends in `/`
    /// and the rule covers everything beneath it.
    FsPath { path: String, recursive: bool },
    /// Destination prefix, optionally restricted to one protocol.
    NetDest {
        prefix: Ipv4Prefix,
        proto: Option<Protocol>,
    },
    /// Any destination reached over the given protocol.
    NetProto(Protocol),
}

impl ResourcePattern {
    /// File pattern for an absolute normalized path; a trailing `/` makes it
    /// recursive.
    pub fn fs(path: &str) -> Result<Self, &'static str> {
        validate_fs_path(path)?;
        Ok(ResourcePattern::FsPath {
            path: path.to_string(),
            recursive: path.ends_with('/'),
        })
    }

    pub fn is_network(&self) -> bool {
        !matches!(self, ResourcePattern::FsPath { .. })
    }
}

impl fmt::Display for ResourcePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourcePattern::FsPath { path, .. } => f.write_str(path),
            ResourcePattern::NetDest {
                prefix,
                proto: None,
            } => write!(f, "network {prefix}"),
            ResourcePattern::NetDest {
                prefix,
                proto: Some(p),
            } => write!(f, "network {prefix} {p}"),
            ResourcePattern::NetProto(p) => write!(f, "network {p}"),
        }
    }
}

/// Checks the path is absolute, normalized and representable in the grammar.
pub fn validate_fs_path(path: &str) -> Result<(), &'static str> {
    if !path.starts_with('/') {
        return Err("path must be absolute");
    }
    if path
        .chars()
        .any(|c| c.is_whitespace() || c == '#' || c == '\0')
    {
        return Err("path must not contain whitespace, `#` or NUL");
    }
    if path.contains("//") {
        return Err("path must not contain empty components");
    }
    if path.split('/').any(|c| c == "." || c == "..") {
        return Err("path must not contain `.` or `..` components");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subject {
    Default,
    Function(FunctionId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Default => f.write_str(DEFAULT_SUBJECT),
            Subject::Function(id) => id.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    pub subject: Subject,
    pub resource: ResourcePattern,
    pub privs: AccessPriv,
}

impl Rule {
    /// Builds a rule, forcing `ReadWrite` on network resources.
    pub fn new(subject: Subject, resource: ResourcePattern, privs: AccessPriv) -> Self {
        let privs = if resource.is_network() {
            AccessPriv::ReadWrite
        } else {
            privs
        };
        Rule {
            subject,
            resource,
            privs,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.resource {
            ResourcePattern::FsPath { .. } => {
                write!(f, "{} {} {}", self.subject, self.resource, self.privs)
            }
            _ => write!(f, "{} {}", self.subject, self.resource),
        }
    }
}

/// A parsed policy. Rules keep their source order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Policy {
    pub rules: Vec<Rule>,
    /// Where the policy was loaded from, if anywhere.
    pub source_path: Option<String>,
}

impl Policy {
    pub fn new(rules: Vec<Rule>) -> Self {
        Policy {
            rules,
            source_path: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    /// Merges suggested rules: a suggestion for an existing (subject, resource)
    /// upgrades its privilege, anything else is appended.
    pub fn merged_with(&self, extra: &[Rule]) -> Policy {
        let mut out = self.clone();
        for rule in extra {
            match out
                .rules
                .iter_mut()
                .find(|r| r.subject == rule.subject && r.resource == rule.resource)
            {
                Some(existing) => existing.privs = existing.privs.max(rule.privs),
                None => out.rules.push(rule.clone()),
            }
        }
        out
    }
}

impl FromStr for Policy {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_policy(s)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_policy(self))
    }
}

/// Parses policy text. Blank and comment-only lines are skipped.
pub fn parse_policy(text: &str) -> Result<Policy, PolicyError> {
    let mut rules = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let Some(rule) = parse_rule_line(raw, line)? else {
            continue;
        };
        check_unique(&mut seen, &rule, line)?;
        rules.push(rule);
    }
    Ok(Policy::new(rules))
}

fn check_unique(
    seen: &mut HashSet<(Subject, ResourcePattern)>,
    rule: &Rule,
    line: usize,
) -> Result<(), PolicyError> {
    if seen.insert((rule.subject.clone(), rule.resource.clone())) {
        Ok(())
    } else {
        Err(PolicyError::DuplicateRule {
            line,
            subject: rule.subject.to_string(),
            resource: rule.resource.to_string(),
        })
    }
}

/// Parses one line; `Ok(None)` for blank or comment-only lines.
pub fn parse_rule_line(raw: &str, line: usize) -> Result<Option<Rule>, PolicyError> {
    let content = raw.split('#').next().unwrap_or("");
    let tokens: Vec<&str> = content.split_whitespace().collect();
    let Some(&subject_tok) = tokens.first() else {
        return Ok(None);
    };
    let syntax = |reason: String| PolicyError::Syntax { line, reason };

    let subject = if subject_tok == DEFAULT_SUBJECT {
        Subject::Default
    } else {
        Subject::Function(FunctionId::new(subject_tok).map_err(|e| syntax(e.to_string()))?)
    };
    let Some(&resource_tok) = tokens.get(1) else {
        return Err(syntax("missing resource".into()));
    };

    if resource_tok == "network" {
        let Some(&target) = tokens.get(2) else {
            return Err(syntax("network rule needs a prefix or protocol".into()));
        };
        if let Some(proto) = Protocol::from_token(target) {
            if tokens.len() > 3 {
                return Err(syntax(format!("unexpected token `{}`", tokens[3])));
            }
            if subject != Subject::Default {
                return Err(syntax(
                    "protocol-only network rules are only allowed for `default`".into(),
                ));
            }
            return Ok(Some(Rule::new(
                subject,
                ResourcePattern::NetProto(proto),
                AccessPriv::ReadWrite,
            )));
        }
        let prefix = parse_prefix(target, line)?;
        let proto = match tokens.get(3) {
            None => None,
            Some(tok) => Some(
                Protocol::from_token(tok)
                    .ok_or_else(|| syntax(format!("unknown protocol `{tok}`")))?,
            ),
        };
        if tokens.len() > 4 {
            return Err(syntax(format!("unexpected token `{}`", tokens[4])));
        }
        return Ok(Some(Rule::new(
            subject,
            ResourcePattern::NetDest { prefix, proto },
            AccessPriv::ReadWrite,
        )));
    }

    let resource =
        ResourcePattern::fs(resource_tok).map_err(|reason| PolicyError::InvalidPath {
            line,
            path: resource_tok.to_string(),
            reason,
        })?;
    let Some(&priv_tok) = tokens.get(2) else {
        return Err(syntax("missing access privilege (`r` or `w`)".into()));
    };
    let privs = AccessPriv::from_token(priv_tok)
        .ok_or_else(|| syntax(format!("unknown access privilege `{priv_tok}`")))?;
    if tokens.len() > 3 {
        return Err(syntax(format!("unexpected token `{}`", tokens[3])));
    }
    Ok(Some(Rule::new(subject, resource, privs)))
}

fn parse_prefix(token: &str, line: usize) -> Result<Ipv4Prefix, PolicyError> {
    let invalid = |reason| PolicyError::InvalidPrefix {
        line,
        prefix: token.to_string(),
        reason,
    };
    let (addr_part, len_part) = match token.split_once('/') {
        Some((a, l)) => (a, Some(l)),
        None => (token, None),
    };
    if addr_part.contains(':') {
        return Err(invalid("IPv6 destinations are not supported"));
    }
    let addr: Ipv4Addr = match addr_part.parse() {
        Ok(a) => a,
        Err(_) if addr_part.chars().any(|c| c.is_ascii_alphabetic()) => {
            return Err(PolicyError::DomainName {
                line,
                name: addr_part.to_string(),
            })
        }
        Err(_) => return Err(invalid("not a dotted-quad IPv4 address")),
    };
    let len = match len_part {
        None => 32,
        Some(l) => l
            .parse::<u8>()
            .map_err(|_| invalid("prefix length must be in 0..=32"))?,
    };
    Ipv4Prefix::new(addr, len).map_err(invalid)
}

/// Renders a policy in the file grammar, one rule per line.
pub fn serialize_policy(policy: &Policy) -> String {
    let mut out = String::new();
    for rule in &policy.rules {
        out.push_str(&rule.to_string());
        out.push('\n');
    }
    out
}

/// One resource of the default baseline, with its privilege.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineEntry {
    pub resource: ResourcePattern,
    pub privs: AccessPriv,
}

/// Parses a baseline file: one resource per line, written like a rule with
/// the subject left out (`/etc/hosts r`, `network tcp`).
pub fn parse_baseline(text: &str) -> Result<Vec<BaselineEntry>, PolicyError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let rule = parse_rule_line(&format!("{DEFAULT_SUBJECT} {content}"), line)?
            .expect("non-blank line yields a rule");
        check_unique(&mut seen, &rule, line)?;
        out.push(BaselineEntry {
            resource: rule.resource,
            privs: rule.privs,
        });
    }
    Ok(out)
}

/// Builds a policy of default rules: every baseline entry, then one read rule
/// per listed application file. Listing errors report the 1-based position in
/// `app_files`.
pub fn generate_template<S: AsRef<str>>(
    baseline: &[BaselineEntry],
    app_files: &[S],
) -> Result<Policy, PolicyError> {
    let mut rules = Vec::with_capacity(baseline.len() + app_files.len());
    let mut seen = HashSet::new();
    for (idx, entry) in baseline.iter().enumerate() {
        let rule = Rule::new(Subject::Default, entry.resource.clone(), entry.privs);
        check_unique(&mut seen, &rule, idx + 1)?;
        rules.push(rule);
    }
    for (idx, path) in app_files.iter().enumerate() {
        let path = path.as_ref();
        let resource = ResourcePattern::fs(path).map_err(|reason| PolicyError::InvalidPath {
            line: idx + 1,
            path: path.to_string(),
            reason,
        })?;
        let rule = Rule::new(Subject::Default, resource, AccessPriv::Read);
        check_unique(&mut seen, &rule, idx + 1)?;
        rules.push(rule);
    }
    Ok(Policy::new(rules))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn func(name: &str) -> Subject {
        Subject::Function(FunctionId::new(name).unwrap())
    }

    #[test]
    fn parses_function_file_rule() {
        let p = parse_policy("camera.recognize_face /app/face.jpg r").unwrap();
        assert_eq!(
            p.rules,
            vec![Rule {
                subject: func("camera.recognize_face"),
                resource: ResourcePattern::FsPath {
                    path: "/app/face.jpg".into(),
                    recursive: false
                },
                privs: AccessPriv::Read,
            }]
        );
    }

    #[test]
    fn parses_default_directory_rule() {
        let p = parse_policy("default /etc/ssl/certs/ r").unwrap();
        assert_eq!(p.rules[0].subject, Subject::Default);
        assert_eq!(
            p.rules[0].resource,
            ResourcePattern::FsPath {
                path: "/etc/ssl/certs/".into(),
                recursive: true
            }
        );
    }

    #[test]
    fn parses_network_rule_as_read_write() {
        let p = parse_policy("tweepy.upload network 10.0.0.0/8").unwrap();
        let r = &p.rules[0];
        assert_eq!(r.privs, AccessPriv::ReadWrite);
        assert_eq!(
            r.resource,
            ResourcePattern::NetDest {
                prefix: Ipv4Prefix::new(Ipv4Addr::new(10, 0, 0, 0), 8).unwrap(),
                proto: None
            }
        );
    }

    #[test]
    fn network_rule_protocol_restriction() {
        let p = parse_policy("m.f network 192.0.2.0/24 udp\ndefault network tcp\n").unwrap();
        assert!(matches!(
            p.rules[0].resource,
            ResourcePattern::NetDest {
                proto: Some(Protocol::Udp),
                ..
            }
        ));
        assert_eq!(
            p.rules[1].resource,
            ResourcePattern::NetProto(Protocol::Tcp)
        );
    }

    #[test]
    fn function_protocol_only_rule_rejected() {
        let err = parse_policy("m.f network tcp").unwrap_err();
        assert!(matches!(err, PolicyError::Syntax { line: 1, .. }));
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "# header\n\n  m.f /a r   # trailing\n\t\n";
        let p = parse_policy(text).unwrap();
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn duplicate_rule_reports_second_line() {
        let err = parse_policy("m.f /a r\nm.g /a r\nm.f /a w\n").unwrap_err();
        assert!(matches!(err, PolicyError::DuplicateRule { line: 3, .. }));
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let cases = [
            ("m.f", 1),
            ("\nm.f /a", 2),
            ("\n\nm.f /a x", 3),
            ("nodot /a r", 1),
            ("m.f /a r extra", 1),
            ("m.f network", 1),
            ("m.f network 10.0.0.0/8 sctp", 1),
        ];
        for (text, line) in cases {
            let err = parse_policy(text).unwrap_err();
            assert!(matches!(err, PolicyError::Syntax { .. }), "{text:?}: {err}");
            assert_eq!(err.line(), line, "{text:?}");
        }
    }

    #[test]
    fn invalid_paths() {
        for path in ["relative/a", "/a/../b", "/a/./b", "/a//b"] {
            let err = parse_policy(&format!("m.f {path} r")).unwrap_err();
            assert!(matches!(err, PolicyError::InvalidPath { .. }), "{path}");
        }
    }

    #[test]
    fn invalid_prefixes() {
        for tok in [
            "10.0.0.1/8",
            "10.0.0.0/33",
            "300.0.0.0/8",
            "::1/128",
            "10.0.0.0/x",
        ] {
            let err = parse_policy(&format!("m.f network {tok}")).unwrap_err();
            assert!(
                matches!(err, PolicyError::InvalidPrefix { .. }),
                "{tok}: {err}"
            );
        }
    }

    #[test]
    fn domain_names_rejected() {
        let err = parse_policy("tweepy.upload network api.twitter.com").unwrap_err();
        assert_eq!(
            err,
            PolicyError::DomainName {
                line: 1,
                name: "api.twitter.com".into()
            }
        );
    }

    #[test]
    fn bare_address_is_host_prefix() {
        let p = parse_policy("m.f network 192.0.2.7").unwrap();
        assert_eq!(serialize_policy(&p), "m.f network 192.0.2.7/32\n");
    }

    #[test]
    fn serialize_single_read_rule() {
        let p = parse_policy("m.f   /a\tr").unwrap();
        let text = serialize_policy(&p);
        assert_eq!(text, "m.f /a r\n");
        assert!(text.trim_end().ends_with(" r"));
    }

    #[test]
    fn serialize_empty() {
        assert_eq!(serialize_policy(&Policy::default()), "");
    }

    #[test]
    fn prefix_zero_matches_everything() {
        let any = Ipv4Prefix::new(Ipv4Addr::UNSPECIFIED, 0).unwrap();
        assert!(any.contains(Ipv4Addr::new(255, 1, 2, 3)));
        let host = Ipv4Prefix::host(Ipv4Addr::new(1, 2, 3, 4));
        assert!(host.contains(Ipv4Addr::new(1, 2, 3, 4)));
        assert!(!host.contains(Ipv4Addr::new(1, 2, 3, 5)));
    }

    #[test]
    fn shipped_baseline_has_46_entries() {
        let baseline = parse_baseline(SHIPPED_BASELINE).unwrap();
        assert_eq!(baseline.len(), 46);
        let net = baseline.iter().filter(|e| e.resource.is_network()).count();
        assert_eq!(net, 4);
    }

    #[test]
    fn template_from_baseline_only() {
        let baseline = parse_baseline(SHIPPED_BASELINE).unwrap();
        let none: [&str; 0] = [];
        let p = generate_template(&baseline, &none).unwrap();
        assert_eq!(p.len(), 46);
        assert!(p.rules.iter().all(|r| r.subject == Subject::Default));
    }

    #[test]
    fn template_from_listing_only() {
        let files = [
            "/app/alexa/main.py",
            "/app/alexa/creds.py",
            "/app/alexa/helper.py",
            "/app/alexa/audio.wav",
            "/app/alexa/config.json",
            "/app/alexa/memcache.py",
        ];
        let p = generate_template(&[], &files).unwrap();
        assert_eq!(p.len(), 6);
        assert!(p.rules.iter().all(|r| r.privs == AccessPriv::Read));
    }

    #[test]
    fn template_empty() {
        let none: [&str; 0] = [];
        assert!(generate_template(&[], &none).unwrap().is_empty());
    }

    #[test]
    fn template_rejects_bad_listing_path() {
        let err = generate_template(&[], &["/ok", "not/absolute"]).unwrap_err();
        assert!(matches!(err, PolicyError::InvalidPath { line: 2, .. }));
    }

    #[test]
    fn merge_upgrades_and_appends() {
        let base = parse_policy("m.f /a r\n").unwrap();
        let extra = parse_policy("m.f /a w\nm.g /b r\n").unwrap();
        let merged = base.merged_with(&extra.rules);
        assert_eq!(serialize_policy(&merged), "m.f /a w\nm.g /b r\n");
    }
}
