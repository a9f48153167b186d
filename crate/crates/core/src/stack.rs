//! Call stacks, the privilege-intersection walk over them, and the canonical
//! stack hash used by the stack-hash log.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acl::{has_privs, AccessRequest, FunctionAcl};
use crate::policy::{FunctionId, InvalidFunctionId};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frame {
    pub func: FunctionId,
}

impl Frame {
    pub fn new(func: FunctionId) -> Self {
        Frame { func }
    }
}

/// Runtime call stack; index 0 is the innermost frame, i.e. the function
/// issuing the request.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CallStack {
    frames: Vec<Frame>,
}

impl CallStack {
    pub fn new(frames: Vec<Frame>) -> Self {
        CallStack { frames }
    }

    /// Builds a stack from qualified names, innermost first.
    pub fn from_names<I, S>(names: I) -> Result<Self, InvalidFunctionId>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        names
            .into_iter()
            .map(|n| FunctionId::new(n.as_ref()).map(Frame::new))
            .collect::<Result<Vec<_>, _>>()
            .map(CallStack::new)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn innermost(&self) -> Option<&Frame> {
        self.frames.first()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Appends a frame on the outer end of the stack.
    pub fn push_outer(&mut self, frame: Frame) {
        self.frames.push(frame);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.func.as_str())
    }
}

/// SHA-256 digest of a canonically serialized call stack.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct StackHash([u8; 32]);

impl StackHash {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        StackHash(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for StackHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StackHash({})", self.to_hex())
    }
}

impl fmt::Display for StackHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid stack hash `{0}`: expected 64 lowercase hex digits")]
pub struct InvalidStackHash(pub String);

impl FromStr for StackHash {
    type Err = InvalidStackHash;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || s.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(InvalidStackHash(s.to_string()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| InvalidStackHash(s.to_string()))?;
        Ok(StackHash(out))
    }
}

impl TryFrom<String> for StackHash {
    type Error = InvalidStackHash;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StackHash> for String {
    fn from(h: StackHash) -> String {
        h.to_hex()
    }
}

/// SHA-256 over every qualified name, innermost first, each followed by `\n`.
pub fn canonical_hash(stack: &CallStack) -> StackHash {
    let mut hasher = Sha256::new();
    for name in stack.names() {
        hasher.update(name.as_bytes());
        hasher.update(b"\n");
    }
    let digest: [u8; 32] = hasher.finalize().into();
    StackHash(digest)
}

/// Detailed result of walking a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Inspection {
    Granted,
    /// The stack had no frames.
    EmptyStack,
    /// The innermost frame has no ACL entry at all.
    UnruledInnermost,
    /// The frame at this index has an ACL entry that does not grant the request.
    Refused {
        frame: usize,
    },
}

impl Inspection {
    pub fn is_granted(self) -> bool {
        self == Inspection::Granted
    }
}

/// Walks the stack from the innermost frame outwards.
///
/// The innermost frame must have an ACL entry granting the request. Outer
/// frames without an entry are skipped; the first outer frame whose entry
/// lacks the privilege ends the walk with a refusal.
pub fn inspect(stack: &CallStack, req: &AccessRequest, acl: &FunctionAcl) -> Inspection {
    let mut frames = stack.frames().iter().enumerate();
    let Some((_, first)) = frames.next() else {
        return Inspection::EmptyStack;
    };
    let Some(rule) = acl.rule(&first.func) else {
        return Inspection::UnruledInnermost;
    };
    if !has_privs(rule, req) {
        return Inspection::Refused { frame: 0 };
    }
    for (idx, frame) in frames {
        let Some(rule) = acl.rule(&frame.func) else {
            continue;
        };
        if !has_privs(rule, req) {
            return Inspection::Refused { frame: idx };
        }
    }
    Inspection::Granted
}

/// True iff the whole stack is authorized for `req`.
pub fn inspect_stack(stack: &CallStack, req: &AccessRequest, acl: &FunctionAcl) -> bool {
    inspect(stack, req, acl).is_granted()
}
