use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Maximum length of a safe id, including the hash suffix.
pub const SAFE_ID_MAX_LEN: usize = 63;
const HASH_HEX_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefKind {
    Branch,
    PullRequest,
}

impl RefKind {
    fn domain(self) -> &'static str {
        match self {
            RefKind::Branch => "branch",
            RefKind::PullRequest => "pull-request",
        }
    }
}

/// Identity of one isolation lineage: a branch or a pull request.
///
/// `safe_id` is the token used as the workspace directory name and as the
/// `ref` tag on every task launched for this lineage. It always matches
/// `[a-z0-9][a-z0-9-]{0,62}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RefKey {
    pub kind: RefKind,
    pub name: String,
    pub safe_id: String,
}

impl RefKey {
    pub fn branch(name: impl Into<String>) -> Self {
        make_ref_key(RefKind::Branch, &name.into())
    }

    pub fn pull_request(number: u64) -> Self {
        make_ref_key(RefKind::PullRequest, &number.to_string())
    }
}

impl fmt::Display for RefKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RefKind::Branch => write!(f, "{}", self.name),
            RefKind::PullRequest => write!(f, "PR #{}", self.name),
        }
    }
}

/// Builds the ref key for `(kind, name)`.
///
/// The readable part is a lowercase slug of the name (pull requests get a
/// `pr-` prefix); the suffix is a hash of the raw kind and name, which keeps
/// names that slug to the same text apart.
pub fn make_ref_key(kind: RefKind, name: &str) -> RefKey {
    let mut slug = slugify(name);
    if kind == RefKind::PullRequest {
        slug = if slug.is_empty() { "pr".to_owned() } else { format!("pr-{slug}") };
    }
    if slug.is_empty() {
        slug.push_str("ref");
    }
    let budget = SAFE_ID_MAX_LEN - HASH_HEX_LEN - 1;
    if slug.len() > budget {
        slug.truncate(budget);
        while slug.ends_with('-') {
            slug.pop();
        }
    }

    let mut hasher = Sha256::new();
    hasher.update(kind.domain().as_bytes());
    hasher.update([0u8]);
    hasher.update(name.as_bytes());
    let digest = hex::encode(hasher.finalize());

    RefKey {
        kind,
        name: name.to_owned(),
        safe_id: format!("{slug}-{}", &digest[..HASH_HEX_LEN]),
    }
}

fn slugify(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut last_dash = true;
    for c in name.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_lowercase() || c.is_ascii_digit() {
            out.push(c);
            last_dash = false;
        } else if !last_dash {
            out.push('-');
            last_dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// True when `id` has the shape of a safe id.
pub fn is_safe_id(id: &str) -> bool {
    let bytes = id.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= SAFE_ID_MAX_LEN
        && (bytes[0].is_ascii_lowercase() || bytes[0].is_ascii_digit())
        && bytes
            .iter()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'-')
}
