//! Persistent identifiers, delegated namespaces and signed identifier records.
//!
//! A [`PersistentId`] is a location-independent name of the form
//! `label/label/.../suffix`. The labels form a [`NamespacePath`] that is
//! handed out through [`DelegationRegistry`]; the suffix is computed locally
//! by [`mint_id`] from deterministic entropy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use hmac::{Hmac, KeyInit, Mac};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_LABEL_LEN: usize = 63;
pub const MAX_SUFFIX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("invalid namespace prefix: {0}")]
    InvalidPrefix(String),
    #[error("invalid identifier suffix: {0}")]
    InvalidSuffix(String),
    #[error("malformed identifier `{0}`")]
    Malformed(String),
    #[error("malformed record line: {0}")]
    MalformedRecord(String),
    #[error("invalid locator `{0}`")]
    InvalidLocator(String),
    #[error("prefix `{0}` is already delegated")]
    DuplicateDelegation(String),
    #[error("`{caller}` holds no authority over `{prefix}`")]
    NotAuthoritative { caller: String, prefix: String },
}

fn visible_ascii(s: &str) -> bool {
    s.bytes().all(|b| (0x21..=0x7e).contains(&b) && b != b'/')
}

fn check_label(label: &str) -> Result<(), IdentityError> {
    if label.is_empty() || label.len() > MAX_LABEL_LEN || !visible_ascii(label) {
        return Err(IdentityError::InvalidPrefix(label.to_string()));
    }
    Ok(())
}

fn check_suffix(suffix: &str) -> Result<(), IdentityError> {
    if suffix.is_empty() || suffix.len() > MAX_SUFFIX_LEN || !visible_ascii(suffix) {
        return Err(IdentityError::InvalidSuffix(suffix.to_string()));
    }
    Ok(())
}

/// An ordered, non-empty sequence of namespace labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NamespacePath(Vec<String>);

impl NamespacePath {
    pub fn new<L: AsRef<str>>(labels: &[L]) -> Result<Self, IdentityError> {
        if labels.is_empty() {
            return Err(IdentityError::InvalidPrefix(String::new()));
        }
        let mut out = Vec::with_capacity(labels.len());
        for l in labels {
            check_label(l.as_ref())?;
            out.push(l.as_ref().to_string());
        }
        Ok(Self(out))
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, label: &str) -> Result<Self, IdentityError> {
        check_label(label)?;
        let mut labels = self.0.clone();
        labels.push(label.to_string());
        Ok(Self(labels))
    }

    /// True when `self` is a proper prefix of `other`.
    pub fn strictly_extended_by(&self, other: &NamespacePath) -> bool {
        other.0.len() > self.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    /// True when the id's namespace starts with this path.
    pub fn covers(&self, id: &PersistentId) -> bool {
        let mut theirs = id.prefix_labels();
        self.0.iter().all(|l| theirs.next() == Some(l.as_str()))
    }

    /// Computes a fresh identifier under this path; see [`mint_id`].
    pub fn mint(&self, seed: u64) -> PersistentId {
        self.minter()(seed)
    }

    /// [`mint`](Self::mint) with the prefix hashing done once, for bulk use.
    pub fn minter(&self) -> impl Fn(u64) -> PersistentId {
        let prefix = self.to_string();
        let d = Sha256::digest(prefix.as_bytes());
        let salt = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
        move |seed| {
            let text: Arc<str> = format!("{prefix}/{:016x}", mix64(seed ^ salt)).into();
            PersistentId {
                text,
                split: prefix.len(),
            }
        }
    }
}

impl fmt::Display for NamespacePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("/"))
    }
}

impl FromStr for NamespacePath {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let labels: Vec<&str> = s.split('/').collect();
        Self::new(&labels)
    }
}

// splitmix64 finalizer: a bijection on u64, so distinct seeds never collide.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes arbitrary parts into a 64-bit seed for [`mint_id`].
pub fn seed_from<P: AsRef<[u8]>>(parts: &[P]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        let p = p.as_ref();
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A globally unique, location-independent identifier.
///
/// Stored as its canonical text, so clones are cheap and equality is
/// byte equality of the canonical form.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PersistentId {
    text: Arc<str>,
    split: usize,
}

impl PersistentId {
    pub fn new(prefix: &NamespacePath, suffix: &str) -> Result<Self, IdentityError> {
        check_suffix(suffix)?;
        Ok(Self::from_parts(prefix, suffix))
    }

    fn from_parts(prefix: &NamespacePath, suffix: &str) -> Self {
        let p = prefix.to_string();
        let split = p.len();
        let text: Arc<str> = format!("{p}/{suffix}").into();
        Self { text, split }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn suffix(&self) -> &str {
        &self.text[self.split + 1..]
    }

    pub fn prefix_labels(&self) -> impl Iterator<Item = &str> {
        self.text[..self.split].split('/')
    }

    pub fn prefix(&self) -> NamespacePath {
        NamespacePath(self.prefix_labels().map(str::to_string).collect())
    }

    /// The identifier itself read as a namespace path (prefix labels plus
    /// the suffix as the last label). Fails when the suffix is too long to
    /// be a label.
    pub fn as_namespace(&self) -> Result<NamespacePath, IdentityError> {
        self.prefix().child(self.suffix())
    }
}

impl fmt::Display for PersistentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Debug for PersistentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PersistentId({})", self.text)
    }
}

impl FromStr for PersistentId {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (prefix, suffix) = s
            .rsplit_once('/')
            .ok_or_else(|| IdentityError::Malformed(s.to_string()))?;
        let prefix: NamespacePath = prefix.parse()?;
        Self::new(&prefix, suffix)
    }
}

/// Mints an identifier under `prefix`. Same seed, same id; distinct seeds
/// under one prefix always give distinct suffixes.
pub fn mint_id<L: AsRef<str>>(prefix: &[L], seed: u64) -> Result<PersistentId, IdentityError> {
    Ok(NamespacePath::new(prefix)?.mint(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    Device,
    Service,
    User,
    Pod,
    Gateway,
    AoI,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::Device,
        EntityKind::Service,
        EntityKind::User,
        EntityKind::Pod,
        EntityKind::Gateway,
        EntityKind::AoI,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Device => "device",
            EntityKind::Service => "service",
            EntityKind::User => "user",
            EntityKind::Pod => "pod",
            EntityKind::Gateway => "gateway",
            EntityKind::AoI => "aoi",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| IdentityError::MalformedRecord(format!("unknown kind `{s}`")))
    }
}

/// Signed mapping from a persistent identifier to its current attributes.
///
/// The signature covers every field except `validated`, which is the
/// resolving shard's statement about the record rather than the
/// registrant's.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifierRecord {
    pub id: PersistentId,
    pub kind: EntityKind,
    pub home_aoi: PersistentId,
    pub addresses: Vec<String>,
    pub version: u64,
    pub validated: bool,
    pub signature: Vec<u8>,
}

impl IdentifierRecord {
    /// An unsigned record at version 1.
    pub fn new(
        id: PersistentId,
        kind: EntityKind,
        home_aoi: PersistentId,
        addresses: Vec<String>,
    ) -> Result<Self, IdentityError> {
        for a in &addresses {
            if a.is_empty() || a.contains(',') || !a.bytes().all(|b| (0x21..=0x7e).contains(&b)) {
                return Err(IdentityError::InvalidLocator(a.clone()));
            }
        }
        Ok(Self {
            id,
            kind,
            home_aoi,
            addresses,
            version: 1,
            validated: true,
            signature: Vec::new(),
        })
    }

    /// Bytes covered by the signature.
    pub fn signed_content(&self) -> Vec<u8> {
        format!(
            "id={}\nkind={}\nhome_aoi={}\naddresses={}\nversion={}",
            self.id,
            self.kind,
            self.home_aoi,
            self.addresses.join(","),
            self.version
        )
        .into_bytes()
    }

    /// Key id embedded in the signature, if any.
    pub fn signer_key(&self) -> Option<PersistentId> {
        decode_signature(&self.signature).map(|(k, _)| k)
    }

    /// Trace/dump line form; fields in fixed order.
    pub fn to_line(&self) -> String {
        format!(
            "id={} kind={} home_aoi={} addresses={} version={} validated={} signature={}",
            self.id,
            self.kind,
            self.home_aoi,
            self.addresses.join(","),
            self.version,
            self.validated,
            hex::encode(&self.signature)
        )
    }

    pub fn from_line(line: &str) -> Result<Self, IdentityError> {
        const KEYS: [&str; 7] = [
            "id",
            "kind",
            "home_aoi",
            "addresses",
            "version",
            "validated",
            "signature",
        ];
        let bad = |m: &str| IdentityError::MalformedRecord(m.to_string());
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != KEYS.len() {
            return Err(bad("wrong field count"));
        }
        let mut vals = Vec::with_capacity(KEYS.len());
        for (f, key) in fields.iter().zip(KEYS) {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(f))?;
            if k != key {
                return Err(bad(&format!("expected `{key}`, found `{k}`")));
            }
            vals.push(v);
        }
        let addresses = if vals[3].is_empty() {
            Vec::new()
        } else {
            vals[3].split(',').map(str::to_string).collect()
        };
        let mut rec = Self::new(vals[0].parse()?, vals[1].parse()?, vals[2].parse()?, addresses)?;
        rec.version = vals[4].parse().map_err(|_| bad("version"))?;
        rec.validated = vals[5].parse().map_err(|_| bad("validated"))?;
        rec.signature = hex::decode(vals[6]).map_err(|_| bad("signature"))?;
        Ok(rec)
    }
}

/// A signing key. The signature scheme is pluggable; the simulator ships
/// [`KeyedHashSigner`].
pub trait Signer: Send + Sync {
    fn key_id(&self) -> &PersistentId;

    /// Raw authentication tag over `content`.
    fn tag(&self, content: &[u8]) -> Vec<u8>;

    fn check_tag(&self, content: &[u8], tag: &[u8]) -> bool {
        self.tag(content) == tag
    }
}

/// HMAC-SHA256 under a shared secret. Stands in for a real PKI.
#[derive(Clone)]
pub struct KeyedHashSigner {
    key_id: PersistentId,
    key: Vec<u8>,
}

impl KeyedHashSigner {
    pub fn new(key_id: PersistentId, key: impl Into<Vec<u8>>) -> Self {
        Self {
            key_id,
            key: key.into(),
        }
    }

    /// Key material derived from the key id and a seed.
    pub fn derived(key_id: PersistentId, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_be_bytes());
        h.update(key_id.as_str().as_bytes());
        let key = h.finalize().to_vec();
        Self { key_id, key }
    }
}

impl fmt::Debug for KeyedHashSigner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyedHashSigner")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl Signer for KeyedHashSigner {
    fn key_id(&self) -> &PersistentId {
        &self.key_id
    }

    fn tag(&self, content: &[u8]) -> Vec<u8> {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.key).expect("hmac accepts any key length");
        mac.update(content);
        mac.finalize().into_bytes().to_vec()
    }

    fn check_tag(&self, content: &[u8], tag: &[u8]) -> bool {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.key).expect("hmac accepts any key length");
        mac.update(content);
        mac.verify_slice(tag).is_ok()
    }
}

// Signature layout: u16 key-id length, key-id bytes, tag.
fn encode_signature(key_id: &PersistentId, tag: &[u8]) -> Vec<u8> {
    let k = key_id.as_str().as_bytes();
    let mut out = Vec::with_capacity(2 + k.len() + tag.len());
    out.extend_from_slice(&(k.len() as u16).to_be_bytes());
    out.extend_from_slice(k);
    out.extend_from_slice(tag);
    out
}

fn decode_signature(sig: &[u8]) -> Option<(PersistentId, &[u8])> {
    let len = u16::from_be_bytes(sig.get(..2)?.try_into().ok()?) as usize;
    let key = std::str::from_utf8(sig.get(2..2 + len)?).ok()?;
    Some((key.parse().ok()?, &sig[2 + len..]))
}

/// Returns `record` signed by `signer`; content fields are untouched.
pub fn sign_record(mut record: IdentifierRecord, signer: &dyn Signer) -> IdentifierRecord {
    let tag = signer.tag(&record.signed_content());
    record.signature = encode_signature(signer.key_id(), &tag);
    record
}

/// Verifies `record` against one specific key.
pub fn verify_with(record: &IdentifierRecord, signer: &dyn Signer) -> bool {
    match decode_signature(&record.signature) {
        Some((key, tag)) => key == *signer.key_id() && signer.check_tag(&record.signed_content(), tag),
        None => false,
    }
}

/// Key material known to the network, indexed by key id.
#[derive(Clone, Default)]
pub struct KeyRing {
    keys: BTreeMap<PersistentId, Arc<dyn Signer>>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, signer: Arc<dyn Signer>) {
        self.keys.insert(signer.key_id().clone(), signer);
    }

    pub fn get(&self, key_id: &PersistentId) -> Option<&Arc<dyn Signer>> {
        self.keys.get(key_id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Verifies a record under whichever known key its signature names.
    pub fn verify(&self, record: &IdentifierRecord) -> bool {
        record
            .signer_key()
            .and_then(|k| self.keys.get(&k))
            .is_some_and(|s| verify_with(record, s.as_ref()))
    }
}

impl fmt::Debug for KeyRing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.keys.keys()).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct NamespaceDelegation {
    pub parent_prefix: NamespacePath,
    pub delegated_prefix: NamespacePath,
    pub authority: PersistentId,
}

/// Live delegations under one root namespace.
#[derive(Debug, Clone)]
pub struct DelegationRegistry {
    root: NamespacePath,
    root_authority: PersistentId,
    live: BTreeMap<NamespacePath, NamespaceDelegation>,
}

impl DelegationRegistry {
    pub fn new(root: NamespacePath, root_authority: PersistentId) -> Self {
        Self {
            root,
            root_authority,
            live: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> &NamespacePath {
        &self.root
    }

    pub fn root_authority(&self) -> &PersistentId {
        &self.root_authority
    }

    fn authority_of(&self, prefix: &NamespacePath) -> Option<&PersistentId> {
        if *prefix == self.root {
            Some(&self.root_authority)
        } else {
            self.live.get(prefix).map(|d| &d.authority)
        }
    }

    /// Delegates `parent/new_label` to `to_aoi`. `caller` must own `parent`.
    pub fn delegate(
        &mut self,
        parent: &NamespacePath,
        caller: &PersistentId,
        new_label: &str,
        to_aoi: PersistentId,
    ) -> Result<NamespaceDelegation, IdentityError> {
        if self.authority_of(parent) != Some(caller) {
            return Err(IdentityError::NotAuthoritative {
                caller: caller.to_string(),
                prefix: parent.to_string(),
            });
        }
        let delegated = parent.child(new_label)?;
        if self.live.contains_key(&delegated) {
            return Err(IdentityError::DuplicateDelegation(delegated.to_string()));
        }
        let d = NamespaceDelegation {
            parent_prefix: parent.clone(),
            delegated_prefix: delegated.clone(),
            authority: to_aoi,
        };
        self.live.insert(delegated, d.clone());
        Ok(d)
    }

    pub fn get(&self, prefix: &NamespacePath) -> Option<&NamespaceDelegation> {
        self.live.get(prefix)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamespaceDelegation> {
        self.live.values()
    }

    pub fn owned_by<'a>(&'a self, aoi: &'a PersistentId) -> impl Iterator<Item = &'a NamespaceDelegation> {
        self.live.values().filter(move |d| d.authority == *aoi)
    }

    /// Deepest live delegation whose prefix covers `id`.
    pub fn resolve_authority(&self, id: &PersistentId) -> Option<&NamespaceDelegation> {
        // Walk the id's own prefix from longest to shortest: at most one
        // delegation exists per prefix, so the first hit is the deepest.
        let labels: Vec<&str> = id.prefix_labels().collect();
        (1..=labels.len()).rev().find_map(|n| {
            let p = NamespacePath(labels[..n].iter().map(|s| s.to_string()).collect());
            self.live.get(&p)
        })
    }
}
