//! Pools of data: priority-tagged, persistently identified payload
//! fragments and the manifests that tie them back to their parent entity.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

use bytes::Bytes;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::identity::{seed_from, PersistentId};

pub const DEFAULT_POD_SIZE: usize = 4096;
pub const LEVELS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PodError {
    #[error("missing {} pod(s): {}", .0.len(), join_ids(.0))]
    MissingPods(Vec<PersistentId>),
    #[error("checksum mismatch: expected {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("invalid priority `{0}`")]
    InvalidPriority(String),
}

fn join_ids(ids: &[PersistentId]) -> String {
    ids.iter().map(PersistentId::as_str).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrafficClass {
    Control,
    Payload,
}

/// Control outranks payload; within a class level 0 is highest.
///
/// `Ord` sorts from highest to lowest priority, so `a < b` means `a`
/// outranks `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Priority {
    class: TrafficClass,
    level: u8,
}

impl Priority {
    pub fn new(class: TrafficClass, level: u8) -> Result<Self, PodError> {
        if level >= LEVELS {
            return Err(PodError::InvalidPriority(format!("level {level}")));
        }
        Ok(Self { class, level })
    }

    pub fn control(level: u8) -> Self {
        Self::new(TrafficClass::Control, level).expect("level < 8")
    }

    pub fn payload(level: u8) -> Self {
        Self::new(TrafficClass::Payload, level).expect("level < 8")
    }

    pub fn class(self) -> TrafficClass {
        self.class
    }

    pub fn level(self) -> u8 {
        self.level
    }

    /// 0 (Control:0) through 15 (Payload:7).
    pub fn rank(self) -> u8 {
        match self.class {
            TrafficClass::Control => self.level,
            TrafficClass::Payload => LEVELS + self.level,
        }
    }

    pub fn from_rank(rank: u8) -> Self {
        if rank < LEVELS {
            Self::control(rank)
        } else {
            Self::payload(rank - LEVELS)
        }
    }

    pub fn all() -> impl Iterator<Item = Priority> {
        (0..2 * LEVELS).map(Self::from_rank)
    }

    pub fn outranks(self, other: Priority) -> bool {
        self < other
    }
}

/// Total order on priorities; `Less` means `a` goes first.
pub fn cmp_priority(a: Priority, b: Priority) -> Ordering {
    a.cmp(&b)
}

impl Ord for Priority {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl PartialOrd for Priority {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.class {
            TrafficClass::Control => "control",
            TrafficClass::Payload => "payload",
        };
        write!(f, "{c}:{}", self.level)
    }
}

impl FromStr for Priority {
    type Err = PodError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PodError::InvalidPriority(s.to_string());
        let (c, l) = s.split_once(':').ok_or_else(bad)?;
        let class = match c {
            "control" => TrafficClass::Control,
            "payload" => TrafficClass::Payload,
            _ => return Err(bad()),
        };
        Self::new(class, l.parse().map_err(|_| bad())?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pod {
    pub id: PersistentId,
    pub parent: PersistentId,
    pub index: u32,
    pub payload: Bytes,
    pub priority: Priority,
    pub src: PersistentId,
    pub dst: PersistentId,
    pub hop_log: Vec<PersistentId>,
    /// Copy number under replication; 0 for the original.
    pub replica: u16,
}

impl Pod {
    pub fn with_hop(mut self, aoi: PersistentId) -> Self {
        self.hop_log.push(aoi);
        self
    }

    pub fn hops(&self) -> usize {
        self.hop_log.len()
    }

    pub fn trace_line(&self) -> String {
        format!(
            "pod {} idx={} pri={} src={} dst={}",
            self.id, self.index, self.priority, self.src, self.dst
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PodManifest {
    pub parent: PersistentId,
    pub pod_ids: Vec<PersistentId>,
    pub total_bytes: usize,
    pub checksum: [u8; 32],
}

impl PodManifest {
    pub fn checksum_hex(&self) -> String {
        hex::encode(self.checksum)
    }

    pub fn trace_line(&self) -> String {
        format!(
            "manifest {} {} {} {}",
            self.parent,
            self.pod_ids.len(),
            self.total_bytes,
            self.checksum_hex()
        )
    }
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Splits `payload` into pods of at most `pod_size` bytes. An empty
/// payload still yields one (empty) pod. Pod ids are minted under the
/// source's namespace.
pub fn shard(
    parent: &PersistentId,
    payload: impl Into<Bytes>,
    pod_size: NonZeroUsize,
    priority: Priority,
    src: &PersistentId,
    dst: &PersistentId,
) -> (PodManifest, Vec<Pod>) {
    let payload: Bytes = payload.into();
    let base = seed_from(&[parent.as_str()]);
    let mint = src.prefix().minter();
    let n = payload.len().div_ceil(pod_size.get()).max(1);
    let mut pods = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * pod_size.get();
        let end = (start + pod_size.get()).min(payload.len());
        pods.push(Pod {
            id: mint(base.wrapping_add(i as u64)),
            parent: parent.clone(),
            index: i as u32,
            payload: payload.slice(start..end),
            priority,
            src: src.clone(),
            dst: dst.clone(),
            hop_log: Vec::new(),
            replica: 0,
        });
    }
    let manifest = PodManifest {
        parent: parent.clone(),
        pod_ids: pods.iter().map(|p| p.id.clone()).collect(),
        total_bytes: payload.len(),
        checksum: digest(&payload),
    };
    (manifest, pods)
}

/// Rebuilds the parent payload. Order and duplicates in `pods` do not
/// matter; pods not named by the manifest are ignored.
pub fn reassemble<'a>(manifest: &PodManifest, pods: impl IntoIterator<Item = &'a Pod>) -> Result<Vec<u8>, PodError> {
    let slot: HashMap<&PersistentId, usize> = manifest.pod_ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
    let mut found: Vec<Option<&Pod>> = vec![None; manifest.pod_ids.len()];
    for p in pods {
        if let Some(&i) = slot.get(&p.id) {
            found[i].get_or_insert(p);
        }
    }
    let missing: Vec<PersistentId> = manifest
        .pod_ids
        .iter()
        .zip(&found)
        .filter(|(_, f)| f.is_none())
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(PodError::MissingPods(missing));
    }
    let mut out = Vec::with_capacity(manifest.total_bytes);
    for p in found.into_iter().flatten() {
        out.extend_from_slice(&p.payload);
    }
    let actual = digest(&out);
    if actual != manifest.checksum {
        return Err(PodError::ChecksumMismatch {
            expected: manifest.checksum_hex(),
            actual: hex::encode(actual),
        });
    }
    Ok(out)
}
