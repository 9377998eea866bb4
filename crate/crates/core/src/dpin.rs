//! Distributed persistent-identifier resolution.
//!
//! Every AoI owns one [`PinShard`] holding the records under its delegated
//! prefixes plus read replicas learned from merges. [`Dpin`] is the
//! federation of shards and answers resolution queries against an AoI
//! reachability graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::graph::AoiGraph;
use crate::identity::{sign_record, IdentifierRecord, KeyRing, NamespacePath, PersistentId, Signer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DpinError {
    #[error("signature on `{0}` does not verify")]
    BadSignature(PersistentId),
    #[error("`{0}` is outside this shard's namespace")]
    NotMyNamespace(PersistentId),
    #[error("stale version {offered} for `{id}` (stored {stored})")]
    StaleVersion {
        id: PersistentId,
        stored: u64,
        offered: u64,
    },
    #[error("`{0}` not found")]
    NotFound(PersistentId),
    #[error("`{0}` is unreachable from the origin")]
    Unreachable(PersistentId),
    #[error("no shard for AoI `{0}`")]
    NoSuchShard(PersistentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardMode {
    Connected,
    Isolated,
}

impl fmt::Display for ShardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShardMode::Connected => "connected",
            ShardMode::Isolated => "isolated",
        })
    }
}

#[derive(Debug, Clone)]
struct Entry {
    record: IdentifierRecord,
    registrant: PersistentId,
}

/// Inputs a validation policy may consult.
pub struct ValidationContext<'a> {
    pub keys: &'a KeyRing,
    /// Prefixes of the shard holding the record, or `None` for a replica
    /// held on behalf of another shard.
    pub namespace: Option<&'a BTreeSet<NamespacePath>>,
}

pub trait ValidationPolicy {
    fn accept(&self, record: &IdentifierRecord, ctx: &ValidationContext<'_>) -> bool;
}

impl<F> ValidationPolicy for F
where
    F: Fn(&IdentifierRecord, &ValidationContext<'_>) -> bool,
{
    fn accept(&self, record: &IdentifierRecord, ctx: &ValidationContext<'_>) -> bool {
        self(record, ctx)
    }
}

/// Signature plus namespace re-check.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultValidation;

impl ValidationPolicy for DefaultValidation {
    fn accept(&self, record: &IdentifierRecord, ctx: &ValidationContext<'_>) -> bool {
        ctx.keys.verify(record)
            && ctx
                .namespace
                .is_none_or(|ns| ns.iter().any(|p| p.covers(&record.id)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub validated: Vec<PersistentId>,
    pub evicted: Vec<PersistentId>,
    /// Replicas from the validation queue, whichever way they were judged.
    pub from_queue: Vec<PersistentId>,
}

#[derive(Debug, Clone)]
pub struct PinShard {
    owner_aoi: PersistentId,
    prefixes: BTreeSet<NamespacePath>,
    records: BTreeMap<PersistentId, Entry>,
    replicas: BTreeMap<PersistentId, IdentifierRecord>,
    mode: ShardMode,
    flagged: BTreeSet<PersistentId>,
    validation_queue: BTreeMap<PersistentId, IdentifierRecord>,
}

impl PinShard {
    pub fn new(owner_aoi: PersistentId, prefix: NamespacePath) -> Self {
        Self {
            owner_aoi,
            prefixes: BTreeSet::from([prefix]),
            records: BTreeMap::new(),
            replicas: BTreeMap::new(),
            mode: ShardMode::Connected,
            flagged: BTreeSet::new(),
            validation_queue: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> &PersistentId {
        &self.owner_aoi
    }

    pub fn prefixes(&self) -> &BTreeSet<NamespacePath> {
        &self.prefixes
    }

    pub fn add_prefix(&mut self, prefix: NamespacePath) {
        self.prefixes.insert(prefix);
    }

    pub fn mode(&self) -> ShardMode {
        self.mode
    }

    pub fn flagged(&self) -> &BTreeSet<PersistentId> {
        &self.flagged
    }

    pub fn validation_queue(&self) -> impl Iterator<Item = &PersistentId> {
        self.validation_queue.keys()
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    /// Longest own prefix covering `id`, by depth.
    pub fn coverage_depth(&self, id: &PersistentId) -> Option<usize> {
        self.prefixes.iter().filter(|p| p.covers(id)).map(NamespacePath::depth).max()
    }

    pub fn covers(&self, id: &PersistentId) -> bool {
        self.coverage_depth(id).is_some()
    }

    /// Sub-prefix used for identifiers computed while isolated.
    pub fn isolated_prefix(&self) -> NamespacePath {
        let base = self.prefixes.iter().next().expect("shard has a prefix");
        base.child("isolated").expect("static label")
    }

    /// Own record or replica, whichever is newer.
    pub fn lookup(&self, id: &PersistentId) -> Option<&IdentifierRecord> {
        let own = self.records.get(id).map(|e| &e.record);
        let rep = self.replicas.get(id);
        match (own, rep) {
            (Some(o), Some(r)) if r.version > o.version => Some(r),
            (Some(o), _) => Some(o),
            (None, r) => r,
        }
    }

    pub fn owned_records(&self) -> impl Iterator<Item = &IdentifierRecord> {
        self.records.values().map(|e| &e.record)
    }

    pub fn visible_records(&self) -> impl Iterator<Item = &IdentifierRecord> {
        self.owned_records()
            .chain(self.replicas.values().filter(|r| !self.records.contains_key(&r.id)))
    }

    pub fn register(&mut self, mut record: IdentifierRecord, keys: &KeyRing) -> Result<(), DpinError> {
        if !keys.verify(&record) {
            return Err(DpinError::BadSignature(record.id));
        }
        if !self.covers(&record.id) {
            return Err(DpinError::NotMyNamespace(record.id));
        }
        if let Some(e) = self.records.get(&record.id) {
            if record.version <= e.record.version {
                return Err(DpinError::StaleVersion {
                    id: record.id,
                    stored: e.record.version,
                    offered: record.version,
                });
            }
        }
        let registrant = record.signer_key().expect("verified signature names its key");
        match self.mode {
            ShardMode::Isolated => {
                record.validated = false;
                self.flagged.insert(record.id.clone());
            }
            ShardMode::Connected => {
                self.flagged.remove(&record.id);
            }
        }
        self.records.insert(record.id.clone(), Entry { record, registrant });
        Ok(())
    }

    /// Rewrites the home AoI (and optionally the locators) of an owned
    /// record. Only the original registrant may do so.
    pub fn update_location(
        &mut self,
        id: &PersistentId,
        new_aoi: PersistentId,
        addresses: Option<Vec<String>>,
        signer: &dyn Signer,
        keys: &KeyRing,
    ) -> Result<IdentifierRecord, DpinError> {
        let entry = self.records.get(id).ok_or_else(|| DpinError::NotFound(id.clone()))?;
        if entry.registrant != *signer.key_id() {
            return Err(DpinError::BadSignature(id.clone()));
        }
        let mut next = entry.record.clone();
        next.home_aoi = new_aoi;
        if let Some(a) = addresses {
            next.addresses = a;
        }
        next.version += 1;
        let next = sign_record(next, signer);
        self.register(next.clone(), keys)?;
        Ok(self.lookup(id).cloned().unwrap_or(next))
    }

    pub fn enter_isolated(&mut self) {
        self.mode = ShardMode::Isolated;
    }

    pub fn reconnect(&mut self) {
        self.mode = ShardMode::Connected;
    }

    /// Installs a read replica unless an equal or newer copy is held.
    /// Returns true when the replica changed.
    pub fn accept_replica(&mut self, record: &IdentifierRecord) -> bool {
        if self.records.contains_key(&record.id) {
            return false;
        }
        match self.replicas.get(&record.id) {
            Some(r) if r.version > record.version => false,
            Some(r) if r.version == record.version && r.validated == record.validated => false,
            _ => {
                self.replicas.insert(record.id.clone(), record.clone());
                true
            }
        }
    }

    /// Re-checks flagged records and queued foreign replicas. Passing
    /// records become validated; failing ones are evicted. No-op while
    /// isolated.
    pub fn validate_flagged(&mut self, keys: &KeyRing, judge: &dyn ValidationPolicy) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.mode == ShardMode::Isolated {
            return report;
        }
        let own_ctx = ValidationContext {
            keys,
            namespace: Some(&self.prefixes),
        };
        for id in std::mem::take(&mut self.flagged) {
            let Some(entry) = self.records.get_mut(&id) else { continue };
            if judge.accept(&entry.record, &own_ctx) {
                entry.record.validated = true;
                report.validated.push(id);
            } else {
                self.records.remove(&id);
                report.evicted.push(id);
            }
        }
        let foreign_ctx = ValidationContext { keys, namespace: None };
        for (id, rec) in std::mem::take(&mut self.validation_queue) {
            report.from_queue.push(id.clone());
            if judge.accept(&rec, &foreign_ctx) {
                if let Some(r) = self.replicas.get_mut(&id) {
                    if r.version == rec.version {
                        r.validated = true;
                    }
                }
            } else {
                self.replicas.remove(&id);
            }
        }
        report
    }

    /// Golden-file dump: header then owned records sorted by id.
    pub fn dump(&self) -> String {
        let mut out = format!("shard {} {}\n", self.owner_aoi, self.mode);
        for e in self.records.values() {
            let _ = writeln!(out, "{}", e.record.to_line());
        }
        out
    }
}

/// Bilateral merge: each side gains read replicas of everything the other
/// can see (max version wins), both return to connected mode, and each
/// side's flagged records enter the other's validation queue.
pub fn merge(a: &mut PinShard, b: &mut PinShard) {
    let from_a: Vec<IdentifierRecord> = a.visible_records().cloned().collect();
    let from_b: Vec<IdentifierRecord> = b.visible_records().cloned().collect();
    for r in &from_a {
        b.accept_replica(r);
    }
    for r in &from_b {
        a.accept_replica(r);
    }
    for id in &a.flagged {
        if let Some(e) = a.records.get(id) {
            b.validation_queue.insert(id.clone(), e.record.clone());
        }
    }
    for id in &b.flagged {
        if let Some(e) = b.records.get(id) {
            a.validation_queue.insert(id.clone(), e.record.clone());
        }
    }
    a.mode = ShardMode::Connected;
    b.mode = ShardMode::Connected;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolutionResult {
    pub record: IdentifierRecord,
    pub valid_at_resolution: bool,
    pub served_by: PersistentId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub result: ResolutionResult,
    /// Cross-shard cost: AoI hops from origin to the serving shard.
    pub remote_queries: u32,
}

/// The federation of shards.
#[derive(Debug, Clone, Default)]
pub struct Dpin {
    shards: BTreeMap<PersistentId, PinShard>,
    peers: BTreeMap<PersistentId, BTreeSet<PersistentId>>,
    aggregate_parent: BTreeMap<PersistentId, PersistentId>,
}

impl Dpin {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_shard(&mut self, shard: PinShard) {
        self.shards.insert(shard.owner().clone(), shard);
    }

    pub fn shard(&self, aoi: &PersistentId) -> Option<&PinShard> {
        self.shards.get(aoi)
    }

    pub fn shard_mut(&mut self, aoi: &PersistentId) -> Option<&mut PinShard> {
        self.shards.get_mut(aoi)
    }

    pub fn shards(&self) -> impl Iterator<Item = &PinShard> {
        self.shards.values()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn peers_of(&self, aoi: &PersistentId) -> impl Iterator<Item = &PersistentId> {
        self.peers.get(aoi).into_iter().flatten()
    }

    /// Shard whose delegation covers `id` by longest-prefix match.
    pub fn covering_shard(&self, id: &PersistentId) -> Option<&PinShard> {
        self.shards
            .values()
            .filter_map(|s| s.coverage_depth(id).map(|d| (d, s)))
            .max_by_key(|(d, _)| *d)
            .map(|(_, s)| s)
    }

    pub fn resolve(&self, graph: &AoiGraph, id: &PersistentId, origin: &PersistentId) -> Result<Resolution, DpinError> {
        let served = |s: &PinShard, rec: &IdentifierRecord, q: u32| Resolution {
            result: ResolutionResult {
                record: rec.clone(),
                valid_at_resolution: rec.validated,
                served_by: s.owner().clone(),
            },
            remote_queries: q,
        };
        let local = self.shards.get(origin);
        if let Some(rec) = local.and_then(|s| s.lookup(id)) {
            return Ok(served(local.expect("checked"), rec, 0));
        }
        let cover = self.covering_shard(id).ok_or_else(|| DpinError::NotFound(id.clone()))?;
        if cover.owner() == origin {
            return Err(DpinError::NotFound(id.clone()));
        }
        let origin_mode = local.map_or(ShardMode::Connected, PinShard::mode);
        let hops = graph
            .distance(origin, cover.owner())
            .filter(|_| origin_mode == cover.mode())
            .ok_or_else(|| DpinError::Unreachable(id.clone()))?;
        let rec = cover.lookup(id).ok_or_else(|| DpinError::NotFound(id.clone()))?;
        Ok(served(cover, rec, hops))
    }

    /// Registers into `aoi`'s shard and pushes the record to reachable
    /// merge peers and aggregation ancestors.
    pub fn register(
        &mut self,
        aoi: &PersistentId,
        record: IdentifierRecord,
        keys: &KeyRing,
        graph: &AoiGraph,
    ) -> Result<(), DpinError> {
        let id = record.id.clone();
        self.shards
            .get_mut(aoi)
            .ok_or_else(|| DpinError::NoSuchShard(aoi.clone()))?
            .register(record, keys)?;
        self.propagate(aoi, &id, graph);
        Ok(())
    }

    /// Relocates `id` in whichever shard covers it.
    pub fn update_location(
        &mut self,
        id: &PersistentId,
        new_aoi: PersistentId,
        addresses: Option<Vec<String>>,
        signer: &dyn Signer,
        keys: &KeyRing,
        graph: &AoiGraph,
    ) -> Result<IdentifierRecord, DpinError> {
        let owner = self
            .covering_shard(id)
            .ok_or_else(|| DpinError::NotFound(id.clone()))?
            .owner()
            .clone();
        let rec = self
            .shards
            .get_mut(&owner)
            .expect("covering shard exists")
            .update_location(id, new_aoi, addresses, signer, keys)?;
        self.propagate(&owner, id, graph);
        Ok(rec)
    }

    fn propagate(&mut self, from: &PersistentId, id: &PersistentId, graph: &AoiGraph) {
        let Some(rec) = self.shards.get(from).and_then(|s| s.lookup(id)).cloned() else { return };
        let mut targets: BTreeSet<PersistentId> = self
            .peers_of(from)
            .filter(|p| graph.reachable(from, p))
            .cloned()
            .collect();
        let mut cur = from;
        while let Some(parent) = self.aggregate_parent.get(cur) {
            targets.insert(parent.clone());
            cur = parent;
        }
        for t in targets {
            if let Some(s) = self.shards.get_mut(&t) {
                s.accept_replica(&rec);
            }
        }
    }

    pub fn merge(&mut self, a: &PersistentId, b: &PersistentId) -> Result<(), DpinError> {
        if a == b {
            return Ok(());
        }
        let mut sa = self.shards.remove(a).ok_or_else(|| DpinError::NoSuchShard(a.clone()))?;
        let Some(mut sb) = self.shards.remove(b) else {
            self.shards.insert(a.clone(), sa);
            return Err(DpinError::NoSuchShard(b.clone()));
        };
        merge(&mut sa, &mut sb);
        self.shards.insert(a.clone(), sa);
        self.shards.insert(b.clone(), sb);
        self.peers.entry(a.clone()).or_default().insert(b.clone());
        self.peers.entry(b.clone()).or_default().insert(a.clone());
        Ok(())
    }

    /// Makes `parent` a containing shard of `child`: it replicates the
    /// child's records now and receives every later change.
    pub fn set_aggregate_parent(&mut self, child: &PersistentId, parent: &PersistentId) -> Result<(), DpinError> {
        self.merge(child, parent)?;
        self.aggregate_parent.insert(child.clone(), parent.clone());
        let recs: Vec<IdentifierRecord> = self.shards[child].visible_records().cloned().collect();
        let mut cur = parent.clone();
        while let Some(next) = self.aggregate_parent.get(&cur).cloned() {
            let s = self.shards.get_mut(&next).expect("aggregate parent has a shard");
            for r in &recs {
                s.accept_replica(r);
            }
            cur = next;
        }
        Ok(())
    }

    /// Whole-federation dump, one shard block after another.
    pub fn dump(&self) -> String {
        self.shards.values().map(PinShard::dump).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{seed_from, EntityKind, KeyedHashSigner};
    use std::sync::Arc;

    struct Fixture {
        keys: KeyRing,
        signer: KeyedHashSigner,
    }

    impl Fixture {
        fn new() -> Self {
            let signer = KeyedHashSigner::derived(mint(&["keys"], 1), 1);
            let mut keys = KeyRing::new();
            keys.insert(Arc::new(signer.clone()));
            Self { keys, signer }
        }

        fn record(&self, id: PersistentId, home: &PersistentId) -> IdentifierRecord {
            let r = IdentifierRecord::new(id, EntityKind::Device, home.clone(), vec![]).unwrap();
            sign_record(r, &self.signer)
        }
    }

    fn mint(prefix: &[&str], seed: u64) -> PersistentId {
        crate::identity::mint_id(prefix, seed).unwrap()
    }

    fn aoi(label: &str) -> (PersistentId, PinShard) {
        let id = mint(&["net"], seed_from(&[label]));
        let shard = PinShard::new(id.clone(), format!("net/{label}").parse().unwrap());
        (id, shard)
    }

    fn line(ids: &[&PersistentId]) -> AoiGraph {
        let mut g = AoiGraph::new();
        for w in ids.windows(2) {
            g.add_edge(w[0], w[1]);
        }
        g
    }

    #[test]
    fn register_then_resolve_locally() {
        let f = Fixture::new();
        let (a, sa) = aoi("a");
        let mut net = Dpin::new();
        net.add_shard(sa);
        let rec = f.record(mint(&["net", "a"], 1), &a);
        net.register(&a, rec.clone(), &f.keys, &AoiGraph::new()).unwrap();
        let res = net.resolve(&AoiGraph::new(), &rec.id, &a).unwrap();
        assert_eq!(res.result.record, rec);
        assert_eq!(res.result.valid_at_resolution, rec.validated);
        assert_eq!(res.result.served_by, a);
        assert_eq!(res.remote_queries, 0);
    }

    #[test]
    fn register_errors() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        let foreign = f.record(mint(&["net", "b"], 1), &a);
        assert!(matches!(sa.register(foreign, &f.keys), Err(DpinError::NotMyNamespace(_))));

        let mut bad = f.record(mint(&["net", "a"], 1), &a);
        bad.version = 9;
        assert!(matches!(sa.register(bad, &f.keys), Err(DpinError::BadSignature(_))));

        let mut v3 = f.record(mint(&["net", "a"], 2), &a);
        v3.version = 3;
        let v3 = sign_record(v3, &f.signer);
        let mut v2 = v3.clone();
        v2.version = 2;
        let v2 = sign_record(v2, &f.signer);
        sa.register(v3.clone(), &f.keys).unwrap();
        let before = sa.dump();
        assert!(matches!(
            sa.register(v2, &f.keys),
            Err(DpinError::StaleVersion { stored: 3, offered: 2, .. })
        ));
        assert_eq!(sa.dump(), before);
    }

    #[test]
    fn isolated_registration_is_flagged() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        sa.enter_isolated();
        let rec = f.record(sa.isolated_prefix().mint(4), &a);
        assert!(rec.validated);
        sa.register(rec.clone(), &f.keys).unwrap();
        assert!(!sa.lookup(&rec.id).unwrap().validated);
        assert!(sa.flagged().contains(&rec.id));
    }

    #[test]
    fn resolve_on_empty_network() {
        let id = mint(&["net", "a"], 1);
        assert_eq!(
            Dpin::new().resolve(&AoiGraph::new(), &id, &id),
            Err(DpinError::NotFound(id.clone()))
        );
    }

    #[test]
    fn three_shards_and_partition() {
        let f = Fixture::new();
        let (a, sa) = aoi("a");
        let (b, sb) = aoi("b");
        let (c, sc) = aoi("c");
        let mut net = Dpin::new();
        for s in [sa, sb, sc] {
            net.add_shard(s);
        }
        let g = line(&[&a, &b, &c]);
        let rec = f.record(mint(&["net", "c"], 7), &c);
        net.register(&c, rec.clone(), &f.keys, &g).unwrap();

        let res = net.resolve(&g, &rec.id, &a).unwrap();
        assert_eq!(res.result.served_by, c);
        assert_eq!(res.remote_queries, g.distance(&a, &c).unwrap());
        assert_eq!(res.remote_queries, 2);

        let mut cut = g.clone();
        cut.remove_edge(&b, &c);
        assert_eq!(net.resolve(&cut, &rec.id, &a), Err(DpinError::Unreachable(rec.id.clone())));
        let missing = mint(&["net", "c"], 8);
        assert_eq!(net.resolve(&g, &missing, &a), Err(DpinError::NotFound(missing.clone())));
        let uncovered = mint(&["net", "zzz"], 8);
        assert_eq!(net.resolve(&g, &uncovered, &a), Err(DpinError::NotFound(uncovered.clone())));
    }

    #[test]
    fn update_location_bumps_version() {
        let f = Fixture::new();
        let (a, sa) = aoi("a");
        let (b, _) = aoi("b");
        let mut net = Dpin::new();
        net.add_shard(sa);
        let g = AoiGraph::new();
        let rec = f.record(mint(&["net", "a"], 1), &a);
        net.register(&a, rec.clone(), &f.keys, &g).unwrap();
        let moved = net.update_location(&rec.id, b.clone(), None, &f.signer, &f.keys, &g).unwrap();
        assert_eq!(moved.home_aoi, b);
        assert_eq!(moved.version, rec.version + 1);
        assert_eq!(net.resolve(&g, &rec.id, &a).unwrap().result.record.home_aoi, b);

        let other = KeyedHashSigner::derived(mint(&["keys"], 2), 2);
        let mut keys = f.keys.clone();
        keys.insert(Arc::new(other.clone()));
        let before = net.dump();
        assert_eq!(
            net.update_location(&rec.id, a.clone(), None, &other, &keys, &g),
            Err(DpinError::BadSignature(rec.id.clone()))
        );
        assert_eq!(net.dump(), before);
        let ghost = mint(&["net", "a"], 99);
        assert!(matches!(
            net.update_location(&ghost, a, None, &f.signer, &f.keys, &g),
            Err(DpinError::NotFound(_))
        ));
    }

    #[test]
    fn interleaved_updates_match_log_replay() {
        let f = Fixture::new();
        let (a, sa) = aoi("a");
        let (b, _) = aoi("b");
        let mut net = Dpin::new();
        net.add_shard(sa);
        let g = AoiGraph::new();
        let ids = [mint(&["net", "a"], 1), mint(&["net", "a"], 2)];
        for id in &ids {
            net.register(&a, f.record(id.clone(), &a), &f.keys, &g).unwrap();
        }
        // deterministic interleaving; the oracle replays the log
        let log: Vec<usize> = (0..100u64).map(|i| (seed_from(&[i.to_be_bytes()]) % 2) as usize).collect();
        for (step, &which) in log.iter().enumerate() {
            let to = if step % 2 == 0 { &b } else { &a };
            net.update_location(&ids[which], to.clone(), None, &f.signer, &f.keys, &g).unwrap();
        }
        for (i, id) in ids.iter().enumerate() {
            let count = log.iter().filter(|&&w| w == i).count() as u64;
            let got = net.shard(&a).unwrap().lookup(id).unwrap().version;
            assert_eq!(got, 1 + count);
        }
    }

    #[test]
    fn merge_unions_records() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        let (b, mut sb) = aoi("b");
        let mut ids = Vec::new();
        for i in 0..100 {
            let ra = f.record(mint(&["net", "a"], i), &a);
            let rb = f.record(mint(&["net", "b"], i), &b);
            ids.push(ra.id.clone());
            ids.push(rb.id.clone());
            sa.register(ra, &f.keys).unwrap();
            sb.register(rb, &f.keys).unwrap();
        }
        merge(&mut sa, &mut sb);
        let mut net = Dpin::new();
        net.add_shard(sa);
        net.add_shard(sb);
        let g = AoiGraph::new();
        for id in &ids {
            let ra = net.resolve(&g, id, &a).unwrap();
            let rb = net.resolve(&g, id, &b).unwrap();
            assert_eq!((ra.remote_queries, rb.remote_queries), (0, 0));
            assert_eq!(ra.result.record, rb.result.record);
        }
    }

    #[test]
    fn merge_takes_max_version_of_replicas() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        let (_, mut sb) = aoi("b");
        let x = f.record(mint(&["net", "c"], 1), &a);
        let mut v4 = x.clone();
        v4.version = 4;
        let mut v6 = x;
        v6.version = 6;
        let (v4, v6) = (sign_record(v4, &f.signer), sign_record(v6, &f.signer));
        sa.accept_replica(&v4);
        sb.accept_replica(&v6);
        merge(&mut sa, &mut sb);
        assert_eq!(sa.lookup(&v4.id).unwrap().version, 6);
        assert_eq!(sb.lookup(&v4.id).unwrap().version, 6);
    }

    #[test]
    fn isolated_flags_reach_peer_queue_and_clear() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        let (b, mut sb) = aoi("b");
        sa.enter_isolated();
        let mut expected = BTreeSet::new();
        for i in 0..10 {
            let r = f.record(sa.isolated_prefix().mint(i), &a);
            expected.insert(r.id.clone());
            sa.register(r, &f.keys).unwrap();
        }
        merge(&mut sa, &mut sb);
        let queued: BTreeSet<_> = sb.validation_queue().cloned().collect();
        assert_eq!(queued, expected);
        let ra = sa.validate_flagged(&f.keys, &DefaultValidation);
        let rb = sb.validate_flagged(&f.keys, &DefaultValidation);
        assert!(sa.flagged().is_empty());
        assert_eq!(ra.validated.len(), 10);
        assert_eq!(rb.from_queue.len(), 10);
        for id in &expected {
            assert!(sa.lookup(id).unwrap().validated);
            assert_eq!(sa.lookup(id), sb.lookup(id));
        }
        let _ = b;
    }

    #[test]
    fn enter_isolated_keeps_local_and_blocks_foreign() {
        let f = Fixture::new();
        let (a, sa) = aoi("a");
        let (b, sb) = aoi("b");
        let mut net = Dpin::new();
        net.add_shard(sa);
        net.add_shard(sb);
        let g = line(&[&a, &b]);
        let local = f.record(mint(&["net", "a"], 1), &a);
        let foreign = f.record(mint(&["net", "b"], 1), &b);
        net.register(&a, local.clone(), &f.keys, &g).unwrap();
        net.register(&b, foreign.clone(), &f.keys, &g).unwrap();
        net.shard_mut(&a).unwrap().enter_isolated();
        assert!(net.resolve(&g, &local.id, &a).is_ok());
        assert_eq!(net.resolve(&g, &foreign.id, &a), Err(DpinError::Unreachable(foreign.id.clone())));
    }

    #[test]
    fn isolated_registrations_are_exactly_the_validation_set() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        let (_, mut sb) = aoi("b");
        for i in 0..7 {
            sa.register(f.record(mint(&["net", "a"], i), &a), &f.keys).unwrap();
        }
        let pre: BTreeSet<PersistentId> = sa.owned_records().map(|r| r.id.clone()).collect();
        sa.enter_isolated();
        for i in 0..5 {
            sa.register(f.record(sa.isolated_prefix().mint(i), &a), &f.keys).unwrap();
        }
        let post: BTreeSet<PersistentId> = sa.owned_records().map(|r| r.id.clone()).collect();
        merge(&mut sa, &mut sb);
        let presented: BTreeSet<PersistentId> = sb.validation_queue().cloned().collect();
        assert_eq!(presented, &post - &pre);
        assert_eq!(presented.len(), 5);
    }

    #[test]
    fn validation_policies() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        sa.enter_isolated();
        let mut seed_of = BTreeMap::new();
        for seed in 0..50u64 {
            let r = f.record(mint(&["net", "a"], seed), &a);
            seed_of.insert(r.id.clone(), seed);
            sa.register(r, &f.keys).unwrap();
        }
        let mut all_pass = sa.clone();
        all_pass.reconnect();
        all_pass.validate_flagged(&f.keys, &|_: &IdentifierRecord, _: &ValidationContext<'_>| true);
        assert!(all_pass.flagged().is_empty());
        assert!(all_pass.owned_records().all(|r| r.validated));

        sa.reconnect();
        let odd = |r: &IdentifierRecord, _: &ValidationContext<'_>| seed_of[&r.id] % 2 == 1;
        let report = sa.validate_flagged(&f.keys, &odd);
        let expected: BTreeSet<&PersistentId> = seed_of.iter().filter(|(_, s)| *s % 2 == 1).map(|(id, _)| id).collect();
        let survivors: BTreeSet<&PersistentId> = sa.owned_records().map(|r| &r.id).collect();
        assert_eq!(survivors, expected);
        assert_eq!(report.evicted.len(), 25);
    }

    #[test]
    fn tampered_flagged_record_is_evicted() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        sa.enter_isolated();
        let ids: Vec<PersistentId> = (0..3).map(|i| mint(&["net", "a"], i)).collect();
        for id in &ids {
            sa.register(f.record(id.clone(), &a), &f.keys).unwrap();
        }
        sa.records.get_mut(&ids[1]).unwrap().record.signature[5] ^= 0xff;
        sa.reconnect();
        let report = sa.validate_flagged(&f.keys, &DefaultValidation);
        assert_eq!(report.evicted, vec![ids[1].clone()]);
        assert!(sa.lookup(&ids[0]).unwrap().validated);
        assert!(sa.lookup(&ids[1]).is_none());
        assert!(sa.flagged().is_empty());
    }

    #[test]
    fn validate_is_noop_while_isolated() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        sa.enter_isolated();
        sa.register(f.record(mint(&["net", "a"], 1), &a), &f.keys).unwrap();
        assert_eq!(sa.validate_flagged(&f.keys, &DefaultValidation), ValidationReport::default());
        assert_eq!(sa.flagged().len(), 1);
    }

    #[test]
    fn peers_receive_later_updates_when_reachable() {
        let f = Fixture::new();
        let (a, sa) = aoi("a");
        let (b, sb) = aoi("b");
        let mut net = Dpin::new();
        net.add_shard(sa);
        net.add_shard(sb);
        let g = line(&[&a, &b]);
        let rec = f.record(mint(&["net", "a"], 1), &a);
        net.register(&a, rec.clone(), &f.keys, &g).unwrap();
        net.merge(&a, &b).unwrap();
        net.update_location(&rec.id, b.clone(), None, &f.signer, &f.keys, &g).unwrap();
        assert_eq!(net.shard(&b).unwrap().lookup(&rec.id).unwrap().version, 2);

        let cut = AoiGraph::new();
        net.update_location(&rec.id, a.clone(), None, &f.signer, &f.keys, &cut).unwrap();
        assert_eq!(net.shard(&b).unwrap().lookup(&rec.id).unwrap().version, 2);
        net.merge(&a, &b).unwrap();
        assert_eq!(net.shard(&b).unwrap().lookup(&rec.id).unwrap().version, 3);
    }

    #[test]
    fn dump_format() {
        let f = Fixture::new();
        let (a, mut sa) = aoi("a");
        sa.register(f.record(mint(&["net", "a"], 2), &a), &f.keys).unwrap();
        sa.register(f.record(mint(&["net", "a"], 1), &a), &f.keys).unwrap();
        let dump = sa.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], format!("shard {a} connected"));
        assert_eq!(lines.len(), 3);
        assert!(lines[1] < lines[2]);
        assert!(lines[1].starts_with("id=net/a/"));
    }
}
