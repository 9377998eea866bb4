//! Area-of-Influence formation and topology.
//!
//! Nodes start out known only by a local [`NodeName`]. Their persistent
//! identifier is computed on first association, under the namespace
//! delegated to the AoI they associate with, and never changes afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use thiserror::Error;

use crate::dpin::{Dpin, DpinError, PinShard, ShardMode, ValidationPolicy, ValidationReport};
use crate::graph::AoiGraph;
use crate::identity::{
    seed_from, sign_record, DelegationRegistry, EntityKind, IdentifierRecord, IdentityError, KeyRing,
    KeyedHashSigner, NamespacePath, PersistentId,
};

pub type AoiId = PersistentId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AoiError {
    #[error("unknown node `{0}`")]
    NoSuchNode(NodeName),
    #[error("unknown AoI `{0}`")]
    NoSuchAoI(AoiId),
    #[error("node `{0}` already exists")]
    DuplicateNode(NodeName),
    #[error("`{0}` is not in reach")]
    NotInReach(NodeName),
    #[error("`{0}` already belongs to an AoI")]
    AlreadyAssociated(NodeName),
    #[error("`{0}` is already a member")]
    AlreadyMember(NodeName),
    #[error("`{node}` is not a member of `{aoi}`")]
    NotAMember { node: NodeName, aoi: AoiId },
    #[error("`{0}` and `{1}` are not neighbors")]
    NotNeighbors(AoiId, AoiId),
    #[error("aggregating `{child}` under `{parent}` would form a cycle")]
    CycleDetected { parent: AoiId, child: AoiId },
    #[error("`{0}` is already aggregated")]
    AlreadyAggregated(AoiId),
    #[error("no edge between `{0}` and `{1}`")]
    NoSuchEdge(AoiId, AoiId),
    #[error("`{0}` has no persistent identifier yet")]
    Unidentified(NodeName),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Dpin(#[from] DpinError),
}

/// Local, pre-association name of a node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeName(String);

impl NodeName {
    pub fn new(name: &str) -> Result<Self, IdentityError> {
        NamespacePath::new(&[name])?;
        Ok(Self(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    FullAgent,
    /// Sensor-class device that cannot host an agent; needs a surrogate.
    Constrained,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: NodeName,
    pub id: Option<PersistentId>,
    pub kind: NodeKind,
    pub reach: BTreeSet<NodeName>,
    pub memberships: Vec<AoiId>,
    pub primary_aoi: Option<AoiId>,
    pub key_id: PersistentId,
}

#[derive(Debug, Clone)]
pub struct AreaOfInfluence {
    pub id: AoiId,
    pub prefix: NamespacePath,
    pub members: BTreeSet<NodeName>,
    pub gateways: BTreeSet<NodeName>,
    pub protocol_tag: String,
    pub neighbors: BTreeSet<AoiId>,
    pub aggregate_parent: Option<AoiId>,
    pub constituents: BTreeSet<AoiId>,
}

#[derive(Debug, Clone)]
pub struct AoiTopology {
    root: NamespacePath,
    seed: u64,
    aois: BTreeMap<AoiId, AreaOfInfluence>,
    nodes: BTreeMap<NodeName, Node>,
    by_pid: BTreeMap<PersistentId, NodeName>,
    delegations: DelegationRegistry,
    dpin: Dpin,
    keys: KeyRing,
    signers: BTreeMap<NodeName, Arc<KeyedHashSigner>>,
    cut: BTreeSet<(AoiId, AoiId)>,
    graph: AoiGraph,
    surrogacy: BTreeMap<NodeName, NodeName>,
    anchor: Option<AoiId>,
}

fn edge(a: &AoiId, b: &AoiId) -> (AoiId, AoiId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Id an AoI formed by `a` and `b` receives; symmetric in the pair.
pub fn aoi_id_for(root: &NamespacePath, seed: u64, a: &NodeName, b: &NodeName) -> AoiId {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    root.mint(seed_from(&[&seed.to_be_bytes()[..], lo.as_str().as_bytes(), hi.as_str().as_bytes()]))
}

impl AoiTopology {
    pub fn new(root: NamespacePath, seed: u64) -> Self {
        let root_authority = PersistentId::new(&root, "authority").expect("static suffix");
        Self {
            delegations: DelegationRegistry::new(root.clone(), root_authority),
            root,
            seed,
            aois: BTreeMap::new(),
            nodes: BTreeMap::new(),
            by_pid: BTreeMap::new(),
            dpin: Dpin::new(),
            keys: KeyRing::new(),
            signers: BTreeMap::new(),
            cut: BTreeSet::new(),
            graph: AoiGraph::new(),
            surrogacy: BTreeMap::new(),
            anchor: None,
        }
    }

    pub fn root(&self) -> &NamespacePath {
        &self.root
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn aois(&self) -> impl Iterator<Item = &AreaOfInfluence> {
        self.aois.values()
    }

    pub fn aoi(&self, id: &AoiId) -> Result<&AreaOfInfluence, AoiError> {
        self.aois.get(id).ok_or_else(|| AoiError::NoSuchAoI(id.clone()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node(&self, name: &NodeName) -> Result<&Node, AoiError> {
        self.nodes.get(name).ok_or_else(|| AoiError::NoSuchNode(name.clone()))
    }

    fn node_mut(&mut self, name: &NodeName) -> Result<&mut Node, AoiError> {
        self.nodes.get_mut(name).ok_or_else(|| AoiError::NoSuchNode(name.clone()))
    }

    pub fn node_by_pid(&self, id: &PersistentId) -> Option<&Node> {
        self.by_pid.get(id).and_then(|n| self.nodes.get(n))
    }

    pub fn pid_of(&self, name: &NodeName) -> Result<&PersistentId, AoiError> {
        self.node(name)?.id.as_ref().ok_or_else(|| AoiError::Unidentified(name.clone()))
    }

    pub fn signer(&self, name: &NodeName) -> Result<&Arc<KeyedHashSigner>, AoiError> {
        self.signers.get(name).ok_or_else(|| AoiError::NoSuchNode(name.clone()))
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    pub fn dpin(&self) -> &Dpin {
        &self.dpin
    }

    pub fn dpin_mut(&mut self) -> &mut Dpin {
        &mut self.dpin
    }

    pub fn delegations(&self) -> &DelegationRegistry {
        &self.delegations
    }

    /// Active AoI adjacency: neighbor relations minus cut edges.
    pub fn graph(&self) -> &AoiGraph {
        &self.graph
    }

    pub fn anchor(&self) -> Option<&AoiId> {
        self.anchor.as_ref()
    }

    pub fn set_anchor(&mut self, aoi: &AoiId) -> Result<(), AoiError> {
        self.aoi(aoi)?;
        self.anchor = Some(aoi.clone());
        Ok(())
    }

    pub fn is_cut(&self, a: &AoiId, b: &AoiId) -> bool {
        self.cut.contains(&edge(a, b))
    }

    pub fn add_node(&mut self, name: NodeName, kind: NodeKind) -> Result<(), AoiError> {
        if self.nodes.contains_key(&name) {
            return Err(AoiError::DuplicateNode(name));
        }
        let key_id = self
            .root
            .child("keys")?
            .mint(seed_from(&[&self.seed.to_be_bytes()[..], name.as_str().as_bytes()]));
        let signer = Arc::new(KeyedHashSigner::derived(key_id.clone(), self.seed));
        self.keys.insert(signer.clone());
        self.signers.insert(name.clone(), signer);
        self.nodes.insert(
            name.clone(),
            Node {
                name,
                id: None,
                kind,
                reach: BTreeSet::new(),
                memberships: Vec::new(),
                primary_aoi: None,
                key_id,
            },
        );
        Ok(())
    }

    /// Puts `a` and `b` in mutual reach.
    pub fn link(&mut self, a: &NodeName, b: &NodeName) -> Result<(), AoiError> {
        self.node(a)?;
        self.node(b)?;
        if a != b {
            self.node_mut(a)?.reach.insert(b.clone());
            self.node_mut(b)?.reach.insert(a.clone());
        }
        Ok(())
    }

    pub fn unlink(&mut self, a: &NodeName, b: &NodeName) -> Result<(), AoiError> {
        self.node_mut(a)?.reach.remove(b);
        self.node_mut(b)?.reach.remove(a);
        Ok(())
    }

    fn in_reach(&self, a: &NodeName, b: &NodeName) -> bool {
        self.nodes.get(a).is_some_and(|n| n.reach.contains(b))
    }

    /// Two unassociated nodes in mutual reach form a new AoI.
    pub fn scan_and_handshake(&mut self, a: &NodeName, b: &NodeName) -> Result<AoiId, AoiError> {
        for n in [a, b] {
            if !self.node(n)?.memberships.is_empty() {
                return Err(AoiError::AlreadyAssociated(n.clone()));
            }
        }
        if !(self.in_reach(a, b) && self.in_reach(b, a)) {
            return Err(AoiError::NotInReach(b.clone()));
        }
        let id = aoi_id_for(&self.root, self.seed, a, b);
        let root = self.root.clone();
        let authority = self.delegations.root_authority().clone();
        let d = self.delegations.delegate(&root, &authority, id.suffix(), id.clone())?;
        self.dpin.add_shard(PinShard::new(id.clone(), d.delegated_prefix.clone()));
        self.graph.add_vertex(id.clone());
        self.aois.insert(
            id.clone(),
            AreaOfInfluence {
                id: id.clone(),
                prefix: d.delegated_prefix,
                members: BTreeSet::new(),
                gateways: BTreeSet::new(),
                protocol_tag: "adhoc".into(),
                neighbors: BTreeSet::new(),
                aggregate_parent: None,
                constituents: BTreeSet::new(),
            },
        );
        if self.anchor.is_none() {
            self.anchor = Some(id.clone());
        }
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        self.attach(lo, &id, true)?;
        self.attach(hi, &id, true)?;
        Ok(id)
    }

    pub fn join_aoi(&mut self, node: &NodeName, aoi: &AoiId) -> Result<(), AoiError> {
        let members = &self.aoi(aoi)?.members;
        if members.contains(node) {
            return Err(AoiError::AlreadyMember(node.clone()));
        }
        let n = self.node(node)?;
        if !members.iter().any(|m| n.reach.contains(m)) {
            return Err(AoiError::NotInReach(node.clone()));
        }
        self.attach(node, aoi, true)
    }

    /// Adds the membership. With `dpin`, a fresh node gets its identifier
    /// and record, and a node without a primary AoI adopts this one and
    /// has its record relocated.
    pub fn attach(&mut self, node: &NodeName, aoi: &AoiId, dpin: bool) -> Result<(), AoiError> {
        self.aoi(aoi)?;
        let n = self.node_mut(node)?;
        if !n.memberships.contains(aoi) {
            n.memberships.push(aoi.clone());
        }
        let adopt = n.primary_aoi.is_none();
        if adopt {
            n.primary_aoi = Some(aoi.clone());
        }
        let fresh = n.id.is_none();
        self.aois.get_mut(aoi).expect("checked").members.insert(node.clone());
        if fresh {
            self.identify(node, aoi)?;
        } else if adopt && dpin {
            self.relocate_record(node, aoi)?;
        }
        Ok(())
    }

    fn identify(&mut self, node: &NodeName, aoi: &AoiId) -> Result<PersistentId, AoiError> {
        let shard = self.dpin.shard(aoi).ok_or_else(|| AoiError::NoSuchAoI(aoi.clone()))?;
        let ns = match shard.mode() {
            ShardMode::Connected => self.aois[aoi].prefix.clone(),
            ShardMode::Isolated => shard.isolated_prefix(),
        };
        let pid = ns.mint(seed_from(&[&self.seed.to_be_bytes()[..], node.as_str().as_bytes()]));
        let rec = IdentifierRecord::new(pid.clone(), EntityKind::Device, aoi.clone(), vec![format!("node:{node}")])?;
        let rec = sign_record(rec, self.signers[node].as_ref());
        self.dpin.register(aoi, rec, &self.keys, &self.graph)?;
        self.node_mut(node)?.id = Some(pid.clone());
        self.by_pid.insert(pid.clone(), node.clone());
        Ok(pid)
    }

    fn relocate_record(&mut self, node: &NodeName, aoi: &AoiId) -> Result<IdentifierRecord, AoiError> {
        let pid = self.pid_of(node)?.clone();
        let addresses = match self.surrogacy.get(node) {
            Some(gw) => vec![format!("via:{}", self.pid_of(gw)?)],
            None => vec![format!("node:{node}")],
        };
        Ok(self.dpin.update_location(
            &pid,
            aoi.clone(),
            Some(addresses),
            self.signers[node].as_ref(),
            &self.keys,
            &self.graph,
        )?)
    }

    pub fn declare_primary(&mut self, node: &NodeName, aoi: &AoiId) -> Result<(), AoiError> {
        self.set_primary(node, aoi, true)
    }

    /// Primary switch; `dpin` controls whether the record follows.
    pub fn set_primary(&mut self, node: &NodeName, aoi: &AoiId, dpin: bool) -> Result<(), AoiError> {
        let n = self.node(node)?;
        if !n.memberships.contains(aoi) {
            return Err(AoiError::NotAMember {
                node: node.clone(),
                aoi: aoi.clone(),
            });
        }
        if n.primary_aoi.as_ref() == Some(aoi) {
            return Ok(());
        }
        self.node_mut(node)?.primary_aoi = Some(aoi.clone());
        if dpin && self.node(node)?.id.is_some() {
            self.relocate_record(node, aoi)?;
        }
        Ok(())
    }

    /// Drops one membership. A vanished primary is replaced by the
    /// smallest remaining membership.
    pub fn leave(&mut self, node: &NodeName, aoi: &AoiId, dpin: bool) -> Result<(), AoiError> {
        let n = self.node_mut(node)?;
        let Some(pos) = n.memberships.iter().position(|m| m == aoi) else {
            return Err(AoiError::NotAMember {
                node: node.clone(),
                aoi: aoi.clone(),
            });
        };
        n.memberships.remove(pos);
        let lost_primary = n.primary_aoi.as_ref() == Some(aoi);
        if let Some(a) = self.aois.get_mut(aoi) {
            a.members.remove(node);
            a.gateways.remove(node);
        }
        if lost_primary {
            let n = self.node_mut(node)?;
            n.primary_aoi = None;
            if let Some(next) = n.memberships.iter().min().cloned() {
                n.primary_aoi = Some(next.clone());
                if dpin {
                    self.relocate_record(node, &next)?;
                }
            }
        }
        Ok(())
    }

    /// Gateways are full-agent members in reach of a member of another
    /// AoI. Recomputes this AoI's neighbor relations on both sides.
    pub fn elect_gateways(&mut self, aoi: &AoiId) -> Result<(), AoiError> {
        let a = self.aoi(aoi)?;
        let mut gateways = BTreeSet::new();
        let mut neighbors = BTreeSet::new();
        for m in &a.members {
            let node = &self.nodes[m];
            for other in self.foreign_aois_in_reach(node, aoi) {
                if node.kind == NodeKind::FullAgent {
                    gateways.insert(m.clone());
                    neighbors.insert(other);
                }
            }
        }
        // the other side may own the only full agent on a shared link
        for (oid, other) in &self.aois {
            if oid == aoi {
                continue;
            }
            for m in &other.members {
                let node = &self.nodes[m];
                if node.kind == NodeKind::FullAgent && self.foreign_aois_in_reach(node, oid).contains(aoi) {
                    neighbors.insert(oid.clone());
                }
            }
        }
        let old: BTreeSet<AoiId> = self.aois[aoi].neighbors.clone();
        for gone in old.difference(&neighbors) {
            if let Some(o) = self.aois.get_mut(gone) {
                o.neighbors.remove(aoi);
            }
        }
        for n in &neighbors {
            self.aois.get_mut(n).expect("known AoI").neighbors.insert(aoi.clone());
        }
        let me = self.aois.get_mut(aoi).expect("checked");
        me.gateways = gateways;
        me.neighbors = neighbors;
        self.rebuild_graph();
        Ok(())
    }

    pub fn elect_all(&mut self) {
        let ids: Vec<AoiId> = self.aois.keys().cloned().collect();
        for id in &ids {
            self.elect_gateways(id).expect("known AoI");
        }
    }

    fn foreign_aois_in_reach(&self, node: &Node, home: &AoiId) -> BTreeSet<AoiId> {
        let mut out = BTreeSet::new();
        for r in &node.reach {
            if let Some(rn) = self.nodes.get(r) {
                out.extend(rn.memberships.iter().filter(|m| *m != home).cloned());
            }
        }
        out.extend(node.memberships.iter().filter(|m| *m != home).cloned());
        out
    }

    fn rebuild_graph(&mut self) {
        let mut g = AoiGraph::new();
        for (id, a) in &self.aois {
            g.add_vertex(id.clone());
            for n in &a.neighbors {
                if !self.cut.contains(&edge(id, n)) {
                    g.add_edge(id, n);
                }
            }
        }
        self.graph = g;
    }

    /// Egress gateway of `from` toward neighbor `to`: the smallest-named
    /// gateway with a member of `to` in reach.
    pub fn egress(&self, from: &AoiId, to: &AoiId) -> Option<&NodeName> {
        let a = self.aois.get(from)?;
        a.gateways.iter().find(|g| {
            let n = &self.nodes[*g];
            n.memberships.contains(to)
                || n.reach.iter().any(|r| self.nodes.get(r).is_some_and(|rn| rn.memberships.contains(to)))
        })
    }

    /// Node that coordinates routing and custody for an AoI: its smallest
    /// gateway, else its smallest full-agent member.
    pub fn coordinator(&self, aoi: &AoiId) -> Option<&NodeName> {
        let a = self.aois.get(aoi)?;
        a.gateways.iter().next().or_else(|| {
            a.members
                .iter()
                .find(|m| self.nodes[*m].kind == NodeKind::FullAgent)
        })
    }

    /// Folds `child` into `parent`. Aggregation forms a forest.
    pub fn aggregate(&mut self, parent: &AoiId, child: &AoiId) -> Result<(), AoiError> {
        let p = self.aoi(parent)?;
        self.aoi(child)?;
        if parent == child || self.ancestors(parent).contains(child) {
            return Err(AoiError::CycleDetected {
                parent: parent.clone(),
                child: child.clone(),
            });
        }
        if !p.neighbors.contains(child) {
            return Err(AoiError::NotNeighbors(parent.clone(), child.clone()));
        }
        if self.aois[child].aggregate_parent.is_some() {
            return Err(AoiError::AlreadyAggregated(child.clone()));
        }
        self.dpin.set_aggregate_parent(child, parent)?;
        self.aois.get_mut(child).expect("checked").aggregate_parent = Some(parent.clone());
        self.aois.get_mut(parent).expect("checked").constituents.insert(child.clone());
        Ok(())
    }

    fn ancestors(&self, aoi: &AoiId) -> Vec<AoiId> {
        let mut out = Vec::new();
        let mut cur = aoi;
        while let Some(p) = self.aois.get(cur).and_then(|a| a.aggregate_parent.as_ref()) {
            out.push(p.clone());
            cur = p;
        }
        out
    }

    /// Authorities consulted to resolve `id`, outermost aggregate first,
    /// ending at the AoI whose delegation covers `id`.
    pub fn authority_chain(&self, id: &PersistentId) -> Vec<AoiId> {
        let Some(d) = self.delegations.resolve_authority(id) else {
            return Vec::new();
        };
        let mut chain = self.ancestors(&d.authority);
        chain.reverse();
        chain.push(d.authority.clone());
        chain
    }

    /// Whether `dst` can take delivery inside `aoi` right now.
    pub fn present_at(&self, dst: &PersistentId, aoi: &AoiId) -> bool {
        let Some(node) = self.node_by_pid(dst) else { return false };
        match self.surrogacy.get(&node.name) {
            Some(gw) => self.nodes[gw].memberships.contains(aoi),
            None => node.kind == NodeKind::FullAgent && node.memberships.contains(aoi),
        }
    }

    pub fn surrogate_of(&self, device: &NodeName) -> Option<&NodeName> {
        self.surrogacy.get(device)
    }

    pub(crate) fn bind_surrogate(&mut self, device: &NodeName, gateway: &NodeName) {
        self.surrogacy.insert(device.clone(), gateway.clone());
    }

    pub fn release_surrogate(&mut self, device: &NodeName) -> Option<NodeName> {
        self.surrogacy.remove(device)
    }

    /// Registers or relocates a constrained device's record so that it
    /// points at `gateway`'s AoI and locator.
    pub(crate) fn register_via(&mut self, device: &NodeName, gateway: &NodeName) -> Result<IdentifierRecord, AoiError> {
        let aoi = self.node(gateway)?.primary_aoi.clone().ok_or_else(|| AoiError::Unidentified(gateway.clone()))?;
        let gw_pid = self.pid_of(gateway)?.clone();
        if self.node(device)?.id.is_none() {
            let shard = self.dpin.shard(&aoi).ok_or_else(|| AoiError::NoSuchAoI(aoi.clone()))?;
            let ns = match shard.mode() {
                ShardMode::Connected => self.aois[&aoi].prefix.clone(),
                ShardMode::Isolated => shard.isolated_prefix(),
            };
            let pid = ns.mint(seed_from(&[&self.seed.to_be_bytes()[..], device.as_str().as_bytes()]));
            let rec = IdentifierRecord::new(pid.clone(), EntityKind::Device, aoi.clone(), vec![format!("via:{gw_pid}")])?;
            let rec = sign_record(rec, self.signers[device].as_ref());
            self.dpin.register(&aoi, rec.clone(), &self.keys, &self.graph)?;
            self.node_mut(device)?.id = Some(pid.clone());
            self.by_pid.insert(pid, device.clone());
            return Ok(rec);
        }
        let pid = self.pid_of(device)?.clone();
        Ok(self.dpin.update_location(
            &pid,
            aoi,
            Some(vec![format!("via:{gw_pid}")]),
            self.signers[device].as_ref(),
            &self.keys,
            &self.graph,
        )?)
    }

    /// Removes (`up == false`) or restores a neighbor edge from the
    /// active graph.
    pub fn set_edge(&mut self, a: &AoiId, b: &AoiId, up: bool) -> Result<(), AoiError> {
        if !self.aoi(a)?.neighbors.contains(b) {
            return Err(AoiError::NoSuchEdge(a.clone(), b.clone()));
        }
        if up {
            self.cut.remove(&edge(a, b));
        } else {
            self.cut.insert(edge(a, b));
        }
        self.rebuild_graph();
        Ok(())
    }

    /// AoI whose namespace the given AoI's delegation was carved from;
    /// top-level delegations hang off the anchor.
    pub fn delegation_parent(&self, aoi: &AoiId) -> Option<AoiId> {
        let a = self.aois.get(aoi)?;
        let d = self.delegations.get(&a.prefix)?;
        if d.parent_prefix == *self.delegations.root() {
            self.anchor.clone().filter(|x| x != aoi)
        } else {
            self.delegations.get(&d.parent_prefix).map(|p| p.authority.clone())
        }
    }

    /// Recomputes shard modes from the active graph: a shard is isolated
    /// when it cannot reach its delegation parent or that parent is
    /// itself isolated. Returns (newly isolated, newly reconnected).
    pub fn refresh_isolation(&mut self) -> (Vec<AoiId>, Vec<AoiId>) {
        let mut order: Vec<&AreaOfInfluence> = self.aois.values().collect();
        order.sort_by_key(|a| (a.prefix.depth(), self.anchor.as_ref() != Some(&a.id), a.id.clone()));
        let mut isolated: BTreeMap<AoiId, bool> = BTreeMap::new();
        for a in order {
            let iso = match self.delegation_parent(&a.id) {
                None => false,
                Some(p) => !self.graph.reachable(&a.id, &p) || isolated.get(&p).copied().unwrap_or(false),
            };
            isolated.insert(a.id.clone(), iso);
        }
        let (mut went, mut came) = (Vec::new(), Vec::new());
        for (id, iso) in isolated {
            let shard = self.dpin.shard_mut(&id).expect("every AoI has a shard");
            match (shard.mode(), iso) {
                (ShardMode::Connected, true) => {
                    shard.enter_isolated();
                    went.push(id);
                }
                (ShardMode::Isolated, false) => {
                    shard.reconnect();
                    came.push(id);
                }
                _ => {}
            }
        }
        (went, came)
    }

    /// Runs `judge` over the flagged records and validation queue of
    /// every shard. Isolated shards report nothing.
    pub fn validate_shards(&mut self, judge: &dyn ValidationPolicy) -> Vec<(AoiId, ValidationReport)> {
        let ids: Vec<AoiId> = self.aois.keys().cloned().collect();
        let mut out = Vec::new();
        for id in ids {
            let shard = self.dpin.shard_mut(&id).expect("every AoI has a shard");
            let report = shard.validate_flagged(&self.keys, judge);
            if report != ValidationReport::default() {
                out.push((id, report));
            }
        }
        out
    }

    /// One line per AoI, sorted by id.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, a) in &self.aois {
            let ns: Vec<&str> = a.neighbors.iter().map(PersistentId::as_str).collect();
            let _ = writeln!(
                out,
                "aoi {id} members={} gateways={} neighbors={}",
                a.members.len(),
                a.gateways.len(),
                ns.join(",")
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpin::DpinError;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nm(s: &str) -> NodeName {
        NodeName::new(s).unwrap()
    }

    fn topo() -> AoiTopology {
        AoiTopology::new("mtn".parse().unwrap(), 42)
    }

    fn with_nodes(t: &mut AoiTopology, names: &[&str]) {
        for n in names {
            t.add_node(nm(n), NodeKind::FullAgent).unwrap();
        }
    }

    #[test]
    fn handshake_forms_aoi() {
        let mut t = topo();
        with_nodes(&mut t, &["a", "b"]);
        t.link(&nm("a"), &nm("b")).unwrap();
        let id = t.scan_and_handshake(&nm("a"), &nm("b")).unwrap();
        let aoi = t.aoi(&id).unwrap();
        assert_eq!(aoi.members.len(), 2);
        for n in ["a", "b"] {
            assert_eq!(t.node(&nm(n)).unwrap().primary_aoi.as_ref(), Some(&id));
            let pid = t.pid_of(&nm(n)).unwrap();
            assert!(aoi.prefix.covers(pid));
            let res = t.dpin().resolve(t.graph(), pid, &id).unwrap();
            assert_eq!(res.result.record.home_aoi, id);
        }
        assert_eq!(t.dpin().shard(&id).unwrap().record_count(), 2);
    }

    #[test]
    fn handshake_is_symmetric() {
        let mut t1 = topo();
        let mut t2 = topo();
        for t in [&mut t1, &mut t2] {
            with_nodes(t, &["a", "b"]);
            t.link(&nm("a"), &nm("b")).unwrap();
        }
        let x = t1.scan_and_handshake(&nm("a"), &nm("b")).unwrap();
        let y = t2.scan_and_handshake(&nm("b"), &nm("a")).unwrap();
        assert_eq!(x, y);
        assert_eq!(t1.dpin().dump(), t2.dpin().dump());
    }

    #[test]
    fn handshake_errors() {
        let mut t = topo();
        with_nodes(&mut t, &["a", "b", "c"]);
        assert_eq!(t.scan_and_handshake(&nm("a"), &nm("b")), Err(AoiError::NotInReach(nm("b"))));
        t.link(&nm("a"), &nm("b")).unwrap();
        t.link(&nm("a"), &nm("c")).unwrap();
        t.scan_and_handshake(&nm("a"), &nm("b")).unwrap();
        assert_eq!(t.scan_and_handshake(&nm("c"), &nm("a")), Err(AoiError::AlreadyAssociated(nm("a"))));
    }

    #[test]
    fn three_pairs_three_aois() {
        let mut t = topo();
        let names = ["a", "b", "c", "d", "e", "f"];
        with_nodes(&mut t, &names);
        let pairs = [("a", "b"), ("c", "d"), ("e", "f")];
        let mut ids = BTreeSet::new();
        for (x, y) in pairs {
            t.link(&nm(x), &nm(y)).unwrap();
            ids.insert(t.scan_and_handshake(&nm(x), &nm(y)).unwrap());
        }
        // oracle: connected components of the pairing graph
        let mut comp: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        for (x, y) in pairs {
            let (cx, cy) = (comp[x], comp[y]);
            for v in comp.values_mut() {
                if *v == cy {
                    *v = cx;
                }
            }
        }
        let components: BTreeSet<usize> = comp.values().copied().collect();
        assert_eq!(ids.len(), components.len());
        let prefixes: BTreeSet<_> = t.aois().map(|a| a.prefix.clone()).collect();
        assert_eq!(prefixes.len(), 3);
        let mut seen = BTreeSet::new();
        for a in t.aois() {
            for m in &a.members {
                assert!(seen.insert(m.clone()));
            }
        }
    }

    fn two_aois() -> (AoiTopology, AoiId, AoiId) {
        let mut t = topo();
        with_nodes(&mut t, &["a1", "a2", "b1", "b2"]);
        t.link(&nm("a1"), &nm("a2")).unwrap();
        t.link(&nm("b1"), &nm("b2")).unwrap();
        let a = t.scan_and_handshake(&nm("a1"), &nm("a2")).unwrap();
        let b = t.scan_and_handshake(&nm("b1"), &nm("b2")).unwrap();
        (t, a, b)
    }

    #[test]
    fn join_second_aoi_keeps_primary() {
        let (mut t, a, b) = two_aois();
        t.link(&nm("a1"), &nm("b1")).unwrap();
        t.join_aoi(&nm("a1"), &b).unwrap();
        let n = t.node(&nm("a1")).unwrap();
        assert_eq!(n.memberships.len(), 2);
        assert_eq!(n.primary_aoi.as_ref(), Some(&a));
    }

    #[test]
    fn join_out_of_reach_is_rejected() {
        let (mut t, _, b) = two_aois();
        let before = t.dump();
        assert_eq!(t.join_aoi(&nm("a1"), &b), Err(AoiError::NotInReach(nm("a1"))));
        assert_eq!(t.dump(), before);
        assert_eq!(t.node(&nm("a1")).unwrap().memberships.len(), 1);
        t.link(&nm("a1"), &nm("b1")).unwrap();
        t.join_aoi(&nm("a1"), &b).unwrap();
        assert_eq!(t.join_aoi(&nm("a1"), &b), Err(AoiError::AlreadyMember(nm("a1"))));
    }

    #[test]
    fn twenty_joins() {
        let mut t = topo();
        with_nodes(&mut t, &["f1", "f2"]);
        t.link(&nm("f1"), &nm("f2")).unwrap();
        let id = t.scan_and_handshake(&nm("f1"), &nm("f2")).unwrap();
        for i in 0..20 {
            let n = nm(&format!("j{i}"));
            t.add_node(n.clone(), NodeKind::FullAgent).unwrap();
            t.link(&n, &nm("f1")).unwrap();
            t.join_aoi(&n, &id).unwrap();
        }
        assert_eq!(t.aoi(&id).unwrap().members.len(), 22);
        assert_eq!(t.dpin().shard(&id).unwrap().record_count(), 22);
    }

    #[test]
    fn declare_primary_moves_record() {
        let (mut t, a, b) = two_aois();
        t.link(&nm("a1"), &nm("b1")).unwrap();
        t.join_aoi(&nm("a1"), &b).unwrap();
        let pid = t.pid_of(&nm("a1")).unwrap().clone();
        let v0 = t.dpin().resolve(t.graph(), &pid, &a).unwrap().result.record.version;
        t.declare_primary(&nm("a1"), &b).unwrap();
        let rec = t.dpin().resolve(t.graph(), &pid, &a).unwrap().result.record;
        assert_eq!(rec.home_aoi, b);
        assert_eq!(rec.version, v0 + 1);
        t.declare_primary(&nm("a1"), &b).unwrap();
        assert_eq!(t.dpin().resolve(t.graph(), &pid, &a).unwrap().result.record.version, v0 + 1);
        assert!(matches!(
            t.declare_primary(&nm("a2"), &b),
            Err(AoiError::NotAMember { .. })
        ));
    }

    #[test]
    fn gateways_from_single_cross_pair() {
        let (mut t, a, b) = two_aois();
        t.link(&nm("a2"), &nm("b1")).unwrap();
        t.elect_all();
        let (aa, bb) = (t.aoi(&a).unwrap(), t.aoi(&b).unwrap());
        assert_eq!(aa.gateways, BTreeSet::from([nm("a2")]));
        assert_eq!(bb.gateways, BTreeSet::from([nm("b1")]));
        assert!(aa.neighbors.contains(&b) && bb.neighbors.contains(&a));
        assert_eq!(t.egress(&a, &b), Some(&nm("a2")));
        assert!(t.graph().has_edge(&a, &b));
    }

    #[test]
    fn isolated_aoi_has_no_gateways() {
        let (mut t, a, _) = two_aois();
        t.elect_all();
        assert!(t.aoi(&a).unwrap().gateways.is_empty());
        assert!(t.aoi(&a).unwrap().neighbors.is_empty());
        assert_eq!(t.coordinator(&a), Some(&nm("a1")));
    }

    #[test]
    fn random_geometric_neighbors_match_brute_force() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = AoiTopology::new("mtn".parse().unwrap(), seed);
            // five clusters of three nodes scattered on the unit square
            let mut pos = BTreeMap::new();
            let mut clusters = Vec::new();
            for c in 0..5 {
                let (cx, cy): (f64, f64) = (rng.random(), rng.random());
                let mut names = Vec::new();
                for k in 0..3 {
                    let n = nm(&format!("c{c}n{k}"));
                    let kind = if rng.random_bool(0.8) { NodeKind::FullAgent } else { NodeKind::Constrained };
                    t.add_node(n.clone(), kind).unwrap();
                    pos.insert(n.clone(), (cx + rng.random::<f64>() * 0.1, cy + rng.random::<f64>() * 0.1));
                    names.push(n);
                }
                clusters.push(names);
            }
            let names: Vec<NodeName> = pos.keys().cloned().collect();
            for (i, x) in names.iter().enumerate() {
                for y in &names[i + 1..] {
                    let (p, q) = (pos[x], pos[y]);
                    let same = x.as_str()[..2] == y.as_str()[..2];
                    if same || ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() < 0.3 {
                        t.link(x, y).unwrap();
                    }
                }
            }
            let mut ids = Vec::new();
            for c in &clusters {
                let id = t.scan_and_handshake(&c[0], &c[1]).unwrap();
                t.join_aoi(&c[2], &id).unwrap();
                ids.push(id);
            }
            t.elect_all();
            for (i, x) in ids.iter().enumerate() {
                for (j, y) in ids.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let brute = clusters[i].iter().any(|m| {
                        clusters[j].iter().any(|n| {
                            let full = t.node(m).unwrap().kind == NodeKind::FullAgent
                                || t.node(n).unwrap().kind == NodeKind::FullAgent;
                            full && t.node(m).unwrap().reach.contains(n)
                        })
                    });
                    assert_eq!(t.aoi(x).unwrap().neighbors.contains(y), brute, "seed {seed}");
                }
            }
        }
    }

    fn chain(n: usize) -> (AoiTopology, Vec<AoiId>) {
        let mut t = topo();
        let mut ids = Vec::new();
        for i in 0..n {
            let (x, y) = (nm(&format!("n{i}a")), nm(&format!("n{i}b")));
            with_nodes(&mut t, &[x.as_str(), y.as_str()]);
            t.link(&x, &y).unwrap();
            if i > 0 {
                t.link(&x, &nm(&format!("n{}b", i - 1))).unwrap();
            }
            ids.push(t.scan_and_handshake(&x, &y).unwrap());
        }
        t.elect_all();
        (t, ids)
    }

    #[test]
    fn aggregate_gives_local_resolution() {
        let (mut t, ids) = chain(2);
        let (p, c) = (&ids[0], &ids[1]);
        let child_node = t.pid_of(&nm("n1a")).unwrap().clone();
        assert_eq!(t.dpin().resolve(t.graph(), &child_node, p).unwrap().remote_queries, 1);
        t.aggregate(p, c).unwrap();
        assert_eq!(t.dpin().resolve(t.graph(), &child_node, p).unwrap().remote_queries, 0);
        assert!(matches!(t.aggregate(c, p), Err(AoiError::CycleDetected { .. })));
    }

    #[test]
    fn aggregate_requires_neighbors() {
        let (mut t, ids) = chain(3);
        assert!(matches!(t.aggregate(&ids[0], &ids[2]), Err(AoiError::NotNeighbors(..))));
    }

    #[test]
    fn aggregation_chain_depth() {
        let (mut t, ids) = chain(3);
        t.aggregate(&ids[0], &ids[1]).unwrap();
        t.aggregate(&ids[1], &ids[2]).unwrap();
        let leaf = t.pid_of(&nm("n2a")).unwrap().clone();
        let chain = t.authority_chain(&leaf);
        assert_eq!(chain, ids);
        // the covering authority is the longest-prefix match over all delegations
        let brute = t
            .delegations()
            .iter()
            .filter(|d| d.delegated_prefix.covers(&leaf))
            .max_by_key(|d| d.delegated_prefix.depth())
            .unwrap();
        assert_eq!(chain.last(), Some(&brute.authority));
        assert_eq!(t.authority_chain(&t.pid_of(&nm("n0a")).unwrap().clone()).len(), 1);
        // a resolve from the top is local for every level
        assert_eq!(t.dpin().resolve(t.graph(), &leaf, &ids[0]).unwrap().remote_queries, 0);
    }

    #[test]
    fn partition_isolates_far_side() {
        let (mut t, ids) = chain(3);
        assert_eq!(t.anchor(), Some(&ids[0]));
        t.set_edge(&ids[0], &ids[1], false).unwrap();
        let (went, came) = t.refresh_isolation();
        assert_eq!(went, {
            let mut v = vec![ids[1].clone(), ids[2].clone()];
            v.sort();
            v
        });
        assert!(came.is_empty());
        let far = t.pid_of(&nm("n2a")).unwrap().clone();
        let near = t.pid_of(&nm("n0a")).unwrap().clone();
        // the far island still resolves among itself
        assert!(t.dpin().resolve(t.graph(), &far, &ids[1]).is_ok());
        assert_eq!(
            t.dpin().resolve(t.graph(), &near, &ids[1]),
            Err(DpinError::Unreachable(near.clone()))
        );
        t.set_edge(&ids[0], &ids[1], true).unwrap();
        let (_, came) = t.refresh_isolation();
        assert_eq!(came.len(), 2);
        assert!(matches!(t.set_edge(&ids[0], &ids[2], false), Err(AoiError::NoSuchEdge(..))));
    }

    #[test]
    fn dump_lines_sorted() {
        let (t, _) = chain(3);
        let d = t.dump();
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), 3);
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
        assert!(lines.iter().all(|l| l.starts_with("aoi mtn/") && l.contains(" members=2 ")));
    }

    #[test]
    fn leaving_primary_promotes_smallest() {
        let (mut t, a, b) = two_aois();
        t.link(&nm("a1"), &nm("b1")).unwrap();
        t.join_aoi(&nm("a1"), &b).unwrap();
        t.leave(&nm("a1"), &a, true).unwrap();
        assert_eq!(t.node(&nm("a1")).unwrap().primary_aoi.as_ref(), Some(&b));
        let pid = t.pid_of(&nm("a1")).unwrap().clone();
        assert_eq!(t.dpin().resolve(t.graph(), &pid, &a).unwrap().result.record.home_aoi, b);
    }
}
