//! PCT gateways: next-AoI selection between areas, surrogate association
//! for constrained devices, and the legacy-name bridge.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::aoi::{AoiError, AoiId, AoiTopology, NodeKind, NodeName};
use crate::dpin::{Dpin, DpinError, ResolutionResult};
use crate::graph::AoiGraph;
use crate::identity::{PersistentId, Signer};
use crate::pods::Pod;
use crate::routing::{PodQueue, PropagationPolicy, RouteTable, SeenSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("credentials for `{0}` do not verify")]
    AuthFailed(NodeName),
    #[error("`{0}` already has a surrogate")]
    AlreadyBound(NodeName),
    #[error("`{0}` is not a constrained device")]
    NotConstrained(NodeName),
    #[error("unknown legacy name `{0}`")]
    UnknownName(String),
    #[error("invalid legacy name `{0}`")]
    InvalidName(String),
    #[error(transparent)]
    Topology(#[from] AoiError),
    #[error(transparent)]
    Resolve(#[from] DpinError),
}

/// Where a pod goes next from a given AoI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextHop {
    /// Toward `dest_aoi`; `ranked` lists admissible neighbors best-first.
    Forward { dest_aoi: AoiId, ranked: Vec<AoiId> },
    Deliver,
    /// Destination unresolvable or its home unreachable: keep in custody.
    Store,
}

impl NextHop {
    pub fn next(&self) -> Option<&AoiId> {
        match self {
            NextHop::Forward { ranked, .. } => ranked.first(),
            _ => None,
        }
    }
}

/// Routing decision at `here`. Candidates are the neighbors strictly
/// closer (in AoI hops) to the destination's home; with `learning` they
/// are ordered by route score, otherwise by id.
pub fn next_aoi<S: Scalar>(
    here: &AoiId,
    routes: &RouteTable<S>,
    graph: &AoiGraph,
    dpin: &Dpin,
    pod: &Pod,
    learning: bool,
) -> NextHop {
    let Ok(res) = dpin.resolve(graph, &pod.dst, here) else {
        return NextHop::Store;
    };
    let home = res.result.record.home_aoi;
    if home == *here {
        return NextHop::Deliver;
    }
    let dist = graph.distances_from(&home);
    let Some(&mine) = dist.get(here) else {
        return NextHop::Store;
    };
    let closer: Vec<AoiId> = graph
        .neighbors(here)
        .filter(|n| dist.get(*n).is_some_and(|d| *d + 1 == mine))
        .cloned()
        .collect();
    let ranked = if learning { routes.rank(&home, closer) } else { closer };
    NextHop::Forward { dest_aoi: home, ranked }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurrogateBinding {
    pub device: PersistentId,
    pub gateway: PersistentId,
    pub credentials: Vec<u8>,
}

/// Proof a device presents to a prospective surrogate: a tag under the
/// device key over a challenge naming the gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credentials {
    pub key_id: PersistentId,
    pub proof: Vec<u8>,
}

fn challenge(gateway: &PersistentId, device: &NodeName) -> Vec<u8> {
    format!("odap {gateway} {device}").into_bytes()
}

impl Credentials {
    pub fn present(signer: &dyn Signer, gateway: &PersistentId, device: &NodeName) -> Self {
        Self {
            key_id: signer.key_id().clone(),
            proof: signer.tag(&challenge(gateway, device)),
        }
    }
}

/// Per-gateway forwarding state.
#[derive(Debug, Clone)]
pub struct GatewayState<S> {
    pub node: NodeName,
    queues: BTreeMap<(AoiId, AoiId), PodQueue>,
    capacity: usize,
    bandwidth: u32,
    pub route_table: RouteTable<S>,
    pub surrogates: BTreeMap<PersistentId, SurrogateBinding>,
    probes: u64,
    seen: SeenSet,
}

/// Targets picked for one pod at one AoI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub targets: Vec<AoiId>,
    /// Set when the runner-up route was taken as an exploration probe.
    pub probe: Option<AoiId>,
}

impl<S: Scalar> GatewayState<S> {
    pub fn new(node: NodeName, capacity: usize, bandwidth: u32, seen_capacity: usize) -> Self {
        Self {
            node,
            queues: BTreeMap::new(),
            capacity,
            bandwidth,
            route_table: RouteTable::new(),
            surrogates: BTreeMap::new(),
            probes: 0,
            seen: SeenSet::new(seen_capacity),
        }
    }

    pub fn bandwidth(&self) -> u32 {
        self.bandwidth
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn queue(&self, from: &AoiId, to: &AoiId) -> Option<&PodQueue> {
        self.queues.get(&(from.clone(), to.clone()))
    }

    pub fn queues(&self) -> impl Iterator<Item = (&(AoiId, AoiId), &PodQueue)> {
        self.queues.iter()
    }

    pub fn queued(&self) -> usize {
        self.queues.values().map(PodQueue::len).sum()
    }

    pub fn next_aoi(&self, here: &AoiId, graph: &AoiGraph, dpin: &Dpin, pod: &Pod, learning: bool) -> NextHop {
        next_aoi(here, &self.route_table, graph, dpin, pod, learning)
    }

    /// Picks up to `replication_factor` targets from `ranked`. With
    /// learning on and a single target, every `probe_every`-th pod takes
    /// the runner-up instead.
    pub fn select(&mut self, ranked: &[AoiId], policy: &PropagationPolicy<S>) -> Selection {
        let k = policy.replication_factor.get();
        if k == 1 && policy.learning && ranked.len() >= 2 && policy.probe_every > 0 {
            self.probes += 1;
            if self.probes.is_multiple_of(u64::from(policy.probe_every)) {
                return Selection {
                    targets: vec![ranked[1].clone()],
                    probe: Some(ranked[1].clone()),
                };
            }
        }
        Selection {
            targets: ranked.iter().take(k).cloned().collect(),
            probe: None,
        }
    }

    /// Queues `pod` on the `from -> to` link; returns a pod dropped for
    /// capacity, if any.
    pub fn enqueue(&mut self, from: &AoiId, to: &AoiId, pod: Pod) -> Option<Pod> {
        let cap = self.capacity;
        self.queues
            .entry((from.clone(), to.clone()))
            .or_insert_with(|| PodQueue::new(cap))
            .enqueue(pod)
    }

    /// Up to `bandwidth` pods leave each queue, highest priority first.
    pub fn dispatch_tick(&mut self) -> Vec<((AoiId, AoiId), Pod)> {
        let mut out = Vec::new();
        for (pair, q) in &mut self.queues {
            for _ in 0..self.bandwidth {
                match q.pop() {
                    Some(p) => out.push((pair.clone(), p)),
                    None => break,
                }
            }
        }
        out
    }

    /// Empties the queue for one link, e.g. when it goes down.
    pub fn drain_link(&mut self, from: &AoiId, to: &AoiId) -> Vec<Pod> {
        self.queues
            .remove(&(from.clone(), to.clone()))
            .map(|mut q| q.drain())
            .unwrap_or_default()
    }

    pub fn links(&self) -> Vec<(AoiId, AoiId)> {
        self.queues.keys().cloned().collect()
    }

    pub fn is_duplicate(&mut self, pod: &Pod) -> bool {
        self.seen.is_duplicate(pod)
    }
}

/// Authenticates a constrained device, binds it to `gw` and registers its
/// record with the gateway as locator.
pub fn odap_associate<S: Scalar>(
    gw: &mut GatewayState<S>,
    topo: &mut AoiTopology,
    device: &NodeName,
    credentials: &Credentials,
) -> Result<SurrogateBinding, GatewayError> {
    let node = topo.node(device)?;
    if node.kind != NodeKind::Constrained {
        return Err(GatewayError::NotConstrained(device.clone()));
    }
    if !node.reach.contains(&gw.node) {
        return Err(AoiError::NotInReach(device.clone()).into());
    }
    let gw_pid = topo.pid_of(&gw.node)?.clone();
    let authentic = credentials.key_id == node.key_id
        && topo
            .keys()
            .get(&credentials.key_id)
            .is_some_and(|k| k.check_tag(&challenge(&gw_pid, device), &credentials.proof));
    if !authentic {
        return Err(GatewayError::AuthFailed(device.clone()));
    }
    if topo.surrogate_of(device).is_some() {
        return Err(GatewayError::AlreadyBound(device.clone()));
    }
    topo.bind_surrogate(device, &gw.node);
    let rec = match topo.register_via(device, &gw.node) {
        Ok(r) => r,
        Err(e) => {
            topo.release_surrogate(device);
            return Err(e.into());
        }
    };
    let binding = SurrogateBinding {
        device: rec.id.clone(),
        gateway: gw_pid,
        credentials: credentials.proof.clone(),
    };
    gw.surrogates.insert(rec.id, binding.clone());
    Ok(binding)
}

/// Ends a surrogate binding so the device may associate elsewhere.
pub fn release<S: Scalar>(gw: &mut GatewayState<S>, topo: &mut AoiTopology, device: &NodeName) -> bool {
    let released = topo.release_surrogate(device).is_some();
    if let Ok(pid) = topo.pid_of(device) {
        gw.surrogates.remove(pid);
    }
    released
}

/// Host-name-like dotted label string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LegacyName(String);

impl LegacyName {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for LegacyName {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let ok = !s.is_empty()
            && s.split('.').all(|l| {
                !l.is_empty() && l.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
            });
        if ok {
            Ok(Self(s.to_ascii_lowercase()))
        } else {
            Err(GatewayError::InvalidName(s.to_string()))
        }
    }
}

impl fmt::Display for LegacyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Resolves a legacy name by mapping it through `table` and then through
/// the D-PIN.
pub fn bridge_legacy(
    table: &BTreeMap<LegacyName, PersistentId>,
    name: &LegacyName,
    dpin: &Dpin,
    graph: &AoiGraph,
    origin: &AoiId,
) -> Result<ResolutionResult, GatewayError> {
    let id = table
        .get(name)
        .ok_or_else(|| GatewayError::UnknownName(name.to_string()))?;
    Ok(dpin.resolve(graph, id, origin)?.result)
}
