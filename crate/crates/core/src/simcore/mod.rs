//! Deterministic discrete-event simulation of a transient network.
//!
//! Virtual time is counted in ticks; one tick is one dispatch round at
//! every gateway. Events at equal times run in scheduling order. All
//! randomness (generated topologies, payload bytes, link-loss scripts) is
//! derived from the scenario seed before or outside the loop.

pub mod scenario;
pub mod trace;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use scenario::{
    random_connected, Action, AoiSpec, GeneratorSpec, InvalidScenario, LossSpec, NodeSpec, PolicySpec, Scenario,
    ScriptedEvent, TopologySpec,
};
pub use trace::{MetricsSummary, Trace, TraceLine, METRICS_HEADER};

use crate::aoi::{AoiError, AoiId, AoiTopology, NodeName};
use crate::dpin::{DefaultValidation, DpinError};
use crate::gateway::{self, Credentials, GatewayState, NextHop};
use crate::identity::{seed_from, PersistentId};
use crate::pods::{reassemble, shard, Pod, PodManifest, Priority, TrafficClass};
use crate::routing::{report_outcome, CustodyStore, Outcome, PropagationPolicy};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(#[from] InvalidScenario),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Index into the scenario's event script.
    Scripted(usize),
    /// Continuation of a `Load` event.
    LoadStep { event: usize, step: u64 },
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimEvent {
    pub time: u64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Running counters. Pod counts are per copy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub created: u64,
    pub delivered: u64,
    pub suppressed: u64,
    pub dropped_control: u64,
    pub dropped_payload: u64,
    pub link_losses: u64,
    pub forwards: u64,
    pub probes: u64,
    pub stores: u64,
    pub flushes: u64,
    pub evictions: u64,
    pub hop_total: u64,
    /// Control pods dropped from a queue that still offered a Payload pod.
    pub control_last_violations: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: MetricsSummary,
    pub stats: Stats,
    pub topology: String,
}

#[derive(Debug, Clone)]
struct LossScript {
    outcomes: Vec<bool>,
    cursor: usize,
}

impl LossScript {
    fn next(&mut self) -> bool {
        let ok = self.outcomes[self.cursor % self.outcomes.len()];
        self.cursor += 1;
        ok
    }
}

#[derive(Debug, Clone)]
struct Message {
    manifest: PodManifest,
    got: BTreeMap<u32, Pod>,
}

fn edge(a: &AoiId, b: &AoiId) -> (AoiId, AoiId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

fn copy_tag(p: &Pod) -> String {
    if p.replica == 0 {
        p.id.to_string()
    } else {
        format!("{}#{}", p.id, p.replica)
    }
}

fn event_error(index: usize, message: impl ToString) -> SimError {
    SimError::InvalidScenario(InvalidScenario {
        location: format!("events[{index}]"),
        message: message.to_string(),
    })
}

fn formation_error(location: impl Into<String>) -> impl FnOnce(AoiError) -> SimError {
    let location = location.into();
    move |e| {
        SimError::InvalidScenario(InvalidScenario {
            location,
            message: e.to_string(),
        })
    }
}

fn gateway_entry<'a, S: Scalar>(
    gateways: &'a mut BTreeMap<NodeName, GatewayState<S>>,
    sc: &Scenario,
    name: &NodeName,
) -> &'a mut GatewayState<S> {
    gateways
        .entry(name.clone())
        .or_insert_with(|| GatewayState::new(name.clone(), sc.queue_capacity, sc.bandwidth, sc.seen_capacity))
}

pub struct Simulation<S> {
    scenario: Scenario,
    topo: AoiTopology,
    aliases: BTreeMap<String, AoiId>,
    policy: PropagationPolicy<S>,
    gateways: BTreeMap<NodeName, GatewayState<S>>,
    custody: BTreeMap<AoiId, CustodyStore>,
    losses: BTreeMap<(AoiId, AoiId), LossScript>,
    agenda: BinaryHeap<Reverse<SimEvent>>,
    next_seq: u64,
    now: u64,
    trace: Trace,
    stats: Stats,
    messages: BTreeMap<PersistentId, Message>,
    intents: HashMap<(PersistentId, u16), AoiId>,
    replicas: HashMap<PersistentId, u16>,
    delivered: HashSet<PersistentId>,
    injected: u64,
    violations: Vec<String>,
}

impl<S: Scalar> Simulation<S> {
    pub fn new(scenario: Scenario, trace_enabled: bool) -> Result<Self, SimError> {
        scenario.validate()?;
        let mut policy = PropagationPolicy::new(
            scenario.policy.replication,
            scenario.policy.learning,
            S::lit(scenario.policy.alpha),
        )
        .map_err(|e| {
            SimError::InvalidScenario(InvalidScenario {
                location: "policy.alpha".into(),
                message: e.to_string(),
            })
        })?;
        policy.probe_every = scenario.policy.probe_every;
        let mut topo = AoiTopology::new(scenario.root.clone(), scenario.seed);
        let mut trace = Trace::new(trace_enabled);
        let (aois, bridges) = scenario.formation();
        let mut aliases = BTreeMap::new();
        let name = |s: &str| NodeName::new(s).expect("validated node name");
        for (i, a) in aois.iter().enumerate() {
            let loc = format!("topology.aois[{i}]");
            let names: Vec<NodeName> = a.nodes.iter().map(|n| name(&n.name)).collect();
            for (n, spec) in names.iter().zip(&a.nodes) {
                topo.add_node(n.clone(), spec.kind).map_err(formation_error(&loc))?;
            }
            for (x, nx) in names.iter().enumerate() {
                for ny in &names[x + 1..] {
                    topo.link(nx, ny).map_err(formation_error(&loc))?;
                }
            }
            let id = topo
                .scan_and_handshake(&names[0], &names[1])
                .map_err(formation_error(&loc))?;
            for n in &names[2..] {
                topo.join_aoi(n, &id).map_err(formation_error(&loc))?;
            }
            trace.emit(0, || format!("aoi {} {id}", a.name));
            aliases.insert(a.name.clone(), id);
        }
        for (i, n) in scenario.nodes.iter().enumerate() {
            topo.add_node(name(&n.name), n.kind)
                .map_err(formation_error(format!("nodes[{i}]")))?;
        }
        for (i, n) in scenario.nodes.iter().enumerate() {
            for r in &n.reach {
                topo.link(&name(&n.name), &name(r))
                    .map_err(formation_error(format!("nodes[{i}].reach")))?;
            }
        }
        for (i, (a, b)) in bridges.iter().enumerate() {
            topo.link(&name(a), &name(b))
                .map_err(formation_error(format!("topology.bridges[{i}]")))?;
        }
        topo.elect_all();
        for (i, (p, c)) in scenario.topology.aggregates.iter().enumerate() {
            topo.aggregate(&aliases[p], &aliases[c])
                .map_err(formation_error(format!("topology.aggregates[{i}]")))?;
        }
        let transmissions = ((scenario.duration + 1) * u64::from(scenario.bandwidth) * 2).max(1024);
        let mut losses = BTreeMap::new();
        for (i, l) in scenario.losses.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[
                &scenario.seed.to_be_bytes()[..],
                b"loss",
                &(i as u64).to_be_bytes(),
            ]));
            let outcomes = (0..transmissions).map(|_| rng.random_bool(l.success)).collect();
            losses.insert(edge(&aliases[&l.a], &aliases[&l.b]), LossScript { outcomes, cursor: 0 });
        }
        let mut sim = Self {
            topo,
            aliases,
            policy,
            gateways: BTreeMap::new(),
            custody: BTreeMap::new(),
            losses,
            agenda: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            trace,
            stats: Stats::default(),
            messages: BTreeMap::new(),
            intents: HashMap::new(),
            replicas: HashMap::new(),
            delivered: HashSet::new(),
            injected: 0,
            violations: Vec::new(),
            scenario,
        };
        for i in 0..sim.scenario.events.len() {
            sim.schedule(sim.scenario.events[i].at, EventKind::Scripted(i));
        }
        sim.schedule(0, EventKind::Tick);
        let (seed, n_aoi, n_node) = (sim.scenario.seed, sim.topo.aois().count(), sim.topo.nodes().count());
        sim.trace
            .emit(0, || format!("start seed={seed} aois={n_aoi} nodes={n_node}"));
        Ok(sim)
    }

    fn schedule(&mut self, time: u64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.agenda.push(Reverse(SimEvent { time, seq, kind }));
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn topology(&self) -> &AoiTopology {
        &self.topo
    }

    pub fn aoi(&self, alias: &str) -> Option<&AoiId> {
        self.aliases.get(alias)
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn gateway(&self, node: &str) -> Option<&GatewayState<S>> {
        self.gateways.get(&NodeName::new(node).ok()?)
    }

    pub fn in_custody(&self) -> usize {
        self.custody.values().map(CustodyStore::len).sum()
    }

    pub fn in_queues(&self) -> usize {
        self.gateways.values().map(GatewayState::queued).sum()
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.agenda.peek().map(|Reverse(e)| e.time)
    }

    /// Processes the next event. Returns false once the agenda is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(Reverse(ev)) = self.agenda.pop() else {
            return Ok(false);
        };
        debug_assert!(ev.time >= self.now, "clock went backwards");
        self.now = ev.time;
        match ev.kind {
            EventKind::Tick => {
                self.tick();
                if ev.time < self.scenario.duration {
                    self.schedule(ev.time + 1, EventKind::Tick);
                }
            }
            EventKind::Scripted(i) => {
                let action = self.scenario.events[i].action.clone();
                self.apply(i, &action, 0)?;
                self.custody_sweep();
            }
            EventKind::LoadStep { event, step } => {
                let action = self.scenario.events[event].action.clone();
                self.apply(event, &action, step)?;
            }
        }
        Ok(true)
    }

    /// Runs every event with time `<= t`.
    pub fn run_until(&mut self, t: u64) -> Result<(), SimError> {
        while self.peek_time().is_some_and(|next| next <= t) {
            self.step()?;
        }
        Ok(())
    }

    /// Drains the agenda, audits conservation and returns the outputs.
    pub fn finish(mut self) -> Result<RunOutput, SimError> {
        while self.step()? {}
        let st = self.stats;
        let (custody, queued) = (self.in_custody() as u64, self.in_queues() as u64);
        let accounted = st.delivered
            + st.suppressed
            + st.dropped_control
            + st.dropped_payload
            + st.evictions
            + custody
            + queued;
        if accounted != st.created {
            self.violations.push(format!(
                "conservation: created {} != delivered {} + suppressed {} + dropped {} + evicted {} + custody {custody} + queued {queued}",
                st.created,
                st.delivered,
                st.suppressed,
                st.dropped_control + st.dropped_payload,
                st.evictions
            ));
        }
        if st.stores != st.flushes + st.evictions + custody {
            self.violations.push(format!(
                "custody: stores {} != flushes {} + evictions {} + held {custody}",
                st.stores, st.flushes, st.evictions
            ));
        }
        if !self.violations.is_empty() {
            return Err(SimError::Invariant(self.violations.join("; ")));
        }
        let metrics = MetricsSummary {
            delivered: st.delivered,
            dropped_control: st.dropped_control,
            dropped_payload: st.dropped_payload,
            mean_hops: if st.delivered == 0 {
                0.0
            } else {
                st.hop_total as f64 / st.delivered as f64
            },
            stores: st.stores,
            flushes: st.flushes,
            evictions: st.evictions,
        };
        let end = self.scenario.duration.max(self.now);
        self.trace.emit(end, || {
            format!(
                "end delivered={} dropped={} custody={custody} queued={queued}",
                st.delivered,
                st.dropped_control + st.dropped_payload
            )
        });
        Ok(RunOutput {
            trace: self.trace,
            metrics,
            stats: st,
            topology: self.topo.dump(),
        })
    }

    fn alias(&self, a: &str) -> AoiId {
        self.aliases[a].clone()
    }

    fn apply(&mut self, index: usize, action: &Action, step: u64) -> Result<(), SimError> {
        let nm = |s: &str| NodeName::new(s).expect("validated node name");
        let now = self.now;
        match action {
            Action::Inject {
                src,
                dst,
                bytes,
                priority,
            } => self.inject(index, &nm(src), &nm(dst), *bytes, *priority),
            Action::Load {
                src,
                dst,
                per_tick,
                ticks,
                bytes,
            } => {
                for j in 0..u64::from(*per_tick) {
                    let rank = ((step * u64::from(*per_tick) + j) % 16) as u8;
                    self.inject(index, &nm(src), &nm(dst), *bytes, Priority::from_rank(rank))?;
                }
                if step + 1 < *ticks {
                    self.schedule(now + 1, EventKind::LoadStep { event: index, step: step + 1 });
                }
                Ok(())
            }
            Action::Move { node, to, update_dpin } => {
                let to = self.alias(to);
                self.apply_move(&nm(node), &to, *update_dpin)
                    .map_err(|e| event_error(index, e))
            }
            Action::LinkDown { a, b } => {
                let (a, b) = (self.alias(a), self.alias(b));
                self.apply_partition(&a, &b, false).map_err(|e| event_error(index, e))
            }
            Action::LinkUp { a, b } => {
                let (a, b) = (self.alias(a), self.alias(b));
                self.apply_partition(&a, &b, true).map_err(|e| event_error(index, e))
            }
            Action::Merge { a, b } => {
                let (a, b) = (self.alias(a), self.alias(b));
                self.merge_pairs([edge(&a, &b)].into_iter().collect())
                    .map_err(|e| event_error(index, e))
            }
            Action::Resolve { from, node } => {
                let from = self.alias(from);
                self.resolve(&from, &nm(node));
                Ok(())
            }
            Action::Associate { device, gateway } => {
                self.associate(&nm(device), &nm(gateway));
                Ok(())
            }
            Action::Release { device } => {
                let device = nm(device);
                if let Some(gw) = self.topo.surrogate_of(&device).cloned() {
                    let state = gateway_entry(&mut self.gateways, &self.scenario, &gw);
                    gateway::release(state, &mut self.topo, &device);
                    self.trace.emit(now, || format!("release {device} from={gw}"));
                }
                Ok(())
            }
            Action::Custom(label) => {
                self.trace.emit(now, || format!("custom {label}"));
                Ok(())
            }
        }
    }

    fn pid(&self, name: &NodeName) -> String {
        self.topo
            .pid_of(name)
            .map(ToString::to_string)
            .unwrap_or_else(|_| name.to_string())
    }

    fn inject(
        &mut self,
        index: usize,
        src: &NodeName,
        dst: &NodeName,
        bytes: usize,
        priority: Priority,
    ) -> Result<(), SimError> {
        let s = self.topo.node(src).map_err(|e| event_error(index, e))?;
        let (Some(src_pid), Some(at)) = (s.id.clone(), s.primary_aoi.clone()) else {
            return Err(event_error(index, format!("source `{src}` is not associated")));
        };
        let dst_pid = self
            .topo
            .pid_of(dst)
            .map_err(|_| event_error(index, format!("destination `{dst}` has no identifier yet")))?
            .clone();
        let n = self.injected;
        self.injected += 1;
        let seed = self.scenario.seed.to_be_bytes();
        let parent = src_pid
            .prefix()
            .mint(seed_from(&[&seed[..], b"message", &n.to_be_bytes()]));
        let mut payload = vec![0u8; bytes];
        ChaCha8Rng::seed_from_u64(seed_from(&[&seed[..], b"payload", &n.to_be_bytes()])).fill_bytes(&mut payload);
        let (manifest, pods) = shard(&parent, payload, self.scenario.pod_size, priority, &src_pid, &dst_pid);
        let now = self.now;
        self.trace.emit(now, || manifest.trace_line());
        for p in &pods {
            self.trace.emit(now, || p.trace_line());
        }
        self.stats.created += pods.len() as u64;
        self.messages.insert(
            parent,
            Message {
                manifest,
                got: BTreeMap::new(),
            },
        );
        for p in pods {
            self.arrive(p, &at);
        }
        Ok(())
    }

    /// A pod copy is at `at`: deliver it, store it, or queue it onward.
    fn arrive(&mut self, pod: Pod, at: &AoiId) {
        let now = self.now;
        let Some(coord) = self.topo.coordinator(at).cloned() else {
            self.drop_pod(pod, at.to_string(), "link");
            return;
        };
        let gw = gateway_entry(&mut self.gateways, &self.scenario, &coord);
        if gw.is_duplicate(&pod) {
            self.stats.suppressed += 1;
            self.trace.emit(now, || format!("dup {} at={at}", copy_tag(&pod)));
            return;
        }
        let decision = gw.next_aoi(at, self.topo.graph(), self.topo.dpin(), &pod, self.policy.learning);
        match decision {
            NextHop::Deliver if self.topo.present_at(&pod.dst, at) => self.deliver(pod, at),
            NextHop::Deliver | NextHop::Store => self.store(pod, at),
            NextHop::Forward { ranked, .. } if ranked.is_empty() => self.store(pod, at),
            NextHop::Forward { dest_aoi, ranked } => {
                let sel = gw.select(&ranked, &self.policy);
                if let Some(alt) = &sel.probe {
                    self.stats.probes += 1;
                    self.trace.emit(now, || format!("probe {} alt={alt}", copy_tag(&pod)));
                }
                let mut pod = Some(pod);
                for (k, target) in sel.targets.iter().enumerate() {
                    let last = k + 1 == sel.targets.len();
                    let copy = if last {
                        pod.take().expect("one pod per target")
                    } else {
                        let original = pod.as_ref().expect("kept until the last target");
                        let r = self.replicas.entry(original.id.clone()).or_insert(0);
                        *r += 1;
                        self.stats.created += 1;
                        Pod {
                            replica: *r,
                            ..original.clone()
                        }
                    };
                    self.enqueue(copy, at, target, dest_aoi.clone());
                }
            }
        }
    }

    fn enqueue(&mut self, pod: Pod, from: &AoiId, to: &AoiId, dest: AoiId) {
        let Some(egress) = self
            .topo
            .egress(from, to)
            .or_else(|| self.topo.coordinator(from))
            .cloned()
        else {
            self.drop_pod(pod, from.to_string(), "link");
            return;
        };
        let gw_pid = self.pid(&egress);
        let now = self.now;
        self.trace.emit(now, || {
            format!("enq {} pri={} at={gw_pid} to={to}", copy_tag(&pod), pod.priority)
        });
        let gw = gateway_entry(&mut self.gateways, &self.scenario, &egress);
        let payload_present = pod.priority.class() == TrafficClass::Payload
            || gw
                .queue(from, to)
                .is_some_and(|q| q.iter().any(|p| p.priority.class() == TrafficClass::Payload));
        self.intents.insert((pod.id.clone(), pod.replica), dest);
        if let Some(dropped) = gw.enqueue(from, to, pod) {
            if dropped.priority.class() == TrafficClass::Control && payload_present {
                self.stats.control_last_violations += 1;
            }
            self.intents.remove(&(dropped.id.clone(), dropped.replica));
            self.drop_pod(dropped, gw_pid, "capacity");
        }
    }

    fn drop_pod(&mut self, pod: Pod, at: String, reason: &str) {
        match pod.priority.class() {
            TrafficClass::Control => self.stats.dropped_control += 1,
            TrafficClass::Payload => self.stats.dropped_payload += 1,
        }
        let now = self.now;
        self.trace.emit(now, || {
            format!("drop {} pri={} at={at} reason={reason}", copy_tag(&pod), pod.priority)
        });
    }

    fn deliver(&mut self, pod: Pod, at: &AoiId) {
        let now = self.now;
        if !self.delivered.insert(pod.id.clone()) {
            self.stats.suppressed += 1;
            self.trace.emit(now, || format!("dup {} at={at}", copy_tag(&pod)));
            return;
        }
        self.stats.delivered += 1;
        self.stats.hop_total += pod.hops() as u64;
        self.trace.emit(now, || {
            let path: Vec<&str> = pod.hop_log.iter().map(PersistentId::as_str).collect();
            let path = if path.is_empty() { "-".to_string() } else { path.join(",") };
            format!("deliver {} {at} hops={} path={path}", copy_tag(&pod), pod.hops())
        });
        if let Some(device) = self.topo.node_by_pid(&pod.dst).map(|n| n.name.clone()) {
            if let Some(gw) = self.topo.surrogate_of(&device).cloned() {
                let gw_pid = self.pid(&gw);
                let dst = pod.dst.clone();
                self.trace.emit(now, || format!("relay {gw_pid}→{dst}"));
            }
        }
        let parent = pod.parent.clone();
        let Some(msg) = self.messages.get_mut(&parent) else { return };
        msg.got.insert(pod.index, pod);
        if msg.got.len() == msg.manifest.pod_ids.len() {
            let msg = self.messages.remove(&parent).expect("present");
            match reassemble(&msg.manifest, msg.got.values()) {
                Ok(bytes) => {
                    let n = bytes.len();
                    self.trace.emit(now, || format!("complete {parent} bytes={n}"));
                }
                Err(e) => self.violations.push(format!("reassembly of {parent}: {e}")),
            }
        }
    }

    fn store(&mut self, pod: Pod, at: &AoiId) {
        let Some(coord) = self.topo.coordinator(at).cloned() else {
            self.drop_pod(pod, at.to_string(), "link");
            return;
        };
        let holder = self.topo.pid_of(&coord).expect("coordinators are identified").clone();
        let cap = self.scenario.custody_capacity;
        let now = self.now;
        self.stats.stores += 1;
        self.trace.emit(now, || format!("store {} {holder}", copy_tag(&pod)));
        let store = self
            .custody
            .entry(at.clone())
            .or_insert_with(|| CustodyStore::new(holder, cap));
        if let Some(evicted) = store.store(pod, now) {
            let h = store.holder.clone();
            self.stats.evictions += 1;
            self.trace.emit(now, || format!("evict {} at={h}", copy_tag(&evicted)));
        }
    }

    /// Releases custody for every destination that has become routable.
    fn custody_sweep(&mut self) {
        let holders: Vec<AoiId> = self.custody.keys().cloned().collect();
        for at in holders {
            let dsts: Vec<PersistentId> = self.custody[&at].destinations().cloned().collect();
            for dst in dsts {
                let probe = self.custody[&at].held_for(&dst).next().expect("non-empty").clone();
                if !self.routable(&probe, &at) {
                    continue;
                }
                let pods = self.custody.get_mut(&at).expect("present").flush(&dst);
                let n = pods.len();
                self.stats.flushes += n as u64;
                let now = self.now;
                self.trace.emit(now, || format!("flush {dst} n={n}"));
                for p in pods {
                    self.arrive(p, &at);
                }
            }
            if self.custody.get(&at).is_some_and(CustodyStore::is_empty) {
                self.custody.remove(&at);
            }
        }
    }

    fn routable(&self, pod: &Pod, at: &AoiId) -> bool {
        let routes = self
            .topo
            .coordinator(at)
            .and_then(|c| self.gateways.get(c))
            .map(|g| &g.route_table);
        let empty = Default::default();
        let hop = gateway::next_aoi(
            at,
            routes.unwrap_or(&empty),
            self.topo.graph(),
            self.topo.dpin(),
            pod,
            self.policy.learning,
        );
        match hop {
            NextHop::Deliver => self.topo.present_at(&pod.dst, at),
            NextHop::Forward { ranked, .. } => !ranked.is_empty(),
            NextHop::Store => false,
        }
    }

    fn tick(&mut self) {
        let now = self.now;
        let names: Vec<NodeName> = self.gateways.keys().cloned().collect();
        let mut arrivals = Vec::new();
        for name in names {
            let out = self.gateways.get_mut(&name).expect("listed").dispatch_tick();
            if out.is_empty() {
                continue;
            }
            let gw_pid = self.pid(&name);
            for ((from, to), pod) in out {
                let dest = self.intents.remove(&(pod.id.clone(), pod.replica));
                if !self.topo.graph().has_edge(&from, &to) {
                    arrivals.push((pod, from));
                    continue;
                }
                let ok = self.losses.get_mut(&edge(&from, &to)).is_none_or(LossScript::next);
                if self.policy.learning {
                    if let (Some(dest), Some(coord)) = (dest, self.topo.coordinator(&from).cloned()) {
                        let outcome = if ok { Outcome::Success } else { Outcome::Failure };
                        let alpha = self.policy.ema_alpha;
                        let gw = gateway_entry(&mut self.gateways, &self.scenario, &coord);
                        report_outcome(&mut gw.route_table, &dest, &to, outcome, alpha);
                    }
                }
                if !ok {
                    self.stats.link_losses += 1;
                    self.drop_pod(pod, gw_pid.clone(), "link");
                    continue;
                }
                self.stats.forwards += 1;
                self.trace.emit(now, || format!("fwd {} {from}→{to}", copy_tag(&pod)));
                arrivals.push((pod.with_hop(to.clone()), to));
            }
        }
        for (pod, at) in arrivals {
            self.arrive(pod, &at);
        }
        if let Some(ttl) = self.scenario.custody_ttl {
            let holders: Vec<AoiId> = self.custody.keys().cloned().collect();
            for at in holders {
                let store = self.custody.get_mut(&at).expect("listed");
                let h = store.holder.clone();
                for p in store.expire(now, ttl) {
                    self.stats.evictions += 1;
                    self.trace.emit(now, || format!("evict {} at={h} reason=ttl", copy_tag(&p)));
                }
                if store.is_empty() {
                    self.custody.remove(&at);
                }
            }
        }
    }

    /// Moves `node` into `to`: it drops every membership and reach link,
    /// comes into reach of `to`'s members and associates there.
    pub fn apply_move(&mut self, node: &NodeName, to: &AoiId, update_dpin: bool) -> Result<(), AoiError> {
        let members: Vec<NodeName> = self.topo.aoi(to)?.members.iter().cloned().collect();
        let n = self.topo.node(node)?;
        let memberships = n.memberships.clone();
        let reach: Vec<NodeName> = n.reach.iter().cloned().collect();
        for m in &memberships {
            self.topo.leave(node, m, false)?;
        }
        for r in &reach {
            self.topo.unlink(node, r)?;
        }
        for m in members.iter().filter(|m| *m != node) {
            self.topo.link(node, m)?;
        }
        self.topo.attach(node, to, update_dpin)?;
        self.topo.elect_all();
        let now = self.now;
        self.trace.emit(now, || format!("move {node} to={to} dpin={update_dpin}"));
        self.refresh_isolation();
        Ok(())
    }

    /// Cuts (`up == false`) or restores the `a`–`b` edge. Pods queued on a
    /// cut edge are re-routed; a restore merges the shards that regained
    /// contact and validates what they flagged while isolated.
    pub fn apply_partition(&mut self, a: &AoiId, b: &AoiId, up: bool) -> Result<(), AoiError> {
        self.topo.set_edge(a, b, up)?;
        let now = self.now;
        let state = if up { "up" } else { "down" };
        self.trace.emit(now, || format!("link {a} {b} {state}"));
        let came = self.refresh_isolation();
        if up {
            let mut pairs = BTreeSet::from([edge(a, b)]);
            for r in &came {
                for n in self.topo.graph().neighbors(r) {
                    pairs.insert(edge(r, n));
                }
            }
            self.merge_pairs(pairs)?;
        } else {
            let mut drained = Vec::new();
            for gw in self.gateways.values_mut() {
                drained.extend(gw.drain_link(a, b).into_iter().map(|p| (p, a.clone())));
                drained.extend(gw.drain_link(b, a).into_iter().map(|p| (p, b.clone())));
            }
            for (p, at) in drained {
                self.intents.remove(&(p.id.clone(), p.replica));
                self.arrive(p, &at);
            }
        }
        Ok(())
    }

    fn merge_pairs(&mut self, pairs: BTreeSet<(AoiId, AoiId)>) -> Result<(), AoiError> {
        let now = self.now;
        for (x, y) in pairs {
            self.topo.dpin_mut().merge(&x, &y).map_err(AoiError::from)?;
            self.trace.emit(now, || format!("merge {x} {y}"));
        }
        // a merge reconnects both sides; re-derive modes from the graph
        self.refresh_isolation();
        for (id, r) in self.topo.validate_shards(&DefaultValidation) {
            self.trace.emit(now, || {
                format!(
                    "validate {id} ok={} evicted={} queued={}",
                    r.validated.len(),
                    r.evicted.len(),
                    r.from_queue.len()
                )
            });
        }
        Ok(())
    }

    fn refresh_isolation(&mut self) -> Vec<AoiId> {
        let (went, came) = self.topo.refresh_isolation();
        let now = self.now;
        for id in &went {
            self.trace.emit(now, || format!("isolate {id}"));
        }
        for id in &came {
            self.trace.emit(now, || format!("reconnect {id}"));
        }
        came
    }

    fn resolve(&mut self, from: &AoiId, node: &NodeName) {
        let now = self.now;
        let Ok(pid) = self.topo.pid_of(node).cloned() else {
            self.trace
                .emit(now, || format!("resolve {node} from={from} err=unidentified"));
            return;
        };
        let line = match self.topo.dpin().resolve(self.topo.graph(), &pid, from) {
            Ok(r) => format!(
                "resolve {pid} from={from} ok home={} served={} remote={} valid={}",
                r.result.record.home_aoi, r.result.served_by, r.remote_queries, r.result.valid_at_resolution
            ),
            Err(DpinError::Unreachable(_)) => format!("resolve {pid} from={from} err=unreachable"),
            Err(_) => format!("resolve {pid} from={from} err=notfound"),
        };
        self.trace.emit(now, || line);
    }

    fn associate(&mut self, device: &NodeName, gw_name: &NodeName) {
        let now = self.now;
        let (Ok(signer), Ok(gw_pid)) = (self.topo.signer(device).cloned(), self.topo.pid_of(gw_name).cloned()) else {
            self.trace
                .emit(now, || format!("associate {device} err=unknown gateway {gw_name}"));
            return;
        };
        let signer: Arc<dyn crate::identity::Signer> = signer;
        let creds = Credentials::present(signer.as_ref(), &gw_pid, device);
        let state = gateway_entry(&mut self.gateways, &self.scenario, gw_name);
        let line = match gateway::odap_associate(state, &mut self.topo, device, &creds) {
            Ok(b) => format!("associate {device} id={} via={}", b.device, b.gateway),
            Err(e) => format!("associate {device} err={e}"),
        };
        self.trace.emit(now, || line);
    }
}

/// Runs `scenario` to completion.
pub fn run<S: Scalar>(scenario: Scenario, trace: bool) -> Result<RunOutput, SimError> {
    Simulation::<S>::new(scenario, trace)?.finish()
}
