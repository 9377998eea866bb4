use std::collections::BTreeSet;
use std::num::NonZeroUsize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aoi::{NodeKind, NodeName};
use crate::identity::{seed_from, NamespacePath};
use crate::pods::{Priority, DEFAULT_POD_SIZE};
use crate::routing::{DEFAULT_ALPHA, DEFAULT_PROBE_EVERY};

/// Scenario rejected before the run starts. `location` is a dotted path
/// into the scenario (`events[3].node`).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{location}: {message}")]
pub struct InvalidScenario {
    pub location: String,
    pub message: String,
}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> InvalidScenario {
    InvalidScenario {
        location: location.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    /// Extra reach links, for nodes outside any AoI at start.
    pub reach: Vec<String>,
}

impl NodeSpec {
    pub fn full(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: NodeKind::FullAgent,
            reach: Vec::new(),
        }
    }

    pub fn constrained(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: NodeKind::Constrained,
            reach: Vec::new(),
        }
    }
}

/// An AoI formed at start: the first two nodes handshake, the rest join.
/// Every node of the AoI is in reach of every other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AoiSpec {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub aois: usize,
    pub extra_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TopologySpec {
    pub aois: Vec<AoiSpec>,
    /// Reach links between nodes of different AoIs.
    pub bridges: Vec<(String, String)>,
    /// `(parent, child)` aggregations applied after formation.
    pub aggregates: Vec<(String, String)>,
    pub generator: Option<GeneratorSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub replication: NonZeroUsize,
    pub learning: bool,
    pub alpha: f64,
    pub probe_every: u32,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            replication: NonZeroUsize::MIN,
            learning: false,
            alpha: DEFAULT_ALPHA,
            probe_every: DEFAULT_PROBE_EVERY,
        }
    }
}

/// Per-link transmission success probability between two AoIs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub a: String,
    pub b: String,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Inject {
        src: String,
        dst: String,
        bytes: usize,
        priority: Priority,
    },
    /// `per_tick` one-pod messages per tick for `ticks` ticks; message i
    /// carries priority rank `i mod 16`.
    Load {
        src: String,
        dst: String,
        per_tick: u32,
        ticks: u64,
        bytes: usize,
    },
    Move {
        node: String,
        to: String,
        update_dpin: bool,
    },
    LinkDown {
        a: String,
        b: String,
    },
    LinkUp {
        a: String,
        b: String,
    },
    Merge {
        a: String,
        b: String,
    },
    Resolve {
        from: String,
        node: String,
    },
    Associate {
        device: String,
        gateway: String,
    },
    Release {
        device: String,
    },
    Custom(String),
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Inject { .. } => "inject",
            Action::Load { .. } => "load",
            Action::Move { .. } => "move",
            Action::LinkDown { .. } => "link_down",
            Action::LinkUp { .. } => "link_up",
            Action::Merge { .. } => "merge",
            Action::Resolve { .. } => "resolve",
            Action::Associate { .. } => "associate",
            Action::Release { .. } => "release",
            Action::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedEvent {
    pub at: u64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub duration: u64,
    pub root: NamespacePath,
    pub pod_size: NonZeroUsize,
    pub queue_capacity: usize,
    pub bandwidth: u32,
    pub custody_capacity: usize,
    pub custody_ttl: Option<u64>,
    pub seen_capacity: usize,
    pub policy: PolicySpec,
    pub topology: TopologySpec,
    /// Nodes outside every AoI at start.
    pub nodes: Vec<NodeSpec>,
    pub losses: Vec<LossSpec>,
    pub events: Vec<ScriptedEvent>,
}

impl Scenario {
    pub fn new(seed: u64, duration: u64) -> Self {
        Self {
            seed,
            duration,
            root: "mtn".parse().expect("static root"),
            pod_size: NonZeroUsize::new(DEFAULT_POD_SIZE).expect("non-zero"),
            queue_capacity: 64,
            bandwidth: 4,
            custody_capacity: 1024,
            custody_ttl: None,
            seen_capacity: 4096,
            policy: PolicySpec::default(),
            topology: TopologySpec::default(),
            nodes: Vec::new(),
            losses: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn at(mut self, at: u64, action: Action) -> Self {
        self.events.push(ScriptedEvent { at, action });
        self
    }

    /// AoIs and bridges the run starts from, expanding the generator.
    pub fn formation(&self) -> (Vec<AoiSpec>, Vec<(String, String)>) {
        let mut aois = self.topology.aois.clone();
        let mut bridges = self.topology.bridges.clone();
        if let Some(g) = self.topology.generator {
            let (ga, gb) = random_connected(self.seed, g);
            aois.extend(ga);
            bridges.extend(gb);
        }
        (aois, bridges)
    }

    pub fn validate(&self) -> Result<(), InvalidScenario> {
        if self.bandwidth == 0 {
            return Err(invalid("bandwidth", "must be at least 1"));
        }
        if !(self.policy.alpha > 0.0 && self.policy.alpha < 1.0) {
            return Err(invalid("policy.alpha", "must lie strictly between 0 and 1"));
        }
        if let Some(g) = self.topology.generator {
            if g.aois < 2 {
                return Err(invalid("topology.generator.aois", "needs at least 2 AoIs"));
            }
        }
        let (aois, bridges) = self.formation();
        let mut nodes: BTreeSet<String> = BTreeSet::new();
        let mut aoi_names = BTreeSet::new();
        let mut check_node = |spec: &NodeSpec, loc: String| -> Result<(), InvalidScenario> {
            NodeName::new(&spec.name).map_err(|e| invalid(format!("{loc}.name"), e.to_string()))?;
            if !nodes.insert(spec.name.clone()) {
                return Err(invalid(format!("{loc}.name"), format!("duplicate node `{}`", spec.name)));
            }
            Ok(())
        };
        for (i, a) in aois.iter().enumerate() {
            let loc = format!("topology.aois[{i}]");
            if !aoi_names.insert(a.name.clone()) {
                return Err(invalid(format!("{loc}.name"), format!("duplicate AoI `{}`", a.name)));
            }
            if a.nodes.len() < 2 {
                return Err(invalid(format!("{loc}.nodes"), "an AoI forms from at least 2 nodes"));
            }
            if a.nodes.iter().all(|n| n.kind != NodeKind::FullAgent) {
                return Err(invalid(format!("{loc}.nodes"), "an AoI needs a full-agent node"));
            }
            for (j, n) in a.nodes.iter().enumerate() {
                check_node(n, format!("{loc}.nodes[{j}]"))?;
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            check_node(n, format!("nodes[{i}]"))?;
        }
        let node_known = |name: &str, loc: String| {
            if nodes_contains(&aois, &self.nodes, name) {
                Ok(())
            } else {
                Err(invalid(loc, format!("undefined node `{name}`")))
            }
        };
        let aoi_known = |name: &str, loc: String| {
            if aoi_names.contains(name) {
                Ok(())
            } else {
                Err(invalid(loc, format!("undefined AoI `{name}`")))
            }
        };
        for (i, n) in self.nodes.iter().enumerate() {
            for (j, r) in n.reach.iter().enumerate() {
                node_known(r, format!("nodes[{i}].reach[{j}]"))?;
            }
        }
        for (i, (a, b)) in bridges.iter().enumerate() {
            node_known(a, format!("topology.bridges[{i}]"))?;
            node_known(b, format!("topology.bridges[{i}]"))?;
        }
        for (i, (p, c)) in self.topology.aggregates.iter().enumerate() {
            aoi_known(p, format!("topology.aggregates[{i}]"))?;
            aoi_known(c, format!("topology.aggregates[{i}]"))?;
        }
        for (i, l) in self.losses.iter().enumerate() {
            aoi_known(&l.a, format!("losses[{i}].a"))?;
            aoi_known(&l.b, format!("losses[{i}].b"))?;
            if !(0.0..=1.0).contains(&l.success) {
                return Err(invalid(format!("losses[{i}].success"), "must lie in [0, 1]"));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            let loc = |f: &str| format!("events[{i}].{f}");
            if e.at > self.duration {
                return Err(invalid(
                    loc("at"),
                    format!("time {} is past the duration {}", e.at, self.duration),
                ));
            }
            match &e.action {
                Action::Inject { src, dst, .. } => {
                    node_known(src, loc("src"))?;
                    node_known(dst, loc("dst"))?;
                }
                Action::Load { src, dst, ticks, .. } => {
                    node_known(src, loc("src"))?;
                    node_known(dst, loc("dst"))?;
                    if e.at + ticks.saturating_sub(1) > self.duration {
                        return Err(invalid(loc("ticks"), "load runs past the duration"));
                    }
                }
                Action::Move { node, to, .. } => {
                    node_known(node, loc("node"))?;
                    aoi_known(to, loc("to"))?;
                }
                Action::LinkDown { a, b } | Action::LinkUp { a, b } | Action::Merge { a, b } => {
                    aoi_known(a, loc("a"))?;
                    aoi_known(b, loc("b"))?;
                }
                Action::Resolve { from, node } => {
                    aoi_known(from, loc("from"))?;
                    node_known(node, loc("node"))?;
                }
                Action::Associate { device, gateway } => {
                    node_known(device, loc("device"))?;
                    node_known(gateway, loc("gateway"))?;
                }
                Action::Release { device } => node_known(device, loc("device"))?,
                Action::Custom(label) => {
                    if label.is_empty() || label.chars().any(char::is_whitespace) {
                        return Err(invalid(loc("label"), "labels are non-empty and without whitespace"));
                    }
                }
            }
        }
        Ok(())
    }
}

fn nodes_contains(aois: &[AoiSpec], loose: &[NodeSpec], name: &str) -> bool {
    aois.iter().flat_map(|a| &a.nodes).chain(loose).any(|n| n.name == name)
}

/// Random connected AoI graph: a random spanning tree plus up to
/// `extra_edges` further distinct edges. AoI `a{i}` has full agents
/// `a{i}x` and `a{i}y`; an edge `i–j` links `a{i}x` with `a{j}x`.
pub fn random_connected(seed: u64, spec: GeneratorSpec) -> (Vec<AoiSpec>, Vec<(String, String)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[&seed.to_be_bytes()[..], b"topology"]));
    let n = spec.aois;
    let aois = (0..n)
        .map(|i| AoiSpec {
            name: format!("a{i}"),
            nodes: vec![NodeSpec::full(format!("a{i}x")), NodeSpec::full(format!("a{i}y"))],
        })
        .collect();
    let mut edges = BTreeSet::new();
    for i in 1..n {
        edges.insert((rng.random_range(0..i), i));
    }
    let possible = n * (n - 1) / 2;
    let target = (edges.len() + spec.extra_edges).min(possible);
    while edges.len() < target {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let bridges = edges
        .into_iter()
        .map(|(a, b)| (format!("a{a}x"), format!("a{b}x")))
        .collect();
    (aois, bridges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_aois() -> Scenario {
        let mut s = Scenario::new(1, 10);
        s.topology.aois = vec![
            AoiSpec {
                name: "A".into(),
                nodes: vec![NodeSpec::full("a1"), NodeSpec::full("a2")],
            },
            AoiSpec {
                name: "B".into(),
                nodes: vec![NodeSpec::full("b1"), NodeSpec::full("b2")],
            },
        ];
        s.topology.bridges = vec![("a1".into(), "b1".into())];
        s
    }

    #[test]
    fn minimal_scenario_validates() {
        let s = two_aois().at(
            0,
            Action::Inject {
                src: "a2".into(),
                dst: "b2".into(),
                bytes: 10,
                priority: Priority::payload(0),
            },
        );
        assert_eq!(s.validate(), Ok(()));
    }

    #[test]
    fn undefined_node_is_named() {
        let s = two_aois().at(
            2,
            Action::Move {
                node: "ghost".into(),
                to: "A".into(),
                update_dpin: true,
            },
        );
        let e = s.validate().unwrap_err();
        assert_eq!(e.location, "events[0].node");
        assert!(e.message.contains("ghost"));
    }

    #[test]
    fn events_past_duration_rejected() {
        let s = two_aois().at(11, Action::Custom("x".into()));
        assert_eq!(s.validate().unwrap_err().location, "events[0].at");
    }

    #[test]
    fn structural_errors() {
        let mut s = two_aois();
        s.topology.aois[1].nodes.pop();
        assert_eq!(s.validate().unwrap_err().location, "topology.aois[1].nodes");
        let mut s = two_aois();
        s.topology.aois[1].nodes[0].name = "a1".into();
        assert_eq!(s.validate().unwrap_err().location, "topology.aois[1].nodes[0].name");
        let mut s = two_aois();
        s.policy.alpha = 1.0;
        assert_eq!(s.validate().unwrap_err().location, "policy.alpha");
        let mut s = two_aois();
        s.losses.push(LossSpec {
            a: "A".into(),
            b: "Z".into(),
            success: 0.5,
        });
        assert_eq!(s.validate().unwrap_err().location, "losses[0].b");
    }

    fn connected(n: usize, bridges: &[(String, String)]) -> bool {
        let idx = |s: &str| s[1..s.len() - 1].parse::<usize>().unwrap();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for (a, b) in bridges {
                let (a, b) = (idx(a), idx(b));
                for (x, y) in [(a, b), (b, a)] {
                    if x == v && !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn generator_is_connected_and_seeded() {
        for seed in 0..50 {
            let spec = GeneratorSpec {
                aois: 4 + (seed as usize % 7),
                extra_edges: 3,
            };
            let (aois, bridges) = random_connected(seed, spec);
            assert_eq!(aois.len(), spec.aois);
            assert!(connected(spec.aois, &bridges));
            assert_eq!(random_connected(seed, spec), (aois, bridges));
        }
        let g = GeneratorSpec { aois: 8, extra_edges: 4 };
        assert_ne!(random_connected(1, g).1, random_connected(2, g).1);
    }
}
