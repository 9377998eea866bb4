//! Scenario files: TOML with a `format = 1` header.
//!
//! Errors carry `path:line:col` of the offending entry and the name of the
//! field at fault.

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroUsize;
use std::ops::Range;
use std::path::{Path, PathBuf};

use mtn_core::aoi::NodeKind;
use mtn_core::pods::Priority;
use mtn_core::simcore::{
    Action, AoiSpec, GeneratorSpec, LossSpec, NodeSpec, PolicySpec, Scenario, ScriptedEvent, TopologySpec,
};
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

pub const FORMAT_VERSION: u32 = 1;

/// 1-based line and column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub line: usize,
    pub col: usize,
}

impl Position {
    fn of(text: &str, offset: usize) -> Self {
        let before = &text[..offset.min(text.len())];
        let line = before.matches('\n').count() + 1;
        let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
        Self { line, col }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{pos}: parse error: {message}")]
    Parse {
        path: PathBuf,
        pos: Position,
        message: String,
    },
    #[error("{path}:{pos}: invalid `{field}`: {message}")]
    Validation {
        path: PathBuf,
        pos: Position,
        field: String,
        message: String,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileScenario {
    format: Spanned<u32>,
    seed: u64,
    duration: u64,
    root: Option<Spanned<String>>,
    pod_size: Option<Spanned<usize>>,
    queue_capacity: Option<usize>,
    bandwidth: Option<u32>,
    custody_capacity: Option<usize>,
    custody_ttl: Option<u64>,
    seen_capacity: Option<usize>,
    policy: Option<FilePolicy>,
    topology: Option<FileTopology>,
    #[serde(default, rename = "node")]
    nodes: Vec<Spanned<FileNode>>,
    #[serde(default, rename = "loss")]
    losses: Vec<Spanned<FileLoss>>,
    #[serde(default, rename = "event")]
    events: Vec<Spanned<FileEvent>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePolicy {
    replication: Option<Spanned<usize>>,
    learning: Option<bool>,
    alpha: Option<Spanned<f64>>,
    probe_every: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTopology {
    #[serde(default, rename = "aoi")]
    aois: Vec<Spanned<FileAoi>>,
    #[serde(default)]
    bridges: Vec<Spanned<(String, String)>>,
    #[serde(default)]
    aggregates: Vec<Spanned<(String, String)>>,
    generator: Option<Spanned<FileGenerator>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileAoi {
    name: Spanned<String>,
    nodes: Spanned<Vec<String>>,
    #[serde(default)]
    constrained: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileGenerator {
    aois: usize,
    #[serde(default)]
    extra_edges: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileNode {
    name: Spanned<String>,
    kind: Option<Spanned<String>>,
    reach: Option<Spanned<Vec<String>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileLoss {
    a: Spanned<String>,
    b: Spanned<String>,
    success: Spanned<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEvent {
    at: Spanned<u64>,
    kind: Spanned<String>,
    src: Option<Spanned<String>>,
    dst: Option<Spanned<String>>,
    bytes: Option<Spanned<usize>>,
    priority: Option<Spanned<String>>,
    per_tick: Option<Spanned<u32>>,
    ticks: Option<Spanned<u64>>,
    node: Option<Spanned<String>>,
    to: Option<Spanned<String>>,
    update_dpin: Option<Spanned<bool>>,
    a: Option<Spanned<String>>,
    b: Option<Spanned<String>>,
    from: Option<Spanned<String>>,
    device: Option<Spanned<String>>,
    gateway: Option<Spanned<String>>,
    label: Option<Spanned<String>>,
}

/// Spans of scenario entries keyed by the dotted location the core
/// validator reports.
#[derive(Default)]
struct Spans(BTreeMap<String, Range<usize>>);

impl Spans {
    fn note<T>(&mut self, loc: impl Into<String>, v: &Spanned<T>) {
        self.0.insert(loc.into(), v.span());
    }

    /// Closest recorded span: the location itself, else its parents.
    fn find(&self, loc: &str) -> Option<Range<usize>> {
        let mut key = loc;
        loop {
            if let Some(r) = self.0.get(key) {
                return Some(r.clone());
            }
            let cut = key.rfind(['.', '['])?;
            key = &key[..cut];
        }
    }
}

struct Ctx<'a> {
    path: &'a Path,
    text: &'a str,
    spans: Spans,
}

impl Ctx<'_> {
    fn err(&self, loc: &str, message: impl Into<String>) -> ScenarioError {
        let offset = self.spans.find(loc).map_or(0, |r| r.start);
        ScenarioError::Validation {
            path: self.path.to_path_buf(),
            pos: Position::of(self.text, offset),
            field: loc.to_string(),
            message: message.into(),
        }
    }
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_str(path, &text)
}

/// Parses and fully validates scenario text; `path` only labels errors.
pub fn parse_str(path: &Path, text: &str) -> Result<Scenario, ScenarioError> {
    let file: FileScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        pos: Position::of(text, e.span().map_or(0, |s| s.start)),
        message: e.message().trim().to_string(),
    })?;
    let mut cx = Ctx {
        path,
        text,
        spans: Spans::default(),
    };
    cx.spans.note("format", &file.format);
    if *file.format.get_ref() != FORMAT_VERSION {
        return Err(cx.err("format", format!("unsupported format {}, expected {FORMAT_VERSION}", file.format.get_ref())));
    }
    let scenario = convert(&mut cx, file)?;
    scenario.validate().map_err(|e| cx.err(&e.location, e.message))?;
    Ok(scenario)
}

fn take<T: Clone>(v: &Option<Spanned<T>>) -> Option<T> {
    v.as_ref().map(|s| s.get_ref().clone())
}

fn convert(cx: &mut Ctx<'_>, f: FileScenario) -> Result<Scenario, ScenarioError> {
    let mut s = Scenario::new(f.seed, f.duration);
    if let Some(root) = &f.root {
        cx.spans.note("root", root);
        s.root = root.get_ref().parse().map_err(|e| cx.err("root", format!("{e}")))?;
    }
    if let Some(ps) = &f.pod_size {
        cx.spans.note("pod_size", ps);
        s.pod_size = NonZeroUsize::new(*ps.get_ref()).ok_or_else(|| cx.err("pod_size", "must be at least 1"))?;
    }
    s.queue_capacity = f.queue_capacity.unwrap_or(s.queue_capacity);
    s.bandwidth = f.bandwidth.unwrap_or(s.bandwidth);
    s.custody_capacity = f.custody_capacity.unwrap_or(s.custody_capacity);
    s.custody_ttl = f.custody_ttl;
    s.seen_capacity = f.seen_capacity.unwrap_or(s.seen_capacity);
    if let Some(p) = &f.policy {
        s.policy = policy(cx, p)?;
    }
    if let Some(t) = &f.topology {
        s.topology = topology(cx, t)?;
    }
    for (i, n) in f.nodes.iter().enumerate() {
        let loc = format!("nodes[{i}]");
        cx.spans.note(&loc, n);
        let n = n.get_ref();
        cx.spans.note(format!("{loc}.name"), &n.name);
        if let Some(r) = &n.reach {
            cx.spans.note(format!("{loc}.reach"), r);
        }
        let kind = match &n.kind {
            None => NodeKind::FullAgent,
            Some(k) => {
                cx.spans.note(format!("{loc}.kind"), k);
                node_kind(k.get_ref()).ok_or_else(|| cx.err(&format!("{loc}.kind"), "expected `full` or `constrained`"))?
            }
        };
        s.nodes.push(NodeSpec {
            name: n.name.get_ref().clone(),
            kind,
            reach: take(&n.reach).unwrap_or_default(),
        });
    }
    for (i, l) in f.losses.iter().enumerate() {
        let loc = format!("losses[{i}]");
        cx.spans.note(&loc, l);
        let l = l.get_ref();
        cx.spans.note(format!("{loc}.a"), &l.a);
        cx.spans.note(format!("{loc}.b"), &l.b);
        cx.spans.note(format!("{loc}.success"), &l.success);
        s.losses.push(LossSpec {
            a: l.a.get_ref().clone(),
            b: l.b.get_ref().clone(),
            success: *l.success.get_ref(),
        });
    }
    for (i, e) in f.events.iter().enumerate() {
        let loc = format!("events[{i}]");
        cx.spans.note(&loc, e);
        let action = event(cx, &loc, e.get_ref())?;
        s.events.push(ScriptedEvent {
            at: *e.get_ref().at.get_ref(),
            action,
        });
    }
    Ok(s)
}

fn node_kind(s: &str) -> Option<NodeKind> {
    match s {
        "full" => Some(NodeKind::FullAgent),
        "constrained" => Some(NodeKind::Constrained),
        _ => None,
    }
}

fn policy(cx: &mut Ctx<'_>, p: &FilePolicy) -> Result<PolicySpec, ScenarioError> {
    let mut out = PolicySpec::default();
    if let Some(r) = &p.replication {
        cx.spans.note("policy.replication", r);
        out.replication =
            NonZeroUsize::new(*r.get_ref()).ok_or_else(|| cx.err("policy.replication", "must be at least 1"))?;
    }
    if let Some(a) = &p.alpha {
        cx.spans.note("policy.alpha", a);
        out.alpha = *a.get_ref();
    }
    out.learning = p.learning.unwrap_or(out.learning);
    out.probe_every = p.probe_every.unwrap_or(out.probe_every);
    Ok(out)
}

fn topology(cx: &mut Ctx<'_>, t: &FileTopology) -> Result<TopologySpec, ScenarioError> {
    let mut out = TopologySpec::default();
    for (i, a) in t.aois.iter().enumerate() {
        let loc = format!("topology.aois[{i}]");
        cx.spans.note(&loc, a);
        let a = a.get_ref();
        cx.spans.note(format!("{loc}.name"), &a.name);
        cx.spans.note(format!("{loc}.nodes"), &a.nodes);
        let mut nodes: Vec<NodeSpec> = a.nodes.get_ref().iter().map(NodeSpec::full).collect();
        nodes.extend(a.constrained.iter().map(NodeSpec::constrained));
        out.aois.push(AoiSpec {
            name: a.name.get_ref().clone(),
            nodes,
        });
    }
    for (i, b) in t.bridges.iter().enumerate() {
        cx.spans.note(format!("topology.bridges[{i}]"), b);
        out.bridges.push(b.get_ref().clone());
    }
    for (i, b) in t.aggregates.iter().enumerate() {
        cx.spans.note(format!("topology.aggregates[{i}]"), b);
        out.aggregates.push(b.get_ref().clone());
    }
    if let Some(g) = &t.generator {
        cx.spans.note("topology.generator", g);
        out.generator = Some(GeneratorSpec {
            aois: g.get_ref().aois,
            extra_edges: g.get_ref().extra_edges,
        });
    }
    Ok(out)
}

fn event(cx: &mut Ctx<'_>, loc: &str, e: &FileEvent) -> Result<Action, ScenarioError> {
    let fields: [(&str, Option<Range<usize>>); 16] = [
        ("at", Some(e.at.span())),
        ("kind", Some(e.kind.span())),
        ("src", e.src.as_ref().map(Spanned::span)),
        ("dst", e.dst.as_ref().map(Spanned::span)),
        ("bytes", e.bytes.as_ref().map(Spanned::span)),
        ("priority", e.priority.as_ref().map(Spanned::span)),
        ("per_tick", e.per_tick.as_ref().map(Spanned::span)),
        ("ticks", e.ticks.as_ref().map(Spanned::span)),
        ("node", e.node.as_ref().map(Spanned::span)),
        ("to", e.to.as_ref().map(Spanned::span)),
        ("update_dpin", e.update_dpin.as_ref().map(Spanned::span)),
        ("a", e.a.as_ref().map(Spanned::span)),
        ("b", e.b.as_ref().map(Spanned::span)),
        ("from", e.from.as_ref().map(Spanned::span)),
        ("device", e.device.as_ref().map(Spanned::span)),
        ("gateway", e.gateway.as_ref().map(Spanned::span)),
    ];
    for (name, span) in fields {
        if let Some(span) = span {
            cx.spans.0.insert(format!("{loc}.{name}"), span);
        }
    }
    if let Some(l) = &e.label {
        cx.spans.note(format!("{loc}.label"), l);
    }
    let need = |v: Option<String>, field: &str| v.ok_or_else(|| cx.err(&format!("{loc}.{field}"), "missing field"));
    let action = match e.kind.get_ref().as_str() {
        "inject" => {
            let priority = match &e.priority {
                None => Priority::payload(0),
                Some(p) => p
                    .get_ref()
                    .parse()
                    .map_err(|_| cx.err(&format!("{loc}.priority"), "expected `control:<0-7>` or `payload:<0-7>`"))?,
            };
            Action::Inject {
                src: need(take(&e.src), "src")?,
                dst: need(take(&e.dst), "dst")?,
                bytes: take(&e.bytes).unwrap_or(0),
                priority,
            }
        }
        "load" => Action::Load {
            src: need(take(&e.src), "src")?,
            dst: need(take(&e.dst), "dst")?,
            per_tick: take(&e.per_tick).ok_or_else(|| cx.err(&format!("{loc}.per_tick"), "missing field"))?,
            ticks: take(&e.ticks).ok_or_else(|| cx.err(&format!("{loc}.ticks"), "missing field"))?,
            bytes: take(&e.bytes).unwrap_or(0),
        },
        "move" => Action::Move {
            node: need(take(&e.node), "node")?,
            to: need(take(&e.to), "to")?,
            update_dpin: take(&e.update_dpin).unwrap_or(true),
        },
        "link_down" | "link_up" | "merge" => {
            let (a, b) = (need(take(&e.a), "a")?, need(take(&e.b), "b")?);
            match e.kind.get_ref().as_str() {
                "link_down" => Action::LinkDown { a, b },
                "link_up" => Action::LinkUp { a, b },
                _ => Action::Merge { a, b },
            }
        }
        "resolve" => Action::Resolve {
            from: need(take(&e.from), "from")?,
            node: need(take(&e.node), "node")?,
        },
        "associate" => Action::Associate {
            device: need(take(&e.device), "device")?,
            gateway: need(take(&e.gateway), "gateway")?,
        },
        "release" => Action::Release {
            device: need(take(&e.device), "device")?,
        },
        "custom" => Action::Custom(need(take(&e.label), "label")?),
        other => {
            return Err(cx.err(
                &format!("{loc}.kind"),
                format!(
                    "unknown event kind `{other}` (expected inject, load, move, link_down, link_up, merge, resolve, associate, release or custom)"
                ),
            ))
        }
    };
    Ok(action)
}

/// Stable text form of a parsed scenario, used for golden comparisons.
pub fn describe(s: &Scenario) -> String {
    format!("{s:#?}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
format = 1
seed = 3
duration = 25

[[topology.aoi]]
name = "A"
nodes = ["a1", "a2"]

[[event]]
at = 0
kind = "inject"
src = "a1"
dst = "a2"
bytes = 10
"#;

    fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        parse_str(Path::new("t.toml"), text)
    }

    #[test]
    fn minimal_file() {
        let s = parse(MINIMAL).unwrap();
        assert_eq!(s.duration, 25);
        assert_eq!(s.topology.aois[0].nodes.len(), 2);
        assert_eq!(
            s.events[0].action,
            Action::Inject {
                src: "a1".into(),
                dst: "a2".into(),
                bytes: 10,
                priority: Priority::payload(0)
            }
        );
    }

    #[test]
    fn undefined_node_named_with_position() {
        let text = MINIMAL.replace("dst = \"a2\"", "dst = \"ghost\"");
        let e = parse(&text).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("ghost"), "{msg}");
        assert!(msg.contains("events[0].dst"), "{msg}");
        match e {
            ScenarioError::Validation { pos, .. } => assert_eq!(pos.line, 14),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_position() {
        let e = parse("format = 1\nseed = \n").unwrap_err();
        match e {
            ScenarioError::Parse { pos, .. } => assert_eq!(pos.line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_and_kind_rejected() {
        assert!(matches!(
            parse(&format!("{MINIMAL}\nextra = 1\n")).unwrap_err(),
            ScenarioError::Parse { .. }
        ));
        let e = parse(&MINIMAL.replace("\"inject\"", "\"teleport\"")).unwrap_err();
        assert!(e.to_string().contains("events[0].kind"), "{e}");
    }

    #[test]
    fn wrong_format_version() {
        let e = parse(&MINIMAL.replace("format = 1", "format = 2")).unwrap_err();
        assert!(e.to_string().contains("`format`"), "{e}");
    }

    #[test]
    fn missing_required_event_field() {
        let e = parse(&MINIMAL.replace("src = \"a1\"\n", "")).unwrap_err();
        assert!(e.to_string().contains("events[0].src"), "{e}");
    }

    #[test]
    fn positions() {
        assert_eq!(Position::of("ab\ncd", 4), Position { line: 2, col: 2 });
        assert_eq!(Position::of("ab", 0), Position { line: 1, col: 1 });
    }
}
