use std::fmt::{self, Write as _};

/// One stamped trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub time: u64,
    pub seq: u64,
    pub text: String,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{} {}", self.time, self.seq, self.text)
    }
}

/// Run log. Stamps are `(time, seq)` with `seq` counting lines from the
/// start of the run, so they are unique and increase with emission order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    lines: Vec<TraceLine>,
    enabled: bool,
    emitted: u64,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Self {
            lines: Vec::new(),
            enabled,
            emitted: 0,
        }
    }

    pub fn emit(&mut self, time: u64, text: impl FnOnce() -> String) {
        let seq = self.emitted;
        self.emitted += 1;
        if self.enabled {
            self.lines.push(TraceLine { time, seq, text: text() });
        }
    }

    pub fn lines(&self) -> &[TraceLine] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Lines whose event text starts with `kind` followed by a space.
    pub fn events<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceLine> + 'a {
        self.lines
            .iter()
            .filter(move |l| l.text.strip_prefix(kind).is_some_and(|r| r.starts_with(' ')))
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.lines.len() * 64);
        for l in &self.lines {
            let _ = writeln!(out, "{l}");
        }
        out
    }
}

pub const METRICS_HEADER: &str = "delivered,dropped_control,dropped_payload,mean_hops,stores,flushes,evictions";

/// End-of-run counters. `flushes` counts pods released from custody.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsSummary {
    pub delivered: u64,
    pub dropped_control: u64,
    pub dropped_payload: u64,
    pub mean_hops: f64,
    pub stores: u64,
    pub flushes: u64,
    pub evictions: u64,
}

impl MetricsSummary {
    pub fn dropped(&self) -> u64 {
        self.dropped_control + self.dropped_payload
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{METRICS_HEADER}\n{},{},{},{:.3},{},{},{}\n",
            self.delivered,
            self.dropped_control,
            self.dropped_payload,
            self.mean_hops,
            self.stores,
            self.flushes,
            self.evictions
        )
    }
}
