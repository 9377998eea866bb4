//! Propagation machinery: bounded priority queues, custody stores for
//! disconnected destinations, and reinforcement of route scores.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::num::NonZeroUsize;

use thiserror::Error;

use crate::aoi::AoiId;
use crate::identity::PersistentId;
use crate::pods::Pod;
use crate::scalar::Scalar;

/// Probe cadence: one pod in this many takes the runner-up route.
pub const DEFAULT_PROBE_EVERY: u32 = 16;
pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("ema alpha must lie strictly between 0 and 1, got {0}")]
    Alpha(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteScore<S> {
    pub dest_aoi: AoiId,
    pub next_aoi: AoiId,
    pub score: S,
    pub successes: u64,
    pub failures: u64,
}

impl<S: Scalar> RouteScore<S> {
    pub fn fresh(dest_aoi: AoiId, next_aoi: AoiId) -> Self {
        Self {
            dest_aoi,
            next_aoi,
            score: S::lit(0.5),
            successes: 0,
            failures: 0,
        }
    }

    /// `score' = (1 - alpha) * score + alpha * [success]`
    pub fn record(&mut self, outcome: Outcome, alpha: S) {
        let hit = match outcome {
            Outcome::Success => {
                self.successes += 1;
                S::one()
            }
            Outcome::Failure => {
                self.failures += 1;
                S::zero()
            }
        };
        self.score = (S::one() - alpha) * self.score + alpha * hit;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteTable<S> {
    entries: BTreeMap<(AoiId, AoiId), RouteScore<S>>,
}

impl<S> Default for RouteTable<S> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> RouteTable<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, dest: &AoiId, next: &AoiId) -> Option<&RouteScore<S>> {
        self.entries.get(&(dest.clone(), next.clone()))
    }

    pub fn score(&self, dest: &AoiId, next: &AoiId) -> S {
        self.get(dest, next).map_or(S::lit(0.5), |e| e.score)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RouteScore<S>> {
        self.entries.values()
    }

    /// Orders candidates best-first; equal scores fall back to the
    /// smallest AoI id.
    pub fn rank(&self, dest: &AoiId, mut candidates: Vec<AoiId>) -> Vec<AoiId> {
        candidates.sort_by(|a, b| {
            self.score(dest, b)
                .partial_cmp(&self.score(dest, a))
                .expect("scores are finite")
                .then_with(|| a.cmp(b))
        });
        candidates
    }
}

pub fn report_outcome<'a, S: Scalar>(
    scores: &'a mut RouteTable<S>,
    dest_aoi: &AoiId,
    next_aoi: &AoiId,
    outcome: Outcome,
    alpha: S,
) -> &'a RouteScore<S> {
    let e = scores
        .entries
        .entry((dest_aoi.clone(), next_aoi.clone()))
        .or_insert_with(|| RouteScore::fresh(dest_aoi.clone(), next_aoi.clone()));
    e.record(outcome, alpha);
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationPolicy<S> {
    pub replication_factor: NonZeroUsize,
    pub learning: bool,
    pub ema_alpha: S,
    pub probe_every: u32,
}

impl<S: Scalar> PropagationPolicy<S> {
    pub fn new(replication_factor: NonZeroUsize, learning: bool, ema_alpha: S) -> Result<Self, PolicyError> {
        if !(ema_alpha > S::zero() && ema_alpha < S::one()) {
            return Err(PolicyError::Alpha(ema_alpha.to_string()));
        }
        Ok(Self {
            replication_factor,
            learning,
            ema_alpha,
            probe_every: DEFAULT_PROBE_EVERY,
        })
    }
}

impl<S: Scalar> Default for PropagationPolicy<S> {
    fn default() -> Self {
        Self::new(NonZeroUsize::MIN, false, S::lit(DEFAULT_ALPHA)).expect("default alpha is valid")
    }
}

/// Bounded queue served highest priority first, FIFO within a priority.
#[derive(Debug, Clone)]
pub struct PodQueue {
    capacity: usize,
    entries: BTreeMap<(u8, u64), Pod>,
    arrivals: u64,
}

impl PodQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: BTreeMap::new(),
            arrivals: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pod> {
        self.entries.values()
    }

    /// Inserts `pod`; when full, the lowest-priority, latest-arrived pod
    /// (possibly `pod` itself) is returned as dropped.
    pub fn enqueue(&mut self, pod: Pod) -> Option<Pod> {
        let key = (pod.priority.rank(), self.arrivals);
        self.arrivals += 1;
        if self.entries.len() < self.capacity {
            self.entries.insert(key, pod);
            return None;
        }
        match self.entries.last_key_value() {
            Some((&worst, _)) if worst > key => {
                let dropped = self.entries.remove(&worst);
                self.entries.insert(key, pod);
                dropped
            }
            _ => Some(pod),
        }
    }

    pub fn pop(&mut self) -> Option<Pod> {
        self.entries.pop_first().map(|(_, p)| p)
    }

    pub fn drain(&mut self) -> Vec<Pod> {
        std::mem::take(&mut self.entries).into_values().collect()
    }
}

#[derive(Debug, Clone)]
struct Held {
    pod: Pod,
    seq: u64,
    stored_at: u64,
}

/// Pods kept on behalf of destinations that cannot currently be reached.
#[derive(Debug, Clone)]
pub struct CustodyStore {
    pub holder: PersistentId,
    capacity: usize,
    held: BTreeMap<PersistentId, Vec<Held>>,
    seq: u64,
}

impl CustodyStore {
    pub fn new(holder: PersistentId, capacity: usize) -> Self {
        Self {
            holder,
            capacity,
            held: BTreeMap::new(),
            seq: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.held.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }

    pub fn destinations(&self) -> impl Iterator<Item = &PersistentId> {
        self.held.keys()
    }

    pub fn held_for(&self, dst: &PersistentId) -> impl Iterator<Item = &Pod> {
        self.held.get(dst).into_iter().flatten().map(|h| &h.pod)
    }

    /// Holds `pod` under its destination. Over capacity, the
    /// lowest-priority then oldest pod is evicted and returned.
    pub fn store(&mut self, pod: Pod, now: u64) -> Option<Pod> {
        let seq = self.seq;
        self.seq += 1;
        self.held.entry(pod.dst.clone()).or_default().push(Held {
            pod,
            seq,
            stored_at: now,
        });
        if self.len() <= self.capacity {
            return None;
        }
        let (dst, idx) = self
            .held
            .iter()
            .flat_map(|(d, v)| v.iter().enumerate().map(move |(i, h)| (d, i, h)))
            .max_by(|(_, _, a), (_, _, b)| {
                a.pod
                    .priority
                    .cmp(&b.pod.priority)
                    .then_with(|| b.seq.cmp(&a.seq))
            })
            .map(|(d, i, _)| (d.clone(), i))
            .expect("store is non-empty");
        Some(self.take(&dst, idx))
    }

    fn take(&mut self, dst: &PersistentId, idx: usize) -> Pod {
        let v = self.held.get_mut(dst).expect("present");
        let h = v.remove(idx);
        if v.is_empty() {
            self.held.remove(dst);
        }
        h.pod
    }

    /// Releases every pod held for `dst`, highest priority first.
    pub fn flush(&mut self, dst: &PersistentId) -> Vec<Pod> {
        let mut v = self.held.remove(dst).unwrap_or_default();
        v.sort_by(|a, b| a.pod.priority.cmp(&b.pod.priority).then(a.seq.cmp(&b.seq)));
        v.into_iter().map(|h| h.pod).collect()
    }

    /// Evicts pods held longer than `ttl` ticks.
    pub fn expire(&mut self, now: u64, ttl: u64) -> Vec<Pod> {
        let mut out = Vec::new();
        for v in self.held.values_mut() {
            let (keep, gone): (Vec<Held>, Vec<Held>) = v.drain(..).partition(|h| now.saturating_sub(h.stored_at) < ttl);
            *v = keep;
            out.extend(gone.into_iter().map(|h| h.pod));
        }
        self.held.retain(|_, v| !v.is_empty());
        out
    }
}

/// Recently seen pod copies, bounded with FIFO eviction.
#[derive(Debug, Clone)]
pub struct SeenSet {
    capacity: usize,
    order: VecDeque<PersistentId>,
    copies: HashMap<PersistentId, u16>,
}

impl SeenSet {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            order: VecDeque::new(),
            copies: HashMap::new(),
        }
    }

    /// Records the copy and reports whether a different copy of the same
    /// pod already passed through.
    pub fn is_duplicate(&mut self, pod: &Pod) -> bool {
        match self.copies.get(&pod.id) {
            Some(&r) => r != pod.replica,
            None => {
                if self.capacity == 0 {
                    return false;
                }
                if self.order.len() == self.capacity {
                    if let Some(old) = self.order.pop_front() {
                        self.copies.remove(&old);
                    }
                }
                self.order.push_back(pod.id.clone());
                self.copies.insert(pod.id.clone(), pod.replica);
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::mint_id;
    use crate::pods::Priority;
    use bytes::Bytes;

    fn pid(i: u64) -> PersistentId {
        mint_id(&["t"], i).unwrap()
    }

    fn pod(i: u64, pri: Priority) -> Pod {
        Pod {
            id: pid(1000 + i),
            parent: pid(1),
            index: i as u32,
            payload: Bytes::new(),
            priority: pri,
            src: pid(2),
            dst: pid(3),
            hop_log: vec![],
            replica: 0,
        }
    }

    #[test]
    fn fresh_success_and_failure() {
        let (d, n) = (pid(1), pid(2));
        let mut t = RouteTable::<f64>::new();
        assert_eq!(report_outcome(&mut t, &d, &n, Outcome::Success, 0.5).score, 0.75);
        let mut t = RouteTable::<f64>::new();
        let e = report_outcome(&mut t, &d, &n, Outcome::Failure, 0.5);
        assert_eq!((e.score, e.failures, e.successes), (0.25, 1, 0));
    }

    #[test]
    fn ema_matches_direct_fold() {
        let (d, n) = (pid(1), pid(2));
        let outcomes: Vec<bool> = (0..100u64).map(|i| (i * 7 + i / 3) % 5 != 0).collect();
        let mut t = RouteTable::<f64>::new();
        for &ok in &outcomes {
            report_outcome(&mut t, &d, &n, if ok { Outcome::Success } else { Outcome::Failure }, 0.2);
        }
        let folded = outcomes
            .iter()
            .fold(0.5f64, |s, &ok| 0.8 * s + 0.2 * if ok { 1.0 } else { 0.0 });
        let e = t.get(&d, &n).unwrap();
        assert!((e.score - folded).abs() < 1e-12);
        assert_eq!(e.successes + e.failures, 100);

        let mut t32 = RouteTable::<f32>::new();
        for &ok in &outcomes {
            report_outcome(&mut t32, &d, &n, if ok { Outcome::Success } else { Outcome::Failure }, 0.2);
        }
        assert!((f64::from(t32.score(&d, &n)) - folded).abs() < 1e-5);
    }

    #[test]
    fn rank_prefers_score_then_id() {
        let d = pid(9);
        let mut t = RouteTable::<f64>::new();
        let (a, b, c) = (pid(1), pid(2), pid(3));
        let mut sorted = vec![a.clone(), b.clone(), c.clone()];
        sorted.sort();
        assert_eq!(t.rank(&d, vec![c.clone(), a.clone(), b.clone()]), sorted);
        report_outcome(&mut t, &d, &sorted[2], Outcome::Success, 0.2);
        report_outcome(&mut t, &d, &sorted[0], Outcome::Failure, 0.2);
        assert_eq!(
            t.rank(&d, sorted.clone()),
            vec![sorted[2].clone(), sorted[1].clone(), sorted[0].clone()]
        );
    }

    #[test]
    fn alpha_bounds() {
        assert!(PropagationPolicy::new(NonZeroUsize::MIN, true, 0.0f64).is_err());
        assert!(PropagationPolicy::new(NonZeroUsize::MIN, true, 1.0f64).is_err());
        assert!(PropagationPolicy::new(NonZeroUsize::MIN, true, 0.2f32).is_ok());
    }

    #[test]
    fn control_displaces_payload_in_full_queue() {
        let mut q = PodQueue::new(3);
        for i in 0..3 {
            assert!(q.enqueue(pod(i, Priority::payload(i as u8))).is_none());
        }
        let dropped = q.enqueue(pod(9, Priority::control(0))).unwrap();
        assert_eq!(dropped.priority, Priority::payload(2));
        assert_eq!(q.len(), 3);
        assert_eq!(q.pop().unwrap().priority, Priority::control(0));
    }

    #[test]
    fn newcomer_dropped_when_worst() {
        let mut q = PodQueue::new(1);
        assert!(q.enqueue(pod(0, Priority::payload(3))).is_none());
        assert_eq!(q.enqueue(pod(1, Priority::payload(3))).unwrap().index, 1);
        assert_eq!(q.enqueue(pod(2, Priority::payload(5))).unwrap().index, 2);
    }

    #[test]
    fn empty_queue_accepts() {
        let mut q = PodQueue::new(8);
        q.enqueue(pod(0, Priority::payload(0)));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn custody_evicts_lowest_then_oldest() {
        let mut s = CustodyStore::new(pid(7), 2);
        assert!(s.store(pod(0, Priority::payload(0)), 0).is_none());
        assert!(s.store(pod(1, Priority::payload(3)), 0).is_none());
        assert_eq!(s.store(pod(2, Priority::payload(5)), 0).unwrap().priority, Priority::payload(5));
        assert_eq!(s.store(pod(3, Priority::payload(0)), 1).unwrap().priority, Priority::payload(3));
        // tie on priority: oldest goes first
        assert_eq!(s.store(pod(4, Priority::payload(0)), 2).unwrap().index, 0);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn custody_flush_and_ttl() {
        let mut s = CustodyStore::new(pid(7), 10);
        s.store(pod(0, Priority::payload(4)), 0);
        s.store(pod(1, Priority::control(1)), 5);
        let out = s.expire(6, 3);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].index, 0);
        let flushed = s.flush(&pid(3));
        assert_eq!(flushed.len(), 1);
        assert!(s.is_empty());
        assert!(s.flush(&pid(3)).is_empty());
    }

    #[test]
    fn seen_set_flags_other_copies_only() {
        let mut seen = SeenSet::new(2);
        let p = pod(0, Priority::payload(0));
        assert!(!seen.is_duplicate(&p));
        assert!(!seen.is_duplicate(&p));
        let mut copy = p.clone();
        copy.replica = 1;
        assert!(seen.is_duplicate(&copy));
        seen.is_duplicate(&pod(1, Priority::payload(0)));
        seen.is_duplicate(&pod(2, Priority::payload(0)));
        // original evicted FIFO; the copy now passes
        assert!(!seen.is_duplicate(&copy));
    }
}
