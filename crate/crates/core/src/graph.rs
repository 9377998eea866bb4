//! Undirected AoI adjacency with breadth-first helpers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::identity::PersistentId;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AoiGraph {
    adj: BTreeMap<PersistentId, BTreeSet<PersistentId>>,
}

impl AoiGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, v: PersistentId) {
        self.adj.entry(v).or_default();
    }

    pub fn add_edge(&mut self, a: &PersistentId, b: &PersistentId) {
        if a == b {
            return;
        }
        self.adj.entry(a.clone()).or_default().insert(b.clone());
        self.adj.entry(b.clone()).or_default().insert(a.clone());
    }

    pub fn remove_edge(&mut self, a: &PersistentId, b: &PersistentId) -> bool {
        let x = self.adj.get_mut(a).is_some_and(|s| s.remove(b));
        let y = self.adj.get_mut(b).is_some_and(|s| s.remove(a));
        x || y
    }

    pub fn has_edge(&self, a: &PersistentId, b: &PersistentId) -> bool {
        self.adj.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn contains(&self, v: &PersistentId) -> bool {
        self.adj.contains_key(v)
    }

    pub fn vertices(&self) -> impl Iterator<Item = &PersistentId> {
        self.adj.keys()
    }

    pub fn neighbors(&self, v: &PersistentId) -> impl Iterator<Item = &PersistentId> {
        self.adj.get(v).into_iter().flatten()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&PersistentId, &PersistentId)> {
        self.adj
            .iter()
            .flat_map(|(a, ns)| ns.iter().filter(move |b| a < *b).map(move |b| (a, b)))
    }

    /// Hop distance from `src` to every vertex reachable from it.
    pub fn distances_from(&self, src: &PersistentId) -> BTreeMap<PersistentId, u32> {
        let mut dist = BTreeMap::new();
        if !self.contains(src) {
            return dist;
        }
        dist.insert(src.clone(), 0);
        let mut q = VecDeque::from([src.clone()]);
        while let Some(v) = q.pop_front() {
            let d = dist[&v];
            for n in self.neighbors(&v) {
                if !dist.contains_key(n) {
                    dist.insert(n.clone(), d + 1);
                    q.push_back(n.clone());
                }
            }
        }
        dist
    }

    pub fn distance(&self, a: &PersistentId, b: &PersistentId) -> Option<u32> {
        self.distances_from(a).get(b).copied()
    }

    pub fn reachable(&self, a: &PersistentId, b: &PersistentId) -> bool {
        a == b || self.distance(a, b).is_some()
    }

    pub fn is_connected(&self) -> bool {
        match self.adj.keys().next() {
            Some(first) => self.distances_from(first).len() == self.adj.len(),
            None => true,
        }
    }
}
