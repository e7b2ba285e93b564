//! Replay store of high-`p` queries.
//!
//! Entries carry a priority `P` and a staleness counter `beta`. Every training
//! step the bank ages each resident entry (`beta += 1`) and then blends the
//! staleness into the priority with momentum `alpha`:
//! `P <- alpha * P + (1 - alpha) * beta`. Pops are deterministic top-M by
//! priority with FIFO tie-breaking, and each query can be popped at most
//! `max_replays` times over its lifetime.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type QueryId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub query_id: QueryId,
    #[serde(rename = "P")]
    pub priority: f64,
    #[serde(rename = "beta")]
    pub staleness: u32,
    pub replay_count: u32,
    pub insertion_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub momentum: f64,
    pub max_replays: u32,
    pub capacity: Option<usize>,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            max_replays: 2,
            capacity: None,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "bank momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.max_replays == 0 {
            return Err(Error::Config("max_replays must be >= 1".into()));
        }
        if self.capacity == Some(0) {
            return Err(Error::Config("bank capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Serializable bank state, including lifetime replay counts of queries that
/// are no longer resident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankState {
    pub entries: Vec<MemoryEntry>,
    pub replay_counts: BTreeMap<QueryId, u32>,
    pub next_seq: u64,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    config: BankConfig,
    entries: Vec<MemoryEntry>,
    replay_counts: BTreeMap<QueryId, u32>,
    next_seq: u64,
}

/// Pop order: higher priority first, then earlier insertion.
fn pop_order(a: &MemoryEntry, b: &MemoryEntry) -> Ordering {
    b.priority
        .total_cmp(&a.priority)
        .then(a.insertion_seq.cmp(&b.insertion_seq))
}

impl MemoryBank {
    pub fn new(config: BankConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            entries: Vec::new(),
            replay_counts: BTreeMap::new(),
            next_seq: 0,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn replay_count(&self, query_id: QueryId) -> u32 {
        self.replay_counts.get(&query_id).copied().unwrap_or(0)
    }

    pub fn contains(&self, query_id: QueryId) -> bool {
        self.entries.iter().any(|e| e.query_id == query_id)
    }

    /// Inserts or refreshes `query_id` with priority `p` and zero staleness.
    ///
    /// Returns `false` when the query has used up its replays, or when the
    /// bank is full and `p` does not beat the current lowest-priority entry.
    pub fn push(&mut self, query_id: QueryId, p: f64) -> bool {
        let replay_count = self.replay_count(query_id);
        if replay_count >= self.config.max_replays {
            return false;
        }
        let seq = self.next_seq;
        if let Some(entry) = self.entries.iter_mut().find(|e| e.query_id == query_id) {
            entry.priority = p;
            entry.staleness = 0;
            entry.insertion_seq = seq;
            self.next_seq += 1;
            return true;
        }
        if let Some(cap) = self.config.capacity {
            if self.entries.len() >= cap {
                // Evict the entry that would be popped last, if the newcomer outranks it.
                let (idx, last) = self
                    .entries
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| pop_order(a, b))
                    .expect("capacity > 0 implies a resident entry");
                if p <= last.priority {
                    return false;
                }
                self.entries.swap_remove(idx);
            }
        }
        self.entries.push(MemoryEntry {
            query_id,
            priority: p,
            staleness: 0,
            replay_count,
            insertion_seq: seq,
        });
        self.next_seq += 1;
        true
    }

    /// Removes and returns up to `m` queries in pop order.
    pub fn pop_batch(&mut self, m: usize) -> Vec<QueryId> {
        self.entries.sort_by(pop_order);
        let take = m.min(self.entries.len());
        let popped: Vec<QueryId> = self.entries.drain(..take).map(|e| e.query_id).collect();
        for &q in &popped {
            *self.replay_counts.entry(q).or_insert(0) += 1;
        }
        popped
    }

    /// Ages every resident entry by one step and applies the momentum update.
    pub fn tick(&mut self, alpha: f64) {
        for e in &mut self.entries {
            e.staleness += 1;
            e.priority = alpha * e.priority + (1.0 - alpha) * f64::from(e.staleness);
        }
    }

    /// Copy of the resident entries in pop order.
    pub fn snapshot(&self) -> Vec<MemoryEntry> {
        let mut out = self.entries.clone();
        out.sort_by(pop_order);
        out
    }

    pub fn state(&self) -> BankState {
        BankState {
            entries: self.snapshot(),
            replay_counts: self.replay_counts.clone(),
            next_seq: self.next_seq,
        }
    }

    pub fn from_state(config: BankConfig, state: BankState) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            entries: state.entries,
            replay_counts: state.replay_counts,
            next_seq: state.next_seq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank() -> MemoryBank {
        MemoryBank::new(BankConfig::default()).unwrap()
    }

    fn entry(bank: &MemoryBank, q: QueryId) -> MemoryEntry {
        bank.snapshot().into_iter().find(|e| e.query_id == q).unwrap()
    }

    #[test]
    fn push_into_empty_bank() {
        let mut b = bank();
        assert!(b.push(7, 0.75));
        let e = entry(&b, 7);
        assert_eq!((e.priority, e.staleness), (0.75, 0));
    }

    #[test]
    fn push_rejected_after_two_replays() {
        let mut b = bank();
        for _ in 0..2 {
            assert!(b.push(7, 0.9));
            assert_eq!(b.pop_batch(1), vec![7]);
        }
        assert!(!b.push(7, 0.9));
        assert!(b.is_empty());
    }

    #[test]
    fn repush_refreshes_entry() {
        let mut b = bank();
        b.push(7, 0.5);
        b.push(8, 0.5);
        // Get q7 to P = 0.5, beta = 3 by hand.
        b.entries[0].staleness = 3;
        assert!(b.push(7, 0.8));
        assert_eq!(b.len(), 2);
        let e = entry(&b, 7);
        assert_eq!((e.priority, e.staleness), (0.8, 0));
    }

    #[test]
    fn pop_highest_first() {
        let mut b = bank();
        b.push(0, 0.975);
        b.push(1, 0.6);
        b.push(2, 0.9);
        assert_eq!(b.pop_batch(2), vec![0, 2]);
        assert_eq!(b.pop_batch(3), vec![1]);
        assert!(b.pop_batch(3).is_empty());
    }

    #[test]
    fn ties_break_fifo() {
        let mut b = bank();
        b.push(10, 0.5);
        b.push(11, 0.5);
        assert_eq!(b.pop_batch(1), vec![10]);
    }

    #[test]
    fn tick_examples() {
        let mut b = bank();
        b.push(1, 0.75);
        b.entries[0].staleness = 2;
        b.push(2, 0.0);
        b.tick(0.9);
        let e1 = entry(&b, 1);
        assert_eq!(e1.staleness, 3);
        assert!((e1.priority - 0.975).abs() < 1e-12);
        let e2 = entry(&b, 2);
        assert_eq!(e2.staleness, 1);
        assert!((e2.priority - 0.1).abs() < 1e-12);
    }

    #[test]
    fn momentum_of_one_rejected() {
        let cfg = BankConfig {
            momentum: 1.0,
            ..BankConfig::default()
        };
        assert!(matches!(MemoryBank::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_examples() {
        let mut b = bank();
        assert!(b.snapshot().is_empty());
        b.push(1, 0.9);
        b.push(2, 0.85);
        assert!(b.snapshot().iter().all(|e| e.staleness == 0));
        b.tick(0.9);
        assert!(b.snapshot().iter().all(|e| e.staleness == 1));
    }

    #[test]
    fn capacity_evicts_lowest() {
        let mut b = MemoryBank::new(BankConfig {
            capacity: Some(2),
            ..BankConfig::default()
        })
        .unwrap();
        b.push(1, 0.9);
        b.push(2, 0.85);
        assert!(!b.push(3, 0.8));
        assert!(b.push(4, 0.95));
        let ids: Vec<_> = b.snapshot().iter().map(|e| e.query_id).collect();
        assert_eq!(ids, vec![4, 1]);
    }

    #[test]
    fn state_round_trip() {
        let mut b = bank();
        b.push(1, 0.9);
        b.push(2, 0.85);
        b.pop_batch(1);
        b.tick(0.9);
        let json = serde_json::to_string(&b.state()).unwrap();
        let back: BankState = serde_json::from_str(&json).unwrap();
        let restored = MemoryBank::from_state(BankConfig::default(), back).unwrap();
        assert_eq!(restored.state(), b.state());
        assert!(json.contains("\"P\"") && json.contains("\"beta\""));
    }

    proptest! {
        #[test]
        fn priority_recurrence_matches_closed_form(p0 in 0.0f64..1.0, alpha in 0.0f64..0.99, n in 0usize..60) {
            let mut b = MemoryBank::new(BankConfig { momentum: alpha, ..BankConfig::default() }).unwrap();
            b.push(1, p0);
            for _ in 0..n {
                b.tick(alpha);
            }
            let closed = alpha.powi(n as i32) * p0
                + (1.0 - alpha) * (1..=n).map(|j| alpha.powi((n - j) as i32) * j as f64).sum::<f64>();
            let got = entry(&b, 1).priority;
            prop_assert!((got - closed).abs() <= 1e-12 * closed.abs().max(1.0));
        }

        #[test]
        fn pop_matches_sorted_order(ps in proptest::collection::vec(0.0f64..1.0, 0..20), m in 0usize..25) {
            let mut b = bank();
            for (i, &p) in ps.iter().enumerate() {
                // Coarse values force ties.
                b.push(i as QueryId, (p * 4.0).round() / 4.0);
            }
            let mut expected: Vec<(f64, u64, QueryId)> =
                b.snapshot().iter().map(|e| (e.priority, e.insertion_seq, e.query_id)).collect();
            expected.sort_by(|a, c| c.0.total_cmp(&a.0).then(a.1.cmp(&c.1)));
            let want: Vec<QueryId> = expected.iter().take(m).map(|t| t.2).collect();
            prop_assert_eq!(b.pop_batch(m), want);
        }

        #[test]
        fn replay_cap_and_capacity_hold(ops in proptest::collection::vec((0u32..6, 0.0f64..1.0, 0usize..3), 0..80)) {
            let mut b = MemoryBank::new(BankConfig { capacity: Some(4), ..BankConfig::default() }).unwrap();
            let mut popped = BTreeMap::<QueryId, u32>::new();
            for (q, p, m) in ops {
                b.push(q, p);
                for id in b.pop_batch(m) {
                    *popped.entry(id).or_default() += 1;
                }
                b.tick(0.9);
                prop_assert!(b.len() <= 4);
                let mut ids: Vec<_> = b.snapshot().iter().map(|e| e.query_id).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), b.len());
            }
            prop_assert!(popped.values().all(|&c| c <= 2));
        }
    }
}
