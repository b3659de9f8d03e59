//! Read strategies over the replicated store: local read-committed reads,
//! quorum reads for the latest stable version, and master-pinned monotonic
//! session reads.
//!
//! Replicas only ever answer reads from executed versions (or the committed
//! portion of an open commutative round), never from pending options; the
//! strategies here decide who to ask and how to aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{Key, NodeId, TxnId, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadMode {
    Local,
    Quorum,
    Monotonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Freshness {
    Local,
    QuorumLatest,
    Monotonic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResult {
    pub key: Key,
    /// Latest committed (round, value); `None` when the record is absent.
    pub value: Option<(u64, Value)>,
    pub source: NodeId,
    pub freshness: Freshness,
}

/// Per-session read state: the highest round observed per key. Used to turn
/// "the pinned master missed a write quorum" into a detectable condition.
#[derive(Debug, Clone, Default)]
pub struct Session {
    pub watermark: BTreeMap<Key, u64>,
}

impl Session {
    pub fn observe(&mut self, key: Key, round: u64) {
        let w = self.watermark.entry(key).or_insert(0);
        if round > *w {
            *w = round;
        }
    }

    pub fn watermark_of(&self, key: &Key) -> Option<u64> {
        self.watermark.get(key).copied()
    }
}

/// How an aggregated read resolves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Pending,
    Done(ReadResult),
    /// The pinned replica is behind the session watermark; retry as a
    /// quorum read (or re-pin).
    Escalate,
}

/// One outstanding read issued by a transaction.
#[derive(Debug, Clone)]
pub struct ReadState {
    pub txn: TxnId,
    pub key: Key,
    pub mode: ReadMode,
    pub sent_to: Vec<NodeId>,
    pub need: usize,
    pub replies: BTreeMap<NodeId, Option<(u64, Value)>>,
}

impl ReadState {
    pub fn new(txn: TxnId, key: Key, mode: ReadMode, sent_to: Vec<NodeId>, need: usize) -> Self {
        ReadState {
            txn,
            key,
            mode,
            sent_to,
            need,
            replies: BTreeMap::new(),
        }
    }

    pub fn on_reply(&mut self, from: NodeId, version: Option<(u64, Value)>) {
        self.replies.entry(from).or_insert(version);
    }

    /// Aggregate once enough replies are in.
    pub fn resolve(&self, watermark: Option<u64>) -> Resolution {
        if self.replies.len() < self.need {
            return Resolution::Pending;
        }
        match self.mode {
            ReadMode::Local => {
                let (src, version) = self.replies.iter().next().expect("need >= 1");
                Resolution::Done(ReadResult {
                    key: self.key,
                    value: version.clone(),
                    source: *src,
                    freshness: Freshness::Local,
                })
            }
            ReadMode::Quorum => {
                let mut best: Option<(NodeId, (u64, Value))> = None;
                for (src, version) in &self.replies {
                    if let Some((round, value)) = version {
                        let better = best.as_ref().map_or(true, |(_, (r, _))| *round > *r);
                        if better {
                            best = Some((*src, (*round, value.clone())));
                        }
                    }
                }
                let (source, value) = match best {
                    Some((src, rv)) => (src, Some(rv)),
                    None => (*self.replies.keys().next().expect("need >= 1"), None),
                };
                Resolution::Done(ReadResult {
                    key: self.key,
                    value,
                    source,
                    freshness: Freshness::QuorumLatest,
                })
            }
            ReadMode::Monotonic => {
                let (src, version) = self.replies.iter().next().expect("need >= 1");
                let round = version.as_ref().map(|(r, _)| *r);
                if let Some(w) = watermark {
                    if round.map_or(true, |r| r < w) {
                        return Resolution::Escalate;
                    }
                }
                Resolution::Done(ReadResult {
                    key: self.key,
                    value: version.clone(),
                    source: *src,
                    freshness: Freshness::Monotonic,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn txn() -> TxnId {
        TxnId {
            node: NodeId(9),
            seq: 1,
        }
    }

    fn k() -> Key {
        Key::new(0, 1)
    }

    #[test]
    fn local_read_takes_single_reply() {
        let mut rs = ReadState::new(txn(), k(), ReadMode::Local, vec![NodeId(0)], 1);
        assert_eq!(rs.resolve(None), Resolution::Pending);
        rs.on_reply(NodeId(0), Some((3, Value::Blob("a".into()))));
        match rs.resolve(None) {
            Resolution::Done(r) => {
                assert_eq!(r.value, Some((3, Value::Blob("a".into()))));
                assert_eq!(r.freshness, Freshness::Local);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quorum_read_returns_highest_round() {
        let mut rs = ReadState::new(
            txn(),
            k(),
            ReadMode::Quorum,
            vec![NodeId(0), NodeId(1), NodeId(2)],
            3,
        );
        rs.on_reply(NodeId(0), Some((1, Value::Blob("old".into()))));
        rs.on_reply(NodeId(1), Some((3, Value::Blob("new".into()))));
        rs.on_reply(NodeId(2), Some((2, Value::Blob("mid".into()))));
        match rs.resolve(None) {
            Resolution::Done(r) => {
                assert_eq!(r.value, Some((3, Value::Blob("new".into()))));
                assert_eq!(r.source, NodeId(1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quorum_read_of_absent_record_is_none() {
        let mut rs = ReadState::new(txn(), k(), ReadMode::Quorum, vec![NodeId(0), NodeId(1)], 2);
        rs.on_reply(NodeId(0), None);
        rs.on_reply(NodeId(1), None);
        match rs.resolve(None) {
            Resolution::Done(r) => assert_eq!(r.value, None),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn monotonic_read_escalates_when_master_is_behind_watermark() {
        let mut rs = ReadState::new(txn(), k(), ReadMode::Monotonic, vec![NodeId(0)], 1);
        rs.on_reply(NodeId(0), Some((2, Value::Blob("stale".into()))));
        assert_eq!(rs.resolve(Some(5)), Resolution::Escalate);
        // At or above the watermark the pinned read stands.
        let mut ok = ReadState::new(txn(), k(), ReadMode::Monotonic, vec![NodeId(0)], 1);
        ok.on_reply(NodeId(0), Some((5, Value::Blob("fresh".into()))));
        assert!(matches!(ok.resolve(Some(5)), Resolution::Done(_)));
    }

    #[test]
    fn session_watermark_is_monotone() {
        let mut s = Session::default();
        s.observe(k(), 4);
        s.observe(k(), 2);
        assert_eq!(s.watermark_of(&k()), Some(4));
    }
}
