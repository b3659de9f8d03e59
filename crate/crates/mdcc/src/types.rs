//! Shared protocol vocabulary: ballots, round metadata, quorum sizes, update
//! options and record versions.
//!
//! Everything in this module is a plain value type with a total order where
//! the protocol needs one. None of it holds interior mutability, so values
//! can be copied freely between the coordinator, replica and simulator
//! layers.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Data-center identifier; indexes the latency matrix.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct DcId(pub u8);

impl fmt::Display for DcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dc{}", self.0)
    }
}

/// Node identifier, unique across storage nodes and app servers.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Table identifier; the key space is partitioned per table.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct TableId(pub u8);

/// Record key: table plus a numeric primary key.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct Key {
    pub table: TableId,
    pub id: u64,
}

impl Key {
    pub fn new(table: u8, id: u64) -> Self {
        Key {
            table: TableId(table),
            id,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}/{}", self.table.0, self.id)
    }
}

/// Globally unique transaction identifier: issuing node plus local sequence.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct TxnId {
    pub node: NodeId,
    pub seq: u64,
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}.{}", self.node.0, self.seq)
    }
}

/// Identity of one option: a transaction writes at most one option per key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OptionId {
    pub txn: TxnId,
    pub key: Key,
}

impl fmt::Display for OptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.txn, self.key)
    }
}

/// Paxos ballot. The derived lexicographic order over
/// `(classic, number, server)` is exactly the protocol order: every classic
/// ballot outranks every fast ballot, then the proposal number decides, then
/// the server id breaks ties. `server = None` is the implicit fast proposer
/// and orders below any real server.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct Ballot {
    pub classic: bool,
    pub number: u32,
    pub server: Option<NodeId>,
}

impl Ballot {
    /// The system-wide default ballot: fast, number 0, no server. Every
    /// record implicitly starts promised to this ballot.
    pub const IMPLICIT_FAST: Ballot = Ballot {
        classic: false,
        number: 0,
        server: None,
    };

    pub fn classic(number: u32, server: NodeId) -> Self {
        Ballot {
            classic: true,
            number,
            server: Some(server),
        }
    }

    pub fn fast(number: u32, server: NodeId) -> Self {
        Ballot {
            classic: false,
            number,
            server: Some(server),
        }
    }

    pub fn is_implicit_fast(&self) -> bool {
        *self == Ballot::IMPLICIT_FAST
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = if self.classic { "c" } else { "f" };
        match self.server {
            Some(s) => write!(f, "{}{}:{}", mode, self.number, s),
            None => write!(f, "{}{}:-", mode, self.number),
        }
    }
}

/// Total-order comparison for ballots; exposed as a named operation in
/// addition to the `Ord` impl so call sites read like the protocol text.
pub fn ballot_compare(a: &Ballot, b: &Ballot) -> std::cmp::Ordering {
    a.cmp(b)
}

/// A contiguous range of round (version) indices, end-inclusive.
/// `end = None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRange {
    pub start: u64,
    pub end: Option<u64>,
}

impl RoundRange {
    pub fn new(start: u64, end: Option<u64>) -> Self {
        if let Some(e) = end {
            assert!(start <= e, "round range start must not exceed end");
        }
        RoundRange { start, end }
    }

    pub fn unbounded(start: u64) -> Self {
        RoundRange { start, end: None }
    }

    pub fn contains(&self, round: u64) -> bool {
        round >= self.start && self.end.map_or(true, |e| round <= e)
    }
}

impl fmt::Display for RoundRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.end {
            Some(e) => write!(f, "[{},{}]", self.start, e),
            None => write!(f, "[{},inf)", self.start),
        }
    }
}

/// Per-round-range metadata: whether the rounds run fast or classic, and the
/// ballot governing them. The system-wide default is `[0, inf, fast, ballot
/// 0]`; it is never stored per record until a master overrides it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundMeta {
    pub range: RoundRange,
    pub fast: bool,
    pub ballot: Ballot,
}

impl RoundMeta {
    /// The implicit table-wide default covering all rounds.
    pub fn default_fast() -> Self {
        RoundMeta {
            range: RoundRange::unbounded(0),
            fast: true,
            ballot: Ballot::IMPLICIT_FAST,
        }
    }
}

/// Quorum sizes for a replication group of `n` storage nodes.
///
/// Invariants (checked by `quorum_sizes` and brute-forced in tests):
/// any two classic quorums intersect, any fast quorum intersects any classic
/// quorum, and any two fast quorums together with any classic quorum share at
/// least one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumSpec {
    pub n: usize,
    pub q_classic: usize,
    pub q_fast: usize,
}

/// Derive quorum sizes for `n` replicas: the smallest majority for classic
/// quorums and the smallest fast quorum satisfying the intersection
/// requirements.
pub fn quorum_sizes(n: usize) -> QuorumSpec {
    assert!(n >= 1, "need at least one replica");
    let q_classic = n / 2 + 1;
    let mut q_fast = q_classic;
    while q_fast <= n {
        let two_fast_one_classic = 2 * q_fast + q_classic >= 2 * n + 1;
        let fast_classic = q_fast + q_classic > n;
        if two_fast_one_classic && fast_classic {
            break;
        }
        q_fast += 1;
    }
    assert!(q_fast <= n, "no valid fast quorum size for n={n}");
    QuorumSpec {
        n,
        q_classic,
        q_fast,
    }
}

/// A record value. Inserted rows carry an opaque blob; records updated
/// commutatively carry named integer attributes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Value {
    Blob(String),
    Counters(BTreeMap<String, i64>),
}

impl Value {
    pub fn counters<I: IntoIterator<Item = (&'static str, i64)>>(attrs: I) -> Self {
        Value::Counters(
            attrs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )
    }

    pub fn counter(&self, attr: &str) -> Option<i64> {
        match self {
            Value::Counters(m) => m.get(attr).copied(),
            Value::Blob(_) => None,
        }
    }

    /// Apply attribute deltas, treating missing attributes as zero.
    pub fn apply_deltas(&self, deltas: &BTreeMap<String, i64>) -> Value {
        let mut m = match self {
            Value::Counters(m) => m.clone(),
            Value::Blob(_) => BTreeMap::new(),
        };
        for (attr, delta) in deltas {
            *m.entry(attr.clone()).or_insert(0) += delta;
        }
        Value::Counters(m)
    }
}

/// Domain constraint on one numeric attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ValueConstraint {
    pub min: Option<i64>,
    pub max: Option<i64>,
}

impl ValueConstraint {
    pub fn at_least(min: i64) -> Self {
        ValueConstraint {
            min: Some(min),
            max: None,
        }
    }
}

/// Commutative update: per-attribute deltas plus the domain constraints the
/// storage nodes must uphold while accepting it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommutativeUpdate {
    pub deltas: BTreeMap<String, i64>,
    pub constraints: BTreeMap<String, ValueConstraint>,
}

/// The two shapes an option can take. A physical update replaces the record
/// wholesale and is conflict-checked against the version it read; an insert
/// carries an empty `v_read`, a delete writes a tombstone (`v_write = None`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateKind {
    Physical {
        v_read: Option<u64>,
        v_write: Option<Value>,
    },
    Commutative(CommutativeUpdate),
}

/// A proposed-but-not-executed record change. Options carry the whole
/// transaction's write-set keys so any storage node can reconstruct a
/// dangling transaction from its log alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateOption {
    pub txn: TxnId,
    pub key: Key,
    pub kind: UpdateKind,
    pub writeset: Vec<Key>,
    /// When set, a durable remote-callback note fires (at least once) on any
    /// node that learns this transaction's outcome.
    pub remote_callback: Option<String>,
}

impl UpdateOption {
    pub fn new(txn: TxnId, key: Key, kind: UpdateKind, mut writeset: Vec<Key>) -> Self {
        if !writeset.contains(&key) {
            writeset.push(key);
        }
        UpdateOption {
            txn,
            key,
            kind,
            writeset,
            remote_callback: None,
        }
    }

    pub fn id(&self) -> OptionId {
        OptionId {
            txn: self.txn,
            key: self.key,
        }
    }

    pub fn is_commutative(&self) -> bool {
        matches!(self.kind, UpdateKind::Commutative(_))
    }
}

/// Local accept/reject verdict on an option: the write-write conflict check
/// (or escrow check) outcome. Verdicts are values, not errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
}

/// Transaction-level decision carried by Learned messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Decision {
    Commit,
    Abort,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Commit => write!(f, "commit"),
            Decision::Abort => write!(f, "abort"),
        }
    }
}

/// One entry of a record's version chain. Rounds are dense; a version whose
/// option was rejected or aborted advances the round without changing the
/// value. `value` is the record state after this round executed (`None` =
/// absent or tombstoned), which makes the chain self-contained for state
/// transfer and replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Version {
    pub round: u64,
    pub by: Option<TxnId>,
    pub decision: Decision,
    pub value: Option<Value>,
    pub fast: bool,
}
