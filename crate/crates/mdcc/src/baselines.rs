//! Baseline commit protocols over the same simulated cluster: two-phase
//! commit (prepare locks on every replica of every key, unanimous votes, a
//! decision round with acks) and plain quorum writes (no isolation, no
//! atomicity, last-writer-wins by version counter).

use std::collections::{BTreeMap, BTreeSet};

use crate::messages::{Msg, TimerKind};
use crate::replica::ReplicaSet;
use crate::sim::Ctx;
use crate::trace::TraceEvent;
use crate::types::{Decision, Key, NodeId, TxnId, UpdateOption, Value, Version};

/// Which commit protocol a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoKind {
    Mdcc,
    Tpc,
    /// Quorum writes acknowledging after `q` replicas.
    Qw { q: usize },
}

// ---------------------------------------------------------------------------
// Two-phase commit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TpcPhase {
    Preparing,
    Deciding,
    Done,
}

#[derive(Debug)]
struct TpcTxn {
    client: NodeId,
    options: Vec<UpdateOption>,
    /// One participant per (key, replica).
    participants: Vec<(Key, NodeId)>,
    votes: BTreeMap<(Key, NodeId), bool>,
    acks: BTreeSet<(Key, NodeId)>,
    phase: TpcPhase,
    commit: bool,
    started: u64,
    blocked_flagged: bool,
}

/// 2PC transaction-manager and participant state for one storage node. Any
/// storage node can manage transactions (the client picks its local one);
/// every replica of a written key participates with a per-record prepare
/// lock.
#[derive(Debug)]
pub struct TpcNode {
    pub node: NodeId,
    managed: BTreeMap<TxnId, TpcTxn>,
    locks: BTreeMap<Key, TxnId>,
    prepared: BTreeMap<(TxnId, Key), UpdateOption>,
}

impl TpcNode {
    pub fn new(node: NodeId) -> Self {
        TpcNode {
            node,
            managed: BTreeMap::new(),
            locks: BTreeMap::new(),
            prepared: BTreeMap::new(),
        }
    }

    pub fn on_begin(
        &mut self,
        txn: TxnId,
        options: Vec<UpdateOption>,
        reply_to: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        if let Some(t) = self.managed.get(&txn) {
            if t.phase == TpcPhase::Done {
                let commit = t.commit;
                ctx.send(
                    self.node,
                    reply_to,
                    Msg::TpcDone {
                        txn,
                        committed: commit,
                    },
                );
            }
            return;
        }
        let mut participants = Vec::new();
        for o in &options {
            for replica in ctx.topo.replicas_of(&o.key) {
                participants.push((o.key, replica));
            }
        }
        let state = TpcTxn {
            client: reply_to,
            options: options.clone(),
            participants,
            votes: BTreeMap::new(),
            acks: BTreeSet::new(),
            phase: TpcPhase::Preparing,
            commit: false,
            started: ctx.now,
            blocked_flagged: false,
        };
        self.managed.insert(txn, state);
        self.send_prepares(txn, ctx);
        ctx.timer(
            self.node,
            TimerKind::TpcRetry { txn },
            ctx.proto.tpc_retry_us,
        );
    }

    fn send_prepares(&mut self, txn: TxnId, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let Some(t) = self.managed.get(&txn) else {
            return;
        };
        let mut sends = Vec::new();
        for o in &t.options {
            for replica in ctx.topo.replicas_of(&o.key) {
                if !t.votes.contains_key(&(o.key, replica)) {
                    sends.push((replica, o.clone()));
                }
            }
        }
        for (replica, option) in sends {
            ctx.send(
                node,
                replica,
                Msg::TpcPrepare {
                    txn,
                    option,
                    reply_to: node,
                },
            );
        }
    }

    /// Participant side: vote yes iff the record is unlocked (or locked by
    /// this transaction) and the option validates against the committed
    /// state; a yes takes the lock.
    pub fn on_prepare(
        &mut self,
        replicas: &mut ReplicaSet,
        txn: TxnId,
        option: UpdateOption,
        reply_to: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        let key = option.key;
        let yes = match self.locks.get(&key) {
            Some(holder) if *holder != txn => false,
            _ => {
                let rec = replicas.record(key);
                let ok = rec.validate_option(&option) == crate::types::Verdict::Accept;
                if ok {
                    self.locks.insert(key, txn);
                    self.prepared.insert((txn, key), option);
                }
                ok
            }
        };
        ctx.send(
            self.node,
            reply_to,
            Msg::TpcVote {
                txn,
                key,
                yes,
                from: self.node,
            },
        );
    }

    pub fn on_vote(&mut self, txn: TxnId, key: Key, yes: bool, from: NodeId, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let Some(t) = self.managed.get_mut(&txn) else {
            return;
        };
        if t.phase != TpcPhase::Preparing {
            return;
        }
        t.votes.insert((key, from), yes);
        // Commit only on unanimous yes from every participant.
        if t.votes.len() < t.participants.len() {
            return;
        }
        t.phase = TpcPhase::Deciding;
        t.commit = t.votes.values().all(|v| *v);
        let decisions: Vec<(Key, NodeId)> = t.participants.clone();
        let commit = t.commit;
        for (key, replica) in decisions {
            ctx.send(
                node,
                replica,
                Msg::TpcDecision {
                    txn,
                    key,
                    commit,
                    reply_to: node,
                },
            );
        }
    }

    /// Participant side: apply (or discard) the prepared write, release the
    /// lock, and ack. Duplicate decisions are acked without re-applying.
    pub fn on_decision(
        &mut self,
        replicas: &mut ReplicaSet,
        txn: TxnId,
        key: Key,
        commit: bool,
        reply_to: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        if let Some(option) = self.prepared.remove(&(txn, key)) {
            if commit {
                let rec = replicas.record(key);
                let round = rec.executed_upto();
                let prev = rec.versions.last().and_then(|v| v.value.clone());
                let value = match &option.kind {
                    crate::types::UpdateKind::Physical { v_write, .. } => v_write.clone(),
                    crate::types::UpdateKind::Commutative(c) => Some(
                        prev.unwrap_or_else(|| Value::Counters(BTreeMap::new()))
                            .apply_deltas(&c.deltas),
                    ),
                };
                rec.versions.push(Version {
                    round,
                    by: Some(txn),
                    decision: Decision::Commit,
                    value,
                    fast: false,
                });
            }
        }
        if self.locks.get(&key) == Some(&txn) {
            self.locks.remove(&key);
        }
        ctx.send(
            self.node,
            reply_to,
            Msg::TpcAck {
                txn,
                key,
                from: self.node,
            },
        );
    }

    pub fn on_ack(&mut self, txn: TxnId, key: Key, from: NodeId, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let Some(t) = self.managed.get_mut(&txn) else {
            return;
        };
        if t.phase != TpcPhase::Deciding {
            return;
        }
        t.acks.insert((key, from));
        if t.acks.len() < t.participants.len() {
            return;
        }
        t.phase = TpcPhase::Done;
        let client = t.client;
        let commit = t.commit;
        ctx.send(
            node,
            client,
            Msg::TpcDone {
                txn,
                committed: commit,
            },
        );
    }

    /// Re-drive stalled prepares or decisions. 2PC blocks while any
    /// participant is unreachable; the observer records the blocked time.
    pub fn on_tick(&mut self, txn: TxnId, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let Some(t) = self.managed.get_mut(&txn) else {
            return;
        };
        match t.phase {
            TpcPhase::Done => return,
            TpcPhase::Preparing => {
                if !t.blocked_flagged && ctx.now.saturating_sub(t.started) > ctx.proto.max_rtt_us * 4
                {
                    t.blocked_flagged = true;
                    ctx.trace.push(TraceEvent::TpcBlocked {
                        t: ctx.now,
                        txn,
                        since: t.started,
                    });
                }
                self.send_prepares(txn, ctx);
            }
            TpcPhase::Deciding => {
                let missing: Vec<(Key, NodeId)> = t
                    .participants
                    .iter()
                    .filter(|p| !t.acks.contains(*p))
                    .cloned()
                    .collect();
                let commit = t.commit;
                for (key, replica) in missing {
                    ctx.send(
                        node,
                        replica,
                        Msg::TpcDecision {
                            txn,
                            key,
                            commit,
                            reply_to: node,
                        },
                    );
                }
            }
        }
        ctx.timer(
            self.node,
            TimerKind::TpcRetry { txn },
            ctx.proto.tpc_retry_us,
        );
    }
}

// ---------------------------------------------------------------------------
// Quorum writes
// ---------------------------------------------------------------------------

/// Last-writer-wins replica store for quorum-write runs. Versions are plain
/// counters supplied by writers; ties break by writer id.
#[derive(Debug, Default)]
pub struct QwStore {
    pub records: BTreeMap<Key, (u64, Value, TxnId)>,
}

impl QwStore {
    pub fn on_write(
        &mut self,
        node: NodeId,
        key: Key,
        value: Value,
        version: u64,
        writer: TxnId,
        reply_to: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        let apply = match self.records.get(&key) {
            Some((v, _, w)) => version > *v || (version == *v && writer > *w),
            None => true,
        };
        if apply {
            self.records.insert(key, (version, value, writer));
        }
        ctx.send(
            node,
            reply_to,
            Msg::QwAck {
                key,
                version,
                writer,
                from: node,
            },
        );
    }

    pub fn read(&self, key: &Key) -> Option<(u64, Value)> {
        self.records.get(key).map(|(v, value, _)| (*v, value.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qw_store_is_last_writer_wins_by_version_then_writer() {
        let mut s = QwStore::default();
        let k = Key::new(0, 1);
        let w1 = TxnId {
            node: NodeId(10),
            seq: 1,
        };
        let w2 = TxnId {
            node: NodeId(11),
            seq: 1,
        };
        s.records.insert(k, (2, Value::Blob("a".into()), w1));
        // Lower version ignored.
        let stale = match s.records.get(&k) {
            Some((v, _, w)) => 1 > *v || (1 == *v && w2 > *w),
            None => true,
        };
        assert!(!stale);
        // Same version, higher writer wins.
        let tie = match s.records.get(&k) {
            Some((v, _, w)) => 2 > *v || (2 == *v && w2 > *w),
            None => true,
        };
        assert!(tie);
    }
}
