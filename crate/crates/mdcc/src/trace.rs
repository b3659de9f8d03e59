//! Structured event trace. Every protocol-relevant happening is appended as
//! one line-serializable record; the benchmark computes all metrics from this
//! stream alone, and the safety observer consumes it incrementally.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use std::borrow::Cow;

use crate::messages::ProposalId;
use crate::types::{Decision, DcId, Key, NodeId, TxnId, UpdateOption, Verdict};

/// FNV-1a, hand-rolled so payload digests are stable across platforms and
/// std versions.
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn write_str(&mut self, s: &str) {
        self.write(s.as_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

pub fn digest_str(s: &str) -> u64 {
    let mut h = Fnv::new();
    h.write_str(s);
    h.finish()
}

/// Which stage callback fired for a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    OnFailure,
    OnAccept,
    OnCommit,
    Finally,
    FinallyRemote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    /// Network-level record: message handed to the simulator.
    Send {
        t: u64,
        src: NodeId,
        dst: NodeId,
        kind: Cow<'static, str>,
        digest: u64,
        txn: Option<TxnId>,
    },
    Deliver {
        t: u64,
        src: NodeId,
        dst: NodeId,
        kind: Cow<'static, str>,
        digest: u64,
    },
    Drop {
        t: u64,
        src: NodeId,
        dst: NodeId,
        kind: Cow<'static, str>,
        reason: Cow<'static, str>,
    },
    DcFailed {
        t: u64,
        dc: DcId,
    },
    DcHealed {
        t: u64,
        dc: DcId,
    },
    NodeKilled {
        t: u64,
        node: NodeId,
    },

    // --- protocol-level -------------------------------------------------
    TxnStart {
        t: u64,
        txn: TxnId,
        writes: u32,
    },
    /// Full option content, once per (transaction, key); the observer's
    /// registry for conflict and constraint accounting.
    OptionRegistered {
        t: u64,
        option: UpdateOption,
    },
    Proposed {
        t: u64,
        txn: TxnId,
        key: Key,
        fast: bool,
    },
    KeyLearned {
        t: u64,
        txn: TxnId,
        key: Key,
        round: u64,
        verdict: Verdict,
    },
    /// Consensus content of one round as observed at one node (replicas on
    /// execution, coordinators on learning). The observer cross-checks that
    /// all observations of one (key, round) agree.
    RoundDecided {
        t: u64,
        node: NodeId,
        key: Key,
        round: u64,
        pid: ProposalId,
        verdict: Verdict,
    },
    /// An option inside a commutative round got its transaction decision at
    /// one replica.
    EpochOptionDecided {
        t: u64,
        node: NodeId,
        key: Key,
        round: u64,
        option: crate::types::OptionId,
        decision: Decision,
    },
    TxnDecided {
        t: u64,
        txn: TxnId,
        decision: Decision,
        mode: TxnMode,
        conflicts: u32,
    },
    Collision {
        t: u64,
        key: Key,
        round: u64,
    },
    DualLearn {
        t: u64,
        key: Key,
        round: u64,
        kept: crate::types::OptionId,
        rejected: crate::types::OptionId,
    },
    StageFired {
        t: u64,
        txn: TxnId,
        stage: Stage,
        success: bool,
        timeout: bool,
    },
    PromiseMoved {
        t: u64,
        node: NodeId,
        key: Key,
        ballot: crate::types::Ballot,
    },
    ReadServed {
        t: u64,
        node: NodeId,
        key: Key,
        round: Option<u64>,
        value_digest: u64,
        session: Option<u64>,
    },
    RecoveryStarted {
        t: u64,
        node: NodeId,
        txn: TxnId,
    },
    /// Commit applied at a replica for a committed delta / physical write;
    /// lets the observer track global committed values.
    ValueCommitted {
        t: u64,
        node: NodeId,
        key: Key,
        round: u64,
        value_digest: u64,
    },
    TpcBlocked {
        t: u64,
        txn: TxnId,
        since: u64,
    },
    QwAcked {
        t: u64,
        key: Key,
        parent: u64,
        writer: TxnId,
    },
    Violation {
        t: u64,
        rule: Cow<'static, str>,
        detail: String,
    },
}

/// Protocol path a transaction took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnMode {
    Fast,
    Classic,
    Mixed,
}

impl TraceEvent {
    pub fn time(&self) -> u64 {
        match self {
            TraceEvent::Send { t, .. }
            | TraceEvent::Deliver { t, .. }
            | TraceEvent::Drop { t, .. }
            | TraceEvent::DcFailed { t, .. }
            | TraceEvent::DcHealed { t, .. }
            | TraceEvent::NodeKilled { t, .. }
            | TraceEvent::TxnStart { t, .. }
            | TraceEvent::OptionRegistered { t, .. }
            | TraceEvent::Proposed { t, .. }
            | TraceEvent::KeyLearned { t, .. }
            | TraceEvent::RoundDecided { t, .. }
            | TraceEvent::EpochOptionDecided { t, .. }
            | TraceEvent::TxnDecided { t, .. }
            | TraceEvent::Collision { t, .. }
            | TraceEvent::DualLearn { t, .. }
            | TraceEvent::StageFired { t, .. }
            | TraceEvent::PromiseMoved { t, .. }
            | TraceEvent::ReadServed { t, .. }
            | TraceEvent::RecoveryStarted { t, .. }
            | TraceEvent::ValueCommitted { t, .. }
            | TraceEvent::TpcBlocked { t, .. }
            | TraceEvent::QwAcked { t, .. }
            | TraceEvent::Violation { t, .. } => *t,
        }
    }
}

/// Where trace events go. Every event lands in a scratch buffer the
/// simulator drains into the observer after each step; retained events feed
/// metrics and determinism checks; a file sink streams JSON lines.
pub struct TraceSink {
    /// Retain network-level Deliver/Drop events too (full traces).
    collect_network: bool,
    pub events: Vec<TraceEvent>,
    scratch: Vec<TraceEvent>,
    file: Option<BufWriter<File>>,
}

impl TraceSink {
    /// Retains protocol events and Sends (metrics need per-transaction
    /// message counts) but not deliveries.
    pub fn collecting() -> Self {
        TraceSink {
            collect_network: false,
            events: Vec::new(),
            scratch: Vec::new(),
            file: None,
        }
    }

    /// Retains everything, including deliveries and drops.
    pub fn full() -> Self {
        TraceSink {
            collect_network: true,
            events: Vec::new(),
            scratch: Vec::new(),
            file: None,
        }
    }

    pub fn attach_file(&mut self, path: &Path) -> std::io::Result<()> {
        self.file = Some(BufWriter::new(File::create(path)?));
        Ok(())
    }

    pub fn to_file(path: &Path, collect_network: bool) -> std::io::Result<Self> {
        Ok(TraceSink {
            collect_network,
            events: Vec::new(),
            scratch: Vec::new(),
            file: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, ev: TraceEvent) {
        if let Some(f) = &mut self.file {
            // Serialization of these enums cannot fail.
            let line = serde_json::to_string(&ev).expect("trace event serializes");
            let _ = writeln!(f, "{line}");
        }
        let network_only = matches!(ev, TraceEvent::Deliver { .. } | TraceEvent::Drop { .. });
        if self.collect_network || !network_only {
            self.events.push(ev.clone());
        }
        self.scratch.push(ev);
    }

    pub fn scratch_len(&self) -> usize {
        self.scratch.len()
    }

    pub fn scratch_from(&self, mark: usize) -> &[TraceEvent] {
        &self.scratch[mark..]
    }

    pub fn take_scratch(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.scratch)
    }

    pub fn flush(&mut self) {
        if let Some(f) = &mut self.file {
            let _ = f.flush();
        }
    }

    /// Serialize the retained events to one string (determinism checks).
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&serde_json::to_string(ev).expect("trace event serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parse a trace file written by `TraceSink::to_file` back into events.
pub fn read_trace_file(path: &Path) -> std::io::Result<Vec<TraceEvent>> {
    let data = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in data.lines() {
        if line.is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(ev);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_stable() {
        // Frozen expected value: FNV-1a of "mdcc" computed by hand once.
        assert_eq!(digest_str(""), 0xcbf29ce484222325);
        let a = digest_str("mdcc");
        let b = digest_str("mdcc");
        assert_eq!(a, b);
        assert_ne!(digest_str("mdcc"), digest_str("mdcd"));
    }

    #[test]
    fn trace_roundtrips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let mut sink = TraceSink::to_file(&path, true).unwrap();
        sink.push(TraceEvent::DcFailed {
            t: 5,
            dc: DcId(1),
        });
        sink.push(TraceEvent::TxnStart {
            t: 9,
            txn: TxnId {
                node: NodeId(3),
                seq: 1,
            },
            writes: 2,
        });
        sink.flush();
        let back = read_trace_file(&path).unwrap();
        assert_eq!(back, sink.events);
    }
}
