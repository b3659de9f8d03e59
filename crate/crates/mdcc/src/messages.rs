//! Wire vocabulary exchanged between app servers and storage nodes, plus the
//! timer kinds nodes schedule on themselves. Every message is a plain value;
//! the simulator owns delivery order and timing.

use serde::{Deserialize, Serialize};

use crate::types::{
    Ballot, Decision, DcId, Key, NodeId, OptionId, RoundMeta, RoundRange, TxnId, UpdateOption,
    Value, ValueConstraint, Verdict, Version,
};
use std::collections::BTreeMap;

/// Content proposed for one Paxos round of a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundProposal {
    /// An ordinary transaction option.
    Txn(UpdateOption),
    /// Deadlock-avoidance dual decision: re-affirm the outstanding option of
    /// the previous round and learn the blocked newcomer as rejected.
    Dual {
        keep: OptionId,
        reject: UpdateOption,
    },
    /// Close a commutative round: fixes the full set of decided options and
    /// the resulting value so every replica converges on the same version.
    EpochClose {
        decided: Vec<(UpdateOption, Decision)>,
        value: Option<Value>,
    },
    /// Recovery fence: learn a specific option as rejected without its
    /// content (used when no surviving replica holds the option itself).
    Reject {
        option: OptionId,
        writeset: Vec<Key>,
    },
    /// Round filler used by recovery when no proposal could have been chosen.
    Noop,
}

impl RoundProposal {
    /// Stable identity for quorum counting.
    pub fn pid(&self) -> ProposalId {
        match self {
            RoundProposal::Txn(o) => ProposalId::Txn(o.id()),
            RoundProposal::Dual { keep, reject } => ProposalId::Dual(*keep, reject.id()),
            RoundProposal::EpochClose { decided, .. } => {
                let mut ids: Vec<OptionId> = decided.iter().map(|(o, _)| o.id()).collect();
                ids.sort();
                let mut h = crate::trace::Fnv::new();
                for id in ids {
                    h.write_str(&id.to_string());
                }
                ProposalId::Close(h.finish())
            }
            RoundProposal::Reject { option, .. } => ProposalId::Reject(*option),
            RoundProposal::Noop => ProposalId::Noop,
        }
    }

    pub fn txn_option(&self) -> Option<&UpdateOption> {
        match self {
            RoundProposal::Txn(o) => Some(o),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProposalId {
    Txn(OptionId),
    Dual(OptionId, OptionId),
    Close(u64),
    Reject(OptionId),
    Noop,
}

/// Acceptor reply to a proposal (fast or classic).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcceptResult {
    /// The proposal was recorded with the given local verdict.
    Accepted {
        pid: ProposalId,
        verdict: Verdict,
    },
    /// A different proposal already occupies this round at an equal-or-higher
    /// ballot (fast-round first-option rule, or a racing classic proposal).
    Conflict {
        existing: ProposalId,
    },
    /// The round at `at` holds an accepted option whose transaction outcome
    /// is still unknown; only a dual-learn (or a classic re-proposal of the
    /// outstanding option itself) may proceed.
    Blocked {
        outstanding: OptionId,
        at: u64,
    },
    /// The targeted round is governed by a classic ballot; the proposer must
    /// go through the round's master.
    ReferMaster {
        meta: RoundMeta,
    },
    /// Commutative proposal without an open commutative round.
    NeedEpoch,
    /// Commutative proposal refused by the demarcation limit.
    LimitExceeded,
    /// This transaction's option already has a learned fate here; the
    /// carried verdict/decision are quorum-backed. Re-proposals must not
    /// occupy a new round.
    AlreadyDecided {
        round: u64,
        verdict: Verdict,
        decision: Decision,
    },
    /// Ballot lower than the current promise.
    StaleBallot {
        promised: Ballot,
    },
    /// Round already decided locally; carries what was learned for catch-up.
    OldRound {
        round: u64,
        pid: ProposalId,
    },
    /// Round is ahead of this replica's chain (it is still catching up).
    FutureRound {
        next: u64,
    },
}

/// Per-round state reported in a Phase1b message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub ballot: Ballot,
    pub proposal: RoundProposal,
    pub verdict: Verdict,
    pub learned: bool,
}

/// Snapshot of an open commutative round in a Phase1b message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochReport {
    pub round: u64,
    pub base: Value,
    pub pending: Vec<UpdateOption>,
    pub decided: Vec<(UpdateOption, Decision)>,
}

/// Learn status of one transaction's option on one key, as visible to a
/// single replica. Used by dangling-transaction recovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyLearnStatus {
    /// This replica executed or recorded the learned decision.
    Learned { verdict: Verdict, decision: Decision },
    /// The option is accepted here but its outcome is unknown.
    Pending { round: u64, verdict: Verdict },
    /// This replica has never seen the option.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Msg {
    // --- MDCC consensus ------------------------------------------------
    Phase1a {
        key: Key,
        ballot: Ballot,
        range: RoundRange,
        fast: bool,
        reply_to: NodeId,
    },
    Phase1b {
        key: Key,
        ballot: Ballot,
        ok: bool,
        promised: Ballot,
        executed_upto: u64,
        latest: Option<(u64, Value)>,
        reports: Vec<RoundReport>,
        epoch: Option<EpochReport>,
        from: NodeId,
    },
    Phase2a {
        key: Key,
        ballot: Ballot,
        round: u64,
        proposal: RoundProposal,
        reply_to: NodeId,
    },
    Phase2b {
        key: Key,
        round: u64,
        ballot: Ballot,
        acceptor: NodeId,
        /// The option this replies to, when the proposal was a transaction
        /// option (refusals carry it so the proposer can route the reply).
        re: Option<OptionId>,
        result: AcceptResult,
    },
    /// Fast-round proposal straight from an app server; the replica slots it
    /// into its current open round under the implicit fast ballot.
    FastPropose {
        option: UpdateOption,
        reply_to: NodeId,
    },
    /// Transaction-level outcome for one option; executing it is a new
    /// version of the record whether the option committed or aborted.
    Learned {
        key: Key,
        round: u64,
        proposal: RoundProposal,
        verdict: Verdict,
        decision: Decision,
    },

    // --- master interactions -------------------------------------------
    /// Route an option through the round's master (classic rounds), possibly
    /// flagging that the sender observed a fast-round conflict to resolve.
    ProposeViaMaster {
        option: UpdateOption,
        conflict: bool,
        reply_to: NodeId,
    },
    /// Master (or recovery) informs the owning coordinator of a learned
    /// verdict for one of its options. `structural` means the round's
    /// consensus content was not the option itself (a dual-learn, fence, or
    /// an already-decided echo) and the replicas already hold the decision;
    /// the owner must not re-broadcast round content for it.
    MasterReport {
        key: Key,
        round: u64,
        option: OptionId,
        verdict: Verdict,
        structural: bool,
    },
    /// Ask the key's master to open a commutative round.
    OpenEpochReq {
        key: Key,
    },
    /// Master opens a commutative round at `round` with the given base
    /// value; replicas derive the demarcation limit locally.
    SetBase {
        key: Key,
        round: u64,
        base: Value,
        constraints: BTreeMap<String, ValueConstraint>,
    },

    // --- reads -----------------------------------------------------------
    ReadReq {
        key: Key,
        reply_to: NodeId,
        token: u64,
    },
    ReadRsp {
        key: Key,
        token: u64,
        /// Latest committed (round, value); `None` if absent.
        version: Option<(u64, Value)>,
        from: NodeId,
    },

    // --- recovery / anti-entropy ----------------------------------------
    StatusReq {
        txn: TxnId,
        key: Key,
        reply_to: NodeId,
    },
    StatusRsp {
        txn: TxnId,
        key: Key,
        status: KeyLearnStatus,
        writeset: Vec<Key>,
        pending_option: Option<UpdateOption>,
        from: NodeId,
    },
    SyncReq {
        key: Key,
        from_round: u64,
        reply_to: NodeId,
    },
    SyncRsp {
        key: Key,
        versions: Vec<Version>,
    },

    // --- two-phase commit baseline ---------------------------------------
    TpcBegin {
        txn: TxnId,
        options: Vec<UpdateOption>,
        reply_to: NodeId,
    },
    TpcPrepare {
        txn: TxnId,
        option: UpdateOption,
        reply_to: NodeId,
    },
    TpcVote {
        txn: TxnId,
        key: Key,
        yes: bool,
        from: NodeId,
    },
    TpcDecision {
        txn: TxnId,
        key: Key,
        commit: bool,
        reply_to: NodeId,
    },
    TpcAck {
        txn: TxnId,
        key: Key,
        from: NodeId,
    },
    TpcDone {
        txn: TxnId,
        committed: bool,
    },

    // --- quorum-write baseline --------------------------------------------
    QwWrite {
        key: Key,
        value: Value,
        version: u64,
        writer: TxnId,
        reply_to: NodeId,
    },
    QwAck {
        key: Key,
        version: u64,
        writer: TxnId,
        from: NodeId,
    },
}

impl Msg {
    /// Transaction the message is doing work for, when attributable. The
    /// benchmark counts per-transaction message cost from this.
    pub fn txn(&self) -> Option<TxnId> {
        match self {
            Msg::Phase2a { proposal, .. } | Msg::Learned { proposal, .. } => {
                proposal.txn_option().map(|o| o.txn)
            }
            Msg::FastPropose { option, .. } | Msg::ProposeViaMaster { option, .. } => {
                Some(option.txn)
            }
            Msg::Phase2b { re, .. } => re.map(|id| id.txn),
            Msg::MasterReport { option, .. } => Some(option.txn),
            Msg::StatusReq { txn, .. } | Msg::StatusRsp { txn, .. } => Some(*txn),
            Msg::TpcBegin { txn, .. }
            | Msg::TpcPrepare { txn, .. }
            | Msg::TpcVote { txn, .. }
            | Msg::TpcDecision { txn, .. }
            | Msg::TpcAck { txn, .. }
            | Msg::TpcDone { txn, .. } => Some(*txn),
            Msg::QwWrite { writer, .. } | Msg::QwAck { writer, .. } => Some(*writer),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Msg::Phase1a { .. } => "phase1a",
            Msg::Phase1b { .. } => "phase1b",
            Msg::Phase2a { .. } => "phase2a",
            Msg::Phase2b { .. } => "phase2b",
            Msg::FastPropose { .. } => "fast_propose",
            Msg::Learned { .. } => "learned",
            Msg::ProposeViaMaster { .. } => "propose_via_master",
            Msg::MasterReport { .. } => "master_report",
            Msg::OpenEpochReq { .. } => "open_epoch_req",
            Msg::SetBase { .. } => "set_base",
            Msg::ReadReq { .. } => "read_req",
            Msg::ReadRsp { .. } => "read_rsp",
            Msg::StatusReq { .. } => "status_req",
            Msg::StatusRsp { .. } => "status_rsp",
            Msg::SyncReq { .. } => "sync_req",
            Msg::SyncRsp { .. } => "sync_rsp",
            Msg::TpcBegin { .. } => "tpc_begin",
            Msg::TpcPrepare { .. } => "tpc_prepare",
            Msg::TpcVote { .. } => "tpc_vote",
            Msg::TpcDecision { .. } => "tpc_decision",
            Msg::TpcAck { .. } => "tpc_ack",
            Msg::TpcDone { .. } => "tpc_done",
            Msg::QwWrite { .. } => "qw_write",
            Msg::QwAck { .. } => "qw_ack",
        }
    }
}

/// Timer kinds a node can schedule on itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimerKind {
    /// SLO deadline of a transaction at its app server.
    SloDeadline { txn: TxnId },
    /// Re-drive a transaction's unlearned keys.
    TxnRetry { txn: TxnId },
    /// Retry outstanding reads of a transaction.
    ReadRetry { txn: TxnId },
    /// Replica-side watchdog: a pending option has waited too long for its
    /// transaction outcome.
    PendingOption { key: Key, option: OptionId },
    /// Replica-side watchdog: the learned chain has a gap.
    ChainGap { key: Key, round: u64 },
    /// Master work-loop retry (phase timeouts, blocked rounds, backoff).
    MasterTick { key: Key },
    /// Recovery session progress check.
    RecoveryTick { txn: TxnId },
    /// 2PC coordinator re-sends prepares/decisions for a stalled transaction.
    TpcRetry { txn: TxnId },
    /// Quorum-write client retry.
    QwRetry { txn: TxnId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub src: NodeId,
    pub dst: NodeId,
    pub msg: Msg,
}

/// What a popped simulator event contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Deliver(Envelope),
    Timer { node: NodeId, kind: TimerKind },
    /// Opaque token handed back to the harness driving the simulation.
    Driver { token: u64 },
    FailDc { dc: DcId },
    HealDc { dc: DcId },
    KillNode { node: NodeId },
}
