//! Storage-node state machine, per record: Paxos acceptor and learner over
//! one round per record version, the option log, escrow acceptance for
//! commutative updates, and version application.
//!
//! Each [`ReplicaRecord`] is a single-threaded state machine: one message in,
//! a state transition, zero or more effects out. Records are independent of
//! each other; the enclosing [`ReplicaSet`] owns the per-node option log and
//! turns effects into messages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::messages::{
    AcceptResult, EpochReport, KeyLearnStatus, ProposalId, RoundProposal, RoundReport,
};
use crate::types::{
    Ballot, CommutativeUpdate, Decision, Key, QuorumSpec, RoundMeta, RoundRange, TxnId,
    UpdateKind, UpdateOption, Value, ValueConstraint, Verdict, Version,
};

// ---------------------------------------------------------------------------
// Demarcation limit
// ---------------------------------------------------------------------------

/// An exact rational bound `num/den`. Comparisons cross-multiply so there is
/// no float ambiguity right at the limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limit {
    pub num: i64,
    pub den: i64,
}

impl Limit {
    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `value >= self` under exact arithmetic.
    pub fn at_or_above(&self, value: i64) -> bool {
        value * self.den >= self.num
    }

    /// `value <= self` under exact arithmetic.
    pub fn at_or_below(&self, value: i64) -> bool {
        value * self.den <= self.num
    }
}

/// Lower demarcation limit for a commutative round: with `n` replicas, fast
/// quorum `q_fast`, base value `x` and a minimum constraint normalized to 0,
/// storage nodes must refuse options that could take the value below
/// `L = (n - q_fast) / n * x`.
pub fn compute_limit(n: usize, q_fast: usize, x: i64) -> Limit {
    lower_limit(n, q_fast, x, 0)
}

/// General form for a minimum constraint at `min`:
/// `L = min + (n - q_fast)/n * (x - min)`.
pub fn lower_limit(n: usize, q_fast: usize, x: i64, min: i64) -> Limit {
    let n_i = n as i64;
    let slack = (n - q_fast) as i64;
    Limit {
        num: min * n_i + slack * (x - min),
        den: n_i,
    }
}

/// Mirrored upper limit for a maximum constraint at `max`:
/// `U = max - (n - q_fast)/n * (max - x)`.
pub fn upper_limit(n: usize, q_fast: usize, x: i64, max: i64) -> Limit {
    let n_i = n as i64;
    let slack = (n - q_fast) as i64;
    Limit {
        num: max * n_i - slack * (max - x),
        den: n_i,
    }
}

/// Escrow window for one constrained attribute inside a commutative round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscrowWindow {
    pub lo: Option<Limit>,
    pub hi: Option<Limit>,
}

/// An open commutative round. The base value and the limits are fixed when
/// the master opens the round and are not recomputed after commits; the
/// committed portion accrues into `decided`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommEpoch {
    pub round: u64,
    pub base: BTreeMap<String, i64>,
    pub windows: BTreeMap<String, EscrowWindow>,
    pub pending: BTreeMap<crate::types::OptionId, UpdateOption>,
    pub decided: BTreeMap<crate::types::OptionId, (UpdateOption, Decision)>,
}

impl CommEpoch {
    fn attr(&self, name: &str) -> i64 {
        self.base.get(name).copied().unwrap_or(0)
    }

    /// Value of one attribute counting only committed options.
    pub fn committed_value(&self, name: &str) -> i64 {
        let mut v = self.attr(name);
        for (opt, d) in self.decided.values() {
            if *d == Decision::Commit {
                if let UpdateKind::Commutative(c) = &opt.kind {
                    v += c.deltas.get(name).copied().unwrap_or(0);
                }
            }
        }
        v
    }

    /// Current working value across all attributes (committed options only).
    pub fn working_value(&self) -> Value {
        let mut m = self.base.clone();
        for (opt, d) in self.decided.values() {
            if *d == Decision::Commit {
                if let UpdateKind::Commutative(c) = &opt.kind {
                    for (a, dv) in &c.deltas {
                        *m.entry(a.clone()).or_insert(0) += dv;
                    }
                }
            }
        }
        Value::Counters(m)
    }

    fn pending_sum(&self, name: &str, pick: impl Fn(i64) -> i64) -> i64 {
        self.pending
            .values()
            .filter_map(|o| match &o.kind {
                UpdateKind::Commutative(c) => c.deltas.get(name).copied(),
                _ => None,
            })
            .map(pick)
            .sum()
    }

    /// Escrow acceptance: the new option must keep every constrained
    /// attribute inside its window under every commit/abort combination of
    /// the currently pending options, with the new option itself committing.
    /// The worst case for a lower bound commits every pending decrement; for
    /// an upper bound every pending increment.
    pub fn escrow_check(&self, upd: &CommutativeUpdate) -> Verdict {
        for (name, delta) in &upd.deltas {
            let Some(win) = self.windows.get(name) else {
                continue;
            };
            let committed = self.committed_value(name);
            if let Some(lo) = &win.lo {
                let worst = committed + delta + self.pending_sum(name, |d| d.min(0));
                if !lo.at_or_above(worst) {
                    return Verdict::Reject;
                }
            }
            if let Some(hi) = &win.hi {
                let worst = committed + delta + self.pending_sum(name, |d| d.max(0));
                if !hi.at_or_below(worst) {
                    return Verdict::Reject;
                }
            }
        }
        Verdict::Accept
    }
}

// ---------------------------------------------------------------------------
// Option log
// ---------------------------------------------------------------------------

/// One line of the per-replica append-only option log. Replaying the log in
/// order reproduces the replica's record state exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub t: u64,
    pub key: Key,
    pub round: u64,
    pub ballot: Ballot,
    pub txn: Option<TxnId>,
    pub kind: LogKind,
    pub outcome: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogKind {
    Promise {
        range: RoundRange,
        fast: bool,
    },
    Accept {
        proposal: RoundProposal,
        verdict: Verdict,
    },
    Learn {
        proposal: RoundProposal,
        verdict: Verdict,
        decision: Decision,
    },
    EpochOpen {
        base: Value,
        constraints: BTreeMap<String, ValueConstraint>,
    },
    EpochAccept {
        option: UpdateOption,
    },
    Sync {
        versions: Vec<Version>,
    },
}

#[derive(Debug, Default)]
pub struct OptionLog {
    pub lines: Vec<LogLine>,
}

impl OptionLog {
    pub fn append(&mut self, line: LogLine) {
        self.lines.push(line);
    }

    pub fn write_to(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for line in &self.lines {
            writeln!(f, "{}", serde_json::to_string(line).expect("log line serializes"))?;
        }
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> std::io::Result<Vec<LogLine>> {
        let data = std::fs::read_to_string(path)?;
        let mut out = Vec::new();
        for line in data.lines() {
            if line.is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
            );
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Per-record acceptor/learner state
// ---------------------------------------------------------------------------

/// Acceptance state of one open (not yet executed) round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RoundSlot {
    pub accepted: Option<(Ballot, RoundProposal, Verdict)>,
    pub learned: Option<LearnedRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedRound {
    pub proposal: RoundProposal,
    pub verdict: Verdict,
    pub decision: Decision,
}

/// Locally known fate of one transaction's option on this record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecidedOption {
    pub round: u64,
    pub verdict: Verdict,
    pub decision: Decision,
    pub writeset: Vec<Key>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub key: Key,
    /// Highest ballot promised or accepted; never decreases.
    pub promised: Ballot,
    /// Round-metadata overrides, later entries superseding earlier ones.
    /// The implicit `[0, inf, fast, ballot 0]` default applies wherever no
    /// entry matches.
    pub meta: Vec<RoundMeta>,
    /// Executed version chain; dense rounds `0..versions.len()`.
    pub versions: Vec<Version>,
    /// Open rounds at or beyond the chain tip.
    pub slots: BTreeMap<u64, RoundSlot>,
    pub epoch: Option<CommEpoch>,
    /// Per-transaction option fates, kept for dangling-txn recovery.
    pub decided_options: BTreeMap<TxnId, DecidedOption>,
}

/// Effects a record hands back to its node shell.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    /// A version was appended to the chain.
    Executed {
        round: u64,
        pid: ProposalId,
        verdict: Verdict,
        decision: Decision,
        value_digest: u64,
        fast: bool,
    },
    /// An option inside the open commutative round got its decision.
    EpochOptionDecided {
        round: u64,
        option: crate::types::OptionId,
        decision: Decision,
    },
    /// A remote callback attached to this option should fire.
    RemoteCallback {
        txn: TxnId,
        note: String,
        decision: Decision,
    },
    /// The promise level moved (observer tracks monotonicity).
    PromiseMoved { ballot: Ballot },
    /// A learned round beyond the chain tip was buffered; the shell should
    /// arm a gap watchdog.
    GapDetected { next_needed: u64 },
    /// An accept-verdict option is now pending a transaction outcome; the
    /// shell arms the dangling-transaction watchdog.
    PendingArmed { option: crate::types::OptionId },
}

pub fn value_digest(v: &Option<Value>) -> u64 {
    crate::trace::digest_str(&serde_json::to_string(v).expect("value serializes"))
}

impl ReplicaRecord {
    pub fn new(key: Key) -> Self {
        ReplicaRecord {
            key,
            promised: Ballot::IMPLICIT_FAST,
            meta: Vec::new(),
            versions: Vec::new(),
            slots: BTreeMap::new(),
            epoch: None,
            decided_options: BTreeMap::new(),
        }
    }

    /// Effective metadata for one round: the last override containing it, or
    /// the implicit fast default.
    pub fn effective_meta(&self, round: u64) -> RoundMeta {
        self.meta
            .iter()
            .rev()
            .find(|m| m.range.contains(round))
            .copied()
            .unwrap_or_else(RoundMeta::default_fast)
    }

    pub fn executed_upto(&self) -> u64 {
        self.versions.len() as u64
    }

    /// First round with no learned outcome (the open commutative round
    /// counts as undecided until closed).
    pub fn first_undecided(&self) -> u64 {
        let mut r = self.executed_upto();
        loop {
            if self.epoch.as_ref().map_or(false, |e| e.round == r) {
                return r;
            }
            match self.slots.get(&r) {
                Some(slot) if slot.learned.is_some() => r += 1,
                _ => return r,
            }
        }
    }

    /// Latest committed version id and value, counting learned-but-not-yet-
    /// executed rounds (their outcome is fixed). This is what `v_read`
    /// comparisons and reads are answered from.
    pub fn committed_state(&self) -> (Option<u64>, Option<Value>) {
        let mut round = None;
        let mut value = None;
        for v in &self.versions {
            if v.decision == Decision::Commit {
                round = Some(v.round);
                value = v.value.clone();
            }
        }
        let mut r = self.executed_upto();
        while let Some(slot) = self.slots.get(&r) {
            let Some(l) = &slot.learned else { break };
            if l.decision == Decision::Commit {
                round = Some(r);
                value = match &l.proposal {
                    RoundProposal::Txn(o) => apply_option(&value, o),
                    RoundProposal::EpochClose { value: v, .. } => v.clone(),
                    _ => value,
                };
            }
            r += 1;
        }
        (round, value)
    }

    /// Latest committed state as served to readers. Inside an open
    /// commutative round the working value (base plus committed deltas) is
    /// the committed state and carries the round's version id.
    pub fn read_latest(&self) -> Option<(u64, Value)> {
        if let Some(e) = &self.epoch {
            return Some((e.round, e.working_value()));
        }
        let (round, value) = self.committed_state();
        match (round, value) {
            (Some(r), Some(v)) => Some((r, v)),
            _ => None,
        }
    }

    /// Write-write conflict check for a physical option; commutative options
    /// outside an open commutative round are checked directly against their
    /// constraints (rounds are serialized there, so the committed value is
    /// exact).
    pub fn validate_option(&self, option: &UpdateOption) -> Verdict {
        match &option.kind {
            UpdateKind::Physical { v_read, .. } => {
                let (cur_round, cur_value) = self.committed_state();
                match v_read {
                    None => {
                        if cur_value.is_none() {
                            Verdict::Accept
                        } else {
                            Verdict::Reject
                        }
                    }
                    Some(r) => {
                        if cur_round == Some(*r) && cur_value.is_some() {
                            Verdict::Accept
                        } else {
                            Verdict::Reject
                        }
                    }
                }
            }
            UpdateKind::Commutative(c) => {
                if let Some(epoch) = &self.epoch {
                    return epoch.escrow_check(c);
                }
                let (_, cur_value) = self.committed_state();
                for (name, delta) in &c.deltas {
                    let cur = cur_value
                        .as_ref()
                        .and_then(|v| v.counter(name))
                        .unwrap_or(0);
                    let next = cur + delta;
                    if let Some(cons) = c.constraints.get(name) {
                        if cons.min.map_or(false, |m| next < m)
                            || cons.max.map_or(false, |m| next > m)
                        {
                            return Verdict::Reject;
                        }
                    }
                }
                Verdict::Accept
            }
        }
    }

    fn verdict_for(&self, proposal: &RoundProposal) -> Verdict {
        match proposal {
            RoundProposal::Txn(o) => self.validate_option(o),
            // The dual decision's verdict applies to the rejected newcomer.
            RoundProposal::Dual { .. } | RoundProposal::Reject { .. } => Verdict::Reject,
            RoundProposal::EpochClose { .. } | RoundProposal::Noop => Verdict::Accept,
        }
    }

    /// Blocked/gap guard for accepting a proposal at `round`: every earlier
    /// open round must be decided, except that an accepted-unlearned option
    /// with an accept verdict may be overtaken by the dual-learn that
    /// re-affirms it.
    fn placement_check(&self, round: u64, proposal: &RoundProposal) -> Option<AcceptResult> {
        let e = self.executed_upto();
        let mut q = e;
        while q < round {
            if self.epoch.as_ref().map_or(false, |ep| ep.round == q) {
                return Some(AcceptResult::ReferMaster {
                    meta: self.effective_meta(q),
                });
            }
            match self.slots.get(&q) {
                Some(slot) if slot.learned.is_some() => {}
                Some(slot) => match &slot.accepted {
                    Some((_, RoundProposal::Txn(o), Verdict::Accept)) => {
                        let allowed = matches!(
                            proposal,
                            RoundProposal::Dual { keep, .. } if *keep == o.id()
                        ) && round == q + 1;
                        if !allowed {
                            return Some(AcceptResult::Blocked {
                                outstanding: o.id(),
                                at: q,
                            });
                        }
                    }
                    // Reject-verdict and structural proposals leave the value
                    // unchanged whatever happens; they do not block.
                    Some(_) => {}
                    None => {
                        return Some(AcceptResult::FutureRound { next: q });
                    }
                },
                None => {
                    return Some(AcceptResult::FutureRound { next: q });
                }
            }
            q += 1;
        }
        None
    }

    /// Shared acceptance core for classic Phase2a and fast proposals.
    pub fn accept_proposal(
        &mut self,
        ballot: Ballot,
        round: u64,
        proposal: RoundProposal,
        now: u64,
        log: &mut OptionLog,
        effects: &mut Vec<Effect>,
    ) -> AcceptResult {
        if round < self.executed_upto() {
            let v = &self.versions[round as usize];
            let pid = v
                .by
                .map(|txn| ProposalId::Txn(crate::types::OptionId { txn, key: self.key }))
                .unwrap_or(ProposalId::Noop);
            return AcceptResult::OldRound { round, pid };
        }
        if let RoundProposal::Txn(o) = &proposal {
            if let Some(fate) = self.decided_options.get(&o.txn) {
                return AcceptResult::AlreadyDecided {
                    round: fate.round,
                    verdict: fate.verdict,
                    decision: fate.decision,
                };
            }
        }
        if ballot < self.promised && !ballot.is_implicit_fast() {
            return AcceptResult::StaleBallot {
                promised: self.promised,
            };
        }
        if ballot.is_implicit_fast() && self.promised > Ballot::IMPLICIT_FAST {
            // An explicit promise exists; fast proposals are only admissible
            // in rounds whose effective metadata still says fast.
            let meta = self.effective_meta(round);
            if !meta.fast || meta.ballot > ballot {
                return AcceptResult::ReferMaster { meta };
            }
        }
        if let Some(slot) = self.slots.get(&round) {
            if let Some(l) = &slot.learned {
                let pid = l.proposal.pid();
                if pid == proposal.pid() {
                    return AcceptResult::Accepted {
                        pid,
                        verdict: l.verdict,
                    };
                }
                return AcceptResult::OldRound { round, pid };
            }
        }
        if let Some(refusal) = self.placement_check(round, &proposal) {
            return refusal;
        }
        let existing = self.slots.get(&round).and_then(|s| s.accepted.clone());
        if let Some((b_old, p_old, v_old)) = existing {
            if ballot < b_old {
                return AcceptResult::StaleBallot { promised: b_old };
            }
            if ballot == b_old {
                if p_old.pid() == proposal.pid() {
                    return AcceptResult::Accepted {
                        pid: p_old.pid(),
                        verdict: v_old,
                    };
                }
                return AcceptResult::Conflict {
                    existing: p_old.pid(),
                };
            }
            // Higher ballot replaces the previous acceptance below.
        }
        let verdict = self.verdict_for(&proposal);
        if ballot > self.promised {
            self.promised = ballot;
            effects.push(Effect::PromiseMoved { ballot });
        }
        let pid = proposal.pid();
        let txn = proposal.txn_option().map(|o| o.txn);
        log.append(LogLine {
            t: now,
            key: self.key,
            round,
            ballot,
            txn,
            kind: LogKind::Accept {
                proposal: proposal.clone(),
                verdict,
            },
            outcome: Some(format!("{verdict:?}").to_lowercase()),
        });
        let slot = self.slots.entry(round).or_default();
        slot.accepted = Some((ballot, proposal.clone(), verdict));
        if verdict == Verdict::Accept {
            if let RoundProposal::Txn(o) = &proposal {
                effects.push(Effect::PendingArmed { option: o.id() });
            }
        }
        AcceptResult::Accepted { pid, verdict }
    }

    /// Fast-round entry point: the proposer does not name a round; the
    /// replica slots the option into its first open round under the implicit
    /// fast ballot, or routes commutative options into the open commutative
    /// round.
    pub fn handle_fast_propose(
        &mut self,
        option: &UpdateOption,
        now: u64,
        log: &mut OptionLog,
        effects: &mut Vec<Effect>,
    ) -> (u64, AcceptResult) {
        if let Some(fate) = self.decided_options.get(&option.txn) {
            return (
                fate.round,
                AcceptResult::AlreadyDecided {
                    round: fate.round,
                    verdict: fate.verdict,
                    decision: fate.decision,
                },
            );
        }
        if option.is_commutative() {
            if let Some(epoch) = &self.epoch {
                let round = epoch.round;
                let meta = self.effective_meta(round);
                if !meta.fast {
                    return (round, AcceptResult::ReferMaster { meta });
                }
                if epoch.pending.contains_key(&option.id())
                    || epoch.decided.contains_key(&option.id())
                {
                    return (
                        round,
                        AcceptResult::Accepted {
                            pid: ProposalId::Txn(option.id()),
                            verdict: Verdict::Accept,
                        },
                    );
                }
                let UpdateKind::Commutative(c) = &option.kind else {
                    unreachable!()
                };
                if epoch.escrow_check(c) == Verdict::Reject {
                    return (round, AcceptResult::LimitExceeded);
                }
                log.append(LogLine {
                    t: now,
                    key: self.key,
                    round,
                    ballot: Ballot::IMPLICIT_FAST,
                    txn: Some(option.txn),
                    kind: LogKind::EpochAccept {
                        option: option.clone(),
                    },
                    outcome: Some("accept".into()),
                });
                let epoch = self.epoch.as_mut().expect("epoch open");
                epoch.pending.insert(option.id(), option.clone());
                effects.push(Effect::PendingArmed {
                    option: option.id(),
                });
                return (
                    round,
                    AcceptResult::Accepted {
                        pid: ProposalId::Txn(option.id()),
                        verdict: Verdict::Accept,
                    },
                );
            }
            let round = self.first_undecided();
            let meta = self.effective_meta(round);
            if !meta.fast {
                return (round, AcceptResult::ReferMaster { meta });
            }
            return (round, AcceptResult::NeedEpoch);
        }

        if self.epoch.is_some() {
            // A physical update cannot join a commutative round; the master
            // has to close it first.
            let round = self.epoch.as_ref().unwrap().round;
            return (
                round,
                AcceptResult::ReferMaster {
                    meta: self.effective_meta(round),
                },
            );
        }
        let round = self.first_undecided();
        let meta = self.effective_meta(round);
        if !meta.fast {
            return (round, AcceptResult::ReferMaster { meta });
        }
        let result = self.accept_proposal(
            Ballot::IMPLICIT_FAST,
            round,
            RoundProposal::Txn(option.clone()),
            now,
            log,
            effects,
        );
        (round, result)
    }

    /// Phase 1: promise a ballot for a round range and report everything
    /// accepted in it. A stale ballot gets a negative ack carrying the
    /// current promise.
    pub fn handle_phase1a(
        &mut self,
        ballot: Ballot,
        range: RoundRange,
        fast: bool,
        now: u64,
        log: &mut OptionLog,
        effects: &mut Vec<Effect>,
    ) -> (bool, Vec<RoundReport>, Option<EpochReport>) {
        if ballot < self.promised {
            return (false, Vec::new(), None);
        }
        if ballot > self.promised {
            self.promised = ballot;
            effects.push(Effect::PromiseMoved { ballot });
        }
        self.meta.push(RoundMeta {
            range,
            fast,
            ballot,
        });
        log.append(LogLine {
            t: now,
            key: self.key,
            round: range.start,
            ballot,
            txn: None,
            kind: LogKind::Promise { range, fast },
            outcome: None,
        });
        let mut reports = Vec::new();
        for (round, slot) in &self.slots {
            if !range.contains(*round) {
                continue;
            }
            if let Some((b, p, v)) = &slot.accepted {
                reports.push(RoundReport {
                    round: *round,
                    ballot: *b,
                    proposal: p.clone(),
                    verdict: *v,
                    learned: slot.learned.is_some(),
                });
            }
        }
        let epoch = self.epoch.as_ref().map(|e| EpochReport {
            round: e.round,
            base: Value::Counters(e.base.clone()),
            pending: e.pending.values().cloned().collect(),
            decided: e.decided.values().cloned().collect(),
        });
        (true, reports, epoch)
    }

    /// Open a commutative round at `round` with the given base value. Stale
    /// or premature opens are ignored; re-opens at the same round are
    /// idempotent.
    pub fn open_epoch(
        &mut self,
        round: u64,
        base: &Value,
        constraints: &BTreeMap<String, ValueConstraint>,
        quorum: &QuorumSpec,
        now: u64,
        log: &mut OptionLog,
    ) -> bool {
        if self.epoch.as_ref().map_or(false, |e| e.round == round) {
            return true;
        }
        if round != self.first_undecided() || self.epoch.is_some() {
            return false;
        }
        let base_map = match base {
            Value::Counters(m) => m.clone(),
            Value::Blob(_) => BTreeMap::new(),
        };
        let mut windows = BTreeMap::new();
        for (attr, cons) in constraints {
            let x = base_map.get(attr).copied().unwrap_or(0);
            windows.insert(
                attr.clone(),
                EscrowWindow {
                    lo: cons.min.map(|m| lower_limit(quorum.n, quorum.q_fast, x, m)),
                    hi: cons.max.map(|m| upper_limit(quorum.n, quorum.q_fast, x, m)),
                },
            );
        }
        log.append(LogLine {
            t: now,
            key: self.key,
            round,
            ballot: Ballot::IMPLICIT_FAST,
            txn: None,
            kind: LogKind::EpochOpen {
                base: base.clone(),
                constraints: constraints.clone(),
            },
            outcome: None,
        });
        self.epoch = Some(CommEpoch {
            round,
            base: base_map,
            windows,
            pending: BTreeMap::new(),
            decided: BTreeMap::new(),
        });
        true
    }

    /// Transaction-level outcome for one option (or a structural round
    /// decision). Duplicate deliveries are no-ops.
    pub fn handle_learned(
        &mut self,
        round: u64,
        proposal: RoundProposal,
        verdict: Verdict,
        decision: Decision,
        now: u64,
        log: &mut OptionLog,
        effects: &mut Vec<Effect>,
    ) {
        if round < self.executed_upto() {
            return;
        }
        let mut round = round;
        if let RoundProposal::Txn(o) = &proposal {
            if self.decided_options.contains_key(&o.txn) {
                return;
            }
            // Route the decision to wherever this replica actually holds the
            // option; broadcasts carry the sender's view of the round, which
            // a lagging or conflicting replica may not share.
            let own_slot = self.slots.iter().find(|(_, s)| {
                s.learned.is_none()
                    && matches!(&s.accepted, Some((_, RoundProposal::Txn(x), _)) if x.id() == o.id())
            });
            if let Some((r, _)) = own_slot {
                round = *r;
            }
        }
        // An option inside the open commutative round: record its decision.
        if let (Some(epoch), RoundProposal::Txn(o)) = (&mut self.epoch, &proposal) {
            if epoch.round == round && o.is_commutative() {
                if epoch.decided.contains_key(&o.id()) {
                    return;
                }
                epoch.pending.remove(&o.id());
                epoch.decided.insert(o.id(), (o.clone(), decision));
                self.decided_options.insert(
                    o.txn,
                    DecidedOption {
                        round,
                        verdict,
                        decision,
                        writeset: o.writeset.clone(),
                    },
                );
                log.append(LogLine {
                    t: now,
                    key: self.key,
                    round,
                    ballot: Ballot::IMPLICIT_FAST,
                    txn: Some(o.txn),
                    kind: LogKind::Learn {
                        proposal: proposal.clone(),
                        verdict,
                        decision,
                    },
                    outcome: Some(decision.to_string()),
                });
                effects.push(Effect::EpochOptionDecided {
                    round,
                    option: o.id(),
                    decision,
                });
                if let Some(note) = &o.remote_callback {
                    effects.push(Effect::RemoteCallback {
                        txn: o.txn,
                        note: note.clone(),
                        decision,
                    });
                }
                return;
            }
        }
        if round < self.executed_upto() {
            return;
        }
        let slot = self.slots.entry(round).or_default();
        if let Some(existing) = &slot.learned {
            if existing.proposal.pid() == proposal.pid() {
                return;
            }
            // The round's consensus chose other content; the transaction
            // decision itself still stands. Record the option's fate without
            // touching the chain.
            if let RoundProposal::Txn(o) = &proposal {
                self.decided_options.insert(
                    o.txn,
                    DecidedOption {
                        round,
                        verdict,
                        decision,
                        writeset: o.writeset.clone(),
                    },
                );
                if let Some(note) = &o.remote_callback {
                    effects.push(Effect::RemoteCallback {
                        txn: o.txn,
                        note: note.clone(),
                        decision,
                    });
                }
            }
            return;
        }
        slot.learned = Some(LearnedRound {
            proposal: proposal.clone(),
            verdict,
            decision,
        });
        let txn = proposal.txn_option().map(|o| o.txn);
        log.append(LogLine {
            t: now,
            key: self.key,
            round,
            ballot: Ballot::IMPLICIT_FAST,
            txn,
            kind: LogKind::Learn {
                proposal,
                verdict,
                decision,
            },
            outcome: Some(decision.to_string()),
        });
        self.execute_ready(effects);
        if self
            .slots
            .keys()
            .next()
            .map_or(false, |r| *r > self.executed_upto())
            && self.slots.values().any(|s| s.learned.is_some())
        {
            effects.push(Effect::GapDetected {
                next_needed: self.executed_upto(),
            });
        }
    }

    /// Adopt a peer's executed versions (anti-entropy catch-up).
    pub fn adopt_versions(
        &mut self,
        versions: &[Version],
        now: u64,
        log: &mut OptionLog,
        effects: &mut Vec<Effect>,
    ) {
        let mut adopted = Vec::new();
        for v in versions {
            if v.round != self.executed_upto() {
                continue;
            }
            if self.epoch.as_ref().map_or(false, |e| e.round == v.round) {
                // Our open commutative round was closed elsewhere; the close
                // version is authoritative.
                self.epoch = None;
            }
            self.slots.remove(&v.round);
            if let Some(txn) = v.by {
                self.decided_options.entry(txn).or_insert(DecidedOption {
                    round: v.round,
                    verdict: if v.decision == Decision::Commit {
                        Verdict::Accept
                    } else {
                        Verdict::Reject
                    },
                    decision: v.decision,
                    writeset: Vec::new(),
                });
            }
            effects.push(Effect::Executed {
                round: v.round,
                pid: ProposalId::Noop,
                verdict: if v.decision == Decision::Commit {
                    Verdict::Accept
                } else {
                    Verdict::Reject
                },
                decision: v.decision,
                value_digest: value_digest(&v.value),
                fast: v.fast,
            });
            self.versions.push(v.clone());
            adopted.push(v.clone());
        }
        if !adopted.is_empty() {
            log.append(LogLine {
                t: now,
                key: self.key,
                round: adopted[0].round,
                ballot: Ballot::IMPLICIT_FAST,
                txn: None,
                kind: LogKind::Sync { versions: adopted },
                outcome: None,
            });
            // Buffered learned rounds may now be executable.
            self.execute_ready(effects);
        }
    }

    /// Execute learned rounds in chain order. Committed options apply their
    /// write; aborted or rejected options advance the round unchanged.
    fn execute_ready(&mut self, effects: &mut Vec<Effect>) {
        loop {
            let next = self.executed_upto();
            let Some(slot) = self.slots.get(&next) else {
                break;
            };
            let Some(learned) = slot.learned.clone() else {
                break;
            };
            if self.epoch.as_ref().map_or(false, |e| e.round == next) {
                // Only the round's close (or an adopted close) may retire an
                // open commutative round.
                self.epoch = None;
            }
            self.slots.remove(&next);
            let prev = self.versions.last().and_then(|v| v.value.clone());
            let (by, value) = match (&learned.proposal, learned.decision) {
                (RoundProposal::Txn(o), Decision::Commit) => (Some(o.txn), apply_option(&prev, o)),
                (RoundProposal::Txn(o), Decision::Abort) => (Some(o.txn), prev),
                (RoundProposal::Dual { reject, .. }, _) => (Some(reject.txn), prev),
                (RoundProposal::Reject { option, .. }, _) => (Some(option.txn), prev),
                (RoundProposal::EpochClose { value, .. }, _) => (None, value.clone()),
                (RoundProposal::Noop, _) => (None, prev),
            };
            match &learned.proposal {
                RoundProposal::Txn(o) => {
                    self.decided_options.insert(
                        o.txn,
                        DecidedOption {
                            round: next,
                            verdict: learned.verdict,
                            decision: learned.decision,
                            writeset: o.writeset.clone(),
                        },
                    );
                    if let Some(note) = &o.remote_callback {
                        effects.push(Effect::RemoteCallback {
                            txn: o.txn,
                            note: note.clone(),
                            decision: learned.decision,
                        });
                    }
                }
                RoundProposal::Dual { reject, .. } => {
                    self.decided_options.insert(
                        reject.txn,
                        DecidedOption {
                            round: next,
                            verdict: Verdict::Reject,
                            decision: Decision::Abort,
                            writeset: reject.writeset.clone(),
                        },
                    );
                    if let Some(note) = &reject.remote_callback {
                        effects.push(Effect::RemoteCallback {
                            txn: reject.txn,
                            note: note.clone(),
                            decision: Decision::Abort,
                        });
                    }
                }
                RoundProposal::Reject { option, writeset } => {
                    self.decided_options.insert(
                        option.txn,
                        DecidedOption {
                            round: next,
                            verdict: Verdict::Reject,
                            decision: Decision::Abort,
                            writeset: writeset.clone(),
                        },
                    );
                }
                RoundProposal::EpochClose { decided, .. } => {
                    for (o, d) in decided {
                        self.decided_options.entry(o.txn).or_insert(DecidedOption {
                            round: next,
                            verdict: if *d == Decision::Commit {
                                Verdict::Accept
                            } else {
                                Verdict::Reject
                            },
                            decision: *d,
                            writeset: o.writeset.clone(),
                        });
                    }
                }
                RoundProposal::Noop => {}
            }
            let fast = self.effective_meta(next).fast;
            effects.push(Effect::Executed {
                round: next,
                pid: learned.proposal.pid(),
                verdict: learned.verdict,
                decision: learned.decision,
                value_digest: value_digest(&value),
                fast,
            });
            self.versions.push(Version {
                round: next,
                by,
                decision: learned.decision,
                value,
                fast,
            });
        }
    }

    /// Learn status of one transaction's option on this record.
    pub fn status_for(&self, txn: TxnId) -> (KeyLearnStatus, Vec<Key>) {
        if let Some(d) = self.decided_options.get(&txn) {
            return (
                KeyLearnStatus::Learned {
                    verdict: d.verdict,
                    decision: d.decision,
                },
                d.writeset.clone(),
            );
        }
        if let Some(e) = &self.epoch {
            for o in e.pending.values() {
                if o.txn == txn {
                    return (
                        KeyLearnStatus::Pending {
                            round: e.round,
                            verdict: Verdict::Accept,
                        },
                        o.writeset.clone(),
                    );
                }
            }
        }
        for (round, slot) in &self.slots {
            if let Some((_, RoundProposal::Txn(o), v)) = &slot.accepted {
                if o.txn == txn && slot.learned.is_none() {
                    return (
                        KeyLearnStatus::Pending {
                            round: *round,
                            verdict: *v,
                        },
                        o.writeset.clone(),
                    );
                }
            }
        }
        (KeyLearnStatus::Unknown, Vec::new())
    }

    /// Content of a pending option, if this replica holds it.
    pub fn pending_option(&self, option: &crate::types::OptionId) -> Option<UpdateOption> {
        if let Some(e) = &self.epoch {
            if let Some(o) = e.pending.get(option) {
                return Some(o.clone());
            }
        }
        for slot in self.slots.values() {
            if slot.learned.is_none() {
                if let Some((_, RoundProposal::Txn(o), _)) = &slot.accepted {
                    if o.id() == *option {
                        return Some(o.clone());
                    }
                }
            }
        }
        None
    }

    /// Is this option still waiting for its transaction outcome here?
    pub fn is_pending(&self, option: &crate::types::OptionId) -> bool {
        if let Some(e) = &self.epoch {
            if e.pending.contains_key(option) {
                return true;
            }
        }
        self.slots.values().any(|s| {
            s.learned.is_none()
                && matches!(
                    &s.accepted,
                    Some((_, RoundProposal::Txn(o), _)) if o.id() == *option
                )
        })
    }
}

/// Apply a committed option to a record value.
fn apply_option(prev: &Option<Value>, option: &UpdateOption) -> Option<Value> {
    match &option.kind {
        UpdateKind::Physical { v_write, .. } => v_write.clone(),
        UpdateKind::Commutative(c) => {
            let base = prev.clone().unwrap_or_else(|| Value::Counters(BTreeMap::new()));
            Some(base.apply_deltas(&c.deltas))
        }
    }
}

// ---------------------------------------------------------------------------
// Per-node replica collection
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReplicaSet {
    pub node: crate::types::NodeId,
    pub records: BTreeMap<Key, ReplicaRecord>,
    pub log: OptionLog,
    pub fired_callbacks: BTreeSet<TxnId>,
}

impl ReplicaSet {
    pub fn new(node: crate::types::NodeId) -> Self {
        ReplicaSet {
            node,
            records: BTreeMap::new(),
            log: OptionLog::default(),
            fired_callbacks: BTreeSet::new(),
        }
    }

    pub fn record(&mut self, key: Key) -> &mut ReplicaRecord {
        self.records
            .entry(key)
            .or_insert_with(|| ReplicaRecord::new(key))
    }

    pub fn get(&self, key: &Key) -> Option<&ReplicaRecord> {
        self.records.get(key)
    }

    /// Rebuild a replica's record state from its option log alone.
    pub fn replay(node: crate::types::NodeId, lines: &[LogLine]) -> ReplicaSet {
        let mut set = ReplicaSet::new(node);
        let mut scratch_log = OptionLog::default();
        let mut effects = Vec::new();
        // Replays re-derive limits from the logged constraints; quorum sizes
        // are encoded in the limits at open time, so the epoch-open line
        // carries everything needed.
        for line in lines {
            effects.clear();
            let rec = set.record(line.key);
            match &line.kind {
                LogKind::Promise { range, fast } => {
                    let _ = rec.handle_phase1a(
                        line.ballot,
                        *range,
                        *fast,
                        line.t,
                        &mut scratch_log,
                        &mut effects,
                    );
                }
                LogKind::Accept { proposal, .. } => {
                    let _ = rec.accept_proposal(
                        line.ballot,
                        line.round,
                        proposal.clone(),
                        line.t,
                        &mut scratch_log,
                        &mut effects,
                    );
                }
                LogKind::Learn {
                    proposal,
                    verdict,
                    decision,
                } => {
                    rec.handle_learned(
                        line.round,
                        proposal.clone(),
                        *verdict,
                        *decision,
                        line.t,
                        &mut scratch_log,
                        &mut effects,
                    );
                }
                LogKind::EpochOpen { base, constraints } => {
                    // The quorum that shaped the windows is re-derivable only
                    // through compute_limit; log replay reuses the recorded
                    // constraints with the same cluster quorum.
                    let n = replayed_quorum(constraints, base);
                    let _ = rec.open_epoch(
                        line.round,
                        base,
                        constraints,
                        &n,
                        line.t,
                        &mut scratch_log,
                    );
                }
                LogKind::EpochAccept { option } => {
                    let _ = rec.handle_fast_propose(option, line.t, &mut scratch_log, &mut effects);
                }
                LogKind::Sync { versions } => {
                    rec.adopt_versions(versions, line.t, &mut scratch_log, &mut effects);
                }
            }
        }
        set
    }
}

// Replay needs the quorum used when the epoch opened. The cluster quorum is
// global and fixed per deployment; stash it thread-locally for replays
// initiated by `ReplicaSet::replay_with_quorum`.
thread_local! {
    static REPLAY_QUORUM: std::cell::Cell<(usize, usize)> = const { std::cell::Cell::new((5, 4)) };
}

fn replayed_quorum(
    _constraints: &BTreeMap<String, ValueConstraint>,
    _base: &Value,
) -> QuorumSpec {
    let (n, q_fast) = REPLAY_QUORUM.with(|c| c.get());
    QuorumSpec {
        n,
        q_classic: n / 2 + 1,
        q_fast,
    }
}

impl ReplicaSet {
    pub fn replay_with_quorum(
        node: crate::types::NodeId,
        lines: &[LogLine],
        quorum: QuorumSpec,
    ) -> ReplicaSet {
        REPLAY_QUORUM.with(|c| c.set((quorum.n, quorum.q_fast)));
        Self::replay(node, lines)
    }
}
