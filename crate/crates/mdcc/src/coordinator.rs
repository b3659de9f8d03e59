//! App-server-side transaction execution and the per-record master role:
//! parallel option proposal, learning commit/abort, mastership acquisition,
//! collision and deadlock resolution, the fast/classic round policy, and
//! dangling-transaction recovery.
//!
//! Everything here is an event-driven state machine: handlers never block,
//! and all waiting is expressed as scheduled timers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::baselines::ProtoKind;
use crate::messages::{
    AcceptResult, EpochReport, KeyLearnStatus, Msg, ProposalId, RoundProposal, RoundReport,
    TimerKind,
};
use crate::reads::{ReadMode, ReadResult, ReadState, Resolution, Session};
use crate::sim::Ctx;
use crate::trace::{Stage, TraceEvent, TxnMode};
use crate::types::{
    Ballot, CommutativeUpdate, Decision, DcId, Key, NodeId, OptionId, RoundMeta, RoundRange,
    TxnId, UpdateKind, UpdateOption, Value, ValueConstraint, Verdict,
};

// ---------------------------------------------------------------------------
// Fast-policy
// ---------------------------------------------------------------------------

/// Round-type policy per record: keep rounds fast while conflicts are rare,
/// switch a window of rounds to classic when they are not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastPolicyState {
    /// Successful fast rounds since the last conflict resolution.
    pub fast_successes: u32,
    /// Classic rounds still to run before fast rounds are retried.
    pub classic_remaining: u32,
    pub gamma: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyEvent {
    FastSuccess,
    Conflict,
    ClassicDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundMode {
    Fast,
    Classic,
}

impl FastPolicyState {
    pub fn new(gamma: u32) -> Self {
        FastPolicyState {
            fast_successes: 0,
            classic_remaining: 0,
            gamma,
        }
    }

    /// Conflict handling: with at least 4 fast successes since the last
    /// conflict, fast rounds already paid for themselves, so only the current
    /// round goes classic; otherwise the next gamma rounds run classic.
    /// Returns the size of the classic window (including the current round).
    pub fn on_conflict(&mut self) -> u32 {
        let window = if self.fast_successes >= 4 {
            1
        } else {
            self.gamma.max(1)
        };
        self.fast_successes = 0;
        self.classic_remaining = window;
        window
    }

    pub fn on_round_executed(&mut self, fast: bool) {
        if fast {
            self.fast_successes += 1;
        } else {
            self.classic_remaining = self.classic_remaining.saturating_sub(1);
        }
    }

    pub fn next_mode(&self) -> RoundMode {
        if self.classic_remaining > 0 {
            RoundMode::Classic
        } else {
            RoundMode::Fast
        }
    }
}

/// The mode the next round should use after feeding one policy event.
pub fn fast_policy_step(state: &mut FastPolicyState, event: PolicyEvent) -> RoundMode {
    match event {
        PolicyEvent::FastSuccess => state.on_round_executed(true),
        PolicyEvent::Conflict => {
            state.on_conflict();
        }
        PolicyEvent::ClassicDone => state.on_round_executed(false),
    }
    state.next_mode()
}

// ---------------------------------------------------------------------------
// Collision resolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionReport {
    pub from: NodeId,
    /// Highest-ballot acceptance this replica reported for the round.
    pub accepted: Option<(Ballot, RoundProposal)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CollisionOutcome {
    /// Some fast quorum may have accepted this proposal; it must be
    /// re-proposed.
    Mandated(RoundProposal),
    /// Nothing can have been chosen; any proposal may go next.
    Free,
}

fn subsets_of_size(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    let mut cur = Vec::new();
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Fast-round collision resolution over a classic quorum of Phase1b reports:
/// consider every potential fast quorum; if all of its responding members
/// that voted at the highest ballot agree on one proposal, that proposal may
/// have been chosen there. A single such candidate must be proposed next;
/// zero or several mean nothing was chosen and the choice is free.
pub fn resolve_collision(
    reports: &[CollisionReport],
    all_replicas: &[NodeId],
    quorum: &crate::types::QuorumSpec,
) -> CollisionOutcome {
    let top_ballot = reports
        .iter()
        .filter_map(|r| r.accepted.as_ref().map(|(b, _)| *b))
        .max();
    let Some(top) = top_ballot else {
        return CollisionOutcome::Free;
    };
    // Responders holding the top ballot, by replica.
    let mut top_votes: BTreeMap<NodeId, &RoundProposal> = BTreeMap::new();
    for r in reports {
        if let Some((b, p)) = &r.accepted {
            if *b == top {
                top_votes.insert(r.from, p);
            }
        }
    }
    let mut candidates: BTreeMap<ProposalId, RoundProposal> = BTreeMap::new();
    for subset in subsets_of_size(all_replicas.len(), quorum.q_fast) {
        let members: Vec<NodeId> = subset.iter().map(|i| all_replicas[*i]).collect();
        let in_top: Vec<&RoundProposal> = members
            .iter()
            .filter_map(|m| top_votes.get(m).copied())
            .collect();
        if in_top.is_empty() {
            continue;
        }
        let first = in_top[0].pid();
        if in_top.iter().all(|p| p.pid() == first) {
            candidates.entry(first).or_insert_with(|| in_top[0].clone());
        }
    }
    if candidates.len() == 1 {
        CollisionOutcome::Mandated(candidates.into_values().next().expect("one candidate"))
    } else {
        CollisionOutcome::Free
    }
}

// ---------------------------------------------------------------------------
// Master role (runs on storage nodes)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum MasterWork {
    /// Drive one proposal through a classic round and report the learned
    /// verdict to `report_to` (for transaction options).
    Drive {
        proposal: RoundProposal,
        report_to: Option<NodeId>,
    },
    /// Open a commutative round: poll the latest committed value, then
    /// broadcast the base.
    OpenEpoch,
    /// Close the current commutative round once its pending options drained.
    CloseEpoch,
}

impl MasterWork {
    fn dedupe_id(&self) -> Option<ProposalId> {
        match self {
            MasterWork::Drive { proposal, .. } => Some(proposal.pid()),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct P1Info {
    pub executed_upto: u64,
    pub latest: Option<(u64, Value)>,
    pub reports: Vec<RoundReport>,
    pub epoch: Option<EpochReport>,
}

#[derive(Debug)]
pub enum MPhase {
    Idle,
    Phase1 {
        ballot: Ballot,
        oks: BTreeMap<NodeId, P1Info>,
        started: u64,
    },
    Phase2 {
        ballot: Ballot,
        round: u64,
        proposal: RoundProposal,
        report_to: Option<NodeId>,
        acks: BTreeMap<Verdict, BTreeSet<NodeId>>,
        blocked: BTreeSet<NodeId>,
        started: u64,
    },
}

#[derive(Debug)]
pub struct MasterState {
    pub ballot_num: u32,
    /// Mastership currently held (granted by a classic quorum).
    held: Option<RoundMeta>,
    pub phase: MPhase,
    pub queue: VecDeque<MasterWork>,
    pub policy: FastPolicyState,
    /// Master's view of the first undecided round.
    next_round: u64,
    /// End of the classic window committed to after the last conflict.
    classic_end: Option<u64>,
    backoff_until: u64,
    tick_armed: bool,
}

impl MasterState {
    fn new(gamma: u32) -> Self {
        MasterState {
            ballot_num: 0,
            held: None,
            phase: MPhase::Idle,
            queue: VecDeque::new(),
            policy: FastPolicyState::new(gamma),
            next_round: 0,
            classic_end: None,
            backoff_until: 0,
            tick_armed: false,
        }
    }
}

/// All master roles hosted on one storage node, keyed by record.
#[derive(Debug)]
pub struct MasterSet {
    pub node: NodeId,
    pub per_key: BTreeMap<Key, MasterState>,
}

impl MasterSet {
    pub fn new(node: NodeId) -> Self {
        MasterSet {
            node,
            per_key: BTreeMap::new(),
        }
    }

    fn state(&mut self, key: Key, gamma: u32) -> &mut MasterState {
        self.per_key
            .entry(key)
            .or_insert_with(|| MasterState::new(gamma))
    }

    /// Install an already-granted mastership (deployment-time setup for
    /// classic-rounds runs; the replicas carry the matching promise).
    pub fn preset_mastership(&mut self, key: Key, meta: RoundMeta, gamma: u32) {
        let st = self.state(key, gamma);
        st.ballot_num = meta.ballot.number;
        st.held = Some(meta);
        st.next_round = meta.range.start;
    }

    /// A colocated replica executed a round of this record; feed the policy.
    pub fn on_local_round_executed(&mut self, key: Key, fast: bool, gamma: u32) {
        let st = self.state(key, gamma);
        st.policy.on_round_executed(fast);
    }

    /// Conflict-flagged or classic-routed option from a coordinator.
    pub fn propose_via_master(
        &mut self,
        key: Key,
        option: UpdateOption,
        conflict: bool,
        reply_to: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        let st = self.state(key, ctx.proto.gamma);
        if conflict {
            let covered = st.classic_end.map_or(false, |end| st.next_round <= end);
            if !covered {
                let window = st.policy.on_conflict();
                st.classic_end = Some(st.next_round + window as u64 - 1);
                ctx.trace.push(TraceEvent::Collision {
                    t: ctx.now,
                    key,
                    round: st.next_round,
                });
            }
            if option.is_commutative() && !st.queue.contains(&MasterWork::CloseEpoch) {
                // Limit-refused commutative round: close and reopen with a
                // fresh base before driving the option classically.
                st.queue.push_back(MasterWork::CloseEpoch);
            }
        }
        let work = MasterWork::Drive {
            proposal: RoundProposal::Txn(option),
            report_to: Some(reply_to),
        };
        Self::enqueue(st, work);
        self.pump(key, ctx);
    }

    pub fn open_epoch_request(&mut self, key: Key, ctx: &mut Ctx<'_>) {
        let st = self.state(key, ctx.proto.gamma);
        if !st.queue.contains(&MasterWork::OpenEpoch) {
            st.queue.push_back(MasterWork::OpenEpoch);
        }
        self.pump(key, ctx);
    }

    pub fn enqueue_work(&mut self, key: Key, work: MasterWork, ctx: &mut Ctx<'_>) {
        let st = self.state(key, ctx.proto.gamma);
        Self::enqueue(st, work);
        self.pump(key, ctx);
    }

    fn enqueue(st: &mut MasterState, work: MasterWork) {
        if let Some(id) = work.dedupe_id() {
            let in_queue = st.queue.iter().any(|w| w.dedupe_id() == Some(id));
            let in_phase = matches!(
                &st.phase,
                MPhase::Phase2 { proposal, .. } if proposal.pid() == id
            );
            if in_queue || in_phase {
                return;
            }
        }
        st.queue.push_back(work);
    }

    fn arm_tick(st: &mut MasterState, key: Key, node: NodeId, ctx: &mut Ctx<'_>) {
        if !st.tick_armed {
            st.tick_armed = true;
            ctx.timer(node, TimerKind::MasterTick { key }, ctx.proto.master_tick_us);
        }
    }

    /// Advance the per-key state machine: start Phase 1 if mastership is
    /// needed, otherwise propose the next work item.
    fn pump(&mut self, key: Key, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let st = self.state(key, ctx.proto.gamma);
        if !matches!(st.phase, MPhase::Idle) {
            Self::arm_tick(st, key, node, ctx);
            return;
        }
        if st.queue.is_empty() {
            return;
        }
        if ctx.now < st.backoff_until {
            Self::arm_tick(st, key, node, ctx);
            return;
        }
        // Epoch work always re-polls the cluster; option work can reuse a
        // held mastership covering the next round.
        let epoch_work = matches!(
            st.queue.front(),
            Some(MasterWork::OpenEpoch) | Some(MasterWork::CloseEpoch)
        );
        let have = !epoch_work && st.held.map_or(false, |m| m.range.contains(st.next_round));
        if !have {
            st.ballot_num += 1;
            let ballot = Ballot::classic(st.ballot_num, node);
            let end = st.classic_end.filter(|e| *e >= st.next_round);
            let range = RoundRange::new(st.next_round, end);
            st.held = None;
            st.phase = MPhase::Phase1 {
                ballot,
                oks: BTreeMap::new(),
                started: ctx.now,
            };
            for replica in ctx.topo.replicas_of(&key) {
                ctx.send(
                    node,
                    replica,
                    Msg::Phase1a {
                        key,
                        ballot,
                        range,
                        fast: false,
                        reply_to: node,
                    },
                );
            }
            Self::arm_tick(st, key, node, ctx);
            return;
        }
        let ballot = st.held.expect("held").ballot;
        let Some(MasterWork::Drive {
            proposal,
            report_to,
        }) = st.queue.front().cloned()
        else {
            return;
        };
        let round = st.next_round;
        Self::start_phase2(st, ballot, round, proposal, report_to, key, node, ctx);
    }

    #[allow(clippy::too_many_arguments)]
    fn start_phase2(
        st: &mut MasterState,
        ballot: Ballot,
        round: u64,
        proposal: RoundProposal,
        report_to: Option<NodeId>,
        key: Key,
        node: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        st.phase = MPhase::Phase2 {
            ballot,
            round,
            proposal: proposal.clone(),
            report_to,
            acks: BTreeMap::new(),
            blocked: BTreeSet::new(),
            started: ctx.now,
        };
        for replica in ctx.topo.replicas_of(&key) {
            ctx.send(
                node,
                replica,
                Msg::Phase2a {
                    key,
                    ballot,
                    round,
                    proposal: proposal.clone(),
                    reply_to: node,
                },
            );
        }
        Self::arm_tick(st, key, node, ctx);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_phase1b(
        &mut self,
        key: Key,
        ballot: Ballot,
        ok: bool,
        promised: Ballot,
        executed_upto: u64,
        latest: Option<(u64, Value)>,
        reports: Vec<RoundReport>,
        epoch: Option<EpochReport>,
        from: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        let node = self.node;
        let quorum = ctx.topo.quorum;
        let st = self.state(key, ctx.proto.gamma);
        let MPhase::Phase1 {
            ballot: ours, oks, ..
        } = &mut st.phase
        else {
            return;
        };
        if ballot != *ours {
            return;
        }
        if !ok {
            // Outranked: pick a higher ballot after a randomized backoff.
            st.ballot_num = st.ballot_num.max(promised.number);
            st.phase = MPhase::Idle;
            let rtt = ctx.proto.max_rtt_us;
            st.backoff_until = ctx.now + ctx.net.gen_range_u64(rtt, 2 * rtt);
            Self::arm_tick(st, key, node, ctx);
            return;
        }
        oks.insert(
            from,
            P1Info {
                executed_upto,
                latest,
                reports,
                epoch,
            },
        );
        if oks.len() < quorum.q_classic {
            return;
        }
        // Mastership granted.
        let MPhase::Phase1 { ballot, oks, .. } = std::mem::replace(&mut st.phase, MPhase::Idle)
        else {
            unreachable!()
        };
        st.next_round = st
            .next_round
            .max(oks.values().map(|i| i.executed_upto).max().unwrap_or(0));
        let end = st.classic_end.filter(|e| *e >= st.next_round);
        st.held = Some(RoundMeta {
            range: RoundRange::new(st.next_round, end),
            fast: false,
            ballot,
        });
        // Re-propose revealed state before our own work: the lowest open
        // round with any reported acceptance must be driven first.
        let mut revealed: BTreeMap<u64, Vec<CollisionReport>> = BTreeMap::new();
        for (from, info) in &oks {
            for rep in &info.reports {
                if rep.round >= st.next_round && !rep.learned {
                    revealed
                        .entry(rep.round)
                        .or_default()
                        .push(CollisionReport {
                            from: *from,
                            accepted: Some((rep.ballot, rep.proposal.clone())),
                        });
                }
            }
        }
        if let Some((&round, reports)) = revealed.iter().next() {
            let mut full: Vec<CollisionReport> = reports.clone();
            for from in oks.keys() {
                if !full.iter().any(|r| r.from == *from) {
                    full.push(CollisionReport {
                        from: *from,
                        accepted: None,
                    });
                }
            }
            let all = ctx.topo.replicas_of(&key);
            let choice = match resolve_collision(&full, &all, &quorum) {
                CollisionOutcome::Mandated(p) => p,
                CollisionOutcome::Free => {
                    // Nothing possibly chosen; still re-send the highest
                    // reported update rather than dropping someone's write.
                    reports
                        .iter()
                        .filter_map(|r| r.accepted.clone())
                        .max_by_key(|(b, _)| *b)
                        .map(|(_, p)| p)
                        .expect("revealed round has a report")
                }
            };
            let report_to = choice.txn_option().map(|o| o.txn.node);
            st.next_round = round;
            Self::start_phase2(st, ballot, round, choice, report_to, key, node, ctx);
            return;
        }
        // Epoch work bookkeeping against the freshly polled state.
        match st.queue.front() {
            Some(MasterWork::CloseEpoch) => {
                let open: Vec<&EpochReport> =
                    oks.values().filter_map(|i| i.epoch.as_ref()).collect();
                if open.is_empty() {
                    st.queue.pop_front();
                } else if open.iter().any(|e| !e.pending.is_empty()) {
                    // Wait for the pending set to drain, then re-poll.
                    st.held = None;
                    st.backoff_until = ctx.now + ctx.proto.master_tick_us;
                    Self::arm_tick(st, key, node, ctx);
                    return;
                } else {
                    let round = open[0].round;
                    let base = open[0].base.clone();
                    let mut decided: BTreeMap<OptionId, (UpdateOption, Decision)> = BTreeMap::new();
                    for e in &open {
                        for (o, d) in &e.decided {
                            decided.entry(o.id()).or_insert((o.clone(), *d));
                        }
                    }
                    let mut value = base;
                    for (o, d) in decided.values() {
                        if *d == Decision::Commit {
                            if let UpdateKind::Commutative(c) = &o.kind {
                                value = value.apply_deltas(&c.deltas);
                            }
                        }
                    }
                    st.queue.pop_front();
                    st.next_round = round;
                    let proposal = RoundProposal::EpochClose {
                        decided: decided.into_values().collect(),
                        value: Some(value),
                    };
                    Self::start_phase2(st, ballot, round, proposal, None, key, node, ctx);
                    return;
                }
            }
            Some(MasterWork::OpenEpoch) => {
                st.queue.pop_front();
                if let Some(e) = oks.values().filter_map(|i| i.epoch.as_ref()).next() {
                    // Already open somewhere; re-broadcast the same base.
                    let (round, base) = (e.round, e.base.clone());
                    Self::broadcast_set_base(key, round, base, node, ctx);
                } else {
                    let latest = oks
                        .values()
                        .filter_map(|i| i.latest.clone())
                        .max_by_key(|(r, _)| *r);
                    let base = latest
                        .map(|(_, v)| v)
                        .unwrap_or_else(|| Value::Counters(BTreeMap::new()));
                    Self::broadcast_set_base(key, st.next_round, base, node, ctx);
                }
            }
            _ => {}
        }
        self.pump(key, ctx);
    }

    fn broadcast_set_base(key: Key, round: u64, base: Value, node: NodeId, ctx: &mut Ctx<'_>) {
        let constraints = ctx.topo.constraints_for(&key);
        for replica in ctx.topo.replicas_of(&key) {
            ctx.send(
                node,
                replica,
                Msg::SetBase {
                    key,
                    round,
                    base: base.clone(),
                    constraints: constraints.clone(),
                },
            );
        }
    }

    pub fn on_phase2b(
        &mut self,
        key: Key,
        round: u64,
        ballot: Ballot,
        acceptor: NodeId,
        result: AcceptResult,
        ctx: &mut Ctx<'_>,
    ) {
        let node = self.node;
        let quorum = ctx.topo.quorum;
        let st = self.state(key, ctx.proto.gamma);
        let MPhase::Phase2 {
            ballot: ours,
            round: our_round,
            proposal,
            report_to,
            acks,
            blocked,
            ..
        } = &mut st.phase
        else {
            return;
        };
        let already = matches!(result, AcceptResult::AlreadyDecided { .. });
        if ballot != *ours && !already {
            return;
        }
        match result {
            AcceptResult::Accepted { pid, verdict }
                if pid == proposal.pid() && round == *our_round =>
            {
                let set = acks.entry(verdict).or_default();
                set.insert(acceptor);
                if set.len() >= quorum.q_classic {
                    let learned_round = *our_round;
                    let proposal = proposal.clone();
                    let report_to = *report_to;
                    Self::finish_round(
                        st,
                        key,
                        learned_round,
                        proposal,
                        verdict,
                        report_to,
                        node,
                        ctx,
                    );
                    self.pump(key, ctx);
                }
            }
            AcceptResult::Accepted { .. } => {}
            AcceptResult::AlreadyDecided {
                round: decided_round,
                verdict,
                ..
            } => {
                // The option's fate is already learned; report it and drop
                // the work item without occupying a new round.
                let oid = match &proposal {
                    RoundProposal::Txn(o) => Some(o.id()),
                    RoundProposal::Reject { option, .. } => Some(*option),
                    _ => None,
                };
                if let Some(oid) = oid {
                    let pid = proposal.pid();
                    let dst = *report_to;
                    st.phase = MPhase::Idle;
                    if st
                        .queue
                        .front()
                        .map_or(false, |w| w.dedupe_id() == Some(pid))
                    {
                        st.queue.pop_front();
                    }
                    if let Some(dst) = dst {
                        ctx.send(
                            node,
                            dst,
                            Msg::MasterReport {
                                key,
                                round: decided_round,
                                option: oid,
                                verdict,
                                structural: true,
                            },
                        );
                    }
                    self.pump(key, ctx);
                }
            }
            AcceptResult::Blocked { outstanding, at } => {
                blocked.insert(acceptor);
                let any_accept = acks.values().any(|s| !s.is_empty());
                if !any_accept {
                    if let RoundProposal::Txn(o) = proposal {
                        if o.id() == outstanding {
                            // Our own proposal already sits accepted in an
                            // earlier round; finish that round instead
                            // (classic takeover re-proposal).
                            let b = *ours;
                            let p = proposal.clone();
                            let rt = *report_to;
                            st.next_round = at;
                            Self::start_phase2(st, b, at, p, rt, key, node, ctx);
                            return;
                        }
                        // Deadlock avoidance: learn the outstanding option as
                        // re-affirmed and the newcomer as rejected in one
                        // decision.
                        let reject = o.clone();
                        let dual = RoundProposal::Dual {
                            keep: outstanding,
                            reject: reject.clone(),
                        };
                        ctx.trace.push(TraceEvent::DualLearn {
                            t: ctx.now,
                            key,
                            round: *our_round,
                            kept: outstanding,
                            rejected: reject.id(),
                        });
                        let b = *ours;
                        let r = *our_round;
                        let report_to = *report_to;
                        Self::start_phase2(st, b, r, dual, report_to, key, node, ctx);
                    }
                }
            }
            AcceptResult::OldRound { round: r, .. } => {
                st.next_round = st.next_round.max(r + 1);
                let b = *ours;
                let p = proposal.clone();
                let rt = *report_to;
                if st.held.map_or(false, |m| m.range.contains(st.next_round)) {
                    let nr = st.next_round;
                    Self::start_phase2(st, b, nr, p, rt, key, node, ctx);
                } else {
                    st.phase = MPhase::Idle;
                    st.held = None;
                    self.pump(key, ctx);
                }
            }
            AcceptResult::StaleBallot { promised } => {
                st.ballot_num = st.ballot_num.max(promised.number);
                st.held = None;
                st.phase = MPhase::Idle;
                let rtt = ctx.proto.max_rtt_us;
                st.backoff_until = ctx.now + ctx.net.gen_range_u64(rtt, 2 * rtt);
                Self::arm_tick(st, key, node, ctx);
            }
            AcceptResult::Conflict { .. }
            | AcceptResult::ReferMaster { .. }
            | AcceptResult::NeedEpoch
            | AcceptResult::LimitExceeded
            | AcceptResult::FutureRound { .. } => {
                // The master tick re-drives these.
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_round(
        st: &mut MasterState,
        key: Key,
        round: u64,
        proposal: RoundProposal,
        verdict: Verdict,
        report_to: Option<NodeId>,
        node: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        st.phase = MPhase::Idle;
        if st
            .queue
            .front()
            .map_or(false, |w| w.dedupe_id() == Some(proposal.pid()))
        {
            st.queue.pop_front();
        }
        st.next_round = st.next_round.max(round + 1);
        ctx.trace.push(TraceEvent::RoundDecided {
            t: ctx.now,
            node,
            key,
            round,
            pid: proposal.pid(),
            verdict,
        });
        match &proposal {
            RoundProposal::Txn(o) => {
                // A rejected option has no transaction outcome to wait for:
                // the round executes as a no-op either way, so broadcast at
                // once. Accepted options await the owner's decision.
                if verdict == Verdict::Reject {
                    for replica in ctx.topo.replicas_of(&key) {
                        ctx.send(
                            node,
                            replica,
                            Msg::Learned {
                                key,
                                round,
                                proposal: proposal.clone(),
                                verdict,
                                decision: Decision::Abort,
                            },
                        );
                    }
                }
                // The owning coordinator folds the verdict into its outcome
                // computation and broadcasts the transaction decision.
                let dst = report_to.unwrap_or(o.txn.node);
                ctx.send(
                    node,
                    dst,
                    Msg::MasterReport {
                        key,
                        round,
                        option: o.id(),
                        verdict,
                        structural: false,
                    },
                );
            }
            RoundProposal::Dual { reject, .. } => {
                // Structural decision with no pending transaction outcome:
                // broadcast directly, and tell the rejected option's owner.
                for replica in ctx.topo.replicas_of(&key) {
                    ctx.send(
                        node,
                        replica,
                        Msg::Learned {
                            key,
                            round,
                            proposal: proposal.clone(),
                            verdict: Verdict::Reject,
                            decision: Decision::Abort,
                        },
                    );
                }
                ctx.send(
                    node,
                    reject.txn.node,
                    Msg::MasterReport {
                        key,
                        round,
                        option: reject.id(),
                        verdict: Verdict::Reject,
                        structural: true,
                    },
                );
            }
            RoundProposal::Reject { option, .. } => {
                for replica in ctx.topo.replicas_of(&key) {
                    ctx.send(
                        node,
                        replica,
                        Msg::Learned {
                            key,
                            round,
                            proposal: proposal.clone(),
                            verdict: Verdict::Reject,
                            decision: Decision::Abort,
                        },
                    );
                }
                if let Some(dst) = report_to {
                    ctx.send(
                        node,
                        dst,
                        Msg::MasterReport {
                            key,
                            round,
                            option: *option,
                            verdict: Verdict::Reject,
                            structural: true,
                        },
                    );
                }
            }
            RoundProposal::EpochClose { .. } | RoundProposal::Noop => {
                let decision = if matches!(proposal, RoundProposal::EpochClose { .. }) {
                    Decision::Commit
                } else {
                    Decision::Abort
                };
                for replica in ctx.topo.replicas_of(&key) {
                    ctx.send(
                        node,
                        replica,
                        Msg::Learned {
                            key,
                            round,
                            proposal: proposal.clone(),
                            verdict: Verdict::Accept,
                            decision,
                        },
                    );
                }
            }
        }
    }

    /// Periodic re-drive: restart a stalled phase or pump queued work.
    pub fn on_tick(&mut self, key: Key, ctx: &mut Ctx<'_>) {
        let st = self.state(key, ctx.proto.gamma);
        st.tick_armed = false;
        let timeout = ctx.proto.master_timeout_us;
        let stalled = match &st.phase {
            MPhase::Idle => false,
            MPhase::Phase1 { started, .. } | MPhase::Phase2 { started, .. } => {
                ctx.now.saturating_sub(*started) > timeout
            }
        };
        if stalled {
            st.phase = MPhase::Idle;
            st.held = None;
        }
        self.pump(key, ctx);
        let node = self.node;
        let st = self.state(key, ctx.proto.gamma);
        if !matches!(st.phase, MPhase::Idle) || !st.queue.is_empty() {
            Self::arm_tick(st, key, node, ctx);
        }
    }
}

// ---------------------------------------------------------------------------
// Transaction programs and stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReadSpec {
    pub key: Key,
    pub mode: ReadMode,
}

#[derive(Debug)]
pub enum ProgramStep {
    /// Issue these reads, then step again.
    Reads(Vec<ReadSpec>),
    /// Body complete; buffered writes go to the commit phase.
    Done,
}

/// A transaction body. `step` is called with all previously requested reads
/// available; writes are buffered into the context and postponed to commit
/// time.
pub trait TxnProgram: std::fmt::Debug {
    fn step(&mut self, ctx: &mut ProgramCtx<'_>) -> ProgramStep;
}

/// What the body sees: prior read results plus its own buffered writes (the
/// record cache), and the write-buffering operations.
pub struct ProgramCtx<'a> {
    pub reads: &'a BTreeMap<Key, Option<(u64, Value)>>,
    cache: &'a mut BTreeMap<Key, Option<Value>>,
    writes: &'a mut Vec<(Key, UpdateKind)>,
}

impl ProgramCtx<'_> {
    /// Read through the record cache: own uncommitted writes win.
    pub fn get(&self, key: &Key) -> Option<Value> {
        if let Some(v) = self.cache.get(key) {
            return v.clone();
        }
        self.reads
            .get(key)
            .and_then(|r| r.as_ref().map(|(_, v)| v.clone()))
    }

    pub fn read_version(&self, key: &Key) -> Option<u64> {
        self.reads
            .get(key)
            .and_then(|r| r.as_ref().map(|(r, _)| *r))
    }

    pub fn put(&mut self, key: Key, v_read: Option<u64>, value: Value) {
        self.cache.insert(key, Some(value.clone()));
        self.writes.push((
            key,
            UpdateKind::Physical {
                v_read,
                v_write: Some(value),
            },
        ));
    }

    pub fn delete(&mut self, key: Key, v_read: Option<u64>) {
        self.cache.insert(key, None);
        self.writes.push((
            key,
            UpdateKind::Physical {
                v_read,
                v_write: None,
            },
        ));
    }

    pub fn update_commutative(
        &mut self,
        key: Key,
        deltas: BTreeMap<String, i64>,
        constraints: BTreeMap<String, ValueConstraint>,
    ) {
        let current = self.get(&key);
        if let Some(v) = current {
            self.cache.insert(key, Some(v.apply_deltas(&deltas)));
        }
        self.writes.push((
            key,
            UpdateKind::Commutative(CommutativeUpdate {
                deltas,
                constraints,
            }),
        ));
    }
}

pub type StageFn = Box<dyn FnMut(&mut StageCtx<'_>)>;
pub type CommitFn = Box<dyn FnMut(&mut StageCtx<'_>, bool)>;
pub type FinallyFn = Box<dyn FnMut(&mut StageCtx<'_>, bool, bool)>;

/// SLO stage callbacks. Exactly one of `on_failure` / `on_accept` /
/// `on_commit` fires per transaction; `finally` fires at most once, when the
/// outcome is learned. `finally_remote` is not code but a durable note
/// carried with the transaction's options and fired (at least once) by any
/// node that learns the outcome.
#[derive(Default)]
pub struct Stages {
    pub on_failure: Option<StageFn>,
    pub on_accept: Option<StageFn>,
    pub on_commit: Option<CommitFn>,
    pub finally: Option<FinallyFn>,
    pub finally_remote: Option<String>,
}

impl std::fmt::Debug for Stages {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stages")
            .field("on_failure", &self.on_failure.is_some())
            .field("on_accept", &self.on_accept.is_some())
            .field("on_commit", &self.on_commit.is_some())
            .field("finally", &self.finally.is_some())
            .field("finally_remote", &self.finally_remote)
            .finish()
    }
}

/// Context handed to stage callbacks. Callbacks may ask the harness to
/// schedule driver work (e.g. the next closed-loop transaction).
pub struct StageCtx<'a> {
    pub now: u64,
    pub txn: TxnId,
    pub driver_requests: &'a mut Vec<(u64, u64)>,
}

impl StageCtx<'_> {
    pub fn schedule_driver(&mut self, token: u64, delay_us: u64) {
        self.driver_requests.push((token, self.now + delay_us));
    }
}

// ---------------------------------------------------------------------------
// App-server transaction coordinator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnOutcome {
    Pending,
    Decided(Decision),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KeyRoute {
    Fast,
    Master(NodeId),
}

/// Where a per-key verdict came from; governs who broadcasts round content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LearnOrigin {
    /// Counted a fast quorum of matching acceptances ourselves.
    FastQuorum,
    /// The round's master drove our option and reported the verdict.
    MasterTxn,
    /// The verdict came out of a dual-learn, fence or already-decided echo;
    /// the replicas already hold the round's decision.
    Structural,
}

#[derive(Debug)]
pub struct KeyProgress {
    option: UpdateOption,
    route: KeyRoute,
    acks: BTreeMap<(u64, Verdict), BTreeSet<NodeId>>,
    refusers: BTreeSet<NodeId>,
    conflict_sent: bool,
    epoch_requested: bool,
    fast_attempts: u32,
    pub learned: Option<(u64, Verdict)>,
    broadcast: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TxnPhase {
    Reading,
    Committing,
    Closed,
}

pub struct Txn {
    pub id: TxnId,
    program: Box<dyn TxnProgram>,
    stages: Stages,
    pub start: u64,
    pub slo_deadline: u64,
    phase: TxnPhase,
    session: Option<u64>,
    reads: BTreeMap<Key, Option<(u64, Value)>>,
    cache: BTreeMap<Key, Option<Value>>,
    outstanding_reads: BTreeMap<u64, ReadState>,
    pub per_key: BTreeMap<Key, KeyProgress>,
    pub outcome: TxnOutcome,
    pub decide_at: Option<u64>,
    any_response: bool,
    stage_fired: bool,
    finally_fired: bool,
    broadcast_done: bool,
    pub conflicts: u32,
    mode_fast: bool,
    mode_classic: bool,
    // Baseline-protocol state.
    tpc_tm: Option<NodeId>,
    tpc_options: Vec<UpdateOption>,
    qw: BTreeMap<Key, QwKeyProgress>,
}

#[derive(Debug)]
pub struct QwKeyProgress {
    version: u64,
    value: Value,
    acks: BTreeSet<NodeId>,
    done: bool,
}

impl std::fmt::Debug for Txn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Txn")
            .field("id", &self.id)
            .field("phase", &self.phase)
            .field("outcome", &self.outcome)
            .finish()
    }
}

#[derive(Debug)]
pub struct AppServer {
    pub node: NodeId,
    pub dc: DcId,
    pub protocol: ProtoKind,
    next_seq: u64,
    next_read_token: u64,
    pub txns: BTreeMap<TxnId, Txn>,
    pub sessions: BTreeMap<u64, Session>,
    /// Route hints learned from ReferMaster refusals.
    meta_cache: BTreeMap<Key, RoundMeta>,
    /// Driver requests produced by stage callbacks, drained by the node
    /// shell into the simulator.
    pub driver_requests: Vec<(u64, u64)>,
}

impl AppServer {
    pub fn new(node: NodeId, dc: DcId) -> Self {
        Self::new_with_protocol(node, dc, ProtoKind::Mdcc)
    }

    pub fn new_with_protocol(node: NodeId, dc: DcId, protocol: ProtoKind) -> Self {
        AppServer {
            node,
            dc,
            protocol,
            next_seq: 0,
            next_read_token: 0,
            txns: BTreeMap::new(),
            sessions: BTreeMap::new(),
            meta_cache: BTreeMap::new(),
            driver_requests: Vec::new(),
        }
    }

    pub fn begin_txn(
        &mut self,
        program: Box<dyn TxnProgram>,
        slo_us: u64,
        stages: Stages,
        session: Option<u64>,
        ctx: &mut Ctx<'_>,
    ) -> TxnId {
        self.next_seq += 1;
        let id = TxnId {
            node: self.node,
            seq: self.next_seq,
        };
        let txn = Txn {
            id,
            program,
            stages,
            start: ctx.now,
            slo_deadline: ctx.now + slo_us,
            phase: TxnPhase::Reading,
            session,
            reads: BTreeMap::new(),
            cache: BTreeMap::new(),
            outstanding_reads: BTreeMap::new(),
            per_key: BTreeMap::new(),
            outcome: TxnOutcome::Pending,
            decide_at: None,
            any_response: false,
            stage_fired: false,
            finally_fired: false,
            broadcast_done: false,
            conflicts: 0,
            mode_fast: false,
            mode_classic: false,
            tpc_tm: None,
            tpc_options: Vec::new(),
            qw: BTreeMap::new(),
        };
        self.txns.insert(id, txn);
        ctx.trace.push(TraceEvent::TxnStart {
            t: ctx.now,
            txn: id,
            writes: 0,
        });
        ctx.timer(self.node, TimerKind::SloDeadline { txn: id }, slo_us);
        self.step_program(id, ctx);
        id
    }

    fn step_program(&mut self, id: TxnId, ctx: &mut Ctx<'_>) {
        loop {
            let txn = self.txns.get_mut(&id).expect("txn exists");
            let mut writes = Vec::new();
            let step = {
                let mut pctx = ProgramCtx {
                    reads: &txn.reads,
                    cache: &mut txn.cache,
                    writes: &mut writes,
                };
                txn.program.step(&mut pctx)
            };
            match step {
                ProgramStep::Reads(specs) => {
                    let have: BTreeSet<Key> = txn.reads.keys().copied().collect();
                    let mut all_ready = true;
                    for spec in specs {
                        if have.contains(&spec.key) {
                            continue;
                        }
                        all_ready = false;
                        self.issue_read(id, spec, ctx);
                    }
                    if all_ready {
                        continue;
                    }
                    ctx.timer(
                        self.node,
                        TimerKind::ReadRetry { txn: id },
                        ctx.proto.read_retry_us,
                    );
                    return;
                }
                ProgramStep::Done => {
                    self.start_commit(id, writes, ctx);
                    return;
                }
            }
        }
    }

    fn issue_read(&mut self, id: TxnId, spec: ReadSpec, ctx: &mut Ctx<'_>) {
        self.next_read_token += 1;
        let token = self.next_read_token;
        let (targets, need) = match spec.mode {
            ReadMode::Local => (vec![ctx.topo.replica_in_dc(&spec.key, self.dc)], 1),
            ReadMode::Quorum => (ctx.topo.replicas_of(&spec.key), ctx.topo.quorum.q_classic),
            ReadMode::Monotonic => (vec![ctx.topo.default_master(&spec.key)], 1),
        };
        for t in &targets {
            ctx.send(
                self.node,
                *t,
                Msg::ReadReq {
                    key: spec.key,
                    reply_to: self.node,
                    token,
                },
            );
        }
        let txn = self.txns.get_mut(&id).expect("txn exists");
        txn.outstanding_reads
            .insert(token, ReadState::new(id, spec.key, spec.mode, targets, need));
    }

    pub fn on_read_rsp(
        &mut self,
        token: u64,
        key: Key,
        version: Option<(u64, Value)>,
        from: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        let Some((&id, _)) = self
            .txns
            .iter()
            .find(|(_, t)| t.outstanding_reads.contains_key(&token))
        else {
            return;
        };
        let watermark = {
            let txn = self.txns.get(&id).expect("txn exists");
            txn.session
                .and_then(|s| self.sessions.get(&s))
                .and_then(|s| s.watermark_of(&key))
        };
        let txn = self.txns.get_mut(&id).expect("txn exists");
        txn.any_response = true;
        let Some(state) = txn.outstanding_reads.get_mut(&token) else {
            return;
        };
        state.on_reply(from, version);
        match state.resolve(watermark) {
            Resolution::Pending => {}
            Resolution::Done(result) => {
                self.finish_read(id, token, result, ctx);
            }
            Resolution::Escalate => {
                // Pinned replica missed a write quorum: fall back to a
                // quorum read.
                let spec = ReadSpec {
                    key,
                    mode: ReadMode::Quorum,
                };
                txn.outstanding_reads.remove(&token);
                self.issue_read(id, spec, ctx);
            }
        }
    }

    fn finish_read(&mut self, id: TxnId, token: u64, result: ReadResult, ctx: &mut Ctx<'_>) {
        let txn = self.txns.get_mut(&id).expect("txn exists");
        txn.outstanding_reads.remove(&token);
        let session = txn.session;
        if let (Some(session), Some((round, _))) = (session, &result.value) {
            self.sessions
                .entry(session)
                .or_default()
                .observe(result.key, *round);
        }
        let txn = self.txns.get_mut(&id).expect("txn exists");
        txn.reads.insert(result.key, result.value);
        if txn.outstanding_reads.is_empty() && txn.phase == TxnPhase::Reading {
            self.step_program(id, ctx);
        }
    }

    fn start_commit(&mut self, id: TxnId, writes: Vec<(Key, UpdateKind)>, ctx: &mut Ctx<'_>) {
        {
            let txn = self.txns.get_mut(&id).expect("txn exists");
            txn.phase = TxnPhase::Committing;
        }
        if writes.is_empty() {
            // Read-only transactions commit immediately.
            self.decide(id, Decision::Commit, ctx);
            self.try_finish(id, ctx);
            return;
        }
        match self.protocol {
            ProtoKind::Mdcc => {}
            ProtoKind::Tpc => {
                self.tpc_begin(id, writes, ctx);
                return;
            }
            ProtoKind::Qw { q } => {
                self.qw_begin(id, writes, q, ctx);
                return;
            }
        }
        let writeset: Vec<Key> = writes.iter().map(|(k, _)| *k).collect();
        let remote_note = self
            .txns
            .get(&id)
            .expect("txn exists")
            .stages
            .finally_remote
            .clone();
        let mut options = Vec::new();
        for (i, (key, kind)) in writes.into_iter().enumerate() {
            let mut option = UpdateOption::new(id, key, kind, writeset.clone());
            if i == 0 {
                option.remote_callback = remote_note.clone();
            }
            options.push(option);
        }
        for option in options {
            ctx.trace.push(TraceEvent::OptionRegistered {
                t: ctx.now,
                option: option.clone(),
            });
            let key = option.key;
            let route = self.route_for(&key, ctx);
            let txn = self.txns.get_mut(&id).expect("txn exists");
            txn.per_key.insert(
                key,
                KeyProgress {
                    option: option.clone(),
                    route,
                    acks: BTreeMap::new(),
                    refusers: BTreeSet::new(),
                    conflict_sent: false,
                    epoch_requested: false,
                    fast_attempts: 0,
                    learned: None,
                    broadcast: false,
                },
            );
            ctx.trace.push(TraceEvent::Proposed {
                t: ctx.now,
                txn: id,
                key,
                fast: matches!(route, KeyRoute::Fast),
            });
            self.send_proposal(id, key, ctx);
        }
        ctx.timer(
            self.node,
            TimerKind::TxnRetry { txn: id },
            ctx.proto.txn_retry_us,
        );
    }

    fn route_for(&self, key: &Key, ctx: &Ctx<'_>) -> KeyRoute {
        if ctx.topo.classic_default {
            return KeyRoute::Master(ctx.topo.default_master(key));
        }
        match self.meta_cache.get(key) {
            Some(meta) if !meta.fast => KeyRoute::Master(
                meta.ballot
                    .server
                    .unwrap_or_else(|| ctx.topo.default_master(key)),
            ),
            _ => KeyRoute::Fast,
        }
    }

    fn send_proposal(&mut self, id: TxnId, key: Key, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let txn = self.txns.get_mut(&id).expect("txn exists");
        let kp = txn.per_key.get_mut(&key).expect("key progress");
        match kp.route {
            KeyRoute::Fast => {
                txn.mode_fast = true;
                kp.fast_attempts += 1;
                for replica in ctx.topo.replicas_of(&key) {
                    ctx.send(
                        node,
                        replica,
                        Msg::FastPropose {
                            option: kp.option.clone(),
                            reply_to: node,
                        },
                    );
                }
            }
            KeyRoute::Master(master) => {
                txn.mode_classic = true;
                ctx.send(
                    node,
                    master,
                    Msg::ProposeViaMaster {
                        option: kp.option.clone(),
                        conflict: false,
                        reply_to: node,
                    },
                );
            }
        }
    }

    pub fn on_phase2b(
        &mut self,
        key: Key,
        round: u64,
        acceptor: NodeId,
        re: Option<OptionId>,
        result: AcceptResult,
        ctx: &mut Ctx<'_>,
    ) {
        let Some(oid) = re else { return };
        if oid.txn.node != self.node {
            return;
        }
        let id = oid.txn;
        let Some(txn) = self.txns.get_mut(&id) else {
            return;
        };
        txn.any_response = true;
        let Some(kp) = txn.per_key.get_mut(&key) else {
            return;
        };
        if kp.learned.is_some() {
            return;
        }
        let q = ctx.topo.quorum;
        match result {
            AcceptResult::Accepted { pid, verdict } if pid == ProposalId::Txn(oid) => {
                let set = kp.acks.entry((round, verdict)).or_default();
                set.insert(acceptor);
                if set.len() >= q.q_fast {
                    self.key_learned(id, key, round, verdict, LearnOrigin::FastQuorum, ctx);
                }
            }
            AcceptResult::Accepted { .. } => {}
            AcceptResult::AlreadyDecided { round, verdict, .. } => {
                self.key_learned(id, key, round, verdict, LearnOrigin::Structural, ctx);
            }
            AcceptResult::Conflict { .. }
            | AcceptResult::Blocked { .. }
            | AcceptResult::OldRound { .. }
            | AcceptResult::LimitExceeded => {
                kp.refusers.insert(acceptor);
                let fast_unreachable = kp.refusers.len() > q.n - q.q_fast;
                if fast_unreachable && !kp.conflict_sent {
                    kp.conflict_sent = true;
                    txn.conflicts += 1;
                    txn.mode_classic = true;
                    let master = ctx.topo.default_master(&key);
                    let option = kp.option.clone();
                    kp.route = KeyRoute::Master(master);
                    ctx.send(
                        self.node,
                        master,
                        Msg::ProposeViaMaster {
                            option,
                            conflict: true,
                            reply_to: self.node,
                        },
                    );
                }
            }
            AcceptResult::ReferMaster { meta } => {
                self.meta_cache.insert(key, meta);
                let master = meta
                    .ballot
                    .server
                    .unwrap_or_else(|| ctx.topo.default_master(&key));
                if !matches!(kp.route, KeyRoute::Master(_)) {
                    kp.route = KeyRoute::Master(master);
                    self.send_proposal(id, key, ctx);
                }
            }
            AcceptResult::NeedEpoch => {
                if !kp.epoch_requested {
                    kp.epoch_requested = true;
                    let master = ctx.topo.default_master(&key);
                    ctx.send(self.node, master, Msg::OpenEpochReq { key });
                }
            }
            AcceptResult::StaleBallot { .. } | AcceptResult::FutureRound { .. } => {}
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_master_report(
        &mut self,
        key: Key,
        round: u64,
        option: OptionId,
        verdict: Verdict,
        structural: bool,
        ctx: &mut Ctx<'_>,
    ) {
        if option.txn.node != self.node {
            return;
        }
        let id = option.txn;
        let Some(txn) = self.txns.get_mut(&id) else {
            return;
        };
        txn.any_response = true;
        if txn.per_key.get(&key).map_or(true, |kp| kp.learned.is_some()) {
            return;
        }
        let origin = if structural {
            LearnOrigin::Structural
        } else {
            LearnOrigin::MasterTxn
        };
        self.key_learned(id, key, round, verdict, origin, ctx);
    }

    fn key_learned(
        &mut self,
        id: TxnId,
        key: Key,
        round: u64,
        verdict: Verdict,
        origin: LearnOrigin,
        ctx: &mut Ctx<'_>,
    ) {
        let txn = self.txns.get_mut(&id).expect("txn exists");
        let kp = txn.per_key.get_mut(&key).expect("key progress");
        if kp.learned.is_some() {
            return;
        }
        kp.learned = Some((round, verdict));
        kp.broadcast = origin != LearnOrigin::Structural;
        let commutative = kp.option.is_commutative();
        ctx.trace.push(TraceEvent::KeyLearned {
            t: ctx.now,
            txn: id,
            key,
            round,
            verdict,
        });
        if origin == LearnOrigin::FastQuorum && !commutative {
            // Authoritative consensus observation claims the round content;
            // master-driven rounds were already recorded by the master, and
            // commutative rounds hold many options at once.
            ctx.trace.push(TraceEvent::RoundDecided {
                t: ctx.now,
                node: self.node,
                key,
                round,
                pid: ProposalId::Txn(OptionId { txn: id, key }),
                verdict,
            });
        }
        match txn.outcome {
            TxnOutcome::Pending => {
                if verdict == Verdict::Reject {
                    self.decide(id, Decision::Abort, ctx);
                } else if self
                    .txns
                    .get(&id)
                    .expect("txn exists")
                    .per_key
                    .values()
                    .all(|kp| matches!(kp.learned, Some((_, Verdict::Accept))))
                {
                    self.decide(id, Decision::Commit, ctx);
                }
            }
            TxnOutcome::Decided(_) => {}
        }
        self.try_finish(id, ctx);
    }

    /// Fix the transaction outcome: a pure function of learned verdicts.
    fn decide(&mut self, id: TxnId, decision: Decision, ctx: &mut Ctx<'_>) {
        let txn = self.txns.get_mut(&id).expect("txn exists");
        if txn.outcome != TxnOutcome::Pending {
            return;
        }
        txn.outcome = TxnOutcome::Decided(decision);
        txn.decide_at = Some(ctx.now);
        let mode = match (txn.mode_fast, txn.mode_classic) {
            (true, true) => TxnMode::Mixed,
            (false, true) => TxnMode::Classic,
            _ => TxnMode::Fast,
        };
        ctx.trace.push(TraceEvent::TxnDecided {
            t: ctx.now,
            txn: id,
            decision,
            mode,
            conflicts: txn.conflicts,
        });
        // Session watermark: committed writes become read-your-own.
        if decision == Decision::Commit {
            if let Some(session) = txn.session {
                let observed: Vec<(Key, u64)> = txn
                    .per_key
                    .iter()
                    .filter_map(|(k, kp)| kp.learned.map(|(r, _)| (*k, r)))
                    .collect();
                let s = self.sessions.entry(session).or_default();
                for (k, r) in observed {
                    s.observe(k, r);
                }
            }
        }
        let txn = self.txns.get_mut(&id).expect("txn exists");
        let success = decision == Decision::Commit;
        let timeout = ctx.now > txn.slo_deadline;
        // onCommit fires when the outcome arrives within the SLO; otherwise
        // the deadline already fired onAccept or onFailure.
        if !txn.stage_fired && !timeout {
            txn.stage_fired = true;
            let mut sctx = StageCtx {
                now: ctx.now,
                txn: id,
                driver_requests: &mut self.driver_requests,
            };
            if let Some(cb) = txn.stages.on_commit.as_mut() {
                cb(&mut sctx, success);
            }
            ctx.trace.push(TraceEvent::StageFired {
                t: ctx.now,
                txn: id,
                stage: Stage::OnCommit,
                success,
                timeout: false,
            });
        }
        if !txn.finally_fired {
            txn.finally_fired = true;
            let mut sctx = StageCtx {
                now: ctx.now,
                txn: id,
                driver_requests: &mut self.driver_requests,
            };
            if let Some(cb) = txn.stages.finally.as_mut() {
                cb(&mut sctx, success, timeout);
            }
            ctx.trace.push(TraceEvent::StageFired {
                t: ctx.now,
                txn: id,
                stage: Stage::Finally,
                success,
                timeout,
            });
        }
    }

    /// Once every key is learned and the outcome fixed, broadcast the
    /// decision to all involved replicas. This is background work: the
    /// transaction outcome is already irrevocable.
    fn try_finish(&mut self, id: TxnId, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let txn = self.txns.get_mut(&id).expect("txn exists");
        if txn.phase != TxnPhase::Committing || txn.broadcast_done {
            return;
        }
        let TxnOutcome::Decided(decision) = txn.outcome else {
            return;
        };
        if !txn.per_key.values().all(|kp| kp.learned.is_some()) {
            return;
        }
        txn.broadcast_done = true;
        txn.phase = TxnPhase::Closed;
        let learned: Vec<(Key, UpdateOption, u64, Verdict)> = txn
            .per_key
            .iter()
            .filter(|(_, kp)| kp.broadcast)
            .map(|(k, kp)| {
                let (round, verdict) = kp.learned.expect("learned");
                (*k, kp.option.clone(), round, verdict)
            })
            .collect();
        for (key, option, round, verdict) in learned {
            for replica in ctx.topo.replicas_of(&key) {
                ctx.send(
                    node,
                    replica,
                    Msg::Learned {
                        key,
                        round,
                        proposal: RoundProposal::Txn(option.clone()),
                        verdict,
                        decision,
                    },
                );
            }
        }
    }

    /// 2PC commit path: hand the whole write set to the client's local
    /// storage node acting as transaction manager.
    fn tpc_begin(&mut self, id: TxnId, writes: Vec<(Key, UpdateKind)>, ctx: &mut Ctx<'_>) {
        let writeset: Vec<Key> = writes.iter().map(|(k, _)| *k).collect();
        let options: Vec<UpdateOption> = writes
            .into_iter()
            .map(|(key, kind)| UpdateOption::new(id, key, kind, writeset.clone()))
            .collect();
        for o in &options {
            ctx.trace.push(TraceEvent::OptionRegistered {
                t: ctx.now,
                option: o.clone(),
            });
        }
        let tm = ctx.topo.replica_in_dc(&writeset[0], self.dc);
        let txn = self.txns.get_mut(&id).expect("txn exists");
        txn.tpc_tm = Some(tm);
        txn.tpc_options = options.clone();
        txn.mode_classic = true;
        ctx.send(
            self.node,
            tm,
            Msg::TpcBegin {
                txn: id,
                options,
                reply_to: self.node,
            },
        );
        ctx.timer(
            self.node,
            TimerKind::TxnRetry { txn: id },
            ctx.proto.txn_retry_us,
        );
    }

    pub fn on_tpc_done(&mut self, id: TxnId, committed: bool, ctx: &mut Ctx<'_>) {
        let Some(txn) = self.txns.get_mut(&id) else {
            return;
        };
        txn.any_response = true;
        if txn.phase != TxnPhase::Committing {
            return;
        }
        let decision = if committed {
            Decision::Commit
        } else {
            Decision::Abort
        };
        self.decide(id, decision, ctx);
        let txn = self.txns.get_mut(&id).expect("txn exists");
        txn.phase = TxnPhase::Closed;
    }

    /// Quorum-write path: no isolation, no atomicity; each key's value goes
    /// to all replicas and acks after `q` of them stored it. Commutative
    /// buffered writes are folded into plain values using the read snapshot.
    fn qw_begin(&mut self, id: TxnId, writes: Vec<(Key, UpdateKind)>, q: usize, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let txn = self.txns.get_mut(&id).expect("txn exists");
        txn.mode_fast = true;
        let mut out = Vec::new();
        for (key, kind) in writes {
            let read = txn.reads.get(&key).cloned().flatten();
            let parent = read.as_ref().map(|(r, _)| *r);
            let (value, v_read) = match kind {
                UpdateKind::Physical { v_read, v_write } => {
                    (v_write.unwrap_or(Value::Blob(String::new())), v_read)
                }
                UpdateKind::Commutative(c) => {
                    let base = read
                        .as_ref()
                        .map(|(_, v)| v.clone())
                        .unwrap_or_else(|| Value::Counters(BTreeMap::new()));
                    (base.apply_deltas(&c.deltas), parent)
                }
            };
            let version = v_read.map_or(0, |p| p + 1);
            txn.qw.insert(
                key,
                QwKeyProgress {
                    version,
                    value: value.clone(),
                    acks: BTreeSet::new(),
                    done: false,
                },
            );
            out.push((key, value, version));
        }
        let _ = q;
        for (key, value, version) in out {
            for replica in ctx.topo.replicas_of(&key) {
                ctx.send(
                    node,
                    replica,
                    Msg::QwWrite {
                        key,
                        value: value.clone(),
                        version,
                        writer: id,
                        reply_to: node,
                    },
                );
            }
        }
        ctx.timer(
            self.node,
            TimerKind::TxnRetry { txn: id },
            ctx.proto.txn_retry_us,
        );
    }

    pub fn on_qw_ack(
        &mut self,
        key: Key,
        version: u64,
        writer: TxnId,
        from: NodeId,
        ctx: &mut Ctx<'_>,
    ) {
        if writer.node != self.node {
            return;
        }
        let id = writer;
        let ProtoKind::Qw { q } = self.protocol else {
            return;
        };
        let Some(txn) = self.txns.get_mut(&id) else {
            return;
        };
        txn.any_response = true;
        let Some(kp) = txn.qw.get_mut(&key) else {
            return;
        };
        if kp.version != version || kp.done {
            return;
        }
        kp.acks.insert(from);
        if kp.acks.len() >= q {
            kp.done = true;
            ctx.trace.push(TraceEvent::QwAcked {
                t: ctx.now,
                key,
                parent: version,
                writer: id,
            });
        }
        if txn.qw.values().all(|k| k.done) && txn.phase == TxnPhase::Committing {
            self.decide(id, Decision::Commit, ctx);
            let txn = self.txns.get_mut(&id).expect("txn exists");
            txn.phase = TxnPhase::Closed;
        }
    }

    pub fn on_slo_deadline(&mut self, id: TxnId, ctx: &mut Ctx<'_>) {
        let Some(txn) = self.txns.get_mut(&id) else {
            return;
        };
        if txn.stage_fired {
            return;
        }
        txn.stage_fired = true;
        let accepted = txn.any_response;
        let mut sctx = StageCtx {
            now: ctx.now,
            txn: id,
            driver_requests: &mut self.driver_requests,
        };
        let stage = if accepted {
            if let Some(cb) = txn.stages.on_accept.as_mut() {
                cb(&mut sctx);
            }
            Stage::OnAccept
        } else {
            if let Some(cb) = txn.stages.on_failure.as_mut() {
                cb(&mut sctx);
            }
            Stage::OnFailure
        };
        ctx.trace.push(TraceEvent::StageFired {
            t: ctx.now,
            txn: id,
            stage,
            success: false,
            timeout: true,
        });
    }

    /// Re-drive unlearned keys.
    pub fn on_txn_retry(&mut self, id: TxnId, ctx: &mut Ctx<'_>) {
        let Some(txn) = self.txns.get(&id) else {
            return;
        };
        if txn.phase != TxnPhase::Committing {
            return;
        }
        match self.protocol {
            ProtoKind::Tpc => {
                let txn = self.txns.get(&id).expect("txn exists");
                if let Some(tm) = txn.tpc_tm {
                    ctx.send(
                        self.node,
                        tm,
                        Msg::TpcBegin {
                            txn: id,
                            options: txn.tpc_options.clone(),
                            reply_to: self.node,
                        },
                    );
                }
                ctx.timer(
                    self.node,
                    TimerKind::TxnRetry { txn: id },
                    ctx.proto.txn_retry_us,
                );
                return;
            }
            ProtoKind::Qw { .. } => {
                let node = self.node;
                let txn = self.txns.get(&id).expect("txn exists");
                let unacked: Vec<(Key, Value, u64)> = txn
                    .qw
                    .iter()
                    .filter(|(_, kp)| !kp.done)
                    .map(|(k, kp)| (*k, kp.value.clone(), kp.version))
                    .collect();
                for (key, value, version) in unacked {
                    for replica in ctx.topo.replicas_of(&key) {
                        ctx.send(
                            node,
                            replica,
                            Msg::QwWrite {
                                key,
                                value: value.clone(),
                                version,
                                writer: id,
                                reply_to: node,
                            },
                        );
                    }
                }
                ctx.timer(
                    self.node,
                    TimerKind::TxnRetry { txn: id },
                    ctx.proto.txn_retry_us,
                );
                return;
            }
            ProtoKind::Mdcc => {}
        }
        let keys: Vec<Key> = txn
            .per_key
            .iter()
            .filter(|(_, kp)| kp.learned.is_none())
            .map(|(k, _)| *k)
            .collect();
        for key in keys {
            let txn = self.txns.get_mut(&id).expect("txn exists");
            let kp = txn.per_key.get_mut(&key).expect("key progress");
            // Clear this attempt's refusal tally; acceptances are idempotent.
            kp.refusers.clear();
            kp.epoch_requested = false;
            if matches!(kp.route, KeyRoute::Fast) && kp.fast_attempts >= ctx.proto.fast_attempts_max
            {
                kp.route = KeyRoute::Master(ctx.topo.default_master(&key));
            }
            self.send_proposal(id, key, ctx);
        }
        ctx.timer(
            self.node,
            TimerKind::TxnRetry { txn: id },
            ctx.proto.txn_retry_us,
        );
    }

    pub fn on_read_retry(&mut self, id: TxnId, ctx: &mut Ctx<'_>) {
        let Some(txn) = self.txns.get(&id) else {
            return;
        };
        if txn.outstanding_reads.is_empty() {
            return;
        }
        let node = self.node;
        let pending: Vec<(u64, Key, Vec<NodeId>)> = txn
            .outstanding_reads
            .iter()
            .map(|(t, r)| (*t, r.key, r.sent_to.clone()))
            .collect();
        for (token, key, targets) in pending {
            for t in targets {
                ctx.send(
                    node,
                    t,
                    Msg::ReadReq {
                        key,
                        reply_to: node,
                        token,
                    },
                );
            }
        }
        ctx.timer(
            self.node,
            TimerKind::ReadRetry { txn: id },
            ctx.proto.read_retry_us,
        );
    }

    pub fn drain_driver_requests(&mut self, ctx: &mut Ctx<'_>) {
        for (token, at) in self.driver_requests.drain(..) {
            ctx.net.schedule_driver(token, at);
        }
    }
}

// ---------------------------------------------------------------------------
// Dangling-transaction recovery (runs on storage nodes)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum RecKey {
    Unknown,
    Learned(Verdict),
    Driving,
}

#[derive(Debug)]
pub struct RecoverySession {
    pub txn: TxnId,
    pub keys: BTreeMap<Key, RecKey>,
    statuses: BTreeMap<Key, BTreeMap<NodeId, KeyLearnStatus>>,
    options: BTreeMap<Key, UpdateOption>,
    pub broadcast_done: bool,
}

/// Storage-node-side recovery of transactions whose coordinator vanished:
/// reconstruct the write set from the pending option, quorum-read each key's
/// learn status, drive undecided rounds through classic Paxos, then finish
/// the commit/abort computation exactly as the coordinator would have.
#[derive(Debug)]
pub struct RecoverySet {
    pub node: NodeId,
    pub sessions: BTreeMap<TxnId, RecoverySession>,
}

impl RecoverySet {
    pub fn new(node: NodeId) -> Self {
        RecoverySet {
            node,
            sessions: BTreeMap::new(),
        }
    }

    pub fn start(&mut self, trigger: UpdateOption, ctx: &mut Ctx<'_>) {
        let txn = trigger.txn;
        if self.sessions.contains_key(&txn) {
            return;
        }
        ctx.trace.push(TraceEvent::RecoveryStarted {
            t: ctx.now,
            node: self.node,
            txn,
        });
        let mut keys = BTreeMap::new();
        let mut options = BTreeMap::new();
        for k in &trigger.writeset {
            keys.insert(*k, RecKey::Unknown);
        }
        options.insert(trigger.key, trigger.clone());
        self.sessions.insert(
            txn,
            RecoverySession {
                txn,
                keys,
                statuses: BTreeMap::new(),
                options,
                broadcast_done: false,
            },
        );
        self.poll(txn, ctx);
        ctx.timer(
            self.node,
            TimerKind::RecoveryTick { txn },
            ctx.proto.master_tick_us * 4,
        );
    }

    fn poll(&mut self, txn: TxnId, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let Some(session) = self.sessions.get(&txn) else {
            return;
        };
        for (key, state) in &session.keys {
            if matches!(state, RecKey::Unknown | RecKey::Driving) {
                for replica in ctx.topo.replicas_of(key) {
                    ctx.send(
                        node,
                        replica,
                        Msg::StatusReq {
                            txn,
                            key: *key,
                            reply_to: node,
                        },
                    );
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_status(
        &mut self,
        txn: TxnId,
        key: Key,
        status: KeyLearnStatus,
        writeset: Vec<Key>,
        pending_option: Option<UpdateOption>,
        from: NodeId,
        ctx: &mut Ctx<'_>,
    ) -> Vec<(Key, MasterWork)> {
        let Some(session) = self.sessions.get_mut(&txn) else {
            return Vec::new();
        };
        for k in writeset {
            session.keys.entry(k).or_insert(RecKey::Unknown);
        }
        if let Some(o) = pending_option {
            session.options.entry(key).or_insert(o);
        }
        session
            .statuses
            .entry(key)
            .or_default()
            .insert(from, status);
        self.evaluate(txn, ctx)
    }

    /// Work out per-key verdicts; returns classic-round work for keys that
    /// need driving (the caller feeds it to the local master machinery).
    fn evaluate(&mut self, txn: TxnId, ctx: &mut Ctx<'_>) -> Vec<(Key, MasterWork)> {
        let node = self.node;
        let q = ctx.topo.quorum;
        let mut work = Vec::new();
        let Some(session) = self.sessions.get_mut(&txn) else {
            return work;
        };
        let keys: Vec<Key> = session.keys.keys().copied().collect();
        for key in &keys {
            let state = session.keys.get(key).expect("key state").clone();
            if matches!(state, RecKey::Learned(_)) {
                continue;
            }
            let Some(replies) = session.statuses.get(key) else {
                continue;
            };
            // A decision learned anywhere is authoritative.
            if let Some(KeyLearnStatus::Learned { verdict, .. }) = replies
                .values()
                .find(|s| matches!(s, KeyLearnStatus::Learned { .. }))
            {
                session.keys.insert(*key, RecKey::Learned(*verdict));
                continue;
            }
            if replies.len() < q.q_classic {
                continue;
            }
            // Driving keys fall through: if the drive (or its report) was
            // lost, re-enqueueing is idempotent — the master dedupes work in
            // flight and re-proposals re-ack.
            let any_pending = replies
                .values()
                .any(|s| matches!(s, KeyLearnStatus::Pending { .. }));
            let proposal = if let Some(option) = session.options.get(key) {
                RoundProposal::Txn(option.clone())
            } else if any_pending {
                // Someone holds it pending but has not shipped the content;
                // poll again on the next tick.
                continue;
            } else {
                // No surviving copy of the option: fence it out so the
                // outcome stays fixed even if the proposal resurfaces later.
                RoundProposal::Reject {
                    option: OptionId { txn, key: *key },
                    writeset: keys.clone(),
                }
            };
            session.keys.insert(*key, RecKey::Driving);
            work.push((
                *key,
                MasterWork::Drive {
                    proposal,
                    report_to: Some(node),
                },
            ));
        }
        self.maybe_finish(txn, ctx);
        work
    }

    /// Master machinery reports a driven verdict back.
    pub fn on_report(&mut self, key: Key, option: OptionId, verdict: Verdict, ctx: &mut Ctx<'_>) {
        let Some(session) = self.sessions.get_mut(&option.txn) else {
            return;
        };
        session.keys.insert(key, RecKey::Learned(verdict));
        self.maybe_finish(option.txn, ctx);
    }

    fn maybe_finish(&mut self, txn: TxnId, ctx: &mut Ctx<'_>) {
        let node = self.node;
        let Some(session) = self.sessions.get_mut(&txn) else {
            return;
        };
        if session.broadcast_done {
            return;
        }
        let mut verdicts = Vec::new();
        for state in session.keys.values() {
            match state {
                RecKey::Learned(v) => verdicts.push(*v),
                _ => return,
            }
        }
        let decision = if verdicts.iter().all(|v| *v == Verdict::Accept) {
            Decision::Commit
        } else {
            Decision::Abort
        };
        session.broadcast_done = true;
        ctx.trace.push(TraceEvent::TxnDecided {
            t: ctx.now,
            txn,
            decision,
            mode: TxnMode::Mixed,
            conflicts: 0,
        });
        let items: Vec<(Key, Option<UpdateOption>, Verdict, Option<u64>)> = session
            .keys
            .iter()
            .map(|(k, s)| {
                let v = match s {
                    RecKey::Learned(v) => *v,
                    _ => unreachable!("all learned"),
                };
                let round = session.statuses.get(k).and_then(|replies| {
                    replies.values().find_map(|s| match s {
                        KeyLearnStatus::Pending { round, .. } => Some(*round),
                        _ => None,
                    })
                });
                (*k, session.options.get(k).cloned(), v, round)
            })
            .collect();
        for (key, option, verdict, round) in items {
            let Some(option) = option else {
                // Keys fenced without content were already broadcast by the
                // fence's classic round.
                continue;
            };
            // Replicas that already executed the round treat this as a
            // duplicate; stragglers get unblocked.
            let round = round.unwrap_or(0);
            for replica in ctx.topo.replicas_of(&key) {
                ctx.send(
                    node,
                    replica,
                    Msg::Learned {
                        key,
                        round,
                        proposal: RoundProposal::Txn(option.clone()),
                        verdict,
                        decision,
                    },
                );
            }
        }
    }

    pub fn on_tick(&mut self, txn: TxnId, ctx: &mut Ctx<'_>) -> Vec<(Key, MasterWork)> {
        let done = self.sessions.get(&txn).map_or(true, |s| s.broadcast_done);
        if done {
            return Vec::new();
        }
        self.poll(txn, ctx);
        let work = self.evaluate(txn, ctx);
        ctx.timer(
            self.node,
            TimerKind::RecoveryTick { txn },
            ctx.proto.master_tick_us * 4,
        );
        work
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::quorum_sizes;

    // -- fast policy ---------------------------------------------------------

    #[test]
    fn conflict_after_enough_fast_successes_costs_one_classic_round() {
        let mut st = FastPolicyState::new(10);
        for _ in 0..6 {
            assert_eq!(
                fast_policy_step(&mut st, PolicyEvent::FastSuccess),
                RoundMode::Fast
            );
        }
        assert_eq!(
            fast_policy_step(&mut st, PolicyEvent::Conflict),
            RoundMode::Classic
        );
        assert_eq!(st.classic_remaining, 1);
        assert_eq!(
            fast_policy_step(&mut st, PolicyEvent::ClassicDone),
            RoundMode::Fast
        );
    }

    #[test]
    fn early_conflict_sets_gamma_classic_rounds() {
        let mut st = FastPolicyState::new(10);
        fast_policy_step(&mut st, PolicyEvent::FastSuccess);
        assert_eq!(
            fast_policy_step(&mut st, PolicyEvent::Conflict),
            RoundMode::Classic
        );
        assert_eq!(st.classic_remaining, 10);
        for i in 0..10 {
            let mode = fast_policy_step(&mut st, PolicyEvent::ClassicDone);
            if i < 9 {
                assert_eq!(mode, RoundMode::Classic, "round {i}");
            } else {
                assert_eq!(mode, RoundMode::Fast);
            }
        }
    }

    #[test]
    fn no_conflicts_means_fast_forever() {
        let mut st = FastPolicyState::new(10);
        for _ in 0..100 {
            assert_eq!(
                fast_policy_step(&mut st, PolicyEvent::FastSuccess),
                RoundMode::Fast
            );
        }
    }

    // -- collision resolution -------------------------------------------------

    fn opt(seq: u64) -> UpdateOption {
        UpdateOption::new(
            TxnId {
                node: NodeId(50),
                seq,
            },
            Key::new(0, 1),
            UpdateKind::Physical {
                v_read: Some(1),
                v_write: Some(Value::Blob(format!("v{seq}"))),
            },
            vec![Key::new(0, 1)],
        )
    }

    fn nodes(n: usize) -> Vec<NodeId> {
        (0..n as u32).map(NodeId).collect()
    }

    // The worked recovery example: responses
    // (1,3,v0->v1), (2,4,v1->v2), (3,4,v1->v3), (5,4,v1->v2)
    // with n=5, q_classic=3, q_fast=4 must mandate v1->v2.
    #[test]
    fn collision_resolution_worked_example() {
        let v1 = opt(1); // v0 -> v1
        let v2 = opt(2); // v1 -> v2
        let v3 = opt(3); // v1 -> v3
        let all = nodes(5);
        let b3 = Ballot::fast(3, NodeId(9));
        let b4 = Ballot::fast(4, NodeId(9));
        let reports = vec![
            CollisionReport {
                from: all[0],
                accepted: Some((b3, RoundProposal::Txn(v1))),
            },
            CollisionReport {
                from: all[1],
                accepted: Some((b4, RoundProposal::Txn(v2.clone()))),
            },
            CollisionReport {
                from: all[2],
                accepted: Some((b4, RoundProposal::Txn(v3))),
            },
            CollisionReport {
                from: all[4],
                accepted: Some((b4, RoundProposal::Txn(v2.clone()))),
            },
        ];
        let out = resolve_collision(&reports, &all, &quorum_sizes(5));
        match out {
            CollisionOutcome::Mandated(p) => {
                assert_eq!(p.pid(), RoundProposal::Txn(v2).pid())
            }
            other => panic!("expected mandate, got {other:?}"),
        }
    }

    #[test]
    fn collision_resolution_empty_responses_is_free() {
        let all = nodes(5);
        let reports: Vec<CollisionReport> = all
            .iter()
            .take(3)
            .map(|n| CollisionReport {
                from: *n,
                accepted: None,
            })
            .collect();
        assert_eq!(
            resolve_collision(&reports, &all, &quorum_sizes(5)),
            CollisionOutcome::Free
        );
    }

    #[test]
    fn collision_resolution_unanimous_top_ballot_mandates() {
        let all = nodes(5);
        let v = opt(7);
        let b = Ballot::fast(2, NodeId(9));
        let reports: Vec<CollisionReport> = all
            .iter()
            .take(3)
            .map(|n| CollisionReport {
                from: *n,
                accepted: Some((b, RoundProposal::Txn(v.clone()))),
            })
            .collect();
        match resolve_collision(&reports, &all, &quorum_sizes(5)) {
            CollisionOutcome::Mandated(p) => {
                assert_eq!(p.pid(), RoundProposal::Txn(v).pid());
            }
            other => panic!("expected mandate, got {other:?}"),
        }
    }
}
