//! The runnable simulation: node shells wired to the simulated network, the
//! single-threaded event loop, and the harness API the benchmark and tests
//! drive.

use std::collections::BTreeMap;

use crate::baselines::{ProtoKind, QwStore, TpcNode};
use crate::cluster::Topology;
use crate::coordinator::{AppServer, MasterSet, RecoverySet};
use crate::messages::{Envelope, Msg, Payload, TimerKind};
use crate::observer::Observer;
use crate::replica::{value_digest, ReplicaRecord, ReplicaSet};
use crate::simnet::{SimConfig, SimNet};
use crate::trace::{TraceEvent, TraceSink};
use crate::types::{Decision, DcId, Key, NodeId, TxnId, Value, Version};

/// Protocol timing knobs, derived from the latency matrix.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    /// Classic-round window after an early conflict.
    pub gamma: u32,
    /// Coordinator re-drives unlearned keys at this period.
    pub txn_retry_us: u64,
    pub read_retry_us: u64,
    /// Fast attempts before a coordinator gives up and routes via master.
    pub fast_attempts_max: u32,
    pub master_tick_us: u64,
    pub master_timeout_us: u64,
    /// Replica watchdog before dangling-transaction recovery kicks in.
    pub pending_timeout_us: u64,
    pub gap_timeout_us: u64,
    pub tpc_retry_us: u64,
    pub max_rtt_us: u64,
}

impl ProtocolConfig {
    pub fn from_sim(cfg: &SimConfig) -> Self {
        let max_rtt = cfg.max_rtt_us();
        ProtocolConfig {
            gamma: 10,
            txn_retry_us: max_rtt + max_rtt / 2,
            read_retry_us: max_rtt,
            fast_attempts_max: 2,
            master_tick_us: max_rtt,
            master_timeout_us: 2 * max_rtt,
            // Dangling transactions are recovered after 4x the largest RTT.
            pending_timeout_us: 4 * max_rtt,
            gap_timeout_us: max_rtt,
            tpc_retry_us: 2 * max_rtt,
            max_rtt_us: max_rtt,
        }
    }
}

/// Handler context: the simulated network, the trace, the cluster layout and
/// the timing knobs. Nodes send messages and schedule timers through this.
pub struct Ctx<'a> {
    pub now: u64,
    pub net: &'a mut SimNet,
    pub trace: &'a mut TraceSink,
    pub topo: &'a Topology,
    pub proto: &'a ProtocolConfig,
}

impl Ctx<'_> {
    pub fn send(&mut self, src: NodeId, dst: NodeId, msg: Msg) {
        self.net.send(src, dst, msg, self.trace);
    }

    pub fn timer(&mut self, node: NodeId, kind: TimerKind, after_us: u64) {
        self.net.schedule_timer(node, kind, self.now + after_us);
    }
}

// ---------------------------------------------------------------------------
// Storage node shell
// ---------------------------------------------------------------------------

pub struct StorageNode {
    pub node: NodeId,
    pub replicas: ReplicaSet,
    pub masters: MasterSet,
    pub recovery: RecoverySet,
    pub tpc: TpcNode,
    pub qw: QwStore,
}

impl StorageNode {
    fn new(node: NodeId) -> Self {
        StorageNode {
            node,
            replicas: ReplicaSet::new(node),
            masters: MasterSet::new(node),
            recovery: RecoverySet::new(node),
            tpc: TpcNode::new(node),
            qw: QwStore::default(),
        }
    }

    fn process_effects(
        &mut self,
        key: Key,
        effects: Vec<crate::replica::Effect>,
        ctx: &mut Ctx<'_>,
    ) {
        use crate::replica::Effect;
        let node = self.node;
        for e in effects {
            match e {
                Effect::Executed {
                    round,
                    pid,
                    verdict,
                    decision,
                    value_digest,
                    fast,
                } => {
                    ctx.trace.push(TraceEvent::RoundDecided {
                        t: ctx.now,
                        node,
                        key,
                        round,
                        pid,
                        verdict,
                    });
                    if decision == Decision::Commit {
                        ctx.trace.push(TraceEvent::ValueCommitted {
                            t: ctx.now,
                            node,
                            key,
                            round,
                            value_digest,
                        });
                    }
                    if ctx.topo.default_master(&key) == node {
                        self.masters
                            .on_local_round_executed(key, fast, ctx.proto.gamma);
                    }
                }
                Effect::EpochOptionDecided {
                    round,
                    option,
                    decision,
                } => {
                    ctx.trace.push(TraceEvent::EpochOptionDecided {
                        t: ctx.now,
                        node,
                        key,
                        round,
                        option,
                        decision,
                    });
                }
                Effect::RemoteCallback { txn, decision, .. } => {
                    if self.replicas.fired_callbacks.insert(txn) {
                        ctx.trace.push(TraceEvent::StageFired {
                            t: ctx.now,
                            txn,
                            stage: crate::trace::Stage::FinallyRemote,
                            success: decision == Decision::Commit,
                            timeout: false,
                        });
                    }
                }
                Effect::PromiseMoved { ballot } => {
                    ctx.trace.push(TraceEvent::PromiseMoved {
                        t: ctx.now,
                        node,
                        key,
                        ballot,
                    });
                }
                Effect::GapDetected { next_needed } => {
                    ctx.timer(
                        node,
                        TimerKind::ChainGap {
                            key,
                            round: next_needed,
                        },
                        ctx.proto.gap_timeout_us,
                    );
                }
                Effect::PendingArmed { option } => {
                    ctx.timer(
                        node,
                        TimerKind::PendingOption { key, option },
                        ctx.proto.pending_timeout_us,
                    );
                }
            }
        }
    }

    fn handle(&mut self, src: NodeId, msg: Msg, ctx: &mut Ctx<'_>) {
        let node = self.node;
        match msg {
            Msg::Phase1a {
                key,
                ballot,
                range,
                fast,
                reply_to,
            } => {
                let mut fx = Vec::new();
                let (ok, reports, epoch, promised, executed_upto, latest) = {
                    let ReplicaSet { records, log, .. } = &mut self.replicas;
                    let rec = records
                        .entry(key)
                        .or_insert_with(|| ReplicaRecord::new(key));
                    let (ok, reports, epoch) =
                        rec.handle_phase1a(ballot, range, fast, ctx.now, log, &mut fx);
                    let (lr, lv) = rec.committed_state();
                    let latest = match (lr, lv) {
                        (Some(r), Some(v)) => Some((r, v)),
                        _ => None,
                    };
                    (ok, reports, epoch, rec.promised, rec.executed_upto(), latest)
                };
                self.process_effects(key, fx, ctx);
                ctx.send(
                    node,
                    reply_to,
                    Msg::Phase1b {
                        key,
                        ballot,
                        ok,
                        promised,
                        executed_upto,
                        latest,
                        reports,
                        epoch,
                        from: node,
                    },
                );
            }
            Msg::Phase2a {
                key,
                ballot,
                round,
                proposal,
                reply_to,
            } => {
                let re = proposal.txn_option().map(|o| o.id());
                let mut fx = Vec::new();
                let result = {
                    let ReplicaSet { records, log, .. } = &mut self.replicas;
                    let rec = records
                        .entry(key)
                        .or_insert_with(|| ReplicaRecord::new(key));
                    rec.accept_proposal(ballot, round, proposal, ctx.now, log, &mut fx)
                };
                self.process_effects(key, fx, ctx);
                ctx.send(
                    node,
                    reply_to,
                    Msg::Phase2b {
                        key,
                        round,
                        ballot,
                        acceptor: node,
                        re,
                        result,
                    },
                );
            }
            Msg::FastPropose { option, reply_to } => {
                let key = option.key;
                let re = Some(option.id());
                let mut fx = Vec::new();
                let (round, result) = {
                    let ReplicaSet { records, log, .. } = &mut self.replicas;
                    let rec = records
                        .entry(key)
                        .or_insert_with(|| ReplicaRecord::new(key));
                    rec.handle_fast_propose(&option, ctx.now, log, &mut fx)
                };
                self.process_effects(key, fx, ctx);
                ctx.send(
                    node,
                    reply_to,
                    Msg::Phase2b {
                        key,
                        round,
                        ballot: crate::types::Ballot::IMPLICIT_FAST,
                        acceptor: node,
                        re,
                        result,
                    },
                );
            }
            Msg::Learned {
                key,
                round,
                proposal,
                verdict,
                decision,
            } => {
                let mut fx = Vec::new();
                {
                    let ReplicaSet { records, log, .. } = &mut self.replicas;
                    let rec = records
                        .entry(key)
                        .or_insert_with(|| ReplicaRecord::new(key));
                    rec.handle_learned(round, proposal, verdict, decision, ctx.now, log, &mut fx);
                }
                self.process_effects(key, fx, ctx);
            }
            Msg::SetBase {
                key,
                round,
                base,
                constraints,
            } => {
                let quorum = ctx.topo.quorum;
                let ReplicaSet { records, log, .. } = &mut self.replicas;
                let rec = records
                    .entry(key)
                    .or_insert_with(|| ReplicaRecord::new(key));
                let _ = rec.open_epoch(round, &base, &constraints, &quorum, ctx.now, log);
            }
            Msg::ReadReq {
                key,
                reply_to,
                token,
            } => {
                let version = if let Some(v) = self.qw.read(&key) {
                    Some(v)
                } else {
                    self.replicas
                        .records
                        .get(&key)
                        .and_then(|rec| rec.read_latest())
                };
                if let Some((round, value)) = &version {
                    ctx.trace.push(TraceEvent::ReadServed {
                        t: ctx.now,
                        node,
                        key,
                        round: Some(*round),
                        value_digest: value_digest(&Some(value.clone())),
                        session: None,
                    });
                }
                ctx.send(
                    node,
                    reply_to,
                    Msg::ReadRsp {
                        key,
                        token,
                        version,
                        from: node,
                    },
                );
            }
            Msg::StatusReq { txn, key, reply_to } => {
                let (status, writeset, pending_option) = self
                    .replicas
                    .records
                    .get(&key)
                    .map(|rec| {
                        let (status, writeset) = rec.status_for(txn);
                        let pending = rec.pending_option(&crate::types::OptionId { txn, key });
                        (status, writeset, pending)
                    })
                    .unwrap_or((crate::messages::KeyLearnStatus::Unknown, Vec::new(), None));
                ctx.send(
                    node,
                    reply_to,
                    Msg::StatusRsp {
                        txn,
                        key,
                        status,
                        writeset,
                        pending_option,
                        from: node,
                    },
                );
            }
            Msg::SyncReq {
                key,
                from_round,
                reply_to,
            } => {
                let versions: Vec<Version> = self
                    .replicas
                    .records
                    .get(&key)
                    .map(|rec| {
                        rec.versions
                            .iter()
                            .filter(|v| v.round >= from_round)
                            .take(64)
                            .cloned()
                            .collect()
                    })
                    .unwrap_or_default();
                if !versions.is_empty() {
                    ctx.send(node, reply_to, Msg::SyncRsp { key, versions });
                }
            }
            Msg::SyncRsp { key, versions } => {
                let mut fx = Vec::new();
                {
                    let ReplicaSet { records, log, .. } = &mut self.replicas;
                    let rec = records
                        .entry(key)
                        .or_insert_with(|| ReplicaRecord::new(key));
                    rec.adopt_versions(&versions, ctx.now, log, &mut fx);
                }
                self.process_effects(key, fx, ctx);
            }
            Msg::ProposeViaMaster {
                option,
                conflict,
                reply_to,
            } => {
                let key = option.key;
                self.masters
                    .propose_via_master(key, option, conflict, reply_to, ctx);
            }
            Msg::OpenEpochReq { key } => {
                self.masters.open_epoch_request(key, ctx);
            }
            Msg::Phase1b {
                key,
                ballot,
                ok,
                promised,
                executed_upto,
                latest,
                reports,
                epoch,
                from,
            } => {
                self.masters.on_phase1b(
                    key,
                    ballot,
                    ok,
                    promised,
                    executed_upto,
                    latest,
                    reports,
                    epoch,
                    from,
                    ctx,
                );
            }
            Msg::Phase2b {
                key,
                round,
                ballot,
                acceptor,
                result,
                ..
            } => {
                self.masters
                    .on_phase2b(key, round, ballot, acceptor, result, ctx);
            }
            Msg::MasterReport {
                key,
                option,
                verdict,
                ..
            } => {
                self.recovery.on_report(key, option, verdict, ctx);
            }
            Msg::StatusRsp {
                txn,
                key,
                status,
                writeset,
                pending_option,
                from,
            } => {
                let work =
                    self.recovery
                        .on_status(txn, key, status, writeset, pending_option, from, ctx);
                for (k, w) in work {
                    self.masters.enqueue_work(k, w, ctx);
                }
            }
            Msg::TpcBegin {
                txn,
                options,
                reply_to,
            } => self.tpc.on_begin(txn, options, reply_to, ctx),
            Msg::TpcPrepare {
                txn,
                option,
                reply_to,
            } => self.tpc.on_prepare(&mut self.replicas, txn, option, reply_to, ctx),
            Msg::TpcVote { txn, key, yes, from } => self.tpc.on_vote(txn, key, yes, from, ctx),
            Msg::TpcDecision {
                txn,
                key,
                commit,
                reply_to,
            } => self
                .tpc
                .on_decision(&mut self.replicas, txn, key, commit, reply_to, ctx),
            Msg::TpcAck { txn, key, from } => self.tpc.on_ack(txn, key, from, ctx),
            Msg::QwWrite {
                key,
                value,
                version,
                writer,
                reply_to,
            } => {
                self.qw
                    .on_write(node, key, value, version, writer, reply_to, ctx);
            }
            Msg::ReadRsp { .. }
            | Msg::TpcDone { .. }
            | Msg::QwAck { .. } => {
                // App-server traffic; nothing for a storage node to do.
            }
        }
        let _ = src;
    }

    fn on_timer(&mut self, kind: TimerKind, ctx: &mut Ctx<'_>) {
        let node = self.node;
        match kind {
            TimerKind::PendingOption { key, option } => {
                let trigger = self
                    .replicas
                    .records
                    .get(&key)
                    .filter(|rec| rec.is_pending(&option))
                    .and_then(|rec| rec.pending_option(&option));
                if let Some(option) = trigger {
                    self.recovery.start(option, ctx);
                }
            }
            TimerKind::ChainGap { key, round } => {
                let Some(rec) = self.replicas.records.get(&key) else {
                    return;
                };
                let still_gapped = rec.executed_upto() == round
                    && rec
                        .slots
                        .iter()
                        .any(|(r, s)| *r > round && s.learned.is_some())
                    && !rec.epoch.as_ref().map_or(false, |e| e.round == round);
                if still_gapped {
                    let peers: Vec<NodeId> = ctx
                        .topo
                        .replicas_of(&key)
                        .into_iter()
                        .filter(|p| *p != node)
                        .collect();
                    if !peers.is_empty() {
                        let peer = peers[(round as usize) % peers.len()];
                        ctx.send(
                            node,
                            peer,
                            Msg::SyncReq {
                                key,
                                from_round: round,
                                reply_to: node,
                            },
                        );
                    }
                    ctx.timer(
                        node,
                        TimerKind::ChainGap { key, round },
                        ctx.proto.gap_timeout_us,
                    );
                }
            }
            TimerKind::MasterTick { key } => self.masters.on_tick(key, ctx),
            TimerKind::RecoveryTick { txn } => {
                let work = self.recovery.on_tick(txn, ctx);
                for (k, w) in work {
                    self.masters.enqueue_work(k, w, ctx);
                }
            }
            TimerKind::TpcRetry { txn } => self.tpc.on_tick(txn, ctx),
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// World and the event loop
// ---------------------------------------------------------------------------

pub struct World {
    pub storage: Vec<StorageNode>,
    pub apps: Vec<AppServer>,
}

impl World {
    pub fn app_mut(&mut self, dc: DcId) -> &mut AppServer {
        &mut self.apps[dc.0 as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// An internal event was processed.
    Event,
    /// A driver token surfaced; the harness acts on it.
    Driver(u64),
    /// The event queue is empty.
    Idle,
}

pub struct Sim {
    pub topo: Topology,
    pub proto: ProtocolConfig,
    pub net: SimNet,
    pub trace: TraceSink,
    pub observer: Observer,
    pub world: World,
    pub protocol: ProtoKind,
    /// Kill a node after it sends its n-th message (failure injection for
    /// recovery tests).
    kill_after_sends: BTreeMap<NodeId, u64>,
}

impl Sim {
    pub fn new(cfg: SimConfig, mut topo: Topology, protocol: ProtoKind) -> Self {
        cfg.validate().expect("valid sim config");
        assert_eq!(cfg.datacenters.len(), topo.datacenters);
        topo.quorum = crate::types::quorum_sizes(topo.datacenters);
        let dc_of: Vec<DcId> = (0..topo.total_nodes() as u32)
            .map(|n| topo.dc_of(NodeId(n)))
            .collect();
        let proto = ProtocolConfig::from_sim(&cfg);
        let net = SimNet::new(cfg, dc_of);
        let storage = (0..topo.storage_nodes() as u32)
            .map(|n| StorageNode::new(NodeId(n)))
            .collect();
        let apps = (0..topo.datacenters as u8)
            .map(|dc| {
                let node = topo.app_server(DcId(dc));
                AppServer::new_with_protocol(node, DcId(dc), protocol)
            })
            .collect();
        Sim {
            observer: Observer::new(protocol),
            topo,
            proto,
            net,
            trace: TraceSink::collecting(),
            world: World { storage, apps },
            protocol,
            kill_after_sends: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.net.now()
    }

    /// Seed a committed version 0 on every replica of a key (bulk load).
    /// Goes through the normal adoption path so option logs stay replayable.
    pub fn load_record(&mut self, key: Key, value: Value) {
        match self.protocol {
            ProtoKind::Qw { .. } => {
                for replica in self.topo.replicas_of(&key) {
                    let node = &mut self.world.storage[replica.0 as usize];
                    node.qw.records.insert(
                        key,
                        (
                            0,
                            value.clone(),
                            TxnId {
                                node: NodeId(u32::MAX),
                                seq: 0,
                            },
                        ),
                    );
                }
            }
            _ => {
                let v = Version {
                    round: 0,
                    by: None,
                    decision: Decision::Commit,
                    value: Some(value.clone()),
                    fast: true,
                };
                for replica in self.topo.replicas_of(&key) {
                    let node = &mut self.world.storage[replica.0 as usize];
                    let mut fx = Vec::new();
                    let ReplicaSet { records, log, .. } = &mut node.replicas;
                    let rec = records
                        .entry(key)
                        .or_insert_with(|| ReplicaRecord::new(key));
                    rec.adopt_versions(std::slice::from_ref(&v), 0, log, &mut fx);
                }
            }
        }
        self.observer.register_initial(key, value);
    }

    /// Pre-establish classic mastership over all future rounds of a key at
    /// its default master, with the matching promise on every replica (the
    /// shape of a deployment configured for classic rounds).
    pub fn preset_classic_master(&mut self, key: Key) {
        let master = self.topo.default_master(&key);
        let meta = crate::types::RoundMeta {
            range: crate::types::RoundRange::unbounded(1),
            fast: false,
            ballot: crate::types::Ballot::classic(1, master),
        };
        for replica in self.topo.replicas_of(&key) {
            let node = &mut self.world.storage[replica.0 as usize];
            let mut fx = Vec::new();
            let ReplicaSet { records, log, .. } = &mut node.replicas;
            let rec = records
                .entry(key)
                .or_insert_with(|| ReplicaRecord::new(key));
            let _ = rec.handle_phase1a(meta.ballot, meta.range, false, 0, log, &mut fx);
        }
        let gamma = self.proto.gamma;
        self.world.storage[master.0 as usize]
            .masters
            .preset_mastership(key, meta, gamma);
    }

    /// Open a commutative round on every replica of a key (what the table
    /// master does when commutative workloads start).
    pub fn open_commutative_round(&mut self, key: Key) {
        let constraints = self.topo.constraints_for(&key);
        let quorum = self.topo.quorum;
        for replica in self.topo.replicas_of(&key) {
            let node = &mut self.world.storage[replica.0 as usize];
            let ReplicaSet { records, log, .. } = &mut node.replicas;
            let rec = records
                .entry(key)
                .or_insert_with(|| ReplicaRecord::new(key));
            let round = rec.first_undecided();
            let base = rec
                .read_latest()
                .map(|(_, v)| v)
                .unwrap_or_else(|| Value::Counters(BTreeMap::new()));
            let _ = rec.open_epoch(round, &base, &constraints, &quorum, 0, log);
        }
    }

    pub fn kill_node_after_sends(&mut self, node: NodeId, sends: u64) {
        self.kill_after_sends.insert(node, sends);
    }

    pub fn step(&mut self) -> Step {
        let Some(ev) = self.net.pop() else {
            return Step::Idle;
        };
        let t = ev.deliver_at;
        let scratch_mark = self.trace.scratch_len();
        match ev.payload {
            Payload::Deliver(Envelope { src, dst, msg }) => {
                if self.net.node_dead_at(dst, t) {
                    self.trace.push(TraceEvent::Drop {
                        t,
                        src,
                        dst,
                        kind: msg.kind().into(),
                        reason: "dead".into(),
                    });
                } else {
                    self.trace.push(TraceEvent::Deliver {
                        t,
                        src,
                        dst,
                        kind: msg.kind().into(),
                        digest: crate::trace::digest_str(
                            &serde_json::to_string(&msg).expect("msg serializes"),
                        ),
                    });
                    self.dispatch(src, dst, msg, t);
                }
            }
            Payload::Timer { node, kind } => {
                if !self.net.node_killed_at(node, t) {
                    self.dispatch_timer(node, kind, t);
                }
            }
            Payload::Driver { token } => {
                return Step::Driver(token);
            }
            Payload::FailDc { dc } => {
                self.trace.push(TraceEvent::DcFailed { t, dc });
            }
            Payload::HealDc { dc } => {
                self.trace.push(TraceEvent::DcHealed { t, dc });
            }
            Payload::KillNode { node } => {
                self.trace.push(TraceEvent::NodeKilled { t, node });
            }
        }
        self.post_step(scratch_mark, t);
        Step::Event
    }

    fn post_step(&mut self, scratch_mark: usize, t: u64) {
        // Send-count kill triggers.
        if !self.kill_after_sends.is_empty() {
            let mut to_kill = Vec::new();
            for ev in self.trace.scratch_from(scratch_mark) {
                if let TraceEvent::Send { src, .. } = ev {
                    if let Some(rem) = self.kill_after_sends.get_mut(src) {
                        if *rem > 0 {
                            *rem -= 1;
                        }
                        if *rem == 0 {
                            to_kill.push(*src);
                        }
                    }
                }
            }
            for n in to_kill {
                self.kill_after_sends.remove(&n);
                self.net.kill_node_now(n);
                self.trace.push(TraceEvent::NodeKilled { t, node: n });
            }
        }
        // The omniscient observer checks invariants at every event boundary.
        let events = self.trace.take_scratch();
        for ev in &events {
            self.observer.on_event(ev);
        }
    }

    fn dispatch(&mut self, src: NodeId, dst: NodeId, msg: Msg, now: u64) {
        let mut ctx = Ctx {
            now,
            net: &mut self.net,
            trace: &mut self.trace,
            topo: &self.topo,
            proto: &self.proto,
        };
        if self.topo.is_storage(dst) {
            self.world.storage[dst.0 as usize].handle(src, msg, &mut ctx);
        } else {
            let app = &mut self.world.apps[(dst.0 as usize) - self.topo.storage_nodes()];
            match msg {
                Msg::ReadRsp {
                    key,
                    token,
                    version,
                    from,
                } => app.on_read_rsp(token, key, version, from, &mut ctx),
                Msg::Phase2b {
                    key,
                    round,
                    acceptor,
                    re,
                    result,
                    ..
                } => app.on_phase2b(key, round, acceptor, re, result, &mut ctx),
                Msg::MasterReport {
                    key,
                    round,
                    option,
                    verdict,
                    structural,
                } => app.on_master_report(key, round, option, verdict, structural, &mut ctx),
                Msg::TpcDone { txn, committed } => app.on_tpc_done(txn, committed, &mut ctx),
                Msg::QwAck {
                    key,
                    version,
                    writer,
                    from,
                } => app.on_qw_ack(key, version, writer, from, &mut ctx),
                _ => {}
            }
            app.drain_driver_requests(&mut ctx);
        }
    }

    fn dispatch_timer(&mut self, node: NodeId, kind: TimerKind, now: u64) {
        let mut ctx = Ctx {
            now,
            net: &mut self.net,
            trace: &mut self.trace,
            topo: &self.topo,
            proto: &self.proto,
        };
        if self.topo.is_storage(node) {
            self.world.storage[node.0 as usize].on_timer(kind, &mut ctx);
        } else {
            let app = &mut self.world.apps[(node.0 as usize) - self.topo.storage_nodes()];
            match kind {
                TimerKind::SloDeadline { txn } => app.on_slo_deadline(txn, &mut ctx),
                TimerKind::TxnRetry { txn } => app.on_txn_retry(txn, &mut ctx),
                TimerKind::ReadRetry { txn } => app.on_read_retry(txn, &mut ctx),
                _ => {}
            }
            app.drain_driver_requests(&mut ctx);
        }
    }

    /// Drive until the queue drains or the clock passes `until_us`.
    pub fn run_until(&mut self, until_us: u64) {
        loop {
            if self.net.now() > until_us {
                return;
            }
            match self.step() {
                Step::Idle => return,
                _ => continue,
            }
        }
    }

    /// Drive to quiescence with a safety cap on event count.
    pub fn run_to_quiescence(&mut self, max_events: u64) {
        for _ in 0..max_events {
            if self.step() == Step::Idle {
                return;
            }
        }
        let mut recoveries = Vec::new();
        for n in &self.world.storage {
            for (txn, s) in &n.recovery.sessions {
                if !s.broadcast_done {
                    recoveries.push(format!("{}@{}: {:?}", txn, n.node, s.keys));
                }
            }
            for (key, m) in &n.masters.per_key {
                recoveries.push(format!(
                    "master {}@{}: phase={:?} queue={:?} ballot={}",
                    key, n.node, m.phase, m.queue, m.ballot_num
                ));
            }
        }
        panic!(
            "simulation did not quiesce within {max_events} events; t={} queue={:?} recoveries={recoveries:?}",
            self.net.now(),
            self.net.queue_summary()
        );
    }

    /// Convenience context for harness-initiated actions (txn starts).
    pub fn with_app<R>(
        &mut self,
        dc: DcId,
        f: impl FnOnce(&mut AppServer, &mut Ctx<'_>) -> R,
    ) -> R {
        let now = self.net.now();
        let mut ctx = Ctx {
            now,
            net: &mut self.net,
            trace: &mut self.trace,
            topo: &self.topo,
            proto: &self.proto,
        };
        let app = &mut self.world.apps[dc.0 as usize];
        let r = f(app, &mut ctx);
        app.drain_driver_requests(&mut ctx);
        let mark = 0;
        let t = now;
        let _ = (mark, t);
        // Observer consumption happens on the next step; flush now so
        // harness-initiated events are not missed at the end of a run.
        let events = self.trace.take_scratch();
        for ev in &events {
            self.observer.on_event(ev);
        }
        r
    }

    /// End-of-run checks: option-log replay equivalence per storage node,
    /// plus the observer's deferred checks. Returns all violations.
    pub fn finalize(&mut self) -> Vec<String> {
        let events = self.trace.take_scratch();
        for ev in &events {
            self.observer.on_event(ev);
        }
        if self.protocol != ProtoKind::Mdcc {
            return self.observer.violations.clone();
        }
        for node in &self.world.storage {
            let replayed = ReplicaSet::replay_with_quorum(
                node.node,
                &node.replicas.log.lines,
                self.topo.quorum,
            );
            if replayed.records != node.replicas.records {
                self.observer.violations.push(format!(
                    "log replay mismatch at {}: state not reproducible from option log",
                    node.node
                ));
            }
        }
        self.observer.end_of_run();
        self.observer.violations.clone()
    }
}
