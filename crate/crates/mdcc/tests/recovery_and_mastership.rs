//! Dangling-transaction recovery and mastership handover, driven through the
//! full simulated cluster with coordinator kills.

use mdcc::coordinator::{ProgramCtx, ProgramStep, Stages, TxnProgram};
use mdcc::messages::RoundProposal;
use mdcc::types::{DcId, Key, NodeId, Value};
use mdcc::{Ballot, Decision, ProtoKind, Sim, SimConfig, Topology, Verdict};

#[derive(Debug)]
struct BlindWrite {
    writes: Vec<(Key, Option<u64>, Value)>,
    done: bool,
}

impl BlindWrite {
    fn new(writes: Vec<(Key, Option<u64>, Value)>) -> Box<Self> {
        Box::new(BlindWrite {
            writes,
            done: false,
        })
    }
}

impl TxnProgram for BlindWrite {
    fn step(&mut self, ctx: &mut ProgramCtx<'_>) -> ProgramStep {
        if !self.done {
            self.done = true;
            for (key, v_read, value) in &self.writes {
                ctx.put(*key, *v_read, value.clone());
            }
        }
        ProgramStep::Done
    }
}

fn sim_with_two_keys() -> (Sim, Key, Key) {
    let mut cfg = SimConfig::default_five_dc();
    cfg.jitter_frac = 0.0;
    let topo = Topology::new(5, 1);
    let mut sim = Sim::new(cfg, topo, ProtoKind::Mdcc);
    let k1 = Key::new(0, 1);
    let k2 = Key::new(0, 2);
    sim.load_record(k1, Value::Blob("a".into()));
    sim.load_record(k2, Value::Blob("b".into()));
    (sim, k1, k2)
}

/// Kill the coordinator after its `n`-th sent message, run recovery to
/// quiescence, and report the outcome with all violations.
fn run_killed_at(n: u64) -> (Option<Decision>, Vec<String>, Sim, mdcc::TxnId) {
    let (mut sim, k1, k2) = sim_with_two_keys();
    let app_node = sim.topo.app_server(DcId(0));
    if n > 0 {
        sim.kill_node_after_sends(app_node, n);
    } else {
        sim.net.kill_node_now(app_node);
    }
    let txn = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![
                (k1, Some(0), Value::Blob("x".into())),
                (k2, Some(0), Value::Blob("y".into())),
            ]),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    sim.run_to_quiescence(5_000_000);
    let outcome = sim.observer.outcome_of(&txn);
    let violations = sim.finalize();
    (outcome, violations, sim, txn)
}

// The coordinator dies right after proposing everything (before any Learned
// broadcast). Replicas time out on the pending options and recovery must
// finish the commit: both options validate, so the outcome is commit.
#[test]
fn coordinator_death_after_propose_recovers_to_commit() {
    // 10 sends: 2 keys x 5 replicas of fast proposals.
    let (outcome, violations, sim, txn) = run_killed_at(10);
    assert_eq!(outcome, Some(Decision::Commit), "recovery must commit");
    assert!(violations.is_empty(), "{violations:?}");
    // Every replica executed both writes.
    for node in &sim.world.storage {
        for key in [Key::new(0, 1), Key::new(0, 2)] {
            let rec = node.replicas.get(&key).expect("record");
            let (_, v) = rec.read_latest().expect("committed");
            assert!(matches!(v, Value::Blob(_)));
            assert_eq!(rec.decided_options.get(&txn).map(|d| d.decision), Some(Decision::Commit));
        }
    }
}

// A pending-option watchdog that fires when nothing is pending must not
// start a recovery session.
#[test]
fn watchdog_without_pending_option_is_a_noop() {
    let (mut sim, k1, _) = sim_with_two_keys();
    let ghost = mdcc::types::OptionId {
        txn: mdcc::TxnId {
            node: NodeId(99),
            seq: 1,
        },
        key: k1,
    };
    sim.net.schedule_timer(
        NodeId(0),
        mdcc::messages::TimerKind::PendingOption {
            key: k1,
            option: ghost,
        },
        1000,
    );
    sim.run_to_quiescence(100_000);
    for node in &sim.world.storage {
        assert!(node.recovery.sessions.is_empty());
    }
    assert!(sim.finalize().is_empty());
}

// One option is doomed (stale v_read): whatever the kill point, if recovery
// runs it must abort the transaction everywhere.
#[test]
fn coordinator_death_with_rejected_option_recovers_to_abort() {
    let mut cfg = SimConfig::default_five_dc();
    cfg.jitter_frac = 0.0;
    let topo = Topology::new(5, 1);
    let mut sim = Sim::new(cfg, topo, ProtoKind::Mdcc);
    let k1 = Key::new(0, 1);
    let k2 = Key::new(0, 2);
    sim.load_record(k1, Value::Blob("a".into()));
    sim.load_record(k2, Value::Blob("b".into()));
    // Bump k2 to version 1 so a v_read=0 write gets rejected.
    let setup = sim.with_app(DcId(1), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![(k2, Some(0), Value::Blob("b1".into()))]),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    sim.run_to_quiescence(1_000_000);
    assert_eq!(sim.observer.outcome_of(&setup), Some(Decision::Commit));

    let app_node = sim.topo.app_server(DcId(0));
    sim.kill_node_after_sends(app_node, 10);
    let txn = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![
                (k1, Some(0), Value::Blob("x".into())),
                (k2, Some(0), Value::Blob("y".into())),
            ]),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    sim.run_to_quiescence(5_000_000);
    assert_eq!(sim.observer.outcome_of(&txn), Some(Decision::Abort));
    let violations = sim.finalize();
    assert!(violations.is_empty(), "{violations:?}");
    // k1 must not keep the aborted write.
    for node in &sim.world.storage {
        let rec = node.replicas.get(&k1).expect("record");
        let (_, v) = rec.read_latest().expect("committed");
        assert_eq!(v, Value::Blob("a".into()));
    }
}

// Mastership acquisition over a round that already holds a fast acceptance:
// the new master must re-propose the revealed option rather than overwrite
// it (Phase 1 obligation).
#[test]
fn takeover_re_proposes_revealed_option() {
    let mut cfg = SimConfig::default_five_dc();
    cfg.jitter_frac = 0.0;
    let topo = Topology::new(5, 1);
    let mut sim = Sim::new(cfg, topo, ProtoKind::Mdcc);
    let k = Key::new(0, 1);
    sim.load_record(k, Value::Blob("a".into()));
    // A doomed-to-dangle proposal: coordinator dies right after the 5 fast
    // proposals land.
    let app_node = sim.topo.app_server(DcId(2));
    sim.kill_node_after_sends(app_node, 5);
    let txn = sim.with_app(DcId(2), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![(k, Some(0), Value::Blob("ghost".into()))]),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    sim.run_to_quiescence(5_000_000);
    // Recovery acquired mastership, saw the accepted option in Phase1b, and
    // drove exactly that option to a decision: the ghost write commits.
    assert_eq!(sim.observer.outcome_of(&txn), Some(Decision::Commit));
    for node in &sim.world.storage {
        let rec = node.replicas.get(&k).expect("record");
        let (_, v) = rec.read_latest().expect("committed");
        assert_eq!(v, Value::Blob("ghost".into()));
    }
    assert!(sim.finalize().is_empty());
}

// Two masters with ballots b1 < b2: the lower ballot's Phase2a is refused by
// the quorum once the higher promise exists.
#[test]
fn lower_ballot_master_is_rejected_after_higher_promise() {
    use mdcc::replica::{OptionLog, ReplicaRecord};
    use mdcc::messages::AcceptResult;
    use mdcc::types::{RoundRange, TxnId, UpdateKind, UpdateOption};

    let key = Key::new(0, 9);
    let mut rec = ReplicaRecord::new(key);
    let mut log = OptionLog::default();
    let mut fx = Vec::new();
    let b1 = Ballot::classic(1, NodeId(0));
    let b2 = Ballot::classic(2, NodeId(1));
    let (ok1, _, _) = rec.handle_phase1a(b1, RoundRange::unbounded(0), false, 0, &mut log, &mut fx);
    let (ok2, _, _) = rec.handle_phase1a(b2, RoundRange::unbounded(0), false, 1, &mut log, &mut fx);
    assert!(ok1 && ok2);
    let option = UpdateOption::new(
        TxnId {
            node: NodeId(7),
            seq: 1,
        },
        key,
        UpdateKind::Physical {
            v_read: None,
            v_write: Some(Value::Blob("m1".into())),
        },
        vec![key],
    );
    // b1's Phase2a arrives after b2's promise: refused with the promise.
    let res = rec.accept_proposal(b1, 0, RoundProposal::Txn(option.clone()), 2, &mut log, &mut fx);
    assert!(matches!(res, AcceptResult::StaleBallot { promised } if promised == b2));
    // b2's Phase2a is accepted.
    let res = rec.accept_proposal(b2, 0, RoundProposal::Txn(option), 3, &mut log, &mut fx);
    assert!(matches!(
        res,
        AcceptResult::Accepted {
            verdict: Verdict::Accept,
            ..
        }
    ));
}

// Kill the coordinator after every prefix length of its send trace; recovery
// must resolve every transaction to a deterministic outcome consistent with
// verdicts already learned at kill time, with zero safety violations.
#[test]
fn recovery_is_deterministic_across_all_kill_points() {
    // First measure the full (unkilled) trace length.
    let (outcome, violations, sim, _) = run_killed_at(u64::MAX);
    assert_eq!(outcome, Some(Decision::Commit));
    assert!(violations.is_empty());
    let app_node = sim.topo.app_server(DcId(0));
    let total_sends = sim
        .trace
        .events
        .iter()
        .filter(|e| matches!(e, mdcc::trace::TraceEvent::Send { src, .. } if *src == app_node))
        .count() as u64;
    assert!(total_sends >= 10, "expected at least the proposal fan-out");

    for kill_at in 1..=total_sends {
        let (outcome, violations, _, _) = run_killed_at(kill_at);
        // Both options validate cleanly, so any completed recovery commits;
        // a kill before any proposal leaves the transaction unknown.
        match outcome {
            Some(Decision::Commit) | None => {}
            Some(Decision::Abort) => {
                panic!("kill at {kill_at}: recovery aborted a clean transaction")
            }
        }
        assert!(violations.is_empty(), "kill at {kill_at}: {violations:?}");
    }
}
