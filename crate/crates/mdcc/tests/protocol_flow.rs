//! End-to-end protocol flows through the simulated cluster: fast-round
//! commits in one wide-area round trip, write-write conflict aborts,
//! deadlock avoidance, mastership handover, stage callbacks, and commutative
//! rounds.

use std::collections::BTreeMap;

use mdcc::coordinator::{ProgramCtx, ProgramStep, ReadSpec, Stages, TxnOutcome, TxnProgram};
use mdcc::reads::ReadMode;
use mdcc::trace::{Stage, TraceEvent};
use mdcc::types::{DcId, Key, TxnId, Value, ValueConstraint};
use mdcc::{Decision, ProtoKind, Sim, SimConfig, Topology};

/// Blind physical write of known read-versions (no read phase).
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

/// Read one key locally, then decrement a counter attribute physically.
#[derive(Debug)]
struct ReadModifyWrite {
    key: Key,
    delta: i64,
    step: u8,
}

impl TxnProgram for ReadModifyWrite {
    fn step(&mut self, ctx: &mut ProgramCtx<'_>) -> ProgramStep {
        match self.step {
            0 => {
                self.step = 1;
                ProgramStep::Reads(vec![ReadSpec {
                    key: self.key,
                    mode: ReadMode::Local,
                }])
            }
            _ => {
                let v_read = ctx.read_version(&self.key);
                let value = ctx.get(&self.key).expect("record exists");
                let stock = value.counter("stock").unwrap_or(0);
                let mut m = BTreeMap::new();
                m.insert("stock".to_string(), stock - self.delta);
                ctx.put(self.key, v_read, Value::Counters(m));
                ProgramStep::Done
            }
        }
    }
}

/// Commutative decrement, no reads.
#[derive(Debug)]
struct Decrement {
    key: Key,
    by: i64,
}

impl TxnProgram for Decrement {
    fn step(&mut self, ctx: &mut ProgramCtx<'_>) -> ProgramStep {
        let mut deltas = BTreeMap::new();
        deltas.insert("stock".to_string(), -self.by);
        let mut cons = BTreeMap::new();
        cons.insert("stock".to_string(), ValueConstraint::at_least(0));
        ctx.update_commutative(self.key, deltas, cons);
        ProgramStep::Done
    }
}

fn five_dc_sim(protocol: ProtoKind) -> Sim {
    let mut cfg = SimConfig::default_five_dc();
    cfg.jitter_frac = 0.0;
    cfg.drop_rate = 0.0;
    let topo = Topology::new(5, 1);
    Sim::new(cfg, topo, protocol)
}

fn run_all(sim: &mut Sim) {
    sim.run_to_quiescence(3_000_000);
}

fn outcome(sim: &Sim, txn: TxnId) -> Option<Decision> {
    sim.observer.outcome_of(&txn)
}

#[test]
fn conflict_free_fast_commit_takes_one_wide_round_trip() {
    let mut sim = five_dc_sim(ProtoKind::Mdcc);
    let k1 = Key::new(0, 1);
    let k2 = Key::new(0, 2);
    sim.load_record(k1, Value::Blob("a".into()));
    sim.load_record(k2, Value::Blob("b".into()));
    let txn = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![
                (k1, Some(0), Value::Blob("a2".into())),
                (k2, Some(0), Value::Blob("b2".into())),
            ]),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    run_all(&mut sim);
    assert_eq!(outcome(&sim, txn), Some(Decision::Commit));
    assert!(sim.finalize().is_empty(), "{:?}", sim.observer.violations);

    // Decision latency: one round trip to the 4th-fastest replica. From
    // DC0 the one-way delays are [0.5, 40, 70, 90, 60] ms; the fast quorum
    // of 4 completes with the 70 ms replica, so the decision lands at
    // exactly 140 ms.
    let (start, decide) = txn_times(&sim, txn);
    assert_eq!(decide - start, 140_000);
}

fn txn_times(sim: &Sim, txn: TxnId) -> (u64, u64) {
    let mut start = None;
    let mut decide = None;
    for ev in &sim.trace.events {
        match ev {
            TraceEvent::TxnStart { t, txn: x, .. } if *x == txn => start = Some(*t),
            TraceEvent::TxnDecided { t, txn: x, .. } if *x == txn && decide.is_none() => {
                decide = Some(*t)
            }
            _ => {}
        }
    }
    (start.expect("started"), decide.expect("decided"))
}

#[test]
fn stale_read_version_aborts_via_learned_reject() {
    let mut sim = five_dc_sim(ProtoKind::Mdcc);
    let k = Key::new(0, 1);
    sim.load_record(k, Value::Blob("a".into()));
    // First writer commits over version 0.
    let t1 = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![(k, Some(0), Value::Blob("b".into()))]),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    run_all(&mut sim);
    // Second writer read version 0 before the first committed.
    let t2 = sim.with_app(DcId(1), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![(k, Some(0), Value::Blob("c".into()))]),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    run_all(&mut sim);
    assert_eq!(outcome(&sim, t1), Some(Decision::Commit));
    assert_eq!(outcome(&sim, t2), Some(Decision::Abort));
    assert!(sim.finalize().is_empty(), "{:?}", sim.observer.violations);
}

// Two transactions race the same two records from different data centers.
// Whatever interleaving the network produces, at most one commits, and both
// reach a decision (no deadlock).
#[test]
fn racing_writers_never_both_commit_and_never_deadlock() {
    for seed in 0..30u64 {
        let mut cfg = SimConfig::default_five_dc();
        cfg.seed = seed;
        cfg.jitter_frac = 0.3;
        let topo = Topology::new(5, 1);
        let mut sim = Sim::new(cfg, topo, ProtoKind::Mdcc);
        let k1 = Key::new(0, 1);
        let k2 = Key::new(0, 2);
        sim.load_record(k1, Value::Blob("a".into()));
        sim.load_record(k2, Value::Blob("b".into()));
        let t1 = sim.with_app(DcId(0), |app, ctx| {
            app.begin_txn(
                BlindWrite::new(vec![
                    (k1, Some(0), Value::Blob("x1".into())),
                    (k2, Some(0), Value::Blob("y1".into())),
                ]),
                300_000,
                Stages::default(),
                None,
                ctx,
            )
        });
        let t2 = sim.with_app(DcId(1), |app, ctx| {
            app.begin_txn(
                BlindWrite::new(vec![
                    (k1, Some(0), Value::Blob("x2".into())),
                    (k2, Some(0), Value::Blob("y2".into())),
                ]),
                300_000,
                Stages::default(),
                None,
                ctx,
            )
        });
        run_all(&mut sim);
        let o1 = outcome(&sim, t1);
        let o2 = outcome(&sim, t2);
        assert!(o1.is_some() && o2.is_some(), "seed {seed}: undecided");
        assert!(
            !(o1 == Some(Decision::Commit) && o2 == Some(Decision::Commit)),
            "seed {seed}: dual commit"
        );
        let violations = sim.finalize();
        assert!(violations.is_empty(), "seed {seed}: {violations:?}");
    }
}

#[test]
fn read_modify_write_cycle_works_through_reads_module() {
    let mut sim = five_dc_sim(ProtoKind::Mdcc);
    let k = Key::new(1, 7);
    sim.load_record(k, Value::counters([("stock", 10)]));
    let t = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            Box::new(ReadModifyWrite {
                key: k,
                delta: 3,
                step: 0,
            }),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    run_all(&mut sim);
    assert_eq!(outcome(&sim, t), Some(Decision::Commit));
    // All replicas converge on stock 7.
    for node in &sim.world.storage {
        let rec = node.replicas.get(&k).expect("record");
        let (_, v) = rec.read_latest().expect("committed");
        assert_eq!(v.counter("stock"), Some(7));
    }
    assert!(sim.finalize().is_empty(), "{:?}", sim.observer.violations);
}

#[test]
fn commutative_decrements_commit_in_parallel_in_one_round() {
    let mut sim = five_dc_sim(ProtoKind::Mdcc);
    let k = Key::new(1, 7);
    sim.load_record(k, Value::counters([("stock", 100)]));
    sim.topo
        .table_constraints
        .entry(mdcc::types::TableId(1))
        .or_default()
        .insert("stock".to_string(), ValueConstraint::at_least(0));
    sim.open_commutative_round(k);
    let mut txns = Vec::new();
    for dc in 0..3u8 {
        let t = sim.with_app(DcId(dc), |app, ctx| {
            app.begin_txn(
                Box::new(Decrement { key: k, by: 2 }),
                300_000,
                Stages::default(),
                None,
                ctx,
            )
        });
        txns.push(t);
    }
    run_all(&mut sim);
    for t in &txns {
        assert_eq!(outcome(&sim, *t), Some(Decision::Commit), "{t}");
    }
    assert_eq!(sim.observer.committed_value(&k, "stock"), Some(94));
    assert!(sim.finalize().is_empty(), "{:?}", sim.observer.violations);
}

#[test]
fn stage_callbacks_fire_exclusively_and_in_order() {
    use std::cell::RefCell;
    use std::rc::Rc;
    let fired: Rc<RefCell<Vec<&'static str>>> = Rc::new(RefCell::new(Vec::new()));
    let mut sim = five_dc_sim(ProtoKind::Mdcc);
    let k = Key::new(0, 1);
    sim.load_record(k, Value::Blob("a".into()));
    let f1 = fired.clone();
    let f2 = fired.clone();
    let f3 = fired.clone();
    let f4 = fired.clone();
    let stages = Stages {
        on_failure: Some(Box::new(move |_| f1.borrow_mut().push("failure"))),
        on_accept: Some(Box::new(move |_| f2.borrow_mut().push("accept"))),
        on_commit: Some(Box::new(move |_, ok| {
            f3.borrow_mut().push(if ok { "commit-ok" } else { "commit-fail" })
        })),
        finally: Some(Box::new(move |_, ok, timeout| {
            assert!(ok && !timeout);
            f4.borrow_mut().push("finally")
        })),
        finally_remote: Some("email".into()),
    };
    let txn = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![(k, Some(0), Value::Blob("b".into()))]),
            300_000,
            stages,
            None,
            ctx,
        )
    });
    run_all(&mut sim);
    assert_eq!(outcome(&sim, txn), Some(Decision::Commit));
    assert_eq!(*fired.borrow(), vec!["commit-ok", "finally"]);
    // Stage trace: exactly one of failure/accept/commit, finally at most
    // once, and the durable remote callback fired on the storage side.
    let stages_fired: Vec<Stage> = sim
        .trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::StageFired { txn: x, stage, .. } if *x == txn => Some(*stage),
            _ => None,
        })
        .collect();
    assert_eq!(
        stages_fired
            .iter()
            .filter(|s| matches!(s, Stage::OnCommit | Stage::OnAccept | Stage::OnFailure))
            .count(),
        1
    );
    assert_eq!(stages_fired.iter().filter(|s| **s == Stage::Finally).count(), 1);
    assert!(stages_fired.contains(&Stage::FinallyRemote));
    assert!(sim.finalize().is_empty());
}

#[test]
fn slow_outcome_fires_on_accept_then_finally_with_timeout_flag() {
    use std::cell::RefCell;
    use std::rc::Rc;
    let fired: Rc<RefCell<Vec<(&'static str, bool)>>> = Rc::new(RefCell::new(Vec::new()));
    let mut sim = five_dc_sim(ProtoKind::Mdcc);
    let k = Key::new(0, 1);
    sim.load_record(k, Value::Blob("a".into()));
    let f1 = fired.clone();
    let f2 = fired.clone();
    let stages = Stages {
        on_accept: Some(Box::new(move |_| f1.borrow_mut().push(("accept", false)))),
        finally: Some(Box::new(move |_, ok, timeout| {
            f2.borrow_mut().push(("finally", timeout));
            assert!(ok);
        })),
        ..Stages::default()
    };
    // SLO shorter than one wide-area round trip: the fastest replica has
    // answered (Phase2b seen), but the outcome is pending at the deadline.
    let txn = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![(k, Some(0), Value::Blob("b".into()))]),
            50_000,
            stages,
            None,
            ctx,
        )
    });
    run_all(&mut sim);
    assert_eq!(outcome(&sim, txn), Some(Decision::Commit));
    assert_eq!(*fired.borrow(), vec![("accept", false), ("finally", true)]);
}

#[test]
fn no_phase2b_by_deadline_fires_on_failure() {
    use std::cell::RefCell;
    use std::rc::Rc;
    let fired: Rc<RefCell<u32>> = Rc::new(RefCell::new(0));
    let mut cfg = SimConfig::default_five_dc();
    cfg.jitter_frac = 0.0;
    let topo = Topology::new(5, 1);
    let mut sim = Sim::new(cfg, topo, ProtoKind::Mdcc);
    let k = Key::new(0, 1);
    sim.load_record(k, Value::Blob("a".into()));
    // Every data center unreachable from the start: no Phase2b can arrive.
    for dc in 0..5 {
        sim.net.fail_datacenter(DcId(dc), 0, u64::MAX);
    }
    let f = fired.clone();
    let stages = Stages {
        on_failure: Some(Box::new(move |_| *f.borrow_mut() += 1)),
        ..Stages::default()
    };
    sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![(k, Some(0), Value::Blob("b".into()))]),
            100_000,
            stages,
            None,
            ctx,
        )
    });
    sim.run_until(200_000);
    assert_eq!(*fired.borrow(), 1);
}

#[test]
fn single_replica_deployment_decides_from_local_verdict() {
    let cfg = SimConfig::single_node();
    let topo = Topology::new(1, 1);
    let mut sim = Sim::new(cfg, topo, ProtoKind::Mdcc);
    let k = Key::new(0, 1);
    sim.load_record(k, Value::Blob("a".into()));
    let t = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            BlindWrite::new(vec![(k, Some(0), Value::Blob("b".into()))]),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    run_all(&mut sim);
    assert_eq!(outcome(&sim, t), Some(Decision::Commit));
    assert!(sim.finalize().is_empty());
}

#[test]
fn read_only_transaction_commits_immediately() {
    let mut sim = five_dc_sim(ProtoKind::Mdcc);
    let k = Key::new(0, 1);
    sim.load_record(k, Value::Blob("a".into()));
    #[derive(Debug)]
    struct ReadOnly {
        key: Key,
        step: u8,
    }
    impl TxnProgram for ReadOnly {
        fn step(&mut self, _ctx: &mut ProgramCtx<'_>) -> ProgramStep {
            if self.step == 0 {
                self.step = 1;
                return ProgramStep::Reads(vec![ReadSpec {
                    key: self.key,
                    mode: ReadMode::Local,
                }]);
            }
            ProgramStep::Done
        }
    }
    let t = sim.with_app(DcId(0), |app, ctx| {
        app.begin_txn(
            Box::new(ReadOnly { key: k, step: 0 }),
            300_000,
            Stages::default(),
            None,
            ctx,
        )
    });
    run_all(&mut sim);
    assert_eq!(outcome(&sim, t), Some(Decision::Commit));
}

#[test]
fn identical_config_and_seed_give_byte_identical_traces() {
    let run = || {
        let mut cfg = SimConfig::default_five_dc();
        cfg.jitter_frac = 0.25;
        cfg.drop_rate = 0.02;
        cfg.seed = 1234;
        let topo = Topology::new(5, 1);
        let mut sim = Sim::new(cfg, topo, ProtoKind::Mdcc);
        sim.trace = mdcc::trace::TraceSink::full();
        let k = Key::new(0, 1);
        sim.load_record(k, Value::Blob("a".into()));
        for dc in 0..3u8 {
            sim.with_app(DcId(dc), |app, ctx| {
                app.begin_txn(
                    BlindWrite::new(vec![(k, Some(0), Value::Blob(format!("v{dc}")))]),
                    300_000,
                    Stages::default(),
                    None,
                    ctx,
                )
            });
        }
        run_all(&mut sim);
        sim.trace.to_lines()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(!a.is_empty());
}
