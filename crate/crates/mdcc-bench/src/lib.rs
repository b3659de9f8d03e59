//! Benchmark harness: configured workloads run against a chosen commit
//! protocol over the simulated multi-data-center cluster, with latency and
//! throughput metrics, CDF tables and CSV output computed purely from the
//! event trace.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdcc::coordinator::{ProgramCtx, ProgramStep, ReadSpec, Stages, TxnProgram};
use mdcc::reads::ReadMode;
use mdcc::trace::{TraceEvent, TxnMode};
use mdcc::types::{DcId, Key, TableId, TxnId, Value, ValueConstraint};
use mdcc::{Decision, ProtoKind, Sim, SimConfig, Step, Topology};

pub const ITEMS_TABLE: u8 = 1;
pub const ORDERS_TABLE: u8 = 2;
pub const ORDERLINES_TABLE: u8 = 3;

// ---------------------------------------------------------------------------
// Workload specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    MicroPurchase,
    TpcwLiteOrdering,
}

impl std::str::FromStr for WorkloadKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro-purchase" => Ok(WorkloadKind::MicroPurchase),
            "tpcw-lite-ordering" => Ok(WorkloadKind::TpcwLiteOrdering),
            other => bail!("unknown workload {other:?} (micro-purchase | tpcw-lite-ordering)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolChoice {
    MdccClassic,
    MdccFastNonComm,
    MdccFastComm,
    TwoPhaseCommit,
    QuorumWrite3,
    QuorumWrite4,
}

impl ProtocolChoice {
    pub fn label(&self) -> &'static str {
        match self {
            ProtocolChoice::MdccClassic => "mdcc-classic",
            ProtocolChoice::MdccFastNonComm => "mdcc-fast-noncomm",
            ProtocolChoice::MdccFastComm => "mdcc-fast-comm",
            ProtocolChoice::TwoPhaseCommit => "2pc",
            ProtocolChoice::QuorumWrite3 => "qw3",
            ProtocolChoice::QuorumWrite4 => "qw4",
        }
    }

    fn proto_kind(&self) -> ProtoKind {
        match self {
            ProtocolChoice::MdccClassic
            | ProtocolChoice::MdccFastNonComm
            | ProtocolChoice::MdccFastComm => ProtoKind::Mdcc,
            ProtocolChoice::TwoPhaseCommit => ProtoKind::Tpc,
            ProtocolChoice::QuorumWrite3 => ProtoKind::Qw { q: 3 },
            ProtocolChoice::QuorumWrite4 => ProtoKind::Qw { q: 4 },
        }
    }

    fn commutative(&self) -> bool {
        matches!(self, ProtocolChoice::MdccFastComm)
    }
}

impl std::str::FromStr for ProtocolChoice {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mdcc-classic" => ProtocolChoice::MdccClassic,
            "mdcc-fast-noncomm" => ProtocolChoice::MdccFastNonComm,
            "mdcc-fast-comm" => ProtocolChoice::MdccFastComm,
            "2pc" => ProtocolChoice::TwoPhaseCommit,
            "qw3" => ProtocolChoice::QuorumWrite3,
            "qw4" => ProtocolChoice::QuorumWrite4,
            other => bail!(
                "unknown protocol {other:?} (mdcc-classic | mdcc-fast-noncomm | \
                 mdcc-fast-comm | 2pc | qw3 | qw4)"
            ),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FailureScript {
    pub dc: u8,
    pub fail_at_s: f64,
    pub heal_at_s: f64,
}

impl std::str::FromStr for FailureScript {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            bail!("failure script must be dc:fail_at:heal_at (seconds)");
        }
        Ok(FailureScript {
            dc: parts[0].parse().context("dc index")?,
            fail_at_s: parts[1].parse().context("fail_at seconds")?,
            heal_at_s: parts[2].parse().context("heal_at seconds")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub items: u64,
    pub clients: u32,
    pub duration_s: f64,
    pub protocol: ProtocolChoice,
    pub failure: Option<FailureScript>,
    /// Data center hosting the emulated clients.
    pub client_dc: u8,
    /// Initial stock per item.
    pub stock: i64,
    /// Transaction SLO handed to every transaction.
    pub slo_ms: u64,
    /// Extra simulated time after the issue window for in-flight work to
    /// drain.
    pub drain_margin_s: f64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, protocol: ProtocolChoice) -> Self {
        WorkloadSpec {
            kind,
            items: 10_000,
            clients: 100,
            duration_s: 10.0,
            protocol,
            failure: None,
            client_dc: 0,
            stock: 100,
            slo_ms: 300,
            drain_margin_s: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.items < 1 {
            bail!("items must be >= 1");
        }
        if self.clients < 1 {
            bail!("clients must be >= 1");
        }
        if self.duration_s <= 0.0 {
            bail!("duration must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Workload transaction programs
// ---------------------------------------------------------------------------

pub fn item_key(id: u64) -> Key {
    Key::new(ITEMS_TABLE, id)
}

fn stock_constraints() -> BTreeMap<String, ValueConstraint> {
    let mut m = BTreeMap::new();
    m.insert("stock".to_string(), ValueConstraint::at_least(0));
    m
}

/// One purchase: a handful of items, each decremented by 1..=3. Commutative
/// runs propose blind deltas; the others read then write.
#[derive(Debug)]
struct PurchaseTxn {
    picks: Vec<(Key, i64)>,
    commutative: bool,
    step: u8,
}

impl TxnProgram for PurchaseTxn {
    fn step(&mut self, ctx: &mut ProgramCtx<'_>) -> ProgramStep {
        if self.commutative {
            for (key, amount) in &self.picks {
                let mut deltas = BTreeMap::new();
                deltas.insert("stock".to_string(), -amount);
                ctx.update_commutative(*key, deltas, stock_constraints());
            }
            return ProgramStep::Done;
        }
        if self.step == 0 {
            self.step = 1;
            return ProgramStep::Reads(
                self.picks
                    .iter()
                    .map(|(key, _)| ReadSpec {
                        key: *key,
                        mode: ReadMode::Local,
                    })
                    .collect(),
            );
        }
        for (key, amount) in &self.picks {
            let Some(value) = ctx.get(key) else { continue };
            let stock = value.counter("stock").unwrap_or(0);
            let take = (*amount).min(stock);
            if take <= 0 {
                continue; // out of stock; buy nothing
            }
            let v_read = ctx.read_version(key);
            let mut m = BTreeMap::new();
            m.insert("stock".to_string(), stock - take);
            ctx.put(*key, v_read, Value::Counters(m));
        }
        ProgramStep::Done
    }
}

/// TPC-W ordering-mix write transaction, database operations only: create an
/// order row, one order line per item, and decrement each item's stock.
#[derive(Debug)]
struct OrderTxn {
    order_key: Key,
    lines: Vec<(Key, Key, i64)>, // (orderline key, item key, qty)
    commutative: bool,
    step: u8,
}

impl TxnProgram for OrderTxn {
    fn step(&mut self, ctx: &mut ProgramCtx<'_>) -> ProgramStep {
        if self.step == 0 {
            self.step = 1;
            if !self.commutative {
                return ProgramStep::Reads(
                    self.lines
                        .iter()
                        .map(|(_, item, _)| ReadSpec {
                            key: *item,
                            mode: ReadMode::Local,
                        })
                        .collect(),
                );
            }
        }
        ctx.put(
            self.order_key,
            None,
            Value::Blob(format!("order:{}", self.order_key.id)),
        );
        for (line_key, item, qty) in &self.lines {
            ctx.put(
                *line_key,
                None,
                Value::Blob(format!("line:{}x{qty}", item.id)),
            );
            if self.commutative {
                let mut deltas = BTreeMap::new();
                deltas.insert("stock".to_string(), -qty);
                ctx.update_commutative(*item, deltas, stock_constraints());
            } else if let Some(value) = ctx.get(item) {
                let stock = value.counter("stock").unwrap_or(0);
                let take = (*qty).min(stock);
                if take > 0 {
                    let v_read = ctx.read_version(item);
                    let mut m = BTreeMap::new();
                    m.insert("stock".to_string(), stock - take);
                    ctx.put(*item, v_read, Value::Counters(m));
                }
            }
        }
        ProgramStep::Done
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TxnRow {
    pub txn: TxnId,
    pub protocol: &'static str,
    pub start_us: u64,
    pub decide_us: Option<u64>,
    pub outcome: Outcome,
    pub mode: Option<TxnMode>,
    pub msgs: u32,
    pub conflicts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Committed,
    Aborted,
    Unknown,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Committed => write!(f, "committed"),
            Outcome::Aborted => write!(f, "aborted"),
            Outcome::Unknown => write!(f, "unknown"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub rows: Vec<TxnRow>,
    pub committed: u64,
    pub aborted: u64,
    pub unknown: u64,
    pub duration_s: f64,
    pub throughput_tps: f64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p90_ms: f64,
    pub latency_p99_ms: f64,
    /// (latency ms, cumulative fraction) over committed transactions.
    pub cdf: Vec<(f64, f64)>,
}

/// Build per-transaction rows and aggregates purely from the trace stream.
/// Recomputing from a saved trace therefore reproduces the CSV bit-exactly.
pub fn metrics_from_events(
    events: &[TraceEvent],
    protocol: &'static str,
    duration_s: f64,
) -> MetricsReport {
    let mut rows: BTreeMap<TxnId, TxnRow> = BTreeMap::new();
    for ev in events {
        match ev {
            TraceEvent::TxnStart { t, txn, .. } => {
                rows.entry(*txn).or_insert(TxnRow {
                    txn: *txn,
                    protocol,
                    start_us: *t,
                    decide_us: None,
                    outcome: Outcome::Unknown,
                    mode: None,
                    msgs: 0,
                    conflicts: 0,
                });
            }
            TraceEvent::TxnDecided {
                t,
                txn,
                decision,
                mode,
                conflicts,
            } => {
                if let Some(row) = rows.get_mut(txn) {
                    if row.decide_us.is_none() {
                        row.decide_us = Some(*t);
                        row.outcome = match decision {
                            Decision::Commit => Outcome::Committed,
                            Decision::Abort => Outcome::Aborted,
                        };
                        row.mode = Some(*mode);
                        row.conflicts = *conflicts;
                    }
                }
            }
            TraceEvent::Send { txn: Some(txn), .. } => {
                if let Some(row) = rows.get_mut(txn) {
                    row.msgs += 1;
                }
            }
            _ => {}
        }
    }
    let rows: Vec<TxnRow> = rows.into_values().collect();
    let committed = rows.iter().filter(|r| r.outcome == Outcome::Committed).count() as u64;
    let aborted = rows.iter().filter(|r| r.outcome == Outcome::Aborted).count() as u64;
    let unknown = rows.iter().filter(|r| r.outcome == Outcome::Unknown).count() as u64;
    let mut lat: Vec<u64> = rows
        .iter()
        .filter(|r| r.outcome == Outcome::Committed)
        .filter_map(|r| r.decide_us.map(|d| d - r.start_us))
        .collect();
    lat.sort_unstable();
    let pct = |p: f64| -> f64 {
        if lat.is_empty() {
            return f64::NAN;
        }
        let idx = ((lat.len() as f64 - 1.0) * p).round() as usize;
        lat[idx] as f64 / 1000.0
    };
    let mean = if lat.is_empty() {
        f64::NAN
    } else {
        lat.iter().sum::<u64>() as f64 / lat.len() as f64 / 1000.0
    };
    let cdf: Vec<(f64, f64)> = lat
        .iter()
        .enumerate()
        .map(|(i, v)| (*v as f64 / 1000.0, (i + 1) as f64 / lat.len() as f64))
        .collect();
    MetricsReport {
        committed,
        aborted,
        unknown,
        duration_s,
        throughput_tps: committed as f64 / duration_s,
        latency_mean_ms: mean,
        latency_p50_ms: pct(0.50),
        latency_p90_ms: pct(0.90),
        latency_p99_ms: pct(0.99),
        cdf,
        rows,
    }
}

pub const CSV_HEADER: &str = "txn_id,protocol,start_us,decide_us,outcome,mode,msgs,conflicts";

pub fn rows_to_csv(rows: &[TxnRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let decide = r.decide_us.map(|d| d.to_string()).unwrap_or_default();
        let mode = match r.mode {
            Some(TxnMode::Fast) => "fast",
            Some(TxnMode::Classic) => "classic",
            Some(TxnMode::Mixed) => "mixed",
            None => "",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.txn, r.protocol, r.start_us, decide, r.outcome, mode, r.msgs, r.conflicts
        ));
    }
    out
}

pub fn write_csv(path: &Path, rows: &[TxnRow]) -> Result<()> {
    std::fs::write(path, rows_to_csv(rows)).with_context(|| format!("writing {path:?}"))
}

pub fn cdf_to_csv(cdf: &[(f64, f64)]) -> String {
    let mut out = String::from("latency_ms,fraction\n");
    for (ms, frac) in cdf {
        out.push_str(&format!("{ms},{frac}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Running a workload
// ---------------------------------------------------------------------------

pub struct RunResult {
    pub metrics: MetricsReport,
    pub violations: Vec<String>,
    pub lost_updates: u64,
    pub sim: Sim,
}

struct ClientState {
    id: u32,
    rng: ChaCha8Rng,
    seq: u64,
}

fn build_program(
    spec: &WorkloadSpec,
    client: &mut ClientState,
    commutative: bool,
) -> Box<dyn TxnProgram> {
    client.seq += 1;
    let n_items = client.rng.gen_range(1..=3).min(spec.items as usize);
    let mut picks = Vec::with_capacity(n_items);
    let mut used = std::collections::BTreeSet::new();
    for _ in 0..n_items {
        let mut id = client.rng.gen_range(0..spec.items);
        while used.contains(&id) {
            id = (id + 1) % spec.items;
        }
        used.insert(id);
        let qty = client.rng.gen_range(1..=3i64);
        picks.push((item_key(id), qty));
    }
    match spec.kind {
        WorkloadKind::MicroPurchase => Box::new(PurchaseTxn {
            picks,
            commutative,
            step: 0,
        }),
        WorkloadKind::TpcwLiteOrdering => {
            let uid = (client.id as u64) << 40 | client.seq;
            let order_key = Key::new(ORDERS_TABLE, uid);
            let lines = picks
                .iter()
                .enumerate()
                .map(|(i, (item, qty))| {
                    (Key::new(ORDERLINES_TABLE, uid << 4 | i as u64), *item, *qty)
                })
                .collect();
            Box::new(OrderTxn {
                order_key,
                lines,
                commutative,
                step: 0,
            })
        }
    }
}

/// Construct the simulated cluster for a workload (loaded, configured, with
/// the failure script armed) without running it.
pub fn build_sim(spec: &WorkloadSpec, sim_cfg: &SimConfig) -> Result<Sim> {
    spec.validate()?;
    sim_cfg.validate()?;
    let mut topo = Topology::new(sim_cfg.datacenters.len(), 1);
    topo.table_constraints
        .insert(TableId(ITEMS_TABLE), stock_constraints());
    if spec.protocol == ProtocolChoice::MdccClassic {
        topo.distribute_masters = true;
        topo.classic_default = true;
    }
    let mut sim = Sim::new(sim_cfg.clone(), topo, spec.protocol.proto_kind());
    for id in 0..spec.items {
        let key = item_key(id);
        sim.load_record(key, Value::counters([("stock", spec.stock)]));
        match spec.protocol {
            ProtocolChoice::MdccFastComm => sim.open_commutative_round(key),
            ProtocolChoice::MdccClassic => sim.preset_classic_master(key),
            _ => {}
        }
    }
    if let Some(f) = spec.failure {
        let heal = if f.heal_at_s.is_finite() && f.heal_at_s > f.fail_at_s {
            (f.heal_at_s * 1e6) as u64
        } else {
            u64::MAX
        };
        sim.net
            .fail_datacenter(DcId(f.dc), (f.fail_at_s * 1e6) as u64, heal);
    }
    Ok(sim)
}

/// Run the workload to completion and compute metrics from the trace.
pub fn run_workload(spec: &WorkloadSpec, sim_cfg: &SimConfig) -> Result<RunResult> {
    let mut sim = build_sim(spec, sim_cfg)?;
    let duration_us = (spec.duration_s * 1e6) as u64;
    let commutative = spec.protocol.commutative();
    let slo_us = spec.slo_ms * 1000;
    let client_dc = DcId(spec.client_dc);

    let mut clients: Vec<ClientState> = (0..spec.clients)
        .map(|id| ClientState {
            id,
            rng: ChaCha8Rng::seed_from_u64(sim_cfg.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(id as u64 + 1))),
            seq: 0,
        })
        .collect();
    // Stagger client starts a little so the first wave is not perfectly
    // synchronized.
    for c in &clients {
        sim.net.schedule_driver(c.id as u64, (c.id as u64) * 571);
    }

    loop {
        match sim.step() {
            Step::Idle => break,
            Step::Event => {
                if sim.now() > duration_us + (spec.drain_margin_s * 1e6) as u64 {
                    break;
                }
            }
            Step::Driver(token) => {
                let now = sim.now();
                if now >= duration_us {
                    continue; // stop issuing; in-flight work drains
                }
                let client = &mut clients[token as usize];
                let program = build_program(spec, client, commutative);
                let stages = Stages {
                    finally: Some(Box::new(move |sctx, _ok, _timeout| {
                        sctx.schedule_driver(token, 1);
                    })),
                    ..Stages::default()
                };
                let session = Some(token);
                sim.with_app(client_dc, |app, ctx| {
                    app.begin_txn(program, slo_us, stages, session, ctx)
                });
            }
        }
    }
    let violations = sim.finalize();
    let metrics = metrics_from_events(&sim.trace.events, spec.protocol.label(), spec.duration_s);
    Ok(RunResult {
        metrics,
        violations,
        lost_updates: sim.observer.lost_updates,
        sim,
    })
}

// ---------------------------------------------------------------------------
// Failure experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FailureReport {
    /// Per-second (bucket, mean committed latency ms, count).
    pub series: Vec<(u64, f64, u64)>,
    pub pre_mean_ms: f64,
    pub post_mean_ms: f64,
    pub pre_var: f64,
    pub post_var: f64,
    /// Longest gap between consecutive commits, in seconds.
    pub max_commit_gap_s: f64,
}

/// Per-second committed-latency time series around a data-center failure.
pub fn failure_report(metrics: &MetricsReport, fail_at_s: f64) -> FailureReport {
    let mut buckets: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    let mut commit_times: Vec<f64> = Vec::new();
    for r in &metrics.rows {
        if r.outcome != Outcome::Committed {
            continue;
        }
        let Some(decide) = r.decide_us else { continue };
        let lat_ms = (decide - r.start_us) as f64 / 1000.0;
        let t_s = decide as f64 / 1e6;
        commit_times.push(t_s);
        buckets.entry(decide / 1_000_000).or_default().push(lat_ms);
        if t_s < fail_at_s {
            pre.push(lat_ms);
        } else {
            post.push(lat_ms);
        }
    }
    commit_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max_commit_gap_s = commit_times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0f64, f64::max);
    let stats = |xs: &[f64]| -> (f64, f64) {
        if xs.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        (mean, var)
    };
    let (pre_mean_ms, pre_var) = stats(&pre);
    let (post_mean_ms, post_var) = stats(&post);
    FailureReport {
        series: buckets
            .into_iter()
            .map(|(s, xs)| {
                let n = xs.len() as u64;
                (s, xs.iter().sum::<f64>() / n as f64, n)
            })
            .collect(),
        pre_mean_ms,
        post_mean_ms,
        pre_var,
        post_var,
        max_commit_gap_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation_rejects_nonsense() {
        let mut spec = WorkloadSpec::new(WorkloadKind::MicroPurchase, ProtocolChoice::MdccFastComm);
        spec.items = 0;
        assert!(spec.validate().is_err());
        spec.items = 1;
        spec.clients = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn failure_script_parses() {
        let f: FailureScript = "1:125:1e9".parse().unwrap();
        assert_eq!(f.dc, 1);
        assert_eq!(f.fail_at_s, 125.0);
        assert!("1:125".parse::<FailureScript>().is_err());
    }

    #[test]
    fn csv_shape_is_fixed() {
        let rows = vec![TxnRow {
            txn: TxnId {
                node: mdcc::NodeId(5),
                seq: 1,
            },
            protocol: "mdcc-fast-comm",
            start_us: 10,
            decide_us: Some(150_010),
            outcome: Outcome::Committed,
            mode: Some(TxnMode::Fast),
            msgs: 12,
            conflicts: 0,
        }];
        let csv = rows_to_csv(&rows);
        assert_eq!(
            csv,
            "txn_id,protocol,start_us,decide_us,outcome,mode,msgs,conflicts\n\
             x5.1,mdcc-fast-comm,10,150010,committed,fast,12,0\n"
        );
    }

    // Tiny smoke run: a handful of clients for one simulated second.
    #[test]
    fn micro_purchase_smoke_run_commits_cleanly() {
        let mut cfg = SimConfig::default_five_dc();
        cfg.seed = 5;
        let mut spec =
            WorkloadSpec::new(WorkloadKind::MicroPurchase, ProtocolChoice::MdccFastComm);
        spec.items = 50;
        spec.clients = 4;
        spec.duration_s = 1.0;
        let result = run_workload(&spec, &cfg).unwrap();
        assert!(result.violations.is_empty(), "{:?}", result.violations);
        assert!(result.metrics.committed > 0);
        assert_eq!(result.lost_updates, 0);
    }
}
