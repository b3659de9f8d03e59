//! Deterministic discrete-event network simulator for a multi-data-center
//! deployment: a latency matrix with jitter, probabilistic drops, message
//! reordering, data-center failure windows and node kills.
//!
//! Time is a logical clock in integer microseconds. Nothing in the protocol
//! reads a wall clock; identical `(config, seed)` pairs produce byte-identical
//! event traces.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::messages::{Envelope, Msg, Payload, TimerKind};
use crate::trace::{digest_str, TraceEvent, TraceSink};
use crate::types::{DcId, NodeId};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("latency matrix must be {0}x{0}, got {1}x{2}")]
    MatrixShape(usize, usize, usize),
    #[error("latency matrix must be symmetric: [{0}][{1}]={2} vs [{1}][{0}]={3}")]
    Asymmetric(usize, usize, f64, f64),
    #[error("intra-dc latency [{0}][{0}]={1} must be below inter-dc latencies")]
    DiagonalNotFastest(usize, f64),
    #[error("need at least one data center")]
    NoDatacenters,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatacenterCfg {
    pub name: String,
    #[serde(default = "one")]
    pub replicas: usize,
}

fn one() -> usize {
    1
}

fn default_jitter() -> f64 {
    0.1
}

/// Simulation configuration; serializable as a human-editable TOML file.
///
/// The bundled default approximates one-way delays between five cloud
/// regions. The numbers are illustrative, not measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Jitter stddev as a fraction of the mean one-way delay.
    #[serde(default = "default_jitter")]
    pub jitter_frac: f64,
    /// Probability a message is silently dropped.
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(rename = "datacenter")]
    pub datacenters: Vec<DatacenterCfg>,
    /// Mean one-way delay in milliseconds between data centers (symmetric;
    /// the diagonal is the intra-DC delay).
    pub latency_ms: Vec<Vec<f64>>,
}

impl SimConfig {
    /// Five data centers with one-way delays loosely shaped like
    /// US-West / US-East / EU / Singapore / Tokyo round trips.
    pub fn default_five_dc() -> Self {
        let names = ["us-west", "us-east", "eu-west", "ap-southeast", "ap-northeast"];
        SimConfig {
            seed: 42,
            jitter_frac: 0.1,
            drop_rate: 0.0,
            datacenters: names
                .iter()
                .map(|n| DatacenterCfg {
                    name: n.to_string(),
                    replicas: 1,
                })
                .collect(),
            latency_ms: vec![
                vec![0.5, 40.0, 70.0, 90.0, 60.0],
                vec![40.0, 0.5, 40.0, 110.0, 75.0],
                vec![70.0, 40.0, 0.5, 120.0, 115.0],
                vec![90.0, 110.0, 120.0, 0.5, 35.0],
                vec![60.0, 75.0, 115.0, 35.0, 0.5],
            ],
        }
    }

    /// Single data center, single replica; handy for unit tests.
    pub fn single_node() -> Self {
        SimConfig {
            seed: 1,
            jitter_frac: 0.0,
            drop_rate: 0.0,
            datacenters: vec![DatacenterCfg {
                name: "local".into(),
                replicas: 1,
            }],
            latency_ms: vec![vec![0.5]],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.datacenters.len();
        if n == 0 {
            return Err(ConfigError::NoDatacenters);
        }
        if self.latency_ms.len() != n || self.latency_ms.iter().any(|r| r.len() != n) {
            return Err(ConfigError::MatrixShape(
                n,
                self.latency_ms.len(),
                self.latency_ms.first().map_or(0, |r| r.len()),
            ));
        }
        for i in 0..n {
            for j in 0..n {
                let a = self.latency_ms[i][j];
                let b = self.latency_ms[j][i];
                if (a - b).abs() > f64::EPSILON {
                    return Err(ConfigError::Asymmetric(i, j, a, b));
                }
                if i != j && self.latency_ms[i][i] >= a {
                    return Err(ConfigError::DiagonalNotFastest(i, self.latency_ms[i][i]));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SimConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)
    }

    pub fn one_way_us(&self, a: DcId, b: DcId) -> u64 {
        (self.latency_ms[a.0 as usize][b.0 as usize] * 1000.0).round() as u64
    }

    /// Largest round trip in the matrix; protocol timeouts scale from this.
    pub fn max_rtt_us(&self) -> u64 {
        let mut m = 0u64;
        for i in 0..self.datacenters.len() {
            for j in 0..self.datacenters.len() {
                m = m.max(2 * self.one_way_us(DcId(i as u8), DcId(j as u8)));
            }
        }
        m.max(1)
    }
}

/// One scheduled happening.
#[derive(Debug, Clone)]
pub struct SimEvent {
    pub deliver_at: u64,
    pub seq: u64,
    pub payload: Payload,
}

/// Message latency between two nodes inside the simulated WAN, in
/// microseconds. A node talking to itself is a local call.
const LOOPBACK_US: u64 = 2;

pub struct SimNet {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    slots: BTreeMap<(u64, u64), Payload>,
    rng: ChaCha8Rng,
    cfg: SimConfig,
    dc_of: Vec<DcId>,
    /// Failure windows per DC: deliveries into the DC are suppressed while
    /// `fail <= t < heal`.
    failed: BTreeMap<DcId, Vec<(u64, u64)>>,
    killed: BTreeMap<NodeId, u64>,
    pub messages_sent: u64,
    pub messages_dropped: u64,
}

impl SimNet {
    pub fn new(cfg: SimConfig, dc_of: Vec<DcId>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        SimNet {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            slots: BTreeMap::new(),
            rng,
            cfg,
            dc_of,
            failed: BTreeMap::new(),
            killed: BTreeMap::new(),
            messages_sent: 0,
            messages_dropped: 0,
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn push(&mut self, at: u64, payload: Payload) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((at, seq)));
        self.slots.insert((at, seq), payload);
    }

    /// Pop the next event in (time, insertion) order, advancing the clock.
    pub fn pop(&mut self) -> Option<SimEvent> {
        let Reverse((at, seq)) = self.queue.pop()?;
        let payload = self.slots.remove(&(at, seq)).expect("slot exists");
        debug_assert!(at >= self.now, "time went backwards");
        self.now = at;
        Some(SimEvent {
            deliver_at: at,
            seq,
            payload,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    fn sample_delay(&mut self, src: NodeId, dst: NodeId) -> u64 {
        if src == dst {
            return LOOPBACK_US;
        }
        let a = self.dc_of[src.0 as usize];
        let b = self.dc_of[dst.0 as usize];
        let mean = self.cfg.one_way_us(a, b) as f64;
        if self.cfg.jitter_frac <= 0.0 {
            return mean as u64;
        }
        let normal = Normal::new(mean, mean * self.cfg.jitter_frac).expect("valid normal");
        // Truncate at a floor of 20% of the mean; delays cannot go negative
        // and links have a physical minimum.
        let sample = normal.sample(&mut self.rng);
        sample.max(mean * 0.2).round() as u64
    }

    /// Send a message. Drops are silent at the network level (the trace
    /// records them for the observer's benefit).
    pub fn send(&mut self, src: NodeId, dst: NodeId, msg: Msg, trace: &mut TraceSink) {
        self.messages_sent += 1;
        let kind = msg.kind();
        let digest = digest_str(&serde_json::to_string(&msg).expect("msg serializes"));
        trace.push(TraceEvent::Send {
            t: self.now,
            src,
            dst,
            kind: kind.into(),
            digest,
            txn: msg.txn(),
        });
        if self.cfg.drop_rate > 0.0 && self.rng.gen::<f64>() < self.cfg.drop_rate {
            self.messages_dropped += 1;
            trace.push(TraceEvent::Drop {
                t: self.now,
                src,
                dst,
                kind: kind.into(),
                reason: "loss".into(),
            });
            return;
        }
        let delay = self.sample_delay(src, dst);
        let at = self.now + delay.max(1);
        self.push(at, Payload::Deliver(Envelope { src, dst, msg }));
    }

    pub fn schedule_timer(&mut self, node: NodeId, kind: TimerKind, at: u64) {
        let at = at.max(self.now + 1);
        self.push(at, Payload::Timer { node, kind });
    }

    pub fn schedule_driver(&mut self, token: u64, at: u64) {
        let at = at.max(self.now);
        self.push(at, Payload::Driver { token });
    }

    /// Suppress all deliveries into `dc` during `[fail_at, heal_at)`.
    /// Replica state is preserved: this is a network fail-stop, not a disk
    /// loss.
    pub fn fail_datacenter(&mut self, dc: DcId, fail_at: u64, heal_at: u64) {
        self.failed.entry(dc).or_default().push((fail_at, heal_at));
        self.push(fail_at, Payload::FailDc { dc });
        if heal_at != u64::MAX {
            self.push(heal_at, Payload::HealDc { dc });
        }
    }

    pub fn kill_node(&mut self, node: NodeId, at: u64) {
        self.killed.insert(node, at);
        self.push(at, Payload::KillNode { node });
    }

    /// Kill effective immediately (used by tests that interpose on steps).
    pub fn kill_node_now(&mut self, node: NodeId) {
        self.killed.insert(node, self.now);
    }

    pub fn dc_failed_at(&self, dc: DcId, t: u64) -> bool {
        self.failed
            .get(&dc)
            .map_or(false, |ws| ws.iter().any(|(f, h)| t >= *f && t < *h))
    }

    /// A node cannot receive a message if it was killed or its data center
    /// is inside a failure window (deliveries into the DC are suppressed).
    pub fn node_dead_at(&self, node: NodeId, t: u64) -> bool {
        self.node_killed_at(node, t) || self.dc_failed_at(self.dc_of[node.0 as usize], t)
    }

    /// Kills stop a node entirely (timers included); DC failure is a network
    /// fail-stop and leaves the node's internal timers running.
    pub fn node_killed_at(&self, node: NodeId, t: u64) -> bool {
        self.killed.get(&node).map_or(false, |k| t >= *k)
    }

    /// Observability for stall diagnosis: counts of queued payload kinds.
    pub fn queue_summary(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let mut out = std::collections::BTreeMap::new();
        for p in self.slots.values() {
            let k = match p {
                Payload::Deliver(env) => env.msg.kind(),
                Payload::Timer { kind, .. } => match kind {
                    TimerKind::SloDeadline { .. } => "timer:slo",
                    TimerKind::TxnRetry { .. } => "timer:txn_retry",
                    TimerKind::ReadRetry { .. } => "timer:read_retry",
                    TimerKind::PendingOption { .. } => "timer:pending",
                    TimerKind::ChainGap { .. } => "timer:gap",
                    TimerKind::MasterTick { .. } => "timer:master",
                    TimerKind::RecoveryTick { .. } => "timer:recovery",
                    TimerKind::TpcRetry { .. } => "timer:tpc",
                    TimerKind::QwRetry { .. } => "timer:qw",
                },
                Payload::Driver { .. } => "driver",
                Payload::FailDc { .. } | Payload::HealDc { .. } => "failure-script",
                Payload::KillNode { .. } => "kill",
            };
            *out.entry(k).or_insert(0) += 1;
        }
        out
    }

    pub fn killed_nodes(&self) -> BTreeSet<NodeId> {
        self.killed.keys().copied().collect()
    }

    pub fn gen_range_u64(&mut self, lo: u64, hi: u64) -> u64 {
        if hi <= lo {
            return lo;
        }
        self.rng.gen_range(lo..hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Key;

    fn dummy_msg() -> Msg {
        Msg::ReadReq {
            key: Key::new(0, 1),
            reply_to: NodeId(0),
            token: 1,
        }
    }

    fn two_dc_cfg(jitter: f64) -> SimConfig {
        SimConfig {
            seed: 7,
            jitter_frac: jitter,
            drop_rate: 0.0,
            datacenters: vec![
                DatacenterCfg {
                    name: "a".into(),
                    replicas: 1,
                },
                DatacenterCfg {
                    name: "b".into(),
                    replicas: 1,
                },
            ],
            latency_ms: vec![vec![0.5, 40.0], vec![40.0, 0.5]],
        }
    }

    #[test]
    fn intra_dc_message_zero_jitter_arrives_at_mean() {
        let cfg = SimConfig {
            jitter_frac: 0.0,
            ..two_dc_cfg(0.0)
        };
        let mut net = SimNet::new(cfg, vec![DcId(0), DcId(0)]);
        let mut trace = TraceSink::collecting();
        net.send(NodeId(0), NodeId(1), dummy_msg(), &mut trace);
        let ev = net.pop().unwrap();
        assert_eq!(ev.deliver_at, 500);
    }

    #[test]
    fn message_to_failed_dc_is_suppressed() {
        let mut net = SimNet::new(two_dc_cfg(0.0), vec![DcId(0), DcId(1)]);
        net.fail_datacenter(DcId(1), 0, u64::MAX);
        let mut trace = TraceSink::collecting();
        net.send(NodeId(0), NodeId(1), dummy_msg(), &mut trace);
        // The harness checks `node_dead_at` at delivery time.
        while let Some(ev) = net.pop() {
            if let Payload::Deliver(env) = ev.payload {
                assert!(net.node_dead_at(env.dst, ev.deliver_at));
            }
        }
    }

    #[test]
    fn fail_heal_window_is_half_open() {
        let mut net = SimNet::new(two_dc_cfg(0.0), vec![DcId(0), DcId(1)]);
        net.fail_datacenter(DcId(1), 100, 200);
        assert!(!net.dc_failed_at(DcId(1), 99));
        assert!(net.dc_failed_at(DcId(1), 100));
        assert!(net.dc_failed_at(DcId(1), 199));
        assert!(!net.dc_failed_at(DcId(1), 200));
    }

    // With large jitter, two messages on the same link may be delivered out
    // of send order. This seed exhibits a reordering; the point is that the
    // simulator permits it.
    #[test]
    fn jitter_permits_reordering() {
        let mut found = false;
        for seed in 0..200u64 {
            let mut cfg = two_dc_cfg(0.5);
            cfg.seed = seed;
            let mut net = SimNet::new(cfg, vec![DcId(0), DcId(1)]);
            let mut trace = TraceSink::collecting();
            net.send(NodeId(0), NodeId(1), dummy_msg(), &mut trace);
            net.send(NodeId(0), NodeId(1), dummy_msg(), &mut trace);
            let first = net.pop().unwrap();
            let second = net.pop().unwrap();
            // seq identifies send order; deliver order follows time.
            if first.seq > second.seq || first.deliver_at > second.deliver_at {
                found = true;
                break;
            }
            if first.seq == 1 {
                found = true;
                break;
            }
        }
        assert!(found, "no seed under 200 exhibited reordering");
    }

    #[test]
    fn identical_seeds_yield_identical_delivery_schedules() {
        let run = |seed: u64| -> Vec<(u64, u64)> {
            let mut cfg = two_dc_cfg(0.3);
            cfg.seed = seed;
            cfg.drop_rate = 0.05;
            let mut net = SimNet::new(cfg, vec![DcId(0), DcId(1)]);
            let mut trace = TraceSink::collecting();
            for _ in 0..50 {
                net.send(NodeId(0), NodeId(1), dummy_msg(), &mut trace);
            }
            let mut out = vec![];
            while let Some(ev) = net.pop() {
                out.push((ev.deliver_at, ev.seq));
            }
            out
        };
        assert_eq!(run(99), run(99));
        assert_ne!(run(99), run(100));
    }

    #[test]
    fn default_config_validates_and_roundtrips_toml() {
        let cfg = SimConfig::default_five_dc();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.toml");
        cfg.save(&path).unwrap();
        let back = SimConfig::load(&path).unwrap();
        assert_eq!(back.latency_ms, cfg.latency_ms);
        assert_eq!(back.datacenters.len(), 5);
        assert_eq!(cfg.max_rtt_us(), 240_000);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let mut cfg = two_dc_cfg(0.0);
        cfg.latency_ms[0][1] = 41.0;
        assert!(matches!(cfg.validate(), Err(ConfigError::Asymmetric(..))));
    }
}
