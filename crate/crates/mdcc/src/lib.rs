//! MDCC: an optimistic commit protocol for geo-replicated records, built on
//! per-record Paxos rounds (classic, fast and commutative variants), with
//! option-based multi-record transactions, a demarcation limit that upholds
//! numeric domain constraints under quorum acceptance, and a deterministic
//! multi-data-center network simulator to run it all in.
//!
//! The crate is simulation-first: protocol state machines never block, never
//! read a wall clock, and exchange plain-value messages through [`simnet`].
//! Two baseline protocols (two-phase commit and plain quorum writes) run over
//! the same simulated cluster for comparison, and a global observer checks
//! safety invariants after every delivered event.

pub mod baselines;
pub mod cluster;
pub mod coordinator;
pub mod messages;
pub mod observer;
pub mod reads;
pub mod replica;
pub mod sim;
pub mod simnet;
pub mod trace;
pub mod types;

pub use baselines::ProtoKind;
pub use cluster::Topology;
pub use sim::{Ctx, ProtocolConfig, Sim, Step};
pub use simnet::{SimConfig, SimNet};
pub use types::{
    ballot_compare, quorum_sizes, Ballot, Decision, Key, NodeId, QuorumSpec, RoundMeta, TxnId,
    UpdateKind, UpdateOption, Value, Verdict, Version,
};
