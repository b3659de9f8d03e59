//! Cluster layout: which storage nodes replicate a key, where masters live,
//! and which app server serves which data center.
//!
//! Every data center holds one full replica of the data; within a data
//! center the key space is hash-partitioned across that DC's storage nodes.
//! A key's replica set therefore has exactly one member per data center.

use std::collections::BTreeMap;

use crate::types::{DcId, Key, NodeId, QuorumSpec, TableId, ValueConstraint};

#[derive(Debug, Clone)]
pub struct Topology {
    pub datacenters: usize,
    pub replicas_per_dc: usize,
    pub quorum: QuorumSpec,
    /// Per-table default master DC; round-0 metadata (inserts) and
    /// commutative-round opens route here.
    pub table_master_dc: BTreeMap<TableId, DcId>,
    /// Per-table attribute constraints, applied to every record of the table.
    pub table_constraints: BTreeMap<TableId, BTreeMap<String, ValueConstraint>>,
    /// Spread record masters uniformly across data centers by key instead of
    /// using the table master (the classic-rounds deployment shape).
    pub distribute_masters: bool,
    /// Route every write through its master (classic-rounds deployment).
    pub classic_default: bool,
}

impl Topology {
    pub fn new(datacenters: usize, replicas_per_dc: usize) -> Self {
        Topology {
            datacenters,
            replicas_per_dc,
            quorum: crate::types::quorum_sizes(datacenters),
            table_master_dc: BTreeMap::new(),
            table_constraints: BTreeMap::new(),
            distribute_masters: false,
            classic_default: false,
        }
    }

    pub fn storage_nodes(&self) -> usize {
        self.datacenters * self.replicas_per_dc
    }

    /// Storage node ids are `0..storage_nodes()`; app servers follow, one
    /// per data center.
    pub fn app_server(&self, dc: DcId) -> NodeId {
        NodeId((self.storage_nodes() + dc.0 as usize) as u32)
    }

    pub fn total_nodes(&self) -> usize {
        self.storage_nodes() + self.datacenters
    }

    pub fn is_storage(&self, node: NodeId) -> bool {
        (node.0 as usize) < self.storage_nodes()
    }

    pub fn dc_of(&self, node: NodeId) -> DcId {
        let n = node.0 as usize;
        if n < self.storage_nodes() {
            DcId((n / self.replicas_per_dc) as u8)
        } else {
            DcId((n - self.storage_nodes()) as u8)
        }
    }

    fn shard_of(&self, key: &Key) -> usize {
        let mut h = crate::trace::Fnv::new();
        h.write(&[key.table.0]);
        h.write(&key.id.to_le_bytes());
        (h.finish() as usize) % self.replicas_per_dc
    }

    /// The replica set of a key: one storage node per data center.
    pub fn replicas_of(&self, key: &Key) -> Vec<NodeId> {
        let shard = self.shard_of(key);
        (0..self.datacenters)
            .map(|dc| NodeId((dc * self.replicas_per_dc + shard) as u32))
            .collect()
    }

    /// The key's replica inside one data center.
    pub fn replica_in_dc(&self, key: &Key, dc: DcId) -> NodeId {
        NodeId((dc.0 as usize * self.replicas_per_dc + self.shard_of(key)) as u32)
    }

    /// Default master storage node for a key: the key's replica in the
    /// table's master data center, or spread by key when masters are
    /// distributed.
    pub fn default_master(&self, key: &Key) -> NodeId {
        let dc = if self.distribute_masters {
            DcId((key.id % self.datacenters as u64) as u8)
        } else {
            self.table_master_dc
                .get(&key.table)
                .copied()
                .unwrap_or(DcId(0))
        };
        self.replica_in_dc(key, dc)
    }

    pub fn constraints_for(&self, key: &Key) -> BTreeMap<String, ValueConstraint> {
        self.table_constraints
            .get(&key.table)
            .cloned()
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_replica_per_dc() {
        let t = Topology::new(5, 2);
        let key = Key::new(1, 42);
        let reps = t.replicas_of(&key);
        assert_eq!(reps.len(), 5);
        let dcs: Vec<_> = reps.iter().map(|r| t.dc_of(*r)).collect();
        for (i, dc) in dcs.iter().enumerate() {
            assert_eq!(dc.0 as usize, i);
        }
    }

    #[test]
    fn app_servers_follow_storage_ids() {
        let t = Topology::new(3, 2);
        assert_eq!(t.storage_nodes(), 6);
        assert_eq!(t.app_server(DcId(0)), NodeId(6));
        assert_eq!(t.dc_of(NodeId(7)), DcId(1));
        assert!(!t.is_storage(NodeId(6)));
        assert!(t.is_storage(NodeId(5)));
    }

    #[test]
    fn master_lives_in_table_master_dc() {
        let mut t = Topology::new(5, 1);
        t.table_master_dc.insert(TableId(2), DcId(3));
        let key = Key::new(2, 9);
        let m = t.default_master(&key);
        assert_eq!(t.dc_of(m), DcId(3));
        assert!(t.replicas_of(&key).contains(&m));
    }
}
