//! Three-stage hierarchical all-gather.
//!
//! For a partition group of `p = q * k` ranks covering `q` nodes:
//!
//! 1. every node-local rank `j` all-gathers with the ranks holding local rank
//!    `j` on the other nodes; the `k` inter-node channels run as one batch.
//!    Rank `(m, j)` then holds `[C_j, C_{k+j}, ..., C_{(q-1)k+j}]`.
//! 2. the stage-1 buffer is split into `q` staging buffers; staging buffer `t`
//!    holds chunk `C_{t*k+j}`.
//! 3. `q` batched intra-node all-gathers; batch `t` produces
//!    `[C_{t*k}, ..., C_{t*k+k-1}]` at offset `t * k * chunk`.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::topology::{check_partition_shape, ClusterSpec, GroupLayout};

use super::{CollectiveGroup, Fabric, ShardBuffer};

/// What happens between the inter-node and intra-node stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Stage2 {
    #[default]
    Rearrange,
    /// Gather stage-1 buffers directly. Produces a wrong layout whenever more
    /// than one node is involved; kept as a negative control.
    Skip,
}

/// Result of a traced hierarchical all-gather.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchicalOutput {
    /// Per rank, the gathered partition-group buffer.
    pub outputs: Vec<ShardBuffer>,
    /// Per rank, the buffer after the inter-node stage (equal to the rank's
    /// own shard when the partition group fits in one node).
    pub stage1: Vec<Vec<u8>>,
}

impl Fabric {
    /// Gathers every partition group of `layout` with the three-stage
    /// algorithm. `shards[r]` is rank `r`'s chunk; output `r` is the
    /// concatenation of its partition group's chunks in group order.
    pub fn hierarchical_all_gather<T: Real>(
        &self,
        layout: &GroupLayout,
        cluster: &ClusterSpec<T>,
        shards: &[ShardBuffer],
    ) -> Result<Vec<ShardBuffer>> {
        Ok(self
            .hierarchical_all_gather_traced(layout, cluster, shards, Stage2::Rearrange)?
            .outputs)
    }

    pub fn hierarchical_all_gather_traced<T: Real>(
        &self,
        layout: &GroupLayout,
        cluster: &ClusterSpec<T>,
        shards: &[ShardBuffer],
        stage2: Stage2,
    ) -> Result<HierarchicalOutput> {
        let n = layout.n;
        let p = layout.p;
        let k = cluster.devices_per_node;
        if cluster.world_size() != n {
            return Err(Error::Shape(format!(
                "layout has {n} ranks but the cluster has {}",
                cluster.world_size()
            )));
        }
        check_partition_shape(p, k)?;
        if shards.len() != n {
            return Err(Error::SizeMismatch(format!(
                "expected {n} shards, got {}",
                shards.len()
            )));
        }
        if let Some((r, s)) = shards.iter().enumerate().find(|(r, s)| s.rank != *r) {
            return Err(Error::SizeMismatch(format!(
                "shard of rank {} found at index {r}",
                s.rank
            )));
        }

        let partition_groups = layout
            .partition_groups
            .iter()
            .map(|g| CollectiveGroup::new(g.clone()))
            .collect::<Result<Vec<_>>>()?;

        if p <= k {
            let sets: Vec<Vec<ShardBuffer>> = layout
                .partition_groups
                .iter()
                .map(|g| g.iter().map(|&r| shards[r].clone()).collect())
                .collect();
            let outputs = self
                .batched_all_gather(&partition_groups, &sets)?
                .into_iter()
                .flatten()
                .collect();
            return Ok(HierarchicalOutput {
                outputs,
                stage1: shards.iter().map(|s| s.payload.clone()).collect(),
            });
        }

        let q = p / k;
        let c = shards[0].payload.len();

        // Stage 1: one inter-node channel per (partition group, local rank).
        let mut channels = Vec::with_capacity(n / q);
        let mut channel_sets = Vec::with_capacity(n / q);
        for g in 0..layout.num_partition_groups() {
            for j in 0..k {
                let ranks: Vec<usize> = (0..q).map(|m| g * p + m * k + j).collect();
                channel_sets.push(ranks.iter().map(|&r| shards[r].clone()).collect());
                channels.push(CollectiveGroup::new(ranks)?);
            }
        }
        let mut stage1 = vec![Vec::new(); n];
        for (group, bufs) in channels
            .iter()
            .zip(self.batched_all_gather(&channels, &channel_sets)?)
        {
            for (&r, buf) in group.ranks().iter().zip(bufs) {
                stage1[r] = buf.payload;
            }
        }

        // Stages 2 and 3: node-local gathers.
        let mut node_groups = Vec::new();
        let mut node_sets = Vec::new();
        let mut batch_index = Vec::new();
        for node in 0..cluster.num_nodes {
            let ranks: Vec<usize> = (node * k..(node + 1) * k).collect();
            let group = CollectiveGroup::new(ranks.clone())?;
            match stage2 {
                Stage2::Rearrange => {
                    for t in 0..q {
                        let staging = ranks
                            .iter()
                            .map(|&r| ShardBuffer::new(r, stage1[r][t * c..(t + 1) * c].to_vec()))
                            .collect();
                        node_groups.push(group.clone());
                        node_sets.push(staging);
                        batch_index.push(t);
                    }
                }
                Stage2::Skip => {
                    node_sets.push(
                        ranks
                            .iter()
                            .map(|&r| ShardBuffer::new(r, stage1[r].clone()))
                            .collect(),
                    );
                    node_groups.push(group);
                    batch_index.push(0);
                }
            }
        }
        let gathered = self.batched_all_gather(&node_groups, &node_sets)?;

        let mut outputs: Vec<ShardBuffer> =
            (0..n).map(|r| ShardBuffer::new(r, vec![0u8; p * c])).collect();
        for ((group, bufs), t) in node_groups.iter().zip(gathered).zip(batch_index) {
            let offset = t * k * c;
            for (&r, buf) in group.ranks().iter().zip(bufs) {
                outputs[r].payload[offset..offset + buf.payload.len()]
                    .copy_from_slice(&buf.payload);
            }
        }
        Ok(HierarchicalOutput { outputs, stage1 })
    }
}
