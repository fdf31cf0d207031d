//! Cluster shapes and the partition/replication group decomposition.
//!
//! Ranks are numbered node-major: `rank = node * k + local_rank`. Partition
//! groups are contiguous rank ranges, so a group of `p <= k` ranks lives on one
//! node and a group of `p = q * k` ranks covers exactly `q` whole nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{from_count, Real};

/// Fraction of device memory that model states may occupy.
pub const DEFAULT_HEADROOM_FRACTION: f64 = 0.85;

/// fp16 parameter + fp16 gradient + fp32 master weight, momentum and variance.
pub const DEFAULT_BYTES_PER_PARAM_STATES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec<T> {
    pub num_nodes: usize,
    /// Devices per node (`k`).
    pub devices_per_node: usize,
    /// Bytes/s between two devices of one node.
    pub intra_node_bandwidth: T,
    /// Bytes/s of a node's NIC, shared by all of its devices.
    pub inter_node_bandwidth_per_node: T,
    /// Per-message startup latency inside a node, seconds.
    pub alpha_intra: T,
    /// Per-message startup latency across nodes, seconds.
    pub alpha_inter: T,
    pub device_memory: u64,
    /// FLOP/s.
    pub device_peak_flops: T,
}

/// Position of a rank in the two-level hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RankCoord {
    pub node: usize,
    pub local: usize,
}

impl<T: Real> ClusterSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::InvalidCluster("num_nodes must be at least 1".into()));
        }
        if self.devices_per_node == 0 {
            return Err(Error::InvalidCluster(
                "devices_per_node must be at least 1".into(),
            ));
        }
        let positive = [
            ("intra_node_bandwidth", self.intra_node_bandwidth),
            ("inter_node_bandwidth_per_node", self.inter_node_bandwidth_per_node),
            ("device_peak_flops", self.device_peak_flops),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidCluster(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("alpha_intra", self.alpha_intra), ("alpha_inter", self.alpha_inter)] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(Error::InvalidCluster(format!("{name} must be non-negative")));
            }
        }
        if self.device_memory == 0 {
            return Err(Error::InvalidCluster("device_memory must be positive".into()));
        }
        Ok(())
    }

    /// Total ranks `n = num_nodes * k`.
    pub fn world_size(&self) -> usize {
        self.num_nodes * self.devices_per_node
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.devices_per_node
    }

    pub fn local_rank(&self, rank: usize) -> usize {
        rank % self.devices_per_node
    }

    pub fn coord(&self, rank: usize) -> RankCoord {
        RankCoord {
            node: self.node_of(rank),
            local: self.local_rank(rank),
        }
    }

    pub fn rank_at(&self, coord: RankCoord) -> usize {
        coord.node * self.devices_per_node + coord.local
    }

    /// True when the ranks do not all live on the same node.
    pub fn spans_nodes(&self, ranks: &[usize]) -> bool {
        match ranks.first() {
            Some(&first) => {
                let node = self.node_of(first);
                ranks.iter().any(|&r| self.node_of(r) != node)
            }
            None => false,
        }
    }
}

/// Accepts partition sizes that either fit inside a node without straddling
/// (`p | k`) or cover whole nodes (`k | p`).
pub fn check_partition_shape(p: usize, k: usize) -> Result<()> {
    if p == 0 || k == 0 {
        return Err(Error::Shape(format!("partition size {p} and k = {k} must be positive")));
    }
    if (p <= k && k % p == 0) || (p >= k && p % k == 0) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "partition size {p} neither divides nor is a multiple of {k} devices per node"
        )))
    }
}

/// Partition and replication groups for `n` ranks with partition size `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub n: usize,
    pub p: usize,
    /// `n / p` contiguous rank ranges `[g*p, (g+1)*p)`.
    pub partition_groups: Vec<Vec<usize>>,
    /// `p` groups; group `j` holds every rank `r` with `r % p == j`.
    pub replication_groups: Vec<Vec<usize>>,
    /// Index of each rank inside its partition group.
    pub local_group_rank: Vec<usize>,
}

impl GroupLayout {
    pub fn num_partition_groups(&self) -> usize {
        self.n / self.p
    }

    pub fn partition_group_index(&self, rank: usize) -> usize {
        rank / self.p
    }

    pub fn partition_group_of(&self, rank: usize) -> &[usize] {
        &self.partition_groups[self.partition_group_index(rank)]
    }

    /// Replication group index equals the rank's local group rank.
    pub fn replication_group_of(&self, rank: usize) -> &[usize] {
        &self.replication_groups[self.local_group_rank[rank]]
    }

    /// Size of each replication group (`n / p`).
    pub fn replication_size(&self) -> usize {
        self.n / self.p
    }
}

pub fn build_group_layout(n: usize, p: usize) -> Result<GroupLayout> {
    if n == 0 {
        return Err(Error::OutOfRange {
            what: "n",
            value: 0,
            expected: "n >= 1",
        });
    }
    if p < 1 || p > n {
        return Err(Error::OutOfRange {
            what: "p",
            value: p as u64,
            expected: "1 <= p <= n",
        });
    }
    if n % p != 0 {
        return Err(Error::NonDivisible { n, p });
    }
    let partition_groups = (0..n / p)
        .map(|g| (g * p..(g + 1) * p).collect())
        .collect();
    let replication_groups = (0..p).map(|j| (j..n).step_by(p).collect()).collect();
    let local_group_rank = (0..n).map(|r| r % p).collect();
    Ok(GroupLayout {
        n,
        p,
        partition_groups,
        replication_groups,
        local_group_rank,
    })
}

pub fn model_state_bytes(num_params: u64, bytes_per_param_states: u64) -> Result<u64> {
    if num_params == 0 {
        return Err(Error::OutOfRange {
            what: "num_params",
            value: 0,
            expected: "> 0",
        });
    }
    if bytes_per_param_states == 0 {
        return Err(Error::OutOfRange {
            what: "bytes_per_param_states",
            value: 0,
            expected: "> 0",
        });
    }
    num_params
        .checked_mul(bytes_per_param_states)
        .ok_or_else(|| Error::Domain("model state size overflows u64".into()))
}

/// True when `bytes / p <= device_memory * headroom`.
pub fn fits_in_partition<T: Real>(bytes: u64, p: usize, device_memory: u64, headroom: T) -> bool {
    let per_device: T = from_count::<T>(bytes) / from_count(p as u64);
    per_device <= from_count::<T>(device_memory) * headroom
}

/// Smallest partition size whose per-device share of the model states fits.
///
/// Only shapes accepted by [`check_partition_shape`] that divide the world
/// size are considered; `node_granular` further restricts `p` to whole nodes.
pub fn min_feasible_partition<T: Real>(
    model_state_bytes: u64,
    cluster: &ClusterSpec<T>,
    node_granular: bool,
    headroom: T,
) -> Result<usize> {
    cluster.validate()?;
    if model_state_bytes == 0 {
        return Err(Error::OutOfRange {
            what: "model_state_bytes",
            value: 0,
            expected: "> 0",
        });
    }
    if !(headroom > T::zero() && headroom <= T::one()) {
        return Err(Error::Domain("headroom fraction must lie in (0, 1]".into()));
    }
    let n = cluster.world_size();
    let k = cluster.devices_per_node;
    (1..=n)
        .filter(|&p| n % p == 0 && check_partition_shape(p, k).is_ok())
        .filter(|&p| !node_granular || p % k == 0)
        .find(|&p| fits_in_partition(model_state_bytes, p, cluster.device_memory, headroom))
        .ok_or_else(|| Error::Infeasible {
            required: model_state_bytes,
            reason: format!(
                "{n} devices of {} bytes with headroom {:?} are not enough",
                cluster.device_memory, headroom
            ),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GB: u64 = 1_000_000_000;

    pub(crate) fn v100_cluster(num_nodes: usize) -> ClusterSpec<f64> {
        ClusterSpec {
            num_nodes,
            devices_per_node: 8,
            intra_node_bandwidth: 128e9,
            inter_node_bandwidth_per_node: 12.5e9,
            alpha_intra: 5e-6,
            alpha_inter: 30e-6,
            device_memory: 32 * GB,
            device_peak_flops: 125e12,
        }
    }

    #[test]
    fn pairs_of_consecutive_ranks_form_partition_groups() {
        let l = build_group_layout(4, 2).unwrap();
        assert_eq!(l.partition_groups, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(l.replication_groups, vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(l.local_group_rank, vec![0, 1, 0, 1]);
    }

    #[test]
    fn full_partition_degenerates_to_partition_to_all() {
        let l = build_group_layout(8, 8).unwrap();
        assert_eq!(l.partition_groups, vec![(0..8).collect::<Vec<_>>()]);
        assert_eq!(l.replication_groups.len(), 8);
        assert!(l.replication_groups.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn layout_errors() {
        assert_eq!(build_group_layout(6, 4), Err(Error::NonDivisible { n: 6, p: 4 }));
        assert!(matches!(build_group_layout(4, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(build_group_layout(4, 5), Err(Error::OutOfRange { .. })));
        assert!(matches!(build_group_layout(0, 1), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn rank_coordinates_are_node_major() {
        let c = v100_cluster(4);
        assert_eq!(c.world_size(), 32);
        for r in 0..32 {
            let coord = c.coord(r);
            assert_eq!(c.rank_at(coord), r);
            assert_eq!(coord.node, r / 8);
        }
        assert!(!c.spans_nodes(&[0, 7]));
        assert!(c.spans_nodes(&[7, 8]));
    }

    #[test]
    fn cluster_validation() {
        let mut c = v100_cluster(1);
        assert!(c.validate().is_ok());
        c.inter_node_bandwidth_per_node = 0.0;
        assert!(matches!(c.validate(), Err(Error::InvalidCluster(_))));
        let mut c = v100_cluster(1);
        c.alpha_inter = -1.0;
        assert!(c.validate().is_err());
        let mut c = v100_cluster(0);
        c.num_nodes = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partition_shapes() {
        assert!(check_partition_shape(4, 8).is_ok());
        assert!(check_partition_shape(16, 8).is_ok());
        assert!(check_partition_shape(12, 8).is_err());
        assert!(check_partition_shape(3, 8).is_err());
    }

    #[test]
    fn ten_billion_parameters_take_160_gb() {
        assert_eq!(model_state_bytes(10_000_000_000, 16).unwrap(), 160 * GB);
        assert_eq!(model_state_bytes(1_000_000_000, 16).unwrap(), 16 * GB);
        assert!(model_state_bytes(0, 16).is_err());
        assert!(model_state_bytes(1, 0).is_err());
        assert!(model_state_bytes(u64::MAX, 16).is_err());
    }

    #[test]
    fn eight_v100s_hold_a_ten_billion_parameter_model() {
        let c = v100_cluster(8);
        let p = min_feasible_partition(160 * GB, &c, true, DEFAULT_HEADROOM_FRACTION).unwrap();
        assert_eq!(p, 8);
        // Without node granularity 8 is still the smallest admissible shape:
        // 160/4 = 40 GB exceeds 27.2 GB.
        let p = min_feasible_partition(160 * GB, &c, false, DEFAULT_HEADROOM_FRACTION).unwrap();
        assert_eq!(p, 8);
    }

    #[test]
    fn tiny_models_fit_on_one_device() {
        let c = v100_cluster(2);
        assert_eq!(min_feasible_partition(1, &c, false, 0.85).unwrap(), 1);
        assert_eq!(min_feasible_partition(1, &c, true, 0.85).unwrap(), 8);
    }

    #[test]
    fn oversized_models_are_infeasible() {
        let c = v100_cluster(1);
        let err = min_feasible_partition(10_000 * GB, &c, false, 0.85).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }));
        assert!(min_feasible_partition(0, &c, false, 0.85).is_err());
        assert!(min_feasible_partition(1, &c, false, 0.0).is_err());
    }

    fn divisor_pairs() -> impl Strategy<Value = (usize, usize)> {
        (1usize..=96).prop_flat_map(|n| {
            let divisors: Vec<usize> = (1..=n).filter(|p| n % p == 0).collect();
            (Just(n), proptest::sample::select(divisors))
        })
    }

    proptest! {
        #[test]
        fn groups_cover_ranks_and_intersect_in_one_rank((n, p) in divisor_pairs()) {
            let l = build_group_layout(n, p).unwrap();
            prop_assert_eq!(l.partition_groups.len(), n / p);
            prop_assert_eq!(l.replication_groups.len(), p);
            let mut seen_part = vec![0usize; n];
            let mut seen_repl = vec![0usize; n];
            for g in &l.partition_groups { for &r in g { seen_part[r] += 1; } }
            for g in &l.replication_groups {
                prop_assert_eq!(g.len(), n / p);
                for &r in g { seen_repl[r] += 1; }
            }
            prop_assert!(seen_part.iter().all(|&c| c == 1));
            prop_assert!(seen_repl.iter().all(|&c| c == 1));
            for r in 0..n {
                let common: Vec<_> = l.partition_group_of(r).iter()
                    .filter(|x| l.replication_group_of(r).contains(x)).copied().collect();
                prop_assert_eq!(common, vec![r]);
                prop_assert_eq!(l.partition_group_of(r)[l.local_group_rank[r]], r);
            }
            prop_assert_eq!(build_group_layout(n, p).unwrap(), l);
        }

        #[test]
        fn min_partition_is_monotone(a in 1u64..2_000_000_000_000, b in 1u64..2_000_000_000_000, granular: bool) {
            let c = v100_cluster(8);
            let (small, large) = if a <= b { (a, b) } else { (b, a) };
            let ps = min_feasible_partition(small, &c, granular, 0.85);
            let pl = min_feasible_partition(large, &c, granular, 0.85);
            match (ps, pl) {
                (Ok(ps), Ok(pl)) => prop_assert!(ps <= pl),
                (Err(_), Ok(_)) => prop_assert!(false, "smaller model infeasible"),
                _ => {}
            }
        }
    }
}
