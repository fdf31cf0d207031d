//! Discrete-event model of one training iteration.
//!
//! A representative rank runs two serial resources: a compute stream and a
//! communication stream. Every layer is gathered before its forward and again
//! before its backward computation; each backward layer is followed by its
//! gradient synchronization, and on the last micro-step of a 2-hop schedule by
//! the replication-group all-reduce. The gather of a layer may start once the
//! compute `prefetch_depth` positions earlier has begun.
//!
//! Durations are `bytes / bandwidth (+ latency)` where the bandwidth is the
//! profile's effective bandwidth for the collective, capped by the physical
//! link that carries it. Traffic counters follow ring routing: a collective
//! over `g` ranks pushes `(g-1)` chunks over every ring link, and a link is
//! inter-node when its endpoints live on different nodes. Node-level counters
//! are reported for node 0; all nodes are symmetric.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::collectives::Executor;
use crate::cost_model::{
    collective_latency, effective_bandwidth, BandwidthProfile, CostReport, LatencyAlgorithm,
};
use crate::error::{Error, Result};
use crate::scalar::{from_count, from_f64, Real};
use crate::topology::{
    check_partition_shape, fits_in_partition, ClusterSpec, DEFAULT_BYTES_PER_PARAM_STATES,
    DEFAULT_HEADROOM_FRACTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec<T> {
    pub num_params: u64,
    /// Bytes of the layer's parameters as gathered (e.g. fp16).
    pub param_bytes: u64,
    /// FLOPs of one micro-batch.
    pub fwd_flops: T,
    pub bwd_flops: T,
}

/// Transformer shape, one row of a model table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub hidden: usize,
    pub intermediate: usize,
    pub layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl TransformerDims {
    /// Named models used in the evaluation (sequence length 512).
    pub fn preset(name: &str) -> Option<Self> {
        let (hidden, intermediate, layers, vocab) = match name.to_ascii_lowercase().as_str() {
            "bert-10b" => (2560, 10240, 127, 32008),
            "bert-15b" => (2560, 10240, 190, 32008),
            "bert-20b" => (5120, 20480, 64, 32008),
            "bert-50b" => (8192, 32768, 62, 32008),
            "roberta-20b" => (5120, 20480, 62, 50265),
            "gpt2-20b" => (5120, 20480, 62, 50265),
            _ => return None,
        };
        Some(TransformerDims {
            hidden,
            intermediate,
            layers,
            vocab,
            seq_len: 512,
        })
    }

    pub const PRESETS: [&'static str; 6] = [
        "bert-10b",
        "bert-15b",
        "bert-20b",
        "bert-50b",
        "roberta-20b",
        "gpt2-20b",
    ];
}

/// Embedding layer followed by `layers` transformer blocks.
///
/// Block parameters: `4h^2 + 2h*inter` weights plus `9h + inter` biases and
/// layer-norm scales; the embedding holds `V*h`. Per sequence, a block's
/// forward pass costs `8 l h^2 + 4 l h inter + 4 l^2 h` FLOPs and its backward
/// three times that (two for gradients, one for activation recomputation); the
/// output projection costs `2 l h V` forward and `4 l h V` backward.
pub fn derive_layers_from_transformer<T: Real>(
    dims: TransformerDims,
    dtype_bytes: u64,
    micro_batch: usize,
) -> Result<Vec<LayerSpec<T>>> {
    let TransformerDims {
        hidden: h,
        intermediate: inter,
        layers,
        vocab,
        seq_len: l,
    } = dims;
    if h == 0 || inter == 0 || vocab == 0 || l == 0 || dtype_bytes == 0 || micro_batch == 0 {
        return Err(Error::Domain("transformer dimensions must be positive".into()));
    }
    let (h, inter, v, l) = (h as u64, inter as u64, vocab as u64, l as u64);
    let mb: T = from_count(micro_batch as u64);
    let c = |x: u64| from_count::<T>(x);

    let embed_params = v * h;
    let embed_fwd = c(2) * c(l) * c(h) * c(v) * mb;
    let mut out = vec![LayerSpec {
        num_params: embed_params,
        param_bytes: embed_params * dtype_bytes,
        fwd_flops: embed_fwd,
        bwd_flops: c(2) * embed_fwd,
    }];

    let block_params = 4 * h * h + 2 * h * inter + 9 * h + inter;
    let block_fwd = (c(8) * c(l) * c(h) * c(h) + c(4) * c(l) * c(h) * c(inter) + c(4) * c(l) * c(l) * c(h)) * mb;
    out.extend((0..layers).map(|_| LayerSpec {
        num_params: block_params,
        param_bytes: block_params * dtype_bytes,
        fwd_flops: block_fwd,
        bwd_flops: c(3) * block_fwd,
    }));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Mics,
    Zero3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub name: String,
    pub strategy: Strategy,
    /// Partition size; ignored (taken as `n`) for zero3.
    pub p: Option<usize>,
    pub hierarchical_gather: bool,
    pub two_hop: bool,
    /// Micro-steps per iteration.
    pub s: usize,
    pub prefetch_depth: usize,
}

impl StrategyConfig {
    pub fn zero3(name: impl Into<String>, s: usize) -> Self {
        StrategyConfig {
            name: name.into(),
            strategy: Strategy::Zero3,
            p: None,
            hierarchical_gather: false,
            two_hop: false,
            s,
            prefetch_depth: 1,
        }
    }

    /// Hierarchical gather and 2-hop sync enabled.
    pub fn mics(name: impl Into<String>, p: usize, s: usize) -> Self {
        StrategyConfig {
            name: name.into(),
            strategy: Strategy::Mics,
            p: Some(p),
            hierarchical_gather: true,
            two_hop: true,
            s,
            prefetch_depth: 1,
        }
    }

    /// Checks the configuration against a world of `n` ranks with `k` per node
    /// and returns the partition size.
    pub fn resolve_partition(&self, n: usize, k: usize) -> Result<usize> {
        if self.s == 0 {
            return Err(Error::OutOfRange {
                what: "s",
                value: 0,
                expected: "s >= 1",
            });
        }
        match self.strategy {
            Strategy::Zero3 => {
                if self.p.is_some_and(|p| p != n) {
                    return Err(Error::Domain(format!(
                        "zero3 partitions over all {n} ranks, got p = {:?}",
                        self.p
                    )));
                }
                if self.hierarchical_gather || self.two_hop {
                    return Err(Error::Domain(
                        "zero3 uses flat gathers and the global all-reduce schedule".into(),
                    ));
                }
                Ok(n)
            }
            Strategy::Mics => {
                let p = self
                    .p
                    .ok_or_else(|| Error::Domain("mics requires a partition size".into()))?;
                if p == 0 || p > n {
                    return Err(Error::OutOfRange {
                        what: "p",
                        value: p as u64,
                        expected: "1 <= p <= n",
                    });
                }
                if n % p != 0 {
                    return Err(Error::NonDivisible { n, p });
                }
                check_partition_shape(p, k)?;
                Ok(p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions<T> {
    pub profile: BandwidthProfile<T>,
    /// Achieved fraction of peak FLOP/s.
    pub compute_efficiency: T,
    pub include_latency: bool,
    pub latency_algorithm: LatencyAlgorithm,
    pub headroom_fraction: T,
    pub bytes_per_param_states: u64,
}

impl<T: Real> SimOptions<T> {
    pub fn new(profile: BandwidthProfile<T>) -> Self {
        SimOptions {
            profile,
            compute_efficiency: from_f64(0.5),
            include_latency: true,
            latency_algorithm: LatencyAlgorithm::Ring,
            headroom_fraction: from_f64(DEFAULT_HEADROOM_FRACTION),
            bytes_per_param_states: DEFAULT_BYTES_PER_PARAM_STATES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes<T> {
    pub fwd_gather: T,
    pub fwd_compute: T,
    pub bwd_gather: T,
    pub bwd_compute: T,
    pub micro_sync: T,
    pub boundary_sync: T,
}

impl<T: Real> PhaseTimes<T> {
    pub fn zero() -> Self {
        let z = T::zero();
        PhaseTimes {
            fwd_gather: z,
            fwd_compute: z,
            bwd_gather: z,
            bwd_compute: z,
            micro_sync: z,
            boundary_sync: z,
        }
    }

    pub fn compute(&self) -> T {
        self.fwd_compute + self.bwd_compute
    }

    pub fn gather(&self) -> T {
        self.fwd_gather + self.bwd_gather
    }

    pub fn sync(&self) -> T {
        self.micro_sync + self.boundary_sync
    }

    pub fn communication(&self) -> T {
        self.gather() + self.sync()
    }
}

/// Outcome of one simulated iteration.
///
/// Rank-level byte counters are bytes received by one rank. Node-level
/// counters (`*_node_bytes`) are bytes sent over node 0's links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace<T> {
    pub strategy: String,
    pub n: usize,
    pub p: usize,
    pub s: usize,
    pub total_seconds: T,
    pub phases: PhaseTimes<T>,
    /// Parameter-gather traffic inside node 0.
    pub intra_node_bytes: u64,
    /// Parameter-gather traffic leaving node 0.
    pub inter_node_bytes: u64,
    pub sync_intra_node_bytes: u64,
    pub sync_inter_node_bytes: u64,
    /// Bytes a rank receives through parameter all-gathers.
    pub gather_bytes: u64,
    /// Bytes a rank receives through gradient reduce-scatters, including the
    /// reduce-scatter half of every all-reduce.
    pub reduce_scatter_bytes: u64,
    /// Bytes a rank receives through the all-gather half of all-reduces.
    pub sync_all_gather_bytes: u64,
    pub model_state_bytes: u64,
    /// Sharded model states plus the gathered-parameter buffers in flight.
    pub peak_model_state_bytes_per_device: u64,
    pub events: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resource {
    Compute,
    Comm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    FwdGather,
    FwdCompute,
    BwdGather,
    BwdCompute,
    MicroSync,
    BoundarySync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dep {
    Start(usize),
    Finish(usize),
}

struct Task<T> {
    resource: Resource,
    phase: Phase,
    duration: T,
    pending: usize,
    on_start: Vec<usize>,
    on_finish: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Start,
    Finish,
}

/// Heap entry ordered by time, then insertion sequence.
struct Timed<T> {
    time: T,
    seq: u64,
    task: usize,
    kind: EventKind,
}

impl<T: Real> PartialEq for Timed<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Real> Eq for Timed<T> {}
impl<T: Real> PartialOrd for Timed<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Real> Ord for Timed<T> {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .partial_cmp(&self.time)
            .unwrap_or(Ordering::Equal)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Ready-queue entry ordered by ready time, then task id.
struct Ready<T> {
    time: T,
    task: usize,
}

impl<T: Real> PartialEq for Ready<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Real> Eq for Ready<T> {}
impl<T: Real> PartialOrd for Ready<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Real> Ord for Ready<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .partial_cmp(&self.time)
            .unwrap_or(Ordering::Equal)
            .then(other.task.cmp(&self.task))
    }
}

struct TaskGraph<T> {
    tasks: Vec<Task<T>>,
}

impl<T: Real> TaskGraph<T> {
    fn add(&mut self, resource: Resource, phase: Phase, duration: T, deps: &[Dep]) -> usize {
        let id = self.tasks.len();
        self.tasks.push(Task {
            resource,
            phase,
            duration,
            pending: deps.len(),
            on_start: Vec::new(),
            on_finish: Vec::new(),
        });
        for dep in deps {
            match *dep {
                Dep::Start(t) => self.tasks[t].on_start.push(id),
                Dep::Finish(t) => self.tasks[t].on_finish.push(id),
            }
        }
        id
    }

    /// Runs the event loop; returns the makespan.
    fn run(&mut self) -> T {
        let mut events: BinaryHeap<Timed<T>> = BinaryHeap::new();
        let mut ready: [BinaryHeap<Ready<T>>; 2] = [BinaryHeap::new(), BinaryHeap::new()];
        let mut busy = [false, false];
        let mut seq = 0u64;
        let mut makespan = T::zero();
        let slot = |r: Resource| match r {
            Resource::Compute => 0,
            Resource::Comm => 1,
        };

        for (id, t) in self.tasks.iter().enumerate() {
            if t.pending == 0 {
                ready[slot(t.resource)].push(Ready { time: T::zero(), task: id });
            }
        }
        let mut dispatch = |now: T,
                            ready: &mut [BinaryHeap<Ready<T>>; 2],
                            busy: &mut [bool; 2],
                            events: &mut BinaryHeap<Timed<T>>,
                            tasks: &[Task<T>]| {
            for s in 0..2 {
                if !busy[s] {
                    if let Some(Ready { task, .. }) = ready[s].pop() {
                        busy[s] = true;
                        for (kind, time) in [
                            (EventKind::Start, now),
                            (EventKind::Finish, now + tasks[task].duration),
                        ] {
                            events.push(Timed { time, seq, task, kind });
                            seq += 1;
                        }
                    }
                }
            }
        };
        dispatch(T::zero(), &mut ready, &mut busy, &mut events, &self.tasks);

        while let Some(ev) = events.pop() {
            let now = ev.time;
            let task = &self.tasks[ev.task];
            let notify = match ev.kind {
                EventKind::Start => task.on_start.clone(),
                EventKind::Finish => {
                    busy[slot(task.resource)] = false;
                    if now > makespan {
                        makespan = now;
                    }
                    task.on_finish.clone()
                }
            };
            for d in notify {
                let t = &mut self.tasks[d];
                t.pending -= 1;
                if t.pending == 0 {
                    ready[slot(t.resource)].push(Ready { time: now, task: d });
                }
            }
            dispatch(now, &mut ready, &mut busy, &mut events, &self.tasks);
        }
        debug_assert!(self.tasks.iter().all(|t| t.pending == 0));
        makespan
    }
}

/// Links of node 0 used by one ring collective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct LinkCount {
    intra: u64,
    inter: u64,
}

impl LinkCount {
    fn of_rings<T: Real>(cluster: &ClusterSpec<T>, rings: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut out = LinkCount::default();
        for ring in rings {
            if ring.len() < 2 {
                continue;
            }
            for (i, &a) in ring.iter().enumerate() {
                let b = ring[(i + 1) % ring.len()];
                if cluster.node_of(a) != 0 {
                    continue;
                }
                if cluster.node_of(b) == 0 {
                    out.intra += 1;
                } else {
                    out.inter += 1;
                }
            }
        }
        out
    }
}

/// Static cost of one collective on one layer.
#[derive(Debug, Clone, Copy)]
struct CommCost<T> {
    seconds: T,
    /// Bytes received by one rank, reduce-scatter (or gather) part.
    rank_bytes: u64,
    /// Bytes received by one rank in an all-reduce's gather half.
    rank_gather_half: u64,
    node_intra: u64,
    node_inter: u64,
}

impl<T: Real> CommCost<T> {
    fn none() -> Self {
        CommCost {
            seconds: T::zero(),
            rank_bytes: 0,
            rank_gather_half: 0,
            node_intra: 0,
            node_inter: 0,
        }
    }
}

struct Model<'a, T> {
    cluster: &'a ClusterSpec<T>,
    opts: &'a SimOptions<T>,
    n: usize,
    k: usize,
    p: usize,
    cfg: &'a StrategyConfig,
    partition_links: LinkCount,
    global_links: LinkCount,
    stage1_links: LinkCount,
    stage3_links: LinkCount,
    replication_links: LinkCount,
}

impl<'a, T: Real> Model<'a, T> {
    fn new(cluster: &'a ClusterSpec<T>, opts: &'a SimOptions<T>, cfg: &'a StrategyConfig, p: usize) -> Self {
        let n = cluster.world_size();
        let k = cluster.devices_per_node;
        let partition_links =
            LinkCount::of_rings(cluster, (0..n / p).map(|g| (g * p..(g + 1) * p).collect()));
        let global_links = LinkCount::of_rings(cluster, [(0..n).collect()]);
        let q = (p / k).max(1);
        let stage1_links = LinkCount::of_rings(
            cluster,
            (0..n / p).flat_map(|g| (0..k).map(move |j| (0..q).map(|m| g * p + m * k + j).collect())),
        );
        let stage3_links =
            LinkCount::of_rings(cluster, (0..cluster.num_nodes).map(|m| (m * k..(m + 1) * k).collect()));
        let replication_links =
            LinkCount::of_rings(cluster, (0..p).map(|j| (j..n).step_by(p).collect()));
        Model {
            cluster,
            opts,
            n,
            k,
            p,
            cfg,
            partition_links,
            global_links,
            stage1_links,
            stage3_links,
            replication_links,
        }
    }

    fn latency(&self, ranks: usize, spans_nodes: bool) -> Result<T> {
        if !self.opts.include_latency || ranks < 2 {
            return Ok(T::zero());
        }
        let alpha = if spans_nodes {
            self.cluster.alpha_inter
        } else {
            self.cluster.alpha_intra
        };
        collective_latency(ranks, alpha, self.opts.latency_algorithm)
    }

    /// Effective bandwidth of a single-channel collective over `g` ranks,
    /// capped by the link that carries it.
    fn bandwidth(&self, scalar: T, message: u64, g: usize, spans_nodes: bool) -> Result<T> {
        let b = if self.opts.profile.table.is_empty() {
            scalar
        } else {
            effective_bandwidth(message, g, &self.opts.profile)?
        };
        let link = if spans_nodes {
            self.cluster.inter_node_bandwidth_per_node
        } else {
            self.cluster.intra_node_bandwidth
        };
        Ok(b.min(link))
    }

    /// Flat ring all-gather or reduce-scatter of `bytes` over groups of `g`
    /// ranks (`g == p` or `g == n`).
    fn flat(&self, bytes: u64, g: usize, scalar: T, links: LinkCount) -> Result<CommCost<T>> {
        if g == 1 {
            return Ok(CommCost::none());
        }
        let chunk = bytes.div_ceil(g as u64);
        let received = (g as u64 - 1) * chunk;
        let spans = g > self.k;
        let bw = self.bandwidth(scalar, bytes, g, spans)?;
        Ok(CommCost {
            seconds: from_count::<T>(received) / bw + self.latency(g, spans)?,
            rank_bytes: received,
            rank_gather_half: 0,
            node_intra: links.intra * received,
            node_inter: links.inter * received,
        })
    }

    fn gather_scalar(&self) -> T {
        match self.cfg.strategy {
            Strategy::Zero3 => self.opts.profile.b_all,
            Strategy::Mics => self.opts.profile.b_part,
        }
    }

    fn gather(&self, bytes: u64) -> Result<CommCost<T>> {
        let (p, k) = (self.p, self.k);
        if !(self.cfg.hierarchical_gather && p > k) {
            return self.flat(bytes, p, self.gather_scalar(), self.partition_links);
        }
        let q = p / k;
        let chunk = bytes.div_ceil(p as u64);
        // Stage 1: k channels share the NIC; each rank receives q-1 chunks and
        // the node sends (p - k) chunks.
        let stage1 = from_count::<T>(((p - k) as u64) * chunk) / self.cluster.inter_node_bandwidth_per_node;
        // Stage 3: q batched gathers, k-1 chunks each.
        let stage3_rank = (q * (k - 1)) as u64 * chunk;
        let stage3 = from_count::<T>(stage3_rank) / self.cluster.intra_node_bandwidth;
        let latency = self.latency(q, true)? + self.latency(k, false)?;
        Ok(CommCost {
            seconds: stage1 + stage3 + latency,
            rank_bytes: (q as u64 - 1) * chunk + stage3_rank,
            rank_gather_half: 0,
            node_intra: self.stage3_links.intra * (q as u64 * (k as u64 - 1) * chunk),
            node_inter: self.stage1_links.inter * ((q as u64 - 1) * chunk),
        })
    }

    fn micro_sync(&self, bytes: u64) -> Result<CommCost<T>> {
        if self.cfg.two_hop {
            return self.flat(bytes, self.p, self.opts.profile.b_part, self.partition_links);
        }
        // Global all-reduce: reduce-scatter then all-gather over all ranks.
        let half = self.flat(bytes, self.n, self.opts.profile.b_all, self.global_links)?;
        Ok(CommCost {
            seconds: half.seconds + half.seconds,
            rank_bytes: half.rank_bytes,
            rank_gather_half: half.rank_bytes,
            node_intra: 2 * half.node_intra,
            node_inter: 2 * half.node_inter,
        })
    }

    /// Replication-group all-reduce of the layer's owned shard.
    fn boundary(&self, bytes: u64) -> Result<CommCost<T>> {
        let r = self.n / self.p;
        if !self.cfg.two_hop || r < 2 {
            return Ok(CommCost::none());
        }
        let shard = bytes.div_ceil(self.p as u64);
        let received = (r as u64 - 1) * shard.div_ceil(r as u64);
        let spans = self.replication_links.inter > 0;
        let mut bw = self.bandwidth(self.opts.profile.b_repl, shard, r, spans)?;
        if spans {
            // Every local rank runs its own replication ring over the NIC.
            let share = from_count::<T>(self.p.min(self.k) as u64);
            bw = bw.min(self.cluster.inter_node_bandwidth_per_node / share);
        }
        let one_way = from_count::<T>(received) / bw + self.latency(r, spans)?;
        Ok(CommCost {
            seconds: one_way + one_way,
            rank_bytes: received,
            rank_gather_half: received,
            node_intra: 2 * self.replication_links.intra * received,
            node_inter: 2 * self.replication_links.inter * received,
        })
    }
}

/// Simulates one iteration (all micro-steps and the accumulation boundary).
pub fn simulate_iteration<T: Real>(
    cluster: &ClusterSpec<T>,
    layers: &[LayerSpec<T>],
    cfg: &StrategyConfig,
    opts: &SimOptions<T>,
) -> Result<IterationTrace<T>> {
    cluster.validate()?;
    opts.profile.validate()?;
    if layers.is_empty() {
        return Err(Error::Domain("model has no layers".into()));
    }
    if let Some(i) = layers.iter().position(|l| l.param_bytes == 0) {
        return Err(Error::Domain(format!("layer {i} has no parameters")));
    }
    if !(opts.compute_efficiency > T::zero() && opts.compute_efficiency <= T::one()) {
        return Err(Error::Domain("compute efficiency must lie in (0, 1]".into()));
    }
    let n = cluster.world_size();
    let p = cfg.resolve_partition(n, cluster.devices_per_node)?;

    let num_params: u64 = layers.iter().map(|l| l.num_params).sum();
    let model_state_bytes = num_params
        .checked_mul(opts.bytes_per_param_states)
        .ok_or_else(|| Error::Domain("model state size overflows u64".into()))?;
    if !fits_in_partition(model_state_bytes, p, cluster.device_memory, opts.headroom_fraction) {
        return Err(Error::Infeasible {
            required: model_state_bytes,
            reason: format!(
                "{} bytes per device over {p} devices exceeds {:?} of {} bytes",
                model_state_bytes.div_ceil(p as u64),
                opts.headroom_fraction,
                cluster.device_memory
            ),
        });
    }
    let max_layer = layers.iter().map(|l| l.param_bytes).max().unwrap_or(0);
    let peak = model_state_bytes.div_ceil(p as u64) + (cfg.prefetch_depth as u64 + 1) * max_layer;

    let model = Model::new(cluster, opts, cfg, p);
    let gathers = layers
        .iter()
        .map(|l| model.gather(l.param_bytes))
        .collect::<Result<Vec<_>>>()?;
    let syncs = layers
        .iter()
        .map(|l| model.micro_sync(l.param_bytes))
        .collect::<Result<Vec<_>>>()?;
    let boundaries = layers
        .iter()
        .map(|l| model.boundary(l.param_bytes))
        .collect::<Result<Vec<_>>>()?;
    let flop_rate = cluster.device_peak_flops * opts.compute_efficiency;

    let mut graph = TaskGraph { tasks: Vec::new() };
    let mut computes: Vec<usize> = Vec::new();
    let mut trace = IterationTrace {
        strategy: cfg.name.clone(),
        n,
        p,
        s: cfg.s,
        total_seconds: T::zero(),
        phases: PhaseTimes::zero(),
        intra_node_bytes: 0,
        inter_node_bytes: 0,
        sync_intra_node_bytes: 0,
        sync_inter_node_bytes: 0,
        gather_bytes: 0,
        reduce_scatter_bytes: 0,
        sync_all_gather_bytes: 0,
        model_state_bytes,
        peak_model_state_bytes_per_device: peak,
        events: 0,
    };

    let prefetch_dep = |computes: &Vec<usize>, d: usize| -> Vec<Dep> {
        let len = computes.len();
        if d == 0 {
            computes.last().map(|&c| Dep::Finish(c)).into_iter().collect()
        } else if len >= d {
            vec![Dep::Start(computes[len - d])]
        } else {
            Vec::new()
        }
    };

    let order: Vec<(usize, bool)> = (0..layers.len())
        .map(|i| (i, true))
        .chain((0..layers.len()).rev().map(|i| (i, false)))
        .collect();
    for step in 0..cfg.s {
        for &(i, forward) in &order {
            let (gather_phase, compute_phase, flops) = if forward {
                (Phase::FwdGather, Phase::FwdCompute, layers[i].fwd_flops)
            } else {
                (Phase::BwdGather, Phase::BwdCompute, layers[i].bwd_flops)
            };
            let g = gathers[i];
            let deps = prefetch_dep(&computes, cfg.prefetch_depth);
            let gather = graph.add(Resource::Comm, gather_phase, g.seconds, &deps);
            trace.gather_bytes += g.rank_bytes;
            trace.intra_node_bytes += g.node_intra;
            trace.inter_node_bytes += g.node_inter;

            let mut deps = vec![Dep::Finish(gather)];
            deps.extend(computes.last().map(|&c| Dep::Finish(c)));
            let compute = graph.add(Resource::Compute, compute_phase, flops / flop_rate, &deps);
            computes.push(compute);

            if !forward {
                let sc = syncs[i];
                let sync = graph.add(Resource::Comm, Phase::MicroSync, sc.seconds, &[Dep::Finish(compute)]);
                trace.reduce_scatter_bytes += sc.rank_bytes;
                trace.sync_all_gather_bytes += sc.rank_gather_half;
                trace.sync_intra_node_bytes += sc.node_intra;
                trace.sync_inter_node_bytes += sc.node_inter;
                if step + 1 == cfg.s && cfg.two_hop && n / p > 1 {
                    let b = boundaries[i];
                    graph.add(Resource::Comm, Phase::BoundarySync, b.seconds, &[Dep::Finish(sync)]);
                    trace.reduce_scatter_bytes += b.rank_bytes;
                    trace.sync_all_gather_bytes += b.rank_gather_half;
                    trace.sync_intra_node_bytes += b.node_intra;
                    trace.sync_inter_node_bytes += b.node_inter;
                }
            }
        }
    }

    trace.total_seconds = graph.run();
    trace.events = graph.tasks.len();
    for t in &graph.tasks {
        let slot = match t.phase {
            Phase::FwdGather => &mut trace.phases.fwd_gather,
            Phase::FwdCompute => &mut trace.phases.fwd_compute,
            Phase::BwdGather => &mut trace.phases.bwd_gather,
            Phase::BwdCompute => &mut trace.phases.bwd_compute,
            Phase::MicroSync => &mut trace.phases.micro_sync,
            Phase::BoundarySync => &mut trace.phases.boundary_sync,
        };
        *slot = *slot + t.duration;
    }
    Ok(trace)
}

/// Traces of several strategies plus ratios against the first one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison<T> {
    pub configs: Vec<StrategyConfig>,
    pub traces: Vec<IterationTrace<T>>,
    pub report: CostReport,
}

fn ratio(base: f64, this: f64) -> f64 {
    if base == this {
        1.0
    } else {
        base / this
    }
}

/// Simulates every configuration and reports, per configuration, the
/// baseline-over-this ratios of iteration time (throughput), gather and sync
/// phase time, gather inter-node traffic and per-device memory.
pub fn compare_strategies<T: Real>(
    cluster: &ClusterSpec<T>,
    layers: &[LayerSpec<T>],
    configs: &[StrategyConfig],
    opts: &SimOptions<T>,
    executor: &Executor,
) -> Result<Comparison<T>> {
    if configs.len() < 2 {
        return Err(Error::Domain("comparison needs at least two strategies".into()));
    }
    let traces = executor
        .map(configs, |cfg| simulate_iteration(cluster, layers, cfg, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
    let base = &traces[0];
    let mut report = CostReport::default();
    for t in &traces {
        let key = |k: &str| format!("{}.{k}", t.strategy);
        report.push("simulate_iteration", &key("total_seconds"), f(t.total_seconds), "s");
        report.push(
            "compare_strategies",
            &key("throughput_ratio"),
            ratio(f(base.total_seconds), f(t.total_seconds)),
            "ratio",
        );
        report.push(
            "compare_strategies",
            &key("gather_ratio"),
            ratio(f(base.phases.gather()), f(t.phases.gather())),
            "ratio",
        );
        report.push(
            "compare_strategies",
            &key("sync_ratio"),
            ratio(f(base.phases.sync()), f(t.phases.sync())),
            "ratio",
        );
        report.push(
            "compare_strategies",
            &key("inter_node_ratio"),
            ratio(base.inter_node_bytes as f64, t.inter_node_bytes as f64),
            "ratio",
        );
        report.push(
            "compare_strategies",
            &key("memory_ratio"),
            ratio(
                base.peak_model_state_bytes_per_device as f64,
                t.peak_model_state_bytes_per_device as f64,
            ),
            "ratio",
        );
    }
    Ok(Comparison {
        configs: configs.to_vec(),
        traces,
        report,
    })
}

#[cfg(test)]
mod tests;
