//! Collectives over virtual ranks.
//!
//! Every collective moves real bytes through per-rank mailboxes (see
//! [`transport`]). The plain [`Fabric::all_gather`], [`Fabric::reduce_scatter`]
//! and [`Fabric::all_reduce`] use a direct-exchange pattern and double as
//! correctness oracles for [`Fabric::hierarchical_all_gather`].
//!
//! Reductions sum in ascending group position, so floating-point results are
//! bit-identical regardless of the executor's thread count.

mod element;
mod hierarchical;
pub mod transport;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use element::{DType, Element};
pub use hierarchical::Stage2;
pub use transport::Executor;

use crate::error::{Error, Result};
use crate::topology::ClusterSpec;
use transport::{endpoints, exchange, Envelope};

/// One rank's contribution to a collective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardBuffer {
    pub rank: usize,
    pub payload: Vec<u8>,
}

impl ShardBuffer {
    pub fn new(rank: usize, payload: Vec<u8>) -> Self {
        ShardBuffer { rank, payload }
    }

    pub fn chunk_size(&self) -> usize {
        self.payload.len()
    }
}

/// Ordered, duplicate-free rank list. Position in the list is the chunk index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollectiveGroup {
    ranks: Vec<usize>,
}

impl CollectiveGroup {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Shape("collective group is empty".into()));
        }
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Shape(format!("duplicate rank in group {ranks:?}")));
        }
        Ok(CollectiveGroup { ranks })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn position(&self, rank: usize) -> Option<usize> {
        self.ranks.iter().position(|&r| r == rank)
    }

    pub fn spans_nodes<T: crate::Real>(&self, cluster: &ClusterSpec<T>) -> bool {
        cluster.spans_nodes(&self.ranks)
    }
}

/// Memory order of chunk indices inside a gathered buffer, e.g. `[0, 2, 1, 3]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLayout(pub Vec<usize>);

impl ChunkLayout {
    pub const UNKNOWN: usize = usize::MAX;

    pub fn identity(p: usize) -> Self {
        ChunkLayout((0..p).collect())
    }

    /// Identifies each `chunk_size` slot of `buffer` by matching it against
    /// the source chunks; unmatched slots are [`ChunkLayout::UNKNOWN`].
    pub fn infer(buffer: &[u8], chunks: &[Vec<u8>]) -> Self {
        let chunk_size = chunks.first().map_or(0, Vec::len);
        if chunk_size == 0 {
            return ChunkLayout(Vec::new());
        }
        ChunkLayout(
            buffer
                .chunks(chunk_size)
                .map(|slot| {
                    chunks
                        .iter()
                        .position(|c| c.as_slice() == slot)
                        .unwrap_or(Self::UNKNOWN)
                })
                .collect(),
        )
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.0.len()];
        self.0.iter().all(|&i| {
            i < seen.len() && !std::mem::replace(&mut seen[i], true)
        })
    }
}

/// Pads `data` with zeros to a multiple of `p` and splits it into `p` equal
/// chunks. Returns the chunks and the chunk size; the logical length is
/// `data.len()`.
pub fn split_padded(data: &[u8], p: usize) -> (Vec<Vec<u8>>, usize) {
    let chunk = data.len().div_ceil(p.max(1));
    let chunks = (0..p)
        .map(|i| {
            let mut c = vec![0u8; chunk];
            let lo = (i * chunk).min(data.len());
            let hi = ((i + 1) * chunk).min(data.len());
            c[..hi - lo].copy_from_slice(&data[lo..hi]);
            c
        })
        .collect();
    (chunks, chunk)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
    AllReduce,
}

/// One issued (possibly batched) collective, as seen by the cost layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub kind: CollectiveKind,
    /// Number of sub-collectives launched together.
    pub sub_collectives: usize,
    /// Total participants over all sub-collectives.
    pub participants: usize,
    /// Bytes received, summed over participants.
    pub bytes_received: u64,
}

/// Virtual-rank communication fabric.
#[derive(Debug)]
pub struct Fabric {
    executor: Executor,
    log: Mutex<Vec<CommEvent>>,
}

impl Default for Fabric {
    fn default() -> Self {
        Self::new(Executor::sequential())
    }
}

impl Fabric {
    pub fn new(executor: Executor) -> Self {
        Fabric {
            executor,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn events(&self) -> Vec<CommEvent> {
        self.log.lock().unwrap().clone()
    }

    pub fn clear_events(&self) {
        self.log.lock().unwrap().clear();
    }

    fn record(&self, kind: CollectiveKind, groups: &[&[usize]], bytes_received: u64) {
        self.log.lock().unwrap().push(CommEvent {
            kind,
            sub_collectives: groups.len(),
            participants: groups.iter().map(|g| g.len()).sum(),
            bytes_received,
        });
    }

    pub fn all_gather(
        &self,
        group: &CollectiveGroup,
        shards: &[ShardBuffer],
    ) -> Result<Vec<ShardBuffer>> {
        let mut out = self.batched_all_gather(std::slice::from_ref(group), &[shards.to_vec()])?;
        Ok(out.pop().unwrap())
    }

    /// Several all-gathers launched as one batch. Groups must be disjoint or
    /// share an identical rank set (each rank then takes part in several
    /// sub-collectives).
    pub fn batched_all_gather(
        &self,
        groups: &[CollectiveGroup],
        shard_sets: &[Vec<ShardBuffer>],
    ) -> Result<Vec<Vec<ShardBuffer>>> {
        let out = self.gather_inner(groups, shard_sets)?;
        if !groups.is_empty() {
            let rank_lists: Vec<&[usize]> = groups.iter().map(|g| g.ranks()).collect();
            let bytes = shard_sets
                .iter()
                .map(|s| {
                    let p = s.len() as u64;
                    p * (p - 1) * s[0].payload.len() as u64
                })
                .sum();
            self.record(CollectiveKind::AllGather, &rank_lists, bytes);
        }
        Ok(out)
    }

    /// All-gather without event logging; used inside composite collectives.
    fn gather_inner(
        &self,
        groups: &[CollectiveGroup],
        shard_sets: &[Vec<ShardBuffer>],
    ) -> Result<Vec<Vec<ShardBuffer>>> {
        if groups.len() != shard_sets.len() {
            return Err(Error::SizeMismatch(format!(
                "{} groups but {} shard sets",
                groups.len(),
                shard_sets.len()
            )));
        }
        for (group, shards) in groups.iter().zip(shard_sets) {
            check_shards(group, shards)?;
        }
        if groups.is_empty() {
            return Ok(Vec::new());
        }
        // A one-rank gather is the identity; skip the mailboxes.
        if groups.iter().all(|g| g.size() == 1) {
            return Ok(shard_sets.to_vec());
        }
        let rank_lists: Vec<&[usize]> = groups.iter().map(|g| g.ranks()).collect();
        let eps = endpoints(&rank_lists);
        let results = exchange(
            &self.executor,
            &eps,
            |ep| {
                let mine: Arc<[u8]> = Arc::from(shard_sets[ep.tag][ep.pos].payload.as_slice());
                (0..ep.group.len())
                    .filter(|&d| d != ep.pos)
                    .map(|d| (d, Arc::clone(&mine)))
                    .collect()
            },
            |ep, inbox| {
                let own = &shard_sets[ep.tag][ep.pos].payload;
                let c = own.len();
                let mut full = vec![0u8; c * ep.group.len()];
                full[ep.pos * c..(ep.pos + 1) * c].copy_from_slice(own);
                expect_all_peers(ep.group.len(), ep.pos, &inbox)?;
                for env in inbox {
                    full[env.src_pos * c..(env.src_pos + 1) * c].copy_from_slice(&env.payload);
                }
                Ok(ShardBuffer::new(ep.rank(), full))
            },
        )?;
        Ok(regroup(results, &rank_lists))
    }

    /// Rank at position `i` receives the elementwise sum of every rank's
    /// chunk `i`.
    pub fn reduce_scatter<E: Element>(
        &self,
        group: &CollectiveGroup,
        buffers: &[Vec<E>],
    ) -> Result<Vec<Vec<E>>> {
        let mut out =
            self.batched_reduce_scatter(std::slice::from_ref(group), &[buffers.to_vec()])?;
        Ok(out.pop().unwrap())
    }

    pub fn batched_reduce_scatter<E: Element>(
        &self,
        groups: &[CollectiveGroup],
        buffer_sets: &[Vec<Vec<E>>],
    ) -> Result<Vec<Vec<Vec<E>>>> {
        let out = self.reduce_scatter_inner(groups, buffer_sets)?;
        let rank_lists: Vec<&[usize]> = groups.iter().map(|g| g.ranks()).collect();
        let bytes = reduce_scatter_bytes::<E>(buffer_sets);
        if !groups.is_empty() {
            self.record(CollectiveKind::ReduceScatter, &rank_lists, bytes);
        }
        Ok(out)
    }

    /// Byte-level reduce-scatter; payloads are interpreted as `dtype`.
    pub fn reduce_scatter_raw(
        &self,
        group: &CollectiveGroup,
        buffers: &[ShardBuffer],
        dtype: DType,
    ) -> Result<Vec<ShardBuffer>> {
        fn run<E: Element>(
            fabric: &Fabric,
            group: &CollectiveGroup,
            buffers: &[ShardBuffer],
        ) -> Result<Vec<ShardBuffer>> {
            let typed = buffers
                .iter()
                .map(|b| E::decode(&b.payload))
                .collect::<Result<Vec<_>>>()?;
            Ok(fabric
                .reduce_scatter(group, &typed)?
                .into_iter()
                .zip(group.ranks())
                .map(|(v, &r)| ShardBuffer::new(r, E::encode(&v)))
                .collect())
        }
        check_shards(group, buffers)?;
        match dtype {
            DType::I64 => run::<i64>(self, group, buffers),
            DType::F32 => run::<f32>(self, group, buffers),
            DType::F64 => run::<f64>(self, group, buffers),
        }
    }

    /// Every rank receives the full elementwise sum. Runs as a reduce-scatter
    /// followed by an all-gather; lengths not divisible by the group size are
    /// zero-padded internally.
    pub fn all_reduce<E: Element>(
        &self,
        group: &CollectiveGroup,
        buffers: &[Vec<E>],
    ) -> Result<Vec<Vec<E>>> {
        let mut out = self.batched_all_reduce(std::slice::from_ref(group), &[buffers.to_vec()])?;
        Ok(out.pop().unwrap())
    }

    pub fn batched_all_reduce<E: Element>(
        &self,
        groups: &[CollectiveGroup],
        buffer_sets: &[Vec<Vec<E>>],
    ) -> Result<Vec<Vec<Vec<E>>>> {
        if groups.len() != buffer_sets.len() {
            return Err(Error::SizeMismatch(format!(
                "{} groups but {} buffer sets",
                groups.len(),
                buffer_sets.len()
            )));
        }
        let mut lens = Vec::with_capacity(groups.len());
        let mut padded = Vec::with_capacity(groups.len());
        for (group, set) in groups.iter().zip(buffer_sets) {
            let len = uniform_len(group, set)?;
            let p = group.size();
            let target = len.div_ceil(p) * p;
            lens.push(len);
            padded.push(
                set.iter()
                    .map(|b| {
                        let mut b = b.clone();
                        b.resize(target, E::zero());
                        b
                    })
                    .collect::<Vec<_>>(),
            );
        }
        if groups.is_empty() {
            return Ok(Vec::new());
        }
        let reduced = self.reduce_scatter_inner(groups, &padded)?;
        let shard_sets: Vec<Vec<ShardBuffer>> = reduced
            .iter()
            .zip(groups)
            .map(|(chunks, g)| {
                chunks
                    .iter()
                    .zip(g.ranks())
                    .map(|(c, &r)| ShardBuffer::new(r, E::encode(c)))
                    .collect()
            })
            .collect();
        let gathered = self.gather_inner(groups, &shard_sets)?;
        let rank_lists: Vec<&[usize]> = groups.iter().map(|g| g.ranks()).collect();
        let bytes = 2 * reduce_scatter_bytes::<E>(&padded);
        self.record(CollectiveKind::AllReduce, &rank_lists, bytes);
        gathered
            .into_iter()
            .zip(lens)
            .map(|(set, len)| {
                set.into_iter()
                    .map(|buf| {
                        let mut v = E::decode(&buf.payload)?;
                        v.truncate(len);
                        Ok(v)
                    })
                    .collect()
            })
            .collect()
    }

    fn reduce_scatter_inner<E: Element>(
        &self,
        groups: &[CollectiveGroup],
        buffer_sets: &[Vec<Vec<E>>],
    ) -> Result<Vec<Vec<Vec<E>>>> {
        if groups.len() != buffer_sets.len() {
            return Err(Error::SizeMismatch(format!(
                "{} groups but {} buffer sets",
                groups.len(),
                buffer_sets.len()
            )));
        }
        for (group, set) in groups.iter().zip(buffer_sets) {
            let len = uniform_len(group, set)?;
            if len % group.size() != 0 {
                return Err(Error::SizeMismatch(format!(
                    "buffer of {len} elements does not split into {} chunks",
                    group.size()
                )));
            }
        }
        if groups.is_empty() {
            return Ok(Vec::new());
        }
        let rank_lists: Vec<&[usize]> = groups.iter().map(|g| g.ranks()).collect();
        let eps = endpoints(&rank_lists);
        let results = exchange(
            &self.executor,
            &eps,
            |ep| {
                let buf = &buffer_sets[ep.tag][ep.pos];
                let c = buf.len() / ep.group.len();
                (0..ep.group.len())
                    .filter(|&d| d != ep.pos)
                    .map(|d| (d, Arc::from(E::encode(&buf[d * c..(d + 1) * c]))))
                    .collect()
            },
            |ep, inbox: Vec<Envelope>| {
                let buf = &buffer_sets[ep.tag][ep.pos];
                let c = buf.len() / ep.group.len();
                let own = &buf[ep.pos * c..(ep.pos + 1) * c];
                expect_all_peers(ep.group.len(), ep.pos, &inbox)?;
                let mut received = inbox.into_iter();
                let mut acc: Option<Vec<E>> = None;
                for pos in 0..ep.group.len() {
                    let part = if pos == ep.pos {
                        own.to_vec()
                    } else {
                        E::decode(&received.next().unwrap().payload)?
                    };
                    acc = Some(match acc {
                        None => part,
                        Some(mut a) => {
                            for (x, y) in a.iter_mut().zip(part) {
                                *x = x.add(y);
                            }
                            a
                        }
                    });
                }
                Ok(acc.unwrap_or_default())
            },
        )?;
        Ok(regroup(results, &rank_lists))
    }
}

fn check_shards(group: &CollectiveGroup, shards: &[ShardBuffer]) -> Result<()> {
    if shards.len() != group.size() {
        return Err(Error::SizeMismatch(format!(
            "group of {} ranks received {} shards",
            group.size(),
            shards.len()
        )));
    }
    for (shard, &rank) in shards.iter().zip(group.ranks()) {
        if shard.rank != rank {
            return Err(Error::SizeMismatch(format!(
                "shard for rank {} supplied at the position of rank {rank}",
                shard.rank
            )));
        }
    }
    let c = shards[0].payload.len();
    if let Some(bad) = shards.iter().find(|s| s.payload.len() != c) {
        return Err(Error::SizeMismatch(format!(
            "rank {} contributes {} bytes, expected {c}",
            bad.rank,
            bad.payload.len()
        )));
    }
    Ok(())
}

fn uniform_len<E>(group: &CollectiveGroup, buffers: &[Vec<E>]) -> Result<usize> {
    if buffers.len() != group.size() {
        return Err(Error::SizeMismatch(format!(
            "group of {} ranks received {} buffers",
            group.size(),
            buffers.len()
        )));
    }
    let len = buffers[0].len();
    if buffers.iter().any(|b| b.len() != len) {
        return Err(Error::SizeMismatch("buffers have unequal lengths".into()));
    }
    Ok(len)
}

fn expect_all_peers(p: usize, pos: usize, inbox: &[Envelope]) -> Result<()> {
    let expected = (0..p).filter(|&s| s != pos);
    if inbox.len() != p - 1 || !inbox.iter().map(|e| e.src_pos).eq(expected) {
        return Err(Error::SizeMismatch(format!(
            "position {pos} received {} of {} expected messages",
            inbox.len(),
            p - 1
        )));
    }
    Ok(())
}

fn reduce_scatter_bytes<E: Element>(buffer_sets: &[Vec<Vec<E>>]) -> u64 {
    buffer_sets
        .iter()
        .map(|set| {
            let p = set.len() as u64;
            let chunk_bytes = (set[0].len() as u64 / p) * E::DTYPE.width() as u64;
            p * (p - 1) * chunk_bytes
        })
        .sum()
}

/// Splits flat per-endpoint results back into per-group vectors.
fn regroup<T>(flat: Vec<T>, groups: &[&[usize]]) -> Vec<Vec<T>> {
    let mut it = flat.into_iter();
    groups
        .iter()
        .map(|g| it.by_ref().take(g.len()).collect())
        .collect()
}
