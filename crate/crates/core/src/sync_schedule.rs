//! Gradient synchronization across micro-steps.
//!
//! Two schedules accumulate the same owned gradient shards:
//!
//! * **2-hop**: a reduce-scatter inside every partition group after each
//!   micro-step, then a single all-reduce inside every replication group at
//!   the accumulation boundary.
//! * **alternative**: a global all-reduce after each micro-step, after which
//!   every rank keeps only the chunk it owns.
//!
//! Sums are never averaged here; scaling by the global batch is left to the
//! caller so integer payloads compare exactly.

use serde::{Deserialize, Serialize};

use crate::collectives::{CollectiveGroup, Element, Fabric};
use crate::error::{Error, Result};
use crate::topology::GroupLayout;

/// Per-rank accumulator for the gradient partition the rank owns.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncState<E> {
    pub rank: usize,
    pub accumulated_shard: Vec<E>,
    pub micro_step: usize,
    pub s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncPhase {
    MicroRs,
    BoundaryAr,
    GlobalAr,
}

/// One collective issued by a schedule. `group` indexes partition groups for
/// `micro_rs`, replication groups for `boundary_ar` and is 0 for `global_ar`;
/// `bytes` is the per-rank input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncEvent {
    pub step: usize,
    pub phase: SyncPhase,
    pub group: usize,
    pub bytes: u64,
}

#[derive(Debug)]
pub struct SyncSchedule<'f, E> {
    fabric: &'f Fabric,
    layout: GroupLayout,
    grad_len: usize,
    chunk: usize,
    states: Vec<SyncState<E>>,
    events: Vec<SyncEvent>,
    global_step: usize,
}

impl<'f, E: Element> SyncSchedule<'f, E> {
    /// Fresh zeroed accumulators for gradients of `grad_len` elements and `s`
    /// micro-steps per global step.
    pub fn new(fabric: &'f Fabric, layout: GroupLayout, grad_len: usize, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::OutOfRange {
                what: "s",
                value: 0,
                expected: "s >= 1",
            });
        }
        if grad_len == 0 {
            return Err(Error::OutOfRange {
                what: "grad_len",
                value: 0,
                expected: "> 0",
            });
        }
        let chunk = grad_len.div_ceil(layout.p);
        let states = (0..layout.n)
            .map(|rank| SyncState {
                rank,
                accumulated_shard: vec![E::zero(); chunk],
                micro_step: 0,
                s,
            })
            .collect();
        Ok(SyncSchedule {
            fabric,
            layout,
            grad_len,
            chunk,
            states,
            events: Vec::new(),
            global_step: 0,
        })
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn states(&self) -> &[SyncState<E>] {
        &self.states
    }

    pub fn events(&self) -> &[SyncEvent] {
        &self.events
    }

    /// Elements per owned shard, `ceil(grad_len / p)`.
    pub fn shard_len(&self) -> usize {
        self.chunk
    }

    /// Zeroes the accumulators, e.g. after an optimizer consumed them.
    pub fn reset_accumulators(&mut self) {
        for st in &mut self.states {
            st.accumulated_shard.fill(E::zero());
        }
    }

    fn s(&self) -> usize {
        self.states[0].s
    }

    fn micro_step(&self) -> usize {
        self.states[0].micro_step
    }

    fn check_before_micro_step(&self, op: &'static str, grads: &[Vec<E>]) -> Result<()> {
        if self.micro_step() >= self.s() {
            return Err(Error::BoundaryViolation {
                op,
                micro_step: self.micro_step(),
                s: self.s(),
            });
        }
        if grads.len() != self.layout.n {
            return Err(Error::SizeMismatch(format!(
                "{} gradient buffers for {} ranks",
                grads.len(),
                self.layout.n
            )));
        }
        if let Some((r, g)) = grads.iter().enumerate().find(|(_, g)| g.len() != self.grad_len) {
            return Err(Error::SizeMismatch(format!(
                "rank {r} gradient has {} elements, expected {}",
                g.len(),
                self.grad_len
            )));
        }
        Ok(())
    }

    fn padded(&self, g: &[E]) -> Vec<E> {
        let mut v = g.to_vec();
        v.resize(self.chunk * self.layout.p, E::zero());
        v
    }

    fn bytes(&self, elems: usize) -> u64 {
        (elems * E::DTYPE.width()) as u64
    }

    fn advance(&mut self) {
        for st in &mut self.states {
            st.micro_step += 1;
        }
    }

    fn finish_step(&mut self) {
        for st in &mut self.states {
            st.micro_step = 0;
        }
        self.global_step += 1;
    }

    /// Reduce-scatter inside every partition group; each rank adds its reduced
    /// chunk to its accumulator. No traffic leaves the partition groups.
    pub fn two_hop_micro_step(&mut self, grads: &[Vec<E>]) -> Result<()> {
        self.check_before_micro_step("two_hop_micro_step", grads)?;
        let groups = groups_of(&self.layout.partition_groups)?;
        let sets: Vec<Vec<Vec<E>>> = self
            .layout
            .partition_groups
            .iter()
            .map(|g| g.iter().map(|&r| self.padded(&grads[r])).collect())
            .collect();
        let reduced = self.fabric.batched_reduce_scatter(&groups, &sets)?;
        for (members, chunks) in self.layout.partition_groups.iter().zip(reduced) {
            for (&r, chunk) in members.iter().zip(chunks) {
                accumulate(&mut self.states[r].accumulated_shard, &chunk);
            }
        }
        let bytes = self.bytes(self.chunk * self.layout.p);
        for g in 0..groups.len() {
            self.events.push(SyncEvent {
                step: self.global_step,
                phase: SyncPhase::MicroRs,
                group: g,
                bytes,
            });
        }
        self.advance();
        Ok(())
    }

    /// All-reduce of the accumulated shards inside every replication group.
    pub fn two_hop_boundary(&mut self) -> Result<()> {
        if self.micro_step() != self.s() {
            return Err(Error::BoundaryViolation {
                op: "two_hop_boundary",
                micro_step: self.micro_step(),
                s: self.s(),
            });
        }
        if self.layout.replication_size() > 1 {
            let groups = groups_of(&self.layout.replication_groups)?;
            let sets: Vec<Vec<Vec<E>>> = self
                .layout
                .replication_groups
                .iter()
                .map(|g| {
                    g.iter()
                        .map(|&r| self.states[r].accumulated_shard.clone())
                        .collect()
                })
                .collect();
            let reduced = self.fabric.batched_all_reduce(&groups, &sets)?;
            for (members, shards) in self.layout.replication_groups.iter().zip(reduced) {
                for (&r, shard) in members.iter().zip(shards) {
                    self.states[r].accumulated_shard = shard;
                }
            }
            let bytes = self.bytes(self.chunk);
            for g in 0..groups.len() {
                self.events.push(SyncEvent {
                    step: self.global_step,
                    phase: SyncPhase::BoundaryAr,
                    group: g,
                    bytes,
                });
            }
        }
        self.finish_step();
        Ok(())
    }

    /// Global all-reduce; every rank keeps only its owned chunk.
    pub fn alternative_step(&mut self, grads: &[Vec<E>]) -> Result<()> {
        self.check_before_micro_step("alternative_step", grads)?;
        let all = CollectiveGroup::new((0..self.layout.n).collect())?;
        let padded: Vec<Vec<E>> = grads.iter().map(|g| self.padded(g)).collect();
        let reduced = self.fabric.all_reduce(&all, &padded)?;
        let c = self.chunk;
        for (r, full) in reduced.into_iter().enumerate() {
            let j = self.layout.local_group_rank[r];
            accumulate(&mut self.states[r].accumulated_shard, &full[j * c..(j + 1) * c]);
        }
        self.events.push(SyncEvent {
            step: self.global_step,
            phase: SyncPhase::GlobalAr,
            group: 0,
            bytes: self.bytes(c * self.layout.p),
        });
        self.advance();
        Ok(())
    }

    /// Closes a global step of the alternative schedule; no communication is
    /// needed because every micro-step was already global.
    pub fn alternative_boundary(&mut self) -> Result<()> {
        if self.micro_step() != self.s() {
            return Err(Error::BoundaryViolation {
                op: "alternative_boundary",
                micro_step: self.micro_step(),
                s: self.s(),
            });
        }
        self.finish_step();
        Ok(())
    }

    /// Collectives issued in `phase` by groups containing `rank`.
    pub fn events_for_rank(&self, rank: usize, phase: SyncPhase) -> usize {
        self.events
            .iter()
            .filter(|e| e.phase == phase)
            .filter(|e| match e.phase {
                SyncPhase::MicroRs => self.layout.partition_group_index(rank) == e.group,
                SyncPhase::BoundaryAr => self.layout.local_group_rank[rank] == e.group,
                SyncPhase::GlobalAr => true,
            })
            .count()
    }
}

fn groups_of(lists: &[Vec<usize>]) -> Result<Vec<CollectiveGroup>> {
    lists.iter().map(|g| CollectiveGroup::new(g.clone())).collect()
}

fn accumulate<E: Element>(acc: &mut [E], add: &[E]) {
    for (a, b) in acc.iter_mut().zip(add) {
        *a = a.add(*b);
    }
}

/// Brute-force ground truth: sums every rank's gradient over every micro-step
/// and slices the total into the `p` owned shards (zero-padded).
///
/// `grads[step][rank]` is one micro-step gradient. Shard `j` is expected on
/// every rank whose local group rank is `j`.
pub fn oracle_global_sync<E: Element>(grads: &[Vec<Vec<E>>], layout: &GroupLayout) -> Vec<Vec<E>> {
    let len = grads
        .first()
        .and_then(|s| s.first())
        .map_or(0, Vec::len);
    let chunk = len.div_ceil(layout.p);
    let mut total = vec![E::zero(); chunk * layout.p];
    for step in grads {
        for g in step {
            for (t, &x) in total.iter_mut().zip(g) {
                *t = t.add(x);
            }
        }
    }
    total.chunks(chunk.max(1)).take(layout.p).map(<[E]>::to_vec).collect()
}
