//! Oracle-equivalence sweeps over the collectives and sync schedules.

use std::fmt::Write as _;

use mics_core::collectives::{ChunkLayout, CollectiveGroup, Executor, Fabric, ShardBuffer, Stage2};
use mics_core::sync_schedule::{oracle_global_sync, SyncSchedule};
use mics_core::topology::{build_group_layout, ClusterSpec, GroupLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOptions {
    pub max_p: usize,
    pub ks: Vec<usize>,
    pub seeds: u64,
    pub chunk_sizes: Vec<usize>,
    /// World sizes for the synchronization sweep.
    pub sync_ns: Vec<usize>,
    pub micro_steps: Vec<usize>,
    pub threads: usize,
    /// Negative control: skip the stage-2 rearrangement.
    pub corrupt_stage2: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            max_p: 64,
            ks: vec![1, 2, 4, 8],
            seeds: 5,
            chunk_sizes: vec![1, 7, 1024],
            sync_ns: vec![2, 4, 8, 16],
            micro_steps: vec![1, 2, 4],
            threads: 1,
            corrupt_stage2: false,
        }
    }
}

/// Pass count for one line of the matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixRow {
    pub check: &'static str,
    pub scope: String,
    pub cases: usize,
    pub passed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub check: &'static str,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerifyReport {
    pub rows: Vec<MatrixRow>,
    pub first_failure: Option<Failure>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed == r.cases)
    }

    pub fn total_cases(&self) -> usize {
        self.rows.iter().map(|r| r.cases).sum()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = self.rows.iter().map(|r| r.check.len()).max().unwrap_or(5).max(5);
        let ws = self.rows.iter().map(|r| r.scope.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:<w$}  {:<ws$}  {:>6}  {:>6}  result", "check", "scope", "cases", "passed");
        for r in &self.rows {
            let verdict = if r.passed == r.cases { "PASS" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:<w$}  {:<ws$}  {:>6}  {:>6}  {verdict}",
                r.check, r.scope, r.cases, r.passed
            );
        }
        let _ = writeln!(
            out,
            "total: {} cases, {}",
            self.total_cases(),
            if self.passed() { "all passed" } else { "FAILED" }
        );
        if let Some(f) = &self.first_failure {
            let _ = writeln!(
                out,
                "first failure: {} p={} k={} seed={}\n{}",
                f.check, f.p, f.k, f.seed, f.detail
            );
        }
        out
    }
}

/// Partition sizes for the batched-collective check: powers of two plus
/// sizes with an odd factor.
const BATCHED_SIZES: [usize; 12] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64];

fn rng_for(seed: u64, parts: &[usize]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = parts.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &x| {
        (h ^ x as u64).wrapping_mul(0x0100_0000_01b3)
    });
    rng.set_stream(stream);
    rng
}

fn random_shards(rng: &mut ChaCha8Rng, n: usize, chunk: usize) -> Vec<ShardBuffer> {
    (0..n)
        .map(|r| ShardBuffer::new(r, (0..chunk).map(|_| rng.gen()).collect()))
        .collect()
}

fn cluster(num_nodes: usize, k: usize) -> ClusterSpec<f64> {
    ClusterSpec {
        num_nodes,
        devices_per_node: k,
        intra_node_bandwidth: 1.0,
        inter_node_bandwidth_per_node: 1.0,
        alpha_intra: 0.0,
        alpha_inter: 0.0,
        device_memory: u64::MAX,
        device_peak_flops: 1.0,
    }
}

fn partition_groups(layout: &GroupLayout) -> Vec<CollectiveGroup> {
    layout
        .partition_groups
        .iter()
        .map(|g| CollectiveGroup::new(g.clone()).expect("layout groups are valid"))
        .collect()
}

struct Tally {
    rows: Vec<MatrixRow>,
    first_failure: Option<Failure>,
}

impl Tally {
    fn row(&mut self, check: &'static str, scope: String) -> usize {
        self.rows.push(MatrixRow {
            check,
            scope,
            cases: 0,
            passed: 0,
        });
        self.rows.len() - 1
    }

    fn record(&mut self, row: usize, outcome: Result<(), String>, p: usize, k: usize, seed: u64) {
        let r = &mut self.rows[row];
        r.cases += 1;
        match outcome {
            Ok(()) => r.passed += 1,
            Err(detail) => {
                if self.first_failure.is_none() {
                    self.first_failure = Some(Failure {
                        check: r.check,
                        p,
                        k,
                        seed,
                        detail,
                    });
                }
            }
        }
    }
}

fn layout_diff(expected: &ChunkLayout, got: &ChunkLayout) -> String {
    let show = |l: &ChunkLayout| {
        l.0.iter()
            .map(|&c| if c == ChunkLayout::UNKNOWN { "?".to_string() } else { format!("C{c}") })
            .collect::<Vec<_>>()
            .join(",")
    };
    format!("  expected layout [{}]\n  actual layout   [{}]", show(expected), show(got))
}

fn check_hierarchical(
    fabric: &Fabric,
    p: usize,
    k: usize,
    chunk: usize,
    rng: &mut ChaCha8Rng,
    stage2: Stage2,
) -> Result<(), String> {
    let n = 2 * p;
    let layout = build_group_layout(n, p).map_err(|e| e.to_string())?;
    let cl = cluster(n / k, k);
    let shards = random_shards(rng, n, chunk);
    let hier = fabric
        .hierarchical_all_gather_traced(&layout, &cl, &shards, stage2)
        .map_err(|e| e.to_string())?
        .outputs;
    for group in &layout.partition_groups {
        let mut expected = Vec::with_capacity(p * chunk);
        for &r in group {
            expected.extend_from_slice(&shards[r].payload);
        }
        for &r in group {
            if hier[r].payload != expected {
                let chunks: Vec<Vec<u8>> = group.iter().map(|&q| shards[q].payload.clone()).collect();
                let got = ChunkLayout::infer(&hier[r].payload, &chunks);
                return Err(format!(
                    "  rank {r} (chunk {chunk} B):\n{}",
                    layout_diff(&ChunkLayout::identity(p), &got)
                ));
            }
        }
    }
    Ok(())
}

fn check_batched(fabric: &Fabric, p: usize, chunk: usize, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = 2 * p;
    let layout = build_group_layout(n, p).map_err(|e| e.to_string())?;
    let groups = partition_groups(&layout);
    let shards = random_shards(rng, n, chunk);
    let sets: Vec<Vec<ShardBuffer>> = groups
        .iter()
        .map(|g| g.ranks().iter().map(|&r| shards[r].clone()).collect())
        .collect();
    let batched = fabric.batched_all_gather(&groups, &sets).map_err(|e| e.to_string())?;
    for (i, g) in groups.iter().enumerate() {
        if fabric.all_gather(g, &sets[i]).map_err(|e| e.to_string())? != batched[i] {
            return Err(format!("  batched all-gather group {i} differs from the single call"));
        }
    }
    // Same payload size as the gather: `chunk` bytes per chunk.
    let elems = chunk.div_ceil(8).max(1) * p;
    let buffers: Vec<Vec<Vec<i64>>> = groups
        .iter()
        .map(|g| g.ranks().iter().map(|_| (0..elems).map(|_| rng.gen()).collect()).collect())
        .collect();
    let batched = fabric
        .batched_reduce_scatter(&groups, &buffers)
        .map_err(|e| e.to_string())?;
    for (i, g) in groups.iter().enumerate() {
        if fabric.reduce_scatter(g, &buffers[i]).map_err(|e| e.to_string())? != batched[i] {
            return Err(format!("  batched reduce-scatter group {i} differs from the single call"));
        }
    }
    Ok(())
}

fn run_schedules<E: mics_core::collectives::Element>(
    fabric: &Fabric,
    layout: &GroupLayout,
    grads: &[Vec<Vec<E>>],
) -> Result<(Vec<Vec<E>>, Vec<Vec<E>>), String> {
    let len = grads[0][0].len();
    let s = grads.len();
    let mut two_hop = SyncSchedule::new(fabric, layout.clone(), len, s).map_err(|e| e.to_string())?;
    let mut alt = SyncSchedule::new(fabric, layout.clone(), len, s).map_err(|e| e.to_string())?;
    for step in grads {
        two_hop.two_hop_micro_step(step).map_err(|e| e.to_string())?;
        alt.alternative_step(step).map_err(|e| e.to_string())?;
    }
    two_hop.two_hop_boundary().map_err(|e| e.to_string())?;
    alt.alternative_boundary().map_err(|e| e.to_string())?;
    let take = |sched: &SyncSchedule<E>| sched.states().iter().map(|s| s.accumulated_shard.clone()).collect();
    Ok((take(&two_hop), take(&alt)))
}

fn check_sync_exact(fabric: &Fabric, n: usize, p: usize, s: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let layout = build_group_layout(n, p).map_err(|e| e.to_string())?;
    let grads: Vec<Vec<Vec<i64>>> = (0..s)
        .map(|_| (0..n).map(|_| (0..len).map(|_| rng.gen_range(-1_000_000..1_000_000)).collect()).collect())
        .collect();
    let oracle = oracle_global_sync(&grads, &layout);
    let (two_hop, alt) = run_schedules(fabric, &layout, &grads)?;
    for r in 0..n {
        let want = &oracle[layout.local_group_rank[r]];
        if &two_hop[r] != want {
            return Err(format!("  n={n} s={s}: 2-hop shard on rank {r} differs from the oracle"));
        }
        if &alt[r] != want {
            return Err(format!("  n={n} s={s}: alternative shard on rank {r} differs from the oracle"));
        }
    }
    Ok(())
}

fn check_sync_float(fabric: &Fabric, n: usize, p: usize, s: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let layout = build_group_layout(n, p).map_err(|e| e.to_string())?;
    let grads: Vec<Vec<Vec<f64>>> = (0..s)
        .map(|_| (0..n).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
        .collect();
    let oracle = oracle_global_sync(&grads, &layout);
    let (two_hop, alt) = run_schedules(fabric, &layout, &grads)?;
    // Terms are O(1); the floor keeps near-zero sums from amplifying rounding.
    for r in 0..n {
        let want = &oracle[layout.local_group_rank[r]];
        for got in [&two_hop[r], &alt[r]] {
            for (a, b) in got.iter().zip(want) {
                if (a - b).abs() > 1e-5 * b.abs().max(1.0) {
                    return Err(format!("  n={n} s={s}: float shard on rank {r}: {a} vs {b}"));
                }
            }
        }
    }
    Ok(())
}

pub fn run(opts: &VerifyOptions) -> Result<VerifyReport, String> {
    let executor = Executor::with_threads(opts.threads).map_err(|e| e.to_string())?;
    let fabric = Fabric::new(executor);
    let mut tally = Tally {
        rows: Vec::new(),
        first_failure: None,
    };
    let stage2 = if opts.corrupt_stage2 { Stage2::Skip } else { Stage2::Rearrange };

    for &k in &opts.ks {
        if k == 0 {
            return Err("k must be at least 1".into());
        }
        let row = tally.row("hierarchical_all_gather", format!("k={k}"));
        for p in (k..=opts.max_p).step_by(k) {
            for seed in 0..opts.seeds {
                for &chunk in &opts.chunk_sizes {
                    let mut rng = rng_for(seed, &[1, p, k, chunk]);
                    let outcome = check_hierarchical(&fabric, p, k, chunk, &mut rng, stage2);
                    tally.record(row, outcome, p, k, seed);
                }
            }
        }
    }

    let row = tally.row("batched_vs_sequential", format!("p<={}", opts.max_p));
    for p in BATCHED_SIZES.into_iter().filter(|&p| p <= opts.max_p) {
        for seed in 0..opts.seeds {
            for &chunk in &opts.chunk_sizes {
                let mut rng = rng_for(seed, &[2, p, chunk]);
                let outcome = check_batched(&fabric, p, chunk, &mut rng);
                tally.record(row, outcome, p, 0, seed);
            }
        }
    }

    for (check, float) in [("two_hop_and_alternative_vs_oracle_i64", false), ("two_hop_and_alternative_vs_oracle_f64", true)] {
        for &n in &opts.sync_ns {
            let row = tally.row(check, format!("n={n}"));
            for p in (1..=n).filter(|p| n % p == 0) {
                for &s in &opts.micro_steps {
                    for seed in 0..opts.seeds {
                        for &len in &opts.chunk_sizes {
                            let len = len.max(1);
                            let mut rng = rng_for(seed, &[3 + float as usize, n, p, s, len]);
                            let outcome = if float {
                                check_sync_float(&fabric, n, p, s, len, &mut rng)
                            } else {
                                check_sync_exact(&fabric, n, p, s, len, &mut rng)
                            };
                            tally.record(row, outcome, p, 0, seed);
                        }
                    }
                }
            }
        }
    }

    Ok(VerifyReport {
        rows: tally.rows,
        first_failure: tally.first_failure,
    })
}
