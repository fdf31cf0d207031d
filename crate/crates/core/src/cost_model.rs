//! Closed-form cost, traffic, latency, memory and FLOP models.
//!
//! Bandwidth-only formulas are generic over [`Scalar`] so byte volumes can be
//! evaluated exactly (e.g. in `Ratio<i128>`) as well as in floating point.
//! Latency is kept separate in [`collective_latency`] and added by callers
//! that want it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{from_count, Real, Scalar};

fn positive<T: Scalar>(what: &str, v: T) -> Result<()> {
    if v > T::zero() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be positive, got {v:?}")))
    }
}

fn at_least_one(what: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be at least 1")))
    }
}

/// `(x - 1) / x` for a participant count.
fn gather_fraction<T: Scalar>(x: usize) -> T {
    from_count::<T>(x as u64 - 1) / from_count(x as u64)
}

/// Partition-to-all gather time `(n-1) M / (n B_all)`.
pub fn allgather_cost_flat<T: Scalar>(n: usize, model_bytes: T, b_all: T) -> Result<T> {
    at_least_one("n", n)?;
    positive("M", model_bytes)?;
    positive("B_all", b_all)?;
    Ok(gather_fraction::<T>(n) * model_bytes / b_all)
}

/// Partition-group gather time `(p-1) M / (p B_part)`.
pub fn allgather_cost_mics<T: Scalar>(p: usize, model_bytes: T, b_part: T) -> Result<T> {
    at_least_one("p", p)?;
    positive("M", model_bytes)?;
    positive("B_part", b_part)?;
    Ok(gather_fraction::<T>(p) * model_bytes / b_part)
}

/// Bytes crossing inter-node links when gathering `M` bytes over `p` ranks
/// with `k` ranks per node: `(p-1) M / p` for a single channel,
/// `(p-k) M / p` for the hierarchical algorithm (zero when `p <= k`).
pub fn inter_node_traffic<T: Scalar>(p: usize, k: usize, model_bytes: T, hierarchical: bool) -> Result<T> {
    at_least_one("p", p)?;
    at_least_one("k", k)?;
    if !(model_bytes >= T::zero()) {
        return Err(Error::Domain("M must be non-negative".into()));
    }
    if p > k && p % k != 0 {
        return Err(Error::Shape(format!("{k} does not divide partition size {p}")));
    }
    if !hierarchical {
        return Ok(gather_fraction::<T>(p) * model_bytes);
    }
    if p <= k {
        return Ok(T::zero());
    }
    Ok(from_count::<T>((p - k) as u64) * model_bytes / from_count(p as u64))
}

/// Inter-node volume reduction factor `(p-1) / (p-k)`; `+inf` when `p == k`.
pub fn traffic_reduction_ratio<T: Real>(p: usize, k: usize) -> Result<T> {
    at_least_one("k", k)?;
    if p < k {
        return Err(Error::Domain(format!("p = {p} must be at least k = {k}")));
    }
    if p == k {
        return Ok(T::infinity());
    }
    Ok(from_count::<T>(p as u64 - 1) / from_count((p - k) as u64))
}

/// Fraction of vanilla inter-node volume removed by the hierarchical gather,
/// `1 - (p-k)/(p-1)`.
pub fn traffic_reduction_fraction<T: Scalar>(p: usize, k: usize) -> Result<T> {
    at_least_one("k", k)?;
    if p < k || p < 2 {
        return Err(Error::Domain(format!("need p >= max(k, 2), got p = {p}, k = {k}")));
    }
    Ok(T::one() - from_count::<T>((p - k) as u64) / from_count(p as u64 - 1))
}

/// 2-hop synchronization time
/// `s M (p-1) / (p B_part) + 2 M (n-p) / (n B_repl)`.
pub fn two_hop_cost<T: Scalar>(s: usize, model_bytes: T, n: usize, p: usize, b_part: T, b_repl: T) -> Result<T> {
    at_least_one("s", s)?;
    at_least_one("p", p)?;
    if p > n {
        return Err(Error::Domain(format!("p = {p} exceeds n = {n}")));
    }
    positive("M", model_bytes)?;
    positive("B_part", b_part)?;
    positive("B_repl", b_repl)?;
    let micro = from_count::<T>(s as u64) * model_bytes * gather_fraction::<T>(p) / b_part;
    let two = from_count::<T>(2);
    let boundary =
        two * model_bytes * from_count::<T>((n - p) as u64) / (from_count::<T>(n as u64) * b_repl);
    Ok(micro + boundary)
}

/// Global-all-reduce synchronization time `2 s M (n-1) / (n B_all)`.
pub fn alt_sync_cost<T: Scalar>(s: usize, model_bytes: T, n: usize, b_all: T) -> Result<T> {
    at_least_one("s", s)?;
    at_least_one("n", n)?;
    positive("M", model_bytes)?;
    positive("B_all", b_all)?;
    Ok(from_count::<T>(2 * s as u64) * model_bytes * gather_fraction::<T>(n) / b_all)
}

/// Lower bound on `alt_sync_cost / two_hop_cost`:
/// `(2 s / B_all) / (s / B_part + 2 / B_repl)`.
pub fn two_hop_ratio_bound<T: Scalar>(s: usize, b_all: T, b_part: T, b_repl: T) -> Result<T> {
    at_least_one("s", s)?;
    positive("B_all", b_all)?;
    positive("B_part", b_part)?;
    positive("B_repl", b_repl)?;
    let s: T = from_count(s as u64);
    let two: T = from_count(2);
    Ok((two * s / b_all) / (s / b_part + two / b_repl))
}

/// Per-device bytes moved by partition-to-all sharding in one iteration
/// (forward gather, backward gather, gradient reduce-scatter): `3 (n-1) M / n`.
pub fn zero3_iteration_volume<T: Scalar>(n: usize, model_bytes: T) -> Result<T> {
    at_least_one("n", n)?;
    Ok(from_count::<T>(3) * gather_fraction::<T>(n) * model_bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyAlgorithm {
    Tree,
    Ring,
}

/// Startup-latency term: `ceil(log2 p) * alpha` (tree) or `2 p alpha` (ring).
pub fn collective_latency<T: Scalar>(p: usize, alpha: T, algorithm: LatencyAlgorithm) -> Result<T> {
    at_least_one("p", p)?;
    if !(alpha >= T::zero()) {
        return Err(Error::Domain("alpha must be non-negative".into()));
    }
    let steps = match algorithm {
        LatencyAlgorithm::Tree => (usize::BITS - (p - 1).leading_zeros()) as u64,
        LatencyAlgorithm::Ring => 2 * p as u64,
    };
    Ok(from_count::<T>(steps) * alpha)
}

/// Transformer training FLOPs per second achieved at `throughput` sequences/s:
/// `96 T l L h^2 (1 + l / (6h) + V / (16 L h))`.
pub fn tflops_estimate<T: Scalar>(
    throughput: T,
    seq_len: usize,
    layers: usize,
    hidden: usize,
    vocab: usize,
) -> Result<T> {
    positive("T", throughput)?;
    at_least_one("l", seq_len)?;
    at_least_one("L", layers)?;
    at_least_one("h", hidden)?;
    let l: T = from_count(seq_len as u64);
    let big_l: T = from_count(layers as u64);
    let h: T = from_count(hidden as u64);
    let v: T = from_count(vocab as u64);
    let c = |x: u64| from_count::<T>(x);
    let correction = T::one() + l / (c(6) * h) + v / (c(16) * big_l * h);
    Ok(c(96) * throughput * l * big_l * h * h * correction)
}

/// Measured bandwidth of a collective at a given message size and scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSample<T> {
    pub message_bytes: u64,
    /// Number of participating ranks.
    pub group_scale: usize,
    /// Bytes/s.
    pub bandwidth: T,
}

/// Effective (collective-level) bandwidths.
///
/// `b_all`, `b_part` and `b_repl` are the scalar values used by the analytic
/// formulas. The optional table refines them by message size and group scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthProfile<T> {
    pub b_all: T,
    pub b_part: T,
    pub b_repl: T,
    #[serde(default = "Vec::new")]
    pub table: Vec<BandwidthSample<T>>,
}

impl<T: Real> BandwidthProfile<T> {
    pub fn uniform(b: T) -> Self {
        BandwidthProfile {
            b_all: b,
            b_part: b,
            b_repl: b,
            table: Vec::new(),
        }
    }

    /// Two points: 128 GB/s for a node-local group of 8 and 11 GB/s for
    /// large messages across 64 ranks. These are the only measured values the
    /// defaults rely on.
    pub fn default_measured() -> Self {
        let gbs = |x: f64| crate::scalar::from_f64::<T>(x * 1e9);
        BandwidthProfile {
            b_all: gbs(11.0),
            b_part: gbs(128.0),
            b_repl: gbs(11.0),
            table: vec![
                BandwidthSample {
                    message_bytes: 1,
                    group_scale: 8,
                    bandwidth: gbs(128.0),
                },
                BandwidthSample {
                    message_bytes: 1 << 30,
                    group_scale: 64,
                    bandwidth: gbs(11.0),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("B_all", self.b_all)?;
        positive("B_part", self.b_part)?;
        positive("B_repl", self.b_repl)?;
        for s in &self.table {
            positive("table bandwidth", s.bandwidth)?;
            if s.message_bytes == 0 || s.group_scale == 0 {
                return Err(Error::Domain(
                    "table entries need positive message size and scale".into(),
                ));
            }
        }
        for scale in self.scales() {
            let row = self.row(scale);
            if row.windows(2).any(|w| w[0].message_bytes == w[1].message_bytes) {
                return Err(Error::Domain(format!(
                    "duplicate message size at scale {scale}"
                )));
            }
            if row.windows(2).any(|w| w[1].bandwidth < w[0].bandwidth) {
                return Err(Error::Domain(format!(
                    "bandwidth decreases with message size at scale {scale}"
                )));
            }
        }
        Ok(())
    }

    fn scales(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.table.iter().map(|e| e.group_scale).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn row(&self, scale: usize) -> Vec<BandwidthSample<T>> {
        let mut row: Vec<_> = self
            .table
            .iter()
            .filter(|e| e.group_scale == scale)
            .copied()
            .collect();
        row.sort_by_key(|e| e.message_bytes);
        row
    }
}

/// Table lookup. The row used is the smallest tabulated scale that is at
/// least `group_scale` (the largest row beyond the table). Within a row the
/// bandwidth is interpolated linearly in `ln(message_bytes)` and clamped at
/// the row's ends.
pub fn effective_bandwidth<T: Real>(message_bytes: u64, group_scale: usize, profile: &BandwidthProfile<T>) -> Result<T> {
    let scales = profile.scales();
    let scale = match scales.iter().find(|&&s| s >= group_scale) {
        Some(&s) => s,
        None => *scales.last().ok_or(Error::EmptyProfile)?,
    };
    let row = profile.row(scale);
    let m = message_bytes.max(1);
    let first = row[0];
    let last = row[row.len() - 1];
    if m <= first.message_bytes {
        return Ok(first.bandwidth);
    }
    if m >= last.message_bytes {
        return Ok(last.bandwidth);
    }
    let hi = row.iter().position(|e| e.message_bytes >= m).unwrap();
    let (a, b) = (row[hi - 1], row[hi]);
    let ln = |x: u64| from_count::<T>(x).ln();
    let t = (ln(m) - ln(a.message_bytes)) / (ln(b.message_bytes) - ln(a.message_bytes));
    Ok(a.bandwidth + (b.bandwidth - a.bandwidth) * t)
}

/// One named result, tagged with the formula that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub key: String,
    pub value: f64,
    pub unit: String,
    pub formula: String,
}

/// Flat collection of named scalar results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn push(&mut self, formula: &str, key: &str, value: f64, unit: &str) {
        self.entries.push(CostEntry {
            key: key.to_string(),
            value,
            unit: unit.to_string(),
            formula: formula.to_string(),
        });
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.key == key).map(|e| e.value)
    }

    /// `key = value unit [formula]`, one entry per line. Values use Rust's
    /// shortest round-trip float formatting.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} = {:?} {} [{}]\n", e.key, e.value, e.unit, e.formula));
        }
        out
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut report = CostReport::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Domain(format!("line {}: malformed entry {line:?}", i + 1));
            let (key, rest) = line.split_once(" = ").ok_or_else(bad)?;
            let (body, formula) = rest.rsplit_once(" [").ok_or_else(bad)?;
            let formula = formula.strip_suffix(']').ok_or_else(bad)?;
            let (value, unit) = body.split_once(' ').ok_or_else(bad)?;
            let value: f64 = value.parse().map_err(|_| bad())?;
            report.push(formula, key, value, unit);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_rational::Ratio;

    const GB: f64 = 1e9;
    type Q = Ratio<i128>;

    fn q(x: i128) -> Q {
        Q::from_integer(x)
    }

    #[test]
    fn flat_gather_cost() {
        assert_eq!(allgather_cost_flat(1, GB, 11.0 * GB).unwrap(), 0.0);
        assert_relative_eq!(
            allgather_cost_flat(64, GB, 11.0 * GB).unwrap(),
            (63.0 / 64.0) / 11.0,
            max_relative = 1e-12
        );
        assert!((allgather_cost_flat(64, GB, 11.0 * GB).unwrap() - 0.0895).abs() < 5e-5);
        assert!(allgather_cost_flat(0, GB, GB).is_err());
        assert!(allgather_cost_flat(4, -1.0, GB).is_err());
    }

    #[test]
    fn partition_group_gather_cost() {
        assert_eq!(allgather_cost_mics(1, GB, GB).unwrap(), 0.0);
        let c = allgather_cost_mics(8, q(160), q(128)).unwrap();
        assert_eq!(c, Q::new(7, 8) * q(160) / q(128));
        assert_eq!(c, Q::new(109375, 100000));
    }

    #[test]
    fn full_partition_ratio_is_bandwidth_ratio() {
        let flat = allgather_cost_flat(64, GB, 11.0 * GB).unwrap();
        let mics = allgather_cost_mics(64, GB, 128.0 * GB).unwrap();
        assert_relative_eq!(flat / mics, 128.0 / 11.0, max_relative = 1e-12);
        assert!((flat / mics - 11.6).abs() < 0.1);
    }

    #[test]
    fn gather_ratio_bound_on_a_grid() {
        let scales: Vec<usize> = (1..=9).map(|e| 1 << e).collect();
        for &n in &scales {
            for &p in scales.iter().filter(|&&p| p <= n) {
                let flat = allgather_cost_flat(n, q(1 << 30), q(11)).unwrap();
                let mics = allgather_cost_mics(p, q(1 << 30), q(128)).unwrap();
                assert!(flat / mics >= Q::new(128, 11), "n={n} p={p}");
            }
        }
    }

    #[test]
    fn inter_node_volumes() {
        let v = inter_node_traffic(64, 8, q(1), false).unwrap();
        let h = inter_node_traffic(64, 8, q(1), true).unwrap();
        assert_eq!((v, h), (Q::new(63, 64), Q::new(56, 64)));
        assert_eq!(q(1) - h / v, Q::new(7, 63));
        assert_eq!(inter_node_traffic(8, 8, q(1), true).unwrap(), q(0));
        assert_eq!(inter_node_traffic(4, 8, q(1), true).unwrap(), q(0));
        assert_eq!(inter_node_traffic(4, 8, q(1), false).unwrap(), Q::new(3, 4));
        assert!(matches!(inter_node_traffic(12, 8, q(1), true), Err(Error::Shape(_))));

        let pct = |p| 100.0 * traffic_reduction_fraction::<f64>(p, 8).unwrap();
        assert!((pct(64) - 11.1).abs() < 0.2);
        assert!((pct(16) - 46.6).abs() < 0.2);
    }

    #[test]
    fn reduction_ratio() {
        assert_eq!(traffic_reduction_ratio::<f64>(16, 8).unwrap(), 1.875);
        assert_eq!(traffic_reduction_ratio::<f64>(9, 8).unwrap(), 8.0);
        assert!(traffic_reduction_ratio::<f64>(8, 8).unwrap().is_infinite());
        assert!(traffic_reduction_ratio::<f64>(4, 8).is_err());
        let mut prev = f64::INFINITY;
        for p in (16..=512).step_by(8) {
            let r = traffic_reduction_ratio::<f64>(p, 8).unwrap();
            assert!(r < prev && r > 1.0);
            prev = r;
        }
        assert!(prev - 1.0 < 0.02);
    }

    #[test]
    fn two_hop_and_alternative_costs() {
        assert_eq!(
            two_hop_cost(3, q(10), 8, 8, q(2), q(1)).unwrap(),
            q(3) * q(10) * Q::new(7, 8) / q(2)
        );
        let two_hop = two_hop_cost(4, q(1), 64, 8, q(10), q(10)).unwrap();
        assert_eq!(two_hop, Q::new(525, 1000));
        let alt = alt_sync_cost(4, q(1), 64, q(10)).unwrap();
        assert_eq!(alt, Q::new(7875, 10000));
        assert_eq!(alt / two_hop, Q::new(3, 2));
        assert_eq!(alt_sync_cost(4, q(1), 1, q(10)).unwrap(), q(0));
        assert!(two_hop_cost(1, q(1), 4, 8, q(1), q(1)).is_err());
    }

    #[test]
    fn ratio_bounds() {
        assert_eq!(two_hop_ratio_bound(4, q(7), q(7), q(7)).unwrap(), Q::new(4, 3));
        assert_eq!(two_hop_ratio_bound(1, q(7), q(7), q(7)).unwrap(), Q::new(2, 3));
        assert_eq!(
            two_hop_ratio_bound(1, q(2), q(3), q(3)).unwrap(),
            q(1)
        );
        assert!(two_hop_ratio_bound(1, 1.0, 1.6, 1.6).unwrap() > 1.0);
    }

    #[test]
    fn sampled_costs_respect_the_bound() {
        let profiles = [(1.0, 1.0, 1.0), (11.0, 128.0, 12.5), (50.0, 60.0, 20.0)];
        for s in [1usize, 2, 4, 8] {
            for n in [8usize, 16, 32, 64, 128] {
                for p in (1..=n).filter(|p| n % p == 0) {
                    for &(a, pt, r) in &profiles {
                        let (a, pt, r) = (q(a as i128 * 10), q((pt * 10.0) as i128), q((r * 10.0) as i128));
                        let ratio = alt_sync_cost(s, q(1), n, a).unwrap()
                            / two_hop_cost(s, q(1), n, p, pt, r).unwrap();
                        assert!(ratio >= two_hop_ratio_bound(s, a, pt, r).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn zero3_volumes() {
        assert_eq!(zero3_iteration_volume(1, q(5)).unwrap(), q(0));
        assert_eq!(zero3_iteration_volume(4, q(1 << 30)).unwrap(), Q::new(9, 4) * q(1 << 30));
        let big: f64 = zero3_iteration_volume(1 << 20, 1.0).unwrap();
        assert!((big - 3.0).abs() < 1e-5);
    }

    #[test]
    fn latencies() {
        use LatencyAlgorithm::*;
        assert_eq!(collective_latency(1, 1e-5, Tree).unwrap(), 0.0);
        assert_eq!(collective_latency(8, q(10), Tree).unwrap(), q(30));
        assert_eq!(collective_latency(8, q(10), Ring).unwrap(), q(160));
        assert_eq!(collective_latency(9, q(1), Tree).unwrap(), q(4));
        let mut prev = q(0);
        for p in 1..300 {
            let t = collective_latency(p, q(1), Tree).unwrap();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn tflops_formula() {
        let f: f64 = tflops_estimate(1.0, 512, 127, 2560, 32008).unwrap();
        assert!((f / 4.25e13 - 1.0).abs() < 2e-3, "{f}");
        let f2 = tflops_estimate(2.0, 512, 127, 2560, 32008).unwrap();
        assert_eq!(f2, 2.0 * f);
        let no_vocab = tflops_estimate(q(1), 512, 10, 64, 0).unwrap();
        assert_eq!(no_vocab, q(96 * 512 * 10 * 64 * 64) * (q(1) + Q::new(512, 6 * 64)));
    }

    #[test]
    fn bandwidth_table_lookup() {
        let one = BandwidthProfile {
            table: vec![BandwidthSample {
                message_bytes: 1000,
                group_scale: 16,
                bandwidth: 5.0,
            }],
            ..BandwidthProfile::uniform(1.0)
        };
        for (m, s) in [(1, 1), (1 << 40, 1024), (1000, 16)] {
            assert_eq!(effective_bandwidth(m, s, &one).unwrap(), 5.0);
        }
        let two = BandwidthProfile {
            table: vec![
                BandwidthSample { message_bytes: 1 << 10, group_scale: 64, bandwidth: 1.0 },
                BandwidthSample { message_bytes: 1 << 30, group_scale: 64, bandwidth: 11.0 },
            ],
            ..BandwidthProfile::uniform(1.0)
        };
        let mid = effective_bandwidth(1 << 20, 64, &two).unwrap();
        assert!(mid > 1.0 && mid < 11.0);
        assert_relative_eq!(mid, 6.0, max_relative = 1e-12);
        let mut prev = 0.0;
        for e in 0..40 {
            let b = effective_bandwidth(1u64 << e, 64, &two).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        assert_eq!(
            effective_bandwidth(1, 1, &BandwidthProfile::uniform(1.0)),
            Err(Error::EmptyProfile)
        );
    }

    #[test]
    fn default_profile_points() {
        let p = BandwidthProfile::<f64>::default_measured();
        p.validate().unwrap();
        for m in [1u64, 1 << 20, 1 << 34] {
            assert_eq!(effective_bandwidth(m, 8, &p).unwrap(), 128.0 * GB);
            assert_eq!(effective_bandwidth(m, 2, &p).unwrap(), 128.0 * GB);
        }
        assert_eq!(effective_bandwidth(1 << 30, 64, &p).unwrap(), 11.0 * GB);
        assert_eq!(effective_bandwidth(1 << 30, 512, &p).unwrap(), 11.0 * GB);
    }

    #[test]
    fn profile_validation() {
        let mut p = BandwidthProfile::<f64>::default_measured();
        p.table.push(BandwidthSample { message_bytes: 2, group_scale: 8, bandwidth: 1.0 });
        assert!(p.validate().is_err());
        assert!(BandwidthProfile::uniform(0.0).validate().is_err());
    }

    #[test]
    fn report_text_round_trip() {
        let mut r = CostReport::default();
        r.push("allgather_flat", "seconds", 0.1 + 0.2, "s");
        r.push("traffic_reduction", "reduction_pct", 100.0 / 9.0, "%");
        let back = CostReport::from_kv_text(&r.to_kv_text()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get("seconds").unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
        assert!(CostReport::from_kv_text("nonsense").is_err());
    }
}
