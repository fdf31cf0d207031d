use super::*;
use crate::cost_model::{inter_node_traffic, tflops_estimate, zero3_iteration_volume};
use proptest::prelude::{any, prop, prop_assert, proptest, Just, ProptestConfig};
use proptest::strategy::Strategy as Gen;

const GB: u64 = 1_000_000_000;

fn cluster(num_nodes: usize, k: usize) -> ClusterSpec<f64> {
    ClusterSpec {
        num_nodes,
        devices_per_node: k,
        intra_node_bandwidth: 128e9,
        inter_node_bandwidth_per_node: 12.5e9,
        alpha_intra: 5e-6,
        alpha_inter: 30e-6,
        device_memory: 32 * GB,
        device_peak_flops: 125e12,
    }
}

fn uniform_layers(count: usize, bytes: u64) -> Vec<LayerSpec<f64>> {
    (0..count)
        .map(|_| LayerSpec {
            num_params: bytes / 2,
            param_bytes: bytes,
            fwd_flops: 1e12,
            bwd_flops: 2e12,
        })
        .collect()
}

fn measured() -> SimOptions<f64> {
    SimOptions::new(BandwidthProfile::default_measured())
}

fn bert10b() -> Vec<LayerSpec<f64>> {
    derive_layers_from_transformer(TransformerDims::preset("bert-10b").unwrap(), 2, 8).unwrap()
}

fn no_overlap(mut cfg: StrategyConfig) -> StrategyConfig {
    cfg.prefetch_depth = 0;
    cfg
}

#[test]
fn single_device_is_pure_compute() {
    let c = cluster(1, 1);
    let layer = LayerSpec {
        num_params: 1000,
        param_bytes: 2000,
        fwd_flops: 5e12,
        bwd_flops: 1e13,
    };
    let t = simulate_iteration(&c, &[layer], &StrategyConfig::zero3("z", 1), &measured()).unwrap();
    let expected = 5e12 / (125e12 * 0.5) + 1e13 / (125e12 * 0.5);
    assert!((t.total_seconds - expected).abs() < 1e-15);
    assert_eq!(t.phases.communication(), 0.0);
    assert_eq!(t.gather_bytes + t.reduce_scatter_bytes + t.inter_node_bytes + t.intra_node_bytes, 0);
}

#[test]
fn repeated_runs_are_identical() {
    let c = cluster(8, 8);
    let layers = bert10b();
    let cfg = StrategyConfig::mics("m", 8, 2);
    let a = simulate_iteration(&c, &layers, &cfg, &measured()).unwrap();
    let b = simulate_iteration(&c, &layers, &cfg, &measured()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mics_beats_zero3_on_bert10b_at_64_ranks() {
    let c = cluster(8, 8);
    let layers = bert10b();
    let z = simulate_iteration(&c, &layers, &StrategyConfig::zero3("zero3", 1), &measured()).unwrap();
    let m = simulate_iteration(&c, &layers, &StrategyConfig::mics("mics", 8, 1), &measured()).unwrap();
    assert!(m.total_seconds < z.total_seconds);
    assert!(z.phases.gather() / m.phases.gather() >= 2.0);
}

#[test]
fn comparing_a_config_with_itself_gives_unit_ratios() {
    let c = cluster(2, 8);
    let cfg = StrategyConfig::mics("a", 8, 2);
    let mut other = cfg.clone();
    other.name = "b".into();
    let cmp = compare_strategies(&c, &uniform_layers(4, 1 << 20), &[cfg, other], &measured(), &Executor::sequential())
        .unwrap();
    let ratios: Vec<_> = cmp.report.entries.iter().filter(|e| e.unit == "ratio").collect();
    assert_eq!(ratios.len(), 10);
    assert!(ratios.iter().all(|e| e.value == 1.0));
}

#[test]
fn comparison_requires_two_configs() {
    let c = cluster(1, 8);
    let err = compare_strategies(
        &c,
        &uniform_layers(1, 64),
        &[StrategyConfig::mics("a", 8, 1)],
        &measured(),
        &Executor::sequential(),
    );
    assert!(err.is_err());
}

#[test]
fn two_hop_sync_is_at_least_four_thirds_faster_at_s4() {
    let c = cluster(8, 8);
    let mut opts = SimOptions::new(BandwidthProfile::uniform(12.5e9));
    opts.include_latency = false;
    let on = StrategyConfig::mics("on", 8, 4);
    let off = StrategyConfig {
        name: "off".into(),
        two_hop: false,
        ..on.clone()
    };
    let cmp = compare_strategies(&c, &uniform_layers(8, 64 << 20), &[off, on], &opts, &Executor::sequential()).unwrap();
    let r = cmp.report.get("on.sync_ratio").unwrap();
    assert!(r >= 4.0 / 3.0, "sync ratio {r}");
}

#[test]
fn hierarchical_gather_cuts_inter_node_bytes_by_63_over_56() {
    let c = cluster(8, 8);
    let layers = uniform_layers(3, 64 * 1024);
    let on = StrategyConfig::mics("on", 64, 1);
    let off = StrategyConfig {
        name: "off".into(),
        hierarchical_gather: false,
        ..on.clone()
    };
    let t_on = simulate_iteration(&c, &layers, &on, &measured()).unwrap();
    let t_off = simulate_iteration(&c, &layers, &off, &measured()).unwrap();
    assert!(t_on.inter_node_bytes > 0);
    assert_eq!(t_off.inter_node_bytes * 56, t_on.inter_node_bytes * 63);
    assert_eq!(t_on.gather_bytes, t_off.gather_bytes);
}

#[test]
fn simulated_inter_node_gather_bytes_match_the_traffic_formula() {
    for (nodes, p) in [(2, 16), (8, 64), (4, 32), (2, 8), (4, 4)] {
        let c = cluster(nodes, 8);
        let layers = uniform_layers(5, 64 * 1024);
        let m: u64 = layers.iter().map(|l| l.param_bytes).sum();
        for hier in [true, false] {
            let mut cfg = StrategyConfig::mics("m", p, 1);
            cfg.hierarchical_gather = hier;
            let t = simulate_iteration(&c, &layers, &cfg, &measured()).unwrap();
            // Two gathers per layer per micro-step; node 0 hosts the links.
            // A node-local partition group never leaves the node.
            let per_gather = if p <= 8 { 0.0 } else { inter_node_traffic(p, 8, m as f64, hier).unwrap() };
            if p <= 8 {
                assert_eq!(inter_node_traffic(p, 8, m as f64, true).unwrap(), 0.0);
            }
            let groups_on_node0 = (8 / p).max(1) as f64;
            assert_eq!(t.inter_node_bytes as f64, 2.0 * per_gather * groups_on_node0, "p={p} hier={hier}");
        }
    }
}

#[test]
fn zero3_gather_and_scatter_bytes_match_the_iteration_volume() {
    for n in [4usize, 8, 64] {
        let c = cluster(n.div_ceil(8), n.min(8));
        let layers = uniform_layers(6, 64 * 1024 * 3);
        let m: u64 = layers.iter().map(|l| l.param_bytes).sum();
        let t = simulate_iteration(&c, &layers, &StrategyConfig::zero3("z", 1), &measured()).unwrap();
        let expected = 3 * (n as u64 - 1) * m / n as u64;
        assert_eq!(t.gather_bytes + t.reduce_scatter_bytes, expected);
        assert_eq!(zero3_iteration_volume(n, m as f64).unwrap(), expected as f64);
    }
}

#[test]
fn bert_rows_have_their_named_sizes() {
    for (name, target) in [
        ("bert-10b", 10e9),
        ("bert-15b", 15e9),
        ("bert-20b", 20e9),
        ("bert-50b", 50e9),
    ] {
        let layers: Vec<LayerSpec<f64>> =
            derive_layers_from_transformer(TransformerDims::preset(name).unwrap(), 2, 1).unwrap();
        let total: u64 = layers.iter().map(|l| l.num_params).sum();
        let rel = (total as f64 - target).abs() / target;
        assert!(rel <= 0.03, "{name}: {total}");
        assert!(layers.iter().all(|l| l.param_bytes == 2 * l.num_params));
    }
}

#[test]
fn zero_layers_gives_embedding_only() {
    let dims = TransformerDims {
        hidden: 16,
        intermediate: 64,
        layers: 0,
        vocab: 100,
        seq_len: 8,
    };
    let layers: Vec<LayerSpec<f64>> = derive_layers_from_transformer(dims, 4, 1).unwrap();
    assert_eq!(layers.len(), 1);
    assert_eq!(layers[0].param_bytes, 4 * 1600);
}

#[test]
fn derived_flops_sum_to_the_closed_form() {
    for name in TransformerDims::PRESETS {
        let d = TransformerDims::preset(name).unwrap();
        let layers: Vec<LayerSpec<f64>> = derive_layers_from_transformer(d, 2, 1).unwrap();
        let sum: f64 = layers.iter().map(|l| l.fwd_flops + l.bwd_flops).sum();
        let closed = tflops_estimate(1.0, d.seq_len, d.layers, d.hidden, d.vocab).unwrap();
        // Exact when the intermediate size is 4h, as in every preset.
        assert!((sum - closed).abs() / closed < 1e-12, "{name}");
    }
}

#[test]
fn nonpositive_dims_are_rejected() {
    let mut d = TransformerDims::preset("bert-10b").unwrap();
    d.hidden = 0;
    assert!(derive_layers_from_transformer::<f64>(d, 2, 1).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let c = cluster(2, 8);
    let layers = uniform_layers(2, 1024);
    let bad_zero3 = StrategyConfig {
        two_hop: true,
        ..StrategyConfig::zero3("z", 1)
    };
    assert!(matches!(simulate_iteration(&c, &layers, &bad_zero3, &measured()), Err(Error::Domain(_))));
    assert!(matches!(
        simulate_iteration(&c, &layers, &StrategyConfig::mics("m", 12, 1), &measured()),
        Err(Error::NonDivisible { n: 16, p: 12 })
    ));
    assert!(matches!(
        simulate_iteration(&c, &layers, &StrategyConfig::mics("m", 8, 0), &measured()),
        Err(Error::OutOfRange { what: "s", .. })
    ));
    assert!(simulate_iteration(&c, &[], &StrategyConfig::mics("m", 8, 1), &measured()).is_err());
}

#[test]
fn memory_infeasible_partition_is_an_error() {
    let c = cluster(8, 8);
    // 10B parameters * 16 bytes over 2 devices needs 80 GB per device.
    let layers = bert10b();
    let r = simulate_iteration(&c, &layers, &StrategyConfig::mics("m", 2, 1), &measured());
    assert!(matches!(r, Err(Error::Infeasible { .. })));
    assert!(simulate_iteration(&c, &layers, &StrategyConfig::mics("m", 8, 1), &measured()).is_ok());
}

#[test]
fn peak_memory_counts_shard_and_prefetch_buffers() {
    let c = cluster(1, 8);
    let layers = uniform_layers(4, 800);
    let t = simulate_iteration(&c, &layers, &StrategyConfig::mics("m", 8, 1), &measured()).unwrap();
    let states = 4 * 400 * 16;
    assert_eq!(t.model_state_bytes, states);
    assert_eq!(t.peak_model_state_bytes_per_device, states / 8 + 2 * 800);
}

#[test]
fn boundary_sync_runs_once_per_iteration() {
    let c = cluster(4, 8);
    let layers = uniform_layers(3, 1 << 16);
    let one = simulate_iteration(&c, &layers, &StrategyConfig::mics("m", 8, 1), &measured()).unwrap();
    let four = simulate_iteration(&c, &layers, &StrategyConfig::mics("m", 8, 4), &measured()).unwrap();
    assert!(one.phases.boundary_sync > 0.0);
    assert_eq!(one.phases.boundary_sync, four.phases.boundary_sync);
    assert!((four.phases.micro_sync - 4.0 * one.phases.micro_sync).abs() < 1e-12);
}

#[test]
fn disabling_prefetch_serializes_gathers() {
    let c = cluster(8, 8);
    let layers = uniform_layers(10, 32 << 20);
    let overlap = StrategyConfig::mics("m", 8, 1);
    let serial = simulate_iteration(&c, &layers, &no_overlap(overlap.clone()), &measured()).unwrap();
    let fast = simulate_iteration(&c, &layers, &overlap, &measured()).unwrap();
    assert!(fast.total_seconds < serial.total_seconds);
    assert!(serial.total_seconds >= serial.phases.compute() + serial.phases.gather() - 1e-12);
}

fn arb_case() -> impl Gen<Value = (usize, usize, usize, Vec<LayerSpec<f64>>, StrategyConfig)> {
    (
        prop::sample::select(vec![1usize, 2, 4, 8]),
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..4,
        prop::collection::vec((1u64..1 << 24, 0.0f64..1e13), 1..6),
        any::<(bool, bool, bool)>(),
        0usize..3,
    )
        .prop_flat_map(|(k, nodes, s, raw, (zero3, hier, two_hop), depth)| {
            let n = k * nodes;
            let divisors: Vec<usize> = (1..=n)
                .filter(|&p| n % p == 0 && check_partition_shape(p, k).is_ok())
                .collect();
            (prop::sample::select(divisors), Just((k, nodes, s, raw, zero3, hier, two_hop, depth)))
        })
        .prop_map(|(p, (k, nodes, s, raw, zero3, hier, two_hop, depth))| {
            let layers = raw
                .into_iter()
                .map(|(bytes, flops)| LayerSpec {
                    num_params: bytes / 2,
                    param_bytes: bytes,
                    fwd_flops: flops,
                    bwd_flops: 2.0 * flops,
                })
                .collect();
            let cfg = if zero3 {
                StrategyConfig {
                    prefetch_depth: depth,
                    ..StrategyConfig::zero3("z", s)
                }
            } else {
                StrategyConfig {
                    hierarchical_gather: hier,
                    two_hop,
                    prefetch_depth: depth,
                    ..StrategyConfig::mics("m", p, s)
                }
            };
            (k, nodes, s, layers, cfg)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_covers_each_serial_resource((k, nodes, _s, layers, cfg) in arb_case()) {
        let c = cluster(nodes, k);
        let t = simulate_iteration(&c, &layers, &cfg, &measured()).unwrap();
        let tol = 1e-9 * t.total_seconds.max(1e-9);
        prop_assert!(t.total_seconds + tol >= t.phases.compute());
        prop_assert!(t.total_seconds + tol >= t.phases.communication());
        prop_assert!(t.total_seconds <= t.phases.compute() + t.phases.communication() + tol);
    }

    #[test]
    fn zero3_time_never_grows_with_global_bandwidth(
        (k, nodes, _s, layers, _cfg) in arb_case(),
        b in 1e9f64..50e9,
        factor in 1.0f64..4.0,
    ) {
        let c = cluster(nodes, k);
        let cfg = StrategyConfig::zero3("z", 2);
        let mut slow = SimOptions::new(BandwidthProfile::uniform(b));
        slow.profile.b_all = b;
        let mut fast = slow.clone();
        fast.profile.b_all = b * factor;
        let a = simulate_iteration(&c, &layers, &cfg, &slow).unwrap();
        let z = simulate_iteration(&c, &layers, &cfg, &fast).unwrap();
        prop_assert!(z.total_seconds <= a.total_seconds * (1.0 + 1e-12));
    }

    #[test]
    fn gather_traffic_grows_with_partition_size(nodes in 1usize..5, bytes in 1u64..1 << 20) {
        let c = cluster(nodes, 8);
        let n = 8 * nodes;
        let layers = uniform_layers(2, bytes * 64);
        let sizes: Vec<usize> = (1..=n).filter(|&p| n % p == 0 && check_partition_shape(p, 8).is_ok()).collect();
        let traffic: Vec<u64> = sizes
            .iter()
            .map(|&p| simulate_iteration(&c, &layers, &StrategyConfig::mics("m", p, 1), &measured()).map(|t| t.gather_bytes))
            .filter_map(|r| r.ok())
            .collect();
        prop_assert!(traffic.windows(2).all(|w| w[0] <= w[1]));
    }
}
