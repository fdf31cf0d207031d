use mics_core::collectives::{Executor, Fabric, ShardBuffer};
use mics_core::cost_model as cm;
use mics_core::simulator::{derive_layers_from_transformer, TransformerDims};
use mics_core::sync_schedule::{oracle_global_sync, SyncSchedule};
use mics_core::topology::build_group_layout;
use mics_core::{Cluster, Exact};
use num_bigint::BigInt;
use num_rational::BigRational;

fn big(x: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

/// Expanded polynomial form: 96TlLh^2 + 16Tl^2Lh + 6TlhV.
fn tflops_expanded(t: u64, l: u64, layers: u64, h: u64, v: u64) -> BigRational {
    big(96) * big(t) * big(l) * big(layers) * big(h) * big(h)
        + big(16) * big(t) * big(l) * big(l) * big(layers) * big(h)
        + big(6) * big(t) * big(l) * big(h) * big(v)
}

fn rational_to_f64(r: &BigRational) -> f64 {
    // Quotient and a scaled remainder keep every significant bit we need.
    let q = r.numer() / r.denom();
    let rem = r.numer() % r.denom();
    let scale = BigInt::from(1u64 << 53);
    let frac = (rem * &scale) / r.denom();
    q.to_string().parse::<f64>().unwrap() + frac.to_string().parse::<f64>().unwrap() / (1u64 << 53) as f64
}

#[test]
fn tflops_matches_expanded_rational_form() {
    for name in ["bert-10b", "bert-15b", "bert-20b", "bert-50b"] {
        let d = TransformerDims::preset(name).unwrap();
        for t in [1u64, 3, 17] {
            let got = cm::tflops_estimate(t as f64, d.seq_len, d.layers, d.hidden, d.vocab).unwrap();
            let want = rational_to_f64(&tflops_expanded(t, d.seq_len as u64, d.layers as u64, d.hidden as u64, d.vocab as u64));
            assert!((got - want).abs() <= want * 1e-12, "{name} T={t}: {got} vs {want}");
        }
    }
}

#[test]
fn exact_and_float_instantiations_agree() {
    let m = 1u64 << 30;
    for (n, p, k) in [(64usize, 8usize, 8usize), (128, 16, 8), (32, 32, 4)] {
        let flat_x: Exact = cm::allgather_cost_flat(n, Exact::from_integer(m as i128), Exact::from_integer(11)).unwrap();
        let flat_f: f64 = cm::allgather_cost_flat(n, m as f64, 11.0).unwrap();
        assert!((*flat_x.numer() as f64 / *flat_x.denom() as f64 - flat_f).abs() <= flat_f * 1e-15);

        let inter_x: Exact = cm::inter_node_traffic(p, k, Exact::from_integer(m as i128), true).unwrap();
        let inter_f: f64 = cm::inter_node_traffic(p, k, m as f64, true).unwrap();
        assert_eq!(*inter_x.numer() as f64 / *inter_x.denom() as f64, inter_f);

        let vol_x: Exact = cm::zero3_iteration_volume(n, Exact::from_integer(m as i128)).unwrap();
        assert_eq!(vol_x, Exact::new(3 * (n as i128 - 1) * m as i128, n as i128));
    }
}

#[test]
fn traffic_reduction_fractions_for_eight_gpu_nodes() {
    let a: Exact = cm::traffic_reduction_fraction(64, 8).unwrap();
    let b: Exact = cm::traffic_reduction_fraction(16, 8).unwrap();
    assert_eq!(a, Exact::new(7, 63));
    assert_eq!(b, Exact::new(7, 15));
}

#[test]
fn layers_of_every_preset_are_positive() {
    for name in TransformerDims::PRESETS {
        let d = TransformerDims::preset(name).unwrap();
        let layers = derive_layers_from_transformer::<f64>(d, 2, 1).unwrap();
        assert_eq!(layers.len(), d.layers + 1);
        assert!(layers.iter().all(|l| l.num_params > 0 && l.param_bytes == 2 * l.num_params));
    }
}

fn cluster(num_nodes: usize, k: usize) -> Cluster {
    Cluster {
        num_nodes,
        devices_per_node: k,
        intra_node_bandwidth: 128e9,
        inter_node_bandwidth_per_node: 12.5e9,
        alpha_intra: 0.0,
        alpha_inter: 0.0,
        device_memory: 32 << 30,
        device_peak_flops: 125e12,
    }
}

#[test]
fn gather_then_sync_round_trip_on_four_nodes() {
    let (n, p, k) = (16, 8, 4);
    let layout = build_group_layout(n, p).unwrap();
    let fabric = Fabric::new(Executor::sequential());

    let shards: Vec<ShardBuffer> = (0..n).map(|r| ShardBuffer::new(r, vec![r as u8; 3])).collect();
    let out = fabric.hierarchical_all_gather(&layout, &cluster(n / k, k), &shards).unwrap();
    for (r, buf) in out.iter().enumerate() {
        let g = r / p;
        let want: Vec<u8> = (g * p..(g + 1) * p).flat_map(|q| [q as u8; 3]).collect();
        assert_eq!(buf.payload, want, "rank {r}");
    }

    let s = 3;
    let len = 21;
    let grads: Vec<Vec<Vec<i64>>> = (0..s)
        .map(|step| (0..n).map(|r| (0..len).map(|i| (step * 1000 + r * 31 + i) as i64 - 500).collect()).collect())
        .collect();
    let mut sched = SyncSchedule::new(&fabric, layout.clone(), len, s).unwrap();
    for step in &grads {
        sched.two_hop_micro_step(step).unwrap();
    }
    sched.two_hop_boundary().unwrap();
    let oracle = oracle_global_sync(&grads, &layout);
    for st in sched.states() {
        assert_eq!(st.accumulated_shard, oracle[layout.local_group_rank[st.rank]]);
    }
}

#[test]
fn threaded_executor_gives_the_same_bytes() {
    let (n, p, k) = (32, 16, 8);
    let layout = build_group_layout(n, p).unwrap();
    let shards: Vec<ShardBuffer> = (0..n).map(|r| ShardBuffer::new(r, (0..5).map(|i| (r * 7 + i) as u8).collect())).collect();
    let a = Fabric::new(Executor::sequential())
        .hierarchical_all_gather(&layout, &cluster(n / k, k), &shards)
        .unwrap();
    let b = Fabric::new(Executor::with_threads(4).unwrap())
        .hierarchical_all_gather(&layout, &cluster(n / k, k), &shards)
        .unwrap();
    assert_eq!(a, b);
}
