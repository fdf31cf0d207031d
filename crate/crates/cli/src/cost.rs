//! `mics cost`: evaluates one closed-form model from `key=value` arguments.

use std::collections::BTreeMap;

use mics_core::cost_model::{self as cm, CostReport, LatencyAlgorithm};
use mics_core::simulator::TransformerDims;
use mics_core::topology::{model_state_bytes, DEFAULT_BYTES_PER_PARAM_STATES};

use crate::units::{parse_quantity, Bytes, Dimension, Rate, Time};

pub const FORMULAS: [&str; 12] = [
    "allgather_flat",
    "allgather_mics",
    "cost_ratio",
    "inter_node_traffic",
    "traffic_reduction",
    "two_hop",
    "alt_sync",
    "two_hop_ratio_bound",
    "zero3_volume",
    "latency",
    "tflops",
    "model_state_bytes",
];

struct Args {
    values: BTreeMap<String, String>,
    used: Vec<&'static str>,
}

impl Args {
    fn raw(&mut self, key: &'static str) -> Option<String> {
        self.used.push(key);
        self.values.get(key).cloned()
    }

    fn count(&mut self, key: &'static str) -> Result<usize, String> {
        let v = self.raw(key).ok_or_else(|| format!("missing parameter {key}"))?;
        v.replace('_', "")
            .parse()
            .map_err(|_| format!("{key}: expected a non-negative integer, got {v:?}"))
    }

    fn count_or(&mut self, key: &'static str, default: usize) -> Result<usize, String> {
        if self.values.contains_key(key) {
            self.count(key)
        } else {
            self.used.push(key);
            Ok(default)
        }
    }

    fn qty<D: Dimension>(&mut self, key: &'static str) -> Result<f64, String> {
        let v = self.raw(key).ok_or_else(|| format!("missing parameter {key}"))?;
        parse_quantity::<D>(&v).map_err(|e| format!("{key}: {e}"))
    }

    fn qty_or<D: Dimension>(&mut self, key: &'static str, default: f64) -> Result<f64, String> {
        if self.values.contains_key(key) {
            self.qty::<D>(key)
        } else {
            self.used.push(key);
            Ok(default)
        }
    }

    fn number(&mut self, key: &'static str) -> Result<f64, String> {
        let v = self.raw(key).ok_or_else(|| format!("missing parameter {key}"))?;
        v.parse().map_err(|_| format!("{key}: expected a number, got {v:?}"))
    }

    /// A bandwidth, falling back to the uniform `B` when given.
    fn bandwidth(&mut self, key: &'static str) -> Result<f64, String> {
        if self.values.contains_key(key) {
            return self.qty::<Rate>(key);
        }
        if self.values.contains_key("B") {
            self.used.push(key);
            return self.qty::<Rate>("B");
        }
        Err(format!("missing parameter {key} (or uniform B)"))
    }

    fn finish(self) -> Result<(), String> {
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !self.used.contains(&k.as_str()))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(format!(
                "unknown parameter(s): {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ))
        }
    }
}

fn core<T>(r: mics_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Evaluates `formula` with `key=value` parameters. The first argument may
/// also be written `formula=<name>`.
pub fn evaluate(args: &[String]) -> Result<CostReport, String> {
    let mut formula: Option<String> = None;
    let mut values = BTreeMap::new();
    for (i, a) in args.iter().enumerate() {
        match a.split_once('=') {
            Some(("formula", f)) => formula = Some(f.to_string()),
            Some((k, v)) => {
                if values.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                    return Err(format!("parameter {k} given twice"));
                }
            }
            None if i == 0 => formula = Some(a.clone()),
            None => return Err(format!("expected key=value, got {a:?}")),
        }
    }
    let formula = formula.ok_or_else(|| format!("missing formula; one of: {}", FORMULAS.join(", ")))?;
    let mut a = Args { values, used: Vec::new() };
    let mut report = CostReport::default();
    let f = formula.as_str();
    match f {
        "allgather_flat" => {
            let (n, m, b) = (a.count("n")?, a.qty::<Bytes>("M")?, a.bandwidth("b_all")?);
            report.push(f, "allgather_cost_flat", core(cm::allgather_cost_flat(n, m, b))?, "s");
        }
        "allgather_mics" => {
            let (p, m, b) = (a.count("p")?, a.qty::<Bytes>("M")?, a.bandwidth("b_part")?);
            report.push(f, "allgather_cost_mics", core(cm::allgather_cost_mics(p, m, b))?, "s");
        }
        "cost_ratio" => {
            let (n, p) = (a.count("n")?, a.count("p")?);
            let m = a.qty_or::<Bytes>("M", 1.0)?;
            let (ba, bp) = (a.bandwidth("b_all")?, a.bandwidth("b_part")?);
            let flat = core(cm::allgather_cost_flat(n, m, ba))?;
            let mics = core(cm::allgather_cost_mics(p, m, bp))?;
            report.push(f, "allgather_cost_flat", flat, "s");
            report.push(f, "allgather_cost_mics", mics, "s");
            report.push(f, "cost_ratio", flat / mics, "ratio");
        }
        "inter_node_traffic" => {
            let (p, k, m) = (a.count("p")?, a.count("k")?, a.qty::<Bytes>("M")?);
            report.push(f, "inter_node_traffic_flat", core(cm::inter_node_traffic(p, k, m, false))?, "B");
            report.push(f, "inter_node_traffic_hierarchical", core(cm::inter_node_traffic(p, k, m, true))?, "B");
        }
        "traffic_reduction" => {
            let (p, k) = (a.count("p")?, a.count("k")?);
            let frac: f64 = core(cm::traffic_reduction_fraction(p, k))?;
            report.push(f, "traffic_reduction", frac, "fraction");
            report.push(f, "traffic_reduction_percent", 100.0 * frac, "%");
            report.push(f, "traffic_reduction_ratio", core(cm::traffic_reduction_ratio::<f64>(p, k))?, "ratio");
        }
        "two_hop" => {
            let (s, m, n, p) = (a.count("s")?, a.qty::<Bytes>("M")?, a.count("n")?, a.count("p")?);
            let (bp, br) = (a.bandwidth("b_part")?, a.bandwidth("b_repl")?);
            report.push(f, "two_hop_cost", core(cm::two_hop_cost(s, m, n, p, bp, br))?, "s");
        }
        "alt_sync" => {
            let (s, m, n) = (a.count("s")?, a.qty::<Bytes>("M")?, a.count("n")?);
            let b = a.bandwidth("b_all")?;
            report.push(f, "alt_sync_cost", core(cm::alt_sync_cost(s, m, n, b))?, "s");
        }
        "two_hop_ratio_bound" => {
            let s = a.count("s")?;
            let (ba, bp, br) = (a.bandwidth("b_all")?, a.bandwidth("b_part")?, a.bandwidth("b_repl")?);
            report.push(f, "two_hop_ratio_bound", core(cm::two_hop_ratio_bound(s, ba, bp, br))?, "ratio");
        }
        "zero3_volume" => {
            let (n, m) = (a.count("n")?, a.qty::<Bytes>("M")?);
            let v = core(cm::zero3_iteration_volume(n, m))?;
            report.push(f, "zero3_iteration_volume", v, "B");
            report.push(f, "zero3_iteration_volume_gib", v / (1u64 << 30) as f64, "GiB");
        }
        "latency" => {
            let (p, alpha) = (a.count("p")?, a.qty::<Time>("alpha")?);
            let algo = match a.raw("algorithm").as_deref() {
                None | Some("ring") => LatencyAlgorithm::Ring,
                Some("tree") => LatencyAlgorithm::Tree,
                Some(other) => return Err(format!("algorithm: expected ring or tree, got {other:?}")),
            };
            report.push(f, "collective_latency", core(cm::collective_latency(p, alpha, algo))?, "s");
        }
        "tflops" => {
            let t = a.number("T")?;
            let dims = match a.raw("preset") {
                Some(name) => TransformerDims::preset(&name).ok_or_else(|| format!("preset: unknown model {name:?}"))?,
                None => TransformerDims {
                    hidden: a.count("h")?,
                    intermediate: 0,
                    layers: a.count("L")?,
                    vocab: a.count("V")?,
                    seq_len: 512,
                },
            };
            let l = a.count_or("l", dims.seq_len)?;
            let flops = core(cm::tflops_estimate(t, l, dims.layers, dims.hidden, dims.vocab))?;
            report.push(f, "flops_per_second", flops, "FLOP/s");
            report.push(f, "tflops", flops / 1e12, "TFLOPS");
        }
        "model_state_bytes" => {
            let params = match a.raw("preset") {
                Some(name) => {
                    let dims = TransformerDims::preset(&name).ok_or_else(|| format!("preset: unknown model {name:?}"))?;
                    let layers = core(mics_core::simulator::derive_layers_from_transformer::<f64>(dims, 2, 1))?;
                    layers.iter().map(|l| l.num_params).sum()
                }
                None => a.count("params")? as u64,
            };
            let bpp = a.count_or("bytes_per_param", DEFAULT_BYTES_PER_PARAM_STATES as usize)? as u64;
            report.push(f, "num_params", params as f64, "params");
            report.push(f, "model_state_bytes", core(model_state_bytes(params, bpp))? as f64, "B");
        }
        other => return Err(format!("unknown formula {other:?}; one of: {}", FORMULAS.join(", "))),
    }
    a.finish()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &str) -> Result<CostReport, String> {
        evaluate(&args.split_whitespace().map(String::from).collect::<Vec<_>>())
    }

    #[test]
    fn traffic_reduction_at_64_over_8_is_eleven_percent() {
        let r = run("traffic_reduction p=64 k=8").unwrap();
        assert!((r.get("traffic_reduction_percent").unwrap() - 11.1).abs() < 0.05);
    }

    #[test]
    fn zero3_volume_of_one_gib_over_four_ranks() {
        let r = run("formula=zero3_volume n=4 M=1GiB").unwrap();
        assert_eq!(r.get("zero3_iteration_volume_gib"), Some(2.25));
    }

    #[test]
    fn tflops_for_bert_10b() {
        let r = run("tflops preset=bert-10b T=1").unwrap();
        let v = r.get("flops_per_second").unwrap();
        assert!((v - 4.25e13).abs() / 4.25e13 < 0.01, "{v}");
    }

    #[test]
    fn uniform_bandwidth_fills_every_role() {
        let r = run("two_hop_ratio_bound s=4 B=10GB/s").unwrap();
        assert!((r.get("two_hop_ratio_bound").unwrap() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_inputs_are_errors() {
        assert!(run("nope p=1").unwrap_err().contains("unknown formula"));
        assert!(run("traffic_reduction p=64 k=8 z=1").unwrap_err().contains("unknown parameter"));
        assert!(run("traffic_reduction p=64").unwrap_err().contains("missing parameter k"));
        assert!(run("allgather_flat n=8 M=1GB b_all=3GB").is_err());
        assert!(run("").is_err());
    }

    #[test]
    fn cost_ratio_reproduces_the_bandwidth_ratio_at_n_equals_p() {
        let r = run("cost_ratio n=8 p=8 b_all=11GB/s b_part=128GB/s").unwrap();
        assert!((r.get("cost_ratio").unwrap() - 128.0 / 11.0).abs() < 1e-12);
    }
}
