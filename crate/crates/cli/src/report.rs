//! Report records and their text renderings.

use std::fmt::Write as _;

use mics_core::simulator::{Comparison, StrategyConfig};
use mics_core::Trace;
use serde::{Deserialize, Serialize};

use crate::config::OutputFormat;

/// Baseline-over-this ratios; the baseline is the scenario's first strategy.
/// A ratio is infinite when this strategy's quantity is zero and the
/// baseline's is not; non-finite values are written as strings in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    #[serde(with = "non_finite")]
    pub throughput: f64,
    #[serde(with = "non_finite")]
    pub gather: f64,
    #[serde(with = "non_finite")]
    pub sync: f64,
    #[serde(with = "non_finite")]
    pub inter_node: f64,
    #[serde(with = "non_finite")]
    pub memory: f64,
}

mod non_finite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One (scenario, strategy) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub scenario: String,
    pub num_nodes: usize,
    pub devices_per_node: usize,
    pub config: StrategyConfig,
    pub trace: Trace,
    pub ratios: Ratios,
}

/// Flattens a comparison into records, one per strategy.
pub fn records(scenario: &str, num_nodes: usize, devices_per_node: usize, cmp: &Comparison<f64>) -> Vec<Record> {
    cmp.traces
        .iter()
        .map(|t| {
            let get = |what: &str| {
                cmp.report
                    .get(&format!("{}.{what}", t.strategy))
                    .expect("comparison reports every ratio")
            };
            Record {
                scenario: scenario.to_string(),
                num_nodes,
                devices_per_node,
                config: cmp_config(t, cmp).expect("trace belongs to the comparison").clone(),
                trace: t.clone(),
                ratios: Ratios {
                    throughput: get("throughput_ratio"),
                    gather: get("gather_ratio"),
                    sync: get("sync_ratio"),
                    inter_node: get("inter_node_ratio"),
                    memory: get("memory_ratio"),
                },
            }
        })
        .collect()
}

fn cmp_config<'a>(t: &Trace, cmp: &'a Comparison<f64>) -> Option<&'a StrategyConfig> {
    cmp.configs.iter().find(|c| c.name == t.strategy)
}

pub const CSV_COLUMNS: [&str; 30] = [
    "scenario",
    "num_nodes",
    "devices_per_node",
    "world_size",
    "strategy",
    "kind",
    "p",
    "s",
    "hierarchical_gather",
    "two_hop",
    "prefetch_depth",
    "total_seconds",
    "fwd_gather_seconds",
    "fwd_compute_seconds",
    "bwd_gather_seconds",
    "bwd_compute_seconds",
    "micro_sync_seconds",
    "boundary_sync_seconds",
    "intra_node_bytes",
    "inter_node_bytes",
    "sync_intra_node_bytes",
    "sync_inter_node_bytes",
    "gather_bytes",
    "reduce_scatter_bytes",
    "sync_all_gather_bytes",
    "peak_model_state_bytes_per_device",
    "throughput_ratio",
    "inter_node_ratio",
    "memory_ratio",
    "sync_ratio",
];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_row(r: &Record) -> String {
    let t = &r.trace;
    let c = &r.config;
    let ph = &t.phases;
    let fields: [String; 30] = [
        csv_field(&r.scenario),
        r.num_nodes.to_string(),
        r.devices_per_node.to_string(),
        t.n.to_string(),
        csv_field(&c.name),
        serde_json::to_value(c.strategy).unwrap().as_str().unwrap().to_string(),
        t.p.to_string(),
        t.s.to_string(),
        c.hierarchical_gather.to_string(),
        c.two_hop.to_string(),
        c.prefetch_depth.to_string(),
        t.total_seconds.to_string(),
        ph.fwd_gather.to_string(),
        ph.fwd_compute.to_string(),
        ph.bwd_gather.to_string(),
        ph.bwd_compute.to_string(),
        ph.micro_sync.to_string(),
        ph.boundary_sync.to_string(),
        t.intra_node_bytes.to_string(),
        t.inter_node_bytes.to_string(),
        t.sync_intra_node_bytes.to_string(),
        t.sync_inter_node_bytes.to_string(),
        t.gather_bytes.to_string(),
        t.reduce_scatter_bytes.to_string(),
        t.sync_all_gather_bytes.to_string(),
        t.peak_model_state_bytes_per_device.to_string(),
        r.ratios.throughput.to_string(),
        r.ratios.inter_node.to_string(),
        r.ratios.memory.to_string(),
        r.ratios.sync.to_string(),
    ];
    fields.join(",")
}

fn table(records: &[Record]) -> String {
    let header = [
        "scenario", "strategy", "n", "p", "s", "iter (s)", "compute (s)", "gather (s)", "sync (s)",
        "inter-node (GB)", "peak mem (GB)", "speedup",
    ];
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let t = &r.trace;
            vec![
                r.scenario.clone(),
                r.config.name.clone(),
                t.n.to_string(),
                t.p.to_string(),
                t.s.to_string(),
                format!("{:.4}", t.total_seconds),
                format!("{:.4}", t.phases.compute()),
                format!("{:.4}", t.phases.gather()),
                format!("{:.4}", t.phases.sync()),
                format!("{:.3}", t.inter_node_bytes as f64 / 1e9),
                format!("{:.3}", t.peak_model_state_bytes_per_device as f64 / 1e9),
                format!("{:.3}x", r.ratios.throughput),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    for r in &rows {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    }
    out
}

pub fn render(records: &[Record], format: OutputFormat) -> String {
    match format {
        OutputFormat::Table => table(records),
        OutputFormat::Csv => {
            let mut out = CSV_COLUMNS.join(",");
            out.push('\n');
            for r in records {
                out.push_str(&csv_row(r));
                out.push('\n');
            }
            out
        }
        OutputFormat::Jsonl => {
            let mut out = String::new();
            for r in records {
                out.push_str(&serde_json::to_string(r).expect("records serialize"));
                out.push('\n');
            }
            out
        }
    }
}

/// Parses a jsonl report back into records.
pub fn parse_jsonl(text: &str) -> serde_json::Result<Vec<Record>> {
    text.lines().filter(|l| !l.is_empty()).map(serde_json::from_str).collect()
}
