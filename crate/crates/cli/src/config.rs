//! Scenario files (TOML) and their validation.

use std::ops::Range;
use std::path::{Path, PathBuf};

use mics_core::cost_model::{BandwidthProfile, BandwidthSample, LatencyAlgorithm};
use mics_core::simulator::{
    derive_layers_from_transformer, LayerSpec, SimOptions, Strategy, StrategyConfig, TransformerDims,
};
use mics_core::topology::{ClusterSpec, DEFAULT_BYTES_PER_PARAM_STATES};
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::units::{ByteCount, Count, Flops, Qty, Rate, Time};

/// A validation failure anchored at a position in the config file.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}{}: {message}", .path.display(), location(*.line, *.column, .field))]
pub struct ConfigError {
    pub path: PathBuf,
    /// 1-based; 0 when no position is known.
    pub line: usize,
    pub column: usize,
    pub field: String,
    pub message: String,
}

fn location(line: usize, column: usize, field: &str) -> String {
    let mut s = String::new();
    if line > 0 {
        s.push_str(&format!(":{line}:{column}"));
    }
    if !field.is_empty() {
        s.push_str(&format!(": {field}"));
    }
    s
}

/// Position of a value in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Anchor {
    pub line: usize,
    pub column: usize,
}

impl Anchor {
    fn of(text: &str, span: Range<usize>) -> Self {
        let start = span.start.min(text.len());
        let before = &text[..start];
        let line = before.matches('\n').count() + 1;
        let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
        Anchor { line, column }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
    Jsonl,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Table => "txt",
            OutputFormat::Csv => "csv",
            OutputFormat::Jsonl => "jsonl",
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    cluster: Spanned<RawCluster>,
    model: Spanned<RawModel>,
    bandwidth: Option<Spanned<RawBandwidth>>,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    simulation: RawSimulation,
    strategies: Spanned<Vec<Spanned<RawStrategy>>>,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCluster {
    num_nodes: usize,
    devices_per_node: usize,
    intra_node_bandwidth: Qty<Rate>,
    inter_node_bandwidth_per_node: Qty<Rate>,
    #[serde(default = "zero_time")]
    alpha_intra: Qty<Time>,
    #[serde(default = "zero_time")]
    alpha_inter: Qty<Time>,
    device_memory: ByteCount,
    device_peak_flops: Qty<Flops>,
}

fn zero_time() -> Qty<Time> {
    Qty::new(0.0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    hidden: Option<usize>,
    intermediate: Option<usize>,
    layers: Option<usize>,
    vocab: Option<usize>,
    seq_len: Option<usize>,
    #[serde(default = "two")]
    dtype_bytes: u64,
    #[serde(default)]
    layer: Vec<Spanned<RawLayer>>,
}

fn two() -> u64 {
    2
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    param_bytes: ByteCount,
    num_params: Option<u64>,
    fwd_flops: Qty<Count>,
    bwd_flops: Qty<Count>,
    #[serde(default = "one")]
    repeat: usize,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBandwidth {
    b_all: Option<Qty<Rate>>,
    b_part: Option<Qty<Rate>>,
    b_repl: Option<Qty<Rate>>,
    table: Option<Vec<RawSample>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    message: ByteCount,
    group_scale: usize,
    bandwidth: Qty<Rate>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    #[serde(default = "one")]
    s: usize,
    #[serde(default = "one")]
    micro_batch: usize,
}

impl Default for RawTraining {
    fn default() -> Self {
        RawTraining { s: 1, micro_batch: 1 }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    compute_efficiency: Option<Spanned<f64>>,
    include_latency: Option<bool>,
    latency_algorithm: Option<LatencyAlgorithm>,
    headroom_fraction: Option<Spanned<f64>>,
    bytes_per_param_states: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    name: Option<String>,
    strategy: Strategy,
    p: Option<Spanned<usize>>,
    hierarchical_gather: Option<bool>,
    two_hop: Option<bool>,
    s: Option<Spanned<usize>>,
    #[serde(default = "one")]
    prefetch_depth: usize,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(default)]
    format: OutputFormat,
    path: Option<String>,
}

/// Where each validated value came from, for errors raised after loading.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Anchors {
    pub cluster: Anchor,
    /// Per strategy: the `p` value if given, else the entry.
    pub strategy_p: Vec<Anchor>,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub source: PathBuf,
    pub cluster: ClusterSpec<f64>,
    pub model: ModelSummary,
    pub layers: Vec<LayerSpec<f64>>,
    pub options: SimOptions<f64>,
    pub strategies: Vec<StrategyConfig>,
    pub micro_batch: usize,
    pub format: OutputFormat,
    /// Report path from the file, resolved against the file's directory.
    pub output_path: Option<PathBuf>,
    pub anchors: Anchors,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelSummary {
    pub description: String,
    pub num_layers: usize,
    pub num_params: u64,
    pub param_bytes: u64,
}

struct Ctx<'a> {
    path: &'a Path,
    text: &'a str,
}

impl Ctx<'_> {
    fn err(&self, span: Option<Range<usize>>, field: impl Into<String>, message: impl Into<String>) -> ConfigError {
        let a = span.map(|s| Anchor::of(self.text, s)).unwrap_or_default();
        self.err_at(a, field, message)
    }

    fn err_at(&self, a: Anchor, field: impl Into<String>, message: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.to_path_buf(),
            line: a.line,
            column: a.column,
            field: field.into(),
            message: message.into(),
        }
    }
}

pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        field: String::new(),
        message: format!("cannot read: {e}"),
    })?;
    parse(path, &text)
}

pub fn parse(path: &Path, text: &str) -> Result<Scenario, ConfigError> {
    let ctx = Ctx { path, text };
    let raw: RawScenario = toml::from_str(text).map_err(|e| ctx.err(e.span(), "", e.message().trim()))?;

    let cluster_span = raw.cluster.span();
    let rc = raw.cluster.into_inner();
    let cluster = ClusterSpec {
        num_nodes: rc.num_nodes,
        devices_per_node: rc.devices_per_node,
        intra_node_bandwidth: rc.intra_node_bandwidth.value,
        inter_node_bandwidth_per_node: rc.inter_node_bandwidth_per_node.value,
        alpha_intra: rc.alpha_intra.value,
        alpha_inter: rc.alpha_inter.value,
        device_memory: rc.device_memory.0,
        device_peak_flops: rc.device_peak_flops.value,
    };
    let cluster_anchor = Anchor::of(text, cluster_span);
    cluster
        .validate()
        .map_err(|e| ctx.err_at(cluster_anchor, "cluster", e.to_string()))?;

    let (model, layers) = resolve_model(&ctx, raw.model, raw.training.micro_batch)?;

    let profile = match raw.bandwidth {
        None => BandwidthProfile::default_measured(),
        Some(b) => {
            let span = b.span();
            let b = b.into_inner();
            let base = BandwidthProfile::<f64>::default_measured();
            let profile = BandwidthProfile {
                b_all: b.b_all.map_or(base.b_all, |q| q.value),
                b_part: b.b_part.map_or(base.b_part, |q| q.value),
                b_repl: b.b_repl.map_or(base.b_repl, |q| q.value),
                table: match b.table {
                    None => base.table,
                    Some(rows) => rows
                        .into_iter()
                        .map(|r| BandwidthSample {
                            message_bytes: r.message.0,
                            group_scale: r.group_scale,
                            bandwidth: r.bandwidth.value,
                        })
                        .collect(),
                },
            };
            profile
                .validate()
                .map_err(|e| ctx.err(Some(span), "bandwidth", e.to_string()))?;
            profile
        }
    };

    let mut options = SimOptions::new(profile);
    let sim = raw.simulation;
    if let Some(e) = sim.compute_efficiency {
        let v = *e.get_ref();
        if !(v > 0.0 && v <= 1.0) {
            return Err(ctx.err(Some(e.span()), "simulation.compute_efficiency", "must lie in (0, 1]"));
        }
        options.compute_efficiency = v;
    }
    if let Some(h) = sim.headroom_fraction {
        let v = *h.get_ref();
        if !(v > 0.0 && v <= 1.0) {
            return Err(ctx.err(Some(h.span()), "simulation.headroom_fraction", "must lie in (0, 1]"));
        }
        options.headroom_fraction = v;
    }
    options.include_latency = sim.include_latency.unwrap_or(true);
    options.latency_algorithm = sim.latency_algorithm.unwrap_or(LatencyAlgorithm::Ring);
    options.bytes_per_param_states = sim.bytes_per_param_states.unwrap_or(DEFAULT_BYTES_PER_PARAM_STATES);

    if raw.training.s == 0 {
        return Err(ctx.err(None, "training.s", "must be at least 1"));
    }
    let strategies_span = raw.strategies.span();
    let raw_strategies = raw.strategies.into_inner();
    if raw_strategies.len() < 2 {
        return Err(ctx.err(
            Some(strategies_span),
            "strategies",
            "at least two strategies are needed for a comparison",
        ));
    }
    let mut strategies = Vec::with_capacity(raw_strategies.len());
    let mut strategy_p = Vec::with_capacity(raw_strategies.len());
    for (i, entry) in raw_strategies.into_iter().enumerate() {
        let entry_span = entry.span();
        let r = entry.into_inner();
        let (p, p_anchor) = match r.p {
            Some(p) => (Some(*p.get_ref()), Anchor::of(text, p.span())),
            None => (None, Anchor::of(text, entry_span.clone())),
        };
        let s = match r.s {
            Some(s) if *s.get_ref() == 0 => {
                return Err(ctx.err(Some(s.span()), format!("strategies[{i}].s"), "must be at least 1"))
            }
            Some(s) => *s.get_ref(),
            None => raw.training.s,
        };
        let is_mics = r.strategy == Strategy::Mics;
        let cfg = StrategyConfig {
            name: r.name.unwrap_or_else(|| match p {
                Some(p) if is_mics => format!("mics-p{p}"),
                _ => format!("{:?}", r.strategy).to_lowercase(),
            }),
            strategy: r.strategy,
            p,
            hierarchical_gather: r.hierarchical_gather.unwrap_or(is_mics),
            two_hop: r.two_hop.unwrap_or(is_mics),
            s,
            prefetch_depth: r.prefetch_depth,
        };
        if strategies.iter().any(|c: &StrategyConfig| c.name == cfg.name) {
            return Err(ctx.err(Some(entry_span), format!("strategies[{i}].name"), format!("duplicate name {:?}", cfg.name)));
        }
        strategies.push(cfg);
        strategy_p.push(p_anchor);
    }

    let output_path = raw.output.path.map(|p| {
        let p = PathBuf::from(p);
        if p.is_relative() {
            path.parent().unwrap_or(Path::new(".")).join(p)
        } else {
            p
        }
    });
    let name = raw.name.unwrap_or_else(|| {
        path.file_stem()
            .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
    });

    let scenario = Scenario {
        name,
        source: path.to_path_buf(),
        cluster,
        model,
        layers,
        options,
        strategies,
        micro_batch: raw.training.micro_batch,
        format: raw.output.format,
        output_path,
        anchors: Anchors {
            cluster: cluster_anchor,
            strategy_p,
        },
    };
    scenario.check_strategies()?;
    Ok(scenario)
}

fn resolve_model(
    ctx: &Ctx<'_>,
    model: Spanned<RawModel>,
    micro_batch: usize,
) -> Result<(ModelSummary, Vec<LayerSpec<f64>>), ConfigError> {
    let span = model.span();
    let m = model.into_inner();
    if micro_batch == 0 {
        return Err(ctx.err(None, "training.micro_batch", "must be at least 1"));
    }
    if m.dtype_bytes == 0 {
        return Err(ctx.err(Some(span), "model.dtype_bytes", "must be at least 1"));
    }
    let has_dims = m.preset.is_some()
        || m.hidden.is_some()
        || m.intermediate.is_some()
        || m.layers.is_some()
        || m.vocab.is_some()
        || m.seq_len.is_some();
    let (description, layers) = match (has_dims, m.layer.is_empty()) {
        (true, false) => {
            return Err(ctx.err(
                Some(span),
                "model",
                "give either transformer dimensions or an explicit [[model.layer]] list, not both",
            ))
        }
        (false, true) => {
            return Err(ctx.err(Some(span), "model", "missing transformer dimensions or [[model.layer]] list"))
        }
        (true, true) => {
            let base = match &m.preset {
                Some(name) => TransformerDims::preset(name).ok_or_else(|| {
                    ctx.err(
                        Some(span.clone()),
                        "model.preset",
                        format!("unknown preset {name:?}; known: {}", TransformerDims::PRESETS.join(", ")),
                    )
                })?,
                None => TransformerDims {
                    hidden: 0,
                    intermediate: 0,
                    layers: 0,
                    vocab: 0,
                    seq_len: 512,
                },
            };
            let dims = TransformerDims {
                hidden: m.hidden.unwrap_or(base.hidden),
                intermediate: m.intermediate.unwrap_or(base.intermediate),
                layers: m.layers.unwrap_or(base.layers),
                vocab: m.vocab.unwrap_or(base.vocab),
                seq_len: m.seq_len.unwrap_or(base.seq_len),
            };
            let layers = derive_layers_from_transformer(dims, m.dtype_bytes, micro_batch)
                .map_err(|e| ctx.err(Some(span.clone()), "model", e.to_string()))?;
            let description = match &m.preset {
                Some(p) => p.clone(),
                None => format!(
                    "transformer h={} inter={} L={} V={} l={}",
                    dims.hidden, dims.intermediate, dims.layers, dims.vocab, dims.seq_len
                ),
            };
            (description, layers)
        }
        (false, false) => {
            let mut layers = Vec::new();
            for (i, l) in m.layer.into_iter().enumerate() {
                let lspan = l.span();
                let l = l.into_inner();
                if l.param_bytes.0 == 0 {
                    return Err(ctx.err(Some(lspan), format!("model.layer[{i}].param_bytes"), "must be positive"));
                }
                let spec = LayerSpec {
                    num_params: l.num_params.unwrap_or(l.param_bytes.0 / m.dtype_bytes),
                    param_bytes: l.param_bytes.0,
                    fwd_flops: l.fwd_flops.value * micro_batch as f64,
                    bwd_flops: l.bwd_flops.value * micro_batch as f64,
                };
                layers.extend(std::iter::repeat_n(spec, l.repeat));
            }
            if layers.is_empty() {
                return Err(ctx.err(Some(span), "model.layer", "every layer entry has repeat = 0"));
            }
            ("explicit layers".to_string(), layers)
        }
    };
    let summary = ModelSummary {
        description,
        num_layers: layers.len(),
        num_params: layers.iter().map(|l| l.num_params).sum(),
        param_bytes: layers.iter().map(|l| l.param_bytes).sum(),
    };
    Ok((summary, layers))
}

impl Scenario {
    /// Validates every strategy against the cluster shape.
    pub fn check_strategies(&self) -> Result<(), ConfigError> {
        let n = self.cluster.world_size();
        let k = self.cluster.devices_per_node;
        for (i, cfg) in self.strategies.iter().enumerate() {
            cfg.resolve_partition(n, k).map_err(|e| ConfigError {
                path: self.source.clone(),
                line: self.anchors.strategy_p[i].line,
                column: self.anchors.strategy_p[i].column,
                field: format!("strategies[{i}].p"),
                message: format!("{e} (n = {n}, k = {k})"),
            })?;
        }
        Ok(())
    }

    /// The same scenario on a different number of nodes.
    pub fn with_nodes(&self, num_nodes: usize) -> Result<Scenario, ConfigError> {
        let mut s = self.clone();
        s.cluster.num_nodes = num_nodes;
        s.cluster.validate().map_err(|e| ConfigError {
            path: self.source.clone(),
            line: self.anchors.cluster.line,
            column: self.anchors.cluster.column,
            field: "cluster.num_nodes".into(),
            message: e.to_string(),
        })?;
        s.check_strategies()?;
        Ok(s)
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Resolved<'a> {
            name: &'a str,
            world_size: usize,
            cluster: &'a ClusterSpec<f64>,
            model: &'a ModelSummary,
            micro_batch: usize,
            simulation: Sim<'a>,
            bandwidth: &'a BandwidthProfile<f64>,
            strategies: Vec<Resolved2<'a>>,
            output: Out,
        }
        #[derive(Serialize)]
        struct Sim<'a> {
            compute_efficiency: f64,
            include_latency: bool,
            latency_algorithm: &'a LatencyAlgorithm,
            headroom_fraction: f64,
            bytes_per_param_states: u64,
        }
        #[derive(Serialize)]
        struct Resolved2<'a> {
            name: &'a str,
            strategy: Strategy,
            p: usize,
            hierarchical_gather: bool,
            two_hop: bool,
            s: usize,
            prefetch_depth: usize,
        }
        #[derive(Serialize)]
        struct Out {
            format: OutputFormat,
            #[serde(skip_serializing_if = "Option::is_none")]
            path: Option<String>,
        }
        let n = self.cluster.world_size();
        let o = &self.options;
        let resolved = Resolved {
            name: &self.name,
            world_size: n,
            cluster: &self.cluster,
            model: &self.model,
            micro_batch: self.micro_batch,
            simulation: Sim {
                compute_efficiency: o.compute_efficiency,
                include_latency: o.include_latency,
                latency_algorithm: &o.latency_algorithm,
                headroom_fraction: o.headroom_fraction,
                bytes_per_param_states: o.bytes_per_param_states,
            },
            bandwidth: &o.profile,
            strategies: self
                .strategies
                .iter()
                .map(|c| Resolved2 {
                    name: &c.name,
                    strategy: c.strategy,
                    p: c.resolve_partition(n, self.cluster.devices_per_node).unwrap_or(0),
                    hierarchical_gather: c.hierarchical_gather,
                    two_hop: c.two_hop,
                    s: c.s,
                    prefetch_depth: c.prefetch_depth,
                })
                .collect(),
            output: Out {
                format: self.format,
                path: self.output_path.as_ref().map(|p| p.display().to_string()),
            },
        };
        toml::to_string_pretty(&resolved).expect("resolved config serializes")
    }
}
