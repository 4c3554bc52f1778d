//! Run configuration files (TOML or JSON).

use std::collections::BTreeMap;
use std::path::Path;

use bufstab::casestudy::OneHopSharedConfig;
use bufstab::network::{ArrivalSchedule, Buffer, NetworkBuilder, NetworkInstance};
use bufstab::policy::{Policy, PolicyFamily, Smoothing};
use serde::Deserialize;

use crate::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub casestudy: Vec<CaseStudyBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    pub commodities: Vec<CommodityConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    pub buffer: BufferSpec,
    pub egress_capacity: Option<EgressSpec>,
}

/// `"inf"` or a positive number.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BufferSpec {
    Finite(f64),
    Named(String),
}

/// One rate for every commodity, or a table keyed by commodity id.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EgressSpec {
    Uniform(f64),
    PerCommodity(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub from: String,
    pub to: String,
    pub capacity: f64,
}

/// A constant rate or a list of `[t_start, rate]` segments.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ArrivalSpec {
    Rate(f64),
    Schedule(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferModeSpec {
    #[default]
    PerCommodity,
    Shared,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommodityConfig {
    pub id: String,
    pub arrivals: BTreeMap<String, ArrivalSpec>,
    #[serde(default)]
    pub buffer_mode: BufferModeSpec,
    #[serde(default)]
    pub allocations: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_family")]
    pub family: String,
    pub a: Option<f64>,
    pub epsilon: Option<f64>,
    /// Fraction of capacity for `constant_rate`.
    pub fraction: Option<f64>,
    #[serde(default)]
    pub overrides: Vec<EgressOverride>,
}

fn default_family() -> String {
    "smooth_backpressure".into()
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            family: default_family(),
            a: None,
            epsilon: None,
            fraction: None,
            overrides: Vec::new(),
        }
    }
}

/// Egress smoothing for one node.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgressOverride {
    pub node: String,
    pub a: f64,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub horizon: f64,
    pub step: f64,
    pub adaptive: bool,
    pub divergence_cap: f64,
    pub max_samples: usize,
    pub initial: Option<Vec<f64>>,
    /// Unbounded queues growing faster than this over the final half are reported unstable.
    pub growth_tol: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            horizon: 1000.0,
            step: 0.01,
            adaptive: false,
            divergence_cap: 1e9,
            max_samples: 10_000,
            initial: None,
            growth_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub samples: usize,
    pub starts: usize,
    pub sampling_cap: f64,
    pub face_points: usize,
    pub face_budget: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            starts: 20,
            sampling_cap: 100.0,
            face_points: 7,
            face_budget: 100_000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub commodity: Option<String>,
    pub bracket: Option<(f64, f64)>,
    pub iterations: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            commodity: None,
            bracket: None,
            iterations: 12,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseStudyBlock {
    pub name: Option<String>,
    pub capacity: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub buffer: f64,
    /// 1-based index of the overloaded commodity; detected when absent.
    pub overloaded: Option<usize>,
    /// Cross-check each closed-form endpoint with an arrival-rate sweep.
    #[serde(default)]
    pub validate: bool,
}

impl CaseStudyBlock {
    pub fn to_config(&self) -> Result<OneHopSharedConfig<f64>, CliError> {
        OneHopSharedConfig::new(self.capacity.clone(), self.mu.clone(), self.lambda.clone(), self.buffer)
            .map_err(|e| CliError::Config(format!("casestudy block `{}`: {e}", self.label())))
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| "unnamed".into())
    }
}

/// Parsed configuration plus the raw bytes it came from.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: Vec<u8>,
}

/// Reads a `.json` file as JSON and anything else as TOML.
pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let raw = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&raw).map_err(|e| CliError::Config(format!("{}: not UTF-8: {e}", path.display())))?;
    let config = parse(text, path.extension().is_some_and(|e| e == "json"))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(LoadedConfig { config, raw })
}

pub fn parse(text: &str, json: bool) -> Result<RunConfig, String> {
    let config: RunConfig = if json {
        serde_json::from_str(text).map_err(|e| e.to_string())?
    } else {
        toml::from_str(text).map_err(|e| e.to_string())?
    };
    if config.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(format!(
            "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
            config.schema_version
        ));
    }
    Ok(config)
}

impl NetworkConfig {
    pub fn build(&self) -> Result<NetworkInstance<f64>, CliError> {
        let cfg = |e: bufstab::Error| CliError::Config(format!("network: {e}"));
        let mut b = NetworkBuilder::new();
        for n in &self.nodes {
            let buffer = match &n.buffer {
                BufferSpec::Finite(x) => Buffer::Finite(*x),
                BufferSpec::Named(s) if matches!(s.as_str(), "inf" | "infinite" | "unbounded") => Buffer::Unbounded,
                BufferSpec::Named(s) => {
                    return Err(CliError::Config(format!("node `{}`: buffer must be a number or \"inf\", got \"{s}\"", n.id)))
                }
            };
            b = b.node(&n.id, buffer).map_err(cfg)?;
        }
        for n in &self.nodes {
            match &n.egress_capacity {
                Some(EgressSpec::Uniform(mu)) => b = b.egress(&n.id, *mu).map_err(cfg)?,
                Some(EgressSpec::PerCommodity(m)) => {
                    for (c, mu) in m {
                        b = b.egress_for(&n.id, c, *mu).map_err(cfg)?;
                    }
                }
                None => {}
            }
        }
        for l in &self.links {
            b = b.link(&l.from, &l.to, l.capacity).map_err(cfg)?;
        }
        for c in &self.commodities {
            let mut arrivals = Vec::new();
            for (node, spec) in &c.arrivals {
                let sched = match spec {
                    ArrivalSpec::Rate(r) => ArrivalSchedule::constant(*r),
                    ArrivalSpec::Schedule(s) => ArrivalSchedule::piecewise(s.clone()).map_err(cfg)?,
                };
                arrivals.push((node.clone(), sched));
            }
            let allocations = c.allocations.iter().map(|(n, v)| (n.clone(), *v)).collect();
            b = b
                .commodity_with(&c.id, arrivals, c.buffer_mode == BufferModeSpec::Shared, allocations)
                .map_err(cfg)?;
        }
        b.build().map_err(cfg)
    }
}

impl PolicyConfig {
    pub fn build(&self, net: &NetworkInstance<f64>) -> Result<Policy<f64>, CliError> {
        let cfg = |e: bufstab::Error| CliError::Config(format!("policy: {e}"));
        let smoothing = smoothing(self.a, self.epsilon).map_err(cfg)?;
        let family = match self.family.as_str() {
            "smooth_backpressure" => PolicyFamily::SmoothBackpressure,
            "buffer_occupancy" => PolicyFamily::BufferOccupancy,
            "shared_buffer_backpressure" => PolicyFamily::SharedBufferBackpressure,
            "constant_rate" => PolicyFamily::ConstantRate,
            other => return Err(CliError::Config(format!("policy: unknown family `{other}`"))),
        };
        let mut pol = if family == PolicyFamily::ConstantRate {
            Policy::constant_rate(self.fraction.unwrap_or(0.5)).map_err(cfg)?
        } else {
            Policy::new(family, smoothing).map_err(cfg)?
        };
        for o in &self.overrides {
            let node = net
                .node_index(&o.node)
                .ok_or_else(|| CliError::Config(format!("policy override: unknown node `{}`", o.node)))?;
            pol = pol.with_egress_override(node, smoothing_for(o.a, o.epsilon).map_err(cfg)?).map_err(cfg)?;
        }
        Ok(pol)
    }

    pub fn smoothing(&self) -> Result<Smoothing<f64>, CliError> {
        smoothing(self.a, self.epsilon).map_err(|e| CliError::Config(format!("policy: {e}")))
    }
}

fn smoothing(a: Option<f64>, epsilon: Option<f64>) -> bufstab::Result<Smoothing<f64>> {
    match a {
        Some(a) => smoothing_for(a, epsilon),
        None => match epsilon {
            Some(e) => Smoothing::new(Smoothing::<f64>::default().a, e),
            None => Ok(Smoothing::default()),
        },
    }
}

fn smoothing_for(a: f64, epsilon: Option<f64>) -> bufstab::Result<Smoothing<f64>> {
    match epsilon {
        Some(e) => Smoothing::new(a, e),
        None => Smoothing::with_a(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1: &str = r#"
schema_version = 1
[network]
nodes = [
  { id = "1", buffer = "inf" },
  { id = "2", buffer = "inf" },
  { id = "K", buffer = 6, egress_capacity = { "1" = 2.0, "2" = 3.0 } },
]
links = [ { from = "1", to = "K", capacity = 6.0 }, { from = "2", to = "K", capacity = 4.5 } ]
commodities = [
  { id = "1", arrivals = { "1" = 3.0 }, buffer_mode = "shared" },
  { id = "2", arrivals = { "2" = [[0.0, 0.0], [5.0, 1.2]] }, buffer_mode = "shared" },
]
[policy]
family = "shared_buffer_backpressure"
"#;

    #[test]
    fn toml_network_round_trip() {
        let c = parse(FIG1, false).unwrap();
        let net = c.network.unwrap().build().unwrap();
        assert_eq!(net.node_count(), 3);
        assert_eq!(net.egress(2, 1), 3.0);
        assert_eq!(net.total_arrival(1), 1.2);
        assert!(c.policy.build(&net).is_ok());
    }

    #[test]
    fn schema_version_is_checked() {
        assert!(parse("schema_version = 2", false).is_err());
        assert!(parse(r#"{"schema_version": 1}"#, true).is_ok());
        assert!(parse("schema_version = 1\nbogus = 3", false).is_err());
    }

    #[test]
    fn bad_buffer_name_is_a_config_error() {
        let text = FIG1.replace("\"inf\" },\n  { id = \"2\"", "\"huge\" },\n  { id = \"2\"");
        let c = parse(&text, false).unwrap();
        assert!(matches!(c.network.unwrap().build(), Err(CliError::Config(_))));
    }
}
