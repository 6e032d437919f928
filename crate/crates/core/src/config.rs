//! TOML experiment configuration with cross-reference validation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{
    validate, ArmDetector, ChannelAllocation, LinkBudget, LinkId, RateModel, Violation,
};
use crate::optics::{Basis, Label};
use crate::seed::derive_seed;
use crate::source::{ChannelGrid, ChannelPairSpec, JsiOptions};
use crate::timetag::{ClockModel, DetectorModel, DEFAULT_RESOLUTION_PS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

fn field(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    pub pps_sigma_ns: f64,
    #[serde(default)]
    pub drift_ns_per_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    /// source-to-detector propagation delay
    #[serde(default)]
    pub fiber_delay_ns: f64,
    pub detector: DetectorModel,
    pub clock: ClockConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default = "default_center")]
    pub center_units: i64,
    #[serde(default = "default_spacing")]
    pub spacing_units: i64,
    pub channels: Vec<ChannelPairSpec>,
}

fn default_center() -> i64 {
    15385
}

fn default_spacing() -> i64 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkChannels {
    pub link: String,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationConfig {
    #[serde(default)]
    pub links: Vec<LinkChannels>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub link: String,
    pub loss_db: f64,
    pub arm_split: f64,
    #[serde(default)]
    pub insertion_db: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default = "default_integration")]
    pub integration_s: f64,
    #[serde(default = "default_window")]
    pub window_ns: f64,
    #[serde(default = "default_bases")]
    pub bases: Vec<String>,
    #[serde(default = "default_resolution")]
    pub resolution_ps: u32,
    /// integration per point of the compensation D/D scan
    #[serde(default = "default_scan_integration")]
    pub scan_integration_s: f64,
    #[serde(default = "default_scan_points")]
    pub scan_points: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_integration() -> f64 {
    60.0
}
fn default_window() -> f64 {
    10.0
}
fn default_bases() -> Vec<String> {
    vec!["HV".into(), "DA".into()]
}
fn default_resolution() -> u32 {
    DEFAULT_RESOLUTION_PS
}
fn default_scan_integration() -> f64 {
    5.0
}
fn default_scan_points() -> usize {
    12
}
fn default_samples() -> usize {
    1024
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            integration_s: default_integration(),
            window_ns: default_window(),
            bases: default_bases(),
            resolution_ps: default_resolution(),
            scan_integration_s: default_scan_integration(),
            scan_points: default_scan_points(),
            samples: default_samples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RspConfig {
    pub link: String,
    pub sender: String,
    pub projection: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub nodes: Vec<NodeConfig>,
    pub source: SourceConfig,
    #[serde(default)]
    pub allocation: AllocationConfig,
    #[serde(default)]
    pub budgets: Vec<BudgetConfig>,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub jsi: Option<JsiOptions>,
    #[serde(default)]
    pub rsp: Vec<RspConfig>,
}

/// Resolved sender projection for one remote-state-preparation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RspTask {
    pub link: LinkId,
    pub sender: String,
    pub projection: Label,
    pub target: Label,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn node_names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.name.clone()).collect()
    }

    pub fn node(&self, name: &str) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(field(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if self.nodes[..i].iter().any(|m| m.name == n.name) {
                return Err(field(format!("nodes[{i}].name"), format!("duplicate node {:?}", n.name)));
            }
            n.detector
                .validate()
                .map_err(|e| field(format!("nodes[{i}].detector"), e.to_string()))?;
            if !(n.clock.pps_sigma_ns >= 0.0) {
                return Err(field(format!("nodes[{i}].clock.pps_sigma_ns"), "must be non-negative"));
            }
            if !(n.fiber_delay_ns >= 0.0) {
                return Err(field(format!("nodes[{i}].fiber_delay_ns"), "must be non-negative"));
            }
        }
        self.grid()
            .validate()
            .map_err(|e| field("source", e.to_string()))?;
        for (i, c) in self.source.channels.iter().enumerate() {
            c.validate()
                .map_err(|e| field(format!("source.channels[{i}]"), e.to_string()))?;
            self.grid()
                .channel_units(c.index)
                .map_err(|e| field(format!("source.channels[{i}].index"), e.to_string()))?;
            if self.source.channels[..i].iter().any(|d| d.index == c.index) {
                return Err(field(format!("source.channels[{i}].index"), "duplicate channel index"));
            }
        }
        let names = self.node_names();
        for (i, l) in self.allocation.links.iter().enumerate() {
            let path = format!("allocation.links[{i}]");
            let id: LinkId = l
                .link
                .parse()
                .map_err(|e: crate::allocation::AllocationError| field(format!("{path}.link"), e.to_string()))?;
            for node in id.nodes() {
                if !names.iter().any(|n| n == node) {
                    return Err(field(
                        format!("{path}.link"),
                        format!("node {node:?} is not defined in [[nodes]]"),
                    ));
                }
            }
            for (j, ch) in l.channels.iter().enumerate() {
                if !self.source.channels.iter().any(|c| c.index == *ch) {
                    return Err(field(
                        format!("{path}.channels[{j}]"),
                        format!("channel {ch} is not defined in [[source.channels]]"),
                    ));
                }
            }
            if !self.budgets.iter().any(|b| b.link == l.link) {
                return Err(field(format!("{path}.link"), format!("no [[budgets]] entry for {}", l.link)));
            }
        }
        let violations = validate(&self.allocation_model()?, &names);
        if let Some(v) = violations.first() {
            return Err(field("allocation", describe(v)));
        }
        for (i, b) in self.budgets.iter().enumerate() {
            let id: LinkId = b
                .link
                .parse()
                .map_err(|e: crate::allocation::AllocationError| field(format!("budgets[{i}].link"), e.to_string()))?;
            for node in id.nodes() {
                if !names.iter().any(|n| n == node) {
                    return Err(field(
                        format!("budgets[{i}].link"),
                        format!("node {node:?} is not defined in [[nodes]]"),
                    ));
                }
            }
            self.budget_for(&id)
                .expect("nodes resolved")
                .validate()
                .map_err(|e| field(format!("budgets[{i}]"), e.to_string()))?;
        }
        let p = &self.plan;
        if !(p.integration_s > 0.0 && p.integration_s <= 3600.0) {
            return Err(field("plan.integration_s", "must lie in (0, 3600]"));
        }
        if !(p.window_ns * 1e3 >= f64::from(p.resolution_ps)) {
            return Err(field("plan.window_ns", "must be at least the clock resolution"));
        }
        if p.resolution_ps == 0 {
            return Err(field("plan.resolution_ps", "must be positive"));
        }
        if p.bases.is_empty() {
            return Err(field("plan.bases", "at least one basis is required"));
        }
        for (i, b) in p.bases.iter().enumerate() {
            b.parse::<Basis>()
                .map_err(|_| field(format!("plan.bases[{i}]"), format!("unknown basis {b:?}")))?;
        }
        if p.scan_points < 3 || !(p.scan_integration_s > 0.0) {
            return Err(field("plan.scan_points", "need ≥ 3 points with positive integration"));
        }
        if p.samples == 0 || p.samples % 4 != 0 {
            return Err(field("plan.samples", "must be a positive multiple of 4"));
        }
        for i in 0..self.rsp.len() {
            self.rsp_task(i)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> ChannelGrid {
        ChannelGrid {
            center_units: self.source.center_units,
            spacing_units: self.source.spacing_units,
            num_pairs: self.source.channels.len(),
        }
    }

    pub fn allocation_model(&self) -> Result<ChannelAllocation, ConfigError> {
        self.allocation
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let id = l
                    .link
                    .parse()
                    .map_err(|_| field(format!("allocation.links[{i}].link"), "bad link id"))?;
                Ok((id, l.channels.clone()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(ChannelAllocation::new)
    }

    /// Budget with detector efficiencies taken from the link's nodes.
    pub fn budget_for(&self, link: &LinkId) -> Option<LinkBudget> {
        let b = self.budgets.iter().find(|b| b.link.parse().ok().as_ref() == Some(link))?;
        let e1 = self.node(&link.first)?.detector.efficiency;
        let e2 = self.node(&link.second)?.detector.efficiency;
        Some(LinkBudget {
            link: link.clone(),
            loss_db: b.loss_db,
            arm_split: b.arm_split,
            insertion_db: b.insertion_db,
            eff: [e1, e2],
        })
    }

    pub fn budgets(&self) -> Vec<LinkBudget> {
        self.budgets
            .iter()
            .filter_map(|b| b.link.parse().ok())
            .filter_map(|l| self.budget_for(&l))
            .collect()
    }

    pub fn rate_model(&self) -> RateModel {
        RateModel {
            window_ns: self.plan.window_ns,
            detectors: self
                .nodes
                .iter()
                .map(|n| (n.name.clone(), ArmDetector::from(&n.detector)))
                .collect::<BTreeMap<_, _>>(),
        }
    }

    pub fn clock(&self, node: &str) -> Option<ClockModel> {
        let n = self.node(node)?;
        Some(ClockModel {
            node: node.to_string(),
            pps_sigma_ns: n.clock.pps_sigma_ns,
            drift_ns_per_s: n.clock.drift_ns_per_s,
            seed: derive_seed(self.seed, &["clocks"]),
        })
    }

    pub fn bases(&self) -> Vec<Basis> {
        self.plan.bases.iter().filter_map(|b| b.parse().ok()).collect()
    }

    pub fn rsp_task(&self, i: usize) -> Result<RspTask, ConfigError> {
        let r = &self.rsp[i];
        let path = format!("rsp[{i}]");
        let link: LinkId = r
            .link
            .parse()
            .map_err(|_| field(format!("{path}.link"), "bad link id"))?;
        if !self.allocation.links.iter().any(|l| l.link.parse().ok().as_ref() == Some(&link)) {
            return Err(field(format!("{path}.link"), format!("link {} is not allocated", r.link)));
        }
        if !link.nodes().contains(&r.sender.as_str()) {
            return Err(field(
                format!("{path}.sender"),
                format!("{:?} is not a node of link {link}", r.sender),
            ));
        }
        let projection = r
            .projection
            .parse()
            .map_err(|_| field(format!("{path}.projection"), format!("unknown label {:?}", r.projection)))?;
        let target = r
            .target
            .parse()
            .map_err(|_| field(format!("{path}.target"), format!("unknown label {:?}", r.target)))?;
        Ok(RspTask {
            link,
            sender: r.sender.clone(),
            projection,
            target,
        })
    }

    pub fn rsp_tasks(&self) -> Vec<RspTask> {
        (0..self.rsp.len()).filter_map(|i| self.rsp_task(i).ok()).collect()
    }
}

fn describe(v: &Violation) -> String {
    match v {
        Violation::DoubleAssignment { channel, links } => {
            format!("channel {channel} assigned to several links: {}", links.join(", "))
        }
        Violation::SelfLink { link } => format!("link {link} joins a node to itself"),
        Violation::UnknownNode { link, node } => format!("link {link} names unknown node {node:?}"),
        Violation::DuplicateLink { link } => format!("link {link} listed twice"),
    }
}
