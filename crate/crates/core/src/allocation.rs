//! Flex-grid channel-to-link assignment: validation, rate prediction and
//! exhaustive optimization.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::source::ChannelPairSpec;
use crate::timetag::DetectorModel;

pub const DEFAULT_WINDOW_NS: f64 = 10.0;
pub const MAX_SEARCH_CHANNELS: usize = 10;
pub const MAX_SEARCH_LINKS: usize = 6;

/// A link between two named nodes. The first node is the first tensor slot
/// of the link's two-photon state.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LinkId {
    pub first: String,
    pub second: String,
}

impl LinkId {
    pub fn new(first: &str, second: &str) -> Self {
        Self {
            first: first.to_string(),
            second: second.to_string(),
        }
    }

    pub fn nodes(&self) -> [&str; 2] {
        [&self.first, &self.second]
    }

    /// Same unordered node pair.
    pub fn same_pair(&self, other: &LinkId) -> bool {
        (self.first == other.first && self.second == other.second)
            || (self.first == other.second && self.second == other.first)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.second)
    }
}

impl FromStr for LinkId {
    type Err = AllocationError;
    fn from_str(s: &str) -> Result<Self, AllocationError> {
        let parts: Vec<&str> = s.split(['-', '–']).map(str::trim).collect();
        match parts.as_slice() {
            [a, b] if !a.is_empty() && !b.is_empty() => Ok(LinkId::new(a, b)),
            _ => Err(AllocationError::BadLinkId(s.to_string())),
        }
    }
}

impl TryFrom<String> for LinkId {
    type Error = AllocationError;
    fn try_from(s: String) -> Result<Self, AllocationError> {
        s.parse()
    }
}

impl From<LinkId> for String {
    fn from(l: LinkId) -> String {
        l.to_string()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocationError {
    #[error("link id {0:?} is not of the form \"X-Y\"")]
    BadLinkId(String),
    #[error("invalid allocation: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("no allocation satisfies the objective")]
    Infeasible,
    #[error("search space too large: {channels} channels, {links} links")]
    SearchTooLarge { channels: usize, links: usize },
    #[error("no budget for link {0}")]
    MissingBudget(String),
    #[error("no source spec for channel {0}")]
    MissingChannel(usize),
    #[error("invalid link budget for {link}: {reason}")]
    BadBudget { link: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DoubleAssignment { channel: usize, links: Vec<String> },
    SelfLink { link: String },
    UnknownNode { link: String, node: String },
    DuplicateLink { link: String },
}

/// Channels routed to each link. Link order defines the link index used by
/// the optimizer's tie-break.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelAllocation {
    pub links: Vec<(LinkId, Vec<usize>)>,
}

impl ChannelAllocation {
    pub fn new(links: Vec<(LinkId, Vec<usize>)>) -> Self {
        Self { links }
    }

    pub fn link_ids(&self) -> Vec<LinkId> {
        self.links.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn channels_of(&self, link: &LinkId) -> &[usize] {
        self.links
            .iter()
            .find(|(l, _)| l == link)
            .map_or(&[], |(_, c)| c.as_slice())
    }

    /// Assignment vector over channels `1..=num_channels`: 0 for unassigned,
    /// link index + 1 otherwise (first link wins if double-assigned).
    pub fn to_vector(&self, num_channels: usize) -> Vec<usize> {
        let mut v = vec![0; num_channels];
        for (k, (_, chans)) in self.links.iter().enumerate() {
            for &c in chans {
                if (1..=num_channels).contains(&c) && v[c - 1] == 0 {
                    v[c - 1] = k + 1;
                }
            }
        }
        v
    }

    pub fn from_vector(links: &[LinkId], v: &[usize]) -> Self {
        Self {
            links: links
                .iter()
                .enumerate()
                .map(|(k, l)| {
                    let chans = v
                        .iter()
                        .enumerate()
                        .filter(|(_, &x)| x == k + 1)
                        .map(|(i, _)| i + 1)
                        .collect();
                    (l.clone(), chans)
                })
                .collect(),
        }
    }
}

/// Violations of the allocation invariants; empty when valid.
pub fn validate(alloc: &ChannelAllocation, nodes: &[String]) -> Vec<Violation> {
    let known: BTreeSet<&str> = nodes.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for (i, (link, _)) in alloc.links.iter().enumerate() {
        if link.first == link.second {
            out.push(Violation::SelfLink { link: link.to_string() });
        }
        for n in link.nodes() {
            if !known.contains(n) {
                out.push(Violation::UnknownNode {
                    link: link.to_string(),
                    node: n.to_string(),
                });
            }
        }
        if alloc.links[..i].iter().any(|(l, _)| l.same_pair(link)) {
            out.push(Violation::DuplicateLink { link: link.to_string() });
        }
    }
    let mut owners: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (link, chans) in &alloc.links {
        let mut seen = BTreeSet::new();
        for &c in chans {
            if seen.insert(c) {
                owners.entry(c).or_default().push(link.to_string());
            }
        }
    }
    for (channel, links) in owners {
        if links.len() > 1 {
            out.push(Violation::DoubleAssignment { channel, links });
        }
    }
    out
}

/// Fiber, insertion and detector budget of one link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub link: LinkId,
    /// patch-to-patch fiber loss of the whole link
    pub loss_db: f64,
    /// fraction of `loss_db` on the first node's arm
    pub arm_split: f64,
    /// per-arm loss outside the fiber plant (WSS, analyzer, coupling)
    #[serde(default)]
    pub insertion_db: [f64; 2],
    pub eff: [f64; 2],
}

impl LinkBudget {
    pub fn validate(&self) -> Result<(), AllocationError> {
        let bad = |reason: &str| AllocationError::BadBudget {
            link: self.link.to_string(),
            reason: reason.to_string(),
        };
        if !(self.loss_db >= 0.0) || self.insertion_db.iter().any(|x| !(*x >= 0.0)) {
            return Err(bad("losses must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.arm_split) {
            return Err(bad("arm_split outside [0, 1]"));
        }
        if self.eff.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(bad("efficiencies must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Optical transmission of each arm, detector efficiency excluded.
    pub fn arm_transmission(&self) -> [f64; 2] {
        let split = [self.arm_split, 1.0 - self.arm_split];
        [0, 1].map(|k| 10f64.powf(-(self.loss_db * split[k] + self.insertion_db[k]) / 10.0))
    }
}

/// Detector effects beyond efficiency that shape predicted rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmDetector {
    pub gate_duty: f64,
    pub dead_time_s: f64,
    pub dark_rate_hz: f64,
}

impl ArmDetector {
    pub fn ideal() -> Self {
        Self {
            gate_duty: 1.0,
            dead_time_s: 0.0,
            dark_rate_hz: 0.0,
        }
    }
}

impl From<&DetectorModel> for ArmDetector {
    fn from(d: &DetectorModel) -> Self {
        Self {
            gate_duty: d.gate_duty(),
            dead_time_s: d.dead_time_us * 1e-6,
            dark_rate_hz: d.dark_rate_hz,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub window_ns: f64,
    /// keyed by node name; missing nodes are treated as ideal
    pub detectors: BTreeMap<String, ArmDetector>,
}

impl Default for RateModel {
    fn default() -> Self {
        Self {
            window_ns: DEFAULT_WINDOW_NS,
            detectors: BTreeMap::new(),
        }
    }
}

impl RateModel {
    fn arm(&self, node: &str) -> ArmDetector {
        self.detectors.get(node).copied().unwrap_or_else(ArmDetector::ideal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPrediction {
    pub link: LinkId,
    pub channels: Vec<usize>,
    pub pair_rate: f64,
    /// singles per node under one analyzer setting
    pub singles: [f64; 2],
    /// true coincidences summed over the four settings of a basis, per second
    pub coincidence_rate: f64,
    /// accidentals summed over the four settings of a basis, per second
    pub accidental_rate: f64,
    pub visibility: f64,
    pub fidelity: f64,
    pub log_negativity: f64,
    pub ebit_rate: f64,
}

/// Werner log-negativity log2((1 + 3v)/2), zero for v ≤ 1/3.
pub fn werner_log_negativity(v: f64) -> f64 {
    if v <= 1.0 / 3.0 {
        0.0
    } else {
        ((1.0 + 3.0 * v) / 2.0).log2()
    }
}

/// Werner-equivalent visibility of a rate-weighted channel mixture after
/// the best common phase compensation.
pub fn compensated_visibility(specs: &[&ChannelPairSpec]) -> f64 {
    let total: f64 = specs.iter().map(|s| s.pair_rate).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let (mut wv, mut re, mut im) = (0.0, 0.0, 0.0);
    for s in specs {
        let w = s.pair_rate / total;
        let phi = s.bell_phase_deg.to_radians();
        wv += w * s.visibility;
        re += w * s.visibility * phi.cos();
        im += w * s.visibility * phi.sin();
    }
    let fidelity = 0.25 * (1.0 - wv) + 0.5 * wv + 0.5 * re.hypot(im);
    (4.0 * fidelity - 1.0) / 3.0
}

/// Analytic rates for every link of `alloc`.
pub fn predicted_link_rates(
    alloc: &ChannelAllocation,
    specs: &[ChannelPairSpec],
    budgets: &[LinkBudget],
    model: &RateModel,
) -> Result<Vec<LinkPrediction>, AllocationError> {
    let by_index: BTreeMap<usize, &ChannelPairSpec> = specs.iter().map(|s| (s.index, s)).collect();
    alloc
        .links
        .iter()
        .map(|(link, chans)| {
            let budget = budgets
                .iter()
                .find(|b| &b.link == link)
                .ok_or_else(|| AllocationError::MissingBudget(link.to_string()))?;
            let assigned = chans
                .iter()
                .map(|c| by_index.get(c).copied().ok_or(AllocationError::MissingChannel(*c)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(predict_link(link, chans, &assigned, budget, model))
        })
        .collect()
}

fn predict_link(
    link: &LinkId,
    chans: &[usize],
    assigned: &[&ChannelPairSpec],
    budget: &LinkBudget,
    model: &RateModel,
) -> LinkPrediction {
    let pair_rate: f64 = assigned.iter().map(|s| s.pair_rate).sum();
    let t = budget.arm_transmission();
    let arms = [model.arm(&link.first), model.arm(&link.second)];
    let mut singles = [0.0; 2];
    let mut survive = [0.0; 2];
    for k in 0..2 {
        let q = t[k] * budget.eff[k] * arms[k].gate_duty;
        // half the photons pass a polarization analyzer
        let incident = 0.5 * pair_rate * q + arms[k].dark_rate_hz * arms[k].gate_duty;
        let live = 1.0 / (1.0 + incident * arms[k].dead_time_s);
        singles[k] = incident * live;
        survive[k] = q * live;
    }
    let coincidence_rate = pair_rate * survive[0] * survive[1];
    let accidental_rate = 4.0 * singles[0] * singles[1] * model.window_ns * 1e-9;
    let v0 = compensated_visibility(assigned);
    let total = coincidence_rate + accidental_rate;
    let visibility = if total > 0.0 { v0 * coincidence_rate / total } else { 0.0 };
    let log_negativity = werner_log_negativity(visibility);
    LinkPrediction {
        link: link.clone(),
        channels: chans.to_vec(),
        pair_rate,
        singles,
        coincidence_rate,
        accidental_rate,
        visibility,
        fidelity: (1.0 + 3.0 * visibility) / 4.0,
        log_negativity,
        ebit_rate: log_negativity * total,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    MaxMinRe,
    MaxTotalRe,
    /// maximize total R_E with every link served at fidelity ≥ floor
    MinFidelityFloor { floor: f64 },
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max-min-re" => Ok(Objective::MaxMinRe),
            "max-total-re" => Ok(Objective::MaxTotalRe),
            _ => s
                .strip_prefix("min-fidelity-floor=")
                .and_then(|f| f.parse().ok())
                .map(|floor| Objective::MinFidelityFloor { floor })
                .ok_or_else(|| {
                    format!("unknown objective {s:?}; expected max-min-re, max-total-re or min-fidelity-floor=F")
                }),
        }
    }
}

/// Objective value, or `None` when the candidate violates a constraint.
pub fn objective_value(objective: Objective, preds: &[LinkPrediction]) -> Option<f64> {
    match objective {
        Objective::MaxMinRe => Some(preds.iter().map(|p| p.ebit_rate).fold(f64::INFINITY, f64::min))
            .map(|v| if v.is_finite() { v } else { 0.0 }),
        Objective::MaxTotalRe => Some(preds.iter().map(|p| p.ebit_rate).sum()),
        Objective::MinFidelityFloor { floor } => preds
            .iter()
            .all(|p| !p.channels.is_empty() && p.fidelity >= floor)
            .then(|| preds.iter().map(|p| p.ebit_rate).sum()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub value: f64,
    pub assigned: usize,
    pub vector: Vec<usize>,
}

/// Total order: higher value, then fewer assigned channels, then the
/// lexicographically smaller vector. `Less` means better.
pub fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then(a.assigned.cmp(&b.assigned))
        .then_with(|| a.vector.cmp(&b.vector))
}

fn decode(mut idx: u64, base: u64, len: usize) -> Vec<usize> {
    let mut v = vec![0usize; len];
    for slot in v.iter_mut().rev() {
        *slot = (idx % base) as usize;
        idx /= base;
    }
    v
}

/// Exhaustive search over all (links + 1)^channels assignments.
pub fn optimize(
    objective: Objective,
    specs: &[ChannelPairSpec],
    budgets: &[LinkBudget],
    links: &[LinkId],
    model: &RateModel,
) -> Result<ChannelAllocation, AllocationError> {
    let channels = specs.len();
    if channels > MAX_SEARCH_CHANNELS || links.len() > MAX_SEARCH_LINKS {
        return Err(AllocationError::SearchTooLarge {
            channels,
            links: links.len(),
        });
    }
    let mut sorted: Vec<&ChannelPairSpec> = specs.iter().collect();
    sorted.sort_by_key(|s| s.index);
    let link_budgets = links
        .iter()
        .map(|l| {
            let b = budgets
                .iter()
                .find(|b| &b.link == l)
                .ok_or_else(|| AllocationError::MissingBudget(l.to_string()))?;
            b.validate()?;
            Ok(b)
        })
        .collect::<Result<Vec<_>, AllocationError>>()?;

    let base = links.len() as u64 + 1;
    let total = base.pow(channels as u32);
    let evaluate = |idx: u64| -> Option<Candidate> {
        let vector = decode(idx, base, channels);
        let preds: Vec<LinkPrediction> = links
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let assigned: Vec<&ChannelPairSpec> = vector
                    .iter()
                    .zip(&sorted)
                    .filter(|(&x, _)| x == k + 1)
                    .map(|(_, s)| *s)
                    .collect();
                let chans: Vec<usize> = assigned.iter().map(|s| s.index).collect();
                predict_link(l, &chans, &assigned, link_budgets[k], model)
            })
            .collect();
        let value = objective_value(objective, &preds)?;
        Some(Candidate {
            value,
            assigned: vector.iter().filter(|&&x| x != 0).count(),
            vector,
        })
    };
    let best = (0..total)
        .into_par_iter()
        .filter_map(evaluate)
        .reduce_with(|a, b| if rank(&a, &b) == Ordering::Greater { b } else { a })
        .ok_or(AllocationError::Infeasible)?;

    let mut alloc = ChannelAllocation::from_vector(links, &vec![0; channels]);
    for (k, (_, chans)) in alloc.links.iter_mut().enumerate() {
        *chans = best
            .vector
            .iter()
            .zip(&sorted)
            .filter(|(&x, _)| x == k + 1)
            .map(|(_, s)| s.index)
            .collect();
    }
    Ok(alloc)
}
