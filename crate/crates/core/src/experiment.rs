//! End-to-end runs: per-link compensation scan, tomography schedule,
//! correlation, raw and accidental-subtracted reports, and remote state
//! preparation on top of a finished link run.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::LinkId;
use crate::coincidence::{
    centered_delay, count_coincidences, delay_histogram, estimate_accidentals, find_offset,
    CoincidenceError, DelayHistogram, DEFAULT_NUM_SHIFTS,
};
use crate::config::{ExperimentConfig, RspTask};
use crate::optics::{to_label_frame, AnalyzerSetting, Basis, Label};
use crate::qmath::{
    fidelity_1q, stokes, CMatrix, DensityMatrix1Q, DensityMatrix2Q, Subsystem,
};
use crate::qmath::states::psi_plus;
use crate::rsp::{rsp_predict, RspError, MIN_POSTSELECTED_EVENTS};
use crate::seed::derive_seed;
use crate::source::{mixed_channel_state, ChannelPairSpec};
use crate::timetag::{simulate_link, ClockModel, DetectorModel, LinkSimulation, SimError, TimetagStream};
use crate::tomography::{
    qubit_tomography, sample_posterior, summarize_link, LinkReport, MeasurementRecord,
    SamplerOptions, Stat, TomographyError,
};

/// Delay-histogram half span used for offset recovery (10 µs at 5 ns bins).
pub const DELAY_SPAN_BINS: u64 = 2_000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("link {0} is not configured")]
    UnknownLink(String),
    #[error("link {0} has no assigned channels")]
    NoChannels(String),
    #[error("no significant correlation peak for link {0}")]
    NoCorrelationPeak(String),
    #[error("compensation scan for link {0} shows no D/D modulation")]
    FlatScan(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Coincidence(#[from] CoincidenceError),
    #[error(transparent)]
    Tomography(#[from] TomographyError),
    #[error(transparent)]
    Rsp(#[from] RspError),
}

/// Everything needed to simulate one link.
#[derive(Clone, Debug)]
pub struct LinkSetup {
    pub link: LinkId,
    pub channels: Vec<usize>,
    /// source state in the physical analyzer frame
    pub state: DensityMatrix2Q,
    pub pair_rate: f64,
    pub arm_transmission: [f64; 2],
    pub detectors: [DetectorModel; 2],
    pub clocks: [ClockModel; 2],
    pub fiber_delay_ps: [i64; 2],
}

impl LinkSetup {
    pub fn from_config(cfg: &ExperimentConfig, link: &LinkId, channels: &[usize]) -> Result<Self, ExperimentError> {
        let unknown = || ExperimentError::UnknownLink(link.to_string());
        let specs: Vec<&ChannelPairSpec> = channels
            .iter()
            .map(|c| cfg.source.channels.iter().find(|s| s.index == *c).ok_or_else(unknown))
            .collect::<Result<_, _>>()?;
        let state = mixed_channel_state(&specs).ok_or_else(|| ExperimentError::NoChannels(link.to_string()))?;
        let budget = cfg.budget_for(link).ok_or_else(unknown)?;
        let node = |n: &str| cfg.node(n).ok_or_else(unknown);
        let (n1, n2) = (node(&link.first)?, node(&link.second)?);
        Ok(Self {
            link: link.clone(),
            channels: channels.to_vec(),
            state,
            pair_rate: specs.iter().map(|s| s.pair_rate).sum(),
            arm_transmission: budget.arm_transmission(),
            detectors: [n1.detector.clone(), n2.detector.clone()],
            clocks: [cfg.clock(&link.first).ok_or_else(unknown)?, cfg.clock(&link.second).ok_or_else(unknown)?],
            fiber_delay_ps: [
                (n1.fiber_delay_ns * 1e3).round() as i64,
                (n2.fiber_delay_ns * 1e3).round() as i64,
            ],
        })
    }

    pub fn simulate(
        &self,
        settings: [AnalyzerSetting; 2],
        duration_s: f64,
        resolution_ps: u32,
        seed: u64,
    ) -> Result<(TimetagStream, TimetagStream), SimError> {
        simulate_link(&LinkSimulation {
            rho: &self.state,
            pair_rate: self.pair_rate,
            arm_transmission: self.arm_transmission,
            settings,
            detectors: [&self.detectors[0], &self.detectors[1]],
            clocks: [&self.clocks[0], &self.clocks[1]],
            fiber_delay_ps: self.fiber_delay_ps,
            duration_s,
            resolution_ps,
            seed,
        })
    }
}

/// Least-squares fit of y = a + b·cos 4x + c·sin 4x; returns (argmax x in
/// [0, 90), modulation amplitude).
pub fn fit_dd_scan(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 3 {
        return None;
    }
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for &(x, y) in points {
        let t = 4.0 * x.to_radians();
        let row = [1.0, t.cos(), t.sin()];
        for i in 0..3 {
            aty[i] += row[i] * y;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let sol = solve3(ata, aty)?;
    let amp = sol[1].hypot(sol[2]);
    let x = (sol[2].atan2(sol[1]).to_degrees() / 4.0).rem_euclid(90.0);
    Some((x, amp))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..3 {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    /// (x, D/D coincidences) per scan point
    pub points: Vec<(f64, f64)>,
    pub x_deg: f64,
    pub amplitude: f64,
    pub delay_bins: i64,
}

/// D/D scan over the second node's offset with the first node at x = 0.
pub fn compensation_scan(cfg: &ExperimentConfig, setup: &LinkSetup) -> Result<ScanResult, ExperimentError> {
    let p = &cfg.plan;
    let name = setup.link.to_string();
    let xs: Vec<f64> = (0..p.scan_points).map(|i| 90.0 * i as f64 / p.scan_points as f64).collect();
    let streams = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let seed = derive_seed(cfg.seed, &["scan", &name, &i.to_string()]);
            setup.simulate([Label::D.setting(0.0), Label::D.setting(x)], p.scan_integration_s, p.resolution_ps, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut hist: Option<DelayHistogram> = None;
    for (a, b) in &streams {
        let h = delay_histogram(a, b, DELAY_SPAN_BINS, 1)?;
        match hist.as_mut() {
            Some(acc) => acc.counts.iter_mut().zip(h.counts).for_each(|(x, y)| *x += y),
            None => hist = Some(h),
        }
    }
    let hist = hist.ok_or(CoincidenceError::EmptyHistogram)?;
    let off = find_offset(&hist)?;
    if off.low_confidence {
        return Err(ExperimentError::NoCorrelationPeak(name));
    }
    let delay = centered_delay(&hist, off.delay_bins, p.window_ns, p.resolution_ps);
    let points: Vec<(f64, f64)> = xs
        .iter()
        .zip(&streams)
        .map(|(&x, (a, b))| (x, count_coincidences(a, b, delay, p.window_ns) as f64))
        .collect();
    let (x_deg, amplitude) = fit_dd_scan(&points).ok_or_else(|| ExperimentError::FlatScan(name.clone()))?;
    let total: f64 = points.iter().map(|(_, y)| y).sum();
    // modulation must exceed Poisson noise on the fitted coefficients
    if amplitude < 3.0 * (2.0 * total.max(1.0)).sqrt() / points.len() as f64 {
        return Err(ExperimentError::FlatScan(name));
    }
    Ok(ScanResult {
        points,
        x_deg,
        amplitude,
        delay_bins: delay,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingCounts {
    pub labels: [Label; 2],
    pub raw: u64,
    pub accidentals: f64,
    /// detections per second at each node
    pub singles: [f64; 2],
}

impl SettingCounts {
    pub fn subtracted(&self) -> f64 {
        (self.raw as f64 - self.accidentals).max(0.0)
    }
}

/// Measured label pairs for the requested bases, first node first.
pub fn schedule(bases: &[Basis]) -> Vec<[Label; 2]> {
    bases
        .iter()
        .flat_map(|b| b.labels().into_iter().flat_map(move |x| b.labels().map(|y| [x, y])))
        .collect()
}

/// Streams for one scheduled label pair, the second node compensated by
/// `x_deg`. `run_link` counts exactly these streams.
pub fn setting_streams(
    cfg: &ExperimentConfig,
    setup: &LinkSetup,
    labels: [Label; 2],
    x_deg: f64,
) -> Result<(TimetagStream, TimetagStream), SimError> {
    let p = &cfg.plan;
    let settings = [labels[0].setting(0.0), labels[1].setting(x_deg)];
    let tag = format!("{}{}", labels[0], labels[1]);
    let seed = derive_seed(cfg.seed, &["measure", &setup.link.to_string(), &tag]);
    setup.simulate(settings, p.integration_s, p.resolution_ps, seed)
}

fn measure(
    cfg: &ExperimentConfig,
    setup: &LinkSetup,
    labels: [Label; 2],
    x_deg: f64,
    delay: i64,
) -> Result<(u64, f64, [f64; 2]), ExperimentError> {
    let p = &cfg.plan;
    let (a, b) = setting_streams(cfg, setup, labels, x_deg)?;
    let raw = count_coincidences(&a, &b, delay, p.window_ns);
    let acc = estimate_accidentals(&a, &b, delay, p.window_ns, DEFAULT_NUM_SHIFTS)?;
    let singles = [a.len() as f64 / p.integration_s, b.len() as f64 / p.integration_s];
    Ok((raw, acc, singles))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkOutcome {
    pub link: LinkId,
    pub channels: Vec<usize>,
    pub compensation_x_deg: f64,
    pub delay_bins: i64,
    pub counts: Vec<SettingCounts>,
    /// ground-truth state in the label frame, for simulation studies
    pub true_state: DensityMatrix2Q,
    pub raw: LinkReport,
    pub subtracted: LinkReport,
}

impl LinkOutcome {
    pub fn mean_singles(&self) -> [f64; 2] {
        let n = self.counts.len().max(1) as f64;
        [0, 1].map(|k| self.counts.iter().map(|c| c.singles[k]).sum::<f64>() / n)
    }
}

fn records(counts: &[SettingCounts], integration_s: f64, subtracted: bool) -> Vec<MeasurementRecord> {
    counts
        .iter()
        .map(|c| {
            let n = if subtracted { c.subtracted() } else { c.raw as f64 };
            MeasurementRecord::pair(c.labels[0].frame_setting(), c.labels[1].frame_setting(), n, integration_s)
        })
        .collect()
}

/// Scan, measure every scheduled setting, and reconstruct the link state.
pub fn run_link(cfg: &ExperimentConfig, link: &LinkId, channels: &[usize]) -> Result<LinkOutcome, ExperimentError> {
    let setup = LinkSetup::from_config(cfg, link, channels)?;
    let name = link.to_string();
    let scan = compensation_scan(cfg, &setup)?;
    let xs = [0.0, scan.x_deg];
    let bases = cfg.bases();
    let counts = schedule(&bases)
        .into_iter()
        .map(|labels| {
            let (raw, accidentals, singles) = measure(cfg, &setup, labels, xs[1], scan.delay_bins)?;
            Ok(SettingCounts {
                labels,
                raw,
                accidentals,
                singles,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let t = cfg.plan.integration_s;
    let per_basis = bases.len() as f64 * t;
    let raw_rate = counts.iter().map(|c| c.raw as f64).sum::<f64>() / per_basis;
    let sub_rate = counts.iter().map(SettingCounts::subtracted).sum::<f64>() / per_basis;
    let report = |subtracted: bool, rate: f64| -> Result<LinkReport, ExperimentError> {
        let kind = if subtracted { "subtracted" } else { "raw" };
        let opts = SamplerOptions {
            num_samples: cfg.plan.samples,
            seed: derive_seed(cfg.seed, &["tomography", &name, kind]),
            ..SamplerOptions::default()
        };
        let ens = sample_posterior(&records(&counts, t, subtracted), &opts)?;
        Ok(summarize_link(&ens, rate, &psi_plus()))
    };
    Ok(LinkOutcome {
        link: link.clone(),
        channels: channels.to_vec(),
        compensation_x_deg: scan.x_deg,
        delay_bins: scan.delay_bins,
        true_state: to_label_frame(&setup.state, xs[0], xs[1]),
        raw: report(false, raw_rate)?,
        subtracted: report(true, sub_rate)?,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub schema_version: u32,
    pub integration_s: f64,
    pub window_ns: f64,
    pub bases: Vec<String>,
    pub samples: usize,
    pub crate_version: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkEntry {
    pub link: LinkId,
    pub outcome: Option<LinkOutcome>,
    /// set when this link failed; other links are unaffected
    pub error: Option<String>,
    pub convergence_failure: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub manifest: RunManifest,
    pub links: Vec<LinkEntry>,
}

impl ExperimentReport {
    pub fn outcome(&self, link: &str) -> Option<&LinkOutcome> {
        let id: LinkId = link.parse().ok()?;
        self.links
            .iter()
            .find(|e| e.link.same_pair(&id))
            .and_then(|e| e.outcome.as_ref())
    }

    /// One row per link and data kind (raw, subtracted).
    pub fn table_csv(&self) -> String {
        let mut s = String::from(
            "link,channels,kind,fidelity,fidelity_std,log_negativity,log_negativity_std,ebit_rate,ebit_rate_std,coincidence_rate,singles_1,singles_2\n",
        );
        for e in &self.links {
            let Some(o) = &e.outcome else { continue };
            let chans = o.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
            let singles = o.mean_singles();
            for (kind, r) in [("raw", &o.raw), ("subtracted", &o.subtracted)] {
                s.push_str(&format!(
                    "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.2},{:.2},{:.2},{:.1},{:.1}\n",
                    o.link,
                    chans,
                    kind,
                    r.fidelity.mean,
                    r.fidelity.std,
                    r.log_negativity.mean,
                    r.log_negativity.std,
                    r.ebit_rate.mean,
                    r.ebit_rate.std,
                    r.coincidence_rate,
                    singles[0],
                    singles[1]
                ));
            }
        }
        s
    }
}

/// Runs every allocated link in parallel.
pub fn run_experiment(cfg: &ExperimentConfig) -> ExperimentReport {
    let links: Vec<(LinkId, Vec<usize>)> = cfg
        .allocation
        .links
        .iter()
        .filter_map(|l| Some((l.link.parse().ok()?, l.channels.clone())))
        .collect();
    let entries = links
        .par_iter()
        .map(|(link, chans)| match run_link(cfg, link, chans) {
            Ok(o) => LinkEntry {
                link: link.clone(),
                outcome: Some(o),
                error: None,
                convergence_failure: false,
            },
            Err(e) => LinkEntry {
                link: link.clone(),
                outcome: None,
                convergence_failure: matches!(e, ExperimentError::Tomography(TomographyError::ChainNotConverged(_))),
                error: Some(e.to_string()),
            },
        })
        .collect();
    ExperimentReport {
        manifest: RunManifest {
            seed: cfg.seed,
            schema_version: cfg.schema_version,
            integration_s: cfg.plan.integration_s,
            window_ns: cfg.plan.window_ns,
            bases: cfg.plan.bases.clone(),
            samples: cfg.plan.samples,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        links: entries,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RspReport {
    pub task: RspTask,
    /// post-selected coincidences per receiver label
    pub counts: BTreeMap<Label, u64>,
    pub estimate: DensityMatrix1Q,
    pub prediction: DensityMatrix1Q,
    pub success_probability: f64,
    pub fidelity_target: Stat,
    pub fidelity_prediction: Stat,
    /// fidelity of the estimate with the prediction from the true link state
    pub fidelity_true_prediction: f64,
    /// (S1, S2, S3) per posterior sample
    #[serde(skip)]
    pub stokes_samples: Vec<[f64; 3]>,
}

/// Fixes the sender's analyzer to the task projection, cycles the receiver
/// through H/V/D/A/R/L and reconstructs the post-selected receiver state.
pub fn rsp_execute(cfg: &ExperimentConfig, task: &RspTask, link_run: &LinkOutcome) -> Result<RspReport, ExperimentError> {
    let setup = LinkSetup::from_config(cfg, &link_run.link, &link_run.channels)?;
    let sender = if link_run.link.first == task.sender {
        Subsystem::First
    } else {
        Subsystem::Second
    };
    let xs = [0.0, link_run.compensation_x_deg];
    let name = format!("{}:{}{}", task.link, task.sender, task.projection);
    let mut counts = BTreeMap::new();
    let mut recs = Vec::new();
    for label in Label::ALL {
        let labels = match sender {
            Subsystem::First => [task.projection, label],
            Subsystem::Second => [label, task.projection],
        };
        let settings = [labels[0].setting(xs[0]), labels[1].setting(xs[1])];
        let seed = derive_seed(cfg.seed, &["rsp", &name, &label.to_string()]);
        let (a, b) = setup.simulate(settings, cfg.plan.integration_s, cfg.plan.resolution_ps, seed)?;
        let n = count_coincidences(&a, &b, link_run.delay_bins, cfg.plan.window_ns);
        counts.insert(label, n);
        recs.push(MeasurementRecord::single(label.frame_setting(), n as f64, cfg.plan.integration_s));
    }
    let total: f64 = counts.values().map(|&n| n as f64).sum();
    if total < MIN_POSTSELECTED_EVENTS {
        return Err(RspError::InsufficientCounts(total).into());
    }
    let opts = SamplerOptions {
        num_samples: cfg.plan.samples,
        seed: derive_seed(cfg.seed, &["rsp-tomography", &name]),
        ..SamplerOptions::default()
    };
    let ens = qubit_tomography(&recs, &opts)?;
    let projector = CMatrix::outer(&task.projection.ket());
    let pred = rsp_predict(&link_run.raw.mean_state, &projector, sender)?;
    let truth = rsp_predict(&link_run.true_state, &projector, sender)?;
    let target = DensityMatrix1Q::from_pure(&task.target.ket()).expect("label kets are qubits");
    let fid = |s: &DensityMatrix1Q| fidelity_1q(s, &target);
    let fid_pred = |s: &DensityMatrix1Q| fidelity_1q(s, &pred.state);
    Ok(RspReport {
        task: task.clone(),
        counts,
        fidelity_target: Stat::of(&ens.samples.iter().map(fid).collect::<Vec<_>>()),
        fidelity_prediction: Stat::of(&ens.samples.iter().map(fid_pred).collect::<Vec<_>>()),
        fidelity_true_prediction: fidelity_1q(&ens.mean, &truth.state),
        stokes_samples: ens.samples.iter().map(stokes).collect(),
        estimate: ens.mean,
        prediction: pred.state,
        success_probability: pred.success_probability,
    })
}
