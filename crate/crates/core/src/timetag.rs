//! Per-node detection streams: GPS-disciplined clock model, detector
//! response (efficiency, jitter, gating, dead time, dark counts), the
//! photon-pair link simulator, and the QLTT binary interchange format.
//!
//! Internally all times are integer picoseconds. Streams are binned to the
//! TDC resolution (5 ns by default) only when emitted.

use std::io::{self, Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::AnalyzerSetting;
use crate::qmath::{kron, CMatrix, DensityMatrix2Q};
use crate::seed::{derive_seed, rng_for, splitmix64};
use crate::source::sample_poisson;

pub const PS_PER_S: f64 = 1e12;
pub const DEFAULT_RESOLUTION_PS: u32 = 5_000;
pub const MAX_DURATION_S: f64 = 3600.0;

const MAGIC: &[u8; 4] = b"QLTT";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("duration {0} s outside (0, 3600]")]
    InvalidDuration(f64),
    #[error("detector model mismatch: {0}")]
    ModelMismatch(String),
    #[error("event times are not sorted")]
    UnsortedInput,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"QLTT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported QLTT version {0}")]
    UnsupportedVersion(u16),
    #[error("file ends before the declared content")]
    TruncatedFile,
    #[error("records are not sorted by global bin")]
    UnsortedRecords,
    #[error("node id is not valid UTF-8")]
    BadNodeId,
    #[error("clock resolution must be positive")]
    ZeroResolution,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-node 1-PPS disciplined clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub node: String,
    /// std of the per-second offset against true time
    pub pps_sigma_ns: f64,
    /// linear drift accumulated within each second
    #[serde(default)]
    pub drift_ns_per_s: f64,
    pub seed: u64,
}

impl ClockModel {
    pub fn ideal(node: &str) -> Self {
        Self {
            node: node.to_string(),
            pps_sigma_ns: 0.0,
            drift_ns_per_s: 0.0,
            seed: 0,
        }
    }

    /// Per-node σ such that two identical receivers show `pairwise_ns` jitter.
    pub fn per_node_sigma(pairwise_ns: f64) -> f64 {
        pairwise_ns / std::f64::consts::SQRT_2
    }

    /// Offset (ns) at local time `t_ps`.
    pub fn offset_at_ps(&self, t_ps: i64) -> f64 {
        let second = t_ps.div_euclid(1_000_000_000_000);
        let frac = t_ps.rem_euclid(1_000_000_000_000) as f64 / PS_PER_S;
        sample_clock_offset(self, second.max(0) as u64) + self.drift_ns_per_s * frac
    }
}

/// Gaussian 1-PPS offset (ns) of `model` during second `second_index`.
/// Deterministic in (seed, node, second).
pub fn sample_clock_offset(model: &ClockModel, second_index: u64) -> f64 {
    if model.pps_sigma_ns == 0.0 {
        return 0.0;
    }
    let base = derive_seed(model.seed, &["clock", &model.node]);
    let mut rng: ChaCha8Rng =
        rand::SeedableRng::seed_from_u64(splitmix64(base ^ splitmix64(second_index)));
    let z: f64 = StandardNormal.sample(&mut rng);
    z * model.pps_sigma_ns
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Snspd,
    GatedApd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub rate_mhz: f64,
    pub window_ns: f64,
}

impl Gate {
    pub fn period_ps(&self) -> f64 {
        1e6 / self.rate_mhz
    }

    pub fn duty_cycle(&self) -> f64 {
        (self.window_ns * 1e3 / self.period_ps()).min(1.0)
    }

    /// Open iff within window/2 of the nearest comb tick.
    pub fn is_open(&self, t_ps: i64) -> bool {
        let period = self.period_ps();
        let phase = (t_ps as f64).rem_euclid(period);
        let dist = phase.min(period - phase);
        dist <= 0.5 * self.window_ns * 1e3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    pub efficiency: f64,
    pub dead_time_us: f64,
    /// Gaussian timing jitter std
    pub jitter_ps: f64,
    #[serde(default)]
    pub gate: Option<Gate>,
    #[serde(default)]
    pub dark_rate_hz: f64,
}

impl DetectorModel {
    pub fn ideal() -> Self {
        Self {
            kind: DetectorKind::Snspd,
            efficiency: 1.0,
            dead_time_us: 0.0,
            jitter_ps: 0.0,
            gate: None,
            dark_rate_hz: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match (self.kind, &self.gate) {
            (DetectorKind::GatedApd, None) => {
                return Err(SimError::ModelMismatch("gated_apd requires a gate".into()))
            }
            (DetectorKind::Snspd, Some(_)) => {
                return Err(SimError::ModelMismatch("snspd must not have a gate".into()))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(SimError::InvalidParameter("efficiency outside [0, 1]".into()));
        }
        if self.dead_time_us < 0.0 || self.jitter_ps < 0.0 || self.dark_rate_hz < 0.0 {
            return Err(SimError::InvalidParameter(
                "dead time, jitter and dark rate must be non-negative".into(),
            ));
        }
        if let Some(g) = &self.gate {
            if g.rate_mhz <= 0.0 || g.window_ns <= 0.0 {
                return Err(SimError::InvalidParameter("gate rate and window must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn gate_duty(&self) -> f64 {
        self.gate.map_or(1.0, |g| g.duty_cycle())
    }

    pub fn dead_time_ps(&self) -> u64 {
        (self.dead_time_us * 1e6).round() as u64
    }
}

/// One detection: assembled global time bin plus detector channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Record {
    pub global_bin: u64,
    pub detector_channel: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimetagStream {
    pub node: String,
    pub clock_resolution_ps: u32,
    pub records: Vec<Record>,
}

impl TimetagStream {
    pub fn new(node: &str, clock_resolution_ps: u32) -> Self {
        Self {
            node: node.to_string(),
            clock_resolution_ps,
            records: Vec::new(),
        }
    }

    /// Bins sorted picosecond times into a stream on `channel`.
    pub fn from_times_ps(node: &str, resolution_ps: u32, times_ps: &[i64], channel: u8) -> Self {
        let res = i64::from(resolution_ps);
        let records = times_ps
            .iter()
            .filter(|&&t| t >= 0)
            .map(|&t| Record {
                global_bin: (t / res) as u64,
                detector_channel: channel,
            })
            .collect();
        Self {
            node: node.to_string(),
            clock_resolution_ps: resolution_ps,
            records,
        }
    }

    pub fn is_sorted(&self) -> bool {
        self.records.windows(2).all(|w| w[0].global_bin <= w[1].global_bin)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn bins(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.global_bin).collect()
    }

    /// Span between first and last record, in bins.
    pub fn span_bins(&self) -> u64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.global_bin - a.global_bin,
            _ => 0,
        }
    }
}

/// Non-paralyzable dead time: an event is kept iff it arrives at least
/// `dead_time_ps` after the previous kept event.
pub fn apply_dead_time(events: &[i64], dead_time_ps: u64) -> Result<Vec<i64>, SimError> {
    if events.windows(2).any(|w| w[0] > w[1]) {
        return Err(SimError::UnsortedInput);
    }
    if dead_time_ps == 0 {
        return Ok(events.to_vec());
    }
    let dead = dead_time_ps as i64;
    let mut out = Vec::with_capacity(events.len());
    let mut last: Option<i64> = None;
    for &t in events {
        if last.is_none_or(|l| t - l >= dead) {
            out.push(t);
            last = Some(t);
        }
    }
    Ok(out)
}

/// Everything needed to simulate one link under one pair of analyzer settings.
#[derive(Clone, Debug)]
pub struct LinkSimulation<'a> {
    pub rho: &'a DensityMatrix2Q,
    /// generated pairs per second routed to this link
    pub pair_rate: f64,
    /// optical transmission of each arm, detector efficiency excluded
    pub arm_transmission: [f64; 2],
    pub settings: [AnalyzerSetting; 2],
    pub detectors: [&'a DetectorModel; 2],
    pub clocks: [&'a ClockModel; 2],
    /// source-to-detector propagation delay of each arm
    pub fiber_delay_ps: [i64; 2],
    pub duration_s: f64,
    pub resolution_ps: u32,
    pub seed: u64,
}

/// Probabilities (both pass, first passes, second passes) for the analyzer pair.
fn pass_probabilities(rho: &DensityMatrix2Q, s: &[AnalyzerSetting; 2]) -> (f64, f64, f64) {
    let p1 = s[0].projector();
    let p2 = s[1].projector();
    let i2 = CMatrix::identity(2);
    let m = rho.matrix();
    let both = (m * &kron(&p1, &p2)).trace().re.clamp(0.0, 1.0);
    let first = (m * &kron(&p1, &i2)).trace().re.clamp(0.0, 1.0);
    let second = (m * &kron(&i2, &p2)).trace().re.clamp(0.0, 1.0);
    (both, first.max(both), second.max(both))
}

fn uniform_times(rng: &mut ChaCha8Rng, count: usize, duration_ps: f64) -> Vec<i64> {
    (0..count)
        .map(|_| (rng.random::<f64>() * duration_ps) as i64)
        .collect()
}

/// Applies jitter and clock offset, dark counts, gating and dead time for
/// one node, returning sorted local picosecond times.
fn detect(
    arrivals: Vec<i64>,
    det: &DetectorModel,
    clock: &ClockModel,
    duration_ps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<i64>, SimError> {
    let jitter = Normal::new(0.0, det.jitter_ps.max(0.0))
        .map_err(|e| SimError::InvalidParameter(e.to_string()))?;
    let seconds = (duration_ps / PS_PER_S).ceil() as u64 + 2;
    let offsets: Vec<f64> = (0..seconds).map(|s| sample_clock_offset(clock, s)).collect();
    let mut local: Vec<i64> = arrivals
        .into_iter()
        .map(|t| {
            let j = if det.jitter_ps > 0.0 { jitter.sample(rng) } else { 0.0 };
            let s = t.div_euclid(1_000_000_000_000).clamp(0, seconds as i64 - 1) as usize;
            let frac = t.rem_euclid(1_000_000_000_000) as f64 / PS_PER_S;
            let off_ps = (offsets[s] + clock.drift_ns_per_s * frac) * 1e3;
            t + (j + off_ps).round() as i64
        })
        .collect();
    let darks = sample_poisson(rng, det.dark_rate_hz * duration_ps / PS_PER_S) as usize;
    local.extend(uniform_times(rng, darks, duration_ps));
    if let Some(g) = &det.gate {
        local.retain(|&t| g.is_open(t));
    }
    local.sort_unstable();
    apply_dead_time(&local, det.dead_time_ps())
}

/// Simulates a link's two detection streams.
///
/// Pair emissions form a homogeneous Poisson process. Each pair's joint
/// analyzer outcome is drawn from the two-photon distribution, then each
/// transmitted photon independently survives its arm. Because the thinning
/// of a Poisson process by independent marks yields independent Poisson
/// processes, the three detectable classes (both photons, first only, second
/// only) are sampled directly as independent processes with the combined
/// rates; undetected pairs are never materialized.
pub fn simulate_link(sim: &LinkSimulation<'_>) -> Result<(TimetagStream, TimetagStream), SimError> {
    if !(sim.duration_s > 0.0 && sim.duration_s <= MAX_DURATION_S) {
        return Err(SimError::InvalidDuration(sim.duration_s));
    }
    for d in sim.detectors {
        d.validate()?;
    }
    if sim.resolution_ps == 0 {
        return Err(SimError::InvalidParameter("clock resolution must be positive".into()));
    }
    if sim.pair_rate < 0.0 || sim.arm_transmission.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(SimError::InvalidParameter(
            "pair rate must be non-negative and transmissions in [0, 1]".into(),
        ));
    }
    let duration_ps = sim.duration_s * PS_PER_S;
    let (both, first, second) = pass_probabilities(sim.rho, &sim.settings);
    let s1 = sim.arm_transmission[0] * sim.detectors[0].efficiency;
    let s2 = sim.arm_transmission[1] * sim.detectors[1].efficiency;
    let rate_both = sim.pair_rate * both * s1 * s2;
    let rate_first = (sim.pair_rate * (first * s1 - both * s1 * s2)).max(0.0);
    let rate_second = (sim.pair_rate * (second * s2 - both * s1 * s2)).max(0.0);

    let mut emit = rng_for(sim.seed, &["emission"]);
    let n_both = sample_poisson(&mut emit, rate_both * sim.duration_s) as usize;
    let n_first = sample_poisson(&mut emit, rate_first * sim.duration_s) as usize;
    let n_second = sample_poisson(&mut emit, rate_second * sim.duration_s) as usize;
    let pairs = uniform_times(&mut emit, n_both, duration_ps);

    let mut arrivals = [Vec::new(), Vec::new()];
    for (k, arr) in arrivals.iter_mut().enumerate() {
        let extra = if k == 0 { n_first } else { n_second };
        arr.reserve(pairs.len() + extra);
        arr.extend(pairs.iter().map(|t| t + sim.fiber_delay_ps[k]));
        let singles = uniform_times(&mut emit, extra, duration_ps);
        arr.extend(singles.into_iter().map(|t| t + sim.fiber_delay_ps[k]));
    }

    let [a0, a1] = arrivals;
    let mut out = Vec::with_capacity(2);
    for (k, arr) in [a0, a1].into_iter().enumerate() {
        let mut rng = rng_for(sim.seed, &["detector", &k.to_string()]);
        let times = detect(arr, sim.detectors[k], sim.clocks[k], duration_ps, &mut rng)?;
        out.push(TimetagStream::from_times_ps(
            &sim.clocks[k].node,
            sim.resolution_ps,
            &times,
            0,
        ));
    }
    let b = out.pop().expect("two streams");
    let a = out.pop().expect("two streams");
    Ok((a, b))
}

/// Serializes a stream in QLTT format.
pub fn write_stream<W: Write>(stream: &TimetagStream, mut w: W) -> Result<(), FormatError> {
    if !stream.is_sorted() {
        return Err(FormatError::UnsortedRecords);
    }
    if stream.clock_resolution_ps == 0 {
        return Err(FormatError::ZeroResolution);
    }
    let node = stream.node.as_bytes();
    let node_len = u16::try_from(node.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "node id too long"))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&node_len.to_le_bytes())?;
    w.write_all(node)?;
    w.write_all(&stream.clock_resolution_ps.to_le_bytes())?;
    w.write_all(&(stream.records.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(9 * 4096);
    for chunk in stream.records.chunks(4096) {
        buf.clear();
        for r in chunk {
            buf.extend_from_slice(&r.global_bin.to_le_bytes());
            buf.push(r.detector_channel);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::TruncatedFile,
        _ => FormatError::Io(e),
    })
}

/// Parses a QLTT stream.
pub fn read_stream<R: Read>(mut r: R) -> Result<TimetagStream, FormatError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let mut b2 = [0u8; 2];
    read_exact_or_truncated(&mut r, &mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    read_exact_or_truncated(&mut r, &mut b2)?;
    let mut node = vec![0u8; usize::from(u16::from_le_bytes(b2))];
    read_exact_or_truncated(&mut r, &mut node)?;
    let node = String::from_utf8(node).map_err(|_| FormatError::BadNodeId)?;
    let mut b4 = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut b4)?;
    let resolution = u32::from_le_bytes(b4);
    if resolution == 0 {
        return Err(FormatError::ZeroResolution);
    }
    let mut b8 = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut b8)?;
    let count = u64::from_le_bytes(b8);

    let mut records = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; 9];
    let mut prev = 0u64;
    for _ in 0..count {
        read_exact_or_truncated(&mut r, &mut rec)?;
        let global_bin = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        if global_bin < prev {
            return Err(FormatError::UnsortedRecords);
        }
        prev = global_bin;
        records.push(Record {
            global_bin,
            detector_channel: rec[8],
        });
    }
    Ok(TimetagStream {
        node,
        clock_resolution_ps: resolution,
        records,
    })
}

pub fn stream_to_bytes(stream: &TimetagStream) -> Result<Vec<u8>, FormatError> {
    let mut v = Vec::with_capacity(32 + 9 * stream.records.len());
    write_stream(stream, &mut v)?;
    Ok(v)
}
