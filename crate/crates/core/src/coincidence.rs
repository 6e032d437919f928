//! Cross-correlation of two node streams: delay recovery, windowed
//! coincidence counting and time-shifted accidental estimation.
//!
//! Windows are half-open in time, `-w/2 <= Δt - delay < w/2`, measured in
//! whole clock bins. A window of `w` therefore covers exactly `w / res` bin
//! offsets when `w` is a multiple of the resolution.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timetag::TimetagStream;

pub const ACCIDENTAL_SHIFT_NS: f64 = 100.0;
pub const DEFAULT_NUM_SHIFTS: usize = 8;
pub const MAX_SPAN_BINS: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum CoincidenceError {
    #[error("clock resolutions differ: {0} ps vs {1} ps")]
    ResolutionMismatch(u32, u32),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("shifted accidental windows exceed the stream span")]
    StreamTooShort,
    #[error("setting keys differ between raw counts and accidentals")]
    KeyMismatch,
    #[error("histogram span {0} exceeds {MAX_SPAN_BINS} bins")]
    SpanTooLarge(u64),
    #[error("window {window_ns} ns is narrower than the clock resolution {resolution_ps} ps")]
    WindowTooNarrow { window_ns: f64, resolution_ps: u32 },
    #[error("window {0} ns is too wide for the {ACCIDENTAL_SHIFT_NS} ns accidental shift")]
    WindowTooWide(f64),
    #[error("histogram bin width must be positive")]
    ZeroBinWidth,
}

/// Counts of `t_b - t_a` in clock bins, grouped into `bin_width`-wide cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayHistogram {
    /// delay of the first cell's lower edge, in clock bins
    pub min_delay: i64,
    pub bin_width: u64,
    pub counts: Vec<u64>,
}

impl DelayHistogram {
    pub fn delay_of(&self, cell: usize) -> i64 {
        self.min_delay + cell as i64 * self.bin_width as i64
    }

    pub fn mean(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.counts.iter().sum::<u64>() as f64 / self.counts.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("delay_bins,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{}\n", self.delay_of(i), c));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub delay_bins: i64,
    pub peak: u64,
    /// peak below mean + 5√mean, i.e. not a significant Poisson excess
    pub low_confidence: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceResult {
    pub delay_bins: i64,
    pub window_ns: f64,
    pub raw_coincidences: u64,
    pub accidentals: f64,
    pub integration_s: f64,
    pub raw_rate: f64,
    pub accidental_rate: f64,
    pub net_rate: f64,
    pub low_confidence: bool,
}

impl CoincidenceResult {
    pub fn new(
        delay_bins: i64,
        window_ns: f64,
        raw: u64,
        accidentals: f64,
        integration_s: f64,
        low_confidence: bool,
    ) -> Self {
        let accidentals = accidentals.max(0.0);
        let raw_rate = raw as f64 / integration_s;
        let accidental_rate = accidentals / integration_s;
        Self {
            delay_bins,
            window_ns,
            raw_coincidences: raw,
            accidentals,
            integration_s,
            raw_rate,
            accidental_rate,
            net_rate: (raw_rate - accidental_rate).max(0.0),
            low_confidence,
        }
    }
}

fn check_resolution(a: &TimetagStream, b: &TimetagStream) -> Result<u32, CoincidenceError> {
    if a.clock_resolution_ps != b.clock_resolution_ps {
        return Err(CoincidenceError::ResolutionMismatch(
            a.clock_resolution_ps,
            b.clock_resolution_ps,
        ));
    }
    Ok(a.clock_resolution_ps)
}

/// Histogram of `t_b - t_a` over `[-span_bins, span_bins]`.
///
/// Each event of `a` only visits the `b` events inside its span, found by a
/// pointer that moves monotonically, so the cost is linear in the number of
/// events plus the number of pairs inside the span. The `a` stream is split
/// into chunks that are histogrammed in parallel and summed.
pub fn delay_histogram(
    a: &TimetagStream,
    b: &TimetagStream,
    span_bins: u64,
    bin_width: u64,
) -> Result<DelayHistogram, CoincidenceError> {
    check_resolution(a, b)?;
    if span_bins > MAX_SPAN_BINS {
        return Err(CoincidenceError::SpanTooLarge(span_bins));
    }
    if bin_width == 0 {
        return Err(CoincidenceError::ZeroBinWidth);
    }
    let span = span_bins as i64;
    let width = bin_width as i64;
    let cells = ((2 * span) / width + 1) as usize;
    let tb = b.bins();
    let ta = a.bins();

    let chunk = 1 << 16;
    let counts = ta
        .par_chunks(chunk)
        .map(|part| {
            let mut h = vec![0u64; cells];
            let Some(first) = part.first() else { return h };
            let start = first.saturating_sub(span_bins);
            let mut lo = tb.partition_point(|&t| t < start);
            for &x in part {
                let x = x as i64;
                while lo < tb.len() && (tb[lo] as i64) < x - span {
                    lo += 1;
                }
                let mut j = lo;
                while j < tb.len() && (tb[j] as i64) <= x + span {
                    let cell = ((tb[j] as i64 - x + span) / width) as usize;
                    if cell < cells {
                        h[cell] += 1;
                    }
                    j += 1;
                }
            }
            h
        })
        .reduce(
            || vec![0u64; cells],
            |mut acc, h| {
                acc.iter_mut().zip(h).for_each(|(x, y)| *x += y);
                acc
            },
        );
    Ok(DelayHistogram {
        min_delay: -span,
        bin_width,
        counts,
    })
}

/// Delay of the tallest cell. Ties prefer the smallest |delay|, then the
/// negative side.
pub fn find_offset(hist: &DelayHistogram) -> Result<OffsetEstimate, CoincidenceError> {
    let best = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, hist.delay_of(i)))
        .min_by(|x, y| {
            y.0.cmp(&x.0)
                .then(x.1.abs().cmp(&y.1.abs()))
                .then(x.1.cmp(&y.1))
        })
        .ok_or(CoincidenceError::EmptyHistogram)?;
    let mean = hist.mean();
    Ok(OffsetEstimate {
        delay_bins: best.1,
        peak: best.0,
        low_confidence: (best.0 as f64) < mean + 5.0 * mean.sqrt(),
    })
}

/// Bin offsets `k` (relative to the delay) accepted by a window of `window_ns`.
pub fn window_offsets(window_ns: f64, resolution_ps: u32) -> (i64, i64) {
    let half = window_ns * 1e3 / 2.0 / f64::from(resolution_ps);
    let lo = (-half).ceil() as i64;
    let hi = half.ceil() as i64 - 1;
    (lo, hi.max(lo))
}

/// Delay that centers the window on the correlation peak near `peak_delay`.
///
/// The centroid of the baseline-subtracted histogram within one window of the
/// peak is matched to the middle of the window's bin offsets.
pub fn centered_delay(hist: &DelayHistogram, peak_delay: i64, window_ns: f64, resolution_ps: u32) -> i64 {
    let (lo, hi) = window_offsets(window_ns, resolution_ps);
    let mut sorted = hist.counts.clone();
    sorted.sort_unstable();
    let baseline = sorted.get(sorted.len() / 2).copied().unwrap_or(0) as f64;
    let reach = (hi - lo + 1).max(1);
    let (mut wsum, mut tsum) = (0.0, 0.0);
    for (i, &c) in hist.counts.iter().enumerate() {
        let d = hist.delay_of(i);
        if (d - peak_delay).abs() <= reach {
            let w = (c as f64 - baseline).max(0.0);
            wsum += w;
            tsum += w * (d as f64 + 0.5 * (hist.bin_width as f64 - 1.0));
        }
    }
    if wsum == 0.0 {
        return peak_delay;
    }
    let centroid = tsum / wsum;
    let mid = 0.5 * (lo + hi) as f64;
    (centroid - mid).round() as i64
}

/// One-to-one coincidences with `-w/2 <= (b - a - delay)·res < w/2`.
///
/// Every `a` event's admissible `b` interval has the same length and the
/// intervals start in sorted order, so taking the earliest unused `b` in each
/// interval yields a maximum matching.
pub fn count_coincidences(a: &TimetagStream, b: &TimetagStream, delay_bins: i64, window_ns: f64) -> u64 {
    let (klo, khi) = window_offsets(window_ns, a.clock_resolution_ps);
    let tb = &b.records;
    let mut j = 0usize;
    let mut n = 0u64;
    for ra in &a.records {
        let x = ra.global_bin as i64 + delay_bins;
        let (lo, hi) = (x + klo, x + khi);
        while j < tb.len() && (tb[j].global_bin as i64) < lo {
            j += 1;
        }
        if j < tb.len() && (tb[j].global_bin as i64) <= hi {
            n += 1;
            j += 1;
        }
    }
    n
}

fn shift_bins(resolution_ps: u32) -> i64 {
    (ACCIDENTAL_SHIFT_NS * 1e3 / f64::from(resolution_ps)).round() as i64
}

/// Mean coincidence count over `num_shifts` windows shifted from the
/// correlated peak by multiples of 100 ns.
pub fn estimate_accidentals(
    a: &TimetagStream,
    b: &TimetagStream,
    delay_bins: i64,
    window_ns: f64,
    num_shifts: usize,
) -> Result<f64, CoincidenceError> {
    let res = check_resolution(a, b)?;
    if 10.0 * window_ns > ACCIDENTAL_SHIFT_NS {
        return Err(CoincidenceError::WindowTooWide(window_ns));
    }
    if num_shifts == 0 {
        return Ok(0.0);
    }
    let step = shift_bins(res);
    let furthest = (delay_bins + num_shifts as i64 * step).unsigned_abs();
    if furthest > a.span_bins().max(b.span_bins()) {
        return Err(CoincidenceError::StreamTooShort);
    }
    let total: u64 = (1..=num_shifts as i64)
        .map(|k| count_coincidences(a, b, delay_bins + k * step, window_ns))
        .sum();
    Ok(total as f64 / num_shifts as f64)
}

/// Elementwise `max(raw - accidental, 0)`.
pub fn subtracted_counts<K: Ord + Clone>(
    raw: &BTreeMap<K, f64>,
    accidentals: &BTreeMap<K, f64>,
) -> Result<BTreeMap<K, f64>, CoincidenceError> {
    if raw.len() != accidentals.len() || raw.keys().zip(accidentals.keys()).any(|(x, y)| x != y) {
        return Err(CoincidenceError::KeyMismatch);
    }
    Ok(raw
        .iter()
        .zip(accidentals.values())
        .map(|((k, r), a)| (k.clone(), (r - a).max(0.0)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelateOptions {
    pub window_ns: f64,
    pub span_bins: u64,
    pub num_shifts: usize,
}

impl Default for CorrelateOptions {
    fn default() -> Self {
        Self {
            window_ns: 10.0,
            span_bins: 2_000,
            num_shifts: DEFAULT_NUM_SHIFTS,
        }
    }
}

/// Delay recovery, window centering, counting and accidental estimation.
pub fn correlate(
    a: &TimetagStream,
    b: &TimetagStream,
    integration_s: f64,
    opts: &CorrelateOptions,
) -> Result<(CoincidenceResult, DelayHistogram), CoincidenceError> {
    let res = check_resolution(a, b)?;
    if opts.window_ns * 1e3 < f64::from(res) {
        return Err(CoincidenceError::WindowTooNarrow {
            window_ns: opts.window_ns,
            resolution_ps: res,
        });
    }
    let hist = delay_histogram(a, b, opts.span_bins, 1)?;
    let off = find_offset(&hist)?;
    let delay = centered_delay(&hist, off.delay_bins, opts.window_ns, res);
    let raw = count_coincidences(a, b, delay, opts.window_ns);
    let acc = estimate_accidentals(a, b, delay, opts.window_ns, opts.num_shifts)?;
    Ok((
        CoincidenceResult::new(delay, opts.window_ns, raw, acc, integration_s, off.low_confidence),
        hist,
    ))
}
