//! The eight-channel entangled-pair source: ITU grid mapping, per-channel
//! polarization state and brightness, joint spectral intensity and CAR.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qmath::{states, DensityMatrix2Q};
use crate::seed::rng_for;

/// One grid unit is 12.5 GHz; all grid arithmetic is done in these units.
pub const GRID_UNIT_THZ: f64 = 0.0125;

/// Per-channel fidelities against Ψ+ measured locally at the source.
pub const CHARACTERIZED_FIDELITIES: [f64; 8] =
    [0.952, 0.948, 0.942, 0.935, 0.944, 0.949, 0.943, 0.947];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("channel index {0} out of range 1..={1}")]
    IndexOutOfRange(usize, usize),
    #[error("no accidental counts in mismatched bins; CAR undefined")]
    DivisionByZeroAccidentals,
    #[error("grid spacing must be an even number of 12.5 GHz units, got {0}")]
    OddSpacing(i64),
    #[error("invalid channel spec for channel {index}: {reason}")]
    InvalidSpec { index: usize, reason: String },
}

/// Frequency grid symmetric about half the pump frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGrid {
    /// ω0/2π in 12.5 GHz units.
    pub center_units: i64,
    /// Channel width in 12.5 GHz units.
    pub spacing_units: i64,
    pub num_pairs: usize,
}

impl Default for ChannelGrid {
    fn default() -> Self {
        // 192.3125 THz, 25 GHz channels
        Self {
            center_units: 15_385,
            spacing_units: 2,
            num_pairs: 8,
        }
    }
}

impl ChannelGrid {
    fn check(&self, n: usize) -> Result<i64, SourceError> {
        if self.spacing_units % 2 != 0 {
            return Err(SourceError::OddSpacing(self.spacing_units));
        }
        if n == 0 || n > self.num_pairs {
            return Err(SourceError::IndexOutOfRange(n, self.num_pairs));
        }
        Ok(self.spacing_units / 2 * (2 * n as i64 - 1))
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        if self.spacing_units % 2 != 0 {
            return Err(SourceError::OddSpacing(self.spacing_units));
        }
        Ok(())
    }

    /// (signal, idler) in grid units.
    pub fn channel_units(&self, n: usize) -> Result<(i64, i64), SourceError> {
        let offset = self.check(n)?;
        Ok((self.center_units + offset, self.center_units - offset))
    }

    /// (signal, idler) in THz.
    pub fn channel_frequencies(&self, n: usize) -> Result<(f64, f64), SourceError> {
        let (s, i) = self.channel_units(n)?;
        Ok((s as f64 * GRID_UNIT_THZ, i as f64 * GRID_UNIT_THZ))
    }
}

/// (signal, idler) THz for channel `n` on the default grid.
pub fn channel_frequencies(n: usize) -> Result<(f64, f64), SourceError> {
    ChannelGrid::default().channel_frequencies(n)
}

/// Brightness and polarization quality of one frequency-conjugate pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPairSpec {
    pub index: usize,
    /// generated pairs per second
    pub pair_rate: f64,
    /// residual φ in (|HV⟩ + e^{iφ}|VH⟩)/√2
    #[serde(default)]
    pub bell_phase_deg: f64,
    /// weight of the Bell state against white noise
    pub visibility: f64,
    /// leakage into the (n, n−1) JSI bin
    #[serde(default)]
    pub crosstalk_fraction: f64,
}

impl ChannelPairSpec {
    pub fn validate(&self) -> Result<(), SourceError> {
        let bad = |reason: &str| {
            Err(SourceError::InvalidSpec {
                index: self.index,
                reason: reason.to_string(),
            })
        };
        if !(self.pair_rate >= 0.0 && self.pair_rate.is_finite()) {
            return bad("pair_rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return bad("visibility must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.crosstalk_fraction) {
            return bad("crosstalk_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Werner visibility that reproduces fidelity `f` against Ψ+.
pub fn visibility_from_fidelity(f: f64) -> f64 {
    (4.0 * f - 1.0) / 3.0
}

/// visibility·|Ψ(φ)⟩⟨Ψ(φ)| + (1 − visibility)·I/4
pub fn channel_state(spec: &ChannelPairSpec) -> DensityMatrix2Q {
    let bell = states::bell_density(&states::psi_phase(spec.bell_phase_deg.to_radians()));
    DensityMatrix2Q::mix(&bell, &DensityMatrix2Q::maximally_mixed(), spec.visibility)
}

/// Rate-weighted mixture of the states of several channels routed to one link.
pub fn mixed_channel_state(specs: &[&ChannelPairSpec]) -> Option<DensityMatrix2Q> {
    let total: f64 = specs.iter().map(|s| s.pair_rate).sum();
    if total <= 0.0 {
        return None;
    }
    let mut acc: Option<DensityMatrix2Q> = None;
    let mut weight = 0.0;
    for s in specs {
        let st = channel_state(s);
        acc = Some(match acc {
            None => st,
            Some(prev) => {
                let w = weight / (weight + s.pair_rate);
                DensityMatrix2Q::mix(&prev, &st, w)
            }
        });
        weight += s.pair_rate;
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsiOptions {
    pub integration_s: f64,
    /// system efficiencies of the signal and idler detectors
    pub detector_effs: [f64; 2],
    /// expected accidental counts added to every bin
    #[serde(default)]
    pub accidental_floor: f64,
    /// Poisson-sample the expected counts with this seed.
    #[serde(default)]
    pub poisson_seed: Option<u64>,
}

/// Coincidence counts indexed `[signal - 1][idler - 1]`.
pub type Jsi = Vec<Vec<f64>>;

/// Expected (or Poisson-sampled) coincidence counts for every signal/idler
/// channel combination.
pub fn jsi_matrix(specs: &[ChannelPairSpec], opts: &JsiOptions) -> Jsi {
    let n = specs.len();
    let mut m = vec![vec![opts.accidental_floor; n]; n];
    let eta = opts.detector_effs[0] * opts.detector_effs[1];
    for (k, s) in specs.iter().enumerate() {
        let matched = s.pair_rate * eta * opts.integration_s;
        m[k][k] += matched;
        if k > 0 {
            m[k][k - 1] += s.crosstalk_fraction * matched;
        }
    }
    if let Some(seed) = opts.poisson_seed {
        let mut rng = rng_for(seed, &["jsi"]);
        for row in &mut m {
            for v in row.iter_mut() {
                *v = sample_poisson(&mut rng, *v);
            }
        }
    }
    m
}

pub(crate) fn sample_poisson(rng: &mut impl Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        0.0
    } else {
        Poisson::new(mean).map(|p| p.sample(rng)).unwrap_or(0.0)
    }
}

/// Mean of matched (diagonal) bins over mean of mismatched bins.
pub fn car(jsi: &Jsi) -> Result<f64, SourceError> {
    let n = jsi.len();
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    for (i, row) in jsi.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i == j {
                matched += v;
            } else {
                mismatched += v;
            }
        }
    }
    if mismatched <= 0.0 || n < 2 {
        return Err(SourceError::DivisionByZeroAccidentals);
    }
    let off_bins = (n * n - n) as f64;
    Ok((matched / n as f64) / (mismatched / off_bins))
}
