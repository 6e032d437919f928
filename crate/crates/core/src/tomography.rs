//! Bayesian state tomography from coincidence counts.
//!
//! States are parameterized as ρ = GG†/tr(GG†) with G a complex d×d matrix
//! whose real and imaginary parts carry independent N(0, 1) priors, which
//! induces the Hilbert–Schmidt measure on density matrices. Counts enter
//! through a multinomial likelihood within each measured basis, so the
//! absolute pair flux of every basis drops out.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::AnalyzerSetting;
use crate::qmath::{
    c, fidelity_with_pure, kron_ket, log_negativity, CMatrix, DensityMatrix1Q, DensityMatrix2Q,
    Ket, TrustedDensity, C64,
};
use crate::seed::{derive_seed, rng_for};

/// Probability floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_NUM_SAMPLES: usize = 1024;
pub const RHAT_LIMIT: f64 = 1.1;
/// Minimum post-burn-in trace per chain, in autocorrelation lags.
pub const MIN_DRAWS_PER_CHAIN: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum TomographyError {
    #[error("chain did not converge: split R-hat {0:.3} > {RHAT_LIMIT}")]
    ChainNotConverged(f64),
    #[error("record has {found} analyzer settings, expected {expected}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("record count must be finite and non-negative, got {0}")]
    InvalidCount(f64),
    #[error("invalid sampler options: {0}")]
    InvalidOptions(String),
}

/// Counts observed with one analyzer setting per photon.
///
/// Counts are real so that accidental-subtracted data can be used directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub settings: Vec<AnalyzerSetting>,
    pub count: f64,
    pub integration_s: f64,
}

impl MeasurementRecord {
    pub fn pair(a: AnalyzerSetting, b: AnalyzerSetting, count: f64, integration_s: f64) -> Self {
        Self {
            settings: vec![a, b],
            count,
            integration_s,
        }
    }

    pub fn single(s: AnalyzerSetting, count: f64, integration_s: f64) -> Self {
        Self {
            settings: vec![s],
            count,
            integration_s,
        }
    }

    fn product_state(&self) -> Ket {
        self.settings
            .iter()
            .map(AnalyzerSetting::analyzed_state)
            .reduce(|a, b| kron_ket(&a, &b))
            .unwrap_or_else(|| vec![c(1.0, 0.0)])
    }

    fn sort_key(&self) -> Vec<u64> {
        let mut k: Vec<u64> = self
            .settings
            .iter()
            .flat_map(|s| [s.qwp_deg.to_bits(), s.hwp_deg.to_bits()])
            .collect();
        k.push(self.count.to_bits());
        k.push(self.integration_s.to_bits());
        k
    }
}

fn canonical(records: &[MeasurementRecord]) -> Vec<MeasurementRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    v
}

fn parallel_or_orthogonal(a: &[C64], b: &[C64]) -> bool {
    let o = crate::qmath::inner(a, b).norm_sqr();
    o < 1e-9 || o > 1.0 - 1e-9
}

/// Records grouped into bases: two records share a basis when, photon by
/// photon, their analyzed states are equal or orthogonal.
struct Model {
    dim: usize,
    groups: Vec<Vec<(Ket, f64)>>,
}

impl Model {
    fn build(records: &[MeasurementRecord], arity: usize) -> Result<Self, TomographyError> {
        let mut groups: Vec<(Vec<Ket>, Vec<(Ket, f64)>)> = Vec::new();
        for r in canonical(records) {
            if r.settings.len() != arity {
                return Err(TomographyError::ArityMismatch {
                    expected: arity,
                    found: r.settings.len(),
                });
            }
            if !(r.count.is_finite() && r.count >= 0.0) {
                return Err(TomographyError::InvalidCount(r.count));
            }
            let sides: Vec<Ket> = r.settings.iter().map(AnalyzerSetting::analyzed_state).collect();
            let entry = (r.product_state(), r.count);
            match groups.iter_mut().find(|(refs, _)| {
                refs.iter().zip(&sides).all(|(x, y)| parallel_or_orthogonal(x, y))
            }) {
                Some((_, members)) => members.push(entry),
                None => groups.push((sides, vec![entry])),
            }
        }
        Ok(Self {
            dim: 1 << arity,
            groups: groups
                .into_iter()
                .map(|(_, m)| m)
                .filter(|m| m.iter().any(|(_, n)| *n > 0.0))
                .collect(),
        })
    }

    /// Log-likelihood given the unnormalized quadratic form v ↦ ⟨v|M|v⟩.
    fn log_likelihood(&self, quad: impl Fn(&[C64]) -> f64) -> f64 {
        let mut ll = 0.0;
        let mut probs = Vec::new();
        for g in &self.groups {
            probs.clear();
            probs.extend(g.iter().map(|(v, _)| quad(v).max(0.0)));
            let total: f64 = probs.iter().sum();
            for ((_, n), p) in g.iter().zip(&probs) {
                if *n > 0.0 {
                    let q = if total > 0.0 { p / total } else { 0.0 };
                    ll += n * (PROB_FLOOR + q).ln();
                }
            }
        }
        ll
    }
}

/// Multinomial-per-basis log-likelihood of `rho` given `records`.
pub fn log_likelihood(rho: &impl AsRef<CMatrix>, records: &[MeasurementRecord]) -> f64 {
    let m = rho.as_ref();
    let arity = m.rows().trailing_zeros() as usize;
    let Ok(model) = Model::build(records, arity) else {
        return f64::NEG_INFINITY;
    };
    model.log_likelihood(|v| m.expectation(v).re)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub num_samples: usize,
    pub chains: usize,
    pub seed: u64,
    /// steps per adaptation round; covariance is re-estimated after each
    pub adapt_steps: usize,
    pub adapt_rounds: usize,
    /// steps used to estimate the log-likelihood autocorrelation
    pub pilot_steps: usize,
    pub max_thin: usize,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            num_samples: DEFAULT_NUM_SAMPLES,
            chains: 4,
            seed: 0,
            adapt_steps: 4_000,
            adapt_rounds: 4,
            pilot_steps: 20_000,
            max_thin: 1_000,
        }
    }
}

impl SamplerOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), TomographyError> {
        if self.num_samples == 0 || self.chains == 0 {
            return Err(TomographyError::InvalidOptions("need at least one chain and sample".into()));
        }
        if self.num_samples % self.chains != 0 {
            return Err(TomographyError::InvalidOptions(
                "num_samples must be divisible by chains".into(),
            ));
        }
        if self.adapt_steps < 100 || self.pilot_steps < 100 || self.max_thin == 0 {
            return Err(TomographyError::InvalidOptions(
                "adapt_steps and pilot_steps must be ≥ 100, max_thin ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub acceptance: f64,
    pub thinning: usize,
    pub burn_in: usize,
    pub split_rhat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEnsemble<T> {
    pub samples: Vec<T>,
    pub mean: T,
    pub diagnostics: ChainDiagnostics,
}

/// Real parameter vector ↔ G, stored row-major as (re, im) pairs.
struct Ginibre {
    dim: usize,
}

impl Ginibre {
    fn params(&self) -> usize {
        2 * self.dim * self.dim
    }

    /// ⟨v|GG†|v⟩ = ‖G†v‖².
    fn quad(&self, theta: &[f64], v: &[C64]) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for j in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for (i, vi) in v.iter().enumerate() {
                let k = 2 * (i * d + j);
                acc += C64::new(theta[k], -theta[k + 1]) * vi;
            }
            s += acc.norm_sqr();
        }
        s
    }

    fn density(&self, theta: &[f64]) -> CMatrix {
        let d = self.dim;
        let g = CMatrix::from_rows(
            &(0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| C64::new(theta[2 * (i * d + j)], theta[2 * (i * d + j) + 1]))
                        .collect()
                })
                .collect::<Vec<_>>(),
        );
        let m = &g * &g.adjoint();
        let tr = m.trace().re;
        m.scale_real(1.0 / tr).hermitian_part()
    }
}

struct Target<'a> {
    model: &'a Model,
    g: Ginibre,
}

impl Target<'_> {
    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.model.log_likelihood(|v| self.g.quad(theta, v))
    }

    fn log_posterior(&self, theta: &[f64]) -> (f64, f64) {
        let ll = self.log_likelihood(theta);
        let lp = -0.5 * theta.iter().map(|x| x * x).sum::<f64>();
        (ll + lp, ll)
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn covariance(xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = xs.len() as f64;
    let p = xs[0].len();
    let mean: Vec<f64> = (0..p).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; p]; p];
    for x in xs {
        for i in 0..p {
            let di = x[i] - mean[i];
            for j in 0..=i {
                cov[i][j] += di * (x[j] - mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..=i {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

struct Chain<'a> {
    target: &'a Target<'a>,
    rng: ChaCha8Rng,
    theta: Vec<f64>,
    log_post: f64,
    log_lik: f64,
    scale: f64,
    chol: Vec<Vec<f64>>,
    proposal: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> Chain<'a> {
    fn new(target: &'a Target<'a>, mut rng: ChaCha8Rng) -> Self {
        let p = target.g.params();
        let theta: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let (log_post, log_lik) = target.log_posterior(&theta);
        let chol = (0..p)
            .map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            target,
            rng,
            theta,
            log_post,
            log_lik,
            scale: 0.1,
            chol,
            proposal: vec![0.0; p],
            z: vec![0.0; p],
        }
    }

    fn monitored(&self, flat: bool) -> f64 {
        if flat {
            self.log_post - self.log_lik
        } else {
            self.log_lik
        }
    }

    fn step(&mut self) -> bool {
        let p = self.theta.len();
        for z in self.z.iter_mut() {
            *z = self.rng.sample(StandardNormal);
        }
        for i in 0..p {
            let row = &self.chol[i];
            let dz: f64 = row[..=i].iter().zip(&self.z).map(|(l, z)| l * z).sum();
            self.proposal[i] = self.theta[i] + self.scale * dz;
        }
        let (lp, ll) = self.target.log_posterior(&self.proposal);
        let u: f64 = self.rng.random();
        if lp.is_finite() && u.ln() < lp - self.log_post {
            std::mem::swap(&mut self.theta, &mut self.proposal);
            self.log_post = lp;
            self.log_lik = ll;
            true
        } else {
            false
        }
    }

    /// Rounds of scale tuning toward 0.2–0.4 acceptance, re-estimating the
    /// proposal covariance from the second half of each round.
    fn adapt(&mut self, steps: usize, rounds: usize) {
        let p = self.theta.len();
        let window = 100;
        for _ in 0..rounds {
            let mut kept = Vec::with_capacity(steps / 2);
            let mut accepted = 0;
            for t in 0..steps {
                if self.step() {
                    accepted += 1;
                }
                if (t + 1) % window == 0 {
                    let rate = accepted as f64 / window as f64;
                    if rate < 0.2 {
                        self.scale *= 0.6;
                    } else if rate > 0.4 {
                        self.scale *= 1.5;
                    }
                    accepted = 0;
                }
                if t >= steps / 2 {
                    kept.push(self.theta.clone());
                }
            }
            let mut cov = covariance(&kept);
            let avg_var = (0..p).map(|i| cov[i][i]).sum::<f64>() / p as f64;
            if !(avg_var.is_finite() && avg_var > 0.0) {
                continue;
            }
            for (i, row) in cov.iter_mut().enumerate() {
                row[i] += 1e-6 * avg_var;
            }
            if let Some(l) = cholesky(&cov) {
                // optimal random-walk scaling for a Gaussian target
                self.chol = l;
                self.scale = 2.38 / (p as f64).sqrt();
            }
        }
        for _ in 0..rounds {
            let mut accepted = 0;
            for _ in 0..steps / 2 {
                if self.step() {
                    accepted += 1;
                }
            }
            let rate = accepted as f64 / (steps / 2) as f64;
            if rate < 0.2 {
                self.scale *= 0.6;
            } else if rate > 0.4 {
                self.scale *= 1.5;
            } else {
                break;
            }
        }
    }
}

/// Smallest lag whose autocorrelation falls below 0.1, capped at `max_lag`.
fn thinning_lag(series: &[f64], max_lag: usize) -> usize {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let var: f64 = dev.iter().map(|x| x * x).sum();
    if var <= 1e-300 {
        return 1;
    }
    for lag in 1..=max_lag.min(n - 1) {
        let acf: f64 = dev[..n - lag].iter().zip(&dev[lag..]).map(|(a, b)| a * b).sum::<f64>() / var;
        if acf < 0.1 {
            return lag;
        }
    }
    max_lag
}

/// Gelman–Rubin statistic over each sequence split in half. Sequences are
/// truncated to the shortest one.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let h = len / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..h], &c[h..2 * h]])
        .filter(|s| s.len() >= 2)
        .collect();
    if halves.len() < 2 {
        return 1.0;
    }
    let n = halves[0].len() as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|s| s.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 1e-300 {
        return if b <= 1e-300 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn records_fingerprint(records: &[MeasurementRecord]) -> String {
    canonical(records)
        .iter()
        .map(|r| format!("{:?}", r.sort_key()))
        .collect::<Vec<_>>()
        .join(";")
}

fn sample_generic<T: TrustedDensity + Send>(
    records: &[MeasurementRecord],
    arity: usize,
    opts: &SamplerOptions,
) -> Result<PosteriorEnsemble<T>, TomographyError> {
    opts.validate()?;
    let model = Model::build(records, arity)?;
    debug_assert_eq!(model.dim, T::DIM);
    let target = Target {
        model: &model,
        g: Ginibre { dim: T::DIM },
    };
    let base = derive_seed(opts.seed, &["tomography", &records_fingerprint(records)]);
    let per_chain = opts.num_samples / opts.chains;

    let runs: Vec<(Vec<Vec<f64>>, Vec<f64>, f64, usize, usize)> = (0..opts.chains)
        .into_par_iter()
        .map(|k| {
            let mut chain = Chain::new(&target, rng_for(base, &["chain", &k.to_string()]));
            chain.adapt(opts.adapt_steps, opts.adapt_rounds);
            // With no informative data the log-likelihood is constant, so the
            // log-prior is the monitored statistic instead.
            let flat = model.groups.is_empty();
            let mut pilot = Vec::with_capacity(opts.pilot_steps);
            for _ in 0..opts.pilot_steps {
                chain.step();
                pilot.push(chain.monitored(flat));
            }
            let lag = thinning_lag(&pilot, opts.max_thin.min(opts.pilot_steps / 20).max(1));
            // Short requests still run MIN_DRAWS_PER_CHAIN lags so R-hat sees
            // enough of the trace; kept draws are then spaced further apart.
            let thin = lag * MIN_DRAWS_PER_CHAIN.div_ceil(per_chain).max(1);
            for _ in 0..10 * lag {
                chain.step();
            }
            let mut thetas = Vec::with_capacity(per_chain);
            // R-hat uses every post-burn-in step, not just the kept draws
            let mut trace = Vec::with_capacity(per_chain * thin);
            let mut accepted = 0usize;
            for _ in 0..per_chain {
                for _ in 0..thin {
                    accepted += usize::from(chain.step());
                    trace.push(chain.monitored(flat));
                }
                thetas.push(chain.theta.clone());
            }
            let acc = accepted as f64 / (per_chain * thin) as f64;
            (thetas, trace, acc, thin, lag)
        })
        .collect();

    let traces: Vec<Vec<f64>> = runs.iter().map(|r| r.1.clone()).collect();
    let rhat = split_rhat(&traces);
    if !(rhat <= RHAT_LIMIT) {
        return Err(TomographyError::ChainNotConverged(rhat));
    }
    let thinning = runs.iter().map(|r| r.3).max().unwrap_or(1);
    let acceptance = runs.iter().map(|r| r.2).sum::<f64>() / runs.len() as f64;
    let samples: Vec<T> = runs
        .iter()
        .flat_map(|r| r.0.iter())
        .map(|theta| T::trusted(target.g.density(theta)))
        .collect();
    let mean = T::mean_of(&samples).expect("at least one sample");
    Ok(PosteriorEnsemble {
        samples,
        mean,
        diagnostics: ChainDiagnostics {
            acceptance,
            thinning,
            burn_in: 10 * runs.iter().map(|r| r.4).max().unwrap_or(1),
            split_rhat: rhat,
        },
    })
}

/// Two-qubit posterior from coincidence records.
pub fn sample_posterior(
    records: &[MeasurementRecord],
    opts: &SamplerOptions,
) -> Result<PosteriorEnsemble<DensityMatrix2Q>, TomographyError> {
    sample_generic(records, 2, opts)
}

/// Single-qubit posterior from singles records.
pub fn qubit_tomography(
    records: &[MeasurementRecord],
    opts: &SamplerOptions,
) -> Result<PosteriorEnsemble<DensityMatrix1Q>, TomographyError> {
    sample_generic(records, 1, opts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self::default();
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    /// |x − mean| in units of std (infinite when std is zero and x ≠ mean).
    pub fn z_score(&self, x: f64) -> f64 {
        let d = (x - self.mean).abs();
        match self.std.partial_cmp(&0.0) {
            Some(Ordering::Greater) => d / self.std,
            _ if d == 0.0 => 0.0,
            _ => f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub fidelity: f64,
    pub log_negativity: f64,
    pub ebit_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub fidelity: Stat,
    pub log_negativity: Stat,
    pub ebit_rate: Stat,
    pub coincidence_rate: f64,
    pub mean_state: DensityMatrix2Q,
    #[serde(skip)]
    pub per_sample: Vec<SampleMetrics>,
}

/// Per-sample fidelity against `target`, E_N and R_E = E_N·rate.
pub fn summarize_link(
    ensemble: &PosteriorEnsemble<DensityMatrix2Q>,
    coincidence_rate: f64,
    target: &[C64],
) -> LinkReport {
    let per_sample: Vec<SampleMetrics> = ensemble
        .samples
        .iter()
        .map(|s| {
            let en = log_negativity(s).unwrap_or(0.0);
            SampleMetrics {
                fidelity: fidelity_with_pure(s, target).unwrap_or(0.0),
                log_negativity: en,
                ebit_rate: en * coincidence_rate,
            }
        })
        .collect();
    let col = |f: fn(&SampleMetrics) -> f64| Stat::of(&per_sample.iter().map(f).collect::<Vec<_>>());
    LinkReport {
        fidelity: col(|m| m.fidelity),
        log_negativity: col(|m| m.log_negativity),
        ebit_rate: col(|m| m.ebit_rate),
        coincidence_rate,
        mean_state: ensemble.mean.clone(),
        per_sample,
    }
}
