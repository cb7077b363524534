//! Spectral validation of stage-1 outputs.
//!
//! Recent (predicted, training) pairs are buffered in a delay line; the last
//! Δτ of them are Gaussian-windowed and Fourier transformed, and the
//! per-bin magnitude of the spectrum difference is reduced to its maximum
//! `M` and minimum `m`. A sample passes when (M, m) falls inside a
//! rectangle [0, θ_M] × [0, θ_m] calibrated from quantiles of warm-up
//! statistics.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

pub const TRACE_HEADER: &str = "epoch,tau,delta_tau,sigma,M,m,accepted";

/// Smallest window length the validator accepts.
pub const MIN_WINDOW: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("segment lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("not enough buffered samples: need {needed}, have {available}")]
    NotReady { needed: usize, available: usize },
    #[error("acceptance region has not been calibrated")]
    Uncalibrated,
    #[error("cannot calibrate from an empty history")]
    EmptyHistory,
    #[error("invalid percentile {0}; expected 0 < p <= 1")]
    InvalidPercentile(f64),
}

pub type Result<T> = std::result::Result<T, ValidationError>;

/// Window anchor τ, window length Δτ and Gaussian width σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationParams {
    pub tau: usize,
    pub delta_tau: usize,
    /// Width as a fraction of the half-window.
    pub sigma: f64,
}

impl ValidationParams {
    pub fn new(tau: usize, delta_tau: usize, sigma: f64) -> Result<Self> {
        check_window(delta_tau, sigma)?;
        Ok(Self {
            tau,
            delta_tau,
            sigma,
        })
    }
}

fn check_window(n: usize, sigma: f64) -> Result<()> {
    if n < MIN_WINDOW {
        return Err(ValidationError::InvalidWindow(format!(
            "length {n} is below the minimum of {MIN_WINDOW}"
        )));
    }
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(ValidationError::InvalidWindow(format!(
            "sigma must lie in (0, 1], got {sigma}"
        )));
    }
    Ok(())
}

/// w[n] = exp(−½ ((n − c) / (σ c))²) with c = (N − 1)/2.
pub fn gaussian_window(n: usize, sigma: f64) -> Result<Vec<f64>> {
    check_window(n, sigma)?;
    let c = (n - 1) as f64 / 2.0;
    Ok((0..n)
        .map(|i| {
            let z = (i as f64 - c) / (sigma * c);
            (-0.5 * z * z).exp()
        })
        .collect())
}

fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// O(N²) DFT, X_k = Σ x_n e^{−2πikn/N}.
pub fn direct_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .fold(Complex64::new(0.0, 0.0), |acc, (j, v)| {
                    // reduce k·j mod n first to keep the angle small
                    let angle = -2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
                    acc + v * Complex64::from_polar(1.0, angle)
                })
        })
        .collect()
}

/// Gaussian-windowed transforms with cached FFT plans.
pub struct SpectralAnalyzer {
    planner: FftPlanner<f64>,
    plans: HashMap<usize, Arc<dyn Fft<f64>>>,
    windows: HashMap<(usize, u64), Arc<Vec<f64>>>,
}

impl std::fmt::Debug for SpectralAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralAnalyzer")
            .field("cached_plans", &self.plans.len())
            .field("cached_windows", &self.windows.len())
            .finish()
    }
}

impl Default for SpectralAnalyzer {
    fn default() -> Self {
        Self::new()
    }
}

impl SpectralAnalyzer {
    pub fn new() -> Self {
        Self {
            planner: FftPlanner::new(),
            plans: HashMap::new(),
            windows: HashMap::new(),
        }
    }

    fn window(&mut self, n: usize, sigma: f64) -> Result<Arc<Vec<f64>>> {
        let key = (n, sigma.to_bits());
        if let Some(w) = self.windows.get(&key) {
            return Ok(Arc::clone(w));
        }
        let w = Arc::new(gaussian_window(n, sigma)?);
        self.windows.insert(key, Arc::clone(&w));
        Ok(w)
    }

    /// DFT of the windowed segment: FFT for power-of-two lengths, direct DFT
    /// otherwise.
    pub fn windowed_fft(&mut self, segment: &[f64], sigma: f64) -> Result<Vec<Complex64>> {
        let n = segment.len();
        let w = self.window(n, sigma)?;
        let mut buf: Vec<Complex64> = segment
            .iter()
            .zip(w.iter())
            .map(|(x, wi)| Complex64::new(x * wi, 0.0))
            .collect();
        if is_power_of_two(n) {
            let planner = &mut self.planner;
            let plan = self
                .plans
                .entry(n)
                .or_insert_with(|| planner.plan_fft_forward(n));
            plan.process(&mut buf);
            Ok(buf)
        } else {
            Ok(direct_dft(&buf))
        }
    }

    /// M = max_k |F̂σ[ỹ]_k − F̂σ[y]_k| and m = min_k of the same.
    pub fn compute_mm(
        &mut self,
        predicted: &[f64],
        training: &[f64],
        sigma: f64,
    ) -> Result<ValidationStats> {
        if predicted.len() != training.len() {
            return Err(ValidationError::LengthMismatch(
                predicted.len(),
                training.len(),
            ));
        }
        let sp = self.windowed_fft(predicted, sigma)?;
        let st = self.windowed_fft(training, sigma)?;
        let (mut max, mut min) = (0.0f64, f64::INFINITY);
        for (a, b) in st.iter().zip(&sp) {
            let d = (a - b).norm();
            max = max.max(d);
            min = min.min(d);
        }
        Ok(ValidationStats { max, min })
    }
}

/// Single-shot windowed transform; see [`SpectralAnalyzer::windowed_fft`].
pub fn windowed_fft(segment: &[f64], sigma: f64) -> Result<Vec<Complex64>> {
    SpectralAnalyzer::new().windowed_fft(segment, sigma)
}

/// Single-shot (M, m); see [`SpectralAnalyzer::compute_mm`].
pub fn compute_mm(predicted: &[f64], training: &[f64], sigma: f64) -> Result<ValidationStats> {
    SpectralAnalyzer::new().compute_mm(predicted, training, sigma)
}

/// The (M, m) deviation pair; M ≥ m ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationStats {
    /// M
    pub max: f64,
    /// m
    pub min: f64,
}

/// Rectangle [0, θ_M] × [0, θ_m] of accepted (M, m) pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceRegion {
    pub theta_max: f64,
    pub theta_min: f64,
}

impl AcceptanceRegion {
    pub fn new(theta_max: f64, theta_min: f64) -> Result<Self> {
        if !(theta_min >= 0.0 && theta_max >= theta_min && theta_max.is_finite()) {
            return Err(ValidationError::InvalidWindow(format!(
                "need theta_M >= theta_m >= 0, got ({theta_max}, {theta_min})"
            )));
        }
        Ok(Self {
            theta_max,
            theta_min,
        })
    }

    pub fn contains(&self, s: &ValidationStats) -> bool {
        s.max <= self.theta_max && s.min <= self.theta_min
    }
}

/// Accept iff M ≤ θ_M and m ≤ θ_m.
pub fn validate(stats: &ValidationStats, region: Option<&AcceptanceRegion>) -> Result<bool> {
    region
        .map(|r| r.contains(stats))
        .ok_or(ValidationError::Uncalibrated)
}

/// Nearest-rank p-quantile: the ⌈p·n⌉-th smallest value.
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(ValidationError::EmptyHistory);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(ValidationError::InvalidPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// θ_M and θ_m set to the p-quantiles of the observed M and m.
pub fn calibrate_region(history: &[ValidationStats], p: f64) -> Result<AcceptanceRegion> {
    let ms: Vec<f64> = history.iter().map(|s| s.max).collect();
    let mins: Vec<f64> = history.iter().map(|s| s.min).collect();
    let theta_max = quantile(&ms, p)?;
    let theta_min = quantile(&mins, p)?;
    AcceptanceRegion::new(theta_max, theta_min)
}

/// Growable ring buffer of (predicted, training) values, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLine {
    buf: VecDeque<(f64, f64)>,
    capacity: usize,
}

impl DelayLine {
    pub fn new(capacity: usize) -> Self {
        Self {
            buf: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, predicted: f64, training: f64) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back((predicted, training));
    }

    /// Changes the capacity. Growing keeps every entry; shrinking keeps the
    /// newest `capacity` entries in order.
    pub fn resize(&mut self, capacity: usize) {
        let capacity = capacity.max(1);
        while self.buf.len() > capacity {
            self.buf.pop_front();
        }
        if capacity > self.buf.capacity() {
            self.buf.reserve(capacity - self.buf.len());
        }
        self.capacity = capacity;
    }

    pub fn ensure_capacity(&mut self, capacity: usize) {
        if capacity > self.capacity {
            self.resize(capacity);
        }
    }

    /// The newest `len` entries as (predicted, training) series.
    pub fn window(&self, len: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if len > self.buf.len() {
            return Err(ValidationError::NotReady {
                needed: len,
                available: self.buf.len(),
            });
        }
        Ok(self.buf.iter().skip(self.buf.len() - len).copied().unzip())
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.buf.iter()
    }
}

/// Half-power width of the dominant non-DC peak of the (mean-removed)
/// segment spectrum, as a fraction of the one-sided bin count, in (0, 1].
/// A flat segment reports 1.
pub fn dominant_peak_width(segment: &[f64]) -> f64 {
    let n = segment.len();
    if n < 2 {
        return 1.0;
    }
    let mean = segment.iter().sum::<f64>() / n as f64;
    let centered: Vec<Complex64> = segment
        .iter()
        .map(|x| Complex64::new(x - mean, 0.0))
        .collect();
    let spectrum = direct_dft(&centered);
    let half = n / 2 + 1;
    let power: Vec<f64> = spectrum[..half].iter().map(|z| z.norm_sqr()).collect();
    let (peak, &peak_power) = power
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap_or((0, &0.0));
    if peak_power
        <= f64::EPSILON
            * segment
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .max(f64::MIN_POSITIVE)
    {
        return 1.0;
    }
    let threshold = 0.5 * peak_power;
    let mut lo = peak;
    while lo > 1 && power[lo - 1] >= threshold {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < half && power[hi + 1] >= threshold {
        hi += 1;
    }
    (hi - lo + 1) as f64 / (half - 1) as f64
}

/// One validator decision, as logged in the trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub epoch: usize,
    pub tau: u64,
    pub params: ValidationParams,
    /// `None` while the delay line holds fewer than Δτ samples.
    pub stats: Option<ValidationStats>,
    pub accepted: bool,
}

impl Verdict {
    pub fn trace_row(&self) -> String {
        let (big, small) = match self.stats {
            Some(s) => (format!("{:.16e}", s.max), format!("{:.16e}", s.min)),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{:.16e},{},{},{}",
            self.epoch,
            self.tau,
            self.params.delta_tau,
            self.params.sigma,
            big,
            small,
            u8::from(self.accepted)
        )
    }
}

pub fn write_trace<W: Write>(verdicts: &[Verdict], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for v in verdicts {
        writeln!(w, "{}", v.trace_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidatorConfig {
    /// Quantile used to calibrate the acceptance region.
    pub percentile: f64,
    /// Epochs 1..=W accept every sample while statistics are collected.
    pub warmup_epochs: usize,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self {
            percentile: 0.9,
            warmup_epochs: 1,
        }
    }
}

/// Stateful ω-validation: owns the delay line, the warm-up history and the
/// acceptance region.
///
/// During warm-up every sample is accepted. The region is calibrated at the
/// end of the first epoch ≥ W whose accumulated history is non-empty; until
/// then samples keep being accepted.
#[derive(Debug)]
pub struct OmegaValidator {
    config: ValidatorConfig,
    line: DelayLine,
    analyzer: SpectralAnalyzer,
    history: Vec<ValidationStats>,
    region: Option<AcceptanceRegion>,
}

impl OmegaValidator {
    pub fn new(config: ValidatorConfig) -> Self {
        Self {
            config,
            line: DelayLine::new(MIN_WINDOW),
            analyzer: SpectralAnalyzer::new(),
            history: Vec::new(),
            region: None,
        }
    }

    /// A validator with a fixed, already calibrated region (evaluation).
    pub fn with_region(region: AcceptanceRegion) -> Self {
        let mut v = Self::new(ValidatorConfig {
            warmup_epochs: 0,
            ..ValidatorConfig::default()
        });
        v.region = Some(region);
        v
    }

    pub fn region(&self) -> Option<AcceptanceRegion> {
        self.region
    }

    pub fn delay_line(&self) -> &DelayLine {
        &self.line
    }

    /// Buffers one (predicted, training) pair and judges the newest window.
    pub fn observe(
        &mut self,
        epoch: usize,
        tau: u64,
        predicted: f64,
        training: f64,
        params: ValidationParams,
    ) -> Result<Verdict> {
        self.line.ensure_capacity(params.delta_tau);
        self.line.push(predicted, training);
        let stats = match self.line.window(params.delta_tau) {
            Ok((p, t)) => Some(self.analyzer.compute_mm(&p, &t, params.sigma)?),
            Err(ValidationError::NotReady { .. }) => None,
            Err(e) => return Err(e),
        };
        let accepted = match (&self.region, stats) {
            (None, Some(s)) => {
                self.history.push(s);
                true
            }
            (None, None) => true,
            (Some(r), Some(s)) => r.contains(&s),
            (Some(_), None) => false,
        };
        Ok(Verdict {
            epoch,
            tau,
            params,
            stats,
            accepted,
        })
    }

    /// Closes an epoch; calibrates the region once warm-up is over.
    pub fn end_epoch(&mut self, epoch: usize) -> Result<Option<AcceptanceRegion>> {
        if self.region.is_none() && epoch >= self.config.warmup_epochs && !self.history.is_empty() {
            let region = calibrate_region(&self.history, self.config.percentile)?;
            log::debug!(
                "calibrated acceptance region after epoch {epoch}: M <= {:.3e}, m <= {:.3e}",
                region.theta_max,
                region.theta_min
            );
            self.region = Some(region);
            self.history.clear();
            return Ok(Some(region));
        }
        Ok(None)
    }
}
