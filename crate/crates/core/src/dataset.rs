//! Training grid synthesis, normalization, splitting and CSV persistence.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::physics::{
    self, ModeParity, PermittivityModel, PhysicsError, PropagationLength, SolverSettings,
    SppObservables,
};
pub use crate::provenance::Metadata;

pub const CSV_HEADER: &str = "lambda0_nm,t_nm,lambda_spp_nm,L_spp_nm";
pub const EXCLUSION_HEADER: &str = "lambda0_nm,t_nm,reason";

/// Metal thicknesses (nm) of the reference training grid.
pub const DEFAULT_THICKNESSES_NM: [f64; 9] =
    [36.0, 42.0, 48.0, 54.0, 60.0, 72.0, 84.0, 96.0, 128.0];

/// Fraction of solver failures above which grid generation is aborted.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
    #[error("{failed} of {total} grid points failed to solve (limit is 10%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("column `{0}` is constant and cannot be normalized")]
    ConstantColumn(&'static str),
    #[error("dataset is empty")]
    Empty,
    #[error("invalid split fraction {0}; expected 0 < f < 1")]
    InvalidFraction(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One row: inputs (λ₀, t) and targets (λ_SPP, L_SPP). Physical values are in nm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub lambda0: f64,
    pub thickness: f64,
    pub lambda_spp: f64,
    pub propagation_length: f64,
}

impl Sample {
    pub fn to_array(&self) -> [f64; 4] {
        [
            self.lambda0,
            self.thickness,
            self.lambda_spp,
            self.propagation_length,
        ]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            lambda0: v[0],
            thickness: v[1],
            lambda_spp: v[2],
            propagation_length: v[3],
        }
    }

    pub fn inputs(&self) -> [f64; 2] {
        [self.lambda0, self.thickness]
    }

    pub fn targets(&self) -> [f64; 2] {
        [self.lambda_spp, self.propagation_length]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Lambda0,
    Thickness,
    LambdaSpp,
    PropagationLength,
}

impl Column {
    pub const ALL: [Column; 4] = [
        Column::Lambda0,
        Column::Thickness,
        Column::LambdaSpp,
        Column::PropagationLength,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Column::Lambda0 => "lambda0_nm",
            Column::Thickness => "t_nm",
            Column::LambdaSpp => "lambda_spp_nm",
            Column::PropagationLength => "L_spp_nm",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    /// L_SPP spans decades, so it is min-max scaled in log₁₀ space.
    pub fn is_log_scaled(&self) -> bool {
        matches!(self, Column::PropagationLength)
    }
}

/// Per-column (min, max) in physical units, mapping each column onto [−1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationState {
    pub ranges: [(f64, f64); 4],
}

impl NormalizationState {
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 4];
        for s in samples {
            for (r, v) in ranges.iter_mut().zip(s.to_array()) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        for col in Column::ALL {
            let (lo, hi) = ranges[col.index()];
            if !(hi > lo) {
                return Err(DatasetError::ConstantColumn(col.name()));
            }
        }
        Ok(Self { ranges })
    }

    fn scaled_bounds(&self, col: Column) -> (f64, f64) {
        let (lo, hi) = self.ranges[col.index()];
        if col.is_log_scaled() {
            (lo.log10(), hi.log10())
        } else {
            (lo, hi)
        }
    }

    pub fn normalize_value(&self, col: Column, value: f64) -> f64 {
        let (lo, hi) = self.scaled_bounds(col);
        let v = if col.is_log_scaled() {
            value.log10()
        } else {
            value
        };
        2.0 * (v - lo) / (hi - lo) - 1.0
    }

    pub fn denormalize_value(&self, col: Column, value: f64) -> f64 {
        let (lo, hi) = self.scaled_bounds(col);
        let v = lo + 0.5 * (value + 1.0) * (hi - lo);
        if col.is_log_scaled() {
            10f64.powf(v)
        } else {
            v
        }
    }

    pub fn normalize_sample(&self, s: &Sample) -> Sample {
        let mut v = s.to_array();
        for col in Column::ALL {
            v[col.index()] = self.normalize_value(col, v[col.index()]);
        }
        Sample::from_array(v)
    }

    pub fn denormalize_sample(&self, s: &Sample) -> Sample {
        let mut v = s.to_array();
        for col in Column::ALL {
            v[col.index()] = self.denormalize_value(col, v[col.index()]);
        }
        Sample::from_array(v)
    }

    /// `key=value` metadata lines, one per column.
    pub fn to_metadata(&self) -> Vec<(String, String)> {
        Column::ALL
            .iter()
            .map(|c| {
                let (lo, hi) = self.ranges[c.index()];
                (
                    format!("normalization.{}", c.name()),
                    format!("{lo:.16e},{hi:.16e}"),
                )
            })
            .collect()
    }

    /// Parses the lines produced by [`NormalizationState::to_metadata`]; `None`
    /// when the metadata carries no normalization record.
    pub fn from_metadata(meta: &Metadata) -> Option<Self> {
        let mut ranges = [(0.0, 0.0); 4];
        for col in Column::ALL {
            let raw = meta.get(&format!("normalization.{}", col.name()))?;
            let (a, b) = raw.split_once(',')?;
            ranges[col.index()] = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        }
        Some(Self { ranges })
    }

    /// Equality up to the 17-significant-digit text representation.
    pub fn approx_eq(&self, other: &Self) -> bool {
        self.ranges.iter().zip(other.ranges.iter()).all(|(a, b)| {
            let tol = 1e-14 * (a.0.abs() + a.1.abs()).max(1.0);
            (a.0 - b.0).abs() <= tol && (a.1 - b.1).abs() <= tol
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Present iff the sample values are normalized.
    pub normalization: Option<NormalizationState>,
    pub metadata: Metadata,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            normalization: None,
            metadata: Metadata::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples in physical units regardless of the normalization state.
    pub fn physical_samples(&self) -> Vec<Sample> {
        match &self.normalization {
            Some(n) => self
                .samples
                .iter()
                .map(|s| n.denormalize_sample(s))
                .collect(),
            None => self.samples.clone(),
        }
    }

    /// Applies an existing normalization (e.g. one stored with a model).
    pub fn normalized_with(&self, state: NormalizationState) -> Dataset {
        let samples = self
            .physical_samples()
            .iter()
            .map(|s| state.normalize_sample(s))
            .collect();
        Dataset {
            samples,
            normalization: Some(state),
            metadata: self.metadata.clone(),
        }
    }
}

/// Maps every column affinely onto [−1, 1] (L_SPP in log₁₀ space).
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    let physical = ds.physical_samples();
    let state = NormalizationState::fit(&physical)?;
    Ok(ds.normalized_with(state))
}

/// Inverse of [`normalize`]; a no-op on unnormalized data.
pub fn denormalize(ds: &Dataset) -> Dataset {
    Dataset {
        samples: ds.physical_samples(),
        normalization: None,
        metadata: ds.metadata.clone(),
    }
}

/// Seeded partition into (train, test) with sizes ⌈f·N⌉ and the remainder.
///
/// Samples are put in a canonical order before shuffling, so the result does
/// not depend on the input ordering.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    if ds.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut order: Vec<Sample> = ds.samples.clone();
    order.sort_by(|a, b| {
        a.to_array()
            .iter()
            .zip(b.to_array().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = order.len();
    // guard against 0.7 * 10 = 7.000000000000001
    let n_train = ((train_fraction * n as f64) - 1e-9)
        .ceil()
        .clamp(1.0, n as f64) as usize;
    let test = order.split_off(n_train);
    let mut meta = ds.metadata.clone();
    meta.set("split.seed", seed);
    meta.set("split.train_fraction", train_fraction);
    let part = |samples: Vec<Sample>, name: &str| {
        let mut m = meta.clone();
        m.set("split.part", name);
        Dataset {
            samples,
            normalization: ds.normalization,
            metadata: m,
        }
    };
    Ok((part(order, "train"), part(test, "test")))
}

/// Physics settings for grid synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub thicknesses_nm: Vec<f64>,
    pub lambda_min_nm: f64,
    pub lambda_max_nm: f64,
    pub n_lambda: usize,
    /// Cladding permittivity (air).
    pub eps_dielectric: f64,
    pub parity: ModeParity,
    pub solver: SolverSettings,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            thicknesses_nm: DEFAULT_THICKNESSES_NM.to_vec(),
            lambda_min_nm: 400.0,
            lambda_max_nm: 700.0,
            n_lambda: 101,
            eps_dielectric: 1.0,
            parity: ModeParity::Antisymmetric,
            solver: SolverSettings::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lambda == 0 {
            return Err(DatasetError::InvalidConfig(
                "n_lambda must be at least 1".into(),
            ));
        }
        if !(self.lambda_min_nm < self.lambda_max_nm) || !(self.lambda_min_nm > 0.0) {
            return Err(DatasetError::InvalidConfig(format!(
                "need 0 < lambda_min < lambda_max, got [{}, {}]",
                self.lambda_min_nm, self.lambda_max_nm
            )));
        }
        if self.thicknesses_nm.is_empty() {
            return Err(DatasetError::InvalidConfig(
                "thickness list is empty".into(),
            ));
        }
        if let Some(t) = self
            .thicknesses_nm
            .iter()
            .find(|t| !(**t > 0.0 && t.is_finite()))
        {
            return Err(DatasetError::InvalidConfig(format!(
                "thickness must be positive, got {t}"
            )));
        }
        Ok(())
    }

    /// Inclusive, uniformly spaced vacuum wavelengths (nm).
    pub fn wavelengths_nm(&self) -> Vec<f64> {
        if self.n_lambda == 1 {
            return vec![self.lambda_min_nm];
        }
        let step = (self.lambda_max_nm - self.lambda_min_nm) / (self.n_lambda - 1) as f64;
        (0..self.n_lambda)
            .map(|i| {
                if i + 1 == self.n_lambda {
                    self.lambda_max_nm
                } else {
                    self.lambda_min_nm + step * i as f64
                }
            })
            .collect()
    }

    pub fn to_metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        let ts: Vec<String> = self.thicknesses_nm.iter().map(|t| t.to_string()).collect();
        m.set("grid.thicknesses_nm", ts.join(" "));
        m.set("grid.lambda_min_nm", self.lambda_min_nm);
        m.set("grid.lambda_max_nm", self.lambda_max_nm);
        m.set("grid.n_lambda", self.n_lambda);
        m.set("grid.eps_dielectric", self.eps_dielectric);
        m.set("grid.parity", self.parity);
        m.set("grid.solver_max_iterations", self.solver.max_iterations);
        m.set("grid.solver_tolerance", self.solver.tolerance);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExclusionReason {
    Unbound,
    InfinitePropagationLength,
    SolverFailure(String),
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExclusionReason::Unbound => f.write_str("unbound"),
            ExclusionReason::InfinitePropagationLength => {
                f.write_str("infinite_propagation_length")
            }
            // commas would break the log's CSV layout
            ExclusionReason::SolverFailure(msg) => {
                write!(f, "solver_failure: {}", msg.replace(',', ";"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub lambda0_nm: f64,
    pub thickness_nm: f64,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedGrid {
    pub dataset: Dataset,
    pub exclusions: Vec<Exclusion>,
}

fn solve_point(
    cfg: &GridConfig,
    metal: &dyn PermittivityModel,
    lambda_nm: f64,
    t_nm: f64,
) -> std::result::Result<Sample, ExclusionReason> {
    let failure = |e: PhysicsError| ExclusionReason::SolverFailure(e.to_string());
    let lambda0 = lambda_nm * 1e-9;
    let eps = metal.permittivity(lambda0).map_err(failure)?;
    let sol = physics::thin_film_solve(
        cfg.eps_dielectric,
        eps,
        t_nm * 1e-9,
        lambda0,
        cfg.parity,
        &cfg.solver,
    )
    .map_err(failure)?;
    if !sol.wavevector.bound {
        return Err(ExclusionReason::Unbound);
    }
    let obs = SppObservables::from_wavevector(&sol.wavevector).map_err(failure)?;
    match obs.propagation_length {
        PropagationLength::Infinite => Err(ExclusionReason::InfinitePropagationLength),
        PropagationLength::Finite(len) => Ok(Sample {
            lambda0: lambda_nm,
            thickness: t_nm,
            lambda_spp: obs.wavelength * 1e9,
            propagation_length: len * 1e9,
        }),
    }
}

/// Solves every (λ₀, t) grid point, thickness-major.
///
/// Unbound and lossless points are excluded and logged. Solver failures are
/// also excluded, but more than 10% of them aborts generation.
pub fn generate_grid(cfg: &GridConfig, metal: &dyn PermittivityModel) -> Result<GeneratedGrid> {
    cfg.validate()?;
    let wavelengths = cfg.wavelengths_nm();
    let total = wavelengths.len() * cfg.thicknesses_nm.len();
    let mut samples = Vec::with_capacity(total);
    let mut exclusions = Vec::new();
    let mut failed = 0;
    for &t in &cfg.thicknesses_nm {
        for &lambda in &wavelengths {
            match solve_point(cfg, metal, lambda, t) {
                Ok(s) => samples.push(s),
                Err(reason) => {
                    if matches!(reason, ExclusionReason::SolverFailure(_)) {
                        failed += 1;
                    }
                    log::warn!("excluding lambda0={lambda} nm, t={t} nm: {reason}");
                    exclusions.push(Exclusion {
                        lambda0_nm: lambda,
                        thickness_nm: t,
                        reason,
                    });
                }
            }
        }
    }
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(DatasetError::TooManyFailures { failed, total });
    }
    let mut dataset = Dataset::new(samples);
    dataset.metadata = cfg.to_metadata();
    dataset.metadata.set("grid.points", total);
    dataset.metadata.set("grid.excluded", exclusions.len());
    Ok(GeneratedGrid {
        dataset,
        exclusions,
    })
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset in physical units with `# key=value` provenance lines
/// (including the normalization record when present) above the header.
pub fn write_csv<W: Write>(ds: &Dataset, w: &mut W) -> std::io::Result<()> {
    let mut meta = ds.metadata.clone();
    if let Some(n) = &ds.normalization {
        for (k, v) in n.to_metadata() {
            meta.set(k, v);
        }
    }
    meta.write_comments(w)?;
    writeln!(w, "{CSV_HEADER}")?;
    for s in ds.physical_samples() {
        let row: Vec<String> = s.to_array().iter().map(|&v| fmt17(v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a dataset in physical units; any normalization record stays in the
/// metadata (see [`NormalizationState::from_metadata`]).
pub fn read_csv<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut metadata = Metadata::new();
    let mut samples = Vec::new();
    let mut header_seen = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            metadata.absorb_comment(trimmed);
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            let expected: Vec<&str> = CSV_HEADER.split(',').collect();
            if cols != expected {
                return Err(DatasetError::Parse {
                    line: lineno,
                    message: format!("expected header `{CSV_HEADER}`, got `{trimmed}`"),
                });
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(DatasetError::Parse {
                line: lineno,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut v = [0.0; 4];
        for (slot, (field, col)) in v.iter_mut().zip(fields.iter().zip(Column::ALL)) {
            *slot = field.parse::<f64>().map_err(|e| DatasetError::Parse {
                line: lineno,
                message: format!("column {}: {e}", col.name()),
            })?;
        }
        samples.push(Sample::from_array(v));
    }
    if !header_seen {
        return Err(DatasetError::Parse {
            line: 0,
            message: "missing header".into(),
        });
    }
    Ok(Dataset {
        samples,
        normalization: None,
        metadata,
    })
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    read_csv(BufReader::new(File::open(path)?))
}

pub fn write_exclusions<W: Write>(
    exclusions: &[Exclusion],
    meta: &Metadata,
    w: &mut W,
) -> std::io::Result<()> {
    meta.write_comments(w)?;
    writeln!(w, "{EXCLUSION_HEADER}")?;
    for e in exclusions {
        writeln!(
            w,
            "{},{},{}",
            fmt17(e.lambda0_nm),
            fmt17(e.thickness_nm),
            e.reason
        )?;
    }
    Ok(())
}
