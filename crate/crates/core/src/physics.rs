//! Metal permittivity and surface plasmon polariton dispersion.
//!
//! Lengths are in metres and angular frequencies in rad/s throughout this
//! module. Dispersion equations are solved in terms of the effective index
//! `n = β / k₀`, which makes every solve depend only on `t / λ₀` and the two
//! permittivities.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

/// Vacuum speed of light (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("surface plasmon resonance pole: eps_d + eps_m = 0 at eps_m = {re} + {im}i")]
    ResonancePole { re: f64, im: f64 },
    #[error("dispersion solver did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("negative attenuation Im[beta] = {0:e} (gain media are not supported)")]
    Gain(f64),
    #[error("permittivity table: {0}")]
    Table(String),
}

pub type Result<T> = std::result::Result<T, PhysicsError>;

/// Free-electron (Drude) description of a metal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrudeParams {
    /// Plasma frequency ω_p (rad/s).
    pub plasma_frequency: f64,
    /// Collision rate γ (rad/s).
    pub collision_rate: f64,
    /// Background permittivity ε∞.
    pub epsilon_inf: f64,
}

impl DrudeParams {
    pub fn new(plasma_frequency: f64, collision_rate: f64, epsilon_inf: f64) -> Result<Self> {
        if !(plasma_frequency > 0.0 && plasma_frequency.is_finite()) {
            return Err(PhysicsError::Domain(format!(
                "plasma frequency must be positive, got {plasma_frequency}"
            )));
        }
        if !(collision_rate >= 0.0 && collision_rate.is_finite()) {
            return Err(PhysicsError::Domain(format!(
                "collision rate must be non-negative, got {collision_rate}"
            )));
        }
        if !(epsilon_inf >= 1.0 && epsilon_inf.is_finite()) {
            return Err(PhysicsError::Domain(format!(
                "epsilon_inf must be >= 1, got {epsilon_inf}"
            )));
        }
        Ok(Self {
            plasma_frequency,
            collision_rate,
            epsilon_inf,
        })
    }

    /// Molybdenum free-electron fit of Ordal et al. (Appl. Opt. 24, 4493, 1985):
    /// ω_p = 6.02e4 cm⁻¹ and γ = 4.12e2 cm⁻¹ (spectroscopic wavenumbers), ε∞ = 1.
    pub fn molybdenum() -> Self {
        Self::from_wavenumbers(6.02e4, 4.12e2, 1.0).expect("tabulated constants are valid")
    }

    /// Parameters given as spectroscopic wavenumbers (cm⁻¹), converted to rad/s.
    pub fn from_wavenumbers(plasma_cm: f64, collision_cm: f64, epsilon_inf: f64) -> Result<Self> {
        let per_cm = 2.0 * PI * SPEED_OF_LIGHT * 100.0;
        Self::new(plasma_cm * per_cm, collision_cm * per_cm, epsilon_inf)
    }
}

/// Complex relative permittivity ε = ε_r + iε_i.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexPermittivity {
    pub re: f64,
    pub im: f64,
}

impl ComplexPermittivity {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn real(re: f64) -> Self {
        Self { re, im: 0.0 }
    }

    pub fn as_complex(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }

    /// Metallic character: negative real part.
    pub fn is_metallic(&self) -> bool {
        self.re < 0.0
    }
}

impl From<Complex64> for ComplexPermittivity {
    fn from(z: Complex64) -> Self {
        Self { re: z.re, im: z.im }
    }
}

/// Anything that can report a metal permittivity at a vacuum wavelength.
pub trait PermittivityModel: Send + Sync {
    fn permittivity(&self, lambda0: f64) -> Result<ComplexPermittivity>;
}

impl PermittivityModel for DrudeParams {
    fn permittivity(&self, lambda0: f64) -> Result<ComplexPermittivity> {
        drude_permittivity(lambda0, self)
    }
}

/// ε(ω) = ε∞ − ω_p² / (ω² + iγω) with ω = 2πc/λ₀.
pub fn drude_permittivity(lambda0: f64, p: &DrudeParams) -> Result<ComplexPermittivity> {
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(PhysicsError::Domain(format!(
            "vacuum wavelength must be positive, got {lambda0}"
        )));
    }
    let omega = 2.0 * PI * SPEED_OF_LIGHT / lambda0;
    let denom = Complex64::new(omega * omega, p.collision_rate * omega);
    let eps = p.epsilon_inf - p.plasma_frequency * p.plasma_frequency / denom;
    Ok(eps.into())
}

/// Tabulated permittivity, linearly interpolated in wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedPermittivity {
    /// (λ in metres, ε) rows, strictly increasing in λ.
    rows: Vec<(f64, ComplexPermittivity)>,
}

impl TabulatedPermittivity {
    pub fn new(rows: Vec<(f64, ComplexPermittivity)>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(PhysicsError::Table("at least two rows are required".into()));
        }
        for w in rows.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(PhysicsError::Table(format!(
                    "wavelengths must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Reads a `lambda_nm,eps_real,eps_imag` CSV file.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| PhysicsError::Table(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| PhysicsError::Table(e.to_string()))?
            .clone();
        let expected = ["lambda_nm", "eps_real", "eps_imag"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(PhysicsError::Table(format!(
                "expected header `lambda_nm,eps_real,eps_imag`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| PhysicsError::Table(e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            let field = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| PhysicsError::Table(format!("line {line}: bad field {}", i + 1)))
            };
            rows.push((
                field(0)? * 1e-9,
                ComplexPermittivity::new(field(1)?, field(2)?),
            ));
        }
        Self::new(rows)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.rows[0].0, self.rows[self.rows.len() - 1].0)
    }
}

impl PermittivityModel for TabulatedPermittivity {
    fn permittivity(&self, lambda0: f64) -> Result<ComplexPermittivity> {
        let (lo, hi) = self.range();
        if !(lambda0 >= lo && lambda0 <= hi) {
            return Err(PhysicsError::Domain(format!(
                "wavelength {:.3} nm outside table range [{:.3}, {:.3}] nm",
                lambda0 * 1e9,
                lo * 1e9,
                hi * 1e9
            )));
        }
        let idx = self.rows.partition_point(|(l, _)| *l <= lambda0);
        if idx >= self.rows.len() {
            return Ok(self.rows[self.rows.len() - 1].1);
        }
        let (l0, e0) = self.rows[idx - 1];
        let (l1, e1) = self.rows[idx];
        let f = (lambda0 - l0) / (l1 - l0);
        Ok(ComplexPermittivity::new(
            e0.re + f * (e1.re - e0.re),
            e0.im + f * (e1.im - e0.im),
        ))
    }
}

/// Complex propagation constant along the interface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wavevector {
    /// β (1/m): real part is the phase constant, imaginary part the attenuation.
    pub beta: Complex64,
    /// Free-space wavenumber k₀ = 2π/λ₀ (1/m).
    pub k0: f64,
    /// False when the metal cannot confine a surface mode (ε_d + Re ε_m ≥ 0).
    pub bound: bool,
}

impl Wavevector {
    /// Effective index β / k₀.
    pub fn effective_index(&self) -> Complex64 {
        self.beta / self.k0
    }
}

/// Propagation length, possibly unbounded for lossless media.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PropagationLength {
    Finite(f64),
    Infinite,
}

impl PropagationLength {
    pub fn is_infinite(&self) -> bool {
        matches!(self, PropagationLength::Infinite)
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            PropagationLength::Finite(v) => Some(v),
            PropagationLength::Infinite => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SppObservables {
    /// Plasmon wavelength (m).
    pub wavelength: f64,
    pub propagation_length: PropagationLength,
}

impl SppObservables {
    pub fn from_wavevector(w: &Wavevector) -> Result<Self> {
        Ok(Self {
            wavelength: spp_wavelength(w)?,
            propagation_length: propagation_length(w)?,
        })
    }
}

/// Field parity of the coupled thin-film mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModeParity {
    /// tanh(k_m t/2) = −k_m ε_d / (k_d ε_m); short-range branch.
    Symmetric,
    /// tanh(k_m t/2) = −k_d ε_m / (k_m ε_d); long-range branch.
    #[default]
    Antisymmetric,
}

impl ModeParity {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModeParity::Symmetric => "symmetric",
            ModeParity::Antisymmetric => "antisymmetric",
        }
    }
}

impl fmt::Display for ModeParity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModeParity {
    type Err = PhysicsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(ModeParity::Symmetric),
            "antisymmetric" => Ok(ModeParity::Antisymmetric),
            other => Err(PhysicsError::Domain(format!(
                "unknown mode parity `{other}`"
            ))),
        }
    }
}

fn check_wavelength(lambda0: f64) -> Result<f64> {
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(PhysicsError::Domain(format!(
            "vacuum wavelength must be positive, got {lambda0}"
        )));
    }
    Ok(2.0 * PI / lambda0)
}

fn check_dielectric(eps_d: f64) -> Result<()> {
    if !(eps_d > 0.0 && eps_d.is_finite()) {
        return Err(PhysicsError::Domain(format!(
            "dielectric permittivity must be positive, got {eps_d}"
        )));
    }
    Ok(())
}

/// Picks the sign of `n` so that Re > 0 (or Im ≥ 0 when Re = 0) and clears
/// negative zeros.
fn forward_branch(n: Complex64) -> Complex64 {
    let flip = n.re < 0.0 || (n.re == 0.0 && n.im < 0.0);
    let n = if flip { -n } else { n };
    Complex64::new(n.re + 0.0, n.im + 0.0)
}

/// Single metal/dielectric interface: β = k₀·sqrt(ε_d ε_m / (ε_d + ε_m)).
pub fn single_interface_beta(
    eps_d: f64,
    eps_m: ComplexPermittivity,
    lambda0: f64,
) -> Result<Wavevector> {
    check_dielectric(eps_d)?;
    let k0 = check_wavelength(lambda0)?;
    let em = eps_m.as_complex();
    let sum = em + eps_d;
    if sum.re == 0.0 && sum.im == 0.0 {
        return Err(PhysicsError::ResonancePole {
            re: eps_m.re,
            im: eps_m.im,
        });
    }
    let index = forward_branch((em * eps_d / sum).sqrt());
    Ok(Wavevector {
        beta: index * k0,
        k0,
        bound: eps_d + eps_m.re < 0.0,
    })
}

/// Newton solver settings for the thin-film dispersion equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Acceptance threshold on the normalized residual.
    pub tolerance: f64,
    /// Maximum number of step halvings within one iteration.
    pub max_halvings: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-10,
            max_halvings: 40,
        }
    }
}

/// Thin-film dispersion function in effective-index form.
///
/// With κ_j = sqrt(n² − ε_j) and φ = π t/λ₀ (so that φκ_m = k_m t/2):
/// antisymmetric: f = κ_m ε_d tanh(φκ_m) + κ_d ε_m,
/// symmetric:     f = κ_d ε_m tanh(φκ_m) + κ_m ε_d.
#[derive(Debug, Clone, Copy)]
pub struct FilmDispersion {
    pub eps_d: f64,
    pub eps_m: Complex64,
    /// Film thickness over vacuum wavelength.
    pub thickness_ratio: f64,
    pub parity: ModeParity,
}

impl FilmDispersion {
    fn phase(&self) -> f64 {
        PI * self.thickness_ratio
    }

    /// Returns (f(n), f'(n), normalization scale).
    pub fn evaluate(&self, n: Complex64) -> (Complex64, Complex64, f64) {
        let n2 = n * n;
        let km = (n2 - self.eps_m).sqrt();
        let kd = (n2 - self.eps_d).sqrt();
        let phi = self.phase();
        let th = (km * phi).tanh();
        let sech2 = 1.0 - th * th;
        // d(km)/dn = n/km and d(kd)/dn = n/kd
        match self.parity {
            ModeParity::Antisymmetric => {
                let a = km * th * self.eps_d;
                let b = kd * self.eps_m;
                let da = (n / km) * (th + km * phi * sech2) * self.eps_d;
                let db = (n / kd) * self.eps_m;
                (a + b, da + db, a.norm() + b.norm())
            }
            ModeParity::Symmetric => {
                let a = kd * self.eps_m * th;
                let b = km * self.eps_d;
                let da = self.eps_m * ((n / kd) * th + kd * sech2 * phi * (n / km));
                let db = (n / km) * self.eps_d;
                (a + b, da + db, a.norm() + b.norm())
            }
        }
    }

    /// |f(n)| divided by the magnitude of its two terms.
    pub fn normalized_residual(&self, n: Complex64) -> f64 {
        let (f, _, scale) = self.evaluate(n);
        if scale == 0.0 {
            f.norm()
        } else {
            f.norm() / scale
        }
    }
}

/// Result of a thin-film solve, including solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilmSolution {
    pub wavevector: Wavevector,
    pub residual: f64,
    pub iterations: usize,
}

/// Insulator–metal–insulator film of thickness `t` with identical claddings.
pub fn thin_film_beta(
    eps_d: f64,
    eps_m: ComplexPermittivity,
    t: f64,
    lambda0: f64,
    parity: ModeParity,
) -> Result<Wavevector> {
    thin_film_solve(eps_d, eps_m, t, lambda0, parity, &SolverSettings::default())
        .map(|s| s.wavevector)
}

/// Damped complex Newton iteration seeded from the single-interface index.
///
/// Returns an unbound-flagged wavevector (no solve) when the seed itself is
/// not a bound mode.
pub fn thin_film_solve(
    eps_d: f64,
    eps_m: ComplexPermittivity,
    t: f64,
    lambda0: f64,
    parity: ModeParity,
    settings: &SolverSettings,
) -> Result<FilmSolution> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(PhysicsError::Domain(format!(
            "film thickness must be positive, got {t}"
        )));
    }
    let seed = single_interface_beta(eps_d, eps_m, lambda0)?;
    if !seed.bound {
        return Ok(FilmSolution {
            wavevector: seed,
            residual: f64::NAN,
            iterations: 0,
        });
    }
    let k0 = seed.k0;
    let eq = FilmDispersion {
        eps_d,
        eps_m: eps_m.as_complex(),
        thickness_ratio: t / lambda0,
        parity,
    };

    let mut n = seed.effective_index();
    let (mut f, mut df, scale) = eq.evaluate(n);
    let mut residual = f.norm() / scale;
    let mut iterations = 0;
    // Polish below the acceptance threshold; stop when the residual stalls.
    let target = settings.tolerance * 1e-3;
    while residual > target && iterations < settings.max_iterations {
        iterations += 1;
        let step = f / df;
        if !step.re.is_finite() || !step.im.is_finite() {
            break;
        }
        let mut damping = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let trial = n - step * damping;
            let (ft, dft, st) = eq.evaluate(trial);
            let rt = ft.norm() / st;
            if rt.is_finite() && rt < residual {
                accepted = Some((trial, ft, dft, rt));
                break;
            }
            damping *= 0.5;
        }
        match accepted {
            Some((trial, ft, dft, rt)) => {
                n = trial;
                f = ft;
                df = dft;
                residual = rt;
            }
            None => break,
        }
    }
    if !(residual < settings.tolerance) {
        return Err(PhysicsError::NoConvergence {
            iterations,
            residual,
        });
    }
    Ok(FilmSolution {
        wavevector: Wavevector {
            beta: forward_branch(n) * k0,
            k0,
            bound: true,
        },
        residual,
        iterations,
    })
}

/// λ_SPP = 2π / Re[β].
pub fn spp_wavelength(w: &Wavevector) -> Result<f64> {
    if !(w.beta.re > 0.0) {
        return Err(PhysicsError::Domain(format!(
            "Re[beta] must be positive, got {}",
            w.beta.re
        )));
    }
    Ok(2.0 * PI / w.beta.re)
}

/// L_SPP = 1 / Im[β]; lossless modes report [`PropagationLength::Infinite`].
pub fn propagation_length(w: &Wavevector) -> Result<PropagationLength> {
    let im = w.beta.im;
    if im < 0.0 {
        return Err(PhysicsError::Gain(im));
    }
    if im == 0.0 {
        return Ok(PropagationLength::Infinite);
    }
    Ok(PropagationLength::Finite(1.0 / im))
}
