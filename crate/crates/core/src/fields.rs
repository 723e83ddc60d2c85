//! Closed-form waveguide packet and the Bohmian velocity fields built on it.
//!
//! Natural units ħ = m = ω_z = 1. The waveguide axis is ẑ, the detector is
//! the plane z = L, and a hard wall sits at z = 0.
//!
//! Spin-term sign convention: a particle carrying spin `c` (±1) along `n̂`
//! in a product state has conditional velocity
//! `∇S + c (∇|G|/|G|) × n̂`. For particle 2 of the singlet, Alice's outcome
//! `s` leaves particle 2 carrying `c = -s`, which reproduces the
//! `∇S - s (∇|G|/|G|) × n̂` branch field.

use std::f64::consts::PI;

use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::{erf::erf, gamma::gamma_lr};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("point z = {z} lies outside the packet support")]
    DomainError { z: f64 },
    #[error("both branch amplitudes vanish")]
    BothZero,
    #[error("packet amplitude vanishes at the evaluation point")]
    ZeroAmplitude,
    #[error("operation requires conv_mode = constant-k")]
    ModeError,
    #[error("invalid model parameter: {0}")]
    InvalidModel(String),
    #[error("spin axis must be a non-zero finite vector")]
    InvalidAxis,
}

/// Longitudinal initial profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZMode {
    /// Ground state of the half oscillator, `∝ z e^{-z²/2} θ(z)`.
    HalfOscillator,
    /// `∝ e^{-z²/2} θ(z)`, renormalised on the half line.
    TruncatedGaussian,
}

/// Axial convective field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvMode {
    /// Free dispersion, `v_z = t z / (1 + t²)`.
    ExactDnd,
    /// Plane-wave approximation, `v_z = k2`.
    ConstantK,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveguideModel {
    pub omega: f64,
    #[serde(rename = "L")]
    pub detector_l: f64,
    pub z_mode: ZMode,
    pub conv_mode: ConvMode,
    pub k2: f64,
}

impl Default for WaveguideModel {
    fn default() -> Self {
        WaveguideModel {
            omega: 4.0,
            detector_l: 5.0,
            z_mode: ZMode::HalfOscillator,
            conv_mode: ConvMode::ExactDnd,
            k2: 1.0,
        }
    }
}

impl WaveguideModel {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(FieldError::InvalidModel(format!(
                "omega = {} must be > 0",
                self.omega
            )));
        }
        if !(self.detector_l > 0.0 && self.detector_l.is_finite()) {
            return Err(FieldError::InvalidModel(format!(
                "L = {} must be > 0",
                self.detector_l
            )));
        }
        if self.conv_mode == ConvMode::ConstantK && !(self.k2 > 0.0 && self.k2.is_finite()) {
            return Err(FieldError::InvalidModel(format!(
                "k2 = {} must be > 0",
                self.k2
            )));
        }
        Ok(())
    }

    /// Width scale `√(1+t²)` of the freely dispersing longitudinal profile.
    pub fn spread(t: f64) -> f64 {
        (1.0 + t * t).sqrt()
    }

    /// Normalised longitudinal density at time `t`.
    pub fn z_density(&self, z: f64, t: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        let s = Self::spread(t);
        let u = z / s;
        let base = match self.z_mode {
            ZMode::HalfOscillator => 4.0 / PI.sqrt() * u * u * (-u * u).exp(),
            ZMode::TruncatedGaussian => 2.0 / PI.sqrt() * (-u * u).exp(),
        };
        base / s
    }

    /// Longitudinal CDF at time `t`; the profile keeps its shape and widens by `√(1+t²)`.
    pub fn z_cdf(&self, z: f64, t: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        let u = z / Self::spread(t);
        match self.z_mode {
            ZMode::HalfOscillator => gamma_lr(1.5, u * u),
            ZMode::TruncatedGaussian => erf(u),
        }
    }

    /// Transverse ground-state density `(ω/π) e^{-ωρ²}`.
    pub fn transverse_density(&self, x: f64, y: f64) -> f64 {
        self.omega / PI * (-self.omega * (x * x + y * y)).exp()
    }

    /// Normalised packet amplitude `|G|` at time `t`.
    pub fn amplitude(&self, x: &Vec3, t: f64) -> f64 {
        (self.z_density(x.z, t) * self.transverse_density(x.x, x.y)).sqrt()
    }

    /// Spatial phase `S` (up to a position-independent term).
    pub fn phase(&self, x: &Vec3, t: f64) -> f64 {
        match self.conv_mode {
            ConvMode::ExactDnd => t * x.z * x.z / (2.0 * (1.0 + t * t)),
            ConvMode::ConstantK => self.k2 * x.z,
        }
    }

    /// Logarithmic amplitude gradient `∇|G|/|G|` in Cartesian components.
    #[inline]
    pub fn log_amp_gradient(&self, x: &Vec3, t: f64) -> Result<Vec3, FieldError> {
        Ok(Vec3::new(
            -self.omega * x.x,
            -self.omega * x.y,
            self.log_amp_dz(x.z, t)?,
        ))
    }

    #[inline]
    fn log_amp_dz(&self, z: f64, t: f64) -> Result<f64, FieldError> {
        match self.z_mode {
            ZMode::HalfOscillator => {
                if z <= 0.0 {
                    return Err(FieldError::DomainError { z });
                }
                Ok(1.0 / z - z / (1.0 + t * t))
            }
            ZMode::TruncatedGaussian => Ok(-z / (1.0 + t * t)),
        }
    }
}

/// `|Ψ₀(x)|²` of the initial state, zero behind the wall.
pub fn initial_density(m: &WaveguideModel, x: &Vec3) -> f64 {
    m.z_density(x.z, 0.0) * m.transverse_density(x.x, x.y)
}

/// `(∂ρ|G|/|G|, ∂z|G|/|G|)` for the dispersing packet.
pub fn log_amp_gradients(
    m: &WaveguideModel,
    rho: f64,
    z: f64,
    t: f64,
) -> Result<(f64, f64), FieldError> {
    Ok((-m.omega * rho, m.log_amp_dz(z, t)?))
}

#[inline]
pub fn convective_velocity(m: &WaveguideModel, x: &Vec3, t: f64) -> Vec3 {
    match m.conv_mode {
        ConvMode::ExactDnd => Vec3::new(0.0, 0.0, t * x.z / (1.0 + t * t)),
        ConvMode::ConstantK => Vec3::new(0.0, 0.0, m.k2),
    }
}

/// Spin measurement axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct SpinAxis(Vec3);

impl SpinAxis {
    pub fn new(v: Vec3) -> Result<Self, FieldError> {
        let n = v.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(FieldError::InvalidAxis);
        }
        Ok(SpinAxis(v / n))
    }

    /// Transverse axis x̂.
    pub fn x() -> Self {
        SpinAxis(Vec3::x())
    }

    /// Longitudinal axis ẑ.
    pub fn z() -> Self {
        SpinAxis(Vec3::z())
    }

    pub fn vector(&self) -> Vec3 {
        self.0
    }

    pub fn is_transverse(&self) -> bool {
        self.0.z.abs() < 1e-12
    }
}

impl TryFrom<[f64; 3]> for SpinAxis {
    type Error = FieldError;
    fn try_from(a: [f64; 3]) -> Result<Self, FieldError> {
        SpinAxis::new(Vec3::new(a[0], a[1], a[2]))
    }
}

impl From<SpinAxis> for [f64; 3] {
    fn from(a: SpinAxis) -> [f64; 3] {
        [a.0.x, a.0.y, a.0.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpinOutcome {
    Up,
    Down,
}

impl SpinOutcome {
    pub fn value(self) -> f64 {
        match self {
            SpinOutcome::Up => 1.0,
            SpinOutcome::Down => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            SpinOutcome::Up => SpinOutcome::Down,
            SpinOutcome::Down => SpinOutcome::Up,
        }
    }
}

/// Velocity of a particle carrying spin `carried` along `axis` in a product state.
#[inline]
pub fn conditional_velocity(
    m: &WaveguideModel,
    axis: SpinAxis,
    carried: SpinOutcome,
    x: &Vec3,
    t: f64,
) -> Result<Vec3, FieldError> {
    let grad = m.log_amp_gradient(x, t)?;
    Ok(convective_velocity(m, x, t) + grad.cross(&axis.vector()) * carried.value())
}

/// Convex blending coefficients of the two singlet branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchWeights {
    pub plus: f64,
    pub minus: f64,
}

pub fn weights(f_plus_abs2: f64, f_minus_abs2: f64) -> Result<BranchWeights, FieldError> {
    debug_assert!(f_plus_abs2 >= 0.0 && f_minus_abs2 >= 0.0);
    let total = f_plus_abs2 + f_minus_abs2;
    if total == 0.0 {
        return Err(FieldError::BothZero);
    }
    Ok(BranchWeights {
        plus: f_plus_abs2 / total,
        minus: f_minus_abs2 / total,
    })
}

/// `w₊ v₊ + w₋ v₋`, where `v₊` is the field of the branch in which particle 1
/// carries `+n̂` (so particle 2 carries `-n̂`).
pub fn mixed_velocity(w: &BranchWeights, v_plus_branch: &Vec3, v_minus_branch: &Vec3) -> Vec3 {
    v_plus_branch * w.plus + v_minus_branch * w.minus
}

/// Which guiding field particle 2 feels, fixed by the foliation order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Alice has measured along `axis` with result `outcome`.
    AliceFirst {
        axis: SpinAxis,
        outcome: SpinOutcome,
    },
    BobFirst,
}

#[inline]
pub fn scenario_velocity(
    m: &WaveguideModel,
    scenario: &Scenario,
    x2: &Vec3,
    t: f64,
) -> Result<Vec3, FieldError> {
    match scenario {
        Scenario::AliceFirst { axis, outcome } => {
            conditional_velocity(m, *axis, outcome.flipped(), x2, t)
        }
        Scenario::BobFirst => Ok(convective_velocity(m, x2, t)),
    }
}

/// Plane-wave backflow condition `s (∂ρ|G|/|G|) sinφ / k2 < -1` for Alice's
/// outcome `s` along x̂.
pub fn backflow_predicate(
    m: &WaveguideModel,
    s: SpinOutcome,
    x: &Vec3,
    t: f64,
) -> Result<bool, FieldError> {
    if m.conv_mode != ConvMode::ConstantK {
        return Err(FieldError::ModeError);
    }
    let rho = x.x.hypot(x.y);
    if rho == 0.0 {
        return Ok(false);
    }
    let (d_rho, _) = log_amp_gradients(m, rho, x.z, t)?;
    let sin_phi = x.y / rho;
    Ok(s.value() * d_rho * sin_phi / m.k2 < -1.0)
}

/// A scalar wave packet in polar form `|f| e^{iS}`.
pub trait SpatialPacket {
    fn value(&self, x: &Vec3, t: f64) -> Complex64;
    fn log_amp_gradient(&self, x: &Vec3, t: f64) -> Vec3;
    fn phase_gradient(&self, x: &Vec3, t: f64) -> Vec3;

    fn amplitude(&self, x: &Vec3, t: f64) -> f64 {
        self.value(x, t).norm()
    }
}

impl SpatialPacket for WaveguideModel {
    fn value(&self, x: &Vec3, t: f64) -> Complex64 {
        Complex64::from_polar(self.amplitude(x, t), self.phase(x, t))
    }

    fn log_amp_gradient(&self, x: &Vec3, t: f64) -> Vec3 {
        WaveguideModel::log_amp_gradient(self, x, t).unwrap_or_else(|_| Vec3::repeat(f64::NAN))
    }

    fn phase_gradient(&self, x: &Vec3, t: f64) -> Vec3 {
        convective_velocity(self, x, t)
    }
}

/// Static isotropic Gaussian `exp(-|x-c|²/(4σ²) + i k·x)`, normalised in 3D.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPacket {
    pub center: Vec3,
    pub sigma: f64,
    pub momentum: Vec3,
}

impl GaussianPacket {
    pub fn new(center: Vec3, sigma: f64, momentum: Vec3) -> Self {
        GaussianPacket {
            center,
            sigma,
            momentum,
        }
    }

    fn norm(&self) -> f64 {
        (2.0 * PI * self.sigma * self.sigma).powf(-0.75)
    }
}

impl SpatialPacket for GaussianPacket {
    fn value(&self, x: &Vec3, _t: f64) -> Complex64 {
        let d = x - self.center;
        let amp = self.norm() * (-d.norm_squared() / (4.0 * self.sigma * self.sigma)).exp();
        Complex64::from_polar(amp, self.momentum.dot(x))
    }

    fn log_amp_gradient(&self, x: &Vec3, _t: f64) -> Vec3 {
        -(x - self.center) / (2.0 * self.sigma * self.sigma)
    }

    fn phase_gradient(&self, _x: &Vec3, _t: f64) -> Vec3 {
        self.momentum
    }
}

/// Particle-1 conditional field `∇S₁ + s (∇|f|/|f|) × n̂` for its own outcome `s`.
pub fn particle1_conditional_velocity<P: SpatialPacket + ?Sized>(
    f: &P,
    axis: SpinAxis,
    s: SpinOutcome,
    x1: &Vec3,
    t: f64,
) -> Result<Vec3, FieldError> {
    if f.amplitude(x1, t) <= 0.0 {
        return Err(FieldError::ZeroAmplitude);
    }
    Ok(f.phase_gradient(x1, t) + f.log_amp_gradient(x1, t).cross(&axis.vector()) * s.value())
}

/// Particle-2 branch field `∇S₀ - s (∇|g₀|/|g₀|) × n̂` for Alice's outcome `s`,
/// for an arbitrary spatial packet.
pub fn particle2_branch_velocity<P: SpatialPacket + ?Sized>(
    g0: &P,
    axis: SpinAxis,
    s: SpinOutcome,
    x2: &Vec3,
    t: f64,
) -> Result<Vec3, FieldError> {
    if g0.amplitude(x2, t) <= 0.0 {
        return Err(FieldError::ZeroAmplitude);
    }
    Ok(g0.phase_gradient(x2, t) - g0.log_amp_gradient(x2, t).cross(&axis.vector()) * s.value())
}

/// Eigenspinor of `n̂·σ` with eigenvalue `s`, in the σ_z basis.
pub fn spin_eigenstate(axis: SpinAxis, s: SpinOutcome) -> [Complex64; 2] {
    let n = axis.vector();
    let theta = n.z.clamp(-1.0, 1.0).acos();
    let phi = n.y.atan2(n.x);
    let (c, sn) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    match s {
        SpinOutcome::Up => [Complex64::new(c, 0.0), Complex64::from_polar(sn, phi)],
        SpinOutcome::Down => [-Complex64::from_polar(sn, -phi), Complex64::new(c, 0.0)],
    }
}

/// Point sampler of a spinor-valued wave function. The component list has
/// even length `2k`; index `2j + b` holds spin component `b` of the tracked
/// particle, `j` enumerating the other particles' spin states.
pub trait SpinorFieldSampler {
    fn sample(&self, x: &Vec3) -> Vec<Complex64>;
}

impl<F> SpinorFieldSampler for F
where
    F: Fn(&Vec3) -> Vec<Complex64>,
{
    fn sample(&self, x: &Vec3) -> Vec<Complex64> {
        self(x)
    }
}

/// `g(x) χ_{c n̂}` for a single particle.
pub struct ProductSpinor<'a, P: SpatialPacket + ?Sized> {
    pub packet: &'a P,
    pub axis: SpinAxis,
    pub carried: SpinOutcome,
    pub t: f64,
}

impl<P: SpatialPacket + ?Sized> SpinorFieldSampler for ProductSpinor<'_, P> {
    fn sample(&self, x: &Vec3) -> Vec<Complex64> {
        let g = self.packet.value(x, self.t);
        spin_eigenstate(self.axis, self.carried)
            .iter()
            .map(|c| g * c)
            .collect()
    }
}

/// Singlet `(g₀(x₂)/√2) Σ_s s f_s(x₁) χ_{s n̂} ⊗ χ_{-s n̂}` viewed as a
/// function of particle 2's position, particle 1 held at `x1`.
pub struct SingletSpinor<'a, F: SpatialPacket + ?Sized, G: SpatialPacket + ?Sized> {
    pub f_plus: &'a F,
    pub f_minus: &'a F,
    pub g0: &'a G,
    pub axis: SpinAxis,
    pub x1: Vec3,
    pub t: f64,
}

impl<F: SpatialPacket + ?Sized, G: SpatialPacket + ?Sized> SpinorFieldSampler
    for SingletSpinor<'_, F, G>
{
    fn sample(&self, x2: &Vec3) -> Vec<Complex64> {
        let g = self.g0.value(x2, self.t) / 2f64.sqrt();
        let mut out = vec![Complex64::new(0.0, 0.0); 4];
        for (s, f) in [
            (SpinOutcome::Up, self.f_plus),
            (SpinOutcome::Down, self.f_minus),
        ] {
            let amp = g * f.value(&self.x1, self.t) * s.value();
            let a = spin_eigenstate(self.axis, s);
            let b = spin_eigenstate(self.axis, s.flipped());
            for i in 0..2 {
                for j in 0..2 {
                    out[2 * i + j] += amp * a[i] * b[j];
                }
            }
        }
        out
    }
}

fn spin_density(psi: &[Complex64]) -> Vec3 {
    let mut s = Vec3::zeros();
    for pair in psi.chunks_exact(2) {
        let (u, d) = (pair[0], pair[1]);
        let ud = u.conj() * d;
        s += Vec3::new(2.0 * ud.re, 2.0 * ud.im, u.norm_sqr() - d.norm_sqr());
    }
    s
}

/// Finite-difference Pauli current `Im[Ψ†∇Ψ] + ½∇×(Ψ†σΨ)`.
pub fn pauli_current_numeric<S: SpinorFieldSampler + ?Sized>(psi: &S, x: &Vec3, h: f64) -> Vec3 {
    pauli_current_numeric_with(psi, x, h, 1.0)
}

/// As [`pauli_current_numeric`] with the spin flux scaled by `spin_flux_sign`;
/// `-1.0` produces a deliberately wrong current for mutation checks.
pub fn pauli_current_numeric_with<S: SpinorFieldSampler + ?Sized>(
    psi: &S,
    x: &Vec3,
    h: f64,
    spin_flux_sign: f64,
) -> Vec3 {
    let center = psi.sample(x);
    let mut convective = Vec3::zeros();
    // jac[(k, j)] = ∂_j S_k
    let mut jac = nalgebra::Matrix3::<f64>::zeros();
    for j in 0..3 {
        let mut e = Vec3::zeros();
        e[j] = h;
        let fwd = psi.sample(&(x + e));
        let bwd = psi.sample(&(x - e));
        let im: f64 = center
            .iter()
            .zip(fwd.iter().zip(bwd.iter()))
            .map(|(c, (f, b))| (c.conj() * (f - b)).im)
            .sum();
        convective[j] = im / (2.0 * h);
        let ds = (spin_density(&fwd) - spin_density(&bwd)) / (2.0 * h);
        jac.set_column(j, &ds);
    }
    let curl = Vec3::new(
        jac[(2, 1)] - jac[(1, 2)],
        jac[(0, 2)] - jac[(2, 0)],
        jac[(1, 0)] - jac[(0, 1)],
    );
    convective + curl * (0.5 * spin_flux_sign)
}

/// `|Ψ|²` of the singlet, `(|g₀|²/2)(|f₊|² + |f₋|²)`.
pub fn singlet_density<F, G>(fp: &F, fm: &F, g0: &G, x1: &Vec3, x2: &Vec3, t: f64) -> f64
where
    F: SpatialPacket + ?Sized,
    G: SpatialPacket + ?Sized,
{
    let g2 = g0.value(x2, t).norm_sqr();
    0.5 * g2 * (fp.value(x1, t).norm_sqr() + fm.value(x1, t).norm_sqr())
}

/// Closed-form particle-2 current of the singlet,
/// `(|g₀|²/2) Σ_s |f_s|² [∇S₀ - s (∇|g₀|/|g₀|) × n̂]`.
pub fn singlet_current2_closed<F, G>(
    fp: &F,
    fm: &F,
    g0: &G,
    axis: SpinAxis,
    x1: &Vec3,
    x2: &Vec3,
    t: f64,
) -> Result<Vec3, FieldError>
where
    F: SpatialPacket + ?Sized,
    G: SpatialPacket + ?Sized,
{
    let g2 = g0.value(x2, t).norm_sqr();
    if g2 <= 0.0 {
        return Err(FieldError::ZeroAmplitude);
    }
    let phase = g0.phase_gradient(x2, t);
    let spin = g0.log_amp_gradient(x2, t).cross(&axis.vector());
    let mut j = Vec3::zeros();
    for (s, f) in [(1.0, fp), (-1.0, fm)] {
        j += (phase - spin * s) * f.value(x1, t).norm_sqr();
    }
    Ok(j * (0.5 * g2))
}
