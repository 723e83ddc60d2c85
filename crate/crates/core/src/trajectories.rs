//! Fixed-step RK4 integration of single Bohmian trajectories with
//! first-crossing detection at the detector plane `z = L`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{FieldError, Vec3};

/// Smallest axial coordinate allowed after a step; the wall sits at `z = 0`.
pub const WALL_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("velocity magnitude {speed} exceeds bound {bound} at t = {t}")]
    FieldBlowup { speed: f64, bound: f64, t: f64 },
    #[error("field evaluation failed at t = {t}: {source}")]
    Field { t: f64, source: FieldError },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("initial position z = {0} is outside the packet support")]
    OutsideSupport(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_max: f64,
    pub crossing_tol: f64,
    #[serde(default = "default_speed_bound")]
    pub speed_bound: f64,
}

fn default_speed_bound() -> f64 {
    1e6
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            dt: 1e-3,
            t_max: 20.0,
            crossing_tol: 1e-10,
            speed_bound: default_speed_bound(),
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let bad = |m: String| Err(TrajectoryError::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {} must be > 0", self.dt));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max = {} must be > 0", self.t_max));
        }
        if !(self.crossing_tol > 0.0 && self.crossing_tol <= self.dt) {
            return bad(format!(
                "crossing_tol = {} must lie in (0, dt]",
                self.crossing_tol
            ));
        }
        if !(self.speed_bound > 0.0) {
            return bad(format!("speed_bound = {} must be > 0", self.speed_bound));
        }
        Ok(())
    }

    pub fn with_horizon(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arrival {
    Arrived { tau: f64, crossing_point: [f64; 3] },
    NoArrivalWithinHorizon,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrivalRecord {
    pub outcome: Arrival,
    /// Minimum axial velocity seen at step starts (and at the start of the refined crossing step).
    pub min_vz: f64,
    /// Maximum |ρ(t) - ρ(0)| over the accepted steps.
    pub rho_drift: f64,
    /// Steps after which the wall guard had to clamp z.
    pub wall_hits: u32,
}

impl ArrivalRecord {
    pub fn tau(&self) -> Option<f64> {
        match self.outcome {
            Arrival::Arrived { tau, .. } => Some(tau),
            Arrival::NoArrivalWithinHorizon => None,
        }
    }
}

/// Velocity field `v(x, t)` guiding a trajectory.
pub trait VelocityField {
    fn velocity(&self, x: &Vec3, t: f64) -> Result<Vec3, FieldError>;
}

impl<F> VelocityField for F
where
    F: Fn(&Vec3, f64) -> Result<Vec3, FieldError>,
{
    fn velocity(&self, x: &Vec3, t: f64) -> Result<Vec3, FieldError> {
        self(x, t)
    }
}

struct Stepper<'a, F: VelocityField + ?Sized> {
    field: &'a F,
    bound: f64,
}

impl<F: VelocityField + ?Sized> Stepper<'_, F> {
    #[inline]
    fn eval(&self, x: &Vec3, t: f64) -> Result<Vec3, TrajectoryError> {
        let v = self
            .field
            .velocity(x, t)
            .map_err(|source| TrajectoryError::Field { t, source })?;
        if !(v.norm_squared() <= self.bound * self.bound) {
            return Err(TrajectoryError::FieldBlowup {
                speed: v.norm(),
                bound: self.bound,
                t,
            });
        }
        Ok(v)
    }

    /// One classical RK4 step of size `h` given the slope `k1` at the start.
    #[inline]
    fn step(&self, x: &Vec3, t: f64, h: f64, k1: &Vec3) -> Result<Vec3, TrajectoryError> {
        let k2 = self.eval(&(x + k1 * (h / 2.0)), t + h / 2.0)?;
        let k3 = self.eval(&(x + k2 * (h / 2.0)), t + h / 2.0)?;
        let k4 = self.eval(&(x + k3 * h), t + h)?;
        Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
    }
}

fn radius(x: &Vec3) -> f64 {
    x.x.hypot(x.y)
}

/// Integrates from `x0` at `t = 0` until the first time `z` reaches `detector_l`.
pub fn integrate_until_crossing<F: VelocityField + ?Sized>(
    field: &F,
    x0: Vec3,
    cfg: &IntegratorConfig,
    detector_l: f64,
) -> Result<ArrivalRecord, TrajectoryError> {
    cfg.validate()?;
    if !(x0.z > 0.0) {
        return Err(TrajectoryError::OutsideSupport(x0.z));
    }
    let stepper = Stepper {
        field,
        bound: cfg.speed_bound,
    };
    let rho0 = radius(&x0);
    let mut rec = ArrivalRecord {
        outcome: Arrival::NoArrivalWithinHorizon,
        min_vz: f64::INFINITY,
        rho_drift: 0.0,
        wall_hits: 0,
    };
    if x0.z >= detector_l {
        rec.outcome = Arrival::Arrived {
            tau: 0.0,
            crossing_point: [x0.x, x0.y, x0.z],
        };
        rec.min_vz = stepper.eval(&x0, 0.0)?.z;
        return Ok(rec);
    }

    let mut x = x0;
    let mut i: u64 = 0;
    loop {
        let t = i as f64 * cfg.dt;
        if t >= cfg.t_max {
            break;
        }
        let h = cfg.dt.min(cfg.t_max - t);
        let k1 = stepper.eval(&x, t)?;
        rec.min_vz = rec.min_vz.min(k1.z);
        let mut next = stepper.step(&x, t, h, &k1)?;
        if next.z >= detector_l {
            let (tau, point) =
                refine_crossing(&stepper, &x, t, h, &k1, detector_l, cfg.crossing_tol)?;
            rec.rho_drift = rec.rho_drift.max((radius(&point) - rho0).abs());
            rec.outcome = Arrival::Arrived {
                tau,
                crossing_point: [point.x, point.y, point.z],
            };
            return Ok(rec);
        }
        if next.z < WALL_GUARD {
            next.z = WALL_GUARD;
            rec.wall_hits += 1;
        }
        rec.rho_drift = rec.rho_drift.max((radius(&next) - rho0).abs());
        x = next;
        i += 1;
    }
    Ok(rec)
}

/// Bisection on the sub-step size until the bracket around `z = L` is
/// narrower than `tol`; returns the upper end, where `z ≥ L` holds.
fn refine_crossing<F: VelocityField + ?Sized>(
    stepper: &Stepper<'_, F>,
    x: &Vec3,
    t: f64,
    h: f64,
    k1: &Vec3,
    detector_l: f64,
    tol: f64,
) -> Result<(f64, Vec3), TrajectoryError> {
    let (mut lo, mut hi) = (0.0, h);
    let mut hi_point = stepper.step(x, t, h, k1)?;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let p = stepper.step(x, t, mid, k1)?;
        if p.z >= detector_l {
            hi = mid;
            hi_point = p;
        } else {
            lo = mid;
        }
    }
    Ok((t + hi, hi_point))
}

/// Samples the path every `sample_stride` steps (plus the final point),
/// stopping at the crossing or the horizon.
pub fn trajectory_trace<F: VelocityField + ?Sized>(
    field: &F,
    x0: Vec3,
    cfg: &IntegratorConfig,
    detector_l: f64,
    sample_stride: usize,
) -> Result<Vec<(f64, Vec3)>, TrajectoryError> {
    cfg.validate()?;
    if sample_stride == 0 {
        return Err(TrajectoryError::InvalidConfig(
            "sample_stride must be >= 1".into(),
        ));
    }
    if !(x0.z > 0.0) {
        return Err(TrajectoryError::OutsideSupport(x0.z));
    }
    let stepper = Stepper {
        field,
        bound: cfg.speed_bound,
    };
    let mut out = vec![(0.0, x0)];
    if x0.z >= detector_l {
        return Ok(out);
    }
    let mut x = x0;
    let mut i: u64 = 0;
    loop {
        let t = i as f64 * cfg.dt;
        if t >= cfg.t_max {
            break;
        }
        let h = cfg.dt.min(cfg.t_max - t);
        let k1 = stepper.eval(&x, t)?;
        let mut next = stepper.step(&x, t, h, &k1)?;
        if next.z >= detector_l {
            let (tau, p) = refine_crossing(&stepper, &x, t, h, &k1, detector_l, cfg.crossing_tol)?;
            out.push((tau, p));
            return Ok(out);
        }
        next.z = next.z.max(WALL_GUARD);
        x = next;
        i += 1;
        if i as usize % sample_stride == 0 {
            out.push((t + h, x));
        }
    }
    if out.last().map(|p| p.1) != Some(x) {
        out.push((cfg.t_max, x));
    }
    Ok(out)
}

/// Position at `t_end` starting from `x0` at `t = 0`, ignoring the detector.
pub fn evolve_to<F: VelocityField + ?Sized>(
    field: &F,
    x0: Vec3,
    cfg: &IntegratorConfig,
    t_end: f64,
) -> Result<Vec3, TrajectoryError> {
    cfg.validate()?;
    let stepper = Stepper {
        field,
        bound: cfg.speed_bound,
    };
    let mut x = x0;
    let mut i: u64 = 0;
    loop {
        let t = i as f64 * cfg.dt;
        if t >= t_end {
            return Ok(x);
        }
        let h = cfg.dt.min(t_end - t);
        let k1 = stepper.eval(&x, t)?;
        x = stepper.step(&x, t, h, &k1)?;
        i += 1;
    }
}
