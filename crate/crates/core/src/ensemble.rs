//! Quantum-equilibrium ensembles, arrival-time histograms and the
//! exotic / heavy-tailed classifier.
//!
//! Every trajectory draws from its own ChaCha stream keyed by
//! `(master seed, trajectory index)`, so results do not depend on how the
//! work is scheduled across threads.

use std::io::{self, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::fields::{
    scenario_velocity, ConvMode, Scenario, SpinAxis, SpinOutcome, Vec3, WaveguideModel, ZMode,
};
use crate::trajectories::{
    evolve_to, integrate_until_crossing, ArrivalRecord, IntegratorConfig, TrajectoryError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("ensemble size must be at least 1")]
    EmptyEnsemble,
    #[error("trajectory {index}: {source}")]
    Trajectory { index: u64, source: TrajectoryError },
    #[error("histogram holds no arrivals")]
    NoArrivals,
    #[error("ensemble of {n_total} is below the classifier minimum {n_min}")]
    TooFewSamples { n_total: u64, n_min: u64 },
    #[error("reference distributions are not separated: longitudinal tail mass {tail_mass} < required {required}")]
    InsufficientSeparation { tail_mass: f64, required: f64 },
    #[error("reference transverse ensemble has {missing} trajectories past the horizon {t_max}")]
    HorizonTooShort { missing: u64, t_max: f64 },
    #[error("empty sample")]
    EmptySample,
    #[error("both channels of a FLASH pair are empty")]
    EmptyChannelPair,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Deterministic random stream for trajectory `index` of an ensemble seeded with `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws an initial position from `|Ψ₀|²`.
pub fn sample_initial<R: Rng + ?Sized>(m: &WaveguideModel, rng: &mut R) -> Vec3 {
    let sigma = (1.0 / (2.0 * m.omega)).sqrt();
    let x: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
    let y: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
    let z = match m.z_mode {
        // z² ~ Gamma(3/2, 1) gives the density (4/√π) z² e^{-z²}.
        ZMode::HalfOscillator => {
            let g = Gamma::new(1.5, 1.0).expect("valid gamma parameters");
            loop {
                let s: f64 = g.sample(rng);
                if s > 0.0 {
                    break s.sqrt();
                }
            }
        }
        // Half-normal with variance 1/2, by inverse CDF.
        ZMode::TruncatedGaussian => {
            let std = Normal::new(0.0, 1.0).expect("unit normal");
            loop {
                let u: f64 = rng.gen();
                let z = std.inverse_cdf(0.5 + 0.5 * u) / 2f64.sqrt();
                if z > 0.0 && z.is_finite() {
                    break z;
                }
            }
        }
    };
    Vec3::new(x, y, z)
}

/// Stern-Gerlach outcome along any axis of one singlet partner: ±1 with probability ½.
pub fn sg_outcome<R: Rng + ?Sized>(rng: &mut R) -> SpinOutcome {
    if rng.gen_bool(0.5) {
        SpinOutcome::Up
    } else {
        SpinOutcome::Down
    }
}

/// Field regime for every pair of an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScenario {
    /// Alice measures first along `axis`; outcomes drawn per pair.
    AliceFirst {
        axis: SpinAxis,
    },
    /// Alice measures first along `axis` and every pair yields `outcome`.
    AliceFirstConditioned {
        axis: SpinAxis,
        outcome: SpinOutcome,
    },
    BobFirst,
}

impl PairScenario {
    pub fn transverse() -> Self {
        PairScenario::AliceFirst {
            axis: SpinAxis::x(),
        }
    }

    pub fn longitudinal() -> Self {
        PairScenario::AliceFirst {
            axis: SpinAxis::z(),
        }
    }
}

/// Runs one trajectory with its own stream.
pub fn run_pair(
    m: &WaveguideModel,
    scenario: &PairScenario,
    seed: u64,
    index: u64,
    cfg: &IntegratorConfig,
) -> Result<ArrivalRecord, EnsembleError> {
    let mut rng = trajectory_rng(seed, index);
    let x0 = sample_initial(m, &mut rng);
    let field_scenario = match *scenario {
        PairScenario::AliceFirst { axis } => Scenario::AliceFirst {
            axis,
            outcome: sg_outcome(&mut rng),
        },
        PairScenario::AliceFirstConditioned { axis, outcome } => {
            Scenario::AliceFirst { axis, outcome }
        }
        PairScenario::BobFirst => Scenario::BobFirst,
    };
    let field = |x: &Vec3, t: f64| scenario_velocity(m, &field_scenario, x, t);
    integrate_until_crossing(&field, x0, cfg, m.detector_l)
        .map_err(|source| EnsembleError::Trajectory { index, source })
}

/// Per-trajectory records of an `n`-pair ensemble, in index order.
pub fn run_ensemble(
    m: &WaveguideModel,
    scenario: &PairScenario,
    n: u64,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<Vec<ArrivalRecord>, EnsembleError> {
    if n == 0 {
        return Err(EnsembleError::EmptyEnsemble);
    }
    m.validate()
        .map_err(|e| EnsembleError::InvalidParameter(e.to_string()))?;
    cfg.validate()
        .map_err(|source| EnsembleError::Trajectory { index: 0, source })?;
    (0..n)
        .into_par_iter()
        .map(|i| run_pair(m, scenario, seed, i, cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrivalHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_total: u64,
    pub n_no_arrival: u64,
    /// Arrival times, ascending.
    pub raw_taus: Vec<f64>,
    /// Trajectories whose axial velocity turned negative at some point.
    pub n_backflow: u64,
    pub max_rho_drift: f64,
    pub wall_hits: u64,
}

impl ArrivalHistogram {
    /// Bins arrivals uniformly over `[0, t_max]`; nothing arrives after the horizon.
    pub fn from_records(
        records: &[ArrivalRecord],
        t_max: f64,
        bins: usize,
    ) -> Result<Self, EnsembleError> {
        if bins == 0 {
            return Err(EnsembleError::InvalidParameter("bins must be >= 1".into()));
        }
        let width = t_max / bins as f64;
        let bin_edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { t_max } else { i as f64 * width })
            .collect();
        let mut counts = vec![0u64; bins];
        let mut raw_taus = Vec::with_capacity(records.len());
        let mut n_no_arrival = 0;
        for r in records {
            match r.tau() {
                Some(tau) => {
                    let k = ((tau / width) as usize).min(bins - 1);
                    counts[k] += 1;
                    raw_taus.push(tau);
                }
                None => n_no_arrival += 1,
            }
        }
        raw_taus.sort_by(f64::total_cmp);
        Ok(ArrivalHistogram {
            bin_edges,
            counts,
            n_total: records.len() as u64,
            n_no_arrival,
            raw_taus,
            n_backflow: records.iter().filter(|r| r.min_vz < 0.0).count() as u64,
            max_rho_drift: records.iter().map(|r| r.rho_drift).fold(0.0, f64::max),
            wall_hits: records.iter().map(|r| r.wall_hits as u64).sum(),
        })
    }

    /// Fraction of the ensemble arriving after `tau_c` or not at all.
    pub fn tail_mass(&self, tau_c: f64) -> f64 {
        let late = self.raw_taus.len() - self.raw_taus.partition_point(|&t| t <= tau_c);
        (late as u64 + self.n_no_arrival) as f64 / self.n_total as f64
    }

    /// Arrival times with non-arrivals appended as `+∞`.
    pub fn censored_sample(&self) -> Vec<f64> {
        let mut s = self.raw_taus.clone();
        s.extend(std::iter::repeat_n(f64::INFINITY, self.n_no_arrival as usize));
        s
    }

    /// CSV: `tau_lo,tau_hi,count` per bin, then `no_arrival,,<count>`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "tau_lo,tau_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(
                w,
                "{},{},{}",
                fmt_full(self.bin_edges[i]),
                fmt_full(self.bin_edges[i + 1]),
                c
            )?;
        }
        writeln!(w, "no_arrival,,{}", self.n_no_arrival)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

/// Float with 17 significant digits.
pub fn fmt_full(x: f64) -> String {
    format!("{x:.16e}")
}

/// Histogram of an `n`-pair ensemble binned over `[0, cfg.t_max]`.
pub fn arrival_distribution(
    m: &WaveguideModel,
    scenario: &PairScenario,
    n: u64,
    seed: u64,
    cfg: &IntegratorConfig,
    bins: usize,
) -> Result<ArrivalHistogram, EnsembleError> {
    let records = run_ensemble(m, scenario, n, seed, cfg)?;
    ArrivalHistogram::from_records(&records, cfg.t_max, bins)
}

pub fn empirical_tau_max(h: &ArrivalHistogram) -> Result<f64, EnsembleError> {
    h.raw_taus.last().copied().ok_or(EnsembleError::NoArrivals)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionClass {
    Exotic,
    HeavyTailed,
    Indeterminate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub tau_c: f64,
    pub theta: f64,
    pub n_min: u64,
}

impl ClassifierConfig {
    pub fn new(tau_c: f64, theta: f64, n_min: u64) -> Result<Self, EnsembleError> {
        if !(tau_c > 0.0 && tau_c.is_finite()) {
            return Err(EnsembleError::InvalidParameter(format!(
                "tau_c = {tau_c} must be > 0"
            )));
        }
        if !(theta > 0.0 && theta < 1.0) {
            return Err(EnsembleError::InvalidParameter(format!(
                "theta = {theta} must lie in (0, 1)"
            )));
        }
        Ok(ClassifierConfig {
            tau_c,
            theta,
            n_min,
        })
    }

    /// Histogram range used for classification runs, `1.5 τ_c`.
    pub fn horizon(&self) -> f64 {
        1.5 * self.tau_c
    }
}

/// Exotic below `θ/10` tail mass, heavy-tailed at or above `θ`, otherwise indeterminate.
pub fn classify(
    h: &ArrivalHistogram,
    c: &ClassifierConfig,
) -> Result<DistributionClass, EnsembleError> {
    if h.n_total < c.n_min || h.n_total == 0 {
        return Err(EnsembleError::TooFewSamples {
            n_total: h.n_total,
            n_min: c.n_min,
        });
    }
    let tail = h.tail_mass(c.tau_c);
    Ok(if tail < c.theta / 10.0 {
        DistributionClass::Exotic
    } else if tail >= c.theta {
        DistributionClass::HeavyTailed
    } else {
        DistributionClass::Indeterminate
    })
}

/// Sets `τ_c` from a transverse reference ensemble and checks that a
/// longitudinal reference ensemble clears it by the required margin.
pub fn calibrate_classifier(
    m: &WaveguideModel,
    cfg: &IntegratorConfig,
    n_cal: u64,
    seed: u64,
    theta: f64,
    n_min: u64,
) -> Result<ClassifierConfig, EnsembleError> {
    if n_cal < 1000 {
        return Err(EnsembleError::InvalidParameter(format!(
            "calibration ensemble {n_cal} < 1000"
        )));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(EnsembleError::InvalidParameter(format!(
            "theta = {theta} must lie in (0, 1)"
        )));
    }
    let transverse = arrival_distribution(m, &PairScenario::transverse(), n_cal, seed, cfg, 1)?;
    if transverse.n_no_arrival > 0 {
        return Err(EnsembleError::HorizonTooShort {
            missing: transverse.n_no_arrival,
            t_max: cfg.t_max,
        });
    }
    let tau_c = 1.1 * empirical_tau_max(&transverse)?;
    if tau_c >= cfg.t_max {
        return Err(EnsembleError::HorizonTooShort {
            missing: 0,
            t_max: cfg.t_max,
        });
    }
    let longitudinal = arrival_distribution(
        m,
        &PairScenario::longitudinal(),
        n_cal,
        seed ^ 0x005e_ed0f_1a7e,
        cfg,
        1,
    )?;
    let tail = longitudinal.tail_mass(tau_c);
    let required = 5.0 * theta;
    if tail < required {
        return Err(EnsembleError::InsufficientSeparation {
            tail_mass: tail,
            required,
        });
    }
    ClassifierConfig::new(tau_c, theta, n_min)
}

/// Two-sample Kolmogorov-Smirnov distance of sorted samples.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64, EnsembleError> {
    if a.is_empty() || b.is_empty() {
        return Err(EnsembleError::EmptySample);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// One-sample Kolmogorov-Smirnov distance of a sorted sample from `cdf`.
pub fn ks_statistic_cdf<F: Fn(f64) -> f64>(a: &[f64], cdf: F) -> Result<f64, EnsembleError> {
    if a.is_empty() {
        return Err(EnsembleError::EmptySample);
    }
    let n = a.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < a.len() {
        let x = a[i];
        let mut k = i;
        while k < a.len() && a[k] == x {
            k += 1;
        }
        let f = if x == f64::INFINITY { 1.0 } else { cdf(x) };
        d = d
            .max((f - i as f64 / n).abs())
            .max((k as f64 / n - f).abs());
        i = k;
    }
    Ok(d)
}

/// KS distance over `[0, horizon]` for a sample right-censored at `horizon`,
/// whose censored entries are stored as `+∞`.
pub fn ks_statistic_censored<F: Fn(f64) -> f64>(
    a: &[f64],
    cdf: F,
    horizon: f64,
) -> Result<f64, EnsembleError> {
    if a.is_empty() {
        return Err(EnsembleError::EmptySample);
    }
    let n = a.len() as f64;
    let observed = a.partition_point(|&x| x <= horizon);
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < observed {
        let x = a[i];
        let mut k = i;
        while k < observed && a[k] == x {
            k += 1;
        }
        let f = cdf(x);
        d = d
            .max((f - i as f64 / n).abs())
            .max((k as f64 / n - f).abs());
        i = k;
    }
    Ok(d.max((cdf(horizon) - observed as f64 / n).abs()))
}

/// Analytic arrival-time CDF of the free-dispersion axial flow,
/// `P(τ ≤ T) = 1 - F₀(L / √(1+T²))`.
pub fn pushforward_arrival_cdf(m: &WaveguideModel, tau: f64) -> f64 {
    if tau < 0.0 {
        return 0.0;
    }
    1.0 - m.z_cdf(m.detector_l / (1.0 + tau * tau).sqrt(), 0.0)
}

/// KS distance between `n` equilibrium z-coordinates evolved to `t_check`
/// under the convective field and the analytic dispersed marginal.
pub fn equivariance_check(
    m: &WaveguideModel,
    t_check: f64,
    n: u64,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<f64, EnsembleError> {
    if n == 0 {
        return Err(EnsembleError::EmptyEnsemble);
    }
    if !(t_check >= 0.0) {
        return Err(EnsembleError::InvalidParameter(format!(
            "t_check = {t_check} must be >= 0"
        )));
    }
    let free = WaveguideModel {
        conv_mode: ConvMode::ExactDnd,
        ..*m
    };
    let field = |x: &Vec3, t: f64| Ok(crate::fields::convective_velocity(&free, x, t));
    let mut zs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x0 = sample_initial(&free, &mut trajectory_rng(seed, i));
            evolve_to(&field, x0, cfg, t_check)
                .map(|x| x.z)
                .map_err(|source| EnsembleError::Trajectory { index: i, source })
        })
        .collect::<Result<_, _>>()?;
    zs.sort_by(f64::total_cmp);
    ks_statistic_cdf(&zs, |z| free.z_cdf(z, t_check))
}

/// FLASH four-channel statistic.
pub fn flash_eta(n_px: u64, n_mx: u64, n_pz: u64, n_mz: u64) -> Result<f64, EnsembleError> {
    let sx = n_px + n_mx;
    let sz = n_pz + n_mz;
    if sx == 0 || sz == 0 {
        return Err(EnsembleError::EmptyChannelPair);
    }
    let bx = n_px.abs_diff(n_mx) as f64 / sx as f64;
    let bz = n_pz.abs_diff(n_mz) as f64 / sz as f64;
    Ok(0.5 * (1.0 + bx - bz))
}
