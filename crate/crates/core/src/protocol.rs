//! Switch-point search, foliation recovery and the signaling run, played
//! against a laboratory whose preferred foliation is hidden.
//!
//! Everything that infers the foliation talks to the lab through
//! [`RunOracle`], which hands back only the recorded events and Bob's
//! classification. The ground truth stays inside [`SimulatedLab`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{
    arrival_distribution, classify, trajectory_rng, ClassifierConfig, DistributionClass,
    EnsembleError, PairScenario,
};
use crate::fields::{SpinAxis, Vec3, WaveguideModel};
use crate::spacetime::{
    check_triad_independence, foliation_time, solve_normal, temporal_order, triad_rank, Event4,
    FoliationNormal, SimultaneousPair, SpacetimeError, TemporalOrder,
};
use crate::trajectories::IntegratorConfig;

/// Foliation-time gap below which a run is rejected as simultaneous.
pub const SIMULTANEITY_TOLERANCE: f64 = 1e-9;

/// Consecutive exotic runs required to lock the signaling geometry.
pub const CALIBRATION_RUNS: usize = 5;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("cannot aggregate an empty list of event times")]
    EmptyList,
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("events A and B are within {gap:e} of simultaneity")]
    SimultaneousAmbiguous { gap: f64 },
    #[error("no bracket: bob_dist {d_min} gives {at_min:?} and {d_max} gives {at_max:?}")]
    NoBracket {
        d_min: f64,
        d_max: f64,
        at_min: DistributionClass,
        at_max: DistributionClass,
    },
    #[error("run at bob_dist {bob_dist} stayed indeterminate with {n_pairs} pairs")]
    IndeterminateRun { bob_dist: f64, n_pairs: u64 },
    #[error("orientation {label}: {source}")]
    Orientation {
        label: String,
        source: Box<ProtocolError>,
    },
    #[error("no Alice-first placement found up to bob_dist {d_max}")]
    CannotEstablishOrder { d_max: f64 },
    #[error("geometry has not been calibrated to Alice-first order")]
    NotCalibrated,
    #[error("message is empty")]
    EmptyMessage,
    #[error("bit {0:?} is not 0 or 1")]
    InvalidBit(String),
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Spacetime(#[from] SpacetimeError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Mean of per-pair event times, placed at `pos`.
pub fn aggregate_events(times: &[f64], pos: [f64; 3]) -> Result<Event4, ProtocolError> {
    if times.is_empty() {
        return Err(ProtocolError::EmptyList);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    Ok(Event4::from_parts(mean, pos))
}

/// Construction parameters for [`LabGeometry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub source_pos: [f64; 3],
    pub alice_dir: [f64; 3],
    pub bob_dir: [f64; 3],
    pub alice_dist: f64,
    pub bob_dist: f64,
    pub particle_speed: f64,
    /// Fixed delay of Alice's magnet traversal.
    pub magnet_offset: f64,
    pub orientation_id: String,
    /// Range of `bob_dist` the setup must support.
    pub search_range: (f64, f64),
}

/// Source, two arms and the transit timing, all in lab coordinates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabGeometry {
    source_pos: Vec3,
    alice_dir: Vec3,
    bob_dir: Vec3,
    alice_dist: f64,
    bob_dist: f64,
    particle_speed: f64,
    magnet_offset: f64,
    orientation_id: String,
    search_range: (f64, f64),
    calibrated: bool,
}

fn unit(v: [f64; 3], what: &str) -> Result<Vec3, ProtocolError> {
    let v = Vec3::from(v);
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(ProtocolError::InvalidGeometry(format!(
            "{what} must be a non-zero finite vector"
        )));
    }
    Ok(v / n)
}

impl LabGeometry {
    pub fn new(spec: GeometrySpec) -> Result<Self, ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidGeometry(m));
        if !spec.source_pos.iter().all(|c| c.is_finite()) {
            return bad("source position is not finite".into());
        }
        if !(spec.alice_dist > 0.0 && spec.alice_dist.is_finite()) {
            return bad(format!("alice_dist = {} must be > 0", spec.alice_dist));
        }
        if !(spec.particle_speed > 0.0 && spec.particle_speed < 1.0) {
            return bad(format!(
                "particle_speed = {} must lie in (0, 1)",
                spec.particle_speed
            ));
        }
        if !(spec.magnet_offset >= 0.0 && spec.magnet_offset.is_finite()) {
            return bad(format!(
                "magnet_offset = {} must be >= 0",
                spec.magnet_offset
            ));
        }
        let (lo, hi) = spec.search_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad(format!(
                "search range [{lo}, {hi}] must satisfy 0 < d_min < d_max"
            ));
        }
        let g = LabGeometry {
            source_pos: Vec3::from(spec.source_pos),
            alice_dir: unit(spec.alice_dir, "alice_dir")?,
            bob_dir: unit(spec.bob_dir, "bob_dir")?,
            alice_dist: spec.alice_dist,
            bob_dist: spec.bob_dist,
            particle_speed: spec.particle_speed,
            magnet_offset: spec.magnet_offset,
            orientation_id: spec.orientation_id,
            search_range: spec.search_range,
            calibrated: false,
        };
        g.check_bob_dist(spec.bob_dist)?;
        g.check_spacelike_over_range()?;
        Ok(g)
    }

    /// Opposite arms along `dir` with Alice at `alice_dist` and Bob starting
    /// mid-range.
    pub fn opposed_arms(
        dir: [f64; 3],
        alice_dist: f64,
        particle_speed: f64,
        search_range: (f64, f64),
        orientation_id: &str,
    ) -> Result<Self, ProtocolError> {
        let u = unit(dir, "arm direction")?;
        LabGeometry::new(GeometrySpec {
            source_pos: [0.0; 3],
            alice_dir: (-u).into(),
            bob_dir: u.into(),
            alice_dist,
            bob_dist: 0.5 * (search_range.0 + search_range.1),
            particle_speed,
            magnet_offset: 0.0,
            orientation_id: orientation_id.to_string(),
            search_range,
        })
    }

    fn check_bob_dist(&self, d: f64) -> Result<(), ProtocolError> {
        if !(d > 0.0 && d.is_finite()) {
            return Err(ProtocolError::InvalidGeometry(format!(
                "bob_dist = {d} must be > 0"
            )));
        }
        Ok(())
    }

    /// `|Δx|² - Δt²` between A and B is quadratic in `bob_dist`; its minimum
    /// over the search range must stay positive.
    fn check_spacelike_over_range(&self) -> Result<(), ProtocolError> {
        let (lo, hi) = self.search_range;
        let v = self.particle_speed;
        let t_a = self.alice_dist / v + self.magnet_offset;
        let a = self.alice_dir * self.alice_dist;
        // Δx = a - d·b̂, Δt = t_a - d/v.
        let qa = 1.0 - 1.0 / (v * v);
        let qb = -2.0 * a.dot(&self.bob_dir) + 2.0 * t_a / v;
        let qc = a.norm_squared() - t_a * t_a;
        let q = |d: f64| qa * d * d + qb * d + qc;
        // qa < 0, so the minimum sits at an endpoint.
        let worst = q(lo).min(q(hi));
        if !(worst > 0.0) {
            let at = if q(lo) <= q(hi) { lo } else { hi };
            return Err(ProtocolError::InvalidGeometry(format!(
                "events A and B are not spacelike separated at bob_dist = {at}"
            )));
        }
        Ok(())
    }

    pub fn bob_dist(&self) -> f64 {
        self.bob_dist
    }

    pub fn search_range(&self) -> (f64, f64) {
        self.search_range
    }

    pub fn orientation_id(&self) -> &str {
        &self.orientation_id
    }

    pub fn particle_speed(&self) -> f64 {
        self.particle_speed
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    /// Same setup with Bob's waveguide moved. Any calibration is dropped.
    pub fn with_bob_dist(&self, d: f64) -> Result<Self, ProtocolError> {
        self.check_bob_dist(d)?;
        Ok(LabGeometry {
            bob_dist: d,
            calibrated: false,
            ..self.clone()
        })
    }

    pub fn alice_position(&self) -> [f64; 3] {
        (self.source_pos + self.alice_dir * self.alice_dist).into()
    }

    pub fn bob_position(&self) -> [f64; 3] {
        (self.source_pos + self.bob_dir * self.bob_dist).into()
    }

    /// Alice's measurement event for emission at `t = 0`.
    pub fn event_a(&self) -> Event4 {
        Event4::from_parts(
            self.alice_dist / self.particle_speed + self.magnet_offset,
            self.alice_position(),
        )
    }

    /// Release of particle 2 into Bob's waveguide.
    pub fn event_b(&self) -> Event4 {
        Event4::from_parts(self.bob_dist / self.particle_speed, self.bob_position())
    }
}

/// Ground-truth preferred foliation. Only the simulator can read it.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenFoliation {
    n_true: FoliationNormal,
}

impl HiddenFoliation {
    pub fn new(n_true: FoliationNormal) -> Self {
        HiddenFoliation { n_true }
    }
}

/// What Bob and Alice write down after one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub event_a: Event4,
    pub event_b: Event4,
    pub alice_axis: SpinAxis,
    pub observed: DistributionClass,
    pub n_pairs: u64,
}

/// Access to experimental runs. Implementations decide how the outcome is
/// produced; callers only see the record.
pub trait RunOracle {
    fn observe(
        &mut self,
        g: &LabGeometry,
        axis: SpinAxis,
        n_pairs: u64,
        seed: u64,
    ) -> Result<RunRecord, ProtocolError>;
}

/// Physics settings for simulated runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabPhysics {
    pub model: WaveguideModel,
    pub integrator: IntegratorConfig,
    pub bins: usize,
    /// Standard deviation of per-pair event timing.
    pub timing_jitter: f64,
}

/// One EPRB run: pick the field regime from the true order, generate Bob's
/// histogram and classify it.
pub fn simulate_run(
    physics: &LabPhysics,
    g: &LabGeometry,
    hf: &HiddenFoliation,
    axis: SpinAxis,
    n_pairs: u64,
    seed: u64,
    classifier: &ClassifierConfig,
) -> Result<RunRecord, ProtocolError> {
    let a = g.event_a();
    let b = g.event_b();
    let scenario = match temporal_order(&hf.n_true, a, b, SIMULTANEITY_TOLERANCE) {
        TemporalOrder::AliceFirst => PairScenario::AliceFirst { axis },
        TemporalOrder::BobFirst => PairScenario::BobFirst,
        TemporalOrder::Simultaneous => {
            let gap = (foliation_time(&hf.n_true, a) - foliation_time(&hf.n_true, b)).abs();
            return Err(ProtocolError::SimultaneousAmbiguous { gap });
        }
    };
    let cfg = physics.integrator.with_horizon(classifier.horizon());
    let h = arrival_distribution(
        &physics.model,
        &scenario,
        n_pairs,
        seed,
        &cfg,
        physics.bins.max(1),
    )?;
    let observed = classify(&h, classifier)?;

    let (ta, tb) = jittered_times(a.t, b.t, n_pairs, physics.timing_jitter, seed);
    Ok(RunRecord {
        event_a: aggregate_events(&ta, a.spatial())?,
        event_b: aggregate_events(&tb, b.spatial())?,
        alice_axis: axis,
        observed,
        n_pairs,
    })
}

fn jittered_times(ta: f64, tb: f64, n: u64, jitter: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    if jitter == 0.0 {
        return (vec![ta], vec![tb]);
    }
    let mut rng = trajectory_rng(seed ^ 0x7131_77e4, u64::MAX);
    let mut draw = |t: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                t + jitter * z
            })
            .collect()
    };
    let a = draw(ta);
    let b = draw(tb);
    (a, b)
}

/// A lab holding the hidden foliation behind the [`RunOracle`] interface.
#[derive(Clone, Debug)]
pub struct SimulatedLab {
    physics: LabPhysics,
    classifier: ClassifierConfig,
    hidden: HiddenFoliation,
}

impl SimulatedLab {
    pub fn new(physics: LabPhysics, classifier: ClassifierConfig, hidden: HiddenFoliation) -> Self {
        SimulatedLab {
            physics,
            classifier,
            hidden,
        }
    }

    pub fn classifier(&self) -> &ClassifierConfig {
        &self.classifier
    }

    /// Ground truth, for scoring a finished inference.
    pub fn reveal_truth(&self) -> FoliationNormal {
        self.hidden.n_true
    }
}

impl RunOracle for SimulatedLab {
    fn observe(
        &mut self,
        g: &LabGeometry,
        axis: SpinAxis,
        n_pairs: u64,
        seed: u64,
    ) -> Result<RunRecord, ProtocolError> {
        simulate_run(
            &self.physics,
            g,
            &self.hidden,
            axis,
            n_pairs,
            seed,
            &self.classifier,
        )
    }
}

/// Bracket and stopping width of the switch-point search.
/// Angular error allowed for a normal recovered from three switch points
/// found to within `d_tol`, when the preferred frame moves at `speed`.
///
/// A final run within `d_tol` of the switch point leaves a leaf-time residual
/// of at most `γ(1/v + |β|) d_tol`; spread over three independent pairs whose
/// spatial separations exceed `alice_dist + d_min`, and mapped back through
/// the boost, the normal moves by at most the returned angle.
pub fn propagated_error_bound(
    cfg: &SearchConfig,
    particle_speed: f64,
    alice_dist: f64,
    speed: f64,
) -> f64 {
    let gamma = 1.0 / (1.0 - speed * speed).sqrt();
    let baseline = alice_dist + cfg.d_min;
    let residual = gamma * (1.0 / particle_speed + speed) * cfg.d_tol;
    (3f64.sqrt() * gamma * residual / baseline).min(1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub d_tol: f64,
    pub n_pairs: u64,
    pub seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(ProtocolError::InvalidConfig(format!(
                "need 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if !(self.d_tol > 0.0) {
            return Err(ProtocolError::InvalidConfig(format!(
                "d_tol = {} must be > 0",
                self.d_tol
            )));
        }
        if self.n_pairs == 0 {
            return Err(ProtocolError::InvalidConfig("n_pairs must be >= 1".into()));
        }
        Ok(())
    }

    /// `⌈log₂(range/d_tol)⌉ + 1`.
    pub fn max_iterations(&self) -> u32 {
        let r = ((self.d_max - self.d_min) / self.d_tol)
            .log2()
            .ceil()
            .max(0.0);
        r as u32 + 1
    }
}

/// SplitMix64 finalizer, used to derive per-run seeds.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z =
        base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwitchResult {
    pub pair: SimultaneousPair,
    /// Bisection runs, counting an escalated repeat.
    pub iterations: u32,
    pub final_bob_dist: f64,
}

struct Search<'a, O: RunOracle + ?Sized> {
    oracle: &'a mut O,
    g: &'a LabGeometry,
    cfg: &'a SearchConfig,
    runs: u64,
    escalated: bool,
}

impl<O: RunOracle + ?Sized> Search<'_, O> {
    fn run(&mut self, d: f64, n_pairs: u64) -> Result<RunRecord, ProtocolError> {
        let mut d = d;
        for _ in 0..4 {
            let seed = derive_seed(self.cfg.seed, self.runs, n_pairs);
            self.runs += 1;
            let g = self.g.with_bob_dist(d)?;
            match self.oracle.observe(&g, SpinAxis::x(), n_pairs, seed) {
                Err(ProtocolError::SimultaneousAmbiguous { .. }) => d += 1e-3 * self.cfg.d_tol,
                other => return other,
            }
        }
        Err(ProtocolError::SimultaneousAmbiguous { gap: 0.0 })
    }

    /// Run at `d`; an indeterminate class earns one 4× repeat per search.
    fn classify_at(&mut self, d: f64, iterations: &mut u32) -> Result<RunRecord, ProtocolError> {
        let rec = self.run(d, self.cfg.n_pairs)?;
        if rec.observed != DistributionClass::Indeterminate {
            return Ok(rec);
        }
        let n4 = self.cfg.n_pairs.saturating_mul(4);
        if self.escalated {
            return Err(ProtocolError::IndeterminateRun {
                bob_dist: d,
                n_pairs: self.cfg.n_pairs,
            });
        }
        self.escalated = true;
        *iterations += 1;
        let rec = self.run(d, n4)?;
        if rec.observed == DistributionClass::Indeterminate {
            return Err(ProtocolError::IndeterminateRun {
                bob_dist: d,
                n_pairs: n4,
            });
        }
        Ok(rec)
    }
}

/// Bisection on `bob_dist` with Alice fixed to x̂. Exotic means Alice was
/// first, so Bob moves closer; heavy-tailed means Bob moves away.
pub fn switch_search<O: RunOracle + ?Sized>(
    oracle: &mut O,
    g: &LabGeometry,
    cfg: &SearchConfig,
) -> Result<SwitchResult, ProtocolError> {
    cfg.validate()?;
    let mut s = Search {
        oracle,
        g,
        cfg,
        runs: 0,
        escalated: false,
    };
    let mut endpoint_repeats = 0u32;
    let at_min = s.classify_at(cfg.d_min, &mut endpoint_repeats)?.observed;
    let at_max = s.classify_at(cfg.d_max, &mut endpoint_repeats)?.observed;
    if at_min == at_max || at_min != DistributionClass::HeavyTailed {
        return Err(ProtocolError::NoBracket {
            d_min: cfg.d_min,
            d_max: cfg.d_max,
            at_min,
            at_max,
        });
    }

    let (mut lo, mut hi) = (cfg.d_min, cfg.d_max);
    let mut iterations = endpoint_repeats;
    loop {
        let mid = 0.5 * (lo + hi);
        iterations += 1;
        let rec = s.classify_at(mid, &mut iterations)?;
        match rec.observed {
            DistributionClass::Exotic => hi = mid,
            _ => lo = mid,
        }
        if hi - lo < cfg.d_tol {
            let pair = SimultaneousPair {
                p_a: rec.event_a,
                p_b: rec.event_b,
                label: 0,
            };
            return Ok(SwitchResult {
                pair,
                iterations,
                final_bob_dist: mid,
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoliationReport {
    pub pairs: [SimultaneousPair; 3],
    pub recovered: FoliationNormal,
    /// Hyperbolic angle to the hidden normal; filled in only after inference.
    pub angular_error_vs_truth: Option<f64>,
    pub iterations_per_orientation: [u32; 3],
    pub switch_bob_dist: [f64; 3],
}

fn spatial_only(e: Event4) -> Event4 {
    Event4::new(0.0, e.x, e.y, e.z)
}

/// Switch-point search for each orientation, then the normal that makes all
/// three recorded pairs simultaneous.
pub fn detect_foliation<O: RunOracle + ?Sized>(
    oracle: &mut O,
    orientations: &[LabGeometry; 3],
    cfg: &SearchConfig,
) -> Result<FoliationReport, ProtocolError> {
    let mut pairs = Vec::with_capacity(3);
    let mut iters = [0u32; 3];
    let mut dists = [0.0; 3];
    for (k, g) in orientations.iter().enumerate() {
        let sub = SearchConfig {
            seed: derive_seed(cfg.seed, 0xf0_1a7e, k as u64),
            ..*cfg
        };
        let r = switch_search(oracle, g, &sub).map_err(|e| ProtocolError::Orientation {
            label: g.orientation_id().to_string(),
            source: Box::new(e),
        })?;
        pairs.push(SimultaneousPair { label: k, ..r.pair });
        iters[k] = r.iterations;
        dists[k] = r.final_bob_dist;
    }
    let pairs: [SimultaneousPair; 3] = [pairs[0], pairs[1], pairs[2]];
    let [s1, s2, s3] = pairs.map(|p| p.separation());
    if !check_triad_independence(s1, s2, s3) {
        return Err(SpacetimeError::DegenerateTriad {
            rank: triad_rank(s1, s2, s3),
        }
        .into());
    }
    // Vectors within a spacelike leaf have independent spatial parts.
    let spatial_rank = triad_rank(spatial_only(s1), spatial_only(s2), spatial_only(s3));
    if spatial_rank < 3 {
        return Err(SpacetimeError::DegenerateTriad { rank: spatial_rank }.into());
    }
    let recovered = solve_normal(s1, s2, s3)?;
    Ok(FoliationReport {
        pairs,
        recovered,
        angular_error_vs_truth: None,
        iterations_per_orientation: iters,
        switch_bob_dist: dists,
    })
}

/// Three opposed-arm orientations along the lab axes.
pub fn standard_orientations(
    alice_dist: f64,
    particle_speed: f64,
    search_range: (f64, f64),
) -> Result<[LabGeometry; 3], ProtocolError> {
    Ok([
        LabGeometry::opposed_arms(
            [1.0, 0.0, 0.0],
            alice_dist,
            particle_speed,
            search_range,
            "x",
        )?,
        LabGeometry::opposed_arms(
            [0.0, 1.0, 0.0],
            alice_dist,
            particle_speed,
            search_range,
            "y",
        )?,
        LabGeometry::opposed_arms(
            [0.0, 0.0, 1.0],
            alice_dist,
            particle_speed,
            search_range,
            "z",
        )?,
    ])
}

/// Runs detection against a simulated lab and scores the result.
pub fn detect_foliation_simulated(
    lab: &mut SimulatedLab,
    orientations: &[LabGeometry; 3],
    cfg: &SearchConfig,
) -> Result<FoliationReport, ProtocolError> {
    let mut report = detect_foliation(lab, orientations, cfg)?;
    report.angular_error_vs_truth = Some(report.recovered.hyperbolic_angle(&lab.reveal_truth()));
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub geometry: LabGeometry,
    pub adjustments: u32,
    pub runs: u32,
}

/// Moves Bob outward until `CALIBRATION_RUNS` consecutive x̂ runs are exotic.
pub fn calibrate_signaling<O: RunOracle + ?Sized>(
    oracle: &mut O,
    g: &LabGeometry,
    cfg: &SearchConfig,
) -> Result<Calibration, ProtocolError> {
    cfg.validate()?;
    let step = ((cfg.d_max - cfg.d_min) / 16.0).max(cfg.d_tol);
    let mut d = g.bob_dist();
    let mut adjustments = 0u32;
    let mut runs = 0u32;
    while d <= cfg.d_max {
        let trial = g.with_bob_dist(d)?;
        let mut streak = 0;
        while streak < CALIBRATION_RUNS {
            let seed = derive_seed(cfg.seed, 0xca1, runs as u64);
            runs += 1;
            match oracle.observe(&trial, SpinAxis::x(), cfg.n_pairs, seed) {
                Ok(rec) if rec.observed == DistributionClass::Exotic => streak += 1,
                Ok(_) | Err(ProtocolError::SimultaneousAmbiguous { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        if streak == CALIBRATION_RUNS {
            let geometry = LabGeometry {
                calibrated: true,
                ..trial
            };
            return Ok(Calibration {
                geometry,
                adjustments,
                runs,
            });
        }
        d += step;
        adjustments += 1;
    }
    Err(ProtocolError::CannotEstablishOrder { d_max: cfg.d_max })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalReport {
    pub sent_bits: Vec<u8>,
    /// `None` marks an erasure.
    pub decoded_bits: Vec<Option<u8>>,
    pub erasures: Vec<usize>,
    /// Errors over non-erased bits; 0 when every bit was erased.
    pub bit_error_rate: f64,
}

pub fn parse_bits(s: &str) -> Result<Vec<u8>, ProtocolError> {
    if s.is_empty() {
        return Err(ProtocolError::EmptyMessage);
    }
    s.bytes()
        .map(|c| match c {
            b'0' => Ok(0),
            b'1' => Ok(1),
            other => Err(ProtocolError::InvalidBit(char::from(other).to_string())),
        })
        .collect()
}

/// Alice sends 0 as ẑ runs and 1 as x̂ runs; Bob decodes his classification.
pub fn transmit_bits<O: RunOracle + ?Sized>(
    oracle: &mut O,
    g: &LabGeometry,
    bits: &[u8],
    n_pairs_per_bit: u64,
    seed: u64,
) -> Result<SignalReport, ProtocolError> {
    if !g.is_calibrated() {
        return Err(ProtocolError::NotCalibrated);
    }
    if bits.is_empty() {
        return Err(ProtocolError::EmptyMessage);
    }
    if let Some(&b) = bits.iter().find(|&&b| b > 1) {
        return Err(ProtocolError::InvalidBit(b.to_string()));
    }
    let mut decoded = Vec::with_capacity(bits.len());
    for (i, &bit) in bits.iter().enumerate() {
        let axis = if bit == 1 {
            SpinAxis::x()
        } else {
            SpinAxis::z()
        };
        let rec = oracle.observe(g, axis, n_pairs_per_bit, derive_seed(seed, 0xb17, i as u64))?;
        decoded.push(match rec.observed {
            DistributionClass::HeavyTailed => Some(0),
            DistributionClass::Exotic => Some(1),
            DistributionClass::Indeterminate => None,
        });
    }
    let erasures: Vec<usize> = decoded
        .iter()
        .enumerate()
        .filter(|(_, d)| d.is_none())
        .map(|(i, _)| i)
        .collect();
    let kept = bits.len() - erasures.len();
    let errors = bits
        .iter()
        .zip(&decoded)
        .filter(|(b, d)| matches!(d, Some(x) if x != *b))
        .count();
    let bit_error_rate = if kept == 0 {
        0.0
    } else {
        errors as f64 / kept as f64
    };
    Ok(SignalReport {
        sent_bits: bits.to_vec(),
        decoded_bits: decoded,
        erasures,
        bit_error_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spacetime::BoostSpec;

    fn range() -> (f64, f64) {
        (4.0, 28.0)
    }

    fn geometry(dir: [f64; 3], d: f64) -> LabGeometry {
        LabGeometry::opposed_arms(dir, 10.0, 0.5, range(), "t")
            .unwrap()
            .with_bob_dist(d)
            .unwrap()
    }

    /// Classifies from the true order alone, with no trajectories.
    struct OrderOracle {
        n: FoliationNormal,
        calls: usize,
        ambiguous: usize,
    }

    impl RunOracle for OrderOracle {
        fn observe(
            &mut self,
            g: &LabGeometry,
            axis: SpinAxis,
            n_pairs: u64,
            _seed: u64,
        ) -> Result<RunRecord, ProtocolError> {
            self.calls += 1;
            let (a, b) = (g.event_a(), g.event_b());
            let observed = match temporal_order(&self.n, a, b, SIMULTANEITY_TOLERANCE) {
                TemporalOrder::AliceFirst if axis.is_transverse() => DistributionClass::Exotic,
                TemporalOrder::Simultaneous => {
                    self.ambiguous += 1;
                    return Err(ProtocolError::SimultaneousAmbiguous { gap: 0.0 });
                }
                _ => DistributionClass::HeavyTailed,
            };
            Ok(RunRecord {
                event_a: a,
                event_b: b,
                alice_axis: axis,
                observed,
                n_pairs,
            })
        }
    }

    /// Flips at a fixed `bob_dist` regardless of any foliation.
    struct ThresholdOracle {
        switch_at: f64,
        calls: usize,
    }

    impl RunOracle for ThresholdOracle {
        fn observe(
            &mut self,
            g: &LabGeometry,
            axis: SpinAxis,
            n_pairs: u64,
            _seed: u64,
        ) -> Result<RunRecord, ProtocolError> {
            self.calls += 1;
            let observed = if g.bob_dist() > self.switch_at {
                DistributionClass::Exotic
            } else {
                DistributionClass::HeavyTailed
            };
            Ok(RunRecord {
                event_a: g.event_a(),
                event_b: g.event_b(),
                alice_axis: axis,
                observed,
                n_pairs,
            })
        }
    }

    fn search_cfg() -> SearchConfig {
        SearchConfig {
            d_min: 4.0,
            d_max: 28.0,
            d_tol: 0.01,
            n_pairs: 1000,
            seed: 3,
        }
    }

    fn lab_cfg() -> (LabPhysics, ClassifierConfig) {
        let physics = LabPhysics {
            model: WaveguideModel::default(),
            integrator: IntegratorConfig::default(),
            bins: 50,
            timing_jitter: 0.0,
        };
        (physics, ClassifierConfig::new(9.46, 0.01, 100).unwrap())
    }

    #[test]
    fn aggregate_examples() {
        let p = [1.0, 2.0, 3.0];
        assert_eq!(
            aggregate_events(&[1.0, 1.0, 1.0], p).unwrap(),
            Event4::new(1.0, 1.0, 2.0, 3.0)
        );
        assert_eq!(aggregate_events(&[0.0, 2.0], p).unwrap().t, 1.0);
        assert!(matches!(
            aggregate_events(&[], p),
            Err(ProtocolError::EmptyList)
        ));
    }

    #[test]
    fn aggregate_jittered_mean() {
        let (a, _) = jittered_times(5.0, 0.0, 100_000, 0.01, 9);
        let e = aggregate_events(&a, [0.0; 3]).unwrap();
        assert!((e.t - 5.0).abs() < 4.0 * 0.01 / (1e5f64).sqrt());
    }

    #[test]
    fn geometry_validation() {
        let arms = |dir, v, r| LabGeometry::opposed_arms(dir, 10.0, v, r, "t");
        assert!(arms([1.0, 0.0, 0.0], 1.0, range()).is_err());
        assert!(arms([0.0; 3], 0.5, range()).is_err());
        // Bob at 40 would be timelike to Alice.
        assert!(arms([1.0, 0.0, 0.0], 0.5, (4.0, 40.0)).is_err());
        assert!(arms([1.0, 0.0, 0.0], 0.5, (3.0, 28.0)).is_err());
        let g = geometry([1.0, 0.0, 0.0], 12.0);
        assert_eq!(g.event_a(), Event4::new(20.0, -10.0, 0.0, 0.0));
        assert_eq!(g.event_b(), Event4::new(24.0, 12.0, 0.0, 0.0));
    }

    #[test]
    fn bisection_bound_with_monotone_oracle() {
        let cfg = search_cfg();
        let mut o = ThresholdOracle {
            switch_at: 13.37,
            calls: 0,
        };
        let r = switch_search(&mut o, &geometry([1.0, 0.0, 0.0], 10.0), &cfg).unwrap();
        assert!(r.iterations <= cfg.max_iterations() - 1);
        assert!((r.final_bob_dist - 13.37).abs() < cfg.d_tol);
        assert_eq!(o.calls as u32, r.iterations + 2);
    }

    #[test]
    fn rest_frame_switch_point_equalizes_transit() {
        let cfg = search_cfg();
        let mut o = OrderOracle {
            n: FoliationNormal::LAB,
            calls: 0,
            ambiguous: 0,
        };
        let r = switch_search(&mut o, &geometry([1.0, 0.0, 0.0], 10.0), &cfg).unwrap();
        assert!((r.final_bob_dist - 10.0).abs() < cfg.d_tol);
        let sep = r.pair.separation();
        assert!(sep.t.abs() < cfg.d_tol / 0.5);
    }

    #[test]
    fn no_bracket() {
        let cfg = search_cfg();
        let mut o = ThresholdOracle {
            switch_at: 1.0,
            calls: 0,
        };
        let err = switch_search(&mut o, &geometry([1.0, 0.0, 0.0], 10.0), &cfg).unwrap_err();
        assert!(matches!(
            err,
            ProtocolError::NoBracket {
                at_min: DistributionClass::Exotic,
                ..
            }
        ));
    }

    #[test]
    fn indeterminate_escalates_once_then_aborts() {
        struct Fuzzy {
            sizes: Vec<u64>,
        }
        impl RunOracle for Fuzzy {
            fn observe(
                &mut self,
                g: &LabGeometry,
                axis: SpinAxis,
                n: u64,
                _s: u64,
            ) -> Result<RunRecord, ProtocolError> {
                self.sizes.push(n);
                let d = g.bob_dist();
                let observed = if (d - 16.0).abs() < 1e-12 {
                    DistributionClass::Indeterminate
                } else if d > 16.0 {
                    DistributionClass::Exotic
                } else {
                    DistributionClass::HeavyTailed
                };
                Ok(RunRecord {
                    event_a: g.event_a(),
                    event_b: g.event_b(),
                    alice_axis: axis,
                    observed,
                    n_pairs: n,
                })
            }
        }
        let mut o = Fuzzy { sizes: vec![] };
        let err =
            switch_search(&mut o, &geometry([1.0, 0.0, 0.0], 10.0), &search_cfg()).unwrap_err();
        assert!(matches!(
            err,
            ProtocolError::IndeterminateRun { n_pairs: 4000, .. }
        ));
        assert_eq!(o.sizes, vec![1000, 1000, 1000, 4000]);
    }

    #[test]
    fn detection_with_exact_order_oracle() {
        let cfg = search_cfg();
        for beta in [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.1, -0.2, 0.25]] {
            let truth = FoliationNormal::from_boost(&BoostSpec::new(beta).unwrap());
            let mut o = OrderOracle {
                n: truth,
                calls: 0,
                ambiguous: 0,
            };
            let orients = standard_orientations(10.0, 0.5, range()).unwrap();
            let r = detect_foliation(&mut o, &orients, &cfg).unwrap();
            let err = r.recovered.hyperbolic_angle(&truth);
            let bound = propagated_error_bound(
                &cfg,
                0.5,
                10.0,
                BoostSpec::new(beta).unwrap().speed_sq().sqrt(),
            );
            assert!(err <= bound, "beta {beta:?}: error {err} > {bound}");
            for k in 0..3 {
                assert!(r.iterations_per_orientation[k] <= cfg.max_iterations());
            }
        }
    }

    #[test]
    fn coplanar_orientations_are_degenerate() {
        let cfg = search_cfg();
        let mut o = OrderOracle {
            n: FoliationNormal::LAB,
            calls: 0,
            ambiguous: 0,
        };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let orients = [
            LabGeometry::opposed_arms([1.0, 0.0, 0.0], 10.0, 0.5, range(), "a").unwrap(),
            LabGeometry::opposed_arms([0.0, 1.0, 0.0], 10.0, 0.5, range(), "b").unwrap(),
            LabGeometry::opposed_arms([s, s, 0.0], 10.0, 0.5, range(), "c").unwrap(),
        ];
        let err = detect_foliation(&mut o, &orients, &cfg).unwrap_err();
        assert!(matches!(
            err,
            ProtocolError::Spacetime(SpacetimeError::DegenerateTriad { .. })
        ));
    }

    #[test]
    fn inference_never_sees_the_truth() {
        // The inference path compiles against any oracle; a proxy that only
        // counts calls sees every access it makes.
        struct Counting<O> {
            inner: O,
            calls: usize,
        }
        impl<O: RunOracle> RunOracle for Counting<O> {
            fn observe(
                &mut self,
                g: &LabGeometry,
                a: SpinAxis,
                n: u64,
                s: u64,
            ) -> Result<RunRecord, ProtocolError> {
                self.calls += 1;
                self.inner.observe(g, a, n, s)
            }
        }
        let cfg = search_cfg();
        let truth = FoliationNormal::from_boost(&BoostSpec::new([0.2, 0.1, 0.0]).unwrap());
        let mut proxy = Counting {
            inner: OrderOracle {
                n: truth,
                calls: 0,
                ambiguous: 0,
            },
            calls: 0,
        };
        let orients = standard_orientations(10.0, 0.5, range()).unwrap();
        let r = detect_foliation(&mut proxy, &orients, &cfg).unwrap();
        assert_eq!(proxy.calls, proxy.inner.calls);
        let expected =
            r.iterations_per_orientation.iter().sum::<u32>() + 6 + proxy.inner.ambiguous as u32;
        assert_eq!(proxy.calls as u32, expected);
        assert!(r.angular_error_vs_truth.is_none());
    }

    #[test]
    fn calibration_examples() {
        let cfg = search_cfg();
        let mut o = OrderOracle {
            n: FoliationNormal::LAB,
            calls: 0,
            ambiguous: 0,
        };
        let c = calibrate_signaling(&mut o, &geometry([1.0, 0.0, 0.0], 20.0), &cfg).unwrap();
        assert_eq!(c.adjustments, 0);
        assert!(c.geometry.is_calibrated());

        // Bob starts inside the switch point (about 6.33) and has to move out.
        let boosted = FoliationNormal::from_boost(&BoostSpec::new([-0.45, 0.0, 0.0]).unwrap());
        let mut o = OrderOracle {
            n: boosted,
            calls: 0,
            ambiguous: 0,
        };
        let c = calibrate_signaling(&mut o, &geometry([1.0, 0.0, 0.0], 5.0), &cfg).unwrap();
        assert!(c.adjustments > 0);
        let (a, b) = (c.geometry.event_a(), c.geometry.event_b());
        assert_eq!(
            temporal_order(&boosted, a, b, 0.0),
            TemporalOrder::AliceFirst
        );

        let narrow = SearchConfig { d_max: 6.0, ..cfg };
        let err =
            calibrate_signaling(&mut o, &geometry([1.0, 0.0, 0.0], 5.0), &narrow).unwrap_err();
        assert!(matches!(err, ProtocolError::CannotEstablishOrder { .. }));
    }

    #[test]
    fn transmit_requires_calibration_and_decodes() {
        let mut o = OrderOracle {
            n: FoliationNormal::LAB,
            calls: 0,
            ambiguous: 0,
        };
        let g = geometry([1.0, 0.0, 0.0], 20.0);
        assert!(matches!(
            transmit_bits(&mut o, &g, &[0, 1], 10, 1),
            Err(ProtocolError::NotCalibrated)
        ));
        let c = calibrate_signaling(&mut o, &g, &search_cfg()).unwrap();
        let r = transmit_bits(&mut o, &c.geometry, &[0, 1, 0, 1], 10, 1).unwrap();
        assert_eq!(r.decoded_bits, vec![Some(0), Some(1), Some(0), Some(1)]);
        assert_eq!(r.bit_error_rate, 0.0);
        let r = transmit_bits(&mut o, &c.geometry, &[1, 1, 1], 10, 1).unwrap();
        assert!(r.decoded_bits.iter().all(|b| *b == Some(1)));
        // Moving Bob voids the calibration.
        let moved = c.geometry.with_bob_dist(21.0).unwrap();
        assert!(matches!(
            transmit_bits(&mut o, &moved, &[1], 10, 1),
            Err(ProtocolError::NotCalibrated)
        ));
    }

    #[test]
    fn bit_parsing() {
        assert_eq!(parse_bits("0110").unwrap(), vec![0, 1, 1, 0]);
        assert!(matches!(parse_bits("2"), Err(ProtocolError::InvalidBit(_))));
        assert!(matches!(parse_bits(""), Err(ProtocolError::EmptyMessage)));
    }

    #[test]
    fn simulated_order_axis_rows() {
        let (physics, classifier) = lab_cfg();
        let mut lab = SimulatedLab::new(
            physics,
            classifier,
            HiddenFoliation::new(FoliationNormal::LAB),
        );
        let alice_first = geometry([1.0, 0.0, 0.0], 20.0);
        let bob_first = geometry([1.0, 0.0, 0.0], 5.0);
        let cases = [
            (&alice_first, SpinAxis::x(), DistributionClass::Exotic),
            (&alice_first, SpinAxis::z(), DistributionClass::HeavyTailed),
            (&bob_first, SpinAxis::x(), DistributionClass::HeavyTailed),
            (&bob_first, SpinAxis::z(), DistributionClass::HeavyTailed),
        ];
        for (g, axis, want) in cases {
            let rec = lab.observe(g, axis, 400, 11).unwrap();
            assert_eq!(rec.observed, want);
            assert_eq!(rec.event_a, g.event_a());
        }
        let exact = geometry([1.0, 0.0, 0.0], 10.0);
        assert!(matches!(
            lab.observe(&exact, SpinAxis::x(), 400, 1),
            Err(ProtocolError::SimultaneousAmbiguous { .. })
        ));
    }
}
