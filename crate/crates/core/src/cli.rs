//! Command-line front end: JSON configuration, one subcommand per
//! experiment, and a JSON report envelope on stdout or `--out`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ensemble::{
    arrival_distribution, calibrate_classifier, classify, empirical_tau_max, equivariance_check,
    ks_statistic_censored, pushforward_arrival_cdf, ClassifierConfig, EnsembleError, PairScenario,
};
use crate::fields::{
    mixed_velocity, particle2_branch_velocity, pauli_current_numeric_with, singlet_current2_closed,
    singlet_density, weights, ConvMode, GaussianPacket, SingletSpinor, SpatialPacket, SpinAxis,
    SpinOutcome, Vec3, WaveguideModel,
};
use crate::protocol::{
    calibrate_signaling, derive_seed, detect_foliation_simulated, parse_bits,
    propagated_error_bound, standard_orientations, transmit_bits, HiddenFoliation, LabGeometry,
    LabPhysics, ProtocolError, RunOracle, SearchConfig, SimulatedLab,
};
use crate::spacetime::{temporal_order, BoostSpec, FoliationNormal, SpacetimeError};
use crate::trajectories::IntegratorConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

/// Pass thresholds of the property suite.
pub const CURRENT_REL_TOL: f64 = 1e-5;
pub const MIXED_TOL: f64 = 1e-10;
pub const KS_TOL: f64 = 0.02;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub n: u64,
    pub seed: u64,
    pub bins: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            n: 10_000,
            seed: 7,
            bins: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub theta: f64,
    pub n_min: u64,
    /// Size of each reference ensemble used to set `τ_c`.
    pub calibration_n: u64,
    pub calibration_seed: u64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            theta: 0.01,
            n_min: 1000,
            calibration_n: 10_000,
            calibration_seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub d_min: f64,
    pub d_max: f64,
    pub d_tol: f64,
    pub particle_speed: f64,
    pub hidden_boost: [f64; 3],
    pub alice_dist: f64,
    /// Pairs per run during the switch-point search and calibration.
    pub n_pairs: u64,
    pub timing_jitter: f64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            d_min: 4.0,
            d_max: 28.0,
            d_tol: 0.01,
            particle_speed: 0.5,
            hidden_boost: [0.0; 3],
            alice_dist: 10.0,
            n_pairs: 1000,
            timing_jitter: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: WaveguideModel,
    pub integrator: IntegratorConfig,
    pub ensemble: EnsembleSection,
    pub classifier: ClassifierSection,
    pub protocol: ProtocolSection,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Protocol(ProtocolError::EmptyMessage | ProtocolError::InvalidBit(_)) => {
                EXIT_USAGE
            }
            CliError::Protocol(ProtocolError::Spacetime(SpacetimeError::BetaOutOfRange(_))) => {
                EXIT_USAGE
            }
            _ => EXIT_PROTOCOL,
        }
    }
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfigFile =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        RunConfigFile::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, m: String| CliError::Config(format!("{name}: {m}"));
        self.model
            .validate()
            .map_err(|e| field("model", e.to_string()))?;
        self.integrator
            .validate()
            .map_err(|e| field("integrator", e.to_string()))?;
        if self.ensemble.n == 0 {
            return Err(field("ensemble.n", "must be >= 1".into()));
        }
        if self.ensemble.bins == 0 {
            return Err(field("ensemble.bins", "must be >= 1".into()));
        }
        let c = &self.classifier;
        if !(c.theta > 0.0 && c.theta < 1.0) {
            return Err(field(
                "classifier.theta",
                format!("{} must lie in (0, 1)", c.theta),
            ));
        }
        if c.calibration_n < 1000 {
            return Err(field(
                "classifier.calibration_n",
                format!("{} < 1000", c.calibration_n),
            ));
        }
        let p = &self.protocol;
        if !(p.timing_jitter >= 0.0 && p.timing_jitter.is_finite()) {
            return Err(field(
                "protocol.timing_jitter",
                format!("{} must be >= 0", p.timing_jitter),
            ));
        }
        self.hidden_boost().map_err(|e| match e {
            CliError::Protocol(inner) => field("protocol.hidden_boost", inner.to_string()),
            other => other,
        })?;
        self.search_config()
            .validate()
            .map_err(|e| field("protocol", e.to_string()))?;
        self.orientations()
            .map_err(|e| field("protocol", e.to_string()))?;
        Ok(())
    }

    pub fn hidden_boost(&self) -> Result<BoostSpec, CliError> {
        Ok(BoostSpec::new(self.protocol.hidden_boost).map_err(ProtocolError::from)?)
    }

    pub fn search_config(&self) -> SearchConfig {
        let p = &self.protocol;
        SearchConfig {
            d_min: p.d_min,
            d_max: p.d_max,
            d_tol: p.d_tol,
            n_pairs: p.n_pairs,
            seed: self.ensemble.seed,
        }
    }

    pub fn orientations(&self) -> Result<[LabGeometry; 3], ProtocolError> {
        let p = &self.protocol;
        standard_orientations(p.alice_dist, p.particle_speed, (p.d_min, p.d_max))
    }

    pub fn physics(&self) -> LabPhysics {
        LabPhysics {
            model: self.model,
            integrator: self.integrator,
            bins: self.ensemble.bins,
            timing_jitter: self.protocol.timing_jitter,
        }
    }

    pub fn calibrate(&self) -> Result<ClassifierConfig, CliError> {
        let c = &self.classifier;
        Ok(calibrate_classifier(
            &self.model,
            &self.integrator,
            c.calibration_n,
            c.calibration_seed,
            c.theta,
            c.n_min,
        )?)
    }

    pub fn lab(&self, classifier: ClassifierConfig) -> Result<SimulatedLab, CliError> {
        let truth = FoliationNormal::from_boost(&self.hidden_boost()?);
        Ok(SimulatedLab::new(
            self.physics(),
            classifier,
            HiddenFoliation::new(truth),
        ))
    }
}

/// Every report has this shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope {
    pub command: String,
    pub config_echo: RunConfigFile,
    pub results: Value,
    pub versions: String,
}

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

#[derive(Parser, Debug)]
#[command(
    name = "bohm-foliation",
    version,
    about = "Bohmian arrival-time and foliation-detection laboratory"
)]
pub struct Cli {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for ensemble runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Arrival-time histogram for one field regime.
    Arrival(ArrivalArgs),
    /// One EPRB run in the simulated lab.
    Epr(EprArgs),
    /// Recover the hidden foliation normal.
    DetectFoliation(DetectArgs),
    /// Calibrate and send a bit string.
    Signal(SignalArgs),
    /// Oracle, equivariance and pushforward property suite.
    Check(CheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderArg {
    AliceFirst,
    BobFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeArg {
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationArg {
    X,
    Y,
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Currents,
    Equivariance,
    Pushforward,
}

/// `x`, `y`, `z` or three comma-separated components.
pub fn parse_axis(s: &str) -> Result<SpinAxis, String> {
    let v = match s {
        "x" => [1.0, 0.0, 0.0],
        "y" => [0.0, 1.0, 0.0],
        "z" => [0.0, 0.0, 1.0],
        _ => parse_triple(s)?,
    };
    SpinAxis::new(Vec3::from(v)).map_err(|e| e.to_string())
}

pub fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got {s:?}"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("{p:?} is not a number"))?;
    }
    Ok(out)
}

#[derive(Args, Debug)]
pub struct ArrivalArgs {
    /// Alice's axis: x, y, z or a,b,c.
    #[arg(long, value_parser = parse_axis)]
    pub axis: SpinAxis,
    #[arg(long, value_enum, default_value = "alice-first")]
    pub order: OrderArg,
    /// Fix Alice's outcome instead of drawing it per pair.
    #[arg(long, value_enum)]
    pub outcome: Option<OutcomeArg>,
    #[arg(long)]
    pub n: Option<u64>,
    /// Histogram CSV destination.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EprArgs {
    #[arg(long, value_parser = parse_axis)]
    pub axis: SpinAxis,
    #[arg(long)]
    pub bob_dist: f64,
    #[arg(long, value_enum, default_value = "x")]
    pub orientation: OrientationArg,
    #[arg(long)]
    pub pairs: Option<u64>,
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    pub hidden_boost: Option<[f64; 3]>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Velocity of the hidden preferred frame, bx,by,bz.
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    pub hidden_boost: Option<[f64; 3]>,
}

#[derive(Args, Debug)]
pub struct SignalArgs {
    /// Message as a string of 0s and 1s.
    #[arg(long)]
    pub bits: String,
    #[arg(long, default_value_t = 10_000)]
    pub pairs_per_bit: u64,
    #[arg(long, value_parser = parse_triple, allow_hyphen_values = true)]
    pub hidden_boost: Option<[f64; 3]>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long, value_enum)]
    pub only: Option<Suite>,
    /// Random configurations for the current comparison.
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    #[arg(long, hide = true)]
    pub inject_spin_flux_flip: bool,
}

/// Largest discrepancies of the numeric singlet current against the
/// closed form and of the blended branch fields against `J/ρ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurrentCheck {
    pub n_configs: usize,
    pub max_rel_current_err: f64,
    pub max_mixed_err: f64,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_packet(rng: &mut ChaCha8Rng) -> GaussianPacket {
    let c = Vec3::new(
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
    );
    let k = Vec3::new(
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
    );
    GaussianPacket::new(c, rng.gen_range(0.5..1.5), k)
}

fn near(rng: &mut ChaCha8Rng, p: &GaussianPacket) -> Vec3 {
    p.center + random_unit(rng) * (p.sigma * rng.gen_range(0.0..1.5))
}

/// Compares the finite-difference Pauli current of the singlet (particle 2,
/// step `h`) with its closed form at `n` random configurations. Half use a
/// Gaussian `g₀`, half the waveguide packet at a random time.
pub fn current_oracle_check(
    n: usize,
    seed: u64,
    h: f64,
    spin_flux_sign: f64,
) -> Result<CurrentCheck, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wg = WaveguideModel::default();
    let mut worst = CurrentCheck {
        n_configs: n,
        max_rel_current_err: 0.0,
        max_mixed_err: 0.0,
    };
    for i in 0..n {
        let fp = random_packet(&mut rng);
        let fm = random_packet(&mut rng);
        let axis = SpinAxis::new(random_unit(&mut rng)).expect("unit axis");
        let x1 = if rng.gen_bool(0.5) {
            near(&mut rng, &fp)
        } else {
            near(&mut rng, &fm)
        };
        let gauss = random_packet(&mut rng);
        let (g0, x2, t): (&dyn SpatialPacket, Vec3, f64) = if i % 2 == 0 {
            let x2 = near(&mut rng, &gauss);
            (&gauss, x2, 0.0)
        } else {
            let t = rng.gen_range(0.0..2.0);
            let x2 = Vec3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(0.3..2.5),
            );
            (&wg, x2, t)
        };
        let psi = SingletSpinor {
            f_plus: &fp,
            f_minus: &fm,
            g0,
            axis,
            x1,
            t,
        };
        let numeric = pauli_current_numeric_with(&psi, &x2, h, spin_flux_sign);
        let closed = singlet_current2_closed(&fp, &fm, g0, axis, &x1, &x2, t)
            .map_err(|e| CliError::Usage(format!("current oracle: {e}")))?;
        let rel = (numeric - closed).norm() / closed.norm();
        worst.max_rel_current_err = worst.max_rel_current_err.max(rel);

        let rho = singlet_density(&fp, &fm, g0, &x1, &x2, t);
        let w = weights(fp.value(&x1, t).norm_sqr(), fm.value(&x1, t).norm_sqr())
            .map_err(|e| CliError::Usage(format!("current oracle: {e}")))?;
        let branch = |s| particle2_branch_velocity(g0, axis, s, &x2, t);
        let (vp, vm) = match (branch(SpinOutcome::Up), branch(SpinOutcome::Down)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                return Err(CliError::Usage(format!("current oracle: {e}")))
            }
        };
        let v = mixed_velocity(&w, &vp, &vm);
        let target = closed / rho;
        let err = (v - target).norm() / target.norm().max(1.0);
        worst.max_mixed_err = worst.max_mixed_err.max(err);
    }
    Ok(worst)
}

/// KS distance, over the integration horizon, of the longitudinal arrival
/// times from the pushforward of the initial z-marginal.
pub fn pushforward_ks(
    m: &WaveguideModel,
    cfg: &IntegratorConfig,
    n: u64,
    seed: u64,
) -> Result<f64, CliError> {
    let free = WaveguideModel {
        conv_mode: ConvMode::ExactDnd,
        ..*m
    };
    let h = arrival_distribution(&free, &PairScenario::longitudinal(), n, seed, cfg, 1)?;
    Ok(ks_statistic_censored(
        &h.censored_sample(),
        |tau| pushforward_arrival_cdf(&free, tau),
        cfg.t_max,
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct SuiteLine {
    name: &'static str,
    measured: Value,
    threshold: Value,
    passed: bool,
}

fn run_check(cfg: &RunConfigFile, args: &CheckArgs) -> Result<(Value, bool), CliError> {
    let wanted = |s: Suite| args.only.is_none_or(|o| o == s);
    let sign = if args.inject_spin_flux_flip {
        -1.0
    } else {
        1.0
    };
    let seed = cfg.ensemble.seed;
    let mut lines = Vec::new();
    if wanted(Suite::Currents) {
        let c = current_oracle_check(args.configs, seed, FD_STEP, sign)?;
        lines.push(SuiteLine {
            name: "currents",
            measured: json!({ "max_rel_current_err": c.max_rel_current_err, "max_mixed_err": c.max_mixed_err }),
            threshold: json!({ "max_rel_current_err": CURRENT_REL_TOL, "max_mixed_err": MIXED_TOL }),
            passed: c.max_rel_current_err <= CURRENT_REL_TOL && c.max_mixed_err <= MIXED_TOL,
        });
    }
    if wanted(Suite::Equivariance) {
        let ks = equivariance_check(&cfg.model, 2.0, cfg.ensemble.n, seed, &cfg.integrator)?;
        lines.push(SuiteLine {
            name: "equivariance",
            measured: json!(ks),
            threshold: json!(KS_TOL),
            passed: ks < KS_TOL,
        });
    }
    if wanted(Suite::Pushforward) {
        let ks = pushforward_ks(&cfg.model, &cfg.integrator, cfg.ensemble.n, seed)?;
        lines.push(SuiteLine {
            name: "pushforward",
            measured: json!(ks),
            threshold: json!(KS_TOL),
            passed: ks < KS_TOL,
        });
    }
    let all = lines.iter().all(|l| l.passed);
    Ok((
        json!({ "suites": lines, "all_passed": all, "spin_flux_flipped": args.inject_spin_flux_flip }),
        all,
    ))
}

fn run_arrival(cfg: &RunConfigFile, args: &ArrivalArgs) -> Result<Value, CliError> {
    let classifier = cfg.calibrate()?;
    let scenario = match (args.order, args.outcome) {
        (OrderArg::BobFirst, _) => PairScenario::BobFirst,
        (OrderArg::AliceFirst, None) => PairScenario::AliceFirst { axis: args.axis },
        (OrderArg::AliceFirst, Some(o)) => PairScenario::AliceFirstConditioned {
            axis: args.axis,
            outcome: if o == OutcomeArg::Up {
                SpinOutcome::Up
            } else {
                SpinOutcome::Down
            },
        },
    };
    let integ = cfg.integrator.with_horizon(classifier.horizon());
    let h = arrival_distribution(
        &cfg.model,
        &scenario,
        cfg.ensemble.n,
        cfg.ensemble.seed,
        &integ,
        cfg.ensemble.bins,
    )?;
    if let Some(path) = &args.csv {
        h.write_csv(fs::File::create(path)?)?;
    }
    let class = match classify(&h, &classifier) {
        Ok(c) => Some(c),
        Err(EnsembleError::TooFewSamples { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(json!({
        "request": { "axis": args.axis, "order": args.order, "outcome": args.outcome },
        "scenario": scenario,
        "classifier": classifier,
        "n_total": h.n_total,
        "n_no_arrival": h.n_no_arrival,
        "empirical_tau_max": empirical_tau_max(&h).ok(),
        "tail_mass": h.tail_mass(classifier.tau_c),
        "class": class,
        "n_backflow": h.n_backflow,
        "max_rho_drift": h.max_rho_drift,
        "wall_hits": h.wall_hits,
    }))
}

fn orientation_index(o: OrientationArg) -> usize {
    match o {
        OrientationArg::X => 0,
        OrientationArg::Y => 1,
        OrientationArg::Z => 2,
    }
}

fn run_epr(cfg: &RunConfigFile, args: &EprArgs) -> Result<Value, CliError> {
    let classifier = cfg.calibrate()?;
    let mut lab = cfg.lab(classifier)?;
    let g =
        cfg.orientations()?[orientation_index(args.orientation)].with_bob_dist(args.bob_dist)?;
    let n = args.pairs.unwrap_or(cfg.protocol.n_pairs);
    let rec = lab.observe(&g, args.axis, n, cfg.ensemble.seed)?;
    let truth = lab.reveal_truth();
    Ok(json!({
        "request": { "axis": args.axis, "bob_dist": args.bob_dist, "orientation": args.orientation, "pairs": n },
        "classifier": classifier,
        "record": rec,
        "diagnostic_true_order": temporal_order(&truth, rec.event_a, rec.event_b, 0.0),
    }))
}

fn run_detect(cfg: &RunConfigFile) -> Result<Value, CliError> {
    let classifier = cfg.calibrate()?;
    let mut lab = cfg.lab(classifier)?;
    let search = cfg.search_config();
    let report = detect_foliation_simulated(&mut lab, &cfg.orientations()?, &search)?;
    let speed = cfg.hidden_boost()?.speed_sq().sqrt();
    let p = &cfg.protocol;
    Ok(json!({
        "classifier": classifier,
        "report": report,
        "hidden_normal": lab.reveal_truth(),
        "error_bound": propagated_error_bound(&search, p.particle_speed, p.alice_dist, speed),
    }))
}

fn run_signal(cfg: &RunConfigFile, args: &SignalArgs) -> Result<Value, CliError> {
    let bits = parse_bits(&args.bits)?;
    if args.pairs_per_bit == 0 {
        return Err(CliError::Usage("--pairs-per-bit must be >= 1".into()));
    }
    let classifier = cfg.calibrate()?;
    let mut lab = cfg.lab(classifier)?;
    let search = cfg.search_config();
    let start = cfg.orientations()?[0].clone();
    let cal = calibrate_signaling(&mut lab, &start, &search)?;
    let report = transmit_bits(
        &mut lab,
        &cal.geometry,
        &bits,
        args.pairs_per_bit,
        derive_seed(cfg.ensemble.seed, 0x5e4d, 0),
    )?;
    Ok(json!({
        "request": { "bits": args.bits, "pairs_per_bit": args.pairs_per_bit },
        "classifier": classifier,
        "calibration": { "bob_dist": cal.geometry.bob_dist(), "adjustments": cal.adjustments, "runs": cal.runs },
        "report": report,
    }))
}

fn resolve_config(cli: &Cli) -> Result<RunConfigFile, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(s) = cli.seed {
        cfg.ensemble.seed = s;
    }
    match &cli.command {
        Command::Arrival(a) => {
            if let Some(n) = a.n {
                cfg.ensemble.n = n;
            }
        }
        Command::Epr(EprArgs {
            hidden_boost: Some(b),
            ..
        })
        | Command::DetectFoliation(DetectArgs {
            hidden_boost: Some(b),
        })
        | Command::Signal(SignalArgs {
            hidden_boost: Some(b),
            ..
        }) => cfg.protocol.hidden_boost = *b,
        _ => {}
    }
    // Out-of-range boosts keep their own error and exit code.
    BoostSpec::new(cfg.protocol.hidden_boost).map_err(ProtocolError::from)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command. The flag is false when a property check failed.
pub fn execute(cli: &Cli) -> Result<(ReportEnvelope, bool), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // A pool built earlier in the process stays in place.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let cfg = resolve_config(cli)?;
    let (name, results, ok) = match &cli.command {
        Command::Arrival(a) => ("arrival", run_arrival(&cfg, a)?, true),
        Command::Epr(a) => ("epr", run_epr(&cfg, a)?, true),
        Command::DetectFoliation(_) => ("detect-foliation", run_detect(&cfg)?, true),
        Command::Signal(a) => ("signal", run_signal(&cfg, a)?, true),
        Command::Check(a) => {
            let (v, ok) = run_check(&cfg, a)?;
            ("check", v, ok)
        }
    };
    let env = ReportEnvelope {
        command: name.into(),
        config_echo: cfg,
        results,
        versions: version_string(),
    };
    Ok((env, ok))
}

fn emit(env: &ReportEnvelope, out: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(env).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = execute(&cli).and_then(|(env, ok)| {
        emit(&env, cli.out.as_deref())?;
        Ok(ok)
    });
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: property check failed");
            EXIT_CHECK_FAILED
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg = RunConfigFile::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        let cfg = RunConfigFile::from_json(r#"{"model": {"omega": 3.0}, "ensemble": {"seed": 9}}"#)
            .unwrap();
        assert_eq!(cfg.model.omega, 3.0);
        assert_eq!(cfg.model.detector_l, 5.0);
        assert_eq!(cfg.ensemble.seed, 9);
        let err = RunConfigFile::from_json("{\n  \"model\": {\"omgea\": 3.0}\n}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("omgea") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn config_revalidates() {
        let err = RunConfigFile::from_json(r#"{"classifier": {"theta": 1.5}}"#).unwrap_err();
        assert!(err.to_string().contains("classifier.theta"));
        let err =
            RunConfigFile::from_json(r#"{"protocol": {"hidden_boost": [1.1, 0, 0]}}"#).unwrap_err();
        assert!(err.to_string().contains("hidden_boost"));
        assert!(RunConfigFile::from_json(r#"{"integrator": {"dt": -1}}"#).is_err());
        assert!(RunConfigFile::from_json(r#"{"protocol": {"d_min": 2.0}}"#).is_err());
    }

    #[test]
    fn envelope_round_trip() {
        let env = ReportEnvelope {
            command: "check".into(),
            config_echo: RunConfigFile::default(),
            results: json!({"x": 0.1 + 0.2, "n": [1, 2]}),
            versions: version_string(),
        };
        let text = serde_json::to_string(&env).unwrap();
        let back: ReportEnvelope = serde_json::from_str(&text).unwrap();
        assert_eq!(back, env);
    }

    #[test]
    fn axis_and_triple_parsing() {
        assert_eq!(parse_axis("x").unwrap(), SpinAxis::x());
        assert_eq!(parse_axis("0,0,2").unwrap(), SpinAxis::z());
        assert!(parse_axis("0,0,0").is_err());
        assert_eq!(parse_triple("0.3, 0,-0.1").unwrap(), [0.3, 0.0, -0.1]);
        assert!(parse_triple("1,2").is_err());
    }

    #[test]
    fn current_oracle_passes_and_detects_flip() {
        let c = current_oracle_check(40, 3, FD_STEP, 1.0).unwrap();
        assert!(c.max_rel_current_err < CURRENT_REL_TOL, "{c:?}");
        assert!(c.max_mixed_err < MIXED_TOL, "{c:?}");
        let bad = current_oracle_check(40, 3, FD_STEP, -1.0).unwrap();
        assert!(bad.max_rel_current_err > 1e-2, "{bad:?}");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(
            main_with_args(["bohm-foliation", "arrival", "--order", "alice-first"]),
            EXIT_USAGE
        );
        assert_eq!(
            main_with_args([
                "bohm-foliation",
                "detect-foliation",
                "--hidden-boost",
                "1.1,0,0"
            ]),
            EXIT_USAGE
        );
        assert_eq!(
            main_with_args(["bohm-foliation", "signal", "--bits", "2"]),
            EXIT_USAGE
        );
        assert_eq!(
            main_with_args(["bohm-foliation", "signal", "--bits", ""]),
            EXIT_USAGE
        );
        assert_eq!(
            main_with_args(["bohm-foliation", "--threads", "0", "check"]),
            EXIT_USAGE
        );
    }
}
