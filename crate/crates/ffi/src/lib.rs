//! C interface to `bohm_foliation`.
//!
//! Every fallible call returns a [`BfStatus`]; on failure the message is
//! kept per thread and read back with [`bf_last_error`]. Handles are opaque
//! and released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bohm_foliation::cli::RunConfigFile;
use bohm_foliation::ensemble::{
    self, ArrivalHistogram, ClassifierConfig, EnsembleError, PairScenario,
};
use bohm_foliation::fields::{ConvMode, SpinAxis, SpinOutcome, Vec3, WaveguideModel, ZMode};
use bohm_foliation::protocol::{
    calibrate_signaling, detect_foliation_simulated, transmit_bits, ProtocolError, SimulatedLab,
};
use bohm_foliation::spacetime::{
    self, BoostSpec, Event4, FoliationNormal, SpacetimeError, TemporalOrder,
};
use bohm_foliation::trajectories::IntegratorConfig;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BetaOutOfRange = 3,
    DegenerateTriad = 4,
    NonTimelikeNormal = 5,
    Ensemble = 6,
    Protocol = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Four-vector `(t, x, y, z)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BfEvent4 {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<BfEvent4> for Event4 {
    fn from(e: BfEvent4) -> Self {
        Event4::new(e.t, e.x, e.y, e.z)
    }
}

impl From<Event4> for BfEvent4 {
    fn from(e: Event4) -> Self {
        BfEvent4 {
            t: e.t,
            x: e.x,
            y: e.y,
            z: e.z,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfZMode {
    HalfOscillator = 0,
    TruncatedGaussian = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfConvMode {
    ExactDnd = 0,
    ConstantK = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfOrder {
    AliceFirst = 0,
    BobFirst = 1,
    Simultaneous = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfClass {
    Exotic = 0,
    HeavyTailed = 1,
    Indeterminate = 2,
}

/// Waveguide model plus integrator settings.
pub struct BfModel {
    model: WaveguideModel,
    integrator: IntegratorConfig,
}

pub struct BfHistogram {
    hist: ArrivalHistogram,
}

/// Simulated lab with a calibrated classifier and hidden foliation.
pub struct BfLab {
    config: RunConfigFile,
    classifier: ClassifierConfig,
    lab: SimulatedLab,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: BfStatus, msg: impl Into<String>) -> BfStatus {
    set_error(msg.into());
    status
}

fn spacetime_status(e: &SpacetimeError) -> BfStatus {
    match e {
        SpacetimeError::BetaOutOfRange(_) => BfStatus::BetaOutOfRange,
        SpacetimeError::DegenerateTriad { .. } => BfStatus::DegenerateTriad,
        SpacetimeError::NonTimelikeNormal { .. } => BfStatus::NonTimelikeNormal,
        _ => BfStatus::InvalidArgument,
    }
}

fn protocol_status(e: &ProtocolError) -> BfStatus {
    match e {
        ProtocolError::Spacetime(s) => spacetime_status(s),
        ProtocolError::Ensemble(_) => BfStatus::Ensemble,
        ProtocolError::InvalidBit(_)
        | ProtocolError::EmptyMessage
        | ProtocolError::InvalidConfig(_) => BfStatus::InvalidArgument,
        _ => BfStatus::Protocol,
    }
}

fn guard<F: FnOnce() -> BfStatus>(f: F) -> BfStatus {
    catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|_| fail(BfStatus::Panic, "panic inside bohm_foliation"))
}

unsafe fn read3(p: *const f64) -> Option<[f64; 3]> {
    if p.is_null() {
        None
    } else {
        Some([*p, *p.add(1), *p.add(2)])
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Library name and version; static, do not free.
#[no_mangle]
pub extern "C" fn bf_version() -> *const c_char {
    concat!("bohm-foliation ", env!("CARGO_PKG_VERSION"), "\0")
        .as_ptr()
        .cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length, or 0
/// if there is none.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn bf_minkowski_dot(a: BfEvent4, b: BfEvent4) -> f64 {
    spacetime::minkowski_dot(a.into(), b.into())
}

/// Active boost of `e` by velocity `beta[3]`.
///
/// # Safety
/// `beta` must point to three doubles and `out` to a writable `BfEvent4`.
#[no_mangle]
pub unsafe extern "C" fn bf_boost(e: BfEvent4, beta: *const f64, out: *mut BfEvent4) -> BfStatus {
    guard(|| {
        let Some(b) = read3(beta) else {
            return fail(BfStatus::NullPointer, "beta is NULL");
        };
        if out.is_null() {
            return fail(BfStatus::NullPointer, "out is NULL");
        }
        match spacetime::boost_by(e.into(), b) {
            Ok(r) => {
                *out = r.into();
                BfStatus::Ok
            }
            Err(err) => fail(spacetime_status(&err), err.to_string()),
        }
    })
}

/// Unit future-pointing normal orthogonal to three separation vectors.
///
/// # Safety
/// `seps` must point to three `BfEvent4` and `out` to a writable `BfEvent4`.
#[no_mangle]
pub unsafe extern "C" fn bf_solve_normal(seps: *const BfEvent4, out: *mut BfEvent4) -> BfStatus {
    guard(|| {
        if seps.is_null() || out.is_null() {
            return fail(BfStatus::NullPointer, "seps or out is NULL");
        }
        let s = std::slice::from_raw_parts(seps, 3);
        match spacetime::solve_normal(s[0].into(), s[1].into(), s[2].into()) {
            Ok(n) => {
                *out = n.as_event().into();
                BfStatus::Ok
            }
            Err(err) => fail(spacetime_status(&err), err.to_string()),
        }
    })
}

/// Order of events `a` and `b` along the foliation with normal `n`.
///
/// # Safety
/// `out` must point to a writable `BfOrder`.
#[no_mangle]
pub unsafe extern "C" fn bf_temporal_order(
    n: BfEvent4,
    a: BfEvent4,
    b: BfEvent4,
    tol: f64,
    out: *mut BfOrder,
) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return fail(BfStatus::NullPointer, "out is NULL");
        }
        let normal = match FoliationNormal::new(n.t, n.x, n.y, n.z) {
            Ok(v) => v,
            Err(err) => return fail(spacetime_status(&err), err.to_string()),
        };
        *out = match spacetime::temporal_order(&normal, a.into(), b.into(), tol) {
            TemporalOrder::AliceFirst => BfOrder::AliceFirst,
            TemporalOrder::BobFirst => BfOrder::BobFirst,
            TemporalOrder::Simultaneous => BfOrder::Simultaneous,
        };
        BfStatus::Ok
    })
}

/// FLASH statistic from the four channel counts.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn bf_flash_eta(
    n_px: u64,
    n_mx: u64,
    n_pz: u64,
    n_mz: u64,
    out: *mut f64,
) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return fail(BfStatus::NullPointer, "out is NULL");
        }
        match ensemble::flash_eta(n_px, n_mx, n_pz, n_mz) {
            Ok(v) => {
                *out = v;
                BfStatus::Ok
            }
            Err(err) => fail(BfStatus::InvalidArgument, err.to_string()),
        }
    })
}

/// New model with the default integrator (`dt = 1e-3`).
///
/// # Safety
/// `out` must point to a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn bf_model_new(
    omega: f64,
    detector_l: f64,
    z_mode: BfZMode,
    conv_mode: BfConvMode,
    k2: f64,
    out: *mut *mut BfModel,
) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return fail(BfStatus::NullPointer, "out is NULL");
        }
        let model = WaveguideModel {
            omega,
            detector_l,
            z_mode: match z_mode {
                BfZMode::HalfOscillator => ZMode::HalfOscillator,
                BfZMode::TruncatedGaussian => ZMode::TruncatedGaussian,
            },
            conv_mode: match conv_mode {
                BfConvMode::ExactDnd => ConvMode::ExactDnd,
                BfConvMode::ConstantK => ConvMode::ConstantK,
            },
            k2,
        };
        if let Err(err) = model.validate() {
            return fail(BfStatus::InvalidArgument, err.to_string());
        }
        *out = Box::into_raw(Box::new(BfModel {
            model,
            integrator: IntegratorConfig::default(),
        }));
        BfStatus::Ok
    })
}

/// Overrides the integrator step and horizon.
///
/// # Safety
/// `m` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_set_integrator(m: *mut BfModel, dt: f64, t_max: f64) -> BfStatus {
    guard(|| {
        let Some(m) = m.as_mut() else {
            return fail(BfStatus::NullPointer, "model is NULL");
        };
        let cfg = IntegratorConfig {
            dt,
            t_max,
            crossing_tol: IntegratorConfig::default().crossing_tol.min(dt),
            ..m.integrator
        };
        if let Err(err) = cfg.validate() {
            return fail(BfStatus::InvalidArgument, err.to_string());
        }
        m.integrator = cfg;
        BfStatus::Ok
    })
}

/// # Safety
/// `m` must be NULL or a handle from [`bf_model_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_model_free(m: *mut BfModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Arrival-time histogram over `[0, t_max]` of the model's integrator.
///
/// `order`: Alice first or Bob first. `outcome`: 0 draws Alice's result per
/// pair, +1 or -1 fixes it. `axis` is ignored when Bob is first.
///
/// # Safety
/// `m` must be a live model, `axis` three doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_arrival_distribution(
    m: *const BfModel,
    order: BfOrder,
    axis: *const f64,
    outcome: i32,
    n: u64,
    seed: u64,
    bins: usize,
    out: *mut *mut BfHistogram,
) -> BfStatus {
    guard(|| {
        let Some(m) = m.as_ref() else {
            return fail(BfStatus::NullPointer, "model is NULL");
        };
        if out.is_null() {
            return fail(BfStatus::NullPointer, "out is NULL");
        }
        let scenario = match order {
            BfOrder::BobFirst => PairScenario::BobFirst,
            BfOrder::Simultaneous => {
                return fail(
                    BfStatus::InvalidArgument,
                    "order must be Alice or Bob first",
                )
            }
            BfOrder::AliceFirst => {
                let Some(a) = read3(axis) else {
                    return fail(BfStatus::NullPointer, "axis is NULL");
                };
                let axis = match SpinAxis::new(Vec3::from(a)) {
                    Ok(v) => v,
                    Err(err) => return fail(BfStatus::InvalidArgument, err.to_string()),
                };
                match outcome {
                    0 => PairScenario::AliceFirst { axis },
                    1 => PairScenario::AliceFirstConditioned {
                        axis,
                        outcome: SpinOutcome::Up,
                    },
                    -1 => PairScenario::AliceFirstConditioned {
                        axis,
                        outcome: SpinOutcome::Down,
                    },
                    _ => return fail(BfStatus::InvalidArgument, "outcome must be -1, 0 or 1"),
                }
            }
        };
        match ensemble::arrival_distribution(
            &m.model,
            &scenario,
            n,
            seed,
            &m.integrator,
            bins.max(1),
        ) {
            Ok(hist) => {
                *out = Box::into_raw(Box::new(BfHistogram { hist }));
                BfStatus::Ok
            }
            Err(err) => fail(BfStatus::Ensemble, err.to_string()),
        }
    })
}

/// # Safety
/// `h` must be a live histogram handle.
#[no_mangle]
pub unsafe extern "C" fn bf_histogram_n_total(h: *const BfHistogram) -> u64 {
    h.as_ref().map_or(0, |h| h.hist.n_total)
}

/// # Safety
/// `h` must be a live histogram handle.
#[no_mangle]
pub unsafe extern "C" fn bf_histogram_n_no_arrival(h: *const BfHistogram) -> u64 {
    h.as_ref().map_or(0, |h| h.hist.n_no_arrival)
}

/// Fraction of trajectories arriving after `tau_c` or not at all.
///
/// # Safety
/// `h` must be a live histogram handle.
#[no_mangle]
pub unsafe extern "C" fn bf_histogram_tail_mass(h: *const BfHistogram, tau_c: f64) -> f64 {
    h.as_ref().map_or(f64::NAN, |h| h.hist.tail_mass(tau_c))
}

/// Latest arrival time, or NaN when nothing arrived.
///
/// # Safety
/// `h` must be a live histogram handle.
#[no_mangle]
pub unsafe extern "C" fn bf_histogram_tau_max(h: *const BfHistogram) -> f64 {
    h.as_ref()
        .and_then(|h| ensemble::empirical_tau_max(&h.hist).ok())
        .unwrap_or(f64::NAN)
}

/// Copies bin counts into `counts`. `*len` holds the capacity on entry and
/// the number of bins on return.
///
/// # Safety
/// `h` must be live; `counts` must hold `*len` values.
#[no_mangle]
pub unsafe extern "C" fn bf_histogram_counts(
    h: *const BfHistogram,
    counts: *mut u64,
    len: *mut usize,
) -> BfStatus {
    guard(|| {
        let (Some(h), false) = (h.as_ref(), len.is_null()) else {
            return fail(BfStatus::NullPointer, "histogram or len is NULL");
        };
        let need = h.hist.counts.len();
        let cap = *len;
        *len = need;
        if cap < need || counts.is_null() {
            return fail(
                BfStatus::BufferTooSmall,
                format!("need room for {need} bins"),
            );
        }
        ptr::copy_nonoverlapping(h.hist.counts.as_ptr(), counts, need);
        BfStatus::Ok
    })
}

/// Histogram as CSV text; free with [`bf_string_free`].
///
/// # Safety
/// `h` must be a live histogram handle.
#[no_mangle]
pub unsafe extern "C" fn bf_histogram_csv(h: *const BfHistogram) -> *mut c_char {
    h.as_ref()
        .map_or(ptr::null_mut(), |h| to_c_string(h.hist.to_csv_string()))
}

/// # Safety
/// `h` must be NULL or a histogram handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_histogram_free(h: *mut BfHistogram) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Builds a simulated lab from a JSON run configuration (NULL or `{}` for
/// defaults) and calibrates its classifier. Calibration runs two reference
/// ensembles of `classifier.calibration_n` trajectories.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_lab_new(config_json: *const c_char, out: *mut *mut BfLab) -> BfStatus {
    guard(|| {
        if out.is_null() {
            return fail(BfStatus::NullPointer, "out is NULL");
        }
        let text = if config_json.is_null() {
            "{}"
        } else {
            match CStr::from_ptr(config_json).to_str() {
                Ok(s) => s,
                Err(_) => return fail(BfStatus::InvalidArgument, "config is not UTF-8"),
            }
        };
        let config: RunConfigFile = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(err) => return fail(BfStatus::InvalidArgument, format!("config: {err}")),
        };
        if let Err(err) = BoostSpec::new(config.protocol.hidden_boost) {
            return fail(spacetime_status(&err), err.to_string());
        }
        if let Err(err) = config.validate() {
            return fail(BfStatus::InvalidArgument, err.to_string());
        }
        let classifier = match config.calibrate() {
            Ok(c) => c,
            Err(err) => return fail(BfStatus::Ensemble, err.to_string()),
        };
        let lab = match config.lab(classifier) {
            Ok(l) => l,
            Err(err) => return fail(BfStatus::InvalidArgument, err.to_string()),
        };
        *out = Box::into_raw(Box::new(BfLab {
            config,
            classifier,
            lab,
        }));
        BfStatus::Ok
    })
}

/// Calibrated cutoff time `τ_c` of the lab's classifier.
///
/// # Safety
/// `lab` must be a live lab handle.
#[no_mangle]
pub unsafe extern "C" fn bf_lab_tau_c(lab: *const BfLab) -> f64 {
    lab.as_ref().map_or(f64::NAN, |l| l.classifier.tau_c)
}

/// Classifies a histogram with the lab's classifier.
///
/// # Safety
/// Both handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_lab_classify(
    lab: *const BfLab,
    h: *const BfHistogram,
    out: *mut BfClass,
) -> BfStatus {
    guard(|| {
        let (Some(lab), Some(h), false) = (lab.as_ref(), h.as_ref(), out.is_null()) else {
            return fail(BfStatus::NullPointer, "NULL argument");
        };
        match ensemble::classify(&h.hist, &lab.classifier) {
            Ok(c) => {
                *out = match c {
                    ensemble::DistributionClass::Exotic => BfClass::Exotic,
                    ensemble::DistributionClass::HeavyTailed => BfClass::HeavyTailed,
                    ensemble::DistributionClass::Indeterminate => BfClass::Indeterminate,
                };
                BfStatus::Ok
            }
            Err(err @ EnsembleError::TooFewSamples { .. }) => {
                fail(BfStatus::InvalidArgument, err.to_string())
            }
            Err(err) => fail(BfStatus::Ensemble, err.to_string()),
        }
    })
}

/// Runs the foliation detection protocol and writes the recovered normal.
/// `angular_error` (may be NULL) receives the diagnostic angle to the hidden
/// truth. `report_json` (may be NULL) receives the full report; free it with
/// [`bf_string_free`].
///
/// # Safety
/// `lab` must be live; `normal` writable; optional outputs NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn bf_lab_detect_foliation(
    lab: *mut BfLab,
    normal: *mut BfEvent4,
    angular_error: *mut f64,
    report_json: *mut *mut c_char,
) -> BfStatus {
    guard(|| {
        let (Some(lab), false) = (lab.as_mut(), normal.is_null()) else {
            return fail(BfStatus::NullPointer, "lab or normal is NULL");
        };
        let orientations = match lab.config.orientations() {
            Ok(o) => o,
            Err(err) => return fail(protocol_status(&err), err.to_string()),
        };
        let search = lab.config.search_config();
        match detect_foliation_simulated(&mut lab.lab, &orientations, &search) {
            Ok(r) => {
                *normal = r.recovered.as_event().into();
                if !angular_error.is_null() {
                    *angular_error = r.angular_error_vs_truth.unwrap_or(f64::NAN);
                }
                if !report_json.is_null() {
                    *report_json = serde_json::to_string(&r).map_or(ptr::null_mut(), to_c_string);
                }
                BfStatus::Ok
            }
            Err(err) => fail(protocol_status(&err), err.to_string()),
        }
    })
}

/// Calibrates the signaling geometry and sends `bits` (each 0 or 1).
/// `decoded` receives one entry per bit: 0, 1, or -1 for an erasure.
///
/// # Safety
/// `lab` must be live; `bits` and `decoded` must hold `n_bits` entries;
/// `bit_error_rate` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn bf_lab_signal(
    lab: *mut BfLab,
    bits: *const u8,
    n_bits: usize,
    pairs_per_bit: u64,
    decoded: *mut i8,
    bit_error_rate: *mut f64,
) -> BfStatus {
    guard(|| {
        let Some(lab) = lab.as_mut() else {
            return fail(BfStatus::NullPointer, "lab is NULL");
        };
        if bits.is_null() || decoded.is_null() {
            return fail(BfStatus::NullPointer, "bits or decoded is NULL");
        }
        let msg = std::slice::from_raw_parts(bits, n_bits);
        let search = lab.config.search_config();
        let start = match lab.config.orientations() {
            Ok(o) => o[0].clone(),
            Err(err) => return fail(protocol_status(&err), err.to_string()),
        };
        let result = calibrate_signaling(&mut lab.lab, &start, &search).and_then(|cal| {
            transmit_bits(&mut lab.lab, &cal.geometry, msg, pairs_per_bit, search.seed)
        });
        match result {
            Ok(r) => {
                let out = std::slice::from_raw_parts_mut(decoded, n_bits);
                for (o, d) in out.iter_mut().zip(&r.decoded_bits) {
                    *o = d.map_or(-1, |b| b as i8);
                }
                if !bit_error_rate.is_null() {
                    *bit_error_rate = r.bit_error_rate;
                }
                BfStatus::Ok
            }
            Err(err) => fail(protocol_status(&err), err.to_string()),
        }
    })
}

/// # Safety
/// `lab` must be NULL or a handle from [`bf_lab_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_lab_free(lab: *mut BfLab) {
    if !lab.is_null() {
        drop(Box::from_raw(lab));
    }
}

/// Normal of the rest frame of an observer moving with `beta[3]`.
///
/// # Safety
/// `beta` must point to three doubles and `out` to a writable `BfEvent4`.
#[no_mangle]
pub unsafe extern "C" fn bf_normal_from_boost(beta: *const f64, out: *mut BfEvent4) -> BfStatus {
    guard(|| {
        let Some(b) = read3(beta) else {
            return fail(BfStatus::NullPointer, "beta is NULL");
        };
        if out.is_null() {
            return fail(BfStatus::NullPointer, "out is NULL");
        }
        match BoostSpec::new(b) {
            Ok(spec) => {
                *out = FoliationNormal::from_boost(&spec).as_event().into();
                BfStatus::Ok
            }
            Err(err) => fail(spacetime_status(&err), err.to_string()),
        }
    })
}
