use std::ffi::{c_char, CStr};
use std::ptr;

use bohm_foliation_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { bf_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

fn ev(t: f64, x: f64, y: f64, z: f64) -> BfEvent4 {
    BfEvent4 { t, x, y, z }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(bf_version()) }.to_str().unwrap();
    assert!(v.starts_with("bohm-foliation "));
}

#[test]
fn geometry_calls() {
    let a = ev(2.0, 1.0, 0.0, 0.0);
    assert_eq!(bf_minkowski_dot(a, a), 3.0);

    let mut out = BfEvent4::default();
    let beta = [0.6, 0.0, 0.0];
    assert_eq!(
        unsafe { bf_boost(ev(1.0, 0.0, 0.0, 0.0), beta.as_ptr(), &mut out) },
        BfStatus::Ok
    );
    assert!((out.t - 1.25).abs() < 1e-12 && (out.x - 0.75).abs() < 1e-12);

    let fast = [1.1, 0.0, 0.0];
    assert_eq!(
        unsafe { bf_boost(a, fast.as_ptr(), &mut out) },
        BfStatus::BetaOutOfRange
    );
    assert!(last_error().contains("beta"));
    assert_eq!(
        unsafe { bf_boost(a, ptr::null(), &mut out) },
        BfStatus::NullPointer
    );

    let seps = [
        ev(0.0, 1.0, 0.0, 0.0),
        ev(0.0, 0.0, 1.0, 0.0),
        ev(0.0, 0.0, 0.0, 1.0),
    ];
    assert_eq!(
        unsafe { bf_solve_normal(seps.as_ptr(), &mut out) },
        BfStatus::Ok
    );
    assert_eq!(out, ev(1.0, 0.0, 0.0, 0.0));
    let flat = [
        ev(0.0, 1.0, 0.0, 0.0),
        ev(0.0, 2.0, 0.0, 0.0),
        ev(0.0, 0.0, 0.0, 1.0),
    ];
    assert_eq!(
        unsafe { bf_solve_normal(flat.as_ptr(), &mut out) },
        BfStatus::DegenerateTriad
    );

    let mut order = BfOrder::Simultaneous;
    let n = ev(1.0, 0.0, 0.0, 0.0);
    let st = unsafe {
        bf_temporal_order(
            n,
            ev(1.0, 0.0, 0.0, 0.0),
            ev(2.0, 5.0, 0.0, 0.0),
            0.0,
            &mut order,
        )
    };
    assert_eq!(st, BfStatus::Ok);
    assert_eq!(order, BfOrder::AliceFirst);

    let mut nb = BfEvent4::default();
    let b3 = [0.3, 0.0, 0.0];
    assert_eq!(
        unsafe { bf_normal_from_boost(b3.as_ptr(), &mut nb) },
        BfStatus::Ok
    );
    assert!((nb.t - 1.0 / 0.91f64.sqrt()).abs() < 1e-12);
}

#[test]
fn flash_eta_patterns() {
    let mut eta = -1.0;
    assert_eq!(
        unsafe { bf_flash_eta(50, 50, 100, 0, &mut eta) },
        BfStatus::Ok
    );
    assert_eq!(eta, 0.0);
    assert_eq!(
        unsafe { bf_flash_eta(100, 0, 50, 50, &mut eta) },
        BfStatus::Ok
    );
    assert_eq!(eta, 1.0);
    assert_eq!(
        unsafe { bf_flash_eta(0, 0, 1, 1, &mut eta) },
        BfStatus::InvalidArgument
    );
}

#[test]
fn model_and_histogram_lifecycle() {
    let mut m = ptr::null_mut();
    let st = unsafe {
        bf_model_new(
            -1.0,
            5.0,
            BfZMode::HalfOscillator,
            BfConvMode::ExactDnd,
            1.0,
            &mut m,
        )
    };
    assert_eq!(st, BfStatus::InvalidArgument);
    assert!(m.is_null());

    let st = unsafe {
        bf_model_new(
            4.0,
            5.0,
            BfZMode::HalfOscillator,
            BfConvMode::ExactDnd,
            1.0,
            &mut m,
        )
    };
    assert_eq!(st, BfStatus::Ok);
    assert_eq!(
        unsafe { bf_model_set_integrator(m, 1e-3, 15.0) },
        BfStatus::Ok
    );
    assert_eq!(
        unsafe { bf_model_set_integrator(m, -1.0, 15.0) },
        BfStatus::InvalidArgument
    );

    let axis = [1.0, 0.0, 0.0];
    let mut h = ptr::null_mut();
    let st = unsafe {
        bf_arrival_distribution(m, BfOrder::AliceFirst, axis.as_ptr(), 0, 200, 7, 20, &mut h)
    };
    assert_eq!(st, BfStatus::Ok);
    unsafe {
        assert_eq!(bf_histogram_n_total(h), 200);
        assert_eq!(bf_histogram_n_no_arrival(h), 0);
        let tau_max = bf_histogram_tau_max(h);
        assert!(tau_max > 0.0 && tau_max < 15.0);
        assert_eq!(bf_histogram_tail_mass(h, tau_max), 0.0);

        let mut len = 4usize;
        let mut small = [0u64; 4];
        assert_eq!(
            bf_histogram_counts(h, small.as_mut_ptr(), &mut len),
            BfStatus::BufferTooSmall
        );
        assert_eq!(len, 20);
        let mut counts = vec![0u64; len];
        assert_eq!(
            bf_histogram_counts(h, counts.as_mut_ptr(), &mut len),
            BfStatus::Ok
        );
        assert_eq!(counts.iter().sum::<u64>(), 200);

        let csv = bf_histogram_csv(h);
        let text = CStr::from_ptr(csv).to_str().unwrap().to_owned();
        bf_string_free(csv);
        assert!(text.starts_with("tau_lo,tau_hi,count\n"));
        assert!(text.ends_with("no_arrival,,0\n"));

        bf_histogram_free(h);
        bf_model_free(m);
        bf_histogram_free(ptr::null_mut());
        bf_model_free(ptr::null_mut());
    }
}

#[test]
fn lab_rejects_bad_config() {
    let mut lab = ptr::null_mut();
    let cfg = c"{\"protocol\": {\"hidden_boost\": [1.1, 0, 0]}}";
    assert_eq!(
        unsafe { bf_lab_new(cfg.as_ptr(), &mut lab) },
        BfStatus::BetaOutOfRange
    );
    let cfg = c"{\"modle\": {}}";
    assert_eq!(
        unsafe { bf_lab_new(cfg.as_ptr(), &mut lab) },
        BfStatus::InvalidArgument
    );
    assert!(last_error().contains("modle"));
    assert!(lab.is_null());
}

#[test]
fn lab_detects_and_signals() {
    let cfg = c"{\"classifier\": {\"calibration_n\": 1000}, \"protocol\": {\"hidden_boost\": [0.2, 0, 0], \"d_tol\": 0.05}}";
    let mut lab = ptr::null_mut();
    assert_eq!(unsafe { bf_lab_new(cfg.as_ptr(), &mut lab) }, BfStatus::Ok);
    let tau_c = unsafe { bf_lab_tau_c(lab) };
    assert!(tau_c > 5.0 && tau_c < 15.0);

    let mut n = BfEvent4::default();
    let mut err = f64::NAN;
    let mut json = ptr::null_mut();
    assert_eq!(
        unsafe { bf_lab_detect_foliation(lab, &mut n, &mut err, &mut json) },
        BfStatus::Ok
    );
    let gamma = 1.0 / (1.0f64 - 0.04).sqrt();
    assert!(
        (n.t - gamma).abs() < 0.02 && (n.x - 0.2 * gamma).abs() < 0.02,
        "{n:?}"
    );
    assert!(err < 0.02);
    let report = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { bf_string_free(json) };
    assert!(report.contains("\"recovered\""));

    let bits = [1u8, 0];
    let mut decoded = [9i8; 2];
    let mut ber = -1.0;
    let st = unsafe { bf_lab_signal(lab, bits.as_ptr(), 2, 1000, decoded.as_mut_ptr(), &mut ber) };
    assert_eq!(st, BfStatus::Ok);
    assert_eq!(decoded, [1, 0]);
    assert_eq!(ber, 0.0);
    let bad = [2u8];
    let st = unsafe { bf_lab_signal(lab, bad.as_ptr(), 1, 1000, decoded.as_mut_ptr(), &mut ber) };
    assert_eq!(st, BfStatus::InvalidArgument);
    unsafe { bf_lab_free(lab) };
}
