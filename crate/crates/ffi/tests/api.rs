use std::ffi::{CStr, CString};
use std::ptr;

use aerman_ffi::*;

fn model() -> *mut AmModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { am_model_two_link(&mut m) }, AmStatus::Ok);
    m
}

fn dims(m: *const AmModel) -> (usize, usize, usize) {
    let (mut s, mut i, mut f) = (0, 0, 0);
    assert_eq!(unsafe { am_model_dims(m, &mut s, &mut i, &mut f) }, AmStatus::Ok);
    (s, i, f)
}

fn hover_state(n: usize) -> Vec<f64> {
    // p, l, (phi, theta, psi), eta, eta_dot, T, T_dot for k = 2.
    let mut q = vec![0.0; n];
    q[8] = 0.3;
    q[9] = 0.4;
    q[10] = -0.6;
    q[13] = 4.2 * 9.81;
    q
}

fn last_error() -> String {
    let p = am_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn dimensions_for_two_links() {
    let m = model();
    assert_eq!(unsafe { am_model_joint_count(m) }, 2);
    assert_eq!(dims(m), (15, 6, 21));
    unsafe { am_model_free(m) };
    assert_eq!(unsafe { am_model_joint_count(ptr::null()) }, 0);
}

#[test]
fn flat_outputs_invert() {
    let m = model();
    let (n, ni, nf) = dims(m);
    let mut q = hover_state(n);
    q[0] = 0.1;
    q[4] = 0.02;
    q[6] = 0.05;
    q[11] = 0.2;
    let u = [0.01, -0.02, 0.5, 0.001, 0.0, 0.002];
    assert_eq!(u.len(), ni);
    let mut flat = vec![0.0; nf];
    let mut back = vec![0.0; n];
    unsafe {
        assert_eq!(am_flat_outputs(m, q.as_ptr(), n, u.as_ptr(), ni, flat.as_mut_ptr(), nf), AmStatus::Ok);
        assert_eq!(am_state_from_flat(m, flat.as_ptr(), nf, back.as_mut_ptr(), n), AmStatus::Ok);
        am_model_free(m);
    }
    for (a, b) in q.iter().zip(&back) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn dynamics_match_the_library() {
    let m = model();
    let (n, ni, _) = dims(m);
    let mut q = hover_state(n);
    q[1] = 0.3;
    q[12] = -0.4;
    let u = vec![0.1, -0.3, 2.0, 0.01, 0.02, -0.01];
    let mut dq = vec![0.0; n];
    unsafe {
        assert_eq!(am_extended_dynamics(m, q.as_ptr(), n, u.as_ptr(), ni, dq.as_mut_ptr(), n), AmStatus::Ok);
        am_model_free(m);
    }
    let expected = aerman::reduced::extended_dynamics(
        &aerman::AMParams::planar_two_link(),
        &aerman::ExtendedState::from_slice(2, &q).unwrap(),
        &aerman::ExtendedInput::from_slice(2, &u).unwrap(),
    )
    .unwrap();
    assert_eq!(dq.as_slice(), expected.as_slice());
}

#[test]
fn controller_holds_a_reached_reference() {
    let m = model();
    let (n, ni, nf) = dims(m);
    let mut ctrl = ptr::null_mut();
    let mut flat = vec![0.0; nf];
    let mut u = vec![0.0; ni];
    let mut info = AmStepInfo::default();
    let q = hover_state(n);
    unsafe {
        assert_eq!(am_controller_new(m, ptr::null(), 0, 0.0, &mut ctrl), AmStatus::Ok);
        assert!(am_controller_lambda(ctrl) > 0.0);
        assert_eq!(
            am_flat_outputs(m, q.as_ptr(), n, vec![0.0; ni].as_ptr(), ni, flat.as_mut_ptr(), nf),
            AmStatus::Ok
        );
        // Drop the dynamic terms so the reference is a constant set point.
        flat[3..12].iter_mut().for_each(|x| *x = 0.0);
        flat[13..15].iter_mut().for_each(|x| *x = 0.0);
        flat[17..].iter_mut().for_each(|x| *x = 0.0);
        assert_eq!(
            am_controller_step(ctrl, q.as_ptr(), n, flat.as_ptr(), nf, u.as_mut_ptr(), ni, &mut info),
            AmStatus::Ok
        );
        am_controller_free(ctrl);
        am_model_free(m);
    }
    assert!(info.value < 1e-12);
    assert!(info.value_rate <= 1e-9);
    assert!(u.iter().all(|x| x.is_finite()));
}

#[test]
fn weighted_controller_uses_requested_rate() {
    let m = model();
    let (n, _, _) = dims(m);
    let q = vec![100.0; n];
    let mut ctrl = ptr::null_mut();
    unsafe {
        assert_eq!(am_controller_new(m, q.as_ptr(), n, 1.0, &mut ctrl), AmStatus::Ok);
        assert_eq!(am_controller_lambda(ctrl), 1.0);
        am_controller_free(ctrl);
        assert_eq!(am_controller_new(m, q.as_ptr(), n - 1, 1.0, &mut ctrl), AmStatus::InvalidArgument);
        am_model_free(m);
    }
    assert!(last_error().contains("q_diag"));
}

#[test]
fn errors_are_reported() {
    let m = model();
    let (n, ni, _) = dims(m);
    let mut out = vec![0.0; n];
    let q = hover_state(n);
    let u = vec![0.0; ni];
    unsafe {
        assert_eq!(
            am_extended_dynamics(ptr::null(), q.as_ptr(), n, u.as_ptr(), ni, out.as_mut_ptr(), n),
            AmStatus::NullPointer
        );
        assert_eq!(
            am_extended_dynamics(m, q.as_ptr(), n - 1, u.as_ptr(), ni, out.as_mut_ptr(), n),
            AmStatus::InvalidArgument
        );
        assert!(last_error().contains("length 14"));

        let mut tipped = q.clone();
        tipped[7] = std::f64::consts::FRAC_PI_2;
        assert_eq!(
            am_extended_dynamics(m, tipped.as_ptr(), n, u.as_ptr(), ni, out.as_mut_ptr(), n),
            AmStatus::Singularity
        );

        let missing = CString::new("/nonexistent/params.toml").unwrap();
        let mut other = ptr::null_mut();
        assert_ne!(am_model_load(missing.as_ptr(), &mut other), AmStatus::Ok);
        assert!(other.is_null());
        assert!(last_error().contains("/nonexistent/params.toml"));
        am_model_free(m);
        am_model_free(ptr::null_mut());
    }
}

#[test]
fn short_simulation_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let bundled = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/scenarios/two_link_delivery.toml");
    let text = std::fs::read_to_string(bundled).unwrap().replace("duration = 10.0", "duration = 0.2")
        .replace("time = 7.5", "time = 0.1")
        .replace("envelope_horizon = 5.0", "envelope_horizon = 0.2");
    assert!(text.contains("duration = 0.2"));
    let config = dir.path().join("short.toml");
    std::fs::write(&config, text).unwrap();
    let csv = dir.path().join("out.csv");
    let (c, o) = (CString::new(config.to_str().unwrap()).unwrap(), CString::new(csv.to_str().unwrap()).unwrap());
    let mut s = AmSummary::default();
    let status = unsafe { am_simulate(c.as_ptr(), o.as_ptr(), &mut s) };
    assert_eq!(status, AmStatus::Ok, "{}", if status == AmStatus::Ok { String::new() } else { last_error() });
    assert_eq!(s.completed, 1);
    assert_eq!(s.control_steps, 200);
    assert_eq!(s.events_applied, 1);
    assert!(std::fs::read_to_string(csv).unwrap().starts_with("t,p_x"));
}
