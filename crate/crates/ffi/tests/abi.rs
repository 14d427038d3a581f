use std::ffi::{c_char, CString};
use std::ptr;
use tsdiff_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { tsd_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|c| *c as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn schedule() -> *mut TsdSchedule {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { tsd_schedule_new_linear(1000, 1e-4, 0.02, &mut s) }, TsdStatus::Ok);
    s
}

fn gaussian(s: *const TsdSchedule, d: usize) -> *mut TsdModel {
    let mean = vec![0.5; d];
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { tsd_model_new_gaussian(s, mean.as_ptr(), d, 0.25, &mut m) }, TsdStatus::Ok);
    m
}

fn params(window: usize) -> TsdSampleParams {
    TsdSampleParams {
        method: TsdMethod::Ddim,
        grid: TsdGrid::Uniform,
        steps: 10,
        n: 64,
        eta: 0.0,
        seed: 3,
        window,
        cutoff: 300,
    }
}

#[test]
fn schedule_round_trip() {
    let s = schedule();
    let (mut len, mut ab) = (0usize, 0.0);
    unsafe {
        assert_eq!(tsd_schedule_len(s, &mut len), TsdStatus::Ok);
        assert_eq!(tsd_schedule_alpha_bar(s, 0, &mut ab), TsdStatus::Ok);
        assert_eq!(tsd_schedule_alpha_bar(s, 1000, &mut ab), TsdStatus::Invariant);
        tsd_schedule_free(s);
    }
    assert_eq!(len, 1000);
    assert!(!last_error().is_empty());
}

#[test]
fn invalid_schedule_reports_message() {
    let mut s = ptr::null_mut();
    let st = unsafe { tsd_schedule_new_linear(1000, 0.5, 0.1, &mut s) };
    assert_ne!(st, TsdStatus::Ok);
    assert!(s.is_null());
    assert!(last_error().contains("schedule"), "{}", last_error());
}

#[test]
fn sampling_is_deterministic_and_shift_free_matches_plain() {
    let s = schedule();
    let m = gaussian(s, 4);
    let mut a = vec![0.0; 256];
    let mut b = vec![0.0; 256];
    let mut c = vec![0.0; 256];
    unsafe {
        assert_eq!(tsd_sample(m, s, &params(0), a.as_mut_ptr(), a.len()), TsdStatus::Ok);
        assert_eq!(tsd_sample(m, s, &params(0), b.as_mut_ptr(), b.len()), TsdStatus::Ok);
        assert_eq!(tsd_sample(m, s, &params(40), c.as_mut_ptr(), c.len()), TsdStatus::Ok);
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    assert!((mean - 0.5).abs() < 0.1, "{mean}");
    assert!(c.iter().all(|v| v.is_finite()));
    unsafe {
        tsd_model_free(m);
        tsd_schedule_free(s);
    }
}

#[test]
fn short_buffer_is_rejected() {
    let s = schedule();
    let m = gaussian(s, 4);
    let mut out = vec![0.0; 10];
    let st = unsafe { tsd_sample(m, s, &params(0), out.as_mut_ptr(), out.len()) };
    assert_eq!(st, TsdStatus::BufferTooSmall);
    unsafe {
        tsd_model_free(m);
        tsd_schedule_free(s);
    }
}

#[test]
fn null_handles() {
    let mut out = 0.0;
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(tsd_schedule_alpha_bar(ptr::null(), 0, &mut out), TsdStatus::NullPointer);
        assert_eq!(tsd_model_new_gaussian(ptr::null(), ptr::null(), 2, 1.0, &mut m), TsdStatus::NullPointer);
        assert_eq!(tsd_intra_sample_variance(ptr::null(), 3, &mut out), TsdStatus::NullPointer);
        tsd_model_free(ptr::null_mut());
        tsd_schedule_free(ptr::null_mut());
    }
}

#[test]
fn scalar_helpers() {
    let s = schedule();
    let x = [1.0, 2.0, 3.0, 4.0];
    let mut v = 0.0;
    let mut t = 0usize;
    let mut sigma = 0.0;
    unsafe {
        assert_eq!(tsd_intra_sample_variance(x.as_ptr(), 4, &mut v), TsdStatus::Ok);
        assert_eq!(tsd_intra_sample_variance(x.as_ptr(), 1, &mut v), TsdStatus::Invariant);
        let mut ab = 0.0;
        tsd_schedule_alpha_bar(s, 500, &mut ab);
        assert_eq!(tsd_select_shifted_timestep(s, 1.0 - ab, 520, 40, &mut t), TsdStatus::Ok);
        assert_eq!(tsd_optimal_shift_variance(1.0, 4.0, 3, 700, &mut sigma), TsdStatus::Ok);
        assert_eq!(tsd_optimal_shift_variance(0.5, 4.0, 1, 700, &mut sigma), TsdStatus::Invariant);
        tsd_schedule_free(s);
    }
    assert!((v - 5.0 / 3.0).abs() < 1e-12);
    assert_eq!(t, 500);
}

#[test]
fn optimal_variance_value() {
    let mut sigma = 0.0;
    assert_eq!(unsafe { tsd_optimal_shift_variance(2.0, 6.0, 3, 700, &mut sigma) }, TsdStatus::Ok);
    assert!((sigma - 1.0).abs() < 1e-15);
    let st = unsafe { tsd_optimal_shift_variance(0.5, 6.0, 3, 700, &mut sigma) };
    assert_eq!(st, TsdStatus::Invariant);
    assert!(last_error().contains("regime"), "{}", last_error());
}

#[test]
fn missing_checkpoint_is_an_io_or_config_error() {
    let s = schedule();
    let path = CString::new("/nonexistent/checkpoint.json").unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { tsd_model_load(s, path.as_ptr(), &mut m) };
    assert!(matches!(st, TsdStatus::Io | TsdStatus::InvalidArgument), "{st:?}");
    assert!(m.is_null());
    unsafe { tsd_schedule_free(s) };
}

#[test]
fn perturbed_model_still_samples() {
    let s = schedule();
    let m = gaussian(s, 4);
    let mut out = vec![0.0; 256];
    unsafe {
        assert_eq!(tsd_model_perturb(m, s, 0.05, 9), TsdStatus::Ok);
        assert_eq!(tsd_sample(m, s, &params(40), out.as_mut_ptr(), out.len()), TsdStatus::Ok);
        tsd_model_free(m);
        tsd_schedule_free(s);
    }
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/tsdiff.h");
    let dir = tempfile_dir();
    let src = dir.join("probe.c");
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ TsdSampleParams p; (void)p; return TSD_STATUS_OK; }}\n")).unwrap();
    match std::process::Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(st) => assert!(st.success()),
        Err(_) => eprintln!("no C compiler; skipped"),
    }
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("tsdiff-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
