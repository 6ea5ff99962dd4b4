use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use rwdfusion_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rwd_last_error()) }.to_string_lossy().into_owned()
}

fn small_config() -> *mut RwdConfig {
    let cfg = rwd_config_default();
    for (k, v) in [("reps", "2"), ("bootstrap_b", "50"), ("n_r", "200"), ("n_o", "400")] {
        let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
        assert_eq!(unsafe { rwd_config_set(cfg, k.as_ptr(), v.as_ptr()) }, RwdStatus::Ok);
    }
    cfg
}

#[test]
fn config_render_parse_round_trip() {
    let cfg = small_config();
    unsafe {
        let text = rwd_config_render(cfg);
        assert!(!text.is_null());
        let mut back = ptr::null_mut();
        assert_eq!(rwd_config_parse(text, &mut back), RwdStatus::Ok);
        let again = rwd_config_render(back);
        assert_eq!(CStr::from_ptr(text), CStr::from_ptr(again));
        assert!(CStr::from_ptr(text).to_str().unwrap().contains("n_o = 400"));
        rwd_string_free(text);
        rwd_string_free(again);
        rwd_config_free(back);
        rwd_config_free(cfg);
    }
}

#[test]
fn bad_key_reports_config_error() {
    let cfg = rwd_config_default();
    let (k, v) = (CString::new("nonsense").unwrap(), CString::new("1").unwrap());
    assert_eq!(unsafe { rwd_config_set(cfg, k.as_ptr(), v.as_ptr()) }, RwdStatus::Config);
    assert!(last_error().contains("nonsense"));
    // a rejected value leaves the handle unchanged
    let (k, v) = (CString::new("psi").unwrap(), CString::new("1, 0").unwrap());
    assert_eq!(unsafe { rwd_config_set(cfg, k.as_ptr(), v.as_ptr()) }, RwdStatus::Config);
    let text = unsafe { rwd_config_render(cfg) };
    assert!(unsafe { CStr::from_ptr(text) }.to_str().unwrap().contains("psi = 0, 0.1"));
    unsafe {
        rwd_string_free(text);
        rwd_config_free(cfg);
    }
}

#[test]
fn null_handles_are_rejected() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(rwd_config_parse(ptr::null(), &mut out), RwdStatus::NullPointer);
        assert!(out.is_null());
        assert_eq!(rwd_dataset_len(ptr::null()), 0);
        assert!(rwd_estimate_tau(ptr::null()).is_nan());
        assert!(rwd_config_render(ptr::null()).is_null());
        rwd_config_free(ptr::null_mut());
        rwd_dataset_free(ptr::null_mut());
        rwd_estimate_free(ptr::null_mut());
        rwd_string_free(ptr::null_mut());
    }
}

#[test]
fn simulate_columns_and_estimate() {
    let cfg = small_config();
    unsafe {
        let (mut rct, mut rwd) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(rwd_simulate(cfg, 0, &mut rct, &mut rwd), RwdStatus::Ok);
        assert_eq!(rwd_dataset_len(rct), 200);
        assert_eq!(rwd_dataset_len(rwd), 400);

        let name = CString::new("a").unwrap();
        let mut a = vec![f64::NAN; 200];
        assert_eq!(rwd_dataset_column(rct, name.as_ptr(), a.as_mut_ptr(), a.len()), RwdStatus::Ok);
        assert!(a.iter().all(|v| *v == 0.0 || *v == 1.0));
        let mut short = vec![0.0; 10];
        assert_eq!(rwd_dataset_column(rct, name.as_ptr(), short.as_mut_ptr(), short.len()), RwdStatus::InvalidArgument);
        let bad = CString::new("zz").unwrap();
        assert_eq!(rwd_dataset_column(rct, bad.as_ptr(), a.as_mut_ptr(), a.len()), RwdStatus::InvalidArgument);

        // a fused estimate with its learning weight
        let m = CString::new("mse_minimizing").unwrap();
        let mut est = ptr::null_mut();
        assert_eq!(rwd_estimate(cfg, m.as_ptr(), rct, rwd, 11, &mut est), RwdStatus::Ok);
        let (mut lo, mut hi) = (0.0, 0.0);
        assert_eq!(rwd_estimate_ci(est, &mut lo, &mut hi), RwdStatus::Ok);
        let tau = rwd_estimate_tau(est);
        assert!(tau.is_finite() && lo < hi);
        assert!(rwd_estimate_variance(est) > 0.0);
        let w = rwd_estimate_weight(est);
        assert!((0.0..=1.0).contains(&w));
        rwd_estimate_free(est);

        // same seed, same answer
        let mut est2 = ptr::null_mut();
        assert_eq!(rwd_estimate(cfg, m.as_ptr(), rct, rwd, 11, &mut est2), RwdStatus::Ok);
        assert_eq!(rwd_estimate_tau(est2), tau);
        rwd_estimate_free(est2);

        let unknown = CString::new("magic").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(rwd_estimate(cfg, unknown.as_ptr(), rct, rwd, 1, &mut none), RwdStatus::InvalidArgument);
        assert!(none.is_null());
        assert!(last_error().contains("rct_only"), "registry listed: {}", last_error());

        rwd_dataset_free(rct);
        rwd_dataset_free(rwd);
        rwd_config_free(cfg);
    }
}

#[test]
fn grid_writes_metrics() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        for (k, v) in [("methods", "rct_only, mse_minimizing"), ("psi", "0, 0.5")] {
            let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
            assert_eq!(rwd_config_set(cfg, k.as_ptr(), v.as_ptr()), RwdStatus::Ok);
        }
        let out = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(rwd_run_grid(cfg, out.as_ptr()), RwdStatus::Ok, "{}", last_error());
        rwd_config_free(cfg);
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn header_compiles_as_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header.join("rwdfusion.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"rwdfusion.h\"\nint main(void) {\n  RwdConfig *c = rwd_config_default();\n  RwdStatus s = rwd_config_set(c, \"reps\", \"3\");\n  rwd_config_free(c);\n  return s == RWD_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(&header).arg(&src).status() else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(status.success());
}
