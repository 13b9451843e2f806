use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use tdstab::cases;
use tdstab_ffi::*;

fn last_error() -> String {
    let p = td_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn network(model: &tdstab::network::NetworkModel) -> *mut TdNetwork {
    let json = CString::new(model.to_json_string()).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { td_network_from_json(json.as_ptr(), &mut net) }, TdStatus::Ok);
    net
}

#[test]
fn chain_nose_through_the_c_interface() {
    let net = network(&cases::chain_case(1));
    let mut lambda = 0.0;
    assert_eq!(unsafe { td_lambda_max(net, &mut lambda) }, TdStatus::Ok);
    assert!((lambda - 5.0).abs() < 1e-3);
    let mut delta = 0.0;
    let iv = CString::new("var:SUB:50").unwrap();
    assert_eq!(unsafe { td_whatif_delta_pct(net, iv.as_ptr(), &mut delta) }, TdStatus::Ok);
    assert!(delta > 0.0);
    unsafe { td_network_free(net) };
}

#[test]
fn simulate_assess_and_export() {
    let net = network(&cases::two_substation(2.8, 1.0));
    let mut frames = ptr::null_mut();
    assert_eq!(
        unsafe { td_simulate(net, 1.0, 1.5, 0.025, 0.01, 0.0, 3, &mut frames) },
        TdStatus::Ok,
        "{}",
        last_error()
    );
    // two substations, 21 points
    assert_eq!(unsafe { td_frames_count(frames) }, 42);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("f.csv").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { td_frames_write(frames, path.as_ptr()) }, TdStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { td_frames_read(path.as_ptr(), &mut back) }, TdStatus::Ok);
    assert_eq!(unsafe { td_frames_count(back) }, 42);

    let mut report = ptr::null_mut();
    assert_eq!(unsafe { td_assess(back, 20, &mut report) }, TdStatus::Ok, "{}", last_error());
    let count = unsafe { td_report_node_count(report) };
    assert_eq!(count, 8);
    let mut critical = None;
    for i in 0..count {
        let mut n = TdNodeIndex {
            vsi_3ph: 0.0,
            tddi: 0.0,
            limiting: TdLimiting::Boundary,
            critical: false,
        };
        assert_eq!(unsafe { td_report_node(report, i, &mut n) }, TdStatus::Ok);
        if n.critical {
            let mut len = 0;
            assert_eq!(unsafe { td_report_node_id(report, i, ptr::null_mut(), 0, &mut len) }, TdStatus::Ok);
            let mut buf = vec![0 as std::ffi::c_char; len + 1];
            assert_eq!(
                unsafe { td_report_node_id(report, i, buf.as_mut_ptr(), buf.len(), ptr::null_mut()) },
                TdStatus::Ok
            );
            critical = Some((unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string(), n));
        }
    }
    let (id, n) = critical.expect("one critical node");
    assert!(id.starts_with("A_"), "{id}");
    assert_eq!(n.limiting, TdLimiting::DistributionLimited);

    let sub = CString::new("SA").unwrap();
    let mut vsi_t = 0.0;
    assert_eq!(unsafe { td_report_vsi_t(report, sub.as_ptr(), &mut vsi_t) }, TdStatus::Ok);
    assert!(vsi_t > 0.0 && vsi_t < n.vsi_3ph);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { td_report_to_json(report, &mut json) }, TdStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    assert_eq!(v["critical_node"], id.as_str());
    unsafe {
        td_string_free(json);
        td_report_free(report);
        td_frames_free(back);
        td_frames_free(frames);
        td_network_free(net);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut net = ptr::null_mut();
    let bad = CString::new("{\"source\": 3}").unwrap();
    assert_eq!(unsafe { td_network_from_json(bad.as_ptr(), &mut net) }, TdStatus::InvalidInput);
    assert!(net.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { td_network_load(ptr::null(), &mut net) }, TdStatus::NullArgument);
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/network.json").unwrap();
    assert_eq!(unsafe { td_network_load(missing.as_ptr(), &mut net) }, TdStatus::InvalidInput);

    let net = network(&cases::two_substation(1.0, 1.0));
    let iv = CString::new("var:NOPE:5").unwrap();
    let mut delta = 0.0;
    assert_eq!(unsafe { td_whatif_delta_pct(net, iv.as_ptr(), &mut delta) }, TdStatus::InvalidInput);
    assert!(last_error().contains("NOPE"));

    // a single point is too short a window
    let mut frames = ptr::null_mut();
    assert_eq!(unsafe { td_simulate(net, 1.0, 1.0, 0.1, 0.0, 0.0, 0, &mut frames) }, TdStatus::Ok);
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { td_assess(frames, 20, &mut report) }, TdStatus::Estimation);
    assert!(report.is_null());

    let mut past = ptr::null_mut();
    assert_eq!(unsafe { td_simulate(net, 1.0, 8.0, 0.5, 0.0, 0.0, 0, &mut past) }, TdStatus::Solver);
    assert!(past.is_null());
    unsafe {
        td_frames_free(frames);
        td_network_free(net);
    }
}

#[test]
fn errors_are_per_thread() {
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { td_network_load(ptr::null(), &mut net) }, TdStatus::NullArgument);
    let other = std::thread::spawn(|| td_last_error().is_null()).join().unwrap();
    assert!(other);
    assert!(!td_last_error().is_null());
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libtdstab_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let net = dir.path().join("net.json");
    cases::chain_case(2).save(&net).unwrap();
    let out = Command::new(&exe).arg(&net).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("LD "), "{text}");
    assert!(text.contains(" *\n"));
    assert!(text.contains("bad json: 2 message"));
}
