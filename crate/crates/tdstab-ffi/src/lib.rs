//! C interface. Objects are opaque handles created by `td_*_load`/`td_*_new`
//! style calls and released with the matching `td_*_free`. Every fallible
//! call returns a [`TdStatus`]; on failure the message is available from
//! [`td_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tdstab::cli::{lambda_grid, CliError, EXIT_ESTIMATION, EXIT_INPUT, EXIT_SOLVER};
use tdstab::estimator::EstimatorConfig;
use tdstab::indices::{Limiting, StabilityReport, BOUNDARY_BAND};
use tdstab::measurement::{add_noise, ramp_points, read_frames, sample_points, write_frames, MeasurementFrame};
use tdstab::monitor::assess_latest;
use tdstab::network::{load_network, NetworkModel};
use tdstab::powerflow::{find_lambda_max, run_whatif, Intervention, NoseOptions, SolverOptions};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TdStatus {
    Ok = 0,
    NullArgument = 1,
    /// Unreadable or invalid input (file, JSON, CSV, unknown bus, bad number).
    InvalidInput = 2,
    /// No power-flow solution.
    Solver = 3,
    Estimation = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TdLimiting {
    TransmissionLimited = 0,
    DistributionLimited = 1,
    Boundary = 2,
}

/// Indices of one monitored node.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TdNodeIndex {
    pub vsi_3ph: f64,
    pub tddi: f64,
    pub limiting: TdLimiting,
    pub critical: bool,
}

pub struct TdNetwork(NetworkModel);

pub struct TdFrames(Vec<MeasurementFrame>);

pub struct TdReport(StabilityReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(TdStatus, String);

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e.code {
            EXIT_INPUT => TdStatus::InvalidInput,
            EXIT_SOLVER => TdStatus::Solver,
            EXIT_ESTIMATION => TdStatus::Estimation,
            _ => TdStatus::Internal,
        };
        Failure(status, e.message)
    }
}

fn fail<E: Into<CliError>>(e: E) -> Failure {
    e.into().into()
}

fn null(name: &str) -> Failure {
    Failure(TdStatus::NullArgument, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            TdStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TdStatus::InvalidInput, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn put<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn td_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_network_load(path: *const c_char, out: *mut *mut TdNetwork) -> TdStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let model = load_network(path).map_err(fail)?;
        put(out, Box::into_raw(Box::new(TdNetwork(model))), "out")
    })
}

/// # Safety
/// `json` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_network_from_json(json: *const c_char, out: *mut *mut TdNetwork) -> TdStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let model = NetworkModel::from_json_str(text).map_err(fail)?;
        put(out, Box::into_raw(Box::new(TdNetwork(model))), "out")
    })
}

/// # Safety
/// `net` must come from `td_network_load`/`td_network_from_json` (or be NULL).
#[no_mangle]
pub unsafe extern "C" fn td_network_free(net: *mut TdNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Largest uniform load scaling with a power-flow solution.
///
/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_lambda_max(net: *const TdNetwork, out: *mut f64) -> TdStatus {
    guard(|| {
        let net = handle(net, "net")?;
        let nose = find_lambda_max(&net.0).map_err(fail)?;
        put(out, nose.lambda_max, "out")
    })
}

/// Change of λ_max in percent for one intervention, written as in the
/// command line (`var:BUS:MVAR`, `line:FROM:TO:dup`, ...).
///
/// # Safety
/// `net` must be a live handle, `intervention` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_whatif_delta_pct(
    net: *const TdNetwork,
    intervention: *const c_char,
    out: *mut f64,
) -> TdStatus {
    guard(|| {
        let net = handle(net, "net")?;
        let text = str_arg(intervention, "intervention")?;
        let iv: Intervention = text
            .parse()
            .map_err(|e| Failure(TdStatus::InvalidInput, format!("{text}: {e}")))?;
        let table = run_whatif(&net.0, &[iv], &NoseOptions::default()).map_err(fail)?;
        put(out, table.rows[0].delta_pct, "out")
    })
}

/// Frames at every loaded node for λ from `lambda_start` to `lambda_stop`.
/// `excitation` is the relative random per-phase load variation of each
/// point, `noise_sigma` the relative measurement noise.
///
/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_simulate(
    net: *const TdNetwork,
    lambda_start: f64,
    lambda_stop: f64,
    lambda_step: f64,
    excitation: f64,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut TdFrames,
) -> TdStatus {
    guard(|| {
        let net = handle(net, "net")?;
        if !(lambda_step > 0.0 && (0.0..1.0).contains(&excitation)) {
            return Err(Failure(
                TdStatus::InvalidInput,
                "lambda_step must be positive and excitation in [0, 1)".into(),
            ));
        }
        let points = ramp_points(&lambda_grid(lambda_start, lambda_stop, lambda_step), excitation, seed);
        let frames =
            sample_points(&net.0, &points, &net.0.load_nodes(), &SolverOptions::default()).map_err(fail)?;
        let frames = add_noise(&frames, noise_sigma, seed).map_err(fail)?;
        put(out, Box::into_raw(Box::new(TdFrames(frames))), "out")
    })
}

/// # Safety
/// `path` must be nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_frames_read(path: *const c_char, out: *mut *mut TdFrames) -> TdStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let frames = read_frames(path).map_err(fail)?;
        put(out, Box::into_raw(Box::new(TdFrames(frames))), "out")
    })
}

/// # Safety
/// `frames` must be a live handle and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn td_frames_write(frames: *const TdFrames, path: *const c_char) -> TdStatus {
    guard(|| {
        let frames = handle(frames, "frames")?;
        let path = str_arg(path, "path")?;
        write_frames(&frames.0, path).map_err(fail)
    })
}

/// Number of frames (one per substation and time step); 0 for NULL.
///
/// # Safety
/// `frames` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn td_frames_count(frames: *const TdFrames) -> usize {
    frames.as_ref().map_or(0, |f| f.0.len())
}

/// # Safety
/// `frames` must come from this library (or be NULL).
#[no_mangle]
pub unsafe extern "C" fn td_frames_free(frames: *mut TdFrames) {
    if !frames.is_null() {
        drop(Box::from_raw(frames));
    }
}

/// Estimates Thevenin equivalents over the last `window` frames of each
/// substation and reports the indices at the latest frame.
///
/// # Safety
/// `frames` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_assess(frames: *const TdFrames, window: usize, out: *mut *mut TdReport) -> TdStatus {
    guard(|| {
        let frames = handle(frames, "frames")?;
        let a = assess_latest(&frames.0, window, &EstimatorConfig::default(), BOUNDARY_BAND).map_err(fail)?;
        put(out, Box::into_raw(Box::new(TdReport(a.report))), "out")
    })
}

/// # Safety
/// `report` must come from `td_assess` (or be NULL).
#[no_mangle]
pub unsafe extern "C" fn td_report_free(report: *mut TdReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn td_report_node_count(report: *const TdReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.nodes.len())
}

/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_report_node(report: *const TdReport, index: usize, out: *mut TdNodeIndex) -> TdStatus {
    guard(|| {
        let r = &handle(report, "report")?.0;
        let n = r
            .nodes
            .get(index)
            .ok_or_else(|| Failure(TdStatus::InvalidInput, format!("node index {index} out of range")))?;
        let limiting = match n.class {
            Limiting::TLimited => TdLimiting::TransmissionLimited,
            Limiting::DLimited => TdLimiting::DistributionLimited,
            Limiting::Boundary => TdLimiting::Boundary,
        };
        let value = TdNodeIndex {
            vsi_3ph: n.vsi_3ph,
            tddi: n.tddi,
            limiting,
            critical: n.node == r.critical_node,
        };
        put(out, value, "out")
    })
}

/// Copies the node id (nul-terminated, truncated to `capacity`) into `buf`
/// and writes the full length without the terminator to `len`. Either may
/// be NULL to query the length only.
///
/// # Safety
/// `report` must be a live handle; `buf` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn td_report_node_id(
    report: *const TdReport,
    index: usize,
    buf: *mut c_char,
    capacity: usize,
    len: *mut usize,
) -> TdStatus {
    guard(|| {
        let r = &handle(report, "report")?.0;
        let id = &r
            .nodes
            .get(index)
            .ok_or_else(|| Failure(TdStatus::InvalidInput, format!("node index {index} out of range")))?
            .node;
        if !len.is_null() {
            len.write(id.len());
        }
        if !buf.is_null() && capacity > 0 {
            let n = id.len().min(capacity - 1);
            ptr::copy_nonoverlapping(id.as_ptr().cast::<c_char>(), buf, n);
            buf.add(n).write(0);
        }
        Ok(())
    })
}

/// Transmission-side index of a substation.
///
/// # Safety
/// `report` must be a live handle, `substation` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_report_vsi_t(
    report: *const TdReport,
    substation: *const c_char,
    out: *mut f64,
) -> TdStatus {
    guard(|| {
        let r = &handle(report, "report")?.0;
        let sub = str_arg(substation, "substation")?;
        let v = r
            .vsi_t(sub)
            .ok_or_else(|| Failure(TdStatus::InvalidInput, format!("no substation index for `{sub}`")))?;
        put(out, v, "out")
    })
}

/// Report as JSON; release the string with `td_string_free`.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_report_to_json(report: *const TdReport, out: *mut *mut c_char) -> TdStatus {
    guard(|| {
        let r = &handle(report, "report")?.0;
        let mut buf = Vec::new();
        r.write_json(&mut buf).map_err(fail)?;
        let s = CString::new(buf).map_err(|e| Failure(TdStatus::Internal, e.to_string()))?;
        put(out, s.into_raw(), "out")
    })
}

/// # Safety
/// `s` must come from this library (or be NULL).
#[no_mangle]
pub unsafe extern "C" fn td_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
