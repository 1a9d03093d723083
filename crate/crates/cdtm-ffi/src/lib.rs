//! C ABI for the `cdtm` terrain-referenced pose estimation library.
//!
//! Conventions:
//! - Terrain grids are opaque handles created and destroyed by this
//!   library; every other buffer is allocated and owned by the caller.
//! - Every fallible function returns a [`CdtmStatus`]; on failure a
//!   human-readable message is kept in thread-local storage and can be
//!   retrieved with [`cdtm_last_error`].
//! - Parameter vectors are length-12 arrays ordered
//!   `(p1x, p1y, p1z, phi1, theta1, psi1, p12x, p12y, p12z, phi12, theta12, psi12)`
//!   with positions in meters and angles in radians. Covariances are
//!   row-major `12x12` and `6x6` arrays.
//! - Observations are flat `n x 4` row-major arrays
//!   `(q1x, q1y, q2x, q2y)`, one row per matched feature, in image
//!   coordinates at unit focal length.

use std::cell::RefCell;
use std::ffi::CStr;
use std::os::raw::{c_char, c_double, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cdtm::asc;
use cdtm::constraint::{anchor_features, FeatureObservation, ParamVector};
use cdtm::covariance::{self, NoiseModel};
use cdtm::dtm::TerrainGrid;
use cdtm::geom::ImageRay;
use cdtm::solver::{self, RobustMode, SolverOptions};
use nalgebra::{DMatrix, SVector, Vector2};

/// Status code returned by every fallible function of this library.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdtmStatus {
    /// Success.
    CdtmOk = 0,
    /// A required pointer argument was null.
    CdtmNullArgument = 1,
    /// An argument was out of range or malformed.
    CdtmInvalidArgument = 2,
    /// File could not be read, written, or parsed.
    CdtmIoError = 3,
    /// The solver did not converge within its iteration budget.
    CdtmNotConverged = 4,
    /// The estimation problem is degenerate (observability lost).
    CdtmDegenerate = 5,
    /// The initial guess was rejected by the error gate.
    CdtmRejected = 6,
    /// A numerical operation failed (ill-conditioning, gimbal lock, ...).
    CdtmNumericalError = 7,
    /// Internal panic; the library state is still valid.
    CdtmInternalError = 8,
}

/// Opaque digital terrain map handle.
pub struct CdtmTerrain {
    grid: TerrainGrid,
}

/// Result of one pose-and-motion solve.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CdtmSolveReport {
    /// Estimated parameter vector, same layout as the guess.
    pub theta: [c_double; 12],
    /// 1 if the iteration converged, 0 otherwise.
    pub converged: c_int,
    /// 1 if the problem was flagged as degenerate.
    pub degenerate: c_int,
    /// 1 if the initial guess was rejected by the error gate.
    pub rejected: c_int,
    /// Gauss-Newton / Levenberg-Marquardt iterations used.
    pub iterations: u64,
    /// Final squared residual norm.
    pub final_cost: f64,
    /// Condition number of the final parameter Jacobian.
    pub condition_number: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: CdtmStatus, msg: impl Into<String>) -> CdtmStatus {
    set_error(msg);
    status
}

/// Runs `body` with panics converted to `CdtmInternalError` so they
/// never unwind across the C boundary.
fn guarded(body: impl FnOnce() -> CdtmStatus) -> CdtmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(CdtmStatus::CdtmInternalError, "internal panic"),
    }
}

/// Copies the message of the most recent error on this thread into
/// `buf` (NUL-terminated, truncated to `len` bytes). Returns the full
/// message length in bytes, excluding the terminator, or -1 if `buf`
/// is null and `len` nonzero.
#[no_mangle]
pub extern "C" fn cdtm_last_error(buf: *mut c_char, len: usize) -> c_int {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if len > 0 {
            if buf.is_null() {
                return -1;
            }
            let n = msg.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        msg.len() as c_int
    })
}

/// Reads a terrain grid from an ESRI ASCII (.asc) file. On success
/// writes a new handle to `out`; free it with `cdtm_terrain_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdtm_terrain_read_asc(
    path: *const c_char,
    out: *mut *mut CdtmTerrain,
) -> CdtmStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(CdtmStatus::CdtmNullArgument, "path and out must be non-null");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(CdtmStatus::CdtmInvalidArgument, "path is not valid UTF-8"),
        };
        match asc::read_asc(Path::new(path)) {
            Ok(grid) => {
                unsafe { *out = Box::into_raw(Box::new(CdtmTerrain { grid })) };
                CdtmStatus::CdtmOk
            }
            Err(e) => fail(CdtmStatus::CdtmIoError, e.to_string()),
        }
    })
}

/// Builds a terrain grid from a row-major `rows x cols` height array.
/// `origin_x`, `origin_y` locate node (0, 0); `spacing` is the node
/// pitch in meters along both axes. On success writes a new handle to
/// `out`; free it with `cdtm_terrain_free`.
///
/// # Safety
/// `heights` must point to `rows * cols` doubles and `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdtm_terrain_create(
    rows: usize,
    cols: usize,
    origin_x: c_double,
    origin_y: c_double,
    spacing: c_double,
    heights: *const c_double,
    out: *mut *mut CdtmTerrain,
) -> CdtmStatus {
    guarded(|| {
        if heights.is_null() || out.is_null() {
            return fail(CdtmStatus::CdtmNullArgument, "heights and out must be non-null");
        }
        let data = unsafe { std::slice::from_raw_parts(heights, rows * cols) };
        let h = DMatrix::from_row_iterator(rows, cols, data.iter().cloned());
        match TerrainGrid::new(Vector2::new(origin_x, origin_y), spacing, h) {
            Ok(grid) => {
                unsafe { *out = Box::into_raw(Box::new(CdtmTerrain { grid })) };
                CdtmStatus::CdtmOk
            }
            Err(e) => fail(CdtmStatus::CdtmInvalidArgument, e.to_string()),
        }
    })
}

/// Frees a terrain handle. A null handle is a no-op.
///
/// # Safety
/// `terrain` must be a handle returned by this library that has not
/// already been freed.
#[no_mangle]
pub unsafe extern "C" fn cdtm_terrain_free(terrain: *mut CdtmTerrain) {
    if !terrain.is_null() {
        drop(unsafe { Box::from_raw(terrain) });
    }
}

/// Bilinearly interpolated terrain height at `(x, y)`. Fails with
/// `CdtmInvalidArgument` outside the grid footprint.
///
/// # Safety
/// `terrain` must be a live handle and `out_height` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdtm_terrain_height_at(
    terrain: *const CdtmTerrain,
    x: c_double,
    y: c_double,
    out_height: *mut c_double,
) -> CdtmStatus {
    guarded(|| {
        if terrain.is_null() || out_height.is_null() {
            return fail(CdtmStatus::CdtmNullArgument, "terrain and out_height must be non-null");
        }
        match unsafe { &*terrain }.grid.height_at(x, y) {
            Ok(h) => {
                unsafe { *out_height = h };
                CdtmStatus::CdtmOk
            }
            Err(e) => fail(CdtmStatus::CdtmInvalidArgument, e.to_string()),
        }
    })
}

fn parse_observations(obs: *const c_double, n: usize) -> Vec<FeatureObservation> {
    let flat = unsafe { std::slice::from_raw_parts(obs, n * 4) };
    flat.chunks_exact(4)
        .map(|r| FeatureObservation {
            q1: ImageRay::new(r[0], r[1]),
            q2: ImageRay::new(r[2], r[3]),
        })
        .collect()
}

fn parse_theta(theta: *const c_double) -> ParamVector {
    let v = unsafe { std::slice::from_raw_parts(theta, 12) };
    ParamVector::from_vector(&SVector::<f64, 12>::from_column_slice(v))
}

/// Estimates both camera poses from `n` matched feature rays and the
/// terrain, starting from `guess` (length 12). `huber` nonzero enables
/// Huber robust reweighting against gross outliers. The report is
/// filled on `CdtmOk`, `CdtmNotConverged`, `CdtmDegenerate`, and
/// `CdtmRejected`; the latter three also set the error message.
///
/// # Safety
/// `terrain` must be a live handle, `observations` must point to
/// `n * 4` doubles, `guess` to 12 doubles, and `report` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdtm_solve(
    terrain: *const CdtmTerrain,
    observations: *const c_double,
    n: usize,
    guess: *const c_double,
    huber: c_int,
    report: *mut CdtmSolveReport,
) -> CdtmStatus {
    guarded(|| {
        if terrain.is_null() || observations.is_null() || guess.is_null() || report.is_null() {
            return fail(CdtmStatus::CdtmNullArgument, "all arguments must be non-null");
        }
        let obs = parse_observations(observations, n);
        let theta0 = parse_theta(guess);
        let opts = SolverOptions {
            robust: if huber != 0 {
                RobustMode::Huber { delta: None }
            } else {
                RobustMode::Off
            },
            ..SolverOptions::default()
        };
        let r = match solver::solve(&theta0, &obs, &unsafe { &*terrain }.grid, &opts) {
            Ok(r) => r,
            Err(solver::SolverError::IllConditioned) => {
                return fail(CdtmStatus::CdtmDegenerate, "normal equations ill-conditioned")
            }
            Err(e) => return fail(CdtmStatus::CdtmInvalidArgument, e.to_string()),
        };
        let mut theta = [0.0; 12];
        theta.copy_from_slice(r.theta_hat.to_vector().as_slice());
        unsafe {
            *report = CdtmSolveReport {
                theta,
                converged: r.converged as c_int,
                degenerate: r.degenerate as c_int,
                rejected: r.rejected as c_int,
                iterations: r.iterations as u64,
                final_cost: r.final_cost,
                condition_number: r.condition_number,
            };
        }
        if r.rejected {
            fail(CdtmStatus::CdtmRejected, "initial guess rejected by the error gate")
        } else if r.degenerate {
            fail(CdtmStatus::CdtmDegenerate, "estimation problem is degenerate")
        } else if !r.converged {
            fail(CdtmStatus::CdtmNotConverged, "solver did not converge")
        } else {
            CdtmStatus::CdtmOk
        }
    })
}

/// First-order covariance of the estimate at `theta` (length 12) given
/// image-ray noise `sigma_l` (image plane, unit focal length) and
/// terrain height noise `sigma_h` (meters). Writes the row-major 12x12
/// parameter covariance to `sigma_theta_out` (144 doubles) and the
/// row-major 6x6 second-pose covariance to `sigma_c2_out` (36
/// doubles); either output pointer may be null to skip it.
///
/// # Safety
/// `terrain` must be a live handle, `observations` must point to
/// `n * 4` doubles, `theta` to 12 doubles, and each non-null output
/// pointer to the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn cdtm_covariance(
    terrain: *const CdtmTerrain,
    observations: *const c_double,
    n: usize,
    theta: *const c_double,
    sigma_l: c_double,
    sigma_h: c_double,
    sigma_theta_out: *mut c_double,
    sigma_c2_out: *mut c_double,
) -> CdtmStatus {
    guarded(|| {
        if terrain.is_null() || observations.is_null() || theta.is_null() {
            return fail(
                CdtmStatus::CdtmNullArgument,
                "terrain, observations, and theta must be non-null",
            );
        }
        let obs = parse_observations(observations, n);
        let theta = parse_theta(theta);
        let q1: Vec<ImageRay> = obs.iter().map(|o| o.q1).collect();
        let anchors = match anchor_features(&theta.pose1(), &q1, &unsafe { &*terrain }.grid) {
            Ok(a) => a,
            Err(e) => return fail(CdtmStatus::CdtmInvalidArgument, e.to_string()),
        };
        let noise = NoiseModel { sigma_l, sigma_h };
        let rep = match covariance::covariance_report(&theta, &obs, &anchors, &noise) {
            Ok(r) => r,
            Err(e) => return fail(CdtmStatus::CdtmNumericalError, e.to_string()),
        };
        unsafe {
            if !sigma_theta_out.is_null() {
                let out = std::slice::from_raw_parts_mut(sigma_theta_out, 144);
                for i in 0..12 {
                    for j in 0..12 {
                        out[i * 12 + j] = rep.sigma_theta[(i, j)];
                    }
                }
            }
            if !sigma_c2_out.is_null() {
                let out = std::slice::from_raw_parts_mut(sigma_c2_out, 36);
                for i in 0..6 {
                    for j in 0..6 {
                        out[i * 6 + j] = rep.sigma_c2[(i, j)];
                    }
                }
            }
        }
        CdtmStatus::CdtmOk
    })
}
