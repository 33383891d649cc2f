//! C interface to `acrkit`.
//!
//! Inputs are wrapped in opaque handles, every fallible call returns an
//! [`AcrCode`] and the message of the most recent failure on the calling
//! thread is available from [`acr_last_error_message`]. Strings handed to the
//! caller are released with [`acr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use acrkit::acr::AcrStatus;
use acrkit::cli::{simulate, SimulationConfig};
use acrkit::error::AcrError;
use acrkit::fusion::{i2pe, I2peConfig};
use acrkit::geometry::{DirectionalPose, ImageSize, Intrinsics, PixelPoint, Rotation, Vec3};
use acrkit::plane_match::PlaneSegmentMap;
use acrkit::pose_estimation::{estimate_epipolar, CorrespondenceSet, EpipolarConfig};
use acrkit::scale_solver::{coefficient_blocks, solve_blocks};

/// Status returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcrCode {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InsufficientData = 3,
    DegenerateModel = 4,
    CheiralityFailure = 5,
    AmbiguousNullspace = 6,
    EstimationFailure = 7,
    Config = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&AcrError> for AcrCode {
    fn from(e: &AcrError) -> Self {
        match e {
            AcrError::InsufficientData { .. } | AcrError::EmptyObservation => {
                AcrCode::InsufficientData
            }
            AcrError::DegenerateModel(_)
            | AcrError::DegenerateDirection
            | AcrError::DegenerateInit
            | AcrError::AmbiguousDirection => AcrCode::DegenerateModel,
            AcrError::CheiralityFailure | AcrError::BehindCamera { .. } => {
                AcrCode::CheiralityFailure
            }
            AcrError::AmbiguousNullspace { .. } => AcrCode::AmbiguousNullspace,
            AcrError::EstimationFailure(_)
            | AcrError::Orientation { .. }
            | AcrError::BudgetExceeded { .. } => AcrCode::EstimationFailure,
            AcrError::Config(_) | AcrError::Json(_) | AcrError::InvalidScene(_) => AcrCode::Config,
            _ => AcrCode::InvalidInput,
        }
    }
}

/// Pinhole intrinsics in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcrIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Relative pose `x_cur = R x_ref + t` with `t` known up to scale.
///
/// `rotation` is row-major. `direction` is a unit vector when
/// `has_direction` is set and zero otherwise.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcrRelativePose {
    pub rotation: [f64; 9],
    pub direction: [f64; 3],
    pub has_direction: bool,
}

/// Outcome of one simulated relocalization. Errors are NaN when unknown.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcrRunSummary {
    pub converged: bool,
    pub iterations: usize,
    pub motions: usize,
    pub final_rot_err_deg: f64,
    pub final_trans_err_m: f64,
}

/// Opaque set of pixel correspondences between two images.
pub struct AcrCorrespondences(CorrespondenceSet);

/// Opaque plane label image; label 0 marks pixels outside every plane.
pub struct AcrPlaneMask(PlaneSegmentMap);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), (AcrCode, String)>>(f: F) -> AcrCode {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AcrCode::Ok,
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            AcrCode::Panic
        }
    }
}

fn fail(e: AcrError) -> (AcrCode, String) {
    (AcrCode::from(&e), e.to_string())
}

fn null(what: &str) -> (AcrCode, String) {
    (AcrCode::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (AcrCode, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (AcrCode, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

fn intrinsics(i: &AcrIntrinsics) -> Result<Intrinsics, (AcrCode, String)> {
    Intrinsics::new(i.fx, i.fy, i.cx, i.cy).map_err(fail)
}

fn relative_pose(p: &AcrRelativePose) -> Result<DirectionalPose, (AcrCode, String)> {
    let r = Rotation::from_row_major(&p.rotation).map_err(fail)?;
    DirectionalPose::new(r, Vec3::from(p.direction)).map_err(fail)
}

fn write_pose(out: &mut AcrRelativePose, rotation: &Rotation, direction: Option<&Vec3>) {
    out.rotation = rotation.to_row_major();
    out.direction = direction.map_or([0.0; 3], |d| [d.x, d.y, d.z]);
    out.has_direction = direction.is_some();
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn acr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the last error message on this thread, or null when none.
/// Release it with [`acr_string_free`].
#[no_mangle]
pub extern "C" fn acr_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null_mut(), |s| s.clone().into_raw())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn acr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a correspondence set from `n` pixel pairs given as interleaved
/// `(u, v)` coordinates in `a_uv` and `b_uv` (each `2n` doubles).
///
/// # Safety
/// `a_uv` and `b_uv` must point to `2n` readable doubles and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn acr_correspondences_new(
    a_uv: *const f64,
    b_uv: *const f64,
    n: usize,
    out: *mut *mut AcrCorrespondences,
) -> AcrCode {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        if a_uv.is_null() || b_uv.is_null() {
            return Err(null("coordinate buffer"));
        }
        let a = std::slice::from_raw_parts(a_uv, 2 * n);
        let b = std::slice::from_raw_parts(b_uv, 2 * n);
        let pairs: Vec<(PixelPoint, PixelPoint)> = a
            .chunks_exact(2)
            .zip(b.chunks_exact(2))
            .map(|(p, q)| (PixelPoint::new(p[0], p[1]), PixelPoint::new(q[0], q[1])))
            .collect();
        let set = CorrespondenceSet::from_pairs(&pairs).map_err(fail)?;
        *out = Box::into_raw(Box::new(AcrCorrespondences(set)));
        Ok(())
    })
}

/// Number of pairs in `c`, or 0 for null.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acr_correspondences_len(c: *const AcrCorrespondences) -> usize {
    c.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `c` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn acr_correspondences_free(c: *mut AcrCorrespondences) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Builds a plane mask from `width * height` row-major labels.
///
/// # Safety
/// `labels` must point to `width * height` readable values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn acr_plane_mask_new(
    width: u32,
    height: u32,
    labels: *const u16,
    out: *mut *mut AcrPlaneMask,
) -> AcrCode {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        if labels.is_null() {
            return Err(null("labels"));
        }
        let n = width as usize * height as usize;
        let labels = std::slice::from_raw_parts(labels, n).to_vec();
        let mask = PlaneSegmentMap::new(width, height, labels).map_err(fail)?;
        *out = Box::into_raw(Box::new(AcrPlaneMask(mask)));
        Ok(())
    })
}

/// Number of planes in `m`, or 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acr_plane_mask_num_planes(m: *const AcrPlaneMask) -> usize {
    m.as_ref().map_or(0, |m| m.0.num_planes())
}

/// # Safety
/// `m` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn acr_plane_mask_free(m: *mut AcrPlaneMask) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Plane-mediated relative pose from correspondences and the plane masks of
/// both images, with default settings.
///
/// # Safety
/// All pointers must be live handles or valid, writable structs.
#[no_mangle]
pub unsafe extern "C" fn acr_estimate_pose(
    c: *const AcrCorrespondences,
    mask_ref: *const AcrPlaneMask,
    mask_cur: *const AcrPlaneMask,
    intr: *const AcrIntrinsics,
    out: *mut AcrRelativePose,
) -> AcrCode {
    guard(|| {
        let c = deref(c, "correspondences")?;
        let m_ref = deref(mask_ref, "reference mask")?;
        let m_cur = deref(mask_cur, "current mask")?;
        let intr = intrinsics(deref(intr, "intrinsics")?)?;
        let out = deref_mut(out, "out")?;
        let pose = i2pe(&c.0, &m_ref.0, &m_cur.0, &intr, &I2peConfig::default()).map_err(fail)?;
        write_pose(out, &pose.rotation, Some(pose.direction()));
        Ok(())
    })
}

/// Relative pose from the essential matrix of all correspondences.
///
/// # Safety
/// All pointers must be live handles or valid, writable structs.
#[no_mangle]
pub unsafe extern "C" fn acr_estimate_epipolar(
    c: *const AcrCorrespondences,
    intr: *const AcrIntrinsics,
    width: u32,
    height: u32,
    out: *mut AcrRelativePose,
) -> AcrCode {
    guard(|| {
        let c = deref(c, "correspondences")?;
        let intr = intrinsics(deref(intr, "intrinsics")?)?;
        let out = deref_mut(out, "out")?;
        let image = ImageSize { width, height };
        let h = estimate_epipolar(&c.0, &intr, image, &EpipolarConfig::default()).map_err(fail)?;
        write_pose(out, &h.rotation, h.direction.as_ref());
        Ok(())
    })
}

/// Solves the depth and scale system for the pairs of `c` under `pose`.
///
/// Writes the unit-norm solution: per-pair depths in both views into
/// `depth_a` and `depth_b` (each of length `n`, which must equal the number
/// of pairs) and the translation scale into `scale`. Only ratios are
/// meaningful.
///
/// # Safety
/// All pointers must be live handles or valid, writable buffers.
#[no_mangle]
pub unsafe extern "C" fn acr_solve_scale(
    c: *const AcrCorrespondences,
    intr: *const AcrIntrinsics,
    pose: *const AcrRelativePose,
    depth_a: *mut f64,
    depth_b: *mut f64,
    n: usize,
    scale: *mut f64,
) -> AcrCode {
    guard(|| {
        let c = deref(c, "correspondences")?;
        let intr = intrinsics(deref(intr, "intrinsics")?)?;
        let pose = relative_pose(deref(pose, "pose")?)?;
        let scale = deref_mut(scale, "scale")?;
        if depth_a.is_null() || depth_b.is_null() {
            return Err(null("depth buffer"));
        }
        if n < c.0.len() {
            return Err((
                AcrCode::BufferTooSmall,
                format!("depth buffers hold {n} entries, {} needed", c.0.len()),
            ));
        }
        let blocks = coefficient_blocks(&c.0, &intr, &pose).map_err(fail)?;
        let sol = solve_blocks(&blocks).map_err(fail)?;
        let da = std::slice::from_raw_parts_mut(depth_a, sol.len());
        let db = std::slice::from_raw_parts_mut(depth_b, sol.len());
        for i in 0..sol.len() {
            da[i] = sol.depth_a(i);
            db[i] = sol.depth_b(i);
        }
        *scale = sol.scale();
        Ok(())
    })
}

/// Runs one simulated relocalization described by a JSON configuration
/// (null or empty for the defaults). With `baseline` set the bisection
/// baseline runs instead of the plane-mediated loop. When `trace_json` is
/// not null it receives the step records as a JSON array, to be released
/// with [`acr_string_free`].
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn acr_simulate(
    config_json: *const c_char,
    baseline: bool,
    out: *mut AcrRunSummary,
    trace_json: *mut *mut c_char,
) -> AcrCode {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let text = if config_json.is_null() {
            ""
        } else {
            CStr::from_ptr(config_json)
                .to_str()
                .map_err(|e| (AcrCode::InvalidInput, format!("config is not UTF-8: {e}")))?
        };
        let cfg: SimulationConfig = if text.trim().is_empty() {
            SimulationConfig::default()
        } else {
            serde_json::from_str(text).map_err(|e| fail(e.into()))?
        };
        let (trace, summary) = simulate(&cfg, baseline).map_err(fail)?;
        *out = AcrRunSummary {
            converged: trace.status == AcrStatus::Converged,
            iterations: summary.iterations,
            motions: summary.motions,
            final_rot_err_deg: summary.final_rot_err_deg.unwrap_or(f64::NAN),
            final_trans_err_m: summary.final_trans_err_m.unwrap_or(f64::NAN),
        };
        if let Some(slot) = trace_json.as_mut() {
            let json = serde_json::to_string(&trace.records).map_err(|e| fail(e.into()))?;
            *slot = CString::new(json)
                .map_err(|e| (AcrCode::InvalidInput, e.to_string()))?
                .into_raw();
        }
        Ok(())
    })
}
