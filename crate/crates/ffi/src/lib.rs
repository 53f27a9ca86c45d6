//! C ABI over `advdiff`.
//!
//! Every fallible call returns an [`AdvdiffStatus`]; on failure the message
//! is kept per thread and read back with [`advdiff_last_error`]. Objects are
//! opaque handles released by their matching `_free` function. Images and
//! latents cross the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use advdiff::attack::update_weights;
use advdiff::diffusion::{edit_friendly_invert, reconstruct, DiffusionTrajectory, NoiseSchedule};
use advdiff::eval::{psnr, ssim_default};
use advdiff::grad::Tensor;
use advdiff::models::{DenoiserConfig, DenoiserNet};
use advdiff::pipeline::{self, EvalReport, Manifest, RunDir};
use advdiff::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Shape = 4,
    Numeric = 5,
    NonFinite = 6,
    ModelInvalid = 7,
    Format = 8,
    MissingFile = 9,
    Io = 10,
    Manifest = 11,
    NotFound = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for AdvdiffStatus {
    fn from(e: &Error) -> Self {
        match e.kind() {
            "shape" => AdvdiffStatus::Shape,
            "numeric" => AdvdiffStatus::Numeric,
            "non_finite" => AdvdiffStatus::NonFinite,
            "model_invalid" => AdvdiffStatus::ModelInvalid,
            "format" => AdvdiffStatus::Format,
            "missing_file" => AdvdiffStatus::MissingFile,
            "io" => AdvdiffStatus::Io,
            "manifest" => AdvdiffStatus::Manifest,
            _ => AdvdiffStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(AdvdiffStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> AdvdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdvdiffStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside advdiff");
            AdvdiffStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AdvdiffStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AdvdiffStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn image_arg(data: *const f64, height: usize, width: usize) -> FfiResult<Tensor> {
    if data.is_null() {
        return Err(null("image"));
    }
    let n = height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Fail(
                AdvdiffStatus::Shape,
                format!("bad image size {height}x{width}"),
            )
        })?;
    Ok(Tensor::new(
        &[height, width],
        std::slice::from_raw_parts(data, n).to_vec(),
    )?)
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. Returns the full message length excluding the terminator; 0 when
/// no error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn advdiff_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            0
        }
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn advdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

pub struct AdvdiffManifest(Manifest);

/// Creates a manifest with default values.
#[no_mangle]
pub extern "C" fn advdiff_manifest_new() -> *mut AdvdiffManifest {
    boxed(AdvdiffManifest(Manifest::default()))
}

/// Parses a manifest file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_manifest_load(
    path: *const c_char,
    out: *mut *mut AdvdiffManifest,
) -> AdvdiffStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = Manifest::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = boxed(AdvdiffManifest(m));
        Ok(())
    })
}

/// Sets one `key` to `value` using manifest syntax.
///
/// # Safety
/// `m` must come from this library; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn advdiff_manifest_set(
    m: *mut AdvdiffManifest,
    key: *const c_char,
    value: *const c_char,
) -> AdvdiffStatus {
    guard(|| {
        let m = out_ptr(m, "manifest")?;
        m.0.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// Copies the canonical text of the manifest, NUL-terminated, into `buf`.
/// `*written` always receives the text length; a buffer of `len <= length`
/// fails with `BUFFER_TOO_SMALL`.
///
/// # Safety
/// `m` must come from this library; `buf` must be null or hold `len` bytes;
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_manifest_text(
    m: *const AdvdiffManifest,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> AdvdiffStatus {
    guard(|| {
        let text = handle(m, "manifest")?.0.to_text();
        let written = out_ptr(written, "written")?;
        *written = text.len();
        if buf.is_null() || len <= text.len() {
            return Err(Fail(
                AdvdiffStatus::BufferTooSmall,
                format!("need {} bytes", text.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `m` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn advdiff_manifest_free(m: *mut AdvdiffManifest) {
    free(m)
}

/// A locked run directory and its manifest.
pub struct AdvdiffRun {
    dir: RunDir,
    manifest: Manifest,
}

/// Opens (and locks) a run directory. The manifest is copied.
///
/// # Safety
/// `m` must come from this library; `dir` must be NUL-terminated; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_run_open(
    m: *const AdvdiffManifest,
    dir: *const c_char,
    out: *mut *mut AdvdiffRun,
) -> AdvdiffStatus {
    guard(|| {
        let manifest = handle(m, "manifest")?.0.clone();
        manifest.validate()?;
        let out = out_ptr(out, "out")?;
        let dir = RunDir::open(&PathBuf::from(str_arg(dir, "dir")?))?;
        *out = boxed(AdvdiffRun { dir, manifest });
        Ok(())
    })
}

pub struct AdvdiffReport(EvalReport);

/// Runs every stage up to evaluation, reusing persisted stages.
///
/// # Safety
/// `run` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_run_all(
    run: *mut AdvdiffRun,
    out: *mut *mut AdvdiffReport,
) -> AdvdiffStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(AdvdiffReport(pipeline::run_all(&run.manifest, &run.dir)?));
        Ok(())
    })
}

/// Releases the run and its directory lock.
///
/// # Safety
/// `run` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn advdiff_run_free(run: *mut AdvdiffRun) {
    free(run)
}

/// Looks up a value of the evaluation summary, e.g. metric `asr_adv` for
/// model `embedder_0`, or `psnr_mean` for model `all`.
///
/// # Safety
/// `r` must come from this library; strings must be NUL-terminated; `value`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_report_metric(
    r: *const AdvdiffReport,
    metric: *const c_char,
    model: *const c_char,
    value: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let r = handle(r, "report")?;
        let (metric, model) = (str_arg(metric, "metric")?, str_arg(model, "model")?);
        let value = out_ptr(value, "value")?;
        let row =
            r.0.summary_rows()
                .into_iter()
                .find(|row| row[0] == metric && row[1] == model);
        let row = row.ok_or_else(|| {
            Fail(
                AdvdiffStatus::NotFound,
                format!("no metric `{metric}` for `{model}`"),
            )
        })?;
        *value = if row[3] == "inf" {
            f64::INFINITY
        } else {
            row[3]
                .parse()
                .map_err(|_| Fail(AdvdiffStatus::Format, format!("bad value {}", row[3])))?
        };
        Ok(())
    })
}

/// # Safety
/// `r` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn advdiff_report_free(r: *mut AdvdiffReport) {
    free(r)
}

pub struct AdvdiffDenoiser(DenoiserNet);

/// Creates a randomly initialised denoiser for `height`×`width` latents.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_denoiser_new(
    height: usize,
    width: usize,
    patch: usize,
    seed: u64,
    out: *mut *mut AdvdiffDenoiser,
) -> AdvdiffStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let net = DenoiserNet::new(DenoiserConfig {
            height,
            width,
            patch,
            seed,
            ..DenoiserConfig::default()
        })?;
        *out = boxed(AdvdiffDenoiser(net));
        Ok(())
    })
}

/// Loads a denoiser checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_denoiser_load(
    path: *const c_char,
    out: *mut *mut AdvdiffDenoiser,
) -> AdvdiffStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let net = DenoiserNet::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = boxed(AdvdiffDenoiser(net));
        Ok(())
    })
}

/// # Safety
/// `d` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn advdiff_denoiser_free(d: *mut AdvdiffDenoiser) {
    free(d)
}

pub struct AdvdiffTrajectory(DiffusionTrajectory);

/// Inverts `x0` over the step-scaled linear schedule with `steps` steps.
///
/// # Safety
/// `d` must come from this library; `x0` must hold `height*width` doubles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_invert(
    d: *const AdvdiffDenoiser,
    x0: *const f64,
    height: usize,
    width: usize,
    steps: usize,
    seed: u64,
    out: *mut *mut AdvdiffTrajectory,
) -> AdvdiffStatus {
    guard(|| {
        let d = handle(d, "denoiser")?;
        let out = out_ptr(out, "out")?;
        let x0 = image_arg(x0, height, width)?;
        let s = NoiseSchedule::scaled_linear(steps)?;
        *out = boxed(AdvdiffTrajectory(edit_friendly_invert(
            &x0, &s, &d.0, seed,
        )?));
        Ok(())
    })
}

/// Replays the stored noise maps from `x_T` and writes `x_0` to `x0_out`.
///
/// # Safety
/// Handles must come from this library; `x0_out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn advdiff_reconstruct(
    traj: *const AdvdiffTrajectory,
    d: *const AdvdiffDenoiser,
    x0_out: *mut f64,
    len: usize,
) -> AdvdiffStatus {
    guard(|| {
        let (traj, d) = (handle(traj, "trajectory")?, handle(d, "denoiser")?);
        if x0_out.is_null() {
            return Err(null("x0_out"));
        }
        let x0 = reconstruct(&traj.0, &d.0)?;
        if len != x0.data().len() {
            return Err(Fail(
                AdvdiffStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", x0.data().len()),
            ));
        }
        ptr::copy_nonoverlapping(x0.data().as_ptr(), x0_out, len);
        Ok(())
    })
}

/// # Safety
/// `t` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn advdiff_trajectory_free(t: *mut AdvdiffTrajectory) {
    free(t)
}

/// Ensemble weights `softmax(1 - scores)` written to `weights_out`.
///
/// # Safety
/// `scores` and `weights_out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn advdiff_update_weights(
    scores: *const f64,
    n: usize,
    weights_out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        if scores.is_null() || weights_out.is_null() {
            return Err(null("scores or weights_out"));
        }
        let w = update_weights(std::slice::from_raw_parts(scores, n))?;
        ptr::copy_nonoverlapping(w.as_ptr(), weights_out, n);
        Ok(())
    })
}

/// PSNR (peak 1) and SSIM of two images in `[0, 1]`. Identical images give
/// an infinite PSNR.
///
/// # Safety
/// `a` and `b` must hold `height*width` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_image_quality(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    psnr_out: *mut f64,
    ssim_out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let (a, b) = (image_arg(a, height, width)?, image_arg(b, height, width)?);
        let (p, s) = (
            out_ptr(psnr_out, "psnr_out")?,
            out_ptr(ssim_out, "ssim_out")?,
        );
        *p = psnr(&a, &b)?;
        *s = ssim_default(&a, &b)?;
        Ok(())
    })
}
