//! C ABI over the deshadow library.
//!
//! Every function returns a [`DsStatus`]. On failure the message is kept
//! per thread and read back with [`ds_last_error_message`]. Images cross
//! the boundary as row-major `float` buffers of `height * width` values in
//! [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use deshadow::config::Config;
use deshadow::imaging::BScan;
use deshadow::phantom::{self, PhantomSpec, ShadowStart};
use deshadow::remover::Remover;
use deshadow::Error;
use ndarray::Array2;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Internal = 6,
    Panic = 7,
}

/// A trained remover together with the config it was trained under.
pub struct DsRemover {
    remover: Remover,
    cfg: Config,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DsStatus {
    match e {
        Error::Io { .. } | Error::Format(_) => DsStatus::Io,
        Error::Checkpoint(_) => DsStatus::Checkpoint,
        Error::Config(_) => DsStatus::Config,
        Error::Validation(_) | Error::Shape { .. } | Error::Placement(_) | Error::UndefinedContrast(_) => {
            DsStatus::InvalidArgument
        }
        Error::Init(_) | Error::Contract(_) | Error::Torch(_) => DsStatus::Internal,
    }
}

struct Fail(DsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(DsStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn dims(height: usize, width: usize) -> Result<usize, Fail> {
    match height.checked_mul(width) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(Fail(
            DsStatus::InvalidArgument,
            format!("bad image size {height}x{width}"),
        )),
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DsStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out(dst: *mut f32, values: &Array2<f32>) {
    for (i, v) in values.iter().enumerate() {
        *dst.add(i) = *v;
    }
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generate a phantom B-scan with `n_shadows` injected shadows. Each
/// output buffer must hold `height * width` floats; the mask is 0 or 1.
///
/// # Safety
/// Output pointers must be valid for `height * width` writes.
#[no_mangle]
pub unsafe extern "C" fn ds_phantom_generate(
    height: usize,
    width: usize,
    n_shadows: usize,
    seed: u64,
    out_shadowed: *mut f32,
    out_mask: *mut f32,
    out_ground_truth: *mut f32,
) -> DsStatus {
    guard(|| {
        non_null(out_shadowed, "out_shadowed")?;
        non_null(out_mask, "out_mask")?;
        non_null(out_ground_truth, "out_ground_truth")?;
        dims(height, width)?;
        let spec = PhantomSpec {
            height,
            width,
            rng_seed: seed,
            ..PhantomSpec::default()
        };
        let ph = phantom::generate_phantom(&spec)?;
        let pair = phantom::make_validation_pair(
            &ph.image,
            n_shadows,
            seed ^ 0x5eed,
            ShadowStart::Surface(&ph.layer_map),
        )?;
        write_out(out_shadowed, pair.shadowed.pixels());
        write_out(out_mask, pair.mask.values());
        write_out(out_ground_truth, pair.ground_truth.pixels());
        Ok(())
    })
}

/// Load the remover from a training checkpoint into `*out`. Release with
/// [`ds_remover_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_remover_load(path: *const c_char, out: *mut *mut DsRemover) -> DsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let (remover, cfg) = deshadow::trainer::load_remover(&path)?;
        *out = Box::into_raw(Box::new(DsRemover { remover, cfg }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`ds_remover_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_remover_free(handle: *mut DsRemover) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Network input size the remover was trained at.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_remover_input_size(
    handle: *const DsRemover,
    height: *mut usize,
    width: *mut usize,
) -> DsStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(height, "height")?;
        non_null(width, "width")?;
        let (h, w) = (*handle).cfg.augment.out_size;
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Deshadow one image of any size; it is resized to the network size and
/// back. `pixels` and `out` hold `height * width` floats and may alias.
///
/// # Safety
/// `handle` must be live; buffers must be valid for `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn ds_remover_deshadow(
    handle: *const DsRemover,
    pixels: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> DsStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(pixels, "pixels")?;
        non_null(out, "out")?;
        let n = dims(height, width)?;
        let src = std::slice::from_raw_parts(pixels, n).to_vec();
        let arr = Array2::from_shape_vec((height, width), src)
            .map_err(|e| Fail(DsStatus::InvalidArgument, e.to_string()))?;
        let img = BScan::new(arr, "ffi")?;
        let h = &*handle;
        let (y, _) = deshadow::cli::deshadow_image(&h.remover, &h.cfg, &img)?;
        write_out(out, y.pixels());
        Ok(())
    })
}
