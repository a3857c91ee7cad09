//! C interface to the deraining network. Models are opaque handles, every
//! fallible call returns an [`MhdnStatus`], and image buffers cross the
//! boundary as flat interleaved RGB float rows in [0, 1]. The header is
//! generated into `include/mhderain.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use ndarray::Array4;

use mhderain::data::{load_image, save_image, ImageTensor};
use mhderain::losses::{psnr_value, ssim_value, SsimParams};
use mhderain::network::DerainNet;
use mhderain::training::load_checkpoint;
use mhderain::Error;

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MhdnStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A path or string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was rejected: bad dimensions, values outside [0, 1],
    /// or buffers that do not match the stated shape.
    InvalidInput = 3,
    /// Reading or writing a file failed, including image decode errors.
    IoFailed = 4,
    /// The checkpoint file exists but could not be understood.
    BadCheckpoint = 5,
    /// An unexpected internal failure; details via `mhdn_last_error`.
    Internal = 6,
}

/// A loaded deraining model. Create with `mhdn_model_load`, release with
/// `mhdn_model_free`. Calls on one model are safe from multiple threads
/// because inference never mutates it.
pub struct MhdnModel {
    net: DerainNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(e: Error) -> MhdnStatus {
    let status = match &e {
        Error::Io { .. } | Error::Image { .. } => MhdnStatus::IoFailed,
        Error::Checkpoint(_) => MhdnStatus::BadCheckpoint,
        _ => MhdnStatus::InvalidInput,
    };
    set_error(&e.to_string());
    status
}

/// Runs a closure with a panic trap so unwinding never crosses the C
/// boundary.
fn guarded(body: impl FnOnce() -> MhdnStatus) -> MhdnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            MhdnStatus::Internal
        }
    }
}

macro_rules! require {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_error(concat!(stringify!($ptr), " is null"));
            return MhdnStatus::NullPointer;
        }
    };
}

/// # Safety
/// `ptr` must be a non-null NUL-terminated string.
unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, MhdnStatus> {
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(MhdnStatus::InvalidUtf8)
        }
    }
}

/// Buffer length for an interleaved RGB image, or an error status when the
/// dimensions are degenerate or overflow.
fn rgb_len(height: usize, width: usize) -> Result<usize, MhdnStatus> {
    if height == 0 || width == 0 {
        set_error("image dimensions must be nonzero");
        return Err(MhdnStatus::InvalidInput);
    }
    height
        .checked_mul(width)
        .and_then(|px| px.checked_mul(3))
        .ok_or_else(|| {
            set_error("image dimensions overflow");
            MhdnStatus::InvalidInput
        })
}

fn hwc_to_tensor(buf: &[f32], height: usize, width: usize, channels: usize) -> Array4<f32> {
    let mut out = Array4::zeros((1, channels, height, width));
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                out[[0, ch, r, c]] = buf[(r * width + c) * channels + ch];
            }
        }
    }
    out
}

fn tensor_to_hwc(t: &Array4<f32>, buf: &mut [f32]) {
    let (_, channels, height, width) = t.dim();
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                buf[(r * width + c) * channels + ch] = t[[0, ch, r, c]];
            }
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mhdn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on the calling thread, or an empty
/// string. The pointer stays valid until the next failing call on the same
/// thread.
#[no_mangle]
pub extern "C" fn mhdn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a training checkpoint and rebuilds its network. On success writes
/// an owned handle to `out_model`; free it with `mhdn_model_free`.
///
/// # Safety
/// `checkpoint_path` must be NUL-terminated and `out_model` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn mhdn_model_load(
    checkpoint_path: *const c_char,
    out_model: *mut *mut MhdnModel,
) -> MhdnStatus {
    guarded(|| {
        require!(checkpoint_path);
        require!(out_model);
        let path = match path_arg(checkpoint_path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let net = match load_checkpoint(path).and_then(|ckpt| ckpt.build_network()) {
            Ok(net) => net,
            Err(e) => return fail(e),
        };
        *out_model = Box::into_raw(Box::new(MhdnModel { net }));
        MhdnStatus::Ok
    })
}

/// Releases a model handle. A null pointer is a no-op.
///
/// # Safety
/// `model` must be null or a pointer obtained from `mhdn_model_load` that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn mhdn_model_free(model: *mut MhdnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Derains one RGB image. `rainy` holds `height * width * 3` floats in
/// [0, 1], interleaved RGB in row-major order; the result is written to
/// `derained`, which must have the same length. The buffers may alias.
///
/// # Safety
/// `model` must be a live handle and both buffers must cover
/// `height * width * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn mhdn_derain_rgb(
    model: *const MhdnModel,
    rainy: *const f32,
    height: usize,
    width: usize,
    derained: *mut f32,
) -> MhdnStatus {
    guarded(|| {
        require!(model);
        require!(rainy);
        require!(derained);
        let len = match rgb_len(height, width) {
            Ok(len) => len,
            Err(status) => return status,
        };
        let input = hwc_to_tensor(slice::from_raw_parts(rainy, len), height, width, 3);
        let out = match (*model).net.derain(&input) {
            Ok(out) => out,
            Err(e) => return fail(e),
        };
        tensor_to_hwc(&out.derained, slice::from_raw_parts_mut(derained, len));
        MhdnStatus::Ok
    })
}

/// Derains an image file. The input may be PNG or JPEG; the output is
/// written as PNG regardless of extension.
///
/// # Safety
/// `model` must be a live handle; both paths must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mhdn_derain_file(
    model: *const MhdnModel,
    input_path: *const c_char,
    output_path: *const c_char,
) -> MhdnStatus {
    guarded(|| {
        require!(model);
        require!(input_path);
        require!(output_path);
        let input = match path_arg(input_path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let output = match path_arg(output_path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let result = load_image::<f32>(input)
            .and_then(|img| (*model).net.derain(img.array()))
            .and_then(|out| ImageTensor::new(out.derained))
            .and_then(|img| save_image(output, &img));
        match result {
            Ok(()) => MhdnStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Peak signal-to-noise ratio in dB between two equal-length buffers of
/// [0, 1] samples. Identical buffers report 100 dB.
///
/// # Safety
/// `a` and `b` must cover `len` floats and `out_db` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mhdn_psnr(
    a: *const f32,
    b: *const f32,
    len: usize,
    out_db: *mut f64,
) -> MhdnStatus {
    guarded(|| {
        require!(a);
        require!(b);
        require!(out_db);
        if len == 0 {
            set_error("len must be nonzero");
            return MhdnStatus::InvalidInput;
        }
        let av = Array4::from_shape_vec((1, 1, 1, len), slice::from_raw_parts(a, len).to_vec())
            .expect("shape matches by construction");
        let bv = Array4::from_shape_vec((1, 1, 1, len), slice::from_raw_parts(b, len).to_vec())
            .expect("shape matches by construction");
        match psnr_value(&av, &bv) {
            Ok(db) => {
                *out_db = db;
                MhdnStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Mean structural similarity between two interleaved images of the given
/// dimensions, using the default 11x11 Gaussian window. Images must be at
/// least as large as the window.
///
/// # Safety
/// `a` and `b` must cover `height * width * channels` floats and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn mhdn_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> MhdnStatus {
    guarded(|| {
        require!(a);
        require!(b);
        require!(out);
        if height == 0 || width == 0 || channels == 0 {
            set_error("image dimensions must be nonzero");
            return MhdnStatus::InvalidInput;
        }
        let len = match height
            .checked_mul(width)
            .and_then(|px| px.checked_mul(channels))
        {
            Some(len) => len,
            None => {
                set_error("image dimensions overflow");
                return MhdnStatus::InvalidInput;
            }
        };
        let av = hwc_to_tensor(slice::from_raw_parts(a, len), height, width, channels);
        let bv = hwc_to_tensor(slice::from_raw_parts(b, len), height, width, channels);
        match ssim_value(&av, &bv, &SsimParams::default()) {
            Ok(v) => {
                *out = v;
                MhdnStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
