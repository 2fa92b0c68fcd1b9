//! C ABI over `carl-core`.
//!
//! Every function returns a [`CarlStatus`]; on failure the message is
//! available from [`carl_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use carl_core::eval::{patch_features, FeatureLayer};
use carl_core::io::{read_image, write_image, Checkpoint, SpectralImage};
use carl_core::model::CarlModel;
use carl_core::run::load_model;
use carl_core::tensor::ParamStore;
use carl_core::train::predict_pixels;
use carl_core::CarlError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarlLayer {
    Spectral = 0,
    Spatial = 1,
}

/// A hyperspectral or multispectral image.
pub struct CarlImage {
    inner: SpectralImage,
}

/// Encoder weights loaded from a pre-training or training checkpoint.
pub struct CarlEncoder {
    model: CarlModel,
    params: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(CarlStatus, String);

impl From<CarlError> for Failure {
    fn from(e: CarlError) -> Self {
        let status = match &e {
            CarlError::Shape { .. } | CarlError::Axis { .. } | CarlError::Validation(_) => CarlStatus::InvalidArgument,
            CarlError::Config(_) | CarlError::MissingTensor(_) | CarlError::TensorShape { .. } => CarlStatus::Config,
            CarlError::Numeric(_) => CarlStatus::Numeric,
            CarlError::Io { .. } | CarlError::Csv(_) => CarlStatus::Io,
            _ => CarlStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: CarlStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CarlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CarlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            CarlStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(CarlStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(CarlStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(CarlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(CarlStatus::NullPointer, format!("{what} is null")))
}

fn layer(l: CarlLayer) -> FeatureLayer {
    match l {
        CarlLayer::Spectral => FeatureLayer::Spectral,
        CarlLayer::Spatial => FeatureLayer::Spatial,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn carl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn carl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a `.csp` image file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn carl_image_read(path: *const c_char, out: *mut *mut CarlImage) -> CarlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let inner = read_image(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CarlImage { inner }));
        Ok(())
    })
}

/// Builds an unlabelled image from `height·width·channels` reflectances in
/// row-major pixel order with interleaved channels.
///
/// # Safety
/// `wavelengths` must hold `channels` values and `data` `height·width·channels`.
#[no_mangle]
pub unsafe extern "C" fn carl_image_new(
    height: usize,
    width: usize,
    channels: usize,
    wavelengths: *const f64,
    data: *const f64,
    out: *mut *mut CarlImage,
) -> CarlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if wavelengths.is_null() || data.is_null() {
            return Err(fail(CarlStatus::NullPointer, "wavelengths or data is null"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| fail(CarlStatus::InvalidArgument, "image size overflows"))?;
        let waves = std::slice::from_raw_parts(wavelengths, channels).to_vec();
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let inner = SpectralImage::new(height, width, waves, values, None)?;
        *out = Box::into_raw(Box::new(CarlImage { inner }));
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn carl_image_dims(image: *const CarlImage, height: *mut usize, width: *mut usize, channels: *mut usize) -> CarlStatus {
    guard(|| {
        let img = &deref(image, "image")?.inner;
        *out_ptr(height, "height")? = img.height();
        *out_ptr(width, "width")? = img.width();
        *out_ptr(channels, "channels")? = img.channels();
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn carl_image_write(image: *const CarlImage, path: *const c_char) -> CarlStatus {
    guard(|| {
        let img = deref(image, "image")?;
        write_image(path_arg(path)?, &img.inner)?;
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn carl_image_free(image: *mut CarlImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Loads the encoder of a checkpoint written by `carl pretrain` (the
/// student) or `carl train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn carl_encoder_load(path: *const c_char, out: *mut *mut CarlEncoder) -> CarlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (model, params) = load_model(&Checkpoint::load(path_arg(path)?)?)?;
        *out = Box::into_raw(Box::new(CarlEncoder { model, params }));
        Ok(())
    })
}

/// # Safety
/// `encoder` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn carl_encoder_free(encoder: *mut CarlEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Width of one patch feature vector for `layer`.
///
/// # Safety
/// `encoder` must come from this library and `dim` be writable.
#[no_mangle]
pub unsafe extern "C" fn carl_encoder_feature_dim(encoder: *const CarlEncoder, layer: CarlLayer, dim: *mut usize) -> CarlStatus {
    guard(|| {
        let cfg = deref(encoder, "encoder")?.model.config();
        *out_ptr(dim, "dim")? = match layer {
            CarlLayer::Spectral => cfg.dim_spectral,
            CarlLayer::Spatial => cfg.dim_spatial,
        };
        Ok(())
    })
}

/// Patch grid of an image of the given size.
///
/// # Safety
/// `encoder` must come from this library; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn carl_encoder_grid(
    encoder: *const CarlEncoder,
    height: usize,
    width: usize,
    grid_h: *mut usize,
    grid_w: *mut usize,
) -> CarlStatus {
    guard(|| {
        let (gh, gw) = deref(encoder, "encoder")?.model.config().grid(height, width)?;
        *out_ptr(grid_h, "grid_h")? = gh;
        *out_ptr(grid_w, "grid_w")? = gw;
        Ok(())
    })
}

/// Frozen per-patch features, `grid_h·grid_w` rows of `feature_dim` values.
/// `written` receives the required length; if `len` is smaller nothing is
/// copied and `CARL_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `out` must hold `len` values; the handles must come from this library.
#[no_mangle]
pub unsafe extern "C" fn carl_encoder_features(
    encoder: *const CarlEncoder,
    image: *const CarlImage,
    layer_kind: CarlLayer,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> CarlStatus {
    guard(|| {
        let enc = deref(encoder, "encoder")?;
        let img = deref(image, "image")?;
        let written = out_ptr(written, "written")?;
        let feats = patch_features(&enc.model, &enc.params, &[&img.inner], layer(layer_kind))?;
        *written = feats.data().len();
        if len < feats.data().len() {
            return Err(fail(CarlStatus::BufferTooSmall, format!("need {} values, got {len}", feats.data().len())));
        }
        if out.is_null() {
            return Err(fail(CarlStatus::NullPointer, "out is null"));
        }
        std::slice::from_raw_parts_mut(out, feats.data().len()).copy_from_slice(feats.data());
        Ok(())
    })
}

/// Per-pixel class predictions of a segmentation checkpoint, row-major.
///
/// # Safety
/// `out` must hold `len` values; the handles must come from this library.
#[no_mangle]
pub unsafe extern "C" fn carl_encoder_segment(encoder: *const CarlEncoder, image: *const CarlImage, out: *mut u32, len: usize) -> CarlStatus {
    guard(|| {
        let enc = deref(encoder, "encoder")?;
        let img = &deref(image, "image")?.inner;
        let n = img.height() * img.width();
        if len < n {
            return Err(fail(CarlStatus::BufferTooSmall, format!("need {n} values, got {len}")));
        }
        if out.is_null() {
            return Err(fail(CarlStatus::NullPointer, "out is null"));
        }
        let pred = predict_pixels(&enc.model, &enc.params, img)?;
        let dst = std::slice::from_raw_parts_mut(out, n);
        for (d, p) in dst.iter_mut().zip(pred) {
            *d = p as u32;
        }
        Ok(())
    })
}
