//! C ABI for scnet-core.
//!
//! Every function returns an [`ScnStatus`]; on failure a message is kept per
//! thread and can be copied out with [`scn_last_error_message`]. Models are
//! opaque handles created by [`scn_model_new`] or [`scn_model_load`] and
//! released with [`scn_model_free`].
//!
//! Images are row-major `height × width × 3` arrays of doubles; masks are
//! `height × width` bytes where any nonzero value is foreground.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scnet_core::episodes::SupportPair;
use scnet_core::eval::iou;
use scnet_core::model::{infer, init_params, load_checkpoint, save_checkpoint, ModelConfig, ParamStore};
use scnet_core::tensorcore::{BinaryMask, Tensor};
use scnet_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    EmptyMask = 4,
    Config = 5,
    Checkpoint = 6,
    Io = 7,
    Dataset = 8,
    NoBackground = 9,
    EmptyLoss = 10,
    Panic = 11,
}

/// A trained or freshly initialised model.
pub struct ScnModel {
    params: ParamStore,
    config: ModelConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn status_of(err: &Error) -> ScnStatus {
    match err {
        Error::Shape(_) => ScnStatus::Shape,
        Error::EmptyLoss => ScnStatus::EmptyLoss,
        Error::EmptyMask(_) => ScnStatus::EmptyMask,
        Error::NoBackground => ScnStatus::NoBackground,
        Error::Config(_) => ScnStatus::Config,
        Error::Checkpoint { .. } => ScnStatus::Checkpoint,
        Error::Dataset { .. } => ScnStatus::Dataset,
        Error::Io { .. } => ScnStatus::Io,
    }
}

struct Fail(ScnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ScnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ScnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ScnStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ScnStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(ScnStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn pixels(height: usize, width: usize) -> Result<usize, Fail> {
    if height == 0 || width == 0 {
        return Err(Fail(
            ScnStatus::InvalidArgument,
            "height and width must be positive".into(),
        ));
    }
    height
        .checked_mul(width)
        .filter(|n| n.checked_mul(3).is_some())
        .ok_or_else(|| Fail(ScnStatus::InvalidArgument, "image size overflows".into()))
}

unsafe fn image_arg(data: *const f64, height: usize, width: usize) -> Result<Tensor, Fail> {
    let n = pixels(height, width)?;
    let values = std::slice::from_raw_parts(data, n * 3).to_vec();
    Ok(Tensor::new(vec![height, width, 3], values)?)
}

unsafe fn mask_arg(data: *const u8, height: usize, width: usize) -> Result<BinaryMask, Fail> {
    let n = pixels(height, width)?;
    let bits = std::slice::from_raw_parts(data, n).iter().map(|&b| b != 0).collect();
    Ok(BinaryMask::new(height, width, bits)?)
}

/// Creates a model with default hyperparameters and seeded random weights.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn scn_model_new(seed: u64, out: *mut *mut ScnModel) -> ScnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ModelConfig::default();
        let params = init_params(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        *out = Box::into_raw(Box::new(ScnModel { params, config }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scn_model_load(path: *const c_char, out: *mut *mut ScnModel) -> ScnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ScnModel {
            params,
            config: ModelConfig::default(),
        }));
        Ok(())
    })
}

/// Writes the model's parameters to `path`.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn scn_model_save(model: *const ScnModel, path: *const c_char) -> ScnStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(&model.params, &path_arg(path)?)?;
        Ok(())
    })
}

/// Number of named parameter tensors in the model.
///
/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn scn_model_tensor_count(model: *const ScnModel, out: *mut usize) -> ScnStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = model.params.len();
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scn_model_free(model: *mut ScnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments `query` given `shots` labeled supports of the same size.
///
/// `support_images` holds `shots` consecutive images and `support_masks`
/// `shots` consecutive masks. `out_mask` receives `height × width` bytes of
/// 0 or 1. Height and width must be multiples of 4.
///
/// # Safety
/// All pointers must reference arrays of the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn scn_infer(
    model: *const ScnModel,
    query: *const f64,
    support_images: *const f64,
    support_masks: *const u8,
    shots: usize,
    height: usize,
    width: usize,
    out_mask: *mut u8,
) -> ScnStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if query.is_null() || support_images.is_null() || support_masks.is_null() || out_mask.is_null() {
            return Err(null("image or mask buffer"));
        }
        if shots == 0 {
            return Err(Fail(ScnStatus::InvalidArgument, "shots must be at least 1".into()));
        }
        let n = pixels(height, width)?;
        let query = image_arg(query, height, width)?;
        let support = (0..shots)
            .map(|s| {
                Ok(SupportPair {
                    image: image_arg(support_images.add(s * n * 3), height, width)?,
                    mask: mask_arg(support_masks.add(s * n), height, width)?,
                })
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        let mask = infer(&query, &support, &model.params, &model.config)?;
        let out = std::slice::from_raw_parts_mut(out_mask, n);
        for (o, &b) in out.iter_mut().zip(mask.as_slice()) {
            *o = u8::from(b);
        }
        Ok(())
    })
}

/// Intersection over union of two masks; 1 when both are empty.
///
/// # Safety
/// `pred` and `gt` must hold `height × width` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn scn_iou(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> ScnStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("mask or output"));
        }
        *out = iou(&mask_arg(pred, height, width)?, &mask_arg(gt, height, width)?)?;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must hold `len` writable bytes, or be null with `len` 0.
#[no_mangle]
pub unsafe extern "C" fn scn_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
