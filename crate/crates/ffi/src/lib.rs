//! C ABI over the `coae` detector.
//!
//! Every fallible function returns a [`CoaeStatus`]; on failure the message
//! is available from [`coae_last_error`] on the same thread. Models are
//! opaque handles created by [`coae_model_new`] or [`coae_model_load`] and
//! released with [`coae_model_free`]. Images are `3×S×S` planar RGB
//! doubles in `[0, 1]`; queries are `3×Q×Q`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use coae::config::RunConfig;
use coae::detector::{iou, BBox, Detector};
use coae::losses::{margin_ranking_loss, MarginConfig, RankedBatch};
use coae::tensor::{load_checkpoint, save_checkpoint};
use coae::{Error, ParamStore, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    Config = 5,
    Io = 6,
    Checkpoint = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoaeBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoaeDetection {
    pub bbox: CoaeBox,
    pub score: f64,
}

/// Opaque model handle.
pub struct CoaeModel {
    config: RunConfig,
    detector: Detector,
    params: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CoaeStatus {
    match e {
        Error::Dimension(_) => CoaeStatus::Dimension,
        Error::NonFinite(_) => CoaeStatus::NonFinite,
        Error::Usage(_) => CoaeStatus::InvalidArgument,
        Error::Config(_) | Error::Parse { .. } => CoaeStatus::Config,
        Error::Checkpoint(_) => CoaeStatus::Checkpoint,
        Error::Io(_) => CoaeStatus::Io,
    }
}

struct Fail(CoaeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CoaeStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording its error and containing panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CoaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CoaeStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CoaeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CoaeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn config_arg(text: *const c_char) -> Result<RunConfig, Fail> {
    let cfg = if text.is_null() {
        RunConfig::default()
    } else {
        RunConfig::parse(str_arg(text, "config")?, "<config>")?
    };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn model_arg<'a>(m: *const CoaeModel) -> Result<&'a CoaeModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn planar(ptr: *const f64, len: usize, side: usize, what: &str) -> Result<Tensor, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let want = 3 * side * side;
    if len != want {
        return Err(Fail(
            CoaeStatus::Dimension,
            format!("{what} holds {len} values, expected 3×{side}×{side} = {want}"),
        ));
    }
    let data = std::slice::from_raw_parts(ptr, len).to_vec();
    Ok(Tensor::new(vec![3, side, side], data)?)
}

fn to_bbox(b: &CoaeBox) -> Result<BBox, Fail> {
    Ok(BBox::new(b.x1, b.y1, b.x2, b.y2)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn coae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Freshly initialized model. `config` is key = value text or null for
/// the defaults.
#[no_mangle]
pub unsafe extern "C" fn coae_model_new(
    config: *const c_char,
    seed: u64,
    out: *mut *mut CoaeModel,
) -> CoaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = config_arg(config)?;
        let detector = Detector::new(config.detector.clone())?;
        let params = detector.init_params(seed)?;
        *out = Box::into_raw(Box::new(CoaeModel {
            config,
            detector,
            params,
        }));
        Ok(())
    })
}

/// Model with parameters read from a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn coae_model_load(
    config: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut CoaeModel,
) -> CoaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = config_arg(config)?;
        let path = str_arg(checkpoint, "checkpoint")?;
        let detector = Detector::new(config.detector.clone())?;
        let params = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(CoaeModel {
            config,
            detector,
            params,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn coae_model_save(
    model: *const CoaeModel,
    path: *const c_char,
) -> CoaeStatus {
    guard(|| {
        let m = model_arg(model)?;
        save_checkpoint(str_arg(path, "path")?, &m.params)?;
        Ok(())
    })
}

/// Releases a model; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn coae_model_free(model: *mut CoaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image side `S`, query side `Q` and channel count `N` of a model.
#[no_mangle]
pub unsafe extern "C" fn coae_model_dims(
    model: *const CoaeModel,
    image_size: *mut usize,
    query_size: *mut usize,
    channels: *mut usize,
) -> CoaeStatus {
    guard(|| {
        let m = model_arg(model)?;
        if image_size.is_null() || query_size.is_null() || channels.is_null() {
            return Err(null("output pointer"));
        }
        *image_size = m.config.detector.image_size;
        *query_size = m.config.detector.query_size;
        *channels = m.config.detector.channels;
        Ok(())
    })
}

/// Ranked detections of the query's class. Writes at most `capacity`
/// entries to `out` and the total count to `count`; `out` may be null
/// when `capacity` is zero.
#[no_mangle]
pub unsafe extern "C" fn coae_detect(
    model: *const CoaeModel,
    image: *const f64,
    image_len: usize,
    query: *const f64,
    query_len: usize,
    out: *mut CoaeDetection,
    capacity: usize,
    count: *mut usize,
) -> CoaeStatus {
    guard(|| {
        let m = model_arg(model)?;
        if count.is_null() || (out.is_null() && capacity > 0) {
            return Err(null("output pointer"));
        }
        let img = planar(image, image_len, m.config.detector.image_size, "image")?;
        let q = planar(query, query_len, m.config.detector.query_size, "query")?;
        let dets = m.detector.detect(&m.params, &img, &q)?;
        for (i, d) in dets.iter().take(capacity).enumerate() {
            *out.add(i) = CoaeDetection {
                bbox: CoaeBox {
                    x1: d.bbox.x1,
                    y1: d.bbox.y1,
                    x2: d.bbox.x2,
                    y2: d.bbox.y2,
                },
                score: d.score,
            };
        }
        *count = dets.len();
        Ok(())
    })
}

/// Co-excitation vector of a pair into `out` (`N` values). Fails with
/// `COAE_STATUS_INVALID_ARGUMENT` when the model has no co-excitation.
#[no_mangle]
pub unsafe extern "C" fn coae_coexcitation(
    model: *const CoaeModel,
    image: *const f64,
    image_len: usize,
    query: *const f64,
    query_len: usize,
    out: *mut f64,
    capacity: usize,
) -> CoaeStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let n = m.config.detector.channels;
        if capacity < n {
            return Err(Fail(
                CoaeStatus::InvalidArgument,
                format!("capacity {capacity} is below the {n} channels"),
            ));
        }
        let img = planar(image, image_len, m.config.detector.image_size, "image")?;
        let q = planar(query, query_len, m.config.detector.query_size, "query")?;
        let w = m
            .detector
            .coexcitation(&m.params, &img, &q)?
            .ok_or_else(|| {
                Fail(
                    CoaeStatus::InvalidArgument,
                    "co-excitation is disabled".into(),
                )
            })?;
        ptr::copy_nonoverlapping(w.as_ptr(), out, n);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn coae_iou(
    a: *const CoaeBox,
    b: *const CoaeBox,
    out: *mut f64,
) -> CoaeStatus {
    guard(|| {
        let (a, b) = match (a.as_ref(), b.as_ref()) {
            (Some(a), Some(b)) => (to_bbox(a)?, to_bbox(b)?),
            _ => return Err(null("box")),
        };
        if out.is_null() {
            return Err(null("out"));
        }
        *out = iou(&a, &b);
        Ok(())
    })
}

/// Margin-based ranking loss of `k` scores in `[0, 1]` with 0/1 labels,
/// summed over proposals and pairs.
#[no_mangle]
pub unsafe extern "C" fn coae_margin_ranking_loss(
    scores: *const f64,
    labels: *const u8,
    k: usize,
    m_plus: f64,
    m_minus: f64,
    out: *mut f64,
) -> CoaeStatus {
    guard(|| {
        if out.is_null() || (k > 0 && (scores.is_null() || labels.is_null())) {
            return Err(null("argument"));
        }
        let (s, y) = if k == 0 {
            (Vec::new(), Vec::new())
        } else {
            (
                std::slice::from_raw_parts(scores, k).to_vec(),
                std::slice::from_raw_parts(labels, k).to_vec(),
            )
        };
        let batch = RankedBatch::new(s, y)?;
        let cfg = MarginConfig {
            m_plus,
            m_minus,
            normalize: false,
        };
        *out = margin_ranking_loss(&batch, &cfg)?;
        Ok(())
    })
}
