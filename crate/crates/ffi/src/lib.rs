//! C ABI over `slidetune`.
//!
//! Every entry point returns an [`StStatus`]; on failure the message is kept
//! per thread and read back with [`st_last_error_message`]. Handles are opaque
//! and must be released with their matching `*_free` call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use slidetune::data::{read_embedding, write_embedding, Dtype};
use slidetune::gradcore::Matrix;
use slidetune::metrics::{balanced_accuracy, roc_auc, weighted_f1, MetricValue};
use slidetune::{build_model, train, Error, LabeledBag, ModelSpec, SlideBag, SlideModel, TrainConfig};

/// Result of every call. `ST_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    State = 6,
    NonFinite = 7,
    UndefinedMetric = 8,
    Config = 9,
    Panic = 10,
}

/// Opaque trained or freshly initialized model.
pub struct StModel {
    inner: SlideModel,
}

/// Opaque bag of patch embeddings for one slide.
pub struct StBag {
    inner: SlideBag,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(StStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } | Error::Index { .. } | Error::EmptyBag(_) => StStatus::Shape,
            Error::Format { .. } => StStatus::Format,
            Error::Io { .. } => StStatus::Io,
            Error::State(_) => StStatus::State,
            Error::NonFinite(_) | Error::Divergence { .. } => StStatus::NonFinite,
            Error::UndefinedMetric(_) | Error::DegenerateData(_) => StStatus::UndefinedMetric,
            _ => StStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(StStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(StStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            StStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `s` plus a NUL into `buf` (truncating to `cap`) and returns the
/// size needed for the whole string including the NUL.
unsafe fn copy_out(s: &[u8], buf: *mut c_char, cap: usize) -> usize {
    if !buf.is_null() && cap > 0 {
        let n = s.len().min(cap - 1);
        ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
    }
    s.len() + 1
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn st_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf`. Returns the
/// buffer size needed (0 if there is no error).
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn st_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(msg) => copy_out(msg.as_bytes(), buf, cap),
        None => {
            if !buf.is_null() && cap > 0 {
                *buf = 0;
            }
            0
        }
    })
}

#[no_mangle]
pub extern "C" fn st_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Builds a bag from `n × d` row-major features.
///
/// # Safety
/// `slide_id` must be a NUL-terminated string, `features` must point to
/// `n * d` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn st_bag_new(
    slide_id: *const c_char,
    features: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut StBag,
) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let id = str_arg(slide_id, "slide_id")?;
        let len = n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?;
        let data = slice_arg(features, len, "features")?.to_vec();
        let bag = SlideBag::new(id, Matrix::new(n, d, data)?)?;
        *out = Box::into_raw(Box::new(StBag { inner: bag }));
        Ok(())
    })
}

/// Reads a bag from an embedding file.
///
/// # Safety
/// `slide_id` and `path` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn st_bag_load(slide_id: *const c_char, path: *const c_char, out: *mut *mut StBag) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let id = str_arg(slide_id, "slide_id")?;
        let features = read_embedding(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(StBag {
            inner: SlideBag::new(id, features)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `bag` must be null or a handle from `st_bag_new`/`st_bag_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_bag_free(bag: *mut StBag) {
    if !bag.is_null() {
        drop(Box::from_raw(bag));
    }
}

/// # Safety
/// `bag` must be a live handle; `n` and `d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn st_bag_shape(bag: *const StBag, n: *mut usize, d: *mut usize) -> StStatus {
    guard(|| {
        let bag = bag.as_ref().ok_or_else(|| null("bag"))?;
        *out_arg(n, "n")? = bag.inner.num_patches();
        *out_arg(d, "d")? = bag.inner.dim();
        Ok(())
    })
}

/// Writes `n × d` row-major features as an embedding file; `single` selects
/// 32-bit storage.
///
/// # Safety
/// `path` must be a NUL-terminated string and `features` must point to `n * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn st_embedding_write(path: *const c_char, features: *const f64, n: usize, d: usize, single: bool) -> StStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let len = n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?;
        let m = Matrix::new(n, d, slice_arg(features, len, "features")?.to_vec())?;
        write_embedding(&path, &m, if single { Dtype::F32 } else { Dtype::F64 })?;
        Ok(())
    })
}

/// Initializes a model from a spec string such as
/// `agg=mean head=mlp:512:relu dim=64 classes=10`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn st_model_new(spec: *const c_char, seed: u64, out: *mut *mut StModel) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec: ModelSpec = str_arg(spec, "spec")?.parse()?;
        *out = Box::into_raw(Box::new(StModel {
            inner: build_model(spec, seed)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn st_model_load(path: *const c_char, out: *mut *mut StModel) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = SlideModel::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(StModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn st_model_save(model: *const StModel, path: *const c_char) -> StStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        model.inner.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_model_free(model: *mut StModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the canonical spec string into `buf`; returns the size needed.
///
/// # Safety
/// `model` must be a live handle; `buf` null or `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn st_model_spec(model: *const StModel, buf: *mut c_char, cap: usize) -> usize {
    match model.as_ref() {
        Some(m) => copy_out(m.inner.spec().to_string().as_bytes(), buf, cap),
        None => 0,
    }
}

/// # Safety
/// `model` must be a live handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn st_model_info(model: *const StModel, num_classes: *mut usize, input_dim: *mut usize, num_params: *mut usize) -> StStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        *out_arg(num_classes, "num_classes")? = m.spec().num_classes;
        *out_arg(input_dim, "input_dim")? = m.spec().input_dim;
        *out_arg(num_params, "num_params")? = m.param_count();
        Ok(())
    })
}

/// Predicted class and softmax probabilities for one bag. `probs` may be
/// null; otherwise it must hold `num_classes` doubles.
///
/// # Safety
/// `model`, `bag` must be live handles; `class_out` writable.
#[no_mangle]
pub unsafe extern "C" fn st_model_predict(
    model: *const StModel,
    bag: *const StBag,
    class_out: *mut usize,
    probs: *mut f64,
    probs_len: usize,
) -> StStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let bag = &bag.as_ref().ok_or_else(|| null("bag"))?.inner;
        let class_out = out_arg(class_out, "class_out")?;
        let (class, p) = m.predict(bag)?;
        if !probs.is_null() {
            if probs_len != p.len() {
                return Err(invalid(format!("probs holds {probs_len} values, model has {} classes", p.len())));
            }
            ptr::copy_nonoverlapping(p.as_ptr(), probs, p.len());
        }
        *class_out = class;
        Ok(())
    })
}

/// Training settings; start from [`st_train_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct StTrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
}

#[no_mangle]
pub extern "C" fn st_train_config_default() -> StTrainConfig {
    let c = TrainConfig::default();
    StTrainConfig {
        learning_rate: c.learning_rate,
        beta1: c.beta1,
        beta2: c.beta2,
        weight_decay: c.weight_decay,
        epsilon: c.epsilon,
        epochs: c.epochs,
        seed: c.seed,
    }
}

/// Trains in place on `count` bags. `final_loss` may be null.
///
/// # Safety
/// `bags` must point to `count` live bag handles and `labels` to `count` values.
#[no_mangle]
pub unsafe extern "C" fn st_model_train(
    model: *mut StModel,
    bags: *const *const StBag,
    labels: *const usize,
    count: usize,
    config: *const StTrainConfig,
    final_loss: *mut f64,
) -> StStatus {
    guard(|| {
        let m = &mut model.as_mut().ok_or_else(|| null("model"))?.inner;
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let handles = slice_arg(bags, count, "bags")?;
        let labels = slice_arg(labels, count, "labels")?;
        let mut data = Vec::with_capacity(count);
        for (i, (&h, &label)) in handles.iter().zip(labels).enumerate() {
            let bag = h.as_ref().ok_or_else(|| null(&format!("bags[{i}]")))?;
            data.push(LabeledBag {
                bag: bag.inner.clone(),
                label,
            });
        }
        let config = TrainConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            weight_decay: c.weight_decay,
            epsilon: c.epsilon,
            epochs: c.epochs,
            seed: c.seed,
            ..TrainConfig::default()
        };
        let outcome = train(m, &data, &config)?;
        if let Some(out) = final_loss.as_mut() {
            *out = outcome.final_loss().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

unsafe fn class_metric(
    labels: *const usize,
    predicted: *const usize,
    n: usize,
    k: usize,
    out: *mut f64,
    f: fn(&[usize], &[usize], usize) -> slidetune::Result<MetricValue>,
) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let value = f(slice_arg(labels, n, "labels")?, slice_arg(predicted, n, "predicted")?, k)?;
        *out = value.value;
        Ok(())
    })
}

/// # Safety
/// `labels` and `predicted` must point to `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn st_balanced_accuracy(labels: *const usize, predicted: *const usize, n: usize, k: usize, out: *mut f64) -> StStatus {
    class_metric(labels, predicted, n, k, out, balanced_accuracy)
}

/// # Safety
/// `labels` and `predicted` must point to `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn st_weighted_f1(labels: *const usize, predicted: *const usize, n: usize, k: usize, out: *mut f64) -> StStatus {
    class_metric(labels, predicted, n, k, out, weighted_f1)
}

/// Macro one-vs-rest AUC from `n × k` row-major scores.
///
/// # Safety
/// `labels` must point to `n` values, `scores` to `n * k`; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn st_roc_auc(labels: *const usize, scores: *const f64, n: usize, k: usize, out: *mut f64) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if k == 0 {
            return Err(invalid("k must be positive"));
        }
        let len = n.checked_mul(k).ok_or_else(|| invalid("n * k overflows"))?;
        let flat = slice_arg(scores, len, "scores")?;
        let rows: Vec<Vec<f64>> = flat.chunks(k).map(<[f64]>::to_vec).collect();
        *out = roc_auc(slice_arg(labels, n, "labels")?, &rows, k)?.value;
        Ok(())
    })
}
