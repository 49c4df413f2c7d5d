//! C ABI over the `advtrain` library.
//!
//! Conventions, uniform across every function:
//!
//! * Every fallible call returns an [`AdvtrainStatus`] and writes its
//!   result through out-pointers, which are only written on `Ok`.
//! * Datasets and models are opaque handles created and released by this
//!   library; every `advtrain_*_free` accepts `NULL`.
//! * Structured inputs are UTF-8 JSON documents. Missing fields take the
//!   library defaults, so `"{}"` (or a `NULL` pointer where the parameter
//!   is documented as optional) always works.
//! * Strings returned through `*mut *mut c_char` are NUL-terminated UTF-8
//!   owned by the caller; release them with [`advtrain_string_free`].
//! * On failure a thread-local message is recorded; fetch it with
//!   [`advtrain_last_error_message`]. The pointer stays valid until the
//!   same thread calls another `advtrain_*` function.
//! * Panics never unwind across the boundary; they surface as
//!   [`AdvtrainStatus::RuntimeError`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use advtrain::adversarial::AdvConfig;
use advtrain::autodiff::run_op_suite;
use advtrain::data::{generate, load, save, split, Dataset, DatasetSpec};
use advtrain::metrics::evaluate;
use advtrain::model::{ModelConfig, ModelParams};
use advtrain::optim::{train, TrainConfig};
use advtrain::Error;

/// Result of every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvtrainStatus {
    /// The call succeeded and all out-pointers were written.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A JSON document or value failed validation.
    InvalidConfig = 3,
    /// The operation itself failed (I/O, malformed file, diverged run).
    RuntimeError = 4,
}

/// An immutable dataset: a generation spec plus its example groups.
pub struct AdvtrainDataset {
    inner: Dataset,
}

/// A model: architecture plus current weights. Training mutates it in
/// place.
pub struct AdvtrainModel {
    inner: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

fn fail(e: Error) -> AdvtrainStatus {
    set_error(&e.to_string());
    match e {
        Error::Config(_) | Error::InvalidValue { .. } => AdvtrainStatus::InvalidConfig,
        _ => AdvtrainStatus::RuntimeError,
    }
}

fn null_argument(what: &str) -> AdvtrainStatus {
    set_error(&format!("{what} must not be NULL"));
    AdvtrainStatus::NullArgument
}

/// Runs `body` with panics converted to `RuntimeError` and the error slot
/// cleared up front, so `advtrain_last_error_message` reflects only the
/// most recent call.
fn guarded(body: impl FnOnce() -> AdvtrainStatus) -> AdvtrainStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            AdvtrainStatus::RuntimeError
        }
    }
}

/// # Safety
/// `ptr` must be NULL or point to a NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, AdvtrainStatus> {
    if ptr.is_null() {
        return Err(null_argument(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        AdvtrainStatus::InvalidUtf8
    })
}

fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T, AdvtrainStatus> {
    serde_json::from_str(text).map_err(|e| {
        set_error(&format!("bad {what}: {e}"));
        AdvtrainStatus::InvalidConfig
    })
}

/// Parses an optional JSON argument: NULL means "all defaults".
unsafe fn optional_json<T: DeserializeOwned + Default>(
    ptr: *const c_char,
    what: &str,
) -> Result<T, AdvtrainStatus> {
    if ptr.is_null() {
        return Ok(T::default());
    }
    parse_json(utf8_arg(ptr, what)?, what)
}

unsafe fn write_string(out: *mut *mut c_char, text: String) -> AdvtrainStatus {
    match CString::new(text) {
        Ok(c) => {
            *out = c.into_raw();
            AdvtrainStatus::Ok
        }
        Err(_) => {
            set_error("result contained an interior NUL byte");
            AdvtrainStatus::RuntimeError
        }
    }
}

unsafe fn write_json<T: serde::Serialize>(out: *mut *mut c_char, value: &T) -> AdvtrainStatus {
    match serde_json::to_string(value) {
        Ok(text) => write_string(out, text),
        Err(e) => fail(Error::Json(e)),
    }
}

/// Library version as a static NUL-terminated string; never NULL, never
/// freed.
#[no_mangle]
pub extern "C" fn advtrain_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread, or an empty
/// string after a success. Valid until the next `advtrain_*` call on the
/// same thread; do not free.
#[no_mangle]
pub extern "C" fn advtrain_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a pointer previously returned through a
/// `*mut *mut c_char` out-parameter of this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advtrain_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a dataset. `spec_json` (optional) is a JSON object with any
/// of: `task_kind` (`"relevance_ranking"` or `"pairwise_classification"`),
/// `num_examples`, `vocab_size`, `seq_len`, `options`, `key_token_count`,
/// `label_noise_rate`, `seed`.
///
/// # Safety
/// `spec_json` must be NULL or NUL-terminated; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_dataset_generate(
    spec_json: *const c_char,
    out: *mut *mut AdvtrainDataset,
) -> AdvtrainStatus {
    guarded(|| {
        if out.is_null() {
            return null_argument("out");
        }
        let spec: DatasetSpec = match optional_json(spec_json, "dataset spec") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match generate(&spec) {
            Ok(dataset) => {
                *out = Box::into_raw(Box::new(AdvtrainDataset { inner: dataset }));
                AdvtrainStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a dataset file written by `advtrain_dataset_save` (or the CLI).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_dataset_load(
    path: *const c_char,
    out: *mut *mut AdvtrainDataset,
) -> AdvtrainStatus {
    guarded(|| {
        if out.is_null() {
            return null_argument("out");
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => PathBuf::from(p),
            Err(status) => return status,
        };
        match load(path) {
            Ok(dataset) => {
                *out = Box::into_raw(Box::new(AdvtrainDataset { inner: dataset }));
                AdvtrainStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the dataset to `path` in the line-oriented JSON format `load`
/// reads.
///
/// # Safety
/// `dataset` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn advtrain_dataset_save(
    dataset: *const AdvtrainDataset,
    path: *const c_char,
) -> AdvtrainStatus {
    guarded(|| {
        let Some(dataset) = dataset.as_ref() else {
            return null_argument("dataset");
        };
        let path = match utf8_arg(path, "path") {
            Ok(p) => PathBuf::from(p),
            Err(status) => return status,
        };
        match save(&dataset.inner, path) {
            Ok(()) => AdvtrainStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Number of example groups in the dataset.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_dataset_len(
    dataset: *const AdvtrainDataset,
    out: *mut usize,
) -> AdvtrainStatus {
    guarded(|| {
        let Some(dataset) = dataset.as_ref() else {
            return null_argument("dataset");
        };
        if out.is_null() {
            return null_argument("out");
        }
        *out = dataset.inner.len();
        AdvtrainStatus::Ok
    })
}

/// The dataset's generation spec as a JSON string.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_dataset_spec_json(
    dataset: *const AdvtrainDataset,
    out: *mut *mut c_char,
) -> AdvtrainStatus {
    guarded(|| {
        let Some(dataset) = dataset.as_ref() else {
            return null_argument("dataset");
        };
        if out.is_null() {
            return null_argument("out");
        }
        write_json(out, &dataset.inner.spec)
    })
}

/// Seeded shuffle split into three new datasets. The fractions must be
/// non-negative and sum to one; each part inherits the parent spec, so the
/// same handle splits the same way every time.
///
/// # Safety
/// `dataset` must be a live handle; the three out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn advtrain_dataset_split(
    dataset: *const AdvtrainDataset,
    f_train: f64,
    f_dev: f64,
    f_test: f64,
    out_train: *mut *mut AdvtrainDataset,
    out_dev: *mut *mut AdvtrainDataset,
    out_test: *mut *mut AdvtrainDataset,
) -> AdvtrainStatus {
    guarded(|| {
        let Some(dataset) = dataset.as_ref() else {
            return null_argument("dataset");
        };
        if out_train.is_null() || out_dev.is_null() || out_test.is_null() {
            return null_argument("out_train/out_dev/out_test");
        }
        match split(&dataset.inner, (f_train, f_dev, f_test)) {
            Ok((train_groups, dev_groups, test_groups)) => {
                let wrap = |groups| {
                    Box::into_raw(Box::new(AdvtrainDataset {
                        inner: Dataset {
                            spec: dataset.inner.spec.clone(),
                            groups,
                        },
                    }))
                };
                *out_train = wrap(train_groups);
                *out_dev = wrap(dev_groups);
                *out_test = wrap(test_groups);
                AdvtrainStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a dataset handle. NULL is a no-op.
///
/// # Safety
/// `dataset` must be NULL or a live handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advtrain_dataset_free(dataset: *mut AdvtrainDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Initializes a model with seeded random weights. `config_json`
/// (optional) may set `vocab_size`, `d_emb`, `hidden` (array of
/// `{"size": n, "activation": "relu"|"tanh"}`), and `dropout_rate`.
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_model_init(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut AdvtrainModel,
) -> AdvtrainStatus {
    guarded(|| {
        if out.is_null() {
            return null_argument("out");
        }
        let config: ModelConfig = match optional_json(config_json, "model config") {
            Ok(c) => c,
            Err(status) => return status,
        };
        match ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed)) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(AdvtrainModel { inner: params }));
                AdvtrainStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a checkpoint written by `advtrain_model_save` (or the CLI).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_model_load(
    path: *const c_char,
    out: *mut *mut AdvtrainModel,
) -> AdvtrainStatus {
    guarded(|| {
        if out.is_null() {
            return null_argument("out");
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => PathBuf::from(p),
            Err(status) => return status,
        };
        match ModelParams::load(path) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(AdvtrainModel { inner: params }));
                AdvtrainStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the model's checkpoint to `path`.
///
/// # Safety
/// `model` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn advtrain_model_save(
    model: *const AdvtrainModel,
    path: *const c_char,
) -> AdvtrainStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_argument("model");
        };
        let path = match utf8_arg(path, "path") {
            Ok(p) => PathBuf::from(p),
            Err(status) => return status,
        };
        match model.inner.save(path) {
            Ok(()) => AdvtrainStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// The model's architecture as a JSON string.
///
/// # Safety
/// `model` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_model_config_json(
    model: *const AdvtrainModel,
    out: *mut *mut c_char,
) -> AdvtrainStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_argument("model");
        };
        if out.is_null() {
            return null_argument("out");
        }
        write_json(out, &model.inner.config())
    })
}

/// Releases a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must be NULL or a live handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advtrain_model_free(model: *mut AdvtrainModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Options accepted by [`advtrain_train`]: a train/dev/test split plus the
/// optimizer settings. Unknown top-level keys are rejected to catch typos.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainOptions {
    split: [f64; 3],
    train: TrainConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            split: [0.8, 0.1, 0.1],
            train: TrainConfig::default(),
        }
    }
}

fn check_vocab(model: &ModelParams, spec: &DatasetSpec) -> Result<(), Error> {
    if model.vocab_size() < spec.vocab_size {
        return Err(Error::Config(format!(
            "model vocabulary ({}) is smaller than the dataset's ({})",
            model.vocab_size(),
            spec.vocab_size
        )));
    }
    Ok(())
}

/// Trains the model in place on a split of `dataset`, keeping the epoch
/// with the best dev accuracy. `options_json` (optional) may set `split`
/// (three fractions) and `train` (objective, attack, and optimizer
/// settings; see the library docs). On success, if `out_log_json` is not
/// NULL it receives `{"best_epoch": ..., "epochs": [...]}`.
///
/// # Safety
/// `model` and `dataset` must be live handles; `options_json` must be NULL
/// or NUL-terminated; `out_log_json` must be NULL or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_train(
    model: *mut AdvtrainModel,
    dataset: *const AdvtrainDataset,
    options_json: *const c_char,
    out_log_json: *mut *mut c_char,
) -> AdvtrainStatus {
    guarded(|| {
        let Some(model) = model.as_mut() else {
            return null_argument("model");
        };
        let Some(dataset) = dataset.as_ref() else {
            return null_argument("dataset");
        };
        let options: TrainOptions = match optional_json(options_json, "train options") {
            Ok(o) => o,
            Err(status) => return status,
        };
        if let Err(e) = check_vocab(&model.inner, &dataset.inner.spec) {
            return fail(e);
        }
        let [f_train, f_dev, f_test] = options.split;
        let (train_groups, dev_groups, _) = match split(&dataset.inner, (f_train, f_dev, f_test)) {
            Ok(parts) => parts,
            Err(e) => return fail(e),
        };
        let task_kind = dataset.inner.spec.task_kind;
        match train(
            &model.inner,
            task_kind,
            &train_groups,
            &dev_groups,
            &options.train,
        ) {
            Ok(outcome) => {
                model.inner = outcome.params;
                if out_log_json.is_null() {
                    AdvtrainStatus::Ok
                } else {
                    write_json(
                        out_log_json,
                        &serde_json::json!({
                            "best_epoch": outcome.best_epoch,
                            "epochs": outcome.log,
                        }),
                    )
                }
            }
            Err(e) => fail(e),
        }
    })
}

/// Evaluates the model on every group of `dataset` and writes an
/// `EvalReport` JSON document. `attack_json` (optional) configures a
/// robust-accuracy column: any of `epsilon`, `step_size`, `steps`,
/// `alpha`, `init`; NULL measures clean metrics only. `batch_size` of 0
/// means the default (64 groups per forward pass).
///
/// # Safety
/// `model` and `dataset` must be live handles; `attack_json` must be NULL
/// or NUL-terminated; `out_report_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_evaluate(
    model: *const AdvtrainModel,
    dataset: *const AdvtrainDataset,
    attack_json: *const c_char,
    batch_size: usize,
    out_report_json: *mut *mut c_char,
) -> AdvtrainStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_argument("model");
        };
        let Some(dataset) = dataset.as_ref() else {
            return null_argument("dataset");
        };
        if out_report_json.is_null() {
            return null_argument("out_report_json");
        }
        let attack: Option<AdvConfig> = if attack_json.is_null() {
            None
        } else {
            match parse_json(
                match utf8_arg(attack_json, "attack config") {
                    Ok(s) => s,
                    Err(status) => return status,
                },
                "attack config",
            ) {
                Ok(a) => Some(a),
                Err(status) => return status,
            }
        };
        if let Err(e) = check_vocab(&model.inner, &dataset.inner.spec) {
            return fail(e);
        }
        let batch = if batch_size == 0 { 64 } else { batch_size };
        match evaluate(
            &model.inner,
            dataset.inner.spec.task_kind,
            &dataset.inner.groups,
            attack.as_ref(),
            batch,
        ) {
            Ok(report) => write_json(out_report_json, &report),
            Err(e) => fail(e),
        }
    })
}

/// Finite-difference check of every autodiff op: `trials` random points
/// per op, central differences with step `fd_step`, pass threshold
/// `tolerance`. Writes whether all ops passed to `out_passed`; if
/// `out_json` is not NULL it receives the full per-op report.
///
/// # Safety
/// `out_passed` must be a valid pointer; `out_json` must be NULL or a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advtrain_gradcheck(
    trials: usize,
    tolerance: f64,
    fd_step: f64,
    seed: u64,
    out_passed: *mut bool,
    out_json: *mut *mut c_char,
) -> AdvtrainStatus {
    guarded(|| {
        if out_passed.is_null() {
            return null_argument("out_passed");
        }
        match run_op_suite(trials, fd_step, tolerance, seed) {
            Ok(report) => {
                *out_passed = report.all_passed();
                if out_json.is_null() {
                    AdvtrainStatus::Ok
                } else {
                    write_json(out_json, &report)
                }
            }
            Err(e) => fail(e),
        }
    })
}
