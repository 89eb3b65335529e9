//! C ABI over the `qcml` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_load`,
//! `*_train`/`*_fit` or a proximity constructor and released with the
//! matching `*_free`. Every fallible call returns a [`QcmlStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`qcml_last_error_message`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use qcml::forest::{fit_forest, Criterion, Forest, ForestConfig, MaxFeatures, ProxRows};
use qcml::model::{qcml_proximity_matrix, train, Loss, QcmlModel as CoreModel, TrainConfig};
use qcml::proximity::{ProximityMatrix, Role};
use qcml::QcmlError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QcmlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Schema = 3,
    Data = 4,
    Numeric = 5,
    Io = 6,
    Format = 7,
    NoOobCover = 8,
    Config = 9,
    Panic = 10,
}

/// Trained QCML model.
pub struct QcmlModel(CoreModel);

/// Fitted regression forest with bootstrap bookkeeping.
pub struct QcmlForest(Forest);

/// Dense proximity matrix.
pub struct QcmlProximity(ProximityMatrix);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &QcmlError) -> QcmlStatus {
    match e {
        QcmlError::Schema(_) => QcmlStatus::Schema,
        QcmlError::Data(_) | QcmlError::DegenerateData(_) => QcmlStatus::Data,
        QcmlError::Numeric(_) => QcmlStatus::Numeric,
        QcmlError::Usage(_) => QcmlStatus::InvalidArgument,
        QcmlError::Config { .. } => QcmlStatus::Config,
        QcmlError::NoOobCover { .. } => QcmlStatus::NoOobCover,
        QcmlError::Format(_) => QcmlStatus::Format,
        QcmlError::Io { .. } => QcmlStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(QcmlError),
}

impl From<QcmlError> for Fail {
    fn from(e: QcmlError) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QcmlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QcmlStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            QcmlStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            QcmlStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            QcmlStatus::Panic
        }
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))
}

unsafe fn f64_slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Row-major `n_rows × n_cols` buffer as owned rows.
unsafe fn rows_arg(p: *const f64, n_rows: usize, n_cols: usize) -> Result<Vec<Vec<f64>>, Fail> {
    let len = n_rows
        .checked_mul(n_cols)
        .ok_or_else(|| Fail::Arg("matrix size overflows".into()))?;
    let flat = f64_slice(p, len, "matrix")?;
    Ok(flat.chunks(n_cols.max(1)).take(n_rows).map(<[f64]>::to_vec).collect())
}

fn into_handle<T>(value: T, out: &mut *mut T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qcml_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn qcml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trains a model on a row-major `n_rows × n_cols` feature matrix in
/// original units. Remaining hyperparameters take their defaults
/// (Adam, batch 32, MAE loss).
#[no_mangle]
pub unsafe extern "C" fn qcml_model_train(
    x: *const f64,
    n_rows: usize,
    n_cols: usize,
    y: *const f64,
    hilbert_dim: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
    out: *mut *mut QcmlModel,
) -> QcmlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let rows = rows_arg(x, n_rows, n_cols)?;
        let ys = f64_slice(y, n_rows, "y")?;
        let cfg = TrainConfig {
            hilbert_dim,
            epochs,
            learning_rate,
            loss: Loss::Mae,
            seed,
            ..TrainConfig::default()
        };
        let trained = train(&cfg, &rows, ys)?;
        into_handle(QcmlModel(trained.model), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_model_load(path: *const c_char, out: *mut *mut QcmlModel) -> QcmlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = CoreModel::load(&path_arg(path)?)?;
        into_handle(QcmlModel(m), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_model_save(model: *const QcmlModel, path: *const c_char) -> QcmlStatus {
    guard(|| {
        handle(model, "model")?.0.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Number of input features, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qcml_model_n_features(model: *const QcmlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.n_features())
}

/// Hilbert-space dimension, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn qcml_model_hilbert_dim(model: *const QcmlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.hilbert_dim())
}

/// Target forecast for one point in original feature units.
#[no_mangle]
pub unsafe extern "C" fn qcml_model_forecast(
    model: *const QcmlModel,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> QcmlStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let out = out_ptr(out, "out")?;
        *out = m.0.forecast(f64_slice(x, len, "x")?)?;
        Ok(())
    })
}

/// Ground-state amplitudes for one point. `re` and `im` must each hold
/// `capacity ≥ hilbert_dim` values.
#[no_mangle]
pub unsafe extern "C" fn qcml_model_embed(
    model: *const QcmlModel,
    x: *const f64,
    len: usize,
    re: *mut f64,
    im: *mut f64,
    capacity: usize,
) -> QcmlStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let n = m.0.hilbert_dim();
        if capacity < n {
            return Err(Fail::Arg(format!("capacity {capacity} below hilbert dimension {n}")));
        }
        if re.is_null() || im.is_null() {
            return Err(Fail::Null("amplitude buffer"));
        }
        let emb = m.0.embed_raw(f64_slice(x, len, "x")?)?;
        let re = slice::from_raw_parts_mut(re, n);
        let im = slice::from_raw_parts_mut(im, n);
        for (k, a) in emb.state.amplitudes().iter().enumerate() {
            re[k] = a.re;
            im[k] = a.im;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_model_free(model: *mut QcmlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fits a regression forest. `criterion`: 0 = squared error, 1 = absolute
/// error. `max_features`: 0 = √K, otherwise all features.
#[no_mangle]
pub unsafe extern "C" fn qcml_forest_fit(
    x: *const f64,
    n_rows: usize,
    n_cols: usize,
    y: *const f64,
    n_trees: usize,
    max_depth: usize,
    min_samples_leaf: usize,
    max_features: u32,
    criterion: u32,
    seed: u64,
    out: *mut *mut QcmlForest,
) -> QcmlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let rows = rows_arg(x, n_rows, n_cols)?;
        let ys = f64_slice(y, n_rows, "y")?;
        let criterion = match criterion {
            0 => Criterion::Mse,
            1 => Criterion::Mae,
            c => return Err(Fail::Arg(format!("unknown criterion {c}"))),
        };
        let cfg = ForestConfig {
            n_trees,
            max_depth,
            min_samples_leaf,
            max_features: if max_features == 0 { MaxFeatures::Sqrt } else { MaxFeatures::All },
            criterion,
            seed,
        };
        into_handle(QcmlForest(fit_forest(&cfg, &rows, ys)?), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_forest_load(path: *const c_char, out: *mut *mut QcmlForest) -> QcmlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        into_handle(QcmlForest(Forest::load(&path_arg(path)?)?), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_forest_save(forest: *const QcmlForest, path: *const c_char) -> QcmlStatus {
    guard(|| {
        handle(forest, "forest")?.0.save(&path_arg(path)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_forest_predict(
    forest: *const QcmlForest,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> QcmlStatus {
    guard(|| {
        let f = handle(forest, "forest")?;
        let out = out_ptr(out, "out")?;
        *out = f.0.predict(f64_slice(x, len, "x")?)?;
        Ok(())
    })
}

/// Out-of-bag prediction for training point `index`; fails with
/// `QCML_STATUS_NO_OOB_COVER` when the point is in every bootstrap sample.
#[no_mangle]
pub unsafe extern "C" fn qcml_forest_oob_predict(
    forest: *const QcmlForest,
    index: usize,
    out: *mut f64,
) -> QcmlStatus {
    guard(|| {
        let f = handle(forest, "forest")?;
        let out = out_ptr(out, "out")?;
        *out = f.0.oob_predict(index)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_forest_free(forest: *mut QcmlForest) {
    if !forest.is_null() {
        drop(Box::from_raw(forest));
    }
}

/// GAP proximities of every training point to every training point.
#[no_mangle]
pub unsafe extern "C" fn qcml_forest_prox_gap_train(
    forest: *const QcmlForest,
    out: *mut *mut QcmlProximity,
) -> QcmlStatus {
    guard(|| {
        let f = handle(forest, "forest")?;
        let out = out_ptr(out, "out")?;
        let rows: Vec<usize> = (0..f.0.n_train()).collect();
        into_handle(QcmlProximity(f.0.prox_gap(ProxRows::Train(&rows))?), out);
        Ok(())
    })
}

/// GAP proximities of new points (row-major `n_rows × n_cols`) to the training points.
#[no_mangle]
pub unsafe extern "C" fn qcml_forest_prox_gap_query(
    forest: *const QcmlForest,
    x: *const f64,
    n_rows: usize,
    n_cols: usize,
    out: *mut *mut QcmlProximity,
) -> QcmlStatus {
    guard(|| {
        let f = handle(forest, "forest")?;
        let out = out_ptr(out, "out")?;
        let rows = rows_arg(x, n_rows, n_cols)?;
        into_handle(QcmlProximity(f.0.prox_gap(ProxRows::Query(&rows))?), out);
        Ok(())
    })
}

/// Ensemble-averaged QCML proximities between two row-major point sets
/// sharing `n_cols` features.
#[no_mangle]
pub unsafe extern "C" fn qcml_proximity_qcml(
    models: *const *const QcmlModel,
    n_models: usize,
    rows: *const f64,
    n_rows: usize,
    cols: *const f64,
    n_col_points: usize,
    n_cols: usize,
    out: *mut *mut QcmlProximity,
) -> QcmlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if models.is_null() {
            return Err(Fail::Null("models"));
        }
        let ms = slice::from_raw_parts(models, n_models)
            .iter()
            .map(|&m| handle(m, "model").map(|m| m.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let r = rows_arg(rows, n_rows, n_cols)?;
        let c = rows_arg(cols, n_col_points, n_cols)?;
        into_handle(
            QcmlProximity(qcml_proximity_matrix(&ms, &r, &c, Role::Test, Role::Train)?),
            out,
        );
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_proximity_load(path: *const c_char, out: *mut *mut QcmlProximity) -> QcmlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        into_handle(QcmlProximity(ProximityMatrix::load(&path_arg(path)?)?), out);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_proximity_save(p: *const QcmlProximity, path: *const c_char) -> QcmlStatus {
    guard(|| {
        handle(p, "proximity")?.0.save(&path_arg(path)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_proximity_rows(p: *const QcmlProximity) -> usize {
    p.as_ref().map_or(0, |p| p.0.rows())
}

#[no_mangle]
pub unsafe extern "C" fn qcml_proximity_cols(p: *const QcmlProximity) -> usize {
    p.as_ref().map_or(0, |p| p.0.cols())
}

#[no_mangle]
pub unsafe extern "C" fn qcml_proximity_get(
    p: *const QcmlProximity,
    row: usize,
    col: usize,
    out: *mut f64,
) -> QcmlStatus {
    guard(|| {
        let p = handle(p, "proximity")?;
        let out = out_ptr(out, "out")?;
        if row >= p.0.rows() || col >= p.0.cols() {
            return Err(Fail::Arg(format!(
                "entry ({row}, {col}) outside {}x{}",
                p.0.rows(),
                p.0.cols()
            )));
        }
        *out = p.0.get(row, col);
        Ok(())
    })
}

/// Copies the row-major values into `buf`, which must hold `rows × cols` entries.
#[no_mangle]
pub unsafe extern "C" fn qcml_proximity_copy(p: *const QcmlProximity, buf: *mut f64, capacity: usize) -> QcmlStatus {
    guard(|| {
        let p = handle(p, "proximity")?;
        let v = p.0.values();
        if capacity < v.len() {
            return Err(Fail::Arg(format!("capacity {capacity} below {} entries", v.len())));
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        slice::from_raw_parts_mut(buf, v.len()).copy_from_slice(v);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qcml_proximity_free(p: *mut QcmlProximity) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
