//! C interface to the vtsfe library.
//!
//! Datasets and models are opaque handles created by `vtsfe_*` functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`VtsfeStatus`]; on failure [`vtsfe_last_error`] describes what went
//! wrong on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::{Array2, ArrayView2};
use vtsfe::config::RunConfig;
use vtsfe::data::{load_dataset, preprocess, synth_generate, MotionDataset, SynthConfig};
use vtsfe::eval::evaluate;
use vtsfe::training::{train, Checkpoint};
use vtsfe::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtsfeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration or arguments.
    Config = 2,
    /// Malformed input data or checkpoint.
    Data = 3,
    /// Computation failed, e.g. a non-finite loss.
    Runtime = 4,
    /// File system error.
    Io = 5,
    /// The library panicked; the handle arguments should not be reused.
    Panic = 6,
}

/// Opaque dataset handle.
pub struct VtsfeDataset {
    inner: MotionDataset,
}

/// Opaque trained model handle.
pub struct VtsfeModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> VtsfeStatus {
    match err {
        Error::Config(_) | Error::SampleCap { .. } | Error::Diff(_) => VtsfeStatus::Config,
        Error::Data { .. } | Error::DataRow { .. } | Error::Json { .. } => VtsfeStatus::Data,
        Error::NonFiniteLoss { .. } => VtsfeStatus::Runtime,
        Error::Io { .. } => VtsfeStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (VtsfeStatus, String)>) -> VtsfeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VtsfeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".to_string());
            VtsfeStatus::Panic
        }
    }
}

fn lib<T>(r: vtsfe::Result<T>) -> Result<T, (VtsfeStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (VtsfeStatus, String) {
    (VtsfeStatus::NullArgument, format!("{what} is null"))
}

fn config_err(msg: impl Into<String>) -> (VtsfeStatus, String) {
    (VtsfeStatus::Config, msg.into())
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, (VtsfeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| config_err(format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (VtsfeStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), (VtsfeStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vtsfe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates the synthetic motion set.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_dataset_synth(
    classes: usize,
    demos: usize,
    frames: usize,
    dims: usize,
    seed: u64,
    out: *mut *mut VtsfeDataset,
) -> VtsfeStatus {
    guard(|| {
        let cfg = SynthConfig {
            classes,
            demos,
            frames,
            dims,
            seed,
        };
        let inner = lib(synth_generate(&cfg))?;
        store(out, VtsfeDataset { inner })
    })
}

/// Loads a dataset from a JSON manifest.
///
/// # Safety
/// `manifest` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_dataset_load(manifest: *const c_char, out: *mut *mut VtsfeDataset) -> VtsfeStatus {
    guard(|| {
        let path = path_arg(manifest, "manifest")?;
        let inner = lib(load_dataset(path))?;
        store(out, VtsfeDataset { inner })
    })
}

/// Number of demonstrations, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_dataset_len(ds: *const VtsfeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Frame count and dimension of demonstration `index`.
///
/// # Safety
/// `ds` must be a live handle; `frames` and `dims` writable.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_dataset_demo_shape(
    ds: *const VtsfeDataset,
    index: usize,
    frames: *mut usize,
    dims: *mut usize,
) -> VtsfeStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        if frames.is_null() || dims.is_null() {
            return Err(null("output pointer"));
        }
        let demo = ds
            .inner
            .demos
            .get(index)
            .ok_or_else(|| config_err(format!("demo {index} out of range (len {})", ds.inner.len())))?;
        *frames = demo.frames.nrows();
        *dims = demo.frames.ncols();
        Ok(())
    })
}

/// Copies demonstration `index` into `buf` in row-major order.
/// `len` must equal frames × dims.
///
/// # Safety
/// `ds` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_dataset_demo_copy(
    ds: *const VtsfeDataset,
    index: usize,
    buf: *mut f64,
    len: usize,
) -> VtsfeStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let demo = ds
            .inner
            .demos
            .get(index)
            .ok_or_else(|| config_err(format!("demo {index} out of range (len {})", ds.inner.len())))?;
        if len != demo.frames.len() {
            return Err(config_err(format!(
                "buffer holds {len} values, demo has {}",
                demo.frames.len()
            )));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, s) in dst.iter_mut().zip(demo.frames.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_dataset_free(ds: *mut VtsfeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

fn parse_config(json: *const c_char) -> Result<RunConfig, (VtsfeStatus, String)> {
    if json.is_null() {
        return Ok(RunConfig::default());
    }
    let text = unsafe { CStr::from_ptr(json) }
        .to_str()
        .map_err(|_| config_err("config is not valid UTF-8"))?;
    serde_json::from_str(text).map_err(|e| config_err(format!("config: {e}")))
}

/// Trains a model on `ds`. `config_json` uses the keys of the CLI's
/// configuration file and may be null for defaults. The data are resampled
/// and normalized as by the `train` command.
///
/// # Safety
/// `ds` must be a live handle, `config_json` null or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_train(
    ds: *const VtsfeDataset,
    config_json: *const c_char,
    out: *mut *mut VtsfeModel,
) -> VtsfeStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let rc = parse_config(config_json)?;
        let tc = lib(rc.train_config(ds.inner.dims))?;
        let prepared = lib(preprocess(&ds.inner, rc.t_full(), None))?;
        let all: Vec<usize> = (0..prepared.len()).collect();
        let (params, history) = lib(train(&prepared.sequences(&all), &tc))?;
        let epochs = history.epochs.len();
        let checkpoint = Checkpoint::new(tc, prepared.scaler.clone(), epochs, params);
        store(out, VtsfeModel { checkpoint })
    })
}

/// Loads a checkpoint written by the CLI or [`vtsfe_model_save`].
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_model_load(path: *const c_char, out: *mut *mut VtsfeModel) -> VtsfeStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let checkpoint = lib(Checkpoint::load(path))?;
        store(out, VtsfeModel { checkpoint })
    })
}

/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_model_save(model: *const VtsfeModel, path: *const c_char) -> VtsfeStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = path_arg(path, "path")?;
        lib(model.checkpoint.save(path))
    })
}

/// Input dimension, latent dimension and sequence length of a model.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_model_shape(
    model: *const VtsfeModel,
    input_dim: *mut usize,
    latent_dim: *mut usize,
    seq_len: *mut usize,
) -> VtsfeStatus {
    guard(|| {
        let nets = &ref_arg(model, "model")?.checkpoint.config.model.nets;
        for (p, v) in [
            (input_dim, nets.input_dim),
            (latent_dim, nets.latent_dim),
            (seq_len, nets.forcing.seq_len),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Reconstructs one normalized sequence of `frames` × input_dim values
/// (row-major, `frames` equal to the model's sequence length). Writes the
/// decoded means to `recon` (same size) and, if non-null, the latent
/// trajectory to `latent` (`frames` × latent_dim).
///
/// # Safety
/// `model` must be a live handle; `input` and `recon` valid for
/// frames × input_dim values; `latent` null or valid for frames ×
/// latent_dim values.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_model_reconstruct(
    model: *const VtsfeModel,
    input: *const f64,
    frames: usize,
    recon: *mut f64,
    latent: *mut f64,
) -> VtsfeStatus {
    guard(|| {
        let ck = &ref_arg(model, "model")?.checkpoint;
        if input.is_null() || recon.is_null() {
            return Err(null("buffer"));
        }
        let nets = &ck.config.model.nets;
        if frames != nets.forcing.seq_len {
            return Err(config_err(format!(
                "sequence has {frames} frames, model expects {}",
                nets.forcing.seq_len
            )));
        }
        let d = nets.input_dim;
        let x: Array2<f64> = ArrayView2::from_shape((frames, d), std::slice::from_raw_parts(input, frames * d))
            .map_err(|e| config_err(e.to_string()))?
            .to_owned();
        let (traj, rec) = lib(ck.model().reconstruct_sequence(&x, ck.config.l_sub))?;
        let dst = std::slice::from_raw_parts_mut(recon, frames * d);
        for (o, v) in dst.iter_mut().zip(rec.iter()) {
            *o = *v;
        }
        if !latent.is_null() {
            let dst = std::slice::from_raw_parts_mut(latent, traj.z.len());
            for (o, v) in dst.iter_mut().zip(traj.z.iter()) {
                *o = *v;
            }
        }
        Ok(())
    })
}

/// Reconstruction MSE (reported scale, ×10³) and Σvar of the model on a
/// raw dataset, which is resampled and scaled with the model's scaler.
///
/// # Safety
/// `model` and `ds` must be live handles; `mse` and `sum_var` writable.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_model_evaluate(
    model: *const VtsfeModel,
    ds: *const VtsfeDataset,
    mse: *mut f64,
    sum_var: *mut f64,
) -> VtsfeStatus {
    guard(|| {
        let ck = &ref_arg(model, "model")?.checkpoint;
        let ds = ref_arg(ds, "dataset")?;
        if mse.is_null() || sum_var.is_null() {
            return Err(null("output pointer"));
        }
        let prepared = lib(ck.prepare(ds.inner.clone()))?;
        let all: Vec<usize> = (0..prepared.len()).collect();
        let (m, v) = lib(evaluate(&ck.model(), &prepared.sequences(&all), ck.config.l_sub))?;
        *mse = m;
        *sum_var = v;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vtsfe_model_free(model: *mut VtsfeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
