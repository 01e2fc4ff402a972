//! C ABI over `vmp-core`.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free` function. Every fallible call returns a [`VmpStatus`];
//! the message of the last failure on the calling thread is available from
//! [`vmp_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmp_core::container::{model_from_container, perturbation_from_container, Container};
use vmp_core::nn::SourceModel;
use vmp_core::perturbation::{predict_mc, predict_source, PerturbationSet};
use vmp_core::protocols::{sigma_l1_per_layer, sigma_l1_total};
use vmp_core::{Error, Tensor};

/// Result codes. `VMP_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numeric = 4,
    Contract = 5,
    Config = 6,
    Format = 7,
    Mismatch = 8,
    Io = 9,
    Panic = 10,
}

/// A loaded source model.
pub struct VmpModel {
    inner: SourceModel,
}

/// A loaded perturbation, bound to the model it was loaded against.
pub struct VmpPerturbation {
    inner: PerturbationSet,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> VmpStatus {
    match e {
        Error::Dimension(_) => VmpStatus::Dimension,
        Error::Numeric { .. } => VmpStatus::Numeric,
        Error::Contract(_) => VmpStatus::Contract,
        Error::Config(_) => VmpStatus::Config,
        Error::Format { .. } => VmpStatus::Format,
        Error::Mismatch(_) => VmpStatus::Mismatch,
        Error::Io { .. } => VmpStatus::Io,
    }
}

struct Fail(VmpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VmpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VmpStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            VmpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(VmpStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(VmpStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn input_batch(
    model: &SourceModel,
    inputs: *const f64,
    rows: usize,
) -> Result<Tensor, Fail> {
    if inputs.is_null() && rows > 0 {
        return Err(null("inputs"));
    }
    let per_row: usize = model.input_shape.iter().product();
    let len = rows * per_row;
    let data = if len == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(inputs, len).to_vec()
    };
    let mut shape = vec![rows];
    shape.extend(&model.input_shape);
    Ok(Tensor::new(shape, data)?)
}

unsafe fn write_out(probs: &Tensor, out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out_len < probs.len() {
        return Err(Fail(
            VmpStatus::InvalidArgument,
            format!(
                "output buffer holds {out_len} values, {} needed",
                probs.len()
            ),
        ));
    }
    if !probs.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(probs.data().as_ptr(), out, probs.len());
    }
    Ok(())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn vmp_status_str(status: VmpStatus) -> *const c_char {
    let s: &'static CStr = match status {
        VmpStatus::Ok => c"ok",
        VmpStatus::NullArgument => c"null argument",
        VmpStatus::InvalidArgument => c"invalid argument",
        VmpStatus::Dimension => c"dimension mismatch",
        VmpStatus::Numeric => c"non-finite values",
        VmpStatus::Contract => c"contract violation",
        VmpStatus::Config => c"config error",
        VmpStatus::Format => c"malformed container",
        VmpStatus::Mismatch => c"model/architecture mismatch",
        VmpStatus::Io => c"I/O error",
        VmpStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vmp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a model container written by `vmp train-source`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmp_model_load(path: *const c_char, out: *mut *mut VmpModel) -> VmpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model_from_container(&Container::load(path_arg(path)?)?)?;
        *out = Box::into_raw(Box::new(VmpModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `vmp_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vmp_model_free(model: *mut VmpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Values per input row (product of the per-sample input shape).
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn vmp_model_input_len(model: *const VmpModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.inner.input_shape.iter().product())
}

/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn vmp_model_num_classes(model: *const VmpModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Class probabilities of the unperturbed model (eval-mode BN).
///
/// `inputs` holds `rows * vmp_model_input_len` values, row-major; `out`
/// receives `rows * vmp_model_num_classes` values.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vmp_model_predict(
    model: *const VmpModel,
    inputs: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> VmpStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let probs = predict_source(m, &input_batch(m, inputs, rows)?)?;
        write_out(&probs, out, out_len)
    })
}

/// Loads a perturbation container and checks it against `model`.
///
/// # Safety
/// `model` must be live, `path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vmp_perturbation_load(
    model: *const VmpModel,
    path: *const c_char,
    out: *mut *mut VmpPerturbation,
) -> VmpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let pert = perturbation_from_container(&Container::load(path_arg(path)?)?, m)?;
        *out = Box::into_raw(Box::new(VmpPerturbation { inner: pert }));
        Ok(())
    })
}

/// # Safety
/// `pert` must come from `vmp_perturbation_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vmp_perturbation_free(pert: *mut VmpPerturbation) {
    if !pert.is_null() {
        drop(Box::from_raw(pert));
    }
}

/// Monte Carlo class probabilities averaged over `samples` weight draws.
/// Deterministic for a given `seed`.
///
/// # Safety
/// Handles must be live and pointers valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vmp_perturbation_predict(
    model: *const VmpModel,
    pert: *const VmpPerturbation,
    inputs: *const f64,
    rows: usize,
    samples: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> VmpStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let p = &pert.as_ref().ok_or_else(|| null("pert"))?.inner;
        p.check_against(m)?;
        let batch = input_batch(m, inputs, rows)?;
        let probs = predict_mc(m, p, &batch, samples, &mut ChaCha8Rng::seed_from_u64(seed))?;
        write_out(&probs, out, out_len)
    })
}

/// Sum over all perturbed weights of their standard deviation.
///
/// # Safety
/// `pert` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vmp_perturbation_sigma_l1(
    pert: *const VmpPerturbation,
    out: *mut f64,
) -> VmpStatus {
    guard(|| {
        let p = &pert.as_ref().ok_or_else(|| null("pert"))?.inner;
        *out.as_mut().ok_or_else(|| null("out"))? = sigma_l1_total(p);
        Ok(())
    })
}

/// Number of perturbed layers (rows written by `vmp_perturbation_sigma_l1_per_layer`).
///
/// # Safety
/// `pert` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn vmp_perturbation_layer_count(pert: *const VmpPerturbation) -> usize {
    pert.as_ref().map_or(0, |p| p.inner.rho.len())
}

/// Writes `(layer_id, l1_sigma)` pairs for up to `capacity` layers.
///
/// # Safety
/// `layer_ids` and `values` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn vmp_perturbation_sigma_l1_per_layer(
    pert: *const VmpPerturbation,
    layer_ids: *mut usize,
    values: *mut f64,
    capacity: usize,
) -> VmpStatus {
    guard(|| {
        let p = &pert.as_ref().ok_or_else(|| null("pert"))?.inner;
        let rows = sigma_l1_per_layer(p);
        if capacity < rows.len() {
            return Err(Fail(
                VmpStatus::InvalidArgument,
                format!("capacity {capacity} < {} layers", rows.len()),
            ));
        }
        if layer_ids.is_null() || values.is_null() {
            return Err(null("output arrays"));
        }
        for (i, (l, v)) in rows.into_iter().enumerate() {
            *layer_ids.add(i) = l;
            *values.add(i) = v;
        }
        Ok(())
    })
}
