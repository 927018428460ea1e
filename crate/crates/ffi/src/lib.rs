//! C ABI for loading trained checkpoints, running inference and applying
//! kernel banks.
//!
//! Objects cross the boundary as opaque handles. Every fallible call returns
//! an [`MkdiffStatus`]; on failure a message is kept per thread and can be
//! read with [`mkdiff_last_error`]. Panics are caught and reported as
//! [`MkdiffStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mkdiff::pointset::PointCloud;
use mkdiff::spectral::{
    apply_bank, build_kernel_bank, DiffusionConfig, DiffusionMode, KernelBank, Propagation,
};
use mkdiff::tasks::{extract_descriptors, predict_labels, predict_logits, Checkpoint};
use mkdiff::{net::Head, Error};
use ndarray::ArrayView2;

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MkdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// A loaded checkpoint.
pub struct MkdiffModel {
    ckpt: Checkpoint,
}

/// Diffusion operators for one point cloud.
pub struct MkdiffBank {
    bank: KernelBank,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> MkdiffStatus {
    match err {
        Error::Io { .. } => MkdiffStatus::Io,
        Error::Parse { .. } | Error::Checkpoint(_) | Error::Json(_) => MkdiffStatus::Format,
        Error::IsolatedNode(_)
        | Error::NotSymmetric(_)
        | Error::NoConvergence(_)
        | Error::NonFinite(_) => MkdiffStatus::Numerical,
        _ => MkdiffStatus::InvalidArgument,
    }
}

fn fail(status: MkdiffStatus, msg: impl Into<String>) -> MkdiffStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), MkdiffStatus>) -> MkdiffStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MkdiffStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(MkdiffStatus::Internal, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, MkdiffStatus>;
}

impl<T> OrStatus<T> for mkdiff::Result<T> {
    fn or_status(self) -> Result<T, MkdiffStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), MkdiffStatus> {
    if p.is_null() {
        Err(fail(MkdiffStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Reads `n` xyz triples.
unsafe fn read_coords(coords: *const f64, n: usize) -> Result<Vec<[f64; 3]>, MkdiffStatus> {
    non_null(coords, "coords")?;
    let flat = std::slice::from_raw_parts(coords, n * 3);
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

unsafe fn out_slice<'a, T>(
    out: *mut T,
    len: usize,
    needed: usize,
) -> Result<&'a mut [T], MkdiffStatus> {
    non_null(out, "out")?;
    if len < needed {
        return Err(fail(
            MkdiffStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {needed} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(out, needed))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mkdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_model_load(
    path: *const c_char,
    out: *mut *mut MkdiffModel,
) -> MkdiffStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(MkdiffStatus::InvalidArgument, "path is not UTF-8"))?;
        let ckpt = Checkpoint::load(&PathBuf::from(path)).or_status()?;
        *out = Box::into_raw(Box::new(MkdiffModel { ckpt }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mkdiff_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_model_free(model: *mut MkdiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output channels per point (descriptor dimension or class count).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_model_out_dim(model: *const MkdiffModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.arch.out_dim)
}

/// 1 for a segmentation model, 0 for a descriptor model, -1 for null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_model_is_segmentation(model: *const MkdiffModel) -> i32 {
    match model.as_ref() {
        None => -1,
        Some(m) => i32::from(m.ckpt.arch.head == Head::Segmentation),
    }
}

/// Run the network on `n` points (`coords` holds `3n` values, row major) and
/// write the `n × out_dim` outputs to `out`: unit-norm descriptors or class
/// logits depending on the head.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_model_forward(
    model: *const MkdiffModel,
    coords: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> MkdiffStatus {
    guard(|| {
        non_null(model, "model")?;
        let ckpt = &(*model).ckpt;
        let cloud = PointCloud::new(read_coords(coords, n)?).or_status()?;
        let y = match ckpt.arch.head {
            Head::Descriptor => extract_descriptors(ckpt, &cloud),
            Head::Segmentation => predict_logits(ckpt, &cloud),
        }
        .or_status()?;
        let dst = out_slice(out, out_len, y.len())?;
        for (d, v) in dst.iter_mut().zip(y.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Predict one dataset label per point with a segmentation model.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_model_predict(
    model: *const MkdiffModel,
    coords: *const f64,
    n: usize,
    labels: *mut u32,
    labels_len: usize,
) -> MkdiffStatus {
    guard(|| {
        non_null(model, "model")?;
        let ckpt = &(*model).ckpt;
        if ckpt.arch.head != Head::Segmentation {
            return Err(fail(
                MkdiffStatus::InvalidArgument,
                "model has no segmentation head",
            ));
        }
        let cloud = PointCloud::new(read_coords(coords, n)?).or_status()?;
        let pred = predict_labels(ckpt, &cloud).or_status()?;
        out_slice(labels, labels_len, pred.len())?.copy_from_slice(&pred);
        Ok(())
    })
}

/// Build a random-walk kernel bank over `n` points with `n_sigmas` Gaussian
/// widths, `k` neighbours and `t` steps.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_bank_build(
    coords: *const f64,
    n: usize,
    sigmas: *const f64,
    n_sigmas: usize,
    k: usize,
    t: usize,
    out: *mut *mut MkdiffBank,
) -> MkdiffStatus {
    guard(|| {
        non_null(sigmas, "sigmas")?;
        non_null(out, "out")?;
        let coords = read_coords(coords, n)?;
        let sigmas = std::slice::from_raw_parts(sigmas, n_sigmas);
        let config = DiffusionConfig {
            mode: DiffusionMode::Rw,
            t,
            propagation: Propagation::SymNormalized,
            ..DiffusionConfig::default()
        };
        let bank = build_kernel_bank(&coords, sigmas, k, &config).or_status()?;
        *out = Box::into_raw(Box::new(MkdiffBank { bank }));
        Ok(())
    })
}

/// Release a bank. Null is ignored.
///
/// # Safety
/// `bank` must come from [`mkdiff_bank_build`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_bank_free(bank: *mut MkdiffBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Diffuse an `n × f` feature matrix with every kernel; writes `n × (S·f)`
/// values where column block `s` belongs to the `s`-th smallest sigma.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_bank_apply(
    bank: *const MkdiffBank,
    features: *const f64,
    f: usize,
    out: *mut f64,
    out_len: usize,
) -> MkdiffStatus {
    guard(|| {
        non_null(bank, "bank")?;
        non_null(features, "features")?;
        let bank = &(*bank).bank;
        let n = bank.n();
        let x = ArrayView2::from_shape((n, f), std::slice::from_raw_parts(features, n * f))
            .map_err(|e| fail(MkdiffStatus::InvalidArgument, e.to_string()))?;
        let y = apply_bank(bank, x).or_status()?;
        let dst = out_slice(out, out_len, y.len())?;
        for (d, v) in dst.iter_mut().zip(y.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Number of points the bank was built on, 0 for null.
///
/// # Safety
/// `bank` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mkdiff_bank_len(bank: *const MkdiffBank) -> usize {
    bank.as_ref().map_or(0, |b| b.bank.n())
}
