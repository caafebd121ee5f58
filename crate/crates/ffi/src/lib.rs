#![allow(clippy::missing_safety_doc)] // pointer contracts are documented at the crate level

//! C ABI for the consolidate toolkit.
//!
//! Checkpoints travel as opaque handles; every call returns a status code
//! and the last error detail is retrievable per thread. The generated
//! header lives at `include/consolidate.h`.
//!
//! Ownership rules: handles returned through out-pointers belong to the
//! caller and must be released with `consolidate_checkpoint_free`. Strings
//! returned as `const char*` are borrowed — from the handle for tensor
//! names, from thread-local storage for error messages — and remain valid
//! until the next call that touches the same storage.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use consolidate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use consolidate::error::Error;
use consolidate::merge::{execute_recipe, RecipeFile};
use consolidate::taskvec::compute_task_vector;

/// Status codes mirrored from the library's error variants.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsolidateStatus {
    Ok = 0,
    ShapeError = 1,
    DataError = 2,
    SingularError = 3,
    ValidationError = 4,
    RecipeError = 5,
    RankError = 6,
    GeometryError = 7,
    DivergenceError = 8,
    FormatError = 9,
    IoError = 10,
    NullArgument = 11,
    InvalidUtf8 = 12,
    InternalPanic = 13,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> ConsolidateStatus {
    match err {
        Error::Shape { .. } => ConsolidateStatus::ShapeError,
        Error::Data { .. } => ConsolidateStatus::DataError,
        Error::Singular { .. } => ConsolidateStatus::SingularError,
        Error::Validation { .. } => ConsolidateStatus::ValidationError,
        Error::Recipe { .. } => ConsolidateStatus::RecipeError,
        Error::Rank { .. } => ConsolidateStatus::RankError,
        Error::DegenerateGeometry { .. } => ConsolidateStatus::GeometryError,
        Error::Divergence { .. } => ConsolidateStatus::DivergenceError,
        Error::Format { .. } => ConsolidateStatus::FormatError,
        Error::Io { .. } => ConsolidateStatus::IoError,
    }
}

fn fail(err: &Error) -> ConsolidateStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Guards the FFI boundary: panics become `InternalPanic` instead of UB.
fn guarded(f: impl FnOnce() -> ConsolidateStatus) -> ConsolidateStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            ConsolidateStatus::InternalPanic
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, ConsolidateStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(ConsolidateStatus::NullArgument);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error("argument is not valid UTF-8");
            Err(ConsolidateStatus::InvalidUtf8)
        }
    }
}

/// Opaque checkpoint handle.
pub struct ConsolidateCheckpoint {
    inner: Checkpoint,
    names: Vec<CString>,
}

impl ConsolidateCheckpoint {
    fn new(inner: Checkpoint) -> Box<ConsolidateCheckpoint> {
        let names = inner
            .manifest
            .entries
            .iter()
            .map(|e| CString::new(e.name.as_str()).unwrap_or_default())
            .collect();
        Box::new(ConsolidateCheckpoint { inner, names })
    }
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn consolidate_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Detail text of the last error on this thread; empty when no error.
#[no_mangle]
pub extern "C" fn consolidate_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Reads an MRGF checkpoint from `path` into a new handle.
#[no_mangle]
pub unsafe extern "C" fn consolidate_checkpoint_read(
    path: *const c_char,
    out: *mut *mut ConsolidateCheckpoint,
) -> ConsolidateStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return ConsolidateStatus::NullArgument;
        }
        let path = match unsafe { cstr_arg(path) } {
            Ok(p) => p,
            Err(code) => return code,
        };
        match read_checkpoint(Path::new(path)) {
            Ok(ck) => {
                unsafe { *out = Box::into_raw(ConsolidateCheckpoint::new(ck)) };
                ConsolidateStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the handle's checkpoint to `path` (atomic temp-and-rename).
#[no_mangle]
pub unsafe extern "C" fn consolidate_checkpoint_write(
    handle: *const ConsolidateCheckpoint,
    path: *const c_char,
) -> ConsolidateStatus {
    guarded(|| {
        let Some(h) = (unsafe { handle.as_ref() }) else {
            set_error("null checkpoint handle");
            return ConsolidateStatus::NullArgument;
        };
        let path = match unsafe { cstr_arg(path) } {
            Ok(p) => p,
            Err(code) => return code,
        };
        match write_checkpoint(&h.inner, Path::new(path)) {
            Ok(()) => ConsolidateStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Releases a handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn consolidate_checkpoint_free(handle: *mut ConsolidateCheckpoint) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Number of tensors in the checkpoint; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn consolidate_checkpoint_tensor_count(
    handle: *const ConsolidateCheckpoint,
) -> usize {
    unsafe { handle.as_ref() }.map_or(0, |h| h.names.len())
}

/// Borrowed tensor name at `index` in manifest order; null when out of range.
#[no_mangle]
pub unsafe extern "C" fn consolidate_checkpoint_tensor_name(
    handle: *const ConsolidateCheckpoint,
    index: usize,
) -> *const c_char {
    unsafe { handle.as_ref() }
        .and_then(|h| h.names.get(index))
        .map_or(std::ptr::null(), |n| n.as_ptr())
}

/// Element count of the named tensor.
#[no_mangle]
pub unsafe extern "C" fn consolidate_checkpoint_tensor_len(
    handle: *const ConsolidateCheckpoint,
    name: *const c_char,
    out_len: *mut usize,
) -> ConsolidateStatus {
    guarded(|| {
        let Some(h) = (unsafe { handle.as_ref() }) else {
            set_error("null checkpoint handle");
            return ConsolidateStatus::NullArgument;
        };
        if out_len.is_null() {
            set_error("null out pointer");
            return ConsolidateStatus::NullArgument;
        }
        let name = match unsafe { cstr_arg(name) } {
            Ok(n) => n,
            Err(code) => return code,
        };
        match h.inner.tensor(name) {
            Ok(t) => {
                unsafe { *out_len = t.len() };
                ConsolidateStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the tensor shape into `out_dims` (up to `cap` entries) and the
/// rank into `out_rank`.
#[no_mangle]
pub unsafe extern "C" fn consolidate_checkpoint_tensor_shape(
    handle: *const ConsolidateCheckpoint,
    name: *const c_char,
    out_dims: *mut usize,
    cap: usize,
    out_rank: *mut usize,
) -> ConsolidateStatus {
    guarded(|| {
        let Some(h) = (unsafe { handle.as_ref() }) else {
            set_error("null checkpoint handle");
            return ConsolidateStatus::NullArgument;
        };
        if out_rank.is_null() {
            set_error("null out pointer");
            return ConsolidateStatus::NullArgument;
        }
        let name = match unsafe { cstr_arg(name) } {
            Ok(n) => n,
            Err(code) => return code,
        };
        match h.inner.tensor(name) {
            Ok(t) => {
                let shape = t.shape();
                unsafe { *out_rank = shape.len() };
                if !out_dims.is_null() {
                    for (i, &d) in shape.iter().take(cap).enumerate() {
                        unsafe { *out_dims.add(i) = d };
                    }
                }
                ConsolidateStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Copies the tensor's row-major f32 data into `out` (capacity `cap`).
#[no_mangle]
pub unsafe extern "C" fn consolidate_checkpoint_tensor_data(
    handle: *const ConsolidateCheckpoint,
    name: *const c_char,
    out: *mut f32,
    cap: usize,
) -> ConsolidateStatus {
    guarded(|| {
        let Some(h) = (unsafe { handle.as_ref() }) else {
            set_error("null checkpoint handle");
            return ConsolidateStatus::NullArgument;
        };
        if out.is_null() {
            set_error("null out pointer");
            return ConsolidateStatus::NullArgument;
        }
        let name = match unsafe { cstr_arg(name) } {
            Ok(n) => n,
            Err(code) => return code,
        };
        match h.inner.tensor(name) {
            Ok(t) => {
                if cap < t.len() {
                    set_error("output buffer too small");
                    return ConsolidateStatus::ShapeError;
                }
                unsafe {
                    std::ptr::copy_nonoverlapping(t.data().as_ptr(), out, t.len());
                }
                ConsolidateStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Model-level task-vector norm ‖expert − base‖ across all tensors.
#[no_mangle]
pub unsafe extern "C" fn consolidate_delta_norm(
    base: *const ConsolidateCheckpoint,
    expert: *const ConsolidateCheckpoint,
    out_norm: *mut f64,
) -> ConsolidateStatus {
    guarded(|| {
        let (Some(b), Some(e)) = (unsafe { base.as_ref() }, unsafe { expert.as_ref() }) else {
            set_error("null checkpoint handle");
            return ConsolidateStatus::NullArgument;
        };
        if out_norm.is_null() {
            set_error("null out pointer");
            return ConsolidateStatus::NullArgument;
        }
        match compute_task_vector(&b.inner, &e.inner) {
            Ok(tv) => {
                unsafe { *out_norm = tv.model_norm() };
                ConsolidateStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Parses a recipe JSON document (the same schema the CLI accepts, with
/// base/expert/calibration paths inside), runs the merge, and writes the
/// merged checkpoint to `out_path`.
#[no_mangle]
pub unsafe extern "C" fn consolidate_merge_recipe_json(
    recipe_json: *const c_char,
    out_path: *const c_char,
) -> ConsolidateStatus {
    guarded(|| {
        let json = match unsafe { cstr_arg(recipe_json) } {
            Ok(s) => s,
            Err(code) => return code,
        };
        let out_path = match unsafe { cstr_arg(out_path) } {
            Ok(s) => s,
            Err(code) => return code,
        };
        match run_recipe(json, out_path) {
            Ok(()) => ConsolidateStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

fn run_recipe(json: &str, out_path: &str) -> Result<(), Error> {
    let file = RecipeFile::from_json(json)?;
    let recipe = file.to_recipe()?;
    let base = read_checkpoint(Path::new(&file.base))?;
    let experts: Vec<Checkpoint> = file
        .experts
        .iter()
        .map(|p| read_checkpoint(Path::new(p)))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Checkpoint> = experts.iter().collect();
    let cals = match &file.calibration {
        None => None,
        Some(paths) => {
            let sets = paths
                .iter()
                .map(|p| {
                    let ds = consolidate::testbed::read_dataset(Path::new(p))?;
                    let labels = (!ds.labels.is_empty()).then_some(ds.labels);
                    consolidate::calibrate::CalibrationSet::with_labels(
                        ds.inputs,
                        labels,
                        &format!("task{}", ds.task_id),
                        recipe.seed,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(sets)
        }
    };
    let merged = execute_recipe(&recipe, &base, &refs, cals.as_deref())?;
    write_checkpoint(&merged.checkpoint, Path::new(out_path))
}
