//! C ABI over the varlift predictor.
//!
//! Requests and responses are UTF-8 JSON strings with the same schema as the
//! HTTP API. Every function returns a [`VarliftStatus`]; on failure the
//! message is available from [`varlift_last_error`]. Strings handed out by
//! this library must be released with [`varlift_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use varlift::predict::Predictor;
use varlift::service::{PredictRequest, RefineRequest, TypeInfo};
use varlift::typelib::{parse_canonical, ScalarTable};
use varlift::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarliftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    MissingArtifact = 4,
    Schema = 5,
    Type = 6,
    InvalidInput = 7,
    Model = 8,
    Constraint = 9,
    NotFound = 10,
    Internal = 11,
}

/// Opaque handle to a loaded model and its vocabularies.
pub struct VarliftPredictor {
    inner: Predictor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(VarliftStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => VarliftStatus::Io,
            Error::MissingArtifact(_) => VarliftStatus::MissingArtifact,
            Error::Schema { .. } => VarliftStatus::Schema,
            Error::Type(_) => VarliftStatus::Type,
            Error::InvalidFunction { .. } | Error::Config(_) | Error::Decode(_) => VarliftStatus::InvalidInput,
            Error::Constraint(_) => VarliftStatus::Constraint,
            Error::Model(_) | Error::Checkpoint { .. } | Error::Vocab(_) => VarliftStatus::Model,
            _ => VarliftStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VarliftStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VarliftStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            VarliftStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(VarliftStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(VarliftStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn handle<'a>(p: *const VarliftPredictor) -> Result<&'a Predictor, Failure> {
    p.as_ref()
        .map(|h| &h.inner)
        .ok_or_else(|| Failure(VarliftStatus::NullPointer, "predictor is null".into()))
}

unsafe fn emit(out: *mut *mut c_char, text: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(VarliftStatus::NullPointer, "output pointer is null".into()));
    }
    let c = CString::new(text).map_err(|e| Failure(VarliftStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string(v).map_err(|e| Failure(VarliftStatus::Internal, e.to_string()))
}

/// Loads a checkpoint and the dataset directory it was trained against.
///
/// # Safety
/// `checkpoint` and `data_dir` must be NUL-terminated strings and `out` a
/// valid pointer. On success `*out` owns a handle for
/// [`varlift_predictor_free`].
#[no_mangle]
pub unsafe extern "C" fn varlift_predictor_open(
    checkpoint: *const c_char,
    data_dir: *const c_char,
    out: *mut *mut VarliftPredictor,
) -> VarliftStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(VarliftStatus::NullPointer, "output pointer is null".into()));
        }
        *out = ptr::null_mut();
        let ck = str_arg(checkpoint, "checkpoint")?;
        let data = str_arg(data_dir, "data_dir")?;
        let inner = Predictor::open(Path::new(ck), Path::new(data))?;
        *out = Box::into_raw(Box::new(VarliftPredictor { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `p` must come from [`varlift_predictor_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn varlift_predictor_free(p: *mut VarliftPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Predicts types and names. `request` is `{"function": ..., "options": ...}`.
///
/// # Safety
/// Pointers must be valid; `*out` receives a string for
/// [`varlift_string_free`].
#[no_mangle]
pub unsafe extern "C" fn varlift_predict(
    p: *const VarliftPredictor,
    request: *const c_char,
    out: *mut *mut c_char,
) -> VarliftStatus {
    guard(|| {
        let pred = handle(p)?;
        let req: PredictRequest = varlift::io::from_json_str("request", str_arg(request, "request")?)?;
        let resp = pred.predict(&req.function, &req.options)?;
        emit(out, to_json(&resp)?)
    })
}

/// Re-decodes with analyst constraints. `request` adds `"constraints"`.
///
/// # Safety
/// As for [`varlift_predict`].
#[no_mangle]
pub unsafe extern "C" fn varlift_refine(
    p: *const VarliftPredictor,
    request: *const c_char,
    out: *mut *mut c_char,
) -> VarliftStatus {
    guard(|| {
        let pred = handle(p)?;
        let req: RefineRequest = varlift::io::from_json_str("request", str_arg(request, "request")?)?;
        let resp = pred.refine(&req.function, &req.constraints, &req.options)?;
        emit(out, to_json(&resp)?)
    })
}

/// Describes type-library entry `id` as JSON.
///
/// # Safety
/// As for [`varlift_predict`].
#[no_mangle]
pub unsafe extern "C" fn varlift_typelib_entry(p: *const VarliftPredictor, id: usize, out: *mut *mut c_char) -> VarliftStatus {
    guard(|| {
        let pred = handle(p)?;
        let info = TypeInfo::lookup(&pred.vocab.types, id)
            .ok_or_else(|| Failure(VarliftStatus::NotFound, format!("no type with id {id}")))?;
        emit(out, to_json(&info)?)
    })
}

/// Layout signature of a canonical type string, e.g. `char *` gives
/// `Pointer<Primitive_1>`.
///
/// # Safety
/// `canonical` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn varlift_layout_signature(canonical: *const c_char, out: *mut *mut c_char) -> VarliftStatus {
    guard(|| {
        let s = str_arg(canonical, "canonical")?;
        let entry = parse_canonical(s, &ScalarTable::default()).map_err(Error::from)?;
        let sig = entry.layout_signature().map_err(Error::from)?;
        emit(out, sig)
    })
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn varlift_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn varlift_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = varlift_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn layout_signature_round_trip() {
        let input = CString::new("const char *").unwrap();
        let mut out = ptr::null_mut();
        let st = unsafe { varlift_layout_signature(input.as_ptr(), &mut out) };
        assert_eq!(st, VarliftStatus::Ok);
        assert_eq!(unsafe { CStr::from_ptr(out) }.to_str().unwrap(), "Pointer<Primitive_1>");
        unsafe { varlift_string_free(out) };
        assert!(varlift_last_error().is_null());
    }

    #[test]
    fn errors_set_status_and_message() {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { varlift_layout_signature(ptr::null(), &mut out) }, VarliftStatus::NullPointer);
        assert!(last_error().contains("null"));
        let bad = CString::new("struct {").unwrap();
        assert_eq!(unsafe { varlift_layout_signature(bad.as_ptr(), &mut out) }, VarliftStatus::Type);
        let bytes = [0xffu8, 0];
        assert_eq!(
            unsafe { varlift_layout_signature(bytes.as_ptr() as *const c_char, &mut out) },
            VarliftStatus::InvalidUtf8
        );
        let mut h = ptr::null_mut();
        let missing = CString::new("/nonexistent/ck.json").unwrap();
        let st = unsafe { varlift_predictor_open(missing.as_ptr(), missing.as_ptr(), &mut h) };
        assert_eq!(st, VarliftStatus::MissingArtifact);
        assert!(h.is_null());
        assert!(last_error().contains("/nonexistent/ck.json"));
        unsafe { varlift_predictor_free(ptr::null_mut()) };
        unsafe { varlift_string_free(ptr::null_mut()) };
    }

    #[test]
    fn panics_are_contained() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, VarliftStatus::Internal);
        assert!(last_error().contains("boom"));
    }
}
