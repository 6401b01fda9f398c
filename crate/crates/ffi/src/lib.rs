//! C ABI over `nnleak`.
//!
//! Models and oracles cross the boundary as opaque handles. Every fallible
//! call returns a [`Status`]; the message for the most recent failure on the
//! calling thread is available from [`nnleak_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nnleak::arith::CostProfile;
use nnleak::attack::recover_model;
use nnleak::network::{self, NetworkModel};
use nnleak::oracle::{JitterConfig, Oracle};
use nnleak::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    AttackFailed = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A parsed network model.
pub struct NnleakModel(NetworkModel);

/// A simulated device answering timing queries for one model.
pub struct NnleakOracle {
    oracle: Oracle,
    profile: CostProfile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(Status, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Parse { .. } => Status::Parse,
            Error::Io(_) => Status::Io,
            Error::Correlation(_) | Error::Inconsistent(_) | Error::Precondition(_) => {
                Status::AttackFailed
            }
            Error::Encoding(_) | Error::Profile(_) | Error::Structure(_) | Error::Input(_) => {
                Status::InvalidArgument
            }
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(Status::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Status::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            Status::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(Status::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nnleak_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parse a model from its text form.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn nnleak_model_parse(
    text: *const c_char,
    out: *mut *mut NnleakModel,
) -> Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = network::parse_model(str_arg(text, "text")?)?;
        put(out, NnleakModel(m));
        Ok(())
    })
}

/// Load a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn nnleak_model_load(
    path: *const c_char,
    out: *mut *mut NnleakModel,
) -> Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = network::load_model(Path::new(str_arg(path, "path")?))?;
        put(out, NnleakModel(m));
        Ok(())
    })
}

/// Serialize a model. Release the string with [`nnleak_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn nnleak_model_write(
    model: *const NnleakModel,
    out: *mut *mut c_char,
) -> Status {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CString::new(network::write_model(&m.0))
            .map_err(|_| Fail(Status::InvalidArgument, "model text contains NUL".into()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// Input width of the first layer, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nnleak_model_input_dim(model: *const NnleakModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.0.layers.first())
        .map_or(0, |l| l.in_dim)
}

/// Output width of the last layer, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nnleak_model_output_dim(model: *const NnleakModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.0.layers.last())
        .map_or(0, |l| l.out_dim)
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nnleak_model_free(model: *mut NnleakModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nnleak_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build a device for `model`. `profile` names a builtin cost profile; null
/// selects `atmega-like`. The oracle keeps its own copy of the model.
///
/// # Safety
/// `model` must be a live handle, `profile` null or a NUL-terminated string,
/// and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn nnleak_oracle_new(
    model: *const NnleakModel,
    profile: *const c_char,
    sigma: f64,
    repeats: u32,
    seed: u64,
    out: *mut *mut NnleakOracle,
) -> Status {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let name = if profile.is_null() {
            "atmega-like"
        } else {
            str_arg(profile, "profile")?
        };
        let profile = CostProfile::builtin(name)
            .ok_or_else(|| Fail(Status::InvalidArgument, format!("unknown profile {name}")))?;
        if !(sigma >= 0.0 && sigma.is_finite()) || repeats == 0 {
            return Err(Fail(
                Status::InvalidArgument,
                "sigma must be finite and non-negative, repeats positive".into(),
            ));
        }
        let oracle = Oracle::new(
            m.0.clone(),
            profile.clone(),
            JitterConfig {
                sigma,
                repeats,
                seed,
            },
        )?;
        put(out, NnleakOracle { oracle, profile });
        Ok(())
    })
}

/// # Safety
/// `oracle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nnleak_oracle_free(oracle: *mut NnleakOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Run one inference. Writes the network outputs to `outputs` and the
/// observed end-to-end latency to `total_cycles`.
///
/// # Safety
/// `input` must point to `input_len` bytes, `outputs` to `outputs_len`
/// doubles, and `total_cycles` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn nnleak_oracle_infer(
    oracle: *const NnleakOracle,
    input: *const u8,
    input_len: usize,
    outputs: *mut f64,
    outputs_len: usize,
    total_cycles: *mut f64,
) -> Status {
    guard(|| {
        let o = oracle.as_ref().ok_or_else(|| null("oracle"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        let x = std::slice::from_raw_parts(input, input_len);
        let (out, trace) = o.oracle.run_inference(x)?;
        if out.len() > outputs_len {
            return Err(Fail(
                Status::BufferTooSmall,
                format!("need {} outputs, buffer holds {outputs_len}", out.len()),
            ));
        }
        if !out.is_empty() {
            if outputs.is_null() {
                return Err(null("outputs"));
            }
            std::slice::from_raw_parts_mut(outputs, out.len()).copy_from_slice(&out);
        }
        if let Some(t) = total_cycles.as_mut() {
            *t = trace.total_cycles;
        }
        Ok(())
    })
}

/// Recover the device's model from timing queries alone.
///
/// # Safety
/// `oracle` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn nnleak_attack_model(
    oracle: *const NnleakOracle,
    seed: u64,
    out: *mut *mut NnleakModel,
) -> Status {
    guard(|| {
        let o = oracle.as_ref().ok_or_else(|| null("oracle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rec = recover_model(&o.oracle, &o.profile, seed)?;
        put(out, NnleakModel(rec.model));
        Ok(())
    })
}
