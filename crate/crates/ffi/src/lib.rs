//! C interface to the simulator.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`*_run` functions
//! and released with the matching `*_free`. Fallible calls return a
//! [`ZsStatus`]; on failure [`zs_last_error`] describes the problem. Strings
//! returned through out-parameters are owned by the caller and must be
//! released with [`zs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use zapsim::engine::{run_episode, EpisodeResult};
use zapsim::harness::{self, BenchSpec, SimConfig};
use zapsim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Parse = 4,
    Runtime = 5,
    Io = 6,
    Panic = 7,
}

/// Scenario and pipeline configuration.
pub struct ZsConfig(SimConfig);

/// Outcome of one simulated episode.
pub struct ZsEpisode(EpisodeResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> ZsStatus {
    match e {
        Error::Config { .. } => ZsStatus::Config,
        Error::Parse { .. } => ZsStatus::Parse,
        Error::Io { .. } => ZsStatus::Io,
        _ => ZsStatus::Runtime,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (ZsStatus, String)>) -> ZsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ZsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ZsStatus::Panic
        }
    }
}

fn sim(e: Error) -> (ZsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ZsStatus, String) {
    (ZsStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ZsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        (
            ZsStatus::InvalidUtf8,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn give_string(out: *mut *mut c_char, s: String) -> Result<(), (ZsStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    let s = CString::new(s).map_err(|_| (ZsStatus::Runtime, "string contains NUL".to_string()))?;
    *out = s.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn zs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn zs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn zs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
#[no_mangle]
pub extern "C" fn zs_config_new() -> *mut ZsConfig {
    Box::into_raw(Box::new(ZsConfig(SimConfig::default())))
}

/// Loads a `key = value` config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zs_config_load(path: *const c_char, out: *mut *mut ZsConfig) -> ZsStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = harness::load_config(Path::new(path)).map_err(sim)?;
        *out = Box::into_raw(Box::new(ZsConfig(cfg)));
        Ok(())
    })
}

/// Parses config text.
///
/// # Safety
/// `source` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zs_config_parse(
    source: *const c_char,
    out: *mut *mut ZsConfig,
) -> ZsStatus {
    guard(|| {
        let source = text(source, "source")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = harness::parse_config(source).map_err(sim)?;
        *out = Box::into_raw(Box::new(ZsConfig(cfg)));
        Ok(())
    })
}

/// Sets one key, e.g. `pipeline.dwell` to `"0.25"`. The configuration is
/// left unchanged when the result would be invalid.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn zs_config_set(
    cfg: *mut ZsConfig,
    key: *const c_char,
    value: *const c_char,
) -> ZsStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let (key, value) = (text(key, "key")?, text(value, "value")?);
        let mut next = cfg.0;
        harness::set_key(&mut next, key, value).map_err(sim)?;
        cfg.0 = next;
        Ok(())
    })
}

/// Current value of a key as text. `*out` is set to null when the key does
/// not apply to this configuration.
///
/// # Safety
/// `cfg` must be a live handle, `key` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zs_config_get(
    cfg: *const ZsConfig,
    key: *const c_char,
    out: *mut *mut c_char,
) -> ZsStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let key = text(key, "key")?;
        match harness::get_key(&cfg.0, key).map_err(sim)? {
            Some(v) => give_string(out, v),
            None if !out.is_null() => {
                *out = ptr::null_mut();
                Ok(())
            }
            None => Err(null("out")),
        }
    })
}

/// Normalised config file text.
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zs_config_to_string(
    cfg: *const ZsConfig,
    out: *mut *mut c_char,
) -> ZsStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        give_string(out, harness::format_config(&cfg.0))
    })
}

/// # Safety
/// `cfg` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn zs_config_free(cfg: *mut ZsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs one episode.
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zs_episode_run(
    cfg: *const ZsConfig,
    seed: u64,
    out: *mut *mut ZsEpisode,
) -> ZsStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ep = run_episode(&cfg.0.scenario, &cfg.0.pipeline, seed).map_err(sim)?;
        *out = Box::into_raw(Box::new(ZsEpisode(ep)));
        Ok(())
    })
}

/// Mosquitoes killed. Zero for a null handle.
///
/// # Safety
/// `ep` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn zs_episode_kills(ep: *const ZsEpisode) -> u32 {
    ep.as_ref().map_or(0, |e| e.0.kills() as u32)
}

/// Completed laser dwells. Zero for a null handle.
///
/// # Safety
/// `ep` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn zs_episode_fires(ep: *const ZsEpisode) -> u32 {
    ep.as_ref().map_or(0, |e| e.0.fires.len() as u32)
}

/// # Safety
/// `ep` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn zs_episode_lost_track_events(ep: *const ZsEpisode) -> u32 {
    ep.as_ref().map_or(0, |e| e.0.lost_track_events)
}

/// Writes the time of the first kill and returns true, or returns false
/// when nothing was killed.
///
/// # Safety
/// `ep` must be a live handle or null; `out` writable or null.
#[no_mangle]
pub unsafe extern "C" fn zs_episode_first_kill(ep: *const ZsEpisode, out: *mut f64) -> bool {
    match ep.as_ref().and_then(|e| e.0.first_kill()) {
        Some(t) => {
            if let Some(o) = out.as_mut() {
                *o = t;
            }
            true
        }
        None => false,
    }
}

/// Fire events as CSV.
///
/// # Safety
/// `ep` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zs_episode_fires_csv(
    ep: *const ZsEpisode,
    out: *mut *mut c_char,
) -> ZsStatus {
    guard(|| {
        let ep = ep.as_ref().ok_or_else(|| null("ep"))?;
        give_string(out, harness::fires_csv(std::slice::from_ref(&ep.0)))
    })
}

/// # Safety
/// `ep` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn zs_episode_free(ep: *mut ZsEpisode) {
    if !ep.is_null() {
        drop(Box::from_raw(ep));
    }
}

/// Runs the full method x prediction-mode grid and returns the bench CSV.
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zs_bench_csv(
    cfg: *const ZsConfig,
    trials: u32,
    seed_base: u64,
    out: *mut *mut c_char,
) -> ZsStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let spec = BenchSpec {
            trials,
            seed_base,
            ..Default::default()
        };
        let report = harness::bench(&cfg.0, &spec).map_err(sim)?;
        give_string(out, report.to_csv())
    })
}
