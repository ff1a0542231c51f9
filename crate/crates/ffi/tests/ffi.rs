use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use zapsim_ffi::*;

fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { zs_string_free(s) };
    out
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(zs_last_error()) }
        .to_str()
        .unwrap()
        .to_owned()
}

#[test]
fn set_and_get_keys() {
    let cfg = zs_config_new();
    let key = CString::new("pipeline.dwell").unwrap();
    let val = CString::new("0.25").unwrap();
    unsafe {
        assert_eq!(zs_config_set(cfg, key.as_ptr(), val.as_ptr()), ZsStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(zs_config_get(cfg, key.as_ptr(), &mut out), ZsStatus::Ok);
        assert_eq!(take(out), "0.25");

        let bad = CString::new("-1").unwrap();
        assert_eq!(
            zs_config_set(cfg, key.as_ptr(), bad.as_ptr()),
            ZsStatus::Config
        );
        assert!(last_error().contains("pipeline.dwell"));
        let mut out = ptr::null_mut();
        zs_config_get(cfg, key.as_ptr(), &mut out);
        assert_eq!(take(out), "0.25", "rejected value must not stick");

        let unknown = CString::new("nope.key").unwrap();
        assert_eq!(
            zs_config_set(cfg, unknown.as_ptr(), val.as_ptr()),
            ZsStatus::Config
        );

        let tile = CString::new("render.tile_px").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(zs_config_get(cfg, tile.as_ptr(), &mut out), ZsStatus::Ok);
        assert!(out.is_null());
        zs_config_free(cfg);
    }
}

#[test]
fn null_arguments_are_reported() {
    let key = CString::new("pipeline.dwell").unwrap();
    unsafe {
        assert_eq!(
            zs_config_set(ptr::null_mut(), key.as_ptr(), key.as_ptr()),
            ZsStatus::NullArgument
        );
        assert!(last_error().contains("cfg"));
        assert_eq!(
            zs_episode_run(ptr::null(), 0, ptr::null_mut()),
            ZsStatus::NullArgument
        );
        assert_eq!(zs_episode_kills(ptr::null()), 0);
        zs_config_free(ptr::null_mut());
        zs_episode_free(ptr::null_mut());
        zs_string_free(ptr::null_mut());
    }
}

#[test]
fn parse_errors_map_to_status() {
    let src = CString::new("flight.dt = 0.01\nwhat = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(zs_config_parse(src.as_ptr(), &mut cfg), ZsStatus::Parse);
    }
    assert!(cfg.is_null());
    assert!(last_error().contains("line 2"));
    let missing = CString::new("/nonexistent/zapsim.cfg").unwrap();
    unsafe {
        assert_eq!(zs_config_load(missing.as_ptr(), &mut cfg), ZsStatus::Io);
    }
}

#[test]
fn text_round_trip() {
    let cfg = zs_config_new();
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(zs_config_to_string(cfg, &mut out), ZsStatus::Ok);
        let text = CString::new(take(out)).unwrap();
        let mut again = ptr::null_mut();
        assert_eq!(zs_config_parse(text.as_ptr(), &mut again), ZsStatus::Ok);
        let mut out2 = ptr::null_mut();
        zs_config_to_string(again, &mut out2);
        assert_eq!(text.to_str().unwrap(), take(out2));
        zs_config_free(again);
        zs_config_free(cfg);
    }
}

#[test]
fn episode_matches_the_core_library() {
    let cfg = zs_config_new();
    let key = CString::new("pipeline.episode_duration").unwrap();
    let val = CString::new("3").unwrap();
    unsafe {
        zs_config_set(cfg, key.as_ptr(), val.as_ptr());
        let mut ep = ptr::null_mut();
        assert_eq!(zs_episode_run(cfg, 11, &mut ep), ZsStatus::Ok);

        let pipeline = zapsim::engine::PipelineConfig {
            episode_duration: 3.0,
            ..Default::default()
        };
        let direct = zapsim::engine::run_episode(&Default::default(), &pipeline, 11).unwrap();
        assert_eq!(zs_episode_kills(ep), direct.kills() as u32);
        assert_eq!(zs_episode_fires(ep), direct.fires.len() as u32);
        assert_eq!(zs_episode_lost_track_events(ep), direct.lost_track_events);
        let mut t = f64::NAN;
        assert_eq!(
            zs_episode_first_kill(ep, &mut t),
            direct.first_kill().is_some()
        );
        if let Some(k) = direct.first_kill() {
            assert_eq!(t, k);
        }
        let mut csv = ptr::null_mut();
        assert_eq!(zs_episode_fires_csv(ep, &mut csv), ZsStatus::Ok);
        assert_eq!(take(csv).lines().count(), direct.fires.len() + 1);
        zs_episode_free(ep);
        zs_config_free(cfg);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(zs_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/zapsim.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct ZsConfig ZsConfig;",
        "typedef struct ZsEpisode ZsEpisode;",
        "ZS_STATUS_OK = 0",
        "ZS_STATUS_PANIC = 7",
        "zs_last_error(void)",
        "zs_config_new(void)",
        "zs_config_set(",
        "zs_episode_run(",
        "zs_bench_csv(",
        "zs_string_free(",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

/// Builds a small C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "zapsim.h"

int main(void) {
    ZsConfig *cfg = zs_config_new();
    if (zs_config_set(cfg, "pipeline.episode_duration", "1") != ZS_STATUS_OK) return 1;
    if (zs_config_set(cfg, "flight.s_max", "-5") != ZS_STATUS_CONFIG) return 2;
    if (strstr(zs_last_error(), "flight.s_max") == NULL) return 3;
    ZsEpisode *ep = NULL;
    if (zs_episode_run(cfg, 5, &ep) != ZS_STATUS_OK) return 4;
    char *csv = NULL;
    if (zs_episode_fires_csv(ep, &csv) != ZS_STATUS_OK) return 5;
    printf("%u %s", zs_episode_fires(ep), csv);
    zs_string_free(csv);
    zs_episode_free(ep);
    zs_config_free(cfg);
    return 0;
}
"#,
    )
    .unwrap();
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libzapsim_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("episode,time_s,aim_x_mm"), "{text}");
}
