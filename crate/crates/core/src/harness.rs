//! Configuration files, the method x predictor benchmark grid, parameter
//! sweeps and file outputs.
//!
//! Config files are flat `key = value` lines. `#` starts a comment, missing
//! keys keep their defaults and unknown keys are rejected.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{
    run_episode, stream, DetectorKind, EpisodeResult, PipelineConfig, Scenario, STREAM_FLIGHT,
    STREAM_SENSOR,
};
use crate::error::{Error, Result};
use crate::optics::{Background, Renderer, StereoRig};
use crate::tracking::PredictorMode;
use crate::vision::{threshold, to_gray, GrayFrame, ThresholdMode, ThresholdParams};

/// Everything a config file can set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub pipeline: PipelineConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pipeline.validate()
    }
}

type Getter = fn(&SimConfig) -> Option<String>;
type Setter = fn(&mut SimConfig, &str) -> std::result::Result<(), String>;

struct Key {
    name: &'static str,
    /// `None` when the key does not apply to the current configuration.
    get: Getter,
    set: Setter,
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| format!("invalid value `{v}`: {e}"))
}

macro_rules! field {
    ($name:literal, $($f:ident).+ $([$i:literal])?) => {
        Key {
            name: $name,
            get: |c| Some(c.$($f).+$([$i])?.to_string()),
            set: |c, v| {
                c.$($f).+$([$i])? = parse(v)?;
                Ok(())
            },
        }
    };
}

macro_rules! named {
    ($name:literal, $($f:ident).+) => {
        Key {
            name: $name,
            get: |c| Some(c.$($f).+.as_str().to_string()),
            set: |c, v| {
                c.$($f).+ = v.parse()?;
                Ok(())
            },
        }
    };
}

macro_rules! camera {
    ($name:literal, $f:ident) => {
        Key {
            name: $name,
            get: |c| Some(c.scenario.rig.left.$f.to_string()),
            set: |c, v| {
                let x = parse(v)?;
                c.scenario.rig.left.$f = x;
                c.scenario.rig.right.$f = x;
                Ok(())
            },
        }
    };
}

macro_rules! rig_center {
    ($name:literal, $f:ident) => {
        Key {
            name: $name,
            get: |c| Some(rig_center(&c.scenario.rig).$f.to_string()),
            set: |c, v| {
                let rig = &mut c.scenario.rig;
                let mut center = rig_center(rig);
                center.$f = parse(v)?;
                *rig = StereoRig::new(rig.left, rig.baseline_t, center);
                Ok(())
            },
        }
    };
}

macro_rules! uniform_rgb {
    ($name:literal, $i:literal) => {
        Key {
            name: $name,
            get: |c| match c.scenario.render.background {
                Background::Uniform { rgb } => Some(rgb[$i].to_string()),
                Background::Textured { .. } => None,
            },
            set: |c, v| match &mut c.scenario.render.background {
                Background::Uniform { rgb } => {
                    rgb[$i] = parse(v)?;
                    Ok(())
                }
                Background::Textured { .. } => {
                    Err("only valid with render.background = uniform".into())
                }
            },
        }
    };
}

fn rig_center(rig: &StereoRig) -> crate::Vec3 {
    (rig.left.position + rig.right.position) * 0.5
}

const DEFAULT_TILE_PX: u32 = 8;

/// Every config key, in file order. Keys are applied in this order, so a
/// key may depend on one listed before it.
const KEYS: &[Key] = &[
    field!("box.min_x", scenario.region.min_corner.x),
    field!("box.min_y", scenario.region.min_corner.y),
    field!("box.min_z", scenario.region.min_corner.z),
    field!("box.max_x", scenario.region.max_corner.x),
    field!("box.max_y", scenario.region.max_corner.y),
    field!("box.max_z", scenario.region.max_corner.z),
    field!("scene.mosquito_count", scenario.mosquito_count),
    field!("scene.body_radius", scenario.body_radius),
    field!("scene.stationary", scenario.stationary),
    field!("flight.s_max", scenario.flight.s_max),
    field!("flight.s_min", scenario.flight.s_min),
    field!("flight.dt", scenario.flight.dt),
    field!("flight.sigma_turn", scenario.flight.sigma_turn),
    field!("flight.p_sharp", scenario.flight.p_sharp),
    field!("flight.sharp_turn_lo", scenario.flight.sharp_turn_range[0]),
    field!("flight.sharp_turn_hi", scenario.flight.sharp_turn_range[1]),
    field!("attractant.source_x", scenario.attractant.source.x),
    field!("attractant.source_y", scenario.attractant.source.y),
    field!("attractant.source_z", scenario.attractant.source.z),
    field!("attractant.q", scenario.attractant.q),
    field!("attractant.lambda", scenario.attractant.lambda),
    field!("attractant.b0", scenario.attractant.b0),
    field!("attractant.b_sat", scenario.attractant.b_sat),
    field!("wind.velocity_x", scenario.wind.velocity.x),
    field!("wind.velocity_y", scenario.wind.velocity.y),
    field!("wind.velocity_z", scenario.wind.velocity.z),
    camera!("camera.f_px", f_px),
    camera!("camera.cx", cx),
    camera!("camera.cy", cy),
    camera!("camera.width", width),
    camera!("camera.height", height),
    camera!("camera.frame_period", frame_period),
    camera!("camera.exposure", exposure),
    Key {
        name: "rig.baseline",
        get: |c| Some(c.scenario.rig.baseline_t.to_string()),
        set: |c, v| {
            let rig = &mut c.scenario.rig;
            *rig = StereoRig::new(rig.left, parse(v)?, rig_center(rig));
            Ok(())
        },
    },
    rig_center!("rig.center_x", x),
    rig_center!("rig.center_y", y),
    rig_center!("rig.center_z", z),
    Key {
        name: "render.background",
        get: |c| {
            Some(
                match c.scenario.render.background {
                    Background::Uniform { .. } => "uniform",
                    Background::Textured { .. } => "textured",
                }
                .to_string(),
            )
        },
        set: |c, v| {
            let bg = &mut c.scenario.render.background;
            match (v, *bg) {
                ("uniform", Background::Uniform { .. })
                | ("textured", Background::Textured { .. }) => {}
                ("uniform", _) => *bg = crate::optics::RenderOptions::default().background,
                ("textured", _) => {
                    *bg = Background::Textured {
                        tile_px: DEFAULT_TILE_PX,
                        seed: 0,
                    }
                }
                _ => return Err(format!("unknown background `{v}` (uniform|textured)")),
            }
            Ok(())
        },
    },
    uniform_rgb!("render.background_r", 0),
    uniform_rgb!("render.background_g", 1),
    uniform_rgb!("render.background_b", 2),
    Key {
        name: "render.tile_px",
        get: |c| match c.scenario.render.background {
            Background::Textured { tile_px, .. } => Some(tile_px.to_string()),
            Background::Uniform { .. } => None,
        },
        set: |c, v| match &mut c.scenario.render.background {
            Background::Textured { tile_px, .. } => {
                *tile_px = parse(v)?;
                Ok(())
            }
            Background::Uniform { .. } => {
                Err("only valid with render.background = textured".into())
            }
        },
    },
    Key {
        name: "render.texture_seed",
        get: |c| match c.scenario.render.background {
            Background::Textured { seed, .. } => Some(seed.to_string()),
            Background::Uniform { .. } => None,
        },
        set: |c, v| match &mut c.scenario.render.background {
            Background::Textured { seed, .. } => {
                *seed = parse(v)?;
                Ok(())
            }
            Background::Uniform { .. } => {
                Err("only valid with render.background = textured".into())
            }
        },
    },
    field!("render.noise_sigma", scenario.render.sensor_noise_sigma),
    field!("render.motion_blur", scenario.render.motion_blur),
    field!("render.mosquito_r", scenario.render.mosquito_color[0]),
    field!("render.mosquito_g", scenario.render.mosquito_color[1]),
    field!("render.mosquito_b", scenario.render.mosquito_color[2]),
    field!("laser.power", scenario.laser.power),
    field!("laser.wavelength", scenario.laser.wavelength),
    field!(
        "laser.spot_diameter_at_nominal",
        scenario.laser.spot_diameter_at_nominal
    ),
    field!("laser.nominal_range", scenario.laser.nominal_range),
    field!("laser.area_growth", scenario.laser.area_growth),
    field!("laser.growth_span", scenario.laser.growth_span),
    field!("laser.rate_k", scenario.kill.rate_k),
    field!("galvo.settle_time", scenario.galvo.settle_time),
    field!("galvo.max_slew", scenario.galvo.max_slew),
    field!("galvo.field_limit", scenario.galvo.field_limit),
    named!("pipeline.detector", pipeline.detector),
    named!("pipeline.prediction", pipeline.predictor.mode),
    field!("pipeline.horizon", pipeline.predictor.horizon),
    Key {
        name: "pipeline.latency_override",
        get: |c| {
            Some(
                c.pipeline
                    .latency_override
                    .map_or("none".to_string(), |l| l.to_string()),
            )
        },
        set: |c, v| {
            c.pipeline.latency_override = if v == "none" { None } else { Some(parse(v)?) };
            Ok(())
        },
    },
    named!("pipeline.scheduler", pipeline.scheduler),
    field!("pipeline.dwell", pipeline.dwell),
    field!("pipeline.episode_duration", pipeline.episode_duration),
    field!("pipeline.hit_min_fraction", pipeline.hit_min_fraction),
    field!("tracker.gate_radius", pipeline.association.gate_radius),
    field!("tracker.max_misses", pipeline.association.max_misses),
    field!("tracker.confirm_hits", pipeline.association.confirm_hits),
    field!("tracker.max_coast", pipeline.association.max_coast),
    field!("profile.latency", pipeline.profile.latency),
    field!("profile.p_detect", pipeline.profile.p_detect),
    field!(
        "profile.centroid_sigma",
        pipeline.profile.centroid_noise_sigma
    ),
    field!("vision.diff_threshold", pipeline.vision.diff_threshold),
    field!("vision.dark_threshold", pipeline.vision.dark_threshold),
    field!("vision.hsv_hue", pipeline.vision.hsv.hue_deg),
    field!("vision.hsv_saturation", pipeline.vision.hsv.saturation),
    field!("vision.hsv_value", pipeline.vision.hsv.value),
    field!("vision.search_radius", pipeline.vision.search_radius),
    field!("vision.template_size", pipeline.vision.template_size),
    field!("vision.row_tolerance", pipeline.vision.row_tolerance),
];

fn key(name: &str) -> Option<(usize, &'static Key)> {
    KEYS.iter().enumerate().find(|(_, k)| k.name == name)
}

/// All recognised config keys in file order.
pub fn config_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|k| k.name)
}

/// Parses config text. Values are checked per line, then the whole
/// configuration is validated.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let mut assigned: Vec<Option<(usize, &str)>> = vec![None; KEYS.len()];
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            line: line_no,
            reason,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err("expected `key = value`".into()))?;
        let (k, v) = (k.trim(), v.trim());
        let (idx, _) = key(k).ok_or_else(|| parse_err(format!("unknown key `{k}`")))?;
        if let Some((first, _)) = assigned[idx] {
            return Err(parse_err(format!("`{k}` already set on line {first}")));
        }
        assigned[idx] = Some((line_no, v));
    }
    let mut config = SimConfig::default();
    for (k, slot) in KEYS.iter().zip(assigned) {
        if let Some((line, v)) = slot {
            (k.set)(&mut config, v).map_err(|reason| Error::Parse {
                line,
                reason: format!("{}: {reason}", k.name),
            })?;
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Normalised text form: every applicable key in file order, grouped by
/// section.
pub fn format_config(config: &SimConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for k in KEYS {
        let Some(v) = (k.get)(config) else { continue };
        let s = k.name.split('.').next().unwrap_or("");
        if s != section {
            if !section.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("# {s}\n"));
            section = s;
        }
        out.push_str(&format!("{} = {v}\n", k.name));
    }
    out
}

pub fn save_config(config: &SimConfig, path: &Path) -> Result<()> {
    fs::write(path, format_config(config)).map_err(|e| Error::io(path, e))
}

/// Sets one key from its text value and revalidates.
pub fn set_key(config: &mut SimConfig, name: &str, value: &str) -> Result<()> {
    let (_, k) = key(name).ok_or_else(|| Error::config(name, "unknown key"))?;
    (k.set)(config, value.trim()).map_err(|reason| Error::config(name, reason))?;
    config.validate()
}

/// Current text value of a key, `None` when it does not apply.
pub fn get_key(config: &SimConfig, name: &str) -> Result<Option<String>> {
    let (_, k) = key(name).ok_or_else(|| Error::config(name, "unknown key"))?;
    Ok((k.get)(config))
}

/// Sets one numeric parameter by its config key.
pub fn set_parameter(config: &mut SimConfig, path: &str, value: f64) -> Result<()> {
    let (_, k) = key(path).ok_or_else(|| Error::config(path, "unknown parameter"))?;
    if (k.get)(config)
        .and_then(|v| v.parse::<f64>().ok())
        .is_none()
    {
        return Err(Error::config(path, "not a numeric parameter"));
    }
    (k.set)(config, &value.to_string()).map_err(|reason| Error::config(path, reason))?;
    config.validate()
}

/// One method x predictor cell of the benchmark grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMetrics {
    pub method: DetectorKind,
    pub prediction_mode: PredictorMode,
    pub trials: u32,
    pub mean_detect_latency_s: f64,
    pub tracking_success_pct: f64,
    pub neutralization_pct: f64,
    /// `None` when no dwell hit.
    pub survival_after_pulse_pct: Option<f64>,
    /// `None` when nothing was killed.
    pub mean_time_to_kill_s: Option<f64>,
    pub neutralized_trials: u32,
    pub kills: u32,
    pub fires: u32,
    pub hits: u32,
    pub hit_survivors: u32,
    pub detections: u64,
    pub lost_track_events: u32,
    pub contained_frames: u64,
    pub eligible_frames: u64,
}

impl CellMetrics {
    /// Aggregates episodes in the given order.
    pub fn from_episodes(
        method: DetectorKind,
        mode: PredictorMode,
        episodes: &[EpisodeResult],
    ) -> Self {
        let pct = |num: f64, den: f64| if den > 0.0 { 100.0 * num / den } else { 0.0 };
        let mut m = CellMetrics {
            method,
            prediction_mode: mode,
            trials: episodes.len() as u32,
            mean_detect_latency_s: 0.0,
            tracking_success_pct: 0.0,
            neutralization_pct: 0.0,
            survival_after_pulse_pct: None,
            mean_time_to_kill_s: None,
            neutralized_trials: 0,
            kills: 0,
            fires: 0,
            hits: 0,
            hit_survivors: 0,
            detections: 0,
            lost_track_events: 0,
            contained_frames: 0,
            eligible_frames: 0,
        };
        let (mut latency, mut jobs, mut kill_time) = (0.0, 0u64, 0.0);
        for ep in episodes {
            latency += ep.latency_total;
            jobs += ep.detection_jobs as u64;
            if let Some(t) = ep.first_kill() {
                m.neutralized_trials += 1;
                kill_time += t;
            }
            m.kills += ep.kills() as u32;
            m.fires += ep.fires.len() as u32;
            m.hits += ep.hits;
            m.hit_survivors += ep.hit_survivors;
            m.detections += ep.detections as u64;
            m.lost_track_events += ep.lost_track_events;
            for c in &ep.containment {
                m.contained_frames += c.contained as u64;
                m.eligible_frames += c.eligible as u64;
            }
        }
        if jobs > 0 {
            m.mean_detect_latency_s = latency / jobs as f64;
        }
        m.tracking_success_pct = pct(m.contained_frames as f64, m.eligible_frames as f64);
        m.neutralization_pct = pct(m.neutralized_trials as f64, m.trials as f64);
        if m.hits > 0 {
            m.survival_after_pulse_pct = Some(pct(m.hit_survivors as f64, m.hits as f64));
        }
        if m.neutralized_trials > 0 {
            m.mean_time_to_kill_s = Some(kill_time / m.neutralized_trials as f64);
        }
        m
    }

    fn csv_fields(&self) -> [String; 8] {
        let opt =
            |v: Option<f64>, digits: usize| v.map_or(String::new(), |x| format!("{x:.digits$}"));
        [
            self.method.as_str().to_string(),
            self.prediction_mode.as_str().to_string(),
            self.trials.to_string(),
            format!("{:.4}", self.mean_detect_latency_s),
            format!("{:.2}", self.tracking_success_pct),
            format!("{:.2}", self.neutralization_pct),
            opt(self.survival_after_pulse_pct, 2),
            opt(self.mean_time_to_kill_s, 4),
        ]
    }
}

pub const BENCH_COLUMNS: [&str; 8] = [
    "method",
    "prediction_mode",
    "trials",
    "mean_detect_latency_s",
    "tracking_success_pct",
    "neutralization_pct",
    "survival_after_pulse_pct",
    "mean_time_to_kill_s",
];

pub const DEFAULT_TRIALS: u32 = 180;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub methods: Vec<DetectorKind>,
    pub modes: Vec<PredictorMode>,
    pub trials: u32,
    pub seed_base: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            methods: DetectorKind::ALL.to_vec(),
            modes: vec![PredictorMode::FlightModel, PredictorMode::None],
            trials: DEFAULT_TRIALS,
            seed_base: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub seed_base: u64,
    pub trials: u32,
    pub cells: Vec<CellMetrics>,
    pub config: SimConfig,
}

impl MetricsReport {
    pub fn cell(&self, method: DetectorKind, mode: PredictorMode) -> Option<&CellMetrics> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.prediction_mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(BENCH_COLUMNS).expect("in-memory write");
        for c in &self.cells {
            w.write_record(c.csv_fields()).expect("in-memory write");
        }
        csv_string(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Runs `trials` episodes of one pipeline with seeds `seed_base + i`.
pub fn run_trials(config: &SimConfig, trials: u32, seed_base: u64) -> Result<Vec<EpisodeResult>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            run_episode(
                &config.scenario,
                &config.pipeline,
                seed_base.wrapping_add(i),
            )
        })
        .collect()
}

pub fn bench(config: &SimConfig, spec: &BenchSpec) -> Result<MetricsReport> {
    if spec.trials == 0 {
        return Err(Error::config("bench.trials", "must be >= 1"));
    }
    config.validate()?;
    let mut cells = Vec::new();
    for &method in &spec.methods {
        for &mode in &spec.modes {
            let mut cell = *config;
            cell.pipeline.detector = method;
            cell.pipeline.predictor.mode = mode;
            let episodes = run_trials(&cell, spec.trials, spec.seed_base)?;
            cells.push(CellMetrics::from_episodes(method, mode, &episodes));
        }
    }
    Ok(MetricsReport {
        seed_base: spec.seed_base,
        trials: spec.trials,
        cells,
        config: *config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: CellMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub parameter: String,
    pub seed_base: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["parameter", "value"];
        header.extend(BENCH_COLUMNS);
        w.write_record(header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![self.parameter.clone(), r.value.to_string()];
            rec.extend(r.metrics.csv_fields());
            w.write_record(rec).expect("in-memory write");
        }
        csv_string(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// One bench row of the configured method and predictor per value.
pub fn sweep(
    config: &SimConfig,
    parameter: &str,
    values: &[f64],
    trials: u32,
    seed_base: u64,
) -> Result<SweepReport> {
    if trials == 0 {
        return Err(Error::config("bench.trials", "must be >= 1"));
    }
    let rows = values
        .iter()
        .map(|&value| {
            let mut c = *config;
            set_parameter(&mut c, parameter, value)?;
            let episodes = run_trials(&c, trials, seed_base)?;
            Ok(SweepRow {
                value,
                metrics: CellMetrics::from_episodes(
                    c.pipeline.detector,
                    c.pipeline.predictor.mode,
                    &episodes,
                ),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        parameter: parameter.to_string(),
        seed_base,
        rows,
    })
}

pub const TRACK_COLUMNS: [&str; 9] = [
    "episode",
    "track_id",
    "timestamp_s",
    "u_px",
    "v_px",
    "x_mm",
    "y_mm",
    "z_mm",
    "lifecycle",
];

pub const FIRE_COLUMNS: [&str; 9] = [
    "episode",
    "time_s",
    "aim_x_mm",
    "aim_y_mm",
    "aim_z_mm",
    "dwell_s",
    "target_id",
    "overlap_integral",
    "killed",
];

/// Track histories of recorded episodes.
pub fn tracks_csv(episodes: &[EpisodeResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACK_COLUMNS).expect("in-memory write");
    for ep in episodes {
        for r in &ep.track_rows {
            w.write_record([
                ep.seed.to_string(),
                r.track_id.to_string(),
                format!("{:.6}", r.timestamp),
                format!("{:.3}", r.u),
                format!("{:.3}", r.v),
                format!("{:.3}", r.world.x),
                format!("{:.3}", r.world.y),
                format!("{:.3}", r.world.z),
                r.lifecycle.as_str().to_string(),
            ])
            .expect("in-memory write");
        }
    }
    csv_string(w)
}

pub fn fires_csv(episodes: &[EpisodeResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FIRE_COLUMNS).expect("in-memory write");
    for ep in episodes {
        for f in &ep.fires {
            w.write_record([
                ep.seed.to_string(),
                format!("{:.6}", f.time),
                format!("{:.3}", f.aim.x),
                format!("{:.3}", f.aim.y),
                format!("{:.3}", f.aim.z),
                format!("{:.4}", f.dwell),
                f.target_id.to_string(),
                format!("{:.6}", f.overlap_integral),
                f.killed.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    csv_string(w)
}

pub const CENTROID_COLUMNS: [&str; 7] = [
    "frame",
    "timestamp_s",
    "camera",
    "mosquito_id",
    "u_px",
    "v_px",
    "depth_mm",
];

/// Binary mask of pixels darker than `level`, the first stage of the
/// dark-target detectors.
pub fn dark_mask(gray: &GrayFrame, level: u8) -> GrayFrame {
    threshold(
        gray,
        ThresholdParams {
            value: level,
            max_value: 255,
            mode: ThresholdMode::BinaryInverse,
        },
    )
}

pub fn frame_name(kind: &str, camera: &str, index: u32, ext: &str) -> String {
    format!("{kind}_{camera}_{index:06}.{ext}")
}

/// Renders `count` stereo frames of the scenario's free flight and writes
/// colour frames (PPM), grey and dark-mask intermediates (PGM) and the
/// projected centroids of every mosquito. Returns the written paths.
pub fn render_dump(
    config: &SimConfig,
    count: u32,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scenario = &config.scenario;
    let model = scenario.flight_model();
    let mut flight_rng = stream(seed, STREAM_FLIGHT);
    let mut sensor_rng = stream(seed, STREAM_SENSOR);
    let mut mosquitoes = scenario.spawn(&mut flight_rng);
    let cams = [scenario.rig.left, scenario.rig.right];
    let renderers = cams.map(|c| Renderer::new(c, scenario.render));
    let period = cams[0].frame_period;
    let mut written = Vec::new();
    let mut centroids = csv::Writer::from_writer(Vec::new());
    centroids
        .write_record(CENTROID_COLUMNS)
        .expect("in-memory write");
    let mut t = 0.0;
    for k in 1..=count {
        let target = k as f64 * period;
        if !scenario.stationary {
            while t + scenario.flight.dt <= target + 1e-12 {
                for m in &mut mosquitoes {
                    *m = model.tick(m, &mut flight_rng).0;
                }
                t += scenario.flight.dt;
            }
        }
        for r in &renderers {
            let cam = r.camera();
            let name = cam.id.as_str();
            let frame = r.render(&mosquitoes, scenario.wind, target, &mut sensor_rng);
            let gray = to_gray(&frame);
            let mask = dark_mask(&gray, config.pipeline.vision.dark_threshold);
            let ppm = out_dir.join(frame_name("frame", name, k, "ppm"));
            write_pnm(&ppm, b"P6", frame.width, frame.height, &frame.pixels)?;
            let pgm = out_dir.join(frame_name("gray", name, k, "pgm"));
            write_pnm(&pgm, b"P5", gray.width, gray.height, &gray.pixels)?;
            let bin = out_dir.join(frame_name("mask", name, k, "pgm"));
            write_pnm(&bin, b"P5", mask.width, mask.height, &mask.pixels)?;
            written.extend([ppm, pgm, bin]);
            for m in mosquitoes.iter().filter(|m| m.alive) {
                let Ok(p) = cam.project(m.position) else {
                    continue;
                };
                centroids
                    .write_record([
                        k.to_string(),
                        format!("{target:.6}"),
                        name.to_string(),
                        m.id.to_string(),
                        format!("{:.4}", p.u),
                        format!("{:.4}", p.v),
                        format!("{:.4}", p.depth),
                    ])
                    .expect("in-memory write");
            }
        }
    }
    let csv_path = out_dir.join("centroids.csv");
    fs::write(&csv_path, csv_string(centroids)).map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);
    Ok(written)
}

fn write_pnm(path: &Path, magic: &[u8], width: u32, height: u32, data: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(magic)
        .and_then(|_| write!(f, "\n{width} {height}\n255\n"))
        .and_then(|_| f.write_all(data))
        .map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM (P6) or PGM (P5) file written by [`render_dump`].
/// Returns width, height, channel count and the raw samples.
pub fn read_pnm(path: &Path) -> Result<(u32, u32, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Parse {
        line: 1,
        reason: format!("{}: {reason}", path.display()),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
    }
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(bad("not a binary PPM/PGM")),
    };
    let w: u32 = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: u32 = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes[pos + 1..].to_vec();
    if data.len() != w as usize * h as usize * channels {
        return Err(bad("pixel data has the wrong length"));
    }
    Ok((w, h, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), SimConfig::default());
        assert_eq!(
            parse_config("# nothing\n\n   \n").unwrap(),
            SimConfig::default()
        );
    }

    #[test]
    fn negative_speed_names_the_field() {
        match parse_config("flight.s_max = -1") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "flight.s_max"),
            other => panic!("{other:?}"),
        }
        match parse_config("flight.s_max = 100") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "flight.s_max"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = parse_config("# a\nflight.dt = 0.01\nbogus.key = 3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");
        let e = parse_config("\nflight.dt = fast\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e:?}");
        let e = parse_config("flight.dt 0.01\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e:?}");
        let e = parse_config("flight.dt = 0.01\nflight.dt = 0.02\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e:?}");
    }

    #[test]
    fn values_reach_their_fields() {
        let c = parse_config(
            "scene.mosquito_count = 5  # five\npipeline.detector = frame_diff\npipeline.prediction = none\n\
             pipeline.latency_override = 0.25\nrig.baseline = 80\ncamera.f_px = 700\nrender.background = textured\n\
             render.tile_px = 4\n",
        )
        .unwrap();
        assert_eq!(c.scenario.mosquito_count, 5);
        assert_eq!(c.pipeline.detector, DetectorKind::FrameDiff);
        assert_eq!(c.pipeline.predictor.mode, PredictorMode::None);
        assert_eq!(c.pipeline.latency_override, Some(0.25));
        assert_eq!(
            c.scenario.rig.right.position.x - c.scenario.rig.left.position.x,
            80.0
        );
        assert_eq!(c.scenario.rig.right.f_px, 700.0);
        assert_eq!(
            c.scenario.render.background,
            Background::Textured {
                tile_px: 4,
                seed: 0
            }
        );
    }

    #[test]
    fn background_keys_follow_the_variant() {
        assert!(parse_config("render.tile_px = 4").is_err());
        assert!(parse_config("render.background = textured\nrender.background_r = 9").is_err());
        assert!(parse_config("render.background = checkered").is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let text = format_config(&SimConfig::default());
        assert_eq!(parse_config(&text).unwrap(), SimConfig::default());
        assert_eq!(format_config(&parse_config(&text).unwrap()), text);
    }

    #[test]
    fn defaults_keep_the_reference_geometry() {
        let c = SimConfig::default();
        assert_eq!(c.scenario.region.center().z, 300.0);
        assert_eq!(c.scenario.region.size().x, 70.0);
        assert_eq!(c.scenario.laser.power, 1.0);
        assert_eq!(c.scenario.laser.wavelength, 450.0);
        assert_eq!(c.scenario.galvo.settle_time, 1.0 / 20_000.0);
    }

    #[test]
    fn unknown_sweep_parameter() {
        let mut c = SimConfig::default();
        assert!(set_parameter(&mut c, "pipeline.nope", 1.0).is_err());
        assert!(set_parameter(&mut c, "pipeline.detector", 1.0).is_err());
        set_parameter(&mut c, "pipeline.dwell", 0.25).unwrap();
        assert_eq!(c.pipeline.dwell, 0.25);
    }

    #[test]
    fn one_empty_trial() {
        let mut c = SimConfig::default();
        c.scenario.mosquito_count = 0;
        let spec = BenchSpec {
            methods: vec![DetectorKind::Color],
            modes: vec![PredictorMode::None],
            trials: 1,
            seed_base: 7,
        };
        let r = bench(&c, &spec).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].neutralization_pct, 0.0);
        assert_eq!(r.cells[0].detections, 0);
        let csv = r.to_csv();
        assert!(csv.starts_with(&BENCH_COLUMNS.join(",")));
        assert!(csv.lines().nth(1).unwrap().starts_with("color,none,1,"));
    }

    #[test]
    fn zero_trials_rejected() {
        let spec = BenchSpec {
            trials: 0,
            ..Default::default()
        };
        assert!(bench(&SimConfig::default(), &spec).is_err());
    }
}
