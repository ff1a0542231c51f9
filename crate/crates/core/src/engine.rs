//! The closed detection-tracking-firing loop on a virtual clock.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::laser::{
    angles_for_target, beam_direction, beam_overlap, kill_probability, miss_distance, move_time,
    overlap_fraction, GalvoLimits, GalvoState, KillModel, LaserSpec,
};
use crate::optics::{CameraModel, Frame, RenderOptions, Renderer, StereoRig};
use crate::scene::{
    concentration_at, ramp, speed, AttractantField, BoxRegion, FlightModel, FlightParams,
    MosquitoState, Wind,
};
use crate::tracking::{
    correlation_refine_in, dead_reckon, predict, AssociationConfig, ImageWindow, Lifecycle,
    PredictorConfig, PredictorMode, Track, Tracker,
};
use crate::vision::{
    abs_difference, color_mask, connected_components, filter_blobs, frame_difference, match_stereo,
    profiled_detect_stereo, threshold, to_gray, Detection, DetectorProfile, GrayFrame,
    HsvTolerance, Observation, Rect, ThresholdMode, ThresholdParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    FrameDiff,
    Color,
    CorrelationTrack,
    Profiled,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::Color,
        DetectorKind::CorrelationTrack,
        DetectorKind::Profiled,
        DetectorKind::FrameDiff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::FrameDiff => "frame_diff",
            DetectorKind::Color => "color",
            DetectorKind::CorrelationTrack => "correlation_track",
            DetectorKind::Profiled => "profiled",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "frame_diff" => Ok(DetectorKind::FrameDiff),
            "color" => Ok(DetectorKind::Color),
            "correlation_track" => Ok(DetectorKind::CorrelationTrack),
            "profiled" => Ok(DetectorKind::Profiled),
            _ => Err(format!(
                "unknown detector `{s}` (frame_diff|color|correlation_track|profiled)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerPolicy {
    LowestIdFirst,
    NearestFirst,
}

impl SchedulerPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerPolicy::LowestIdFirst => "lowest_id_first",
            SchedulerPolicy::NearestFirst => "nearest_first",
        }
    }
}

impl std::str::FromStr for SchedulerPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lowest_id_first" => Ok(SchedulerPolicy::LowestIdFirst),
            "nearest_first" => Ok(SchedulerPolicy::NearestFirst),
            _ => Err(format!(
                "unknown scheduler `{s}` (lowest_id_first|nearest_first)"
            )),
        }
    }
}

/// Tuning of the image-based detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisionParams {
    /// Minimum grey change for frame differencing.
    pub diff_threshold: u8,
    /// Grey level below which a pixel counts as dark target.
    pub dark_threshold: u8,
    pub hsv: HsvTolerance,
    /// px
    pub search_radius: u32,
    /// px
    pub template_size: u32,
    /// Largest row mismatch for a stereo pair, px.
    pub row_tolerance: f64,
}

impl Default for VisionParams {
    fn default() -> Self {
        VisionParams {
            diff_threshold: 25,
            dark_threshold: 175,
            hsv: HsvTolerance::default(),
            search_radius: 16,
            template_size: 11,
            row_tolerance: 3.0,
        }
    }
}

impl VisionParams {
    pub fn validate(&self) -> Result<()> {
        if self.template_size < 3 || self.template_size.is_multiple_of(2) {
            return Err(Error::config(
                "vision.template_size",
                "must be odd and >= 3",
            ));
        }
        if self.search_radius == 0 {
            return Err(Error::config("vision.search_radius", "must be > 0"));
        }
        if !(self.row_tolerance >= 0.0) {
            return Err(Error::config("vision.row_tolerance", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub detector: DetectorKind,
    pub predictor: PredictorConfig,
    /// Replaces the detector's own latency when set, s.
    pub latency_override: Option<f64>,
    pub scheduler: SchedulerPolicy,
    /// s
    pub dwell: f64,
    /// s
    pub episode_duration: f64,
    pub association: AssociationConfig,
    /// Used by the profiled detector.
    pub profile: DetectorProfile,
    pub vision: VisionParams,
    /// A completed dwell counts as a hit when its overlap integral reaches
    /// this fraction of a perfectly centred dwell's.
    pub hit_min_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            detector: DetectorKind::CorrelationTrack,
            predictor: PredictorConfig::default(),
            latency_override: None,
            scheduler: SchedulerPolicy::LowestIdFirst,
            dwell: 0.5,
            episode_duration: 10.0,
            association: AssociationConfig::default(),
            profile: DetectorProfile::default(),
            vision: VisionParams::default(),
            hit_min_fraction: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dwell > 0.0 && self.dwell.is_finite()) {
            return Err(Error::config("pipeline.dwell", "must be > 0"));
        }
        if !(self.episode_duration > 0.0 && self.episode_duration.is_finite()) {
            return Err(Error::config("pipeline.episode_duration", "must be > 0"));
        }
        if let Some(l) = self.latency_override {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config("pipeline.latency_override", "must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.hit_min_fraction) {
            return Err(Error::config(
                "pipeline.hit_min_fraction",
                "must lie in [0, 1]",
            ));
        }
        self.predictor.validate()?;
        self.association.validate()?;
        self.profile.validate()?;
        self.vision.validate()
    }

    /// Latency charged per detection, s.
    pub fn latency(&self) -> f64 {
        self.latency_override.unwrap_or(match self.detector {
            DetectorKind::FrameDiff => 0.1,
            DetectorKind::Color => 0.3,
            DetectorKind::CorrelationTrack => 0.15,
            DetectorKind::Profiled => self.profile.latency,
        })
    }
}

/// The physical world of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub region: BoxRegion,
    pub mosquito_count: u32,
    pub flight: FlightParams,
    pub attractant: AttractantField,
    pub wind: Wind,
    pub rig: StereoRig,
    pub render: RenderOptions,
    /// mm
    pub body_radius: f64,
    /// Mosquitoes hold their initial positions.
    pub stationary: bool,
    pub laser: LaserSpec,
    pub galvo: GalvoLimits,
    pub kill: KillModel,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            region: BoxRegion::default(),
            mosquito_count: 3,
            flight: FlightParams::default(),
            attractant: AttractantField::default(),
            wind: Wind::default(),
            rig: StereoRig::default(),
            render: RenderOptions::default(),
            body_radius: 1.0,
            stationary: false,
            laser: LaserSpec::default(),
            galvo: GalvoLimits::default(),
            kill: KillModel::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        self.flight.validate()?;
        self.attractant.validate()?;
        if !self.wind.velocity.is_finite() {
            return Err(Error::config("wind.velocity_x", "must be finite"));
        }
        self.rig.validate()?;
        self.render.validate()?;
        if !(self.body_radius > 0.0 && self.body_radius.is_finite()) {
            return Err(Error::config("scene.body_radius", "must be > 0"));
        }
        if self.region.min_corner.z <= 0.0 {
            return Err(Error::config(
                "box.min_z",
                "the box must lie in front of the cameras",
            ));
        }
        self.laser.validate()?;
        self.galvo.validate()?;
        self.kill.validate()
    }

    pub fn flight_model(&self) -> FlightModel {
        FlightModel {
            params: self.flight,
            field: self.attractant,
            wind: self.wind,
            region: self.region,
        }
    }

    /// Depth assumed for monocular observations and blob size gating.
    pub fn nominal_depth(&self) -> f64 {
        self.region.center().z
    }

    /// Mosquitoes at random positions and headings in the box.
    pub fn spawn<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<MosquitoState> {
        (0..self.mosquito_count)
            .map(|id| {
                let p = self.region.sample(rng);
                let h = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let f = ramp(
                    concentration_at(&self.attractant, p),
                    self.attractant.b0,
                    self.attractant.b_sat,
                )
                .unwrap_or(0.0);
                let s = if self.stationary {
                    0.0
                } else {
                    speed(&self.flight, f)
                };
                MosquitoState::new(id, p, h, s, self.body_radius)
            })
            .collect()
    }
}

/// Pending work on the virtual clock, ordered by time and then by insertion.
#[derive(Debug)]
pub struct EventQueue<T> {
    heap: BinaryHeap<Entry<T>>,
    seq: u64,
    now: f64,
}

#[derive(Debug)]
struct Entry<T> {
    time: f64,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl<T> Eq for Entry<T> {}
impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl<T> Ord for Entry<T> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, o: &Self) -> Ordering {
        o.time.total_cmp(&self.time).then(o.seq.cmp(&self.seq))
    }
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
        }
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Time of the last dispatched event.
    pub fn now(&self) -> f64 {
        self.now
    }

    /// Panics if `time` lies before the current time.
    pub fn push(&mut self, time: f64, item: T) {
        assert!(
            time >= self.now,
            "event at {time} scheduled in the past (now {})",
            self.now
        );
        self.heap.push(Entry {
            time,
            seq: self.seq,
            item,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, T)> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.item))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MosquitoOutcome {
    pub id: u32,
    pub killed_at: Option<f64>,
}

/// Gate containment at one processed frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameContainment {
    pub timestamp: f64,
    /// Live mosquitoes inside the left image.
    pub visible: u32,
    /// Visible mosquitoes while at least one track was active.
    pub eligible: u32,
    /// Eligible mosquitoes inside the gate of their nearest active track.
    pub contained: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FireRecord {
    /// Laser-on time, s.
    pub time: f64,
    pub aim: Vec3,
    pub dwell: f64,
    pub target_id: u64,
    /// Largest beam-overlap time integral over the mosquitoes, s.
    pub overlap_integral: f64,
    /// Mosquito that received `overlap_integral`.
    pub mosquito: Option<u32>,
    pub killed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackRow {
    pub track_id: u64,
    pub timestamp: f64,
    pub u: f64,
    pub v: f64,
    pub world: Vec3,
    pub lifecycle: Lifecycle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub time: f64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep the event log and per-update track rows.
    pub record: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub episode_duration: f64,
    pub outcomes: Vec<MosquitoOutcome>,
    pub containment: Vec<FrameContainment>,
    pub fires: Vec<FireRecord>,
    /// Completed dwells whose overlap integral reached the hit threshold.
    pub hits: u32,
    /// Hits that did not kill.
    pub hit_survivors: u32,
    pub lost_track_events: u32,
    pub detections: u32,
    pub detection_jobs: u32,
    /// Sum of the latency charged over all detection jobs, s.
    pub latency_total: f64,
    pub boundary_clamps: u32,
    pub track_rows: Vec<TrackRow>,
    pub log: Vec<LogEntry>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Equality ignores `wall_clock`.
impl PartialEq for EpisodeResult {
    fn eq(&self, o: &Self) -> bool {
        self.seed == o.seed
            && self.episode_duration.to_bits() == o.episode_duration.to_bits()
            && self.outcomes == o.outcomes
            && self.containment == o.containment
            && self.fires == o.fires
            && self.hits == o.hits
            && self.hit_survivors == o.hit_survivors
            && self.lost_track_events == o.lost_track_events
            && self.detections == o.detections
            && self.detection_jobs == o.detection_jobs
            && self.latency_total.to_bits() == o.latency_total.to_bits()
            && self.boundary_clamps == o.boundary_clamps
            && self.track_rows == o.track_rows
            && self.log == o.log
    }
}

impl EpisodeResult {
    pub fn kills(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.killed_at.is_some())
            .count()
    }

    pub fn first_kill(&self) -> Option<f64> {
        self.outcomes
            .iter()
            .filter_map(|o| o.killed_at)
            .min_by(f64::total_cmp)
    }
}

/// Kills per second of episode.
pub fn throughput(result: &EpisodeResult) -> f64 {
    result.kills() as f64 / result.episode_duration
}

/// Firing order for candidate `(track id, predicted position)` pairs.
/// `beam` is the current beam direction.
pub fn schedule_targets(targets: &[(u64, Vec3)], policy: SchedulerPolicy, beam: Vec3) -> Vec<u64> {
    let mut keyed: Vec<(f64, u64)> = targets
        .iter()
        .map(|&(id, p)| match policy {
            SchedulerPolicy::LowestIdFirst => (0.0, id),
            SchedulerPolicy::NearestFirst => (miss_distance(beam, p), id),
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, id)| id).collect()
}

/// Whether a true projection lies inside a track's gate.
pub fn gate_contains(track_px: (f64, f64), truth_px: (f64, f64), gate_radius: f64) -> bool {
    (track_px.0 - truth_px.0).powi(2) + (track_px.1 - truth_px.1).powi(2)
        <= gate_radius * gate_radius
}

pub const STREAM_FLIGHT: u64 = 0;
pub const STREAM_SENSOR: u64 = 1;
pub const STREAM_DETECT: u64 = 2;
pub const STREAM_KILL: u64 = 3;

/// Independent random stream `id` of an episode seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Frame times and tick times land on the same instants up to rounding.
const TIME_EPS: f64 = 1e-9;

/// Ground truth with one tick of lookahead, so positions can be interpolated
/// anywhere inside the current tick.
struct Truth {
    model: FlightModel,
    stationary: bool,
    cur: Vec<MosquitoState>,
    next: Vec<MosquitoState>,
    tick: u64,
    rng: ChaCha8Rng,
    clamps: u32,
}

impl Truth {
    fn new(
        model: FlightModel,
        stationary: bool,
        initial: Vec<MosquitoState>,
        rng: ChaCha8Rng,
    ) -> Self {
        let mut t = Truth {
            model,
            stationary,
            next: Vec::new(),
            cur: initial,
            tick: 0,
            rng,
            clamps: 0,
        };
        t.next = t.successor();
        t
    }

    fn successor(&mut self) -> Vec<MosquitoState> {
        let mut out = self.cur.clone();
        if self.stationary {
            return out;
        }
        for m in out.iter_mut().filter(|m| m.alive) {
            let (s, clamped) = self.model.tick(m, &mut self.rng);
            self.clamps += clamped as u32;
            *m = s;
        }
        out
    }

    fn dt(&self) -> f64 {
        self.model.params.dt
    }

    fn time(&self) -> f64 {
        self.tick as f64 * self.dt()
    }

    fn next_time(&self) -> f64 {
        (self.tick + 1) as f64 * self.dt()
    }

    fn advance(&mut self) {
        self.cur = std::mem::take(&mut self.next);
        self.tick += 1;
        self.next = self.successor();
    }

    fn position_at(&self, i: usize, t: f64) -> Vec3 {
        let f = ((t - self.time()) / self.dt()).clamp(0.0, 1.0);
        self.cur[i].position + (self.next[i].position - self.cur[i].position) * f
    }

    fn kill(&mut self, i: usize) {
        self.cur[i].alive = false;
        self.next[i].alive = false;
    }
}

struct Dwell {
    aim: Vec3,
    start: f64,
    end: f64,
    target: u64,
    integrated_to: f64,
    dose: Vec<f64>,
}

enum LaserPhase {
    Idle,
    Moving,
    Dwelling(Dwell),
}

struct Job {
    captured_at: f64,
    latency: f64,
    truth: Vec<MosquitoState>,
    observations: Vec<Observation>,
    /// Left grey window and its origin.
    gray: Option<(GrayFrame, (u32, u32))>,
}

/// Image-based detectors only look at the part of each image where the
/// flight box can appear.
struct View {
    renderer: Renderer,
    origin: (u32, u32),
}

impl View {
    fn new(camera: CameraModel, options: RenderOptions, region: &BoxRegion, margin: f64) -> Self {
        let (lo, hi) = (region.min_corner, region.max_corner);
        let (mut u0, mut v0, mut u1, mut v1) = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for i in 0..8 {
            let c = Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            );
            if let Ok(p) = camera.project(c) {
                u0 = u0.min(p.u);
                u1 = u1.max(p.u);
                v0 = v0.min(p.v);
                v1 = v1.max(p.v);
            }
        }
        let clamp_x = |u: f64| u.clamp(0.0, camera.width as f64 - 1.0);
        let clamp_y = |v: f64| v.clamp(0.0, camera.height as f64 - 1.0);
        let (x0, x1) = (
            clamp_x((u0 - margin).floor()) as u32,
            clamp_x((u1 + margin).ceil()) as u32,
        );
        let (y0, y1) = (
            clamp_y((v0 - margin).floor()) as u32,
            clamp_y((v1 + margin).ceil()) as u32,
        );
        let origin = (x0, y0);
        View {
            renderer: Renderer::windowed(camera, options, origin, (x1 - x0 + 1, y1 - y0 + 1)),
            origin,
        }
    }

    fn camera(&self) -> &CameraModel {
        self.renderer.camera()
    }
}

/// Grey image of a render window and the window's top-left pixel.
type WindowedGray = (GrayFrame, (u32, u32));

/// Moves window detections into full-frame coordinates.
fn to_full(origin: (u32, u32), mut dets: Vec<Detection>) -> Vec<Detection> {
    let (ox, oy) = origin;
    for d in &mut dets {
        d.centroid = (d.centroid.0 + ox as f64, d.centroid.1 + oy as f64);
        d.bbox = Rect {
            x0: d.bbox.x0 + ox,
            y0: d.bbox.y0 + oy,
            x1: d.bbox.x1 + ox,
            y1: d.bbox.y1 + oy,
        };
    }
    dets
}

#[derive(Debug, Clone, Copy)]
enum Event {
    FrameDue(u64),
    DetectionReady,
    GalvoSettled {
        target: u64,
        aim: Vec3,
        angles: (f64, f64),
    },
    DwellComplete,
}

struct Episode<'a> {
    scenario: &'a Scenario,
    pipeline: &'a PipelineConfig,
    options: RunOptions,
    model: FlightModel,
    truth: Truth,
    left: Option<View>,
    right: Option<View>,
    sensor_rng: ChaCha8Rng,
    detect_rng: ChaCha8Rng,
    kill_rng: ChaCha8Rng,
    queue: EventQueue<Event>,
    tracker: Tracker,
    galvo: GalvoState,
    laser: LaserPhase,
    job: Option<Job>,
    prev_truth: Option<Vec<MosquitoState>>,
    result: EpisodeResult,
}

/// Runs one episode with mosquitoes spawned from the flight stream.
pub fn run_episode(
    scenario: &Scenario,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    run_episode_with(scenario, pipeline, seed, None, RunOptions::default())
}

/// Runs one episode. `initial` overrides the spawned mosquitoes.
pub fn run_episode_with(
    scenario: &Scenario,
    pipeline: &PipelineConfig,
    seed: u64,
    initial: Option<Vec<MosquitoState>>,
    options: RunOptions,
) -> Result<EpisodeResult> {
    scenario.validate()?;
    pipeline.validate()?;
    let started = Instant::now();
    let mut flight_rng = stream(seed, STREAM_FLIGHT);
    let mosquitoes = initial.unwrap_or_else(|| scenario.spawn(&mut flight_rng));
    let model = scenario.flight_model();
    let renders = pipeline.detector != DetectorKind::Profiled;
    // blur smear at full speed, template search and template half-width
    let cam = &scenario.rig.left;
    let smear = (scenario.flight.s_max + scenario.wind.velocity.norm()) * cam.exposure * cam.f_px
        / scenario.region.min_corner.z;
    let margin =
        smear + (pipeline.vision.search_radius + pipeline.vision.template_size) as f64 + 4.0;
    let mut tracker = Tracker::new(pipeline.association, scenario.rig, scenario.nominal_depth());
    tracker.template_size = pipeline.vision.template_size;
    let outcomes = mosquitoes
        .iter()
        .map(|m| MosquitoOutcome {
            id: m.id,
            killed_at: None,
        })
        .collect();
    let mut ep = Episode {
        scenario,
        pipeline,
        options,
        model,
        truth: Truth::new(model, scenario.stationary, mosquitoes, flight_rng),
        left: renders
            .then(|| View::new(scenario.rig.left, scenario.render, &scenario.region, margin)),
        right: renders.then(|| {
            View::new(
                scenario.rig.right,
                scenario.render,
                &scenario.region,
                margin,
            )
        }),
        sensor_rng: stream(seed, STREAM_SENSOR),
        detect_rng: stream(seed, STREAM_DETECT),
        kill_rng: stream(seed, STREAM_KILL),
        queue: EventQueue::new(),
        tracker,
        galvo: GalvoState::default(),
        laser: LaserPhase::Idle,
        job: None,
        prev_truth: None,
        result: EpisodeResult {
            seed,
            episode_duration: pipeline.episode_duration,
            outcomes,
            containment: Vec::new(),
            fires: Vec::new(),
            hits: 0,
            hit_survivors: 0,
            lost_track_events: 0,
            detections: 0,
            detection_jobs: 0,
            latency_total: 0.0,
            boundary_clamps: 0,
            track_rows: Vec::new(),
            log: Vec::new(),
            wall_clock: Duration::ZERO,
        },
    };
    ep.run();
    ep.result.boundary_clamps = ep.truth.clamps;
    ep.result.wall_clock = started.elapsed();
    Ok(ep.result)
}

impl Episode<'_> {
    fn log(&mut self, time: f64, message: impl FnOnce() -> String) {
        if self.options.record {
            self.result.log.push(LogEntry {
                time,
                message: message(),
            });
        }
    }

    fn run(&mut self) {
        self.queue.push(0.0, Event::FrameDue(0));
        let end = self.pipeline.episode_duration;
        while let Some((t, ev)) = self.queue.pop() {
            if t > end {
                break;
            }
            self.advance_to(t);
            match ev {
                Event::FrameDue(k) => self.on_frame(t, k),
                Event::DetectionReady => self.on_detection(t),
                Event::GalvoSettled {
                    target,
                    aim,
                    angles,
                } => self.on_settled(t, target, aim, angles),
                Event::DwellComplete => self.on_dwell_complete(t),
            }
        }
    }

    /// Moves the truth forward to `t`, dosing along the way.
    fn advance_to(&mut self, t: f64) {
        while self.truth.next_time() <= t + TIME_EPS {
            let nt = self.truth.next_time();
            self.integrate_dwell(nt);
            self.truth.advance();
        }
        self.integrate_dwell(t);
    }

    /// Accumulates overlap from the last integrated instant up to `to`, which
    /// must not lie beyond the current tick.
    fn integrate_dwell(&mut self, to: f64) {
        let LaserPhase::Dwelling(d) = &mut self.laser else {
            return;
        };
        let hi = to.min(d.end);
        if hi <= d.integrated_to {
            return;
        }
        let mid = 0.5 * (d.integrated_to + hi);
        let span = hi - d.integrated_to;
        for (i, m) in self.truth.cur.iter().enumerate() {
            if m.alive {
                let p = self.truth.position_at(i, mid);
                d.dose[i] += beam_overlap(d.aim, p, m.body_radius, &self.scenario.laser) * span;
            }
        }
        d.integrated_to = hi;
    }

    fn on_frame(&mut self, t: f64, k: u64) {
        let period = self.scenario.rig.left.frame_period;
        self.queue
            .push((k + 1) as f64 * period, Event::FrameDue(k + 1));
        let snapshot = self.truth.cur.clone();
        if self.job.is_none() {
            let latency = self.pipeline.latency();
            let (observations, gray) = self.detect(t, &snapshot);
            self.job = Some(Job {
                captured_at: t,
                latency,
                truth: snapshot.clone(),
                observations,
                gray,
            });
            self.queue.push(t + latency, Event::DetectionReady);
        }
        self.prev_truth = Some(snapshot);
    }

    fn render_pair(&mut self, truth: &[MosquitoState], t: f64) -> (Frame, Frame) {
        let wind = self.scenario.wind;
        let l = &self.left.as_ref().expect("image detectors render").renderer;
        let r = &self
            .right
            .as_ref()
            .expect("image detectors render")
            .renderer;
        (
            l.render(truth, wind, t, &mut self.sensor_rng),
            r.render(truth, wind, t, &mut self.sensor_rng),
        )
    }

    fn disparity_range(&self) -> (f64, f64) {
        let b = &self.scenario.region;
        self.scenario
            .rig
            .disparity_range(b.min_corner.z - 10.0, b.max_corner.z + 10.0)
    }

    fn stereo(&self, left: &[Detection], right: &[Detection]) -> Vec<Observation> {
        match_stereo(
            left,
            right,
            self.disparity_range(),
            self.pipeline.vision.row_tolerance,
        )
    }

    /// Runs the configured detector on the scene as captured at `t`.
    fn detect(
        &mut self,
        t: f64,
        truth: &[MosquitoState],
    ) -> (Vec<Observation>, Option<WindowedGray>) {
        let z = self.scenario.nominal_depth();
        let vp = self.pipeline.vision;
        if self.pipeline.detector == DetectorKind::Profiled {
            let rig = self.scenario.rig;
            let (l, r) = profiled_detect_stereo(
                truth,
                &rig,
                &self.pipeline.profile,
                t,
                &mut self.detect_rng,
            );
            return (self.stereo(&l, &r), None);
        }
        let (vl, vr) = (
            self.left.as_ref().expect("rendered"),
            self.right.as_ref().expect("rendered"),
        );
        let (cl, cr) = (*vl.camera(), *vr.camera());
        let (ol, or) = (vl.origin, vr.origin);
        match self.pipeline.detector {
            DetectorKind::Profiled => unreachable!(),
            DetectorKind::Color => {
                let (fl, fr) = self.render_pair(truth, t);
                let color = self.scenario.render.mosquito_color;
                let blobs = |f: &Frame, cam| {
                    let mask = color_mask(f, color, vp.hsv);
                    filter_blobs(&connected_components(&mask), cam, z, &mask, t)
                };
                let (l, r) = (to_full(ol, blobs(&fl, &cl)), to_full(or, blobs(&fr, &cr)));
                (self.stereo(&l, &r), None)
            }
            DetectorKind::FrameDiff => {
                let Some(prev) = self.prev_truth.clone() else {
                    return (Vec::new(), None);
                };
                let period = self.scenario.rig.left.frame_period;
                let (pl, pr) = self.render_pair(&prev, t - period);
                let (fl, fr) = self.render_pair(truth, t);
                let thr = ThresholdParams::binary(vp.diff_threshold);
                let blobs = |p: &Frame, c: &Frame, cam| {
                    let (gp, gc) = (to_gray(p), to_gray(c));
                    let diff = frame_difference(&gp, &gc, thr);
                    let weights = abs_difference(&gp, &gc);
                    let mut comps = connected_components(&diff);
                    // keep only where the target arrived (darker now)
                    comps.retain(|b| {
                        let s: i64 = b
                            .pixels
                            .iter()
                            .map(|&(x, y)| gc.get(x, y) as i64 - gp.get(x, y) as i64)
                            .sum();
                        s < 0
                    });
                    filter_blobs(&comps, cam, z, &weights, t)
                };
                let (l, r) = (
                    to_full(ol, blobs(&pl, &fl, &cl)),
                    to_full(or, blobs(&pr, &fr, &cr)),
                );
                (self.stereo(&l, &r), None)
            }
            DetectorKind::CorrelationTrack => {
                let (fl, fr) = self.render_pair(truth, t);
                let (gl, gr) = (to_gray(&fl), to_gray(&fr));
                let dark = |g: &GrayFrame, cam| {
                    let params = ThresholdParams {
                        value: vp.dark_threshold,
                        max_value: 255,
                        mode: ThresholdMode::BinaryInverse,
                    };
                    let mask = threshold(g, params);
                    let inv = GrayFrame {
                        pixels: g.pixels.iter().map(|&p| 255 - p).collect(),
                        ..g.clone()
                    };
                    filter_blobs(&connected_components(&mask), cam, z, &inv, t)
                };
                let blob_obs =
                    self.stereo(&to_full(ol, dark(&gl, &cl)), &to_full(or, dark(&gr, &cr)));
                let left = ImageWindow {
                    gray: &gl,
                    origin: ol,
                };
                let right = ImageWindow {
                    gray: &gr,
                    origin: or,
                };
                let refined = self.refine_tracks(left, right, t);
                let merge = 0.5 * vp.template_size as f64;
                let mut obs = refined.clone();
                obs.extend(blob_obs.into_iter().filter(|b| {
                    !refined
                        .iter()
                        .any(|r| gate_contains(r.detection.centroid, b.detection.centroid, merge))
                }));
                (obs, Some((gl, ol)))
            }
        }
    }

    /// Template re-location of every live track in both views.
    fn refine_tracks(&self, gl: ImageWindow<'_>, gr: ImageWindow<'_>, t: f64) -> Vec<Observation> {
        let vp = self.pipeline.vision;
        let rig = &self.scenario.rig;
        let range = self.disparity_range();
        let nominal_d = rig.left.f_px * rig.baseline_t / self.scenario.nominal_depth();
        let half = vp.template_size as f64 / 2.0;
        let mut out: Vec<Observation> = Vec::new();
        for track in self.tracker.live() {
            let Some((u, v)) =
                correlation_refine_in(track, gl, track.last().pixel, vp.search_radius)
            else {
                continue;
            };
            // two tracks locking onto one target: the older keeps it
            if out
                .iter()
                .any(|o| gate_contains(o.detection.centroid, (u, v), 2.0))
            {
                continue;
            }
            let d_guess = track.last_disparity.unwrap_or(nominal_d);
            let disparity = correlation_refine_in(track, gr, (u - d_guess, v), vp.search_radius)
                .map(|(ur, _)| u - ur)
                .filter(|d| *d >= range.0 && *d <= range.1);
            let clampx = |x: f64| x.clamp(0.0, rig.left.width as f64 - 1.0) as u32;
            let clampy = |y: f64| y.clamp(0.0, rig.left.height as f64 - 1.0) as u32;
            out.push(Observation {
                detection: Detection {
                    centroid: (u, v),
                    bbox: Rect {
                        x0: clampx(u - half),
                        y0: clampy(v - half),
                        x1: clampx(u + half),
                        y1: clampy(v + half),
                    },
                    area: vp.template_size * vp.template_size,
                    timestamp: t,
                    score: 1.0,
                },
                disparity,
            });
        }
        out
    }

    fn on_detection(&mut self, t: f64) {
        let job = self.job.take().expect("detection pending");
        self.result.detection_jobs += 1;
        self.result.latency_total += job.latency;
        self.result.detections += job.observations.len() as u32;
        let image = job.gray.as_ref().map(|(g, origin)| ImageWindow {
            gray: g,
            origin: *origin,
        });
        let report = self
            .tracker
            .update(&job.observations, job.captured_at, image);
        self.result.lost_track_events += report.lost.len() as u32;
        for id in &report.lost {
            let id = *id;
            self.log(t, || format!("track {id} lost"));
        }
        self.tracker.expire(t);
        if self.options.record {
            for tr in self.tracker.live() {
                let last = tr.last();
                if last.timestamp == job.captured_at {
                    self.result.track_rows.push(TrackRow {
                        track_id: tr.id,
                        timestamp: last.timestamp,
                        u: last.pixel.0,
                        v: last.pixel.1,
                        world: last.world,
                        lifecycle: tr.lifecycle,
                    });
                }
            }
        }
        let n = job.observations.len();
        self.log(t, || {
            format!(
                "detection of frame {:.4} s: {n} observations",
                job.captured_at
            )
        });
        self.record_containment(&job);
        if matches!(self.laser, LaserPhase::Idle) {
            self.engage(t);
        }
    }

    fn record_containment(&mut self, job: &Job) {
        let cam = &self.scenario.rig.left;
        let gate = self.pipeline.association.gate_radius;
        let active: Vec<(f64, f64)> = self
            .tracker
            .live()
            .filter(|t| t.lifecycle == Lifecycle::Active)
            .map(|t| t.last().pixel)
            .collect();
        let mut rec = FrameContainment {
            timestamp: job.captured_at,
            visible: 0,
            eligible: 0,
            contained: 0,
        };
        for m in job.truth.iter().filter(|m| m.alive) {
            let Ok(p) = cam.project(m.position) else {
                continue;
            };
            if !cam.in_frame(p.u, p.v, 0.0) {
                continue;
            }
            rec.visible += 1;
            if active.is_empty() {
                continue;
            }
            rec.eligible += 1;
            let nearest = active
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - p.u).powi(2) + (a.1 - p.v).powi(2);
                    let db = (b.0 - p.u).powi(2) + (b.1 - p.v).powi(2);
                    da.total_cmp(&db)
                })
                .expect("non-empty");
            rec.contained += gate_contains(*nearest, (p.u, p.v), gate) as u32;
        }
        self.result.containment.push(rec);
    }

    /// Aim point for a track at time `now`, or `None` when it cannot be
    /// engaged.
    fn aim_for(&self, track: &Track, now: f64) -> Option<Vec3> {
        let settle = self.scenario.galvo.settle_time;
        let staleness = now - track.last().timestamp;
        match track.lifecycle {
            Lifecycle::Active => {
                let mut cfg = self.pipeline.predictor;
                if cfg.mode != PredictorMode::None {
                    cfg.horizon = cfg.horizon.max(staleness + settle);
                }
                predict(track, &cfg, &self.model).ok()
            }
            Lifecycle::DeadReckoned => {
                if track.history.len() < 2 {
                    return None;
                }
                dead_reckon(
                    track,
                    &self.model,
                    staleness + settle,
                    self.pipeline.association.max_coast,
                )
            }
            _ => None,
        }
    }

    fn engage(&mut self, now: f64) {
        let candidates: Vec<(u64, Vec3)> = self
            .tracker
            .live()
            .filter_map(|t| self.aim_for(t, now).map(|p| (t.id, p)))
            .collect();
        if candidates.is_empty() {
            return;
        }
        let beam = beam_direction(self.galvo.theta_x, self.galvo.theta_y);
        for id in schedule_targets(&candidates, self.pipeline.scheduler, beam) {
            let aim = candidates
                .iter()
                .find(|c| c.0 == id)
                .expect("scheduled from candidates")
                .1;
            let Ok(angles) = angles_for_target(aim, &self.scenario.galvo) else {
                continue;
            };
            let mt = move_time(&self.galvo, angles, &self.scenario.galvo);
            self.queue.push(
                now + mt,
                Event::GalvoSettled {
                    target: id,
                    aim,
                    angles,
                },
            );
            self.laser = LaserPhase::Moving;
            self.log(now, || {
                format!(
                    "galvo to track {id} aim ({:.2}, {:.2}, {:.2}) in {:.1} us",
                    aim.x,
                    aim.y,
                    aim.z,
                    mt * 1e6
                )
            });
            return;
        }
    }

    fn on_settled(&mut self, t: f64, target: u64, aim: Vec3, angles: (f64, f64)) {
        self.galvo = GalvoState {
            theta_x: angles.0,
            theta_y: angles.1,
            timestamp: t,
        };
        let end = t + self.pipeline.dwell;
        self.laser = LaserPhase::Dwelling(Dwell {
            aim,
            start: t,
            end,
            target,
            integrated_to: t,
            dose: vec![0.0; self.truth.cur.len()],
        });
        self.queue.push(end, Event::DwellComplete);
        self.log(t, || format!("laser on, track {target}"));
    }

    fn on_dwell_complete(&mut self, t: f64) {
        let LaserPhase::Dwelling(d) = std::mem::replace(&mut self.laser, LaserPhase::Idle) else {
            unreachable!("dwell completes only while dwelling");
        };
        // the strongest-dosed mosquito is the one the pulse hit
        let victim = d
            .dose
            .iter()
            .enumerate()
            .filter(|&(i, _)| self.truth.cur[i].alive)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, &dose)| (i, dose));
        let u: f64 = self.kill_rng.random();
        let (integral, killed) = match victim {
            Some((_, dose)) => (dose, u < kill_probability(dose, &self.scenario.kill)),
            None => (0.0, false),
        };
        let dwell = d.end - d.start;
        let centred = victim.map_or(0.0, |(i, _)| {
            dwell
                * overlap_fraction(
                    0.0,
                    self.truth.cur[i].body_radius,
                    self.scenario.laser.spot_diameter_at_nominal,
                )
        });
        if integral > 0.0 && integral >= self.pipeline.hit_min_fraction * centred {
            self.result.hits += 1;
            self.result.hit_survivors += (!killed) as u32;
        }
        if killed {
            let (i, _) = victim.expect("killed implies a victim");
            self.truth.kill(i);
            self.result.outcomes[i].killed_at = Some(t);
            // confirmed by the verification view
            self.tracker.terminate(d.target);
        }
        self.result.fires.push(FireRecord {
            time: d.start,
            aim: d.aim,
            dwell,
            target_id: d.target,
            overlap_integral: integral,
            mosquito: victim.map(|(i, _)| self.truth.cur[i].id),
            killed,
        });
        self.log(t, || {
            format!(
                "dwell on track {} done, integral {integral:.4} s, killed {killed}",
                d.target
            )
        });
        self.engage(t);
    }
}
