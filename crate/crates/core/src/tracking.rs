//! Multi-target track management, template tracking and flight prediction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::optics::StereoRig;
use crate::scene::{FlightModel, MosquitoState};
use crate::vision::{Detection, GrayFrame, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Tentative,
    Active,
    Lost,
    DeadReckoned,
    Terminated,
}

impl Lifecycle {
    pub fn as_str(self) -> &'static str {
        match self {
            Lifecycle::Tentative => "tentative",
            Lifecycle::Active => "active",
            Lifecycle::Lost => "lost",
            Lifecycle::DeadReckoned => "dead_reckoned",
            Lifecycle::Terminated => "terminated",
        }
    }

    /// Whether the laser may be pointed at a track in this state.
    pub fn is_engageable(self) -> bool {
        matches!(self, Lifecycle::Active | Lifecycle::DeadReckoned)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub timestamp: f64,
    pub pixel: (f64, f64),
    pub world: Vec3,
}

/// Grey patch cut around a target, with the offset from the patch centre
/// pixel to the target's sub-pixel centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub patch: GrayFrame,
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub lifecycle: Lifecycle,
    pub history: VecDeque<TrackPoint>,
    pub velocity_estimate: Vec3,
    pub template: Option<Template>,
    pub miss_count: u32,
    pub hit_streak: u32,
    pub last_disparity: Option<f64>,
    /// When the track entered `Lost` or `DeadReckoned`.
    pub lost_at: Option<f64>,
}

/// Points used for the finite-difference velocity.
pub const VELOCITY_WINDOW: usize = 5;
const HISTORY_CAPACITY: usize = 32;

impl Track {
    fn new(id: u64, point: TrackPoint, disparity: Option<f64>) -> Self {
        let mut history = VecDeque::with_capacity(HISTORY_CAPACITY);
        history.push_back(point);
        Track {
            id,
            lifecycle: Lifecycle::Tentative,
            history,
            velocity_estimate: Vec3::ZERO,
            template: None,
            miss_count: 0,
            hit_streak: 1,
            last_disparity: disparity,
            lost_at: None,
        }
    }

    pub fn last(&self) -> &TrackPoint {
        self.history
            .back()
            .expect("tracks are created with one point")
    }

    /// Appends a point; ignored unless strictly newer than the last one.
    fn push(&mut self, p: TrackPoint) -> bool {
        if p.timestamp <= self.last().timestamp {
            return false;
        }
        if self.history.len() == HISTORY_CAPACITY {
            self.history.pop_front();
        }
        self.history.push_back(p);
        self.velocity_estimate = finite_difference_velocity(&self.history);
        true
    }

    pub fn is_live(&self) -> bool {
        self.lifecycle != Lifecycle::Terminated
    }
}

/// `(p_last - p_first) / (t_last - t_first)` over the newest
/// [`VELOCITY_WINDOW`] points.
pub fn finite_difference_velocity(history: &VecDeque<TrackPoint>) -> Vec3 {
    let n = history.len();
    if n < 2 {
        return Vec3::ZERO;
    }
    let first = &history[n - n.min(VELOCITY_WINDOW)];
    let last = &history[n - 1];
    let dt = last.timestamp - first.timestamp;
    if dt <= 0.0 {
        return Vec3::ZERO;
    }
    (last.world - first.world) / dt
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    /// px
    pub gate_radius: f64,
    pub max_misses: u32,
    pub confirm_hits: u32,
    /// Longest a lost or dead-reckoned track is kept, s.
    pub max_coast: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            gate_radius: 30.0,
            max_misses: 3,
            confirm_hits: 2,
            max_coast: 1.0,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_radius > 0.0 && self.gate_radius.is_finite()) {
            return Err(Error::config("tracker.gate_radius", "must be > 0"));
        }
        if self.max_misses < 1 {
            return Err(Error::config("tracker.max_misses", "must be >= 1"));
        }
        if self.confirm_hits < 1 {
            return Err(Error::config("tracker.confirm_hits", "must be >= 1"));
        }
        if !(self.max_coast >= 0.0) {
            return Err(Error::config("tracker.max_coast", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// (index into tracks, index into detections)
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

impl Assignment {
    pub fn total_distance(&self, tracks: &[&Track], detections: &[Detection]) -> f64 {
        self.matches
            .iter()
            .map(|&(t, d)| pixel_distance(tracks[t].last().pixel, detections[d].centroid))
            .sum()
    }
}

fn pixel_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Greedy nearest-neighbour assignment in pixel space against each track's
/// last centroid. Pairs beyond the gate are never formed; equal distances go
/// to the lower track id.
pub fn associate(
    tracks: &[&Track],
    detections: &[Detection],
    cfg: &AssociationConfig,
) -> Assignment {
    let mut candidates = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (di, d) in detections.iter().enumerate() {
            let dist = pixel_distance(t.last().pixel, d.centroid);
            if dist <= cfg.gate_radius {
                candidates.push((dist, t.id, ti, di));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.3.cmp(&b.3)));
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; detections.len()];
    let mut out = Assignment::default();
    for (_, _, ti, di) in candidates {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            out.matches.push((ti, di));
        }
    }
    out.unmatched_tracks = (0..tracks.len()).filter(|&i| !track_used[i]).collect();
    out.unmatched_detections = (0..detections.len()).filter(|&i| !det_used[i]).collect();
    out
}

/// Result of a template search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateMatch {
    /// Sub-pixel position of the template centre.
    pub u: f64,
    pub v: f64,
    pub score: f64,
}

/// Peaks below this normalised correlation are treated as "not found".
pub const MIN_CORRELATION: f64 = 0.5;

fn ncc_at(
    template: &GrayFrame,
    t_mean: f64,
    t_norm: f64,
    image: &GrayFrame,
    x0: u32,
    y0: u32,
) -> f64 {
    let (tw, th) = (template.width, template.height);
    let n = (tw * th) as f64;
    let (mut s, mut s2, mut st) = (0.0, 0.0, 0.0);
    for y in 0..th {
        let row = (y0 + y) as usize * image.width as usize + x0 as usize;
        let trow = (y * tw) as usize;
        for x in 0..tw as usize {
            let i = image.pixels[row + x] as f64;
            let t = template.pixels[trow + x] as f64;
            s += i;
            s2 += i * i;
            st += i * t;
        }
    }
    let i_var = s2 - s * s / n;
    if i_var <= 1e-9 || t_norm <= 1e-9 {
        return 0.0;
    }
    (st - t_mean * s) / (i_var.sqrt() * t_norm)
}

/// Normalised cross-correlation search for `template` around `center`
/// (template-centre coordinates), with parabolic sub-pixel refinement of the
/// peak. The window is clipped to positions where the template fits in the
/// image. Zero-variance windows score 0.
pub fn match_template(
    template: &GrayFrame,
    image: &GrayFrame,
    center: (f64, f64),
    search_radius: u32,
) -> Option<TemplateMatch> {
    let (tw, th) = (template.width as i64, template.height as i64);
    if tw > image.width as i64 || th > image.height as i64 {
        return None;
    }
    let n = (tw * th) as f64;
    let t_mean = template.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let t_norm = template
        .pixels
        .iter()
        .map(|&p| (p as f64 - t_mean).powi(2))
        .sum::<f64>()
        .sqrt();

    // top-left corner range
    let cx = center.0.round() as i64 - tw / 2;
    let cy = center.1.round() as i64 - th / 2;
    let r = search_radius as i64;
    let x_lo = (cx - r).max(0);
    let x_hi = (cx + r).min(image.width as i64 - tw);
    let y_lo = (cy - r).max(0);
    let y_hi = (cy + r).min(image.height as i64 - th);
    if x_lo > x_hi || y_lo > y_hi {
        return None;
    }
    let cols = (x_hi - x_lo + 1) as usize;
    let mut scores = vec![0.0; cols * (y_hi - y_lo + 1) as usize];
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for (j, y) in (y_lo..=y_hi).enumerate() {
        for (i, x) in (x_lo..=x_hi).enumerate() {
            let s = ncc_at(template, t_mean, t_norm, image, x as u32, y as u32);
            scores[j * cols + i] = s;
            if s > best.0 {
                best = (s, i, j);
            }
        }
    }
    let (score, bi, bj) = best;
    if !(score >= MIN_CORRELATION) {
        return None;
    }
    let rows = scores.len() / cols;
    let parabolic = |a: f64, b: f64, c: f64| {
        let den = a - 2.0 * b + c;
        if den.abs() < 1e-12 {
            0.0
        } else {
            (0.5 * (a - c) / den).clamp(-0.5, 0.5)
        }
    };
    let dx = if bi > 0 && bi + 1 < cols {
        parabolic(
            scores[bj * cols + bi - 1],
            score,
            scores[bj * cols + bi + 1],
        )
    } else {
        0.0
    };
    let dy = if bj > 0 && bj + 1 < rows {
        parabolic(
            scores[(bj - 1) * cols + bi],
            score,
            scores[(bj + 1) * cols + bi],
        )
    } else {
        0.0
    };
    Some(TemplateMatch {
        u: (x_lo + bi as i64 + tw / 2) as f64 + dx,
        v: (y_lo + bj as i64 + th / 2) as f64 + dy,
        score,
    })
}

/// A grey image covering part of the sensor. `origin` is the full-frame
/// pixel of its top-left corner.
#[derive(Debug, Clone, Copy)]
pub struct ImageWindow<'a> {
    pub gray: &'a GrayFrame,
    pub origin: (u32, u32),
}

impl<'a> ImageWindow<'a> {
    pub fn full(gray: &'a GrayFrame) -> Self {
        ImageWindow {
            gray,
            origin: (0, 0),
        }
    }

    pub fn to_local(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 - self.origin.0 as f64, p.1 - self.origin.1 as f64)
    }

    pub fn to_full(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 + self.origin.0 as f64, p.1 + self.origin.1 as f64)
    }
}

/// Re-locates a track in a new frame by template correlation around its last
/// centroid. Returns the target centroid, or `None` when the track has no
/// template or the best match scores below [`MIN_CORRELATION`].
pub fn correlation_refine(
    track: &Track,
    gray: &GrayFrame,
    search_radius: u32,
) -> Option<(f64, f64)> {
    correlation_refine_in(
        track,
        ImageWindow::full(gray),
        track.last().pixel,
        search_radius,
    )
}

/// As [`correlation_refine`], searching a window around an explicit
/// full-frame centroid. The result is in full-frame coordinates.
pub fn correlation_refine_in(
    track: &Track,
    image: ImageWindow<'_>,
    around: (f64, f64),
    search_radius: u32,
) -> Option<(f64, f64)> {
    let t = track.template.as_ref()?;
    let (u, v) = image.to_local(around);
    let guess = (u - t.offset.0, v - t.offset.1);
    let m = match_template(&t.patch, image.gray, guess, search_radius)?;
    Some(image.to_full((m.u + t.offset.0, m.v + t.offset.1)))
}

/// Cuts a template around a sub-pixel centroid.
pub fn cut_template(gray: &GrayFrame, centroid: (f64, f64), size: u32) -> Option<Template> {
    let (px, py) = (centroid.0.round(), centroid.1.round());
    let patch = gray.patch(px as i64, py as i64, size)?;
    Some(Template {
        patch,
        offset: (centroid.0 - px, centroid.1 - py),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    None,
    Linear,
    FlightModel,
}

impl PredictorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictorMode::None => "none",
            PredictorMode::Linear => "linear",
            PredictorMode::FlightModel => "flight_model",
        }
    }
}

impl std::str::FromStr for PredictorMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(PredictorMode::None),
            "linear" => Ok(PredictorMode::Linear),
            "flight_model" => Ok(PredictorMode::FlightModel),
            _ => Err(format!(
                "unknown predictor `{s}` (none|linear|flight_model)"
            )),
        }
    }
}

/// Shortest lead time a predictor may use, s.
pub const MIN_HORIZON: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub mode: PredictorMode,
    /// s
    pub horizon: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            mode: PredictorMode::FlightModel,
            horizon: MIN_HORIZON,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::config("pipeline.horizon", "must be finite and >= 0"));
        }
        if self.mode != PredictorMode::None && self.horizon < MIN_HORIZON {
            return Err(Error::config(
                "pipeline.horizon",
                format!("must be >= {MIN_HORIZON} s when a predictor is enabled"),
            ));
        }
        Ok(())
    }
}

/// Noise-free flight-model rollout from the track's last position, heading
/// along its velocity estimate. A track with exactly zero velocity is
/// treated as resting and stays put.
fn coast_from(track: &Track, model: &FlightModel, horizon: f64, body_radius: f64) -> Vec3 {
    let last = track.last().world;
    let Some(heading) = track.velocity_estimate.try_normalize() else {
        return last;
    };
    let steps = (horizon / model.params.dt).round() as usize;
    let start = MosquitoState::new(0, last, heading, 0.0, body_radius);
    model.coast(&start, steps).position
}

/// Predicted world position `horizon` seconds after the track's last
/// observation.
pub fn predict(track: &Track, cfg: &PredictorConfig, model: &FlightModel) -> Result<Vec3> {
    if track.history.len() < 2 || !track.lifecycle.is_engageable() {
        return Err(Error::NotReady(track.id));
    }
    let last = track.last().world;
    Ok(match cfg.mode {
        PredictorMode::None => last,
        PredictorMode::Linear => last + track.velocity_estimate * cfg.horizon,
        PredictorMode::FlightModel => coast_from(track, model, cfg.horizon, 1.0),
    })
}

/// Position of a track that left the view, `elapsed` seconds after its last
/// observation. `None` once `elapsed` exceeds `max_coast`: the track should
/// be terminated.
pub fn dead_reckon(
    track: &Track,
    model: &FlightModel,
    elapsed: f64,
    max_coast: f64,
) -> Option<Vec3> {
    if elapsed > max_coast {
        return None;
    }
    Some(coast_from(track, model, elapsed.max(0.0), 1.0))
}

/// What one tracker update did, for episode bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    pub matched: usize,
    pub spawned: usize,
    /// Ids of active tracks that just exceeded their miss budget.
    pub lost: Vec<u64>,
    pub terminated: Vec<u64>,
}

/// Owns the track store of one episode.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub config: AssociationConfig,
    pub rig: StereoRig,
    /// Depth assumed for monocular observations, mm.
    pub nominal_depth: f64,
    pub template_size: u32,
    tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(config: AssociationConfig, rig: StereoRig, nominal_depth: f64) -> Self {
        Tracker {
            config,
            rig,
            nominal_depth,
            template_size: 11,
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    /// Every track ever created this episode, terminated ones included.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn live(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.is_live())
    }

    pub fn get(&self, id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn terminate(&mut self, id: u64) {
        if let Some(t) = self.tracks.iter_mut().find(|t| t.id == id) {
            t.lifecycle = Lifecycle::Terminated;
        }
    }

    fn world_of(&self, obs: &Observation) -> Vec3 {
        let (u, v) = obs.detection.centroid;
        obs.disparity
            .and_then(|d| self.rig.triangulate(u, v, d).ok())
            .unwrap_or_else(|| self.rig.left.unproject(u, v, self.nominal_depth))
    }

    /// Folds one frame's observations into the track store. `image` is the
    /// left image the observations came from; when given, templates are cut
    /// from it.
    pub fn update(
        &mut self,
        observations: &[Observation],
        timestamp: f64,
        image: Option<ImageWindow<'_>>,
    ) -> UpdateReport {
        let cut = |c: (f64, f64), size: u32| {
            image.and_then(|w| cut_template(w.gray, w.to_local(c), size))
        };
        let mut report = UpdateReport::default();
        let live: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| self.tracks[i].is_live())
            .collect();
        let detections: Vec<Detection> = observations.iter().map(|o| o.detection).collect();
        let assignment = {
            let refs: Vec<&Track> = live.iter().map(|&i| &self.tracks[i]).collect();
            associate(&refs, &detections, &self.config)
        };

        for &(ti, di) in &assignment.matches {
            let world = self.world_of(&observations[di]);
            let template = cut(detections[di].centroid, self.template_size);
            let confirm = self.config.confirm_hits;
            let t = &mut self.tracks[live[ti]];
            let point = TrackPoint {
                timestamp,
                pixel: detections[di].centroid,
                world,
            };
            if !t.push(point) {
                continue;
            }
            report.matched += 1;
            t.miss_count = 0;
            t.hit_streak += 1;
            if observations[di].disparity.is_some() {
                t.last_disparity = observations[di].disparity;
            }
            if template.is_some() {
                t.template = template;
            }
            match t.lifecycle {
                Lifecycle::Tentative if t.hit_streak >= confirm => t.lifecycle = Lifecycle::Active,
                Lifecycle::Lost | Lifecycle::DeadReckoned => {
                    t.lifecycle = Lifecycle::Active;
                    t.lost_at = None;
                }
                _ => {}
            }
        }

        for &ti in &assignment.unmatched_tracks {
            let (max_misses, max_coast) = (self.config.max_misses, self.config.max_coast);
            let in_view = {
                let t = &self.tracks[live[ti]];
                let (u, v) = t.last().pixel;
                self.rig.left.in_frame(u, v, -self.config.gate_radius)
            };
            let t = &mut self.tracks[live[ti]];
            t.hit_streak = 0;
            match t.lifecycle {
                Lifecycle::Tentative => {
                    t.lifecycle = Lifecycle::Terminated;
                    report.terminated.push(t.id);
                }
                Lifecycle::Active => {
                    t.miss_count += 1;
                    if t.miss_count > max_misses {
                        t.lifecycle = if in_view {
                            Lifecycle::Lost
                        } else {
                            Lifecycle::DeadReckoned
                        };
                        t.lost_at = Some(timestamp);
                        report.lost.push(t.id);
                    }
                }
                Lifecycle::Lost | Lifecycle::DeadReckoned => {
                    t.miss_count += 1;
                    if timestamp - t.lost_at.unwrap_or(timestamp) > max_coast {
                        t.lifecycle = Lifecycle::Terminated;
                        report.terminated.push(t.id);
                    }
                }
                Lifecycle::Terminated => {}
            }
        }

        for &di in &assignment.unmatched_detections {
            let point = TrackPoint {
                timestamp,
                pixel: detections[di].centroid,
                world: self.world_of(&observations[di]),
            };
            let mut t = Track::new(self.next_id, point, observations[di].disparity);
            self.next_id += 1;
            t.template = cut(point.pixel, self.template_size);
            if self.config.confirm_hits <= 1 {
                t.lifecycle = Lifecycle::Active;
            }
            self.tracks.push(t);
            report.spawned += 1;
        }
        report
    }

    /// Terminates coasting tracks that have exceeded `max_coast` by `now`,
    /// without needing a new frame.
    pub fn expire(&mut self, now: f64) -> Vec<u64> {
        let max_coast = self.config.max_coast;
        let mut out = Vec::new();
        for t in &mut self.tracks {
            if matches!(t.lifecycle, Lifecycle::Lost | Lifecycle::DeadReckoned)
                && now - t.lost_at.unwrap_or(now) > max_coast
            {
                t.lifecycle = Lifecycle::Terminated;
                out.push(t.id);
            }
        }
        out
    }
}
