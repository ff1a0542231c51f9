//! Simulated ground truth: mosquito kinematics, the attractant field, wind
//! and the observation box.
//!
//! One flight tick is `update_heading` → `step` → `reflect_at_bounds`.
//! Speed follows the attractant ramp, `s = s_max - (s_max - s_min) * F(b)`,
//! and the position update is `p' = p + s*dt*d + V*dt`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlightParams {
    /// mm/s
    pub s_max: f64,
    /// mm/s
    pub s_min: f64,
    /// Integration step, s.
    pub dt: f64,
    /// Per-step heading jitter standard deviation, rad.
    pub sigma_turn: f64,
    /// Probability of a sharp turn per step.
    pub p_sharp: f64,
    /// Sharp-turn angle range, rad.
    pub sharp_turn_range: [f64; 2],
}

impl Default for FlightParams {
    fn default() -> Self {
        FlightParams {
            s_max: 1000.0,
            s_min: 250.0,
            dt: 1.0 / 240.0,
            sigma_turn: 2.8,
            p_sharp: 0.01,
            sharp_turn_range: [std::f64::consts::FRAC_PI_2, std::f64::consts::PI],
        }
    }
}

impl FlightParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.s_min.is_finite()) {
            return Err(Error::config("flight.s_min", "must be > 0"));
        }
        if !(self.s_max >= self.s_min && self.s_max.is_finite()) {
            return Err(Error::config("flight.s_max", "must be >= flight.s_min"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("flight.dt", "must be > 0"));
        }
        if !(self.sigma_turn >= 0.0 && self.sigma_turn.is_finite()) {
            return Err(Error::config("flight.sigma_turn", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.p_sharp) {
            return Err(Error::config("flight.p_sharp", "must lie in [0, 1]"));
        }
        let [lo, hi] = self.sharp_turn_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config(
                "flight.sharp_turn_lo",
                "sharp turn range must satisfy lo <= hi",
            ));
        }
        Ok(())
    }

    /// Same parameters with all heading noise switched off.
    pub fn noise_free(&self) -> Self {
        FlightParams {
            sigma_turn: 0.0,
            p_sharp: 0.0,
            ..*self
        }
    }
}

/// Static odour field `b(p) = q / (1 + |p - source|^2 / lambda^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttractantField {
    pub source: Vec3,
    pub q: f64,
    /// mm
    pub lambda: f64,
    pub b0: f64,
    pub b_sat: f64,
}

impl Default for AttractantField {
    fn default() -> Self {
        AttractantField {
            source: Vec3::new(0.0, 0.0, 300.0),
            q: 1.0,
            lambda: 20.0,
            b0: 0.25,
            b_sat: 0.95,
        }
    }
}

impl AttractantField {
    pub fn validate(&self) -> Result<()> {
        if !self.source.is_finite() {
            return Err(Error::config("attractant.source_x", "must be finite"));
        }
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(Error::config("attractant.q", "must be >= 0"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("attractant.lambda", "must be > 0"));
        }
        if !(self.b0 >= 0.0) {
            return Err(Error::config("attractant.b0", "must be >= 0"));
        }
        if !(self.b_sat > self.b0 && self.b_sat.is_finite()) {
            return Err(Error::config(
                "attractant.b_sat",
                "must exceed attractant.b0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wind {
    /// mm/s
    pub velocity: Vec3,
}

/// Axis-aligned observation box in world coordinates (mm). The laser and
/// both cameras look along +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub min_corner: Vec3,
    pub max_corner: Vec3,
}

impl Default for BoxRegion {
    /// 70 mm cube centred 300 mm down range.
    fn default() -> Self {
        BoxRegion {
            min_corner: Vec3::new(-35.0, -35.0, 265.0),
            max_corner: Vec3::new(35.0, 35.0, 335.0),
        }
    }
}

impl BoxRegion {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.min_corner, self.max_corner);
        for (axis, name) in ["x", "y", "z"].iter().enumerate() {
            if !(a.component(axis) < b.component(axis)) {
                return Err(Error::config(
                    format!("box.max_{name}"),
                    format!("must exceed box.min_{name}"),
                ));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        (self.min_corner + self.max_corner) * 0.5
    }

    pub fn size(&self) -> Vec3 {
        self.max_corner - self.min_corner
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| {
            p.component(i) >= self.min_corner.component(i)
                && p.component(i) <= self.max_corner.component(i)
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let s = self.size();
        self.min_corner
            + Vec3::new(
                rng.random::<f64>() * s.x,
                rng.random::<f64>() * s.y,
                rng.random::<f64>() * s.z,
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosquitoState {
    pub id: u32,
    pub position: Vec3,
    /// Unit vector.
    pub heading: Vec3,
    /// mm/s, as set by the last `step`.
    pub speed: f64,
    pub alive: bool,
    /// mm
    pub body_radius: f64,
}

impl MosquitoState {
    pub fn new(id: u32, position: Vec3, heading: Vec3, speed: f64, body_radius: f64) -> Self {
        MosquitoState {
            id,
            position,
            heading: heading.try_normalize().unwrap_or(Vec3::X),
            speed,
            alive: true,
            body_radius,
        }
    }

    /// Ground velocity including wind, mm/s.
    pub fn velocity(&self, wind: Wind) -> Vec3 {
        self.heading * self.speed + wind.velocity
    }
}

/// `q / (1 + d^2 / lambda^2)`.
pub fn concentration_at(field: &AttractantField, p: Vec3) -> f64 {
    let d2 = (p - field.source).norm_squared();
    field.q / (1.0 + d2 / (field.lambda * field.lambda))
}

/// Clamped linear ramp from `b0` (0) to `b_sat` (1).
pub fn ramp(b: f64, b0: f64, b_sat: f64) -> Result<f64> {
    if !(b_sat > b0) {
        return Err(Error::config(
            "attractant.b_sat",
            format!("ramp needs b_sat > b0, got b0={b0}, b_sat={b_sat}"),
        ));
    }
    Ok(((b - b0) / (b_sat - b0)).clamp(0.0, 1.0))
}

/// Flight speed for a ramp value `f` in [0, 1].
///
/// Panics if `f` is outside [0, 1].
pub fn speed(params: &FlightParams, f: f64) -> f64 {
    assert!((0.0..=1.0).contains(&f), "ramp value {f} outside [0, 1]");
    params.s_max - (params.s_max - params.s_min) * f
}

/// Random draws consumed by one heading update. Every update consumes the
/// same five draws whatever branch it takes, so switching a noise term on or
/// off never shifts the rest of the stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnDraws {
    /// Standard normal, scaled by `sigma_turn`.
    pub jitter: f64,
    /// Uniform [0, 1): azimuth of the jitter rotation axis.
    pub jitter_axis: f64,
    /// Uniform [0, 1): compared with `p_sharp`.
    pub sharp_gate: f64,
    /// Uniform [0, 1): position within `sharp_turn_range`.
    pub sharp_angle: f64,
    /// Uniform [0, 1): azimuth of the sharp-turn axis.
    pub sharp_axis: f64,
}

impl TurnDraws {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        TurnDraws {
            jitter: rng.sample(rand_distr::StandardNormal),
            jitter_axis: rng.random(),
            sharp_gate: rng.random(),
            sharp_angle: rng.random(),
            sharp_axis: rng.random(),
        }
    }

    /// Draws that produce no perturbation under any parameters.
    pub const QUIET: TurnDraws = TurnDraws {
        jitter: 0.0,
        jitter_axis: 0.0,
        sharp_gate: 1.0,
        sharp_angle: 0.0,
        sharp_axis: 0.0,
    };
}

fn perpendicular_axis(v: Vec3, azimuth_frac: f64) -> Vec3 {
    let e1 = v.any_orthogonal();
    let e2 = v.cross(e1);
    let phi = azimuth_frac * std::f64::consts::TAU;
    e1 * phi.cos() + e2 * phi.sin()
}

/// New heading from explicit draws. Above threshold the mosquito heads for
/// the source ("tracking"); below it the current heading does a correlated
/// random walk ("tracing"). A sharp turn may follow either.
pub fn update_heading_with(
    state: &MosquitoState,
    field: &AttractantField,
    params: &FlightParams,
    draws: &TurnDraws,
) -> Vec3 {
    let b = concentration_at(field, state.position);
    let base = if b >= field.b0 {
        (field.source - state.position)
            .try_normalize()
            .unwrap_or(state.heading)
    } else {
        state.heading
    };
    let mut h = base;
    let angle = params.sigma_turn * draws.jitter;
    if angle != 0.0 {
        h = h.rotate_about(perpendicular_axis(h, draws.jitter_axis), angle);
    }
    if draws.sharp_gate < params.p_sharp {
        let [lo, hi] = params.sharp_turn_range;
        let a = lo + (hi - lo) * draws.sharp_angle;
        h = h.rotate_about(perpendicular_axis(h, draws.sharp_axis), a);
    }
    h.try_normalize().unwrap_or(state.heading)
}

pub fn update_heading<R: Rng + ?Sized>(
    state: &MosquitoState,
    field: &AttractantField,
    params: &FlightParams,
    rng: &mut R,
) -> Vec3 {
    update_heading_with(state, field, params, &TurnDraws::draw(rng))
}

/// Moves the mosquito one `dt` along its current heading, plus wind drift.
pub fn step(
    state: &MosquitoState,
    params: &FlightParams,
    field: &AttractantField,
    wind: Wind,
) -> MosquitoState {
    let b = concentration_at(field, state.position);
    // b_sat > b0 is checked by AttractantField::validate
    let f = ramp(b, field.b0, field.b_sat).unwrap_or(0.0);
    let s = speed(params, f);
    MosquitoState {
        position: state.position + state.heading * (s * params.dt) + wind.velocity * params.dt,
        speed: s,
        ..*state
    }
}

/// Mirrors the position about any violated face and flips the matching
/// heading component. Returns `true` when a displacement was so large that
/// the mirror image still fell outside and the position had to be clamped.
pub fn reflect_at_bounds(state: &MosquitoState, region: &BoxRegion) -> (MosquitoState, bool) {
    let mut out = *state;
    let mut clamped = false;
    for axis in 0..3 {
        let lo = region.min_corner.component(axis);
        let hi = region.max_corner.component(axis);
        let p = out.position.component(axis);
        let mirrored = if p > hi {
            2.0 * hi - p
        } else if p < lo {
            2.0 * lo - p
        } else {
            continue;
        };
        *out.heading.component_mut(axis) = -out.heading.component(axis);
        *out.position.component_mut(axis) = if mirrored < lo || mirrored > hi {
            clamped = true;
            mirrored.clamp(lo, hi)
        } else {
            mirrored
        };
    }
    (out, clamped)
}

/// Everything needed to advance a mosquito by one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlightModel {
    pub params: FlightParams,
    pub field: AttractantField,
    pub wind: Wind,
    pub region: BoxRegion,
}

impl FlightModel {
    pub fn noise_free(&self) -> Self {
        FlightModel {
            params: self.params.noise_free(),
            ..*self
        }
    }

    /// One full tick with explicit draws. Returns the new state and whether
    /// the boundary had to clamp.
    pub fn tick_with(&self, state: &MosquitoState, draws: &TurnDraws) -> (MosquitoState, bool) {
        let heading = update_heading_with(state, &self.field, &self.params, draws);
        let moved = step(
            &MosquitoState { heading, ..*state },
            &self.params,
            &self.field,
            self.wind,
        );
        reflect_at_bounds(&moved, &self.region)
    }

    pub fn tick<R: Rng + ?Sized>(
        &self,
        state: &MosquitoState,
        rng: &mut R,
    ) -> (MosquitoState, bool) {
        self.tick_with(state, &TurnDraws::draw(rng))
    }

    /// `n` ticks; element `i` of the result is the state after `i + 1` ticks.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        state: &MosquitoState,
        n: usize,
        rng: &mut R,
    ) -> Vec<MosquitoState> {
        let mut out = Vec::with_capacity(n);
        let mut s = *state;
        for _ in 0..n {
            s = self.tick(&s, rng).0;
            out.push(s);
        }
        out
    }

    /// Deterministic, noise-free rollout of `n` ticks.
    pub fn coast(&self, state: &MosquitoState, n: usize) -> MosquitoState {
        let quiet = self.noise_free();
        let mut s = *state;
        for _ in 0..n {
            s = quiet.tick_with(&s, &TurnDraws::QUIET).0;
        }
        s
    }
}
