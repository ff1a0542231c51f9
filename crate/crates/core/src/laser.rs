//! Galvanometer steering and the beam dose / kill model.
//!
//! The galvo sits at the world origin with its boresight along +z. Angles are
//! optical deflections; the mirrors turn by half of that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GalvoState {
    pub theta_x: f64,
    pub theta_y: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GalvoLimits {
    /// s; 20 kpps
    pub settle_time: f64,
    /// optical rad/s
    pub max_slew: f64,
    /// rad
    pub field_limit: f64,
}

impl Default for GalvoLimits {
    fn default() -> Self {
        GalvoLimits {
            settle_time: 1.0 / 20_000.0,
            max_slew: 700.0,
            field_limit: 0.35,
        }
    }
}

impl GalvoLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.settle_time > 0.0 && self.settle_time.is_finite()) {
            return Err(Error::config("galvo.settle_time", "must be > 0"));
        }
        if !(self.max_slew > 0.0 && self.max_slew.is_finite()) {
            return Err(Error::config("galvo.max_slew", "must be > 0"));
        }
        if !(self.field_limit > 0.0 && self.field_limit < std::f64::consts::FRAC_PI_2) {
            return Err(Error::config("galvo.field_limit", "must be in (0, pi/2)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserSpec {
    /// W
    pub power: f64,
    /// nm
    pub wavelength: f64,
    /// 1/e² diameter at `nominal_range`, mm
    pub spot_diameter_at_nominal: f64,
    /// mm
    pub nominal_range: f64,
    /// Relative spot-area increase from the near to the far end of
    /// `growth_span`.
    pub area_growth: f64,
    /// Depth interval, centred on `nominal_range`, over which `area_growth`
    /// applies, mm.
    pub growth_span: f64,
}

impl Default for LaserSpec {
    fn default() -> Self {
        LaserSpec {
            power: 1.0,
            wavelength: 450.0,
            spot_diameter_at_nominal: 3.0,
            nominal_range: 300.0,
            area_growth: 0.02,
            growth_span: 70.0,
        }
    }
}

impl LaserSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.power) {
            return Err(Error::config("laser.power", "must be > 0"));
        }
        if !pos(self.wavelength) {
            return Err(Error::config("laser.wavelength", "must be > 0"));
        }
        if !pos(self.spot_diameter_at_nominal) {
            return Err(Error::config(
                "laser.spot_diameter_at_nominal",
                "must be > 0",
            ));
        }
        if !pos(self.nominal_range) {
            return Err(Error::config("laser.nominal_range", "must be > 0"));
        }
        if !(self.area_growth >= 0.0 && self.area_growth.is_finite()) {
            return Err(Error::config("laser.area_growth", "must be >= 0"));
        }
        if !pos(self.growth_span) {
            return Err(Error::config("laser.growth_span", "must be > 0"));
        }
        Ok(())
    }

    /// Relative area change per mm of depth.
    fn area_slope(&self) -> f64 {
        let g = self.area_growth;
        // (1 + s h) / (1 - s h) = 1 + g with h the half span
        g / (0.5 * self.growth_span * (2.0 + g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirePlan {
    pub aim: Vec3,
    pub move_time: f64,
    pub dwell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KillModel {
    /// 1/s
    pub rate_k: f64,
}

impl KillModel {
    /// Rate that makes a centred `dwell` on a stationary target of
    /// `body_radius` at the nominal range kill with probability `p`.
    pub fn calibrated(spec: &LaserSpec, body_radius: f64, dwell: f64, p: f64) -> Self {
        let centred = overlap_fraction(0.0, body_radius, spec.spot_diameter_at_nominal);
        KillModel {
            rate_k: -(1.0 - p).ln() / (dwell * centred),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_k > 0.0 && self.rate_k.is_finite()) {
            return Err(Error::config("laser.rate_k", "must be > 0"));
        }
        Ok(())
    }
}

impl Default for KillModel {
    /// Half of centred 0.5 s pulses on a 1 mm-radius target kill.
    fn default() -> Self {
        KillModel::calibrated(&LaserSpec::default(), 1.0, 0.5, 0.5)
    }
}

/// Optical angles that point the beam at `aim`.
pub fn angles_for_target(aim: Vec3, limits: &GalvoLimits) -> Result<(f64, f64)> {
    if !(aim.z > 0.0) {
        return Err(Error::BehindCamera { depth: aim.z });
    }
    let theta_x = (aim.x / aim.z).atan();
    let theta_y = (aim.y / aim.z).atan();
    if theta_x.abs() > limits.field_limit || theta_y.abs() > limits.field_limit {
        return Err(Error::OutOfField {
            theta_x,
            theta_y,
            limit: limits.field_limit,
        });
    }
    Ok((theta_x, theta_y))
}

/// Unit beam direction for a pair of optical angles.
pub fn beam_direction(theta_x: f64, theta_y: f64) -> Vec3 {
    Vec3::new(theta_x.tan(), theta_y.tan(), 1.0)
        .try_normalize()
        .expect("finite angles below pi/2")
}

/// Where the beam at the given angles crosses the plane at depth `z`.
pub fn beam_point_at_depth(theta_x: f64, theta_y: f64, z: f64) -> Vec3 {
    Vec3::new(z * theta_x.tan(), z * theta_y.tan(), z)
}

pub fn move_time(from: &GalvoState, to: (f64, f64), limits: &GalvoLimits) -> f64 {
    let delta = (to.0 - from.theta_x).abs().max((to.1 - from.theta_y).abs());
    limits.settle_time.max(delta / limits.max_slew)
}

/// 1/e² spot diameter at depth `z`, mm.
pub fn spot_diameter(z: f64, spec: &LaserSpec) -> f64 {
    let a_nom = std::f64::consts::PI * spec.spot_diameter_at_nominal.powi(2) / 4.0;
    let area = a_nom * (1.0 + spec.area_slope() * (z - spec.nominal_range));
    (area.max(0.0) * 4.0 / std::f64::consts::PI).sqrt()
}

/// Exponentially scaled modified Bessel function `exp(-|x|) I0(x)`.
fn bessel_i0e(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 3.75 {
        let y = (x / 3.75).powi(2);
        let i0 = 1.0
            + y * (3.5156229
                + y * (3.0899424
                    + y * (1.2067492 + y * (0.2659732 + y * (0.0360768 + y * 0.0045813)))));
        i0 * (-ax).exp()
    } else {
        let y = 3.75 / ax;
        (0.39894228
            + y * (0.01328592
                + y * (0.00225319
                    + y * (-0.00157565
                        + y * (0.00916281
                            + y * (-0.02057706
                                + y * (0.02635537 + y * (-0.01647633 + y * 0.00392377))))))))
            / ax.sqrt()
    }
}

const OVERLAP_NODES: usize = 64;

/// Fraction of a circular Gaussian beam of 1/e² diameter `spot` that falls
/// inside a disc of `radius` whose centre is `miss` from the beam axis.
pub fn overlap_fraction(miss: f64, radius: f64, spot: f64) -> f64 {
    if radius <= 0.0 || spot <= 0.0 {
        return 0.0;
    }
    let w2 = (spot / 2.0).powi(2);
    let m = miss.abs();
    if m == 0.0 {
        return 1.0 - (-2.0 * radius * radius / w2).exp();
    }
    // Far tail: the whole disc sees less than exp(-50) of the peak.
    if m > radius && 2.0 * (m - radius).powi(2) / w2 > 50.0 {
        return 0.0;
    }
    // Polar integral around the disc centre (Simpson in ρ). The integrand is
    // negligible more than 6 beam radii away from ρ = m.
    let w = w2.sqrt();
    let lo = (m - 6.0 * w).max(0.0);
    let hi = (m + 6.0 * w).min(radius);
    if hi <= lo {
        return 0.0;
    }
    let h = (hi - lo) / OVERLAP_NODES as f64;
    let f = |rho: f64| {
        let x = 4.0 * rho * m / w2;
        4.0 * rho / w2 * (-2.0 * (rho - m).powi(2) / w2).exp() * bessel_i0e(x)
    };
    let mut sum = f(lo) + f(hi);
    for i in 1..OVERLAP_NODES {
        let k = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += k * f(lo + i as f64 * h);
    }
    (sum * h / 3.0).clamp(0.0, 1.0)
}

/// Lateral distance of `target` from the beam aimed at `aim` from the origin.
pub fn miss_distance(aim: Vec3, target: Vec3) -> f64 {
    match aim.try_normalize() {
        Some(d) => (target - d * target.dot(d)).norm(),
        None => target.norm(),
    }
}

/// Fraction of beam power landing on a target of `body_radius` at `target`
/// while the beam points at `aim`.
pub fn beam_overlap(aim: Vec3, target: Vec3, body_radius: f64, spec: &LaserSpec) -> f64 {
    if !(target.z > 0.0) {
        return 0.0;
    }
    let spot = spot_diameter(target.z, spec);
    overlap_fraction(miss_distance(aim, target), body_radius, spot)
}

/// `1 - exp(-rate_k * overlap_integral)`; the integral is the time integral
/// of [`beam_overlap`] over a dwell, in seconds.
pub fn kill_probability(overlap_integral: f64, model: &KillModel) -> f64 {
    (1.0 - (-model.rate_k * overlap_integral.max(0.0)).exp()).clamp(0.0, 1.0)
}
