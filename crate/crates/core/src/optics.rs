//! Pinhole cameras, the rectified stereo rig and the synthetic frame
//! renderer.
//!
//! Pixel centres sit on integer coordinates, so the principal point of a
//! 640x480 sensor is (319.5, 239.5).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene::{MosquitoState, Wind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraId {
    Left,
    Right,
}

impl CameraId {
    pub fn as_str(self) -> &'static str {
        match self {
            CameraId::Left => "left",
            CameraId::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: CameraId,
    pub position: Vec3,
    /// Unit optical axis. World +y maps to image-down.
    pub axis: Vec3,
    pub f_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// s
    pub frame_period: f64,
    /// s
    pub exposure: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            id: CameraId::Left,
            position: Vec3::ZERO,
            axis: Vec3::Z,
            f_px: 600.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
            frame_period: 1.0 / 30.0,
            exposure: 1.0 / 60.0,
        }
    }
}

/// Projection of a world point: sub-pixel image coordinates and depth along
/// the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_px > 0.0 && self.f_px.is_finite()) {
            return Err(Error::config("camera.f_px", "must be > 0"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera.width", "resolution must be nonzero"));
        }
        if !(self.frame_period > 0.0 && self.frame_period.is_finite()) {
            return Err(Error::config("camera.frame_period", "must be > 0"));
        }
        if !(self.exposure >= 0.0 && self.exposure <= self.frame_period) {
            return Err(Error::config(
                "camera.exposure",
                "must lie in [0, camera.frame_period]",
            ));
        }
        if self.axis.try_normalize().is_none() {
            return Err(Error::config("camera.axis", "must be nonzero"));
        }
        Ok(())
    }

    /// (right, down, forward) unit vectors of the camera frame in world
    /// coordinates.
    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let fwd = self.axis.try_normalize().unwrap_or(Vec3::Z);
        let down = (Vec3::Y - fwd * Vec3::Y.dot(fwd))
            .try_normalize()
            .unwrap_or_else(|| fwd.any_orthogonal());
        let right = down.cross(fwd);
        (right, down, fwd)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let (r, d, f) = self.basis();
        let q = p - self.position;
        Vec3::new(q.dot(r), q.dot(d), q.dot(f))
    }

    pub fn from_camera(&self, c: Vec3) -> Vec3 {
        let (r, d, f) = self.basis();
        self.position + r * c.x + d * c.y + f * c.z
    }

    pub fn project(&self, p: Vec3) -> Result<Projection> {
        let c = self.to_camera(p);
        if !(c.z > 0.0) {
            return Err(Error::BehindCamera { depth: c.z });
        }
        Ok(Projection {
            u: self.f_px * c.x / c.z + self.cx,
            v: self.f_px * c.y / c.z + self.cy,
            depth: c.z,
        })
    }

    /// World point at image position (u, v) and the given depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = Vec3::new(
            depth * (u - self.cx) / self.f_px,
            depth * (v - self.cy) / self.f_px,
            depth,
        );
        self.from_camera(c)
    }

    pub fn in_frame(&self, u: f64, v: f64, margin: f64) -> bool {
        u >= -margin
            && v >= -margin
            && u <= self.width as f64 - 1.0 + margin
            && v <= self.height as f64 - 1.0 + margin
    }
}

/// Rectified parallel-axis stereo pair, baseline along world x and centred
/// on `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub left: CameraModel,
    pub right: CameraModel,
    /// mm
    pub baseline_t: f64,
}

impl Default for StereoRig {
    fn default() -> Self {
        StereoRig::new(CameraModel::default(), 60.0, Vec3::ZERO)
    }
}

impl StereoRig {
    /// Builds both cameras from one intrinsic template.
    pub fn new(template: CameraModel, baseline_t: f64, center: Vec3) -> Self {
        let half = Vec3::X * (baseline_t / 2.0);
        StereoRig {
            left: CameraModel {
                id: CameraId::Left,
                position: center - half,
                axis: Vec3::Z,
                ..template
            },
            right: CameraModel {
                id: CameraId::Right,
                position: center + half,
                axis: Vec3::Z,
                ..template
            },
            baseline_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.left.validate()?;
        self.right.validate()?;
        if !(self.baseline_t > 0.0 && self.baseline_t.is_finite()) {
            return Err(Error::config("rig.baseline", "must be > 0"));
        }
        if self.left.f_px != self.right.f_px
            || self.left.width != self.right.width
            || self.left.height != self.right.height
        {
            return Err(Error::config(
                "camera.f_px",
                "stereo cameras must share focal length and resolution",
            ));
        }
        Ok(())
    }

    pub fn camera(&self, id: CameraId) -> &CameraModel {
        match id {
            CameraId::Left => &self.left,
            CameraId::Right => &self.right,
        }
    }

    /// World point from a left-image position and a disparity.
    pub fn triangulate(&self, u_left: f64, v_left: f64, d: f64) -> Result<Vec3> {
        let z = depth_from_disparity(self, d)?;
        Ok(self.left.unproject(u_left, v_left, z))
    }

    /// Disparity range (px) of points with depth in `[z_near, z_far]`.
    pub fn disparity_range(&self, z_near: f64, z_far: f64) -> (f64, f64) {
        let k = self.left.f_px * self.baseline_t;
        (k / z_far, k / z_near)
    }
}

pub fn disparity(u_left: f64, u_right: f64) -> f64 {
    u_left - u_right
}

/// `Z = f * T / d` with `f` in pixels.
pub fn depth_from_disparity(rig: &StereoRig, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveDisparity(d));
    }
    Ok(rig.left.f_px * rig.baseline_t / d)
}

/// Timestamped RGB8 image from one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGB, row major.
    pub pixels: Vec<u8>,
    pub timestamp: f64,
    pub camera_id: CameraId,
}

impl Frame {
    pub fn filled(
        width: u32,
        height: u32,
        rgb: [u8; 3],
        timestamp: f64,
        camera_id: CameraId,
    ) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            pixels.extend_from_slice(&rgb);
        }
        Frame {
            width,
            height,
            pixels,
            timestamp,
            camera_id,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Uniform {
        rgb: [u8; 3],
    },
    /// Square tiles of random colour, fixed by `seed`.
    Textured {
        tile_px: u32,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub background: Background,
    /// Intensity units (0-255 scale), per channel.
    pub sensor_noise_sigma: f64,
    pub motion_blur: bool,
    pub mosquito_color: [u8; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: Background::Uniform {
                rgb: [205, 200, 190],
            },
            sensor_noise_sigma: 3.0,
            motion_blur: true,
            mosquito_color: [60, 42, 30],
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensor_noise_sigma >= 0.0 && self.sensor_noise_sigma.is_finite()) {
            return Err(Error::config("render.noise_sigma", "must be >= 0"));
        }
        if let Background::Textured { tile_px: 0, .. } = self.background {
            return Err(Error::config("render.tile_px", "must be > 0"));
        }
        Ok(())
    }
}

/// Length of the shared pool of quantised Gaussian noise samples.
const NOISE_POOL_LEN: usize = 1 << 20;

/// Pools are built once per sigma and shared by every renderer.
fn noise_pool(sigma: f64) -> Arc<[i16]> {
    static POOLS: OnceLock<Mutex<HashMap<u64, Arc<[i16]>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    pools
        .entry(sigma.to_bits())
        .or_insert_with(|| {
            let mut rng = SmallRng::seed_from_u64(0x005E_ED0F_5E45_0125);
            (0..NOISE_POOL_LEN)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (sigma * z).round().clamp(-255.0, 255.0) as i16
                })
                .collect()
        })
        .clone()
}

/// Renders frames for one camera. The background is computed once; each
/// frame adds mosquitoes and fresh sensor noise. Noise rows are read from a
/// fixed pool of Gaussian samples at offsets drawn per frame.
#[derive(Debug, Clone)]
pub struct Renderer {
    camera: CameraModel,
    options: RenderOptions,
    background: Vec<u8>,
    noise: Option<Arc<[i16]>>,
}

impl Renderer {
    pub fn new(camera: CameraModel, options: RenderOptions) -> Self {
        let (w, h) = (camera.width as usize, camera.height as usize);
        let mut background = vec![0u8; w * h * 3];
        match options.background {
            Background::Uniform { rgb } => {
                for px in background.chunks_exact_mut(3) {
                    px.copy_from_slice(&rgb);
                }
            }
            Background::Textured { tile_px, seed } => {
                let tile = tile_px.max(1) as usize;
                let tiles_x = w.div_ceil(tile);
                let tiles_y = h.div_ceil(tile);
                // Different cameras see different parts of the scenery.
                let mut rng = SmallRng::seed_from_u64(seed ^ ((camera.id as u64 + 1) * 0x9E37_79B9));
                let colors: Vec<[u8; 3]> = (0..tiles_x * tiles_y)
                    .map(|_| [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()])
                    .collect();
                for y in 0..h {
                    for x in 0..w {
                        let c = colors[(y / tile) * tiles_x + x / tile];
                        background[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
                    }
                }
            }
        }
        let noise =
            (options.sensor_noise_sigma > 0.0).then(|| noise_pool(options.sensor_noise_sigma));
        Renderer {
            camera,
            options,
            background,
            noise,
        }
    }

    /// Renderer for the sub-image whose top-left pixel is `origin`. Its
    /// frames are crops of the full frames; its camera has the principal
    /// point shifted accordingly.
    pub fn windowed(
        camera: CameraModel,
        options: RenderOptions,
        origin: (u32, u32),
        size: (u32, u32),
    ) -> Self {
        let full = Renderer::new(camera, options);
        let (x0, y0) = (
            origin.0.min(camera.width - 1),
            origin.1.min(camera.height - 1),
        );
        let w = size.0.min(camera.width - x0) as usize;
        let h = size.1.min(camera.height - y0) as usize;
        let fw = camera.width as usize;
        let mut background = Vec::with_capacity(w * h * 3);
        for y in y0 as usize..y0 as usize + h {
            let row = (y * fw + x0 as usize) * 3;
            background.extend_from_slice(&full.background[row..row + w * 3]);
        }
        Renderer {
            camera: CameraModel {
                cx: camera.cx - x0 as f64,
                cy: camera.cy - y0 as f64,
                width: w as u32,
                height: h as u32,
                ..camera
            },
            background,
            ..full
        }
    }

    /// The camera whose image this renderer produces.
    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    /// Renders the scene as seen at `timestamp`. With motion blur each
    /// mosquito is smeared over the exposure that ends at `timestamp`.
    pub fn render<R: Rng + ?Sized>(
        &self,
        mosquitoes: &[MosquitoState],
        wind: Wind,
        timestamp: f64,
        rng: &mut R,
    ) -> Frame {
        let cam = &self.camera;
        let (w, h) = (cam.width as usize, cam.height as usize);
        let mut pixels = self.background.clone();
        let color = self.options.mosquito_color.map(|c| c as f32);
        for m in mosquitoes.iter().filter(|m| m.alive) {
            let Ok(end) = cam.project(m.position) else {
                continue;
            };
            let start = if self.options.motion_blur && cam.exposure > 0.0 {
                let p0 = m.position - m.velocity(wind) * cam.exposure;
                cam.project(p0).unwrap_or(end)
            } else {
                end
            };
            let radius = m.body_radius * cam.f_px / end.depth;
            draw_smear(
                &mut pixels,
                w,
                h,
                (start.u, start.v),
                (end.u, end.v),
                radius,
                color,
            );
        }

        if let Some(pool) = &self.noise {
            let mut fast = SmallRng::seed_from_u64(rng.random());
            let row = w * 3;
            debug_assert!(row < NOISE_POOL_LEN);
            for line in pixels.chunks_exact_mut(row) {
                let off = fast.random_range(0..NOISE_POOL_LEN - row);
                for (p, &n) in line.iter_mut().zip(&pool[off..off + row]) {
                    *p = (*p as i16 + n).clamp(0, 255) as u8;
                }
            }
        }
        Frame {
            width: cam.width,
            height: cam.height,
            pixels,
            timestamp,
            camera_id: cam.id,
        }
    }
}

/// Fraction of the pixel centred on (px, py) covered by a disc, from a 4x4
/// supersample near the rim.
fn disc_coverage(px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
    if d <= r - 0.75 {
        return 1.0;
    }
    if d >= r + 0.75 {
        return 0.0;
    }
    let mut hits = 0;
    for i in 0..4 {
        for j in 0..4 {
            let sx = px - 0.375 + 0.25 * i as f64;
            let sy = py - 0.375 + 0.25 * j as f64;
            if (sx - cx).powi(2) + (sy - cy).powi(2) <= r * r {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn draw_smear(
    acc: &mut [u8],
    w: usize,
    h: usize,
    from: (f64, f64),
    to: (f64, f64),
    radius: f64,
    color: [f32; 3],
) {
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let samples = (len * 2.0).ceil().max(1.0) as usize;
    let x0 = (from.0.min(to.0) - radius - 1.0).floor().max(0.0) as i64;
    let x1 = (from.0.max(to.0) + radius + 1.0).ceil().min(w as f64 - 1.0) as i64;
    let y0 = (from.1.min(to.1) - radius - 1.0).floor().max(0.0) as i64;
    let y1 = (from.1.max(to.1) + radius + 1.0).ceil().min(h as f64 - 1.0) as i64;
    if x0 > x1 || y0 > y1 {
        return;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut alpha = 0.0;
            for k in 0..samples {
                let t = if samples == 1 {
                    1.0
                } else {
                    k as f64 / (samples - 1) as f64
                };
                let cx = from.0 + (to.0 - from.0) * t;
                let cy = from.1 + (to.1 - from.1) * t;
                alpha += disc_coverage(x as f64, y as f64, cx, cy, radius);
            }
            let alpha = (alpha / samples as f64) as f32;
            if alpha > 0.0 {
                let i = (y as usize * w + x as usize) * 3;
                for c in 0..3 {
                    let v = acc[i + c] as f32 * (1.0 - alpha) + color[c] * alpha;
                    acc[i + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
}

/// One-shot render; see [`Renderer`] for repeated use.
pub fn render<R: Rng + ?Sized>(
    camera: &CameraModel,
    mosquitoes: &[MosquitoState],
    options: &RenderOptions,
    wind: Wind,
    timestamp: f64,
    rng: &mut R,
) -> Frame {
    Renderer::new(*camera, *options).render(mosquitoes, wind, timestamp, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn quiet() -> RenderOptions {
        RenderOptions {
            sensor_noise_sigma: 0.0,
            motion_blur: false,
            ..Default::default()
        }
    }

    fn bug(p: Vec3) -> MosquitoState {
        MosquitoState::new(1, p, Vec3::X, 0.0, 1.0)
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let cam = CameraModel::default();
        let p = cam.project(Vec3::new(0.0, 0.0, 300.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (cam.cx, cam.cy, 300.0));
    }

    #[test]
    fn lateral_offset_projection() {
        let cam = CameraModel::default();
        let p = cam.project(Vec3::new(10.0, 0.0, 300.0)).unwrap();
        assert!((p.u - (cam.cx + 20.0)).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = CameraModel::default();
        assert!(matches!(
            cam.project(Vec3::new(0.0, 0.0, -5.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(cam.project(Vec3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn unproject_round_trip_tilted_camera() {
        let cam = CameraModel {
            axis: Vec3::new(0.2, -0.1, 1.0),
            position: Vec3::new(5.0, 3.0, -2.0),
            ..Default::default()
        };
        let p = Vec3::new(12.0, -7.0, 310.0);
        let pr = cam.project(p).unwrap();
        let q = cam.unproject(pr.u, pr.v, pr.depth);
        assert!((q - p).norm() < 1e-9);
    }

    #[test]
    fn disparity_and_depth_examples() {
        assert_eq!(disparity(340.0, 340.0), 0.0);
        assert_eq!(disparity(340.0, 220.0), 120.0);
        let rig = StereoRig::default();
        assert_eq!(depth_from_disparity(&rig, 120.0).unwrap(), 300.0);
        assert_eq!(depth_from_disparity(&rig, 240.0).unwrap(), 150.0);
        assert!(matches!(
            depth_from_disparity(&rig, 0.0),
            Err(Error::NonPositiveDisparity(_))
        ));
        assert!(depth_from_disparity(&rig, -3.0).is_err());
    }

    #[test]
    fn projected_disparity_matches_closed_form() {
        let rig = StereoRig::default();
        let p = Vec3::new(4.0, -9.0, 300.0);
        let l = rig.left.project(p).unwrap();
        let r = rig.right.project(p).unwrap();
        let d = disparity(l.u, r.u);
        assert!((d - rig.left.f_px * rig.baseline_t / 300.0).abs() < 1e-9);
        let back = rig.triangulate(l.u, l.v, d).unwrap();
        assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn empty_scene_is_constant() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = render(&cam, &[], &quiet(), Wind::default(), 0.0, &mut rng);
        let first = f.get(0, 0);
        assert!(f.pixels.chunks_exact(3).all(|p| p == first));
        assert_eq!(f.pixels.len(), 640 * 480 * 3);
    }

    #[test]
    fn disc_diameter_matches_projection() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = render(
            &cam,
            &[bug(Vec3::new(0.0, 0.0, 300.0))],
            &quiet(),
            Wind::default(),
            0.0,
            &mut rng,
        );
        // expected diameter 2 * 1 mm * 600 / 300 = 4 px; count fully dark pixels on the centre row band
        let bg = quiet().background;
        let Background::Uniform { rgb } = bg else {
            unreachable!()
        };
        let mut area = 0.0;
        for y in 0..480 {
            for x in 0..640 {
                let p = f.get(x, y);
                let a = (rgb[0] as f64 - p[0] as f64) / (rgb[0] as f64 - 60.0);
                area += a;
            }
        }
        let want = std::f64::consts::PI * 2.0 * 2.0;
        assert!((area - want).abs() < 0.15 * want, "area {area} vs {want}");
    }

    #[test]
    fn render_is_seed_deterministic() {
        let cam = CameraModel::default();
        let opts = RenderOptions::default();
        let bugs = [bug(Vec3::new(3.0, 1.0, 290.0))];
        let a = render(
            &cam,
            &bugs,
            &opts,
            Wind::default(),
            0.0,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let b = render(
            &cam,
            &bugs,
            &opts,
            Wind::default(),
            0.0,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let c = render(
            &cam,
            &bugs,
            &opts,
            Wind::default(),
            0.0,
            &mut ChaCha8Rng::seed_from_u64(10),
        );
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_has_requested_sigma() {
        let cam = CameraModel::default();
        let opts = RenderOptions {
            sensor_noise_sigma: 4.0,
            ..quiet()
        };
        let f = render(
            &cam,
            &[],
            &opts,
            Wind::default(),
            0.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let vals: Vec<f64> = f.pixels.iter().step_by(3).map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        // rounding to integers adds 1/12 of variance
        assert!((var - 16.0 - 1.0 / 12.0).abs() < 0.3, "var {var}");
        assert!((mean - 205.0).abs() < 0.05);
    }
}
