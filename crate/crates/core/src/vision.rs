//! Frame-level detection: thresholding, frame differencing, colour masking,
//! connected-component labelling, the blob size gate, and a profiled
//! stand-in detector that perturbs ground truth instead of looking at pixels.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{CameraModel, Frame, StereoRig};
use crate::scene::MosquitoState;

/// Single-channel 8-bit image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub timestamp: f64,
}

impl GrayFrame {
    pub fn new(width: u32, height: u32, timestamp: f64) -> Self {
        GrayFrame {
            width,
            height,
            pixels: vec![0; width as usize * height as usize],
            timestamp,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = v;
    }

    /// Copies a `size`x`size` patch centred on (cx, cy). `None` if it would
    /// leave the image.
    pub fn patch(&self, cx: i64, cy: i64, size: u32) -> Option<GrayFrame> {
        let half = size as i64 / 2;
        let (x0, y0) = (cx - half, cy - half);
        if x0 < 0
            || y0 < 0
            || x0 + size as i64 > self.width as i64
            || y0 + size as i64 > self.height as i64
        {
            return None;
        }
        let mut out = GrayFrame::new(size, size, self.timestamp);
        for y in 0..size {
            for x in 0..size {
                out.set(
                    x,
                    y,
                    self.get((x0 + x as i64) as u32, (y0 + y as i64) as u32),
                );
            }
        }
        Some(out)
    }
}

/// Luminance with weights (0.299, 0.587, 0.114), rounded half up.
pub fn to_gray(frame: &Frame) -> GrayFrame {
    let pixels = frame
        .pixels
        .chunks_exact(3)
        .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8)
        .collect();
    GrayFrame {
        width: frame.width,
        height: frame.height,
        pixels,
        timestamp: frame.timestamp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Binary,
    BinaryInverse,
    Truncate,
    ToZero,
    ToZeroInverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub value: u8,
    pub max_value: u8,
    pub mode: ThresholdMode,
}

impl ThresholdParams {
    pub fn binary(value: u8) -> Self {
        ThresholdParams {
            value,
            max_value: 255,
            mode: ThresholdMode::Binary,
        }
    }
}

pub fn threshold(gray: &GrayFrame, params: ThresholdParams) -> GrayFrame {
    let ThresholdParams {
        value: t,
        max_value: m,
        mode,
    } = params;
    let f = |p: u8| -> u8 {
        match mode {
            ThresholdMode::Binary => {
                if p > t {
                    m
                } else {
                    0
                }
            }
            ThresholdMode::BinaryInverse => {
                if p > t {
                    0
                } else {
                    m
                }
            }
            ThresholdMode::Truncate => p.min(t),
            ThresholdMode::ToZero => {
                if p > t {
                    p
                } else {
                    0
                }
            }
            ThresholdMode::ToZeroInverse => {
                if p > t {
                    0
                } else {
                    p
                }
            }
        }
    };
    GrayFrame {
        width: gray.width,
        height: gray.height,
        pixels: gray.pixels.iter().map(|&p| f(p)).collect(),
        timestamp: gray.timestamp,
    }
}

/// `|curr - prev|` per pixel, stamped with `curr`'s timestamp.
///
/// Panics if the dimensions differ.
pub fn abs_difference(prev: &GrayFrame, curr: &GrayFrame) -> GrayFrame {
    assert!(
        prev.width == curr.width && prev.height == curr.height,
        "frame dimensions differ: {}x{} vs {}x{}",
        prev.width,
        prev.height,
        curr.width,
        curr.height
    );
    GrayFrame {
        width: curr.width,
        height: curr.height,
        pixels: prev
            .pixels
            .iter()
            .zip(&curr.pixels)
            .map(|(&a, &b)| a.abs_diff(b))
            .collect(),
        timestamp: curr.timestamp,
    }
}

/// Motion mask: binary threshold of the absolute frame difference. The mode
/// in `params` is ignored.
pub fn frame_difference(prev: &GrayFrame, curr: &GrayFrame, params: ThresholdParams) -> GrayFrame {
    threshold(
        &abs_difference(prev, curr),
        ThresholdParams {
            mode: ThresholdMode::Binary,
            ..params
        },
    )
}

/// Hexcone HSV: hue in degrees [0, 360), saturation in [0, 1], value in
/// [0, 255]. Grey pixels get hue 0.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    [h, s, max]
}

/// Per-channel tolerance in the HSV space of [`rgb_to_hsv`]. Hue distance
/// is circular, so a hue tolerance of 180 accepts every hue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvTolerance {
    pub hue_deg: f64,
    pub saturation: f64,
    pub value: f64,
}

impl Default for HsvTolerance {
    fn default() -> Self {
        HsvTolerance {
            hue_deg: 40.0,
            saturation: 0.35,
            value: 55.0,
        }
    }
}

pub fn color_mask(frame: &Frame, center: [u8; 3], tol: HsvTolerance) -> GrayFrame {
    let [ch, cs, cv] = rgb_to_hsv(center);
    let pixels = frame
        .pixels
        .chunks_exact(3)
        .map(|p| {
            // cheap reject on value before the full transform
            let v = p[0].max(p[1]).max(p[2]) as f64;
            if (v - cv).abs() > tol.value {
                return 0;
            }
            let [h, s, _] = rgb_to_hsv([p[0], p[1], p[2]]);
            let dh = (h - ch).abs();
            let dh = dh.min(360.0 - dh);
            if dh <= tol.hue_deg && (s - cs).abs() <= tol.saturation {
                255
            } else {
                0
            }
        })
        .collect();
    GrayFrame {
        width: frame.width,
        height: frame.height,
        pixels,
        timestamp: frame.timestamp,
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x0 as f64 && u <= self.x1 as f64 && v >= self.y0 as f64 && v <= self.y1 as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub pixels: Vec<(u32, u32)>,
    pub bbox: Rect,
    pub area: u32,
    /// Unweighted mean pixel position.
    pub centroid: (f64, f64),
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        parent[i as usize] = parent[parent[i as usize] as usize];
        i = parent[i as usize];
    }
    i
}

/// 8-connected labelling of nonzero pixels (two-pass, union-find). Blobs are
/// returned in raster order of their first pixel.
pub fn connected_components(binary: &GrayFrame) -> Vec<Blob> {
    let (w, h) = (binary.width as usize, binary.height as usize);
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            if binary.pixels[row + x] == 0 {
                continue;
            }
            let mut best = 0u32;
            let mut neighbours = [0u32; 4];
            if x > 0 {
                neighbours[0] = labels[row + x - 1];
            }
            if y > 0 {
                let up = row - w;
                if x > 0 {
                    neighbours[1] = labels[up + x - 1];
                }
                neighbours[2] = labels[up + x];
                if x + 1 < w {
                    neighbours[3] = labels[up + x + 1];
                }
            }
            for &n in &neighbours {
                if n != 0 {
                    let r = find(&mut parent, n);
                    best = if best == 0 { r } else { best.min(r) };
                }
            }
            if best == 0 {
                best = parent.len() as u32;
                parent.push(best);
            } else {
                for &n in &neighbours {
                    if n != 0 {
                        let r = find(&mut parent, n);
                        if r != best {
                            parent[r as usize] = best;
                        }
                    }
                }
            }
            labels[row + x] = best;
        }
    }
    if parent.len() == 1 {
        return Vec::new();
    }

    let mut slot = vec![u32::MAX; parent.len()];
    let mut blobs: Vec<Blob> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            if slot[root] == u32::MAX {
                slot[root] = blobs.len() as u32;
                blobs.push(Blob {
                    pixels: Vec::new(),
                    bbox: Rect {
                        x0: x as u32,
                        y0: y as u32,
                        x1: x as u32,
                        y1: y as u32,
                    },
                    area: 0,
                    centroid: (0.0, 0.0),
                });
            }
            let b = &mut blobs[slot[root] as usize];
            b.pixels.push((x as u32, y as u32));
            b.bbox.x0 = b.bbox.x0.min(x as u32);
            b.bbox.x1 = b.bbox.x1.max(x as u32);
            b.bbox.y1 = y as u32;
        }
    }
    for b in &mut blobs {
        b.area = b.pixels.len() as u32;
        let n = b.area as f64;
        let (sx, sy) = b
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, c), &(x, y)| (a + x as f64, c + y as f64));
        b.centroid = (sx / n, sy / n);
    }
    blobs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Sub-pixel (u, v).
    pub centroid: (f64, f64),
    pub bbox: Rect,
    /// px^2
    pub area: u32,
    pub timestamp: f64,
    pub score: f64,
}

/// Accepted physical size of a blob, mm of equivalent diameter at the
/// nominal depth. Mosquitoes are 1-5 mm; the band is widened 40% upward and
/// halved downward to tolerate blur and partial coverage.
pub const SIZE_GATE_MM: (f64, f64) = (0.5, 7.0);

/// A one-pixel blob cannot be told apart from sensor noise.
pub const MIN_BLOB_AREA: u32 = 2;

/// Keeps blobs whose equivalent diameter maps to [`SIZE_GATE_MM`] at
/// `z_nominal`, with centroids weighted by `weights`.
pub fn filter_blobs(
    blobs: &[Blob],
    camera: &CameraModel,
    z_nominal: f64,
    weights: &GrayFrame,
    timestamp: f64,
) -> Vec<Detection> {
    assert!(z_nominal > 0.0, "nominal depth must be positive");
    let mm_per_px = z_nominal / camera.f_px;
    blobs
        .iter()
        .filter(|b| {
            let d_mm = 2.0 * (b.area as f64 / std::f64::consts::PI).sqrt() * mm_per_px;
            b.area >= MIN_BLOB_AREA && d_mm >= SIZE_GATE_MM.0 && d_mm <= SIZE_GATE_MM.1
        })
        .map(|b| {
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for &(x, y) in &b.pixels {
                let w = weights.get(x, y) as f64;
                sw += w;
                sx += w * x as f64;
                sy += w * y as f64;
            }
            let centroid = if sw > 0.0 {
                (sx / sw, sy / sw)
            } else {
                b.centroid
            };
            Detection {
                centroid,
                bbox: b.bbox,
                area: b.area,
                timestamp,
                score: (sw / (b.area as f64 * 255.0)).clamp(0.0, 1.0),
            }
        })
        .collect()
}

/// Latency and accuracy of a detector that is modelled rather than run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorProfile {
    /// s
    pub latency: f64,
    pub p_detect: f64,
    /// px
    pub centroid_noise_sigma: f64,
}

impl Default for DetectorProfile {
    /// Cascade-classifier stand-in.
    fn default() -> Self {
        DetectorProfile {
            latency: 1.0,
            p_detect: 0.85,
            centroid_noise_sigma: 1.0,
        }
    }
}

impl DetectorProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(Error::config("profile.latency", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.p_detect) {
            return Err(Error::config("profile.p_detect", "must lie in [0, 1]"));
        }
        if !(self.centroid_noise_sigma >= 0.0) {
            return Err(Error::config("profile.centroid_sigma", "must be >= 0"));
        }
        Ok(())
    }
}

fn synthetic_detection(
    camera: &CameraModel,
    m: &MosquitoState,
    u: f64,
    v: f64,
    depth: f64,
    timestamp: f64,
) -> Detection {
    let r = (m.body_radius * camera.f_px / depth).max(0.5);
    let clampx = |x: f64| x.clamp(0.0, camera.width as f64 - 1.0) as u32;
    let clampy = |y: f64| y.clamp(0.0, camera.height as f64 - 1.0) as u32;
    Detection {
        centroid: (u, v),
        bbox: Rect {
            x0: clampx((u - r).floor()),
            y0: clampy((v - r).floor()),
            x1: clampx((u + r).ceil()),
            y1: clampy((v + r).ceil()),
        },
        area: (std::f64::consts::PI * r * r).round().max(1.0) as u32,
        timestamp,
        score: 1.0,
    }
}

/// Detections from ground truth: each visible mosquito is reported with
/// probability `p_detect`, its projection perturbed by Gaussian noise. Each
/// visible mosquito consumes three draws whatever the outcome. Output is
/// sorted by image position so it carries no identity.
pub fn profiled_detect<R: Rng + ?Sized>(
    truth: &[MosquitoState],
    camera: &CameraModel,
    profile: &DetectorProfile,
    timestamp: f64,
    rng: &mut R,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for m in truth.iter().filter(|m| m.alive) {
        let Ok(p) = camera.project(m.position) else {
            continue;
        };
        if !camera.in_frame(p.u, p.v, 0.0) {
            continue;
        }
        let gate: f64 = rng.random();
        let nu: f64 = rng.sample(StandardNormal);
        let nv: f64 = rng.sample(StandardNormal);
        if gate < profile.p_detect {
            let s = profile.centroid_noise_sigma;
            out.push(synthetic_detection(
                camera,
                m,
                p.u + s * nu,
                p.v + s * nv,
                p.depth,
                timestamp,
            ));
        }
    }
    sort_by_position(&mut out);
    out
}

/// Stereo variant: one detect decision per mosquito, independent centroid
/// noise in each view. A mosquito must be visible in both views.
pub fn profiled_detect_stereo<R: Rng + ?Sized>(
    truth: &[MosquitoState],
    rig: &StereoRig,
    profile: &DetectorProfile,
    timestamp: f64,
    rng: &mut R,
) -> (Vec<Detection>, Vec<Detection>) {
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for m in truth.iter().filter(|m| m.alive) {
        let (Ok(pl), Ok(pr)) = (rig.left.project(m.position), rig.right.project(m.position)) else {
            continue;
        };
        if !rig.left.in_frame(pl.u, pl.v, 0.0) || !rig.right.in_frame(pr.u, pr.v, 0.0) {
            continue;
        }
        let gate: f64 = rng.random();
        let n: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if gate < profile.p_detect {
            let s = profile.centroid_noise_sigma;
            left.push(synthetic_detection(
                &rig.left,
                m,
                pl.u + s * n[0],
                pl.v + s * n[1],
                pl.depth,
                timestamp,
            ));
            right.push(synthetic_detection(
                &rig.right,
                m,
                pr.u + s * n[2],
                pr.v + s * n[3],
                pr.depth,
                timestamp,
            ));
        }
    }
    sort_by_position(&mut left);
    sort_by_position(&mut right);
    (left, right)
}

fn sort_by_position(d: &mut [Detection]) {
    d.sort_by(|a, b| {
        a.centroid
            .0
            .total_cmp(&b.centroid.0)
            .then(a.centroid.1.total_cmp(&b.centroid.1))
    });
}

/// A left-image detection, with its disparity when a right-image partner was
/// found.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub detection: Detection,
    pub disparity: Option<f64>,
}

/// Pairs left and right detections on (nearly) the same row whose disparity
/// falls in `disparity_range`. Greedy on row mismatch; unpaired left
/// detections are returned as monocular observations.
pub fn match_stereo(
    left: &[Detection],
    right: &[Detection],
    disparity_range: (f64, f64),
    row_tolerance: f64,
) -> Vec<Observation> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, l) in left.iter().enumerate() {
        for (j, r) in right.iter().enumerate() {
            let dv = (l.centroid.1 - r.centroid.1).abs();
            let d = l.centroid.0 - r.centroid.0;
            if dv <= row_tolerance && d >= disparity_range.0 && d <= disparity_range.1 {
                pairs.push((dv, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut partner = vec![None; left.len()];
    let mut used = vec![false; right.len()];
    for (_, i, j) in pairs {
        if partner[i].is_none() && !used[j] {
            partner[i] = Some(j);
            used[j] = true;
        }
    }
    left.iter()
        .zip(partner)
        .map(|(l, p)| Observation {
            detection: *l,
            disparity: p.map(|j| l.centroid.0 - right[j].centroid.0),
        })
        .collect()
}
