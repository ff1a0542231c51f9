//! Reference implementations shared by the oracle and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

use zapsim::laser::{overlap_fraction, LaserSpec};
use zapsim::scene::{
    reflect_at_bounds, step, update_heading_with, FlightModel, FlightParams, MosquitoState,
    TurnDraws,
};
use zapsim::tracking::{
    associate, finite_difference_velocity, AssociationConfig, Lifecycle, Track, TrackPoint,
};
use zapsim::vision::{connected_components, Detection, GrayFrame, Rect};
use zapsim::Vec3;

/// Labels 8-connected foreground regions by depth-first flood fill.
pub fn flood_fill(frame: &GrayFrame) -> Vec<Vec<(u32, u32)>> {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut seen = vec![false; (w * h) as usize];
    let mut regions = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if seen[i] || frame.pixels[i] == 0 {
                continue;
            }
            let mut region = Vec::new();
            let mut stack = vec![(x, y)];
            seen[i] = true;
            while let Some((cx, cy)) = stack.pop() {
                region.push((cx as u32, cy as u32));
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (cx + dx, cy + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let j = (ny * w + nx) as usize;
                        if !seen[j] && frame.pixels[j] != 0 {
                            seen[j] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            region.sort_unstable();
            regions.push(region);
        }
    }
    regions.sort();
    regions
}

pub fn components_agree_with_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..100 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..30));
        let density = rng.random_range(0.05..0.7);
        let mut frame = GrayFrame::new(w, h, 0.0);
        for p in frame.pixels.iter_mut() {
            *p = if rng.random_bool(density) { 255 } else { 0 };
        }
        let expected = flood_fill(&frame);
        let blobs = connected_components(&frame);
        assert_eq!(blobs.len(), expected.len(), "case {case}");
        let mut got: Vec<Vec<(u32, u32)>> = blobs
            .iter()
            .map(|b| {
                let mut p = b.pixels.clone();
                p.sort_unstable();
                p
            })
            .collect();
        got.sort();
        assert_eq!(got, expected, "case {case}");
        for b in &blobs {
            assert_eq!(b.area as usize, b.pixels.len());
        }
    }
}

pub fn track_at(id: u64, pixel: (f64, f64)) -> Track {
    let mut history = VecDeque::new();
    history.push_back(TrackPoint {
        timestamp: 0.0,
        pixel,
        world: Vec3::ZERO,
    });
    Track {
        id,
        lifecycle: Lifecycle::Active,
        history,
        velocity_estimate: Vec3::ZERO,
        template: None,
        miss_count: 0,
        hit_streak: 1,
        last_disparity: None,
        lost_at: None,
    }
}

pub fn detection_at(u: f64, v: f64) -> Detection {
    Detection {
        centroid: (u, v),
        bbox: Rect {
            x0: u as u32,
            y0: v as u32,
            x1: u as u32,
            y1: v as u32,
        },
        area: 4,
        timestamp: 0.1,
        score: 1.0,
    }
}

/// Best gated matching: most pairs, then least total distance.
pub fn brute_force(tracks: &[Track], dets: &[Detection], gate: f64) -> (usize, f64) {
    fn go(
        t: usize,
        tracks: &[Track],
        dets: &[Detection],
        used: &mut Vec<bool>,
        gate: f64,
    ) -> (usize, f64) {
        if t == tracks.len() {
            return (0, 0.0);
        }
        let mut best = go(t + 1, tracks, dets, used, gate);
        let p = tracks[t].last().pixel;
        for j in 0..dets.len() {
            let c = dets[j].centroid;
            let d = ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt();
            if used[j] || d > gate {
                continue;
            }
            used[j] = true;
            let (n, cost) = go(t + 1, tracks, dets, used, gate);
            used[j] = false;
            let cand = (n + 1, cost + d);
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            }
        }
        best
    }
    go(0, tracks, dets, &mut vec![false; dets.len()], gate)
}

pub fn greedy_matches_brute_force_when_separated() {
    let cfg = AssociationConfig::default();
    let gate = cfg.gate_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 500 {
        let n = rng.random_range(1..=3);
        let mut centres: Vec<(f64, f64)> = Vec::new();
        while centres.len() < n {
            let c = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            if centres
                .iter()
                .all(|o| ((o.0 - c.0).powi(2) + (o.1 - c.1).powi(2)).sqrt() > 2.0 * gate)
            {
                centres.push(c);
            }
        }
        let tracks: Vec<Track> = centres
            .iter()
            .enumerate()
            .map(|(i, &c)| track_at(i as u64 + 1, c))
            .collect();
        let mut dets = Vec::new();
        for &c in &centres {
            if rng.random_bool(0.8) {
                let r = rng.random_range(0.0..gate * 1.2);
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                dets.push(detection_at(c.0 + r * a.cos(), c.1 + r * a.sin()));
            }
        }
        let refs: Vec<&Track> = tracks.iter().collect();
        let greedy = associate(&refs, &dets, &cfg);
        let (n_opt, cost_opt) = brute_force(&tracks, &dets, gate);
        assert_eq!(greedy.matches.len(), n_opt);
        assert!((greedy.total_distance(&refs, &dets) - cost_opt).abs() < 1e-9);
        checked += 1;
    }
}

/// Midpoint rule over the disc on a fine Cartesian grid.
pub fn overlap_by_grid(miss: f64, radius: f64, spot: f64) -> f64 {
    let w2 = (spot / 2.0).powi(2);
    let n = 1200;
    let h = 2.0 * radius / n as f64;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = -radius + (i as f64 + 0.5) * h;
            let y = -radius + (j as f64 + 0.5) * h;
            if x * x + y * y <= radius * radius {
                let r2 = (x + miss).powi(2) + y * y;
                sum += 2.0 / (std::f64::consts::PI * w2) * (-2.0 * r2 / w2).exp();
            }
        }
    }
    sum * h * h
}

pub fn overlap_matches_quadrature_grid() {
    let spot = LaserSpec::default().spot_diameter_at_nominal;
    for miss in [0.0, 0.5, 1.0, 2.0, 3.5] {
        for radius in [0.5, 1.0, 1.5, 2.0, 2.5] {
            let exact = overlap_fraction(miss, radius, spot);
            let grid = overlap_by_grid(miss, radius, spot);
            assert!(
                (exact - grid).abs() <= 1e-3,
                "miss {miss} radius {radius}: {exact} vs {grid}"
            );
        }
    }
}

pub fn noise_free_oracle(model: &FlightModel, start: Vec3, heading: Vec3, seconds: f64) -> Vec3 {
    let params = FlightParams {
        sigma_turn: 0.0,
        p_sharp: 0.0,
        ..model.params
    };
    let mut s = MosquitoState::new(0, start, heading, 0.0, 1.0);
    for _ in 0..(seconds / params.dt).round() as usize {
        let heading = update_heading_with(&s, &model.field, &params, &TurnDraws::QUIET);
        let moved = step(
            &MosquitoState { heading, ..s },
            &params,
            &model.field,
            model.wind,
        );
        s = reflect_at_bounds(&moved, &model.region).0;
    }
    s.position
}

pub fn moving_track(v: Vec3) -> Track {
    let mut t = track_at(3, (0.0, 0.0));
    t.history.clear();
    for k in 0..6 {
        let ts = k as f64 / 30.0;
        t.history.push_back(TrackPoint {
            timestamp: ts,
            pixel: (0.0, 0.0),
            world: Vec3::new(-20.0, 10.0, 290.0) + v * ts,
        });
    }
    t.velocity_estimate = finite_difference_velocity(&t.history);
    t
}
