//! Independent reference computations checked against the library.

mod common;

use common::{moving_track, noise_free_oracle, track_at};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zapsim::engine::{
    run_episode, run_episode_with, schedule_targets, DetectorKind, PipelineConfig, RunOptions,
    Scenario, SchedulerPolicy,
};
use zapsim::laser::{
    angles_for_target, beam_overlap, beam_point_at_depth, move_time, GalvoLimits, GalvoState,
    LaserSpec,
};
use zapsim::optics::{
    depth_from_disparity, disparity, Background, CameraModel, RenderOptions, Renderer, StereoRig,
};
use zapsim::scene::{
    reflect_at_bounds, step, update_heading_with, AttractantField, BoxRegion, FlightModel,
    FlightParams, MosquitoState, TurnDraws, Wind,
};
use zapsim::tracking::{
    correlation_refine, cut_template, dead_reckon, predict, PredictorConfig, PredictorMode,
};
use zapsim::vision::{
    color_mask, connected_components, filter_blobs, match_stereo, profiled_detect, to_gray,
    DetectorProfile, GrayFrame,
};
use zapsim::Vec3;

fn quiet_render() -> RenderOptions {
    RenderOptions {
        sensor_noise_sigma: 0.0,
        motion_blur: false,
        ..Default::default()
    }
}

fn resting(id: u32, p: Vec3) -> MosquitoState {
    MosquitoState::new(id, p, Vec3::X, 0.0, 1.0)
}

#[test]
fn components_agree_with_flood_fill() {
    common::components_agree_with_flood_fill();
}

#[test]
fn greedy_matches_brute_force_when_separated() {
    common::greedy_matches_brute_force_when_separated();
}

#[test]
fn overlap_matches_quadrature_grid() {
    common::overlap_matches_quadrature_grid();
}

#[test]
fn target_leaving_the_beam_gets_less_energy() {
    let spec = LaserSpec::default();
    let aim = Vec3::new(0.0, 0.0, 300.0);
    let dt = 1.0 / 240.0;
    let dwell = 0.5;
    let n = (dwell / dt) as usize;
    let still: f64 = (0..n)
        .map(|_| beam_overlap(aim, aim, 1.0, &spec) * dt)
        .sum();
    for speed in [5.0, 20.0, 200.0] {
        let moving: f64 = (0..n)
            .map(|i| {
                let p = aim + Vec3::X * (speed * (i as f64 + 0.5) * dt);
                beam_overlap(aim, p, 1.0, &spec) * dt
            })
            .sum();
        assert!(moving < still, "speed {speed}: {moving} vs {still}");
    }
}

// ---- flight ----------------------------------------------------------------

#[test]
fn step_by_step_equals_rollout() {
    let model = FlightModel {
        params: FlightParams::default(),
        field: AttractantField::default(),
        wind: Wind {
            velocity: Vec3::new(30.0, 0.0, -10.0),
        },
        region: BoxRegion::default(),
    };
    let start = MosquitoState::new(0, Vec3::new(10.0, -5.0, 290.0), Vec3::Y, 0.0, 1.0);
    let batch = model.rollout(&start, 100, &mut ChaCha8Rng::seed_from_u64(5));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = start;
    for expected in &batch {
        let draws = TurnDraws::draw(&mut rng);
        let heading = update_heading_with(&s, &model.field, &model.params, &draws);
        let moved = step(
            &MosquitoState { heading, ..s },
            &model.params,
            &model.field,
            model.wind,
        );
        s = reflect_at_bounds(&moved, &model.region).0;
        assert_eq!(&s, expected);
    }
}

#[test]
fn random_flight_stays_in_the_box() {
    let region = BoxRegion::default();
    let model = FlightModel {
        params: FlightParams {
            p_sharp: 0.2,
            ..Default::default()
        },
        field: AttractantField::default(),
        wind: Wind {
            velocity: Vec3::new(200.0, -150.0, 80.0),
        },
        region,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut s = MosquitoState::new(0, region.center(), Vec3::X, 0.0, 1.0);
    for _ in 0..100_000 {
        s = model.tick(&s, &mut rng).0;
        assert!(region.contains(s.position), "{:?}", s.position);
    }
}

#[test]
fn flight_model_prediction_is_composed_steps() {
    let model = Scenario::default().flight_model();
    let v = Vec3::new(300.0, -100.0, 50.0);
    let track = moving_track(v);
    for horizon in [0.2, 0.35, 1.0] {
        let cfg = PredictorConfig {
            mode: PredictorMode::FlightModel,
            horizon,
        };
        let expected = noise_free_oracle(
            &model,
            track.last().world,
            track.velocity_estimate.try_normalize().unwrap(),
            horizon,
        );
        assert_eq!(predict(&track, &cfg, &model).unwrap(), expected);
        assert_eq!(dead_reckon(&track, &model, horizon, 1.0), Some(expected));
    }
    assert_eq!(
        dead_reckon(&track, &model, 0.0, 1.0),
        Some(track.last().world)
    );
    assert_eq!(dead_reckon(&track, &model, 1.0 + 1e-9, 1.0), None);
}

#[test]
fn constant_velocity_estimate_within_one_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let v = Vec3::new(
            rng.random_range(-800.0..800.0),
            rng.random_range(-800.0..800.0),
            rng.random_range(-800.0..800.0),
        );
        let est = moving_track(v).velocity_estimate;
        assert!(
            (est - v).norm() <= 0.01 * v.norm().max(1e-9),
            "{est:?} vs {v:?}"
        );
    }
}

// ---- optics and vision ----------------------------------------------------

/// Darkness-weighted centroid of the pixels that differ from the background
/// within `radius` of `near`.
fn dark_centroid(gray: &GrayFrame, background: u8, near: (f64, f64), radius: f64) -> (f64, f64) {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..gray.height {
        for x in 0..gray.width {
            if (x as f64 - near.0).abs() > radius || (y as f64 - near.1).abs() > radius {
                continue;
            }
            let w = background.saturating_sub(gray.get(x, y)) as f64;
            sw += w;
            sx += w * x as f64;
            sy += w * y as f64;
        }
    }
    (sx / sw, sy / sw)
}

#[test]
fn rendered_disc_centroid_matches_projection() {
    let cam = CameraModel::default();
    let renderer = Renderer::new(cam, quiet_render());
    let bg =
        to_gray(&renderer.render(&[], Wind::default(), 0.0, &mut ChaCha8Rng::seed_from_u64(0)))
            .get(0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let p = Vec3::new(
            rng.random_range(-30.0..30.0),
            rng.random_range(-30.0..30.0),
            rng.random_range(265.0..335.0),
        );
        let frame = renderer.render(&[resting(0, p)], Wind::default(), 0.0, &mut rng);
        let proj = cam.project(p).unwrap();
        let c = dark_centroid(&to_gray(&frame), bg, (proj.u, proj.v), 8.0);
        assert!(
            (c.0 - proj.u).hypot(c.1 - proj.v) <= 0.5,
            "{c:?} vs ({}, {})",
            proj.u,
            proj.v
        );
    }
}

#[test]
fn projected_disparity_is_f_t_over_z() {
    let rig = StereoRig::default();
    let p = Vec3::new(7.0, -4.0, 300.0);
    let (l, r) = (rig.left.project(p).unwrap(), rig.right.project(p).unwrap());
    let d = disparity(l.u, r.u);
    assert!((d - rig.left.f_px * rig.baseline_t / 300.0).abs() < 1e-9);
    assert!((depth_from_disparity(&rig, d).unwrap() - 300.0).abs() < 1e-9);
}

#[test]
fn render_detect_match_depth_loop() {
    let rig = StereoRig::default();
    let z = 320.0;
    let target = resting(0, Vec3::new(6.0, -3.0, z));
    let opts = RenderOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let detect = |cam: CameraModel, rng: &mut ChaCha8Rng| {
        let r = Renderer::new(cam, opts);
        let bg =
            to_gray(&Renderer::new(cam, quiet_render()).render(&[], Wind::default(), 0.0, rng));
        let gray = to_gray(&r.render(&[target], Wind::default(), 0.0, rng));
        let mut mask = GrayFrame::new(gray.width, gray.height, 0.0);
        let mut weight = GrayFrame::new(gray.width, gray.height, 0.0);
        for i in 0..gray.pixels.len() {
            let dark = bg.pixels[i].saturating_sub(gray.pixels[i]);
            mask.pixels[i] = if dark > 40 { 255 } else { 0 };
            weight.pixels[i] = dark;
        }
        filter_blobs(&connected_components(&mask), &cam, 300.0, &weight, 0.0)
    };
    let left = detect(rig.left, &mut rng);
    let right = detect(rig.right, &mut rng);
    assert_eq!((left.len(), right.len()), (1, 1));
    let obs = match_stereo(&left, &right, rig.disparity_range(265.0, 335.0), 3.0);
    let d = obs[0].disparity.expect("stereo pair");
    let d_true = rig.left.f_px * rig.baseline_t / z;
    let err_px = (d - d_true).abs();
    assert!(err_px < 0.5, "disparity error {err_px}");
    let z_hat = depth_from_disparity(&rig, d).unwrap();
    let per_px = z * z / (rig.left.f_px * rig.baseline_t);
    assert!(
        (z_hat - z).abs() <= per_px * err_px.max(1e-3) * 1.02,
        "{z_hat}"
    );
}

#[test]
fn correlation_refinement_follows_a_three_pixel_shift() {
    let cam = CameraModel::default();
    let renderer = Renderer::new(cam, quiet_render());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p0 = Vec3::new(0.0, 0.0, 300.0);
    let p1 = p0 + Vec3::new(1.5, 0.0, 0.0);
    let g0 = to_gray(&renderer.render(&[resting(0, p0)], Wind::default(), 0.0, &mut rng));
    let g1 = to_gray(&renderer.render(&[resting(0, p1)], Wind::default(), 0.0, &mut rng));
    let c0 = cam.project(p0).unwrap();
    let c1 = cam.project(p1).unwrap();
    assert!((c1.u - c0.u - 3.0).abs() < 1e-9);
    let mut track = track_at(1, (c0.u, c0.v));
    track.template = cut_template(&g0, (c0.u, c0.v), 11);
    let (u, v) = correlation_refine(&track, &g1, 8).expect("match");
    assert!(
        (u - c1.u).hypot(v - c1.v) <= 0.5,
        "({u}, {v}) vs ({}, {})",
        c1.u,
        c1.v
    );
}

#[test]
fn profiled_detection_frequency() {
    let cam = CameraModel::default();
    let profile = DetectorProfile {
        p_detect: 0.7,
        ..Default::default()
    };
    let m = [resting(0, Vec3::new(0.0, 0.0, 300.0))];
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| !profiled_detect(&m, &cam, &profile, 0.0, &mut rng).is_empty())
        .count();
    let f = hits as f64 / n as f64;
    assert!((f - 0.7).abs() <= 0.015, "{f}");
}

#[test]
fn textured_background_raises_color_false_positives() {
    let cam = CameraModel::default();
    let color = RenderOptions::default().mosquito_color;
    let fp = |background| {
        let opts = RenderOptions {
            background,
            ..Default::default()
        };
        let frame = Renderer::new(cam, opts).render(
            &[],
            Wind::default(),
            0.0,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        let mask = color_mask(&frame, color, Default::default());
        mask.pixels.iter().filter(|&&p| p != 0).count()
    };
    let uniform = fp(RenderOptions::default().background);
    let textured = fp(Background::Textured {
        tile_px: 8,
        seed: 3,
    });
    assert!(textured > uniform, "{textured} vs {uniform}");
}

// ---- laser ----------------------------------------------------------------

#[test]
fn ray_cast_round_trip() {
    let limits = GalvoLimits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let p = Vec3::new(
            rng.random_range(-35.0..35.0),
            rng.random_range(-35.0..35.0),
            rng.random_range(265.0..335.0),
        );
        let (tx, ty) = angles_for_target(p, &limits).unwrap();
        let back = beam_point_at_depth(tx, ty, p.z);
        assert!((back - p).norm() < 1e-9);
    }
}

#[test]
fn move_time_is_monotone_in_angle() {
    let limits = GalvoLimits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let from = GalvoState::default();
    for _ in 0..1000 {
        let a: f64 = rng.random_range(0.0..0.35);
        let b: f64 = rng.random_range(0.0..0.35);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        assert!(move_time(&from, (lo, 0.0), &limits) <= move_time(&from, (hi, 0.0), &limits));
    }
}

// ---- engine ---------------------------------------------------------------

#[test]
fn nearest_first_matches_sorting() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..1000 {
        let n = rng.random_range(0..8);
        let beam = Vec3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            1.0,
        )
        .try_normalize()
        .unwrap();
        let targets: Vec<(u64, Vec3)> = (0..n)
            .map(|i| {
                (
                    i as u64 * 3 + 1,
                    Vec3::new(
                        rng.random_range(-35.0..35.0),
                        rng.random_range(-35.0..35.0),
                        rng.random_range(265.0..335.0),
                    ),
                )
            })
            .collect();
        let mut expected: Vec<(f64, u64)> = targets
            .iter()
            .map(|&(id, p)| {
                let along = beam * p.dot(beam);
                ((p - along).norm(), id)
            })
            .collect();
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<u64> = expected.into_iter().map(|(_, id)| id).collect();
        assert_eq!(
            schedule_targets(&targets, SchedulerPolicy::NearestFirst, beam),
            expected
        );
    }
}

fn perfect_profiled(duration: f64) -> PipelineConfig {
    PipelineConfig {
        detector: DetectorKind::Profiled,
        latency_override: Some(0.0),
        profile: DetectorProfile {
            latency: 0.0,
            p_detect: 1.0,
            centroid_noise_sigma: 0.0,
        },
        episode_duration: duration,
        ..Default::default()
    }
}

#[test]
fn noise_free_detections_track_every_frame() {
    // Slow enough never to cross the association gate within one frame.
    let mut scenario = Scenario {
        mosquito_count: 1,
        ..Default::default()
    };
    scenario.flight.s_max = 150.0;
    scenario.flight.s_min = 150.0;
    scenario.kill.rate_k = 1e-12;
    for seed in 0..20 {
        let r = run_episode(&scenario, &perfect_profiled(3.0), seed).unwrap();
        let (contained, eligible) = r
            .containment
            .iter()
            .fold((0, 0), |(c, e), f| (c + f.contained, e + f.eligible));
        assert!(eligible > 0);
        assert_eq!(contained, eligible, "seed {seed}");
    }
}

#[test]
fn detections_are_exactly_one_latency_old() {
    for (detector, latency) in [
        (DetectorKind::CorrelationTrack, 0.15),
        (DetectorKind::Profiled, 1.0),
    ] {
        let pipeline = PipelineConfig {
            detector,
            episode_duration: 3.0,
            ..Default::default()
        };
        assert_eq!(pipeline.latency(), latency);
        let r = run_episode_with(
            &Scenario::default(),
            &pipeline,
            4,
            None,
            RunOptions { record: true },
        )
        .unwrap();
        let mut seen = 0;
        for e in &r.log {
            let Some(rest) = e.message.strip_prefix("detection of frame ") else {
                continue;
            };
            let captured: f64 = rest.split(' ').next().unwrap().parse().unwrap();
            assert!(
                (e.time - captured - latency).abs() < 1e-3,
                "{} at {}",
                e.message,
                e.time
            );
            seen += 1;
        }
        assert!(seen > 0);
    }
}
