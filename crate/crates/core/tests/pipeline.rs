use planeslam::evaluation::{ate, rpe};
use planeslam::sensor::{generate_synthetic_scene, SceneSpec, SyntheticScene};
use planeslam::tracking::TrackingStatus;
use planeslam::{Config, FrameStatus, Pose, Slam, SlamError};

fn run(scene: &SyntheticScene) -> Result<Slam, SlamError> {
    let mut slam = Slam::new(&Config::default());
    for frame in &scene.frames {
        slam.process(frame)?;
    }
    Ok(slam)
}

/// Estimated pose error (degrees, meters) of frame `i` against the truth
/// expressed relative to the first camera.
fn frame_error(slam: &Slam, scene: &SyntheticScene, i: usize) -> (f64, f64) {
    let truth = scene.poses[i].compose(&scene.poses[0].inverse());
    let estimate: Pose = slam.trajectory().unwrap().entries()[i].1;
    let (r, t) = estimate.distance(&truth);
    (r.to_degrees(), t)
}

#[test]
fn noisy_orbit_is_tracked_to_millimeters() {
    // Noise seed 2 once diverged on a grazing floor strip.
    let spec = SceneSpec {
        frames: 20,
        orbit_sweep: 30.0,
        depth_noise: 0.005,
        pixel_noise: 0.5,
        seed: 2,
        ..SceneSpec::default()
    };
    let scene = generate_synthetic_scene(&spec).unwrap();
    let slam = run(&scene).unwrap();

    assert_eq!(slam.logs()[0].status, FrameStatus::Initialized);
    for log in &slam.logs()[1..] {
        assert_eq!(
            log.status,
            FrameStatus::Tracked(TrackingStatus::GoodMW),
            "frame {}",
            log.index
        );
    }
    let estimate = slam.trajectory().unwrap();
    let truth = scene.ground_truth();
    let a = ate(&estimate, &truth, 1e-6).unwrap();
    let r = rpe(&estimate, &truth, 1, 1e-6).unwrap();
    assert_eq!(a.errors.len(), 20);
    assert!(a.rmse < 0.01, "ATE {}", a.rmse);
    assert!(r.rot_rmse_deg < 0.2, "RPE rotation {}", r.rot_rmse_deg);
    assert!(slam.map().keyframe_count() >= 2);
}

#[test]
fn structureless_view_fails_initialization() {
    let spec = SceneSpec::parse("room = 10 10 10\nsphere = 0 0 1.4 3\ntextured = false\nframes = 8\n").unwrap();
    let scene = generate_synthetic_scene(&spec).unwrap();
    match run(&scene) {
        Err(SlamError::Initialization(_)) => {}
        other => panic!(
            "expected an initialization failure, got {:?}",
            other.map(|s| s.logs().len())
        ),
    }
}

#[test]
fn blank_wall_degrades_then_recovers() {
    // The camera walks up to an untextured wall until it fills the view,
    // waits there, and walks back.
    let spec = SceneSpec::parse(
        "untextured = 3\n\
         trajectory = waypoints\n\
         frames = 60\n\
         waypoint = 0.6 -0.4 1.4 35 -35\n\
         waypoint = 1.5 0 1.4 0 0\n\
         waypoint = 1.5 0 1.4 0 0\n\
         waypoint = 0.6 -0.4 1.4 35 -35\n",
    )
    .unwrap();
    let scene = generate_synthetic_scene(&spec).unwrap();
    let slam = run(&scene).unwrap();
    let logs = slam.logs();
    assert_eq!(logs.len(), 60);

    let facing_wall = &logs[25..35];
    for log in facing_wall {
        assert_eq!(log.feature_counts[0], 0, "frame {} sees points", log.index);
        assert!(
            matches!(
                log.status,
                FrameStatus::Tracked(TrackingStatus::Lost | TrackingStatus::RefinedOnly)
            ),
            "frame {} is {:?}",
            log.index,
            log.status
        );
    }
    for i in 0..60 {
        let (r, t) = frame_error(&slam, &scene, i);
        assert!(r.is_finite() && t.is_finite(), "frame {i} pose is not finite");
    }
    for log in &logs[55..] {
        assert_eq!(
            log.status,
            FrameStatus::Tracked(TrackingStatus::GoodMW),
            "frame {}",
            log.index
        );
        let (r, t) = frame_error(&slam, &scene, log.index);
        assert!(r < 0.2 && t < 0.005, "frame {}: {r} deg, {t} m", log.index);
    }
}
