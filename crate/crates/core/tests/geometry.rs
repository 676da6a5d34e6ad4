use d4d_core::camera::{
    direction_to_pixel, pinhole_project, pixel_to_direction, project_homogeneous, ring_cameras, Camera, CameraRing,
    Pinhole, RigidPose,
};
use d4d_core::pointcloud::{lift_panorama, EquirectFrame};
use d4d_core::raster::Raster;
use d4d_core::surfel::{
    build_covariance, flatten_2d, gaussian_weight, project_covariance, Surfel, SCREEN_EPSILON,
};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn equirect_sweep_round_trips() {
    let (w, h) = (512, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let u = rng.random_range(0.0..w as f64);
        // keep away from the poles where u is undefined
        let v = rng.random_range(0.5..h as f64 - 0.5);
        let d = pixel_to_direction(u, v, w, h).unwrap();
        let (u2, v2) = direction_to_pixel(&d, w, h).unwrap();
        let du = (u - u2).abs().min(w as f64 - (u - u2).abs());
        worst = worst.max(du).max((v - v2).abs());
    }
    assert!(worst < 1e-6, "worst {worst}");
}

#[test]
fn lifted_points_project_to_their_range() {
    let (w, h) = (64, 32);
    let depth = Raster::from_fn(w, h, 1, |x, y, p| p[0] = 1.0 + 0.01 * ((x * 7 + y * 3) % 50) as f64);
    let frame = EquirectFrame::new(Raster::filled(w, h, 3, 0.5), depth.clone()).unwrap();
    let pc = lift_panorama(&frame).unwrap();
    assert_eq!(pc.len(), w * h);
    let k = Pinhole::from_fov(64, 64, 90.0).unwrap();
    let mut checked = 0;
    for target in [Vector3::x(), -Vector3::z(), Vector3::new(0.3, 0.2, 1.0)] {
        let pose = RigidPose::look_at(Vector3::zeros(), target, Vector3::y()).unwrap();
        for (i, p) in pc.positions().iter().enumerate() {
            let Ok((_, _, z)) = pinhole_project(p, &k, &pose) else { continue };
            let range = depth.data()[i];
            let cos = pose.forward().dot(&p.normalize());
            assert!((z - range * cos).abs() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn ring_has_eight_poses_looking_at_target() {
    let ring = CameraRing::default().with_target(Vector3::new(0.5, 0.2, -1.0), 3.0);
    let poses = ring_cameras(&ring).unwrap();
    assert_eq!(poses.len(), 8);
    for p in poses {
        let t = p.transform_point(&Vector3::new(0.5, 0.2, -1.0));
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && (t.z - 3.0).abs() < 1e-12);
    }
}

fn random_surfel(rng: &mut ChaCha8Rng) -> Surfel {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    let mut s = Surfel::oriented(
        Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        &Vector3::z(),
        0.1,
        0.5,
        Vector3::zeros(),
        0,
    );
    s.rotation = *q.quaternion();
    s.scales = Vector2::new(rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
    s
}

#[test]
fn covariance_algebra_on_random_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let s = random_surfel(&mut rng);
        assert!((gaussian_weight(&s.position, &s) - 1.0).abs() < 1e-12);

        // R S Sᵀ Rᵀ written out column by column
        let r = s.rotation_matrix();
        let (t1, t2) = (r.column(0).into_owned(), r.column(1).into_owned());
        let oracle = t1 * t1.transpose() * s.scales.x.powi(2) + t2 * t2.transpose() * s.scales.y.powi(2);
        let sigma = build_covariance(&r, &s.scales);
        assert!((sigma - oracle).abs().max() < 1e-12);

        let id = Matrix3::identity();
        assert!((project_covariance(&sigma, &id, &id) - sigma).abs().max() < 1e-12);

        let m = Matrix3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let flat = flatten_2d(&m);
        for i in 0..2 {
            for j in 0..2 {
                let eps = if i == j { SCREEN_EPSILON } else { 0.0 };
                assert!((flat[(i, j)] - m[(i, j)] - eps).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn pinhole_matches_homogeneous(x in -3.0f64..3.0, y in -3.0f64..3.0, z in 0.5f64..10.0, az in 0.0f64..360.0) {
        let k = Pinhole::new(50.0, 60.0, 31.0, 33.0, 64, 64).unwrap();
        let eye = Vector3::new(az.to_radians().cos(), 0.2, az.to_radians().sin()) * 0.1;
        let pose = RigidPose::look_at(eye, eye + Vector3::new(0.1, 0.0, 1.0), Vector3::y()).unwrap();
        let p = Vector3::new(x, y, z);
        match (pinhole_project(&p, &k, &pose), project_homogeneous(&p, &k, &pose)) {
            (Ok(a), Some(b)) => {
                prop_assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9);
            }
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "disagree: {a:?} vs {b:?}"),
        }
    }

    #[test]
    fn ring_cardinality(na in 1usize..6, ne in 1usize..4, r in 0.1f64..10.0) {
        let ring = CameraRing {
            azimuths: (0..na).map(|i| i as f64 * 360.0 / na as f64).collect(),
            elevations: (0..ne).map(|i| i as f64 * 20.0).collect(),
            radius: r,
            target: [0.0; 3],
        };
        prop_assert_eq!(ring_cameras(&ring).unwrap().len(), na * ne);
    }

    #[test]
    fn camera_json_round_trips(yaw in -180.0f64..180.0, px in -5.0f64..5.0) {
        let pose = RigidPose::look_at(Vector3::new(px, 1.0, 2.0), Vector3::new(yaw.to_radians().sin(), 0.0, yaw.to_radians().cos()), Vector3::y()).unwrap();
        let cam = Camera::new(Pinhole::from_fov(32, 24, 60.0).unwrap(), pose);
        let back: Camera = serde_json::from_str(&serde_json::to_string(&cam).unwrap()).unwrap();
        prop_assert_eq!(back, cam);
    }
}
