use d4d_core::camera::{Camera, Pinhole, RigidPose};
use d4d_core::compose::{fuse, ObjectGeometry, PoseParams};
use d4d_core::fixtures::box_surface;
use d4d_core::pointcloud::PointCloud;
use d4d_core::raster::Raster;
use d4d_core::render::{rasterize, SurfelGrads};
use d4d_core::surfel::{Provenance, SurfelCloud};
use d4d_core::train::{
    init_surfels, refine_composite, train_scene, BaseView, SdsHook, TrainConfig, ViewSet, DEFAULT_SDS_WEIGHT,
};
use nalgebra::Vector3;

fn wall() -> PointCloud {
    let mut pts = Vec::new();
    let mut cols = Vec::new();
    for i in 0..30 {
        for j in 0..30 {
            pts.push(Vector3::new(-0.6 + 0.04 * i as f64, -0.6 + 0.04 * j as f64, 2.0));
            cols.push(Vector3::new(i as f64 / 30.0, j as f64 / 30.0, 0.5));
        }
    }
    let n = pts.len();
    PointCloud::new(pts, cols).unwrap().with_normals(vec![-Vector3::z(); n]).unwrap()
}

fn views() -> ViewSet {
    let cam = Camera::new(Pinhole::from_fov(32, 32, 40.0).unwrap(), RigidPose::identity());
    ViewSet {
        base: vec![BaseView {
            image: Raster::filled(32, 32, 3, 0.8),
            camera: cam,
            feature: None,
        }],
        aug: vec![],
    }
}

#[test]
fn iteration_contract() {
    let pc = wall();
    let zero = TrainConfig {
        iterations: 0,
        ..Default::default()
    };
    assert!(train_scene(&pc, &views(), &zero).is_err());
    let one = TrainConfig {
        iterations: 1,
        ..Default::default()
    };
    let r = train_scene(&pc, &views(), &one).unwrap();
    assert_eq!(r.trace.len(), 1);
    assert_ne!(r.cloud, init_surfels(&pc, 0).unwrap());
    let five = TrainConfig {
        iterations: 5,
        ..Default::default()
    };
    assert_eq!(train_scene(&pc, &views(), &five).unwrap().trace.len(), 5);
}

#[test]
fn empty_view_set_is_rejected() {
    let cfg = TrainConfig {
        iterations: 2,
        ..Default::default()
    };
    assert!(train_scene(&wall(), &ViewSet { base: vec![], aug: vec![] }, &cfg).is_err());
}

fn composite() -> SurfelCloud {
    let scene = init_surfels(&wall(), 0).unwrap();
    let obj = box_surface(0.2, 4).unwrap();
    let pose = PoseParams {
        translation: Vector3::new(0.0, -0.1, 1.5),
        yaw: 20.0,
    };
    fuse(&scene, ObjectGeometry::Points(&obj), &pose, &Vector3::y()).unwrap()
}

fn split(c: &SurfelCloud) -> (SurfelCloud, SurfelCloud) {
    (c.filter(Provenance::Scene), c.filter(Provenance::Object))
}

#[test]
fn scene_stays_frozen_without_a_hook() {
    let c = composite();
    let cfg = TrainConfig {
        iterations: 10,
        ..Default::default()
    };
    let out = refine_composite(&c, &views(), &cfg, DEFAULT_SDS_WEIGHT, None).unwrap();
    let (s0, o0) = split(&c);
    let (s1, o1) = split(&out.cloud);
    assert_eq!(s0, s1);
    assert_ne!(o0, o1);
    for (a, b) in o0.surfels.iter().zip(&o1.surfels) {
        assert_eq!(a.position, b.position);
        assert_eq!(a.rotation, b.rotation);
        assert_eq!(a.scales, b.scales);
    }
}

#[test]
fn zero_hook_equals_no_hook() {
    let c = composite();
    let cfg = TrainConfig {
        iterations: 6,
        ..Default::default()
    };
    let n = c.len();
    let mut hook = |_: &SurfelCloud, _: usize| Some(SurfelGrads::zeros(n, 0));
    let with = refine_composite(&c, &views(), &cfg, DEFAULT_SDS_WEIGHT, Some(&mut hook as &mut dyn SdsHook)).unwrap();
    let without = refine_composite(&c, &views(), &cfg, DEFAULT_SDS_WEIGHT, None).unwrap();
    assert_eq!(with.cloud, without.cloud);
    assert_eq!(with.trace, without.trace);
}

#[test]
fn hook_moves_scene_surfels() {
    let c = composite();
    let cfg = TrainConfig {
        iterations: 3,
        ..Default::default()
    };
    let n = c.len();
    let mut hook = |_: &SurfelCloud, _: usize| {
        let mut g = SurfelGrads::zeros(n, 0);
        g.color[0] = Vector3::new(1.0, 1.0, 1.0);
        Some(g)
    };
    let out = refine_composite(&c, &views(), &cfg, DEFAULT_SDS_WEIGHT, Some(&mut hook as &mut dyn SdsHook)).unwrap();
    assert_ne!(out.cloud.surfels[0].color, c.surfels[0].color);
    assert_eq!(out.cloud.surfels[1], c.surfels[1]);
    let _ = rasterize(&out.cloud, &views().base[0].camera, Vector3::zeros());
}
