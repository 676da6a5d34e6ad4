use std::ops::ControlFlow;

use d4d_core::compose::{
    canonicalize, collision_for_contacts, collision_loss, find_contacts, fuse, gravity_loss, lowest_height,
    optimize_pose, optimize_pose_with, place_initial, ObjectGeometry, PhysicsConfig, PoseParams, PosePrior,
};
use d4d_core::fixtures::{box_surface, drop_fixture, DropFixtureConfig};
use d4d_core::pointcloud::{FloorPlane, KdTree, PointCloud};
use d4d_core::surfel::{Provenance, Surfel, SurfelCloud};
use nalgebra::Vector3;
use proptest::prelude::*;

fn single(p: Vector3<f64>, n: Vector3<f64>) -> PointCloud {
    PointCloud::uniform_color(vec![p], Vector3::zeros()).with_normals(vec![n]).unwrap()
}

#[test]
fn disjoint_clouds_do_not_collide() {
    let a = box_surface(0.2, 5).unwrap();
    let b = a.transformed(|p| p + Vector3::new(5.0, 0.0, 0.0), |n| *n);
    let tree = KdTree::build(b.positions());
    let (v, g) = collision_loss(&a, &b, &tree, &Vector3::y(), &PhysicsConfig::default()).unwrap();
    assert_eq!(v, 0.0);
    assert_eq!(g.yaw, 0.0);
}

#[test]
fn opposite_coincident_normals_cost_two() {
    let a = single(Vector3::new(0.3, 0.0, 0.1), Vector3::y());
    let b = single(Vector3::new(0.3, 0.0, 0.1), -Vector3::y());
    let tree = KdTree::build(b.positions());
    let (v, _) = collision_loss(&a, &b, &tree, &Vector3::y(), &PhysicsConfig::default()).unwrap();
    assert_eq!(v, 2.0);
}

#[test]
fn resting_object_has_no_potential() {
    let obj = box_surface(0.3, 4).unwrap();
    let (v, _) = gravity_loss(&obj, &FloorPlane::horizontal(0.0), &PhysicsConfig::default());
    // only the top and side rows sit above the floor
    assert!(v > 0.0);
    let flat = PointCloud::uniform_color(vec![Vector3::new(0.1, 0.0, 0.2), Vector3::new(-1.0, 0.0, 3.0)], Vector3::zeros());
    assert_eq!(gravity_loss(&flat, &FloorPlane::horizontal(0.0), &PhysicsConfig::default()).0, 0.0);
}

#[test]
fn unit_cube_lands_on_the_floor_at_the_prior() {
    let cube = box_surface(1.0, 3).unwrap().transformed(|p| p * 3.0 + Vector3::new(7.0, -2.0, 4.0), |n| *n);
    let prior = PosePrior {
        center: Vector3::new(1.0, 0.8, 1.0),
        dims: Vector3::repeat(1.0),
        yaw: 0.0,
    };
    let pl = place_initial(&cube, &prior, &FloorPlane::horizontal(0.0)).unwrap();
    let posed = pl.posed();
    assert!(lowest_height(&posed, &FloorPlane::horizontal(0.0)).abs() < 1e-9);
    let c = posed.centroid().unwrap();
    assert!((c.x - 1.0).abs() < 1e-9 && (c.z - 1.0).abs() < 1e-9);
}

#[test]
fn place_initial_rejects_bad_priors() {
    let cube = box_surface(1.0, 3).unwrap();
    let bad = PosePrior {
        center: Vector3::zeros(),
        dims: Vector3::new(1.0, 0.0, 1.0),
        yaw: 0.0,
    };
    assert!(place_initial(&cube, &bad, &FloorPlane::horizontal(0.0)).is_err());
    let empty = PointCloud::uniform_color(vec![], Vector3::zeros());
    assert!(canonicalize(&empty, &Vector3::repeat(1.0)).is_err());
}

#[test]
fn tilted_floor_placement_touches_plane() {
    let n = Vector3::new(0.1, 1.0, -0.05).normalize();
    let floor = FloorPlane {
        normal: n,
        offset: 0.3,
        inlier_count: 0,
    };
    let prior = PosePrior {
        center: Vector3::new(0.5, 2.0, -0.4),
        dims: Vector3::new(0.4, 0.2, 0.3),
        yaw: 30.0,
    };
    let pl = place_initial(&box_surface(1.0, 4).unwrap(), &prior, &floor).unwrap();
    assert!(lowest_height(&pl.posed(), &floor).abs() < 1e-9);
}

fn total(obj: &PointCloud, scene: &PointCloud, contacts: &[(usize, usize)], floor: &FloorPlane, pose: &PoseParams, cfg: &PhysicsConfig) -> f64 {
    let posed = pose.apply(obj, &floor.normal);
    collision_for_contacts(&posed, scene, contacts, &floor.normal).unwrap().0 + gravity_loss(&posed, floor, cfg).0
}

#[test]
fn pose_gradient_matches_finite_differences() {
    // object straddling a bumpy patch so both terms are active
    let fx = drop_fixture(&DropFixtureConfig::default()).unwrap();
    let cfg = PhysicsConfig {
        contact_radius: 0.02,
        ..Default::default()
    };
    let pose = PoseParams {
        translation: fx.init.translation - Vector3::new(0.0, 0.49, 0.0),
        yaw: 17.0,
    };
    let up = fx.floor.normal;
    let posed = pose.apply(&fx.object, &up);
    let tree = KdTree::build(fx.scene.positions());
    let contacts = find_contacts(&posed, &tree, cfg.contact_radius);
    assert!(!contacts.is_empty());
    let (_, gc) = collision_for_contacts(&posed, &fx.scene, &contacts, &up).unwrap();
    let (_, gg) = gravity_loss(&posed, &fx.floor, &cfg);
    let h = 1e-6;
    for k in 0..3 {
        let mut p = pose;
        p.translation[k] += h;
        let mut m = pose;
        m.translation[k] -= h;
        let fd = (total(&fx.object, &fx.scene, &contacts, &fx.floor, &p, &cfg) - total(&fx.object, &fx.scene, &contacts, &fx.floor, &m, &cfg)) / (2.0 * h);
        let an = gc.translation[k] + gg.translation[k];
        assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "t{k}: fd {fd} vs {an}");
    }
    let hd = 1e-5;
    let (mut p, mut m) = (pose, pose);
    p.yaw += hd;
    m.yaw -= hd;
    let fd = (total(&fx.object, &fx.scene, &contacts, &fx.floor, &p, &cfg) - total(&fx.object, &fx.scene, &contacts, &fx.floor, &m, &cfg))
        / (2.0 * hd.to_radians());
    let an = gc.yaw + gg.yaw;
    assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "yaw: fd {fd} vs {an}");
}

#[test]
fn floating_box_settles_on_the_floor() {
    let fx = drop_fixture(&DropFixtureConfig::default()).unwrap();
    let cfg = PhysicsConfig::default();
    let res = optimize_pose(&fx.object, &fx.scene, &fx.floor, &fx.init, &cfg).unwrap();
    assert_eq!(res.trace.len(), 500);
    let gap = lowest_height(&res.pose.apply(&fx.object, &fx.floor.normal), &fx.floor);
    assert!(gap.abs() < 0.01, "gap {gap}");
    assert!(res.loss < res.trace[0].total);
    assert!(res.trace.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));

    let again = optimize_pose(&fx.object, &fx.scene, &fx.floor, &fx.init, &cfg).unwrap();
    assert_eq!(again, res);
}

#[test]
fn cancelling_returns_best_so_far() {
    let fx = drop_fixture(&DropFixtureConfig::default()).unwrap();
    let mut seen = 0;
    let res = optimize_pose_with(&fx.object, &fx.scene, &fx.floor, &fx.init, &PhysicsConfig::default(), |row| {
        seen += 1;
        if row.iteration == 9 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert!(res.cancelled);
    assert_eq!(seen, 10);
    assert_eq!(res.trace.len(), 10);
    let best = res.trace.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    assert_eq!(res.loss, best);
}

#[test]
fn optimizer_requires_normals() {
    let fx = drop_fixture(&DropFixtureConfig::default()).unwrap();
    let bare = PointCloud::uniform_color(fx.object.positions().to_vec(), Vector3::zeros());
    assert!(optimize_pose(&bare, &fx.scene, &fx.floor, &fx.init, &PhysicsConfig::default()).is_err());
}

#[test]
fn fusion_tags_object_surfels() {
    let scene = SurfelCloud::scene(vec![Surfel::oriented(Vector3::zeros(), &Vector3::y(), 0.1, 0.5, Vector3::zeros(), 2)]);
    let obj = box_surface(0.2, 3).unwrap();
    let pose = PoseParams {
        translation: Vector3::new(1.0, 0.0, 0.0),
        yaw: 90.0,
    };
    let fused = fuse(&scene, ObjectGeometry::Points(&obj), &pose, &Vector3::y()).unwrap();
    assert_eq!(fused.len(), 1 + obj.len());
    assert_eq!(fused.provenance[0], Provenance::Scene);
    assert!(fused.provenance[1..].iter().all(|p| *p == Provenance::Object));
    assert_eq!(fused.feature_dim(), 2);
    let posed = pose.apply(&obj, &Vector3::y());
    for (s, p) in fused.surfels[1..].iter().zip(posed.positions()) {
        assert!((s.position - p).norm() < 1e-12);
    }
}

proptest! {
    #[test]
    fn yaw_preserves_heights(yaw in -360.0f64..360.0, tx in -2.0f64..2.0, tz in -2.0f64..2.0) {
        let obj = box_surface(0.5, 3).unwrap();
        let floor = FloorPlane::horizontal(0.0);
        let cfg = PhysicsConfig::default();
        let a = PoseParams { translation: Vector3::new(tx, 0.7, tz), yaw: 0.0 };
        let b = PoseParams { yaw, ..a };
        let ga = gravity_loss(&a.apply(&obj, &floor.normal), &floor, &cfg).0;
        let gb = gravity_loss(&b.apply(&obj, &floor.normal), &floor, &cfg).0;
        prop_assert!((ga - gb).abs() < 1e-9);
    }

    #[test]
    fn collision_is_bounded_by_twice_the_contacts(seed in 0u64..50) {
        let fx = drop_fixture(&DropFixtureConfig { seed, floor_half: 0.3, ..Default::default() }).unwrap();
        let posed = PoseParams { translation: Vector3::zeros(), yaw: seed as f64 }.apply(&fx.object, &fx.floor.normal);
        let tree = KdTree::build(fx.scene.positions());
        let contacts = find_contacts(&posed, &tree, 0.01);
        let (v, _) = collision_for_contacts(&posed, &fx.scene, &contacts, &fx.floor.normal).unwrap();
        prop_assert!(v >= 0.0 && v <= 2.0 * contacts.len() as f64 + 1e-12);
    }
}
