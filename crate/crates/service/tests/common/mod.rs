#![allow(dead_code)]

use std::path::Path;

use d4d_core::compose::PosePrior;
use d4d_core::fixtures::{drop_fixture, DropFixtureConfig};
use d4d_core::io;
use d4d_core::raster::{Mask, Raster};
use d4d_core::train::init_surfels;
use nalgebra::Vector3;

/// Writes the floating-box scene into `dir`: `floor.ply` (points with
/// normals), `scene.ply` (surfels), `box.ply`, `prior.json`, plus a small
/// feature map, mask and trajectory for conditioning.
pub fn write_drop_scene(dir: &Path) {
    let fx = drop_fixture(&DropFixtureConfig::default()).unwrap();
    io::save_point_ply(&fx.scene, dir.join("floor.ply")).unwrap();
    io::save_surfel_ply(&init_surfels(&fx.scene, 0).unwrap(), dir.join("scene.ply")).unwrap();
    io::save_point_ply(&fx.object, dir.join("box.ply")).unwrap();
    let prior = PosePrior {
        center: fx.init.translation + Vector3::new(0.1, 0.0, -0.05),
        dims: Vector3::repeat(0.2),
        yaw: 15.0,
    };
    std::fs::write(dir.join("prior.json"), serde_json::to_vec(&prior).unwrap()).unwrap();

    let (w, h) = (48, 32);
    let features = Raster::from_fn(w, h, 3, |x, y, p| {
        p[0] = x as f64 / w as f64;
        p[1] = y as f64 / h as f64;
        p[2] = ((x / 6 + y / 6) % 2) as f64;
    });
    io::save_features(&features, dir.join("features.d4df")).unwrap();
    let mask = Mask::from_fn(w, h, |x, y| (18..30).contains(&x) && (10..22).contains(&y));
    io::save_mask_png(&mask, dir.join("mask.png")).unwrap();
    let traj = serde_json::json!({ "points": [[0.0, 0.1, 0.0], [0.1, 0.1, 0.05], [0.2, 0.12, 0.1], [0.3, 0.1, 0.1]] });
    std::fs::write(dir.join("trajectory.json"), serde_json::to_vec(&traj).unwrap()).unwrap();
}

pub fn d4d() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_d4d"))
}
