mod common;

use common::{d4d, write_drop_scene};
use d4d_core::fixtures::CubeRoom;
use d4d_core::io;
use d4d_core::motion::{import_bundle, BundleManifest, MANIFEST_FILE};
use d4d_service::pipeline::PoseReport;

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn lift_keeps_one_point_per_valid_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let room = CubeRoom {
        supersample: 1,
        ..Default::default()
    };
    let mut pano = room.panorama(64, 32).unwrap();
    // knock out a band of pixels
    for u in 10..20 {
        pano.depth.set(u, 5, 0, 0.0);
        pano.depth.set(u, 6, 0, f64::NAN);
    }
    io::save_png(&pano.rgb, dir.path().join("p.png")).unwrap();
    io::save_depth(&pano.depth, dir.path().join("d.d4dd")).unwrap();
    let out = d4d()
        .current_dir(dir.path())
        .args(["lift", "--pano", "p.png", "--depth", "d.d4dd", "--out", "pc.ply"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let pc = io::load_point_ply(dir.path().join("pc.ply")).unwrap();
    assert_eq!(pc.len(), 64 * 32 - 20);
    assert!(pc.normals().is_some());
}

#[test]
fn compose_settles_the_box() {
    let dir = tempfile::tempdir().unwrap();
    write_drop_scene(dir.path());
    let out = d4d()
        .current_dir(dir.path())
        .args([
            "compose",
            "--scene-points",
            "floor.ply",
            "--object",
            "box.ply",
            "--prior",
            "prior.json",
            "--pose-out",
            "pose.json",
            "--fused-out",
            "fused.ply",
            "--trace",
            "trace.csv",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let report: PoseReport = serde_json::from_slice(&std::fs::read(dir.path().join("pose.json")).unwrap()).unwrap();
    assert!(report.lowest_gap.abs() < 0.01, "gap {}", report.lowest_gap);
    assert_eq!(report.iterations, 500);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,L_collision,L_gravity,total\n"));
    assert_eq!(trace.lines().count(), 501);
    let fused = io::load_surfel_ply(dir.path().join("fused.ply")).unwrap();
    let floor = io::load_point_ply(dir.path().join("floor.ply")).unwrap();
    let obj = io::load_point_ply(dir.path().join("box.ply")).unwrap();
    assert_eq!(fused.len(), floor.len() + obj.len());
}

#[test]
fn conditioning_writes_eight_bundles() {
    let dir = tempfile::tempdir().unwrap();
    write_drop_scene(dir.path());
    let out = d4d()
        .current_dir(dir.path())
        .args([
            "conditioning",
            "--trajectory",
            "trajectory.json",
            "--features",
            "features.d4df",
            "--mask",
            "mask.png",
            "--scene",
            "scene.ply",
            "--out-dir",
            "bundles",
            "--views",
            "8",
            "--parts",
            "2",
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    for i in 0..8 {
        let d = dir.path().join(format!("bundles/view{i}"));
        let m: BundleManifest = serde_json::from_slice(&std::fs::read(d.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m.frames, 4);
        assert_eq!(m.parts, 2);
        assert_eq!(m.files.len(), 4 * (2 + 2 * 2));
        assert_eq!(import_bundle(&d).unwrap().frames.len(), 4);
        assert!(d.join("view.png").is_file());
    }
    assert!(!dir.path().join("bundles/view8").exists());
}

#[test]
fn exit_codes_and_prefixes() {
    let dir = tempfile::tempdir().unwrap();
    write_drop_scene(dir.path());

    let usage = d4d().args(["render", "--out", "x.png"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    assert!(stderr(&usage).starts_with("E1: "), "{}", stderr(&usage));

    let help = d4d().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));

    let missing = d4d()
        .current_dir(dir.path())
        .args(["floor", "--points", "nope.ply", "--out", "f.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).starts_with("E2: "), "{}", stderr(&missing));

    std::fs::write(dir.path().join("garbage.ply"), b"not a ply").unwrap();
    let garbage = d4d()
        .current_dir(dir.path())
        .args(["render", "--surfels", "garbage.ply", "--out", "x.png"])
        .output()
        .unwrap();
    assert_eq!(garbage.status.code(), Some(2));

    // a step so large the pose overflows to infinity
    std::fs::write(dir.path().join("wild.json"), br#"{"g": 1e308, "lr": 1e308}"#).unwrap();
    let nan = d4d()
        .current_dir(dir.path())
        .args([
            "compose",
            "--scene-points",
            "floor.ply",
            "--object",
            "box.ply",
            "--prior",
            "prior.json",
            "--config",
            "wild.json",
            "--pose-out",
            "pose.json",
        ])
        .output()
        .unwrap();
    assert_eq!(nan.status.code(), Some(3), "{}", stderr(&nan));
    let line = stderr(&nan);
    assert!(line.starts_with("E3: "), "{line}");
    assert_eq!(line.lines().count(), 1);
}

#[test]
fn floor_and_render_outputs_read_back() {
    let dir = tempfile::tempdir().unwrap();
    write_drop_scene(dir.path());
    let run = |args: &[&str]| {
        let out = d4d().current_dir(dir.path()).args(args).output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    };
    run(&["floor", "--points", "floor.ply", "--out", "floor.json"]);
    let plane: d4d_core::pointcloud::FloorPlane =
        serde_json::from_slice(&std::fs::read(dir.path().join("floor.json")).unwrap()).unwrap();
    assert!(plane.normal.y > 0.99 && plane.offset.abs() < 0.01);

    run(&["render", "--surfels", "scene.ply", "--ring", "4", "--width", "40", "--height", "30", "--out", "r.png"]);
    let img = io::load_png(dir.path().join("r.png")).unwrap();
    assert_eq!(img.dims(), (40, 30));
    // elevated ring views look down at the floor
    assert!(img.data().iter().any(|v| *v > 0.1));
}
