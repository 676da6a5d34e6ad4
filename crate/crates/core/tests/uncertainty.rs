use d4d_core::fixtures::step_fixture;
use d4d_core::view::{is_uncertain, render_points, uncertainty_map, DEFAULT_SPLAT_PX, SIMILARITY_THRESHOLD};

#[test]
fn step_edge_is_masked_and_planes_are_not() {
    let fx = step_fixture(64, 1.0, 1.5).unwrap();
    let view = render_points(&fx.cloud, &fx.camera.intrinsics, &fx.camera.pose, DEFAULT_SPLAT_PX).unwrap();
    assert_eq!(view.hole_count(), 0);
    let map = uncertainty_map(&view, &fx.cloud).unwrap();
    for y in 2..62 {
        // near-plane splats overhang the step, so locate the jump in the render
        let c = (1..64).find(|&x| view.depth.get(x, y, 0) != view.depth.get(x - 1, y, 0)).expect("a depth step");
        assert!((c as i64 - fx.step_column as i64).abs() <= 3);
        assert!(map.uncertain.get(c - 1, y) && map.uncertain.get(c, y), "row {y} edge not masked");
        for x in (2..c - 3).chain(c + 3..62) {
            assert!(!map.uncertain.get(x, y), "interior ({x}, {y}) masked");
            assert!((map.similarity.get(x, y, 0) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn threshold_boundary() {
    assert!(!is_uncertain(SIMILARITY_THRESHOLD));
    assert!(is_uncertain(SIMILARITY_THRESHOLD - 1e-12));
    assert!(!is_uncertain(0.76));
    assert!(is_uncertain(0.74));
    assert!(is_uncertain(f64::NAN));
    assert!(is_uncertain(-1.0));
}
