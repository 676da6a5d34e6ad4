use d4d_core::camera::{Camera, Pinhole, RigidPose};
use d4d_core::raster::Raster;
use d4d_core::render::{
    rasterize, rasterize_planned, rasterize_with_grads, rasterize_with_plan, RenderAdjoint, RenderOutput,
    SurfelGrads,
};
use d4d_core::surfel::{Surfel, SurfelCloud};
use nalgebra::{Quaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Param {
    Position(usize),
    Rotation(usize),
    Scale(usize),
    Opacity,
    Color(usize),
    Feature(usize),
}

fn params(f: usize) -> Vec<Param> {
    let mut v = Vec::new();
    v.extend((0..3).map(Param::Position));
    v.extend((0..4).map(Param::Rotation));
    v.extend((0..2).map(Param::Scale));
    v.push(Param::Opacity);
    v.extend((0..3).map(Param::Color));
    v.extend((0..f).map(Param::Feature));
    v
}

fn quat_slot(q: &mut Quaternion<f64>, k: usize) -> &mut f64 {
    match k {
        0 => &mut q.w,
        1 => &mut q.i,
        2 => &mut q.j,
        _ => &mut q.k,
    }
}

fn nudge(s: &mut Surfel, p: Param, h: f64) {
    match p {
        Param::Position(k) => s.position[k] += h,
        Param::Rotation(k) => *quat_slot(&mut s.rotation, k) += h,
        Param::Scale(k) => s.scales[k] += h,
        Param::Opacity => s.opacity += h,
        Param::Color(k) => s.color[k] += h,
        Param::Feature(k) => s.feature[k] += h,
    }
}

fn analytic(g: &SurfelGrads, i: usize, p: Param) -> f64 {
    match p {
        Param::Position(k) => g.position[i][k],
        Param::Rotation(k) => g.rotation[i][k],
        Param::Scale(k) => g.scales[i][k],
        Param::Opacity => g.opacity[i],
        Param::Color(k) => g.color[i][k],
        Param::Feature(k) => g.feature[i][k],
    }
}

fn dot(a: &Raster, b: &Raster) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn linear_loss(out: &RenderOutput, adj: &RenderAdjoint) -> f64 {
    let pairs = [
        (&out.color, &adj.color),
        (&out.depth, &adj.depth),
        (&out.normal, &adj.normal),
        (&out.feature, &adj.feature),
        (&out.alpha, &adj.alpha),
        (&out.distortion, &adj.distortion),
    ];
    pairs.iter().map(|(o, a)| a.as_ref().map_or(0.0, |a| dot(o, a))).sum()
}

fn random_raster(rng: &mut ChaCha8Rng, c: usize) -> Raster {
    Raster::from_fn(SIZE, SIZE, c, |_, _, px| {
        for v in px {
            *v = rng.random_range(-1.0..1.0);
        }
    })
}

fn random_scene(rng: &mut ChaCha8Rng, f: usize) -> SurfelCloud {
    let n = rng.random_range(1..=10);
    let surfels = (0..n)
        .map(|_| {
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            Surfel {
                position: Vector3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(1.5..3.0),
                ),
                rotation: q / q.norm(),
                scales: Vector2::new(rng.random_range(0.05..0.25), rng.random_range(0.05..0.25)),
                opacity: rng.random_range(0.1..0.9),
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
                feature: (0..f).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    SurfelCloud::scene(surfels)
}

fn camera() -> Camera {
    Camera::new(Pinhole::from_fov(SIZE, SIZE, 60.0).unwrap(), RigidPose::identity())
}

/// Central differences of the linear loss, evaluated on the contribution
/// set frozen at the unperturbed parameters.
fn check_scene(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = 2;
    let cloud = random_scene(&mut rng, f);
    let cam = camera();
    let bg = Vector3::new(0.3, 0.5, 0.7);
    let adj = RenderAdjoint {
        color: Some(random_raster(&mut rng, 3)),
        depth: Some(random_raster(&mut rng, 1)),
        normal: Some(random_raster(&mut rng, 3)),
        feature: Some(random_raster(&mut rng, f)),
        alpha: Some(random_raster(&mut rng, 1)),
        distortion: Some(random_raster(&mut rng, 1)),
    };
    let grads = rasterize_with_grads(&cloud, &cam, bg, &adj);
    let (_, plan) = rasterize_with_plan(&cloud, &cam, bg);
    let h = 1e-6;
    let mut failures = Vec::new();
    for i in 0..cloud.len() {
        for p in params(f) {
            let mut plus = cloud.clone();
            nudge(&mut plus.surfels[i], p, h);
            let mut minus = cloud.clone();
            nudge(&mut minus.surfels[i], p, -h);
            let lp = linear_loss(&rasterize_planned(&plus, &cam, bg, &plan), &adj);
            let lm = linear_loss(&rasterize_planned(&minus, &cam, bg, &plan), &adj);
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic(&grads, i, p);
            if (an - fd).abs() > (1e-3 * fd.abs()).max(1e-6) {
                failures.push(format!("seed {seed} surfel {i} {p:?}: analytic {an:.9e} fd {fd:.9e}"));
            }
        }
    }
    failures
}

#[test]
fn all_parameter_classes_match_finite_differences() {
    let failures: Vec<String> = (0..20).flat_map(check_scene).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

fn single_surfel(opacity: f64, color: Vector3<f64>, z: f64) -> Surfel {
    Surfel::oriented(Vector3::new(0.02, -0.01, z), &-Vector3::z(), 0.15, opacity, color, 0)
}

#[test]
fn l2_to_shifted_target_position_gradient() {
    let cam = camera();
    let bg = Vector3::zeros();
    let cloud = SurfelCloud::scene(vec![single_surfel(0.8, Vector3::new(0.9, 0.4, 0.2), 2.0)]);
    let mut shifted = cloud.clone();
    shifted.surfels[0].position.x += 0.1;
    let target = rasterize(&shifted, &cam, bg).color;
    let loss = |c: &SurfelCloud| -> f64 {
        let r = rasterize(c, &cam, bg).color;
        r.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let r = rasterize(&cloud, &cam, bg).color;
    let d = Raster::from_vec(
        SIZE,
        SIZE,
        3,
        r.data().iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b)).collect(),
    )
    .unwrap();
    let adj = RenderAdjoint {
        color: Some(d),
        ..Default::default()
    };
    let g = rasterize_with_grads(&cloud, &cam, bg, &adj);
    let h = 1e-4;
    for k in 0..3 {
        let mut p = cloud.clone();
        p.surfels[0].position[k] += h;
        let mut m = cloud.clone();
        m.surfels[0].position[k] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        let an = g.position[0][k];
        assert!((an - fd).abs() <= (1e-3 * fd.abs()).max(1e-6), "axis {k}: {an} vs {fd}");
    }
    assert!(g.position[0].x < 0.0, "moving toward the target must lower the loss");
}

#[test]
fn opacity_gradient_sign_with_brighter_target_behind() {
    let cam = camera();
    let bg = Vector3::zeros();
    let dark = single_surfel(0.5, Vector3::new(0.1, 0.1, 0.1), 1.5);
    let bright = single_surfel(1.0, Vector3::new(0.9, 0.9, 0.9), 3.0);
    let cloud = SurfelCloud::scene(vec![dark.clone(), bright.clone()]);
    let target = rasterize(&SurfelCloud::scene(vec![bright]), &cam, bg).color;
    let r = rasterize(&cloud, &cam, bg).color;
    let d: Vec<f64> = r.data().iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b)).collect();
    let adj = RenderAdjoint {
        color: Some(Raster::from_vec(SIZE, SIZE, 3, d).unwrap()),
        ..Default::default()
    };
    let g = rasterize_with_grads(&cloud, &cam, bg, &adj);
    // raising the dark occluder's opacity moves the image further from the target
    assert!(g.opacity[0] > 0.0);

    // and its mirror: a darker target makes more opacity desirable
    let target = rasterize(&SurfelCloud::scene(vec![single_surfel(1.0, dark.color, 1.5)]), &cam, bg).color;
    let d: Vec<f64> = r.data().iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b)).collect();
    let adj = RenderAdjoint {
        color: Some(Raster::from_vec(SIZE, SIZE, 3, d).unwrap()),
        ..Default::default()
    };
    assert!(rasterize_with_grads(&cloud, &cam, bg, &adj).opacity[0] < 0.0);
}
