//! `d4d` command line: one subcommand per pipeline stage plus `serve`.

use std::ops::ControlFlow;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use d4d_core::compose::{pose_trace_csv, PhysicsConfig, PosePrior};
use d4d_core::motion::{BundleConfig, DEFAULT_PARTS};
use d4d_core::pointcloud::{FloorParams, FloorPlane};
use d4d_core::train::{init_surfels, trace_csv, train_scene, TrainConfig};
use d4d_core::{camera::Camera, io};

use crate::error::{Failure, Result};
use crate::pipeline::{self, CameraRequest};

#[derive(Debug, Parser)]
#[command(name = "d4d", version, about = "Panorama-to-scene pipeline and session service")]
pub struct Cli {
    /// Seed for every randomized step (RANSAC, k-means).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Panorama PNG + D4DD depth → point PLY.
    Lift {
        #[arg(long)]
        pano: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Neighbors for normal estimation; 0 writes no normals.
        #[arg(long, default_value_t = pipeline::DEFAULT_NORMAL_NEIGHBORS)]
        normals_k: usize,
    },
    /// Point PLY → base and augmented views with masks and certainty maps.
    Views {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = pipeline::DEFAULT_VIEW_SIZE)]
        size: usize,
        #[arg(long, default_value_t = pipeline::DEFAULT_VIEW_FOV)]
        fov: f64,
        #[arg(long, default_value_t = d4d_core::view::DEFAULT_SPLAT_PX)]
        splat_px: f64,
    },
    /// Views → surfel PLY + loss CSV.
    Reconstruct {
        #[arg(long)]
        points: PathBuf,
        /// The `views.json` written by `views`.
        #[arg(long)]
        views: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// TrainConfig JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Point PLY → floor plane JSON.
    Floor {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        angle_tol: f64,
        #[arg(long, default_value_t = 512)]
        iterations: usize,
        #[arg(long)]
        inlier_eps: Option<f64>,
    },
    /// Scene + object + prior → pose JSON, fused surfel PLY and trace CSV.
    Compose {
        /// Scene surfel PLY.
        #[arg(long, required_unless_present = "scene_points")]
        scene: Option<PathBuf>,
        /// Scene point PLY with normals; defaults to the surfel centers.
        #[arg(long)]
        scene_points: Option<PathBuf>,
        #[arg(long)]
        object: PathBuf,
        /// PosePrior JSON: center, dims, yaw (degrees).
        #[arg(long)]
        prior: PathBuf,
        /// Floor plane JSON; detected from the scene points when absent.
        #[arg(long)]
        floor: Option<PathBuf>,
        /// PhysicsConfig JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        pose_out: PathBuf,
        #[arg(long)]
        fused_out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Surfel PLY + camera → PNG.
    Render {
        #[arg(long)]
        surfels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        /// Background color `r,g,b` in [0, 1].
        #[arg(long, value_parser = parse_triple, default_value = "0,0,0")]
        background: [f64; 3],
    },
    /// Trajectory + features + mask → one conditioning bundle per view.
    Conditioning {
        /// JSON `{"points": [[x, y, z], ...]}`.
        #[arg(long)]
        trajectory: PathBuf,
        /// D4DF feature map of the instance's source frame.
        #[arg(long)]
        features: PathBuf,
        /// PNG instance mask, same size as the features.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Scene surfel PLY; when given each view directory also gets the
        /// rendered view as `view.png`.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = DEFAULT_PARTS)]
        parts: usize,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Ring radius around the trajectory centroid.
        #[arg(long, default_value_t = pipeline::DEFAULT_RING_RADIUS)]
        radius: f64,
        #[arg(long, default_value_t = pipeline::DEFAULT_RENDER_FOV)]
        fov: f64,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Persistence root; file references in requests resolve here.
        #[arg(long, env = "D4D_DATA_DIR")]
        data_dir: Option<PathBuf>,
    },
}

/// Camera selection shared with the service's render query.
#[derive(Debug, Clone, Args)]
pub struct CameraArgs {
    /// Camera JSON file (intrinsics + world-to-camera pose).
    #[arg(long, conflicts_with_all = ["ring", "azimuth", "elevation"])]
    pub camera: Option<PathBuf>,
    /// Index into the default 8-camera ring around `--target`.
    #[arg(long, conflicts_with_all = ["azimuth", "elevation"])]
    pub ring: Option<usize>,
    /// Orbit camera azimuth, degrees.
    #[arg(long)]
    pub azimuth: Option<f64>,
    /// Orbit camera elevation, degrees.
    #[arg(long)]
    pub elevation: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Look-at target `x,y,z`.
    #[arg(long, value_parser = parse_triple)]
    pub target: Option<[f64; 3]>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Vertical field of view, degrees.
    #[arg(long)]
    pub fov: Option<f64>,
}

impl CameraArgs {
    pub fn request(&self) -> Result<CameraRequest> {
        let camera = match &self.camera {
            Some(p) => Some(pipeline::read_json::<Camera>(p)?),
            None => None,
        };
        Ok(CameraRequest {
            camera,
            ring: self.ring,
            azimuth: self.azimuth,
            elevation: self.elevation,
            radius: self.radius,
            target: self.target,
            width: self.width,
            height: self.height,
            fov: self.fov,
        })
    }
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected three comma-separated numbers".to_string())
}

fn read_config<T: Default + for<'de> serde::Deserialize<'de>>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), pipeline::read_json)
}

/// Runs every subcommand except `serve`, which needs an async runtime and
/// is started by the binary.
pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Lift {
            pano,
            depth,
            out,
            normals_k,
        } => {
            let pc = pipeline::lift(pano, depth, *normals_k)?;
            io::save_point_ply(&pc, out).map_err(|e| Failure::input(out.display(), e))?;
            eprintln!("lifted {} points", pc.len());
        }
        Command::Views {
            points,
            out_dir,
            size,
            fov,
            splat_px,
        } => {
            let pc = pipeline::read_points(points)?;
            let m = pipeline::synthesize_views(&pc, *size, *fov, *splat_px, out_dir)?;
            eprintln!("wrote {} base and {} augmented views", m.base.len(), m.aug.len());
        }
        Command::Reconstruct {
            points,
            views,
            out,
            trace,
            config,
            iterations,
        } => {
            let mut cfg: TrainConfig = read_config(config)?;
            if let Some(n) = iterations {
                cfg.iterations = *n;
            }
            let pc = pipeline::read_points(points)?;
            let views = pipeline::load_views(views)?;
            let res = train_scene(&pc, &views, &cfg)?;
            io::save_surfel_ply(&res.cloud, out).map_err(|e| Failure::input(out.display(), e))?;
            pipeline::write_file(trace, trace_csv(&res.trace).as_bytes())?;
        }
        Command::Floor {
            points,
            out,
            angle_tol,
            iterations,
            inlier_eps,
        } => {
            let params = FloorParams {
                angle_tol_deg: *angle_tol,
                iterations: *iterations,
                inlier_eps: *inlier_eps,
                seed,
                ..Default::default()
            };
            let plane = pipeline::floor(&pipeline::read_points(points)?, &params)?;
            pipeline::write_json(out, &plane)?;
        }
        Command::Compose {
            scene,
            scene_points,
            object,
            prior,
            floor,
            config,
            iterations,
            pose_out,
            fused_out,
            trace,
        } => {
            let mut cfg: PhysicsConfig = read_config(config)?;
            if let Some(n) = iterations {
                cfg.iterations = *n;
            }
            let surfels = scene.as_deref().map(pipeline::read_surfels).transpose()?;
            let points = match (scene_points, &surfels) {
                (Some(p), _) => pipeline::read_points(p)?,
                (None, Some(s)) => pipeline::surfel_points(s)?,
                (None, None) => return Err(Failure::Usage("compose needs --scene or --scene-points".into())),
            };
            let floor: FloorPlane = match floor {
                Some(f) => pipeline::read_json(f)?,
                None => pipeline::floor(
                    &points,
                    &FloorParams {
                        seed,
                        ..Default::default()
                    },
                )?,
            };
            let prior: PosePrior = pipeline::read_json(prior)?;
            let object = pipeline::read_object(object)?;
            if let Some(w) = pipeline::contact_scale_warning(&points, &cfg) {
                eprintln!("warning: {w}");
            }
            let out = pipeline::compose(&points, &floor, &object, &prior, &cfg, |_| ControlFlow::Continue(()))?;
            pipeline::write_json(pose_out, &out.report)?;
            if let Some(t) = trace {
                pipeline::write_file(t, pose_trace_csv(&out.trace).as_bytes())?;
            }
            if let Some(f) = fused_out {
                let base = match surfels {
                    Some(s) => s,
                    None => init_surfels(&points, 0)?,
                };
                let fused = pipeline::fuse_placement(&base, &out.placement)?;
                io::save_surfel_ply(&fused, f).map_err(|e| Failure::input(f.display(), e))?;
            }
            eprintln!(
                "pose loss {:.6} -> {:.6}, lowest gap {:.6}",
                out.report.initial_loss, out.report.loss, out.report.lowest_gap
            );
        }
        Command::Render {
            surfels,
            out,
            camera,
            background,
        } => {
            let cam = camera.request()?.resolve()?;
            let cloud = pipeline::read_surfels(surfels)?;
            pipeline::write_file(out, &pipeline::render_png(&cloud, &cam, *background)?)?;
        }
        Command::Conditioning {
            trajectory,
            features,
            mask,
            out_dir,
            scene,
            views,
            parts,
            frames,
            sigma,
            radius,
            fov,
        } => {
            let traj = pipeline::read_json::<pipeline::TrajectoryFile>(trajectory)?.trajectory()?;
            let ring = pipeline::trajectory_ring(&traj, *radius);
            let cfg = BundleConfig {
                parts: *parts,
                sigma: *sigma,
                frames: *frames,
                seed,
            };
            let scene = scene.as_deref().map(pipeline::read_surfels).transpose()?;
            let dirs =
                pipeline::conditioning(&traj, &ring, *fov, features, mask, &cfg, *views, scene.as_ref(), out_dir)?;
            eprintln!("wrote {} bundles", dirs.len());
        }
        Command::Serve { .. } => {
            return Err(Failure::Usage("`serve` is started by the binary entry point".into()));
        }
    }
    Ok(())
}
