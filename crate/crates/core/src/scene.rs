//! Synthetic scenes with oracle ground truth: a generating Gaussian cloud,
//! a camera rig, and self-rendered reference images, depth maps, and
//! foreground masks. Because the references are produced by this crate's
//! own renderer, the global optimum of any training run on them is known
//! (the generating cloud itself), which makes convergence assertions exact.
//!
//! Also provides the dataset directory format (`cameras.json`,
//! `images/*.png`, `images_pfm/*.pfm`, `depths/*.pfm`, `masks/*.png`,
//! `split.json`, `cloud_gt.json`) and the ground-truth depth oracle used as
//! a stand-in for a monocular depth network.

use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{inverse_sigmoid, GaussianCloud, GaussianPrimitive};
use crate::geometry::{load_cameras, optical_center, save_cameras, CameraPose};
use crate::image::{ImageRgb, Mask, ScalarMap};
use crate::rasterizer::render;
use crate::training::DepthOracle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Loose blob cluster in a box; forward-facing arc rig.
    Cluster,
    /// Bounded multi-blob object; ring rig orbiting it.
    Object,
    /// Box interior with walls and furniture blobs; interior arc rig.
    Room,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rig {
    Ring,
    Arc,
}

impl Layout {
    pub fn default_rig(self) -> Rig {
        match self {
            Layout::Object => Rig::Ring,
            Layout::Cluster | Layout::Room => Rig::Arc,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_gaussians: usize,
    pub layout: Layout,
    pub n_cameras: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians < 1 {
            return Err(Error::Config("n_gaussians must be >= 1".into()));
        }
        if self.n_cameras < 2 {
            return Err(Error::Config("n_cameras must be >= 2".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::TooSmall { width: self.width, height: self.height });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// A fully materialized synthetic scene (references kept in f64).
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub cloud_gt: GaussianCloud,
    pub cameras: Vec<CameraPose>,
    pub images: Vec<ImageRgb>,
    pub depths: Vec<ScalarMap>,
    pub masks: Vec<Mask>,
    pub split: SplitIds,
}

/// The trainer-facing view of a dataset (synthetic or loaded from disk).
#[derive(Clone, Debug)]
pub struct TrainData {
    pub cameras: Vec<CameraPose>,
    pub images: Vec<ImageRgb>,
    pub depths: Vec<ScalarMap>,
    pub masks: Vec<Mask>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if n == 0 {
            return Err(Error::Config("dataset has no cameras".into()));
        }
        if self.images.len() != n || self.depths.len() != n || self.masks.len() != n {
            return Err(Error::ShapeMismatch("per-view arrays differ in length".into()));
        }
        if self.train_ids.is_empty() {
            return Err(Error::Config("train split is empty".into()));
        }
        for &id in self.train_ids.iter().chain(&self.test_ids) {
            if id >= n {
                return Err(Error::Config(format!("split id {id} out of range (n = {n})")));
            }
        }
        if self.train_ids.iter().any(|id| self.test_ids.contains(id)) {
            return Err(Error::Config("train and test splits overlap".into()));
        }
        for (cam, img) in self.cameras.iter().zip(&self.images) {
            cam.validate()?;
            if img.width() != cam.width || img.height() != cam.height {
                return Err(Error::ShapeMismatch("image does not match camera dimensions".into()));
            }
        }
        Ok(())
    }
}

impl SyntheticScene {
    pub fn to_train_data(&self) -> TrainData {
        TrainData {
            cameras: self.cameras.clone(),
            images: self.images.clone(),
            depths: self.depths.clone(),
            masks: self.masks.clone(),
            train_ids: self.split.train.clone(),
            test_ids: self.split.test.clone(),
        }
    }
}

fn unit_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

fn random_quat(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::new(unit_normal(rng), unit_normal(rng), unit_normal(rng), unit_normal(rng));
        let n = q.norm();
        if n > 1e-6 {
            return q / n;
        }
    }
}

fn clamp_color(v: f64) -> f64 {
    v.clamp(0.05, 0.95)
}

fn object_cloud(n: usize, rng: &mut ChaCha8Rng) -> GaussianCloud {
    // A handful of blobs with distinct tints, bounded by radius ~0.9.
    let n_blobs = 4;
    let centers: Vec<Vector3<f64>> = (0..n_blobs)
        .map(|_| Vector3::new(unit_normal(rng), unit_normal(rng), unit_normal(rng)) * 0.3)
        .collect();
    let tints: Vec<[f64; 3]> = (0..n_blobs)
        .map(|_| [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)])
        .collect();
    let primitives = (0..n)
        .map(|i| {
            let b = i % n_blobs;
            let mut mu = centers[b]
                + Vector3::new(unit_normal(rng), unit_normal(rng), unit_normal(rng)) * 0.22;
            let r = mu.norm();
            if r > 0.9 {
                mu *= 0.9 / r;
            }
            let base: f64 = rng.gen_range(0.035..0.09);
            let log_scale = Vector3::new(
                (base * rng.gen_range(0.7..1.4)).ln(),
                (base * rng.gen_range(0.7..1.4)).ln(),
                (base * rng.gen_range(0.7..1.4)).ln(),
            );
            GaussianPrimitive {
                mu,
                log_scale,
                rot_quat: random_quat(rng),
                opacity_logit: inverse_sigmoid(rng.gen_range(0.55..0.95)),
                color: Vector3::new(
                    clamp_color(tints[b][0] + 0.18 * unit_normal(rng)),
                    clamp_color(tints[b][1] + 0.18 * unit_normal(rng)),
                    clamp_color(tints[b][2] + 0.18 * unit_normal(rng)),
                ),
            }
        })
        .collect();
    GaussianCloud::new(primitives)
}

fn cluster_cloud(n: usize, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let primitives = (0..n)
        .map(|_| {
            let mu = Vector3::new(
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            );
            let base: f64 = rng.gen_range(0.05..0.14);
            GaussianPrimitive {
                mu,
                log_scale: Vector3::new(
                    (base * rng.gen_range(0.7..1.4)).ln(),
                    (base * rng.gen_range(0.7..1.4)).ln(),
                    (base * rng.gen_range(0.7..1.4)).ln(),
                ),
                rot_quat: random_quat(rng),
                opacity_logit: inverse_sigmoid(rng.gen_range(0.4..0.9)),
                color: Vector3::new(
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                ),
            }
        })
        .collect();
    GaussianCloud::new(primitives)
}

fn room_cloud(n: usize, rng: &mut ChaCha8Rng) -> GaussianCloud {
    // Five inner faces of a box (the face behind the rig is open), plus two
    // furniture blobs. Walls are axis-aligned pancakes: identity rotation
    // with a thin scale along the face normal.
    let half = 1.8;
    let wall_tints: [[f64; 3]; 5] = [
        [0.75, 0.45, 0.40],
        [0.40, 0.70, 0.45],
        [0.45, 0.45, 0.75],
        [0.70, 0.70, 0.45],
        [0.60, 0.60, 0.65],
    ];
    let blob_centers = [Vector3::new(-0.7, 1.2, 0.4), Vector3::new(0.8, 1.1, -0.2)];
    let n_wall = (n * 7) / 10;
    let primitives = (0..n)
        .map(|i| {
            if i < n_wall {
                // Faces: +x, −x, +y (floor; world up is −y), −y (ceiling), +z.
                let face = i % 5;
                let (u, v) = (rng.gen_range(-half..half), rng.gen_range(-half..half));
                let (mu, normal_axis) = match face {
                    0 => (Vector3::new(half, u, v), 0),
                    1 => (Vector3::new(-half, u, v), 0),
                    2 => (Vector3::new(u, half, v), 1),
                    3 => (Vector3::new(u, -half, v), 1),
                    _ => (Vector3::new(u, v, half), 2),
                };
                let mut log_scale = Vector3::from_element((0.22 * rng.gen_range(0.8..1.3f64)).ln());
                log_scale[normal_axis] = (0.015f64).ln();
                let tint = wall_tints[face];
                GaussianPrimitive {
                    mu,
                    log_scale,
                    rot_quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
                    opacity_logit: inverse_sigmoid(rng.gen_range(0.7..0.95)),
                    color: Vector3::new(
                        clamp_color(tint[0] + 0.1 * unit_normal(rng)),
                        clamp_color(tint[1] + 0.1 * unit_normal(rng)),
                        clamp_color(tint[2] + 0.1 * unit_normal(rng)),
                    ),
                }
            } else {
                let c = blob_centers[i % blob_centers.len()];
                let mu = c + Vector3::new(unit_normal(rng), unit_normal(rng), unit_normal(rng)) * 0.25;
                let base: f64 = rng.gen_range(0.04..0.1);
                GaussianPrimitive {
                    mu,
                    log_scale: Vector3::from_element(base.ln()),
                    rot_quat: random_quat(rng),
                    opacity_logit: inverse_sigmoid(rng.gen_range(0.6..0.95)),
                    color: Vector3::new(
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                    ),
                }
            }
        })
        .collect();
    GaussianCloud::new(primitives)
}

fn rig_poses(layout: Layout, rig: Rig, n: usize, width: usize, height: usize) -> Vec<CameraPose> {
    let fx = 1.15 * width as f64;
    let fy = fx;
    let down = Vector3::new(0.0, 1.0, 0.0);
    (0..n)
        .map(|i| match rig {
            Rig::Ring => {
                let theta = std::f64::consts::TAU * i as f64 / n as f64;
                let pos = Vector3::new(3.0 * theta.cos(), -0.8, 3.0 * theta.sin());
                CameraPose::look_at(pos, Vector3::zeros(), down, fx, fy, width, height)
            }
            Rig::Arc => {
                let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                let phi = (s - 0.5) * 50f64.to_radians();
                let (radius, target, y) = match layout {
                    Layout::Room => (1.4, Vector3::new(0.0, 0.2, 0.6), -0.2 + 0.15 * (3.0 * s).sin()),
                    _ => (3.5, Vector3::zeros(), -0.3 + 0.25 * (3.0 * s).sin()),
                };
                let pos = Vector3::new(radius * phi.sin(), y, -radius * phi.cos());
                CameraPose::look_at(pos, target, down, fx, fy, width, height)
            }
        })
        .collect()
}

/// Builds a deterministic synthetic scene: cloud, rig, rendered references,
/// depth maps, foreground masks (final transmittance < 0.5), and an
/// every-8th-view-held-out split.
pub fn make_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    make_scene_with_rig(spec, spec.layout.default_rig())
}

/// [`make_scene`] with an explicit rig override.
pub fn make_scene_with_rig(spec: &SceneSpec, rig: Rig) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cloud_gt = match spec.layout {
        Layout::Object => object_cloud(spec.n_gaussians, &mut rng),
        Layout::Cluster => cluster_cloud(spec.n_gaussians, &mut rng),
        Layout::Room => room_cloud(spec.n_gaussians, &mut rng),
    };
    let cameras = rig_poses(spec.layout, rig, spec.n_cameras, spec.width, spec.height);
    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    let mut masks = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let out = render(&cloud_gt, cam);
        masks.push(Mask::from_fn(cam.width, cam.height, |x, y| {
            out.final_transmittance.get(x, y) < 0.5
        }));
        depths.push(out.depth);
        images.push(out.color);
    }
    let test: Vec<usize> = (0..spec.n_cameras).filter(|i| i % 8 == 0).collect();
    let train: Vec<usize> = (0..spec.n_cameras).filter(|i| i % 8 != 0).collect();
    Ok(SyntheticScene { cloud_gt, cameras, images, depths, masks, split: SplitIds { train, test } })
}

fn view_name(i: usize) -> String {
    format!("cam_{i:03}")
}

/// Writes the dataset directory. PNG images are 8-bit previews; the PFM
/// copies under `images_pfm/` hold the exact float references and take
/// precedence when loading.
pub fn save_dataset(dir: impl AsRef<Path>, scene: &SyntheticScene) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("images_pfm"))?;
    std::fs::create_dir_all(dir.join("depths"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    save_cameras(dir.join("cameras.json"), &scene.cameras)?;
    for (i, ((img, depth), mask)) in scene.images.iter().zip(&scene.depths).zip(&scene.masks).enumerate() {
        img.save_png(dir.join("images").join(format!("{}.png", view_name(i))))?;
        img.save_pfm(dir.join("images_pfm").join(format!("{}.pfm", view_name(i))))?;
        depth.save_pfm(dir.join("depths").join(format!("{}.pfm", view_name(i))))?;
        mask.save_png(dir.join("masks").join(format!("{}.png", view_name(i))))?;
    }
    std::fs::write(dir.join("split.json"), serde_json::to_string_pretty(&scene.split)?)?;
    scene.cloud_gt.save_json(dir.join("cloud_gt.json"))?;
    Ok(())
}

/// Loads a dataset directory into trainer form. Float PFM references are
/// preferred over the 8-bit PNGs; masks default to all-foreground when the
/// `masks/` directory is absent.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TrainData> {
    let dir = dir.as_ref();
    let cameras = load_cameras(dir.join("cameras.json"))?;
    let split: SplitIds = serde_json::from_str(&std::fs::read_to_string(dir.join("split.json"))?)?;
    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    let mut masks = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let pfm = dir.join("images_pfm").join(format!("{}.pfm", view_name(i)));
        let img = if pfm.exists() {
            ImageRgb::load_pfm(&pfm)?
        } else {
            ImageRgb::load_png(dir.join("images").join(format!("{}.png", view_name(i))))?
        };
        images.push(img);
        depths.push(ScalarMap::load_pfm(dir.join("depths").join(format!("{}.pfm", view_name(i))))?);
        let mask_path = dir.join("masks").join(format!("{}.png", view_name(i)));
        masks.push(if mask_path.exists() {
            Mask::load_png(&mask_path)?
        } else {
            Mask::filled(cam.width, cam.height, true)
        });
    }
    let data = TrainData { cameras, images, depths, masks, train_ids: split.train, test_ids: split.test };
    data.validate()?;
    Ok(data)
}

/// Ground-truth depth oracle: answers with the stored depth map of the
/// nearest dataset camera (by optical center), optionally warped by a
/// monotone disparity-domain gamma (`d → d^γ`) to emulate the scale/shift
/// ambiguity of a monocular depth network.
pub struct GtDepthOracle {
    cameras: Vec<CameraPose>,
    depths: Vec<ScalarMap>,
    gamma: Option<f64>,
}

impl GtDepthOracle {
    pub fn new(cameras: Vec<CameraPose>, depths: Vec<ScalarMap>, gamma: Option<f64>) -> Self {
        assert_eq!(cameras.len(), depths.len());
        assert!(!cameras.is_empty(), "oracle needs at least one camera");
        Self { cameras, depths, gamma }
    }

    /// Oracle over the train-split subset of a dataset (held-out depth maps
    /// must stay unseen).
    pub fn from_data(data: &TrainData, train_ids: &[usize], gamma: Option<f64>) -> Self {
        let cameras: Vec<CameraPose> = train_ids.iter().map(|&i| data.cameras[i].clone()).collect();
        let depths: Vec<ScalarMap> = train_ids.iter().map(|&i| data.depths[i].clone()).collect();
        Self::new(cameras, depths, gamma)
    }
}

impl DepthOracle for GtDepthOracle {
    fn predict(&self, _image: &ImageRgb, pose: &CameraPose) -> ScalarMap {
        let query = optical_center(pose);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, cam) in self.cameras.iter().enumerate() {
            let d = (optical_center(cam) - query).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let depth = &self.depths[best];
        match self.gamma {
            None => depth.clone(),
            Some(g) => depth.map(|d| if d > 0.0 { d.powf(g) } else { 0.0 }),
        }
    }
}

/// Oracle over a synthetic scene's train split.
pub fn gt_depth_oracle(scene: &SyntheticScene, gamma: Option<f64>) -> GtDepthOracle {
    let cameras: Vec<CameraPose> = scene.split.train.iter().map(|&i| scene.cameras[i].clone()).collect();
    let depths: Vec<ScalarMap> = scene.split.train.iter().map(|&i| scene.depths[i].clone()).collect();
    GtDepthOracle::new(cameras, depths, gamma)
}
