//! Camera model and pose perturbation.
//!
//! Cameras use the computer-vision pinhole convention: `rotation` maps world
//! coordinates to camera coordinates, camera `x` points image-right, `y`
//! image-down, `z` along the viewing direction, and a world point `w`
//! projects through `c = R·w + T`. Scenes generated by this crate treat
//! world `-y` as "up" so that level cameras have determinant-+1 rotations.
//!
//! Teacher poses are perturbed into student poses by drawing yaw/pitch
//! angles about the camera's own up/right axes and a radial scaling of the
//! optical center, then rebuilding the translation so the pose stays
//! consistent.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::curriculum::{StudentPool, StudentView};
use crate::error::{Error, Result};

/// Extrinsics and intrinsics of a single view.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    /// World→camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera-frame translation: `c = R·w + T`.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Checks orthonormality (det +1 within 1e-9) and intrinsic sanity.
    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::Config(format!(
                "camera rotation not orthonormal (max |RᵀR - I| = {err:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("camera rotation determinant {det} != 1")));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::Config(format!(
                "degenerate image size {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        Ok(())
    }

    /// Viewing direction (camera +z) expressed in world coordinates.
    pub fn view_dir_world(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::new(0.0, 0.0, 1.0)
    }

    /// Builds a pose at `pos` looking at `target`. `down_hint` is the world
    /// direction that should map to image-down (scenes use `(0, 1, 0)`,
    /// i.e. world "up" is `-y`).
    pub fn look_at(
        pos: Vector3<f64>,
        target: Vector3<f64>,
        down_hint: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - pos).normalize();
        let mut hint = down_hint;
        if hint.cross(&z).norm() < 1e-9 {
            hint = Vector3::new(1.0, 0.0, 0.0);
        }
        let x = hint.cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * pos;
        CameraPose {
            rotation,
            translation,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// Returns the optical center `C = -Rᵀ·T`.
pub fn optical_center(pose: &CameraPose) -> Vector3<f64> {
    -(pose.rotation.transpose() * pose.translation)
}

/// Yaw/pitch/radial spread of the student sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Std-dev of yaw and pitch draws, degrees.
    pub sigma_deg: f64,
    /// Std-dev of the radial factor draw (fraction of ‖C‖).
    pub sigma_r: f64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_deg >= 0.0) {
            return Err(Error::Config(format!("sigma_deg must be >= 0, got {}", self.sigma_deg)));
        }
        if !(0.0..=0.5).contains(&self.sigma_r) {
            return Err(Error::Config(format!("sigma_r must be in [0, 0.5], got {}", self.sigma_r)));
        }
        Ok(())
    }
}

/// One realized draw of the perturbation sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationDraw {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    /// Radial factor, already clamped to [-0.5, 0.5].
    pub eps_r: f64,
}

/// Samples yaw, pitch ~ N(0, sigma_deg²) and ε_r ~ N(0, sigma_r²); the
/// radial draw is clamped to [-0.5, 0.5] to forbid center flips.
pub fn sample_perturbation(spec: &PerturbationSpec, rng: &mut impl Rng) -> PerturbationDraw {
    let mut draw_normal = |sigma: f64| -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
        } else {
            0.0
        }
    };
    let yaw_deg = draw_normal(spec.sigma_deg);
    let pitch_deg = draw_normal(spec.sigma_deg);
    let eps_r = draw_normal(spec.sigma_r).clamp(-0.5, 0.5);
    PerturbationDraw { yaw_deg, pitch_deg, eps_r }
}

/// Rodrigues rotation about a unit axis.
fn axis_angle(axis: Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
    let (s, c) = angle_rad.sin_cos();
    let k = Matrix3::new(
        0.0, -axis.z, axis.y,
        axis.z, 0.0, -axis.x,
        -axis.y, axis.x, 0.0,
    );
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// Applies a realized draw to a pose: R' = R·R_Δ with R_Δ the composition of
/// yaw about the camera's up axis followed by pitch about its right axis
/// (both axes taken from the unperturbed pose, expressed in world
/// coordinates so the product keeps the perturbation view-relative at any
/// global orientation), and C' = C·(1+ε_r), T' = -R'·C'.
pub fn apply_perturbation(pose: &CameraPose, draw: &PerturbationDraw) -> CameraPose {
    if draw.yaw_deg == 0.0 && draw.pitch_deg == 0.0 && draw.eps_r == 0.0 {
        return pose.clone();
    }
    // Camera-local axes in world coordinates. Image y points down, so the
    // camera's "up" is local (0, -1, 0).
    let up_world = pose.rotation.transpose() * Vector3::new(0.0, -1.0, 0.0);
    let right_world = pose.rotation.transpose() * Vector3::new(1.0, 0.0, 0.0);
    let r_yaw = axis_angle(up_world, draw.yaw_deg.to_radians());
    let r_pitch = axis_angle(right_world, draw.pitch_deg.to_radians());
    let r_delta = r_yaw * r_pitch;
    let rotation = orthonormalize(pose.rotation * r_delta);
    let center = optical_center(pose) * (1.0 + draw.eps_r);
    let translation = -rotation * center;
    CameraPose { rotation, translation, ..pose.clone() }
}

/// Re-projects a near-rotation onto SO(3) (Gram-Schmidt on rows). Keeps
/// long chains of perturbations from drifting off the manifold.
fn orthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let r0 = m.row(0).transpose().normalize();
    let mut r1 = m.row(1).transpose();
    r1 -= r0 * r0.dot(&r1);
    let r1 = r1.normalize();
    let r2 = r0.cross(&r1);
    Matrix3::from_rows(&[r0.transpose(), r1.transpose(), r2.transpose()])
}

/// Draws one student pose from a teacher pose.
pub fn perturb_pose(pose: &CameraPose, spec: &PerturbationSpec, rng: &mut impl Rng) -> CameraPose {
    let draw = sample_perturbation(spec, rng);
    apply_perturbation(pose, &draw)
}

/// Builds the full student pool: `per_level_count` perturbed poses for every
/// (teacher, level) pair. Deterministic given the generator state.
pub fn generate_student_pools(
    teachers: &[CameraPose],
    levels: &[f64],
    per_level_count: usize,
    sigma_r: f64,
    rng: &mut impl Rng,
) -> Result<StudentPool> {
    if teachers.is_empty() {
        return Err(Error::EmptyTeachers);
    }
    if levels.is_empty() {
        return Err(Error::EmptyLevels);
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::NonMonotoneLevels(levels.to_vec()));
    }
    if per_level_count < 1 {
        return Err(Error::Config("per_level_count must be >= 1".into()));
    }
    let mut pool = StudentPool::new(levels.to_vec());
    let mut next_id = 0usize;
    for (teacher_id, teacher) in teachers.iter().enumerate() {
        for (level_idx, &sigma) in levels.iter().enumerate() {
            let spec = PerturbationSpec { sigma_deg: sigma, sigma_r };
            spec.validate()?;
            for _ in 0..per_level_count {
                let pose = perturb_pose(teacher, &spec, rng);
                pool.push(StudentView::new(next_id, teacher_id, level_idx, sigma, pose));
                next_id += 1;
            }
        }
    }
    Ok(pool)
}

/// Angle in degrees between the viewing directions of two poses.
pub fn view_angle_deg(a: &CameraPose, b: &CameraPose) -> f64 {
    let cosang = a.view_dir_world().dot(&b.view_dir_world()).clamp(-1.0, 1.0);
    cosang.acos().to_degrees()
}

/// On-disk camera record; field names are part of the dataset format.
#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

/// Writes cameras as a JSON array (row-major rotations, ids = list order).
pub fn save_cameras(path: impl AsRef<Path>, cameras: &[CameraPose]) -> Result<()> {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .enumerate()
        .map(|(id, c)| {
            let mut rotation = [0.0; 9];
            for r in 0..3 {
                for k in 0..3 {
                    rotation[r * 3 + k] = c.rotation[(r, k)];
                }
            }
            CameraRecord {
                id,
                rotation,
                translation: [c.translation.x, c.translation.y, c.translation.z],
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
            }
        })
        .collect();
    let json = serde_json::to_string_pretty(&records)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Reads a camera JSON array; returned list is ordered by record id.
pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraPose>> {
    let text = std::fs::read_to_string(path)?;
    let mut records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    records.sort_by_key(|r| r.id);
    records
        .into_iter()
        .map(|r| {
            let rotation = Matrix3::new(
                r.rotation[0], r.rotation[1], r.rotation[2],
                r.rotation[3], r.rotation[4], r.rotation[5],
                r.rotation[6], r.rotation[7], r.rotation[8],
            );
            let pose = CameraPose {
                rotation,
                translation: Vector3::new(r.translation[0], r.translation[1], r.translation[2]),
                fx: r.fx,
                fy: r.fy,
                cx: r.cx,
                cy: r.cy,
                width: r.width,
                height: r.height,
            };
            pose.validate()?;
            Ok(pose)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_pose() -> CameraPose {
        CameraPose::look_at(
            Vector3::new(2.0, -1.0, -3.0),
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(0.0, 1.0, 0.0),
            60.0,
            60.0,
            64,
            48,
        )
    }

    #[test]
    fn optical_center_identity_rotation() {
        let pose = CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(1.0, 2.0, 3.0),
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        };
        assert_eq!(optical_center(&pose), Vector3::new(-1.0, -2.0, -3.0));
    }

    #[test]
    fn optical_center_z_flip() {
        // 180° about z: x,y negate under Rᵀ, z keeps sign.
        let pose = CameraPose {
            rotation: Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(1.0, 0.0, 0.0),
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        };
        assert_eq!(optical_center(&pose), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn optical_center_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pos = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let target = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if (target - pos).norm() < 1e-3 {
                continue;
            }
            let pose = CameraPose::look_at(pos, target, Vector3::new(0.0, 1.0, 0.0), 50.0, 50.0, 32, 32);
            pose.validate().unwrap();
            let c = optical_center(&pose);
            let residual = pose.rotation * c + pose.translation;
            assert!(residual.norm() < 1e-12, "residual {}", residual.norm());
            assert!((c - pos).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_spec_returns_pose_exactly() {
        let pose = test_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = PerturbationSpec { sigma_deg: 0.0, sigma_r: 0.0 };
        let out = perturb_pose(&pose, &spec, &mut rng);
        assert_eq!(out, pose);
    }

    #[test]
    fn perturbed_pose_stays_valid() {
        let pose = test_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = PerturbationSpec { sigma_deg: 8.0, sigma_r: 0.1 };
        for _ in 0..200 {
            let out = perturb_pose(&pose, &spec, &mut rng);
            out.validate().unwrap();
            let c = optical_center(&out);
            assert!((out.rotation * c + out.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn yaw_draw_std_matches_sigma() {
        let spec = PerturbationSpec { sigma_deg: 5.0, sigma_r: 0.05 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_perturbation(&spec, &mut rng).yaw_deg).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
        let std = var.sqrt();
        assert!((4.8..=5.2).contains(&std), "sample std {std}");
    }

    #[test]
    fn pure_yaw_moves_view_by_drawn_angle() {
        // The yaw/pitch parametrization is view-relative: a pure yaw of θ
        // tilts the viewing direction by exactly θ at any orientation.
        let pose = test_pose();
        let draw = PerturbationDraw { yaw_deg: 7.5, pitch_deg: 0.0, eps_r: 0.0 };
        let out = apply_perturbation(&pose, &draw);
        assert_abs_diff_eq!(view_angle_deg(&pose, &out), 7.5, epsilon = 1e-6);
        let draw = PerturbationDraw { yaw_deg: 0.0, pitch_deg: -4.0, eps_r: 0.0 };
        let out = apply_perturbation(&pose, &draw);
        assert_abs_diff_eq!(view_angle_deg(&pose, &out), 4.0, epsilon = 1e-6);
    }

    #[test]
    fn radial_draw_scales_center() {
        let pose = test_pose();
        let draw = PerturbationDraw { yaw_deg: 0.0, pitch_deg: 0.0, eps_r: 0.25 };
        let out = apply_perturbation(&pose, &draw);
        let c0 = optical_center(&pose);
        let c1 = optical_center(&out);
        assert!((c1 - c0 * 1.25).norm() < 1e-9);
        // Rotation untouched by a pure radial draw.
        assert!((out.rotation - pose.rotation).abs().max() < 1e-12);
    }

    #[test]
    fn mean_view_angle_monotone_in_sigma() {
        let pose = test_pose();
        let mut prev = 0.0;
        for (i, sigma) in [1.0, 3.0, 6.0, 10.0].iter().enumerate() {
            let spec = PerturbationSpec { sigma_deg: *sigma, sigma_r: 0.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let n = 2000;
            let mean: f64 = (0..n)
                .map(|_| view_angle_deg(&pose, &perturb_pose(&pose, &spec, &mut rng)))
                .sum::<f64>()
                / n as f64;
            assert!(mean > prev, "mean angle {mean} at sigma {sigma} not above {prev}");
            prev = mean;
        }
    }

    #[test]
    fn pool_sizes_match_counts() {
        let teachers = vec![test_pose(); 3];
        let levels: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = generate_student_pools(&teachers, &levels, 5, 0.05, &mut rng).unwrap();
        assert_eq!(pool.total_students(), 150);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = generate_student_pools(&teachers[..1], &[2.0, 4.0, 6.0, 8.0, 10.0], 3, 0.05, &mut rng).unwrap();
        assert_eq!(pool.total_students(), 15);
    }

    #[test]
    fn pool_is_deterministic() {
        let teachers = vec![test_pose(); 2];
        let levels = [1.0, 2.0, 3.0];
        let a = generate_student_pools(&teachers, &levels, 4, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_student_pools(&teachers, &levels, 4, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (sa, sb) in a.students().zip(b.students()) {
            assert_eq!(sa.id, sb.id);
            assert_eq!(sa.pose, sb.pose);
        }
    }

    #[test]
    fn pool_input_validation() {
        let levels = [1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            generate_student_pools(&[], &levels, 1, 0.0, &mut rng),
            Err(Error::EmptyTeachers)
        ));
        let teachers = vec![test_pose()];
        assert!(matches!(
            generate_student_pools(&teachers, &[2.0, 2.0], 1, 0.0, &mut rng),
            Err(Error::NonMonotoneLevels(_))
        ));
        assert!(matches!(
            generate_student_pools(&teachers, &[], 1, 0.0, &mut rng),
            Err(Error::EmptyLevels)
        ));
    }

    #[test]
    fn camera_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cameras.json");
        let cams = vec![test_pose(), {
            let mut p = test_pose();
            p.translation.x += 0.5;
            p
        }];
        save_cameras(&path, &cams).unwrap();
        let back = load_cameras(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cams.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }
}
