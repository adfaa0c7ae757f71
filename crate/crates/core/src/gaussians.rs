//! Anisotropic 3D Gaussian primitives and their screen-space projection.
//!
//! Parameters are stored in unconstrained space: per-axis log standard
//! deviations, a quaternion that is normalized on use (and re-normalized
//! after every optimizer step), and an opacity logit. The world covariance
//! is reconstructed as Σ = R_q · diag(exp(2·log_scale)) · R_qᵀ, which is
//! symmetric positive-definite by construction.

use nalgebra::{Matrix2, Matrix3, Matrix2x3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::CameraPose;

/// Diagonal regularization added to projected 2D covariances, in pixels².
/// Keeps footprints well-conditioned when a Gaussian degenerates to
/// sub-pixel size.
pub const COV2D_FLOOR: f64 = 0.3;

/// Camera-space near plane; primitives at or behind it are culled.
pub const NEAR_PLANE: f64 = 0.01;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One Gaussian: position, covariance factors, opacity logit, constant RGB
/// color (the degree-0 band of an SH expansion; higher bands are an
/// extension point, not implemented).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// (w, x, y, z), normalized on use.
    pub rot_quat: Vector4<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn alpha(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rot(self.rot_quat.normalize())
    }

    /// World covariance Σ = R · diag(exp(2s)) · Rᵀ.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation();
        let d = Matrix3::from_diagonal(&Vector3::new(
            (2.0 * self.log_scale.x).exp(),
            (2.0 * self.log_scale.y).exp(),
            (2.0 * self.log_scale.z).exp(),
        ));
        r * d * r.transpose()
    }
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_rot(q: Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z),       2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),       1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),       2.0 * (y * z + w * x),       1.0 - 2.0 * (x * x + y * y),
    )
}

/// Hamilton product of two (w, x, y, z) quaternions.
pub fn quat_mul(a: Vector4<f64>, b: Vector4<f64>) -> Vector4<f64> {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

/// Partial derivatives of `quat_to_rot` with respect to each component of a
/// unit quaternion, in (w, x, y, z) order. Used by the analytic backward
/// pass; the chain to an unnormalized quaternion goes through the
/// normalization projector (I - q̂q̂ᵀ)/‖q‖.
pub fn quat_rot_partials(q: Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(
        0.0, -z, y,
        z, 0.0, -x,
        -y, x, 0.0,
    ) * 2.0;
    let dx = Matrix3::new(
        0.0, y, z,
        y, -2.0 * x, -w,
        z, w, -2.0 * x,
    ) * 2.0;
    let dy = Matrix3::new(
        -2.0 * y, x, w,
        x, 0.0, z,
        -w, z, -2.0 * y,
    ) * 2.0;
    let dz = Matrix3::new(
        -2.0 * z, -w, x,
        w, -2.0 * z, y,
        x, y, 0.0,
    ) * 2.0;
    [dw, dx, dy, dz]
}

/// The scene: an ordered list of primitives plus a generation counter that
/// is bumped on every mutable access, so a backward pass can detect that its
/// matching forward output went stale.
#[derive(Clone, Debug)]
pub struct GaussianCloud {
    primitives: Vec<GaussianPrimitive>,
    generation: u64,
}

impl GaussianCloud {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self { primitives, generation: 0 }
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    /// Mutable access; invalidates any outstanding forward outputs.
    pub fn primitives_mut(&mut self) -> &mut Vec<GaussianPrimitive> {
        self.generation += 1;
        &mut self.primitives
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Writes a versioned JSON checkpoint. `f64` values survive the JSON
    /// round-trip exactly (shortest-representation encoding).
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let doc = CloudCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            primitives: self.primitives.iter().map(PrimitiveRecord::from).collect(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: CloudCheckpoint = serde_json::from_str(&text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("not a cloud checkpoint: format {:?}", doc.format)));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", doc.version)));
        }
        Ok(Self::new(doc.primitives.into_iter().map(PrimitiveRecord::into_primitive).collect()))
    }
}

const CHECKPOINT_FORMAT: &str = "curigs-cloud";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CloudCheckpoint {
    format: String,
    version: u32,
    primitives: Vec<PrimitiveRecord>,
}

#[derive(Serialize, Deserialize)]
struct PrimitiveRecord {
    mu: [f64; 3],
    log_scale: [f64; 3],
    rot_quat: [f64; 4],
    opacity_logit: f64,
    color: [f64; 3],
}

impl From<&GaussianPrimitive> for PrimitiveRecord {
    fn from(g: &GaussianPrimitive) -> Self {
        Self {
            mu: [g.mu.x, g.mu.y, g.mu.z],
            log_scale: [g.log_scale.x, g.log_scale.y, g.log_scale.z],
            rot_quat: [g.rot_quat[0], g.rot_quat[1], g.rot_quat[2], g.rot_quat[3]],
            opacity_logit: g.opacity_logit,
            color: [g.color.x, g.color.y, g.color.z],
        }
    }
}

impl PrimitiveRecord {
    fn into_primitive(self) -> GaussianPrimitive {
        GaussianPrimitive {
            mu: Vector3::from(self.mu),
            log_scale: Vector3::from(self.log_scale),
            rot_quat: Vector4::new(self.rot_quat[0], self.rot_quat[1], self.rot_quat[2], self.rot_quat[3]),
            opacity_logit: self.opacity_logit,
            color: Vector3::from(self.color),
        }
    }
}

/// A Gaussian splatted onto the image plane.
#[derive(Clone, Debug)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// 2×2 symmetric covariance in pixels², floored by [`COV2D_FLOOR`].
    pub cov2d: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    /// Index of the source primitive in its cloud.
    pub index: usize,
}

/// Evaluates the normalized Gaussian density exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ)).
///
/// Errors with [`Error::SingularCovariance`] when the covariance condition
/// number exceeds 1e12; because the eigenvalues of Σ are exp(2·log_scale),
/// the condition number is exp(2·(max−min log-scale)) and the check is an
/// exact log-space comparison.
pub fn density_at(g: &GaussianPrimitive, x: Vector3<f64>) -> Result<f64> {
    let spread = g.log_scale.max() - g.log_scale.min();
    if 2.0 * spread > 1e12f64.ln() {
        return Err(Error::SingularCovariance(spread));
    }
    let r = g.rotation();
    // Σ⁻¹ = R diag(exp(-2s)) Rᵀ applied to the offset.
    let local = r.transpose() * (x - g.mu);
    let m = local.x * local.x * (-2.0 * g.log_scale.x).exp()
        + local.y * local.y * (-2.0 * g.log_scale.y).exp()
        + local.z * local.z * (-2.0 * g.log_scale.z).exp();
    Ok((-0.5 * m).exp())
}

/// Projects a primitive into screen space; `None` means culled by the near
/// plane. `index` is recorded verbatim so rasterization can refer back to
/// the source primitive.
pub fn project(g: &GaussianPrimitive, cam: &CameraPose, index: usize) -> Option<ProjectedGaussian> {
    let t = cam.rotation * g.mu + cam.translation;
    if t.z <= NEAR_PLANE {
        return None;
    }
    let inv_z = 1.0 / t.z;
    let mean2d = Vector2::new(cam.fx * t.x * inv_z + cam.cx, cam.fy * t.y * inv_z + cam.cy);
    let j = Matrix2x3::new(
        cam.fx * inv_z, 0.0, -cam.fx * t.x * inv_z * inv_z,
        0.0, cam.fy * inv_z, -cam.fy * t.y * inv_z * inv_z,
    );
    let m = j * cam.rotation;
    let cov2d = m * g.covariance() * m.transpose() + Matrix2::identity() * COV2D_FLOOR;
    Some(ProjectedGaussian { mean2d, cov2d, depth: t.z, index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_primitive(rng: &mut ChaCha8Rng) -> GaussianPrimitive {
        let q = Vector4::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        GaussianPrimitive {
            mu: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            log_scale: Vector3::new(
                rng.gen_range(-1.5..0.5),
                rng.gen_range(-1.5..0.5),
                rng.gen_range(-1.5..0.5),
            ),
            rot_quat: if q.norm() < 1e-3 { Vector4::new(1.0, 0.0, 0.0, 0.0) } else { q },
            opacity_logit: rng.gen_range(-2.0..2.0),
            color: Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
        }
    }

    fn test_cam() -> CameraPose {
        CameraPose::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            60.0,
            60.0,
            64,
            64,
        )
    }

    #[test]
    fn density_peaks_at_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_primitive(&mut rng);
        assert_abs_diff_eq!(density_at(&g, g.mu).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn density_isotropic_unit_distance() {
        let g = GaussianPrimitive {
            mu: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rot_quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        };
        let v = density_at(&g, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(v, (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn density_matches_linear_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..40 {
            let g = random_primitive(&mut rng);
            let x = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let sigma = g.covariance();
            let d = x - g.mu;
            let y = sigma.lu().solve(&d).expect("covariance is PD");
            let oracle = (-0.5 * d.dot(&y)).exp();
            assert_abs_diff_eq!(density_at(&g, x).unwrap(), oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn density_rejects_singular_covariance() {
        let g = GaussianPrimitive {
            mu: Vector3::zeros(),
            log_scale: Vector3::new(8.0, -8.0, 0.0),
            rot_quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        };
        assert!(matches!(density_at(&g, Vector3::zeros()), Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn density_rotation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = random_primitive(&mut rng);
            let x = g.mu + Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.3);
            // Rotate the whole configuration by a random unit quaternion.
            let qr = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let rot = quat_to_rot(qr);
            let g2 = GaussianPrimitive {
                mu: rot * g.mu,
                rot_quat: quat_mul(qr, g.rot_quat.normalize()),
                ..g.clone()
            };
            let a = density_at(&g, x).unwrap();
            let b = density_at(&g2, rot * x).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn quat_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let q = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let parts = quat_rot_partials(q);
            let h = 1e-6;
            for k in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[k] += h;
                qm[k] -= h;
                // quat_to_rot is polynomial in the raw components, so the FD
                // of the unnormalized map matches the analytic partials.
                let fd = (quat_to_rot(qp) - quat_to_rot(qm)) / (2.0 * h);
                assert!((fd - parts[k]).abs().max() < 1e-8);
            }
        }
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let cam = test_cam();
        let center = crate::geometry::optical_center(&cam);
        let dir = cam.view_dir_world();
        let g = GaussianPrimitive {
            mu: center + dir * 2.5,
            log_scale: Vector3::from_element(-2.0),
            rot_quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        };
        let p = project(&g, &cam, 7).unwrap();
        assert_abs_diff_eq!(p.mean2d.x, cam.cx, epsilon = 1e-9);
        assert_abs_diff_eq!(p.mean2d.y, cam.cy, epsilon = 1e-9);
        assert_abs_diff_eq!(p.depth, 2.5, epsilon = 1e-9);
        assert_eq!(p.index, 7);
    }

    #[test]
    fn project_culls_behind_camera() {
        let cam = test_cam();
        let center = crate::geometry::optical_center(&cam);
        let dir = cam.view_dir_world();
        let g = GaussianPrimitive {
            mu: center - dir * 1.0,
            log_scale: Vector3::from_element(-2.0),
            rot_quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        };
        assert!(project(&g, &cam, 0).is_none());
    }

    #[test]
    fn project_matches_sigma_point_oracle() {
        // Project the ±1σ points of an isotropic Gaussian at the image
        // center through the exact pinhole map; their spread estimates the
        // linearized 2D covariance.
        let cam = test_cam();
        let center = crate::geometry::optical_center(&cam);
        let dir = cam.view_dir_world();
        let g = GaussianPrimitive {
            mu: center + dir * 3.0,
            log_scale: Vector3::from_element((0.02f64).ln()),
            rot_quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        };
        let p = project(&g, &cam, 0).unwrap();
        let analytic = p.cov2d - Matrix2::identity() * COV2D_FLOOR;

        let pin = |w: Vector3<f64>| -> Vector2<f64> {
            let t = cam.rotation * w + cam.translation;
            Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy)
        };
        let a = g.rotation() * Matrix3::from_diagonal(&g.log_scale.map(f64::exp));
        let mut est = Matrix2::zeros();
        for i in 0..3 {
            let col: Vector3<f64> = a.column(i).into();
            let d = (pin(g.mu + col) - pin(g.mu - col)) / 2.0;
            est += d * d.transpose();
        }
        let rel = (analytic - est).norm() / analytic.norm();
        assert!(rel < 0.01, "relative error {rel}");

        // Isotropy at the image center: the two eigenvalues agree within 1%.
        let tr = analytic.trace();
        let det = analytic.determinant();
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
        assert!((l1 - l2).abs() / l1 < 0.01, "eigenvalues {l1} {l2}");
    }

    #[test]
    fn doubling_focal_doubles_centered_mean() {
        let cam = test_cam();
        let mut cam2 = cam.clone();
        cam2.fx *= 2.0;
        cam2.fy *= 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = random_primitive(&mut rng);
            let (Some(p1), Some(p2)) = (project(&g, &cam, 0), project(&g, &cam2, 0)) else {
                continue;
            };
            let c = Vector2::new(cam.cx, cam.cy);
            let d1 = p1.mean2d - c;
            let d2 = p2.mean2d - c;
            assert!((d2 - d1 * 2.0).norm() < 1e-9);
        }
    }

    #[test]
    fn cov2d_respects_floor() {
        let cam = test_cam();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let mut g = random_primitive(&mut rng);
            // Include degenerate, needle-thin primitives.
            g.log_scale = Vector3::new(-12.0, rng.gen_range(-6.0..0.0), -12.0);
            if let Some(p) = project(&g, &cam, 0) {
                let tr = p.cov2d.trace();
                let det = p.cov2d.determinant();
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let lmin = tr / 2.0 - disc;
                assert!(lmin >= COV2D_FLOOR - 1e-9, "min eigenvalue {lmin}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = GaussianCloud::new((0..25).map(|_| random_primitive(&mut rng)).collect());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        cloud.save_json(&path).unwrap();
        let back = GaussianCloud::load_json(&path).unwrap();
        assert_eq!(back.primitives(), cloud.primitives());
    }

    #[test]
    fn generation_bumps_on_mutation() {
        let mut cloud = GaussianCloud::new(vec![]);
        assert_eq!(cloud.generation(), 0);
        cloud.primitives_mut().push(GaussianPrimitive {
            mu: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rot_quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        });
        assert_eq!(cloud.generation(), 1);
        let _ = cloud.primitives();
        assert_eq!(cloud.generation(), 1);
    }
}
