//! Shared helpers for the integration suites: the naive full-sort
//! compositing oracle, random scene/cloud generators, and the central
//! finite-difference machinery used to verify analytic gradients. Each
//! check function covers a single random scene so callers can loop over
//! seeds and report progress however they like.

#![allow(dead_code)]

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use curigs_core::gaussians::{project, sigmoid, GaussianCloud, GaussianPrimitive};
use curigs_core::geometry::CameraPose;
use curigs_core::image::{ImageRgb, ScalarMap};
use curigs_core::rasterizer::{render, RenderGradients};
use curigs_core::training::{loss_recon_grads, loss_student_grads, DepthOracle, LossWeights};

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;
pub const H: f64 = 1e-5;
pub const N_SPLATS: usize = 5;
/// position, log-scale, quaternion, opacity, color.
pub const N_COMPONENTS: usize = 14;

pub const CHANNEL_TOL: f64 = 1e-6;
pub const CONSERVATION_TOL: f64 = 1e-6;
/// Keep the cutoffs in lockstep with the rasterizer's documented behavior.
pub const POWER_CUTOFF: f64 = 24.0;
pub const EARLY_STOP_T: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 0.99;

/// Smooth, nonconstant pseudo-depth independent of the model, so the
/// correlation term is active (never degenerate) and differentiable.
pub struct RampOracle;

impl DepthOracle for RampOracle {
    fn predict(&self, _image: &ImageRgb, pose: &CameraPose) -> ScalarMap {
        let mut d = ScalarMap::zeros(pose.width, pose.height);
        for y in 0..pose.height {
            for x in 0..pose.width {
                let v = 2.5 + 0.4 * (x as f64 * 0.37).sin() + 0.3 * (y as f64 * 0.23).cos();
                d.set(x, y, v);
            }
        }
        d
    }
}

pub fn random_cloud(rng: &mut ChaCha8Rng) -> GaussianCloud {
    let prims = (0..N_SPLATS)
        .map(|_| {
            let q = Vector4::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            GaussianPrimitive {
                mu: Vector3::new(
                    rng.gen_range(-0.9..0.9),
                    rng.gen_range(-0.9..0.9),
                    rng.gen_range(-0.9..0.9),
                ),
                log_scale: Vector3::new(
                    rng.gen_range(-3.0..-1.0),
                    rng.gen_range(-3.0..-1.0),
                    rng.gen_range(-3.0..-1.0),
                ),
                rot_quat: if q.norm() > 1e-3 { q.normalize() } else { Vector4::new(1.0, 0.0, 0.0, 0.0) },
                // Moderate opacities keep the run clear of the α ceiling and
                // the early-termination threshold, where the loss has kinks.
                opacity_logit: rng.gen_range(-2.0..1.2),
                // Headroom below 1.0 even after model B's +0.3 color shift,
                // so the final [0,1] clamp (another kink) never engages.
                color: Vector3::new(
                    rng.gen_range(0.2..0.65),
                    rng.gen_range(0.2..0.65),
                    rng.gen_range(0.2..0.65),
                ),
            }
        })
        .collect();
    GaussianCloud::new(prims)
}

pub fn random_camera(rng: &mut ChaCha8Rng) -> CameraPose {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = rng.gen_range(2.6..3.4);
    let pos = Vector3::new(radius * angle.cos(), rng.gen_range(-0.8..0.8), radius * angle.sin());
    CameraPose::look_at(pos, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), 30.0, 30.0, 24, 24)
}

pub fn perturbed(cloud: &GaussianCloud, i: usize, comp: usize, h: f64) -> GaussianCloud {
    let mut prims = cloud.primitives().to_vec();
    let g = &mut prims[i];
    match comp {
        0..=2 => g.mu[comp] += h,
        3..=5 => g.log_scale[comp - 3] += h,
        6..=9 => g.rot_quat[comp - 6] += h,
        10 => g.opacity_logit += h,
        11..=13 => g.color[comp - 11] += h,
        _ => unreachable!("component out of range"),
    }
    GaussianCloud::new(prims)
}

pub fn analytic_component(g: &RenderGradients, i: usize, comp: usize) -> f64 {
    match comp {
        0..=2 => g.mu[i][comp],
        3..=5 => g.log_scale[i][comp - 3],
        6..=9 => g.rot_quat[i][comp - 6],
        10 => g.opacity_logit[i],
        11..=13 => g.color[i][comp - 11],
        _ => unreachable!("component out of range"),
    }
}

pub fn check_close(analytic: f64, fd: f64, what: &str) {
    let scale = analytic.abs().max(fd.abs());
    let tol = (REL_TOL * scale).max(ABS_FLOOR);
    assert!(
        (analytic - fd).abs() <= tol,
        "{what}: analytic {analytic:.9e} vs finite difference {fd:.9e} (tol {tol:.3e})"
    );
}

/// Verifies every analytic parameter gradient of the reconstruction loss on
/// one random scene against central finite differences. The reference is
/// the base render plus a ±0.25 checkerboard: central differences are only
/// valid away from the L1 kink at render == reference, and the fixed offset
/// keeps every pixel a quarter-unit away from it (perturbations move pixels
/// by ~1e-4 at most) while still alternating the per-pixel L1 sign.
pub fn check_recon_scene(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(&mut rng);
    let cam = random_camera(&mut rng);
    let reference = {
        let mut img = render(&cloud, &cam).color;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let s = if (x + y) % 2 == 0 { 0.25 } else { -0.25 };
                let [r, g, b] = img.get(x, y);
                img.set(x, y, [r + s, g + s, b + s]);
            }
        }
        img
    };
    let lambda_s = 0.2;

    let (_, grads) = loss_recon_grads(&cloud, &cam, &reference, lambda_s, None).unwrap();
    let mut total = 0.0;
    for i in 0..N_SPLATS {
        for comp in 0..N_COMPONENTS {
            let plus = perturbed(&cloud, i, comp, H);
            let minus = perturbed(&cloud, i, comp, -H);
            let (vp, _) = loss_recon_grads(&plus, &cam, &reference, lambda_s, None).unwrap();
            let (vm, _) = loss_recon_grads(&minus, &cam, &reference, lambda_s, None).unwrap();
            let fd = (vp - vm) / (2.0 * H);
            let a = analytic_component(&grads, i, comp);
            total += a.abs();
            check_close(a, fd, &format!("scene {seed} recon splat {i} comp {comp}"));
        }
    }
    assert!(total > 1e-6, "scene {seed}: gradient vanished everywhere");
}

/// Same finite-difference sweep for the two-model consistency loss, for
/// both clouds' parameters. Model B shares A's geometry with colors shifted
/// up by 0.3: the render difference is then 0.3 × accumulated opacity, so
/// it only approaches the L1 kink at grazing pixels, where the local slope
/// vanishes with it — central differences stay valid everywhere.
pub fn check_student_scene(seed: u64) {
    let weights = LossWeights::default();
    let oracle = RampOracle;
    let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
    let cloud_a = random_cloud(&mut rng);
    let cloud_b = {
        let mut prims = cloud_a.primitives().to_vec();
        for p in &mut prims {
            p.color += Vector3::new(0.3, 0.3, 0.3);
        }
        GaussianCloud::new(prims)
    };
    let cam = random_camera(&mut rng);

    let (_, ga, gb, skipped) =
        loss_student_grads(&cloud_a, &cloud_b, &cam, &oracle, &weights).unwrap();
    assert!(!skipped, "scene {seed}: depth term must stay active under the ramp oracle");

    let value = |a: &GaussianCloud, b: &GaussianCloud| -> f64 {
        let (v, _, _, _) = loss_student_grads(a, b, &cam, &oracle, &weights).unwrap();
        v
    };
    let mut total = 0.0;
    for i in 0..N_SPLATS {
        for comp in 0..N_COMPONENTS {
            let fd_a = (value(&perturbed(&cloud_a, i, comp, H), &cloud_b)
                - value(&perturbed(&cloud_a, i, comp, -H), &cloud_b))
                / (2.0 * H);
            let a = analytic_component(&ga, i, comp);
            total += a.abs();
            check_close(a, fd_a, &format!("scene {seed} student model A splat {i} comp {comp}"));

            let fd_b = (value(&cloud_a, &perturbed(&cloud_b, i, comp, H))
                - value(&cloud_a, &perturbed(&cloud_b, i, comp, -H)))
                / (2.0 * H);
            let b = analytic_component(&gb, i, comp);
            total += b.abs();
            check_close(b, fd_b, &format!("scene {seed} student model B splat {i} comp {comp}"));
        }
    }
    assert!(total > 1e-6, "scene {seed}: gradient vanished everywhere");
}

/// Full-sort per-pixel reference renderer: every pixel composites every
/// projected splat in globally depth-sorted order, with no tiles, no
/// bounding boxes, and no shared accumulation state.
pub fn oracle_render(cloud: &GaussianCloud, cam: &CameraPose) -> (ImageRgb, ScalarMap, ScalarMap) {
    let mut projected: Vec<_> = cloud
        .primitives()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, cam, i).map(|p| (p, sigmoid(g.opacity_logit), g.color)))
        .collect();
    projected.sort_by(|a, b| {
        a.0.depth
            .partial_cmp(&b.0.depth)
            .expect("finite depths")
            .then(a.0.index.cmp(&b.0.index))
    });

    let mut color = ImageRgb::zeros(cam.width, cam.height);
    let mut depth = ScalarMap::zeros(cam.width, cam.height);
    let mut trans = ScalarMap::zeros(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            let mut d = 0.0;
            for (p, base_alpha, rgb) in &projected {
                let inv = p.cov2d.try_inverse().expect("floored covariance is invertible");
                let dx = px - p.mean2d.x;
                let dy = py - p.mean2d.y;
                let power =
                    0.5 * (inv[(0, 0)] * dx * dx + inv[(1, 1)] * dy * dy) + inv[(0, 1)] * dx * dy;
                if power > POWER_CUTOFF || power < 0.0 {
                    continue;
                }
                let a = (base_alpha * (-power).exp()).min(ALPHA_MAX);
                c += rgb * (t * a);
                d += p.depth * t * a;
                t *= 1.0 - a;
                if t < EARLY_STOP_T {
                    break;
                }
            }
            color.set(x, y, [c.x.clamp(0.0, 1.0), c.y.clamp(0.0, 1.0), c.z.clamp(0.0, 1.0)]);
            depth.set(x, y, d);
            trans.set(x, y, t);
        }
    }
    (color, depth, trans)
}

/// Random scene exercising tile edges, the opacity ceiling, culled splats,
/// and depth ties. Image sides are drawn from sizes that include values far
/// from tile multiples.
pub fn random_scene(seed: u64) -> (GaussianCloud, CameraPose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [17usize, 23, 32, 41, 48, 64];
    let w = sizes[rng.gen_range(0..sizes.len())];
    let h = sizes[rng.gen_range(0..sizes.len())];
    let n = rng.gen_range(1..=50);

    let mut prims = Vec::with_capacity(n);
    for _ in 0..n {
        let roll: f64 = rng.gen();
        let mu = if roll < 0.08 {
            // Behind or beside the camera: must be culled identically.
            Vector3::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-6.0..0.1))
        } else {
            Vector3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2))
        };
        let log_scale = Vector3::new(
            rng.gen_range(-4.0..-0.5),
            rng.gen_range(-4.0..-0.5),
            rng.gen_range(-4.0..-0.5),
        );
        let rot_quat = loop {
            let q = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() > 1e-3 {
                break q.normalize();
            }
        };
        prims.push(GaussianPrimitive {
            mu,
            log_scale,
            rot_quat,
            // Up to logit 8 so the ALPHA_MAX ceiling actually engages.
            opacity_logit: rng.gen_range(-4.0..8.0),
            color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
        });
    }
    // A coincident pair at equal depth exercises the index tie-break.
    if prims.len() >= 2 {
        let mut dup = prims[0].clone();
        dup.color = Vector3::new(1.0, 0.0, 0.0);
        prims.push(dup);
    }

    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let pos = Vector3::new(3.0 * angle.cos(), rng.gen_range(-1.0..1.0), 3.0 * angle.sin());
    let fx = rng.gen_range(0.8..1.6) * w as f64;
    let cam = CameraPose::look_at(pos, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), fx, fx, w, h);
    (GaussianCloud::new(prims), cam)
}

/// Tiled render vs the full-sort oracle on one random scene: color, depth,
/// and transmittance must agree to 1e-6 everywhere.
pub fn check_oracle_scene(seed: u64) {
    let (cloud, cam) = random_scene(seed);
    let out = render(&cloud, &cam);
    let (oc, od, ot) = oracle_render(&cloud, &cam);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let got = out.color.get(x, y);
            let want = oc.get(x, y);
            for ch in 0..3 {
                assert!(
                    (got[ch] - want[ch]).abs() <= CHANNEL_TOL,
                    "scene {seed}: color mismatch at ({x},{y}) ch{ch}: {} vs {}",
                    got[ch],
                    want[ch]
                );
            }
            assert!(
                (out.depth.get(x, y) - od.get(x, y)).abs() <= CHANNEL_TOL,
                "scene {seed}: depth mismatch at ({x},{y})"
            );
            assert!(
                (out.final_transmittance.get(x, y) - ot.get(x, y)).abs() <= CHANNEL_TOL,
                "scene {seed}: transmittance mismatch at ({x},{y})"
            );
        }
    }
}

/// The telescoping conservation identity Σ Tᵢaᵢ + T_final = 1 must hold at
/// every pixel of one random scene.
pub fn check_conservation_scene(seed: u64) {
    let (cloud, cam) = random_scene(seed);
    let out = render(&cloud, &cam);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let total = out.alpha.get(x, y) + out.final_transmittance.get(x, y);
            assert!(
                (total - 1.0).abs() <= CONSERVATION_TOL,
                "scene {seed}: Σ Tᵢaᵢ + T_final = {total} at ({x},{y})"
            );
        }
    }
}
