//! Differentiable software rasterizer.
//!
//! Forward pass: every primitive is projected to a screen-space Gaussian,
//! splats are globally sorted by (depth, primitive index) and binned into
//! 16×16 pixel tiles, and each pixel composites its tile's splats
//! front-to-back:
//!
//! ```text
//! aᵢ = min(αᵢ·exp(-½ dᵀ cov2d⁻¹ d), 0.99),   d = p - mean2d
//! C(p) = Σᵢ Tᵢ aᵢ cᵢ,   D(p) = Σᵢ Tᵢ aᵢ zᵢ,   Tᵢ = Π_{j<i} (1 - aⱼ)
//! ```
//!
//! Accumulation stops early once the transmittance drops below 1e-4. The
//! depth map is the alpha-weighted expected camera-space depth without
//! normalization (the form the Pearson depth loss is invariant to), and the
//! color image is clamped to [0,1] per channel at the very end.
//!
//! Backward pass: an analytic reverse sweep over the same per-pixel splat
//! sequences (suffix sums over downstream contributions), chained through
//! the projection Jacobian, the covariance factorization, and the
//! quaternion normalization. Tile results are reduced in fixed tile order
//! so gradients are deterministic regardless of thread count.
//!
//! Splat/tile bounding uses the compositing cutoff itself: pixels with
//! Gaussian exponent above 24 contribute less than exp(-24) ≈ 4e-11 opacity
//! and are skipped, so a bounding radius of √(48·λ_max) pixels loses
//! nothing the per-pixel test would keep. This keeps the tiled renderer
//! equal to a naive full-frame oracle to well below 1e-6.

use nalgebra::{Matrix2, Matrix3, Matrix2x3, Matrix3x2, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussians::{project, GaussianCloud};
use crate::geometry::CameraPose;
use crate::image::{ImageRgb, ScalarMap};

const TILE: usize = 16;
/// Gaussian exponent beyond which a splat's contribution is dropped.
const POWER_CUTOFF: f64 = 24.0;
/// Front-to-back accumulation stops when transmittance falls below this.
const EARLY_STOP_T: f64 = 1e-4;
/// Per-splat opacity ceiling; keeps transmittance (and gradients) nonzero.
const ALPHA_MAX: f64 = 0.99;

/// Forward render products. `alpha` is the accumulated opacity Σ Tᵢaᵢ,
/// recorded independently of `final_transmittance` so the conservation
/// identity Σ Tᵢaᵢ + T_final = 1 is a real cross-check, not a tautology.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: ImageRgb,
    pub depth: ScalarMap,
    pub final_transmittance: ScalarMap,
    pub alpha: ScalarMap,
    generation: u64,
}

impl RenderOutput {
    /// Generation of the cloud this output was rendered from.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Hand-assembled output for loss-function tests that bypass rendering.
    #[cfg(test)]
    pub(crate) fn synthetic_for_tests(color: ImageRgb, depth: ScalarMap) -> Self {
        let (w, h) = (color.width(), color.height());
        RenderOutput {
            color,
            depth,
            final_transmittance: ScalarMap::filled(w, h, 1.0),
            alpha: ScalarMap::filled(w, h, 0.0),
            generation: 0,
        }
    }
}

/// Per-pixel loss gradients flowing into the backward pass.
#[derive(Clone, Debug)]
pub struct UpstreamGradients {
    /// ∂L/∂color, same shape as the rendered image.
    pub color: ImageRgb,
    /// ∂L/∂depth.
    pub depth: ScalarMap,
}

impl UpstreamGradients {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { color: ImageRgb::zeros(width, height), depth: ScalarMap::zeros(width, height) }
    }
}

/// Per-primitive parameter gradients.
#[derive(Clone, Debug)]
pub struct RenderGradients {
    pub mu: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rot_quat: Vec<Vector4<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Screen-space positional gradient per primitive (2-norm of the
    /// accumulated ∂L/∂mean2d); consumed by density control, not by the
    /// optimizer.
    pub mean2d_norm: Vec<f64>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rot_quat: vec![Vector4::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            mean2d_norm: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }

    /// Adds `other` scaled by `s` (gradient accumulation across loss terms).
    pub fn add_scaled(&mut self, other: &RenderGradients, s: f64) {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        for i in 0..self.len() {
            self.mu[i] += other.mu[i] * s;
            self.log_scale[i] += other.log_scale[i] * s;
            self.rot_quat[i] += other.rot_quat[i] * s;
            self.opacity_logit[i] += other.opacity_logit[i] * s;
            self.color[i] += other.color[i] * s;
            self.mean2d_norm[i] += other.mean2d_norm[i] * s.abs();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.mu.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rot_quat.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.color.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A projected splat prepared for compositing.
struct Splat {
    /// Index of the source primitive.
    index: usize,
    mean: Vector2<f64>,
    /// Inverse 2D covariance (A, B, C) with Q = [[A, B], [B, C]].
    conic: (f64, f64, f64),
    alpha: f64,
    color: Vector3<f64>,
    depth: f64,
    /// Inclusive pixel bounding box, clipped to the image.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Projects, culls, bounds and depth-sorts the cloud for one camera.
fn prepare_splats(cloud: &GaussianCloud, cam: &CameraPose) -> Vec<Splat> {
    let (w, h) = (cam.width, cam.height);
    let mut splats: Vec<Splat> = cloud
        .primitives()
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            let p = project(g, cam, index)?;
            let det = p.cov2d.determinant();
            if det <= 0.0 {
                return None; // cannot happen after the floor; defensive
            }
            let inv_det = 1.0 / det;
            let conic = (
                p.cov2d[(1, 1)] * inv_det,
                -p.cov2d[(0, 1)] * inv_det,
                p.cov2d[(0, 0)] * inv_det,
            );
            let tr_half = p.cov2d.trace() / 2.0;
            let lambda_max = tr_half + (tr_half * tr_half - det).max(0.0).sqrt();
            let radius = (2.0 * POWER_CUTOFF * lambda_max).sqrt().ceil() + 1.0;
            let x0 = (p.mean2d.x - radius).floor().max(0.0) as usize;
            let y0 = (p.mean2d.y - radius).floor().max(0.0) as usize;
            if p.mean2d.x + radius < 0.0
                || p.mean2d.y + radius < 0.0
                || x0 >= w
                || y0 >= h
            {
                return None;
            }
            let x1 = ((p.mean2d.x + radius).ceil() as usize).min(w - 1);
            let y1 = ((p.mean2d.y + radius).ceil() as usize).min(h - 1);
            Some(Splat {
                index,
                mean: p.mean2d,
                conic,
                alpha: crate::gaussians::sigmoid(g.opacity_logit),
                color: g.color,
                depth: p.depth,
                x0,
                x1,
                y0,
                y1,
            })
        })
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .expect("depths are finite")
            .then(a.index.cmp(&b.index))
    });
    splats
}

/// Per-tile splat id lists; ids are indices into the sorted splat vector,
/// appended in sorted order so each tile's list is already depth-ordered.
fn tile_lists(splats: &[Splat], w: usize, h: usize) -> (usize, usize, Vec<Vec<u32>>) {
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (sid, s) in splats.iter().enumerate() {
        let tx0 = s.x0 / TILE;
        let tx1 = s.x1 / TILE;
        let ty0 = s.y0 / TILE;
        let ty1 = s.y1 / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(sid as u32);
            }
        }
    }
    (tiles_x, tiles_y, lists)
}

#[inline]
fn gaussian_power(s: &Splat, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - s.mean.x;
    let dy = py - s.mean.y;
    let power = 0.5 * (s.conic.0 * dx * dx + s.conic.2 * dy * dy) + s.conic.1 * dx * dy;
    (power, dx, dy)
}

/// Renders the cloud from `cam`. Pixels covered by no splat keep background
/// color (0,0,0), depth 0 and transmittance 1.
pub fn render(cloud: &GaussianCloud, cam: &CameraPose) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let splats = prepare_splats(cloud, cam);
    let (tiles_x, tiles_y, lists) = tile_lists(&splats, w, h);

    struct TileOut {
        tx: usize,
        ty: usize,
        color: Vec<[f64; 3]>,
        depth: Vec<f64>,
        trans: Vec<f64>,
        alpha: Vec<f64>,
    }

    let tiles: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tidx| {
            let tx = tidx % tiles_x;
            let ty = tidx / tiles_x;
            let px0 = tx * TILE;
            let py0 = ty * TILE;
            let tw = TILE.min(w - px0);
            let th = TILE.min(h - py0);
            let ids = &lists[tidx];
            let mut color = vec![[0.0; 3]; tw * th];
            let mut depth = vec![0.0; tw * th];
            let mut trans = vec![1.0; tw * th];
            let mut alpha = vec![0.0; tw * th];
            for ly in 0..th {
                for lx in 0..tw {
                    let px = (px0 + lx) as f64 + 0.5;
                    let py = (py0 + ly) as f64 + 0.5;
                    let mut t = 1.0;
                    let mut c = Vector3::zeros();
                    let mut d = 0.0;
                    let mut acc = 0.0;
                    for &sid in ids {
                        let s = &splats[sid as usize];
                        let (power, _, _) = gaussian_power(s, px, py);
                        if power > POWER_CUTOFF || power < 0.0 {
                            continue;
                        }
                        let a = (s.alpha * (-power).exp()).min(ALPHA_MAX);
                        let wgt = t * a;
                        c += s.color * wgt;
                        d += s.depth * wgt;
                        acc += wgt;
                        t *= 1.0 - a;
                        if t < EARLY_STOP_T {
                            break;
                        }
                    }
                    let o = ly * tw + lx;
                    color[o] = [c.x, c.y, c.z];
                    depth[o] = d;
                    trans[o] = t;
                    alpha[o] = acc;
                }
            }
            TileOut { tx, ty, color, depth, trans, alpha }
        })
        .collect();

    let mut color = ImageRgb::zeros(w, h);
    let mut depth = ScalarMap::zeros(w, h);
    let mut final_t = ScalarMap::zeros(w, h);
    let mut alpha = ScalarMap::zeros(w, h);
    for tile in tiles {
        let px0 = tile.tx * TILE;
        let py0 = tile.ty * TILE;
        let tw = TILE.min(w - px0);
        let th = TILE.min(h - py0);
        for ly in 0..th {
            for lx in 0..tw {
                let o = ly * tw + lx;
                let (x, y) = (px0 + lx, py0 + ly);
                let [r, g, b] = tile.color[o];
                color.set(x, y, [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]);
                depth.set(x, y, tile.depth[o]);
                final_t.set(x, y, tile.trans[o]);
                alpha.set(x, y, tile.alpha[o]);
            }
        }
    }
    RenderOutput { color, depth, final_transmittance: final_t, alpha, generation: cloud.generation() }
}

/// 2D gradients accumulated per visible splat during the pixel sweep.
#[derive(Clone, Copy)]
struct SplatGrad2d {
    mean: Vector2<f64>,
    conic: (f64, f64, f64),
    alpha: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl SplatGrad2d {
    fn zero() -> Self {
        Self {
            mean: Vector2::zeros(),
            conic: (0.0, 0.0, 0.0),
            alpha: 0.0,
            color: Vector3::zeros(),
            depth: 0.0,
        }
    }
}

/// One composited contribution, recorded during the backward re-render.
struct Contribution {
    local: u32,
    a: f64,
    trans: f64,
    gexp: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Analytic backward pass. `forward` must come from a [`render`] of the
/// same cloud and camera; a cloud mutated since then is rejected with
/// [`Error::StaleForward`].
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &CameraPose,
    upstream: &UpstreamGradients,
    forward: &RenderOutput,
) -> Result<RenderGradients> {
    let (w, h) = (cam.width, cam.height);
    if forward.generation != cloud.generation() {
        return Err(Error::StaleForward { cloud: cloud.generation(), render: forward.generation });
    }
    if upstream.color.width() != w
        || upstream.color.height() != h
        || upstream.depth.width() != w
        || upstream.depth.height() != h
    {
        return Err(Error::ShapeMismatch(format!(
            "upstream {}x{} vs camera {}x{}",
            upstream.color.width(),
            upstream.color.height(),
            w,
            h
        )));
    }

    let splats = prepare_splats(cloud, cam);
    let (tiles_x, tiles_y, lists) = tile_lists(&splats, w, h);

    // Per-tile accumulation into tile-local arrays, then a sequential
    // fixed-order reduction: deterministic under any thread count.
    let tile_grads: Vec<Vec<SplatGrad2d>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tidx| {
            let tx = tidx % tiles_x;
            let ty = tidx / tiles_x;
            let px0 = tx * TILE;
            let py0 = ty * TILE;
            let tw = TILE.min(w - px0);
            let th = TILE.min(h - py0);
            let ids = &lists[tidx];
            let mut grads = vec![SplatGrad2d::zero(); ids.len()];
            let mut contribs: Vec<Contribution> = Vec::with_capacity(ids.len());
            for ly in 0..th {
                for lx in 0..tw {
                    let (x, y) = (px0 + lx, py0 + ly);
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;

                    // Re-run the forward sweep, recording contributions.
                    contribs.clear();
                    let mut t = 1.0;
                    let mut raw = Vector3::zeros();
                    for (local, &sid) in ids.iter().enumerate() {
                        let s = &splats[sid as usize];
                        let (power, dx, dy) = gaussian_power(s, px, py);
                        if power > POWER_CUTOFF || power < 0.0 {
                            continue;
                        }
                        let gexp = (-power).exp();
                        let a_raw = s.alpha * gexp;
                        let clamped = a_raw > ALPHA_MAX;
                        let a = if clamped { ALPHA_MAX } else { a_raw };
                        raw += s.color * (t * a);
                        contribs.push(Contribution { local: local as u32, a, trans: t, gexp, dx, dy, clamped });
                        t *= 1.0 - a;
                        if t < EARLY_STOP_T {
                            break;
                        }
                    }

                    // The final color clamp stops gradients where it is
                    // active (strictly outside [0,1]).
                    let gc_in = upstream.color.get(x, y);
                    let gc = Vector3::new(
                        if (0.0..=1.0).contains(&raw.x) { gc_in[0] } else { 0.0 },
                        if (0.0..=1.0).contains(&raw.y) { gc_in[1] } else { 0.0 },
                        if (0.0..=1.0).contains(&raw.z) { gc_in[2] } else { 0.0 },
                    );
                    let gd = upstream.depth.get(x, y);
                    if gc == Vector3::zeros() && gd == 0.0 {
                        continue;
                    }

                    // Reverse sweep with suffix sums over downstream terms.
                    let mut s_c = Vector3::zeros();
                    let mut s_d = 0.0;
                    for con in contribs.iter().rev() {
                        let s = &splats[ids[con.local as usize] as usize];
                        let one_minus = 1.0 - con.a;
                        let w_i = gc.dot(&(s.color * con.trans - s_c / one_minus))
                            + gd * (s.depth * con.trans - s_d / one_minus);
                        let g = &mut grads[con.local as usize];
                        let ta = con.trans * con.a;
                        g.color += gc * ta;
                        g.depth += gd * ta;
                        if !con.clamped {
                            g.alpha += w_i * con.gexp;
                            // d(power)/d(dx,dy) through the conic.
                            let dl_dpower = -w_i * con.a;
                            let qx = s.conic.0 * con.dx + s.conic.1 * con.dy;
                            let qy = s.conic.1 * con.dx + s.conic.2 * con.dy;
                            g.mean.x += -dl_dpower * qx;
                            g.mean.y += -dl_dpower * qy;
                            g.conic.0 += dl_dpower * 0.5 * con.dx * con.dx;
                            g.conic.1 += dl_dpower * con.dx * con.dy;
                            g.conic.2 += dl_dpower * 0.5 * con.dy * con.dy;
                        }
                        s_c += s.color * ta;
                        s_d += s.depth * ta;
                    }
                }
            }
            grads
        })
        .collect();

    // Fixed-order reduction over tiles.
    let mut total = vec![SplatGrad2d::zero(); splats.len()];
    for (tidx, grads) in tile_grads.iter().enumerate() {
        for (local, g) in grads.iter().enumerate() {
            let sid = lists[tidx][local] as usize;
            let t = &mut total[sid];
            t.mean += g.mean;
            t.conic.0 += g.conic.0;
            t.conic.1 += g.conic.1;
            t.conic.2 += g.conic.2;
            t.alpha += g.alpha;
            t.color += g.color;
            t.depth += g.depth;
        }
    }

    // Chain 2D gradients back to primitive parameters.
    let mut out = RenderGradients::zeros(cloud.len());
    let param_grads: Vec<(usize, Vector3<f64>, Vector3<f64>, Vector4<f64>, f64, Vector3<f64>, f64)> = splats
        .par_iter()
        .zip(total.par_iter())
        .map(|(s, g2)| {
            let g = &cloud.primitives()[s.index];
            let (mu_g, ls_g, q_g, logit_g) = chain_to_parameters(g, cam, s, g2);
            (s.index, mu_g, ls_g, q_g, logit_g, g2.color, g2.mean.norm())
        })
        .collect();
    for (index, mu_g, ls_g, q_g, logit_g, color_g, mean_norm) in param_grads {
        out.mu[index] = mu_g;
        out.log_scale[index] = ls_g;
        out.rot_quat[index] = q_g;
        out.opacity_logit[index] = logit_g;
        out.color[index] = color_g;
        out.mean2d_norm[index] = mean_norm;
    }
    Ok(out)
}

/// Chains (∂L/∂mean2d, ∂L/∂conic, ∂L/∂a, ∂L/∂z) of one splat through
/// projection and the covariance factorization to parameter gradients.
fn chain_to_parameters(
    g: &crate::gaussians::GaussianPrimitive,
    cam: &CameraPose,
    s: &Splat,
    g2: &SplatGrad2d,
) -> (Vector3<f64>, Vector3<f64>, Vector4<f64>, f64) {
    let t = cam.rotation * g.mu + cam.translation;
    let inv_z = 1.0 / t.z;
    let j = Matrix2x3::new(
        cam.fx * inv_z, 0.0, -cam.fx * t.x * inv_z * inv_z,
        0.0, cam.fy * inv_z, -cam.fy * t.y * inv_z * inv_z,
    );
    let m = j * cam.rotation;
    let sigma3 = g.covariance();

    // ∂L/∂V from ∂L/∂conic: Q = V⁻¹ ⇒ ∂L/∂V = -Q·M_Q·Q, with the
    // off-diagonal split since the conic was parametrized as (A, B, C).
    let q = Matrix2::new(s.conic.0, s.conic.1, s.conic.1, s.conic.2);
    let m_q = Matrix2::new(g2.conic.0, g2.conic.1 / 2.0, g2.conic.1 / 2.0, g2.conic.2);
    let m_v = -q * m_q * q;

    // Mean path: ∂L/∂t += Jᵀ·∂L/∂mean2d.
    let mut dt = j.transpose() * g2.mean;

    // Covariance path through the t-dependence of J.
    let sigma_cam = cam.rotation * sigma3 * cam.rotation.transpose();
    let dj: Matrix2x3<f64> = (m_v * j * sigma_cam) * 2.0;
    let fz2 = inv_z * inv_z;
    dt.x += dj[(0, 2)] * (-cam.fx * fz2);
    dt.y += dj[(1, 2)] * (-cam.fy * fz2);
    dt.z += dj[(0, 0)] * (-cam.fx * fz2)
        + dj[(1, 1)] * (-cam.fy * fz2)
        + dj[(0, 2)] * (2.0 * cam.fx * t.x * inv_z * fz2)
        + dj[(1, 2)] * (2.0 * cam.fy * t.y * inv_z * fz2);

    // Depth-map path: D accumulates camera-space z directly.
    dt.z += g2.depth;

    let mu_g = cam.rotation.transpose() * dt;

    // ∂L/∂Σ = Mᵀ·M_V·M (3×3 symmetric).
    let g3: Matrix3<f64> = {
        let mt: Matrix3x2<f64> = m.transpose();
        mt * m_v * m
    };

    // Σ = R_q·diag(e^{2s})·R_qᵀ.
    let q_hat = g.rot_quat.normalize();
    let r_q = crate::gaussians::quat_to_rot(q_hat);
    let e2s = Vector3::new(
        (2.0 * g.log_scale.x).exp(),
        (2.0 * g.log_scale.y).exp(),
        (2.0 * g.log_scale.z).exp(),
    );
    let d_diag = Matrix3::from_diagonal(&e2s);

    let dd = r_q.transpose() * g3 * r_q;
    let ls_g = Vector3::new(
        dd[(0, 0)] * 2.0 * e2s.x,
        dd[(1, 1)] * 2.0 * e2s.y,
        dd[(2, 2)] * 2.0 * e2s.z,
    );

    let dr = (g3 * r_q * d_diag) * 2.0;
    let partials = crate::gaussians::quat_rot_partials(q_hat);
    let mut dq_hat = Vector4::zeros();
    for k in 0..4 {
        dq_hat[k] = dr.component_mul(&partials[k]).sum();
    }
    // Through normalization: ∂L/∂q = (I - q̂q̂ᵀ)·∂L/∂q̂ / ‖q‖.
    let qnorm = g.rot_quat.norm();
    let q_g = (dq_hat - q_hat * q_hat.dot(&dq_hat)) / qnorm;

    let alpha = s.alpha;
    let logit_g = g2.alpha * alpha * (1.0 - alpha);

    (mu_g, ls_g, q_g, logit_g)
}
