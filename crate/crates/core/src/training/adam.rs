//! Bias-corrected adaptive optimizer with per-parameter-group learning
//! rates. Positions decay exponentially from `lr_position` to
//! `lr_position_final` over the run; the other groups use constant rates.
//! Quaternions are renormalized after every step.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::gaussians::GaussianCloud;
use crate::rasterizer::RenderGradients;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr_position: 5e-4,
            lr_position_final: 5e-6,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl AdamParams {
    /// Log-space interpolation of the position rate across the run.
    pub fn position_lr_at(&self, t: u64, total: u64) -> f64 {
        if total == 0 || self.lr_position <= 0.0 || self.lr_position_final <= 0.0 {
            return self.lr_position;
        }
        let frac = (t as f64 / total as f64).clamp(0.0, 1.0);
        self.lr_position * (self.lr_position_final / self.lr_position).powf(frac)
    }
}

#[derive(Clone, Debug, Default)]
struct Moments3 {
    m: Vec<Vector3<f64>>,
    v: Vec<Vector3<f64>>,
}

impl Moments3 {
    fn new(n: usize) -> Self {
        Self { m: vec![Vector3::zeros(); n], v: vec![Vector3::zeros(); n] }
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.m.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        i = 0;
        self.v.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    }

    fn append_zeros(&mut self, k: usize) {
        self.m.extend(std::iter::repeat(Vector3::zeros()).take(k));
        self.v.extend(std::iter::repeat(Vector3::zeros()).take(k));
    }
}

/// Optimizer moments for one cloud, kept index-aligned with its primitives.
#[derive(Clone, Debug)]
pub struct AdamState {
    pos: Moments3,
    scale: Moments3,
    quat_m: Vec<Vector4<f64>>,
    quat_v: Vec<Vector4<f64>>,
    logit_m: Vec<f64>,
    logit_v: Vec<f64>,
    color: Moments3,
    step_count: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            pos: Moments3::new(n),
            scale: Moments3::new(n),
            quat_m: vec![Vector4::zeros(); n],
            quat_v: vec![Vector4::zeros(); n],
            logit_m: vec![0.0; n],
            logit_v: vec![0.0; n],
            color: Moments3::new(n),
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.logit_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logit_m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Drops moment rows of pruned primitives (parallel to the cloud).
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        self.pos.retain(keep);
        self.scale.retain(keep);
        self.color.retain(keep);
        let filter = |v: &mut Vec<Vector4<f64>>| {
            let mut i = 0;
            v.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        };
        filter(&mut self.quat_m);
        filter(&mut self.quat_v);
        let mut i = 0;
        self.logit_m.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        i = 0;
        self.logit_v.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    }

    /// Adds zeroed moment rows for freshly cloned primitives.
    pub fn append_zeros(&mut self, k: usize) {
        self.pos.append_zeros(k);
        self.scale.append_zeros(k);
        self.color.append_zeros(k);
        self.quat_m.extend(std::iter::repeat(Vector4::zeros()).take(k));
        self.quat_v.extend(std::iter::repeat(Vector4::zeros()).take(k));
        self.logit_m.extend(std::iter::repeat(0.0).take(k));
        self.logit_v.extend(std::iter::repeat(0.0).take(k));
    }

    /// One optimizer step over every parameter group. `lr_position` is the
    /// already-scheduled position rate for this iteration.
    pub fn step(
        &mut self,
        cloud: &mut GaussianCloud,
        grads: &RenderGradients,
        params: &AdamParams,
        lr_position: f64,
    ) {
        let n = self.len();
        assert_eq!(grads.len(), n, "gradient length mismatch");
        assert_eq!(cloud.primitives().len(), n, "cloud length mismatch");
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - params.beta1.powi(t as i32);
        let bc2 = 1.0 - params.beta2.powi(t as i32);
        let (b1, b2, eps) = (params.beta1, params.beta2, params.eps);

        let update3 = |m: &mut Vector3<f64>, v: &mut Vector3<f64>, g: &Vector3<f64>, lr: f64, p: &mut Vector3<f64>| {
            for k in 0..3 {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        };

        let prims = cloud.primitives_mut();
        for i in 0..n {
            let prim = &mut prims[i];
            update3(&mut self.pos.m[i], &mut self.pos.v[i], &grads.mu[i], lr_position, &mut prim.mu);
            update3(
                &mut self.scale.m[i],
                &mut self.scale.v[i],
                &grads.log_scale[i],
                params.lr_log_scale,
                &mut prim.log_scale,
            );
            update3(
                &mut self.color.m[i],
                &mut self.color.v[i],
                &grads.color[i],
                params.lr_color,
                &mut prim.color,
            );
            for k in 0..4 {
                let g = grads.rot_quat[i][k];
                self.quat_m[i][k] = b1 * self.quat_m[i][k] + (1.0 - b1) * g;
                self.quat_v[i][k] = b2 * self.quat_v[i][k] + (1.0 - b2) * g * g;
                let mh = self.quat_m[i][k] / bc1;
                let vh = self.quat_v[i][k] / bc2;
                prim.rot_quat[k] -= params.lr_rotation * mh / (vh.sqrt() + eps);
            }
            let norm = prim.rot_quat.norm();
            if norm > 1e-12 {
                prim.rot_quat /= norm;
            } else {
                prim.rot_quat = Vector4::new(1.0, 0.0, 0.0, 0.0);
            }
            {
                let g = grads.opacity_logit[i];
                self.logit_m[i] = b1 * self.logit_m[i] + (1.0 - b1) * g;
                self.logit_v[i] = b2 * self.logit_v[i] + (1.0 - b2) * g * g;
                let mh = self.logit_m[i] / bc1;
                let vh = self.logit_v[i] / bc2;
                prim.opacity_logit -= params.lr_opacity * mh / (vh.sqrt() + eps);
            }
        }
    }
}
