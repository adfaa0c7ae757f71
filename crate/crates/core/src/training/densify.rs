//! Simplified density control: prune near-transparent primitives and clone
//! primitives under persistent screen-space gradient pressure, up to a hard
//! cap. Clones copy all parameters and jitter the position by a fraction of
//! the primitive's own scale; their optimizer moments start at zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::gaussians::GaussianCloud;
use crate::rasterizer::RenderGradients;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Apply density control every this many iterations (0 disables).
    pub interval: u64,
    pub start_iter: u64,
    pub end_iter: u64,
    /// Clone when the mean accumulated 2D positional gradient norm exceeds this.
    pub grad_threshold: f64,
    /// Prune primitives whose opacity falls below this.
    pub prune_alpha: f64,
    /// Clone jitter, as a fraction of the primitive's mean scale.
    pub jitter_scale: f64,
    pub max_primitives: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 200,
            start_iter: 200,
            end_iter: 2400,
            grad_threshold: 2e-4,
            prune_alpha: 0.005,
            jitter_scale: 0.5,
            max_primitives: 20_000,
        }
    }
}

/// Accumulated screen-space gradient statistics between density steps.
#[derive(Clone, Debug)]
pub struct DensifyStats {
    sum: Vec<f64>,
    count: Vec<u64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    /// Folds one backward pass in; only primitives that actually
    /// contributed (nonzero norm) are counted.
    pub fn accumulate(&mut self, grads: &RenderGradients) {
        assert_eq!(grads.len(), self.len());
        for i in 0..self.len() {
            let g = grads.mean2d_norm[i];
            if g > 0.0 {
                self.sum[i] += g;
                self.count[i] += 1;
            }
        }
    }

    /// Mean accumulated gradient norm, 0 for never-seen primitives.
    pub fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Applies prune-then-clone density control in place. Returns
/// `(pruned, cloned)`. Survivors keep their optimizer moments; clones are
/// appended in original-index order with zeroed moments.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    adam: &mut AdamState,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
) -> (usize, usize) {
    let n = cloud.primitives().len();
    assert_eq!(stats.len(), n);
    assert_eq!(adam.len(), n);

    let keep: Vec<bool> = cloud.primitives().iter().map(|p| p.alpha() >= cfg.prune_alpha).collect();
    let clone_flags: Vec<bool> = (0..n)
        .map(|i| keep[i] && stats.average(i) > cfg.grad_threshold)
        .collect();

    let pruned = keep.iter().filter(|&&k| !k).count();
    let mut clones = Vec::new();
    {
        let prims = cloud.primitives_mut();
        let mut survivors = Vec::with_capacity(n - pruned);
        for (i, p) in prims.drain(..).enumerate() {
            if keep[i] {
                if clone_flags[i] && survivors.len() + clones.len() < cfg.max_primitives {
                    let mut c = p.clone();
                    let scale = (p.log_scale.iter().sum::<f64>() / 3.0).exp();
                    for k in 0..3 {
                        c.mu[k] += cfg.jitter_scale * scale * normal(rng);
                    }
                    clones.push(c);
                }
                survivors.push(p);
            }
        }
        let cap_room = cfg.max_primitives.saturating_sub(survivors.len());
        clones.truncate(cap_room);
        survivors.extend(clones.iter().cloned());
        *prims = survivors;
    }
    adam.retain(&keep);
    adam.append_zeros(clones.len());
    (pruned, clones.len())
}

fn normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}
