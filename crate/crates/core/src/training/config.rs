//! Run configuration: loss weights, curriculum parameters, optimizer and
//! density-control settings, initialization, and oracle selection. Loadable
//! from TOML or JSON; every field has a default so partial files work.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamParams;
use super::densify::DensifyConfig;
use crate::curriculum::ScheduleParams;
use crate::error::{Error, Result};
use crate::metrics::{MetricWeights, NR_DEFAULT_V0, NR_DEFAULT_W};
use crate::scene::TrainData;

/// Mixing weights of the objective
/// `λ1·L_train + λ2·L_gt + λ3·L_stu`, with `λ_s` the D-SSIM share inside
/// the hybrid photometric loss and `λ_d`/`λ_p` the student-loss mix.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.2,
            lambda_d: 0.05,
            lambda_p: 1.0,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_s, self.lambda_d, self.lambda_p, self.lambda_1, self.lambda_2, self.lambda_3];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if self.lambda_s > 1.0 {
            return Err(Error::Config(format!("lambda_s must lie in [0,1], got {}", self.lambda_s)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Noisy depth-backprojected point samples (an SfM stand-in).
    Points,
    /// Uniform random primitives in the samples' bounding box.
    Random,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub mode: InitMode,
    pub n_primitives: usize,
    pub noise_sigma: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { mode: InitMode::Points, n_primitives: 1200, noise_sigma: 0.02 }
    }
}

/// Curriculum hyperparameters in config form; `t_s: None` divides the
/// window evenly over the level count.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub k: f64,
    pub t_s: Option<u64>,
    pub start_iter: u64,
    pub end_iter: u64,
    pub per_level_count: usize,
    /// Radial camera-center perturbation spread.
    pub sigma_r: f64,
    pub promotion_threshold: f64,
    /// τ of background-mask propagation onto promoted views.
    pub mask_tau: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1.0,
            sigma_max: 8.0,
            k: 1.0,
            t_s: None,
            start_iter: 300,
            end_iter: 2400,
            per_level_count: 4,
            sigma_r: 0.05,
            promotion_threshold: 0.4,
            mask_tau: 3.0,
        }
    }
}

impl CurriculumConfig {
    pub fn schedule_params(&self) -> Result<ScheduleParams> {
        match self.t_s {
            Some(t_s) => {
                let params = ScheduleParams {
                    sigma_min: self.sigma_min,
                    sigma_max: self.sigma_max,
                    k: self.k,
                    t_s,
                    start_iter: self.start_iter,
                    end_iter: self.end_iter,
                };
                params.validate()?;
                Ok(params)
            }
            None => ScheduleParams::with_default_stage(
                self.sigma_min,
                self.sigma_max,
                self.k,
                self.start_iter,
                self.end_iter,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule_params()?;
        if self.per_level_count < 1 {
            return Err(Error::Config("per_level_count must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.sigma_r) {
            return Err(Error::Config(format!("sigma_r must lie in [0, 0.5], got {}", self.sigma_r)));
        }
        if !(0.0..=1.0).contains(&self.promotion_threshold) {
            return Err(Error::Config("promotion_threshold must lie in [0,1]".into()));
        }
        if self.mask_tau < 0.0 {
            return Err(Error::Config("mask_tau must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Nearest-train-camera ground-truth depth, optionally gamma-distorted.
    Gt,
    /// All-zero depth: always degenerate, disables the depth term.
    Null,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Disparity-domain gamma distortion (monotone), e.g. 0.7–1.3.
    pub gamma: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { kind: OracleKind::Gt, gamma: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    /// Keep only this many teacher views (evenly subsampled from the train
    /// split); `None` uses the whole split.
    pub views: Option<usize>,
    pub weights: LossWeights,
    pub metric_weights: MetricWeights,
    pub nr_v0: f64,
    pub nr_w: f64,
    /// Apply dataset masks in training losses and propagate them onto
    /// promoted views.
    pub use_masks: bool,
    pub curriculum_enabled: bool,
    pub curriculum: CurriculumConfig,
    pub optim: AdamParams,
    pub densify: DensifyConfig,
    pub init: InitConfig,
    pub eval_interval: u64,
    pub oracle: OracleConfig,
    /// Train model A alone (requires `lambda_3 = 0`).
    pub single_model: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            seed: 0,
            views: None,
            weights: LossWeights::default(),
            metric_weights: MetricWeights::default(),
            nr_v0: NR_DEFAULT_V0,
            nr_w: NR_DEFAULT_W,
            use_masks: false,
            curriculum_enabled: true,
            curriculum: CurriculumConfig::default(),
            optim: AdamParams::default(),
            densify: DensifyConfig::default(),
            init: InitConfig::default(),
            eval_interval: 100,
            oracle: OracleConfig::default(),
            single_model: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        self.weights.validate()?;
        self.metric_weights.validate()?;
        if self.curriculum_enabled {
            self.curriculum.validate()?;
        }
        if self.init.n_primitives == 0 {
            return Err(Error::Config("init.n_primitives must be >= 1".into()));
        }
        if self.single_model && self.weights.lambda_3 > 0.0 {
            return Err(Error::Config(
                "single_model requires lambda_3 = 0 (the student consistency term needs both models)".into(),
            ));
        }
        if let Some(v) = self.views {
            if v == 0 {
                return Err(Error::Config("views must be >= 1 when given".into()));
            }
        }
        if let Some(g) = self.oracle.gamma {
            if !(g > 0.0) {
                return Err(Error::Config(format!("oracle gamma must be > 0, got {g}")));
            }
        }
        Ok(())
    }

    /// Teacher ids for this run: the train split, optionally evenly
    /// subsampled to `views` entries.
    pub fn effective_train_ids(&self, data: &TrainData) -> Result<Vec<usize>> {
        let ids = &data.train_ids;
        match self.views {
            None => Ok(ids.clone()),
            Some(v) if v >= ids.len() => Ok(ids.clone()),
            Some(v) => {
                let m = ids.len();
                let picked: Vec<usize> = (0..v).map(|i| ids[i * m / v]).collect();
                Ok(picked)
            }
        }
    }

    /// Loads a TOML (`.toml`) or JSON (`.json`) config file.
    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            Some("json") => serde_json::from_str(&text)?,
            other => {
                return Err(Error::Config(format!(
                    "unsupported config extension {other:?}; use .toml or .json"
                )))
            }
        };
        config.validate()?;
        Ok(config)
    }
}
