//! The optimization loop: dual-model co-regularized training, loss
//! assembly, parameter updates, and simplified density control.
//!
//! Two Gaussian clouds with independent parameters are trained against the
//! same views. Each iteration optimizes, per model,
//! `λ1·L_train + λ2·L_gt + λ3·L_stu` where `L_train` is the hybrid
//! photometric loss on a round-robin train view (teachers plus promoted
//! pseudo-views), `L_gt` the same loss on the corresponding teacher, and
//! `L_stu` a student-view consistency term: a depth-correlation loss against
//! a pseudo-depth oracle (model A only) plus a cross-model photometric term.
//! Model A drives evaluation, promotion, and checkpoints.

pub mod adam;
pub mod config;
pub mod densify;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::curriculum::{CurriculumEvent, CurriculumState, EventKind};
use crate::error::{Error, Result};
use crate::gaussians::{inverse_sigmoid, GaussianCloud, GaussianPrimitive};
use crate::geometry::{generate_student_pools, CameraPose};
use crate::image::{ImageRgb, Mask, ScalarMap};
use crate::metrics::{
    composite_score, propagate_background_mask, psnr, ssim_with_grad, BuiltinMetrics,
    pearson_depth_loss_with_grad,
};
use crate::rasterizer::{render, render_backward, RenderGradients, RenderOutput, UpstreamGradients};
use crate::scene::{GtDepthOracle, TrainData};

pub use adam::{AdamParams, AdamState};
pub use config::{CurriculumConfig, InitConfig, InitMode, LossWeights, OracleConfig, OracleKind, TrainConfig};
pub use densify::{densify_and_prune, DensifyConfig, DensifyStats};

/// Whether a training view is a ground-truth anchor or a promoted pseudo-view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Teacher,
    PromotedStudent,
}

/// One supervised view: a pose, its reference image, and an optional
/// foreground mask. Promoted views are immutable after creation.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub pose: CameraPose,
    pub reference: ImageRgb,
    pub kind: ViewKind,
    pub mask: Option<Mask>,
}

impl TrainView {
    pub fn validate(&self) -> Result<()> {
        if self.reference.width() != self.pose.width || self.reference.height() != self.pose.height {
            return Err(Error::ShapeMismatch(format!(
                "reference {}x{} does not match pose {}x{}",
                self.reference.width(),
                self.reference.height(),
                self.pose.width,
                self.pose.height
            )));
        }
        if let Some(m) = &self.mask {
            if m.width() != self.pose.width || m.height() != self.pose.height {
                return Err(Error::ShapeMismatch("mask does not match pose dimensions".into()));
            }
        }
        Ok(())
    }
}

/// Pseudo-depth source for the student depth term. Implementations must be
/// deterministic; the returned map matches the pose dimensions and is
/// treated as a constant (no gradient flows into the oracle).
pub trait DepthOracle {
    fn predict(&self, image: &ImageRgb, pose: &CameraPose) -> ScalarMap;
}

/// Oracle with no signal: all-zero depth. Always degenerate, so the depth
/// term is skipped — useful as an ablation of the depth loss.
pub struct NullDepthOracle;

impl DepthOracle for NullDepthOracle {
    fn predict(&self, _image: &ImageRgb, pose: &CameraPose) -> ScalarMap {
        ScalarMap::zeros(pose.width, pose.height)
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Hybrid photometric loss `(1−λ_s)·L1 + λ_s·(1 − SSIM)` with gradient with
/// respect to `render`. With a mask, both images are mask-multiplied first
/// (full-frame denominators), and no gradient flows to masked-out pixels.
pub fn loss_recon(
    render: &ImageRgb,
    reference: &ImageRgb,
    lambda_s: f64,
    mask: Option<&Mask>,
) -> Result<(f64, ImageRgb)> {
    if !render.same_shape(reference) {
        return Err(Error::ShapeMismatch(format!(
            "render {}x{} vs reference {}x{}",
            render.width(),
            render.height(),
            reference.width(),
            reference.height()
        )));
    }
    if let Some(m) = mask {
        if m.width() != render.width() || m.height() != render.height() {
            return Err(Error::ShapeMismatch("mask shape differs from images".into()));
        }
    }
    let (r, f) = match mask {
        Some(m) => (render.masked(m), reference.masked(m)),
        None => (render.clone(), reference.clone()),
    };
    let n = r.data().len() as f64;
    let l1: f64 = r.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let (ssim_v, ssim_g) = ssim_with_grad(&r, &f)?;
    let value = (1.0 - lambda_s) * l1 + lambda_s * (1.0 - ssim_v);

    let mut grad = ImageRgb::zeros(render.width(), render.height());
    for i in 0..grad.data().len() {
        grad.data_mut()[i] =
            (1.0 - lambda_s) * sign(r.data()[i] - f.data()[i]) / n - lambda_s * ssim_g.data()[i];
    }
    if let Some(m) = mask {
        for y in 0..grad.height() {
            for x in 0..grad.width() {
                if !m.get(x, y) {
                    grad.set(x, y, [0.0; 3]);
                }
            }
        }
    }
    Ok((value, grad))
}

/// Student-view consistency loss and its image-space gradients.
#[derive(Clone, Debug)]
pub struct StudentLoss {
    pub value: f64,
    pub grad_a_color: ImageRgb,
    pub grad_a_depth: ScalarMap,
    pub grad_b_color: ImageRgb,
    /// True when the depth term was dropped because the pseudo-depth (or
    /// the rendered depth) was degenerate; the loss then reduces to the
    /// photometric term alone.
    pub depth_skipped: bool,
}

/// `λ_d·(1 − corr(depth_a, oracle depth)) + λ_p·hybrid(color_a, color_b)`.
///
/// The depth term regularizes model A only (the pseudo-depth is constant);
/// the photometric term couples both models. A degenerate depth pair skips
/// the depth term rather than failing.
pub fn loss_student(
    render_a: &RenderOutput,
    render_b: &RenderOutput,
    pose: &CameraPose,
    oracle: &dyn DepthOracle,
    weights: &LossWeights,
) -> Result<StudentLoss> {
    if !render_a.color.same_shape(&render_b.color) {
        return Err(Error::ShapeMismatch("student renders differ in shape".into()));
    }
    let (w, h) = (render_a.color.width(), render_a.color.height());

    let mut depth_value = 0.0;
    let mut grad_a_depth = ScalarMap::zeros(w, h);
    let mut depth_skipped = false;
    if weights.lambda_d > 0.0 {
        let pseudo = oracle.predict(&render_a.color, pose);
        match pearson_depth_loss_with_grad(&render_a.depth, &pseudo, None) {
            Ok((v, g)) => {
                depth_value = weights.lambda_d * v;
                grad_a_depth = g.map(|x| weights.lambda_d * x);
            }
            Err(Error::DegenerateDepth) => depth_skipped = true,
            Err(e) => return Err(e),
        }
    }

    // Cross-model hybrid photometric term; gradient to each side.
    let a = &render_a.color;
    let b = &render_b.color;
    let n = a.data().len() as f64;
    let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let (ssim_v, ssim_ga) = ssim_with_grad(a, b)?;
    let (_, ssim_gb) = ssim_with_grad(b, a)?;
    let ls = weights.lambda_s;
    let photo = (1.0 - ls) * l1 + ls * (1.0 - ssim_v);
    let lp = weights.lambda_p;
    let mut grad_a_color = ImageRgb::zeros(w, h);
    let mut grad_b_color = ImageRgb::zeros(w, h);
    for i in 0..grad_a_color.data().len() {
        let s = sign(a.data()[i] - b.data()[i]);
        grad_a_color.data_mut()[i] = lp * ((1.0 - ls) * s / n - ls * ssim_ga.data()[i]);
        grad_b_color.data_mut()[i] = lp * (-(1.0 - ls) * s / n - ls * ssim_gb.data()[i]);
    }

    Ok(StudentLoss {
        value: depth_value + lp * photo,
        grad_a_color,
        grad_a_depth,
        grad_b_color,
        depth_skipped,
    })
}

/// Renders, evaluates [`loss_recon`], and backpropagates to cloud parameters.
pub fn loss_recon_grads(
    cloud: &GaussianCloud,
    cam: &CameraPose,
    reference: &ImageRgb,
    lambda_s: f64,
    mask: Option<&Mask>,
) -> Result<(f64, RenderGradients)> {
    let fwd = render(cloud, cam);
    let (value, grad_color) = loss_recon(&fwd.color, reference, lambda_s, mask)?;
    let upstream = UpstreamGradients {
        color: grad_color,
        depth: ScalarMap::zeros(cam.width, cam.height),
    };
    let grads = render_backward(cloud, cam, &upstream, &fwd)?;
    Ok((value, grads))
}

/// Renders both models at the student pose, evaluates [`loss_student`], and
/// backpropagates to both clouds. Returns (value, grads_a, grads_b, skipped).
pub fn loss_student_grads(
    cloud_a: &GaussianCloud,
    cloud_b: &GaussianCloud,
    pose: &CameraPose,
    oracle: &dyn DepthOracle,
    weights: &LossWeights,
) -> Result<(f64, RenderGradients, RenderGradients, bool)> {
    let fa = render(cloud_a, pose);
    let fb = render(cloud_b, pose);
    let sl = loss_student(&fa, &fb, pose, oracle, weights)?;
    let ga = render_backward(
        cloud_a,
        pose,
        &UpstreamGradients { color: sl.grad_a_color, depth: sl.grad_a_depth },
        &fa,
    )?;
    let gb = render_backward(
        cloud_b,
        pose,
        &UpstreamGradients {
            color: sl.grad_b_color,
            depth: ScalarMap::zeros(pose.width, pose.height),
        },
        &fb,
    )?;
    Ok((sl.value, ga, gb, sl.depth_skipped))
}

/// Backprojects train-view depth pixels into world points with colors.
fn depth_point_samples(data: &TrainData, train_ids: &[usize]) -> Vec<(nalgebra::Vector3<f64>, [f64; 3])> {
    let mut points = Vec::new();
    for &id in train_ids {
        let cam = &data.cameras[id];
        let depth = &data.depths[id];
        let img = &data.images[id];
        let rt = cam.rotation.transpose();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let z = depth.get(x, y);
                if z <= 0.0 {
                    continue;
                }
                let xc = (x as f64 + 0.5 - cam.cx) / cam.fx * z;
                let yc = (y as f64 + 0.5 - cam.cy) / cam.fy * z;
                let cam_pt = nalgebra::Vector3::new(xc, yc, z);
                let world = rt * (cam_pt - cam.translation);
                points.push((world, img.get(x, y)));
            }
        }
    }
    points
}

/// Builds the initial cloud: either noisy depth-backprojected point samples
/// (an SfM stand-in) or uniform random primitives in the points' bounding
/// box. Scales start at the nearest-neighbor distance, opacities low.
pub fn init_cloud(
    data: &TrainData,
    train_ids: &[usize],
    cfg: &InitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianCloud> {
    let samples = depth_point_samples(data, train_ids);
    if samples.is_empty() {
        return Err(Error::Config("no depth samples available for initialization".into()));
    }
    let n = cfg.n_primitives.max(1);
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    match cfg.mode {
        InitMode::Points => {
            for _ in 0..n {
                let (p, c) = samples[rng.gen_range(0..samples.len())];
                let jitter = nalgebra::Vector3::new(
                    normal_draw(rng, cfg.noise_sigma),
                    normal_draw(rng, cfg.noise_sigma),
                    normal_draw(rng, cfg.noise_sigma),
                );
                positions.push(p + jitter);
                colors.push(c);
            }
        }
        InitMode::Random => {
            let mut lo = samples[0].0;
            let mut hi = samples[0].0;
            for (p, _) in &samples {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            let pad = (hi - lo) * 0.05;
            let (lo, hi) = (lo - pad, hi + pad);
            for _ in 0..n {
                positions.push(nalgebra::Vector3::new(
                    rng.gen_range(lo.x..=hi.x),
                    rng.gen_range(lo.y..=hi.y),
                    rng.gen_range(lo.z..=hi.z),
                ));
                colors.push([
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]);
            }
        }
    }

    // Isotropic scale from the nearest-neighbor distance.
    let mut primitives = Vec::with_capacity(n);
    for i in 0..n {
        let mut nearest = f64::INFINITY;
        for j in 0..n {
            if i != j {
                nearest = nearest.min((positions[i] - positions[j]).norm_squared());
            }
        }
        let d = nearest.sqrt().clamp(1e-3, 1.0);
        primitives.push(GaussianPrimitive {
            mu: positions[i],
            log_scale: nalgebra::Vector3::from_element(d.ln()),
            rot_quat: nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: inverse_sigmoid(0.1),
            color: nalgebra::Vector3::new(colors[i][0], colors[i][1], colors[i][2]),
        });
    }
    Ok(GaussianCloud::new(primitives))
}

fn normal_draw(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    use rand_distr::Distribution;
    rand_distr::Normal::new(0.0, sigma).expect("valid sigma").sample(rng)
}

/// One held-out evaluation summary (the "mean" row of the metrics log).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalPoint {
    pub iteration: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub nr_quality: f64,
    pub composite: f64,
}

/// Everything a finished run hands back to the caller.
pub struct TrainRun {
    pub model_a: GaussianCloud,
    pub model_b: Option<GaussianCloud>,
    pub evals: Vec<EvalPoint>,
    pub events: Vec<CurriculumEvent>,
    pub promoted_count: usize,
    pub final_train_views: usize,
}

struct ModelState {
    cloud: GaussianCloud,
    adam: AdamState,
    stats: DensifyStats,
    rng: ChaCha8Rng,
}

impl ModelState {
    fn new(cloud: GaussianCloud, rng: ChaCha8Rng) -> Self {
        let n = cloud.primitives().len();
        Self { cloud, adam: AdamState::new(n), stats: DensifyStats::new(n), rng }
    }
}

/// Live state of a run; owned by the single training thread.
pub struct TrainerState {
    pub train_views: Vec<TrainView>,
    /// train view index → teacher index (teachers map to themselves).
    pub teacher_of: Vec<usize>,
    /// teacher index → train view index.
    pub teacher_train_idx: Vec<usize>,
    pub curriculum: Option<CurriculumState>,
    pub iteration: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct RunWriters {
    metrics: Option<std::io::BufWriter<fs::File>>,
    events: Option<std::io::BufWriter<fs::File>>,
    out_dir: Option<std::path::PathBuf>,
    promoted_manifest: Vec<serde_json::Value>,
}

impl RunWriters {
    fn new(out_dir: Option<&Path>) -> Result<Self> {
        let mut w = Self {
            metrics: None,
            events: None,
            out_dir: out_dir.map(Path::to_path_buf),
            promoted_manifest: Vec::new(),
        };
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            fs::create_dir_all(dir.join("renders"))?;
            fs::create_dir_all(dir.join("promoted"))?;
            let mut metrics = std::io::BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
            writeln!(metrics, "iteration,view_id,psnr,ssim,perceptual,nr_quality,composite")?;
            w.metrics = Some(metrics);
            w.events = Some(std::io::BufWriter::new(fs::File::create(dir.join("events.jsonl"))?));
        }
        Ok(w)
    }

    fn write_metric_row(&mut self, iteration: u64, view_id: &str, p: &EvalPoint) -> Result<()> {
        if let Some(m) = &mut self.metrics {
            writeln!(
                m,
                "{iteration},{view_id},{},{},{},{},{}",
                p.psnr, p.ssim, p.perceptual, p.nr_quality, p.composite
            )?;
        }
        Ok(())
    }

    fn write_events(&mut self, events: &[CurriculumEvent]) -> Result<()> {
        if let Some(w) = &mut self.events {
            for e in events {
                writeln!(w, "{}", serde_json::to_string(e)?)?;
            }
        }
        Ok(())
    }

    fn save_promoted(&mut self, idx: usize, teacher_id: usize, level: f64, iter: u64, img: &ImageRgb) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let file = format!("p{idx:03}.png");
            img.save_png(dir.join("promoted").join(&file))?;
            self.promoted_manifest.push(serde_json::json!({
                "file": file,
                "teacher_id": teacher_id,
                "level": level,
                "iter": iter,
            }));
        }
        Ok(())
    }

    fn finish(mut self, run: &TrainRun, wall_seconds: f64, iterations: u64) -> Result<()> {
        if let Some(m) = &mut self.metrics {
            m.flush()?;
        }
        if let Some(e) = &mut self.events {
            e.flush()?;
        }
        if let Some(dir) = &self.out_dir {
            run.model_a.save_json(dir.join("ckpt_final.json"))?;
            fs::write(
                dir.join("promoted").join("manifest.json"),
                serde_json::to_string_pretty(&self.promoted_manifest)?,
            )?;
            // Timing is observational and deliberately kept out of the
            // deterministic logs.
            fs::write(
                dir.join("timing.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "wall_seconds": wall_seconds,
                    "iterations": iterations,
                }))?,
            )?;
        }
        Ok(())
    }
}

fn evaluate_heldout(
    cloud: &GaussianCloud,
    data: &TrainData,
    plugin: &BuiltinMetrics,
    weights: &crate::metrics::MetricWeights,
    iteration: u64,
    writers: &mut RunWriters,
) -> Result<Option<EvalPoint>> {
    if data.test_ids.is_empty() {
        return Ok(None);
    }
    let mut mean = EvalPoint { iteration, psnr: 0.0, ssim: 0.0, perceptual: 0.0, nr_quality: 0.0, composite: 0.0 };
    for &id in &data.test_ids {
        let cam = &data.cameras[id];
        let fwd = render(cloud, cam);
        let reference = &data.images[id];
        let report = composite_score(&fwd.color, reference, plugin, weights)?;
        let p = EvalPoint {
            iteration,
            psnr: psnr(&fwd.color, reference)?,
            ssim: report.ssim,
            perceptual: report.perceptual,
            nr_quality: report.nr_quality,
            composite: report.composite,
        };
        writers.write_metric_row(iteration, &id.to_string(), &p)?;
        mean.psnr += p.psnr;
        mean.ssim += p.ssim;
        mean.perceptual += p.perceptual;
        mean.nr_quality += p.nr_quality;
        mean.composite += p.composite;
    }
    let n = data.test_ids.len() as f64;
    mean.psnr /= n;
    mean.ssim /= n;
    mean.perceptual /= n;
    mean.nr_quality /= n;
    mean.composite /= n;
    writers.write_metric_row(iteration, "mean", &mean)?;
    Ok(Some(mean))
}

/// Runs the full training loop on a loaded dataset. When `out_dir` is given,
/// writes `metrics.csv`, `events.jsonl`, `ckpt_final.json`, `renders/`,
/// `promoted/`, and `timing.json` underneath it.
pub fn train(data: &TrainData, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainRun> {
    config.validate()?;
    data.validate()?;
    let started = Instant::now();

    let train_ids = config.effective_train_ids(data)?;
    let mut rng_loop = stream_rng(config.seed, 0);
    let rng_a = stream_rng(config.seed, 1);
    let rng_b = stream_rng(config.seed, 2);
    let mut rng_student = stream_rng(config.seed, 3);

    let mut model_a = {
        let mut rng = rng_a;
        let cloud = init_cloud(data, &train_ids, &config.init, &mut rng)?;
        ModelState::new(cloud, rng)
    };
    let mut model_b = if config.single_model {
        None
    } else {
        let mut rng = rng_b;
        let cloud = init_cloud(data, &train_ids, &config.init, &mut rng)?;
        Some(ModelState::new(cloud, rng))
    };

    // Teachers first, promoted views appended later; both models share the list.
    let mut state = TrainerState {
        train_views: Vec::new(),
        teacher_of: Vec::new(),
        teacher_train_idx: Vec::new(),
        curriculum: None,
        iteration: 0,
    };
    for (teacher_idx, &id) in train_ids.iter().enumerate() {
        let view = TrainView {
            pose: data.cameras[id].clone(),
            reference: data.images[id].clone(),
            kind: ViewKind::Teacher,
            mask: if config.use_masks { data.masks.get(id).cloned() } else { None },
        };
        view.validate()?;
        state.teacher_train_idx.push(state.train_views.len());
        state.teacher_of.push(teacher_idx);
        state.train_views.push(view);
    }

    if config.curriculum_enabled {
        let schedule = config.curriculum.schedule_params()?;
        let levels = schedule.levels();
        let teacher_poses: Vec<CameraPose> =
            train_ids.iter().map(|&id| data.cameras[id].clone()).collect();
        let pool = generate_student_pools(
            &teacher_poses,
            &levels,
            config.curriculum.per_level_count,
            config.curriculum.sigma_r,
            &mut rng_student,
        )?;
        state.curriculum =
            Some(CurriculumState::new(schedule, pool, config.curriculum.promotion_threshold)?);
    }

    let oracle: Box<dyn DepthOracle> = match config.oracle.kind {
        OracleKind::Gt => Box::new(GtDepthOracle::from_data(data, &train_ids, config.oracle.gamma)),
        OracleKind::Null => Box::new(NullDepthOracle),
    };
    let plugin = BuiltinMetrics { nr_v0: config.nr_v0, nr_w: config.nr_w };

    let mut writers = RunWriters::new(out_dir)?;
    let mut evals = Vec::new();
    let mut all_events: Vec<CurriculumEvent> = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut promoted_count = 0usize;

    for t in 0..config.iterations {
        state.iteration = t;

        // Stage transitions first: they may append promoted train views.
        if let Some(cur) = &mut state.curriculum {
            for p in cur.advance(t) {
                let mut view = p.view;
                if config.use_masks {
                    let gt = &state.train_views[state.teacher_train_idx[p.teacher_id]];
                    if let Some(teacher_mask) = &gt.mask {
                        let bg = propagate_background_mask(
                            &gt.reference,
                            teacher_mask,
                            &view.reference,
                            config.curriculum.mask_tau,
                        )?;
                        view.mask = Some(bg.invert());
                    }
                }
                writers.save_promoted(promoted_count, p.teacher_id, p.level, t, &view.reference)?;
                promoted_count += 1;
                state.teacher_of.push(p.teacher_id);
                state.train_views.push(view);
            }
        }

        // Shuffled round-robin over the current train-view list.
        if order.is_empty() {
            order = (0..state.train_views.len()).collect();
            order.shuffle(&mut rng_loop);
        }
        let idx = order.pop().expect("order refilled above");
        let teacher_id = state.teacher_of[idx];
        let gt_idx = state.teacher_train_idx[teacher_id];

        let mut loss_terms: Vec<(&str, f64)> = Vec::new();
        let mut grads_a = RenderGradients::zeros(model_a.cloud.primitives().len());
        let mut grads_b = model_b
            .as_ref()
            .map(|m| RenderGradients::zeros(m.cloud.primitives().len()));

        // λ1·L_train + λ2·L_gt per model (merged when the views coincide).
        {
            let w = &config.weights;
            let photometric = |cloud: &GaussianCloud, grads: &mut RenderGradients| -> Result<(f64, f64)> {
                if idx == gt_idx {
                    let v = &state.train_views[idx];
                    let (value, g) = loss_recon_grads(cloud, &v.pose, &v.reference, w.lambda_s, v.mask.as_ref())?;
                    grads.add_scaled(&g, w.lambda_1 + w.lambda_2);
                    Ok((value, value))
                } else {
                    let v = &state.train_views[idx];
                    let (lt, g1) = loss_recon_grads(cloud, &v.pose, &v.reference, w.lambda_s, v.mask.as_ref())?;
                    grads.add_scaled(&g1, w.lambda_1);
                    let g = &state.train_views[gt_idx];
                    let (lg, g2) = loss_recon_grads(cloud, &g.pose, &g.reference, w.lambda_s, g.mask.as_ref())?;
                    grads.add_scaled(&g2, w.lambda_2);
                    Ok((lt, lg))
                }
            };
            let (lt_a, lg_a) = photometric(&model_a.cloud, &mut grads_a)?;
            loss_terms.push(("train_a", lt_a));
            loss_terms.push(("gt_a", lg_a));
            if let (Some(mb), Some(gb)) = (&model_b, grads_b.as_mut()) {
                let (lt_b, lg_b) = photometric(&mb.cloud, gb)?;
                loss_terms.push(("train_b", lt_b));
                loss_terms.push(("gt_b", lg_b));
            }
        }

        // Student branch: evaluate/score whenever the curriculum samples,
        // and additionally backpropagate the consistency loss when λ3 > 0.
        if let Some(cur) = &mut state.curriculum {
            if cur.sampling_active(t) {
                let (student_id, student_pose) = {
                    let s = cur.sample_student(teacher_id, t, &mut rng_student)?;
                    (s.id, s.pose.clone())
                };
                let fa = render(&model_a.cloud, &student_pose);
                let report = composite_score(
                    &fa.color,
                    &state.train_views[gt_idx].reference,
                    &plugin,
                    &config.metric_weights,
                )?;
                cur.record_evaluation(t, student_id, &report, &fa.color)?;

                if config.weights.lambda_3 > 0.0 {
                    let mb = model_b.as_ref().expect("validated: dual model when lambda_3 > 0");
                    let fb = render(&mb.cloud, &student_pose);
                    let sl = loss_student(&fa, &fb, &student_pose, oracle.as_ref(), &config.weights)?;
                    let ga = render_backward(
                        &model_a.cloud,
                        &student_pose,
                        &UpstreamGradients { color: sl.grad_a_color, depth: sl.grad_a_depth },
                        &fa,
                    )?;
                    grads_a.add_scaled(&ga, config.weights.lambda_3);
                    let gb = render_backward(
                        &mb.cloud,
                        &student_pose,
                        &UpstreamGradients {
                            color: sl.grad_b_color,
                            depth: ScalarMap::zeros(student_pose.width, student_pose.height),
                        },
                        &fb,
                    )?;
                    grads_b
                        .as_mut()
                        .expect("dual model when lambda_3 > 0")
                        .add_scaled(&gb, config.weights.lambda_3);
                    loss_terms.push(("student", sl.value));
                    if sl.depth_skipped {
                        loss_terms.push(("student_depth_skipped", 1.0));
                    }
                }
            }
        }

        // NaN guard: abort with a diagnostic dump rather than training on.
        let total: f64 = loss_terms.iter().map(|(_, v)| v).sum();
        if !total.is_finite() || !grads_a.all_finite() || grads_b.as_ref().is_some_and(|g| !g.all_finite()) {
            let detail: Vec<String> = loss_terms.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let detail = detail.join(", ");
            if let Some(dir) = out_dir {
                let _ = fs::write(
                    dir.join("diagnostic.json"),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "iteration": t,
                        "terms": loss_terms.iter().map(|(k, v)| (k.to_string(), v)).collect::<Vec<_>>(),
                        "primitives_a": model_a.cloud.primitives().len(),
                    }))
                    .unwrap_or_default(),
                );
            }
            return Err(Error::NonFiniteLoss { iteration: t, detail });
        }

        // Optimizer step per model.
        let lr_pos = config.optim.position_lr_at(t, config.iterations);
        model_a.stats.accumulate(&grads_a);
        model_a.adam.step(&mut model_a.cloud, &grads_a, &config.optim, lr_pos);
        if let (Some(mb), Some(gb)) = (&mut model_b, grads_b.as_ref()) {
            mb.stats.accumulate(gb);
            mb.adam.step(&mut mb.cloud, gb, &config.optim, lr_pos);
        }

        // Density control.
        let d = &config.densify;
        if d.interval > 0
            && (t + 1) >= d.start_iter
            && (t + 1) < d.end_iter
            && (t + 1) % d.interval == 0
        {
            densify_and_prune(&mut model_a.cloud, &mut model_a.adam, &model_a.stats, d, &mut model_a.rng);
            model_a.stats = DensifyStats::new(model_a.cloud.primitives().len());
            if let Some(mb) = &mut model_b {
                densify_and_prune(&mut mb.cloud, &mut mb.adam, &mb.stats, d, &mut mb.rng);
                mb.stats = DensifyStats::new(mb.cloud.primitives().len());
            }
        }

        // Held-out evaluation (always at the final iteration).
        if (t + 1) % config.eval_interval == 0 || t + 1 == config.iterations {
            if let Some(point) = evaluate_heldout(
                &model_a.cloud,
                data,
                &plugin,
                &config.metric_weights,
                t + 1,
                &mut writers,
            )? {
                evals.push(point);
            }
        }

        if let Some(cur) = &mut state.curriculum {
            let events = cur.take_events();
            writers.write_events(&events)?;
            all_events.extend(events);
        }
    }

    // Final renders of the held-out views from model A.
    if let Some(dir) = out_dir {
        for &id in &data.test_ids {
            let fwd = render(&model_a.cloud, &data.cameras[id]);
            fwd.color.save_png(dir.join("renders").join(format!("test_{id:03}.png")))?;
        }
    }

    let run = TrainRun {
        model_a: model_a.cloud,
        model_b: model_b.map(|m| m.cloud),
        evals,
        events: all_events,
        promoted_count,
        final_train_views: state.train_views.len(),
    };
    writers.finish(&run, started.elapsed().as_secs_f64(), config.iterations)?;
    Ok(run)
}

/// Convenience over the run's event log.
pub fn count_events(events: &[CurriculumEvent], kind: EventKind) -> usize {
    events.iter().filter(|e| e.event == kind).count()
}
