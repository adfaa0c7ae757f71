//! curigs: dataset synthesis, training, evaluation, and the curriculum
//! ablation harness on one command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use curigs_core::gaussians::GaussianCloud;
use curigs_core::metrics::{psnr, ssim, BuiltinMetrics, MetricPlugin};
use curigs_core::rasterizer::render;
use curigs_core::scene::{load_dataset, make_scene, save_dataset, Layout, SceneSpec, TrainData};
use curigs_core::training::{train, TrainConfig, TrainRun};
use curigs_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "curigs",
    version,
    about = "Curriculum-guided sparse-view Gaussian splatting",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with oracle ground truth.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Render a checkpoint on the test split and report metrics.
    Eval(EvalArgs),
    /// Paired full-vs-no-curriculum runs with a comparison report.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    Cluster,
    Object,
    Room,
}

impl From<LayoutArg> for Layout {
    fn from(a: LayoutArg) -> Layout {
        match a {
            LayoutArg::Cluster => Layout::Cluster,
            LayoutArg::Object => Layout::Object,
            LayoutArg::Room => Layout::Room,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scene layout.
    #[arg(long, value_enum, default_value = "object")]
    layout: LayoutArg,
    /// Number of ground-truth Gaussians.
    #[arg(long, default_value_t = 2000)]
    n_gaussians: usize,
    /// Number of cameras (every 8th is held out for testing).
    #[arg(long, default_value_t = 28)]
    n_cameras: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `synth` or converted real data).
    #[arg(long)]
    data: PathBuf,
    /// Training config file (TOML or JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep only N teacher views, evenly subsampled from the train split.
    #[arg(long)]
    views: Option<usize>,
    /// Disable the student-view curriculum (ablation arm).
    #[arg(long)]
    no_curriculum: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Cloud checkpoint (e.g. `<run>/ckpt_final.json` or the dataset's own
    /// `cloud_gt.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional CSV output path; the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Training config file shared by both arms.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Teacher view counts to sweep (one paired run per count).
    #[arg(long, value_delimiter = ',', default_value = "3")]
    views: Vec<usize>,
    /// Seed shared by both arms.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (one subdirectory per arm).
    #[arg(long)]
    out: PathBuf,
}

/// Written to `<out>/manifest.json` before the first training iteration.
#[derive(Serialize)]
struct RunManifest {
    version: String,
    seed: u64,
    data_dir: String,
    out_dir: String,
    train_view_ids: Vec<usize>,
    config: TrainConfig,
    outputs: ManifestOutputs,
}

#[derive(Serialize)]
struct ManifestOutputs {
    checkpoint: &'static str,
    metrics: &'static str,
    events: &'static str,
    renders: &'static str,
    promoted: &'static str,
    /// Wall-clock stats land here once the run finishes; they are kept out
    /// of the manifest so it can be written up front and never touched again.
    timing: &'static str,
}

impl ManifestOutputs {
    fn fixed() -> Self {
        Self {
            checkpoint: "ckpt_final.json",
            metrics: "metrics.csv",
            events: "events.jsonl",
            renders: "renders/",
            promoted: "promoted/",
            timing: "timing.json",
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("CURIGS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_thread_pool();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args).map(|_| ()),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        n_gaussians: args.n_gaussians,
        layout: args.layout.into(),
        n_cameras: args.n_cameras,
        width: args.width,
        height: args.height,
        seed: args.seed,
    };
    let scene = make_scene(&spec)?;
    save_dataset(&args.out, &scene)?;
    println!(
        "wrote {} ({} gaussians, {} cameras, {} train / {} test, {}x{})",
        args.out.display(),
        spec.n_gaussians,
        spec.n_cameras,
        scene.split.train.len(),
        scene.split.test.len(),
        spec.width,
        spec.height
    );
    Ok(())
}

fn resolve_train_config(
    config_path: Option<&Path>,
    views: Option<usize>,
    no_curriculum: bool,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut config = match config_path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = views {
        config.views = Some(v);
    }
    if no_curriculum {
        config.curriculum_enabled = false;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run_training(data_dir: &Path, config: &TrainConfig, out_dir: &Path) -> Result<TrainRun> {
    let data = load_dataset(data_dir)?;
    let train_view_ids = config.effective_train_ids(&data)?;
    std::fs::create_dir_all(out_dir)?;
    let manifest = RunManifest {
        version: format!("curigs {}", env!("CARGO_PKG_VERSION")),
        seed: config.seed,
        data_dir: data_dir.display().to_string(),
        out_dir: out_dir.display().to_string(),
        train_view_ids,
        config: config.clone(),
        outputs: ManifestOutputs::fixed(),
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    train(&data, config, Some(out_dir))
}

fn cmd_train(args: TrainArgs) -> Result<TrainRun> {
    let config =
        resolve_train_config(args.config.as_deref(), args.views, args.no_curriculum, args.seed)?;
    let run = run_training(&args.data, &config, &args.out)?;
    if let Some(last) = run.evals.last() {
        println!(
            "finished {} iterations: held-out PSNR {:.2} dB, SSIM {:.4} ({} promoted students)",
            config.iterations, last.psnr, last.ssim, run.promoted_count
        );
    } else {
        println!("finished {} iterations (no test split to evaluate)", config.iterations);
    }
    Ok(run)
}

/// Per-view evaluation row. Masked variants restrict scoring to foreground
/// pixels (PSNR) or zero out the background on both images (SSIM).
struct EvalRow {
    label: String,
    psnr: f64,
    ssim: f64,
    perc_proxy: f64,
    psnr_masked: f64,
    ssim_masked: f64,
}

fn eval_checkpoint(cloud: &GaussianCloud, data: &TrainData) -> Result<Vec<EvalRow>> {
    if data.test_ids.is_empty() {
        return Err(Error::Config("test split is empty; nothing to evaluate".into()));
    }
    let plugin = BuiltinMetrics::default();
    let mut rows = Vec::new();
    let mut mean = [0.0f64; 5];
    for &id in &data.test_ids {
        let cam = &data.cameras[id];
        // References on disk are f32; quantize the fresh render so a perfect
        // reconstruction scores exactly at the PSNR cap.
        let rendered = render(cloud, cam).color.quantize_f32();
        let reference = &data.images[id];
        let mask = &data.masks[id];
        let fg = mask.count_true();
        let (psnr_masked, ssim_masked) = if fg == 0 || fg == mask.data().len() {
            (psnr(&rendered, reference)?, ssim(&rendered, reference)?)
        } else {
            let masked_mse = {
                let mut sum = 0.0;
                for y in 0..cam.height {
                    for x in 0..cam.width {
                        if mask.get(x, y) {
                            let a = rendered.get(x, y);
                            let b = reference.get(x, y);
                            for c in 0..3 {
                                sum += (a[c] - b[c]) * (a[c] - b[c]);
                            }
                        }
                    }
                }
                sum / (fg * 3) as f64
            };
            let pm = if masked_mse == 0.0 {
                curigs_core::metrics::PSNR_CAP
            } else {
                (-10.0 * masked_mse.log10()).min(curigs_core::metrics::PSNR_CAP)
            };
            (pm, ssim(&rendered.masked(mask), &reference.masked(mask))?)
        };
        let row = EvalRow {
            label: id.to_string(),
            psnr: psnr(&rendered, reference)?,
            ssim: ssim(&rendered, reference)?,
            perc_proxy: plugin.perceptual_distance(&rendered, reference)?,
            psnr_masked,
            ssim_masked,
        };
        mean[0] += row.psnr;
        mean[1] += row.ssim;
        mean[2] += row.perc_proxy;
        mean[3] += row.psnr_masked;
        mean[4] += row.ssim_masked;
        rows.push(row);
    }
    let n = data.test_ids.len() as f64;
    rows.push(EvalRow {
        label: "mean".into(),
        psnr: mean[0] / n,
        ssim: mean[1] / n,
        perc_proxy: mean[2] / n,
        psnr_masked: mean[3] / n,
        ssim_masked: mean[4] / n,
    });
    Ok(rows)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let cloud = GaussianCloud::load_json(&args.checkpoint)?;
    let rows = eval_checkpoint(&cloud, &data)?;
    println!(
        "{:>6} {:>8} {:>8} {:>10} {:>12} {:>12}",
        "view", "psnr", "ssim", "perc-proxy", "psnr-masked", "ssim-masked"
    );
    for r in &rows {
        println!(
            "{:>6} {:>8.3} {:>8.4} {:>10.5} {:>12.3} {:>12.4}",
            r.label, r.psnr, r.ssim, r.perc_proxy, r.psnr_masked, r.ssim_masked
        );
    }
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut csv = String::from("view,psnr,ssim,perc_proxy,psnr_masked,ssim_masked\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label, r.psnr, r.ssim, r.perc_proxy, r.psnr_masked, r.ssim_masked
            ));
        }
        std::fs::write(out, csv)?;
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    if args.views.is_empty() {
        return Err(Error::Config("--views needs at least one view count".into()));
    }
    std::fs::create_dir_all(&args.out)?;
    let data = load_dataset(&args.data)?;
    let mut summary = String::from("views,arm,psnr,ssim,perc_proxy\n");
    for &v in &args.views {
        let mut runs: Vec<(&str, TrainRun)> = Vec::new();
        for (arm, no_curriculum) in [("full", false), ("nocur", true)] {
            let mut config =
                resolve_train_config(args.config.as_deref(), Some(v), no_curriculum, args.seed)?;
            if no_curriculum {
                // Without the curriculum no student views exist, so the
                // consistency term never fires and model B is dead weight;
                // train model A alone. Its RNG stream is independent of
                // model B's, so the resulting model A is bit-identical.
                config.single_model = true;
                config.weights.lambda_3 = 0.0;
            }
            let out_dir = args.out.join(format!("{arm}_v{v}"));
            let run = run_training(&args.data, &config, &out_dir)?;
            runs.push((arm, run));
        }
        let mut curves = String::from(
            "iteration,full_psnr,full_ssim,full_perc,nocur_psnr,nocur_ssim,nocur_perc\n",
        );
        for (f, n) in runs[0].1.evals.iter().zip(&runs[1].1.evals) {
            curves.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.iteration, f.psnr, f.ssim, f.perceptual, n.psnr, n.ssim, n.perceptual
            ));
        }
        std::fs::write(args.out.join(format!("curves_v{v}.csv")), curves)?;
        for (arm, run) in &runs {
            let cloud = &run.model_a;
            let rows = eval_checkpoint(cloud, &data)?;
            let mean = rows.last().expect("mean row always present");
            summary.push_str(&format!(
                "{v},{arm},{},{},{}\n",
                mean.psnr, mean.ssim, mean.perc_proxy
            ));
            println!(
                "views={v} arm={arm}: PSNR {:.2} dB, SSIM {:.4}, perc-proxy {:.5}",
                mean.psnr, mean.ssim, mean.perc_proxy
            );
        }
    }
    std::fs::write(args.out.join("summary.csv"), summary)?;
    Ok(())
}
