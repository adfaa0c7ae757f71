//! Image and depth quality measures.
//!
//! * PSNR (capped at 99 dB for identical images),
//! * SSIM with an 11×11 Gaussian window (σ = 1.5, K1 = 0.01, K2 = 0.03,
//!   dynamic range 1.0) on channel-mean grayscale, valid-window mean, plus
//!   an analytic gradient for use inside losses,
//! * the Pearson depth loss `1 − corr(D_r, D_p)` with gradient,
//! * a pluggable perceptual/no-reference contract with deterministic
//!   built-in proxies,
//! * the composite multi-signal score used to rank student renders,
//! * background-mask propagation from a teacher view to a student view.
//!
//! Built-in proxies (documented stand-ins for learned metrics):
//! `builtin_perceptual` is the mean absolute difference between
//! gradient-magnitude maps at three dyadic scales; `builtin_nr_score` is an
//! exposure-validity fraction (pixels inside [0.02, 0.98]) multiplied by a
//! logistic squashing of log Laplacian variance, `logistic((ln v − ln v0)/w)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageRgb, Mask, ScalarMap};

/// PSNR ceiling reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB over all channels, `10·log10(1/MSE)`,
/// capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 11-tap Gaussian kernel.
fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid convolution with the SSIM kernel; output shrinks by
/// `SSIM_WINDOW - 1` in each dimension.
fn conv_valid(src: &ScalarMap, kernel: &[f64; SSIM_WINDOW]) -> ScalarMap {
    let (w, h) = (src.width(), src.height());
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    let mut tmp = ScalarMap::zeros(ow, h);
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                s += k * src.get(x + i, y);
            }
            tmp.set(x, y, s);
        }
    }
    let mut out = ScalarMap::zeros(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                s += k * tmp.get(x, y + j);
            }
            out.set(x, y, s);
        }
    }
    out
}

/// Adjoint of [`conv_valid`]: spreads a valid-grid field back onto the
/// input grid through the same kernel.
fn conv_adjoint(field: &ScalarMap, kernel: &[f64; SSIM_WINDOW], w: usize, h: usize) -> ScalarMap {
    let (ow, oh) = (field.width(), field.height());
    let mut tmp = ScalarMap::zeros(ow, h);
    for y in 0..oh {
        for x in 0..ow {
            let v = field.get(x, y);
            if v != 0.0 {
                for (j, &k) in kernel.iter().enumerate() {
                    tmp.add(x, y + j, k * v);
                }
            }
        }
    }
    let mut out = ScalarMap::zeros(w, h);
    for y in 0..h {
        for x in 0..ow {
            let v = tmp.get(x, y);
            if v != 0.0 {
                for (i, &k) in kernel.iter().enumerate() {
                    out.add(x + i, y, k * v);
                }
            }
        }
    }
    out
}

fn ssim_guard(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::TooSmall { width: a.width(), height: a.height() });
    }
    Ok(())
}

/// Mean local SSIM over all valid 11×11 windows.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to the first image (per RGB channel;
/// the grayscale conversion contributes the 1/3 chain factor).
pub fn ssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, ImageRgb)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &ImageRgb, b: &ImageRgb, want_grad: bool) -> Result<(f64, Option<ImageRgb>)> {
    ssim_guard(a, b)?;
    let kernel = ssim_kernel();
    let ga = a.to_gray();
    let gb = b.to_gray();
    let (w, h) = (ga.width(), ga.height());

    let mu_a = conv_valid(&ga, &kernel);
    let mu_b = conv_valid(&gb, &kernel);
    let aa = conv_valid(&ScalarMap::from_fn(w, h, |x, y| ga.get(x, y) * ga.get(x, y)), &kernel);
    let bb = conv_valid(&ScalarMap::from_fn(w, h, |x, y| gb.get(x, y) * gb.get(x, y)), &kernel);
    let ab = conv_valid(&ScalarMap::from_fn(w, h, |x, y| ga.get(x, y) * gb.get(x, y)), &kernel);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (ow, oh) = (mu_a.width(), mu_a.height());
    let m = (ow * oh) as f64;

    let mut total = 0.0;
    // Per-window partials, divided by the window count up front.
    let mut g_mu = ScalarMap::zeros(ow, oh);
    let mut g_var = ScalarMap::zeros(ow, oh);
    let mut g_cov = ScalarMap::zeros(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let (ma, mb) = (mu_a.get(x, y), mu_b.get(x, y));
            let va = aa.get(x, y) - ma * ma;
            let vb = bb.get(x, y) - mb * mb;
            let cab = ab.get(x, y) - ma * mb;
            let a1 = 2.0 * ma * mb + c1;
            let a2 = 2.0 * cab + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = va + vb + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                let inv_b1b2 = 1.0 / (b1 * b2);
                g_mu.set(x, y, (2.0 * mb * a2 * inv_b1b2 - 2.0 * ma * s / b1) / m);
                g_var.set(x, y, (-s / b2) / m);
                g_cov.set(x, y, (2.0 * a1 * inv_b1b2) / m);
            }
        }
    }
    let value = total / m;
    if !want_grad {
        return Ok((value, None));
    }

    // dS/da_x = Σ_windows w·[g_mu + g_var·2(a_x − μ_a) + g_cov·(b_x − μ_b)]
    let adj_mu = conv_adjoint(&g_mu, &kernel, w, h);
    let adj_var = conv_adjoint(&g_var, &kernel, w, h);
    let adj_var_mu = conv_adjoint(&ScalarMap::from_fn(ow, oh, |x, y| g_var.get(x, y) * mu_a.get(x, y)), &kernel, w, h);
    let adj_cov = conv_adjoint(&g_cov, &kernel, w, h);
    let adj_cov_mu = conv_adjoint(&ScalarMap::from_fn(ow, oh, |x, y| g_cov.get(x, y) * mu_b.get(x, y)), &kernel, w, h);

    let mut grad = ImageRgb::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let d_gray = adj_mu.get(x, y)
                + 2.0 * ga.get(x, y) * adj_var.get(x, y)
                - 2.0 * adj_var_mu.get(x, y)
                + gb.get(x, y) * adj_cov.get(x, y)
                - adj_cov_mu.get(x, y);
            let per_channel = d_gray / 3.0;
            grad.set(x, y, [per_channel, per_channel, per_channel]);
        }
    }
    Ok((value, Some(grad)))
}

fn pearson_guard(a: &ScalarMap, b: &ScalarMap, mask: Option<&Mask>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if let Some(m) = mask {
        if m.width() != a.width() || m.height() != a.height() {
            return Err(Error::ShapeMismatch("mask shape differs from depth maps".into()));
        }
    }
    Ok(())
}

struct PearsonStats {
    idx: Vec<usize>,
    xc: Vec<f64>,
    yc: Vec<f64>,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn pearson_stats(d_render: &ScalarMap, d_pseudo: &ScalarMap, mask: Option<&Mask>) -> Result<PearsonStats> {
    let idx: Vec<usize> = (0..d_render.data().len())
        .filter(|&i| match mask {
            Some(m) => m.data()[i],
            None => true,
        })
        .collect();
    let n = idx.len();
    if n < 2 {
        return Err(Error::DegenerateDepth);
    }
    let nf = n as f64;
    let mean_x = idx.iter().map(|&i| d_render.data()[i]).sum::<f64>() / nf;
    let mean_y = idx.iter().map(|&i| d_pseudo.data()[i]).sum::<f64>() / nf;
    let xc: Vec<f64> = idx.iter().map(|&i| d_render.data()[i] - mean_x).collect();
    let yc: Vec<f64> = idx.iter().map(|&i| d_pseudo.data()[i] - mean_y).collect();
    let sxx: f64 = xc.iter().map(|v| v * v).sum();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    let sxy: f64 = xc.iter().zip(&yc).map(|(x, y)| x * y).sum();
    // Relative zero-variance test: constant maps are degenerate no matter
    // their magnitude.
    let degenerate = |s: f64, mean: f64| s / nf <= 1e-24 * (1.0 + mean * mean);
    if degenerate(sxx, mean_x) || degenerate(syy, mean_y) {
        return Err(Error::DegenerateDepth);
    }
    Ok(PearsonStats { idx, xc, yc, sxx, syy, sxy })
}

/// Pearson depth loss `1 − Sxy/√(Sxx·Syy)` over the valid set, in [0, 2].
pub fn pearson_depth_loss(d_render: &ScalarMap, d_pseudo: &ScalarMap, mask: Option<&Mask>) -> Result<f64> {
    pearson_guard(d_render, d_pseudo, mask)?;
    let st = pearson_stats(d_render, d_pseudo, mask)?;
    let r = st.sxy / (st.sxx * st.syy).sqrt();
    Ok((1.0 - r).clamp(0.0, 2.0))
}

/// Pearson depth loss plus its gradient with respect to `d_render`
/// (the pseudo depth is treated as constant).
pub fn pearson_depth_loss_with_grad(
    d_render: &ScalarMap,
    d_pseudo: &ScalarMap,
    mask: Option<&Mask>,
) -> Result<(f64, ScalarMap)> {
    pearson_guard(d_render, d_pseudo, mask)?;
    let st = pearson_stats(d_render, d_pseudo, mask)?;
    let denom = (st.sxx * st.syy).sqrt();
    let r = st.sxy / denom;
    let mut grad = ScalarMap::zeros(d_render.width(), d_render.height());
    // d(1−r)/dx_i = −(ỹ_i/√(Sxx·Syy) − r·x̃_i/Sxx); the centering terms
    // vanish because the centered vectors sum to zero.
    for (k, &i) in st.idx.iter().enumerate() {
        let d = -(st.yc[k] / denom - r * st.xc[k] / st.sxx);
        grad.data_mut()[i] = d;
    }
    Ok(((1.0 - r).clamp(0.0, 2.0), grad))
}

/// External metric seam: a perceptual distance (lower = more similar) and a
/// no-reference quality score in [0, 1] (higher = better). Implementations
/// must be deterministic.
pub trait MetricPlugin {
    fn perceptual_distance(&self, a: &ImageRgb, b: &ImageRgb) -> Result<f64>;
    fn nr_score(&self, img: &ImageRgb) -> Result<f64>;
}

/// Weights of the composite score; must be nonnegative and sum to 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricWeights {
    pub w_ssim: f64,
    pub w_perceptual: f64,
    pub w_nr: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self { w_ssim: 0.4, w_perceptual: 0.4, w_nr: 0.2 }
    }
}

impl MetricWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_ssim < 0.0 || self.w_perceptual < 0.0 || self.w_nr < 0.0 {
            return Err(Error::Config("composite weights must be nonnegative".into()));
        }
        let sum = self.w_ssim + self.w_perceptual + self.w_nr;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("composite weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// One multi-signal evaluation. Lower composite = better student.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub perceptual: f64,
    pub nr_quality: f64,
    pub composite: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "iteration,view_id,ssim,perceptual,nr_quality,composite";

    /// Serializes as a CSV row under [`Self::CSV_HEADER`].
    pub fn csv_row(&self, iteration: u64, view_id: &str) -> String {
        format!(
            "{iteration},{view_id},{},{},{},{}",
            self.ssim, self.perceptual, self.nr_quality, self.composite
        )
    }
}

/// Combined score: `w_s·(1−ssim) + w_p·perceptual + w_q·(1−nr)`.
pub fn composite_score(
    render: &ImageRgb,
    reference: &ImageRgb,
    plugin: &dyn MetricPlugin,
    weights: &MetricWeights,
) -> Result<MetricReport> {
    weights.validate()?;
    let ssim_v = ssim(render, reference)?;
    let perceptual = plugin.perceptual_distance(render, reference)?;
    let nr_quality = plugin.nr_score(render)?;
    let composite =
        weights.w_ssim * (1.0 - ssim_v) + weights.w_perceptual * perceptual + weights.w_nr * (1.0 - nr_quality);
    Ok(MetricReport { ssim: ssim_v, perceptual, nr_quality, composite })
}

/// Propagates a background mask from a teacher view to a student render.
///
/// `teacher_mask` uses the dataset convention `true = foreground`; its
/// complement defines the background coordinate set B_t. Per-channel mean
/// μ_s and std σ_s of the *student* image are computed over B_t (std floored
/// at 1e-3), and a student pixel is classified background iff
/// `|I_s(p) − μ_s| < τ·σ_s` holds strictly for all three channels.
///
/// The returned mask uses `true = background` (the M_s(p) = 1 convention of
/// the propagation rule); invert it for a foreground mask.
pub fn propagate_background_mask(
    teacher_img: &ImageRgb,
    teacher_mask: &Mask,
    student_img: &ImageRgb,
    tau: f64,
) -> Result<Mask> {
    if !teacher_img.same_shape(student_img)
        || teacher_mask.width() != teacher_img.width()
        || teacher_mask.height() != teacher_img.height()
    {
        return Err(Error::ShapeMismatch("mask propagation inputs differ in shape".into()));
    }
    let (w, h) = (student_img.width(), student_img.height());
    let bg: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| !teacher_mask.get(x, y))
        .collect();
    if bg.is_empty() {
        return Err(Error::EmptyBackground);
    }
    let n = bg.len() as f64;
    let mut mu = [0.0f64; 3];
    for &(x, y) in &bg {
        let p = student_img.get(x, y);
        for c in 0..3 {
            mu[c] += p[c];
        }
    }
    for c in 0..3 {
        mu[c] /= n;
    }
    let mut sigma = [0.0f64; 3];
    for &(x, y) in &bg {
        let p = student_img.get(x, y);
        for c in 0..3 {
            let d = p[c] - mu[c];
            sigma[c] += d * d;
        }
    }
    for s in &mut sigma {
        *s = (*s / n).sqrt().max(1e-3);
    }
    Ok(Mask::from_fn(w, h, |x, y| {
        let p = student_img.get(x, y);
        (0..3).all(|c| (p[c] - mu[c]).abs() < tau * sigma[c])
    }))
}

/// Gradient-magnitude map of the grayscale image (interior central
/// differences, zero at borders).
fn gradient_magnitude(gray: &ScalarMap) -> ScalarMap {
    let (w, h) = (gray.width(), gray.height());
    ScalarMap::from_fn(w, h, |x, y| {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return 0.0;
        }
        let gx = (gray.get(x + 1, y) - gray.get(x - 1, y)) / 2.0;
        let gy = (gray.get(x, y + 1) - gray.get(x, y - 1)) / 2.0;
        (gx * gx + gy * gy).sqrt()
    })
}

/// 2×2 box downsample (floor halving; a trailing odd row/column is dropped).
fn downsample(gray: &ScalarMap) -> ScalarMap {
    let (w, h) = (gray.width() / 2, gray.height() / 2);
    ScalarMap::from_fn(w, h, |x, y| {
        (gray.get(2 * x, 2 * y)
            + gray.get(2 * x + 1, 2 * y)
            + gray.get(2 * x, 2 * y + 1)
            + gray.get(2 * x + 1, 2 * y + 1))
            / 4.0
    })
}

/// Perceptual proxy: mean absolute difference between gradient-magnitude
/// maps at three dyadic scales. Zero iff the gradient structure matches.
pub fn builtin_perceptual(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut ga = a.to_gray();
    let mut gb = b.to_gray();
    let mut total = 0.0;
    let mut scales = 0;
    for _ in 0..3 {
        if ga.width() < 3 || ga.height() < 3 {
            break;
        }
        let ma = gradient_magnitude(&ga);
        let mb = gradient_magnitude(&gb);
        let n = ma.data().len() as f64;
        total += ma
            .data()
            .iter()
            .zip(mb.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
        scales += 1;
        ga = downsample(&ga);
        gb = downsample(&gb);
    }
    if scales == 0 {
        return Err(Error::TooSmall { width: a.width(), height: a.height() });
    }
    Ok(total / scales as f64)
}

/// Defaults of the no-reference proxy; `v0` is the Laplacian variance at
/// which the sharpness term crosses 0.5, `w` its log-domain softness.
pub const NR_DEFAULT_V0: f64 = 2e-5;
pub const NR_DEFAULT_W: f64 = 2.0;

/// No-reference quality proxy in [0, 1]: exposure-validity fraction times a
/// logistic in log Laplacian variance. Constant images score 0.
pub fn builtin_nr_score(img: &ImageRgb, v0: f64, w: f64) -> Result<f64> {
    let gray = img.to_gray();
    let (width, height) = (gray.width(), gray.height());
    if width < 3 || height < 3 {
        return Err(Error::TooSmall { width, height });
    }
    let n = (width * height) as f64;
    let valid = gray.data().iter().filter(|&&v| (0.02..=0.98).contains(&v)).count() as f64;
    let exposure = valid / n;

    let mut lap = Vec::with_capacity((width - 2) * (height - 2));
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            lap.push(
                gray.get(x + 1, y) + gray.get(x - 1, y) + gray.get(x, y + 1) + gray.get(x, y - 1)
                    - 4.0 * gray.get(x, y),
            );
        }
    }
    let ln = lap.len() as f64;
    let mean = lap.iter().sum::<f64>() / ln;
    let var = lap.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ln;
    if var <= f64::MIN_POSITIVE {
        return Ok(0.0);
    }
    let sharpness = 1.0 / (1.0 + (-((var.ln() - v0.ln()) / w)).exp());
    Ok(exposure * sharpness)
}

/// Default plugin wiring the built-in proxies.
#[derive(Clone, Copy, Debug)]
pub struct BuiltinMetrics {
    pub nr_v0: f64,
    pub nr_w: f64,
}

impl Default for BuiltinMetrics {
    fn default() -> Self {
        Self { nr_v0: NR_DEFAULT_V0, nr_w: NR_DEFAULT_W }
    }
}

impl MetricPlugin for BuiltinMetrics {
    fn perceptual_distance(&self, a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
        builtin_perceptual(a, b)
    }

    fn nr_score(&self, img: &ImageRgb) -> Result<f64> {
        builtin_nr_score(img, self.nr_v0, self.nr_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::from_fn(w, h, |_, _| {
            [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
        })
    }

    /// Smooth procedural "natural" test image: overlapping blobs and waves.
    fn natural_image(w: usize, h: usize) -> ImageRgb {
        ImageRgb::from_fn(w, h, |x, y| {
            let (xf, yf) = (x as f64 / w as f64, y as f64 / h as f64);
            let r = 0.5 + 0.3 * (xf * 9.0).sin() * (yf * 7.0).cos();
            let g = 0.5 + 0.25 * ((xf - 0.3) * 13.0).cos() + 0.1 * (yf * 5.0).sin();
            let b = 0.4 + 0.35 * (-((xf - 0.6) * (xf - 0.6) + (yf - 0.4) * (yf - 0.4)) * 18.0).exp();
            [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]
        })
    }

    fn gaussian_blur(img: &ImageRgb, sigma: f64) -> ImageRgb {
        let radius = (3.0 * sigma).ceil() as i64;
        let weights: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let wsum: f64 = weights.iter().sum();
        let (w, h) = (img.width() as i64, img.height() as i64);
        let sample = |x: i64, y: i64| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
        let mut tmp = ImageRgb::zeros(img.width(), img.height());
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (i, wt) in weights.iter().enumerate() {
                    let p = sample(x + i as i64 - radius, y);
                    for c in 0..3 {
                        acc[c] += wt * p[c];
                    }
                }
                tmp.set(x as usize, y as usize, [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum]);
            }
        }
        let sample2 = |img: &ImageRgb, x: i64, y: i64| {
            img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize)
        };
        let mut out = ImageRgb::zeros(img.width(), img.height());
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (j, wt) in weights.iter().enumerate() {
                    let p = sample2(&tmp, x, y + j as i64 - radius);
                    for c in 0..3 {
                        acc[c] += wt * p[c];
                    }
                }
                out.set(x as usize, y as usize, [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum]);
            }
        }
        out
    }

    #[test]
    fn psnr_identity_capped() {
        let img = random_image(16, 12, 1);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_uniform_half() {
        let a = ImageRgb::zeros(10, 10);
        let b = ImageRgb::from_fn(10, 10, |_, _| [0.5; 3]);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 10.0 * (1.0f64 / 0.25).log10(), epsilon = 1e-12);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 6.0206, epsilon = 1e-4);
    }

    #[test]
    fn psnr_matches_direct_sum_oracle() {
        let a = random_image(9, 7, 2);
        let b = random_image(9, 7, 3);
        let mut sum = 0.0;
        for y in 0..7 {
            for x in 0..9 {
                let (pa, pb) = (a.get(x, y), b.get(x, y));
                for c in 0..3 {
                    sum += (pa[c] - pb[c]) * (pa[c] - pb[c]);
                }
            }
        }
        let oracle = 10.0 * (1.0 / (sum / (9.0 * 7.0 * 3.0))).log10();
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), oracle, epsilon = 1e-9);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = random_image(8, 8, 1);
        let b = random_image(9, 8, 1);
        assert!(matches!(psnr(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ssim_identity_is_one() {
        let img = random_image(20, 16, 4);
        assert_abs_diff_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_symmetry() {
        let a = random_image(18, 18, 5);
        let b = random_image(18, 18, 6);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn ssim_checkerboard_inverse_negative() {
        let a = ImageRgb::from_fn(16, 16, |x, y| {
            let v = ((x + y) % 2) as f64;
            [v, v, v]
        });
        let b = ImageRgb::from_fn(16, 16, |x, y| {
            let v = 1.0 - ((x + y) % 2) as f64;
            [v, v, v]
        });
        assert!(ssim(&a, &b).unwrap() < 0.0, "anticorrelated structure must score negative");
    }

    #[test]
    fn ssim_blur_ordering() {
        let img = natural_image(48, 40);
        let small = gaussian_blur(&img, 1.0);
        let large = gaussian_blur(&img, 3.0);
        let s_small = ssim(&img, &small).unwrap();
        let s_large = ssim(&img, &large).unwrap();
        assert!(s_large < s_small && s_small < 1.0, "{s_large} < {s_small} < 1 violated");
    }

    #[test]
    fn ssim_too_small() {
        let a = random_image(10, 15, 7);
        assert!(matches!(ssim(&a, &a), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        // Direct double-loop evaluation of the SSIM definition.
        let a = random_image(15, 14, 8);
        let b = random_image(15, 14, 9);
        let kernel = ssim_kernel();
        let (ga, gb) = (a.to_gray(), b.to_gray());
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        let mut count = 0.0;
        for wy in 0..(14 - 10) {
            for wx in 0..(15 - 10) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = kernel[i] * kernel[j];
                        ma += wgt * ga.get(wx + i, wy + j);
                        mb += wgt * gb.get(wx + i, wy + j);
                    }
                }
                let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = kernel[i] * kernel[j];
                        let da = ga.get(wx + i, wy + j) - ma;
                        let db = gb.get(wx + i, wy + j) - mb;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cab += wgt * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        let oracle = total / count;
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut a = random_image(14, 13, 10);
        let b = random_image(14, 13, 11);
        let (_, grad) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let x = rng.gen_range(0..14);
            let y = rng.gen_range(0..13);
            let c = rng.gen_range(0..3);
            let mut px = a.get(x, y);
            let orig = px[c];
            px[c] = orig + h;
            a.set(x, y, px);
            let plus = ssim(&a, &b).unwrap();
            px[c] = orig - h;
            a.set(x, y, px);
            let minus = ssim(&a, &b).unwrap();
            px[c] = orig;
            a.set(x, y, px);
            let fd = (plus - minus) / (2.0 * h);
            let an = grad.get(x, y)[c];
            assert!(
                (fd - an).abs() <= 1e-3 * an.abs().max(fd.abs()) + 1e-9,
                "pixel ({x},{y},{c}): fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn pearson_basic_cases() {
        let d = ScalarMap::from_fn(8, 8, |x, y| 1.0 + (x * y) as f64 * 0.1 + x as f64 * 0.02);
        assert_abs_diff_eq!(pearson_depth_loss(&d, &d, None).unwrap(), 0.0, epsilon = 1e-12);
        let anti = d.map(|v| -v + 7.0);
        assert_abs_diff_eq!(pearson_depth_loss(&d, &anti, None).unwrap(), 2.0, epsilon = 1e-12);
        let affine = d.map(|v| 3.0 * v + 5.0);
        assert_abs_diff_eq!(pearson_depth_loss(&d, &affine, None).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn pearson_degenerate_detection() {
        let d = ScalarMap::from_fn(8, 8, |x, _| x as f64);
        let flat = ScalarMap::from_fn(8, 8, |_, _| 3.5);
        assert!(matches!(pearson_depth_loss(&d, &flat, None), Err(Error::DegenerateDepth)));
        assert!(matches!(pearson_depth_loss(&flat, &d, None), Err(Error::DegenerateDepth)));
    }

    #[test]
    fn pearson_respects_mask() {
        // Values outside the mask are wild; inside, y = 2x.
        let x = ScalarMap::from_fn(6, 6, |i, j| (i + j) as f64);
        let mut y = x.map(|v| 2.0 * v);
        y.set(0, 0, -100.0);
        let mut mask = Mask::filled(6, 6, true);
        mask.set(0, 0, false);
        assert_abs_diff_eq!(pearson_depth_loss(&x, &y, Some(&mask)).unwrap(), 0.0, epsilon = 1e-12);
        assert!(pearson_depth_loss(&x, &y, None).unwrap() > 1e-3);
    }

    #[test]
    fn pearson_gradient_matches_finite_differences() {
        let mut x = ScalarMap::from_fn(7, 6, |i, j| ((i * 3 + j * 7) % 11) as f64 * 0.3 + 1.0);
        let y = ScalarMap::from_fn(7, 6, |i, j| ((i * 5 + j * 2) % 13) as f64 * 0.2 + 2.0);
        let (_, grad) = pearson_depth_loss_with_grad(&x, &y, None).unwrap();
        let h = 1e-6;
        for i in 0..x.data().len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let plus = pearson_depth_loss(&x, &y, None).unwrap();
            x.data_mut()[i] = orig - h;
            let minus = pearson_depth_loss(&x, &y, None).unwrap();
            x.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = grad.data()[i];
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(fd.abs()) + 1e-10,
                "pixel {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    struct FixedPlugin {
        perceptual: f64,
        nr: f64,
    }

    impl MetricPlugin for FixedPlugin {
        fn perceptual_distance(&self, _: &ImageRgb, _: &ImageRgb) -> Result<f64> {
            Ok(self.perceptual)
        }
        fn nr_score(&self, _: &ImageRgb) -> Result<f64> {
            Ok(self.nr)
        }
    }

    #[test]
    fn composite_identity_zero() {
        let img = random_image(16, 16, 13);
        let plugin = FixedPlugin { perceptual: 0.0, nr: 1.0 };
        let report = composite_score(&img, &img, &plugin, &MetricWeights::default()).unwrap();
        assert!(report.composite.abs() < 1e-9, "composite {}", report.composite);
    }

    #[test]
    fn composite_weight_isolation() {
        let a = random_image(16, 16, 14);
        let b = random_image(16, 16, 15);
        let plugin = FixedPlugin { perceptual: 0.7, nr: 0.3 };
        let weights = MetricWeights { w_ssim: 1.0, w_perceptual: 0.0, w_nr: 0.0 };
        let report = composite_score(&a, &b, &plugin, &weights).unwrap();
        assert_abs_diff_eq!(report.composite, 1.0 - report.ssim, epsilon = 1e-12);
    }

    #[test]
    fn composite_recomposition_oracle() {
        let a = random_image(16, 16, 16);
        let b = random_image(16, 16, 17);
        let plugin = BuiltinMetrics::default();
        let weights = MetricWeights::default();
        let report = composite_score(&a, &b, &plugin, &weights).unwrap();
        let hand = weights.w_ssim * (1.0 - ssim(&a, &b).unwrap())
            + weights.w_perceptual * builtin_perceptual(&a, &b).unwrap()
            + weights.w_nr * (1.0 - builtin_nr_score(&a, NR_DEFAULT_V0, NR_DEFAULT_W).unwrap());
        assert_abs_diff_eq!(report.composite, hand, epsilon = 1e-12);
    }

    #[test]
    fn composite_monotone_in_perceptual() {
        let a = random_image(16, 16, 18);
        let b = random_image(16, 16, 19);
        let weights = MetricWeights::default();
        let lo = composite_score(&a, &b, &FixedPlugin { perceptual: 0.1, nr: 0.5 }, &weights).unwrap();
        let hi = composite_score(&a, &b, &FixedPlugin { perceptual: 0.9, nr: 0.5 }, &weights).unwrap();
        assert!(hi.composite > lo.composite);
    }

    #[test]
    fn mask_propagation_identity_superset() {
        // Uniform background: the propagated background covers the
        // teacher's background region.
        let img = ImageRgb::from_fn(12, 12, |x, y| {
            if x >= 4 && x < 8 && y >= 4 && y < 8 {
                [0.9, 0.2, 0.2]
            } else {
                [0.1, 0.1, 0.1]
            }
        });
        let fg = Mask::from_fn(12, 12, |x, y| x >= 4 && x < 8 && y >= 4 && y < 8);
        let bg = propagate_background_mask(&img, &fg, &img, 3.0).unwrap();
        assert!(fg.invert().subset_of(&bg));
    }

    #[test]
    fn mask_propagation_tau_zero_empty() {
        let img = random_image(10, 10, 20);
        let fg = Mask::from_fn(10, 10, |x, _| x < 5);
        let bg = propagate_background_mask(&img, &fg, &img, 0.0).unwrap();
        assert_eq!(bg.count_true(), 0);
    }

    #[test]
    fn mask_propagation_matches_rule_oracle() {
        // Two-region student image with a small ramp so σ is nontrivial.
        let student = ImageRgb::from_fn(16, 12, |x, y| {
            if y < 6 {
                [0.2 + 0.001 * x as f64, 0.3, 0.4]
            } else {
                [0.8, 0.7, 0.6]
            }
        });
        let teacher_fg = Mask::from_fn(16, 12, |_, y| y >= 6);
        let tau = 2.5;
        let out = propagate_background_mask(&student, &teacher_fg, &student, tau).unwrap();

        // Direct per-pixel evaluation of the rule.
        let mut mu = [0.0f64; 3];
        let mut n = 0.0;
        for y in 0..6 {
            for x in 0..16 {
                let p = student.get(x, y);
                for c in 0..3 {
                    mu[c] += p[c];
                }
                n += 1.0;
            }
        }
        for c in 0..3 {
            mu[c] /= n;
        }
        let mut sig = [0.0f64; 3];
        for y in 0..6 {
            for x in 0..16 {
                let p = student.get(x, y);
                for c in 0..3 {
                    sig[c] += (p[c] - mu[c]) * (p[c] - mu[c]);
                }
            }
        }
        for s in &mut sig {
            *s = (*s / n).sqrt().max(1e-3);
        }
        for y in 0..12 {
            for x in 0..16 {
                let p = student.get(x, y);
                let expect = (0..3).all(|c| (p[c] - mu[c]).abs() < tau * sig[c]);
                assert_eq!(out.get(x, y), expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn mask_propagation_monotone_in_tau() {
        let student = random_image(14, 14, 21);
        let teacher_fg = Mask::from_fn(14, 14, |x, y| (x + 2 * y) % 5 == 0);
        let m1 = propagate_background_mask(&student, &teacher_fg, &student, 1.0).unwrap();
        let m2 = propagate_background_mask(&student, &teacher_fg, &student, 2.5).unwrap();
        assert!(m1.subset_of(&m2));
    }

    #[test]
    fn mask_propagation_requires_background() {
        let img = random_image(8, 8, 22);
        let all_fg = Mask::filled(8, 8, true);
        assert!(matches!(
            propagate_background_mask(&img, &all_fg, &img, 2.0),
            Err(Error::EmptyBackground)
        ));
    }

    #[test]
    fn builtin_perceptual_identity_zero() {
        let img = natural_image(32, 24);
        assert_eq!(builtin_perceptual(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn nr_score_constant_image_zero() {
        let img = ImageRgb::from_fn(16, 16, |_, _| [0.5; 3]);
        assert_eq!(builtin_nr_score(&img, NR_DEFAULT_V0, NR_DEFAULT_W).unwrap(), 0.0);
    }

    #[test]
    fn nr_score_blur_ordering() {
        let img = natural_image(48, 40);
        let blurred = gaussian_blur(&img, 4.0);
        let sharp = builtin_nr_score(&img, NR_DEFAULT_V0, NR_DEFAULT_W).unwrap();
        let soft = builtin_nr_score(&blurred, NR_DEFAULT_V0, NR_DEFAULT_W).unwrap();
        assert!(sharp > soft, "sharp {sharp} vs blurred {soft}");
    }
}
