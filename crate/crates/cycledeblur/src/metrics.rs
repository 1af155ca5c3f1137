//! Full-reference image quality metrics: PSNR over all samples, SSIM and
//! multi-scale SSIM on Rec.601 luminance, and pixel-domain VIF over a
//! Gaussian scale space. All internal arithmetic runs at f64 regardless of
//! the image precision.

use std::path::PathBuf;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::img::{Image, ImageError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("image {h}x{w} smaller than required {min}x{min}")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("pair {name}: {source}")]
    Pair {
        name: String,
        #[source]
        source: Box<MetricError>,
    },
}

/// SSIM configuration. The window is Gaussian and normalized to unit mass.
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Published five-scale weights; kept verbatim (they sum to 1.0001).
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Variance of the assumed additive channel noise in the VIF model, on the
/// 0..255 intensity scale.
pub const VIF_SIGMA_NSQ: f64 = 2.0;

fn check_shapes<S: Real>(a: &Image<S>, b: &Image<S>) -> Result<(), MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::ShapeMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    Ok(())
}

fn luma_f64<S: Real>(img: &Image<S>) -> Result<Array2<f64>, MetricError> {
    let l = img.to_luma()?;
    let (h, w, _) = l.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        l.get(y, x, 0).as_f64()
    }))
}

/// Normalized 1-D Gaussian taps.
fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable correlation keeping only fully covered (valid) positions.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::zeros((h, ow));
    for y in 0..h {
        for ox in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += x[[y, ox + i]] * kv;
            }
            rows[[y, ox]] = s;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += rows[[oy + i, ox]] * kv;
            }
            out[[oy, ox]] = s;
        }
    }
    out
}

/// Peak signal-to-noise ratio in dB over every sample of every channel.
/// Identical inputs return the +infinity sentinel.
pub fn psnr<S: Real>(reference: &Image<S>, distorted: &Image<S>) -> Result<f64, MetricError> {
    check_shapes(reference, distorted)?;
    let a = reference.data();
    let b = distorted.data();
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean per-window similarity and mean contrast-structure term.
fn ssim_means(
    lx: &Array2<f64>,
    ly: &Array2<f64>,
    p: &SsimParams,
) -> Result<(f64, f64), MetricError> {
    let (h, w) = lx.dim();
    if h < p.window || w < p.window {
        return Err(MetricError::TooSmall {
            h,
            w,
            min: p.window,
        });
    }
    let k = gaussian_kernel(p.window, p.sigma);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let mu_x = filter_valid(lx, &k);
    let mu_y = filter_valid(ly, &k);
    let xx = filter_valid(&(lx * lx), &k);
    let yy = filter_valid(&(ly * ly), &k);
    let xy = filter_valid(&(lx * ly), &k);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let count = mu_x.len() as f64;
    for ((mx, my), ((sxx, syy), sxy)) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let cs = (2.0 * cov + c2) / (var_x + var_y + c2);
        let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    Ok((ssim_sum / count, cs_sum / count))
}

pub fn ssim_with<S: Real>(
    reference: &Image<S>,
    distorted: &Image<S>,
    p: &SsimParams,
) -> Result<f64, MetricError> {
    check_shapes(reference, distorted)?;
    let lx = luma_f64(reference)?;
    let ly = luma_f64(distorted)?;
    Ok(ssim_means(&lx, &ly, p)?.0)
}

pub fn ssim<S: Real>(reference: &Image<S>, distorted: &Image<S>) -> Result<f64, MetricError> {
    ssim_with(reference, distorted, &SsimParams::default())
}

/// 2x2 mean pooling with stride 2; a trailing odd row/column is dropped.
fn downsample2(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array2::from_shape_fn((oh, ow), |(y, c)| {
        0.25 * (x[[2 * y, 2 * c]] + x[[2 * y, 2 * c + 1]] + x[[2 * y + 1, 2 * c]] + x[[2 * y + 1, 2 * c + 1]])
    })
}

/// Multi-scale SSIM with explicit per-scale weights: contrast-structure
/// means at every scale but the last, the full similarity mean at the
/// coarsest scale, combined as a weighted geometric product. Negative means
/// clamp to zero before exponentiation.
pub fn ms_ssim_with<S: Real>(
    reference: &Image<S>,
    distorted: &Image<S>,
    weights: &[f64],
) -> Result<f64, MetricError> {
    assert!(!weights.is_empty(), "need at least one scale weight");
    check_shapes(reference, distorted)?;
    let p = SsimParams::default();
    let scales = weights.len();
    let min = p.window << (scales - 1);
    let (h, w, _) = reference.dim();
    if h < min || w < min {
        return Err(MetricError::TooSmall { h, w, min });
    }
    let mut lx = luma_f64(reference)?;
    let mut ly = luma_f64(distorted)?;
    let mut score = 1.0;
    for (j, &wt) in weights.iter().enumerate() {
        let (ssim_mean, cs_mean) = ssim_means(&lx, &ly, &p)?;
        let term = if j + 1 == scales { ssim_mean } else { cs_mean };
        score *= term.max(0.0).powf(wt);
        if j + 1 < scales {
            lx = downsample2(&lx);
            ly = downsample2(&ly);
        }
    }
    Ok(score)
}

pub fn ms_ssim<S: Real>(reference: &Image<S>, distorted: &Image<S>) -> Result<f64, MetricError> {
    ms_ssim_with(reference, distorted, &MS_SSIM_WEIGHTS)
}

fn largest_odd_below(n: usize) -> usize {
    if n % 2 == 0 {
        n.saturating_sub(1)
    } else {
        n
    }
}

/// Pixel-domain visual information fidelity over four Gaussian scales.
/// Luminance is taken to the 0..255 range to match the noise variance
/// convention. Windows shrink to fit small inputs; a reference with no
/// information at all scores 1 by convention.
pub fn vif_pixel<S: Real>(reference: &Image<S>, distorted: &Image<S>) -> Result<f64, MetricError> {
    check_shapes(reference, distorted)?;
    let (h, w, _) = reference.dim();
    if h < 8 || w < 8 {
        return Err(MetricError::TooSmall { h, w, min: 8 });
    }
    let mut rf = luma_f64(reference)?.mapv(|v| v * 255.0);
    let mut df = luma_f64(distorted)?.mapv(|v| v * 255.0);
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    const EPS: f64 = 1e-10;
    for scale in 1..=4usize {
        let n_std = (1usize << (5 - scale)) + 1;
        let side = rf.dim().0.min(rf.dim().1);
        let n = largest_odd_below(n_std.min(side));
        if n == 0 {
            break;
        }
        let win = gaussian_kernel(n, n as f64 / 5.0);
        if scale > 1 {
            rf = filter_valid(&rf, &win);
            df = filter_valid(&df, &win);
            rf = rf.slice(s![..;2, ..;2]).to_owned();
            df = df.slice(s![..;2, ..;2]).to_owned();
            let side = rf.dim().0.min(rf.dim().1);
            if side < n {
                break;
            }
        }
        let mu1 = filter_valid(&rf, &win);
        let mu2 = filter_valid(&df, &win);
        let s11 = filter_valid(&(&rf * &rf), &win);
        let s22 = filter_valid(&(&df * &df), &win);
        let s12 = filter_valid(&(&rf * &df), &win);
        for ((m1, m2), ((v11, v22), v12)) in mu1
            .iter()
            .zip(mu2.iter())
            .zip(s11.iter().zip(s22.iter()).zip(s12.iter()))
        {
            let mut sigma1_sq = (v11 - m1 * m1).max(0.0);
            let sigma2_sq = (v22 - m2 * m2).max(0.0);
            let sigma12 = v12 - m1 * m2;
            let mut g = sigma12 / (sigma1_sq + EPS);
            let mut sv_sq = sigma2_sq - g * sigma12;
            if sigma1_sq < EPS {
                g = 0.0;
                sv_sq = sigma2_sq;
                sigma1_sq = 0.0;
            }
            if sigma2_sq < EPS {
                g = 0.0;
                sv_sq = 0.0;
            }
            if g < 0.0 {
                sv_sq = sigma2_sq;
                g = 0.0;
            }
            if sv_sq <= EPS {
                sv_sq = EPS;
            }
            num += (1.0 + g * g * sigma1_sq / (sv_sq + VIF_SIGMA_NSQ)).log10();
            den += (1.0 + sigma1_sq / VIF_SIGMA_NSQ).log10();
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Psnr,
    Ssim,
    MsSsim,
    Vif,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Psnr,
        MetricKind::Ssim,
        MetricKind::MsSsim,
        MetricKind::Vif,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Psnr => "psnr",
            MetricKind::Ssim => "ssim",
            MetricKind::MsSsim => "ms_ssim",
            MetricKind::Vif => "vif",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }
}

pub fn compute_metric<S: Real>(
    kind: MetricKind,
    reference: &Image<S>,
    distorted: &Image<S>,
) -> Result<f64, MetricError> {
    match kind {
        MetricKind::Psnr => psnr(reference, distorted),
        MetricKind::Ssim => ssim(reference, distorted),
        MetricKind::MsSsim => ms_ssim(reference, distorted),
        MetricKind::Vif => vif_pixel(reference, distorted),
    }
}

/// One evaluation item: a reference image and the image judged against it.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub name: String,
    pub reference: PathBuf,
    pub distorted: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub values: Vec<f64>,
}

/// Per-image rows in input order plus the arithmetic column means.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub metrics: Vec<MetricKind>,
    pub rows: Vec<MetricRow>,
    pub means: Vec<f64>,
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name");
        for m in &self.metrics {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.name);
            for v in &row.values {
                out.push(',');
                out.push_str(&fmt_value(*v));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for v in &self.means {
            out.push(',');
            out.push_str(&fmt_value(*v));
        }
        out.push('\n');
        out
    }

    /// Fixed-width text table, one row per image plus the mean row.
    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["image".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let col_w = 12usize;
        let mut out = format!("{:<name_w$}", "image");
        for m in &self.metrics {
            out.push_str(&format!(" {:>col_w$}", m.name().to_uppercase()));
        }
        out.push('\n');
        out.push_str(&"-".repeat(name_w + (col_w + 1) * self.metrics.len()));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<name_w$}", row.name));
            for v in &row.values {
                out.push_str(&format!(" {:>col_w$}", fmt_value(*v)));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<name_w$}", "mean"));
        for v in &self.means {
            out.push_str(&format!(" {:>col_w$}", fmt_value(*v)));
        }
        out.push('\n');
        out
    }
}

/// Evaluate every pair in order and append column means. Any failure is
/// wrapped with the offending pair's name.
pub fn evaluate_corpus(
    pairs: &[EvalPair],
    metrics: &[MetricKind],
) -> Result<MetricReport, MetricError> {
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let wrap = |e: MetricError| MetricError::Pair {
            name: pair.name.clone(),
            source: Box::new(e),
        };
        let reference = Image::<f64>::load(&pair.reference).map_err(|e| wrap(e.into()))?;
        let distorted = Image::<f64>::load(&pair.distorted).map_err(|e| wrap(e.into()))?;
        let values = metrics
            .iter()
            .map(|&k| compute_metric(k, &reference, &distorted).map_err(wrap))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(MetricRow {
            name: pair.name.clone(),
            values,
        });
    }
    let n = rows.len().max(1) as f64;
    let means = (0..metrics.len())
        .map(|j| rows.iter().map(|r| r.values[j]).sum::<f64>() / n)
        .collect();
    Ok(MetricReport {
        metrics: metrics.to_vec(),
        rows,
        means,
    })
}
