//! Synthetic motion blur: random camera shake trajectories, their rasterized
//! convolution kernels, and the degradation model `blurred = sharp * k + n`
//! (shift-invariant convolution with a normalized nonnegative kernel plus
//! additive Gaussian noise, clamped back into storage range).

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::img::{Image, ImageError};
use crate::scalar::{derive_seed, Real};

#[derive(Debug, Error)]
pub enum BlurError {
    #[error("trajectory: num_steps must be >= 1, got {got}")]
    BadSteps { got: usize },
    #[error("trajectory: {name} must be finite and nonnegative, got {got}")]
    BadParam { name: &'static str, got: f64 },
    #[error("trajectory: exposure_fraction must be in (0, 1], got {got}")]
    BadExposure { got: f64 },
    #[error("trajectory: impulse_prob must be in [0, 1], got {got}")]
    BadImpulseProb { got: f64 },
    #[error("kernel size must be odd and >= 1, got {got}")]
    BadKernelSize { got: usize },
    #[error("kernel weights must be nonnegative, found {got} at ({y}, {x})")]
    NegativeWeight { y: usize, x: usize, got: f64 },
    #[error("kernel weights sum to {got}, expected 1 within {tol}")]
    NotNormalized { got: f64, tol: f64 },
    #[error("kernel weights contain a non-finite value")]
    NonFiniteWeight,
    #[error("trajectory lands entirely outside the {size}x{size} kernel grid")]
    PathOutsideGrid { size: usize },
    #[error("noise sigma must be finite and nonnegative, got {got}")]
    BadSigma { got: f64 },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Parameters of the second-order Markov camera-shake walk.
///
/// Per step the velocity receives an anxiety-scaled Gaussian kick plus an
/// anxiety-scaled pull toward the running centroid of the path; with
/// probability `impulse_prob` it is instead first flipped (rotated by
/// pi + U(-0.5, 0.5)) and doubled, modelling sudden shake reversals. The
/// finished path is rescaled about its bounding-box center so the larger
/// bbox extent equals `max_extent` pixels (degenerate still paths are left
/// alone). `exposure_fraction` selects the prefix of the path that the
/// kernel rasterizer integrates.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryParams {
    pub num_steps: usize,
    pub exposure_fraction: f64,
    pub impulse_prob: f64,
    pub anxiety: f64,
    pub max_extent: f64,
    pub seed: u64,
}

impl TrajectoryParams {
    /// Spec defaults for a 31x31 kernel.
    pub fn new(seed: u64) -> Self {
        TrajectoryParams {
            num_steps: 2000,
            exposure_fraction: 1.0,
            impulse_prob: 0.005,
            anxiety: 0.005,
            max_extent: 0.75 * 31.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), BlurError> {
        if self.num_steps == 0 {
            return Err(BlurError::BadSteps { got: self.num_steps });
        }
        if !self.anxiety.is_finite() || self.anxiety < 0.0 {
            return Err(BlurError::BadParam {
                name: "anxiety",
                got: self.anxiety,
            });
        }
        if !self.max_extent.is_finite() || self.max_extent < 0.0 {
            return Err(BlurError::BadParam {
                name: "max_extent",
                got: self.max_extent,
            });
        }
        if !(self.exposure_fraction > 0.0 && self.exposure_fraction <= 1.0) {
            return Err(BlurError::BadExposure {
                got: self.exposure_fraction,
            });
        }
        if !(0.0..=1.0).contains(&self.impulse_prob) {
            return Err(BlurError::BadImpulseProb {
                got: self.impulse_prob,
            });
        }
        Ok(())
    }
}

/// Additive Gaussian pixel noise applied after convolution.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { sigma: 0.0, seed: 0 }
    }
}

/// Continuous sub-pixel camera path, `num_steps` points of `[x, y]`.
pub fn generate_trajectory(p: &TrajectoryParams) -> Result<Vec<[f64; 2]>, BlurError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut gauss = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);

    let n = p.num_steps;
    let mut pts = Vec::with_capacity(n);
    let mut pos = [0.0f64, 0.0];
    let mut sum = [0.0f64, 0.0];
    pts.push(pos);
    sum[0] += pos[0];
    sum[1] += pos[1];

    let mut rng2 = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, &[0x1]));
    let mut vel = [p.anxiety * gauss(), p.anxiety * gauss()];
    for t in 1..n {
        if rng2.gen::<f64>() < p.impulse_prob {
            // Shake reversal: rotate by pi plus jitter and double the speed.
            let ang = std::f64::consts::PI + (rng2.gen::<f64>() - 0.5);
            let (sin, cos) = ang.sin_cos();
            vel = [
                2.0 * (vel[0] * cos - vel[1] * sin),
                2.0 * (vel[0] * sin + vel[1] * cos),
            ];
        }
        let centroid = [sum[0] / t as f64, sum[1] / t as f64];
        vel[0] += p.anxiety * gauss() + p.anxiety * (centroid[0] - pos[0]);
        vel[1] += p.anxiety * gauss() + p.anxiety * (centroid[1] - pos[1]);
        pos = [pos[0] + vel[0], pos[1] + vel[1]];
        pts.push(pos);
        sum[0] += pos[0];
        sum[1] += pos[1];
    }

    // Rescale so the larger bbox extent matches max_extent, then translate
    // the bbox center to the origin (the kernel rasterizer maps the origin
    // to the grid center).
    let (min_x, max_x) = minmax(pts.iter().map(|p| p[0]));
    let (min_y, max_y) = minmax(pts.iter().map(|p| p[1]));
    let extent = (max_x - min_x).max(max_y - min_y);
    let scale = if extent > 1e-12 { p.max_extent / extent } else { 1.0 };
    let cx = 0.5 * (min_x + max_x);
    let cy = 0.5 * (min_y + max_y);
    for pt in &mut pts {
        pt[0] = (pt[0] - cx) * scale;
        pt[1] = (pt[1] - cy) * scale;
    }
    Ok(pts)
}

fn minmax(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// A normalized, nonnegative convolution kernel. Weights are kept at f64 so
/// normalization holds to 1e-6 regardless of the pipeline scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    weights: Array2<f64>,
}

impl BlurKernel {
    pub const NORM_TOL: f64 = 1e-6;

    pub fn new(weights: Array2<f64>) -> Result<Self, BlurError> {
        let (h, w) = weights.dim();
        if h != w || h % 2 == 0 || h == 0 {
            return Err(BlurError::BadKernelSize { got: h.max(w) });
        }
        let mut sum = 0.0;
        for ((y, x), &v) in weights.indexed_iter() {
            if !v.is_finite() {
                return Err(BlurError::NonFiniteWeight);
            }
            if v < 0.0 {
                return Err(BlurError::NegativeWeight { y, x, got: v });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > Self::NORM_TOL {
            return Err(BlurError::NotNormalized {
                got: sum,
                tol: Self::NORM_TOL,
            });
        }
        Ok(BlurKernel { weights })
    }

    /// Identity kernel: all mass at the center tap.
    pub fn delta(size: usize) -> Result<Self, BlurError> {
        if size % 2 == 0 || size == 0 {
            return Err(BlurError::BadKernelSize { got: size });
        }
        let mut w = Array2::zeros((size, size));
        w[[size / 2, size / 2]] = 1.0;
        BlurKernel::new(w)
    }

    pub fn uniform(size: usize) -> Result<Self, BlurError> {
        if size % 2 == 0 || size == 0 {
            return Err(BlurError::BadKernelSize { got: size });
        }
        BlurKernel::new(Array2::from_elem((size, size), 1.0 / (size * size) as f64))
    }

    pub fn size(&self) -> usize {
        self.weights.dim().0
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Grayscale heatmap (weights scaled by the max) for visual audit.
    pub fn save_heatmap(&self, path: &Path) -> Result<(), BlurError> {
        let peak = self.weights.iter().cloned().fold(0.0f64, f64::max);
        let size = self.size();
        let img = Image::<f64>::from_fn(size, size, 1, |y, x, _| {
            if peak > 0.0 {
                self.weights[[y, x]] / peak
            } else {
                0.0
            }
        })?;
        img.save(path)?;
        Ok(())
    }

    /// Flat text grid (one row per line, full precision) for numeric audit.
    pub fn write_text(&self, path: &Path) -> Result<(), std::io::Error> {
        let mut out = String::new();
        for row in self.weights.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

/// Splat a continuous path onto a `size`x`size` grid with bilinear weights
/// and normalize the accumulated mass to 1. Coordinates are taken relative
/// to the grid center; `generate_trajectory` already centers its output.
pub fn trajectory_to_kernel(path: &[[f64; 2]], size: usize) -> Result<BlurKernel, BlurError> {
    if size % 2 == 0 || size == 0 {
        return Err(BlurError::BadKernelSize { got: size });
    }
    if path.is_empty() {
        return Err(BlurError::BadSteps { got: 0 });
    }
    let center = (size as f64 - 1.0) / 2.0;

    let mut acc = Array2::<f64>::zeros((size, size));
    let mut total = 0.0;
    for pt in path {
        let x = pt[0] + center;
        let y = pt[1] + center;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let gy = y0 as i64 + dy;
                let gx = x0 as i64 + dx;
                let w = wy * wx;
                if w > 0.0 && (0..size as i64).contains(&gy) && (0..size as i64).contains(&gx) {
                    acc[[gy as usize, gx as usize]] += w;
                    total += w;
                }
            }
        }
    }
    if total <= 0.0 {
        return Err(BlurError::PathOutsideGrid { size });
    }
    acc.mapv_inplace(|v| v / total);
    BlurKernel::new(acc)
}

/// Mirror an out-of-range index back into [0, n) without repeating the edge
/// sample (reflect-101). Degenerates to clamping for n == 1.
pub fn mirror_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Same-size 2D convolution (kernel flipped) with reflect-101 padding,
/// applied per channel. Accumulates in f64; output is *not* clamped, so
/// linearity holds exactly for test oracles.
pub fn convolve_same_reflect<S: Real>(img: &Image<S>, kernel: &BlurKernel) -> Array3<S> {
    let (h, w, c) = img.dim();
    let k = kernel.size();
    let half = (k / 2) as i64;
    let kw = kernel.weights();
    let mut out = Array3::<S>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    let sy = mirror_index(y as i64 + half - ky as i64, h);
                    for kx in 0..k {
                        let sx = mirror_index(x as i64 + half - kx as i64, w);
                        acc += kw[[ky, kx]] * img.get(sy, sx, ch).as_f64();
                    }
                }
                out[[y, x, ch]] = S::of_f64(acc);
            }
        }
    }
    out
}

/// Degradation model: convolve, add seeded Gaussian noise, clamp to [0, 1].
pub fn apply_blur<S: Real>(
    img: &Image<S>,
    kernel: &BlurKernel,
    noise: &NoiseSpec,
) -> Result<Image<S>, BlurError> {
    if !noise.sigma.is_finite() || noise.sigma < 0.0 {
        return Err(BlurError::BadSigma { got: noise.sigma });
    }
    let mut out = convolve_same_reflect(img, kernel);
    if noise.sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        // Draw order matches the (h, w, c) memory layout.
        for v in out.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += S::of_f64(noise.sigma * n);
        }
    }
    out.mapv_inplace(|v| v.max(S::zero()).min(S::one()));
    Ok(Image::new(out)?)
}

/// Full synthesis for one image: trajectory, exposure-trimmed kernel, blur.
/// Returns the degraded image and the kernel for audit.
pub fn synth_pair<S: Real>(
    sharp: &Image<S>,
    traj: &TrajectoryParams,
    kernel_size: usize,
    noise: &NoiseSpec,
) -> Result<(Image<S>, BlurKernel), BlurError> {
    let path = generate_trajectory(traj)?;
    let used = ((traj.exposure_fraction * path.len() as f64).ceil() as usize)
        .clamp(1, path.len());
    let kernel = trajectory_to_kernel(&path[..used], kernel_size)?;
    let blurred = apply_blur(sharp, &kernel, noise)?;
    Ok((blurred, kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn still_params(seed: u64) -> TrajectoryParams {
        TrajectoryParams {
            num_steps: 50,
            exposure_fraction: 1.0,
            impulse_prob: 0.0,
            anxiety: 0.0,
            max_extent: 10.0,
            seed,
        }
    }

    #[test]
    fn still_camera_path_collapses_to_a_point() {
        let pts = generate_trajectory(&still_params(3)).unwrap();
        assert_eq!(pts.len(), 50);
        for p in &pts {
            assert_eq!(*p, pts[0]);
        }
    }

    #[test]
    fn trajectory_is_deterministic_and_seed_sensitive() {
        let p = TrajectoryParams::new(11);
        let a = generate_trajectory(&p).unwrap();
        let b = generate_trajectory(&p).unwrap();
        assert_eq!(a, b);
        let c = generate_trajectory(&TrajectoryParams::new(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bounding_box_respects_max_extent_over_many_seeds() {
        for seed in 0..1000u64 {
            let p = TrajectoryParams {
                num_steps: 200,
                max_extent: 9.0,
                ..TrajectoryParams::new(seed)
            };
            let pts = generate_trajectory(&p).unwrap();
            let (min_x, max_x) = minmax(pts.iter().map(|p| p[0]));
            let (min_y, max_y) = minmax(pts.iter().map(|p| p[1]));
            assert!(max_x - min_x <= 9.0 + 1e-9, "seed {seed}");
            assert!(max_y - min_y <= 9.0 + 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn parameter_validation_errors() {
        let mut p = TrajectoryParams::new(0);
        p.num_steps = 0;
        assert!(matches!(generate_trajectory(&p), Err(BlurError::BadSteps { .. })));
        let mut p = TrajectoryParams::new(0);
        p.exposure_fraction = 0.0;
        assert!(matches!(generate_trajectory(&p), Err(BlurError::BadExposure { .. })));
        let mut p = TrajectoryParams::new(0);
        p.anxiety = -1.0;
        assert!(matches!(generate_trajectory(&p), Err(BlurError::BadParam { .. })));
        let mut p = TrajectoryParams::new(0);
        p.impulse_prob = 1.5;
        assert!(matches!(
            generate_trajectory(&p),
            Err(BlurError::BadImpulseProb { .. })
        ));
    }

    #[test]
    fn single_point_at_grid_center_is_a_delta() {
        let k = trajectory_to_kernel(&[[0.0, 0.0]], 5).unwrap();
        assert_eq!(k.weights()[[2, 2]], 1.0);
        assert_abs_diff_eq!(k.weights().sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn half_pixel_offset_splits_mass_between_adjacent_cells() {
        let k = trajectory_to_kernel(&[[0.5, 0.0]], 5).unwrap();
        assert_abs_diff_eq!(k.weights()[[2, 2]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(k.weights()[[2, 3]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(k.weights().sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn path_outside_grid_is_reported() {
        assert!(matches!(
            trajectory_to_kernel(&[], 5),
            Err(BlurError::BadSteps { .. })
        ));
        let far = [[-100.0, 0.0], [100.0, 0.0]];
        let err = trajectory_to_kernel(&far, 3);
        assert!(matches!(err, Err(BlurError::PathOutsideGrid { .. })));
    }

    #[test]
    fn generated_paths_are_centered_for_the_rasterizer() {
        let p = TrajectoryParams {
            num_steps: 300,
            max_extent: 6.0,
            ..TrajectoryParams::new(77)
        };
        let pts = generate_trajectory(&p).unwrap();
        let (min_x, max_x) = minmax(pts.iter().map(|p| p[0]));
        let (min_y, max_y) = minmax(pts.iter().map(|p| p[1]));
        assert_abs_diff_eq!(min_x + max_x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(min_y + max_y, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn kernel_validation() {
        let mut w = Array2::zeros((3, 3));
        w[[0, 0]] = 0.5;
        assert!(matches!(
            BlurKernel::new(w.clone()),
            Err(BlurError::NotNormalized { .. })
        ));
        w[[1, 1]] = 0.6;
        w[[0, 0]] = 0.4;
        assert!(BlurKernel::new(w.clone()).is_ok());
        w[[0, 1]] = -0.1;
        assert!(matches!(
            BlurKernel::new(w),
            Err(BlurError::NegativeWeight { .. })
        ));
        assert!(matches!(
            BlurKernel::delta(4),
            Err(BlurError::BadKernelSize { .. })
        ));
    }

    #[test]
    fn delta_kernel_is_identity_without_noise() {
        let img = Image::<f64>::from_fn(8, 9, 3, |y, x, c| {
            ((y * 31 + x * 7 + c) % 19) as f64 / 18.0
        })
        .unwrap();
        let k = BlurKernel::delta(5).unwrap();
        let out = apply_blur(&img, &k, &NoiseSpec::none()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn uniform_3x3_center_pixel_is_the_mean_of_nine() {
        let img = Image::<f64>::from_fn(3, 3, 1, |y, x, _| ((y * 3 + x) as f64) / 10.0).unwrap();
        let k = BlurKernel::uniform(3).unwrap();
        let out = convolve_same_reflect(&img, &k);
        let mean = img.data().iter().sum::<f64>() / 9.0;
        assert_abs_diff_eq!(out[[1, 1, 0]], mean, epsilon = 1e-12);
    }

    #[test]
    fn constant_image_is_invariant_under_any_kernel() {
        let img = Image::<f64>::constant(10, 12, 3, 0.37).unwrap();
        let path = generate_trajectory(&TrajectoryParams {
            num_steps: 300,
            max_extent: 5.0,
            ..TrajectoryParams::new(5)
        })
        .unwrap();
        let k = trajectory_to_kernel(&path, 9).unwrap();
        let out = apply_blur(&img, &k, &NoiseSpec::none()).unwrap();
        for &v in out.data().iter() {
            assert_abs_diff_eq!(v, 0.37, epsilon = 1e-6);
        }
    }

    #[test]
    fn convolution_is_linear_before_clamping() {
        let a = Image::<f64>::from_fn(7, 7, 1, |y, x, _| ((y * 7 + x) % 13) as f64 / 26.0).unwrap();
        let b = Image::<f64>::from_fn(7, 7, 1, |y, x, _| ((y * 5 + x * 2) % 11) as f64 / 22.0)
            .unwrap();
        let k = BlurKernel::uniform(3).unwrap();
        let sum = Image::new(a.data() + b.data()).unwrap();
        let conv_sum = convolve_same_reflect(&sum, &k);
        let sum_conv = convolve_same_reflect(&a, &k) + convolve_same_reflect(&b, &k);
        for (u, v) in conv_sum.iter().zip(sum_conv.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_is_preserved_when_the_border_band_is_constant() {
        // With a constant band wider than the kernel radius, reflection
        // reproduces the band exactly, so unit kernel mass preserves the
        // image mean to rounding error.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = Image::<f64>::from_fn(32, 32, 1, |y, x, _| {
            if (8..24).contains(&y) && (8..24).contains(&x) {
                rng.gen::<f64>()
            } else {
                0.4
            }
        })
        .unwrap();
        let path = generate_trajectory(&TrajectoryParams {
            num_steps: 400,
            max_extent: 5.0,
            ..TrajectoryParams::new(2)
        })
        .unwrap();
        let k = trajectory_to_kernel(&path, 7).unwrap();
        let out = convolve_same_reflect(&img, &k);
        let m0 = img.data().mean().unwrap();
        let m1 = out.mean().unwrap();
        assert!((m0 - m1).abs() <= 1e-12, "mean drift {}", (m0 - m1).abs());
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let img = Image::<f64>::constant(6, 6, 1, 0.5).unwrap();
        let k = BlurKernel::delta(3).unwrap();
        let n = NoiseSpec { sigma: 0.1, seed: 42 };
        let a = apply_blur(&img, &k, &n).unwrap();
        let b = apply_blur(&img, &k, &n).unwrap();
        assert_eq!(a, b);
        let c = apply_blur(&img, &k, &NoiseSpec { sigma: 0.1, seed: 43 }).unwrap();
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(
            apply_blur(&img, &k, &NoiseSpec { sigma: -0.1, seed: 0 }),
            Err(BlurError::BadSigma { .. })
        ));
    }

    #[test]
    fn synth_pair_is_deterministic() {
        let sharp = Image::<f64>::from_fn(16, 16, 3, |y, x, c| {
            ((y * 13 + x * 5 + c * 3) % 29) as f64 / 28.0
        })
        .unwrap();
        let tp = TrajectoryParams {
            num_steps: 200,
            max_extent: 6.0,
            ..TrajectoryParams::new(9)
        };
        let noise = NoiseSpec { sigma: 0.01, seed: 9 };
        let (b1, k1) = synth_pair(&sharp, &tp, 9, &noise).unwrap();
        let (b2, k2) = synth_pair(&sharp, &tp, 9, &noise).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(k1, k2);
        assert_eq!(k1.size(), 9);
    }

    #[test]
    fn exposure_fraction_trims_the_splatted_path() {
        let tp_full = TrajectoryParams {
            num_steps: 400,
            max_extent: 6.0,
            ..TrajectoryParams::new(21)
        };
        let tp_short = TrajectoryParams {
            exposure_fraction: 0.25,
            ..tp_full.clone()
        };
        let sharp = Image::<f64>::from_fn(16, 16, 1, |y, x, _| {
            ((y * 3 + x * 11) % 17) as f64 / 16.0
        })
        .unwrap();
        let (_, k_full) = synth_pair(&sharp, &tp_full, 11, &NoiseSpec::none()).unwrap();
        let (_, k_short) = synth_pair(&sharp, &tp_short, 11, &NoiseSpec::none()).unwrap();
        assert_ne!(k_full, k_short);
    }

    #[test]
    fn mirror_index_folds_reflect_101() {
        assert_eq!(mirror_index(-1, 4), 1);
        assert_eq!(mirror_index(-2, 4), 2);
        assert_eq!(mirror_index(4, 4), 2);
        assert_eq!(mirror_index(5, 4), 1);
        assert_eq!(mirror_index(0, 1), 0);
        assert_eq!(mirror_index(-7, 1), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn random_trajectory_kernels_are_normalized(seed in 0u64..5000) {
            let p = TrajectoryParams { num_steps: 150, max_extent: 6.0, ..TrajectoryParams::new(seed) };
            let path = generate_trajectory(&p).unwrap();
            let k = trajectory_to_kernel(&path, 9).unwrap();
            prop_assert!((k.weights().sum() - 1.0).abs() <= 1e-6);
            prop_assert!(k.weights().iter().all(|&w| w >= 0.0));
        }

        #[test]
        fn blur_output_stays_in_range(seed in 0u64..1000, sigma in 0.0f64..0.2) {
            let img = Image::<f64>::from_fn(8, 8, 1, |y, x, _| {
                (((y * 8 + x) as u64 ^ seed) % 256) as f64 / 255.0
            }).unwrap();
            let k = BlurKernel::uniform(3).unwrap();
            let out = apply_blur(&img, &k, &NoiseSpec { sigma, seed }).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
