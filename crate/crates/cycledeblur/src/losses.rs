//! Training objective: adversarial terms on discriminator score grids plus
//! feature-space cycle terms, combined as `adv + alpha * cycle`.
//!
//! The default adversarial flavor regresses scores toward target values
//! (least squares); a sigmoid log-loss flavor is kept for comparison runs.
//! Cycle terms compare feature maps of generated images either against their
//! paired ground truth (default), against round-trip reconstructions, or
//! both.

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perceptual::{
    perceptual_distance, perceptual_distance_grad, FeatureDist, FeatureExtractor, PerceptualError,
};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("reconstruction cycle mode needs round-trip images")]
    MissingReconstruction,
    #[error(transparent)]
    Perceptual(#[from] PerceptualError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvKind {
    LeastSquares,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleMode {
    Paired,
    Reconstruction,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub adv_kind: AdvKind,
    pub cycle_dist: FeatureDist,
    pub cycle_mode: CycleMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            adv_kind: AdvKind::LeastSquares,
            cycle_dist: FeatureDist::L2,
            cycle_mode: CycleMode::Paired,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0) {
            return Err(format!("loss alpha must be >= 0, got {}", self.alpha));
        }
        Ok(())
    }
}

/// One logged training step; `total = adv1 + adv2 + alpha*(cycle1 + cycle2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub adv1: f64,
    pub adv2: f64,
    pub cycle1: f64,
    pub cycle2: f64,
    pub total: f64,
    pub d_steps: usize,
}

impl LossReport {
    /// Deviation from the decomposition identity.
    pub fn identity_gap(&self, alpha: f64) -> f64 {
        (self.total - (self.adv1 + self.adv2 + alpha * (self.cycle1 + self.cycle2))).abs()
    }
}

fn mean<S: Real>(x: &Array4<S>) -> S {
    x.iter().copied().sum::<S>() / S::of_f64(x.len() as f64)
}

/// ln(1 + e^x) without overflow.
fn softplus<S: Real>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Discriminator objective: push real scores toward 1 and fake scores toward
/// 0 (least squares), or the equivalent sigmoid log-loss. Both carry the
/// conventional 1/2 factor per side.
pub fn adv_loss_d<S: Real>(real: &Array4<S>, fake: &Array4<S>, kind: AdvKind) -> S {
    let half = S::of_f64(0.5);
    match kind {
        AdvKind::LeastSquares => {
            let r = mean(&real.mapv(|v| (v - S::one()) * (v - S::one())));
            let f = mean(&fake.mapv(|v| v * v));
            half * r + half * f
        }
        AdvKind::CrossEntropy => {
            let r = mean(&real.mapv(|v| softplus(-v)));
            let f = mean(&fake.mapv(softplus));
            half * r + half * f
        }
    }
}

/// `adv_loss_d` with gradients for both score grids.
pub fn adv_loss_d_grad<S: Real>(
    real: &Array4<S>,
    fake: &Array4<S>,
    kind: AdvKind,
) -> (S, Array4<S>, Array4<S>) {
    let loss = adv_loss_d(real, fake, kind);
    let nr = S::of_f64(real.len() as f64);
    let nf = S::of_f64(fake.len() as f64);
    let half = S::of_f64(0.5);
    let (d_real, d_fake) = match kind {
        AdvKind::LeastSquares => (
            real.mapv(|v| (v - S::one()) / nr),
            fake.mapv(|v| v / nf),
        ),
        AdvKind::CrossEntropy => (
            real.mapv(|v| half * (sigmoid(v) - S::one()) / nr),
            fake.mapv(|v| half * sigmoid(v) / nf),
        ),
    };
    (loss, d_real, d_fake)
}

/// Generator-side adversarial objective: push fake scores toward 1.
pub fn adv_loss_g<S: Real>(fake: &Array4<S>, kind: AdvKind) -> S {
    match kind {
        AdvKind::LeastSquares => mean(&fake.mapv(|v| (v - S::one()) * (v - S::one()))),
        AdvKind::CrossEntropy => mean(&fake.mapv(|v| softplus(-v))),
    }
}

/// `adv_loss_g` with the gradient for the fake score grid.
pub fn adv_loss_g_grad<S: Real>(fake: &Array4<S>, kind: AdvKind) -> (S, Array4<S>) {
    let loss = adv_loss_g(fake, kind);
    let n = S::of_f64(fake.len() as f64);
    let two = S::one() + S::one();
    let d_fake = match kind {
        AdvKind::LeastSquares => fake.mapv(|v| two * (v - S::one()) / n),
        AdvKind::CrossEntropy => fake.mapv(|v| (sigmoid(v) - S::one()) / n),
    };
    (loss, d_fake)
}

/// One feature-space cycle term: distance between the extractor's view of a
/// target image and of a generated image, with the gradient flowing into the
/// generated image only.
pub fn cycle_term_grad<S: Real>(
    fe: &FeatureExtractor<S>,
    target: &Array4<S>,
    generated: &Array4<S>,
    dist: FeatureDist,
) -> Result<(S, Array4<S>), LossError> {
    let target_feat = fe.forward(target)?;
    let (gen_feat, tape) = fe.forward_train(generated)?;
    let (value, d_feat) = perceptual_distance_grad(&gen_feat, &target_feat, dist)?;
    let d_generated = fe.backward_data(&tape, &d_feat);
    Ok((value, d_generated))
}

/// Images entering the cycle terms for one batch. `fake_sharp` is the
/// deblurred result, `fake_blur` the re-blurred one; the `recon_*` round
/// trips are only needed in reconstruction modes.
pub struct CycleBatch<'a, S: Real> {
    pub blur: &'a Array4<S>,
    pub sharp: &'a Array4<S>,
    pub fake_sharp: &'a Array4<S>,
    pub fake_blur: &'a Array4<S>,
    pub recon_blur: Option<&'a Array4<S>>,
    pub recon_sharp: Option<&'a Array4<S>>,
}

/// Scalar cycle terms. Paired mode compares each generated image with its
/// ground-truth counterpart; reconstruction mode compares each input with
/// its round trip; both sums the two.
pub fn cycle_losses<S: Real>(
    fe: &FeatureExtractor<S>,
    batch: &CycleBatch<'_, S>,
    cfg: &LossConfig,
) -> Result<(S, S), LossError> {
    let dist = cfg.cycle_dist;
    let paired = || -> Result<(S, S), LossError> {
        let c1 = perceptual_distance(&fe.forward(batch.sharp)?, &fe.forward(batch.fake_sharp)?, dist)?;
        let c2 = perceptual_distance(&fe.forward(batch.blur)?, &fe.forward(batch.fake_blur)?, dist)?;
        Ok((c1, c2))
    };
    let recon = || -> Result<(S, S), LossError> {
        let rb = batch.recon_blur.ok_or(LossError::MissingReconstruction)?;
        let rs = batch.recon_sharp.ok_or(LossError::MissingReconstruction)?;
        let c1 = perceptual_distance(&fe.forward(batch.blur)?, &fe.forward(rb)?, dist)?;
        let c2 = perceptual_distance(&fe.forward(batch.sharp)?, &fe.forward(rs)?, dist)?;
        Ok((c1, c2))
    };
    match cfg.cycle_mode {
        CycleMode::Paired => paired(),
        CycleMode::Reconstruction => recon(),
        CycleMode::Both => {
            let (p1, p2) = paired()?;
            let (r1, r2) = recon()?;
            Ok((p1 + r1, p2 + r2))
        }
    }
}

/// Combined objective.
pub fn total_loss<S: Real>(adv: S, cycle: S, alpha: S) -> S {
    adv + alpha * cycle
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(v: f64) -> Array4<f64> {
        Array4::from_elem((2, 1, 3, 3), v)
    }

    fn rand_grid(seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((2, 1, 3, 3), |_| rng.gen::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn least_squares_discriminator_plug_ins() {
        assert_eq!(adv_loss_d(&grid(1.0), &grid(0.0), AdvKind::LeastSquares), 0.0);
        assert_abs_diff_eq!(
            adv_loss_d(&grid(0.0), &grid(1.0), AdvKind::LeastSquares),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            adv_loss_d(&grid(0.5), &grid(0.5), AdvKind::LeastSquares),
            0.25,
            epsilon = 1e-12
        );
    }

    #[test]
    fn least_squares_generator_plug_ins() {
        assert_eq!(adv_loss_g(&grid(1.0), AdvKind::LeastSquares), 0.0);
        assert_abs_diff_eq!(adv_loss_g(&grid(0.0), AdvKind::LeastSquares), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            adv_loss_g(&grid(0.5), AdvKind::LeastSquares),
            0.25,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cross_entropy_values_are_nonnegative_and_sane() {
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(
            adv_loss_d(&grid(0.0), &grid(0.0), AdvKind::CrossEntropy),
            ln2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(adv_loss_g(&grid(0.0), AdvKind::CrossEntropy), ln2, epsilon = 1e-12);
        for seed in 0..5 {
            let r = rand_grid(seed);
            let f = rand_grid(seed + 50);
            for kind in [AdvKind::LeastSquares, AdvKind::CrossEntropy] {
                assert!(adv_loss_d(&r, &f, kind) >= 0.0);
                assert!(adv_loss_g(&f, kind) >= 0.0);
            }
        }
        // Extreme scores stay finite through the stabilized log-loss.
        assert!(adv_loss_d(&grid(500.0), &grid(-500.0), AdvKind::CrossEntropy).is_finite());
        assert!(adv_loss_g(&grid(-500.0), AdvKind::CrossEntropy).is_finite());
    }

    #[test]
    fn discriminator_loss_balances_at_one_half() {
        let h = 1e-6;
        let at = |s: f64| adv_loss_d(&grid(s), &grid(s), AdvKind::LeastSquares);
        let slope = (at(0.5 + h) - at(0.5 - h)) / (2.0 * h);
        assert_abs_diff_eq!(slope, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn adversarial_gradients_match_finite_differences() {
        let real = rand_grid(1);
        let fake = rand_grid(2);
        let h = 1e-6;
        for kind in [AdvKind::LeastSquares, AdvKind::CrossEntropy] {
            let (loss, d_real, d_fake) = adv_loss_d_grad(&real, &fake, kind);
            assert_abs_diff_eq!(loss, adv_loss_d(&real, &fake, kind), epsilon = 1e-12);
            for idx in [[0, 0, 0, 0], [1, 0, 2, 2], [0, 0, 1, 2]] {
                let mut rp = real.clone();
                rp[idx] += h;
                let mut rm = real.clone();
                rm[idx] -= h;
                let num = (adv_loss_d(&rp, &fake, kind) - adv_loss_d(&rm, &fake, kind)) / (2.0 * h);
                assert_abs_diff_eq!(d_real[idx], num, epsilon = 1e-8);

                let mut fp = fake.clone();
                fp[idx] += h;
                let mut fm = fake.clone();
                fm[idx] -= h;
                let num = (adv_loss_d(&real, &fp, kind) - adv_loss_d(&real, &fm, kind)) / (2.0 * h);
                assert_abs_diff_eq!(d_fake[idx], num, epsilon = 1e-8);
            }
            let (loss_g, dg) = adv_loss_g_grad(&fake, kind);
            assert_abs_diff_eq!(loss_g, adv_loss_g(&fake, kind), epsilon = 1e-12);
            for idx in [[0, 0, 0, 0], [1, 0, 1, 1]] {
                let mut fp = fake.clone();
                fp[idx] += h;
                let mut fm = fake.clone();
                fm[idx] -= h;
                let num = (adv_loss_g(&fp, kind) - adv_loss_g(&fm, kind)) / (2.0 * h);
                assert_abs_diff_eq!(dg[idx], num, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn total_loss_plug_ins() {
        assert_eq!(total_loss(1.0, 0.5, 10.0), 6.0);
        assert_eq!(total_loss(0.7, 123.0, 0.0), 0.7);
        assert_eq!(total_loss(0.25, 2.5, 10.0), 25.25);
    }

    #[test]
    fn loss_report_identity() {
        let rep = LossReport {
            step: 1,
            epoch: 0,
            lr: 2e-3,
            adv1: 0.5,
            adv2: 0.25,
            cycle1: 0.1,
            cycle2: 0.2,
            total: 0.5 + 0.25 + 10.0 * 0.3,
            d_steps: 10,
        };
        assert!(rep.identity_gap(10.0) < 1e-6);
        let line = serde_json::to_string(&rep).unwrap();
        let back: LossReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rep);
    }

    fn fixture(seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((1, 3, 16, 16), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn cycle_losses_vanish_at_equality() {
        let fe = FeatureExtractor::<f64>::reduced(3);
        let blur = fixture(20);
        let sharp = fixture(21);
        let cfg = LossConfig::default();
        let batch = CycleBatch {
            blur: &blur,
            sharp: &sharp,
            fake_sharp: &sharp,
            fake_blur: &blur,
            recon_blur: None,
            recon_sharp: None,
        };
        let (c1, c2) = cycle_losses(&fe, &batch, &cfg).unwrap();
        assert_eq!(c1, 0.0);
        assert_eq!(c2, 0.0);

        let cfg_recon = LossConfig {
            cycle_mode: CycleMode::Reconstruction,
            ..cfg
        };
        let batch = CycleBatch {
            blur: &blur,
            sharp: &sharp,
            fake_sharp: &sharp,
            fake_blur: &blur,
            recon_blur: Some(&blur),
            recon_sharp: Some(&sharp),
        };
        let (c1, c2) = cycle_losses(&fe, &batch, &cfg_recon).unwrap();
        assert_eq!((c1, c2), (0.0, 0.0));
    }

    #[test]
    fn reconstruction_mode_requires_round_trips() {
        let fe = FeatureExtractor::<f64>::reduced(3);
        let blur = fixture(22);
        let sharp = fixture(23);
        let cfg = LossConfig {
            cycle_mode: CycleMode::Reconstruction,
            ..LossConfig::default()
        };
        let batch = CycleBatch {
            blur: &blur,
            sharp: &sharp,
            fake_sharp: &sharp,
            fake_blur: &blur,
            recon_blur: None,
            recon_sharp: None,
        };
        assert!(matches!(
            cycle_losses(&fe, &batch, &cfg),
            Err(LossError::MissingReconstruction)
        ));
    }

    /// Pixel-for-pixel reimplementation of the reduced extractor plus mean
    /// squared feature distance, with plain nested loops.
    fn naive_reduced_distance(seed: u64, a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut in_ch = 3;
        for &out_ch in &[8usize, 16, 32] {
            let std = 1.0 / ((in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let mut w = vec![0.0; out_ch * in_ch * 9];
            for v in w.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            weights.push((w, in_ch, out_ch));
            in_ch = out_ch;
        }
        let forward = |x: &Array4<f64>| -> Vec<Vec<Vec<f64>>> {
            let (_, c0, mut hh, mut ww) = x.dim();
            let mut planes: Vec<Vec<Vec<f64>>> = (0..c0)
                .map(|c| {
                    (0..hh)
                        .map(|y| (0..ww).map(|xx| x[[0, c, y, xx]]).collect())
                        .collect()
                })
                .collect();
            for (w, cin, cout) in &weights {
                let mut out = vec![vec![vec![0.0; ww]; hh]; *cout];
                for co in 0..*cout {
                    for y in 0..hh {
                        for xx in 0..ww {
                            let mut acc = 0.0;
                            for ci in 0..*cin {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = y as i64 + ky as i64 - 1;
                                        let ix = xx as i64 + kx as i64 - 1;
                                        if iy >= 0
                                            && iy < hh as i64
                                            && ix >= 0
                                            && ix < ww as i64
                                        {
                                            acc += w[((co * cin + ci) * 3 + ky) * 3 + kx]
                                                * planes[ci][iy as usize][ix as usize];
                                        }
                                    }
                                }
                            }
                            out[co][y][xx] = acc.max(0.0);
                        }
                    }
                }
                let (ph, pw) = (hh / 2, ww / 2);
                let mut pooled = vec![vec![vec![0.0; pw]; ph]; *cout];
                for co in 0..*cout {
                    for y in 0..ph {
                        for xx in 0..pw {
                            pooled[co][y][xx] = out[co][2 * y][2 * xx]
                                .max(out[co][2 * y][2 * xx + 1])
                                .max(out[co][2 * y + 1][2 * xx])
                                .max(out[co][2 * y + 1][2 * xx + 1]);
                        }
                    }
                }
                planes = pooled;
                hh = ph;
                ww = pw;
            }
            planes
        };
        let fa = forward(a);
        let fb = forward(b);
        let mut total = 0.0;
        let mut count = 0usize;
        for (pa, pb) in fa.iter().zip(fb.iter()) {
            for (ra, rb) in pa.iter().zip(pb.iter()) {
                for (va, vb) in ra.iter().zip(rb.iter()) {
                    total += (va - vb) * (va - vb);
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn paired_cycle_value_matches_naive_oracle_and_frozen_constant() {
        let seed = 3;
        let fe = FeatureExtractor::<f64>::reduced(seed);
        let sharp = fixture(30);
        let fake_sharp = fixture(31);
        let f1 = fe.forward(&sharp).unwrap();
        let f2 = fe.forward(&fake_sharp).unwrap();
        let module_value = perceptual_distance(&f1, &f2, FeatureDist::L2).unwrap();
        let oracle = naive_reduced_distance(seed, &sharp, &fake_sharp);
        assert_abs_diff_eq!(module_value, oracle, epsilon = 1e-9);
        // Regression pin; recorded from the oracle above.
        assert_abs_diff_eq!(module_value, FROZEN_PAIRED_CYCLE, epsilon = 1e-9);
    }

    const FROZEN_PAIRED_CYCLE: f64 = 0.029472535505291254;
}
